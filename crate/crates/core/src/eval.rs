//! Training phases, baseline evaluation, metrics and the run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    aggregate_prior, collect_windows, evaluate_ensemble, train_ensemble, AdaptationEnsemble, CollectConfig,
    EnsembleReport, EnsembleTrainConfig, EstimatorMode, OnlineEstimator, ParamEstimate, PriorQuerySet, Source,
    DEFAULT_MEMBERS, DEFAULT_WINDOW,
};
use crate::agent::Agent;
use crate::env::{
    Conditioning, EnvRuntime, Featurizer, PushEnv, PushVecEnv, RewardWeights, Shaping, StartSpec, TaskConfig, ACTION_DIM,
    ACTOR_DIM, ACTOR_FEAT_DIM, COND_INDEX, CRITIC_FEAT_DIM,
};
use crate::error::{Error, Result};
use crate::learn::ppo::IterationStats;
use crate::learn::{config_hash, Checkpoint, PpoConfig, PpoTrainer};
use crate::math::Pose2;
use crate::record::{EpisodeRecord, StepTrace};
use crate::sim::SimParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fused,
    Privileged,
    PriorOnly,
    RmaOnly,
    Dr,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fused,
        Method::Privileged,
        Method::PriorOnly,
        Method::RmaOnly,
        Method::Dr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fused => "fused",
            Method::Privileged => "privileged",
            Method::PriorOnly => "prior_only",
            Method::RmaOnly => "rma_only",
            Method::Dr => "dr",
        }
    }
}

/// One rung of the biased-prior ladder: prior mean and sigma (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub value: f64,
    pub sigma: f64,
}

pub fn default_ladder() -> Vec<Rung> {
    [(0.06, 0.01), (0.04, 0.02), (0.02, 0.04), (0.0, 0.06), (-0.02, 0.08)]
        .iter()
        .map(|&(value, sigma)| Rung { value, sigma })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub task: TaskConfig,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub ppo: PpoConfig,
    /// Training-only reward shaping; the environment reward is untouched.
    #[serde(default)]
    pub shaping: Shaping,
    /// Reward weights used during PPO in place of `task.reward`.
    #[serde(default = "default_train_reward")]
    pub train_reward: Option<RewardWeights>,
    /// Conditioning noise for the fine-tuning phase (m).
    pub phase15_sigma: f64,
    pub finetune_updates: usize,
    #[serde(default = "default_members")]
    pub ensemble_n: usize,
    #[serde(default = "default_window")]
    pub window_k: usize,
    #[serde(default)]
    pub ensemble: EnsembleTrainConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    /// Prior query records; relative paths resolve against the config file.
    pub prior_file: PathBuf,
    pub seeds: Vec<u64>,
    pub method: Method,
    pub trials: usize,
    pub orientation_grid_deg: f64,
    /// True CoM used during evaluation (m).
    pub eval_true_com: f64,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<Rung>,
    #[serde(default = "default_true")]
    pub save_traces: bool,
    /// PPO state is written every this many updates.
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
}

fn default_members() -> usize {
    DEFAULT_MEMBERS
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

/// Success bonus and action cost only; progress comes from the shaping.
pub fn default_train_reward() -> Option<RewardWeights> {
    Some(RewardWeights {
        pos: 0.0,
        orient: 0.0,
        ..RewardWeights::default()
    })
}

fn default_true() -> bool {
    true
}

fn default_ckpt_every() -> usize {
    50
}

impl RunConfig {
    /// T-block run with the full training budget.
    pub fn tblock(name: &str, prior_file: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            name: name.into(),
            task: TaskConfig::tblock(),
            sim: SimParams::default(),
            ppo: PpoConfig {
                num_envs: 128,
                rollout_steps: 32,
                minibatch: 1024,
                lr: 1e-3,
                epochs: 5,
                ent_coef: 0.005,
                reward_scale: 1.0,
                actor_hidden: vec![64, 64],
                critic_hidden: vec![64, 64],
                updates: 1500,
                ..PpoConfig::default()
            },
            shaping: Shaping::default(),
            train_reward: default_train_reward(),
            phase15_sigma: 0.015,
            finetune_updates: 400,
            ensemble_n: DEFAULT_MEMBERS,
            window_k: DEFAULT_WINDOW,
            ensemble: EnsembleTrainConfig {
                hidden: vec![64, 64],
                epochs: 50,
                ..EnsembleTrainConfig::default()
            },
            collect: CollectConfig {
                episodes: 4000,
                stride: 2,
                ..CollectConfig::default()
            },
            prior_file: prior_file.into(),
            seeds: vec![0, 1, 2],
            method: Method::Fused,
            trials: 48,
            orientation_grid_deg: 45.0,
            eval_true_com: 0.06,
            ladder: default_ladder(),
            save_traces: true,
            checkpoint_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.sim.validate()?;
        self.ppo.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("run name '{}' must be a plain file name", self.name));
        }
        if !(self.phase15_sigma >= 0.0) {
            return bad(format!("phase15_sigma {} must be >= 0", self.phase15_sigma));
        }
        if self.ensemble_n < 2 {
            return Err(Error::EnsembleTooSmall(self.ensemble_n));
        }
        if self.window_k == 0 {
            return bad("window_k must be >= 1".into());
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.orientation_grid_deg > 0.0 && self.orientation_grid_deg <= 360.0) {
            return bad(format!("orientation grid step {} must be in (0, 360]", self.orientation_grid_deg));
        }
        if !self.eval_true_com.is_finite() {
            return bad("eval_true_com must be finite".into());
        }
        for r in &self.ladder {
            if !(r.sigma > 0.0) || !r.value.is_finite() {
                return Err(Error::InvalidVariance(r.sigma));
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        Ok(())
    }

    /// Hash of the config with the prior entering by content, so the same
    /// run reached through different paths hashes the same.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["prior_file"] = fs::read_to_string(&self.prior_file)
            .map(serde_json::Value::from)
            .unwrap_or(serde_json::Value::Null);
        config_hash(&v)
    }

    /// Reads and validates a config; `prior_file` becomes absolute.
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if cfg.prior_file.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.prior_file = dir.join(&cfg.prior_file);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prior(&self) -> Result<ParamEstimate> {
        aggregate_prior(&PriorQuerySet::load(&self.prior_file)?)
    }

    /// Start orientations (rad) on the configured grid.
    pub fn orientation_grid(&self) -> Vec<f64> {
        let n = (360.0 / self.orientation_grid_deg).round().max(1.0) as usize;
        (0..n)
            .map(|i| (i as f64 * self.orientation_grid_deg).to_radians())
            .collect()
    }
}

/// `runs/<name>/{config.json, checkpoints/, metrics/, traces/}`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
}

pub const PHASE1: &str = "phase1";
pub const PHASE15: &str = "phase15";
pub const DR: &str = "dr";
pub const ENSEMBLE: &str = "ensemble";

impl RunDir {
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<RunDir> {
        let hash = cfg.hash()?;
        for sub in ["checkpoints", "metrics", "traces"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let dir = RunDir {
            root: root.to_path_buf(),
            hash,
        };
        let doc = serde_json::json!({ "config_hash": dir.hash, "config": cfg });
        dir.write(&dir.root.join("config.json"), &serde_json::to_string_pretty(&doc)?)?;
        Ok(dir)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn state(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}_state.json"))
    }

    pub fn metrics(&self, file: &str) -> PathBuf {
        self.root.join("metrics").join(file)
    }

    pub fn traces(&self, file: &str) -> PathBuf {
        self.root.join("traces").join(file)
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Serializes `value` into a JSON object alongside the config hash.
    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(m) = &mut v {
            m.insert("config_hash".into(), self.hash.clone().into());
        }
        self.write(path, &serde_json::to_string_pretty(&v)?)
    }

    /// CSV with a leading `# config_hash=` comment line.
    pub fn write_csv(&self, path: &Path, header: &str, rows: &[String]) -> Result<()> {
        let mut s = format!("# config_hash={}\n{header}\n", self.hash);
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        self.write(path, &s)
    }
}

/// Resumable phase state: learner, environments and the curve so far.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: String,
    pub target_updates: usize,
    pub trainer: PpoTrainer,
    pub envs: Vec<EnvRuntime>,
    pub curve: Vec<IterationStats>,
}

fn training_env(cfg: &RunConfig, conditioning: Conditioning, seed: u64) -> Result<PushVecEnv> {
    let mut task = cfg.task.clone();
    task.conditioning = conditioning;
    task.true_com = None;
    if let Some(w) = cfg.train_reward {
        task.reward = w;
    }
    // undiscounted potential difference, so progress is always rewarded
    Ok(PushVecEnv::new(&task, &cfg.sim, cfg.ppo.num_envs, seed)?.with_shaping(cfg.shaping, 1.0))
}

/// Runs PPO until `state.target_updates`, saving resumable state on the way.
fn run_ppo(dir: &RunDir, cfg: &RunConfig, state: &mut TrainState, venv: &mut PushVecEnv) -> Result<()> {
    let state_path = dir.state(&state.phase);
    while (state.trainer.updates as usize) < state.target_updates {
        let stats = match state.trainer.iterate(venv) {
            Ok(s) => s,
            Err(e @ (Error::NumericalError(_) | Error::SimulationDiverged { .. })) => {
                let dump = dir.root.join("checkpoints").join(format!("{}_diverged.json", state.phase));
                state.envs = venv.snapshot();
                dir.write_json(&dump, &*state)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.curve.push(stats);
        let u = state.trainer.updates as usize;
        if u % cfg.checkpoint_every == 0 || u == state.target_updates {
            state.envs = venv.snapshot();
            dir.write_json(&state_path, &*state)?;
        }
    }
    let rows: Vec<String> = state
        .curve
        .iter()
        .map(|s| {
            format!(
                "{},{},{:.6},{},{:.6},{:.6},{:.6}",
                s.update,
                s.env_steps,
                s.mean_reward,
                s.mean_episode_return.map_or(String::new(), |r| format!("{r:.6}")),
                s.ppo.policy_loss,
                s.ppo.value_loss,
                s.ppo.approx_kl
            )
        })
        .collect();
    dir.write_csv(
        &dir.metrics(&format!("{}_curve.csv", state.phase)),
        "update,env_steps,mean_reward,mean_episode_return,policy_loss,value_loss,approx_kl",
        &rows,
    )
}

fn load_state(path: &Path, phase: &str) -> Result<Option<TrainState>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let st: TrainState = serde_json::from_str(&text)?;
    if st.phase != phase {
        return Err(Error::DataError(format!("{} holds phase '{}'", path.display(), st.phase)));
    }
    Ok(Some(st))
}

fn save_agent(dir: &RunDir, name: &str, ac: &crate::learn::ActorCritic, cfg: &RunConfig) -> Result<Agent> {
    let agent = Agent {
        featurizer: Featurizer::new(&cfg.task, &cfg.sim),
        ac: ac.clone(),
    };
    agent.to_checkpoint(&dir.hash)?.save(&dir.checkpoint(name))?;
    Ok(agent)
}

pub fn load_agent(dir: &RunDir, name: &str) -> Result<Agent> {
    Agent::from_checkpoint(&Checkpoint::load(&dir.checkpoint(name))?)
}

/// Phase 1: PPO with the true CoM as conditioning. With `dr` the
/// conditioning channel is held at zero instead, giving the baseline.
pub fn train_phase1(dir: &RunDir, cfg: &RunConfig, seed: u64, dr: bool) -> Result<Agent> {
    let (name, conditioning) = if dr {
        (DR, Conditioning::None)
    } else {
        (PHASE1, Conditioning::GroundTruth)
    };
    let mut venv = training_env(cfg, conditioning, seed)?;
    let mut state = match load_state(&dir.state(name), name)? {
        Some(st) => {
            venv.restore(st.envs.clone())?;
            st
        }
        None => TrainState {
            phase: name.into(),
            target_updates: cfg.ppo.updates,
            trainer: PpoTrainer::new(
                cfg.ppo.clone(),
                ACTOR_FEAT_DIM,
                CRITIC_FEAT_DIM,
                ACTION_DIM,
                seed ^ 0x9e37_79b9_7f4a_7c15,
            )?,
            envs: Vec::new(),
            curve: Vec::new(),
        },
    };
    state.target_updates = cfg.ppo.updates;
    run_ppo(dir, cfg, &mut state, &mut venv)?;
    save_agent(dir, name, &state.trainer.ac, cfg)
}

/// Phase 1.5: continues from the phase-1 weights with noisy conditioning.
pub fn finetune(dir: &RunDir, cfg: &RunConfig, seed: u64, sigma: f64) -> Result<Agent> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("fine-tune sigma {sigma} must be >= 0")));
    }
    let mut venv = training_env(cfg, Conditioning::NoisyGroundTruth { sigma }, seed ^ 0x15)?;
    let mut state = match load_state(&dir.state(PHASE15), PHASE15)? {
        Some(st) => {
            venv.restore(st.envs.clone())?;
            st
        }
        None => {
            let base = load_agent(dir, PHASE1)?;
            let rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1515);
            TrainState {
                phase: PHASE15.into(),
                target_updates: cfg.finetune_updates,
                trainer: PpoTrainer::from_parts(cfg.ppo.clone(), base.ac, rng),
                envs: Vec::new(),
                curve: Vec::new(),
            }
        }
    };
    state.target_updates = cfg.finetune_updates;
    run_ppo(dir, cfg, &mut state, &mut venv)?;
    save_agent(dir, PHASE15, &state.trainer.ac, cfg)
}

/// Phase 2 outcome written to `metrics/ensemble_report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterReport {
    pub train_windows: usize,
    pub final_nll: Vec<f64>,
    pub heldout: EnsembleReport,
}

/// Phase 2: collects history windows with the frozen fine-tuned policy and
/// fits the ensemble. One in ten episodes is held out for the report.
pub fn train_adapters(dir: &RunDir, cfg: &RunConfig, seed: u64) -> Result<(AdaptationEnsemble, AdapterReport)> {
    let agent = load_agent(dir, PHASE15)?;
    let collect = CollectConfig { seed, ..cfg.collect.clone() };
    let data = collect_windows(&agent, &cfg.task, &cfg.sim, cfg.window_k, &collect)?;
    let (train, held) = data.split_by_episode(10);
    let mut ens = AdaptationEnsemble::new(
        cfg.ensemble_n,
        cfg.window_k,
        &cfg.ensemble.hidden,
        cfg.task.com_range,
        cfg.sim.d_max,
        seed ^ 0xada9,
    )?;
    let tc = EnsembleTrainConfig { seed, ..cfg.ensemble.clone() };
    let final_nll = train_ensemble(&mut ens, &train, &tc)?;
    let heldout = evaluate_ensemble(&ens, &held)?;
    let report = AdapterReport {
        train_windows: train.len(),
        final_nll,
        heldout,
    };
    ens.to_checkpoint(&dir.hash)?.save(&dir.checkpoint(ENSEMBLE))?;
    dir.write_json(&dir.metrics("ensemble_report.json"), &report)?;
    Ok((ens, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub episode_seed: u64,
    pub initial_theta: f64,
    pub success: bool,
    pub pos_err: f64,
    pub ang_err: f64,
    /// Completion time for successes (s).
    pub time: Option<f64>,
    /// Episode duration whether or not it succeeded (s).
    pub duration: f64,
    pub final_conditioned: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub method: Method,
    pub seed: u64,
    pub true_com: f64,
    pub prior: Option<Rung>,
    pub trials: usize,
    pub successes: usize,
    /// Percent.
    pub success_rate: f64,
    pub pos_err_mean: f64,
    pub pos_err_std: f64,
    pub ang_err_mean: f64,
    pub ang_err_std: f64,
    /// Over successful trials only; absent when nothing succeeded.
    pub time_mean: Option<f64>,
    pub time_std: Option<f64>,
    /// Over all trials, failures counted at their full duration.
    pub time_all_mean: f64,
    pub time_all_std: f64,
    pub records: Vec<TrialRecord>,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl MetricsSummary {
    pub fn from_records(method: Method, seed: u64, true_com: f64, prior: Option<Rung>, records: Vec<TrialRecord>) -> Self {
        let trials = records.len();
        let successes = records.iter().filter(|r| r.success).count();
        let pos: Vec<f64> = records.iter().map(|r| r.pos_err).collect();
        let ang: Vec<f64> = records.iter().map(|r| r.ang_err).collect();
        let times: Vec<f64> = records.iter().filter_map(|r| r.time).collect();
        let all: Vec<f64> = records.iter().map(|r| r.duration).collect();
        let (pm, ps) = mean_std(&pos);
        let (am, as_) = mean_std(&ang);
        let (tm, ts) = mean_std(&times);
        let (tam, tas) = mean_std(&all);
        MetricsSummary {
            method,
            seed,
            true_com,
            prior,
            trials,
            successes,
            success_rate: 100.0 * successes as f64 / trials as f64,
            pos_err_mean: pm,
            pos_err_std: ps,
            ang_err_mean: am,
            ang_err_std: as_,
            time_mean: (!times.is_empty()).then_some(tm),
            time_std: (!times.is_empty()).then_some(ts),
            time_all_mean: tam,
            time_all_std: tas,
            records,
        }
    }

    /// Sorted `(err_m, percentile)` pairs. Tied errors share the highest
    /// percentile, so the curve is right-continuous.
    pub fn cdf(&self) -> Vec<(f64, f64)> {
        position_cdf(&self.records.iter().map(|r| r.pos_err).collect::<Vec<_>>())
    }
}

pub fn position_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(e.len());
    for (i, &x) in e.iter().enumerate() {
        let mut j = i;
        while j + 1 < e.len() && e[j + 1] == x {
            j += 1;
        }
        out.push((x, 100.0 * (j + 1) as f64 / n));
    }
    out
}

pub fn cdf_rows(cdf: &[(f64, f64)]) -> Vec<String> {
    cdf.iter().map(|(e, p)| format!("{e:.9},{p:.6}")).collect()
}

/// Policies and estimators needed for one method.
pub struct MethodModels<'a> {
    pub agent: &'a Agent,
    pub ensemble: Option<&'a AdaptationEnsemble>,
    pub prior: Option<ParamEstimate>,
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng.gen()
}

/// Start pose of a trial: grid orientation, position drawn from the task's
/// start disc.
fn trial_start(task: &TaskConfig, grid: &[f64], trial: usize, episode_seed: u64) -> Pose2 {
    let theta = grid[trial % grid.len()];
    match task.start {
        StartSpec::Fixed { pose } => Pose2::new(pose.x, pose.y, theta),
        StartSpec::Random { center, radius } => {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0x57a7);
            let r = radius * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Pose2::new(center.x + r * a.cos(), center.y + r * a.sin(), theta)
        }
    }
}

/// One evaluation episode with the method's conditioning wiring.
pub fn run_trial(
    cfg: &RunConfig,
    method: Method,
    models: &MethodModels,
    start: Pose2,
    episode_seed: u64,
    keep_steps: bool,
) -> Result<EpisodeRecord> {
    let mut task = cfg.task.clone();
    let com = cfg.eval_true_com;
    let [lo, hi] = task.com_range;
    let (conditioning, initial) = match method {
        Method::Privileged => (Conditioning::GroundTruth, com),
        Method::Dr => (Conditioning::None, 0.0),
        Method::PriorOnly => {
            let p = models.prior.ok_or(Error::EmptyPrior)?;
            (Conditioning::ExternalEstimate, p.value.clamp(lo, hi))
        }
        Method::Fused | Method::RmaOnly => (Conditioning::ExternalEstimate, 0.0),
    };
    task.conditioning = conditioning;
    task.true_com = Some(com);
    let mut env = PushEnv::new(task, cfg.sim.clone(), episode_seed)?;
    env.reset_with(start, com, initial, episode_seed)?;

    let mut estimator = match method {
        Method::Fused | Method::RmaOnly => {
            let ens = models
                .ensemble
                .ok_or_else(|| Error::DataError(format!("{} needs an ensemble", method.name())))?;
            let mode = if method == Method::Fused {
                EstimatorMode::Fused
            } else {
                EstimatorMode::EnsembleOnly
            };
            let prior = if method == Method::Fused { models.prior } else { None };
            Some(OnlineEstimator::new(ens, prior, mode, [lo, hi])?)
        }
        _ => None,
    };

    let mut rec = EpisodeRecord {
        episode: 0,
        seed: episode_seed,
        true_com: com,
        initial_theta: start.theta,
        steps: Vec::new(),
        success: env.success_step().is_some(),
        completion_time: env.completion_time(),
        final_pos_err: env.errors().0,
        final_ang_err: env.errors().1,
        episode_return: 0.0,
    };
    let mut obs_mat = ndarray::Array2::zeros((1, ACTOR_DIM));
    while !env.is_done() {
        let mut trace = None;
        if let Some(est) = estimator.as_mut() {
            let (e, t) = est.step(&env.observe().actor)?;
            env.set_conditioning(e.value);
            trace = Some(t);
        }
        let obs = env.observe();
        obs_mat.row_mut(0).assign(&ndarray::ArrayView1::from(&obs.actor));
        let a = models.agent.act_mean(obs_mat.view())?;
        let action = [a[[0, 0]], a[[0, 1]]];
        let res = env.step(action)?;
        rec.episode_return += res.reward;
        rec.final_pos_err = res.info.pos_err;
        rec.final_ang_err = res.info.ang_err;
        rec.success = res.info.success;
        if keep_steps {
            rec.steps.push(StepTrace {
                step: env.state().step,
                t: env.state().time,
                actor_obs: obs.actor.to_vec(),
                action,
                reward: res.reward,
                pos_err: res.info.pos_err,
                ang_err: res.info.ang_err,
                contact: res.info.contact,
                conditioned: obs.actor[COND_INDEX],
                estimate: trace,
            });
        }
    }
    rec.completion_time = env.completion_time();
    Ok(rec)
}

/// Runs `cfg.trials` episodes for one seed. Trials run in parallel and are
/// gathered in trial order.
pub fn evaluate_seed(
    cfg: &RunConfig,
    method: Method,
    models: &MethodModels,
    seed: u64,
    prior_rung: Option<Rung>,
) -> Result<(MetricsSummary, Vec<EpisodeRecord>)> {
    let grid = cfg.orientation_grid();
    let period = cfg.sim.control_period();
    let episodes: Vec<(TrialRecord, EpisodeRecord)> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let episode_seed = trial_seed(seed, trial);
            let start = trial_start(&cfg.task, &grid, trial, episode_seed);
            let mut rec = run_trial(cfg, method, models, start, episode_seed, cfg.save_traces)?;
            rec.episode = trial as u64;
            let tr = TrialRecord {
                trial,
                episode_seed,
                initial_theta: start.theta,
                success: rec.success,
                pos_err: rec.final_pos_err,
                ang_err: rec.final_ang_err,
                time: rec.completion_time,
                duration: rec.completion_time.unwrap_or(cfg.task.episode_horizon as f64 * period),
                final_conditioned: rec.steps.last().map_or(f64::NAN, |s| s.conditioned),
            };
            Ok((tr, rec))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, traces): (Vec<_>, Vec<_>) = episodes.into_iter().unzip();
    Ok((
        MetricsSummary::from_records(method, seed, cfg.eval_true_com, prior_rung, records),
        traces,
    ))
}

/// Loads whatever `method` needs from the run directory.
pub struct LoadedModels {
    pub agent: Agent,
    pub ensemble: Option<AdaptationEnsemble>,
    pub prior: Option<ParamEstimate>,
}

impl LoadedModels {
    pub fn load(dir: &RunDir, cfg: &RunConfig, method: Method) -> Result<LoadedModels> {
        let agent = load_agent(dir, if method == Method::Dr { DR } else { PHASE15 })?;
        let ensemble = match method {
            Method::Fused | Method::RmaOnly => Some(AdaptationEnsemble::from_checkpoint(&Checkpoint::load(
                &dir.checkpoint(ENSEMBLE),
            )?)?),
            _ => None,
        };
        let prior = match method {
            Method::Fused | Method::PriorOnly => Some(cfg.prior()?),
            _ => None,
        };
        Ok(LoadedModels { agent, ensemble, prior })
    }

    pub fn view(&self) -> MethodModels<'_> {
        MethodModels {
            agent: &self.agent,
            ensemble: self.ensemble.as_ref(),
            prior: self.prior,
        }
    }
}

fn write_traces(dir: &RunDir, file: &str, traces: &[EpisodeRecord]) -> Result<()> {
    let path = dir.traces(file);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let header = serde_json::json!({ "config_hash": dir.hash });
    writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
    for t in traces {
        t.write_jsonl(&mut w).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Evaluates `cfg.method` for every seed (or only `only_seed`), writing
/// metrics JSON, the error CDF and traces.
pub fn cmd_evaluate(dir: &RunDir, cfg: &RunConfig, only_seed: Option<u64>) -> Result<Vec<MetricsSummary>> {
    let models = LoadedModels::load(dir, cfg, cfg.method)?;
    let seeds: Vec<u64> = match only_seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let mut out = Vec::new();
    for seed in seeds {
        let (summary, traces) = evaluate_seed(cfg, cfg.method, &models.view(), seed, None)?;
        let stem = format!("eval_{}_seed{seed}", cfg.method.name());
        dir.write_json(&dir.metrics(&format!("{stem}.json")), &summary)?;
        dir.write_csv(&dir.metrics(&format!("{stem}_cdf.csv")), "err_m,percentile", &cdf_rows(&summary.cdf()))?;
        if cfg.save_traces {
            write_traces(dir, &format!("{stem}.jsonl"), &traces)?;
        }
        out.push(summary);
    }
    Ok(out)
}

/// Recomputes the CDF CSV from a stored metrics JSON.
pub fn cmd_export_cdf(dir: &RunDir, method: Method, seed: u64) -> Result<PathBuf> {
    let stem = format!("eval_{}_seed{seed}", method.name());
    let src = dir.metrics(&format!("{stem}.json"));
    if !src.exists() {
        return Err(Error::MissingArtifact(src));
    }
    let text = fs::read_to_string(&src).map_err(|e| Error::io(&src, e))?;
    let summary: MetricsSummary = serde_json::from_str(&text)?;
    let dst = dir.metrics(&format!("{stem}_cdf.csv"));
    dir.write_csv(&dst, "err_m,percentile", &cdf_rows(&summary.cdf()))?;
    Ok(dst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub rung: Rung,
    pub method: Method,
    pub seed: u64,
    pub success_rate: f64,
    pub summary: MetricsSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rows: Vec<LadderRow>,
}

impl LadderReport {
    /// Mean success rate over seeds per (rung index, method).
    pub fn mean_rate(&self, rung: usize, method: Method, ladder: &[Rung]) -> f64 {
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.rung == ladder[rung])
            .map(|r| r.success_rate)
            .collect();
        mean_std(&rates).0
    }
}

/// Sweeps the prior ladder for the fused estimator and for conditioning on
/// the prior alone, both on the fine-tuned policy.
pub fn cmd_ablation(dir: &RunDir, cfg: &RunConfig, only_seed: Option<u64>) -> Result<LadderReport> {
    let agent = load_agent(dir, PHASE15)?;
    let ens = AdaptationEnsemble::from_checkpoint(&Checkpoint::load(&dir.checkpoint(ENSEMBLE))?)?;
    let seeds: Vec<u64> = match only_seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let mut rows = Vec::new();
    for &rung in &cfg.ladder {
        let prior = ParamEstimate::new(rung.value, rung.sigma * rung.sigma, Source::Prior)?;
        for method in [Method::Fused, Method::PriorOnly] {
            for &seed in &seeds {
                let models = MethodModels {
                    agent: &agent,
                    ensemble: Some(&ens),
                    prior: Some(prior),
                };
                let (summary, _) = evaluate_seed(cfg, method, &models, seed, Some(rung))?;
                rows.push(LadderRow {
                    rung,
                    method,
                    seed,
                    success_rate: summary.success_rate,
                    summary,
                });
            }
        }
    }
    let report = LadderReport { rows };
    dir.write_json(&dir.metrics("ablation_ladder.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pos: f64, success: bool, time: Option<f64>) -> TrialRecord {
        TrialRecord {
            trial: 0,
            episode_seed: 0,
            initial_theta: 0.0,
            success,
            pos_err: pos,
            ang_err: 0.1,
            time,
            duration: time.unwrap_or(40.0),
            final_conditioned: 0.0,
        }
    }

    #[test]
    fn success_rate_is_exact_ratio() {
        let rs = vec![rec(0.01, true, Some(10.0)), rec(0.2, false, None), rec(0.02, true, Some(20.0))];
        let m = MetricsSummary::from_records(Method::Fused, 0, 0.06, None, rs);
        assert_eq!(m.success_rate, 100.0 * 2.0 / 3.0);
        assert_eq!(m.time_mean, Some(15.0));
        assert!((m.time_all_mean - 70.0 / 3.0).abs() < 1e-12);
        assert!((m.pos_err_mean - 0.23 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_successes_has_no_time() {
        let m = MetricsSummary::from_records(Method::Dr, 0, 0.06, None, vec![rec(0.3, false, None)]);
        assert_eq!(m.success_rate, 0.0);
        assert_eq!(m.time_mean, None);
    }

    #[test]
    fn cdf_ties_and_endpoint() {
        let c = position_cdf(&[0.3, 0.1, 0.2, 0.1]);
        assert_eq!(c, vec![(0.1, 50.0), (0.1, 50.0), (0.2, 75.0), (0.3, 100.0)]);
    }

    #[test]
    fn ladder_defaults() {
        let l = default_ladder();
        assert_eq!(l.len(), 5);
        assert_eq!(l[0], Rung { value: 0.06, sigma: 0.01 });
        assert_eq!(l[4], Rung { value: -0.02, sigma: 0.08 });
    }

    #[test]
    fn orientation_grid_45() {
        let cfg = RunConfig::tblock("t", "prior.json");
        let g = cfg.orientation_grid();
        assert_eq!(g.len(), 8);
        assert!((g[7] - 315f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::tblock("t", "prior.json");
        cfg.validate().unwrap();
        cfg.ensemble_n = 1;
        assert!(matches!(cfg.validate(), Err(Error::EnsembleTooSmall(1))));
        cfg.ensemble_n = 10;
        cfg.trials = 0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        cfg.trials = 4;
        cfg.phase15_sigma = -0.01;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = RunConfig::tblock("t", "prior.json");
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn trial_seeds_differ() {
        assert_ne!(trial_seed(0, 0), trial_seed(0, 1));
        assert_ne!(trial_seed(0, 0), trial_seed(1, 0));
        assert_eq!(trial_seed(3, 5), trial_seed(3, 5));
    }
}
