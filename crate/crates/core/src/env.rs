//! Episodic pushing environment with physical-parameter conditioning.
//!
//! All observations are expressed in the goal frame. The actor sees the
//! object pose, pusher position, the conditioned CoM value and its previous
//! action; the critic additionally sees the object twist and the true CoM.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{tblock_with_weight_at, make_hammer, HammerDims, RigidObjectSpec};
use crate::learn::ppo::{Transition, VecEnv};
use crate::math::{wrap_angle, Pose2, Vec2};
use crate::record::{EpisodeRecord, StepTrace};
use crate::sim::{self, ObjectModel, PusherCommand, SimParams, SimState};

pub const ACTOR_DIM: usize = 9;
pub const CRITIC_DIM: usize = 13;
pub const ACTION_DIM: usize = 2;
/// Index of the conditioned parameter inside the actor observation.
pub const COND_INDEX: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Conditioning {
    /// Condition on the true CoM of the episode.
    GroundTruth,
    /// Condition on a constant supplied value.
    FixedValue { value: f64 },
    /// True CoM plus per-episode Gaussian noise, clamped to the range.
    NoisyGroundTruth { sigma: f64 },
    /// Caller updates the value every step via [`PushEnv::set_conditioning`].
    ExternalEstimate,
    /// Conditioning channel held at zero.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartSpec {
    Fixed { pose: Pose2 },
    /// Position uniform in a disc, heading uniform.
    Random { center: Vec2, radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Per meter of position error.
    pub pos: f64,
    /// Per radian of orientation error.
    pub orient: f64,
    /// On the squared action, measured in units of `d_max`.
    pub action: f64,
    pub success_bonus: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            pos: 1.0,
            orient: 0.3,
            action: 0.01,
            success_bonus: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub object: RigidObjectSpec,
    /// CoM range along the vertical body axis (m).
    pub com_range: [f64; 2],
    pub goal: Pose2,
    pub start: StartSpec,
    pub episode_horizon: u32,
    pub success_pos_tol: f64,
    pub success_ang_tol: f64,
    /// Seconds the tolerances must hold before success latches.
    pub success_hold: f64,
    pub conditioning: Conditioning,
    /// Fixed true CoM; sampled uniformly from `com_range` when absent.
    #[serde(default)]
    pub true_com: Option<f64>,
    #[serde(default)]
    pub reward: RewardWeights,
}

impl TaskConfig {
    /// T-block task: CoM range [-3.5, 7.5] cm, 40 cm goal displacement.
    pub fn tblock() -> TaskConfig {
        TaskConfig {
            object: tblock_with_weight_at(crate::geom::TBLOCK_WEIGHT_TOP_Y).expect("default T-block is valid"),
            com_range: [-0.035, 0.075],
            goal: Pose2::new(0.4, 0.0, 0.0),
            start: StartSpec::Random {
                center: Vec2::new(0.0, 0.0),
                radius: 0.05,
            },
            episode_horizon: 400,
            success_pos_tol: 0.03,
            success_ang_tol: 20f64.to_radians(),
            success_hold: 0.0,
            conditioning: Conditioning::GroundTruth,
            true_com: None,
            reward: RewardWeights::default(),
        }
    }

    /// Hammer task: CoM range [-13, 13] cm, success must hold for 2 s.
    pub fn hammer() -> TaskConfig {
        TaskConfig {
            object: make_hammer(&HammerDims::default()).expect("default hammer is valid"),
            com_range: [-0.13, 0.13],
            success_hold: 2.0,
            ..TaskConfig::tblock()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.com_range;
        if !(lo < hi) {
            return Err(Error::InvalidConfig(format!("com_range [{lo}, {hi}] is empty")));
        }
        if !(self.success_pos_tol > 0.0 && self.success_ang_tol > 0.0) {
            return Err(Error::InvalidConfig("success tolerances must be positive".into()));
        }
        if !(self.success_hold >= 0.0) {
            return Err(Error::InvalidConfig("success_hold must be >= 0".into()));
        }
        if self.episode_horizon == 0 {
            return Err(Error::InvalidConfig("episode_horizon must be >= 1".into()));
        }
        if let Conditioning::NoisyGroundTruth { sigma } = self.conditioning {
            if !(sigma >= 0.0) {
                return Err(Error::InvalidConfig(format!("noise sigma {sigma} must be >= 0")));
            }
        }
        if let Conditioning::FixedValue { value } = self.conditioning {
            check_in_range(value, self.com_range)?;
        }
        if let Some(c) = self.true_com {
            if !c.is_finite() {
                return Err(Error::InvalidConfig("true_com must be finite".into()));
            }
        }
        self.object.validate()
    }

    pub fn com_midpoint(&self) -> f64 {
        0.5 * (self.com_range[0] + self.com_range[1])
    }
}

fn check_in_range(value: f64, [lo, hi]: [f64; 2]) -> Result<()> {
    if !(value >= lo && value <= hi) {
        return Err(Error::OutOfRangeParam { value, lo, hi });
    }
    Ok(())
}

/// Draws the episode's true CoM and the value the policy is conditioned on.
pub fn sample_episode_params<R: Rng + ?Sized>(task: &TaskConfig, rng: &mut R) -> Result<(f64, f64)> {
    let [lo, hi] = task.com_range;
    let com = match task.true_com {
        Some(c) => c,
        None => rng.gen_range(lo..=hi),
    };
    let conditioned = match task.conditioning {
        Conditioning::GroundTruth => com,
        Conditioning::NoisyGroundTruth { sigma } => {
            if sigma == 0.0 {
                com
            } else {
                let z: f64 = rng.sample(StandardNormal);
                (com + sigma * z).clamp(lo, hi)
            }
        }
        Conditioning::None => 0.0,
        Conditioning::FixedValue { value } => {
            check_in_range(value, task.com_range)?;
            value
        }
        Conditioning::ExternalEstimate => task.com_midpoint(),
    };
    Ok((com, conditioned))
}

/// Builds the simulator model for a given true CoM. Objects carrying a point
/// weight get the weight moved; weightless objects get their CoM overridden.
pub fn object_for_com(spec: &RigidObjectSpec, params: &SimParams, com_y: f64) -> Result<ObjectModel> {
    if spec.weight.mass > 0.0 {
        ObjectModel::new(&spec.with_com_y(com_y)?, params)
    } else {
        let mut model = ObjectModel::new(spec, params)?;
        let target = Vec2::new(model.mass.com.x, com_y);
        model.mass.inertia = model.mass.inertia_about(target);
        model.mass.com = target;
        let verts: Vec<Vec2> = model.parts.iter().flatten().copied().collect();
        let mean = verts.iter().map(|v| (*v - model.mass.com).norm()).sum::<f64>() / verts.len() as f64;
        model.kappa = params.kappa_frac * mean;
        Ok(model)
    }
}

/// Network input width for the actor after featurization.
pub const ACTOR_FEAT_DIM: usize = 13;
pub const CRITIC_FEAT_DIM: usize = 17;

const POS_SCALE: f64 = 0.2;
const LOCAL_SCALE: f64 = 0.1;
const VEL_SCALE: f64 = 0.1;

/// Maps raw observations to network inputs: rescales each channel to order
/// one and adds the pusher and goal positions in the object frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub com_range: [f64; 2],
    pub d_max: f64,
}

impl Featurizer {
    pub fn new(task: &TaskConfig, params: &SimParams) -> Featurizer {
        Featurizer {
            com_range: task.com_range,
            d_max: params.d_max,
        }
    }

    fn com_feature(&self, c: f64) -> f64 {
        let [lo, hi] = self.com_range;
        (2.0 * c - lo - hi) / (hi - lo)
    }

    pub fn actor(&self, obs: &[f64]) -> [f64; ACTOR_FEAT_DIM] {
        let obj = Vec2::new(obs[0], obs[1]);
        let (s, c) = (obs[2], obs[3]);
        let pusher = Vec2::new(obs[4], obs[5]);
        let p_local = (pusher - obj).rotate_sc(-s, c);
        let g_local = (-obj).rotate_sc(-s, c);
        [
            obj.x / POS_SCALE,
            obj.y / POS_SCALE,
            s,
            c,
            pusher.x / POS_SCALE,
            pusher.y / POS_SCALE,
            self.com_feature(obs[COND_INDEX]),
            obs[7] / self.d_max,
            obs[8] / self.d_max,
            p_local.x / LOCAL_SCALE,
            p_local.y / LOCAL_SCALE,
            g_local.x / POS_SCALE,
            g_local.y / POS_SCALE,
        ]
    }

    pub fn critic(&self, obs: &[f64]) -> [f64; CRITIC_FEAT_DIM] {
        let mut out = [0.0; CRITIC_FEAT_DIM];
        out[..ACTOR_FEAT_DIM].copy_from_slice(&self.actor(&obs[..ACTOR_DIM]));
        out[ACTOR_FEAT_DIM] = obs[ACTOR_DIM] / VEL_SCALE;
        out[ACTOR_FEAT_DIM + 1] = obs[ACTOR_DIM + 1] / VEL_SCALE;
        out[ACTOR_FEAT_DIM + 2] = obs[ACTOR_DIM + 2];
        out[ACTOR_FEAT_DIM + 3] = self.com_feature(obs[ACTOR_DIM + 3]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub actor: [f64; ACTOR_DIM],
    pub critic: [f64; CRITIC_DIM],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub pos_err: f64,
    pub ang_err: f64,
    pub success: bool,
    pub contact: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Everything that changes within an episode. Serializable so training can
/// resume mid-episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRuntime {
    pub state: SimState,
    pub rng: ChaCha8Rng,
    pub true_com: f64,
    pub conditioned: f64,
    pub prev_action: Vec2,
    pub within_since: Option<u64>,
    pub success_step: Option<u64>,
    pub done: bool,
    pub episodes: u64,
}

#[derive(Clone, Debug)]
pub struct PushEnv {
    task: TaskConfig,
    params: SimParams,
    model: ObjectModel,
    rt: EnvRuntime,
}

impl PushEnv {
    /// Creates the environment and resets it with a sampled episode.
    pub fn new(task: TaskConfig, params: SimParams, seed: u64) -> Result<PushEnv> {
        task.validate()?;
        params.validate()?;
        let model = object_for_com(&task.object, &params, task.com_midpoint())?;
        let mut env = PushEnv {
            task,
            params,
            model,
            rt: EnvRuntime {
                state: SimState::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                true_com: 0.0,
                conditioned: 0.0,
                prev_action: Vec2::ZERO,
                within_since: None,
                success_step: None,
                done: true,
                episodes: 0,
            },
        };
        env.reset()?;
        Ok(env)
    }

    pub fn task(&self) -> &TaskConfig {
        &self.task
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn model(&self) -> &ObjectModel {
        &self.model
    }

    pub fn state(&self) -> &SimState {
        &self.rt.state
    }

    pub fn runtime(&self) -> &EnvRuntime {
        &self.rt
    }

    pub fn true_com(&self) -> f64 {
        self.rt.true_com
    }

    pub fn conditioned(&self) -> f64 {
        self.rt.conditioned
    }

    pub fn is_done(&self) -> bool {
        self.rt.done
    }

    pub fn success_step(&self) -> Option<u64> {
        self.rt.success_step
    }

    /// Restores a runtime snapshot taken from an env with the same task.
    pub fn restore(&mut self, rt: EnvRuntime) -> Result<()> {
        self.model = object_for_com(&self.task.object, &self.params, rt.true_com)?;
        self.rt = rt;
        Ok(())
    }

    /// Starts a new episode with parameters and start pose drawn from the task.
    pub fn reset(&mut self) -> Result<Observation> {
        let (com, conditioned) = sample_episode_params(&self.task, &mut self.rt.rng)?;
        let start = match self.task.start {
            StartSpec::Fixed { pose } => pose,
            StartSpec::Random { center, radius } => {
                let r = radius * self.rt.rng.gen::<f64>().sqrt();
                let a = self.rt.rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let th = self.rt.rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                Pose2::new(center.x + r * a.cos(), center.y + r * a.sin(), th)
            }
        };
        let seed = self.rt.rng.gen();
        self.reset_with(start, com, conditioned, seed)
    }

    /// Starts an episode at an explicit start pose and CoM.
    pub fn reset_with(&mut self, start: Pose2, true_com: f64, conditioned: f64, seed: u64) -> Result<Observation> {
        self.model = object_for_com(&self.task.object, &self.params, true_com)?;
        self.rt.state = sim::reset(&self.model, &self.params, start, self.task.goal, seed)?;
        self.rt.true_com = true_com;
        self.rt.conditioned = conditioned;
        self.rt.prev_action = Vec2::ZERO;
        self.rt.within_since = None;
        self.rt.success_step = None;
        self.rt.done = false;
        self.rt.episodes += 1;
        self.update_latch();
        Ok(self.observe())
    }

    /// Replaces the conditioned value (external-estimate mode).
    pub fn set_conditioning(&mut self, value: f64) {
        self.rt.conditioned = value;
    }

    /// Distance from the pusher disc to the object surface, zero in contact.
    pub fn pusher_gap(&self) -> f64 {
        let parts = self.model.world_parts(&self.rt.state.pose);
        sim::signed_distance(self.rt.state.pusher_pos, self.params.pusher_radius, &parts)
            .phi
            .max(0.0)
    }

    /// Position and orientation error with respect to the goal.
    pub fn errors(&self) -> (f64, f64) {
        let goal = self.task.goal;
        let pose = self.rt.state.pose;
        let pos = (pose.position() - goal.position()).norm();
        let ang = wrap_angle(pose.theta - goal.theta).abs();
        (pos, ang)
    }

    fn update_latch(&mut self) {
        let (pos, ang) = self.errors();
        let t = self.rt.state.step;
        if pos < self.task.success_pos_tol && ang < self.task.success_ang_tol {
            let since = *self.rt.within_since.get_or_insert(t);
            let held = (t - since) as f64 * self.params.control_period();
            if held >= self.task.success_hold - 1e-9 && self.rt.success_step.is_none() {
                self.rt.success_step = Some(t);
            }
        } else {
            self.rt.within_since = None;
        }
        if self.rt.success_step.is_some() || t >= self.task.episode_horizon as u64 {
            self.rt.done = true;
        }
    }

    pub fn observe(&self) -> Observation {
        let goal = self.task.goal;
        let s = &self.rt.state;
        let obj = goal.inverse_transform(s.pose.position());
        let rel_theta = wrap_angle(s.pose.theta - goal.theta);
        let pusher = goal.inverse_transform(s.pusher_pos);
        let v = s.twist.linear().rotate(-goal.theta);
        let actor = [
            obj.x,
            obj.y,
            rel_theta.sin(),
            rel_theta.cos(),
            pusher.x,
            pusher.y,
            self.rt.conditioned,
            self.rt.prev_action.x,
            self.rt.prev_action.y,
        ];
        let mut critic = [0.0; CRITIC_DIM];
        critic[..ACTOR_DIM].copy_from_slice(&actor);
        critic[ACTOR_DIM..].copy_from_slice(&[v.x, v.y, s.twist.omega, self.rt.true_com]);
        Observation { actor, critic }
    }

    /// Applies a pusher displacement given in the goal frame (m).
    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult> {
        if self.rt.done {
            return Err(Error::EpisodeFinished);
        }
        let mut a = Vec2::new(action[0], action[1]);
        if !a.is_finite() {
            return Err(Error::NumericalError("non-finite action".into()));
        }
        let n = a.norm();
        if n > self.params.d_max {
            a = a * (self.params.d_max / n);
        }
        let delta = a.rotate(self.task.goal.theta);
        self.rt.state = sim::step_physics(&self.rt.state, &self.model, &self.params, PusherCommand { delta })?;
        self.rt.prev_action = a;
        let was_success = self.rt.success_step.is_some();
        self.update_latch();
        let success = self.rt.success_step.is_some();

        let (pos_err, ang_err) = self.errors();
        let w = &self.task.reward;
        let a_norm = a * (1.0 / self.params.d_max);
        let mut reward = -w.pos * pos_err - w.orient * ang_err - w.action * a_norm.norm_sq();
        if success && !was_success {
            reward += w.success_bonus;
        }
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.rt.done,
            info: StepInfo {
                pos_err,
                ang_err,
                success,
                contact: self.rt.state.contact,
            },
        })
    }

    pub fn completion_time(&self) -> Option<f64> {
        self.rt
            .success_step
            .map(|s| s as f64 * self.params.control_period())
    }
}

/// A batch policy over actor observations.
pub trait Policy {
    fn actor_input_dim(&self) -> usize;
    /// One goal-frame pusher displacement (m) per observation row.
    fn act(&mut self, actor_obs: ArrayView2<f64>) -> Array2<f64>;
}

/// Uniform random actions within the displacement limit.
pub struct RandomPolicy {
    pub rng: ChaCha8Rng,
    pub d_max: f64,
}

impl RandomPolicy {
    pub fn new(seed: u64, d_max: f64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
            d_max,
        }
    }
}

impl Policy for RandomPolicy {
    fn actor_input_dim(&self) -> usize {
        ACTOR_DIM
    }

    fn act(&mut self, actor_obs: ArrayView2<f64>) -> Array2<f64> {
        let d = self.d_max;
        Array2::from_shape_fn((actor_obs.nrows(), ACTION_DIM), |_| self.rng.gen_range(-d..=d))
    }
}

/// Runs one episode per seed in lockstep, for at most `steps` control steps.
pub fn batch_rollout(
    task: &TaskConfig,
    params: &SimParams,
    seeds: &[u64],
    policy: &mut dyn Policy,
    steps: usize,
) -> Result<Vec<EpisodeRecord>> {
    if policy.actor_input_dim() != ACTOR_DIM {
        return Err(Error::shape(ACTOR_DIM, policy.actor_input_dim()));
    }
    let mut envs = seeds
        .iter()
        .map(|&s| PushEnv::new(task.clone(), params.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<EpisodeRecord> = envs
        .iter()
        .zip(seeds)
        .enumerate()
        .map(|(i, (env, &seed))| {
            let (pos, ang) = env.errors();
            EpisodeRecord {
                episode: i as u64,
                seed,
                true_com: env.true_com(),
                initial_theta: env.state().pose.theta,
                steps: Vec::new(),
                success: env.success_step().is_some(),
                completion_time: env.completion_time(),
                final_pos_err: pos,
                final_ang_err: ang,
                episode_return: 0.0,
            }
        })
        .collect();
    let mut obs = Array2::zeros((envs.len(), ACTOR_DIM));
    for _ in 0..steps {
        let active: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let mut batch = obs.slice_mut(ndarray::s![..active.len(), ..]);
        for (row, &i) in active.iter().enumerate() {
            let o = envs[i].observe();
            batch.row_mut(row).assign(&ndarray::ArrayView1::from(&o.actor));
        }
        let actions = policy.act(batch.view());
        if actions.nrows() != active.len() || actions.ncols() != ACTION_DIM {
            return Err(Error::shape(
                format!("{}x{}", active.len(), ACTION_DIM),
                format!("{}x{}", actions.nrows(), actions.ncols()),
            ));
        }
        for (row, &i) in active.iter().enumerate() {
            let before = envs[i].observe();
            let a = [actions[[row, 0]], actions[[row, 1]]];
            let res = envs[i].step(a)?;
            let rec = &mut records[i];
            rec.steps.push(StepTrace {
                step: envs[i].state().step,
                t: envs[i].state().time,
                actor_obs: before.actor.to_vec(),
                action: a,
                reward: res.reward,
                pos_err: res.info.pos_err,
                ang_err: res.info.ang_err,
                contact: res.info.contact,
                conditioned: before.actor[COND_INDEX],
                estimate: None,
            });
            rec.episode_return += res.reward;
            rec.success = res.info.success;
            rec.completion_time = envs[i].completion_time();
            rec.final_pos_err = res.info.pos_err;
            rec.final_ang_err = res.info.ang_err;
        }
    }
    Ok(records)
}

/// Potential-based shaping terms added to training rewards only. The
/// potential is `-(reach * gap + pos * pos_err + ang * ang_err)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shaping {
    pub reach: f64,
    pub pos: f64,
    pub ang: f64,
}

impl Default for Shaping {
    fn default() -> Self {
        Shaping {
            reach: 5.0,
            pos: 10.0,
            ang: 3.0,
        }
    }
}

impl Shaping {
    pub const NONE: Shaping = Shaping {
        reach: 0.0,
        pos: 0.0,
        ang: 0.0,
    };

    fn potential(&self, env: &PushEnv) -> f64 {
        if *self == Shaping::NONE {
            return 0.0;
        }
        let (pos, ang) = env.errors();
        -(self.reach * env.pusher_gap() + self.pos * pos + self.ang * ang)
    }
}

/// Auto-resetting batch of environments for PPO training. Actions arrive
/// normalized to [-1, 1] and are scaled by `d_max`.
#[derive(Clone, Debug)]
pub struct PushVecEnv {
    pub envs: Vec<PushEnv>,
    pub featurizer: Featurizer,
    pub shaping: Shaping,
    /// Discount used by the shaping term; should match the learner's.
    pub gamma: f64,
}

impl PushVecEnv {
    pub fn new(task: &TaskConfig, params: &SimParams, count: usize, seed: u64) -> Result<PushVecEnv> {
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let envs = (0..count)
            .map(|_| PushEnv::new(task.clone(), params.clone(), seeder.gen()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PushVecEnv {
            envs,
            featurizer: Featurizer::new(task, params),
            shaping: Shaping::NONE,
            gamma: 0.99,
        })
    }

    pub fn with_shaping(mut self, shaping: Shaping, gamma: f64) -> Self {
        self.shaping = shaping;
        self.gamma = gamma;
        self
    }

    pub fn snapshot(&self) -> Vec<EnvRuntime> {
        self.envs.iter().map(|e| e.runtime().clone()).collect()
    }

    pub fn restore(&mut self, snapshot: Vec<EnvRuntime>) -> Result<()> {
        if snapshot.len() != self.envs.len() {
            return Err(Error::shape(self.envs.len(), snapshot.len()));
        }
        for (env, rt) in self.envs.iter_mut().zip(snapshot) {
            env.restore(rt)?;
        }
        Ok(())
    }
}

impl VecEnv for PushVecEnv {
    fn num_envs(&self) -> usize {
        self.envs.len()
    }

    fn actor_dim(&self) -> usize {
        ACTOR_FEAT_DIM
    }

    fn critic_dim(&self) -> usize {
        CRITIC_FEAT_DIM
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn observe(&self, mut actor: ArrayViewMut2<f64>, mut critic: ArrayViewMut2<f64>) {
        for (i, env) in self.envs.iter().enumerate() {
            let o = env.observe();
            let a = self.featurizer.actor(&o.actor);
            let c = self.featurizer.critic(&o.critic);
            actor.row_mut(i).assign(&ndarray::ArrayView1::from(&a));
            critic.row_mut(i).assign(&ndarray::ArrayView1::from(&c));
        }
    }

    fn step(&mut self, actions: ArrayView2<f64>) -> Result<Vec<Transition>> {
        let mut out = Vec::with_capacity(self.envs.len());
        for (i, env) in self.envs.iter_mut().enumerate() {
            let d = env.params().d_max;
            let phi0 = self.shaping.potential(env);
            let res = env.step([actions[[i, 0]] * d, actions[[i, 1]] * d])?;
            let phi1 = self.shaping.potential(env);
            let terminal = res.info.success;
            let truncated = res.done && !terminal;
            let final_critic = truncated.then(|| self.featurizer.critic(&res.observation.critic).to_vec());
            if res.done {
                env.reset()?;
            }
            out.push(Transition {
                reward: res.reward + self.gamma * phi1 - phi0,
                terminal,
                truncated,
                final_critic,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_task() -> TaskConfig {
        TaskConfig {
            start: StartSpec::Fixed {
                pose: Pose2::new(0.0, 0.0, 0.0),
            },
            ..TaskConfig::tblock()
        }
    }

    #[test]
    fn ground_truth_samples_cover_range() {
        let task = TaskConfig::tblock();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..10_000 {
            let (c, k) = sample_episode_params(&task, &mut rng).unwrap();
            assert_eq!(c, k);
            assert!((-0.035..=0.075).contains(&c));
            lo = lo.min(c);
            hi = hi.max(c);
        }
        assert!(lo < -0.034 && hi > 0.074);
    }

    #[test]
    fn noisy_conditioning() {
        let mut task = TaskConfig::tblock();
        task.conditioning = Conditioning::NoisyGroundTruth { sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (c, k) = sample_episode_params(&task, &mut rng).unwrap();
            assert_eq!(c, k);
        }
        // a wide range keeps clamping out of the statistic
        task.com_range = [-10.0, 10.0];
        task.true_com = Some(0.0);
        task.conditioning = Conditioning::NoisyGroundTruth { sigma: 0.015 };
        let n = 100_000;
        let diffs: Vec<f64> = (0..n)
            .map(|_| {
                let (c, k) = sample_episode_params(&task, &mut rng).unwrap();
                k - c
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std - 0.015).abs() / 0.015 < 0.02, "std {std}");

        task.com_range = [-0.035, 0.075];
        task.true_com = Some(0.074);
        for _ in 0..1000 {
            let (_, k) = sample_episode_params(&task, &mut rng).unwrap();
            assert!((-0.035..=0.075).contains(&k));
        }
    }

    #[test]
    fn fixed_value_out_of_range() {
        let mut task = TaskConfig::tblock();
        task.conditioning = Conditioning::FixedValue { value: 0.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_episode_params(&task, &mut rng),
            Err(Error::OutOfRangeParam { .. })
        ));
        task.conditioning = Conditioning::FixedValue { value: 0.04 };
        assert_eq!(sample_episode_params(&task, &mut rng).unwrap().1, 0.04);
        task.conditioning = Conditioning::None;
        assert_eq!(sample_episode_params(&task, &mut rng).unwrap().1, 0.0);
    }

    #[test]
    fn observation_dimensions_and_dr_channel() {
        let mut task = fixed_task();
        task.conditioning = Conditioning::None;
        let env = PushEnv::new(task, SimParams::default(), 3).unwrap();
        let o = env.observe();
        assert_eq!(o.actor.len(), ACTOR_DIM);
        assert_eq!(o.critic.len(), CRITIC_DIM);
        assert_eq!(o.actor[COND_INDEX], 0.0);
        assert_eq!(&o.critic[..ACTOR_DIM], &o.actor[..]);
        assert_eq!(o.critic[CRITIC_DIM - 1], env.true_com());
        // object 40 cm short of the goal
        assert!((o.actor[0] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn start_at_goal_is_immediate_success() {
        let mut task = fixed_task();
        task.start = StartSpec::Fixed { pose: task.goal };
        let mut env = PushEnv::new(task, SimParams::default(), 0).unwrap();
        assert!(env.is_done());
        assert_eq!(env.completion_time(), Some(0.0));
        assert!(matches!(env.step([0.0, 0.0]), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn idle_far_from_goal_is_penalized() {
        let mut env = PushEnv::new(fixed_task(), SimParams::default(), 0).unwrap();
        let r = env.step([0.0, 0.0]).unwrap();
        assert!(r.reward < 0.0);
        assert!(!r.info.success && !r.done);
    }

    #[test]
    fn hold_time_delays_success() {
        let mut task = fixed_task();
        task.start = StartSpec::Fixed { pose: task.goal };
        task.success_hold = 2.0;
        let mut env = PushEnv::new(task, SimParams::default(), 0).unwrap();
        assert!(!env.is_done());
        let mut steps = 0;
        loop {
            let r = env.step([0.0, 0.0]).unwrap();
            steps += 1;
            if r.done {
                assert!(r.info.success);
                break;
            }
        }
        assert_eq!(steps, 20);
        assert!((env.completion_time().unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_ends_episode() {
        let mut task = fixed_task();
        task.episode_horizon = 5;
        let mut env = PushEnv::new(task, SimParams::default(), 0).unwrap();
        for i in 0..5 {
            let r = env.step([0.0, 0.0]).unwrap();
            assert_eq!(r.done, i == 4);
        }
    }

    #[test]
    fn actor_obs_does_not_leak_com_when_unconditioned() {
        let mut task = fixed_task();
        task.conditioning = Conditioning::None;
        let mut a = PushEnv::new(task.clone(), SimParams::default(), 0).unwrap();
        let mut b = PushEnv::new(task, SimParams::default(), 0).unwrap();
        let start = Pose2::new(0.0, 0.0, 1.0);
        let oa = a.reset_with(start, -0.03, 0.0, 9).unwrap();
        let ob = b.reset_with(start, 0.07, 0.0, 9).unwrap();
        assert_eq!(oa.actor, ob.actor);
        assert_ne!(oa.critic, ob.critic);
    }

    #[test]
    fn batch_rollout_matches_manual_loop() {
        let task = TaskConfig::tblock();
        let params = SimParams::default();
        let mut policy = RandomPolicy::new(5, params.d_max);
        let recs = batch_rollout(&task, &params, &[42], &mut policy, 30).unwrap();

        let mut env = PushEnv::new(task, params.clone(), 42).unwrap();
        let mut policy = RandomPolicy::new(5, params.d_max);
        for step in &recs[0].steps {
            let obs = env.observe();
            assert_eq!(obs.actor.to_vec(), step.actor_obs);
            let a = policy.act(ndarray::Array2::from_shape_vec((1, ACTOR_DIM), obs.actor.to_vec()).unwrap().view());
            let r = env.step([a[[0, 0]], a[[0, 1]]]).unwrap();
            assert_eq!(r.reward, step.reward);
        }
        assert_eq!(recs[0].steps.len(), 30);
    }

    #[test]
    fn batch_rollout_is_deterministic() {
        let task = TaskConfig::tblock();
        let params = SimParams::default();
        let seeds: Vec<u64> = (0..16).collect();
        let run = || {
            let mut p = RandomPolicy::new(1, params.d_max);
            batch_rollout(&task, &params, &seeds, &mut p, 40).unwrap()
        };
        assert_eq!(run(), run());
    }

    struct WrongDim;
    impl Policy for WrongDim {
        fn actor_input_dim(&self) -> usize {
            7
        }
        fn act(&mut self, obs: ArrayView2<f64>) -> Array2<f64> {
            Array2::zeros((obs.nrows(), 2))
        }
    }

    #[test]
    fn batch_rollout_rejects_dimension_mismatch() {
        let r = batch_rollout(&TaskConfig::tblock(), &SimParams::default(), &[0], &mut WrongDim, 5);
        assert!(matches!(r, Err(Error::ShapeError { .. })));
    }

    #[test]
    fn runtime_snapshot_round_trips() {
        let mut env = PushEnv::new(TaskConfig::tblock(), SimParams::default(), 4).unwrap();
        env.step([0.01, 0.0]).unwrap();
        let json = serde_json::to_string(env.runtime()).unwrap();
        let rt: EnvRuntime = serde_json::from_str(&json).unwrap();
        let mut copy = PushEnv::new(TaskConfig::tblock(), SimParams::default(), 99).unwrap();
        copy.restore(rt).unwrap();
        for _ in 0..5 {
            let a = env.step([0.005, 0.003]).unwrap();
            let b = copy.step([0.005, 0.003]).unwrap();
            assert_eq!(a, b);
        }
    }
}
