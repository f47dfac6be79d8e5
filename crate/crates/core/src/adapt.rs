//! Ensemble CoM estimation from interaction history and inverse-variance
//! fusion with a prior.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::env::{Conditioning, PushEnv, TaskConfig, ACTOR_DIM};
use crate::error::{Error, Result};
use crate::learn::{Adam, Checkpoint, GaussianHead, VAR_MIN};
use crate::math::{wrap_angle, Vec2};
use crate::record::EstimateTrace;
use crate::sim::SimParams;

/// Raw per-step channels kept in the history: object x, y, sin, cos,
/// pusher x, y (goal frame) and the action that led to the step.
pub const RAW_DIM: usize = 8;
/// Encoder features per history slot.
pub const SLOT_DIM: usize = 8;
pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_MEMBERS: usize = 10;

const LOCAL_SCALE: f64 = 0.1;
const DTHETA_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Prior,
    Ensemble,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub value: f64,
    pub variance: f64,
    pub source: Source,
}

impl ParamEstimate {
    pub fn new(value: f64, variance: f64, source: Source) -> Result<ParamEstimate> {
        check_variance(variance)?;
        if !value.is_finite() {
            return Err(Error::NumericalError(format!("non-finite estimate {value}")));
        }
        Ok(ParamEstimate { value, variance, source })
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

fn check_variance(v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidVariance(v));
    }
    Ok(())
}

/// Inverse-variance weighted combination of two estimates.
pub fn fuse(prior: &ParamEstimate, rma: &ParamEstimate) -> Result<ParamEstimate> {
    check_variance(prior.variance)?;
    check_variance(rma.variance)?;
    let wp = 1.0 / prior.variance;
    let wr = 1.0 / rma.variance;
    let (lo, hi) = if prior.value <= rma.value {
        (prior.value, rma.value)
    } else {
        (rma.value, prior.value)
    };
    let value = ((prior.value * wp + rma.value * wr) / (wp + wr)).clamp(lo, hi);
    let variance = (1.0 / (wp + wr)).min(prior.variance).min(rma.variance);
    Ok(ParamEstimate {
        value,
        variance,
        source: Source::Fused,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub image_id: String,
    pub query_id: String,
    pub value_norm: f64,
    pub sigma_norm: f64,
}

/// Repeated prior queries on a normalized [-1, 1] scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorQuerySet {
    pub scale_m: f64,
    pub records: Vec<PriorRecord>,
}

impl PriorQuerySet {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyPrior);
        }
        if !(self.scale_m > 0.0 && self.scale_m.is_finite()) {
            return Err(Error::InvalidConfig(format!("prior scale {} must be > 0", self.scale_m)));
        }
        for r in &self.records {
            if !(-1.0..=1.0).contains(&r.value_norm) {
                return Err(Error::OutOfRangeParam {
                    value: r.value_norm,
                    lo: -1.0,
                    hi: 1.0,
                });
            }
            if !(r.sigma_norm > 0.0 && r.sigma_norm.is_finite()) {
                return Err(Error::InvalidVariance(r.sigma_norm));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PriorQuerySet> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let qs: PriorQuerySet = serde_json::from_str(&text)?;
        qs.validate()?;
        Ok(qs)
    }

    /// Single-record set, handy for fixed priors.
    pub fn single(value_m: f64, sigma_m: f64, scale_m: f64) -> PriorQuerySet {
        PriorQuerySet {
            scale_m,
            records: vec![PriorRecord {
                image_id: "fixed".into(),
                query_id: "0".into(),
                value_norm: value_m / scale_m,
                sigma_norm: sigma_m / scale_m,
            }],
        }
    }
}

/// Mean value and mean sigma over all records, converted to metres.
pub fn aggregate_prior(qs: &PriorQuerySet) -> Result<ParamEstimate> {
    qs.validate()?;
    let n = qs.records.len() as f64;
    let value = qs.records.iter().map(|r| r.value_norm).sum::<f64>() / n;
    let sigma = qs.records.iter().map(|r| r.sigma_norm).sum::<f64>() / n;
    ParamEstimate::new(qs.scale_m * value, (qs.scale_m * sigma).powi(2), Source::Prior)
}

/// Fixed-length history of transitions, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    k: usize,
    slots: VecDeque<([f64; RAW_DIM], [f64; RAW_DIM])>,
}

/// Picks the history channels out of an actor observation.
pub fn raw_from_actor(obs: &[f64]) -> [f64; RAW_DIM] {
    [obs[0], obs[1], obs[2], obs[3], obs[4], obs[5], obs[7], obs[8]]
}

impl HistoryWindow {
    pub fn new(k: usize) -> Result<HistoryWindow> {
        if k == 0 {
            return Err(Error::InvalidConfig("history window must hold >= 1 step".into()));
        }
        Ok(HistoryWindow {
            k,
            slots: VecDeque::with_capacity(k),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn valid_len(&self) -> usize {
        self.slots.len()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Records one control step given the actor observations before and after it.
    pub fn push(&mut self, before: &[f64], after: &[f64]) -> Result<()> {
        if before.len() != ACTOR_DIM || after.len() != ACTOR_DIM {
            return Err(Error::shape(ACTOR_DIM, before.len().min(after.len())));
        }
        self.push_raw(raw_from_actor(before), raw_from_actor(after));
        Ok(())
    }

    pub fn push_raw(&mut self, before: [f64; RAW_DIM], after: [f64; RAW_DIM]) {
        if self.slots.len() == self.k {
            self.slots.pop_front();
        }
        self.slots.push_back((before, after));
    }

    /// Encoder input of length `k * SLOT_DIM`. Missing slots at the front
    /// are zero with a zero mask.
    pub fn features(&self, d_max: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.k * SLOT_DIM];
        let pad = self.k - self.slots.len();
        for (j, (b, a)) in self.slots.iter().enumerate() {
            let f = slot_features(b, a, d_max);
            out[(pad + j) * SLOT_DIM..(pad + j + 1) * SLOT_DIM].copy_from_slice(&f);
        }
        out
    }
}

/// Transition features in the object frame at the start of the step.
fn slot_features(b: &[f64; RAW_DIM], a: &[f64; RAW_DIM], d_max: f64) -> [f64; SLOT_DIM] {
    let (sb, cb) = (b[2], b[3]);
    let (sa, ca) = (a[2], a[3]);
    let obj_b = Vec2::new(b[0], b[1]);
    let obj_a = Vec2::new(a[0], a[1]);
    let pusher_a = Vec2::new(a[4], a[5]);
    let p_local = (pusher_a - obj_a).rotate_sc(-sa, ca);
    let disp = (obj_a - obj_b).rotate_sc(-sb, cb);
    let dtheta = wrap_angle(sa.atan2(ca) - sb.atan2(cb));
    let act = Vec2::new(a[6], a[7]).rotate_sc(-sb, cb);
    [
        p_local.x / LOCAL_SCALE,
        p_local.y / LOCAL_SCALE,
        disp.x / d_max,
        disp.y / d_max,
        dtheta / DTHETA_SCALE,
        act.x / d_max,
        act.y / d_max,
        1.0,
    ]
}

/// Ensemble mean, epistemic, aleatoric and total variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEstimate {
    pub theta: f64,
    pub var_epi: f64,
    pub var_alea: f64,
    pub var_rma: f64,
}

impl EnsembleEstimate {
    pub fn as_param(&self) -> Result<ParamEstimate> {
        ParamEstimate::new(self.theta, self.var_rma, Source::Ensemble)
    }
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

/// Mean of member means, variance of member means, mean of member
/// variances and their sum. Sums run over sorted terms so member order
/// never changes the result.
pub fn decompose(means: &[f64], vars: &[f64]) -> Result<EnsembleEstimate> {
    if means.len() != vars.len() {
        return Err(Error::shape(means.len(), vars.len()));
    }
    if means.len() < 2 {
        return Err(Error::EnsembleTooSmall(means.len()));
    }
    if means.iter().chain(vars).any(|x| !x.is_finite()) {
        return Err(Error::NumericalError("non-finite member output".into()));
    }
    let n = means.len() as f64;
    // offsets from the smallest member keep identical members exact
    let base = means.iter().copied().fold(f64::INFINITY, f64::min);
    let theta = base + sorted_sum(means.iter().map(|m| m - base).collect()) / n;
    let var_epi = sorted_sum(means.iter().map(|m| (m - theta).powi(2)).collect()) / n;
    let var_alea = sorted_sum(vars.to_vec()) / n;
    Ok(EnsembleEstimate {
        theta,
        var_epi,
        var_alea,
        var_rma: var_epi + var_alea,
    })
}

/// Independent Gaussian heads over the featurized history. Members predict
/// the CoM on a normalized scale `(com - offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEnsemble {
    pub members: Vec<GaussianHead>,
    pub k: usize,
    pub d_max: f64,
    pub offset: f64,
    pub scale: f64,
}

impl AdaptationEnsemble {
    /// Members are seeded independently from `seed`.
    pub fn new(n: usize, k: usize, hidden: &[usize], com_range: [f64; 2], d_max: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::EnsembleTooSmall(n));
        }
        let [lo, hi] = com_range;
        let scale = 0.5 * (hi - lo);
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..n)
            .map(|_| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeder.gen());
                let mut head = GaussianHead::new(k * SLOT_DIM, hidden, &mut rng)?;
                // the floor is stated in m^2
                head.var_min = VAR_MIN / (scale * scale);
                Ok(head)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptationEnsemble {
            members,
            k,
            d_max,
            offset: 0.5 * (lo + hi),
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.k * SLOT_DIM
    }

    /// Per-member metric means and variances for a batch of inputs,
    /// indexed `[member][row]`.
    pub fn member_outputs(&self, x: &Array2<f64>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut means = Vec::with_capacity(self.len());
        let mut vars = Vec::with_capacity(self.len());
        for m in &self.members {
            let (mu, var) = m.predict(x.view())?;
            means.push(mu.iter().map(|z| self.offset + self.scale * z).collect());
            vars.push(var.iter().map(|v| self.scale * self.scale * v).collect());
        }
        Ok((means, vars))
    }

    pub fn estimate_features(&self, features: &[f64]) -> Result<EnsembleEstimate> {
        if self.len() < 2 {
            return Err(Error::EnsembleTooSmall(self.len()));
        }
        if features.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), features.len()));
        }
        let x = ArrayView1::from(features).insert_axis(ndarray::Axis(0)).to_owned();
        let (means, vars) = self.member_outputs(&x)?;
        let m: Vec<f64> = means.iter().map(|v| v[0]).collect();
        let v: Vec<f64> = vars.iter().map(|v| v[0]).collect();
        decompose(&m, &v)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(config_hash);
        for (i, m) in self.members.iter().enumerate() {
            ck.insert_mlp(&format!("member{i}"), &m.net)?;
        }
        ck.metadata = serde_json::json!({
            "members": self.len(),
            "k": self.k,
            "d_max": self.d_max,
            "offset": self.offset,
            "scale": self.scale,
            "var_min": self.members.first().map(|m| m.var_min),
        });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<AdaptationEnsemble> {
        let meta = &ck.metadata;
        let get = |key: &str| {
            meta.get(key)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::DataError(format!("ensemble checkpoint lacks '{key}'")))
        };
        let n = get("members")? as usize;
        let k = get("k")? as usize;
        let var_min = get("var_min")?;
        let members = (0..n)
            .map(|i| {
                let net = ck.mlp(&format!("member{i}"))?;
                if net.input_dim() != k * SLOT_DIM || net.output_dim() != 2 {
                    return Err(Error::DataError(format!("member{i} has the wrong shape")));
                }
                Ok(GaussianHead { net, var_min })
            })
            .collect::<Result<Vec<_>>>()?;
        if members.len() < 2 {
            return Err(Error::EnsembleTooSmall(members.len()));
        }
        Ok(AdaptationEnsemble {
            members,
            k,
            d_max: get("d_max")?,
            offset: get("offset")?,
            scale: get("scale")?,
        })
    }
}

pub fn ensemble_estimate(ens: &AdaptationEnsemble, h: &HistoryWindow) -> Result<EnsembleEstimate> {
    if h.k() != ens.k {
        return Err(Error::shape(ens.k, h.k()));
    }
    ens.estimate_features(&h.features(ens.d_max))
}

/// How the online estimator produces the conditioning value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Prior fused with the ensemble; the prior alone before any step.
    Fused,
    /// Ensemble alone, evaluated on the (possibly empty) history.
    EnsembleOnly,
}

/// Per-episode online estimator: one history window per environment.
#[derive(Clone, Debug)]
pub struct OnlineEstimator<'a> {
    ens: &'a AdaptationEnsemble,
    prior: Option<ParamEstimate>,
    mode: EstimatorMode,
    range: [f64; 2],
    history: HistoryWindow,
    last_obs: Option<Vec<f64>>,
    clamped: usize,
}

impl<'a> OnlineEstimator<'a> {
    pub fn new(
        ens: &'a AdaptationEnsemble,
        prior: Option<ParamEstimate>,
        mode: EstimatorMode,
        range: [f64; 2],
    ) -> Result<Self> {
        if mode == EstimatorMode::Fused && prior.is_none() {
            return Err(Error::EmptyPrior);
        }
        Ok(OnlineEstimator {
            ens,
            prior,
            mode,
            range,
            history: HistoryWindow::new(ens.k)?,
            last_obs: None,
            clamped: 0,
        })
    }

    pub fn history(&self) -> &HistoryWindow {
        &self.history
    }

    /// Number of estimates that had to be clamped into the range.
    pub fn clamp_count(&self) -> usize {
        self.clamped
    }

    /// Feeds the newest actor observation and returns the conditioning
    /// estimate together with its trace.
    pub fn step(&mut self, actor_obs: &[f64]) -> Result<(ParamEstimate, EstimateTrace)> {
        if let Some(prev) = self.last_obs.take() {
            self.history.push(&prev, actor_obs)?;
        }
        self.last_obs = Some(actor_obs.to_vec());

        let prior = self.prior;
        let empty = self.history.valid_len() == 0;
        let rma = if self.mode == EstimatorMode::Fused && empty {
            None
        } else {
            Some(ensemble_estimate(self.ens, &self.history)?)
        };
        let mut out = match (self.mode, rma) {
            (EstimatorMode::Fused, None) => prior.expect("checked in new"),
            (EstimatorMode::Fused, Some(r)) => fuse(&prior.expect("checked in new"), &r.as_param()?)?,
            (EstimatorMode::EnsembleOnly, Some(r)) => r.as_param()?,
            (EstimatorMode::EnsembleOnly, None) => unreachable!(),
        };
        let [lo, hi] = self.range;
        if out.value < lo || out.value > hi {
            out.value = out.value.clamp(lo, hi);
            self.clamped += 1;
        }
        let (tp, sp) = prior.map_or((f64::NAN, f64::NAN), |p| (p.value, p.sigma()));
        let trace = EstimateTrace {
            theta_prior: tp,
            sigma_prior: sp,
            theta_rma: rma.map_or(f64::NAN, |r| r.theta),
            sigma_epi: rma.map_or(f64::NAN, |r| r.var_epi.sqrt()),
            sigma_alea: rma.map_or(f64::NAN, |r| r.var_alea.sqrt()),
            theta_fused: out.value,
            sigma_fused: out.sigma(),
        };
        Ok((out, trace))
    }
}

/// History windows with CoM labels, grouped by episode.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<f64>,
    pub episode: Vec<u32>,
    /// At least half of the window's `k` slots were in contact.
    pub in_contact: Vec<bool>,
    /// No contact has happened yet in the episode.
    pub pre_contact: Vec<bool>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.nrows();
        if [self.labels.len(), self.episode.len(), self.in_contact.len(), self.pre_contact.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::DataError(format!(
                "{n} windows but {} labels / {} episode ids",
                self.labels.len(),
                self.episode.len()
            )));
        }
        if self.labels.iter().any(|l| !l.is_finite()) {
            return Err(Error::DataError("non-finite label".into()));
        }
        Ok(())
    }

    /// Splits by episode id: episodes with `id % modulus == 0` go to the
    /// second set.
    pub fn split_by_episode(&self, modulus: u32) -> (WindowDataset, WindowDataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, e) in self.episode.iter().enumerate() {
            if e % modulus == 0 {
                b.push(i)
            } else {
                a.push(i)
            }
        }
        (self.subset(&a), self.subset(&b))
    }

    pub fn subset(&self, idx: &[usize]) -> WindowDataset {
        WindowDataset {
            inputs: self.inputs.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            episode: idx.iter().map(|&i| self.episode[i]).collect(),
            in_contact: idx.iter().map(|&i| self.in_contact[i]).collect(),
            pre_contact: idx.iter().map(|&i| self.pre_contact[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub episodes: usize,
    /// Keep every `stride`-th window of each episode.
    pub stride: usize,
    /// Gaussian action noise, as a fraction of `d_max`, for data diversity.
    pub action_noise: f64,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            episodes: 400,
            stride: 2,
            action_noise: 0.1,
            seed: 0,
        }
    }
}

/// Rolls out the frozen policy conditioned on the true CoM (teacher
/// conditioning) and records labelled history windows.
pub fn collect_windows(
    agent: &Agent,
    task: &TaskConfig,
    params: &SimParams,
    k: usize,
    cfg: &CollectConfig,
) -> Result<WindowDataset> {
    if cfg.stride == 0 || cfg.episodes == 0 {
        return Err(Error::InvalidConfig("episodes and stride must be >= 1".into()));
    }
    let mut task = task.clone();
    task.conditioning = Conditioning::GroundTruth;
    task.true_com = None;
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.episodes).map(|_| seeder.gen()).collect();

    let per_episode = seeds
        .par_iter()
        .enumerate()
        .map(|(ep, &seed)| collect_episode(agent, &task, params, k, cfg, ep as u32, seed))
        .collect::<Result<Vec<_>>>()?;

    let width = k * SLOT_DIM;
    let total: usize = per_episode.iter().map(|e| e.labels.len()).sum();
    let mut inputs = Vec::with_capacity(total * width);
    let mut out = WindowDataset {
        inputs: Array2::zeros((0, width)),
        labels: Vec::with_capacity(total),
        episode: Vec::with_capacity(total),
        in_contact: Vec::with_capacity(total),
        pre_contact: Vec::with_capacity(total),
    };
    for e in per_episode {
        inputs.extend_from_slice(&e.inputs);
        out.labels.extend(e.labels);
        out.episode.extend(e.episode);
        out.in_contact.extend(e.in_contact);
        out.pre_contact.extend(e.pre_contact);
    }
    out.inputs = Array2::from_shape_vec((total, width), inputs).map_err(|e| Error::DataError(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

struct EpisodeWindows {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    episode: Vec<u32>,
    in_contact: Vec<bool>,
    pre_contact: Vec<bool>,
}

fn collect_episode(
    agent: &Agent,
    task: &TaskConfig,
    params: &SimParams,
    k: usize,
    cfg: &CollectConfig,
    ep: u32,
    seed: u64,
) -> Result<EpisodeWindows> {
    let mut env = PushEnv::new(task.clone(), params.clone(), seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let label = env.true_com();
    let mut hist = HistoryWindow::new(k)?;
    let mut contacts: VecDeque<bool> = VecDeque::with_capacity(k);
    let mut any_contact = false;
    let mut w = EpisodeWindows {
        inputs: Vec::new(),
        labels: Vec::new(),
        episode: Vec::new(),
        in_contact: Vec::new(),
        pre_contact: Vec::new(),
    };
    let mut t = 0usize;
    let record = |hist: &HistoryWindow, contacts: &VecDeque<bool>, any: bool, w: &mut EpisodeWindows| {
        w.inputs.extend(hist.features(params.d_max));
        w.labels.push(label);
        w.episode.push(ep);
        w.in_contact.push(2 * contacts.iter().filter(|c| **c).count() >= k);
        w.pre_contact.push(!any);
    };
    record(&hist, &contacts, any_contact, &mut w);
    let d = params.d_max;
    while !env.is_done() {
        let before = env.observe().actor;
        let obs = Array2::from_shape_vec((1, ACTOR_DIM), before.to_vec()).unwrap();
        let a = agent.act_mean(obs.view())?;
        let mut action = [a[[0, 0]], a[[0, 1]]];
        if cfg.action_noise > 0.0 {
            for x in action.iter_mut() {
                let z: f64 = noise_rng.sample(rand_distr::StandardNormal);
                *x += cfg.action_noise * d * z;
            }
        }
        let res = env.step(action)?;
        hist.push(&before, &res.observation.actor)?;
        if contacts.len() == k {
            contacts.pop_front();
        }
        contacts.push_back(res.info.contact);
        any_contact |= res.info.contact;
        t += 1;
        if t % cfg.stride == 0 {
            record(&hist, &contacts, any_contact, &mut w);
        }
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        EnsembleTrainConfig {
            hidden: vec![128, 128],
            epochs: 20,
            minibatch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains every member on its own shuffles of the data. Returns each
/// member's mean NLL over its final epoch.
pub fn train_ensemble(ens: &mut AdaptationEnsemble, data: &WindowDataset, cfg: &EnsembleTrainConfig) -> Result<Vec<f64>> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::DataError("no training windows".into()));
    }
    if data.inputs.ncols() != ens.input_dim() {
        return Err(Error::shape(ens.input_dim(), data.inputs.ncols()));
    }
    if cfg.minibatch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("minibatch must be >= 1 and lr > 0".into()));
    }
    let targets: Vec<f64> = data.labels.iter().map(|c| (c - ens.offset) / ens.scale).collect();
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..ens.len()).map(|_| seeder.gen()).collect();
    let results: Vec<Result<f64>> = ens
        .members
        .par_iter_mut()
        .zip(seeds)
        .map(|(member, seed)| train_member(member, data, &targets, cfg, seed))
        .collect();
    results.into_iter().collect()
}

fn train_member(
    member: &mut GaussianHead,
    data: &WindowDataset,
    targets: &[f64],
    cfg: &EnsembleTrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(member.net.num_params(), cfg.lr);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(cfg.minibatch) {
            let x = data.inputs.select(ndarray::Axis(0), chunk);
            let y: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = member.nll_and_grad(x.view(), &y)?;
            let mut p = member.net.params().to_vec();
            opt.step(&mut p, &grads)?;
            member.net.params_mut().copy_from_slice(&p);
            sum += loss;
            batches += 1;
        }
        last = sum / batches as f64;
    }
    Ok(last)
}

/// Held-out quality of an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub windows: usize,
    pub in_contact_windows: usize,
    pub pre_contact_windows: usize,
    pub rmse_all: f64,
    pub rmse_in_contact: f64,
    pub mean_var_in_contact: f64,
    pub mean_var_pre_contact: f64,
    /// Fractions of labels within 1 sigma, between 1 and 2 sigma, and
    /// beyond 2 sigma of the total predictive variance.
    pub coverage_1s: f64,
    pub coverage_1s_2s: f64,
    pub coverage_beyond_2s: f64,
}

pub fn evaluate_ensemble(ens: &AdaptationEnsemble, data: &WindowDataset) -> Result<EnsembleReport> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::DataError("no evaluation windows".into()));
    }
    let (means, vars) = ens.member_outputs(&data.inputs)?;
    let n = data.len();
    let mut sq = 0.0;
    let (mut sq_in, mut n_in, mut var_in) = (0.0, 0usize, 0.0);
    let (mut n_pre, mut var_pre) = (0usize, 0.0);
    let mut bins = [0usize; 3];
    for i in 0..n {
        let m: Vec<f64> = means.iter().map(|v| v[i]).collect();
        let v: Vec<f64> = vars.iter().map(|v| v[i]).collect();
        let est = decompose(&m, &v)?;
        let e = est.theta - data.labels[i];
        sq += e * e;
        if data.in_contact[i] {
            sq_in += e * e;
            n_in += 1;
            var_in += est.var_rma;
        }
        if data.pre_contact[i] {
            n_pre += 1;
            var_pre += est.var_rma;
        }
        let z = e.abs() / est.var_rma.sqrt();
        bins[if z <= 1.0 {
            0
        } else if z <= 2.0 {
            1
        } else {
            2
        }] += 1;
    }
    let ratio = |a: f64, b: usize| if b == 0 { f64::NAN } else { a / b as f64 };
    Ok(EnsembleReport {
        windows: n,
        in_contact_windows: n_in,
        pre_contact_windows: n_pre,
        rmse_all: (sq / n as f64).sqrt(),
        rmse_in_contact: ratio(sq_in, n_in).sqrt(),
        mean_var_in_contact: ratio(var_in, n_in),
        mean_var_pre_contact: ratio(var_pre, n_pre),
        coverage_1s: bins[0] as f64 / n as f64,
        coverage_1s_2s: bins[1] as f64 / n as f64,
        coverage_beyond_2s: bins[2] as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(v: f64, s: f64) -> ParamEstimate {
        ParamEstimate::new(v, s * s, Source::Prior).unwrap()
    }

    #[test]
    fn fusion_hand_example() {
        let f = fuse(&est(0.040, 0.014), &est(0.060, 0.007)).unwrap();
        assert!((f.value - 0.056).abs() < 1e-9);
        assert_eq!(f.source, Source::Fused);
    }

    #[test]
    fn fusion_equal_variance_is_midpoint() {
        let f = fuse(&est(0.01, 0.02), &est(0.03, 0.02)).unwrap();
        assert!((f.value - 0.02).abs() < 1e-15);
    }

    #[test]
    fn fusion_vanishing_prior() {
        let f = fuse(&est(0.04, 1e6), &est(0.06, 0.007)).unwrap();
        assert!((f.value - 0.06).abs() < 1e-12);
    }

    #[test]
    fn fusion_rejects_bad_variance() {
        let bad = ParamEstimate {
            value: 0.0,
            variance: 0.0,
            source: Source::Prior,
        };
        assert!(matches!(fuse(&bad, &est(0.0, 1.0)), Err(Error::InvalidVariance(_))));
    }

    #[test]
    fn prior_aggregation_examples() {
        let qs = PriorQuerySet {
            scale_m: 0.10,
            records: vec![
                PriorRecord {
                    image_id: "a".into(),
                    query_id: "0".into(),
                    value_norm: 0.34,
                    sigma_norm: 0.12,
                },
                PriorRecord {
                    image_id: "a".into(),
                    query_id: "1".into(),
                    value_norm: 0.63,
                    sigma_norm: 0.17,
                },
            ],
        };
        let p = aggregate_prior(&qs).unwrap();
        assert!((p.value - 0.0485).abs() < 1e-12);
        assert!((p.sigma() - 0.0145).abs() < 1e-12);
        let single = aggregate_prior(&PriorQuerySet::single(0.040, 0.014, 0.10)).unwrap();
        assert!((single.value - 0.040).abs() < 1e-12 && (single.sigma() - 0.014).abs() < 1e-12);
        let empty = PriorQuerySet {
            scale_m: 0.1,
            records: vec![],
        };
        assert!(matches!(aggregate_prior(&empty), Err(Error::EmptyPrior)));
    }

    #[test]
    fn decomposition_examples() {
        let e = decompose(&[0.01, 0.02, 0.03], &[1e-4; 3]).unwrap();
        assert!((e.theta - 0.02).abs() < 1e-15);
        assert!((e.var_epi - 2.0 / 3.0 * 1e-4).abs() < 1e-15);
        assert!((e.var_rma - 5.0 / 3.0 * 1e-4).abs() < 1e-15);
        let same = decompose(&[0.05; 4], &[2e-4; 4]).unwrap();
        assert_eq!(same.var_epi, 0.0);
        assert_eq!(same.var_rma, 2e-4);
        assert!(matches!(decompose(&[0.0], &[1.0]), Err(Error::EnsembleTooSmall(1))));
    }

    #[test]
    fn history_window_padding_and_order() {
        let mut h = HistoryWindow::new(3).unwrap();
        assert!(h.features(0.01).iter().all(|x| *x == 0.0));
        let obs = |x: f64| [x, 0.0, 0.0, 1.0, x - 0.1, 0.0, 0.0, 0.01, 0.0];
        h.push(&obs(0.0), &obs(0.01)).unwrap();
        let f = h.features(0.01);
        // two padded slots, then the newest with its mask
        assert!(f[..2 * SLOT_DIM].iter().all(|x| *x == 0.0));
        assert_eq!(f[3 * SLOT_DIM - 1], 1.0);
        assert!((f[2 * SLOT_DIM + 2] - 1.0).abs() < 1e-12);
        for i in 1..5 {
            h.push(&obs(0.01 * i as f64), &obs(0.01 * (i + 1) as f64)).unwrap();
        }
        assert_eq!(h.valid_len(), 3);
    }

    #[test]
    fn ensemble_requires_two_members() {
        assert!(matches!(
            AdaptationEnsemble::new(1, 4, &[8], [-0.035, 0.075], 0.01, 0),
            Err(Error::EnsembleTooSmall(1))
        ));
    }

    #[test]
    fn untrained_members_disagree() {
        let ens = AdaptationEnsemble::new(5, 4, &[16], [-0.035, 0.075], 0.01, 3).unwrap();
        let mut h = HistoryWindow::new(4).unwrap();
        let obs = [0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.01, 0.0];
        h.push(&obs, &obs).unwrap();
        let e = ensemble_estimate(&ens, &h).unwrap();
        assert!(e.var_epi > 0.0);
        assert!(e.var_alea >= 1e-6);
    }

    #[test]
    fn ensemble_checkpoint_round_trip() {
        let ens = AdaptationEnsemble::new(3, 4, &[8], [-0.035, 0.075], 0.01, 1).unwrap();
        let ck = ens.to_checkpoint("h").unwrap();
        let back = AdaptationEnsemble::from_checkpoint(&Checkpoint::from_json(&ck.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, ens);
    }

    #[test]
    fn estimator_returns_prior_before_first_step() {
        let ens = AdaptationEnsemble::new(3, 4, &[8], [-0.035, 0.075], 0.01, 1).unwrap();
        let prior = est(0.04, 0.014);
        let mut online = OnlineEstimator::new(&ens, Some(prior), EstimatorMode::Fused, [-0.035, 0.075]).unwrap();
        let obs = [0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.04, 0.0, 0.0];
        let (e, trace) = online.step(&obs).unwrap();
        assert_eq!(e.value, 0.04);
        assert_eq!(e.variance, prior.variance);
        assert!(trace.theta_rma.is_nan());
        let (e2, _) = online.step(&obs).unwrap();
        assert_eq!(e2.source, Source::Fused);
    }
}
