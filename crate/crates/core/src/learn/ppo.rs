//! Clipped-surrogate PPO with a Gaussian actor and an asymmetric critic.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::Mlp;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Outcome of one environment step as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub reward: f64,
    /// Episode ended in an absorbing state (value 0 afterwards).
    pub terminal: bool,
    /// Episode was cut by the time limit; bootstrap from `final_critic`.
    pub truncated: bool,
    pub final_critic: Option<Vec<f64>>,
}

/// Batch of auto-resetting environments.
pub trait VecEnv {
    fn num_envs(&self) -> usize;
    fn actor_dim(&self) -> usize;
    fn critic_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn observe(&self, actor: ArrayViewMut2<f64>, critic: ArrayViewMut2<f64>);
    fn step(&mut self, actions: ArrayView2<f64>) -> Result<Vec<Transition>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lam: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Multiplies environment rewards before advantage estimation.
    pub reward_scale: f64,
    /// Stop the epoch loop early once the KL estimate exceeds 1.5x this.
    pub target_kl: Option<f64>,
    pub updates: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 0.99,
            lam: 0.95,
            epochs: 4,
            minibatch: 4096,
            lr: 3e-4,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 1.0,
            num_envs: 256,
            rollout_steps: 32,
            actor_hidden: vec![128, 128],
            critic_hidden: vec![128, 128],
            init_log_std: -0.5,
            reward_scale: 0.1,
            target_kl: None,
            updates: 200,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.lam > 0.0 && self.lam <= 1.0) {
            return bad("lambda must be in (0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be > 0");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.num_envs == 0 || self.rollout_steps == 0 {
            return bad("epochs, minibatch, num_envs and rollout_steps must be >= 1");
        }
        if !(self.lr > 0.0 && self.max_grad_norm > 0.0) {
            return bad("lr and max_grad_norm must be > 0");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be > 0");
        }
        if !(self.ent_coef >= 0.0 && self.vf_coef >= 0.0) {
            return bad("loss coefficients must be >= 0");
        }
        Ok(())
    }
}

/// Gaussian policy with state-independent log standard deviation, plus a
/// critic over its own (privileged) observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(
        actor_dim: usize,
        critic_dim: usize,
        action_dim: usize,
        cfg: &PpoConfig,
        rng: &mut R,
    ) -> Result<ActorCritic> {
        let mut a = vec![actor_dim];
        a.extend_from_slice(&cfg.actor_hidden);
        a.push(action_dim);
        let mut c = vec![critic_dim];
        c.extend_from_slice(&cfg.critic_hidden);
        c.push(1);
        Ok(ActorCritic {
            actor: Mlp::new(&a, 0.01, rng)?,
            log_std: vec![cfg.init_log_std; action_dim],
            critic: Mlp::new(&c, 1.0, rng)?,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.log_std.len() + self.critic.num_params()
    }

    /// Actor parameters, then log-std, then critic parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.actor.params());
        v.extend_from_slice(&self.log_std);
        v.extend_from_slice(self.critic.params());
        v
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), p.len()));
        }
        let (a, rest) = p.split_at(self.actor.num_params());
        let (s, c) = rest.split_at(self.log_std.len());
        self.actor.params_mut().copy_from_slice(a);
        self.log_std.copy_from_slice(s);
        self.critic.params_mut().copy_from_slice(c);
        Ok(())
    }

    pub fn mean(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.actor.forward(obs)
    }

    pub fn value(&self, critic_obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.critic.forward(critic_obs)?.column(0).to_vec())
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), ls)| {
                let z = (a - m) * (-ls).exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (1.0 + LN_2PI)).sum()
    }

    /// Samples one action per row and returns it with its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, obs: ArrayView2<f64>, rng: &mut R) -> Result<(Array2<f64>, Vec<f64>)> {
        let mean = self.mean(obs)?;
        let mut actions = mean.clone();
        let mut logp = Vec::with_capacity(mean.nrows());
        for (mut a, m) in actions.rows_mut().into_iter().zip(mean.rows()) {
            for (j, x) in a.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *x += self.log_std[j].exp() * z;
            }
            logp.push(self.log_prob(m.as_slice().unwrap(), a.as_slice().unwrap()));
        }
        Ok((actions, logp))
    }
}

/// Flat storage of one rollout, row index `t * num_envs + env`.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    pub actor_obs: Array2<f64>,
    pub critic_obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub logp: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the successor state: 0 after a terminal, the bootstrap value
    /// after a truncation.
    pub next_values: Vec<f64>,
    /// Episode boundary after this transition.
    pub dones: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_envs * self.steps;
        if n == 0 {
            return Err(Error::InvalidBuffer("empty rollout buffer".into()));
        }
        let lens = [
            self.actor_obs.nrows(),
            self.critic_obs.nrows(),
            self.actions.nrows(),
            self.logp.len(),
            self.rewards.len(),
            self.values.len(),
            self.next_values.len(),
            self.dones.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidBuffer(format!("inconsistent buffer lengths {lens:?}, expected {n}")));
        }
        Ok(())
    }
}

/// Generalized advantage estimates and value targets.
pub fn compute_gae(buf: &RolloutBuffer, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let n = buf.num_envs;
    let mut adv = vec![0.0; buf.len()];
    for e in 0..n {
        let mut next = 0.0;
        for t in (0..buf.steps).rev() {
            let i = t * n + e;
            let delta = buf.rewards[i] + gamma * buf.next_values[i] - buf.values[i];
            let carry = if buf.dones[i] { 0.0 } else { next };
            next = delta + gamma * lam * carry;
            adv[i] = next;
        }
    }
    let ret = adv.iter().zip(&buf.values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// One minibatch of PPO training data.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub actor_obs: Array2<f64>,
    pub critic_obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_logp: Vec<f64>,
    pub adv: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLosses {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// Loss `policy + vf_coef * value - ent_coef * entropy` and its gradient
/// with respect to [`ActorCritic::flat_params`].
pub fn ppo_objective(ac: &ActorCritic, mb: &Minibatch, cfg: &PpoConfig) -> Result<(PpoLosses, Vec<f64>)> {
    let b = mb.adv.len();
    if b == 0 {
        return Err(Error::InvalidBuffer("empty minibatch".into()));
    }
    let nb = b as f64;
    let da = ac.action_dim();
    let (mean, acache) = ac.actor.forward_cached(mb.actor_obs.view())?;
    let (vout, ccache) = ac.critic.forward_cached(mb.critic_obs.view())?;

    let inv_var: Vec<f64> = ac.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut g_mean = Array2::<f64>::zeros((b, da));
    let mut g_logstd = vec![0.0; da];
    let mut policy_loss = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for i in 0..b {
        let m = mean.row(i);
        let a = mb.actions.row(i);
        let logp = ac.log_prob(m.as_slice().unwrap(), a.as_slice().unwrap());
        let ratio = (logp - mb.old_logp[i]).exp();
        let adv = mb.adv[i];
        let unclipped = ratio * adv;
        let clipped_r = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let clipped_obj = clipped_r * adv;
        kl += (ratio - 1.0) - (logp - mb.old_logp[i]);
        if unclipped <= clipped_obj {
            policy_loss -= unclipped;
            // d(-r A)/d logp = -r A
            let coef = -unclipped / nb;
            for j in 0..da {
                let d = a[j] - m[j];
                g_mean[[i, j]] = coef * d * inv_var[j];
                g_logstd[j] += coef * (d * d * inv_var[j] - 1.0);
            }
        } else {
            policy_loss -= clipped_obj;
            clipped += 1;
        }
    }
    policy_loss /= nb;
    let entropy = ac.entropy();
    for g in g_logstd.iter_mut() {
        *g -= cfg.ent_coef;
    }

    let mut g_v = Array2::<f64>::zeros((b, 1));
    let mut value_loss = 0.0;
    for i in 0..b {
        let e = vout[[i, 0]] - mb.returns[i];
        value_loss += e * e;
        g_v[[i, 0]] = cfg.vf_coef * 2.0 * e / nb;
    }
    value_loss /= nb;

    let mut grads = vec![0.0; ac.num_params()];
    let na = ac.actor.num_params();
    let (ga, rest) = grads.split_at_mut(na);
    let (gs, gc) = rest.split_at_mut(da);
    ac.actor.backward(&acache, g_mean.view(), ga)?;
    gs.copy_from_slice(&g_logstd);
    ac.critic.backward(&ccache, g_v.view(), gc)?;

    let total = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy;
    if !total.is_finite() {
        return Err(Error::NumericalError(format!(
            "non-finite PPO loss (policy {policy_loss}, value {value_loss})"
        )));
    }
    Ok((
        PpoLosses {
            policy_loss,
            value_loss,
            entropy,
            total,
            approx_kl: kl / nb,
            clip_frac: clipped as f64 / nb,
        },
        grads,
    ))
}

/// Scales `grads` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

fn gather(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    src.select(Axis(0), idx)
}

/// Runs `cfg.epochs` passes of minibatch updates over the buffer.
pub fn ppo_update<R: Rng + ?Sized>(
    ac: &mut ActorCritic,
    opt: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    buf.validate()?;
    let (mut adv, returns) = compute_gae(buf, cfg.gamma, cfg.lam);
    let n = adv.len();
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));

    let mb_size = cfg.minibatch.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let mut params = ac.flat_params();
    'epochs: for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        let mut epoch_kl = 0.0;
        let mut epoch_mbs = 0;
        for chunk in idx.chunks(mb_size) {
            let mb = Minibatch {
                actor_obs: gather(&buf.actor_obs, chunk),
                critic_obs: gather(&buf.critic_obs, chunk),
                actions: gather(&buf.actions, chunk),
                old_logp: chunk.iter().map(|&i| buf.logp[i]).collect(),
                adv: chunk.iter().map(|&i| adv[i]).collect(),
                returns: chunk.iter().map(|&i| returns[i]).collect(),
            };
            let (l, mut g) = ppo_objective(ac, &mb, cfg)?;
            let gn = clip_grad_norm(&mut g, cfg.max_grad_norm);
            opt.step(&mut params, &g)?;
            ac.set_flat_params(&params)?;
            stats.policy_loss += l.policy_loss;
            stats.value_loss += l.value_loss;
            stats.entropy += l.entropy;
            stats.approx_kl += l.approx_kl;
            stats.clip_frac += l.clip_frac;
            stats.grad_norm += gn;
            stats.minibatches += 1;
            epoch_kl += l.approx_kl;
            epoch_mbs += 1;
        }
        if let Some(target) = cfg.target_kl {
            if epoch_kl / epoch_mbs as f64 > 1.5 * target {
                break 'epochs;
            }
        }
    }
    let k = stats.minibatches as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_frac /= k;
    stats.grad_norm /= k;
    Ok(stats)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub update: u64,
    pub env_steps: u64,
    pub mean_reward: f64,
    /// Mean undiscounted return of episodes that finished in this rollout.
    pub mean_episode_return: Option<f64>,
    pub episodes: usize,
    /// Fraction of finished episodes that ended in a terminal state.
    pub terminal_rate: Option<f64>,
    pub ppo: PpoStats,
}

/// Complete learner state: enough to resume training bit-identically given
/// the matching environment snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoTrainer {
    pub cfg: PpoConfig,
    pub ac: ActorCritic,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub updates: u64,
    pub env_steps: u64,
    episode_returns: Vec<f64>,
}

impl PpoTrainer {
    pub fn new(cfg: PpoConfig, actor_dim: usize, critic_dim: usize, action_dim: usize, seed: u64) -> Result<PpoTrainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ac = ActorCritic::new(actor_dim, critic_dim, action_dim, &cfg, &mut rng)?;
        Ok(Self::from_parts(cfg, ac, rng))
    }

    /// Continues from existing weights with a fresh optimizer.
    pub fn from_parts(cfg: PpoConfig, ac: ActorCritic, rng: ChaCha8Rng) -> PpoTrainer {
        let opt = Adam::new(ac.num_params(), cfg.lr);
        PpoTrainer {
            ac,
            opt,
            rng,
            updates: 0,
            env_steps: 0,
            episode_returns: vec![0.0; cfg.num_envs],
            cfg,
        }
    }

    fn check_env(&self, env: &dyn VecEnv) -> Result<()> {
        if env.num_envs() != self.cfg.num_envs {
            return Err(Error::shape(self.cfg.num_envs, env.num_envs()));
        }
        if env.actor_dim() != self.ac.actor.input_dim() {
            return Err(Error::shape(self.ac.actor.input_dim(), env.actor_dim()));
        }
        if env.critic_dim() != self.ac.critic.input_dim() {
            return Err(Error::shape(self.ac.critic.input_dim(), env.critic_dim()));
        }
        if env.action_dim() != self.ac.action_dim() {
            return Err(Error::shape(self.ac.action_dim(), env.action_dim()));
        }
        Ok(())
    }

    /// Collects one rollout with the current stochastic policy.
    pub fn collect(&mut self, env: &mut dyn VecEnv) -> Result<(RolloutBuffer, IterationStats)> {
        self.check_env(env)?;
        let n = env.num_envs();
        let t_max = self.cfg.rollout_steps;
        let (da, dc, dact) = (env.actor_dim(), env.critic_dim(), env.action_dim());
        let rows = n * t_max;
        let mut buf = RolloutBuffer {
            num_envs: n,
            steps: t_max,
            actor_obs: Array2::zeros((rows, da)),
            critic_obs: Array2::zeros((rows, dc)),
            actions: Array2::zeros((rows, dact)),
            logp: vec![0.0; rows],
            rewards: vec![0.0; rows],
            values: vec![0.0; rows],
            next_values: vec![0.0; rows],
            dones: vec![false; rows],
        };
        let mut stats = IterationStats::default();
        let mut finished_returns = Vec::new();
        let mut terminals = 0usize;
        let mut truncated_obs: Vec<(usize, Vec<f64>)> = Vec::new();
        for t in 0..t_max {
            let r0 = t * n;
            {
                let a = buf.actor_obs.slice_mut(ndarray::s![r0..r0 + n, ..]);
                let c = buf.critic_obs.slice_mut(ndarray::s![r0..r0 + n, ..]);
                env.observe(a, c);
            }
            let obs = buf.actor_obs.slice(ndarray::s![r0..r0 + n, ..]);
            let (actions, logp) = self.ac.sample(obs, &mut self.rng)?;
            let values = self.ac.value(buf.critic_obs.slice(ndarray::s![r0..r0 + n, ..]))?;
            let trans = env.step(actions.view())?;
            if trans.len() != n {
                return Err(Error::shape(n, trans.len()));
            }
            buf.actions.slice_mut(ndarray::s![r0..r0 + n, ..]).assign(&actions);
            for (e, tr) in trans.into_iter().enumerate() {
                let i = r0 + e;
                buf.logp[i] = logp[e];
                buf.values[i] = values[e];
                buf.rewards[i] = tr.reward * self.cfg.reward_scale;
                buf.dones[i] = tr.terminal || tr.truncated;
                self.episode_returns[e] += tr.reward;
                if buf.dones[i] {
                    finished_returns.push(self.episode_returns[e]);
                    self.episode_returns[e] = 0.0;
                    terminals += tr.terminal as usize;
                }
                if tr.truncated {
                    let fc = tr
                        .final_critic
                        .ok_or_else(|| Error::InvalidBuffer("truncated transition without final observation".into()))?;
                    if fc.len() != dc {
                        return Err(Error::shape(dc, fc.len()));
                    }
                    truncated_obs.push((i, fc));
                }
            }
        }
        // successor values: next row's value within an episode, bootstrap at
        // the rollout end and at truncations, zero after terminals
        let mut last_actor = Array2::zeros((n, da));
        let mut last_critic = Array2::zeros((n, dc));
        env.observe(last_actor.view_mut(), last_critic.view_mut());
        let last_values = self.ac.value(last_critic.view())?;
        for t in 0..t_max {
            for e in 0..n {
                let i = t * n + e;
                buf.next_values[i] = if buf.dones[i] {
                    0.0
                } else if t + 1 < t_max {
                    buf.values[i + n]
                } else {
                    last_values[e]
                };
            }
        }
        if !truncated_obs.is_empty() {
            let m = Array2::from_shape_fn((truncated_obs.len(), dc), |(r, c)| truncated_obs[r].1[c]);
            let v = self.ac.value(m.view())?;
            for ((i, _), v) in truncated_obs.iter().zip(v) {
                buf.next_values[*i] = v;
            }
        }
        self.env_steps += rows as u64;
        stats.env_steps = self.env_steps;
        stats.mean_reward = buf.rewards.iter().sum::<f64>() / (rows as f64 * self.cfg.reward_scale);
        stats.episodes = finished_returns.len();
        if !finished_returns.is_empty() {
            let k = finished_returns.len() as f64;
            stats.mean_episode_return = Some(finished_returns.iter().sum::<f64>() / k);
            stats.terminal_rate = Some(terminals as f64 / k);
        }
        Ok((buf, stats))
    }

    /// Collects a rollout and applies one PPO update.
    pub fn iterate(&mut self, env: &mut dyn VecEnv) -> Result<IterationStats> {
        let (buf, mut stats) = self.collect(env)?;
        stats.ppo = ppo_update(&mut self.ac, &mut self.opt, &buf, &self.cfg, &mut self.rng)?;
        self.updates += 1;
        stats.update = self.updates;
        Ok(stats)
    }
}
