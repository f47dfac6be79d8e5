//! One-dimensional point-pushing task used to smoke-test the learner.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ppo::{Transition, VecEnv};
use crate::error::Result;

pub const TOY_STEP: f64 = 0.1;
pub const TOY_HORIZON: usize = 20;

/// A point on a line starts uniformly in [-1, 1]; each action moves it by
/// `TOY_STEP * clamp(a, -1, 1)`; reward is `-|x|` after the move.
#[derive(Clone, Debug)]
pub struct PointMassVecEnv {
    x: Vec<f64>,
    t: Vec<usize>,
    rng: ChaCha8Rng,
}

impl PointMassVecEnv {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        PointMassVecEnv { x, t: vec![0; n], rng }
    }
}

/// Return of an episode from `x0` under `policy`, which maps position to action.
pub fn toy_return(x0: f64, mut policy: impl FnMut(f64) -> f64) -> f64 {
    let mut x = x0;
    let mut total = 0.0;
    for _ in 0..TOY_HORIZON {
        x += TOY_STEP * policy(x).clamp(-1.0, 1.0);
        total -= x.abs();
    }
    total
}

/// Best achievable return from `x0`: move toward the origin at full speed
/// and stop there.
pub fn toy_optimal_return(x0: f64) -> f64 {
    toy_return(x0, |x| (-x / TOY_STEP).clamp(-1.0, 1.0))
}

impl VecEnv for PointMassVecEnv {
    fn num_envs(&self) -> usize {
        self.x.len()
    }

    fn actor_dim(&self) -> usize {
        1
    }

    fn critic_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn observe(&self, mut actor: ArrayViewMut2<f64>, mut critic: ArrayViewMut2<f64>) {
        for i in 0..self.x.len() {
            actor[[i, 0]] = self.x[i];
            critic[[i, 0]] = self.x[i];
            critic[[i, 1]] = self.t[i] as f64 / TOY_HORIZON as f64;
        }
    }

    fn step(&mut self, actions: ArrayView2<f64>) -> Result<Vec<Transition>> {
        let mut out = Vec::with_capacity(self.x.len());
        for i in 0..self.x.len() {
            self.x[i] += TOY_STEP * actions[[i, 0]].clamp(-1.0, 1.0);
            self.t[i] += 1;
            let reward = -self.x[i].abs();
            let truncated = self.t[i] >= TOY_HORIZON;
            let final_critic = truncated.then(|| vec![self.x[i], 1.0]);
            if truncated {
                self.x[i] = self.rng.gen_range(-1.0..=1.0);
                self.t[i] = 0;
            }
            out.push(Transition {
                reward,
                terminal: false,
                truncated,
                final_critic,
            });
        }
        Ok(out)
    }
}
