//! Gradient checks shared by the learning tests and the acceptance run.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;

use pushfuse::learn::loss::mse;
use pushfuse::learn::ppo::{ppo_objective, Minibatch};
use pushfuse::learn::{ActorCritic, GaussianHead, Mlp, PpoConfig};

const H: f64 = 1e-6;

/// Worst relative error between an analytic gradient and central
/// differences of `f`, with an absolute floor for near-zero components.
pub fn fd_rel_error(params: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + H;
        let up = f(&p);
        p[k] = orig - H;
        let down = f(&p);
        p[k] = orig;
        let fd = (up - down) / (2.0 * H);
        let scale = fd.abs().max(analytic[k].abs()).max(1e-6);
        worst = worst.max((fd - analytic[k]).abs() / scale);
    }
    worst
}

fn random_sizes<R: Rng>(rng: &mut R, input: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    for _ in 0..rng.gen_range(1..=2) {
        sizes.push(rng.gen_range(2..=6));
    }
    sizes.push(output);
    sizes
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

pub fn mse_check<R: Rng>(rng: &mut R) -> f64 {
    let din = rng.gen_range(1..=4);
    let dout = rng.gen_range(1..=3);
    let net = Mlp::new(&random_sizes(rng, din, dout), 1.0, rng).unwrap();
    let x = random_matrix(rng, 6, din);
    let y = random_matrix(rng, 6, dout);
    let target: Vec<f64> = y.iter().copied().collect();
    let (out, cache) = net.forward_cached(x.view()).unwrap();
    let pred: Vec<f64> = out.iter().copied().collect();
    let (_, g) = mse(&pred, &target).unwrap();
    let g = Array2::from_shape_vec(out.dim(), g).unwrap();
    let mut grads = vec![0.0; net.num_params()];
    net.backward(&cache, g.view(), &mut grads).unwrap();
    let sizes = net.sizes().to_vec();
    fd_rel_error(net.params(), &grads, |p| {
        let n = Mlp::from_params(sizes.clone(), p.to_vec()).unwrap();
        let pred: Vec<f64> = n.forward(x.view()).unwrap().iter().copied().collect();
        mse(&pred, &target).unwrap().0
    })
}

pub fn nll_check<R: Rng>(rng: &mut R) -> f64 {
    let din = rng.gen_range(1..=4);
    let hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=6)).collect();
    let mut head = GaussianHead::new(din, &hidden, rng).unwrap();
    head.var_min = 1e-3;
    let x = random_matrix(rng, 6, din);
    let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, grads) = head.nll_and_grad(x.view(), &y).unwrap();
    let sizes = head.net.sizes().to_vec();
    fd_rel_error(head.net.params(), &grads, |p| {
        let h = GaussianHead {
            net: Mlp::from_params(sizes.clone(), p.to_vec()).unwrap(),
            var_min: head.var_min,
        };
        h.nll_and_grad(x.view(), &y).unwrap().0
    })
}

/// A random actor-critic with a minibatch whose probability ratios stay
/// away from the clip boundaries, where the objective has kinks.
pub fn random_ppo_problem<R: Rng>(rng: &mut R, batch: usize) -> (ActorCritic, Minibatch, PpoConfig) {
    let da = rng.gen_range(1..=3);
    let dobs = rng.gen_range(1..=4);
    let dcrit = dobs + 1;
    let cfg = PpoConfig {
        ent_coef: 0.01,
        ..PpoConfig::default()
    };
    let ac = ActorCritic {
        actor: Mlp::new(&random_sizes(rng, dobs, da), 1.0, rng).unwrap(),
        log_std: (0..da).map(|_| rng.gen_range(-1.0..0.0)).collect(),
        critic: Mlp::new(&random_sizes(rng, dcrit, 1), 1.0, rng).unwrap(),
    };
    let actor_obs = random_matrix(rng, batch, dobs);
    let critic_obs = random_matrix(rng, batch, dcrit);
    let mean = ac.mean(actor_obs.view()).unwrap();
    let mut actions = Array2::zeros((batch, da));
    let mut old_logp = Vec::with_capacity(batch);
    for i in 0..batch {
        let a: Vec<f64> = (0..da)
            .map(|j| mean[[i, j]] + ac.log_std[j].exp() * rng.gen_range(-1.5..1.5))
            .collect();
        let logp = ac.log_prob(mean.row(i).as_slice().unwrap(), &a);
        // ratio in one of three open bands: clipped low, unclipped, clipped high
        let band = [0.6, 1.0, 1.4][rng.gen_range(0..3)];
        let ratio: f64 = band * rng.gen_range(0.95..1.05);
        old_logp.push(logp - ratio.ln());
        for j in 0..da {
            actions[[i, j]] = a[j];
        }
    }
    let mb = Minibatch {
        actor_obs,
        critic_obs,
        actions,
        old_logp,
        adv: (0..batch).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        returns: (0..batch).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    (ac, mb, cfg)
}

pub fn ppo_check<R: Rng>(rng: &mut R) -> f64 {
    let (ac, mb, cfg) = random_ppo_problem(rng, 8);
    let (_, grads) = ppo_objective(&ac, &mb, &cfg).unwrap();
    let mut probe = ac.clone();
    fd_rel_error(&ac.flat_params(), &grads, |p| {
        probe.set_flat_params(p).unwrap();
        ppo_objective(&probe, &mb, &cfg).unwrap().0.total
    })
}
