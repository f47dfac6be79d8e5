use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), params.len()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), grads.len()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut opt = Adam::new(3, 1e-2);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..10 {
            opt.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut opt = Adam::new(2, 1e-3);
        let mut p = vec![0.0, 0.0];
        let mut last = p.clone();
        for _ in 0..5000 {
            opt.step(&mut p, &[5.0, -0.01]).unwrap();
            for (a, b) in p.iter().zip(&last) {
                assert!(((a - b).abs() - 1e-3).abs() < 1e-6);
            }
            last = p.clone();
        }
    }

    #[test]
    fn quadratic_bowl() {
        let target = [0.7, -1.3, 2.0];
        let mut opt = Adam::new(3, 1e-2);
        let mut p = vec![0.0; 3];
        let mut steps = 0;
        while steps < 5000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.step(&mut p, &g).unwrap();
            steps += 1;
            if p.iter().zip(&target).all(|(x, t)| (x - t).abs() < 1e-6) {
                break;
            }
        }
        assert!(steps < 5000, "did not converge");
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = Adam::new(2, 1e-3);
        assert!(opt.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert!(opt.step(&mut [0.0; 2], &[0.0; 1]).is_err());
    }
}
