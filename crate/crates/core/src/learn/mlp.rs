//! Fully connected network with tanh hidden layers and a linear output.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters are stored flat, layer by layer: weight `[in, out]` row-major,
/// then bias `[out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer inputs saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. The output layer is scaled by
    /// `out_gain`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Result<Mlp> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        let layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if l + 1 == layers { out_gain } else { 1.0 };
            let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 });
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Mlp> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let n = param_count(&sizes);
        if params.len() != n {
            return Err(Error::shape(n, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericalError("non-finite network parameter".into()));
        }
        Ok(Mlp { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// Weight `[in, out]` and bias of one layer.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        let w = ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).unwrap();
        let b = ArrayView1::from(&self.params[off + i * o..off + i * o + o]);
        (w, b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            h = self.apply_layer(l, h.view());
        }
        Ok(h)
    }

    fn apply_layer(&self, l: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let (w, b) = self.layer(l);
        let mut z = x.dot(&w);
        z += &b;
        if l + 1 < self.num_layers() {
            z.mapv_inplace(f64::tanh);
        }
        z
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            let next = self.apply_layer(l, h.view());
            inputs.push(h);
            h = next;
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<f64>, grads: &mut [f64]) -> Result<Array2<f64>> {
        if grads.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), grads.len()));
        }
        if grad_out.ncols() != self.output_dim() || grad_out.nrows() != cache.inputs[0].nrows() {
            return Err(Error::shape(
                format!("{}x{}", cache.inputs[0].nrows(), self.output_dim()),
                format!("{}x{}", grad_out.nrows(), grad_out.ncols()),
            ));
        }
        let mut g = grad_out.to_owned();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let a = &cache.inputs[l];
            {
                let (gw, gb) = grads[off..off + i * o + o].split_at_mut(i * o);
                let mut gw = ArrayViewMut2::from_shape((i, o), gw).unwrap();
                general_mat_mul(1.0, &a.t(), &g, 1.0, &mut gw);
                for (dst, s) in gb.iter_mut().zip(g.sum_axis(Axis(0))) {
                    *dst += s;
                }
            }
            let (w, _) = self.layer(l);
            let mut prev = g.dot(&w.t());
            if l > 0 {
                // input to layer l is the tanh output of layer l-1
                prev.zip_mut_with(a, |p, &h| *p *= 1.0 - h * h);
            }
            g = prev;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 5, 2], 1.0, &mut rng).unwrap();
        assert_eq!(net.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
        let x = Array2::zeros((4, 3));
        assert_eq!(net.forward(x.view()).unwrap().dim(), (4, 2));
        assert!(matches!(
            net.forward(Array2::zeros((4, 2)).view()),
            Err(Error::ShapeError { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 6, 4, 2], 1.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        // loss = sum(c * y)
        let loss = |n: &Mlp| (&n.forward(x.view()).unwrap() * &c).sum();
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let mut grads = vec![0.0; net.num_params()];
        net.backward(&cache, c.view(), &mut grads).unwrap();
        let h = 1e-6;
        for k in 0..net.num_params() {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let mut m = net.clone();
            m.params_mut()[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grads[k]);
        }
    }

    #[test]
    fn deterministic_init() {
        let a = Mlp::new(&[4, 8, 1], 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = Mlp::new(&[4, 8, 1], 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }
}
