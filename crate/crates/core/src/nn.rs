//! A small fully connected network with hand-written reverse-mode
//! differentiation, plus an Adam optimizer.
//!
//! Parameters live in one flat buffer, layer by layer: the `out × in`
//! row-major weight matrix followed by the `out` bias vector. Hidden layers
//! apply the activation; the output layer is affine.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `ln(1 + e^x)`, derivative `1 / (1 + e^-x)`.
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `c = alpha * a · b + beta * c` on row-major buffers, with optional
/// transposition of `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    // Logical a is m×k, logical b is k×n.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: strides describe in-bounds views of the asserted buffer sizes.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Mat>,
    /// Pre-activation outputs of every layer.
    pre: Vec<Mat>,
}

impl Mlp {
    pub fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let mut r = rng::stream(seed, "mlp_init");
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        for w in sizes.windows(2) {
            let normal = Normal::new(0.0, (1.0 / w[0] as f64).sqrt()).expect("positive std");
            params.extend((0..w[0] * w[1]).map(|_| normal.sample(&mut r)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let expected = Self::param_count_for(sizes);
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameters for sizes {sizes:?}, got {}",
                params.len()
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params,
        })
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

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for w in self.sizes.windows(2) {
            off.push(off.last().unwrap() + (w[0] + 1) * w[1]);
        }
        off
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, ForwardCache)> {
        self.check_input(x)?;
        let batch = x.rows();
        let offsets = self.layer_offsets();
        let last = self.sizes.len() - 2;
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::with_capacity(last + 1);
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wt = &self.params[offsets[l]..offsets[l] + fan_in * fan_out];
            let bias = &self.params[offsets[l] + fan_in * fan_out..offsets[l + 1]];
            let mut z = Mat::zeros(batch, fan_out);
            for i in 0..batch {
                z.row_mut(i).copy_from_slice(bias);
            }
            gemm(batch, fan_in, fan_out, inputs[l].as_slice(), false, wt, true, 1.0, z.as_mut_slice());
            if l < last {
                let mut h = z.clone();
                let act = self.activation;
                h.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                inputs.push(h);
                pre.push(z);
            } else {
                pre.push(z.clone());
                return Ok((z, ForwardCache { inputs, pre }));
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Accumulates `∂L/∂params` into `grad` (same layout as the parameters)
    /// and returns `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Mat, grad: &mut [f64]) -> Mat {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let offsets = self.layer_offsets();
        let batch = grad_out.rows();
        let mut delta = grad_out.clone();
        for l in (0..self.sizes.len() - 1).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if l < self.sizes.len() - 2 {
                let act = self.activation;
                for (d, z) in delta.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                    *d *= act.derivative(*z);
                }
            }
            let (gw, gb) = grad[offsets[l]..offsets[l + 1]].split_at_mut(fan_in * fan_out);
            gemm(fan_out, batch, fan_in, delta.as_slice(), true, cache.inputs[l].as_slice(), false, 1.0, gw);
            for row in delta.iter_rows() {
                for (b, d) in gb.iter_mut().zip(row) {
                    *b += d;
                }
            }
            let wt = &self.params[offsets[l]..offsets[l] + fan_in * fan_out];
            let mut next = Mat::zeros(batch, fan_in);
            gemm(batch, fan_out, fan_in, delta.as_slice(), false, wt, false, 0.0, next.as_mut_slice());
            delta = next;
        }
        delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::invalid("Adam moments must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_sq_loss(net: &Mlp, x: &Mat, y: &Mat) -> f64 {
        let out = net.forward(x).unwrap();
        out.as_slice().iter().zip(y.as_slice()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum()
    }

    #[test]
    fn parameter_count_closed_form() {
        let net = Mlp::new(&[10, 64, 64, 32], Activation::Softplus, 0).unwrap();
        assert_eq!(net.param_count(), 11 * 64 + 65 * 64 + 65 * 32);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(&[3, 5, 4, 2], Activation::Softplus, 3).unwrap();
        let x = Mat::from_rows(&[[0.1, -0.4, 0.9], [1.2, 0.3, -0.7]]);
        let y = Mat::from_rows(&[[0.5, -0.2], [0.0, 1.0]]);
        let (out, cache) = net.forward_cached(&x).unwrap();
        let mut g_out = out.clone();
        for (g, t) in g_out.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *g -= t;
        }
        let mut grad = vec![0.0; net.param_count()];
        let g_in = net.backward(&cache, &g_out, &mut grad);
        let h = 1e-5;
        for p in 0..net.param_count() {
            let mut plus = net.clone();
            plus.params_mut()[p] += h;
            let mut minus = net.clone();
            minus.params_mut()[p] -= h;
            let fd = (half_sq_loss(&plus, &x, &y) - half_sq_loss(&minus, &x, &y)) / (2.0 * h);
            let err = (fd - grad[p]).abs() / fd.abs().max(grad[p].abs()).max(1e-8);
            assert!(err <= 1e-4 || (fd - grad[p]).abs() < 1e-10, "param {p}: {fd} vs {}", grad[p]);
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp.set(i, j, x.get(i, j) + h);
                let mut xm = x.clone();
                xm.set(i, j, x.get(i, j) - h);
                let fd = (half_sq_loss(&net, &xp, &y) - half_sq_loss(&net, &xm, &y)) / (2.0 * h);
                assert!((fd - g_in.get(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(Activation::Softplus.apply(1000.0), 1000.0);
        assert!(Activation::Softplus.apply(-1000.0) >= 0.0);
        assert!((Activation::Softplus.derivative(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }
}
