#![allow(dead_code)]

use partfield::codebook::PartNameCodebook;
use partfield::losses::{total_loss, LabeledFeatureBatch, LossConfig};
use partfield::mat::{norm, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(rows, dim);
    for i in 0..rows {
        let row = m.row_mut(i);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(r);
        }
        let n = norm(row);
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..m)).collect()
}

/// Literal triple loop over the supervised contrastive definition.
pub fn naive_geometric(f: &Mat, labels: &[usize], tau: f64) -> f64 {
    let n = f.rows();
    let dot = |i: usize, j: usize| -> f64 { (0..f.cols()).map(|d| f.get(i, d) * f.get(j, d)).sum() };
    let mut total = 0.0;
    for i in 0..n {
        let n_ai = labels.iter().filter(|&&l| l == labels[i]).count();
        if n_ai < 2 {
            continue;
        }
        let mut inner = 0.0;
        for j in 0..n {
            if j == i || labels[j] != labels[i] {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += (dot(i, k) / tau).exp();
                }
            }
            inner += ((dot(i, j) / tau).exp() / denom).ln();
        }
        total += -inner / (n_ai as f64 - 1.0);
    }
    total
}

/// Literal double loop over the InfoNCE definition.
pub fn naive_semantic(f: &Mat, labels: &[usize], codes: &Mat, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..f.rows() {
        let sim = |k: usize| -> f64 { (0..f.cols()).map(|d| f.get(i, d) * codes.get(k, d)).sum::<f64>() / tau };
        let mut denom = 0.0;
        for k in 0..codes.rows() {
            denom += sim(k).exp();
        }
        total += -(sim(labels[i]).exp() / denom).ln();
    }
    total
}

/// Central differences of the total loss with rows as free variables.
pub fn fd_loss_gradient(f: &Mat, labels: &[usize], cb: &PartNameCodebook, cfg: &LossConfig, h: f64) -> Mat {
    let eval = |m: Mat| {
        let b = LabeledFeatureBatch::with_free_rows(m, labels.to_vec(), "fd").unwrap();
        total_loss(&b, cb, cfg).unwrap()
    };
    let mut g = Mat::zeros(f.rows(), f.cols());
    for i in 0..f.rows() {
        for d in 0..f.cols() {
            let mut p = f.clone();
            p.set(i, d, f.get(i, d) + h);
            let mut m = f.clone();
            m.set(i, d, f.get(i, d) - h);
            g.set(i, d, (eval(p) - eval(m)) / (2.0 * h));
        }
    }
    g
}

/// Relative error with a floor so that near-zero components compare
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

use partfield::codebook::build_codebook;
use partfield::descriptors::DescriptorMatrix;
use partfield::field::{backward_tape, forward, forward_tape, RefineNetParams};

/// Total loss of the network's output on `desc` with `labels`.
pub fn net_loss(params: &RefineNetParams, desc: &Mat, labels: &[usize], cb: &PartNameCodebook, cfg: &LossConfig) -> f64 {
    let f = forward(params, &DescriptorMatrix(desc.clone())).unwrap();
    let b = LabeledFeatureBatch::new(f.values, labels.to_vec(), "t").unwrap();
    total_loss(&b, cb, cfg).unwrap()
}

/// Parameter gradient by the library's reverse pass.
pub fn net_gradient(params: &RefineNetParams, desc: &Mat, labels: &[usize], cb: &PartNameCodebook, cfg: &LossConfig) -> Vec<f64> {
    let tape = forward_tape(params, desc).unwrap();
    let b = LabeledFeatureBatch::new(tape.unit_rows().clone(), labels.to_vec(), "t").unwrap();
    let g = partfield::losses::loss_gradients(&b, cb, cfg).unwrap();
    let mut grad = vec![0.0; params.param_count()];
    backward_tape(params, &tape, &g, &mut grad);
    grad
}

pub fn two_name_codebook(dim: usize) -> PartNameCodebook {
    build_codebook(&["a", "b"], dim, 17).unwrap()
}
