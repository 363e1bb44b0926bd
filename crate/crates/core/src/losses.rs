//! Part-contrastive objectives on unit feature rows.
//!
//! * geometric loss: supervised contrastive loss over same-part pairs,
//!   `Σ_i −1/(N_{a_i}−1) Σ_{j≠i, a_j=a_i} log softmax_{k≠i}(f_i·f_k/τ)_j`;
//!   anchors whose part has a single sample contribute nothing.
//! * semantic loss: InfoNCE of each feature against the category's part-name
//!   target vectors, `Σ_i −log softmax_k(f_i·x_k/τ)_{a_i}`.
//! * total loss: the sum of whichever of the two is enabled.
//!
//! Gradients treat feature rows as free vectors in `R^n`; projecting onto
//! the sphere is the caller's job.

use log::{debug, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::codebook::PartNameCodebook;
use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::geometry::PartLabeledCloud;
use crate::mat::{dot, log_sum_exp, norm, Mat};
use crate::rng;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureBatch {
    pub features: Mat,
    pub labels: Vec<usize>,
    /// `counts[a]` is the number of rows with label `a`.
    pub counts: Vec<usize>,
    pub category: String,
    free_rows: bool,
}

impl LabeledFeatureBatch {
    /// Rows must be unit-norm within 1e-9.
    pub fn new(features: Mat, labels: Vec<usize>, category: impl Into<String>) -> Result<Self> {
        let batch = Self::with_free_rows(features, labels, category)?;
        for (i, row) in batch.features.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("feature row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            free_rows: false,
            ..batch
        })
    }

    /// No unit-norm requirement; used when rows are perturbed freely, e.g.
    /// by finite-difference checks.
    pub fn with_free_rows(features: Mat, labels: Vec<usize>, category: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if !features.is_finite() {
            return Err(Error::invalid("non-finite features"));
        }
        let m = labels.iter().max().map_or(0, |&l| l + 1);
        let mut counts = vec![0usize; m];
        for &l in &labels {
            counts[l] += 1;
        }
        Ok(Self {
            features,
            labels,
            counts,
            category: category.into(),
            free_rows: true,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn has_free_rows(&self) -> bool {
        self.free_rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau_geo: f64,
    pub tau_sem: f64,
    pub enable_geo: bool,
    pub enable_sem: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_geo: 0.175,
            tau_sem: 0.1,
            enable_geo: true,
            enable_sem: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_geo > 0.0 && self.tau_sem > 0.0) {
            return Err(Error::invalid("loss temperatures must be positive"));
        }
        if !self.enable_geo && !self.enable_sem {
            return Err(Error::invalid("at least one of the geometric and semantic losses must be enabled"));
        }
        Ok(())
    }
}

/// Geometric loss value plus how many anchors had a positive partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricLoss {
    pub value: f64,
    pub active_anchors: usize,
}

impl GeometricLoss {
    /// True when every anchor was a singleton and the loss is 0 by
    /// convention.
    pub fn all_singleton(&self) -> bool {
        self.active_anchors == 0
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn gram(features: &Mat) -> Mat {
    let n = features.rows();
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(features.row(i), features.row(j));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

/// Value and, optionally, gradient (accumulated into `grad`).
fn geometric_core(batch: &LabeledFeatureBatch, tau: f64, mut grad: Option<&mut Mat>) -> GeometricLoss {
    let n = batch.len();
    let f = &batch.features;
    let s = gram(f);
    let mut total = 0.0;
    let mut active = 0usize;
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let positives = batch.counts[batch.labels[i]] - 1;
        if positives == 0 {
            continue;
        }
        active += 1;
        logits.clear();
        logits.extend((0..n).filter(|&k| k != i).map(|k| s.get(i, k) / tau));
        let lse = log_sum_exp(&logits);
        let pos_mean = (0..n)
            .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
            .map(|j| s.get(i, j) / tau)
            .sum::<f64>()
            / positives as f64;
        total += lse - pos_mean;

        if let Some(g) = grad.as_deref_mut() {
            for k in (0..n).filter(|&k| k != i) {
                let p = (s.get(i, k) / tau - lse).exp();
                let target = if batch.labels[k] == batch.labels[i] {
                    1.0 / positives as f64
                } else {
                    0.0
                };
                let c = (p - target) / tau;
                if c == 0.0 {
                    continue;
                }
                // d s_ik / d f_i = f_k and d s_ik / d f_k = f_i.
                for d in 0..f.cols() {
                    let gi = g.get(i, d) + c * f.get(k, d);
                    g.set(i, d, gi);
                    let gk = g.get(k, d) + c * f.get(i, d);
                    g.set(k, d, gk);
                }
            }
        }
    }
    GeometricLoss {
        value: total,
        active_anchors: active,
    }
}

fn semantic_core(batch: &LabeledFeatureBatch, codebook: &PartNameCodebook, tau: f64, mut grad: Option<&mut Mat>) -> f64 {
    let m = codebook.len();
    let mut total = 0.0;
    let mut logits = vec![0.0; m];
    for (i, f) in batch.features.iter_rows().enumerate() {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot(f, codebook.vectors.row(k)) / tau;
        }
        let lse = log_sum_exp(&logits);
        let a = batch.labels[i];
        total += lse - logits[a];
        if let Some(g) = grad.as_deref_mut() {
            let row = g.row_mut(i);
            for (k, &l) in logits.iter().enumerate() {
                let c = ((l - lse).exp() - if k == a { 1.0 } else { 0.0 }) / tau;
                for (gd, xd) in row.iter_mut().zip(codebook.vectors.row(k)) {
                    *gd += c * xd;
                }
            }
        }
    }
    total
}

fn check_batch(batch: &LabeledFeatureBatch) -> Result<()> {
    if !batch.free_rows {
        for (i, row) in batch.features.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("feature row {i} has norm {n}, expected 1")));
            }
        }
    }
    Ok(())
}

fn check_codebook(batch: &LabeledFeatureBatch, codebook: &PartNameCodebook) -> Result<()> {
    if codebook.dim != batch.dim() {
        return Err(Error::invalid(format!(
            "codebook dim {} does not match feature dim {}",
            codebook.dim,
            batch.dim()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&a| a >= codebook.len()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for a codebook of {} names",
            codebook.len()
        )));
    }
    Ok(())
}

pub fn geometric_loss(batch: &LabeledFeatureBatch, tau: f64) -> Result<GeometricLoss> {
    check_tau(tau)?;
    check_batch(batch)?;
    let out = geometric_core(batch, tau, None);
    if out.all_singleton() {
        debug!("geometric loss: every anchor is a singleton, returning 0");
    }
    Ok(out)
}

pub fn semantic_loss(batch: &LabeledFeatureBatch, codebook: &PartNameCodebook, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_batch(batch)?;
    check_codebook(batch, codebook)?;
    Ok(semantic_core(batch, codebook, tau, None))
}

/// Per-term values and the gradient of the enabled total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub geo: Option<f64>,
    pub sem: Option<f64>,
    pub total: f64,
    pub grad: Mat,
}

fn evaluate(batch: &LabeledFeatureBatch, codebook: &PartNameCodebook, config: &LossConfig, want_grad: bool) -> Result<LossEval> {
    config.validate()?;
    check_batch(batch)?;
    if config.enable_sem {
        check_codebook(batch, codebook)?;
    }
    let mut grad = Mat::zeros(batch.len(), batch.dim());
    let geo = config.enable_geo.then(|| {
        geometric_core(batch, config.tau_geo, want_grad.then_some(&mut grad)).value
    });
    let sem = config.enable_sem.then(|| {
        semantic_core(batch, codebook, config.tau_sem, want_grad.then_some(&mut grad))
    });
    let total = geo.unwrap_or(0.0) + sem.unwrap_or(0.0);
    Ok(LossEval { geo, sem, total, grad })
}

pub fn total_loss(batch: &LabeledFeatureBatch, codebook: &PartNameCodebook, config: &LossConfig) -> Result<f64> {
    Ok(evaluate(batch, codebook, config, false)?.total)
}

pub fn loss_and_gradients(batch: &LabeledFeatureBatch, codebook: &PartNameCodebook, config: &LossConfig) -> Result<LossEval> {
    evaluate(batch, codebook, config, true)
}

/// Gradient of [`total_loss`] with respect to the feature rows.
pub fn loss_gradients(batch: &LabeledFeatureBatch, codebook: &PartNameCodebook, config: &LossConfig) -> Result<Mat> {
    Ok(evaluate(batch, codebook, config, true)?.grad)
}

/// One sampled row: (instance index, point index, part label).
pub type BatchEntry = (usize, usize, usize);

/// Balanced per-part draw across `instances_per_batch` clouds of one
/// category. Labels index `part_names` of the category (shared across
/// instances, matched by name). Parts with fewer than `points_per_part`
/// points contribute all of them.
pub fn sample_batch_entries(
    clouds: &[&PartLabeledCloud],
    category: &str,
    part_names: &[String],
    points_per_part: usize,
    instances_per_batch: usize,
    seed: u64,
) -> Result<Vec<BatchEntry>> {
    if points_per_part == 0 || instances_per_batch == 0 {
        return Err(Error::invalid("points_per_part and instances_per_batch must be positive"));
    }
    let pool: Vec<usize> = (0..clouds.len()).filter(|&i| clouds[i].category == category).collect();
    if pool.len() < instances_per_batch {
        return Err(Error::invalid(format!(
            "need {instances_per_batch} instances of `{category}`, dataset has {}",
            pool.len()
        )));
    }
    let mut r = rng::stream(seed, "sample_batch");
    let chosen: Vec<usize> = pool.choose_multiple(&mut r, instances_per_batch).copied().collect();
    let mut entries = Vec::new();
    for (label, name) in part_names.iter().enumerate() {
        let before = entries.len();
        for &inst in &chosen {
            let cloud = clouds[inst];
            let Some(local) = cloud.part_index(name) else { continue };
            let mut members: Vec<usize> = (0..cloud.len()).filter(|&p| cloud.labels[p] == local).collect();
            if members.len() > points_per_part {
                members.partial_shuffle(&mut r, points_per_part);
                members.truncate(points_per_part);
            }
            entries.extend(members.into_iter().map(|p| (inst, p, label)));
        }
        if entries.len() == before {
            warn!("part `{name}` absent from all selected `{category}` instances");
        }
    }
    Ok(entries)
}

/// Batch of field rows drawn by [`sample_batch_entries`]. `dataset` pairs
/// each cloud with its feature field.
pub fn sample_batch(
    dataset: &[(PartLabeledCloud, FeatureField)],
    category: &str,
    points_per_part: usize,
    instances_per_batch: usize,
    seed: u64,
) -> Result<LabeledFeatureBatch> {
    let clouds: Vec<&PartLabeledCloud> = dataset.iter().map(|(c, _)| c).collect();
    let part_names = clouds
        .iter()
        .find(|c| c.category == category)
        .map(|c| c.part_names.clone())
        .ok_or_else(|| Error::invalid(format!("no instances of `{category}`")))?;
    let entries = sample_batch_entries(&clouds, category, &part_names, points_per_part, instances_per_batch, seed)?;
    let dim = dataset[entries[0].0].1.dim();
    let mut features = Mat::zeros(entries.len(), dim);
    for (row, &(inst, p, _)) in entries.iter().enumerate() {
        features.row_mut(row).copy_from_slice(dataset[inst].1.values.row(p));
    }
    let labels = entries.iter().map(|e| e.2).collect();
    LabeledFeatureBatch::new(features, labels, category)
}
