//! The per-point refinement network and the feature fields it produces.
//!
//! Descriptors pass through a fully connected stack
//! `d_in → hidden × depth → dim` with softplus hidden activations; output
//! rows are L2-normalized. A row whose pre-normalization norm is zero maps
//! to `e1`. Depth stands in as the capacity knob of the network; it is an
//! analogue of stacking extra backbone blocks, not a reproduction of it.

use std::collections::BTreeMap;
use std::io::Write;

use log::{info, warn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::codebook::PartNameCodebook;
use crate::descriptors::DescriptorMatrix;
use crate::error::{Error, Result};
use crate::geometry::PartLabeledCloud;
use crate::losses::{loss_and_gradients, sample_batch_entries, LabeledFeatureBatch, LossConfig};
use crate::mat::{dot, norm, Mat};
use crate::nn::{Activation, Adam, AdamConfig, ForwardCache, Mlp};
use crate::rng;

pub const CHECKPOINT_KIND: &[u8; 4] = b"FELD";
const UNIT_TOL: f64 = 1e-9;
const MAX_STAT_PAIRS: usize = 1_000_000;

/// Identifies the cloud a field was computed on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudRef {
    pub category: String,
    pub seed: u64,
}

impl From<&PartLabeledCloud> for CloudRef {
    fn from(c: &PartLabeledCloud) -> Self {
        Self {
            category: c.category.clone(),
            seed: c.seed,
        }
    }
}

/// N × dim unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub values: Mat,
    pub source: Option<CloudRef>,
}

impl FeatureField {
    pub fn from_unit_rows(values: Mat) -> Result<Self> {
        for (i, row) in values.iter_rows().enumerate() {
            let n = norm(row);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("field row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { values, source: None })
    }

    pub fn with_source(mut self, cloud: &PartLabeledCloud) -> Self {
        self.source = Some(cloud.into());
        self
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Row-normalizes `z`; returns the unit rows and the original norms.
fn normalize_rows(z: &Mat) -> (Mat, Vec<f64>) {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    let mut fallbacks = 0usize;
    for i in 0..z.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.fill(0.0);
            row[0] = 1.0;
            fallbacks += 1;
        }
        norms.push(n);
    }
    if fallbacks > 0 {
        warn!("{fallbacks} zero feature rows mapped to e1");
    }
    (out, norms)
}

/// Gradient through `y = z / |z|`: `(g − y (y·g)) / |z|`.
fn normalize_backward(y: &Mat, norms: &[f64], g: &Mat) -> Mat {
    let mut out = Mat::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        if norms[i] == 0.0 {
            continue;
        }
        let (yi, gi) = (y.row(i), g.row(i));
        let proj = dot(yi, gi);
        for ((o, yv), gv) in out.row_mut(i).iter_mut().zip(yi).zip(gi) {
            *o = (gv - yv * proj) / norms[i];
        }
    }
    out
}

/// Standardized, row-normalized raw descriptors: the untrained baseline
/// field.
pub fn raw_descriptor_field(desc: &DescriptorMatrix) -> FeatureField {
    let m = desc.mat();
    let (n, d) = (m.rows(), m.cols());
    let mut out = m.clone();
    for c in 0..d {
        let mean = (0..n).map(|i| m.get(i, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (m.get(i, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let v = if sd > 0.0 { (m.get(i, c) - mean) / sd } else { 0.0 };
            out.set(i, c, v);
        }
    }
    FeatureField {
        values: normalize_rows(&out).0,
        source: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub hidden: usize,
    pub depth: usize,
    pub dim: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 3,
            dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineNetParams {
    pub d_in: usize,
    pub hidden: usize,
    pub depth: usize,
    pub dim: usize,
    pub seed: u64,
    net: Mlp,
}

fn layer_sizes(d_in: usize, hidden: usize, depth: usize, dim: usize) -> Vec<usize> {
    let mut sizes = vec![d_in];
    sizes.extend(std::iter::repeat_n(hidden, depth));
    sizes.push(dim);
    sizes
}

pub fn init_refine_net(d_in: usize, hidden: usize, depth: usize, dim: usize, seed: u64) -> Result<RefineNetParams> {
    if d_in == 0 || hidden == 0 || depth == 0 || dim == 0 {
        return Err(Error::invalid("refinement network dims must all be >= 1"));
    }
    let net = Mlp::new(&layer_sizes(d_in, hidden, depth, dim), Activation::Softplus, rng::derive(seed, "refine_net"))?;
    Ok(RefineNetParams {
        d_in,
        hidden,
        depth,
        dim,
        seed,
        net,
    })
}

impl RefineNetParams {
    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: *CHECKPOINT_KIND,
            dims: vec![self.d_in as u64, self.hidden as u64, self.depth as u64, self.dim as u64, self.seed],
            params: self.net.params().to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let [d_in, hidden, depth, dim, seed] = ckpt.dims[..] else {
            return Err(Error::Format(format!("field checkpoint needs 5 dims, found {}", ckpt.dims.len())));
        };
        let (d_in, hidden, depth, dim) = (d_in as usize, hidden as usize, depth as usize, dim as usize);
        let net = Mlp::from_params(&layer_sizes(d_in, hidden, depth, dim), Activation::Softplus, ckpt.params.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        if !net.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Format("non-finite parameters".into()));
        }
        Ok(Self {
            d_in,
            hidden,
            depth,
            dim,
            seed,
            net,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path, CHECKPOINT_KIND)?)
    }

    fn check_desc(&self, desc: &Mat) -> Result<()> {
        if desc.cols() != self.d_in {
            return Err(Error::invalid(format!(
                "descriptor has {} columns, network expects {}",
                desc.cols(),
                self.d_in
            )));
        }
        Ok(())
    }
}

pub fn forward(params: &RefineNetParams, desc: &DescriptorMatrix) -> Result<FeatureField> {
    params.check_desc(desc.mat())?;
    let z = params.net.forward(desc.mat())?;
    Ok(FeatureField {
        values: normalize_rows(&z).0,
        source: None,
    })
}

/// Forward pass that keeps what the backward pass needs.
pub struct FieldTape {
    cache: ForwardCache,
    unit: Mat,
    norms: Vec<f64>,
}

impl FieldTape {
    pub fn unit_rows(&self) -> &Mat {
        &self.unit
    }
}

pub fn forward_tape(params: &RefineNetParams, desc: &Mat) -> Result<FieldTape> {
    params.check_desc(desc)?;
    let (z, cache) = params.net.forward_cached(desc)?;
    let (unit, norms) = normalize_rows(&z);
    Ok(FieldTape { cache, unit, norms })
}

/// Accumulates parameter gradients given `∂L/∂(unit rows)`.
pub fn backward_tape(params: &RefineNetParams, tape: &FieldTape, grad_unit: &Mat, grad: &mut [f64]) {
    let gz = normalize_backward(&tape.unit, &tape.norms, grad_unit);
    params.net.backward(&tape.cache, &gz, grad);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    pub points_per_part: usize,
    pub instances_per_batch: usize,
    pub loss: LossConfig,
    pub net: NetShape,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            cosine_decay: true,
            points_per_part: 24,
            instances_per_batch: 4,
            loss: LossConfig::default(),
            net: NetShape::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if self.points_per_part == 0 || self.instances_per_batch == 0 {
            return Err(Error::invalid("batch parameters must be positive"));
        }
        if self.net.hidden == 0 || self.net.depth == 0 || self.net.dim == 0 {
            return Err(Error::invalid("network dims must be positive"));
        }
        self.adam.validate()?;
        self.loss.validate()
    }
}

/// A training cloud with its precomputed descriptors.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub cloud: PartLabeledCloud,
    pub descriptors: DescriptorMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldLogEntry {
    pub step: usize,
    pub category_index: usize,
    pub geo: Option<f64>,
    pub sem: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedField {
    pub params: RefineNetParams,
    pub log: Vec<FieldLogEntry>,
}

/// Minibatch Adam on the total loss. Steps cycle through the categories in
/// sorted order; each batch is single-category so the semantic term uses
/// that category's codebook.
pub fn train_field(
    dataset: &[FieldSample],
    codebooks: &BTreeMap<String, PartNameCodebook>,
    config: &TrainConfig,
) -> Result<TrainedField> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut categories: Vec<String> = dataset.iter().map(|s| s.cloud.category.clone()).collect();
    categories.sort();
    categories.dedup();
    for c in &categories {
        let cb = codebooks
            .get(c)
            .ok_or_else(|| Error::invalid(format!("no codebook for category `{c}`")))?;
        if cb.dim != config.net.dim {
            return Err(Error::invalid(format!("codebook for `{c}` has dim {}, field dim is {}", cb.dim, config.net.dim)));
        }
    }
    let d_in = dataset[0].descriptors.mat().cols();
    if let Some(bad) = dataset.iter().find(|s| s.descriptors.mat().cols() != d_in || s.descriptors.rows() != s.cloud.len()) {
        return Err(Error::invalid(format!("descriptor shape mismatch for {}/{}", bad.cloud.category, bad.cloud.seed)));
    }

    let mut params = init_refine_net(d_in, config.net.hidden, config.net.depth, config.net.dim, config.seed)?;
    let mut opt = Adam::new(config.adam, params.param_count());
    let clouds: Vec<&PartLabeledCloud> = dataset.iter().map(|s| &s.cloud).collect();
    let mut log = Vec::with_capacity(config.steps);
    let mut grad = vec![0.0; params.param_count()];

    for step in 0..config.steps {
        let ci = step % categories.len();
        let category = &categories[ci];
        let codebook = &codebooks[category];
        let available = clouds.iter().filter(|c| &c.category == category).count();
        let entries = sample_batch_entries(
            &clouds,
            category,
            &codebook.names,
            config.points_per_part,
            config.instances_per_batch.min(available),
            rng::derive_index(rng::derive(config.seed, "field_batches"), step as u64),
        )?;
        let mut desc = Mat::zeros(entries.len(), d_in);
        for (row, &(inst, p, _)) in entries.iter().enumerate() {
            desc.row_mut(row).copy_from_slice(dataset[inst].descriptors.mat().row(p));
        }
        let labels: Vec<usize> = entries.iter().map(|e| e.2).collect();

        let tape = forward_tape(&params, &desc)?;
        let batch = LabeledFeatureBatch::new(tape.unit.clone(), labels, category.clone())?;
        let eval = loss_and_gradients(&batch, codebook, &config.loss)?;
        if !eval.total.is_finite() || !eval.grad.is_finite() {
            return Err(Error::NonFinite {
                step,
                message: format!("loss {} on category `{category}`", eval.total),
                snapshot: params.params().to_vec(),
            });
        }
        grad.fill(0.0);
        backward_tape(&params, &tape, &eval.grad, &mut grad);
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                message: "non-finite parameter gradient".into(),
                snapshot: params.params().to_vec(),
            });
        }
        if config.cosine_decay {
            let t = step as f64 / config.steps as f64;
            opt.set_lr(config.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
        }
        opt.step(params.params_mut(), &grad);
        log.push(FieldLogEntry {
            step,
            category_index: ci,
            geo: eval.geo,
            sem: eval.sem,
            total: eval.total,
        });
        if step % 250 == 0 || step + 1 == config.steps {
            info!("field step {step}: total {:.4} ({category})", eval.total);
        }
    }
    Ok(TrainedField { params, log })
}

/// `step,L_Geo,L_Sem,total`; disabled terms are left empty.
pub fn write_log_csv<W: Write>(mut w: W, log: &[FieldLogEntry]) -> Result<()> {
    writeln!(w, "step,L_Geo,L_Sem,total")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        writeln!(w, "{},{},{},{}", e.step, opt(e.geo), opt(e.sem), e.total)?;
    }
    Ok(())
}

/// Mean cosine over same-part pairs and over cross-part pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub intra: f64,
    /// Absent when only one part is present.
    pub inter: Option<f64>,
}

pub fn part_similarity_stats(field: &FeatureField, labels: &[usize], seed: u64) -> Result<SimilarityStats> {
    let n = field.len();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} field rows", labels.len())));
    }
    let f = &field.values;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    let mut add = |i: usize, j: usize| {
        let s = dot(f.row(i), f.row(j));
        if labels[i] == labels[j] {
            intra += s;
            n_intra += 1;
        } else {
            inter += s;
            n_inter += 1;
        }
    };
    let total_pairs = n * n.saturating_sub(1) / 2;
    if total_pairs <= MAX_STAT_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                add(i, j);
            }
        }
    } else {
        let mut r = rng::stream(seed, "similarity_pairs");
        for _ in 0..MAX_STAT_PAIRS {
            let i = r.random_range(0..n);
            let mut j = r.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            add(i, j);
        }
    }
    if n_intra == 0 {
        return Err(Error::invalid("no same-part pairs"));
    }
    Ok(SimilarityStats {
        intra: intra / n_intra as f64,
        inter: (n_inter > 0).then(|| inter / n_inter as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{extract_descriptors, DESCRIPTOR_DIM};
    use crate::geometry::{generate_object, Category};

    fn desc(seed: u64) -> DescriptorMatrix {
        extract_descriptors(&generate_object(Category::PotWithHandle, seed, 96).unwrap(), 8).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = init_refine_net(10, 64, 2, 32, 5).unwrap();
        assert_eq!(a, init_refine_net(10, 64, 2, 32, 5).unwrap());
        assert_ne!(a.params(), init_refine_net(10, 64, 2, 32, 6).unwrap().params());
        // (10+1)·64 + (64+1)·64 + (64+1)·32
        assert_eq!(a.param_count(), 6944);
        assert!(init_refine_net(10, 64, 0, 32, 0).is_err());
    }

    #[test]
    fn forward_rows_are_unit_and_equivariant() {
        let p = init_refine_net(DESCRIPTOR_DIM, 16, 2, 8, 1).unwrap();
        let d = desc(3);
        let f = forward(&p, &d).unwrap();
        for r in f.values.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        assert_eq!(f, forward(&p, &d).unwrap());
        let perm: Vec<usize> = (0..d.rows()).rev().collect();
        let fp = forward(&p, &DescriptorMatrix(d.mat().select_rows(&perm))).unwrap();
        assert_eq!(fp.values, f.values.select_rows(&perm));
        assert!(forward(&p, &DescriptorMatrix(Mat::zeros(3, 4))).is_err());
    }

    #[test]
    fn zero_rows_fall_back_to_e1() {
        let (y, norms) = normalize_rows(&Mat::from_rows(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]));
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(y.row(1), &[0.6, 0.8, 0.0]);
        assert_eq!(norms, vec![0.0, 5.0]);
    }

    #[test]
    fn similarity_stats_extremes() {
        let same = FeatureField::from_unit_rows(Mat::from_rows(&[[1.0, 0.0]; 4])).unwrap();
        let s = part_similarity_stats(&same, &[0, 0, 1, 1], 0).unwrap();
        assert!((s.intra - 1.0).abs() < 1e-15 && (s.inter.unwrap() - 1.0).abs() < 1e-15);

        let ortho = FeatureField::from_unit_rows(Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])).unwrap();
        let s = part_similarity_stats(&ortho, &[0, 0, 1, 1], 0).unwrap();
        assert_eq!((s.intra, s.inter), (1.0, Some(0.0)));

        let s = part_similarity_stats(&same, &[2, 2, 2, 2], 0).unwrap();
        assert_eq!(s.inter, None);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_refine_net(10, 8, 3, 4, 9).unwrap();
        let back = RefineNetParams::from_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn raw_field_is_unit() {
        let f = raw_descriptor_field(&desc(1));
        assert_eq!(f.dim(), DESCRIPTOR_DIM);
        for r in f.values.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }
}
