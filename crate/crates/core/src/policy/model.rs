//! Part-query conditioned diffusion policy.
//!
//! The scene is summarized by attention pooling with the part query: the
//! pooled feature and the pooled point position. Together with the agent
//! state history this passes through a two-layer encoder to a conditioning
//! vector. The denoiser maps (conditioning, noisy chunk, timestep
//! embedding) to the predicted clean chunk.
//!
//! Chunks handled by the network are normalized: position deltas are
//! divided by the per-step limit and the gripper value `g` becomes `2g − 1`.

use log::info;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::pooling::{attention_weights, pool_positions};
use super::schedule::{ddim_step, forward_noise, NoiseSchedule, ScheduleConfig, ScheduleKind};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::mat::Mat;
use crate::nn::{Activation, Adam, AdamConfig, Mlp};
use crate::rng;

pub const CHECKPOINT_KIND: &[u8; 4] = b"PLCY";

/// Δx, Δy, Δz, gripper.
pub const ACTION_DIM: usize = 4;

/// Per-axis displacement limit in meters; also the action normalization.
pub const MAX_STEP: f64 = 0.02;

/// Length scale for positions fed to the encoder.
pub const POSITION_SCALE: f64 = 0.1;

/// Agent position and gripper opening.
pub type AgentState = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    /// `H × 4` in physical units.
    pub actions: Mat,
}

impl ActionChunk {
    pub fn new(actions: Mat) -> Result<Self> {
        if actions.cols() != ACTION_DIM || actions.rows() == 0 {
            return Err(Error::invalid(format!(
                "action chunk must be H x {ACTION_DIM} with H >= 1, got {}x{}",
                actions.rows(),
                actions.cols()
            )));
        }
        if !actions.is_finite() {
            return Err(Error::invalid("non-finite action"));
        }
        Ok(Self { actions })
    }

    pub fn horizon(&self) -> usize {
        self.actions.rows()
    }

    pub fn normalized(&self) -> Mat {
        let mut m = self.actions.clone();
        for row in m.as_mut_slice().chunks_exact_mut(ACTION_DIM) {
            normalize_action(row);
        }
        m
    }

    pub fn from_normalized(m: &Mat) -> Result<Self> {
        let mut a = m.clone();
        for row in a.as_mut_slice().chunks_exact_mut(ACTION_DIM) {
            for v in &mut row[..3] {
                *v *= MAX_STEP;
            }
            row[3] = 0.5 * (row[3] + 1.0);
        }
        Self::new(a)
    }
}

fn normalize_action(row: &mut [f64]) {
    for v in &mut row[..3] {
        *v /= MAX_STEP;
    }
    row[3] = 2.0 * row[3] - 1.0;
}

/// Part-query pooled summary of a static scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEncoding {
    pub feature: Vec<f64>,
    pub position: [f64; 3],
}

pub fn encode_scene(field: &FeatureField, points: &[[f64; 3]], part_query: &[f64], temperature: f64) -> Result<SceneEncoding> {
    let w = attention_weights(field, part_query, temperature)?;
    let position = pool_positions(points, &w)?;
    let mut feature = vec![0.0; field.dim()];
    for (row, wi) in field.values.iter_rows().zip(&w) {
        for (f, v) in feature.iter_mut().zip(row) {
            *f += wi * v;
        }
    }
    Ok(SceneEncoding { feature, position })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub scene: SceneEncoding,
    pub agent: AgentState,
    pub prev_agent: AgentState,
}

impl Observation {
    pub fn input_dim(field_dim: usize) -> usize {
        field_dim + 3 + 2 * ACTION_DIM
    }

    /// Encoder input: feature, pooled position, current and previous agent
    /// state. Positions are scaled by [`POSITION_SCALE`].
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.scene.feature.clone();
        v.extend(self.scene.position.iter().map(|p| p / POSITION_SCALE));
        for s in [&self.agent, &self.prev_agent] {
            v.extend(s[..3].iter().map(|p| p / POSITION_SCALE));
            v.push(2.0 * s[3] - 1.0);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    DdpmPosterior,
    DdimDeterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub encoder_hidden: usize,
    pub cond_dim: usize,
    pub denoiser_hidden: usize,
    pub denoiser_depth: usize,
    /// Even width of the sinusoidal timestep embedding.
    pub time_dim: usize,
    pub pool_temperature: f64,
    pub schedule: ScheduleConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            encoder_hidden: 128,
            cond_dim: 64,
            denoiser_hidden: 256,
            denoiser_depth: 2,
            time_dim: 16,
            pool_temperature: 0.01,
            schedule: ScheduleConfig::default(),
            steps: 4000,
            batch_size: 64,
            adam: AdamConfig::default(),
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.encoder_hidden == 0 || self.cond_dim == 0 || self.denoiser_hidden == 0 {
            return Err(Error::invalid("policy dims must be positive"));
        }
        if self.denoiser_depth == 0 {
            return Err(Error::invalid("denoiser depth must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid(format!("time_dim must be positive and even, got {}", self.time_dim)));
        }
        if !(self.pool_temperature > 0.0) {
            return Err(Error::invalid("pool_temperature must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be positive"));
        }
        self.adam.validate()?;
        self.schedule.build().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub field_dim: usize,
    pub horizon: usize,
    pub time_dim: usize,
    pub pool_temperature: f64,
    pub schedule: ScheduleConfig,
    pub encoder: Mlp,
    pub denoiser: Mlp,
}

pub fn init_policy(field_dim: usize, config: &PolicyConfig) -> Result<PolicyParams> {
    config.validate()?;
    if field_dim == 0 {
        return Err(Error::invalid("field_dim must be positive"));
    }
    let encoder = Mlp::new(
        &[Observation::input_dim(field_dim), config.encoder_hidden, config.cond_dim],
        Activation::Softplus,
        rng::derive(config.seed, "policy_encoder"),
    )?;
    let chunk = config.horizon * ACTION_DIM;
    let mut sizes = vec![config.cond_dim + chunk + config.time_dim];
    sizes.extend(std::iter::repeat_n(config.denoiser_hidden, config.denoiser_depth));
    sizes.push(chunk);
    let denoiser = Mlp::new(&sizes, Activation::Softplus, rng::derive(config.seed, "policy_denoiser"))?;
    Ok(PolicyParams {
        field_dim,
        horizon: config.horizon,
        time_dim: config.time_dim,
        pool_temperature: config.pool_temperature,
        schedule: config.schedule,
        encoder,
        denoiser,
    })
}

/// `[sin(k ω_j), cos(k ω_j)]` with `ω_j = 100^(−j / half)`.
pub fn time_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let w = 100f64.powf(-(j as f64) / half as f64);
        out.push((k as f64 * w).sin());
        out.push((k as f64 * w).cos());
    }
    out
}

impl PolicyParams {
    pub fn chunk_len(&self) -> usize {
        self.horizon * ACTION_DIM
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.denoiser.param_count()
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    fn check_batch(&self, obs: &Mat, noisy: &Mat, ks: &[usize]) -> Result<()> {
        if obs.cols() != self.encoder.input_dim() {
            return Err(Error::invalid(format!(
                "observation has {} values, policy expects {}",
                obs.cols(),
                self.encoder.input_dim()
            )));
        }
        if noisy.cols() != self.chunk_len() || noisy.rows() != obs.rows() || ks.len() != obs.rows() {
            return Err(Error::invalid(format!(
                "chunk batch {}x{} does not match {} observations of horizon {}",
                noisy.rows(),
                noisy.cols(),
                obs.rows(),
                self.horizon
            )));
        }
        Ok(())
    }

    fn denoiser_input(&self, cond: &Mat, noisy: &Mat, ks: &[usize]) -> Mat {
        let width = self.denoiser.input_dim();
        let mut x = Mat::zeros(cond.rows(), width);
        for (i, &k) in ks.iter().enumerate() {
            let row = x.row_mut(i);
            let c = cond.cols();
            row[..c].copy_from_slice(cond.row(i));
            row[c..c + noisy.cols()].copy_from_slice(noisy.row(i));
            row[c + noisy.cols()..].copy_from_slice(&time_embedding(k, self.time_dim));
        }
        x
    }

    /// Predicted clean chunks (normalized, one row per observation).
    pub fn predict(&self, obs: &Mat, noisy: &Mat, ks: &[usize]) -> Result<Mat> {
        self.check_batch(obs, noisy, ks)?;
        let cond = self.encoder.forward(obs)?;
        self.denoiser.forward(&self.denoiser_input(&cond, noisy, ks))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let kind = match self.schedule.kind {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        };
        let sizes = self.denoiser.sizes();
        let mut params = self.encoder.params().to_vec();
        params.extend_from_slice(self.denoiser.params());
        Checkpoint {
            kind: *CHECKPOINT_KIND,
            dims: vec![
                self.field_dim as u64,
                self.horizon as u64,
                self.time_dim as u64,
                self.encoder.sizes()[1] as u64,
                self.encoder.output_dim() as u64,
                sizes[1] as u64,
                (sizes.len() - 2) as u64,
                self.schedule.steps as u64,
                kind,
                self.schedule.lo.to_bits(),
                self.schedule.hi.to_bits(),
                self.pool_temperature.to_bits(),
            ],
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let [field_dim, horizon, time_dim, enc_hidden, cond, den_hidden, den_depth, steps, kind, lo, hi, temp] = ckpt.dims[..]
        else {
            return Err(Error::Format(format!("policy checkpoint needs 12 dims, found {}", ckpt.dims.len())));
        };
        let config = PolicyConfig {
            horizon: horizon as usize,
            encoder_hidden: enc_hidden as usize,
            cond_dim: cond as usize,
            denoiser_hidden: den_hidden as usize,
            denoiser_depth: den_depth as usize,
            time_dim: time_dim as usize,
            pool_temperature: f64::from_bits(temp),
            schedule: ScheduleConfig {
                steps: steps as usize,
                kind: match kind {
                    0 => ScheduleKind::Linear,
                    1 => ScheduleKind::Cosine,
                    other => return Err(Error::Format(format!("unknown schedule kind {other}"))),
                },
                lo: f64::from_bits(lo),
                hi: f64::from_bits(hi),
            },
            ..PolicyConfig::default()
        };
        let mut p = init_policy(field_dim as usize, &config).map_err(|e| Error::Format(e.to_string()))?;
        if ckpt.params.len() != p.param_count() {
            return Err(Error::Format(format!(
                "policy checkpoint has {} parameters, header implies {}",
                ckpt.params.len(),
                p.param_count()
            )));
        }
        if !ckpt.params.iter().all(|v| v.is_finite()) {
            return Err(Error::Format("non-finite parameters".into()));
        }
        let (e, d) = ckpt.params.split_at(p.encoder.param_count());
        p.encoder.params_mut().copy_from_slice(e);
        p.denoiser.params_mut().copy_from_slice(d);
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path, CHECKPOINT_KIND)?)
    }
}

/// Predicted clean chunk (normalized units) for one observation.
pub fn policy_forward(params: &PolicyParams, obs: &Observation, noisy: &Mat, k: usize) -> Result<Mat> {
    if noisy.rows() != params.horizon || noisy.cols() != ACTION_DIM {
        return Err(Error::invalid(format!(
            "noisy chunk must be {}x{ACTION_DIM}, got {}x{}",
            params.horizon,
            noisy.rows(),
            noisy.cols()
        )));
    }
    let o = Mat::from_vec(1, params.encoder.input_dim(), obs.to_vector());
    let x = Mat::from_vec(1, params.chunk_len(), noisy.as_slice().to_vec());
    let out = params.predict(&o, &x, &[k])?;
    Ok(Mat::from_vec(params.horizon, ACTION_DIM, out.into_vec()))
}

/// Mean squared error between `D(obs, forward_noise(target, k, eps), k)`
/// and `target`, with its gradient laid out as encoder then denoiser
/// parameters.
pub fn loss_and_gradient(
    params: &PolicyParams,
    schedule: &NoiseSchedule,
    obs: &Mat,
    target: &Mat,
    ks: &[usize],
    eps: &Mat,
) -> Result<(f64, Vec<f64>)> {
    let mut noisy = Mat::zeros(target.rows(), target.cols());
    for (i, &k) in ks.iter().enumerate() {
        let row = forward_noise(
            &Mat::from_vec(1, target.cols(), target.row(i).to_vec()),
            k,
            &Mat::from_vec(1, eps.cols(), eps.row(i).to_vec()),
            schedule,
        )?;
        noisy.row_mut(i).copy_from_slice(row.as_slice());
    }
    params.check_batch(obs, &noisy, ks)?;
    let (cond, enc_cache) = params.encoder.forward_cached(obs)?;
    let (pred, den_cache) = params.denoiser.forward_cached(&params.denoiser_input(&cond, &noisy, ks))?;
    let count = (pred.rows() * pred.cols()) as f64;
    let mut loss = 0.0;
    let mut g_out = Mat::zeros(pred.rows(), pred.cols());
    for ((g, p), t) in g_out.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / count;
    }
    let ne = params.encoder.param_count();
    let mut grad = vec![0.0; params.param_count()];
    let (ge, gd) = grad.split_at_mut(ne);
    let g_in = params.denoiser.backward(&den_cache, &g_out, gd);
    let c = cond.cols();
    let mut g_cond = Mat::zeros(cond.rows(), c);
    for i in 0..cond.rows() {
        g_cond.row_mut(i).copy_from_slice(&g_in.row(i)[..c]);
    }
    params.encoder.backward(&enc_cache, &g_cond, ge);
    Ok((loss / count, grad))
}

/// One supervised pair: encoder input and normalized target chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub obs: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub params: PolicyParams,
    /// Minibatch loss per step.
    pub log: Vec<f64>,
}

pub fn train_policy(samples: &[TrainSample], field_dim: usize, config: &PolicyConfig) -> Result<TrainedPolicy> {
    let mut params = init_policy(field_dim, config)?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let (od, cl) = (params.encoder.input_dim(), params.chunk_len());
    if let Some(s) = samples.iter().find(|s| s.obs.len() != od || s.target.len() != cl) {
        return Err(Error::invalid(format!(
            "sample shapes {}/{} do not match policy {od}/{cl}",
            s.obs.len(),
            s.target.len()
        )));
    }
    let schedule = params.noise_schedule()?;
    let mut r = rng::stream(config.seed, "policy_batches");
    let mut opt_e = Adam::new(config.adam, params.encoder.param_count());
    let mut opt_d = Adam::new(config.adam, params.denoiser.param_count());
    let b = config.batch_size;
    let mut log = Vec::with_capacity(config.steps);
    let mut obs = Mat::zeros(b, od);
    let mut target = Mat::zeros(b, cl);
    let mut eps = Mat::zeros(b, cl);
    let mut ks = vec![0; b];
    for step in 0..config.steps {
        for i in 0..b {
            let s = &samples[r.random_range(0..samples.len())];
            obs.row_mut(i).copy_from_slice(&s.obs);
            target.row_mut(i).copy_from_slice(&s.target);
            ks[i] = r.random_range(1..=schedule.steps());
            eps.row_mut(i).iter_mut().for_each(|e| *e = StandardNormal.sample(&mut r));
        }
        let (loss, grad) = loss_and_gradient(&params, &schedule, &obs, &target, &ks, &eps)?;
        if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            let mut snapshot = params.encoder.params().to_vec();
            snapshot.extend_from_slice(params.denoiser.params());
            return Err(Error::NonFinite {
                step,
                message: format!("policy loss {loss}"),
                snapshot,
            });
        }
        if config.cosine_decay {
            let lr = config.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
            opt_e.set_lr(lr);
            opt_d.set_lr(lr);
        }
        let (ge, gd) = grad.split_at(params.encoder.param_count());
        opt_e.step(params.encoder.params_mut(), ge);
        opt_d.step(params.denoiser.params_mut(), gd);
        log.push(loss);
        if step % 500 == 0 || step + 1 == config.steps {
            info!("policy step {step}: mse {loss:.5}");
        }
    }
    Ok(TrainedPolicy { params, log })
}

/// Anything that predicts the clean chunk from a noisy one at step `k`.
pub trait Denoiser {
    fn predict_clean(&self, noisy: &Mat, k: usize) -> Result<Mat>;
}

struct BoundPolicy<'a> {
    params: &'a PolicyParams,
    obs: Mat,
}

impl Denoiser for BoundPolicy<'_> {
    fn predict_clean(&self, noisy: &Mat, k: usize) -> Result<Mat> {
        let x = Mat::from_vec(1, noisy.rows() * noisy.cols(), noisy.as_slice().to_vec());
        let out = self.params.predict(&self.obs, &x, &[k])?;
        Ok(Mat::from_vec(noisy.rows(), noisy.cols(), out.into_vec()))
    }
}

/// Runs the reverse chain from `aᴷ ~ N(0, I)`: exactly `K` denoiser calls,
/// no injected noise at `k = 1`.
pub fn denoise<D: Denoiser>(
    denoiser: &D,
    rows: usize,
    cols: usize,
    schedule: &NoiseSchedule,
    mode: SamplerMode,
    seed: u64,
) -> Result<Mat> {
    let mut init = rng::stream(seed, "sampler_init");
    let mut noise = rng::stream(seed, "sampler_noise");
    let mut a = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut init)).collect());
    let zero = Mat::zeros(rows, cols);
    for k in (1..=schedule.steps()).rev() {
        let a0 = denoiser.predict_clean(&a, k)?;
        let tau = match mode {
            SamplerMode::DdpmPosterior if k > 1 => schedule.posterior_tau(k),
            _ => 0.0,
        };
        let v = if tau > 0.0 {
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut noise)).collect())
        } else {
            zero.clone()
        };
        a = ddim_step(&a, &a0, k, schedule, tau, &v)?;
    }
    Ok(a)
}

/// Samples a chunk in physical units.
pub fn sample_actions(params: &PolicyParams, obs: &Observation, mode: SamplerMode, seed: u64) -> Result<ActionChunk> {
    let schedule = params.noise_schedule()?;
    let bound = BoundPolicy {
        params,
        obs: Mat::from_vec(1, params.encoder.input_dim(), obs.to_vector()),
    };
    let a = denoise(&bound, params.horizon, ACTION_DIM, &schedule, mode, seed)?;
    ActionChunk::from_normalized(&a)
}
