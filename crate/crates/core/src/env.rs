//! Kinematic part-reaching environment.
//!
//! A point agent starts above a posed object and must bring its position
//! within `success_radius` of the centroid of a named part. Actions are
//! per-step displacements clipped to [`MAX_STEP`] per axis plus a gripper
//! value clamped to `[0, 1]`.
//!
//! Instance partitions: demonstrations and the OS split use the first
//! `train_instances` training-split instances of each seen category (OS
//! with fresh poses), OI uses held-out instances of the seen categories,
//! and OC uses an unseen category.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{category_codebooks, PartNameCodebook};
use crate::dataset::{canonical_instance, instance_seed, InstanceSplit};
use crate::descriptors::{extract_descriptors, DESCRIPTOR_DIM};
use crate::error::{Error, Result};
use crate::field::{forward, raw_descriptor_field, FeatureField, RefineNetParams};
use crate::geometry::{apply_pose, Category, PartLabeledCloud, PoseRanges};
use crate::mat::{dist2, Mat};
use crate::policy::{
    encode_scene, sample_actions, ActionChunk, AgentState, Observation, PolicyParams, SamplerMode, SceneEncoding,
    TrainSample, MAX_STEP,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub success_radius: f64,
    pub max_steps: usize,
    pub horizon: usize,
    /// Actions executed from each sampled chunk.
    pub execute: usize,
    pub demos_per_task: usize,
    /// Training-split instances per category used for demos and OS.
    pub train_instances: usize,
    pub n_points: usize,
    pub k_neighbors: usize,
    pub pose_ranges: PoseRanges,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            success_radius: 0.03,
            max_steps: 80,
            horizon: 16,
            execute: 8,
            demos_per_task: 30,
            train_instances: 10,
            n_points: 1024,
            k_neighbors: crate::descriptors::DEFAULT_K_NEIGHBORS,
            pose_ranges: PoseRanges::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius > 0.0) {
            return Err(Error::invalid("success_radius must be positive"));
        }
        if self.max_steps == 0 || self.horizon == 0 || self.execute == 0 || self.execute > self.horizon {
            return Err(Error::invalid("need max_steps >= 1 and 1 <= execute <= horizon"));
        }
        if self.train_instances == 0 || self.demos_per_task == 0 {
            return Err(Error::invalid("train_instances and demos_per_task must be positive"));
        }
        if self.k_neighbors < 3 || self.k_neighbors >= self.n_points {
            return Err(Error::invalid("need 3 <= k_neighbors < n_points"));
        }
        self.pose_ranges.validate()
    }
}

/// A category and the part to reach.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub category: Category,
    pub part: String,
}

impl TaskSpec {
    pub fn new(category: Category, part: &str) -> Result<Self> {
        if !category.part_names().contains(&part) {
            return Err(Error::invalid(format!("`{part}` is not a part of {category}")));
        }
        Ok(Self {
            category,
            part: part.to_string(),
        })
    }
}

/// Tasks on the seen categories: every non-body part.
pub fn seen_tasks() -> Vec<TaskSpec> {
    [
        (Category::BoxWithLid, "lid"),
        (Category::PotWithHandle, "handle"),
        (Category::PotWithHandle, "lid"),
        (Category::DrawerCabinet, "drawer"),
        (Category::DrawerCabinet, "handle"),
        (Category::BottleWithCap, "cap"),
    ]
    .iter()
    .map(|&(c, p)| TaskSpec::new(c, p).expect("static task table"))
    .collect()
}

/// Tasks on the unseen category.
pub fn unseen_tasks() -> Vec<TaskSpec> {
    [(Category::MicrowaveWithDoor, "handle"), (Category::MicrowaveWithDoor, "door")]
        .iter()
        .map(|&(c, p)| TaskSpec::new(c, p).expect("static task table"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub cloud: PartLabeledCloud,
    pub target_point: [f64; 3],
    pub start: AgentState,
    pub success_radius: f64,
    pub max_steps: usize,
    /// Drives the pose and start state.
    pub task_seed: u64,
}

impl Task {
    pub fn distance(&self, state: &AgentState) -> f64 {
        dist2(&state[..3], &self.target_point).sqrt()
    }

    pub fn succeeded(&self, state: &AgentState) -> bool {
        self.distance(state) < self.success_radius
    }
}

/// Poses `canonical` with the pose from `task_seed` and places the agent
/// above it.
pub fn task_from_canonical(spec: &TaskSpec, canonical: &PartLabeledCloud, task_seed: u64, env: &EnvConfig) -> Result<Task> {
    if canonical.category != spec.category.name() {
        return Err(Error::invalid(format!(
            "cloud is a {}, task needs a {}",
            canonical.category, spec.category
        )));
    }
    let pose = env.pose_ranges.sample(rng::derive(task_seed, "task_pose"));
    let cloud = apply_pose(canonical, &pose)?;
    let target_point = cloud.part_centroid(&spec.part)?;
    let c = cloud.centroid();
    let top = cloud.points.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let mut r = rng::stream(task_seed, "task_start");
    let start = [
        c[0] + r.random_range(-0.1..=0.1),
        c[1] + r.random_range(-0.1..=0.1),
        top + r.random_range(0.05..=0.15),
        0.0,
    ];
    Ok(Task {
        spec: spec.clone(),
        cloud,
        target_point,
        start,
        success_radius: env.success_radius,
        max_steps: env.max_steps,
        task_seed,
    })
}

/// Task on instance `instance` of the spec's category.
pub fn make_task(spec: &TaskSpec, instance: u64, task_seed: u64, env: &EnvConfig) -> Result<Task> {
    env.validate()?;
    let canonical = canonical_instance(spec.category, instance, env.n_points)?;
    task_from_canonical(spec, &canonical, task_seed, env)
}

/// Position moves by the clipped delta; the gripper is set and clamped.
pub fn step(state: &AgentState, action: &[f64]) -> AgentState {
    let mut s = *state;
    for i in 0..3 {
        s[i] += action[i].clamp(-MAX_STEP, MAX_STEP);
    }
    s[3] = action[3].clamp(0.0, 1.0);
    s
}

/// Straight-line action toward `target` at the largest step the per-axis
/// limit allows; the gripper closes on the step that lands inside `radius`.
pub fn expert_action(state: &AgentState, target: &[f64; 3], radius: f64) -> [f64; 4] {
    let d = [target[0] - state[0], target[1] - state[1], target[2] - state[2]];
    let m = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let s = if m > MAX_STEP { MAX_STEP / m } else { 1.0 };
    let delta = [d[0] * s, d[1] * s, d[2] * s];
    let next = [state[0] + delta[0], state[1] + delta[1], state[2] + delta[2]];
    let g = if dist2(&next, target).sqrt() < radius { 1.0 } else { 0.0 };
    [delta[0], delta[1], delta[2], g]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub spec: TaskSpec,
    pub instance: u64,
    pub task_seed: u64,
    /// `states[t]` is observed before `actions[t]`; one more state than
    /// actions.
    pub states: Vec<AgentState>,
    pub actions: Vec<[f64; 4]>,
    pub success: bool,
}

impl Episode {
    /// The `horizon` actions starting at `t`, padded by holding still with
    /// the last gripper value.
    pub fn chunk_at(&self, t: usize, horizon: usize) -> Result<ActionChunk> {
        let hold = self.actions.last().map_or(0.0, |a| a[3]);
        let mut m = Mat::zeros(horizon, 4);
        for h in 0..horizon {
            let a = self.actions.get(t + h).copied().unwrap_or([0.0, 0.0, 0.0, hold]);
            m.row_mut(h).copy_from_slice(&a);
        }
        ActionChunk::new(m)
    }

    /// `(current, previous)` agent states at `t`; the first step repeats
    /// the start state.
    pub fn history_at(&self, t: usize) -> (AgentState, AgentState) {
        (self.states[t], self.states[t.saturating_sub(1)])
    }
}

/// Runs the expert until the agent sits on the target.
pub fn scripted_expert(task: &Task, instance: u64) -> Result<Episode> {
    let mut states = vec![task.start];
    let mut actions = Vec::new();
    let mut s = task.start;
    while task.distance(&s) > 1e-12 {
        if actions.len() == task.max_steps {
            return Err(Error::invalid(format!(
                "expert did not reach `{}` within {} steps",
                task.spec.part, task.max_steps
            )));
        }
        let a = expert_action(&s, &task.target_point, task.success_radius);
        s = step(&s, &a);
        actions.push(a);
        states.push(s);
    }
    Ok(Episode {
        spec: task.spec.clone(),
        instance,
        task_seed: task.task_seed,
        success: task.succeeded(&s),
        states,
        actions,
    })
}

/// Where feature fields and part queries come from.
#[derive(Debug, Clone)]
pub enum Representation {
    /// The trained refinement network with its codebooks.
    Learned(RefineNetParams),
    /// Standardized raw descriptors with a codebook of matching width.
    Raw,
}

#[derive(Debug, Clone)]
pub struct FieldPipeline {
    pub representation: Representation,
    pub codebooks: BTreeMap<String, PartNameCodebook>,
    pub k_neighbors: usize,
}

impl FieldPipeline {
    pub fn learned(params: RefineNetParams, codebook_seed: u64, k_neighbors: usize) -> Result<Self> {
        let codebooks = category_codebooks(params.dim, codebook_seed)?;
        Ok(Self {
            representation: Representation::Learned(params),
            codebooks,
            k_neighbors,
        })
    }

    pub fn raw(codebook_seed: u64, k_neighbors: usize) -> Result<Self> {
        Ok(Self {
            representation: Representation::Raw,
            codebooks: category_codebooks(DESCRIPTOR_DIM, codebook_seed)?,
            k_neighbors,
        })
    }

    pub fn dim(&self) -> usize {
        match &self.representation {
            Representation::Learned(p) => p.dim,
            Representation::Raw => DESCRIPTOR_DIM,
        }
    }

    pub fn field(&self, cloud: &PartLabeledCloud) -> Result<FeatureField> {
        let desc = extract_descriptors(cloud, self.k_neighbors)?;
        Ok(match &self.representation {
            Representation::Learned(p) => forward(p, &desc)?,
            Representation::Raw => raw_descriptor_field(&desc),
        }
        .with_source(cloud))
    }

    pub fn query(&self, spec: &TaskSpec) -> Result<&[f64]> {
        self.codebooks
            .get(spec.category.name())
            .ok_or_else(|| Error::NotFound(format!("codebook for {}", spec.category)))?
            .vector(&spec.part)
    }

    pub fn encode(&self, task: &Task, temperature: f64) -> Result<SceneEncoding> {
        let field = self.field(&task.cloud)?;
        encode_scene(&field, &task.cloud.points, self.query(&task.spec)?, temperature)
    }
}

/// A demonstration with the task it was recorded on.
#[derive(Debug, Clone)]
pub struct Demo {
    pub task: Task,
    pub episode: Episode,
}

/// `demos_per_task` expert demonstrations for each spec, cycling through the
/// first `train_instances` training instances with fresh poses.
pub fn collect_demos(specs: &[TaskSpec], env: &EnvConfig, seed: u64) -> Result<Vec<Demo>> {
    env.validate()?;
    let mut canon: BTreeMap<(Category, u64), PartLabeledCloud> = BTreeMap::new();
    let mut jobs = Vec::new();
    for spec in specs {
        for d in 0..env.demos_per_task {
            let instance = instance_seed(spec.category, InstanceSplit::Train, (d % env.train_instances) as u64, seed);
            if let std::collections::btree_map::Entry::Vacant(e) = canon.entry((spec.category, instance)) {
                e.insert(canonical_instance(spec.category, instance, env.n_points)?);
            }
            let tag = format!("demo/{}/{}", spec.category, spec.part);
            jobs.push((spec, instance, rng::derive_index(rng::derive(seed, &tag), d as u64)));
        }
    }
    jobs.par_iter()
        .map(|&(spec, instance, task_seed)| {
            let task = task_from_canonical(spec, &canon[&(spec.category, instance)], task_seed, env)?;
            let episode = scripted_expert(&task, instance)?;
            Ok(Demo { task, episode })
        })
        .collect()
}

/// Encoder inputs and normalized target chunks for every step of every
/// demo.
pub fn demo_samples(demos: &[Demo], pipeline: &FieldPipeline, horizon: usize, temperature: f64) -> Result<Vec<TrainSample>> {
    let per_demo: Vec<Vec<TrainSample>> = demos
        .par_iter()
        .map(|d| {
            let scene = pipeline.encode(&d.task, temperature)?;
            (0..d.episode.actions.len())
                .map(|t| {
                    let (agent, prev_agent) = d.episode.history_at(t);
                    let obs = Observation {
                        scene: scene.clone(),
                        agent,
                        prev_agent,
                    };
                    Ok(TrainSample {
                        obs: obs.to_vector(),
                        target: d.episode.chunk_at(t, horizon)?.normalized().into_vec(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_demo.into_iter().flatten().collect())
}

/// Produces action chunks during a rollout.
pub trait ChunkPolicy: Sync {
    fn act(&self, task: &Task, obs: &Observation, seed: u64) -> Result<ActionChunk>;
}

pub struct DiffusionPolicy<'a> {
    pub params: &'a PolicyParams,
    pub mode: SamplerMode,
}

impl ChunkPolicy for DiffusionPolicy<'_> {
    fn act(&self, _task: &Task, obs: &Observation, seed: u64) -> Result<ActionChunk> {
        sample_actions(self.params, obs, self.mode, seed)
    }
}

/// Replans the scripted straight line from the current state.
pub struct ExpertPolicy {
    pub horizon: usize,
}

impl ChunkPolicy for ExpertPolicy {
    fn act(&self, task: &Task, obs: &Observation, _seed: u64) -> Result<ActionChunk> {
        let mut s = obs.agent;
        let mut m = Mat::zeros(self.horizon, 4);
        for h in 0..self.horizon {
            let a = expert_action(&s, &task.target_point, task.success_radius);
            s = step(&s, &a);
            m.row_mut(h).copy_from_slice(&a);
        }
        ActionChunk::new(m)
    }
}

/// Never moves.
pub struct ZeroPolicy {
    pub horizon: usize,
}

impl ChunkPolicy for ZeroPolicy {
    fn act(&self, _task: &Task, _obs: &Observation, _seed: u64) -> Result<ActionChunk> {
        ActionChunk::new(Mat::zeros(self.horizon, 4))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub trajectory: Vec<AgentState>,
    pub success: bool,
    pub final_distance: f64,
}

/// Executes the first `execute` actions of each chunk until success or
/// `max_steps`.
pub fn rollout<P: ChunkPolicy + ?Sized>(
    policy: &P,
    scene: &SceneEncoding,
    task: &Task,
    execute: usize,
    seed: u64,
) -> Result<RolloutResult> {
    let mut trajectory = vec![task.start];
    let mut s = task.start;
    let mut prev = task.start;
    let mut chunk_index = 0u64;
    'outer: while trajectory.len() <= task.max_steps {
        if task.succeeded(&s) {
            break;
        }
        let obs = Observation {
            scene: scene.clone(),
            agent: s,
            prev_agent: prev,
        };
        let chunk = policy.act(task, &obs, rng::derive_index(seed, chunk_index))?;
        chunk_index += 1;
        for h in 0..execute.min(chunk.horizon()) {
            prev = s;
            s = step(&s, chunk.actions.row(h));
            trajectory.push(s);
            if task.succeeded(&s) || trajectory.len() > task.max_steps {
                break 'outer;
            }
        }
    }
    Ok(RolloutResult {
        success: task.succeeded(&s),
        final_distance: task.distance(&s),
        trajectory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    /// Seen instances, new poses.
    OS,
    /// Unseen instances of seen categories.
    OI,
    /// Unseen category.
    OC,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::OS, Split::OI, Split::OC];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OS" => Ok(Split::OS),
            "OI" => Ok(Split::OI),
            "OC" => Ok(Split::OC),
            other => Err(Error::invalid(format!("unknown split `{other}` (expected OS, OI or OC)"))),
        }
    }
}

/// The `index`-th evaluation task of `split` under `eval_seed`, with the
/// instance seed it uses. `data_seed` must match the one used for demos.
pub fn split_task(split: Split, index: usize, eval_seed: u64, data_seed: u64, env: &EnvConfig) -> Result<(Task, u64)> {
    let specs = match split {
        Split::OS | Split::OI => seen_tasks(),
        Split::OC => unseen_tasks(),
    };
    let spec = &specs[index % specs.len()];
    let key = rng::derive_index(rng::derive(eval_seed, &format!("eval/{split}")), index as u64);
    let instance = match split {
        Split::OS => instance_seed(
            spec.category,
            InstanceSplit::Train,
            key % env.train_instances as u64,
            data_seed,
        ),
        Split::OI | Split::OC => instance_seed(spec.category, InstanceSplit::Heldout, key >> 40, data_seed),
    };
    Ok((make_task(spec, instance, key, env)?, instance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: Split,
    /// Success rate for each evaluation seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean over seeds.
    pub stderr: f64,
}

/// Success rates per split: `episodes_per_split` rollouts for each seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_splits<P: ChunkPolicy + ?Sized>(
    policy: &P,
    pipeline: &FieldPipeline,
    pool_temperature: f64,
    splits: &[Split],
    episodes_per_split: usize,
    seeds: &[u64],
    data_seed: u64,
    env: &EnvConfig,
) -> Result<Vec<SplitResult>> {
    if splits.is_empty() || episodes_per_split == 0 || seeds.is_empty() {
        return Err(Error::invalid("need at least one split, episode and seed"));
    }
    splits
        .iter()
        .map(|&split| {
            let jobs: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| (0..episodes_per_split).map(move |i| (s, i))).collect();
            let outcomes: Vec<bool> = jobs
                .par_iter()
                .map(|&(s, i)| {
                    let (task, _) = split_task(split, i, s, data_seed, env)?;
                    let scene = pipeline.encode(&task, pool_temperature)?;
                    Ok(rollout(policy, &scene, &task, env.execute, rng::derive_index(s, i as u64))?.success)
                })
                .collect::<Result<_>>()?;
            let per_seed: Vec<f64> = outcomes
                .chunks(episodes_per_split)
                .map(|c| c.iter().filter(|&&b| b).count() as f64 / c.len() as f64)
                .collect();
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().sum::<f64>() / n;
            let stderr = if per_seed.len() > 1 {
                (per_seed.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            Ok(SplitResult {
                split,
                per_seed,
                mean,
                stderr,
            })
        })
        .collect()
}

/// `split,mean,stderr,seeds` with rates as fractions.
pub fn write_split_csv<W: Write>(mut w: W, rows: &[(String, Vec<SplitResult>)]) -> Result<()> {
    writeln!(w, "representation,split,mean,stderr,seeds")?;
    for (name, results) in rows {
        for r in results {
            writeln!(w, "{name},{},{:.6},{:.6},{}", r.split, r.mean, r.stderr, r.per_seed.len())?;
        }
    }
    Ok(())
}
