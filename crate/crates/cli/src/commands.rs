use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use log::info;
use rayon::prelude::*;
use serde_json::json;

use partfield::codebook::{category_codebooks, query_similarity};
use partfield::dataset::{make_dataset, InstanceSplit};
use partfield::descriptors::extract_descriptors;
use partfield::downstream::{
    agglomerative_cluster, correspondence_part_accuracy, match_miou, nn_correspondence, pca_colorize, StopRule,
};
use partfield::env::{
    collect_demos, demo_samples, evaluate_splits, make_task, seen_tasks, write_split_csv, Demo, DiffusionPolicy,
    Episode, FieldPipeline, Split,
};
use partfield::field::{train_field, write_log_csv, FieldSample, RefineNetParams};
use partfield::geometry::io::{load_jsonl, read_jsonl_records, write_jsonl, write_jsonl_records, write_ply};
use partfield::geometry::{Category, PartLabeledCloud};
use partfield::policy::{train_policy, PolicyParams, SamplerMode};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{diverging_color, ensure_dir, read_file, sha256_hex, unit_to_rgb, write_file};
use crate::{ConfigArgs, FieldArgs};

fn load_config(args: &ConfigArgs, overrides: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    overrides(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// A dataset directory resolves to its `data.jsonl`.
fn load_clouds(path: &Path) -> Result<Vec<PartLabeledCloud>, CliError> {
    let file = if path.is_dir() { path.join("data.jsonl") } else { path.to_path_buf() };
    if !file.exists() {
        return Err(CliError::Data(format!("{}: dataset not found", file.display())));
    }
    load_jsonl(&file).map_err(|e| CliError::at(&file, e))
}

fn pipeline(args: &FieldArgs, cfg: &RunConfig) -> Result<FieldPipeline, CliError> {
    let (seed, k) = (cfg.dataset.codebook_seed, cfg.dataset.k_neighbors);
    match &args.field_ckpt {
        Some(path) if !args.raw => {
            let params = RefineNetParams::load(path).map_err(|e| CliError::at(path, e))?;
            Ok(FieldPipeline::learned(params, seed, k)?)
        }
        _ => Ok(FieldPipeline::raw(seed, k)?),
    }
}

fn representation_name(args: &FieldArgs) -> &'static str {
    if args.raw {
        "raw"
    } else {
        "learned"
    }
}

fn jsonl_bytes<T: serde::Serialize>(records: &[T]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_jsonl_records(&mut buf, records)?;
    Ok(buf)
}

#[derive(Args, Debug)]
pub struct GenData {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated category names.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<Category>>,
    /// Instances per category.
    #[arg(long)]
    instances: Option<usize>,
    /// Points per instance.
    #[arg(long)]
    points: Option<usize>,
    /// Instance seed range to draw from.
    #[arg(long, value_parser = ["train", "heldout"])]
    split: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl GenData {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |c| {
            if let Some(cats) = &self.categories {
                c.dataset.categories = cats.iter().map(|c| c.name().to_string()).collect();
            }
            if let Some(n) = self.instances {
                c.dataset.instances = n;
            }
            if let Some(p) = self.points {
                c.dataset.points = p;
            }
            match self.split.as_deref() {
                Some("train") => c.dataset.split = InstanceSplit::Train,
                Some("heldout") => c.dataset.split = InstanceSplit::Heldout,
                _ => {}
            }
        })?;
        let d = &cfg.dataset;
        let clouds = make_dataset(&cfg.categories()?, d.instances, d.split, d.points, &d.pose_ranges, d.seed)?;
        let mut data = Vec::new();
        write_jsonl(&mut data, &clouds)?;
        let codebooks: Vec<_> = category_codebooks(cfg.field.net.dim, d.codebook_seed)?.into_values().collect();
        let codebook = jsonl_bytes(&codebooks)?;
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |t| t.as_secs());
        let manifest = json!({
            "records": clouds.len(),
            "dataset": d,
            "data_file": "data.jsonl",
            "data_sha256": sha256_hex(&data),
            "codebook_file": "codebook.jsonl",
            "codebook_sha256": sha256_hex(&codebook),
            "created_unix": created,
        });
        ensure_dir(&self.out)?;
        write_file(&self.out.join("data.jsonl"), &data)?;
        write_file(&self.out.join("codebook.jsonl"), &codebook)?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&self.out.join("manifest.json"), text.as_bytes())?;
        println!("wrote {} records to {} (sha256 {})", clouds.len(), self.out.display(), sha256_hex(&data));
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct TrainField {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory or JSON-lines file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Train with the geometric loss only.
    #[arg(long)]
    no_sem: bool,
    /// Output directory for `field.ckpt` and `field_log.csv`.
    #[arg(long)]
    out: PathBuf,
}

impl TrainField {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |c| {
            if let Some(s) = self.steps {
                c.field.steps = s;
            }
            if self.no_sem {
                c.field.loss.enable_sem = false;
            }
        })?;
        let clouds = load_clouds(&self.data)?;
        let k = cfg.dataset.k_neighbors;
        let samples: Vec<FieldSample> = clouds
            .into_par_iter()
            .map(|cloud| {
                let descriptors = extract_descriptors(&cloud, k)?;
                Ok(FieldSample { cloud, descriptors })
            })
            .collect::<partfield::Result<_>>()?;
        let codebooks = category_codebooks(cfg.field.net.dim, cfg.dataset.codebook_seed)?;
        info!("training field on {} instances for {} steps", samples.len(), cfg.field.steps);
        let trained = train_field(&samples, &codebooks, &cfg.field)?;
        let last = trained.log.last().map_or(f64::NAN, |e| e.total);
        if !last.is_finite() {
            return Err(CliError::Numerical(format!("final loss {last}")));
        }
        let mut log = Vec::new();
        write_log_csv(&mut log, &trained.log)?;
        ensure_dir(&self.out)?;
        let ckpt = self.out.join("field.ckpt");
        trained.params.save(&ckpt).map_err(|e| CliError::at(&ckpt, e))?;
        write_file(&self.out.join("field_log.csv"), &log)?;
        println!("final loss {last:.5}; wrote {}", ckpt.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct GenDemos {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Demonstrations per task.
    #[arg(long)]
    demos_per_task: Option<usize>,
    /// Output JSON-lines file of episodes.
    #[arg(long)]
    out: PathBuf,
}

impl GenDemos {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |c| {
            if let Some(n) = self.demos_per_task {
                c.env.demos_per_task = n;
            }
        })?;
        let demos = collect_demos(&seen_tasks(), &cfg.env, cfg.dataset.seed)?;
        let episodes: Vec<Episode> = demos.into_iter().map(|d| d.episode).collect();
        write_file(&self.out, &jsonl_bytes(&episodes)?)?;
        println!("wrote {} episodes to {}", episodes.len(), self.out.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct TrainPolicy {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Episodes written by `gen-demos`.
    #[arg(long)]
    demos: PathBuf,
    #[command(flatten)]
    field: FieldArgs,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for `policy.ckpt` and `policy_log.csv`.
    #[arg(long)]
    out: PathBuf,
}

impl TrainPolicy {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |c| {
            if let Some(s) = self.steps {
                c.policy.steps = s;
            }
        })?;
        let pipe = pipeline(&self.field, &cfg)?;
        let bytes = read_file(&self.demos)?;
        let episodes: Vec<Episode> = read_jsonl_records(bytes.as_slice()).map_err(|e| CliError::at(&self.demos, e))?;
        let demos: Vec<Demo> = episodes
            .into_par_iter()
            .map(|episode| {
                let task = make_task(&episode.spec, episode.instance, episode.task_seed, &cfg.env)?;
                Ok(Demo { task, episode })
            })
            .collect::<partfield::Result<_>>()?;
        let samples = demo_samples(&demos, &pipe, cfg.policy.horizon, cfg.policy.pool_temperature)?;
        info!("training policy on {} samples from {} demos", samples.len(), demos.len());
        let trained = train_policy(&samples, pipe.dim(), &cfg.policy)?;
        let mut log = String::from("step,mse\n");
        for (i, l) in trained.log.iter().enumerate() {
            writeln!(log, "{i},{l}").unwrap();
        }
        ensure_dir(&self.out)?;
        let ckpt = self.out.join("policy.ckpt");
        trained.params.save(&ckpt).map_err(|e| CliError::at(&ckpt, e))?;
        write_file(&self.out.join("policy_log.csv"), log.as_bytes())?;
        println!("final mse {:.5}; wrote {}", trained.log.last().copied().unwrap_or(f64::NAN), ckpt.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct EvalSeg {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    field: FieldArgs,
    /// Stop merging above this cosine distance instead of at the part count.
    #[arg(long)]
    threshold: Option<f64>,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

impl EvalSeg {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |_| {})?;
        let pipe = pipeline(&self.field, &cfg)?;
        let clouds = load_clouds(&self.data)?;
        let scores: Vec<f64> = clouds
            .par_iter()
            .map(|c| {
                let f = pipe.field(c)?;
                let parts = c.part_names.len();
                let stop = self.threshold.map_or(StopRule::TargetK(parts), StopRule::Threshold);
                let seg = agglomerative_cluster(&f, stop)?;
                match_miou(&seg.labels, &c.labels, seg.num_clusters, parts)
            })
            .collect::<partfield::Result<_>>()?;
        let mut per_cat: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (c, s) in clouds.iter().zip(&scores) {
            per_cat.entry(&c.category).or_default().push(*s);
        }
        let rows: Vec<(String, usize, f64)> = per_cat
            .iter()
            .map(|(k, v)| (k.to_string(), v.len(), v.iter().sum::<f64>() / v.len() as f64))
            .chain(std::iter::once(("mean".into(), scores.len(), scores.iter().sum::<f64>() / scores.len() as f64)))
            .collect();
        let name = representation_name(&self.field);
        let mut csv = String::from("representation,category,instances,miou\n");
        println!("{:<20} {:>9} {:>7}", "category", "instances", "mIoU");
        for (cat, n, m) in &rows {
            writeln!(csv, "{name},{cat},{n},{m}").unwrap();
            println!("{cat:<20} {n:>9} {m:>7.3}");
        }
        write_file(&self.out, csv.as_bytes())
    }
}

#[derive(Args, Debug)]
pub struct EvalCorr {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    field: FieldArgs,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

impl EvalCorr {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |_| {})?;
        let pipe = pipeline(&self.field, &cfg)?;
        let clouds = load_clouds(&self.data)?;
        let mut groups: BTreeMap<&str, Vec<&PartLabeledCloud>> = BTreeMap::new();
        for c in &clouds {
            groups.entry(&c.category).or_default().push(c);
        }
        let name = representation_name(&self.field);
        let mut csv = String::from("representation,category,pairs,accuracy\n");
        println!("{:<20} {:>5} {:>8}", "category", "pairs", "accuracy");
        for (cat, members) in &groups {
            if members.len() < 2 {
                continue;
            }
            let fields = members.par_iter().map(|c| pipe.field(c)).collect::<partfield::Result<Vec<_>>>()?;
            let accs = (0..members.len() - 1)
                .map(|i| {
                    let corr = nn_correspondence(&fields[i], &fields[i + 1])?;
                    correspondence_part_accuracy(&corr, &members[i].labels, &members[i + 1].labels)
                })
                .collect::<partfield::Result<Vec<_>>>()?;
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            writeln!(csv, "{name},{cat},{},{mean}", accs.len()).unwrap();
            println!("{cat:<20} {:>5} {mean:>8.3}", accs.len());
        }
        if csv.lines().count() == 1 {
            return Err(CliError::Data("no category has two instances to pair".into()));
        }
        write_file(&self.out, csv.as_bytes())
    }
}

#[derive(Args, Debug)]
pub struct Rollout {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    policy_ckpt: PathBuf,
    #[command(flatten)]
    field: FieldArgs,
    /// Comma-separated subset of OS, OI, OC.
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<Split>>,
    /// Rollouts per split and seed.
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Use posterior sampling noise instead of the deterministic sampler.
    #[arg(long)]
    stochastic: bool,
    /// Success-rate CSV.
    #[arg(long)]
    out: PathBuf,
}

impl Rollout {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |c| {
            if let Some(s) = &self.splits {
                c.eval.splits = s.clone();
            }
            if let Some(e) = self.episodes {
                c.eval.episodes = e;
            }
            if let Some(s) = &self.seeds {
                c.eval.seeds = s.clone();
            }
            if self.stochastic {
                c.eval.sampler = SamplerMode::DdpmPosterior;
            }
        })?;
        let pipe = pipeline(&self.field, &cfg)?;
        let params = PolicyParams::load(&self.policy_ckpt).map_err(|e| CliError::at(&self.policy_ckpt, e))?;
        if params.field_dim != pipe.dim() {
            return Err(CliError::Usage(format!(
                "policy expects {}-d features but the field gives {}",
                params.field_dim,
                pipe.dim()
            )));
        }
        let env = partfield::env::EnvConfig { horizon: params.horizon, ..cfg.env.clone() };
        let policy = DiffusionPolicy { params: &params, mode: cfg.eval.sampler };
        let results = evaluate_splits(
            &policy,
            &pipe,
            params.pool_temperature,
            &cfg.eval.splits,
            cfg.eval.episodes,
            &cfg.eval.seeds,
            cfg.dataset.seed,
            &env,
        )?;
        println!("{:<5} {:>8} {:>8}", "split", "success", "stderr");
        for r in &results {
            println!("{:<5} {:>8.3} {:>8.3}", r.split.to_string(), r.mean, r.stderr);
        }
        let mut csv = Vec::new();
        write_split_csv(&mut csv, &[(representation_name(&self.field).to_string(), results)])?;
        write_file(&self.out, &csv)
    }
}

#[derive(Args, Debug)]
pub struct ExportPly {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Record index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    field: FieldArgs,
    /// Color by similarity to this part name instead of by principal
    /// components.
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

impl ExportPly {
    pub fn run(self) -> Result<(), CliError> {
        let cfg = load_config(&self.cfg, |_| {})?;
        let pipe = pipeline(&self.field, &cfg)?;
        let clouds = load_clouds(&self.data)?;
        let cloud = clouds
            .get(self.index)
            .ok_or_else(|| CliError::Usage(format!("--index {} but the dataset has {} records", self.index, clouds.len())))?;
        let field = pipe.field(cloud)?;
        let colors: Vec<[u8; 3]> = match &self.query {
            Some(name) => {
                let cb = pipe
                    .codebooks
                    .get(&cloud.category)
                    .ok_or_else(|| CliError::Data(format!("no codebook for {}", cloud.category)))?;
                query_similarity(&field, cb, name)?.into_iter().map(diverging_color).collect()
            }
            None => pca_colorize(&field).into_iter().map(unit_to_rgb).collect(),
        };
        let mut buf = Vec::new();
        write_ply(&mut buf, cloud, Some(&colors))?;
        write_file(&self.out, &buf)?;
        println!("wrote {}", self.out.display());
        Ok(())
    }
}
