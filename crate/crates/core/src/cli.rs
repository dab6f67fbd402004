//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::report::{write_csv, write_summary};
use crate::eval::{generate, read_dataset, summarize, write_dataset, Dataset, EvalRecord, Instance, Split, SynthSpec};
use crate::geometry::cloud::PointCloud;
use crate::geometry::io::{read_ply, write_atomic, write_ply};
use crate::geometry::pose::Pose;
use crate::heads::SelectionRecord;
use crate::pipeline::checkpoint::{load_checkpoint, Phase, RunRecorder};
use crate::pipeline::infer::{infer, score};
use crate::pipeline::train::{log_size_bias, pretrain, refine, samples, TrainReport};
use crate::pipeline::{check_model, Config, GradCheckOptions, Model, ModelConfig};
use crate::rng;
use crate::selftest;
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "equipose", version, about = "Category-level pose, size and shape estimation on point clouds")]
pub struct Cli {
    /// Seed for data generation, initialization, batching and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with `model` and `train` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run on a single thread so every output is bit-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    Gen {
        /// JSON dataset spec; defaults to the built-in toy set.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the prior-conditioned denoiser and the hypothesis heads.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Attach and train the observation-conditioned branch.
    Refine {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint directory.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reconstruct shapes and select poses for one split.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score a model or saved predictions: records.csv and summary.json.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// Directory written by `infer`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Report plain rotation errors for symmetric categories.
        #[arg(long)]
        no_symmetry: bool,
    },
    /// Finite-difference check of the assembled toy model.
    Gradcheck {
        /// Entries checked per tensor.
        #[arg(long, default_value_t = 3)]
        entries: usize,
        /// Check every entry.
        #[arg(long)]
        all: bool,
    },
    /// Run the invariant suite.
    Selftest,
}

/// One line of `predictions.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub category: String,
    #[serde(flatten)]
    pub selection: SelectionRecord,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads(cli.deterministic);
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads(deterministic: bool) {
    let cap = std::env::var("EQUIPOSE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    let threads = if deterministic { Some(1) } else { cap };
    if let Some(n) = threads {
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        config.train.seed = s;
    }
    Ok(config)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn split_with_priors(data: &Dataset, split: Split) -> Result<Vec<(&Instance, &Tensor)>> {
    data.split(split).map(|i| Ok((i, data.prior(i.category)?))).collect()
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { spec } => {
            let mut s = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let data = generate(&s)?;
            write_dataset(&cli.out, &data)?;
            eprintln!("wrote {} instances to {}", data.instances.len(), cli.out.display());
            Ok(true)
        }
        Command::Pretrain { data, steps } => {
            let mut config = load_config(cli)?;
            if let Some(n) = steps {
                config.train.pretrain_steps = *n;
            }
            let train = samples(&read_dataset(data)?, Split::Train)?;
            let seed = config.train.seed;
            let mut model = Model::new(&config.model, seed, log_size_bias(&train)?)?;
            let mut rec = RunRecorder::new(&cli.out, Phase::Pretrain, seed, &config.train)?;
            rec.echo = true;
            let report = pretrain(&mut model, &train, &config.train, &mut rec)?;
            finish_training(&cli.out, &report)
        }
        Command::Refine { data, from, steps } => {
            let (mut model, manifest) = load_checkpoint(from)?;
            if manifest.phase != Phase::Pretrain {
                return Err(Error::InvalidArgument(format!("{} is not a pretrained checkpoint", from.display())));
            }
            let mut train_cfg = match &cli.config {
                Some(_) => load_config(cli)?.train,
                None => manifest.config.train.clone(),
            };
            if let Some(s) = cli.seed {
                train_cfg.seed = s;
            }
            if let Some(n) = steps {
                train_cfg.refine_steps = *n;
            }
            let train = samples(&read_dataset(data)?, Split::Train)?;
            let mut rec = RunRecorder::new(&cli.out, Phase::Refine, manifest.seed, &train_cfg)?;
            rec.echo = true;
            let report = refine(&mut model, &train, &train_cfg, &mut rec)?;
            finish_training(&cli.out, &report)
        }
        Command::Infer { data, model, split } => {
            let data = read_dataset(data)?;
            let (model, manifest) = load_checkpoint(model)?;
            let seed = cli.seed.unwrap_or(manifest.seed);
            create_dir(&cli.out.join("shapes"))?;
            let mut preds = Vec::new();
            for (k, (inst, prior)) in split_with_priors(&data, (*split).into())?.into_iter().enumerate() {
                let out = infer(&model, &inst.observed, prior, &mut rng::stream(seed, 1000 + k as u64))?;
                write_ply(&cli.out.join("shapes").join(format!("{}.ply", inst.id)), &PointCloud::new(out.shape)?)?;
                preds.push(Prediction { id: inst.id.clone(), category: inst.category.name().into(), selection: (&out.selection).into() });
            }
            write_json(&cli.out.join("predictions.json"), &preds)?;
            eprintln!("wrote {} predictions to {}", preds.len(), cli.out.display());
            Ok(true)
        }
        Command::Eval { data, model, predictions, split, no_symmetry } => {
            let data = read_dataset(data)?;
            let instances = split_with_priors(&data, (*split).into())?;
            let records = match (model, predictions) {
                (Some(m), _) => {
                    let (model, manifest) = load_checkpoint(m)?;
                    let seed = cli.seed.unwrap_or(manifest.seed);
                    crate::pipeline::evaluate(&model, instances, seed, !no_symmetry)?.into_iter().map(|(r, _)| r).collect()
                }
                (None, Some(dir)) => score_saved(dir, &instances, !no_symmetry)?,
                (None, None) => return Err(Error::InvalidArgument("eval needs --model or --predictions".into())),
            };
            create_dir(&cli.out)?;
            let summary = summarize(&records)?;
            write_csv(&cli.out.join("records.csv"), &records)?;
            write_summary(&cli.out.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Gradcheck { entries, all } => {
            let seed = cli.seed.unwrap_or(0);
            let data = generate(&SynthSpec { train_per_category: 1, test_per_category: 1, points: 32, observed_points: 32, dense_points: 128, seed, ..SynthSpec::default() })?;
            let sample = &samples(&data, Split::Train)?[0];
            let cfg = ModelConfig { width: 8, heads: 2, group_width: 4, pose_hidden: 8, kernel_size: 6, k_seed: 2, max_neighbors: 8, time_width: 8, ..ModelConfig::default() };
            let model = Model::new(&cfg, seed, log_size_bias(std::slice::from_ref(sample))?)?;
            let opts = GradCheckOptions { per_tensor: (!all).then_some(*entries), seed, ..GradCheckOptions::default() };
            let report = check_model(&model, sample, model.schedule.steps() / 2, opts)?;
            create_dir(&cli.out)?;
            write_json(&cli.out.join("gradcheck.json"), &report)?;
            for t in report.failures() {
                eprintln!("FAIL {} max rel {:.3e} at entry {}", t.name, t.max_rel_err, t.worst);
            }
            println!("{} tensors, max relative error {:.3e} (tolerance {:.0e})", report.tensors.len(), report.max_rel_err(), report.tol);
            Ok(report.passed())
        }
        Command::Selftest => {
            let outcomes = selftest::run(cli.seed.unwrap_or(0));
            for o in &outcomes {
                println!("[{}] {}: {}", if o.passed { "pass" } else { "FAIL" }, o.name, o.detail);
            }
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}

fn finish_training(out: &Path, report: &TrainReport) -> Result<bool> {
    write_json(&out.join("train_report.json"), report)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(true)
}

fn score_saved(dir: &Path, instances: &[(&Instance, &Tensor)], use_symmetry: bool) -> Result<Vec<EvalRecord>> {
    let path = dir.join("predictions.json");
    let preds: Vec<Prediction> = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    instances
        .iter()
        .map(|(inst, _)| {
            let p = preds
                .iter()
                .find(|p| p.id == inst.id)
                .ok_or_else(|| Error::InvalidArgument(format!("no prediction for {}", inst.id)))?;
            let shape = read_ply(&dir.join("shapes").join(format!("{}.ply", inst.id)))?.into_coords();
            let pose = Pose::new(p.selection.quaternion, p.selection.translation_m)?;
            score(inst, &shape, &pose, p.selection.scale, use_symmetry)
        })
        .collect()
}
