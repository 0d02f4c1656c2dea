//! `viva` command-line driver.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when the
//! run itself fails.

mod config;
mod plot;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use viva_core::binclass::{Baseline, BaselineConfig, BaselineTrainer};
use viva_core::codec::CodecConfig;
use viva_core::episode::{read_dataset, write_dataset, Episode, Manifest};
use viva_core::eval::{evaluate_model, EvalReport};
use viva_core::model::{count_params, ModelConfig};
use viva_core::sampler::{write_trace_csv, SamplerConfig, ValueModel, Viva};
use viva_core::sim::{generate_corpus, CorpusSpec, ObjectShape, SceneVariant};
use viva_core::trainer::{shape_tags, write_metrics_csv, Checkpoint, LossWeights, Schedule, StepMetrics, Trainer};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn validation(message: impl Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }

    pub fn runtime(message: impl Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }
}

impl From<viva_core::Error> for Failure {
    fn from(e: viva_core::Error) -> Self {
        if e.is_validation() {
            Failure::validation(e)
        } else {
            Failure::runtime(e)
        }
    }
}

fn io_err(e: std::io::Error) -> Failure {
    Failure::runtime(e)
}

#[derive(Parser)]
#[command(name = "viva", version, about = "Video-generative value estimation for manipulation episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated pick-and-place corpus.
    GenData(GenDataArgs),
    /// Train a value model on a corpus.
    Train(TrainArgs),
    /// Evaluate checkpoints on a held-out corpus.
    Eval(EvalArgs),
    /// Evaluate checkpoints on an object shape unseen during training.
    Ood(OodArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
struct GenDataArgs {
    /// JSON file with default values for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_success: Option<usize>,
    #[arg(long)]
    n_failure: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// square (training scenes) or triangle (unseen-object scenes).
    #[arg(long)]
    object_shape: Option<String>,
    #[arg(long)]
    min_length: Option<usize>,
    #[arg(long)]
    max_length: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModelKind {
    Viva,
    VivaNoprop,
    Binclass,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Root under which the timestamped run directory is created.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    /// Skews the flow time towards pure noise (1 = uniform).
    #[arg(long)]
    tau_shift: Option<f64>,
    /// Prediction horizon K in control steps.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    lambda_prop: Option<f64>,
    #[arg(long)]
    lambda_val: Option<f64>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Side of the square group of latent cells forming one token.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct SamplerArgs {
    /// Euler steps per estimate.
    #[arg(long)]
    sampler_steps: Option<usize>,
    /// Noise seeds averaged per estimate.
    #[arg(long)]
    sampler_seeds: Option<usize>,
    #[arg(long)]
    sampler_seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate, as `path` or `name=path`; repeatable.
    #[arg(long = "checkpoint", value_name = "[NAME=]PATH")]
    #[serde(default)]
    checkpoints: Vec<String>,
    /// Held-out dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot at most this many episodes (default: all).
    #[arg(long)]
    plot_limit: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct OodArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long = "checkpoint", value_name = "[NAME=]PATH")]
    #[serde(default)]
    checkpoints: Vec<String>,
    /// Existing unseen-variant dataset; generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training dataset whose manifest is checked for shape overlap.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    object_shape: Option<String>,
    #[arg(long)]
    n_success: Option<usize>,
    #[arg(long)]
    n_failure: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot_limit: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ood(a) => ood(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn variant_for(shape: &str) -> Result<SceneVariant, Failure> {
    Ok(match ObjectShape::parse(shape)? {
        ObjectShape::Square => SceneVariant::Standard,
        ObjectShape::Triangle => SceneVariant::Shifted,
    })
}

// ------------------------------------------------------------------ gen-data

fn gen_data(flags: GenDataArgs) -> Result<(), Failure> {
    let mut a = config::merge(&flags, flags.config.as_deref(), "gen-data")?;
    let defaults = CorpusSpec::new(100, 100, 0);
    a.n_success.get_or_insert(defaults.n_success);
    a.n_failure.get_or_insert(defaults.n_failure);
    a.seed.get_or_insert(defaults.seed);
    a.out.get_or_insert_with(|| PathBuf::from("data"));
    a.object_shape.get_or_insert_with(|| ObjectShape::Square.tag().to_string());
    a.min_length.get_or_insert(defaults.length.0);
    a.max_length.get_or_insert(defaults.length.1);
    a.noise_scale.get_or_insert(defaults.noise_scale);

    let spec = CorpusSpec {
        n_success: a.n_success.unwrap(),
        n_failure: a.n_failure.unwrap(),
        seed: a.seed.unwrap(),
        length: (a.min_length.unwrap(), a.max_length.unwrap()),
        noise_scale: a.noise_scale.unwrap(),
        variant: variant_for(a.object_shape.as_deref().unwrap())?,
        only_kind: None,
    };
    if spec.n_success + spec.n_failure == 0 {
        return Err(Failure::validation("at least one episode must be requested"));
    }
    if !(spec.noise_scale.is_finite() && spec.noise_scale >= 0.0) {
        return Err(Failure::validation("noise scale must be finite and >= 0"));
    }
    let out = a.out.clone().unwrap();
    if out.join("manifest.json").exists() {
        log::info!("overwriting dataset at {}", out.display());
    }
    let episodes = generate_corpus(&spec)?;
    let summary = write_dataset(&episodes, &out)?;
    config::write_runconfig(&out, "gen-data", &a)?;
    println!("{summary}");
    println!("wrote {}", out.display());
    Ok(())
}

// --------------------------------------------------------------------- train

fn train(flags: TrainArgs) -> Result<(), Failure> {
    let mut a = config::merge(&flags, flags.config.as_deref(), "train")?;
    let kind = *a.model.get_or_insert(ModelKind::Viva);
    let data = a.data.clone().ok_or_else(|| Failure::validation("--data is required"))?;
    a.out.get_or_insert_with(|| PathBuf::from("runs"));
    let sd = Schedule::default();
    let md = ModelConfig::default();
    let wd = LossWeights::default();
    a.steps.get_or_insert(sd.steps);
    a.batch.get_or_insert(sd.batch);
    a.lr.get_or_insert(sd.lr);
    a.seed.get_or_insert(sd.seed);
    a.warmup.get_or_insert(sd.warmup);
    a.tau_shift.get_or_insert(sd.tau_shift);
    a.horizon.get_or_insert(md.horizon);
    a.blocks.get_or_insert(md.blocks);
    a.width.get_or_insert(md.width);
    a.heads.get_or_insert(md.heads);
    a.patch.get_or_insert(md.patch);
    a.mlp_ratio.get_or_insert(md.mlp_ratio);
    a.lambda_val.get_or_insert(wd.val);
    if kind == ModelKind::VivaNoprop {
        if a.lambda_prop.is_some_and(|l| l != 0.0) {
            log::warn!("viva-noprop ignores --lambda-prop {}", a.lambda_prop.unwrap());
        }
        a.lambda_prop = Some(0.0);
        log::info!("viva-noprop: future-proprioception loss weight forced to 0");
    }
    a.lambda_prop.get_or_insert(wd.prop);

    let schedule = Schedule {
        steps: a.steps.unwrap(),
        batch: a.batch.unwrap(),
        lr: a.lr.unwrap(),
        seed: a.seed.unwrap(),
        warmup: a.warmup.unwrap(),
        tau_shift: a.tau_shift.unwrap(),
    };
    let manifest = Manifest::read(&data)?;
    let model_config = ModelConfig {
        blocks: a.blocks.unwrap(),
        width: a.width.unwrap(),
        heads: a.heads.unwrap(),
        patch: a.patch.unwrap(),
        horizon: a.horizon.unwrap(),
        mlp_ratio: a.mlp_ratio.unwrap(),
        d_q: manifest.d_q,
        ..md
    };
    let weights = LossWeights::new(a.lambda_prop.unwrap(), a.lambda_val.unwrap())?;
    schedule.validate()?;
    model_config.validate()?;
    let corpus = read_dataset(&data)?;
    let image_size = (manifest.height, manifest.width);

    let dir = config::run_dir(a.out.as_deref().unwrap(), "train")?;
    config::write_runconfig(&dir, "train", &a)?;
    log::info!("run directory {}", dir.display());

    let (metrics, ckpt_path) = match kind {
        ModelKind::Viva | ModelKind::VivaNoprop => {
            log::info!(
                "velocity model with {} parameters, K={}, lambda_prop={}, lambda_val={}",
                count_params(&model_config),
                model_config.horizon,
                weights.prop,
                weights.val
            );
            let codec = CodecConfig {
                image_size,
                ..CodecConfig::default()
            };
            let mut trainer = Trainer::new(&corpus, model_config, codec, weights, schedule)?;
            let metrics = run_logged(schedule.steps, || trainer.step())?;
            let path = dir.join("checkpoint.viva");
            trainer.checkpoint().save(&path)?;
            (metrics, path)
        }
        ModelKind::Binclass => {
            let config = BaselineConfig::matched_to(&model_config, image_size)?;
            log::info!(
                "201-bin baseline with {} parameters (hidden {})",
                config.count_params(),
                config.hidden
            );
            let mut trainer = BaselineTrainer::new(&corpus, config, schedule)?;
            let metrics = run_logged(schedule.steps, || trainer.step())?;
            let path = dir.join("checkpoint.vbcl");
            trainer.checkpoint().save(&path)?;
            (metrics, path)
        }
    };
    write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn run_logged(
    steps: u64,
    mut step: impl FnMut() -> viva_core::Result<StepMetrics>,
) -> Result<Vec<StepMetrics>, Failure> {
    let every = (steps / 20).max(1);
    let mut out = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let m = step()?;
        if m.step % every == 0 || m.step == steps {
            log::info!(
                "step {:>6}/{steps} loss {:.5} (prop {:.5}, val {:.5}) lr {:.2e}",
                m.step,
                m.total_loss,
                m.loss_prop,
                m.loss_val,
                m.lr
            );
        }
        out.push(m);
    }
    Ok(out)
}

// ---------------------------------------------------------------- evaluation

struct LoadedModel {
    name: String,
    model: Box<dyn ValueModel>,
    train_shapes: Vec<String>,
}

fn sampler_config(a: &mut SamplerArgs) -> SamplerConfig {
    let d = SamplerConfig::default();
    SamplerConfig {
        n_steps: *a.sampler_steps.get_or_insert(d.n_steps),
        n_seeds: *a.sampler_seeds.get_or_insert(d.n_seeds),
        seed: *a.sampler_seed.get_or_insert(d.seed),
    }
}

fn load_models(specs: &[String], sampler: SamplerConfig) -> Result<Vec<LoadedModel>, Failure> {
    if specs.is_empty() {
        return Err(Failure::validation("at least one --checkpoint is required"));
    }
    let mut out: Vec<LoadedModel> = Vec::new();
    for spec in specs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (Some(n.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(spec)),
        };
        if !path.is_file() {
            return Err(Failure::validation(format!("checkpoint {} not found", path.display())));
        }
        let loaded = match Checkpoint::load(&path) {
            Ok(ckpt) => {
                let default_name = if ckpt.weights.prop == 0.0 { "viva-noprop" } else { "viva" };
                LoadedModel {
                    name: name.unwrap_or_else(|| default_name.into()),
                    model: Box::new(Viva::from_checkpoint(&ckpt)?.with_sampler(sampler)?),
                    train_shapes: ckpt.train_shapes.clone(),
                }
            }
            Err(viva_core::Error::Magic { .. }) => {
                let ckpt = viva_core::binclass::BaselineCheckpoint::load(&path)?;
                LoadedModel {
                    name: name.unwrap_or_else(|| "binclass".into()),
                    model: Box::new(Baseline::from_checkpoint(&ckpt)?),
                    train_shapes: ckpt.train_shapes.clone(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        if out.iter().any(|m| m.name == loaded.name) {
            return Err(Failure::validation(format!(
                "duplicate model name {:?}; use name=path to disambiguate",
                loaded.name
            )));
        }
        out.push(loaded);
    }
    Ok(out)
}

/// Writes metrics.json, per-model trace CSVs and one overlay plot per episode.
fn evaluate_into(
    dir: &Path,
    models: &[LoadedModel],
    episodes: &[Episode],
    plot_limit: Option<usize>,
) -> Result<EvalReport, Failure> {
    if episodes.is_empty() {
        return Err(Failure::validation("evaluation dataset is empty"));
    }
    let mut all_metrics = Vec::new();
    let mut all_traces = Vec::new();
    for m in models {
        log::info!("evaluating {} on {} episodes", m.name, episodes.len());
        let (metrics, traces) = evaluate_model(&m.name, m.model.as_ref(), episodes)?;
        let trace_dir = dir.join("traces").join(&m.name);
        fs::create_dir_all(&trace_dir).map_err(io_err)?;
        for (i, trace) in traces.iter().enumerate() {
            write_trace_csv(&trace_dir.join(format!("{}.csv", episode_file(i))), trace)?;
        }
        all_metrics.push(metrics);
        all_traces.push(traces);
    }
    let report = EvalReport::new(all_metrics);
    fs::write(dir.join("metrics.json"), report.to_json()? + "\n").map_err(io_err)?;

    let plot_dir = dir.join("plots");
    fs::create_dir_all(&plot_dir).map_err(io_err)?;
    let legend: BTreeMap<&str, String> = models
        .iter()
        .enumerate()
        .map(|(k, m)| (m.name.as_str(), plot::color_hex(plot::PALETTE[k % plot::PALETTE.len()])))
        .collect();
    let legend_json = serde_json::to_string_pretty(&legend).map_err(Failure::runtime)?;
    fs::write(plot_dir.join("legend.json"), legend_json + "\n").map_err(io_err)?;
    let n_plots = plot_limit.unwrap_or(episodes.len()).min(episodes.len());
    for (i, ep) in episodes.iter().enumerate().take(n_plots) {
        let traces: Vec<&[viva_core::sampler::TracePoint]> = all_traces.iter().map(|t| t[i].as_slice()).collect();
        plot::plot_episode(&plot_dir.join(format!("{}.png", episode_file(i))), ep, &traces).map_err(io_err)?;
    }

    for m in &report.models {
        println!(
            "{:<14} spearman {}  auc_mid {}  failure_sensitivity {}  trace_variance {}",
            m.model,
            fmt_opt(m.spearman_mean),
            fmt_opt(m.auc_mid_episode),
            fmt_opt(m.failure_sensitivity),
            fmt_opt(m.trace_variance)
        );
    }
    println!("results in {}", dir.display());
    Ok(report)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn episode_file(index: usize) -> String {
    format!("episode_{index:05}")
}

fn eval(flags: EvalArgs) -> Result<(), Failure> {
    let mut a = config::merge(&flags, flags.config.as_deref(), "eval")?;
    let data = a.data.clone().ok_or_else(|| Failure::validation("--data is required"))?;
    a.out.get_or_insert_with(|| PathBuf::from("runs"));
    let sampler = sampler_config(&mut a.sampler);
    let models = load_models(&a.checkpoints, sampler)?;
    let episodes = read_dataset(&data)?;
    let dir = config::run_dir(a.out.as_deref().unwrap(), "eval")?;
    config::write_runconfig(&dir, "eval", &a)?;
    evaluate_into(&dir, &models, &episodes, a.plot_limit)?;
    Ok(())
}

fn ood(flags: OodArgs) -> Result<(), Failure> {
    let mut a = config::merge(&flags, flags.config.as_deref(), "ood")?;
    a.out.get_or_insert_with(|| PathBuf::from("runs"));
    let sampler = sampler_config(&mut a.sampler);
    let models = load_models(&a.checkpoints, sampler)?;

    let mut seen: Vec<String> = models.iter().flat_map(|m| m.train_shapes.clone()).collect();
    if let Some(train) = &a.train_data {
        seen.extend(Manifest::read(train)?.shape_tags());
    }
    seen.sort();
    seen.dedup();

    let dir;
    let episodes = match &a.data {
        Some(path) => {
            dir = config::run_dir(a.out.as_deref().unwrap(), "ood")?;
            read_dataset(path)?
        }
        None => {
            let shape = a.object_shape.get_or_insert_with(|| ObjectShape::Triangle.tag().into()).clone();
            let mut spec = CorpusSpec::new(
                *a.n_success.get_or_insert(25),
                *a.n_failure.get_or_insert(25),
                *a.seed.get_or_insert(4),
            );
            spec.variant = variant_for(&shape)?;
            check_overlap(&seen, &[shape])?;
            if spec.n_success + spec.n_failure == 0 {
                return Err(Failure::validation("at least one episode must be requested"));
            }
            let episodes = generate_corpus(&spec)?;
            dir = config::run_dir(a.out.as_deref().unwrap(), "ood")?;
            write_dataset(&episodes, &dir.join("data"))?;
            episodes
        }
    };
    let eval_shapes = shape_tags(&episodes);
    if let Err(e) = check_overlap(&seen, &eval_shapes) {
        let _ = fs::remove_dir_all(&dir);
        return Err(e);
    }
    config::write_runconfig(&dir, "ood", &a)?;
    evaluate_into(&dir, &models, &episodes, a.plot_limit)?;
    Ok(())
}

fn check_overlap(seen: &[String], eval: &[String]) -> Result<(), Failure> {
    let shared: Vec<&String> = eval.iter().filter(|s| seen.contains(s)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(viva_core::Error::Overlap(format!(
            "object shape(s) {shared:?} already appear in the training data"
        ))
        .into())
    }
}
