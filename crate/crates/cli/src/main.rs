use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gapcascade_cli::config::{BackendSpec, Mode, ServiceConfig};
use gapcascade_cli::{exit_code, service, ClassifyRequest};
use gapcascade_core::arbiter::{ArbiterConfig, DescriptorDb};
use gapcascade_core::eval::{
    dataset_stats, ensemble_latency, metrics, read_records, render_metrics_table, render_stats_table, run_pipeline,
    sweep_csv, sweep_svg, sweep_trigger, threshold_grid, unit_steps, write_records, ArbiterModel, DatasetManifest,
    EvalRecord, Split,
};
use gapcascade_core::synth::{
    gaussian_blobs, long_tail_manifest, synthetic_attributes, synthetic_descriptors, synthetic_log,
};
use gapcascade_core::train::{curves_csv, make_toy_ensemble, train, write_checkpoint, TrainConfig};
use gapcascade_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gapcascade", version, about = "Entropy-weighted ensemble with gap-triggered arbitration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify one sample and print the response as JSON.
    Classify(ClassifyArgs),
    /// Run the cascade over a manifest split and write records and metrics.
    Evaluate(EvaluateArgs),
    /// Sweep router thresholds over cached records.
    Sweep(SweepArgs),
    /// Fine-tune a toy ensemble on Gaussian blobs.
    TrainToy(TrainToyArgs),
    /// Print long-tail statistics of a dataset.
    Stats(StatsArgs),
    /// Write a synthetic logit log, descriptors, attributes and a config.
    Synth(SynthArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, required_unless_present = "request", conflicts_with = "request")]
    sample_id: Option<String>,
    #[arg(long, conflicts_with = "request")]
    image: Option<PathBuf>,
    /// JSON request body, as accepted by `POST /classify`.
    #[arg(long)]
    request: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArbiterKind {
    Perfect,
    Fixed,
    Mock,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    records: Option<PathBuf>,
    /// Generate this many synthetic records instead of reading them.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    models: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value = "perfect")]
    arbiter: ArbiterKind,
    /// Arbiter accuracy for `--arbiter fixed`.
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    /// Descriptor and attribute files for `--arbiter mock` with `--records`.
    #[arg(long)]
    descriptors: Option<PathBuf>,
    #[arg(long)]
    attributes: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    lambda_pen: f64,
    /// Grid points per threshold axis on [0, 1].
    #[arg(long, default_value_t = 9)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    models: usize,
    /// Fraction of batches whose logits are replaced with NaN.
    #[arg(long, default_value_t = 0.0)]
    nan_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
struct StatsSource {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Root laid out as `<split>/<class>/<image>`.
    #[arg(long)]
    image_folder: Option<PathBuf>,
    /// The built-in 306-class long-tail fruit manifest.
    #[arg(long)]
    long_tail: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    source: StatsSource,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    models: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn load_config(path: &Path, mode: Option<Mode>) -> Result<ServiceConfig> {
    let mut cfg = ServiceConfig::load(path)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

fn classify(args: ClassifyArgs) -> Result<()> {
    let request = match &args.request {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<ClassifyRequest>(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => ClassifyRequest {
            sample_id: args.sample_id.clone().unwrap_or_default(),
            image: args.image.clone(),
            ..Default::default()
        },
    };
    let pipeline = load_config(&args.config, args.mode)?.build()?;
    let response = pipeline.classify(&request)?;
    println!("{}", serde_json::to_string(&response)?);
    Ok(())
}

#[derive(Serialize)]
struct LatencySummary {
    samples: usize,
    trigger_rate: f64,
    measured_mean_total_ms: f64,
    backend_estimates_ms: Vec<f64>,
    llm_mean_ms: f64,
    expected_serial_ms: f64,
    expected_parallel_ms: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn latency_summary(records: &[EvalRecord], estimates: Vec<f64>, trigger_rate: f64) -> Result<LatencySummary> {
    let llm_mean_ms = mean(records.iter().filter(|r| r.arbitrated).map(|r| r.latencies.arbitration_ms));
    let expected = ensemble_latency(&estimates, llm_mean_ms, trigger_rate)?;
    Ok(LatencySummary {
        samples: records.len(),
        trigger_rate,
        measured_mean_total_ms: mean(records.iter().map(|r| r.latencies.total_ms)),
        backend_estimates_ms: estimates,
        llm_mean_ms,
        expected_serial_ms: expected.serial_ms,
        expected_parallel_ms: expected.parallel_ms,
    })
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.mode)?;
    let workers = args.workers.unwrap_or(cfg.workers);
    let pipeline = cfg.build()?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let records = run_pipeline(&manifest, &pipeline.cascade, args.split, workers)?;
    let report = metrics(&records, manifest.num_classes())?;
    let latency = latency_summary(
        &records,
        pipeline.cascade.backends.latency_estimates_ms(),
        report.trigger_rate,
    )?;
    create_dir(&args.out)?;
    write_records(args.out.join("records.jsonl"), &records)?;
    write_json(&args.out.join("metrics.json"), &report)?;
    let table = render_metrics_table(&report);
    write_file(&args.out.join("metrics.txt"), &table)?;
    write_json(&args.out.join("latency.json"), &latency)?;
    print!("{table}");
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let (records, synthetic) = match (&args.records, args.synthetic) {
        (Some(path), _) => (read_records(path)?, None),
        (None, Some(n)) => {
            let log = synthetic_log(args.seed, n, args.classes, args.models)?;
            let cascade = gapcascade_core::Cascade {
                backends: log.backends(),
                engine: Default::default(),
                arbiter: None,
                policy: Default::default(),
            };
            let records = run_pipeline(&log.manifest, &cascade, Split::Test, 1)?;
            (records, Some(log.manifest))
        }
        (None, None) => return Err(Error::Usage("give --records or --synthetic".into())),
    };
    let model = match args.arbiter {
        ArbiterKind::Perfect => ArbiterModel::PerfectInCandidates,
        ArbiterKind::Fixed => {
            if !(0.0..=1.0).contains(&args.p) {
                return Err(Error::Usage(format!("--p {} outside [0, 1]", args.p)));
            }
            ArbiterModel::FixedAccuracy {
                p: args.p,
                seed: args.seed,
            }
        }
        ArbiterKind::Mock => {
            let (descriptors, attributes) = match (&synthetic, &args.descriptors, &args.attributes) {
                (Some(m), _, _) => (synthetic_descriptors(&m.class_names)?, synthetic_attributes(m)),
                (None, Some(d), Some(a)) => (
                    DescriptorDb::load(d, None)?,
                    gapcascade_core::arbiter::MockLlmClient::load_attributes(a)?,
                ),
                _ => {
                    return Err(Error::Usage(
                        "--arbiter mock with --records needs --descriptors and --attributes".into(),
                    ))
                }
            };
            ArbiterModel::Mock {
                attributes: Arc::new(attributes),
                descriptors: Arc::new(descriptors),
                lambda_pen: args.lambda_pen,
            }
        }
    };
    let steps = unit_steps(args.steps);
    let grid = threshold_grid(&steps, &steps)?;
    let result = sweep_trigger(&records, &grid, &model)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("sweep.csv"), sweep_csv(&result))?;
    write_file(&args.out.join("sweep.svg"), sweep_svg(&result))?;
    write_json(&args.out.join("sweep.json"), &result)?;
    println!(
        "ensemble top1 {:.4}, candidate recall {:.4}, {} grid points",
        result.ensemble_top1,
        result.candidate_recall,
        result.points.len()
    );
    for op in &result.operating_points {
        let label = match op.target {
            Some(t) => format!("near {t:.3}"),
            None => "best".to_string(),
        };
        let p = op.point;
        println!(
            "{label:>10}: tau_conf {:.3} tau_gap {:.3} trigger {:.4} top1 {:.4}",
            p.tau_conf, p.tau_gap, p.trigger_rate, p.top1
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ToyReport {
    epochs: usize,
    samples: usize,
    classes: usize,
    models: usize,
    config_hash: String,
    injected_nan_batches: usize,
    skipped_batch_count: usize,
    optimizer_steps: u64,
    max_applied_grad_norm: f64,
    final_train_top1: Option<f64>,
    final_val_top1: Option<f64>,
    best_epoch: Option<usize>,
}

fn train_toy(args: TrainToyArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.nan_fraction) {
        return Err(Error::Usage(format!("--nan-fraction {} outside [0, 1]", args.nan_fraction)));
    }
    let data = gaussian_blobs(args.seed, args.samples, args.classes, 2, 4.0, 1.0);
    let val = gaussian_blobs(args.seed.wrapping_add(1), args.samples.div_ceil(5), args.classes, 2, 4.0, 1.0);
    let ensemble = make_toy_ensemble(args.seed, args.models, 2, 8, args.classes)?;
    let mut cfg = TrainConfig::toy(args.classes);
    cfg.epochs = args.epochs;
    cfg.seed = args.seed;
    let total = data.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut pool: Vec<usize> = (0..total).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(args.seed));
    let injected = (args.nan_fraction * total as f64).round() as usize;
    cfg.nan_batches = pool[..injected].iter().copied().collect::<BTreeSet<_>>();

    let report = train(&data, &ensemble, &cfg, Some(&val))?;
    let hash = cfg.hash();
    create_dir(&args.out)?;
    write_checkpoint(args.out.join("initial.ckpt"), &ensemble, &hash)?;
    write_checkpoint(args.out.join("final.ckpt"), &report.final_params, &hash)?;
    write_checkpoint(args.out.join("ema.ckpt"), &report.ema_shadows, &hash)?;
    write_file(&args.out.join("curves.csv"), curves_csv(&report))?;
    let last = report.epochs.last();
    let summary = ToyReport {
        epochs: cfg.epochs,
        samples: data.len(),
        classes: args.classes,
        models: args.models,
        config_hash: hash,
        injected_nan_batches: injected,
        skipped_batch_count: report.skipped_batch_count,
        optimizer_steps: report.optimizer_steps,
        max_applied_grad_norm: report.max_applied_grad_norm,
        final_train_top1: last.map(|e| e.train_top1),
        final_val_top1: last.and_then(|e| e.val_top1),
        best_epoch: report.best_epoch,
    };
    write_json(&args.out.join("report.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let s = args.source;
    let manifest = match (s.manifest, s.image_folder) {
        (Some(path), _) => DatasetManifest::load(path)?,
        (None, Some(root)) => DatasetManifest::scan_image_folder(root)?,
        (None, None) => long_tail_manifest(),
    };
    let stats = dataset_stats(&manifest)?;
    let table = render_stats_table(&stats);
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("stats.json"), &stats)?;
        write_file(&out.join("stats.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let log = synthetic_log(args.seed, args.samples, args.classes, args.models)?;
    log.save(&args.out)?;
    let descriptors = synthetic_descriptors(&log.manifest.class_names)?;
    write_json(&args.out.join("descriptors.json"), &descriptors.to_json())?;
    let attributes: std::collections::BTreeMap<_, _> = synthetic_attributes(&log.manifest).into_iter().collect();
    write_json(&args.out.join("attributes.json"), &attributes)?;
    let cfg = ServiceConfig {
        listen: "127.0.0.1:8080".into(),
        mode: Mode::Mock,
        failure_policy: Default::default(),
        workers: 4,
        classes: Some(log.manifest.class_names.clone()),
        descriptors: Some("descriptors.json".into()),
        attributes: Some("attributes.json".into()),
        fusion: Default::default(),
        router: Default::default(),
        arbiter: ArbiterConfig {
            cache_dir: Some("arbiter-cache".into()),
            ..Default::default()
        },
        backends: log
            .stores
            .iter()
            .map(|s| BackendSpec::Store {
                path: format!("{}.jsonl", s.model_id).into(),
                latency_ms: 0.0,
            })
            .collect(),
    };
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&args.out.join("config.toml"), text)?;
    println!(
        "wrote {} samples, {} classes, {} models to {}",
        args.samples,
        args.classes,
        args.models,
        args.out.display()
    );
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.mode)?;
    let listen = args.listen.unwrap_or_else(|| cfg.listen.clone());
    // Blocking HTTP clients must be created and dropped outside the async runtime.
    let pipeline = Arc::new(cfg.build()?);
    pipeline.cascade.backends.health()?;
    log::info!(
        "{} backends healthy, mode {:?}",
        pipeline.cascade.backends.len(),
        pipeline.mode
    );
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    let served = runtime.block_on(service::serve(pipeline.clone(), &listen));
    drop(runtime);
    served.map_err(|e| Error::io(listen, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Stats(a) => stats(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
