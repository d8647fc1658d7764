//! `dualgen`: train, evaluate and run point cloud completion.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input errors,
//! 3 when a numeric check aborts training or inference.

mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dualgen::cloud::io::{read_cloud, write_ply};
use dualgen::config::RunConfig;
use dualgen::datasets::{load_archive, make_missing, make_noisy, write_archive, CompletionSample, CorruptionSpec};
use dualgen::decoder::BENCHMARK_RESOLUTIONS;
use dualgen::fusion::FusionBranch;
use dualgen::trainer::{evaluation_set, load_checkpoint, save_checkpoint, training_set, Trainer};
use dualgen::Error;

#[derive(Parser)]
#[command(name = "dualgen", version, about = "Dual-generator point cloud completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a configuration file; writes one checkpoint per epoch and
    /// a JSON-lines metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a per-category report.
    Eval(EvalArgs),
    /// Complete one partial cloud and write Y_v, Y_g and Y_out.
    Complete(CompleteArgs),
    /// Replace a fraction of every partial cloud with uniform noise.
    MakeNoisy(CorruptArgs),
    /// Remove a connected region from every partial cloud.
    MakeMissing(CorruptArgs),
    /// Write the samples of an archive as PLY files.
    Export(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output resolution of both generators.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Archive file or directory; defaults to the evaluation set of the
    /// checkpoint's configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report path (JSON). A text table goes to stdout.
    #[arg(long)]
    out: PathBuf,
    /// F-score distance threshold.
    #[arg(long, default_value_t = dualgen::cloud::metrics::DEFAULT_F_SCORE_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_frac: Option<f64>,
    #[arg(long)]
    missing_frac: Option<f64>,
    /// Score the ground truth against itself instead of running a model.
    #[arg(long)]
    ground_truth: bool,
    #[arg(long, default_value_t = 50)]
    emd_iters: usize,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Partial cloud (`.xyz` or `.ply`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Output archive file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_frac: Option<f64>,
    #[arg(long)]
    missing_frac: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Export at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
}

fn parse_resolution(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if BENCHMARK_RESOLUTIONS.contains(&n) {
        Ok(n)
    } else {
        Err(format!("resolution must be one of {BENCHMARK_RESOLUTIONS:?}"))
    }
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    usage(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn corruption(noise: Option<f64>, missing: Option<f64>, seed: u64) -> Result<Vec<CorruptionSpec>, Failure> {
    let mut specs = Vec::new();
    if let Some(f) = noise {
        specs.push(CorruptionSpec::noise(f, seed));
    }
    if let Some(f) = missing {
        specs.push(CorruptionSpec::missing(f, seed));
    }
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

fn apply(s: &CompletionSample, specs: &[CorruptionSpec]) -> dualgen::Result<CompletionSample> {
    let mut out = s.clone();
    for spec in specs {
        if spec.noise_fraction > 0.0 {
            out = make_noisy(&out, spec)?;
        }
        if spec.missing_fraction > 0.0 {
            out = make_missing(&out, spec)?;
        }
    }
    Ok(out)
}

fn read_archive(path: &Path, split: &str) -> Result<Vec<CompletionSample>, Failure> {
    Ok(load_archive(path, split)?.collect::<dualgen::Result<Vec<_>>>()?)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(r) = a.resolution {
        cfg.set_resolution(r);
    }
    cfg.validate()?;
    let data = training_set(&cfg)?;
    if data.is_empty() {
        return Err(usage("training set is empty"));
    }
    create_dir(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text()).map_err(|e| io_failure(&a.out, e))?;
    let log_path = a.out.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let epochs = cfg.train.epochs;
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..epochs {
        trainer.run_epoch(&data, |r| {
            log.write_all(r.to_json_line().as_bytes())
                .map_err(|e| dualgen::Error::Io { path: log_path.clone(), source: e })
        })?;
        let ck = a.out.join(format!("epoch-{:04}.dgck", trainer.epoch));
        save_checkpoint(&trainer, &ck)?;
        eprintln!("epoch {} done, wrote {}", trainer.epoch, ck.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    if !(a.tau > 0.0) {
        return Err(usage("--tau must be positive"));
    }
    let trainer = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None if a.ground_truth => None,
        None => return Err(usage("--checkpoint is required unless --ground-truth is given")),
    };
    let data = match (&a.data, &trainer) {
        (Some(p), _) => read_archive(p, &a.split)?,
        (None, Some(t)) => evaluation_set(&t.config)?,
        (None, None) => return Err(usage("--data is required without a checkpoint")),
    };
    let specs = corruption(a.noise_frac, a.missing_frac, a.seed)?;
    let mut pairs = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let s = apply(s, &specs)?;
        let pred = match &trainer {
            Some(t) => t.infer(&s.partial, a.seed.wrapping_add(i as u64))?.y_out,
            None => s.complete.clone(),
        };
        pairs.push((s.label.clone(), pred, s.complete));
    }
    let rep = report::build(&pairs, a.tau, a.emd_iters)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &rep)?;
    print!("{}", rep.table());
    Ok(())
}

#[derive(Serialize)]
struct Sidecar {
    deviation: f64,
    threshold: f64,
    branch: FusionBranch,
    points: usize,
    seed: u64,
}

fn complete(a: CompleteArgs) -> Result<(), Failure> {
    let x = read_cloud(&a.input)?;
    let trainer = load_checkpoint(&a.checkpoint)?;
    let b = trainer.infer(&x, a.seed)?;
    create_dir(&a.out)?;
    write_ply(a.out.join("y_v.ply"), &b.y_v)?;
    write_ply(a.out.join("y_g.ply"), &b.y_g)?;
    write_ply(a.out.join("y_out.ply"), &b.y_out)?;
    write_json(
        &a.out.join("completion.json"),
        &Sidecar {
            deviation: b.deviation,
            threshold: b.threshold,
            branch: b.branch,
            points: b.y_out.len(),
            seed: a.seed,
        },
    )
}

fn corrupt(a: CorruptArgs, noisy: bool) -> Result<(), Failure> {
    let (noise, missing) = if noisy {
        (Some(a.noise_frac.ok_or_else(|| usage("--noise-frac is required"))?), None)
    } else {
        (None, Some(a.missing_frac.ok_or_else(|| usage("--missing-frac is required"))?))
    };
    let specs = corruption(noise, missing, a.seed)?;
    let data = read_archive(&a.data, &a.split)?;
    let out = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec: Vec<CorruptionSpec> = specs
                .iter()
                .map(|c| CorruptionSpec {
                    seed: c.seed.wrapping_add(i as u64),
                    ..*c
                })
                .collect();
            apply(s, &spec)
        })
        .collect::<dualgen::Result<Vec<_>>>()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_archive(&a.out, &out)?;
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), Failure> {
    let data = read_archive(&a.data, &a.split)?;
    create_dir(&a.out)?;
    for s in data.iter().take(a.limit.unwrap_or(usize::MAX)) {
        write_ply(a.out.join(format!("{}_partial.ply", s.id)), &s.partial)?;
        write_ply(a.out.join(format!("{}_complete.ply", s.id)), &s.complete)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Complete(a) => complete(a),
        Command::MakeNoisy(a) => corrupt(a, true),
        Command::MakeMissing(a) => corrupt(a, false),
        Command::Export(a) => export(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if std::env::var("DUALGEN_DETERMINISTIC").as_deref() == Ok("1") {
        // Results do not depend on thread count; this also pins scheduling.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
