//! Command-line driver: dataset synthesis, recurrent training, Jacobian
//! builder verification, scan benchmarks, and static FLOP analysis.
//!
//! Every subcommand is deterministic for fixed flags, wall-clock columns
//! excepted. Exit codes: 0 on success, 1 when a verification or run fails,
//! 2 on usage errors.

use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use scanprop::analysis::{
    self, ChainSpec, FlopReport, Layer, ScanKind, SweepPoint,
};
use scanprop::datagen::{self, Dataset};
use scanprop::jacobians::{
    conv3x3_forward, conv3x3_tjac, gru_tjac, maxpool_forward, maxpool_tjac, numeric_tjac,
    relu_tjac, rnn_tjac, ConvSpec,
};
use scanprop::scan::{
    blelloch_scan_traced, hybrid_scan_traced, linear_scan_traced, ScanArray, ScanElement,
    ScanTrace,
};
use scanprop::training::{self, GruParams, RnnParams, TrainConfig};

#[derive(Parser)]
#[command(name = "scanprop", version, about = "Gradient scans over sparse transposed Jacobians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset and write it in the BPDS format.
    GenData(GenDataArgs),
    /// Train a recurrent model and write per-iteration metrics.
    Train(Box<TrainArgs>),
    /// Check the analytical Jacobian builders against a numeric oracle.
    VerifyJacobians(VerifyArgs),
    /// Time the scan executors on random dense chains.
    BenchScan(BenchArgs),
    /// Predict per-step FLOP of a scan over a layer chain.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset kind.
    #[arg(long, value_parser = ["bits", "features"], default_value = "bits")]
    kind: String,
    /// Timesteps per bitstream sample.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    t: u64,
    /// Number of samples.
    #[arg(long, default_value_t = 32000, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Frames per feature sample.
    #[arg(long, default_value_t = 1034, value_parser = clap::value_parser!(u64).range(1..))]
    f: u64,
    /// Coefficients per frame.
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    c: u64,
    /// Label classes for feature datasets.
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u64).range(1..=256))]
    classes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Optional `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scan executor: linear, blelloch, or hybrid:U,D.
    #[arg(long)]
    method: Option<String>,
    /// Truncate sequences to this many steps.
    #[arg(long)]
    t: Option<usize>,
    /// Batch size.
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate; the model picks its default when omitted.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_size: Option<usize>,
    /// Numeric precision: f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Worker threads; defaults to SCANPROP_THREADS, then 1.
    #[arg(long)]
    workers: Option<usize>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// BPDS dataset path; omitted, a dataset is synthesized in memory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Model to train; must agree with the dataset kind.
    #[arg(long, value_parser = ["rnn", "gru"])]
    model: Option<String>,
    /// Kind of the synthesized dataset when --dataset is absent.
    #[arg(long, value_parser = ["bits", "features"])]
    dataset_kind: Option<String>,
    /// Samples of the synthesized dataset.
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Frames per sample of a synthesized feature dataset.
    #[arg(long, default_value_t = 1034, value_parser = clap::value_parser!(u64).range(1..))]
    f: u64,
    /// Coefficients per frame of a synthesized feature dataset.
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    c: u64,
    /// Classes of a synthesized feature dataset.
    #[arg(long, default_value_t = 11, value_parser = clap::value_parser!(u64).range(1..=256))]
    classes: u64,
    /// Metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Specs to check: conv:CIxCOxHxW, relu:CxHxW, maxpool:CxHxW:FHxFW,
    /// rnn:H, gru:H. Repeatable; added to the built-in matrix.
    #[arg(long = "spec")]
    specs: Vec<String>,
    /// Run only the --spec entries, skipping the built-in matrix.
    #[arg(long)]
    only: bool,
    /// Max abs tolerance against the numeric oracle.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Specs with more input elements than this check structure only; the
    /// dense oracle is quadratic in the layer size.
    #[arg(long, default_value_t = 512)]
    oracle_limit: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Chain lengths n (the scan array holds n+1 elements). Repeatable.
    #[arg(long = "n", default_values_t = vec![256usize, 1024, 4096])]
    n: Vec<usize>,
    /// Square dimension of the chain's dense matrices.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    /// Worker threads; defaults to SCANPROP_THREADS, then 1.
    #[arg(long)]
    workers: Option<usize>,
    /// Executors to time: linear, blelloch, hybrid:U,D. Repeatable.
    #[arg(long = "executor", default_values_t = vec!["linear".to_string(), "blelloch".to_string()])]
    executors: Vec<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Built-in chain preset.
    #[arg(long, value_parser = ["vgg11-conv"], conflicts_with = "chain")]
    preset: Option<String>,
    /// Chain description file: one layer per line (conv3x3, relu, maxpool,
    /// dense), `seed N` directive optional, `#` comments.
    #[arg(long)]
    chain: Option<PathBuf>,
    /// Prune convolution kernels to a kept-weight density, e.g.
    /// density=0.03.
    #[arg(long)]
    prune: Option<String>,
    /// Scan executor to predict: linear, blelloch, or hybrid:U,D.
    #[arg(long, default_value = "hybrid:1,2")]
    method: String,
    /// Sweep hybrid level configurations and report the cheapest.
    #[arg(long)]
    sweep_levels: bool,
    /// Sweep every valid configuration instead of the default family.
    #[arg(long, requires = "sweep_levels")]
    exhaustive: bool,
    /// Pruning-mask seed for chains read from files; a file's `seed`
    /// directive takes precedence.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures after flag parsing: usage errors exit 2, run failures exit 1.
enum CliError {
    Usage(String),
    Run(String),
}

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure<E: Display>(e: E) -> CliError {
    CliError::Run(e.to_string())
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(*args),
        Command::VerifyJacobians(args) => cmd_verify_jacobians(args),
        Command::BenchScan(args) => cmd_bench_scan(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

/// Reads SCANPROP_THREADS; an unset variable is simply absent, a garbled
/// one is a usage error.
fn env_workers() -> Result<Option<usize>, CliError> {
    match std::env::var("SCANPROP_THREADS") {
        Err(_) => Ok(None),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(w) if w >= 1 => Ok(Some(w)),
            _ => Err(CliError::Usage(format!("SCANPROP_THREADS={raw:?} is not a worker count"))),
        },
    }
}

fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(w) = flag {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        return Ok(Some(w));
    }
    env_workers()
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs) -> CliResult {
    let (dataset, summary) = match args.kind.as_str() {
        "bits" => {
            let ds = datagen::gen_bitstreams(args.t as usize, args.n as usize, args.seed)
                .map_err(failure)?;
            let summary = format!("kind=bits n={} t={} seed={}", args.n, args.t, args.seed);
            (Dataset::Bits(ds), summary)
        }
        _ => {
            let ds = datagen::gen_feature_sequences(
                args.f as usize,
                args.c as usize,
                args.n as usize,
                args.classes as usize,
                args.seed,
            )
            .map_err(failure)?;
            let summary = format!(
                "kind=features n={} f={} c={} classes={} seed={}",
                args.n, args.f, args.c, args.classes, args.seed
            );
            (Dataset::Features(ds), summary)
        }
    };
    let mut file = std::io::BufWriter::new(fs::File::create(&args.out).map_err(failure)?);
    datagen::write_dataset(&mut file, &dataset).map_err(failure)?;
    file.flush().map_err(failure)?;
    println!("wrote {}: {summary}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(failure)?;
            training::parse_config(&text).map_err(usage)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.method.clone() {
        config.method = v;
    }
    if args.t.is_some() {
        config.t = args.t;
    }
    if let Some(v) = args.b {
        config.b = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if args.lr.is_some() {
        config.lr = args.lr;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.hidden_size {
        config.hidden_size = v;
    }
    if let Some(v) = args.precision.clone() {
        config.precision = v;
    }
    if let Some(v) = args.optimizer.clone() {
        config.optimizer = v;
    }
    if let Some(w) = resolve_workers(args.workers)? {
        config.workers = w;
    }
    if config.b == 0 {
        return Err(CliError::Usage("--b must be at least 1".into()));
    }

    let dataset = load_or_synthesize_dataset(&args, &mut config)?;
    let kind = match &dataset {
        Dataset::Bits(_) => "bits",
        Dataset::Features(_) => "features",
    };
    if let Some(model) = &args.model {
        let expected = if model == "rnn" { "bits" } else { "features" };
        if kind != expected {
            return Err(CliError::Usage(format!(
                "--model {model} trains on {expected} datasets, got {kind}"
            )));
        }
    }

    let rows = training::train_on(&config, &dataset).map_err(failure)?;
    let mut file = std::io::BufWriter::new(fs::File::create(&args.metrics).map_err(failure)?);
    training::write_metrics_csv(&mut file, &rows).map_err(failure)?;
    file.flush().map_err(failure)?;

    let final_loss = rows.last().map_or(f64::NAN, |r| r.loss);
    let total_ms: f64 = rows.iter().map(|r| r.wall_ms).sum();
    let mean_epoch_ms =
        if config.epochs == 0 { 0.0 } else { total_ms / config.epochs as f64 };
    println!(
        "method={} final_loss={final_loss:.6} mean_epoch_ms={mean_epoch_ms:.3} metrics={}",
        config.method,
        args.metrics.display()
    );
    Ok(())
}

fn load_or_synthesize_dataset(args: &TrainArgs, config: &mut TrainConfig) -> Result<Dataset, CliError> {
    if let Some(path) = &args.dataset {
        let mut file = std::io::BufReader::new(fs::File::open(path).map_err(failure)?);
        return datagen::read_dataset(&mut file).map_err(failure);
    }
    let kind = match (args.dataset_kind.as_deref(), args.model.as_deref()) {
        (Some(k), _) => k,
        (None, Some("gru")) => "features",
        _ => "bits",
    };
    let seed = config.seed;
    match kind {
        "bits" => {
            let t = config.t.unwrap_or(100);
            let ds =
                datagen::gen_bitstreams(t, args.n as usize, seed).map_err(failure)?;
            Ok(Dataset::Bits(ds))
        }
        _ => {
            let ds = datagen::gen_feature_sequences(
                args.f as usize,
                args.c as usize,
                args.n as usize,
                args.classes as usize,
                seed,
            )
            .map_err(failure)?;
            Ok(Dataset::Features(ds))
        }
    }
}

// ---------------------------------------------------------------------------
// verify-jacobians
// ---------------------------------------------------------------------------

/// One builder check: analytic construction, structure report, and a dense
/// finite-difference comparison when the layer is small enough.
struct VerifyRow {
    spec: String,
    nnz: usize,
    sparsity: f64,
    max_err: Option<f64>,
    speedup: Option<f64>,
    failure: Option<String>,
}

fn cmd_verify_jacobians(args: VerifyArgs) -> CliResult {
    let builtin = [
        "conv:2x3x4x5",
        "conv:1x1x3x3",
        "conv:3x64x32x32",
        "relu:3x4x5",
        "relu:64x32x32",
        "maxpool:2x4x6:2x2",
        "maxpool:64x32x32:2x2",
        "rnn:8",
        "gru:6",
    ];
    let mut specs: Vec<String> =
        if args.only { Vec::new() } else { builtin.iter().map(|s| s.to_string()).collect() };
    specs.extend(args.specs.iter().cloned());
    if specs.is_empty() {
        return Err(CliError::Usage("no specs to verify".into()));
    }
    let mut failures = Vec::new();
    for spec in &specs {
        let row = verify_one(spec, args.tol, args.oracle_limit).map_err(usage)?;
        let status = match &row.failure {
            None => "ok".to_string(),
            Some(why) => format!("FAIL ({why})"),
        };
        let err = row.max_err.map_or("-".into(), |e| format!("{e:.2e}"));
        let speedup = row.speedup.map_or("-".into(), |s| format!("{s:.0}x"));
        println!(
            "{:<22} nnz={:<9} sparsity={:.5} max_err={err:<9} build_speedup={speedup:<7} {status}",
            row.spec, row.nnz, row.sparsity
        );
        if row.failure.is_some() {
            failures.push(row.spec.clone());
        }
    }
    if failures.is_empty() {
        println!("all {} specs ok", specs.len());
        Ok(())
    } else {
        Err(CliError::Run(format!("{} spec(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

fn parse_dims(text: &str, sep: char) -> Result<Vec<usize>, String> {
    text.split(sep)
        .map(|p| p.parse::<usize>().map_err(|_| format!("bad dimension {p:?}")))
        .collect()
}

/// Compares an analytic transposed Jacobian against the central-difference
/// oracle of `f`, timing both constructions.
fn oracle_check<F>(
    analytic: &Array2<f64>,
    f: F,
    x: &[f64],
    build_time: f64,
) -> (Option<f64>, Option<f64>)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let start = Instant::now();
    let numeric = numeric_tjac(f, x, 1e-5);
    let oracle_time = start.elapsed().as_secs_f64();
    let max_err = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let speedup = if build_time > 0.0 { Some(oracle_time / build_time) } else { None };
    (Some(max_err), speedup)
}

fn verify_one(spec: &str, tol: f64, oracle_limit: usize) -> Result<VerifyRow, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (kind, rest) =
        spec.split_once(':').ok_or_else(|| format!("spec {spec:?} lacks a ':'"))?;
    let mut row = VerifyRow {
        spec: spec.to_string(),
        nnz: 0,
        sparsity: 0.0,
        max_err: None,
        speedup: None,
        failure: None,
    };
    match kind {
        "conv" => {
            let d = parse_dims(rest, 'x')?;
            let [ci, co, h, w] = d[..] else {
                return Err(format!("conv spec {spec:?} needs CIxCOxHxW"));
            };
            let weights = Array4::from_shape_fn((co, ci, 3, 3), |_| rng.random_range(-1.0..1.0));
            let conv = ConvSpec::new(ci, co, h, w, weights).map_err(|e| e.to_string())?;
            let start = Instant::now();
            let tjac = conv3x3_tjac(&conv);
            let build_time = start.elapsed().as_secs_f64();
            row.nnz = tjac.nnz();
            row.sparsity = tjac.pattern().guaranteed_zero_fraction();
            if row.nnz != conv.tjac_nnz() {
                row.failure = Some(format!("nnz {} != allocation formula {}", row.nnz, conv.tjac_nnz()));
            }
            if conv.input_len() <= oracle_limit {
                let x: Vec<f64> = (0..conv.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (err, speedup) =
                    oracle_check(&tjac.to_dense(), |v| conv3x3_forward(&conv, v), &x, build_time);
                row.max_err = err;
                row.speedup = speedup;
            }
        }
        "relu" => {
            let d = parse_dims(rest, 'x')?;
            let [c, h, w] = d[..] else {
                return Err(format!("relu spec {spec:?} needs CxHxW"));
            };
            let dim = c * h * w;
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let start = Instant::now();
            let tjac = relu_tjac(&x);
            let build_time = start.elapsed().as_secs_f64();
            row.nnz = tjac.nnz();
            row.sparsity = tjac.pattern().guaranteed_zero_fraction();
            if dim <= oracle_limit {
                let (err, speedup) = oracle_check(
                    &tjac.to_dense(),
                    |v| scanprop::jacobians::relu_forward(v),
                    &x,
                    build_time,
                );
                row.max_err = err;
                row.speedup = speedup;
            }
        }
        "maxpool" => {
            let (dims, win) =
                rest.split_once(':').ok_or_else(|| format!("maxpool spec {spec:?} needs :FHxFW"))?;
            let d = parse_dims(dims, 'x')?;
            let f = parse_dims(win, 'x')?;
            let ([c, h, w], [fh, fw]) = (&d[..], &f[..]) else {
                return Err(format!("maxpool spec {spec:?} needs CxHxW:FHxFW"));
            };
            let (c, h, w, fh, fw) = (*c, *h, *w, *fh, *fw);
            let x: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, pool) = maxpool_forward(&x, c, h, w, fh, fw).map_err(|e| e.to_string())?;
            let start = Instant::now();
            let tjac = maxpool_tjac::<f64>(&pool).map_err(|e| e.to_string())?;
            let build_time = start.elapsed().as_secs_f64();
            row.nnz = tjac.nnz();
            row.sparsity = tjac.pattern().guaranteed_zero_fraction();
            if c * h * w <= oracle_limit {
                let (err, speedup) = oracle_check(
                    &tjac.to_dense(),
                    |v| maxpool_forward(v, c, h, w, fh, fw).expect("shape is fixed").0,
                    &x,
                    build_time,
                );
                row.max_err = err;
                row.speedup = speedup;
            }
        }
        "rnn" => {
            let hidden: usize = rest.parse().map_err(|_| format!("bad hidden size {rest:?}"))?;
            let params = RnnParams::<f64>::new(hidden, 1, 10, 99);
            let h0 = Array1::from_shape_fn(hidden, |_| rng.random_range(-0.9..0.9));
            let start = Instant::now();
            let tape = training::rnn_forward(&params, &[1], h0.clone());
            let tjac = rnn_tjac(&tape, 1, params.w_hh.view()).map_err(|e| e.to_string())?;
            let build_time = start.elapsed().as_secs_f64();
            row.nnz = tjac.iter().filter(|v| **v != 0.0).count();
            row.sparsity = 1.0 - row.nnz as f64 / (hidden * hidden) as f64;
            let (err, speedup) = oracle_check(
                &tjac,
                |v| {
                    let tape = training::rnn_forward(&params, &[1], Array1::from(v.to_vec()));
                    tape.hidden(1).to_vec()
                },
                h0.as_slice().expect("h0 is contiguous"),
                build_time,
            );
            row.max_err = err;
            row.speedup = speedup;
        }
        "gru" => {
            let hidden: usize = rest.parse().map_err(|_| format!("bad hidden size {rest:?}"))?;
            let coeffs = 3usize;
            let params = GruParams::<f64>::new(hidden, coeffs, 5, 99);
            let frames: Vec<f64> = (0..coeffs).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h0 = Array1::from_shape_fn(hidden, |_| rng.random_range(-0.9..0.9));
            let start = Instant::now();
            let tape = training::gru_forward(&params, &frames, coeffs, h0.clone());
            let tjac = gru_tjac(
                &tape,
                1,
                params.w_hr.view(),
                params.w_hz.view(),
                params.w_hn.view(),
            )
            .map_err(|e| e.to_string())?;
            let build_time = start.elapsed().as_secs_f64();
            row.nnz = tjac.iter().filter(|v| **v != 0.0).count();
            row.sparsity = 1.0 - row.nnz as f64 / (hidden * hidden) as f64;
            let (err, speedup) = oracle_check(
                &tjac,
                |v| {
                    let tape =
                        training::gru_forward(&params, &frames, coeffs, Array1::from(v.to_vec()));
                    tape.hidden(1).to_vec()
                },
                h0.as_slice().expect("h0 is contiguous"),
                build_time,
            );
            row.max_err = err;
            row.speedup = speedup;
        }
        other => return Err(format!("unknown spec kind {other:?}")),
    }
    if row.failure.is_none() {
        if let Some(err) = row.max_err {
            if !(err <= tol) {
                row.failure = Some(format!("max_err {err:.2e} > tol {tol:.0e}"));
            }
        }
    }
    Ok(row)
}

// ---------------------------------------------------------------------------
// bench-scan
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum BenchExecutor {
    Linear,
    Blelloch,
    Hybrid(usize, usize),
}

fn parse_executor(text: &str) -> Result<BenchExecutor, CliError> {
    match text {
        "linear" => Ok(BenchExecutor::Linear),
        "blelloch" => Ok(BenchExecutor::Blelloch),
        other => {
            let levels = other
                .strip_prefix("hybrid:")
                .and_then(|rest| rest.split_once(','))
                .and_then(|(u, d)| Some((u.trim().parse().ok()?, d.trim().parse().ok()?)));
            match levels {
                Some((u, d)) => Ok(BenchExecutor::Hybrid(u, d)),
                None => Err(CliError::Usage(format!(
                    "unknown executor {other:?}; expected linear, blelloch, or hybrid:U,D"
                ))),
            }
        }
    }
}

fn bench_chain(n: usize, dim: usize, seed: u64) -> ScanArray<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0f32..1.0));
    let mut elems = vec![ScanElement::vector(head)];
    for _ in 0..n {
        let m = Array2::from_shape_fn((dim, dim), |_| rng.random_range(-1.0f32..1.0));
        elems.push(ScanElement::dense(m));
    }
    ScanArray::new(elems).expect("bench chain is well formed")
}

fn cmd_bench_scan(args: BenchArgs) -> CliResult {
    let workers = resolve_workers(args.workers)?.unwrap_or(1);
    let executors: Vec<(String, BenchExecutor)> = args
        .executors
        .iter()
        .map(|name| parse_executor(name).map(|e| (name.clone(), e)))
        .collect::<Result<_, _>>()?;
    let mut csv = String::from("n,dim,workers,executor,wall_ms,levels,diamond_ops\n");
    for &n in &args.n {
        if n == 0 {
            return Err(CliError::Usage("--n must be at least 1".into()));
        }
        let arr = bench_chain(n, args.dim as usize, args.seed);
        for (name, exec) in &executors {
            let start = Instant::now();
            let trace: ScanTrace = match exec {
                BenchExecutor::Linear => linear_scan_traced(&arr).map_err(failure)?.1,
                BenchExecutor::Blelloch => {
                    blelloch_scan_traced(&arr, workers).map_err(failure)?.1
                }
                BenchExecutor::Hybrid(u, d) => {
                    hybrid_scan_traced(&arr, *u, *d, workers).map_err(failure)?.1
                }
            };
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            // Hybrid labels carry a comma, so the field is quoted.
            let field =
                if name.contains(',') { format!("\"{name}\"") } else { name.clone() };
            csv.push_str(&format!(
                "{n},{},{workers},{field},{wall_ms:.3},{},{}\n",
                args.dim,
                trace.barrier_levels(),
                trace.diamond_ops()
            ));
        }
    }
    write_text_out(args.out.as_deref(), &csv)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn parse_density(text: &str) -> Result<f64, CliError> {
    let value = text
        .strip_prefix("density=")
        .ok_or_else(|| CliError::Usage(format!("--prune expects density=VALUE, got {text:?}")))?;
    match value.parse::<f64>() {
        Ok(d) if d > 0.0 && d <= 1.0 => Ok(d),
        _ => Err(CliError::Usage(format!("density {value:?} must lie in (0, 1]"))),
    }
}

fn parse_scan_kind(text: &str) -> Result<ScanKind, CliError> {
    match parse_executor(text)? {
        BenchExecutor::Linear => Ok(ScanKind::Linear),
        BenchExecutor::Blelloch => Ok(ScanKind::Blelloch),
        BenchExecutor::Hybrid(u, d) => Ok(ScanKind::Hybrid { up_levels: u, down_levels: d }),
    }
}

/// Parses a chain file: whitespace-separated layer lines, `#` comments,
/// and an optional `seed N` directive.
fn parse_chain_file(
    text: &str,
    mut seed: u64,
    density_override: Option<f64>,
) -> Result<ChainSpec, CliError> {
    let mut layers = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| {
            CliError::Usage(format!("chain line {}: {what}", lineno + 1))
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let dims = |want: usize| -> Result<Vec<usize>, CliError> {
            if fields.len() - 1 < want {
                return Err(bad(&format!("{} takes {} fields", fields[0], want)));
            }
            fields[1..=want]
                .iter()
                .map(|f| f.parse::<usize>().map_err(|_| bad(&format!("bad value {f:?}"))))
                .collect()
        };
        match fields[0] {
            "seed" => {
                seed = fields
                    .get(1)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| bad("seed takes one integer"))?;
            }
            "conv3x3" => {
                let d = dims(4)?;
                let density = match fields.get(5) {
                    None => density_override,
                    Some(f) => Some(
                        f.parse::<f64>().map_err(|_| bad(&format!("bad density {f:?}")))?,
                    ),
                };
                layers.push(Layer::Conv3x3 {
                    in_channels: d[0],
                    out_channels: d[1],
                    height: d[2],
                    width: d[3],
                    density,
                });
            }
            "relu" => {
                let d = dims(1)?;
                layers.push(Layer::Relu { dim: d[0] });
            }
            "maxpool" => {
                let d = dims(5)?;
                layers.push(Layer::Maxpool {
                    channels: d[0],
                    in_h: d[1],
                    in_w: d[2],
                    win_h: d[3],
                    win_w: d[4],
                });
            }
            "dense" => {
                let d = dims(2)?;
                layers.push(Layer::Dense { in_dim: d[0], out_dim: d[1] });
            }
            other => return Err(bad(&format!("unknown layer kind {other:?}"))),
        }
    }
    ChainSpec::new(layers, seed).map_err(usage)
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult {
    let density = args.prune.as_deref().map(parse_density).transpose()?;
    let chain = match (&args.preset, &args.chain) {
        (Some(_), _) => analysis::vgg11_conv_preset(density),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(failure)?;
            parse_chain_file(&text, args.seed, density)?
        }
        (None, None) => {
            return Err(CliError::Usage("one of --preset or --chain is required".into()))
        }
    };
    let kind = parse_scan_kind(&args.method)?;
    let report: FlopReport = analysis::flops_of_chain(&chain, kind).map_err(failure)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(failure)?;
    write_text_out(args.out.as_deref(), &String::from_utf8(csv).expect("CSV is UTF-8"))?;
    eprintln!(
        "chain: {} layers, max scan step {} flop, max baseline step {} flop",
        chain.len(),
        report.max_scan_flop(),
        report.max_baseline_flop()
    );
    if args.sweep_levels {
        let points: Vec<SweepPoint> =
            analysis::sweep_levels(&chain, args.exhaustive).map_err(failure)?;
        for p in &points {
            eprintln!(
                "sweep: up={} down={} critical_flop={}",
                p.up_levels, p.down_levels, p.critical_flop
            );
        }
        let best = points.first().expect("sweep evaluates at least one config");
        println!(
            "best levels: up={} down={} critical_flop={}",
            best.up_levels, best.down_levels, best.critical_flop
        );
    }
    Ok(())
}

fn write_text_out(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text).map_err(failure),
        None => {
            print!("{text}");
            std::io::stdout().flush().map_err(failure)
        }
    }
}
