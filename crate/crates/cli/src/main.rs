mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gmmreg_core::corrnet::{checkpoint, prepare_pairs, train, LossKind};
use gmmreg_core::datagen::{
    build_dataset, make_pair, read_dataset, sample_shape, write_dataset, Family, Protocol, RegistrationPair, ShapeSpec,
    DATASET_FORMAT_VERSION,
};
use gmmreg_core::evalbench::{
    bench_csv, bench_runtime, cdf_csv, evaluate, evaluate_with, per_pair_csv, write_csv, EvalResult, Method, Registrar,
};
use gmmreg_core::features::InputMode;
use gmmreg_core::io;
use gmmreg_core::mt_solver::CentroidWeighting;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{sub_seed, FileConfig, SeedStream};

fn long_version() -> &'static str {
    Box::leak(
        format!(
            "{} (dataset format {DATASET_FORMAT_VERSION}, checkpoint format {})",
            env!("CARGO_PKG_VERSION"),
            checkpoint::CHECKPOINT_VERSION
        )
        .into_boxed_str(),
    )
}

/// Rigid point-cloud registration with Gaussian mixtures.
#[derive(Parser, Debug)]
#[command(name = "gmmreg", version = long_version())]
struct Cli {
    /// TOML file with `seed`, `threads` and `[gen]`, `[train]`, `[eval]`, `[bench]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for data-parallel stages (default 1).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run seed; each stage draws from its own stream derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic registration dataset.
    Gen(GenArgs),
    /// Train the correspondence network on a dataset.
    Train(TrainArgs),
    /// Register one source cloud to one target cloud.
    Register(RegisterArgs),
    /// Score registration methods on a dataset split.
    Eval(EvalArgs),
    /// Time registration against cloud size.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Points per cloud.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    translation_half: Option<f64>,
    #[arg(long)]
    dense_points: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Mse,
    Rmse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightingArg {
    Objective,
    MixtureWeights,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Mixture components `J`.
    #[arg(long)]
    components: Option<usize>,
    /// Neighbours per point for the invariant features.
    #[arg(long, conflicts_with = "raw_xyz")]
    neighbors: Option<usize>,
    /// Feed centred coordinates instead of invariant features.
    #[arg(long)]
    raw_xyz: bool,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    centroid_weighting: Option<WeightingArg>,
    /// Write the per-epoch history as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RefineArg {
    Icp,
}

#[derive(Args, Debug)]
struct MethodArgs {
    /// `deepgmr`, `em` or `icp`.
    #[arg(long, value_parser = parse_method, default_value = "deepgmr")]
    method: Method,
    /// Checkpoint for the learned method.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Local refinement applied to the method's output.
    #[arg(long, value_enum)]
    refine: Option<RefineArg>,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    /// Write the 4×4 transform here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    method: MethodArgs,
    /// Score the ground-truth transforms instead of a method.
    #[arg(long)]
    oracle: bool,
    /// Directory for `per_pair.csv` and `cdf.csv`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    method: MethodArgs,
    /// Comma-separated cloud sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// CSV output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: gmmreg_core::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: gmmreg_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn log_resolved<T: Serialize>(what: &str, value: &T) -> Result<()> {
    log::info!("resolved {what} config: {}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads).unwrap_or(1);
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    log::info!("seed {seed}, {threads} thread(s)");

    match cli.command {
        Command::Gen(a) => gen(a, file, seed),
        Command::Train(a) => train_cmd(a, file, seed),
        Command::Register(a) => register(a, file, seed),
        Command::Eval(a) => eval(a, file, seed),
        Command::Bench(a) => bench(a, file, seed),
    }
}

fn gen(a: GenArgs, file: FileConfig, seed: u64) -> Result<()> {
    let mut cfg = file.gen;
    cfg.seed = sub_seed(seed, SeedStream::Gen);
    if let Some(v) = a.protocol {
        cfg.protocol = v;
    }
    if let Some(v) = a.train {
        cfg.train = v;
    }
    if let Some(v) = a.test {
        cfg.test = v;
    }
    if let Some(v) = a.points {
        cfg.points = v;
    }
    if let Some(v) = a.noise_variance {
        cfg.noise_variance = Some(v);
    }
    if let Some(v) = a.translation_half {
        cfg.translation_half = v;
    }
    if let Some(v) = a.dense_points {
        cfg.dense_points = v;
    }
    log_resolved("gen", &cfg)?;
    let ds = build_dataset(&cfg)?;
    write_dataset(&a.out, &ds).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    log::info!("wrote {} train and {} test pairs to {}", ds.train.len(), ds.test.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, file: FileConfig, seed: u64) -> Result<()> {
    let mut cfg = file.train;
    cfg.seed = sub_seed(seed, SeedStream::Train);
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.components {
        cfg.components = v;
    }
    if a.raw_xyz {
        cfg.input_mode = InputMode::RawXyz;
    } else if let Some(k) = a.neighbors {
        cfg.input_mode = InputMode::InvariantFeatures { k };
    }
    if let Some(l) = a.loss {
        cfg.pipeline.loss = match l {
            LossArg::Mse => LossKind::Mse,
            LossArg::Rmse => LossKind::Rmse,
        };
    }
    if let Some(w) = a.centroid_weighting {
        cfg.pipeline.centroid_weighting = weighting(w);
    }
    cfg.validate()?;
    log_resolved("train", &cfg)?;
    let ds = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let prepared = prepare_pairs(&cfg, ds.train.into_iter().map(|p| (p.source, p.target, p.t_gt)))?;
    let report = train(&prepared, &cfg)?;
    for e in &report.history {
        log::info!(
            "epoch {:>3}: train {:.6} val {:.6} lr {:.2e} skipped {}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr,
            e.skipped
        );
    }
    log::info!("best validation loss at epoch {}", report.best_epoch);
    checkpoint::save(&a.out, &report.params).with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    if let Some(h) = a.history {
        std::fs::write(&h, serde_json::to_string_pretty(&report.history)?)
            .with_context(|| format!("writing history {}", h.display()))?;
    }
    Ok(())
}

fn weighting(w: WeightingArg) -> CentroidWeighting {
    match w {
        WeightingArg::Objective => CentroidWeighting::Objective,
        WeightingArg::MixtureWeights => CentroidWeighting::MixtureWeights,
    }
}

#[derive(Serialize)]
struct RegistrarSettings<'a> {
    method: &'a str,
    model: Option<&'a Path>,
    refine: bool,
    eval: &'a config::EvalConfig,
    em_seed: u64,
}

fn registrar(m: &MethodArgs, file: &FileConfig, seed: u64) -> Result<Registrar> {
    let mut r = Registrar::new(m.method);
    if m.method == Method::Learned {
        let Some(path) = &m.model else { bail!("--method deepgmr needs --model") };
        r.params = Some(checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?);
        r.pipeline = file.train.pipeline;
    }
    r.refine_with_icp = m.refine.is_some();
    r.icp_iters = file.eval.icp_iters;
    r.em_components = file.eval.em_components;
    r.em_iters = file.eval.em_iters;
    r.seed = sub_seed(seed, SeedStream::Em);
    log_resolved(
        "method",
        &RegistrarSettings {
            method: m.method.id(),
            model: m.model.as_deref(),
            refine: r.refine_with_icp,
            eval: &file.eval,
            em_seed: r.seed,
        },
    )?;
    Ok(r)
}

fn register(a: RegisterArgs, file: FileConfig, seed: u64) -> Result<()> {
    let source = io::read_point_cloud(&a.source).with_context(|| format!("reading {}", a.source.display()))?;
    let target = io::read_point_cloud(&a.target).with_context(|| format!("reading {}", a.target.display()))?;
    let r = registrar(&a.method, &file, seed)?;
    let t = r.register(&source, &target)?;
    match a.out {
        Some(p) => io::write_transform(&p, &t).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", io::format_transform(&t)),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    method: &'a str,
    pairs: usize,
    recall: f64,
    mean_rmse: f64,
    failed: usize,
    mean_ms: f64,
}

fn eval(a: EvalArgs, file: FileConfig, seed: u64) -> Result<()> {
    let mut cfg = file.eval.clone();
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    log_resolved("eval", &cfg)?;
    let ds = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let pairs: &[RegistrationPair] = match a.split {
        SplitArg::Train => &ds.train,
        SplitArg::Test => &ds.test,
    };
    let scoring_seed = sub_seed(seed, SeedStream::Eval);
    let res: EvalResult = if a.oracle {
        evaluate_with("oracle", pairs, cfg.samples, cfg.tau, scoring_seed, |p| Ok(p.t_gt))?
    } else {
        let file = FileConfig { eval: cfg.clone(), ..file };
        let r = registrar(&a.method, &file, seed)?;
        evaluate(&r, pairs, cfg.samples, cfg.tau, scoring_seed)?
    };
    let n = res.per_pair.len();
    let summary = EvalSummary {
        method: &res.method,
        pairs: n,
        recall: res.recall,
        mean_rmse: res.mean_rmse,
        failed: res.per_pair.iter().filter(|o| o.failed).count(),
        mean_ms: res.per_pair.iter().map(|o| o.ms).sum::<f64>() / n as f64,
    };
    println!("{}", serde_json::to_string(&summary)?);
    if let Some(dir) = a.out_dir {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_csv(dir.join("per_pair.csv"), &per_pair_csv(std::slice::from_ref(&res)))?;
        write_csv(dir.join("cdf.csv"), &cdf_csv(&res.cdf))?;
    }
    Ok(())
}

fn bench(a: BenchArgs, file: FileConfig, seed: u64) -> Result<()> {
    let mut cfg = file.bench.clone();
    if let Some(v) = a.sizes {
        cfg.sizes = v;
    }
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if cfg.sizes.is_empty() {
        bail!("no cloud sizes given");
    }
    log_resolved("bench", &cfg)?;
    let r = registrar(&a.method, &file, seed)?;
    let pair_seed = sub_seed(seed, SeedStream::Bench);
    let rows = bench_runtime(&r, &cfg.sizes, cfg.repeats, |n| {
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed ^ n as u64);
        let cloud = sample_shape(&ShapeSpec::random(Family::Composite, &mut rng), n)?;
        make_pair(&cloud, 0.0, file.gen.translation_half, Family::Composite, &mut rng)
    })?;
    let csv = bench_csv(&rows);
    match a.out {
        Some(p) => write_csv(&p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}
