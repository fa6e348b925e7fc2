//! `dvk-forge`: dataset generation, U-Net training and evaluation, dose convolution and
//! diagnostics from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dvk_core::dosimetry::{convolve3d, generate_dataset, ConvMethod, Dataset, GenerateConfig, Split, TissueClass};
use dvk_core::gradcheck::run_suite;
use dvk_core::pca::{pca_fit, sample_matrix, scree_export, scree_rows};
use dvk_core::tensor::{read_tensor, read_tensor_from, write_tensor, DVKT_MAGIC};
use dvk_core::unet::eval::predict_all;
use dvk_core::unet::{
    count_params, epoch_csv, evaluate, load_checkpoint, save_checkpoint, train_dataset, TrainConfig, DVKC_MAGIC,
};
use dvk_core::{Error, Tensor};

const THREADS_ENV: &str = "DVK_FORGE_THREADS";
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "dvk-forge", version, about = "Dose-voxel-kernel toolkit")]
struct Cli {
    /// Worker threads (default 1, or $DVK_FORGE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic density/dose dataset.
    Generate(GenerateArgs),
    /// Train the U-Net on a generated dataset.
    Train(TrainArgs),
    /// Per-tissue IoU/MAE/MSE report for a checkpoint.
    Eval(EvalArgs),
    /// Predict dose kernels for density kernels.
    Predict(PredictArgs),
    /// Convolve a decay map with a dose-voxel kernel.
    DoseConvolve(ConvolveArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// PCA of the density kernels of a dataset, written as a scree CSV.
    PcaScree(ScreeArgs),
    /// Direct vs FFT convolution timing table.
    Bench(BenchArgs),
    /// Print the header of a DVKT tensor or DVKC checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated tissue classes.
    #[arg(long, value_delimiter = ',', default_value = "bone,lung,kidney,liver,spleen")]
    classes: Vec<String>,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.15)]
    density_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    inclusion_prob: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config epoch limit.
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Density kernel `[9,9,9]` or batch `[n,9,9,9]` in g/cm³.
    #[arg(long)]
    density: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat input and output as normalized values.
    #[arg(long)]
    normalized: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Direct,
    Fft,
}

impl From<MethodArg> for ConvMethod {
    fn from(m: MethodArg) -> ConvMethod {
        match m {
            MethodArg::Direct => ConvMethod::Direct,
            MethodArg::Fft => ConvMethod::Fft,
        }
    }
}

#[derive(Args, Debug)]
struct ConvolveArgs {
    #[arg(long)]
    decays: PathBuf,
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long, value_enum, default_value = "direct")]
    method: MethodArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ScreeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one split; all samples by default.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Decay-map edge lengths.
    #[arg(long, value_delimiter = ',', default_value = "16,32,48")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    kernel: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    file: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    /// A numerical check that ran but did not meet its tolerance.
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::NonFinite(_)) | CliError::Numeric(_) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

#[cfg(feature = "parallel")]
fn init_threads(n: usize) -> CliResult {
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads(n: usize) -> CliResult {
    if n > 1 {
        eprintln!("note: built without the parallel feature, running on one thread");
    }
    Ok(())
}

fn require_file(p: &Path) -> CliResult {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no such file: {}", p.display()))).into())
    }
}

fn require_dir(p: &Path) -> CliResult {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no such directory: {}", p.display()))).into())
    }
}

fn parent_dir(p: &Path) -> CliResult {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => Ok(fs::create_dir_all(d)?),
        _ => Ok(()),
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let classes = a
        .classes
        .iter()
        .map(|c| c.parse::<TissueClass>().map_err(|e| CliError::Usage(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = GenerateConfig {
        per_class: a.per_class,
        classes,
        seed: a.seed,
        train_fraction: a.train_fraction,
        density_noise: a.density_noise,
        inclusion_prob: a.inclusion_prob,
        ..GenerateConfig::default()
    };
    let data = generate_dataset(&cfg)?;
    data.write(&a.out)?;
    println!(
        "wrote {} pairs ({} train, {} val) to {}",
        data.samples.len(),
        data.split(Split::Train).count(),
        data.split(Split::Val).count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    require_dir(&a.data)?;
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.max_epochs {
        cfg.max_epochs = m;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("train.cfg"), cfg.to_kv())?;

    let (net, out) = train_dataset(&data, &cfg)?;
    save_checkpoint(&a.out.join("best.dvkc"), &out.best)?;
    fs::write(a.out.join("epochs.csv"), epoch_csv(&out.records))?;
    let report = count_params(&net);
    println!(
        "trained {} epochs ({} trainable, {} non-trainable parameters)",
        out.records.len() - 1,
        report.trainable,
        report.non_trainable
    );
    if let Some(e) = out.lr_reduced_at {
        println!("learning rate reduced after epoch {e}");
    }
    if out.stopped_early {
        println!("stopped early");
    }
    println!("best epoch {} with validation loss {:.6}", out.best_epoch, out.best_val_loss);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    require_file(&a.checkpoint)?;
    require_dir(&a.data)?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("batch size must be at least 1".into()));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut net = ck.restore()?;
    let data = Dataset::load(&a.data)?;
    let pairs = data.pairs(a.split.into());
    if pairs.is_empty() {
        return Err(Error::Degenerate("the selected split is empty".into()).into());
    }
    let report = evaluate(&mut net, &pairs, a.batch_size)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    require_file(&a.checkpoint)?;
    require_file(&a.density)?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("batch size must be at least 1".into()));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (density_norm, dose_norm) = ck.norms()?;
    let input = read_tensor(&a.density)?;
    let single = input.rank() == 3;
    let batch = if single {
        let mut s = vec![1];
        s.extend_from_slice(input.shape());
        input.reshape(s)?
    } else {
        input.clone()
    };
    if batch.shape()[1..] != [9, 9, 9] {
        return Err(Error::Shape(format!("expected [9,9,9] or [n,9,9,9] densities, got {:?}", input.shape())).into());
    }
    let x = match (&density_norm, a.normalized) {
        (Some(p), false) => p.apply(&batch),
        _ => batch,
    };
    let mut net = ck.restore()?;
    let items: Vec<Tensor> = (0..x.shape()[0]).map(|i| x.outer(i)).collect();
    let refs: Vec<&Tensor> = items.iter().collect();
    let preds = predict_all(&mut net, &refs, a.batch_size)?;
    let mut y = Tensor::stack(&preds)?;
    if let (Some(p), false) = (&dose_norm, a.normalized) {
        y = p.invert(&y);
    }
    let y = y.reshape(input.shape().to_vec())?;
    y.ensure_finite("prediction")?;
    parent_dir(&a.out)?;
    write_tensor(&a.out, &y)?;
    println!("wrote {:?} to {}", y.shape(), a.out.display());
    Ok(())
}

fn cmd_convolve(a: ConvolveArgs) -> CliResult {
    require_file(&a.decays)?;
    require_file(&a.kernel)?;
    let decays = read_tensor(&a.decays)?;
    let kernel = read_tensor(&a.kernel)?;
    decays.ensure_finite("decay map")?;
    kernel.ensure_finite("kernel")?;
    let dose = convolve3d(&decays, &kernel, a.method.into())?;
    parent_dir(&a.out)?;
    write_tensor(&a.out, &dose)?;
    println!("wrote {:?} dose map (total {:.6e}) to {}", dose.shape(), dose.sum(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    if a.instances == 0 {
        return Err(CliError::Usage("need at least one instance".into()));
    }
    let results = run_suite(a.instances, a.seed)?;
    println!("{:<20} {:>9} {:>14}", "check", "instances", "max rel error");
    let mut bad = Vec::new();
    for r in &results {
        let flag = if r.max_rel_error <= GRADCHECK_TOL { "" } else { "  FAIL" };
        println!("{:<20} {:>9} {:>14.3e}{flag}", r.name, r.instances, r.max_rel_error);
        if r.max_rel_error > GRADCHECK_TOL {
            bad.push(r.name.clone());
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient checks above {GRADCHECK_TOL:e}: {}", bad.join(", "))))
    }
}

fn cmd_scree(a: ScreeArgs) -> CliResult {
    require_dir(&a.data)?;
    let data = Dataset::load(&a.data)?;
    let kernels: Vec<Tensor> = data
        .samples
        .iter()
        .filter(|s| a.split.is_none_or(|sp| s.split == Split::from(sp)))
        .map(|s| s.density.clone())
        .collect();
    let x = sample_matrix(&kernels)?;
    let fit = pca_fit(&x)?;
    parent_dir(&a.out)?;
    scree_export(&fit, &a.out)?;
    let rows = scree_rows(&fit);
    println!("{} samples, {} components", kernels.len(), fit.dim());
    for r in rows.iter().take(5) {
        println!("  pc {:>3}: {:.4} of variance (cumulative {:.4})", r.component, r.fraction, r.cumulative);
    }
    for target in [0.9, 0.99] {
        if let Some(r) = rows.iter().find(|r| r.cumulative >= target) {
            println!("  {} components reach {target}", r.component);
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    use rand::{Rng, SeedableRng};
    if a.repeats == 0 || a.sizes.is_empty() {
        return Err(CliError::Usage("need at least one size and one repeat".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let k = a.kernel;
    let kernel = Tensor::from_fn(vec![k, k, k], |_| rng.random_range(0.0..1.0));
    let mut table = format!("{:>6} {:>12} {:>12} {:>8} {:>12}\n", "n", "direct ms", "fft ms", "speedup", "max rel diff");
    for &n in &a.sizes {
        let decays = Tensor::from_fn(vec![n, n, n], |_| rng.random_range(0.0..100.0));
        let time = |m: ConvMethod| -> CliResult<(f64, Tensor)> {
            let mut best = f64::INFINITY;
            let mut out = None;
            for _ in 0..a.repeats {
                let t = Instant::now();
                out = Some(convolve3d(&decays, &kernel, m)?);
                best = best.min(t.elapsed().as_secs_f64() * 1e3);
            }
            Ok((best, out.expect("at least one repeat")))
        };
        let (td, d) = time(ConvMethod::Direct)?;
        let (tf, f) = time(ConvMethod::Fft)?;
        let scale = d.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let diff = d.data().iter().zip(f.data()).fold(0.0f64, |m, (u, v)| m.max((u - v).abs() / scale));
        let _ = writeln!(table, "{n:>6} {td:>12.3} {tf:>12.3} {:>8.2} {diff:>12.2e}", td / tf);
    }
    print!("{table}");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    require_file(&a.file)?;
    let mut magic = [0u8; 4];
    fs::File::open(&a.file)?.read_exact(&mut magic)?;
    if magic == DVKT_MAGIC {
        let t = read_tensor_from(fs::File::open(&a.file)?)?;
        println!("DVKT tensor");
        println!("shape: {:?}", t.shape());
        println!("elements: {}", t.len());
        if !t.is_empty() {
            println!("min: {:e}\nmax: {:e}\nsum: {:e}", t.min(), t.max(), t.sum());
        }
    } else if magic == DVKC_MAGIC {
        let ck = load_checkpoint(&a.file)?;
        println!("DVKC checkpoint");
        let header = serde_json::to_string_pretty(&ck.header).map_err(|e| Error::Format(e.to_string()))?;
        println!("{header}");
        println!("blocks: {}", ck.tensors.len());
        for (name, t) in &ck.tensors {
            println!("  {name:<32} {:?}", t.shape());
        }
    } else {
        return Err(Error::Format(format!("{}: neither a DVKT tensor nor a DVKC checkpoint", a.file.display())).into());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    init_threads(resolve_threads(cli.threads)?)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::DoseConvolve(a) => cmd_convolve(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::PcaScree(a) => cmd_scree(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parses `argv` and runs one subcommand, returning the process exit code.
fn run(argv: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
