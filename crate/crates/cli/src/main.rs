//! `rada` command-line driver.
//!
//! Exit codes: 0 on success, 1 on contract or configuration errors (and on
//! failed self-checks), 2 on I/O errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use rada::adapter::{mask_sample, AdapterConfig, AdapterParams, Variant};
use rada::embedio::{
    load_batch, load_classes, save, synth_gaussian, synth_stream, ClassMatrix, DatasetBundle, RdaFile, SynthConfig,
};
use rada::eval::{evaluate_bundle, predict, Histogram, MaskStats};
use rada::infotheory::{verify_lemma1, verify_lemma23, DiscreteEnsemble, Quantizer, Readout, DEFAULT_BUDGET};
use rada::losses::{EntropyMode, RegNorm};
use rada::rational::{rational_sample, LogitScale, DEFAULT_LOGIT_SCALE};
use rada::selfcheck::{gradcheck_suite, GradcheckCase};
use rada::trainer::{report_text, train_eft, train_fft_lite, write_outputs, FftLiteConfig, RunConfig};
use rada::ttt::{run_stream, KeepRounding, TttConfig};
use rada::{RadaError, Result};

/// Rational-matrix adaptation of vision-language classification heads.
#[derive(Parser, Debug)]
#[command(name = "rada", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic base-to-new bundle (and optionally a test-time stream).
    GenSynth(GenSynthArgs),
    /// Few-shot adaptation of the mask generator with a frozen classifier.
    TrainEft(TrainEftArgs),
    /// Two-stage training: mask generator first, then the classifier.
    TrainFftLite(TrainFftArgs),
    /// Per-sample test-time adaptation over a stream.
    Ttt(TttArgs),
    /// Base/new accuracy of zero-shot or adapted predictions.
    Eval(EvalArgs),
    /// Finite-difference gradient check of every objective and variant.
    Gradcheck(GradcheckArgs),
    /// Information-theoretic checks on random discrete ensembles.
    MiVerify(MiVerifyArgs),
    /// Mask histogram, summary and per-sample matrices.
    MaskStats(MaskStatsArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.35)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `ttt_stream.rda` with this many samples.
    #[arg(long)]
    stream: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    drift: f64,
}

#[derive(Args, Debug)]
struct AdapterArgs {
    #[arg(long, default_value = "multi-query")]
    variant: Variant,
    #[arg(long, default_value_t = 1)]
    layers: usize,
}

#[derive(Args, Debug)]
struct TrainEftArgs {
    /// Bundle directory written by `gen-synth` or the exporter.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = RunConfig::EFT_LR)]
    lr: f64,
    #[arg(long, default_value_t = RunConfig::EFT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = RunConfig::EFT_BATCH)]
    batch: usize,
    /// Regularizer weight; defaults to the regime's value.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value = "l2")]
    reg_norm: RegNorm,
    #[arg(long, default_value_t = DEFAULT_LOGIT_SCALE)]
    logit_scale: f64,
    #[command(flatten)]
    adapter: AdapterArgs,
}

#[derive(Args, Debug)]
struct TrainFftArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = RunConfig::FFT_STAGE1_LR)]
    lr1: f64,
    #[arg(long, default_value_t = RunConfig::FFT_STAGE2_LR)]
    lr2: f64,
    #[arg(long, default_value_t = RunConfig::FFT_STAGE_EPOCHS)]
    epochs1: usize,
    #[arg(long, default_value_t = RunConfig::FFT_STAGE_EPOCHS)]
    epochs2: usize,
    #[arg(long, default_value_t = RunConfig::FFT_BATCH)]
    batch: usize,
    #[arg(long, default_value = "l2")]
    reg_norm: RegNorm,
    /// Request the mask regularizer in stage 2 too (rejected).
    #[arg(long)]
    stage2_reg: bool,
    #[command(flatten)]
    adapter: AdapterArgs,
}

#[derive(Args, Debug)]
struct TttArgs {
    /// RDA1 embeddings tagged as a test-time stream.
    #[arg(long)]
    stream: PathBuf,
    /// RDA1 class matrix.
    #[arg(long)]
    classes: PathBuf,
    /// Starting weights; a fresh zero-output adapter when absent.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 63)]
    views: usize,
    #[arg(long, default_value_t = 0.10)]
    keep_frac: f64,
    #[arg(long, default_value = "ceil")]
    rounding: KeepRounding,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 0.0008)]
    lr: f64,
    #[arg(long, default_value = "marginal")]
    entropy: EntropyMode,
    #[arg(long, default_value = "l2")]
    reg_norm: RegNorm,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Adapter weights; zero-shot when absent.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Replacement base classifier (RDA1 classes).
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LOGIT_SCALE)]
    logit_scale: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    layers: usize,
}

#[derive(Args, Debug)]
struct MiVerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random ensembles, seeded consecutively from `--seed`.
    #[arg(long, default_value_t = 10)]
    ensembles: u64,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
}

#[derive(Args, Debug)]
struct MaskStatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base-test sample whose M, R and M∘R are written.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 64)]
    bins: usize,
}

/// A run that completed but whose checks failed.
struct CheckFailed(String);

enum Failure {
    Rada(RadaError),
    Check(CheckFailed),
}

impl From<RadaError> for Failure {
    fn from(e: RadaError) -> Self {
        Failure::Rada(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Rada(RadaError::Io(e))
    }
}

type CliResult = std::result::Result<(), Failure>;

fn print_config(lines: &str) {
    for l in lines.lines() {
        println!("config {l}");
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn adapter_for(dim: usize, args: &AdapterArgs, seed: u64) -> Result<AdapterParams> {
    AdapterParams::new(
        AdapterConfig {
            variant: args.variant,
            n_layers: args.layers,
            ..AdapterConfig::new(dim)
        },
        seed,
    )
}

fn gen_synth(a: &GenSynthArgs) -> CliResult {
    let cfg = SynthConfig {
        classes: a.classes,
        dim: a.dim,
        shots: a.shots,
        test_per_class: a.test_per_class,
        sigma: a.sigma,
        seed: a.seed,
    };
    print_config(&format!(
        "classes={}\ndim={}\nshots={}\ntest_per_class={}\nsigma={}\nseed={}\nstream={}\ndrift={}",
        cfg.classes,
        cfg.dim,
        cfg.shots,
        cfg.test_per_class,
        cfg.sigma,
        cfg.seed,
        a.stream.map_or("none".to_string(), |n| n.to_string()),
        a.drift
    ));
    let bundle = synth_gaussian(&cfg)?;
    bundle.save_dir(&a.out)?;
    if let Some(n) = a.stream {
        save(&a.out.join("ttt_stream.rda"), &RdaFile::Embeddings(synth_stream(&cfg, n, a.drift)?))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_eft_cmd(a: &TrainEftArgs) -> CliResult {
    let mut cfg = RunConfig::eft().with_seed(a.seed);
    cfg.learning_rate = a.lr;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.logit_scale = a.logit_scale;
    cfg.loss.reg_norm = a.reg_norm;
    if let Some(alpha) = a.alpha {
        cfg.loss.reg_weight = alpha;
    }
    print_config(&format!(
        "data={}\nvariant={}\nlayers={}\n{}",
        a.data.display(),
        a.adapter.variant,
        a.adapter.layers,
        cfg.describe("")
    ));
    cfg.validate()?;
    let bundle = DatasetBundle::load_dir(&a.data)?;
    let params = adapter_for(bundle.dim(), &a.adapter, a.seed)?;
    let outcome = train_eft(&bundle, &params, &cfg)?;
    write_outputs(&outcome, &a.out)?;
    print!("{}", report_text(&outcome));
    Ok(())
}

fn train_fft_cmd(a: &TrainFftArgs) -> CliResult {
    let mut cfg = FftLiteConfig::default().with_seed(a.seed);
    cfg.stage1.learning_rate = a.lr1;
    cfg.stage2.learning_rate = a.lr2;
    cfg.stage1.epochs = a.epochs1;
    cfg.stage2.epochs = a.epochs2;
    cfg.stage1.batch_size = a.batch;
    cfg.stage2.batch_size = a.batch;
    cfg.stage1.loss.reg_norm = a.reg_norm;
    cfg.stage2.loss.reg_norm = a.reg_norm;
    cfg.stage2.loss.apply_reg = a.stage2_reg;
    print_config(&format!(
        "data={}\nvariant={}\nlayers={}\n{}{}",
        a.data.display(),
        a.adapter.variant,
        a.adapter.layers,
        cfg.stage1.describe("stage1."),
        cfg.stage2.describe("stage2.")
    ));
    cfg.stage1.validate()?;
    cfg.stage2.validate()?;
    let bundle = DatasetBundle::load_dir(&a.data)?;
    let params = adapter_for(bundle.dim(), &a.adapter, a.seed)?;
    let outcome = train_fft_lite(&bundle, &params, &cfg)?;
    write_outputs(&outcome, &a.out)?;
    print!("{}", report_text(&outcome));
    Ok(())
}

fn ttt_cmd(a: &TttArgs) -> CliResult {
    let cfg = TttConfig {
        n_views: a.views,
        keep_frac: a.keep_frac,
        rounding: a.rounding,
        steps: a.steps,
        learning_rate: a.lr,
        seed: a.seed,
        ..TttConfig::default()
    }
    .with_entropy(a.entropy)
    .with_norm(a.reg_norm);
    print_config(&format!(
        "stream={}\nclasses={}\nadapter={}\n{}",
        a.stream.display(),
        a.classes.display(),
        a.adapter.as_ref().map_or("fresh".to_string(), |p| p.display().to_string()),
        cfg.describe()
    ));
    cfg.validate()?;
    let stream = load_batch(&a.stream)?;
    let classes = load_classes(&a.classes)?;
    let params = match &a.adapter {
        Some(p) => AdapterParams::load(p)?,
        None => AdapterParams::new(AdapterConfig::new(classes.dim()), a.seed)?,
    };
    let report = run_stream(&stream, &classes, &params, &cfg)?;
    fs::create_dir_all(&a.out)?;
    write_text(&a.out.join("ttt.csv"), &report.to_csv())?;
    write_text(&a.out.join("summary.txt"), &report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult {
    print_config(&format!(
        "data={}\nadapter={}\nclassifier={}\nlogit_scale={}",
        a.data.display(),
        a.adapter.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
        a.classifier.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
        a.logit_scale
    ));
    let scale = LogitScale::new(a.logit_scale)?;
    let bundle = DatasetBundle::load_dir(&a.data)?;
    let params = a.adapter.as_deref().map(AdapterParams::load).transpose()?;
    let classifier = a.classifier.as_deref().map(load_classes).transpose()?;
    let report = evaluate_bundle(&bundle, params.as_ref(), classifier.as_ref(), scale)?;
    println!("base_acc={}", report.base_acc);
    println!("new_acc={}", report.new_acc);
    println!("hm={}", report.harmonic_mean);
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CliResult {
    let base = GradcheckCase {
        seed: a.seed,
        n_layers: a.layers,
        ..GradcheckCase::default()
    };
    print_config(&format!("{base:?}"));
    let mut failed = 0;
    for r in gradcheck_suite(&base)? {
        let c = r.case;
        println!(
            "regime={} reg_norm={} variant={} coordinates={} max_rel_err={:.3e} {}",
            c.regime,
            c.reg_norm,
            c.variant,
            r.coordinates,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure::Check(CheckFailed(format!("{failed} gradient checks failed"))));
    }
    Ok(())
}

fn mi_verify_cmd(a: &MiVerifyArgs) -> CliResult {
    print_config(&format!("seed={}\nensembles={}\nbudget={}", a.seed, a.ensembles, a.budget));
    let fine = Quantizer::new(1 << 24, -4.0, 4.0)?;
    let logits = Quantizer::new(8, -2.0, 2.0)?;
    let shapes = [(2usize, 2usize), (2, 3), (3, 2)];
    let mut failed = 0;
    for seed in a.seed..a.seed + a.ensembles {
        let (k, d) = shapes[(seed % 3) as usize];
        let e = DiscreteEnsemble::random(seed, k, d, 4 + (seed % 9) as usize, fine)?;
        let l1 = verify_lemma1(&e);
        println!("seed={seed} {}", l1.line());
        failed += usize::from(l1.verdict == rada::infotheory::Verdict::Violated);
        for (name, readout) in [("decision", Readout::Decision), ("logits", Readout::Logits(logits))] {
            let r = verify_lemma23(&e, readout, a.budget)?;
            for l in r.lines().lines() {
                println!("seed={seed} readout={name} {l}");
            }
            failed += usize::from(!r.holds() && !r.partial);
        }
    }
    if failed > 0 {
        return Err(Failure::Check(CheckFailed(format!("{failed} information checks violated"))));
    }
    Ok(())
}

fn matrix_csv(t: &rada::numerics::Tensor, names: &[String]) -> String {
    let d = t.shape()[1];
    let mut s = String::from("class");
    for j in 0..d {
        let _ = write!(s, ",d{j}");
    }
    s.push('\n');
    for (row, name) in t.data().chunks(d).zip(names) {
        s.push_str(name);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn mask_stats_cmd(a: &MaskStatsArgs) -> CliResult {
    print_config(&format!(
        "data={}\nadapter={}\nsample={}\nbins={}",
        a.data.display(),
        a.adapter.display(),
        a.sample,
        a.bins
    ));
    let bundle = DatasetBundle::load_dir(&a.data)?;
    let params = AdapterParams::load(&a.adapter)?;
    let classes: ClassMatrix = bundle.base_classes.normalized()?;
    let test = bundle.base_test.normalized()?;
    if a.sample >= test.len() {
        return Err(RadaError::Config(format!("sample {} out of range ({} samples)", a.sample, test.len())).into());
    }
    let (_, values) = predict(&test, &classes, Some(&params), LogitScale::default(), true)?;
    let stats = MaskStats::from_values(&values).ok_or_else(|| RadaError::Degenerate("no mask values".into()))?;
    let hist = Histogram::new(&values, a.bins)?;

    let (m, r) = mask_sample(&params, test.sample(a.sample), classes.weights())?;
    debug_assert_eq!(r, rational_sample(test.sample(a.sample), classes.weights())?);
    let mr = m.zip_map(&r, "masked_rational", |x, y| x * y)?;

    fs::create_dir_all(&a.out)?;
    write_text(&a.out.join("histogram.csv"), &hist.to_csv())?;
    let summary = format!(
        "count={}\nmean={}\nstd={}\nmin={}\nmax={}\nunimodal={}\n",
        stats.count,
        stats.mean,
        stats.std,
        stats.min,
        stats.max,
        hist.is_unimodal()
    );
    write_text(&a.out.join("summary.txt"), &summary)?;
    write_text(&a.out.join("mask.csv"), &matrix_csv(&m, classes.names()))?;
    write_text(&a.out.join("rational.csv"), &matrix_csv(&r, classes.names()))?;
    write_text(&a.out.join("masked_rational.csv"), &matrix_csv(&mr, classes.names()))?;
    print!("{summary}");
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RADA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| RadaError::Config(format!("RADA_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(RadaError::Config("RADA_THREADS must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RadaError::Config(e.to_string()))?;
        info!("using {n} threads");
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    configure_threads()?;
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainEft(a) => train_eft_cmd(a),
        Command::TrainFftLite(a) => train_fft_cmd(a),
        Command::Ttt(a) => ttt_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::MiVerify(a) => mi_verify_cmd(a),
        Command::MaskStats(a) => mask_stats_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Argument errors are configuration errors, not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Rada(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
