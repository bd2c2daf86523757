//! `recnet`: parameter ledgers, training, evaluation and property checks for RecNets.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recnet::accounting::{acronym, flop_count, ledger, Convention};
use recnet::checkpoint::{Checkpoint, DataSource, Metadata};
use recnet::data::{self, Dataset, DatasetKind, Normalizer, Split};
use recnet::model::ArchSpec;
use recnet::train::{evaluate, train, TrainConfig, METRICS_HEADER};
use recnet::verify::Suite;
use recnet::{CrcVariant, Error, RecNetConfig, RecNetModel};

const CHECKPOINT_FILE: &str = "checkpoint.rcn";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "recnet", version, about = "Channel-wise recurrent convolutional networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-layer parameter and FLOP ledger of an architecture.
    Describe(DescribeArgs),
    /// Train a network on CIFAR binaries or generated data.
    Train(TrainArgs),
    /// Report the test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Run the numerical property suites in 64-bit mode.
    Verify(VerifyArgs),
}

/// Options shared by every command that builds a network.
#[derive(Args)]
struct ArchArgs {
    /// `e,S1,S2,S3,d1,d2,d3`, optionally wrapped as `RecNet(...)`.
    #[arg(value_parser = parse_arch)]
    arch: ArchSpec,
    /// CRC non-linearity.
    #[arg(long, default_value = "separate-bn-relu", value_parser = parse_variant)]
    variant: CrcVariant,
    /// Input-to-hidden kernel size.
    #[arg(long, default_value_t = 3)]
    kx: usize,
    /// Hidden-to-hidden kernel size.
    #[arg(long, default_value_t = 3)]
    kh: usize,
}

impl ArchArgs {
    fn config(&self, classes: usize) -> RecNetConfig {
        RecNetConfig::new(self.arch.0)
            .classes(classes)
            .variant(self.variant)
            .kernels(self.kx, self.kh)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// formula-only, with-bn or with-bn-and-bias.
    #[arg(long, default_value = "with-bn-and-bias", value_parser = parse_convention)]
    convention: Convention,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the extracted binary batches.
    #[arg(long)]
    data: Option<PathBuf>,
    /// cifar10 or cifar100.
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    /// Use only the first N training records.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test records.
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Generate a separable toy dataset instead of reading files.
    #[arg(long)]
    synthetic: bool,
    /// Training samples for --synthetic.
    #[arg(long, default_value_t = 512)]
    synthetic_train: usize,
    /// Test samples for --synthetic.
    #[arg(long, default_value_t = 128)]
    synthetic_test: usize,
    /// Class count; defaults to the dataset's (2 for --synthetic).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    eta_min: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Epochs at which the cosine schedule restarts; entries at or beyond --epochs are dropped.
    #[arg(long, value_delimiter = ',', default_value = "20,60,120")]
    restarts: Vec<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Write 0 in the seconds column so repeated runs log identical files.
    #[arg(long)]
    deterministic: bool,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// grad, equiv, unroll, causality, counts or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per property.
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

fn parse_arch(s: &str) -> Result<ArchSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<CrcVariant, String> {
    CrcVariant::parse(s)
        .ok_or_else(|| format!("unknown variant {s:?} (relu, shared-bn-relu, separate-bn-relu, linear)"))
}

fn parse_convention(s: &str) -> Result<Convention, String> {
    Convention::parse(s).ok_or_else(|| format!("unknown convention {s:?} (formula-only, with-bn, with-bn-and-bias)"))
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    DatasetKind::parse(s).ok_or_else(|| format!("unknown dataset {s:?} (cifar10, cifar100)"))
}

/// Failure of a command, carrying its exit status.
enum Failure {
    Verify,
    Lib(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape(_) | Error::Config(_) => 2,
        Error::Format { .. } | Error::Io { .. } => 3,
        Error::NonFinite { .. } => 1,
    }
}

fn describe(a: DescribeArgs) -> Outcome {
    let cfg = a.arch.config(a.classes);
    cfg.validate()?;
    let l = ledger(&cfg, a.convention);
    match a.format {
        Format::Csv => print!("{}", l.to_csv()),
        Format::Text => {
            println!(
                "RecNet({}) {} classes, {} convention",
                a.arch.arch,
                cfg.n_classes,
                a.convention.name()
            );
            print!("{}", l.to_text());
            println!("params={}", l.total_params());
            println!("flops={}", flop_count(&cfg));
            println!("acronym={}", acronym(&cfg));
        }
    }
    Ok(())
}

fn load_split(args: &DataArgs, kind: DatasetKind, split: Split) -> Result<Dataset, Failure> {
    let dir = args
        .data
        .as_deref()
        .ok_or_else(|| Failure::Usage("--data is required unless the run uses generated data".into()))?;
    let ds = data::load(dir, kind, split)?;
    let limit = match split {
        Split::Train => args.train_limit,
        Split::Test => args.test_limit,
    };
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let kind = a.data.dataset.unwrap_or(DatasetKind::Cifar10);
    let classes = a.classes.unwrap_or(if a.synthetic { 2 } else { kind.n_classes() });
    let (train_ds, test_ds, source) = if a.synthetic {
        let tr = data::synthetic(kind, Split::Train, a.synthetic_train, classes, a.seed)?;
        let te = data::synthetic(kind, Split::Test, a.synthetic_test, classes, a.seed)?;
        let src = DataSource {
            dataset: kind,
            synthetic: Some((a.synthetic_train, a.synthetic_test, classes)),
        };
        (tr, te, src)
    } else {
        let src = DataSource {
            dataset: kind,
            synthetic: None,
        };
        (
            load_split(&a.data, kind, Split::Train)?,
            load_split(&a.data, kind, Split::Test)?,
            src,
        )
    };
    let cfg = a.arch.config(classes);
    let mut model = RecNetModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let restarts: Vec<usize> = a.restarts.iter().copied().filter(|&r| r > 0 && r < a.epochs).collect();
    let tc = TrainConfig {
        lr0: a.lr,
        weight_decay: a.weight_decay,
        momentum: a.momentum,
        batch: a.batch,
        epochs: a.epochs,
        restarts,
        eta_min: a.eta_min,
        seed: a.seed,
        augment: !a.no_augment,
        deterministic: a.deterministic,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let norm = Normalizer::fit(&train_ds);
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let metrics_path = a.out.join(METRICS_FILE);
    let meta = |epoch: usize, test_acc: Option<f64>| {
        let mut m = Metadata::new(cfg, epoch, a.seed);
        m.normalizer = Some(norm);
        m.source = Some(source.clone());
        m.test_acc = test_acc;
        m
    };
    println!(
        "training {} ({} params) on {} train / {} test samples, {} epochs",
        acronym(&cfg),
        recnet::Module::num_params(&mut model),
        train_ds.len(),
        test_ds.len(),
        a.epochs
    );
    Checkpoint::from_model(&mut model, meta(0, None)).save(&ckpt_path)?;
    let mut log = format!("{METRICS_HEADER}\n");
    write_atomic(&metrics_path, log.as_bytes())?;
    train(&mut model, &train_ds, &test_ds, norm, &tc, |m, model| {
        log.push_str(&m.csv_row());
        log.push('\n');
        write_atomic(&metrics_path, log.as_bytes())?;
        Checkpoint::from_model(model, meta(m.epoch + 1, Some(m.test_acc))).save(&ckpt_path)?;
        println!(
            "epoch {:>3}  lr {:.5}  train_loss {:.4}  train_acc {:.4}  test_loss {:.4}  test_acc {:.4}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.test_loss, m.test_acc
        );
        let _ = std::io::stdout().flush();
        Ok(())
    })?;
    println!("wrote {} and {}", ckpt_path.display(), metrics_path.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg = ck.meta.config;
    let mut model = RecNetModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore(&mut model)?;
    let source = ck.meta.source.clone();
    let kind = a
        .data
        .dataset
        .or(source.as_ref().map(|s| s.dataset))
        .unwrap_or(DatasetKind::Cifar10);
    let test = match (&a.data.data, source.as_ref().and_then(|s| s.synthetic)) {
        (None, Some((_, n_test, classes))) => data::synthetic(kind, Split::Test, n_test, classes, ck.meta.seed)?,
        _ => {
            if kind.n_classes() != cfg.n_classes {
                return Err(Error::Config(format!(
                    "{} has {} classes but the checkpoint was trained for {}",
                    kind.name(),
                    kind.n_classes(),
                    cfg.n_classes
                ))
                .into());
            }
            load_split(&a.data, kind, Split::Test)?
        }
    };
    let norm = match ck.meta.normalizer {
        Some(n) => n,
        None => Normalizer::fit(&load_split(&a.data, kind, Split::Train)?),
    };
    if a.batch == 0 {
        return Err(Failure::Usage("--batch must be positive".into()));
    }
    let e = evaluate(&mut model, &test, norm, a.batch)?;
    println!("test_acc={}", e.accuracy);
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> Outcome {
    let suites: Vec<Suite> = if a.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::parse(&a.suite).ok_or_else(|| {
            Failure::Usage(format!(
                "unknown suite {:?} (grad, equiv, unroll, causality, counts, all)",
                a.suite
            ))
        })?]
    };
    let mut failed = 0;
    let mut total = 0;
    for s in suites {
        for r in s.run(a.seed, a.trials) {
            println!("{r}");
            total += 1;
            failed += usize::from(!r.passed);
        }
    }
    println!("{} of {total} properties passed", total - failed);
    if failed > 0 {
        return Err(Failure::Verify);
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("RECNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("RECNET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = configure_threads().and_then(|_| match cli.cmd {
        Command::Describe(a) => describe(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
