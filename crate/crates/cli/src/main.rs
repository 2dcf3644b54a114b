use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use paircl::data::{self, Format, RawExample, Splits, SynthConfig, Vocab};
use paircl::evalab::{self, EvalReport};
use paircl::gradcheck;
use paircl::train::{self, Checkpoint, TrainConfig, TrainOptions, BEST_CHECKPOINT, LAST_CHECKPOINT, REFERENCE_SCALE};

const SEED_ENV: &str = "PAIRCL_SEED";
const DEFAULT_OUT_DIR: &str = "paircl-out";
const DEFAULT_DATA_DIR: &str = "data";
const VOCAB_FILE: &str = "vocab.json";

/// Pair-level supervised contrastive learning for sentence-pair classification.
#[derive(Parser, Debug)]
#[command(name = "paircl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags override the config file, which overrides built-in defaults.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat `key = value` file (training keys plus data_dir, out_dir, format, data_seed, n_train, n_dev, n_test)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    no_scl: bool,
    #[arg(long, global = true)]
    no_ce: bool,
    #[arg(long, global = true)]
    no_crossattn: bool,
    /// Directory of train/dev/test files; synthetic data is generated when absent
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/dev/test splits to --data-dir
    GenData,
    /// Train a model; writes checkpoints and reports to --out-dir
    Train {
        /// Continue from <out-dir>/last.json
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        /// Defaults to <out-dir>/best.json
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train full, -ce, -scl and -crossattn variants per seed
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every parameter group
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Print checkpoint metadata
    Inspect {
        /// Defaults to <out-dir>/best.json
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Jsonl,
    Tsv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Jsonl => Format::Jsonl,
            FormatArg::Tsv => Format::Tsv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<paircl::Error> for Failure {
    fn from(e: paircl::Error) -> Failure {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Everything a command needs, after defaults, config file, and flags.
#[derive(Debug, Clone)]
struct Settings {
    train: TrainConfig,
    data_dir: Option<PathBuf>,
    out_dir: PathBuf,
    format: Format,
    data_seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| Failure::Validation(format!("invalid value {value:?} for {key}")))
}

impl Settings {
    fn defaults() -> CliResult<Settings> {
        let mut train = TrainConfig::default();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            train.seed = parse_value(SEED_ENV, seed.trim())?;
        }
        let synth = SynthConfig::default();
        Ok(Settings {
            train,
            data_dir: None,
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
            format: Format::Jsonl,
            data_seed: synth.seed,
            n_train: synth.n_train,
            n_dev: synth.n_dev,
            n_test: synth.n_test,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> CliResult {
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "format" => self.format = value.parse()?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "n_train" => self.n_train = parse_value(key, value)?,
            "n_dev" => self.n_dev = parse_value(key, value)?,
            "n_test" => self.n_test = parse_value(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    fn load_file(&mut self, path: &Path) -> CliResult {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Failure::Validation(format!("{}:{}: expected key = value", path.display(), i + 1))
            })?;
            self.set(key.trim(), value.trim()).map_err(|f| match f {
                Failure::Validation(m) | Failure::Runtime(m) => {
                    Failure::Validation(format!("{}:{}: {m}", path.display(), i + 1))
                }
            })?;
        }
        Ok(())
    }

    fn resolve(o: &Overrides) -> CliResult<Settings> {
        let mut s = Settings::defaults()?;
        if let Some(path) = &o.config {
            s.load_file(path)?;
        }
        let t = &mut s.train;
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.tau {
            t.tau = v;
        }
        if let Some(v) = o.alpha {
            t.alpha = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.k {
            t.k = v;
        }
        if let Some(v) = o.d {
            t.d = v;
        }
        t.no_scl |= o.no_scl;
        t.no_ce |= o.no_ce;
        t.no_crossattn |= o.no_crossattn;
        if let Some(v) = &o.data_dir {
            s.data_dir = Some(v.clone());
        }
        if let Some(v) = &o.out_dir {
            s.out_dir = v.clone();
        }
        if let Some(v) = o.format {
            s.format = v.into();
        }
        Ok(s)
    }

    fn synth(&self) -> SynthConfig {
        SynthConfig {
            vocab_size: self.train.vocab_size,
            max_len: self.train.max_len,
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            seed: self.data_seed,
            ..SynthConfig::default()
        }
    }

    /// Echo of the resolved configuration; reference-scale values are noted
    /// where the desk defaults differ.
    fn header(&self, command: &str) -> String {
        let mut out = format!("# paircl {command}\n");
        for (key, value) in self.train.entries() {
            match REFERENCE_SCALE.iter().find(|(k, _)| *k == key) {
                Some((_, reference)) if *reference != value => {
                    out.push_str(&format!("# {key} = {value}  (reference scale: {reference})\n"))
                }
                _ => out.push_str(&format!("# {key} = {value}\n")),
            }
        }
        let data_dir = self
            .data_dir
            .as_ref()
            .map_or_else(|| "<synthetic>".to_string(), |p| p.display().to_string());
        out.push_str(&format!("# data_dir = {data_dir}\n"));
        out.push_str(&format!("# out_dir = {}\n", self.out_dir.display()));
        out.push_str(&format!("# format = {}\n", self.format.extension()));
        out.push_str(&format!("# data_seed = {}\n", self.data_seed));
        out.push_str(&format!(
            "# n_train = {}\n# n_dev = {}\n# n_test = {}\n",
            self.n_train, self.n_dev, self.n_test
        ));
        out
    }
}

fn split_path(dir: &Path, name: &str, format: Format) -> PathBuf {
    dir.join(format!("{name}.{}", format.extension()))
}

/// Loaded or generated splits, plus the vocabulary when read from files.
fn load_data(settings: &Settings, vocab: Option<Vocab>) -> CliResult<(Splits, Option<Vocab>)> {
    let Some(dir) = &settings.data_dir else {
        return Ok((data::generate(&settings.synth())?, None));
    };
    let mut records: Vec<Vec<RawExample>> = Vec::new();
    for name in ["train", "dev", "test"] {
        let loaded = data::load_file(&split_path(dir, name, settings.format), settings.format)?;
        if loaded.skipped > 0 {
            println!("# {name}: skipped {} unlabeled records", loaded.skipped);
        }
        records.push(loaded.records);
    }
    let vocab = vocab.unwrap_or_else(|| {
        data::build_vocab(
            records[0].iter().flat_map(|r| [r.premise.as_str(), r.hypothesis.as_str()]),
            None,
        )
    });
    let max_len = settings.train.max_len;
    let splits = Splits {
        train: data::encode_records(&records[0], &vocab, max_len)?,
        dev: data::encode_records(&records[1], &vocab, max_len)?,
        test: data::encode_records(&records[2], &vocab, max_len)?,
    };
    Ok((splits, Some(vocab)))
}

fn write(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(settings: &Settings) -> CliResult {
    let dir = settings.data_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let cfg = settings.synth();
    let splits = data::generate(&cfg)?;
    for (name, split) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        let path = split_path(&dir, name, settings.format);
        data::save_file(&path, &data::to_raw(split, cfg.negation_token_id), settings.format)?;
        println!("wrote {} examples to {}", split.len(), path.display());
    }
    Ok(())
}

fn run_train(settings: &Settings, resume: bool) -> CliResult {
    let mut config = settings.train.clone();
    let (splits, vocab) = load_data(settings, None)?;
    if let Some(v) = &vocab {
        config.vocab_size = v.len();
    }
    config.validate()?;
    let out_dir = settings.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Failure::Runtime(format!("{}: {e}", out_dir.display())))?;
    if let Some(v) = &vocab {
        write(&out_dir.join(VOCAB_FILE), &serde_json::to_string(v.tokens()).expect("strings serialize"))?;
    }
    let resume = if resume {
        Some(Checkpoint::load(&out_dir.join(LAST_CHECKPOINT))?)
    } else {
        None
    };
    let mut stdout = std::io::stdout();
    let outcome = train::train(
        &config,
        &splits,
        TrainOptions {
            out_dir: Some(out_dir.clone()),
            metrics: Some(&mut stdout),
            resume,
        },
    )?;
    let r = &outcome.report;
    println!(
        "variant {}  |z| {}  params {}  init dev {:.3}  best epoch {}  best dev {:.3}  test {:.3}  ({:.1}s)",
        r.variant, r.rep_width, r.n_parameters, r.init_dev_acc, r.best_epoch, r.best_dev_acc, r.test_acc, r.wall_secs
    );
    println!("checkpoint {}", out_dir.join(BEST_CHECKPOINT).display());
    Ok(())
}

fn checkpoint_path(settings: &Settings, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| settings.out_dir.join(BEST_CHECKPOINT))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(Failure::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn render_eval(report: &EvalReport) -> String {
    let names = ["entailment", "contradiction", "neutral"];
    let mut out = format!("n {}  accuracy {:.3}\n", report.n, report.accuracy);
    out.push_str(&format!("{:<14} {:>9} {:>9}   confusion (rows true, cols predicted)\n", "class", "precision", "recall"));
    for (c, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
        out.push_str(&format!(
            "{:<14} {:>9.3} {:>9.3}   {}\n",
            names.get(c).copied().unwrap_or("?"),
            report.precision[c],
            report.recall[c],
            cells.join("")
        ));
    }
    if let (Some(intra), Some(inter)) = (report.intra_cosine, report.inter_cosine) {
        out.push_str(&format!("cosine intra {intra:.3}  inter {inter:.3}\n"));
    }
    out
}

fn run_eval(settings: &Settings, checkpoint: Option<&PathBuf>, split: SplitArg) -> CliResult {
    let path = checkpoint_path(settings, checkpoint);
    let ckpt = load_checkpoint(&path)?;
    let mut settings = settings.clone();
    settings.train.vocab_size = ckpt.config.vocab_size;
    settings.train.max_len = ckpt.config.max_len;
    let vocab = match &settings.data_dir {
        Some(_) => {
            let vocab_path = path.with_file_name(VOCAB_FILE);
            let text = fs::read_to_string(&vocab_path)
                .map_err(|e| Failure::Validation(format!("{}: {e}", vocab_path.display())))?;
            let tokens: Vec<String> = serde_json::from_str(&text)
                .map_err(|e| Failure::Validation(format!("{}: {e}", vocab_path.display())))?;
            Some(Vocab::from_tokens(tokens)?)
        }
        None => None,
    };
    let (splits, _) = load_data(&settings, vocab)?;
    let model = ckpt.model()?;
    let examples = match split {
        SplitArg::Train => &splits.train,
        SplitArg::Dev => &splits.dev,
        SplitArg::Test => &splits.test,
    };
    let report = evalab::evaluate(&model, examples)?;
    println!("# checkpoint = {}", path.display());
    print!("{}", render_eval(&report));
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn run_ablate(settings: &Settings, seeds: &[u64]) -> CliResult {
    let (splits, vocab) = load_data(settings, None)?;
    let mut base = settings.train.clone();
    if let Some(v) = &vocab {
        base.vocab_size = v.len();
    }
    let table = evalab::ablation_sweep(&base, seeds, &splits)?;
    print!("{}", table.render());
    let dir = &settings.out_dir;
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    write(&dir.join("ablation.csv"), &table.csv())?;
    write(&dir.join("ablation.json"), &serde_json::to_string_pretty(&table).expect("table serializes"))?;
    Ok(())
}

fn run_gradcheck(settings: &Settings, points: usize, tol: f64) -> CliResult {
    let report = gradcheck::run_suite(settings.train.seed, points, tol)?;
    println!("points {}  resampled {}  tol {tol:e}", report.points, report.resampled);
    for g in &report.groups {
        println!(
            "{:<12} worst relative error {:.3e}  ({} entries)  {}",
            g.group,
            g.report.max_rel_err,
            g.report.n_checked,
            if g.report.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn run_inspect(settings: &Settings, checkpoint: Option<&PathBuf>) -> CliResult {
    let path = checkpoint_path(settings, checkpoint);
    let ckpt = load_checkpoint(&path)?;
    println!("checkpoint {}", path.display());
    println!("format {} v{}", ckpt.format, ckpt.version);
    println!("variant {}  |z| {}", ckpt.config.variant(), ckpt.dims.rep_width());
    println!(
        "epochs done {}  best epoch {}  best dev {:.3}  init dev {:.3}  adam steps {}",
        ckpt.epoch, ckpt.best_epoch, ckpt.best_dev_acc, ckpt.init_dev_acc, ckpt.adam.t
    );
    let total: usize = ckpt.tensors.iter().map(|t| t.value.data().len()).sum();
    println!("parameters {total}");
    for t in &ckpt.tensors {
        println!("  {:<22} {}x{}", t.name, t.value.rows(), t.value.cols());
    }
    for (key, value) in ckpt.config.entries() {
        println!("config {key} = {value}");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let settings = Settings::resolve(&cli.overrides)?;
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Inspect { .. } => "inspect",
    };
    print!("{}", settings.header(name));
    match &cli.command {
        Command::GenData => gen_data(&settings),
        Command::Train { resume } => run_train(&settings, *resume),
        Command::Eval { checkpoint, split } => run_eval(&settings, checkpoint.as_ref(), *split),
        Command::Ablate { seeds } => run_ablate(&settings, seeds),
        Command::Gradcheck { points, tol } => run_gradcheck(&settings, *points, *tol),
        Command::Inspect { checkpoint } => run_inspect(&settings, checkpoint.as_ref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
