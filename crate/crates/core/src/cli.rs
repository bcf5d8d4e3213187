//! Command-line front end. Exit codes: 0 success, 1 runtime or I/O
//! failure, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{gen_clusters, DataFormat, LabeledDataset};
use crate::error::Error;
use crate::hashing::quantize;
use crate::model::EmbeddingModel;
use crate::params::{expected_hamming, AlphaDMode, HashParams};
use crate::pipeline::{
    curves_csv, evaluate, format_f64, report_text, run_experiment, split_for_eval,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable that replaces the seed of every subcommand.
pub const SEED_ENV: &str = "TQN_SEED";

#[derive(Debug, Parser)]
#[command(name = "tqn", version, about = "Triplet quantization hashing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Gaussian cluster dataset.
    GenData(GenDataArgs),
    /// Print M, alpha_s, alpha_d and delta for a parameter set.
    Params(ParamsArgs),
    /// Split a dataset, run both training stages, and evaluate.
    Train(TrainArgs),
    /// Evaluate a checkpoint with real-valued and binary retrieval.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: u32,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    spread: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// csv or tqnf; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[arg(long)]
    bits: u32,
    #[arg(long)]
    classes: u64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    omega: f64,
    #[arg(long)]
    eps: f64,
    /// eq16, cifar-table or inshop-table.
    #[arg(long, default_value = "eq16")]
    mode: String,
}

/// Flags that override config keys; values go through the same parser as
/// the config file.
#[derive(Debug, Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    stage1_epochs: Option<String>,
    #[arg(long)]
    stage1_lr: Option<String>,
    #[arg(long)]
    stage1_margin: Option<String>,
    #[arg(long)]
    stage2_epochs: Option<String>,
    #[arg(long)]
    stage2_lr: Option<String>,
    #[arg(long)]
    stage2_beta: Option<String>,
    #[arg(long)]
    stage2_gamma: Option<String>,
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    omega: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated hidden widths, e.g. 256,128.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    holdout: Option<String>,
    /// map or topk.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    k: Option<String>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        [
            ("seed", &self.seed),
            ("batch_size", &self.batch_size),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("stage1.epochs", &self.stage1_epochs),
            ("stage1.lr", &self.stage1_lr),
            ("stage1.margin", &self.stage1_margin),
            ("stage2.epochs", &self.stage2_epochs),
            ("stage2.lr", &self.stage2_lr),
            ("stage2.beta", &self.stage2_beta),
            ("stage2.gamma", &self.stage2_gamma),
            ("hash.bits", &self.bits),
            ("hash.delta", &self.delta),
            ("hash.omega", &self.omega),
            ("hash.eps", &self.eps),
            ("hash.mode", &self.mode),
            ("model.hidden", &self.hidden),
            ("eval.holdout", &self.holdout),
            ("eval.metric", &self.metric),
            ("eval.k", &self.k),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset to split into database and held-out queries.
    #[arg(long)]
    data: PathBuf,
    /// Receives model.tqnm, curves.csv and report.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset split with the configured seed and holdout, as in `train`.
    #[arg(long, conflicts_with_all = ["db", "queries"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    db: Option<PathBuf>,
    #[arg(long, requires = "db")]
    queries: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the query codes here (TQNC).
    #[arg(long)]
    codes_out: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

/// A failure carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    /// Argument errors are usage errors; everything else is a runtime failure.
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the CLI on `args` (including the program name). `env_seed` is the
/// value of [`SEED_ENV`], if set.
pub fn run<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let env_seed = match env_seed.map(|s| s.trim().parse::<u64>()) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(_)) => {
            let _ = writeln!(err, "error: {SEED_ENV} must be an unsigned integer");
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a, env_seed, out),
        Command::Params(a) => cmd_params(a, out),
        Command::Train(a) => cmd_train(a, env_seed, out),
        Command::Eval(a) => cmd_eval(a, env_seed, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn data_format(path: &Path, explicit: Option<&str>) -> std::result::Result<DataFormat, Failure> {
    match explicit {
        Some(f) => f.parse().map_err(Failure::from),
        None => Ok(DataFormat::from_path(path)),
    }
}

fn load_data(path: &Path) -> std::result::Result<LabeledDataset, Failure> {
    LabeledDataset::load(path, DataFormat::from_path(path))
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen_data(a: GenDataArgs, env_seed: Option<u64>, out: &mut dyn Write) -> CmdResult {
    let format = data_format(&a.out, a.format.as_deref())?;
    let seed = env_seed.unwrap_or(a.seed);
    let data = gen_clusters(a.classes, a.dim, a.per_class, a.spread, seed)?;
    data.save(&a.out, format)
        .map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    writeln!(out, "items={}", data.len()).map_err(|e| Failure::runtime(e.to_string()))
}

fn cmd_params(a: ParamsArgs, out: &mut dyn Write) -> CmdResult {
    let mode: AlphaDMode = a.mode.parse()?;
    let p = HashParams {
        bits: a.bits,
        classes: a.classes,
        delta_margin: a.delta,
        omega: a.omega,
        epsilon: a.eps,
        mode,
    };
    let d = p.derive()?;
    let text = format!(
        "min_bits={}\nexpected_hamming={}\nalpha_s={}\nalpha_d={:.2}\nalpha_d_exact={}\ndelta={}\n",
        d.min_bits,
        format_f64(expected_hamming(d.min_bits)?),
        format_f64(d.alpha_s),
        d.alpha_d,
        format_f64(d.alpha_d),
        format_f64(d.delta),
    );
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::runtime(e.to_string()))
}

/// Config file, then flags, then the seed environment variable.
fn resolve_config(
    path: Option<&Path>,
    flags: &ConfigFlags,
    env_seed: Option<u64>,
) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text, &path.display().to_string())
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    for (key, value) in flags.overrides() {
        cfg.set(key, value)
            .map_err(|m| Failure::usage(format!("flag for {key}: {m}")))?;
    }
    if let Some(seed) = env_seed {
        cfg.train.seed = seed;
    }
    cfg.train
        .validate()
        .map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, env_seed: Option<u64>, out: &mut dyn Write) -> CmdResult {
    let cfg = resolve_config(a.config.as_deref(), &a.flags, env_seed)?;
    let data = load_data(&a.data)?;
    let (model, report) = run_experiment(&data, &cfg.train, &cfg.eval_config())
        .map_err(|e| Failure::runtime(format!("training failed: {e}")))?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| Failure::runtime(format!("{}: {e}", a.out_dir.display())))?;
    let report_body = report_text(&report, &cfg.train);
    write_file(&a.out_dir.join("model.tqnm"), model.to_checkpoint_bytes()?)?;
    write_file(&a.out_dir.join("curves.csv"), curves_csv(&report))?;
    write_file(&a.out_dir.join("report.txt"), &report_body)?;
    out.write_all(report_body.as_bytes())
        .map_err(|e| Failure::runtime(e.to_string()))
}

fn cmd_eval(a: EvalArgs, env_seed: Option<u64>, out: &mut dyn Write) -> CmdResult {
    let cfg = resolve_config(a.config.as_deref(), &a.flags, env_seed)?;
    let model = EmbeddingModel::load(&a.model)
        .map_err(|e| Failure::runtime(format!("{}: {e}", a.model.display())))?;
    let eval_cfg = cfg.eval_config();
    let (db, queries) = match (&a.data, &a.db, &a.queries) {
        (Some(data), _, _) => {
            let data = load_data(data)?;
            split_for_eval(&data, &cfg.train, &eval_cfg)
                .map_err(|e| Failure::runtime(e.to_string()))?
        }
        (None, Some(db), Some(q)) => (load_data(db)?, load_data(q)?),
        _ => return Err(Failure::usage("pass --data, or both --db and --queries")),
    };
    let report = evaluate(&model, &db, &queries, eval_cfg.metric)
        .map_err(|e| Failure::runtime(format!("evaluation failed: {e}")))?;
    if let Some(path) = &a.codes_out {
        let codes = quantize(&model.embed(queries.features())?)?;
        write_file(path, codes.to_bytes()?)?;
    }
    let text = format!(
        "metric={}\nrf={}\nbc={}\ndrop_rel={}\n",
        report.metric,
        format_f64(report.rf),
        format_f64(report.bc),
        format_f64(report.drop_rel)
    );
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::runtime(e.to_string()))
}
