//! The `cpool` command line.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for invalid
//! configurations and 1 for failures while running. Every failure prints a
//! single `error[<class>]: <message>` line on stderr.

pub mod config;
pub mod error;
pub mod inspect;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cpool_core::gradcheck::suite::{self, Module, TOLERANCE};
use cpool_core::DType;
use cpool_harness::ablation::{ablation_sweep, standard_variants, Variant};
use cpool_harness::checkpoint::Checkpoint;
use cpool_harness::data::{make_dataset, Split};
use cpool_harness::metrics::MetricEvent;
use cpool_harness::train::{evaluate, train_on};
use cpool_harness::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cpool", version, about = "Train, evaluate and inspect ContextPool models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, a checkpoint and the run record.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train every ablation variant over several seeds and tabulate them.
    Ablate(AblateArgs),
    /// Dump pooling weights and sizes of a trained language model.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Print the validated config and exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config naming the dataset and evaluation size.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "dev")]
    split: Split,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = |s: &str| s.parse::<Module>())]
    module: Module,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per randomized family.
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    seeds: Vec<u64>,
    /// Leave out the model without ContextPool.
    #[arg(long)]
    no_baseline: bool,
    /// Width of the fixed-window variant.
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Kept fraction of the random-sparse variant.
    #[arg(long, default_value_t = 0.5)]
    keep_fraction: f64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text whose bytes are fed to the model.
    #[arg(long)]
    input: PathBuf,
    /// MaskDump JSON for the first window of the input.
    #[arg(long, required_unless_present = "stats")]
    dump: Option<PathBuf>,
    /// Include each token's full Gaussian mask in the dump.
    #[arg(long, requires = "dump")]
    full_mask: bool,
    /// Size histogram CSV over the whole input.
    #[arg(long)]
    stats: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}`, expected train, dev or test")),
    }
}

/// Output of `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_sha256: String,
    pub checkpoint_step: usize,
    pub split: Split,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => return report(&usage_error(&e)),
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> i32 {
    eprintln!("{}", e.line());
    e.exit_code()
}

fn usage_error(e: &clap::Error) -> CliError {
    let text = e.to_string();
    let first = text.lines().next().unwrap_or("invalid arguments");
    CliError::Usage(first.trim_start_matches("error: ").to_string())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn describe(e: &MetricEvent) -> String {
    let mut line = format!("step {} {:?} loss {:.4}", e.step, e.split, e.loss).to_lowercase();
    if let Some(b) = e.bpc {
        line += &format!(" bpc {b:.4}");
    }
    if let Some(a) = e.acc {
        line += &format!(" acc {a:.4}");
    }
    line
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let config = config::load(&a.config)?;
    if a.print_config {
        print!("{}", config::to_toml(&config)?);
        return Ok(());
    }
    let out = a.out.expect("clap requires --out without --print-config");
    let data = make_dataset(&config.dataset)?;
    let record = train_on(&config, &data, Some(&out), &mut |e| {
        if e.split == Split::Dev {
            println!("{}", describe(e));
        }
    })?;
    println!(
        "params {} (contextpool {}), {:.1}s, record {}",
        record.param_count,
        record.cp_param_count,
        record.wall_clock_secs,
        out.join(cpool_harness::train::RECORD_FILE).display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let config = config::load(&a.config)?;
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    if ckpt.manifest.model != config.model {
        return Err(CliError::Config(format!(
            "{} holds a different model than {}",
            a.checkpoint.display(),
            a.config.display()
        )));
    }
    let data = make_dataset(&config.dataset)?;
    let bad = |reason: String| CliError::Runtime(format!("{}: {reason}", a.checkpoint.display()));
    let event = match ckpt.manifest.dtype {
        DType::F32 => {
            let (store, model) = ckpt.restore::<f32>().map_err(bad)?;
            evaluate(&model, &store, &data, a.split, &config, ckpt.manifest.step, 0.0)?
        }
        DType::F64 => {
            let (store, model) = ckpt.restore::<f64>().map_err(bad)?;
            evaluate(&model, &store, &data, a.split, &config, ckpt.manifest.step, 0.0)?
        }
    };
    let report = EvalReport {
        checkpoint_sha256: ckpt.sha256.clone(),
        checkpoint_step: ckpt.manifest.step,
        split: a.split,
        loss: event.loss,
        bpc: event.bpc,
        acc: event.acc,
    };
    let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)? + "\n";
    match &a.out {
        Some(path) => write_file(path, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult<()> {
    let results = suite::run(a.module, a.seed, a.instances)?;
    for r in &results {
        println!("{:.3e} {}", r.max_rel_error, r.name);
    }
    let worst = suite::max_error(&results);
    println!("max relative error {worst:.6e} over {} checks", results.len());
    if worst < TOLERANCE {
        Ok(())
    } else {
        let name = results.iter().find(|r| !r.passed()).map_or("?", |r| r.name.as_str());
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {worst:e} >= {TOLERANCE:e} ({name})"
        )))
    }
}

fn ablate_cmd(a: AblateArgs) -> CliResult<()> {
    let config = config::load(&a.config)?;
    let cp = match &config.model {
        ModelConfig::Transformer(t) => t.cp.clone().unwrap_or_default(),
        ModelConfig::Convnet(c) => c.cp.clone(),
    };
    let mut variants = Vec::new();
    if !a.no_baseline {
        variants.push(Variant::baseline());
    }
    variants.extend(standard_variants(&cp, a.window, a.keep_fraction));
    let table = ablation_sweep(&config, &variants, &a.seeds, &mut |v, seed, run| {
        println!("{} seed {seed}: {}", v.label, describe(&run.final_dev));
    })?;
    write_file(&a.out.join("ablation.csv"), table.to_csv())?;
    write_file(&a.out.join("ablation.md"), table.to_markdown())?;
    let json = serde_json::to_string_pretty(&table).map_err(CliError::runtime)? + "\n";
    write_file(&a.out.join("ablation.json"), json)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> CliResult<()> {
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let input = read_file(&a.input)?;
    if let Some(path) = &a.dump {
        let dump = inspect::mask_dump(&ckpt, &a.input.display().to_string(), &input, a.full_mask)?;
        dump.check().map_err(|e| CliError::Runtime(format!("mask dump invariant violated: {e}")))?;
        let json = serde_json::to_string_pretty(&dump).map_err(CliError::runtime)? + "\n";
        write_file(path, json)?;
    }
    if let Some(path) = &a.stats {
        let stats = inspect::export_pool_stats(&ckpt, &input)?;
        for l in &stats {
            println!("layer {} mean_s {:.4} std_s {:.4} tokens {}", l.layer, l.mean_s, l.std_s, l.tokens());
        }
        write_file(path, inspect::stats_csv(&stats))?;
    }
    Ok(())
}
