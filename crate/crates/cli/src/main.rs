use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::Value;
use taq::alloc::CostModel;
use taq::io::read_kv;
use taq::io::report::{diff_reports, parse_report, to_canonical, validate_report};
use taq::pipeline::{self, PipelineConfig};
use taq::{Result, TaqError};

const VERBS: [(&str, &str); 7] = [
    ("score", "Score per-layer relevance on the calibration set"),
    ("quantize", "Plan, calibrate and evaluate a quantized model"),
    (
        "sweep",
        "Measure per-layer sensitivity to low-bit quantization",
    ),
    ("eval", "Exact match and token F1 of a checkpoint"),
    (
        "train",
        "Train a toy model and write its checkpoint to --out",
    ),
    ("gen-data", "Write a generated calibration set to --out"),
    ("report-diff", "Compare two reports, ignoring timings"),
];

fn key_help(key: &str) -> &'static str {
    match key {
        "task" => "copy | modadd | sortseq",
        "plan" => "taq | taqo | uniform:<bits>",
        "gamma" => "Critical-set threshold (default: chosen from taqo_fraction)",
        "out" => "Output checkpoint or data file",
        "report" => "Report path (default: stdout)",
        "seed" => "Run seed",
        _ => "",
    }
}

fn cli() -> Command {
    let mut root = Command::new("taq")
        .about("Task-aware mixed-precision quantization for small transformers")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (verb, about) in VERBS {
        let mut cmd = Command::new(verb).about(about);
        if verb == "report-diff" {
            cmd = cmd
                .arg(
                    Arg::new("first")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("second")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                );
        } else {
            cmd = cmd.arg(
                Arg::new("config")
                    .long("config")
                    .value_name("PATH")
                    .value_parser(clap::value_parser!(PathBuf)),
            );
            for key in PipelineConfig::KEYS {
                cmd = cmd.arg(
                    Arg::new(key)
                        .long(key)
                        .value_name("VALUE")
                        .help(key_help(key))
                        .allow_negative_numbers(true)
                        .action(ArgAction::Set),
                );
            }
            if verb == "eval" {
                cmd = cmd.arg(
                    Arg::new("ckpt")
                        .value_name("CHECKPOINT")
                        .help("Checkpoint to evaluate (overrides --checkpoint)"),
                );
            }
        }
        root = root.subcommand(cmd);
    }
    root
}

/// Defaults, then the config file, then flags.
fn config_from(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => PipelineConfig::from_kv(&read_kv(p)?)?,
        None => PipelineConfig::default(),
    };
    for key in PipelineConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if let Ok(Some(p)) = m.try_get_one::<String>("ckpt") {
        cfg.set("checkpoint", p)?;
    }
    Ok(cfg)
}

fn check_threads() -> Result<()> {
    match std::env::var("TAQ_THREADS") {
        Ok(v) if v.trim().parse::<usize>().is_err() => Err(TaqError::InvalidConfig(format!(
            "TAQ_THREADS must be a non-negative integer, got '{v}'"
        ))),
        _ => Ok(()),
    }
}

fn emit(cfg: &PipelineConfig, report: &Value) -> Result<()> {
    let text = to_canonical(report);
    match &cfg.report {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_report(p: &Path) -> Result<Value> {
    let v = parse_report(&std::fs::read_to_string(p)?)?;
    if let Some(m) = v.get("model") {
        let n = m.get("n_layers").and_then(Value::as_u64);
        let w = m.get("weights_per_layer").and_then(Value::as_u64);
        if let (Some(n), Some(w)) = (n, w) {
            validate_report(&v, &CostModel::uniform(n as usize, w))?;
        }
    }
    Ok(v)
}

fn run(m: &ArgMatches) -> Result<i32> {
    check_threads()?;
    let (verb, sub) = m.subcommand().expect("subcommand is required");
    if verb == "report-diff" {
        let a = load_report(sub.get_one::<PathBuf>("first").expect("required"))?;
        let b = load_report(sub.get_one::<PathBuf>("second").expect("required"))?;
        let diffs = diff_reports(&a, &b);
        for d in &diffs {
            println!("{d}");
        }
        return Ok(if diffs.is_empty() { 0 } else { 1 });
    }
    let cfg = config_from(sub)?;
    let report = match verb {
        "score" => pipeline::cmd_score(&cfg)?,
        "quantize" => pipeline::cmd_quantize(&cfg)?,
        "sweep" => pipeline::cmd_sweep(&cfg)?,
        "eval" => pipeline::cmd_eval(&cfg)?,
        "train" => pipeline::cmd_train(&cfg)?,
        "gen-data" => {
            let n = pipeline::cmd_gen_data(&cfg)?;
            eprintln!("wrote {n} items");
            return Ok(0);
        }
        _ => unreachable!("clap rejects unknown verbs"),
    };
    emit(&cfg, &report)?;
    Ok(0)
}

fn main() -> ExitCode {
    let m = cli().get_matches();
    match run(&m) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
