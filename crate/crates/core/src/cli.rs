//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration, usage and file errors,
//! 3 when training aborts on a non-finite loss, 1 otherwise.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{TrainerConfig, ABLATION_ROWS, METRIC_ROWS};
use crate::error::{Error, Result};
use crate::model::load_checkpoint;
use crate::synthdata::{export_dataset, import_dataset, DatasetSplit};
use crate::trainer::{build_dataset, evaluate, run};

#[derive(Debug, Parser)]
#[command(name = "semicd", version, about = "Semi-supervised change detection on synthetic image pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write logs and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every ablation row and tabulate the final validation scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RowSet::Component)]
        rows: RowSet,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Generate the configured dataset and write it to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a metrics CSV to long format (iter,epoch,metric,value).
    ExportMetrics {
        #[arg(long)]
        input: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RowSet {
    Component,
    Metric,
    All,
}

/// Configuration flags shared by the training verbs. Precedence, lowest
/// first: defaults, `--config`, `--set`, the dedicated flags.
#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fusion mode: off, af_star or af.
    #[arg(long)]
    pub mode: Option<String>,
    /// Teacher update: ada, plain or off-teacher-equals-student.
    #[arg(long)]
    pub ema: Option<String>,
    /// Uncertainty metric: entropy, rebalance, confusion or uncertainty.
    #[arg(long)]
    pub metric: Option<String>,
    /// Sign convention of the gate: literal or prose.
    #[arg(long)]
    pub sign: Option<String>,
    /// Dataset written by `gen-data`, used instead of generating one.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl Common {
    pub fn resolve(&self) -> Result<TrainerConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainerConfig::load(p)?,
            None => TrainerConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        let flags = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("fusion.mode", self.mode.clone()),
            ("ema.mode", self.ema.clone()),
            ("metric.mode", self.metric.clone()),
            ("ema.sign", self.sign.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self, cfg: &TrainerConfig) -> Result<DatasetSplit> {
        match &self.data_dir {
            Some(d) => import_dataset(d),
            None => build_dataset(cfg),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericAbort { .. } => 3,
        Error::Config(_) | Error::Io { .. } | Error::Format(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train { common, out } => {
            let cfg = common.resolve()?;
            let data = common.dataset(&cfg)?;
            let res = run(&cfg, Some(data), Some(out))?;
            println!("val_iou_c = {}", res.final_iou_c);
            println!("val_oa = {}", res.final_oa);
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let params = load_checkpoint(checkpoint)?;
            let data = common.dataset(&cfg)?;
            let (iou, acc, _) = evaluate(&params, &data.val)?;
            println!("val_iou_c = {iou}");
            println!("val_oa = {acc}");
            Ok(())
        }
        Command::Ablate { common, out, rows, seeds } => {
            let cfg = common.resolve()?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.clone() };
            ablate(&cfg, *rows, &seeds, common.data_dir.as_deref(), out)
        }
        Command::GenData { common, out } => {
            let cfg = common.resolve()?;
            let split = build_dataset(&cfg)?;
            export_dataset(&split, cfg.data.scene_spec(cfg.seed).seed, out)?;
            let path = out.join("config.resolved");
            fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
        }
        Command::ExportMetrics { input, out } => {
            let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
            let long = metrics_long_format(&text)?;
            match out {
                Some(p) => fs::write(p, long).map_err(|e| Error::io(p, e)),
                None => std::io::stdout()
                    .write_all(long.as_bytes())
                    .map_err(|e| Error::io("stdout", e)),
            }
        }
    }
}

pub const ABLATION_HEADER: &str = "row,seed,val_iou_c,val_oa,iterations";

fn ablate(base: &TrainerConfig, rows: RowSet, seeds: &[u64], data_dir: Option<&Path>, out: &Path) -> Result<()> {
    let names: Vec<&str> = match rows {
        RowSet::Component => ABLATION_ROWS.to_vec(),
        RowSet::Metric => METRIC_ROWS.to_vec(),
        RowSet::All => ABLATION_ROWS.iter().chain(&METRIC_ROWS).copied().collect(),
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("ablation.csv");
    let mut table = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(table, "{ABLATION_HEADER}").map_err(|e| Error::io(&path, e))?;
    for &seed in seeds {
        for name in &names {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let cfg = cfg.ablation(name).ok_or_else(|| Error::Config(format!("unknown ablation row {name}")))?;
            let data = data_dir.map(import_dataset).transpose()?;
            let res = run(&cfg, data, Some(&out.join(format!("{name}_seed{seed}"))))?;
            let line = format!("{name},{seed},{},{},{}", res.final_iou_c, res.final_oa, res.iterations);
            println!("{line}");
            writeln!(table, "{line}").map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub const LONG_HEADER: &str = "iter,epoch,metric,value";

/// Reshapes a wide metrics CSV into `iter,epoch,metric,value` rows, one per
/// non-empty cell. Empty input yields only the header.
pub fn metrics_long_format(text: &str) -> Result<String> {
    let mut out = format!("{LONG_HEADER}\n");
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Ok(out);
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let (Some(ci), Some(ce)) = (
        cols.iter().position(|&c| c == "iter"),
        cols.iter().position(|&c| c == "epoch"),
    ) else {
        return Err(Error::Format("metrics header lacks iter/epoch columns".into()));
    };
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::Format(format!("row {}: {} fields, expected {}", n + 1, cells.len(), cols.len())));
        }
        for (j, (&name, &v)) in cols.iter().zip(&cells).enumerate() {
            if j == ci || j == ce || v.is_empty() {
                continue;
            }
            out.push_str(&format!("{},{},{name},{v}\n", cells[ci], cells[ce]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_format() {
        let wide = "iter,epoch,loss_s,val_oa\n0,0,,0.5\n1,1,0.25,\n";
        assert_eq!(
            metrics_long_format(wide).unwrap(),
            "iter,epoch,metric,value\n0,0,val_oa,0.5\n1,1,loss_s,0.25\n"
        );
        assert_eq!(metrics_long_format("").unwrap(), "iter,epoch,metric,value\n");
        assert_eq!(metrics_long_format("iter,epoch,x\n").unwrap(), "iter,epoch,metric,value\n");
        assert!(metrics_long_format("a,b\n1,2\n").is_err());
        assert!(metrics_long_format("iter,epoch\n1\n").is_err());
    }

    #[test]
    fn flags_override_config_and_set() {
        let cli = Cli::try_parse_from([
            "semicd", "train", "--set", "fusion.mode=off", "--set", "seed=4", "--mode", "af_star", "--ema", "plain",
        ])
        .unwrap();
        let Command::Train { common, .. } = cli.command else { panic!() };
        let cfg = common.resolve().unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.fusion.mode.as_str(), "af_star");
        assert_eq!(cfg.ema.mode.as_str(), "plain");
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["semicd", "train", "--bogus"]), 2);
        assert_eq!(main_with_args(["semicd", "train", "--set", "nope=1"]), 2);
        assert_eq!(main_with_args(["semicd", "eval", "--checkpoint", "/nonexistent/x.ckpt"]), 2);
        assert_eq!(exit_code(&Error::NumericAbort { iter: 1, reason: String::new() }), 3);
    }
}
