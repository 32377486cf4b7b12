//! `twostream`: the pipeline from synthetic data to ablation tables.
//!
//! Every subcommand works inside one output directory:
//!
//! ```text
//! <out-dir>/config.toml            effective configuration of the last command
//! <out-dir>/data/                  manifest.json + video_*.bin
//! <out-dir>/groupers/              grouper_*.ckpt + pretrain.json
//! <out-dir>/models/<mode>/<dir>/   model.json, final.ckpt, train_log.jsonl
//! <out-dir>/reports/<mode>.json    evaluation reports
//! <out-dir>/ablation/ablation.csv  grid results
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use twostream_core::data::{Dataset, Stream};
use twostream_core::grouper::{GrouperConfig, GrouperModel, PretrainReport};
use twostream_core::harness::{
    build_groupers, evaluate, load_groupers, read_json, run_ablation_grid, save_groupers,
    write_json, EvalReport, HarnessConfig, Layout,
};
use twostream_core::trainer::{train_mode, JointModel, Mode, ModelSet};
use twostream_core::Error;

#[derive(Parser)]
#[command(
    name = "twostream",
    version,
    about = "Coarse-to-fine two-stream action recognition on synthetic videos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; omitted keys keep their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for this step (data, grouper or training, depending on the command).
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory shared by all steps.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <out-dir>/data.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train and freeze the class groupers.
    PretrainGrouper {
        #[command(flatten)]
        common: Common,
        /// Share of each class's training videos used.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Grouper directory; defaults to <out-dir>/groupers.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model(s) of one mode; fusion modes train both anchor directions.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "co2fi+asyn5")]
        mode: String,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Evaluate trained models over uniformly spaced periods.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "co2fi+asyn5")]
        mode: String,
        /// Checkpoint name to load: `final` or `best`.
        #[arg(long, default_value = "final")]
        checkpoint: String,
    },
    /// Train and evaluate every (mode, seed) of the ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        /// Comma-separated seeds; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Collect evaluation reports into CSV summaries.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Result<HarnessConfig, Failure> {
    match &common.config {
        None => Ok(HarnessConfig::default()),
        Some(path) if !path.is_file() => Err(Failure::Usage(format!(
            "config file {} not found",
            path.display()
        ))),
        Some(path) => HarnessConfig::load(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display()))),
    }
}

fn parse_mode(name: &str) -> Result<Mode, Failure> {
    name.parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))
}

/// Records the effective configuration next to the outputs it produced.
fn save_config(layout: &Layout, cfg: &HarnessConfig) -> CmdResult {
    fs::create_dir_all(&layout.root)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", layout.root.display())))?;
    let path = layout.root.join("config.toml");
    fs::write(&path, cfg.to_toml()?)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn open_data(layout: &Layout) -> Result<Dataset, Failure> {
    let dir = layout.data();
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::Runtime(format!(
            "no dataset in {}; run gen-data first",
            dir.display()
        )));
    }
    Ok(Dataset::load(&dir)?)
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::PretrainGrouper {
            common,
            fraction,
            iters,
            out,
        } => pretrain(&common, fraction, iters, out),
        Command::Train {
            common,
            mode,
            iters,
        } => train(&common, &mode, iters),
        Command::Eval {
            common,
            mode,
            checkpoint,
        } => eval(&common, &mode, &checkpoint),
        Command::Ablate {
            common,
            modes,
            seeds,
        } => ablate(&common, modes, seeds),
        Command::Report { common } => report(&common),
    }
}

fn gen_data(common: &Common) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let layout = Layout::new(&common.out_dir);
    let ds = Dataset::generate(&cfg.data)?;
    ds.save(&layout.data())?;
    save_config(&layout, &cfg)?;
    println!(
        "wrote {} videos to {}",
        ds.videos().len(),
        layout.data().display()
    );
    Ok(())
}

fn pretrain(
    common: &Common,
    fraction: Option<f64>,
    iters: Option<usize>,
    out: Option<PathBuf>,
) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(f) = fraction {
        cfg.grouper.fraction = f;
    }
    if let Some(n) = iters {
        cfg.grouper.iterations = n;
    }
    let layout = Layout::new(&common.out_dir);
    let ds = open_data(&layout)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let (groupers, reports) = build_groupers(&ds, &cfg.grouper, cfg.shared_grouper, seed)?;
    let dir = out.unwrap_or_else(|| layout.groupers());
    let models: Vec<&GrouperModel> = if cfg.shared_grouper {
        vec![groupers.get(Stream::Appearance)]
    } else {
        Stream::BOTH.iter().map(|&s| groupers.get(s)).collect()
    };
    save_groupers(&models, &dir)?;
    write_json(
        &dir.join("pretrain.json"),
        &PretrainLog {
            seed,
            config: &cfg.grouper,
            reports: &reports,
        },
    )?;
    save_config(&layout, &cfg)?;
    for r in &reports {
        println!(
            "{} grouper: {} samples, train {:.3}, held-out {:.3}, hash {}",
            r.stream.name(),
            r.samples,
            r.train_accuracy,
            r.heldout_accuracy,
            &r.hash[..12]
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct PretrainLog<'a> {
    seed: u64,
    config: &'a GrouperConfig,
    reports: &'a [PretrainReport],
}

fn train(common: &Common, mode: &str, iters: Option<usize>) -> CmdResult {
    let mode = parse_mode(mode)?;
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = iters {
        cfg.train.iterations = n;
    }
    let layout = Layout::new(&common.out_dir);
    let ds = open_data(&layout)?;
    let groupers = if mode.needs_grouper() {
        let dir = layout.groupers();
        if !dir.is_dir() {
            return Err(Failure::Runtime(format!(
                "mode {mode} needs groupers in {}; run pretrain-grouper first",
                dir.display()
            )));
        }
        Some(load_groupers(&dir, &cfg)?)
    } else {
        None
    };
    let (_, logs) = train_mode(
        &ds,
        groupers.as_ref(),
        mode,
        &cfg.train,
        Some(&layout.models(&mode)),
    )?;
    save_config(&layout, &cfg)?;
    for (anchor, log) in ModelSet::anchors(mode).into_iter().zip(logs) {
        let last = log.last().map_or(f64::NAN, |r| r.loss);
        println!(
            "{mode} [{}]: {} iterations, final loss {last:.4}",
            ModelSet::dir_name(anchor),
            log.len()
        );
    }
    Ok(())
}

fn eval(common: &Common, mode: &str, checkpoint: &str) -> CmdResult {
    let mode = parse_mode(mode)?;
    if checkpoint != "final" && checkpoint != "best" {
        return Err(Failure::Usage(format!(
            "checkpoint must be `final` or `best`, got `{checkpoint}`"
        )));
    }
    let cfg = load_config(common)?;
    let layout = Layout::new(&common.out_dir);
    let ds = open_data(&layout)?;
    let mut models = Vec::new();
    for anchor in ModelSet::anchors(mode) {
        let dir = layout.models(&mode).join(ModelSet::dir_name(anchor));
        if !dir.join("model.json").is_file() {
            return Err(Failure::Runtime(format!(
                "no trained model in {}; run train first",
                dir.display()
            )));
        }
        models.push(JointModel::load(&dir, checkpoint)?);
    }
    let set = ModelSet { mode, models };
    let mut report = evaluate(&set, &ds, &cfg.eval)?;
    if mode.needs_grouper() {
        report.grouper = Some(cfg.grouper.clone());
        report.grouper_hashes = load_groupers(&layout.groupers(), &cfg)?.hashes();
    }
    let path = layout.reports().join(format!("{mode}.json"));
    write_json(&path, &report)?;
    println!(
        "{mode}: accuracy {:.4} on {} test videos ({})",
        report.accuracy,
        report.videos,
        path.display()
    );
    Ok(())
}

fn ablate(common: &Common, modes: Option<Vec<String>>, seeds: Option<Vec<u64>>) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(m) = modes {
        cfg.ablation.modes = m;
    }
    if let Some(s) = seeds {
        cfg.ablation.seeds = s;
    } else if let Some(s) = common.seed {
        cfg.ablation.seeds = vec![s];
    }
    let layout = Layout::new(&common.out_dir);
    let ds = if layout.data().join("manifest.json").is_file() {
        Dataset::load(&layout.data())?
    } else {
        Dataset::generate(&cfg.data)?
    };
    if ds.config() != &cfg.data {
        return Err(Failure::Usage(format!(
            "dataset in {} was generated with a different data configuration",
            layout.data().display()
        )));
    }
    let out = layout.root.join("ablation");
    let result = run_ablation_grid(&cfg, &ds, &out)?;
    save_config(&layout, &cfg)?;
    for a in &result.aggregates {
        println!(
            "{:<28} {:.4} ± {:.4} ({} runs)",
            a.mode, a.mean, a.std, a.runs
        );
    }
    println!("wrote {}", out.join("ablation.csv").display());
    if !result.unknown.is_empty() {
        return Err(Failure::Usage(format!(
            "skipped unknown modes: {}",
            result.unknown.join(", ")
        )));
    }
    Ok(())
}

/// Column order of `summary.csv`.
const SUMMARY_HEADER: &str = "schema_version,mode,accuracy,videos,periods,data_seed,train_seed";

fn report(common: &Common) -> CmdResult {
    let layout = Layout::new(&common.out_dir);
    let dir = layout.reports();
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Runtime(format!(
            "no evaluation reports in {}; run eval first",
            dir.display()
        )));
    }
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for path in &paths {
        let r: EvalReport = read_json(path)?;
        let _ = writeln!(
            summary,
            "1,{},{:.6},{},{},{},{}",
            r.mode, r.accuracy, r.videos, r.periods, r.data_seed, r.train_seed
        );
        println!("{:<28} {:.4}", r.mode.to_string(), r.accuracy);
        if !r.traces.is_empty() {
            write_traces(&dir, &r)?;
        }
    }
    let path = dir.join("summary.csv");
    fs::write(&path, summary).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// One row per (video, period) with the combined class scores.
fn write_traces(dir: &Path, r: &EvalReport) -> CmdResult {
    let classes = r.confusion.len();
    let mut out = String::from("schema_version,video,label,period,anchor");
    for c in 0..classes {
        let _ = write!(out, ",score_{c}");
    }
    out.push('\n');
    for t in &r.traces {
        for (p, (anchor, scores)) in t.anchors.iter().zip(&t.scores).enumerate() {
            let _ = write!(out, "1,{},{},{p},{anchor}", t.video, t.label);
            for s in scores {
                let _ = write!(out, ",{s:.6}");
            }
            out.push('\n');
        }
    }
    let path = dir.join(format!("{}_traces.csv", r.mode));
    fs::write(&path, out).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}
