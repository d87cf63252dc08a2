//! The `volnet` command line: synth, train, inspect, ci and eval.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::arch::{count_parameters, LayerInfo, Preset};
use crate::data::{
    generate_phantoms, load_manifest, split_dataset, Dataset, DatasetSplit, Manifest, PhantomConfig, Roi, Subset,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, MetricWithCi, DEFAULT_THETA};
use crate::train::{history_csv, load_checkpoint, save_checkpoint, train_loop, Checkpoint, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const THREADS_ENV: &str = "VOLNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "volnet", version, about = "Volumetric ROI classification with late-fused 3-D CNN pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train a network from a run configuration.
    Train(TrainArgs),
    /// Print layer shapes and parameter counts of presets.
    Inspect(InspectArgs),
    /// Print a normal-approximation confidence interval.
    Ci(CiArgs),
    /// Evaluate a checkpoint on one subset of a split.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `last.ckpt` in the output directory if present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long = "preset", required = true, num_args = 1..)]
    pub presets: Vec<Preset>,
    #[arg(long)]
    pub f0: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CiArgs {
    #[arg(long)]
    pub value: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Size the global worker pool from `VOLNET_THREADS` (default 1).
pub fn configure_threads() -> Result<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    // a pool built earlier in this process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Synth(a) => cmd_synth(a, out).map(|_| ()),
        Command::Train(a) => cmd_train(a, out).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::Ci(a) => cmd_ci(a, out),
        Command::Eval(a) => cmd_eval(a, out).map(|_| ()),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<output>"),
        source: e,
    }
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<Manifest> {
    let config = PhantomConfig {
        classes: PhantomConfig::classes_for(args.classes)?,
        per_class: args.per_class,
        seed: args.seed,
        noise: args.noise,
        ..Default::default()
    };
    let manifest = generate_phantoms(&config, &args.out)?;
    writeln!(out, "manifest: {}", args.out.join("manifest.csv").display()).map_err(io_err)?;
    for (label, n) in manifest.class_counts() {
        writeln!(out, "  {label}: {n} subjects").map_err(io_err)?;
    }
    Ok(manifest)
}

/// A training run: the hyperparameters plus the paths they apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Frozen split file; created on first use.
    pub split: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse a flat JSON object. `manifest` and `split` resolve against `base`;
    /// every other key must be a training field.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        let mut path = |key: &str| -> Result<Option<PathBuf>> {
            match map.remove(key) {
                None | Some(serde_json::Value::Null) => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(base.join(s))),
                Some(other) => Err(Error::config(format!("{key} must be a path string, got {other}"))),
            }
        };
        let manifest = path("manifest")?.ok_or_else(|| Error::config("run config needs a manifest path"))?;
        let split = path("split")?;
        let train: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::config(format!("run config: {e}")))?;
        train.validate()?;
        Ok(RunConfig { manifest, split, train })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Outputs of `cmd_train`.
pub struct TrainRun {
    pub report: EvalReport,
    pub best_epoch: Option<usize>,
    pub history: Vec<crate::train::EpochRecord>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn frozen_split(run: &RunConfig, manifest: &Manifest, out_dir: &Path) -> Result<DatasetSplit> {
    let local = out_dir.join("split.json");
    let source = run.split.clone().unwrap_or_else(|| local.clone());
    let split = if source.exists() {
        DatasetSplit::load(&source)?
    } else {
        let s = split_dataset(manifest, run.train.seed)?;
        s.save(&source)?;
        s
    };
    split.validate(manifest)?;
    if source != local {
        split.save(&local)?;
    }
    Ok(split)
}

pub fn dataset_for(manifest: &Manifest, preset: Preset, task: crate::data::Task) -> Result<Dataset> {
    let inputs = preset.inputs().iter().map(|c| c.parse()).collect::<Result<Vec<Roi>>>()?;
    Dataset::load(manifest, &inputs, task)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainRun> {
    let run = RunConfig::load(&args.config)?;
    train_run(&run, &args.out, args.resume, out)
}

/// Train per `run`, writing best.ckpt, last.ckpt, history.csv, report.json
/// and split.json under `out_dir`.
pub fn train_run(run: &RunConfig, out_dir: &Path, resume: bool, out: &mut dyn Write) -> Result<TrainRun> {
    let cfg = &run.train;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = load_manifest(&run.manifest)?;
    let split = frozen_split(run, &manifest, out_dir)?;
    let data = dataset_for(&manifest, cfg.preset, cfg.task)?;
    let spec = cfg.preset.build(cfg.task.classes().len(), cfg.width, cfg.keep_prob)?;
    let last = out_dir.join("last.ckpt");
    let state = if resume && last.exists() {
        let ckpt = load_checkpoint(&last)?;
        if ckpt.meta.config_digest != cfg.digest() {
            return Err(Error::config("last.ckpt was written with a different configuration"));
        }
        writeln!(out, "resuming after epoch {}", ckpt.meta.epoch).map_err(io_err)?;
        Some(ckpt.train_state()?)
    } else {
        None
    };
    let mut on_epoch = |state: &crate::train::TrainState, r: &crate::train::EpochRecord| -> Result<()> {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            out,
            "epoch {:>3}  train {:.4}/{:.3}  val {}/{}  test {}/{}  lr {:.2e}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            f(r.val_loss),
            f(r.val_acc),
            f(r.test_loss),
            f(r.test_acc),
            r.lr
        )
        .map_err(io_err)?;
        save_checkpoint(&Checkpoint::resumable(cfg, state), &last)
    };
    let outcome = train_loop(&spec, &data, &split, cfg, state, &mut on_epoch)?;
    let history = outcome.state.history.clone();
    let ckpt = Checkpoint::model(cfg, outcome.best_params.clone(), &history, outcome.best_epoch);
    save_checkpoint(&ckpt, out_dir.join("best.ckpt"))?;
    write_file(&out_dir.join("history.csv"), history_csv(&history).as_bytes())?;
    let net = ckpt.network()?;
    let test: Vec<usize> = data.members(&split.test)?.into_iter().flatten().collect();
    let report = evaluate(&net, &data, &test, cfg.preset.name(), "test", cfg.theta)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&out_dir.join("report.json"), json.as_bytes())?;
    let summary = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    write_file(&out_dir.join("summary.csv"), summary.as_bytes())?;
    if let Some(e) = outcome.best_epoch {
        writeln!(out, "best epoch {e}").map_err(io_err)?;
    }
    writeln!(out, "{}", report.summary_line()).map_err(io_err)?;
    Ok(TrainRun {
        report,
        best_epoch: outcome.best_epoch,
        history,
    })
}

#[derive(Serialize)]
struct PresetReport {
    preset: String,
    layers: Vec<LayerInfo>,
    total: usize,
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let mut reports = Vec::new();
    for &preset in &args.presets {
        let spec = preset.build(args.classes, args.f0, crate::arch::DEFAULT_KEEP_PROB)?;
        reports.push(PresetReport {
            preset: preset.name().to_string(),
            layers: spec.trace()?,
            total: count_parameters(&spec)?.total,
        });
    }
    let ratio = (reports.len() == 2).then(|| reports[1].total as f64 / reports[0].total as f64);
    if args.json {
        let doc = serde_json::json!({ "presets": reports, "ratio": ratio });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("json")).map_err(io_err)?;
        return Ok(());
    }
    for r in &reports {
        writeln!(out, "{}", r.preset).map_err(io_err)?;
        for l in &r.layers {
            writeln!(out, "  {:<40} {:<16} {:<18} {:>9}", l.name, l.kind, format!("{:?}", l.output_shape), l.parameters)
                .map_err(io_err)?;
        }
        writeln!(out, "  total parameters: {}", r.total).map_err(io_err)?;
    }
    if let Some(ratio) = ratio {
        writeln!(out, "ratio {}/{}: {ratio:.2}", reports[1].preset, reports[0].preset).map_err(io_err)?;
    }
    Ok(())
}

pub fn cmd_ci(args: &CiArgs, out: &mut dyn Write) -> Result<()> {
    let m = MetricWithCi::new(args.value, args.n, args.theta)?;
    writeln!(out, "{}", m.summary()).map_err(io_err)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let subset: Subset = args.subset.parse()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let split = DatasetSplit::load(&args.split)?;
    split.validate(&manifest)?;
    let data = dataset_for(&manifest, ckpt.meta.preset, ckpt.meta.task)?;
    let net = ckpt.network()?;
    let members: Vec<usize> = data.members(split.subset(subset))?.into_iter().flatten().collect();
    let report = evaluate(
        &net,
        &data,
        &members,
        ckpt.meta.preset.name(),
        &subset.to_string(),
        ckpt.meta.config.theta,
    )?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(p) = &args.out {
        write_file(p, json.as_bytes())?;
    }
    write!(out, "{json}").map_err(io_err)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(
            std::iter::once("volnet").chain(args.iter().copied()).map(String::from),
            &mut o,
            &mut e,
        );
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn ci_lines() {
        assert_eq!(run_str(&["ci", "--value", "0.933", "--n", "30"]).1, "0.933 ±0.089 [0.844, 1.022]\n");
        assert!(run_str(&["ci", "--value", "0.689", "--n", "45"]).1.contains("±0.135"));
        assert!(run_str(&["ci", "--value", "1.0", "--n", "30"]).1.contains("±0.000"));
        assert_eq!(run_str(&["ci", "--value", "1.5", "--n", "30"]).0, EXIT_USAGE);
        assert_eq!(run_str(&["ci", "--value", "0.5", "--n", "0"]).0, EXIT_USAGE);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_str(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(run_str(&["inspect", "--preset", "nope"]).0, EXIT_USAGE);
        assert_eq!(run_str(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn inspect_text_and_json_agree() {
        let (code, text, _) = run_str(&["inspect", "--preset", "proposed-4roi", "--preset", "alexnet-4roi"]);
        assert_eq!(code, 0);
        let ratio_line = text.lines().last().unwrap();
        let ratio: f64 = ratio_line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(ratio >= 5.0);
        let (_, json, _) = run_str(&["inspect", "--preset", "proposed-4roi", "--preset", "alexnet-4roi", "--json"]);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let total = v["presets"][0]["total"].as_u64().unwrap();
        assert!(text.contains(&format!("total parameters: {total}")));
        let (_, small, _) = run_str(&["inspect", "--preset", "proposed-2roi-smri", "--json"]);
        let s: serde_json::Value = serde_json::from_str(&small).unwrap();
        assert!(s["presets"][0]["total"].as_u64().unwrap() < total);
    }

    #[test]
    fn synth_rejects_small_classes_and_missing_manifest_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        assert_eq!(run_str(&["synth", "--out", d, "--per-class", "10"]).0, EXIT_USAGE);
        let cfg = dir.path().join("run.json");
        std::fs::write(&cfg, r#"{"manifest": "missing.csv"}"#).unwrap();
        let (code, _, err) = run_str(&["train", "--config", cfg.to_str().unwrap(), "--out", d]);
        assert_eq!(code, EXIT_IO);
        assert!(err.contains("missing.csv"));
        std::fs::write(&cfg, r#"{"manifest": "m.csv", "tua": 3}"#).unwrap();
        assert_eq!(run_str(&["train", "--config", cfg.to_str().unwrap(), "--out", d]).0, EXIT_USAGE);
    }

    #[test]
    fn run_config_resolves_paths() {
        let r = RunConfig::from_json(r#"{"manifest":"data/m.csv","split":"s.json","seed":4}"#, Path::new("/x")).unwrap();
        assert_eq!(r.manifest, PathBuf::from("/x/data/m.csv"));
        assert_eq!(r.split, Some(PathBuf::from("/x/s.json")));
        assert_eq!(r.train.seed, 4);
        assert!(RunConfig::from_json(r#"{"seed":4}"#, Path::new("/x")).is_err());
    }
}
