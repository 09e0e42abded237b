//! `cefa` command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 when a run
//! fails at runtime.

mod ablate;
mod record;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cefa::checkpoint;
use cefa::config::ExperimentConfig;
use cefa::data::{load_dataset, write_dataset};
use cefa::eval::{domain_probe, evaluate, export_embeddings, pooled_encoder_features, probe_sets};
use cefa::presets::Preset;
use cefa::trainer::{finetune, prepare_dataset, pretrain, MetricsRecord};

use record::{write_json, write_jsonl, RunRecord};

const SUBCOMMANDS: &str = "gen-data, train, eval, diagnose, ablate";

#[derive(Parser, Debug)]
#[command(name = "cefa", version, about = "Rare-interaction HOI training with generated images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the long-tail two-domain dataset and write it to disk.
    GenData(GenDataArgs),
    /// Pretrain on original images, then fine-tune with a preset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Domain probe and 2-D embedding export for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Run a preset matrix over several seeds and summarize it.
    Ablate(AblateArgs),
}

/// Options shared by commands that build an experiment configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key-value TOML file; `preset` and `scale` keys are honoured.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.finetune_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    /// Config file (or the quick scale when none is given), then overrides.
    pub fn load(&self) -> anyhow::Result<(ExperimentConfig, Option<String>)> {
        let (mut cfg, preset) = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => (ExperimentConfig::quick(), None),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| cefa::Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok((cfg, preset))
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    rare_threshold: Option<usize>,
    #[arg(long)]
    per_rare: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train on a dataset directory written by `gen-data` instead of
    /// synthesizing one from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Skip pretraining and start fine-tuning from this checkpoint.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file; defaults to `<output root>/eval/report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Embedding TSV; defaults to `<output root>/diagnose/embeddings.tsv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Matrix name: table3, table4 or fig4.
    #[arg(long)]
    preset: String,
    /// Number of seeds, run as 0..N.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<usize>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the run plan without training anything.
    #[arg(long)]
    plan_only: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Default output root: `$CEFA_OUT`, else `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("CEFA_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| output_root().join(command))
}

fn out_file(out: Option<PathBuf>, command: &str, name: &str) -> anyhow::Result<(PathBuf, PathBuf)> {
    let file = out.unwrap_or_else(|| output_root().join(command).join(name));
    let dir = match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    Ok((file, dir))
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(args: GenDataArgs, rec: &mut RunRecord) -> anyhow::Result<()> {
    let dir = out_dir(args.out, "gen-data");
    create_dir(&dir)?;
    rec.out_dir = dir.clone();
    rec.seed = Some(args.seed);
    let (mut cfg, _) = args.cfg.load()?;
    if let Some(n) = args.classes {
        cfg.data.classes = n;
    }
    if let Some(k) = args.rare_threshold {
        cfg.data.rare_threshold = k;
    }
    if let Some(m) = args.per_rare {
        cfg.data.per_rare = m;
    }
    let cfg = cfg.with_seed(args.seed);
    cfg.validate()?;
    rec.config = Some(cfg.clone());
    let ds = prepare_dataset(&cfg)?;
    write_dataset(&ds, &dir)?;
    let m = &ds.manifest;
    println!(
        "wrote {} samples ({} generated, {} rare categories) to {}",
        ds.len(),
        ds.train_generated().len(),
        m.rare_categories().len(),
        dir.display()
    );
    rec.artifacts.extend(["images", "annotations.json", "manifest.json"].map(|a| dir.join(a)));
    Ok(())
}

fn train(args: TrainArgs, rec: &mut RunRecord) -> anyhow::Result<()> {
    let dir = out_dir(args.out, "train");
    create_dir(&dir)?;
    rec.out_dir = dir.clone();
    rec.seed = Some(args.seed);
    let (base, file_preset) = args.cfg.load()?;
    let preset_name = args.preset.or(file_preset).unwrap_or_else(|| Preset::FullCefa.name().to_string());
    let preset: Preset = preset_name.parse()?;
    let cfg = preset.config(&base).with_seed(args.seed);
    cfg.validate()?;
    rec.preset = Some(preset_name);
    rec.config = Some(cfg.clone());

    let data = match &args.data {
        Some(d) => load_dataset(d)?,
        None => prepare_dataset(&cfg)?,
    };
    let (store, mut metrics): (_, Vec<MetricsRecord>) = match &args.pretrained {
        Some(p) => {
            let m = checkpoint::load(p)?;
            if m.fingerprint() != cfg.model_fingerprint() {
                return Err(cefa::Error::Fingerprint {
                    expected: cfg.model_fingerprint(),
                    found: m.fingerprint(),
                }
                .into());
            }
            (m.store, Vec::new())
        }
        None => pretrain(&cfg, &data)?,
    };
    let out = finetune(&cfg, &data, &store)?;
    metrics.extend(out.metrics);

    let ckpt = dir.join("checkpoint.json");
    checkpoint::save(&out.model, &ckpt)?;
    let metrics_path = dir.join("metrics.jsonl");
    write_jsonl(&metrics_path, &metrics)?;
    let report_path = dir.join("report.json");
    write_json(&report_path, &out.report)?;
    println!(
        "{preset}: map_full {:.4} map_rare {:.4} map_nonrare {:.4} probe {}",
        out.report.map_full,
        out.report.map_rare,
        out.report.map_nonrare,
        out.report.domain_probe_acc.map_or("n/a".to_string(), |p| format!("{p:.3}"))
    );
    rec.artifacts.extend([ckpt, metrics_path, report_path]);
    Ok(())
}

fn eval(args: EvalArgs, rec: &mut RunRecord) -> anyhow::Result<()> {
    let (file, dir) = out_file(args.out, "eval", "report.json")?;
    rec.out_dir = dir;
    let model = checkpoint::load(&args.checkpoint)?;
    rec.seed = Some(model.cfg.train.seed);
    rec.config = Some(model.cfg.clone());
    let data = load_dataset(&args.data)?;
    let report = evaluate(&model, &data, &model.cfg.eval)?;
    write_json(&file, &report)?;
    println!(
        "map_full {:.4} map_rare {:.4} map_nonrare {:.4} ({} images, {} ground truths)",
        report.map_full, report.map_rare, report.map_nonrare, report.num_images, report.num_gt
    );
    rec.artifacts.push(file);
    Ok(())
}

fn diagnose(args: DiagnoseArgs, rec: &mut RunRecord) -> anyhow::Result<()> {
    let (file, dir) = out_file(args.out, "diagnose", "embeddings.tsv")?;
    rec.out_dir = dir.clone();
    let model = checkpoint::load(&args.checkpoint)?;
    rec.seed = Some(model.cfg.train.seed);
    rec.config = Some(model.cfg.clone());
    let data = load_dataset(&args.data)?;
    let (src, gen) = probe_sets(&data);
    let exec = model.cfg.train.exec;
    let fs = pooled_encoder_features(&model, &data, &src, exec)?;
    let fg = pooled_encoder_features(&model, &data, &gen, exec)?;
    let acc = domain_probe(&fs, &fg, model.cfg.eval.probe_folds, 0)?;
    let labels: Vec<String> = src
        .iter()
        .map(|_| "original".to_string())
        .chain(gen.iter().map(|_| "generated".to_string()))
        .collect();
    let features: Vec<Vec<f32>> = fs.into_iter().chain(fg).collect();
    export_embeddings(&features, &labels, &file)?;
    let summary = dir.join("probe.json");
    write_json(
        &summary,
        &serde_json::json!({
            "domain_probe_acc": acc,
            "original": src.len(),
            "generated": gen.len(),
            "folds": model.cfg.eval.probe_folds,
        }),
    )?;
    println!("domain probe accuracy {acc:.4} on {} + {} images", src.len(), gen.len());
    rec.artifacts.extend([file, summary]);
    Ok(())
}

fn run(cmd: Command, rec: &mut RunRecord) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, rec),
        Command::Train(a) => train(a, rec),
        Command::Eval(a) => eval(a, rec),
        Command::Diagnose(a) => diagnose(a, rec),
        Command::Ablate(a) => ablate::run(a, rec),
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Diagnose(_) => "diagnose",
        Command::Ablate(_) => "ablate",
    }
}

/// 1 for bad input, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cefa::Error>() {
        Some(
            cefa::Error::Config(_)
            | cefa::Error::Validation { .. }
            | cefa::Error::UnknownCategory { .. }
            | cefa::Error::MissingImage { .. }
            | cefa::Error::Fingerprint { .. },
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
                    eprintln!("subcommands: {SUBCOMMANDS}");
                    ExitCode::from(1)
                }
                ErrorKind::InvalidSubcommand => {
                    eprintln!("available subcommands: {SUBCOMMANDS}");
                    ExitCode::from(1)
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let name = command_name(&cli.command);
    let mut rec = RunRecord::start(name);
    let result = run(cli.command, &mut rec);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(e)
        }
    };
    rec.finish(result.as_ref().err().map(|e| format!("{e:#}")));
    // only a failure to create the output directory leaves no record
    if rec.out_dir.as_os_str().is_empty() {
        return ExitCode::from(code);
    }
    if let Err(e) = rec.write() {
        eprintln!("error: writing run record: {e:#}");
        return ExitCode::from(2);
    }
    ExitCode::from(code)
}
