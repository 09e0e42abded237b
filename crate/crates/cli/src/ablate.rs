//! Preset matrices over seeds, summarized as mean ± std per cell.
//!
//! Pretraining depends only on the original images and the detector
//! architecture, so each seed pretrains once and every cell of that seed
//! fine-tunes from the same weights.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cefa::config::ExperimentConfig;
use cefa::data::Dataset;
use cefa::params::ParamStore;
use cefa::presets::{Cell, Matrix};
use cefa::trainer::{finetune, prepare_dataset, pretrain};

use crate::record::{write_json, write_jsonl, RunRecord};
use crate::{create_dir, output_root, AblateArgs};

#[derive(Debug)]
pub struct PartialFailure {
    pub failed: usize,
    pub total: usize,
}

impl fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} of {} ablation runs failed; see summary.csv", self.failed, self.total)
    }
}

impl std::error::Error for PartialFailure {}

#[derive(Clone, Debug, Serialize)]
pub struct PlannedRun {
    pub cell: String,
    pub preset: String,
    pub per_rare: Option<usize>,
    pub seed: u64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub cell: String,
    pub seed: u64,
    pub map_full: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub domain_probe_acc: Option<f64>,
    pub error: Option<String>,
}

pub fn seeds(count: Option<usize>, list: Option<Vec<u64>>) -> cefa::Result<Vec<u64>> {
    let seeds = match (count, list) {
        (_, Some(l)) => l,
        (Some(n), None) => (0..n as u64).collect(),
        (None, None) => Vec::new(),
    };
    if seeds.is_empty() {
        return Err(cefa::Error::Config("ablate needs at least one seed (--seeds N or --seed-list)".into()));
    }
    Ok(seeds)
}

pub fn plan(matrix: Matrix, seeds: &[u64], dir: &Path) -> Vec<PlannedRun> {
    let cells = matrix.cells();
    seeds
        .iter()
        .flat_map(|&seed| {
            cells.iter().map(move |c| PlannedRun {
                cell: c.label.clone(),
                preset: c.preset.name().to_string(),
                per_rare: c.per_rare,
                seed,
                dir: dir.join(&c.label).join(format!("seed_{seed}")),
            })
        })
        .collect()
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// One CSV row per cell, in matrix order. Cells without any successful
/// seed print `NA`; failed seeds are listed in `missing_seeds`.
pub fn summary_csv(cells: &[Cell], results: &[RunResult]) -> String {
    let mut out = String::from(
        "cell,preset,per_rare,seeds_ok,seeds_total,map_rare_mean,map_rare_std,map_full_mean,map_full_std,map_nonrare_mean,map_nonrare_std,domain_probe_mean,missing_seeds\n",
    );
    for c in cells {
        let rows: Vec<&RunResult> = results.iter().filter(|r| r.cell == c.label).collect();
        let ok: Vec<&RunResult> = rows.iter().copied().filter(|r| r.error.is_none()).collect();
        let col = |f: fn(&RunResult) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
        let ms = |v: Vec<f64>| match mean_std(&v) {
            Some((m, s)) => format!("{m:.6},{s:.6}"),
            None => "NA,NA".to_string(),
        };
        let probe = match mean_std(&col(|r| r.domain_probe_acc)) {
            Some((m, _)) => format!("{m:.6}"),
            None => "NA".to_string(),
        };
        let missing: Vec<String> = rows.iter().filter(|r| r.error.is_some()).map(|r| r.seed.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.label,
            c.preset.name(),
            c.per_rare.map_or(String::new(), |n| n.to_string()),
            ok.len(),
            rows.len(),
            ms(col(|r| r.map_rare)),
            ms(col(|r| r.map_full)),
            ms(col(|r| r.map_nonrare)),
            probe,
            missing.join(";"),
        ));
    }
    out
}

fn run_cell(base: &ExperimentConfig, cell: &Cell, data: &Dataset, store: &ParamStore, dir: &Path) -> anyhow::Result<RunResult> {
    let mut cfg = cell.preset.config(base);
    let owned;
    let data = match cell.per_rare {
        Some(n) if n != cfg.data.per_rare => {
            cfg.data.per_rare = n;
            owned = prepare_dataset(&cfg)?;
            &owned
        }
        _ => data,
    };
    let out = finetune(&cfg, data, store)?;
    create_dir(dir)?;
    write_jsonl(&dir.join("metrics.jsonl"), &out.metrics)?;
    write_json(&dir.join("report.json"), &out.report)?;
    Ok(RunResult {
        cell: cell.label.clone(),
        seed: cfg.train.seed,
        map_full: Some(out.report.map_full),
        map_rare: Some(out.report.map_rare),
        map_nonrare: Some(out.report.map_nonrare),
        domain_probe_acc: out.report.domain_probe_acc,
        error: None,
    })
}

fn failed(cell: &Cell, seed: u64, e: &anyhow::Error) -> RunResult {
    RunResult {
        cell: cell.label.clone(),
        seed,
        map_full: None,
        map_rare: None,
        map_nonrare: None,
        domain_probe_acc: None,
        error: Some(format!("{e:#}")),
    }
}

pub fn run(args: AblateArgs, rec: &mut RunRecord) -> anyhow::Result<()> {
    let dir = args.out.clone().unwrap_or_else(|| output_root().join("ablate"));
    create_dir(&dir)?;
    rec.out_dir = dir.clone();
    rec.preset = Some(args.preset.clone());
    let matrix: Matrix = args.preset.parse()?;
    let seeds = seeds(args.seeds, args.seed_list.clone())?;
    let (base, _) = args.cfg.load()?;
    rec.config = Some(base.clone());

    let runs = plan(matrix, &seeds, &dir);
    let plan_path = dir.join("plan.json");
    write_json(&plan_path, &runs)?;
    rec.artifacts.push(plan_path);
    println!("{}: {} cells x {} seeds = {} runs", matrix.name(), matrix.cells().len(), seeds.len(), runs.len());
    if args.plan_only {
        return Ok(());
    }

    let cells = matrix.cells();
    let mut results = Vec::new();
    for &seed in &seeds {
        let cfg = base.clone().with_seed(seed);
        let prepared = prepare_dataset(&cfg).and_then(|d| pretrain(&cfg, &d).map(|(s, _)| (d, s)));
        for cell in &cells {
            let run_dir = dir.join(&cell.label).join(format!("seed_{seed}"));
            let r = match &prepared {
                Ok((data, store)) => run_cell(&cfg, cell, data, store, &run_dir).unwrap_or_else(|e| failed(cell, seed, &e)),
                Err(e) => failed(cell, seed, &anyhow::anyhow!("pretraining failed: {e}")),
            };
            match (&r.error, r.map_rare) {
                (Some(e), _) => eprintln!("  {} seed {seed}: FAILED {e}", cell.label),
                (None, Some(m)) => println!("  {} seed {seed}: map_rare {m:.4}", cell.label),
                _ => {}
            }
            results.push(r);
        }
    }
    let results_path = dir.join("runs.jsonl");
    write_jsonl(&results_path, &results)?;
    let summary = summary_csv(&cells, &results);
    let summary_path = dir.join("summary.csv");
    std::fs::write(&summary_path, &summary)?;
    print!("{summary}");
    rec.artifacts.extend([results_path, summary_path]);
    let failures = results.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        return Err(PartialFailure {
            failed: failures,
            total: results.len(),
        }
        .into());
    }
    Ok(())
}
