//! Pretraining, fine-tuning and the preset runner.

use serde::{Deserialize, Serialize};

use super::{LossBreakdown, StepOutput, Trainer};
use crate::config::ExperimentConfig;
use crate::data::{build_longtail_dataset, generate_supplement, Dataset};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::params::ParamStore;
use crate::presets::Preset;

/// One line of the metrics log. Evaluation fields are absent on records
/// written without an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub losses: LossBreakdown,
    pub pseudo_labels: usize,
    pub map_full: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub domain_probe_acc: Option<f64>,
}

impl MetricsRecord {
    fn new(phase: &str, epoch: usize, steps: usize, outs: &[StepOutput]) -> Self {
        let losses: Vec<LossBreakdown> = outs.iter().map(|o| o.losses).collect();
        Self {
            phase: phase.to_string(),
            epoch,
            steps,
            losses: LossBreakdown::mean(&losses),
            pseudo_labels: outs.iter().map(|o| o.pseudo_labels).sum(),
            map_full: None,
            map_rare: None,
            map_nonrare: None,
            domain_probe_acc: None,
        }
    }

    fn with_report(mut self, r: &EvalReport) -> Self {
        self.map_full = Some(r.map_full);
        self.map_rare = Some(r.map_rare);
        self.map_nonrare = Some(r.map_nonrare);
        self.domain_probe_acc = r.domain_probe_acc;
        self
    }
}

pub struct ExperimentOutput {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub report: EvalReport,
    pub config: ExperimentConfig,
}

/// Long-tail originals plus, when `data.per_rare > 0`, the generated
/// supplement for every rare category.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let ds = build_longtail_dataset(&cfg.scene, &cfg.data)?;
    if cfg.data.per_rare == 0 {
        return Ok(ds);
    }
    generate_supplement(&ds, &cfg.scene, cfg.data.per_rare, cfg.data.seed)
}

/// Detector-only configuration used for supervised pretraining.
pub fn pretrain_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut p = cfg.clone();
    p.align.encoder = false;
    p.align.instance = false;
    p.ctx.enabled = false;
    p.train.use_generated = false;
    p.train.frozen.clear();
    p
}

/// Supervised training on the original images; returns the weights and one
/// record per epoch. The learning rate drops tenfold for the last quarter.
pub fn pretrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<(ParamStore, Vec<MetricsRecord>)> {
    let p = pretrain_config(cfg);
    let mut trainer = Trainer::pretraining(Model::new(&p)?, data)?;
    let mut metrics = Vec::new();
    let drop_at = p.train.pretrain_epochs * 3 / 4;
    for epoch in 0..p.train.pretrain_epochs {
        if epoch == drop_at {
            trainer.opt.set_lr_scale(0.1);
        }
        let outs = trainer.epoch()?;
        metrics.push(MetricsRecord::new("pretrain", epoch, trainer.step, &outs));
    }
    Ok((trainer.into_model().store, metrics))
}

/// Two-domain fine-tuning from pretrained detector weights. With
/// `train.eval_every > 0` each chunk of that many steps is one evaluated
/// epoch; otherwise only the final model is evaluated.
pub fn finetune(cfg: &ExperimentConfig, data: &Dataset, pretrained: &ParamStore) -> Result<ExperimentOutput> {
    let mut model = Model::new(cfg)?;
    model.load_detector_from(pretrained)?;
    let mut trainer = Trainer::new(model, data)?;
    let total = cfg.train.finetune_steps;
    let chunk = if cfg.train.eval_every == 0 { total.max(1) } else { cfg.train.eval_every };
    let mut metrics = Vec::new();
    let mut done = 0;
    let mut epoch = 0;
    let mut last: Option<EvalReport> = None;
    while done < total {
        let n = chunk.min(total - done);
        let outs = (0..n).map(|_| trainer.step()).collect::<Result<Vec<_>>>()?;
        done += n;
        let mut rec = MetricsRecord::new("finetune", epoch, trainer.step, &outs);
        if cfg.train.eval_every > 0 || done == total {
            let r = evaluate(&trainer.model, data, &cfg.eval)?;
            rec = rec.with_report(&r);
            last = Some(r);
        }
        metrics.push(rec);
        epoch += 1;
    }
    let model = trainer.into_model();
    let report = match last {
        Some(r) => r,
        None => evaluate(&model, data, &cfg.eval)?,
    };
    Ok(ExperimentOutput {
        model,
        metrics,
        report,
        config: cfg.clone(),
    })
}

/// Full pipeline for one preset and seed: data, pretraining, fine-tuning.
pub fn run_experiment(base: &ExperimentConfig, preset: Preset, seed: u64) -> Result<ExperimentOutput> {
    let cfg = preset.config(base).with_seed(seed);
    cfg.validate()?;
    let data = prepare_dataset(&cfg)?;
    let (store, mut metrics) = pretrain(&cfg, &data)?;
    let mut out = finetune(&cfg, &data, &store)?;
    metrics.append(&mut out.metrics);
    out.metrics = metrics;
    Ok(out)
}
