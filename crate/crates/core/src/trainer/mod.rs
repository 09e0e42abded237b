//! Loss composition and the two-domain training loop.
//!
//! Each step draws a batch of original images and a batch of generated ones.
//! Every generated image is paired with an original of the same category
//! from the batch (else a random one) and processed in the same graph, so
//! the context branch can condition on that original's encoder tokens.
//! Per-pair graphs run through [`crate::par`] and their gradients are merged
//! in input order.

mod experiment;
mod hoi_loss;
pub mod matcher;
mod optim;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::grl_lambda;
use crate::autograd::{Gradients, Graph, Var};
use crate::config::LabelSource;
use crate::data::{derive_seed, random_shift, Dataset, Domain, HoiAnnotation, Image};
use crate::detector::Prediction;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::params::Group;

pub use experiment::{
    finetune, prepare_dataset, pretrain, pretrain_config, run_experiment, ExperimentOutput, MetricsRecord,
};
pub use hoi_loss::{dedup_pseudo_labels, giou_rows, hoi_loss};
pub use optim::Adam;

/// The loss ledger of one step. Source-domain adversarial terms form
/// `l_adv`; their generated-domain counterparts form `l_adv_gen`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_enc: f64,
    pub l_inst: f64,
    pub l_enc_gen: f64,
    pub l_inst_gen: f64,
    pub l_ctx: f64,
    pub l_adv: f64,
    pub l_adv_gen: f64,
    pub l_src: f64,
    pub l_gen: f64,
    pub total: f64,
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

impl LossBreakdown {
    /// Fills the composite entries from the component terms.
    pub fn compose(mut self) -> Self {
        self.l_adv = self.l_enc + self.l_inst;
        self.l_adv_gen = self.l_enc_gen + self.l_inst_gen;
        self.l_src = self.l_sup + self.l_adv;
        self.l_gen = self.l_unsup + self.l_ctx + self.l_adv_gen;
        self.total = self.l_src + self.l_gen;
        self
    }

    /// Checks every composition identity to `rel` relative error.
    pub fn check(&self, rel: f64) -> Result<()> {
        let checks = [
            ("l_adv = l_enc + l_inst", self.l_adv, self.l_enc + self.l_inst),
            ("l_adv_gen = l_enc_gen + l_inst_gen", self.l_adv_gen, self.l_enc_gen + self.l_inst_gen),
            ("l_src = l_sup + l_adv", self.l_src, self.l_sup + self.l_adv),
            ("l_gen = l_unsup + l_ctx + l_adv_gen", self.l_gen, self.l_unsup + self.l_ctx + self.l_adv_gen),
            ("total = l_src + l_gen", self.total, self.l_src + self.l_gen),
        ];
        for (name, lhs, rhs) in checks {
            if !close(lhs, rhs, rel) {
                return Err(Error::Numeric(format!("ledger identity {name} broken: {lhs} vs {rhs}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && [self.l_sup, self.l_unsup, self.l_enc, self.l_inst, self.l_enc_gen, self.l_inst_gen, self.l_ctx]
                .iter()
                .all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.l_sup += o.l_sup * s;
        self.l_unsup += o.l_unsup * s;
        self.l_enc += o.l_enc * s;
        self.l_inst += o.l_inst * s;
        self.l_enc_gen += o.l_enc_gen * s;
        self.l_inst_gen += o.l_inst_gen * s;
        self.l_ctx += o.l_ctx * s;
    }

    /// Component-wise mean of several ledgers, recomposed.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = LossBreakdown::default();
        for it in items {
            acc.add_scaled(it, 1.0 / items.len().max(1) as f64);
        }
        acc.compose()
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    /// Pseudo-labels produced across the generated batch.
    pub pseudo_labels: usize,
}

/// Borrowed view of one training image.
#[derive(Clone, Copy, Debug)]
pub struct SampleRef<'a> {
    pub image: &'a Image,
    pub annotations: &'a [HoiAnnotation],
    pub domain: Domain,
    pub prompt_category: Option<usize>,
}

impl<'a> SampleRef<'a> {
    pub fn from_dataset(ds: &'a Dataset, i: usize) -> Self {
        let r = &ds.manifest.samples[i];
        Self {
            image: &ds.images[i],
            annotations: &r.annotations,
            domain: r.domain,
            prompt_category: r.prompt_category,
        }
    }

    fn category(&self, num_objects: usize) -> Option<usize> {
        self.prompt_category
            .or_else(|| self.annotations.first().map(|a| a.category(num_objects)))
    }
}

/// Detector+CEFA optimizer and discriminator optimizer, stepped together.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub detector: Adam,
    pub discriminator: Adam,
}

const CLIP_NORM: f32 = 1.0;

impl Optimizers {
    pub fn new(model: &Model, trainable: &[bool]) -> Self {
        let t = &model.cfg.train;
        let store = &model.store;
        let lr = |id: crate::params::ParamId, group: Group| -> Option<f32> {
            if !trainable[id.index()] {
                return None;
            }
            match (group, store.get(id).group) {
                (Group::Discriminator, Group::Discriminator) => Some(t.lr_disc),
                (Group::Discriminator, _) | (_, Group::Discriminator) => None,
                (_, Group::Backbone) => Some(t.lr_backbone),
                _ => Some(t.lr_rest),
            }
        };
        Self {
            detector: Adam::new(store, |id| lr(id, Group::Detector)).with_clip(CLIP_NORM),
            discriminator: Adam::new(store, |id| lr(id, Group::Discriminator)).with_clip(CLIP_NORM),
        }
    }

    /// Single learning rate for every trainable parameter.
    pub fn uniform(model: &Model, trainable: &[bool], lr: f32) -> Self {
        let store = &model.store;
        let own = |disc: bool| {
            move |id: crate::params::ParamId| {
                (trainable[id.index()] && (store.get(id).group == Group::Discriminator) == disc).then_some(lr)
            }
        };
        Self {
            detector: Adam::new(store, own(false)).with_clip(CLIP_NORM),
            discriminator: Adam::new(store, own(true)).with_clip(CLIP_NORM),
        }
    }

    pub fn set_lr_scale(&mut self, scale: f32) {
        self.detector.set_lr_scale(scale);
        self.discriminator.set_lr_scale(scale);
    }

    fn step(&mut self, store: &mut crate::params::ParamStore, grads: &Gradients) {
        self.detector.step(store, grads);
        self.discriminator.step(store, grads);
    }
}

/// One original image and the generated images paired with it.
struct Unit<'a> {
    src: SampleRef<'a>,
    gens: Vec<(usize, SampleRef<'a>)>,
}

struct UnitOut {
    grads: Gradients,
    terms: LossBreakdown,
    root: f64,
    pseudo: usize,
}

/// Pairs each generated image with a same-category original from the
/// batch, else a random one.
fn pair_units<'a>(
    src: &[SampleRef<'a>],
    gen: &[SampleRef<'a>],
    num_objects: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Unit<'a>> {
    let mut units: Vec<Unit<'a>> = src.iter().map(|&s| Unit { src: s, gens: Vec::new() }).collect();
    if units.is_empty() {
        return units;
    }
    for (j, g) in gen.iter().enumerate() {
        let cat = g.category(num_objects);
        let partner = units
            .iter()
            .position(|u| cat.is_some() && u.src.category(num_objects) == cat)
            .unwrap_or_else(|| rng.random_range(0..units.len()));
        units[partner].gens.push((j, *g));
    }
    units
}

fn scalar(g: &Graph, v: Var) -> f64 {
    f64::from(g.scalar(v))
}

fn unit_loss(
    model: &Model,
    trainable: &[bool],
    unit: &Unit<'_>,
    n_src: usize,
    n_gen: usize,
    step: usize,
) -> Result<UnitOut> {
    let cfg = &model.cfg;
    let w = &cfg.train.weights;
    let lambda = grl_lambda(&cfg.align, step);
    let adversarial = cfg.align.encoder || cfg.align.instance;
    let mut g = Graph::with_trainable(&model.store, Some(trainable));
    let mut terms = LossBreakdown::default();
    let mut parts: Vec<Var> = Vec::new();
    let mut pseudo = 0;
    let (ss, sg) = (1.0 / n_src as f32, 1.0 / n_gen.max(1) as f32);

    let add = |g: &mut Graph, parts: &mut Vec<Var>, v: Var, weight: f32| -> f64 {
        let s = g.scale(v, weight);
        parts.push(s);
        scalar(g, s)
    };

    let src = model.detector.forward(&mut g, unit.src.image)?;
    if w.sup != 0.0 {
        let sup = hoi_loss(&mut g, &src.heads, unit.src.annotations, &cfg.train.hoi, true).expect("no-object term");
        terms.l_sup += add(&mut g, &mut parts, sup, w.sup * ss);
    }
    if adversarial {
        let scores: Vec<f32> = Prediction::from_heads(&g, &src.heads).iter().map(|p| p.score()).collect();
        let adv = model
            .align
            .adversarial_loss(&mut g, src.x_b, src.x_e, src.x_ve, &scores, Domain::Original, lambda)?;
        if let Some(v) = adv.l_enc {
            terms.l_enc += add(&mut g, &mut parts, v, w.enc * ss);
        }
        if let Some(v) = adv.l_inst {
            terms.l_inst += add(&mut g, &mut parts, v, w.inst * ss);
        }
    }

    for &(j, gen) in &unit.gens {
        let gp = model.detector.forward(&mut g, gen.image)?;
        let preds = Prediction::from_heads(&g, &gp.heads);
        let labels = match cfg.train.label_source {
            LabelSource::Pseudo => {
                dedup_pseudo_labels(&preds, cfg.train.pseudo_threshold, cfg.train.pseudo_dedup_iou)
            }
            LabelSource::Prompt => gen.annotations.to_vec(),
        };
        pseudo += labels.len();
        if cfg.train.generated_in_sup && cfg.train.label_source == LabelSource::Prompt {
            if let Some(v) = hoi_loss(&mut g, &gp.heads, &labels, &cfg.train.hoi, false) {
                terms.l_sup += add(&mut g, &mut parts, v, w.sup * sg);
            }
        } else if let Some(v) = hoi_loss(&mut g, &gp.heads, &labels, &cfg.train.hoi, false) {
            terms.l_unsup += add(&mut g, &mut parts, v, w.unsup * sg);
        }
        if adversarial {
            let scores: Vec<f32> = preds.iter().map(|p| p.score()).collect();
            let adv = model
                .align
                .adversarial_loss(&mut g, gp.x_b, gp.x_e, gp.x_ve, &scores, Domain::Generated, lambda)?;
            if let Some(v) = adv.l_enc {
                terms.l_enc_gen += add(&mut g, &mut parts, v, w.enc * sg);
            }
            if let Some(v) = adv.l_inst {
                terms.l_inst_gen += add(&mut g, &mut parts, v, w.inst * sg);
            }
        }
        if cfg.ctx.enabled {
            let seed = derive_seed(&[cfg.train.seed, 0x3A5C, step as u64, j as u64]);
            let ctx = model.context.forward(&mut g, &model.detector, src.x_e, gen.image, seed)?;
            terms.l_ctx += add(&mut g, &mut parts, ctx.loss, w.ctx * sg);
        }
    }

    if parts.is_empty() {
        return Ok(UnitOut {
            grads: Gradients::zeros_like(&model.store),
            terms,
            root: 0.0,
            pseudo,
        });
    }
    let mut root = parts[0];
    for &p in &parts[1..] {
        root = g.add(root, p);
    }
    let root_value = scalar(&g, root);
    let grads = if root_value.is_finite() {
        g.backward(root)
    } else {
        Gradients::zeros_like(&model.store)
    };
    Ok(UnitOut {
        grads,
        terms,
        root: root_value,
        pseudo,
    })
}

/// Relative tolerance of the ledger identities.
pub const LEDGER_TOLERANCE: f64 = 1e-6;

/// Computes every enabled loss term on the two batches and applies one
/// optimizer step. Parameters flagged false in `trainable` are untouched.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizers,
    batch_src: &[SampleRef<'_>],
    batch_gen: &[SampleRef<'_>],
    trainable: &[bool],
    step: usize,
) -> Result<StepOutput> {
    if batch_src.is_empty() {
        return Err(Error::Config("training step needs at least one original image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[model.cfg.train.seed, 0x9A1, step as u64]));
    let units = pair_units(batch_src, batch_gen, model.cfg.scene.num_objects, &mut rng);
    let (ns, ng) = (batch_src.len(), batch_gen.len());
    let outs = {
        let m: &Model = model;
        par::map(m.cfg.train.exec, &units, |u| unit_loss(m, trainable, u, ns, ng, step))
    };
    let mut grads = Gradients::zeros_like(&model.store);
    let mut ledger = LossBreakdown::default();
    let mut root = 0.0;
    let mut pseudo = 0;
    for out in outs {
        let out = out?;
        grads.merge(&out.grads);
        ledger.add_scaled(&out.terms, 1.0);
        root += out.root;
        pseudo += out.pseudo;
    }
    let ledger = ledger.compose();
    if !ledger.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss, breakdown: {ledger:?}")));
    }
    ledger.check(LEDGER_TOLERANCE)?;
    if !close(root, ledger.total, 1e-4) && (root - ledger.total).abs() > 1e-6 {
        return Err(Error::Numeric(format!(
            "graph root {root} disagrees with ledger total {}",
            ledger.total
        )));
    }
    opt.step(&mut model.store, &grads);
    Ok(StepOutput {
        losses: ledger,
        pseudo_labels: pseudo,
    })
}

/// Owns a model during fine-tuning or pretraining and draws its batches.
pub struct Trainer<'d> {
    pub model: Model,
    pub opt: Optimizers,
    pub trainable: Vec<bool>,
    data: &'d Dataset,
    src_pool: Vec<usize>,
    gen_pool: Vec<usize>,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl<'d> Trainer<'d> {
    /// Fine-tuning: `train.frozen` applied, split learning rates.
    pub fn new(model: Model, data: &'d Dataset) -> Result<Self> {
        let trainable = model.trainable_mask(&model.cfg.train.frozen)?;
        let opt = Optimizers::new(&model, &trainable);
        Self::build(model, data, trainable, opt)
    }

    /// Supervised pretraining on original images, everything trainable.
    pub fn pretraining(model: Model, data: &'d Dataset) -> Result<Self> {
        let trainable = vec![true; model.store.len()];
        let opt = Optimizers::uniform(&model, &trainable, model.cfg.train.pretrain_lr);
        Self::build(model, data, trainable, opt)
    }

    fn build(model: Model, data: &'d Dataset, trainable: Vec<bool>, opt: Optimizers) -> Result<Self> {
        let src_pool = data.train_original();
        if src_pool.is_empty() {
            return Err(Error::Config("dataset has no original-domain training images".into()));
        }
        let gen_pool = if model.cfg.train.use_generated {
            data.train_generated()
        } else {
            Vec::new()
        };
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(&[model.cfg.train.seed, 0xBA7C]));
        Ok(Self {
            model,
            opt,
            trainable,
            data,
            src_pool,
            gen_pool,
            rng,
            step: 0,
        })
    }

    /// Shifted copies of the selected images, or `None` without augmentation.
    fn augmented(&self, idx: &[usize], stream: u64) -> Option<Vec<(Image, Vec<HoiAnnotation>)>> {
        if !self.model.cfg.train.augment {
            return None;
        }
        let seed = self.model.cfg.train.seed;
        Some(
            idx.iter()
                .enumerate()
                .map(|(k, &i)| {
                    let s = derive_seed(&[seed, 0xA06, stream, self.step as u64, k as u64]);
                    let r = &self.data.manifest.samples[i];
                    random_shift(&self.data.images[i], &r.annotations, &mut ChaCha8Rng::seed_from_u64(s))
                })
                .collect(),
        )
    }

    fn refs<'a>(data: &'a Dataset, idx: &[usize], aug: &'a Option<Vec<(Image, Vec<HoiAnnotation>)>>) -> Vec<SampleRef<'a>> {
        idx.iter()
            .enumerate()
            .map(|(k, &i)| {
                let base = SampleRef::from_dataset(data, i);
                match aug {
                    Some(a) => SampleRef {
                        image: &a[k].0,
                        annotations: &a[k].1,
                        ..base
                    },
                    None => base,
                }
            })
            .collect()
    }

    fn run(&mut self, src: &[usize], gen: &[usize]) -> Result<StepOutput> {
        let (aug_s, aug_g) = (self.augmented(src, 0), self.augmented(gen, 1));
        let (s, g) = (Self::refs(self.data, src, &aug_s), Self::refs(self.data, gen, &aug_g));
        let out = train_step(&mut self.model, &mut self.opt, &s, &g, &self.trainable, self.step)?;
        self.step += 1;
        Ok(out)
    }

    /// One step on randomly drawn batches.
    pub fn step(&mut self) -> Result<StepOutput> {
        let b = self.model.cfg.train.batch_size;
        let src: Vec<usize> = self.src_pool.choose_multiple(&mut self.rng, b).copied().collect();
        let gen: Vec<usize> = self.gen_pool.choose_multiple(&mut self.rng, b).copied().collect();
        self.run(&src, &gen)
    }

    /// One shuffled pass over the original images, without generated ones.
    pub fn epoch(&mut self) -> Result<Vec<StepOutput>> {
        let b = self.model.cfg.train.batch_size;
        let mut order = self.src_pool.clone();
        order.shuffle(&mut self.rng);
        order.chunks(b).map(|chunk| self.run(chunk, &[])).collect()
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

#[cfg(test)]
mod tests;
