use super::*;
use crate::autograd::Mat;
use crate::boxes::BBox;
use crate::config::{ExperimentConfig, HoiLossWeights};
use crate::detector::HeadOutputs;
use crate::params::ParamStore;

const NUM_OBJECTS: usize = 3;
const NUM_VERBS: usize = 4;

fn gt(h: (f32, f32), o: (f32, f32), obj: usize, verb: usize) -> HoiAnnotation {
    HoiAnnotation {
        human_box: BBox::new(h.0, h.1, 0.2, 0.3),
        object_box: BBox::new(o.0, o.1, 0.15, 0.15),
        object_class: obj,
        verb_class: verb,
    }
}

/// Heads whose first `targets.len()` queries reproduce the targets with
/// logits of magnitude `conf`; remaining queries predict no-object.
fn exact_heads(g: &mut Graph, targets: &[HoiAnnotation], nq: usize, conf: f32) -> HeadOutputs {
    let boxes = |f: &dyn Fn(&HoiAnnotation) -> BBox| {
        Mat::from_shape_fn((nq, 4), |(q, j)| {
            targets.get(q).map_or([0.5, 0.5, 0.1, 0.1], |t| f(t).to_array())[j]
        })
    };
    let hb = boxes(&|t| t.human_box);
    let ob = boxes(&|t| t.object_box);
    let obj = Mat::from_shape_fn((nq, NUM_OBJECTS + 1), |(q, c)| {
        let want = targets.get(q).map_or(NUM_OBJECTS, |t| t.object_class);
        if c == want {
            conf
        } else {
            -conf
        }
    });
    let verb = Mat::from_shape_fn((nq, NUM_VERBS), |(q, v)| {
        if targets.get(q).is_some_and(|t| t.verb_class == v) {
            conf
        } else {
            -conf
        }
    });
    HeadOutputs {
        human_boxes: g.constant(hb),
        object_boxes: g.constant(ob),
        object_logits: g.constant(obj),
        verb_logits: g.constant(verb),
    }
}

#[test]
fn exact_match_is_below_floor() {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let targets = [gt((0.3, 0.5), (0.7, 0.5), 1, 2), gt((0.2, 0.3), (0.5, 0.6), 0, 0)];
    let heads = exact_heads(&mut g, &targets, 6, 10.0);
    let l = hoi_loss(&mut g, &heads, &targets, &HoiLossWeights::default(), true).unwrap();
    let v = g.scalar(l);
    assert!(v < 0.1, "{v}");
    // boxes identical → only the classification terms remain
    assert!(v >= 0.0);
}

#[test]
fn empty_targets() {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let heads = exact_heads(&mut g, &[], 5, 12.0);
    let w = HoiLossWeights::default();
    let l = hoi_loss(&mut g, &heads, &[], &w, true).unwrap();
    assert!(g.scalar(l) < 1e-4);
    assert!(hoi_loss(&mut g, &heads, &[], &w, false).is_none());
}

#[test]
fn pseudo_labels_from_exact_predictions_reach_the_same_floor() {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let targets = [gt((0.3, 0.5), (0.7, 0.5), 2, 1)];
    let heads = exact_heads(&mut g, &targets, 4, 10.0);
    let preds = Prediction::from_heads(&g, &heads);
    let labels = dedup_pseudo_labels(&preds, 1.4, 0.7);
    assert_eq!(labels, targets.to_vec());
    let w = HoiLossWeights::default();
    let sup = hoi_loss(&mut g, &heads, &targets, &w, true).unwrap();
    let unsup = hoi_loss(&mut g, &heads, &labels, &w, false).unwrap();
    assert_eq!(g.scalar(sup), g.scalar(unsup));
}

#[test]
fn higher_threshold_never_adds_labels() {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let targets = [gt((0.3, 0.5), (0.7, 0.5), 2, 1), gt((0.6, 0.4), (0.2, 0.2), 0, 3)];
    let heads = exact_heads(&mut g, &targets, 4, 1.5);
    let preds = Prediction::from_heads(&g, &heads);
    let mut prev = usize::MAX;
    for t in [0.0, 0.5, 1.0, 1.4, 1.6, 2.0] {
        let n = dedup_pseudo_labels(&preds, t, 0.7).len();
        assert!(n <= prev);
        prev = n;
    }
}

#[test]
fn dedup_keeps_the_stronger_duplicate() {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let t = gt((0.3, 0.5), (0.7, 0.5), 2, 1);
    let heads = exact_heads(&mut g, &[t, t], 4, 10.0);
    let preds = Prediction::from_heads(&g, &heads);
    assert_eq!(dedup_pseudo_labels(&preds, 1.4, 0.7).len(), 1);
    assert_eq!(dedup_pseudo_labels(&preds, 1.4, 1.0).len(), 2);
}

#[test]
fn ledger_identities() {
    let b = LossBreakdown {
        l_sup: 1.5,
        l_unsup: 0.25,
        l_enc: 1.3,
        l_inst: 0.7,
        l_enc_gen: 1.1,
        l_inst_gen: 0.6,
        l_ctx: 0.05,
        ..Default::default()
    }
    .compose();
    b.check(LEDGER_TOLERANCE).unwrap();
    assert_eq!(b.l_adv, 2.0);
    let mut broken = b;
    broken.total += 1.0;
    assert!(broken.check(LEDGER_TOLERANCE).is_err());
}

fn toy() -> (ExperimentConfig, Dataset) {
    let cfg = ExperimentConfig::toy();
    let data = prepare_dataset(&cfg).unwrap();
    (cfg, data)
}

fn steps(cfg: &ExperimentConfig, data: &Dataset, n: usize) -> (Model, Model, Vec<StepOutput>) {
    let before = Model::new(cfg).unwrap();
    let mut t = Trainer::new(before.clone(), data).unwrap();
    let outs = (0..n).map(|_| t.step().unwrap()).collect();
    (before, t.into_model(), outs)
}

#[test]
fn naive_merge_total_is_sup_plus_unsup() {
    let (mut cfg, data) = toy();
    crate::presets::Preset::NaiveMerge.apply(&mut cfg);
    // low threshold so untrained predictions yield pseudo-labels
    cfg.train.pseudo_threshold = 0.5;
    let (before, after, outs) = steps(&cfg, &data, 3);
    for o in &outs {
        let l = o.losses;
        assert_eq!(l.total, l.l_sup + l.l_unsup);
        assert_eq!((l.l_enc, l.l_inst, l.l_ctx, l.l_adv_gen), (0.0, 0.0, 0.0, 0.0));
    }
    assert!(outs.iter().any(|o| o.losses.l_unsup > 0.0));
    assert_eq!(before.store.checksum("align."), after.store.checksum("align."));
    assert_eq!(before.store.checksum("ctx."), after.store.checksum("ctx."));
    assert_ne!(before.store.checksum("encoder."), after.store.checksum("encoder."));
}

#[test]
fn full_preset_keeps_pair_decoder_and_ledger() {
    let (mut cfg, data) = toy();
    crate::presets::Preset::FullCefa.apply(&mut cfg);
    let (before, after, outs) = steps(&cfg, &data, 3);
    for o in &outs {
        o.losses.check(LEDGER_TOLERANCE).unwrap();
        assert!(o.losses.l_enc > 0.0 && o.losses.l_inst > 0.0 && o.losses.l_ctx > 0.0);
    }
    assert_eq!(before.store.checksum("pair_decoder."), after.store.checksum("pair_decoder."));
    assert_ne!(before.store.checksum("align."), after.store.checksum("align."));
    assert_ne!(before.store.checksum("ctx.decoder."), after.store.checksum("ctx.decoder."));
}

#[test]
fn context_only_leaves_discriminators() {
    let (mut cfg, data) = toy();
    crate::presets::Preset::ContextOnly.apply(&mut cfg);
    let (before, after, outs) = steps(&cfg, &data, 2);
    assert!(outs.iter().all(|o| o.losses.l_adv == 0.0 && o.losses.l_adv_gen == 0.0));
    assert_eq!(before.store.checksum("align."), after.store.checksum("align."));
    assert_ne!(before.store.checksum("ctx."), after.store.checksum("ctx."));
}

#[test]
fn discriminators_only_receive_adversarial_gradient() {
    let (mut cfg, data) = toy();
    crate::presets::Preset::FullCefa.apply(&mut cfg);
    cfg.train.weights.enc = 0.0;
    cfg.train.weights.inst = 0.0;
    let (before, after, _) = steps(&cfg, &data, 2);
    assert_eq!(before.store.checksum("align."), after.store.checksum("align."));
}

#[test]
fn identical_seed_identical_losses() {
    let (mut cfg, data) = toy();
    crate::presets::Preset::FullCefa.apply(&mut cfg);
    let (_, a, la) = steps(&cfg, &data, 2);
    let (_, b, lb) = steps(&cfg, &data, 2);
    assert_eq!(a.store.checksum(""), b.store.checksum(""));
    let ta: Vec<f64> = la.iter().map(|o| o.losses.total).collect();
    let tb: Vec<f64> = lb.iter().map(|o| o.losses.total).collect();
    assert_eq!(ta, tb);
}

#[test]
fn sequential_and_parallel_agree() {
    let (mut cfg, data) = toy();
    crate::presets::Preset::FullCefa.apply(&mut cfg);
    cfg.train.exec = par::ExecMode::Sequential;
    let (_, a, _) = steps(&cfg, &data, 2);
    cfg.train.exec = par::ExecMode::Parallel;
    let (_, b, _) = steps(&cfg, &data, 2);
    assert_eq!(a.store.checksum(""), b.store.checksum(""));
}

#[test]
fn empty_source_batch_is_rejected() {
    let (cfg, _) = toy();
    let mut m = Model::new(&cfg).unwrap();
    let mask = vec![true; m.store.len()];
    let mut opt = Optimizers::new(&m, &mask);
    assert!(matches!(train_step(&mut m, &mut opt, &[], &[], &mask, 0), Err(Error::Config(_))));
}
