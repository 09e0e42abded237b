//! Set-prediction HOI loss over matched queries.

use super::matcher::{cost_matrix, match_queries};
use crate::autograd::{Graph, Mat, Var};
use crate::boxes::iou;
use crate::config::HoiLossWeights;
use crate::data::HoiAnnotation;
use crate::detector::{HeadOutputs, Prediction};

/// Per-row generalized IoU of `pred` (`M × 4` cxcywh) against constants.
pub fn giou_rows(g: &mut Graph, pred: Var, target: &Mat) -> Var {
    let col = |g: &mut Graph, j: usize| g.slice_cols(pred, j, j + 1);
    let (cx, cy, w, h) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw);
    let x2 = g.add(cx, hw);
    let y1 = g.sub(cy, hh);
    let y2 = g.add(cy, hh);
    let m = target.nrows();
    let tcol = |g: &mut Graph, f: &dyn Fn(usize) -> f32| g.constant(Mat::from_shape_fn((m, 1), |(i, _)| f(i)));
    let tx1 = tcol(g, &|i| target[[i, 0]] - target[[i, 2]] / 2.0);
    let tx2 = tcol(g, &|i| target[[i, 0]] + target[[i, 2]] / 2.0);
    let ty1 = tcol(g, &|i| target[[i, 1]] - target[[i, 3]] / 2.0);
    let ty2 = tcol(g, &|i| target[[i, 1]] + target[[i, 3]] / 2.0);
    let t_area = g.constant(Mat::from_shape_fn((m, 1), |(i, _)| target[[i, 2]] * target[[i, 3]]));

    let ix2 = g.minimum(x2, tx2);
    let ix1 = g.maximum(x1, tx1);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let iy2 = g.minimum(y2, ty2);
    let iy1 = g.maximum(y1, ty1);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let area = g.mul(w, h);
    let union = g.add(area, t_area);
    let union = g.sub(union, inter);
    let union = g.clamp_min(union, 1e-7);
    let iou = g.div(inter, union);

    let hx2 = g.maximum(x2, tx2);
    let hx1 = g.minimum(x1, tx1);
    let hw = g.sub(hx2, hx1);
    let hy2 = g.maximum(y2, ty2);
    let hy1 = g.minimum(y1, ty1);
    let hh = g.sub(hy2, hy1);
    let hull = g.mul(hw, hh);
    let hull = g.clamp_min(hull, 1e-7);
    let gap = g.sub(hull, union);
    let penalty = g.div(gap, hull);
    g.sub(iou, penalty)
}

fn box_targets(targets: &[HoiAnnotation], pick: impl Fn(&HoiAnnotation) -> [f32; 4]) -> Mat {
    Mat::from_shape_fn((targets.len(), 4), |(i, j)| pick(&targets[i])[j])
}

/// HOI loss of one image, or `None` when nothing contributes (empty targets
/// with the no-object term disabled).
///
/// Object classification is cross-entropy over every query, unmatched ones
/// targeting no-object with weight `no_object`; verb BCE uses the same row
/// weights. Box L1 and gIoU are averaged over matched pairs.
pub fn hoi_loss(
    g: &mut Graph,
    heads: &HeadOutputs,
    targets: &[HoiAnnotation],
    w: &HoiLossWeights,
    empty_no_object: bool,
) -> Option<Var> {
    if targets.is_empty() && !empty_no_object {
        return None;
    }
    let preds = Prediction::from_heads(g, heads);
    let nq = preds.len();
    let num_objects = g.shape(heads.object_logits).1 - 1;
    let num_verbs = g.shape(heads.verb_logits).1;
    let pairs = match_queries(&cost_matrix(&preds, targets, w));

    let mut obj_targets = vec![num_objects; nq];
    let mut row_w = vec![w.no_object; nq];
    let mut verb_t = Mat::zeros((nq, num_verbs));
    for &(q, t) in &pairs {
        obj_targets[q] = targets[t].object_class;
        row_w[q] = 1.0;
        verb_t[[q, targets[t].verb_class]] = 1.0;
    }
    let w_sum: f32 = row_w.iter().sum();
    let ce = g.cross_entropy(heads.object_logits, &obj_targets, &row_w);
    let obj = g.scale(ce, w.object / w_sum);
    if targets.is_empty() {
        return Some(obj);
    }

    let qs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let unmatched: Vec<usize> = (0..nq).filter(|q| !qs.contains(q)).collect();
    let pos_logits = g.select_rows(heads.verb_logits, &qs);
    let pos = g.bce_with_logits(pos_logits, verb_t.select(ndarray::Axis(0), &qs));
    let mut bce = pos;
    if !unmatched.is_empty() {
        let neg_logits = g.select_rows(heads.verb_logits, &unmatched);
        let neg = g.bce_with_logits(neg_logits, Mat::zeros((unmatched.len(), num_verbs)));
        let neg = g.scale(neg, w.no_object);
        bce = g.add(pos, neg);
    }
    let verb = g.scale(bce, w.verb / w_sum);

    let matched: Vec<HoiAnnotation> = pairs.iter().map(|p| targets[p.1]).collect();
    let m = matched.len() as f32;
    let mut box_terms = Vec::new();
    for (boxes, target) in [
        (heads.human_boxes, box_targets(&matched, |a| a.human_box.to_array())),
        (heads.object_boxes, box_targets(&matched, |a| a.object_box.to_array())),
    ] {
        let sel = g.select_rows(boxes, &qs);
        let giou = giou_rows(g, sel, &target);
        let t = g.constant(target);
        let d = g.sub(sel, t);
        let d = g.abs(d);
        let l1 = g.sum(d);
        box_terms.push(g.scale(l1, w.bbox / m));
        let gs = g.sum(giou);
        // Σ(1 - giou) = m - Σ giou
        let neg = g.scale(gs, -w.giou / m);
        box_terms.push(g.offset(neg, w.giou));
    }
    let mut total = g.add(obj, verb);
    for t in box_terms {
        total = g.add(total, t);
    }
    Some(total)
}

/// Drops pseudo-labels that duplicate a higher-confidence one: same
/// category and both boxes overlapping above `iou_thr`.
pub fn dedup_pseudo_labels(preds: &[Prediction], threshold: f32, iou_thr: f32) -> Vec<HoiAnnotation> {
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].composed_score() > threshold)
        .collect();
    order.sort_by(|&a, &b| preds[b].composed_score().total_cmp(&preds[a].composed_score()).then(a.cmp(&b)));
    let mut kept: Vec<HoiAnnotation> = Vec::new();
    for i in order {
        let p = &preds[i];
        let cand = HoiAnnotation {
            human_box: p.human_box,
            object_box: p.object_box,
            object_class: p.best_object().0,
            verb_class: p.best_verb().0,
        };
        let dup = kept.iter().any(|k| {
            k.object_class == cand.object_class
                && k.verb_class == cand.verb_class
                && iou(&k.human_box, &cand.human_box) > iou_thr
                && iou(&k.object_box, &cand.object_box) > iou_thr
        });
        if !dup {
            kept.push(cand);
        }
    }
    kept
}
