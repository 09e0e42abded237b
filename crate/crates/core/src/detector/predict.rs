use serde::{Deserialize, Serialize};

use super::HeadOutputs;
use crate::autograd::{sigmoid, Graph};
use crate::boxes::BBox;
use crate::data::HoiAnnotation;
use crate::error::{Error, Result};

/// Decoded output of one pair query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub human_box: BBox,
    pub object_box: BBox,
    /// `C_obj + 1` logits, no-object last.
    pub object_logits: Vec<f32>,
    pub verb_logits: Vec<f32>,
}

/// One scored `<human, verb, object>` detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb_class: usize,
    pub score: f32,
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !m.is_finite() {
        return vec![1.0 / logits.len() as f32; logits.len()];
    }
    let e: Vec<f32> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f32]) -> (usize, f32) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best })
}

impl Prediction {
    pub fn from_heads(g: &Graph, heads: &HeadOutputs) -> Vec<Prediction> {
        let hb = g.value(heads.human_boxes);
        let ob = g.value(heads.object_boxes);
        let ol = g.value(heads.object_logits);
        let vl = g.value(heads.verb_logits);
        (0..hb.nrows())
            .map(|i| Prediction {
                human_box: BBox::from_slice(hb.row(i).as_slice().unwrap()),
                object_box: BBox::from_slice(ob.row(i).as_slice().unwrap()),
                object_logits: ol.row(i).to_vec(),
                verb_logits: vl.row(i).to_vec(),
            })
            .collect()
    }

    pub fn object_probs(&self) -> Vec<f32> {
        softmax(&self.object_logits)
    }

    pub fn verb_probs(&self) -> Vec<f32> {
        self.verb_logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Most likely real object class and its probability.
    pub fn best_object(&self) -> (usize, f32) {
        let p = self.object_probs();
        argmax(&p[..p.len() - 1])
    }

    pub fn best_verb(&self) -> (usize, f32) {
        argmax(&self.verb_probs())
    }

    /// `P(object is not no-object) · max_v P(verb v)`.
    pub fn score(&self) -> f32 {
        let p = self.object_probs();
        let real = 1.0 - p[p.len() - 1];
        real.max(0.0) * self.best_verb().1
    }

    /// Pseudo-label confidence: best real-object probability plus best verb
    /// probability, in `[0, 2]`.
    pub fn composed_score(&self) -> f32 {
        self.best_object().1 + self.best_verb().1
    }

    /// One triplet per verb, scored by `P(best object) · P(verb)`.
    pub fn triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        let (obj, p_obj) = self.best_object();
        self.verb_probs().into_iter().enumerate().map(move |(v, p)| Triplet {
            human_box: self.human_box,
            object_box: self.object_box,
            object_class: obj,
            verb_class: v,
            score: p_obj * p,
        })
    }
}

/// Top-scoring triplets of one image.
pub fn image_detections(preds: &[Prediction], max_detections: usize) -> Vec<Triplet> {
    let mut all: Vec<Triplet> = preds.iter().flat_map(|p| p.triplets()).collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(max_detections);
    all
}

/// Keeps predictions whose composed score strictly exceeds `threshold`.
pub fn pseudo_label(preds: &[Prediction], threshold: f32) -> Result<Vec<HoiAnnotation>> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Config(format!(
            "pseudo-label threshold must be non-negative, got {threshold}"
        )));
    }
    Ok(preds
        .iter()
        .filter(|p| p.composed_score() > threshold)
        .map(|p| HoiAnnotation {
            human_box: p.human_box,
            object_box: p.object_box,
            object_class: p.best_object().0,
            verb_class: p.best_verb().0,
        })
        .collect())
}
