//! Rare/non-rare mAP and domain-gap diagnostics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
pub use crate::boxes::iou;
use crate::config::{EvalConfig, EvalMode};
use crate::data::{Dataset, DatasetManifest, Domain, HoiAnnotation};
use crate::detector::{image_detections, Triplet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{self, ExecMode};

/// True positive test: both boxes above `iou_thr` (strictly) and classes
/// equal. `EvalMode::Action` ignores the object class.
pub fn match_triplet(pred: &Triplet, gt: &HoiAnnotation, iou_thr: f32, mode: EvalMode) -> bool {
    pred.verb_class == gt.verb_class
        && (mode == EvalMode::Action || pred.object_class == gt.object_class)
        && iou(&pred.human_box, &gt.human_box) > iou_thr
        && iou(&pred.object_box, &gt.object_box) > iou_thr
}

/// Category universe and rare partition used by [`compute_map`].
#[derive(Clone, Debug, PartialEq)]
pub struct CategorySplit {
    pub num_objects: usize,
    pub rare: Vec<bool>,
    pub mode: EvalMode,
}

impl CategorySplit {
    /// Triplet categories for HOI mode; verbs for action mode, a verb being
    /// rare when its summed training count is below the threshold.
    pub fn from_manifest(m: &DatasetManifest, mode: EvalMode) -> Self {
        let num_objects = m.grammar.num_objects;
        let rare = match mode {
            EvalMode::Hoi => (0..m.num_categories).map(|c| m.is_rare(c)).collect(),
            EvalMode::Action => {
                let mut per_verb = vec![0usize; m.grammar.num_verbs];
                for (&c, &n) in &m.category_counts {
                    per_verb[c / num_objects] += n;
                }
                per_verb.iter().map(|&n| n < m.rare_threshold).collect()
            }
        };
        Self { num_objects, rare, mode }
    }

    pub fn num_categories(&self) -> usize {
        self.rare.len()
    }

    fn of_gt(&self, a: &HoiAnnotation) -> usize {
        match self.mode {
            EvalMode::Hoi => a.category(self.num_objects),
            EvalMode::Action => a.verb_class,
        }
    }

    fn of_det(&self, t: &Triplet) -> usize {
        match self.mode {
            EvalMode::Hoi => t.verb_class * self.num_objects + t.object_class,
            EvalMode::Action => t.verb_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_full: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
    pub per_category_ap: BTreeMap<usize, f64>,
    pub domain_probe_acc: Option<f64>,
    pub num_images: usize,
    pub num_gt: usize,
    /// Categories without ground truth, left out of every mean.
    pub excluded_categories: Vec<usize>,
    pub mode: EvalMode,
}

/// One detection of a category, with its image and rank keys.
#[derive(Clone, Copy, Debug)]
struct Ranked {
    score: f32,
    image: usize,
    index: usize,
}

/// Greedy matching in descending score (ties by image, then detection
/// index). Returns the true-positive flag of each ranked detection.
fn greedy_flags(
    ranked: &[Ranked],
    dets: &[Vec<Triplet>],
    gts: &[Vec<HoiAnnotation>],
    split: &CategorySplit,
    category: usize,
    iou_thr: f32,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|r| {
            let d = &dets[r.image][r.index];
            let mut best: Option<(usize, f32)> = None;
            for (k, gt) in gts[r.image].iter().enumerate() {
                if used[r.image][k] || split.of_gt(gt) != category || !match_triplet(d, gt, iou_thr, split.mode) {
                    continue;
                }
                let q = iou(&d.human_box, &gt.human_box).min(iou(&d.object_box, &gt.object_box));
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((k, q));
                }
            }
            match best {
                Some((k, _)) => {
                    used[r.image][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn rank(dets: &[Vec<Triplet>], split: &CategorySplit, category: usize) -> Vec<Ranked> {
    let mut ranked: Vec<Ranked> = dets
        .iter()
        .enumerate()
        .flat_map(|(image, ds)| {
            ds.iter()
                .enumerate()
                .filter(|(_, t)| split.of_det(t) == category)
                .map(move |(index, t)| Ranked {
                    score: t.score,
                    image,
                    index,
                })
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });
    ranked
}

/// All-point interpolated AP from `(recall, precision)` points taken at
/// each distinct score, in descending-score order.
pub fn all_point_ap(points: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    ap
}

/// AP of one category; `None` when it has no ground truth.
pub fn category_ap(
    dets: &[Vec<Triplet>],
    gts: &[Vec<HoiAnnotation>],
    split: &CategorySplit,
    category: usize,
    iou_thr: f32,
) -> Option<f64> {
    let npos = gts.iter().flatten().filter(|g| split.of_gt(g) == category).count();
    if npos == 0 {
        return None;
    }
    let ranked = rank(dets, split, category);
    let flags = greedy_flags(&ranked, dets, gts, split, category, iou_thr);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, r) in ranked.iter().enumerate() {
        if flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        // a point closes each group of equal scores
        if ranked.get(i + 1).is_none_or(|n| n.score != r.score) {
            points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    Some(all_point_ap(&points))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-category AP and Full/Rare/Non-rare means. `dets[i]` and `gts[i]`
/// belong to the same image.
pub fn compute_map(
    dets: &[Vec<Triplet>],
    gts: &[Vec<HoiAnnotation>],
    split: &CategorySplit,
    iou_thr: f32,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} ground-truth lists",
            dets.len(),
            gts.len()
        )));
    }
    let mut per_category_ap = BTreeMap::new();
    let mut excluded = Vec::new();
    for c in 0..split.num_categories() {
        match category_ap(dets, gts, split, c, iou_thr) {
            Some(ap) => {
                per_category_ap.insert(c, ap);
            }
            None => excluded.push(c),
        }
    }
    let pick = |rare: Option<bool>| {
        mean(
            per_category_ap
                .iter()
                .filter(|(c, _)| rare.is_none_or(|r| split.rare[**c] == r))
                .map(|(_, &ap)| ap),
        )
    };
    Ok(EvalReport {
        map_full: pick(None),
        map_rare: pick(Some(true)),
        map_nonrare: pick(Some(false)),
        per_category_ap,
        domain_probe_acc: None,
        num_images: gts.len(),
        num_gt: gts.iter().map(Vec::len).sum(),
        excluded_categories: excluded,
        mode: split.mode,
    })
}

/// Logistic-regression probe accuracy, averaged over `folds` held-out
/// folds. The i-th source and i-th generated sample share a fold.
pub fn domain_probe(src: &[Vec<f32>], gen: &[Vec<f32>], folds: usize, seed: u64) -> Result<f64> {
    if src.len() < 10 || gen.len() < 10 {
        return Err(Error::Config(format!(
            "domain probe needs at least 10 samples per domain, got {} and {}",
            src.len(),
            gen.len()
        )));
    }
    let folds = folds.clamp(2, src.len().min(gen.len()));
    let dim = src[0].len();
    let mut data: Vec<(Vec<f64>, f64, usize)> = Vec::new();
    for (set, label) in [(src, 1.0), (gen, 0.0)] {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (rank, &i) in order.iter().enumerate() {
            data.push((set[i].iter().map(|&v| f64::from(v)).collect(), label, rank % folds));
        }
    }
    let mut accs = Vec::new();
    for fold in 0..folds {
        let train: Vec<_> = data.iter().filter(|d| d.2 != fold).collect();
        let test: Vec<_> = data.iter().filter(|d| d.2 == fold).collect();
        // standardize with training statistics
        let n = train.len() as f64;
        let mu: Vec<f64> = (0..dim).map(|j| train.iter().map(|d| d.0[j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..dim)
            .map(|j| {
                let var = train.iter().map(|d| (d.0[j] - mu[j]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(1e-6)
            })
            .collect();
        let z = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect() };
        let xs: Vec<(Vec<f64>, f64)> = train.iter().map(|d| (z(&d.0), d.1)).collect();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let (lr, l2) = (0.5, 1e-3);
        for _ in 0..300 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in &xs {
                let p = sigmoid64(dot(&w, x) + b);
                let e = p - y;
                for j in 0..dim {
                    gw[j] += e * x[j];
                }
                gb += e;
            }
            for j in 0..dim {
                w[j] -= lr * (gw[j] / n + l2 * w[j]);
            }
            b -= lr * gb / n;
        }
        let correct = test
            .iter()
            .filter(|d| {
                let p = sigmoid64(dot(&w, &z(&d.0)) + b);
                (p > 0.5) == (d.1 == 1.0)
            })
            .count();
        accs.push(correct as f64 / test.len() as f64);
    }
    Ok(mean(accs.into_iter()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Projection onto the top two principal components; each axis is signed so
/// its largest-magnitude loading is positive.
pub fn pca_2d(features: &[Vec<f32>]) -> Vec<[f64; 2]> {
    let n = features.len();
    if n == 0 {
        return Vec::new();
    }
    let d = features[0].len();
    let mu: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|f| f64::from(f[j])).sum::<f64>() / n as f64)
        .collect();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().enumerate().map(|(j, &v)| f64::from(v) - mu[j]).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &x {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 * 1e-3).collect();
        for _ in 0..500 {
            let mut next: Vec<f64> = (0..d).map(|i| dot(&cov[i], &v)).collect();
            for a in &axes {
                let p = dot(&next, a);
                next.iter_mut().zip(a).for_each(|(x, ai)| *x -= p * ai);
            }
            let norm = dot(&next, &next).sqrt();
            if norm < 1e-12 {
                next = vec![0.0; d];
                v = next;
                break;
            }
            v = next.into_iter().map(|x| x / norm).collect();
        }
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    x.iter().map(|row| [dot(row, &axes[0]), dot(row, &axes[1])]).collect()
}

/// TSV with columns `pc1 pc2 label f0 f1 …`, one row per feature vector.
pub fn export_embeddings(features: &[Vec<f32>], labels: &[String], path: &Path) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let coords = pca_2d(features);
    let dim = features.first().map_or(0, Vec::len);
    let mut out = String::from("pc1\tpc2\tlabel");
    for j in 0..dim {
        out.push_str(&format!("\tf{j}"));
    }
    out.push('\n');
    for ((c, f), l) in coords.iter().zip(features).zip(labels) {
        out.push_str(&format!("{}\t{}\t{}", c[0], c[1], l));
        for v in f {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean-pooled encoder tokens of the given dataset images.
pub fn pooled_encoder_features(model: &Model, ds: &Dataset, indices: &[usize], exec: ExecMode) -> Result<Vec<Vec<f32>>> {
    par::map(exec, indices, |&i| {
        let mut g = Graph::new(&model.store);
        let p = model.detector.patches(&ds.images[i])?;
        let p = g.constant(p);
        let x_b = model.detector.extract_features(&mut g, p);
        let x_e = model.detector.encode(&mut g, x_b);
        let pooled = g.mean_rows(x_e);
        Ok(g.value(pooled).iter().copied().collect())
    })
    .into_iter()
    .collect()
}

/// Up to `n` indices spread evenly over `pool`.
fn spread(pool: &[usize], n: usize) -> Vec<usize> {
    if pool.len() <= n {
        return pool.to_vec();
    }
    (0..n).map(|k| pool[k * pool.len() / n]).collect()
}

/// Original test images against generated training images, equal counts.
pub fn probe_sets(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let src: Vec<usize> = ds
        .test()
        .into_iter()
        .filter(|&i| ds.manifest.samples[i].domain == Domain::Original)
        .collect();
    let gen: Vec<usize> = ds
        .train_generated()
        .into_iter()
        .chain(ds.test().into_iter().filter(|&i| ds.manifest.samples[i].domain == Domain::Generated))
        .collect();
    let n = src.len().min(gen.len());
    (spread(&src, n), spread(&gen, n))
}

/// Detections for the original-domain test images.
pub fn detect(model: &Model, ds: &Dataset, indices: &[usize], cfg: &EvalConfig, exec: ExecMode) -> Result<Vec<Vec<Triplet>>> {
    par::map(exec, indices, |&i| {
        let (_, preds) = model.detector.infer(&model.store, &ds.images[i])?;
        Ok(image_detections(&preds, cfg.max_detections))
    })
    .into_iter()
    .collect()
}

/// mAP on the test split plus the encoder domain probe.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let exec = model.cfg.train.exec;
    let test: Vec<usize> = ds
        .test()
        .into_iter()
        .filter(|&i| ds.manifest.samples[i].domain == Domain::Original)
        .collect();
    let dets = detect(model, ds, &test, cfg, exec)?;
    let gts: Vec<Vec<HoiAnnotation>> = test.iter().map(|&i| ds.manifest.samples[i].annotations.clone()).collect();
    let split = CategorySplit::from_manifest(&ds.manifest, cfg.mode);
    let mut report = compute_map(&dets, &gts, &split, cfg.iou_threshold)?;
    let (src, gen) = probe_sets(ds);
    if src.len() >= 10 && gen.len() >= 10 {
        let fs = pooled_encoder_features(model, ds, &src, exec)?;
        let fg = pooled_encoder_features(model, ds, &gen, exec)?;
        report.domain_probe_acc = Some(domain_probe(&fs, &fg, cfg.probe_folds, 0)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn ann(verb: usize, obj: usize) -> HoiAnnotation {
        HoiAnnotation {
            human_box: BBox::new(0.3, 0.5, 0.2, 0.4),
            object_box: BBox::new(0.6, 0.5, 0.2, 0.2),
            object_class: obj,
            verb_class: verb,
        }
    }

    fn det(a: &HoiAnnotation, score: f32) -> Triplet {
        Triplet {
            human_box: a.human_box,
            object_box: a.object_box,
            object_class: a.object_class,
            verb_class: a.verb_class,
            score,
        }
    }

    fn split(n: usize) -> CategorySplit {
        CategorySplit {
            num_objects: 2,
            rare: (0..n).map(|c| c % 2 == 1).collect(),
            mode: EvalMode::Hoi,
        }
    }

    #[test]
    fn match_rules() {
        let gt = ann(1, 0);
        let mut d = det(&gt, 0.9);
        assert!(match_triplet(&d, &gt, 0.5, EvalMode::Hoi));
        d.verb_class = 2;
        assert!(!match_triplet(&d, &gt, 0.5, EvalMode::Hoi));
        let mut d = det(&gt, 0.9);
        d.object_class = 1;
        assert!(!match_triplet(&d, &gt, 0.5, EvalMode::Hoi));
        assert!(match_triplet(&d, &gt, 0.5, EvalMode::Action));
        // object box shifted to IoU 1/3 while human box matches
        let mut d = det(&gt, 0.9);
        d.object_box = BBox::new(0.7, 0.5, 0.2, 0.2);
        assert!(!match_triplet(&d, &gt, 0.5, EvalMode::Hoi));
    }

    #[test]
    fn iou_exactly_half_is_not_a_match() {
        let gt = ann(0, 0);
        let mut d = det(&gt, 1.0);
        // width 0.2 → overlap 2/3 of the width gives IoU (2/3)/(4/3) = 0.5
        let shift = 0.2 / 3.0;
        d.human_box = BBox::new(gt.human_box.cx + shift, gt.human_box.cy, gt.human_box.w, gt.human_box.h);
        let v = iou(&d.human_box, &gt.human_box);
        assert!((v - 0.5).abs() < 1e-6);
        assert!(!match_triplet(&d, &gt, v, EvalMode::Hoi));
    }

    #[test]
    fn single_correct_prediction() {
        let gt = ann(0, 0);
        let r = compute_map(&[vec![det(&gt, 0.7)]], &[vec![gt]], &split(1), 0.5).unwrap();
        assert_eq!(r.per_category_ap[&0], 1.0);
        assert_eq!(r.map_full, 1.0);
    }

    #[test]
    fn no_predictions_score_zero() {
        let r = compute_map(&[vec![], vec![]], &[vec![ann(0, 0)], vec![ann(0, 1)]], &split(4), 0.5).unwrap();
        assert_eq!(r.map_full, 0.0);
        assert_eq!(r.excluded_categories, vec![2, 3]);
    }

    #[test]
    fn duplicates_count_once() {
        let gt = ann(0, 0);
        let dets = vec![vec![det(&gt, 0.9), det(&gt, 0.8)]];
        let r = compute_map(&dets, &[vec![gt]], &split(1), 0.5).unwrap();
        // P/R points (1, 1) then (1, 0.5)
        assert_eq!(r.per_category_ap[&0], 1.0);
        let dets = vec![vec![det(&gt, 0.8), det(&ann(1, 1), 0.9)]];
        let r = compute_map(&dets, &[vec![gt, ann(0, 0)]], &split(1), 0.5).unwrap();
        assert_eq!(r.per_category_ap[&0], 0.5);
    }

    #[test]
    fn top_false_positive_halves_precision() {
        let gt = ann(0, 0);
        let mut fp = det(&gt, 0.95);
        fp.human_box = BBox::new(0.8, 0.2, 0.1, 0.1);
        let r = compute_map(&[vec![det(&gt, 0.9), fp]], &[vec![gt]], &split(1), 0.5).unwrap();
        assert_eq!(r.per_category_ap[&0], 0.5);
    }

    #[test]
    fn full_is_weighted_recombination() {
        let gts = vec![vec![ann(0, 0), ann(0, 1)], vec![ann(1, 0)]];
        let dets = vec![vec![det(&ann(0, 0), 0.9)], vec![det(&ann(1, 0), 0.4), det(&ann(0, 1), 0.3)]];
        let r = compute_map(&dets, &gts, &split(4), 0.5).unwrap();
        let rare = r.per_category_ap.keys().filter(|c| *c % 2 == 1).count() as f64;
        let non = r.per_category_ap.len() as f64 - rare;
        let recombined = (r.map_rare * rare + r.map_nonrare * non) / (rare + non);
        assert!((r.map_full - recombined).abs() < 1e-12);
    }

    fn feats(n: usize, offset: f32) -> Vec<Vec<f32>> {
        (0..n)
            .map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f32 / 11.0 + offset).collect())
            .collect()
    }

    #[test]
    fn probe_chance_and_separable() {
        let a = feats(40, 0.0);
        let same = domain_probe(&a, &a, 5, 3).unwrap();
        assert!((same - 0.5).abs() <= 0.05, "{same}");
        let b = feats(40, 10.0);
        let sep = domain_probe(&a, &b, 5, 3).unwrap();
        assert!(sep > 0.95, "{sep}");
        assert!(domain_probe(&a[..9], &b, 5, 3).is_err());
    }

    #[test]
    fn pca_keeps_colinear_order() {
        let pts = vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 2.0], vec![4.0, 8.0, 8.0]];
        let c = pca_2d(&pts);
        let d = |i: usize, j: usize| (c[i][0] - c[j][0]).hypot(c[i][1] - c[j][1]);
        // original distances 3, 9, 12
        assert!((d(0, 1) - 3.0).abs() < 1e-9);
        assert!((d(1, 2) - 9.0).abs() < 1e-9);
        assert!((d(0, 2) - 12.0).abs() < 1e-9);
    }

    #[test]
    fn export_rows_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let f = feats(5, 0.0);
        let labels: Vec<String> = (0..5).map(|i| if i % 2 == 0 { "original" } else { "generated" }.into()).collect();
        let p1 = dir.path().join("a.tsv");
        let p2 = dir.path().join("b.tsv");
        export_embeddings(&f, &labels, &p1).unwrap();
        export_embeddings(&f, &labels, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        assert_eq!(a, std::fs::read(&p2).unwrap());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
        let bad = Path::new("/nonexistent-dir/x.tsv");
        assert!(export_embeddings(&f, &labels, bad).unwrap_err().to_string().contains("nonexistent-dir"));
    }
}
