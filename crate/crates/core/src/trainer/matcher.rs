//! Bipartite matching between pair queries and ground-truth triplets.

use crate::autograd::Mat;
use crate::boxes::{giou, BBox};
use crate::config::HoiLossWeights;
use crate::data::HoiAnnotation;
use crate::detector::Prediction;

/// Minimum-cost assignment of every row to a distinct column. Requires
/// `rows <= cols`; returns the column chosen for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols, got {n} > {m}");
    let inf = f64::INFINITY;
    // potentials and matching, 1-indexed with slot 0 as the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

fn l1(a: &BBox, b: &BBox) -> f32 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// `N_q × G` matching cost.
pub fn cost_matrix(preds: &[Prediction], targets: &[HoiAnnotation], w: &HoiLossWeights) -> Mat {
    let probs: Vec<(Vec<f32>, Vec<f32>)> = preds.iter().map(|p| (p.object_probs(), p.verb_probs())).collect();
    Mat::from_shape_fn((preds.len(), targets.len()), |(q, t)| {
        let (p, gt) = (&preds[q], &targets[t]);
        let (obj, verb) = &probs[q];
        let boxes = l1(&p.human_box, &gt.human_box) + l1(&p.object_box, &gt.object_box);
        let gious = giou(&p.human_box, &gt.human_box) + giou(&p.object_box, &gt.object_box);
        w.bbox * boxes - w.giou * gious - w.object * obj[gt.object_class] - w.verb * verb[gt.verb_class]
    })
}

/// Optimal `(query, target)` pairs, sorted by query.
pub fn match_queries(cost: &Mat) -> Vec<(usize, usize)> {
    let (nq, ng) = cost.dim();
    if nq == 0 || ng == 0 {
        return Vec::new();
    }
    let mut pairs: Vec<(usize, usize)> = if ng <= nq {
        let rows: Vec<Vec<f64>> = (0..ng).map(|t| (0..nq).map(|q| f64::from(cost[[q, t]])).collect()).collect();
        hungarian(&rows).into_iter().enumerate().map(|(t, q)| (q, t)).collect()
    } else {
        let rows: Vec<Vec<f64>> = (0..nq).map(|q| (0..ng).map(|t| f64::from(cost[[q, t]])).collect()).collect();
        hungarian(&rows).into_iter().enumerate().collect()
    };
    pairs.sort_unstable();
    pairs
}
