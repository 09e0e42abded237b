//! Label-preserving translation of training images.

use rand::Rng;

use super::{HoiAnnotation, Image};
use crate::boxes::BBox;

/// Shifts the image content by a random whole-pixel offset that keeps every
/// annotated box at least one pixel inside the frame. Exposed borders
/// repeat the original edge pixels. Images without annotations only get
/// shifts that keep the content within the frame margins.
pub fn random_shift<R: Rng>(image: &Image, annotations: &[HoiAnnotation], rng: &mut R) -> (Image, Vec<HoiAnnotation>) {
    let (h, w, _) = image.dim();
    let (wf, hf) = (w as f32, h as f32);
    let mut union = [wf * 0.5, hf * 0.5, wf * 0.5, hf * 0.5];
    for a in annotations {
        for b in [a.human_box, a.object_box] {
            let [x1, y1, x2, y2] = b.corners();
            union = [
                union[0].min(x1 * wf),
                union[1].min(y1 * hf),
                union[2].max(x2 * wf),
                union[3].max(y2 * hf),
            ];
        }
    }
    if annotations.is_empty() {
        union = [wf * 0.25, hf * 0.25, wf * 0.75, hf * 0.75];
    }
    let range = |lo: f32, hi: f32, size: f32| -> (i64, i64) {
        let min = -(lo - 1.0).floor().max(0.0) as i64;
        let max = (size - 1.0 - hi).floor().max(0.0) as i64;
        (min, max)
    };
    let (xmin, xmax) = range(union[0], union[2], wf);
    let (ymin, ymax) = range(union[1], union[3], hf);
    let dx = rng.random_range(xmin..=xmax);
    let dy = rng.random_range(ymin..=ymax);
    let out = Image::from_shape_fn(image.dim(), |(y, x, c)| {
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
        image[[sy, sx, c]]
    });
    let shift = |b: BBox| BBox::new(b.cx + dx as f32 / wf, b.cy + dy as f32 / hf, b.w, b.h);
    let anns = annotations
        .iter()
        .map(|a| HoiAnnotation {
            human_box: shift(a.human_box),
            object_box: shift(a.object_box),
            ..*a
        })
        .collect();
    (out, anns)
}
