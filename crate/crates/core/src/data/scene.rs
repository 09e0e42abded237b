//! Procedural scene grammar.
//!
//! A scene is one human glyph and one object glyph. The object's shape and
//! color family are its class; where it sits relative to the human is the
//! verb. Generated-domain renderings reuse the exact layout and colors and
//! then apply a fixed appearance shift: hue rotation, a striped background
//! and pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Domain, HoiAnnotation, Image, Sample};
use crate::autograd::Mat;
use crate::boxes::BBox;
use crate::config::{DomainShift, SceneConfig};
use crate::error::{Error, Result};

pub const VERB_NAMES: [&str; 6] = ["ride", "lift", "push", "pull", "hold", "watch"];
pub const OBJECT_NAMES: [&str; 5] = ["block", "ball", "cone", "cross", "bar"];

/// Base color of each object class; renderings jitter around it.
const OBJECT_COLORS: [[f32; 3]; 5] = [
    [0.85, 0.15, 0.12],
    [0.12, 0.62, 0.20],
    [0.95, 0.55, 0.05],
    [0.55, 0.18, 0.70],
    [0.05, 0.55, 0.60],
];

/// SplitMix64 over the parts; stable across platforms and releases.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Pixel-space rectangle `[x1, x2) × [y1, y2)`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
}

impl Rect {
    fn w(&self) -> f32 {
        self.x2 - self.x1
    }
    fn h(&self) -> f32 {
        self.y2 - self.y1
    }
    fn shifted(&self, dx: f32, dy: f32) -> Rect {
        Rect {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
    fn to_bbox(self, size: f32) -> BBox {
        BBox::from_corners(self.x1 / size, self.y1 / size, self.x2 / size, self.y2 / size)
    }
}

/// Verb implied by where the object sits relative to the human.
pub fn decode_relation(human: &BBox, object: &BBox) -> usize {
    let [hx1, hy1, hx2, hy2] = human.corners();
    let (ox, oy) = (object.cx, object.cy);
    if (hx1..=hx2).contains(&ox) && (hy1..=hy2).contains(&oy) {
        4
    } else if (ox - human.cx).abs() <= human.w / 2.0 {
        if oy > human.cy {
            0
        } else {
            1
        }
    } else if (oy - human.cy).abs() <= human.h / 2.0 {
        if ox < human.cx {
            2
        } else {
            3
        }
    } else {
        5
    }
}

struct Layout {
    human: Rect,
    object: Rect,
    human_color: [f32; 3],
    object_color: [f32; 3],
    background: [f32; 3],
}

fn layout(verb: usize, object: usize, size: f32, rng: &mut ChaCha8Rng) -> Layout {
    let u = size / 48.0;
    let hw = rng.random_range(7.0..10.0) * u;
    let hh = rng.random_range(14.0..18.0) * u;
    let os = rng.random_range(7.0..10.0) * u;
    let (ow, oh) = if object == 4 { (os, os * 0.5) } else { (os, os) };
    let gap = rng.random_range(0.0..2.0) * u;
    let jitter = rng.random_range(-2.0..2.0) * u;
    let human = Rect {
        x1: 0.0,
        y1: 0.0,
        x2: hw,
        y2: hh,
    };
    let (ocx, ocy) = match verb {
        0 => (hw / 2.0 + jitter, hh + gap + oh / 2.0),
        1 => (hw / 2.0 + jitter, -gap - oh / 2.0),
        2 => (-gap - ow / 2.0, hh / 2.0 + jitter),
        3 => (hw + gap + ow / 2.0, hh / 2.0 + jitter),
        4 => (
            hw / 2.0 + rng.random_range(-1.5..1.5) * u,
            hh / 2.0 + rng.random_range(-2.0..2.0) * u,
        ),
        _ => {
            let g = rng.random_range(2.0..5.0) * u;
            let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let x = if sx > 0.0 { hw + g + ow / 2.0 } else { -g - ow / 2.0 };
            let y = if sy > 0.0 { hh + g + oh / 2.0 } else { -g - oh / 2.0 };
            (x, y)
        }
    };
    let obj = Rect {
        x1: ocx - ow / 2.0,
        y1: ocy - oh / 2.0,
        x2: ocx + ow / 2.0,
        y2: ocy + oh / 2.0,
    };
    // place the union of both boxes uniformly inside a 1 px margin
    let ux1 = human.x1.min(obj.x1);
    let uy1 = human.y1.min(obj.y1);
    let ux2 = human.x2.max(obj.x2);
    let uy2 = human.y2.max(obj.y2);
    let margin = 1.0;
    let free_x = (size - 2.0 * margin - (ux2 - ux1)).max(0.0);
    let free_y = (size - 2.0 * margin - (uy2 - uy1)).max(0.0);
    let dx = margin + rng.random_range(0.0..=free_x) - ux1;
    let dy = margin + rng.random_range(0.0..=free_y) - uy1;
    let jitter_c = |rng: &mut ChaCha8Rng, c: [f32; 3]| c.map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
    let human_color = jitter_c(rng, [0.15, 0.22, 0.72]);
    let object_color = jitter_c(rng, OBJECT_COLORS[object]);
    let level = rng.random_range(0.72..0.9);
    let background = [0usize, 1, 2].map(|_| level + rng.random_range(-0.03..0.03));
    Layout {
        human: human.shifted(dx, dy),
        object: obj.shifted(dx, dy),
        human_color,
        object_color,
        background,
    }
}

fn inside_human(r: &Rect, x: f32, y: f32) -> bool {
    let (w, h) = (r.w(), r.h());
    let (lx, ly) = (x - r.x1, y - r.y1);
    if lx < 0.0 || ly < 0.0 || lx >= w || ly >= h {
        return false;
    }
    let head_r = w * 0.3;
    let (hcx, hcy) = (w / 2.0, head_r);
    let head = (lx - hcx).powi(2) + (ly - hcy).powi(2) <= head_r * head_r;
    let torso = (lx - w / 2.0).abs() <= w * 0.22 && ly >= head_r * 1.6 && ly <= h * 0.68;
    let arms = ly >= h * 0.36 && ly <= h * 0.46;
    let legs = ly >= h * 0.66 && ((lx - w * 0.3).abs() <= w * 0.12 || (lx - w * 0.7).abs() <= w * 0.12);
    head || torso || arms || legs
}

fn inside_object(r: &Rect, class: usize, x: f32, y: f32) -> bool {
    let (w, h) = (r.w(), r.h());
    let (lx, ly) = (x - r.x1, y - r.y1);
    if lx < 0.0 || ly < 0.0 || lx >= w || ly >= h {
        return false;
    }
    let (u, v) = (lx / w, ly / h);
    match class {
        0 => true,
        1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        2 => (u - 0.5).abs() <= 0.5 * v,
        3 => (u - 0.5).abs() <= 0.17 || (v - 0.5).abs() <= 0.17,
        _ => true,
    }
}

/// Rotation of RGB about the gray axis.
fn hue_matrix(degrees: f32) -> [[f32; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let r = (1.0f32 / 3.0).sqrt();
    let a = c + (1.0 - c) * k;
    let b = (1.0 - c) * k - r * s;
    let d = (1.0 - c) * k + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn apply_shift(image: &mut Image, background: &[bool], shift: &DomainShift, rng: &mut ChaCha8Rng) {
    let (h, w, _) = image.dim();
    let m = hue_matrix(shift.hue_degrees);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let noise = Normal::new(0.0f32, shift.noise_sigma.max(0.0)).expect("noise sigma");
    for y in 0..h {
        for x in 0..w {
            let p = [image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]];
            let mut q = [0.0f32; 3];
            for (i, row) in m.iter().enumerate() {
                q[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            }
            if background[y * w + x] {
                let t = shift.texture_amplitude
                    * ((std::f32::consts::TAU * (x as f32 + 0.5 * y as f32)) / shift.texture_period + phase).sin();
                for (ch, v) in q.iter_mut().enumerate() {
                    // warm/cool stripes rather than pure luminance
                    *v += if ch == 1 { 0.5 * t } else { t };
                }
            }
            for (ch, v) in q.iter().enumerate() {
                let n = if shift.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                image[[y, x, ch]] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
}

/// Renders one scene of `category` (verb-major id). Deterministic in
/// `(category, domain, seed)`; both domains share the layout for a seed.
pub fn synthesize_scene(
    scene: &SceneConfig,
    category: usize,
    domain: Domain,
    seed: u64,
) -> Result<Sample> {
    scene.validate()?;
    let count = scene.num_categories();
    if category >= count {
        return Err(Error::UnknownCategory { id: category, count });
    }
    let verb = category / scene.num_objects;
    let object = category % scene.num_objects;
    let size = scene.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, category as u64, 0x5CE4E]));
    let lay = layout(verb, object, size as f32, &mut rng);

    let mut image = Image::zeros((size, size, 3));
    let mut background = vec![true; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let color = if inside_object(&lay.object, object, px, py) {
                Some(lay.object_color)
            } else if inside_human(&lay.human, px, py) {
                Some(lay.human_color)
            } else {
                None
            };
            let c = match color {
                Some(c) => {
                    background[y * size + x] = false;
                    c
                }
                None => lay.background,
            };
            for ch in 0..3 {
                image[[y, x, ch]] = c[ch];
            }
        }
    }
    if domain == Domain::Generated {
        let mut shift_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, category as u64, 0x6E4]));
        apply_shift(&mut image, &background, &scene.shift, &mut shift_rng);
    }
    let annotation = HoiAnnotation {
        human_box: lay.human.to_bbox(size as f32),
        object_box: lay.object.to_bbox(size as f32),
        object_class: object,
        verb_class: verb,
    };
    let prefix = match domain {
        Domain::Original => "orig",
        Domain::Generated => "gen",
    };
    Ok(Sample::new(
        format!("{prefix}-c{category:03}-{seed:016x}"),
        image,
        domain,
        vec![annotation],
        (domain == Domain::Generated).then_some(category),
    ))
}

/// `num_patches × (patch·patch·3)`, patches in row-major grid order,
/// pixels in row-major order inside a patch, channels innermost.
pub fn patchify(image: &Image, patch: usize) -> Mat {
    let (h, w, c) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Mat::zeros((gh * gw, patch * patch * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        out[[row, k]] = image[[gy * patch + py, gx * patch + px, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`] for a square image of `size` pixels.
pub fn unpatchify(patches: &Mat, patch: usize, size: usize) -> Image {
    let g = size / patch;
    let mut img = Image::zeros((size, size, 3));
    for gy in 0..g {
        for gx in 0..g {
            let row = gy * g + gx;
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        img[[gy * patch + py, gx * patch + px, ch]] = patches[[row, k]];
                        k += 1;
                    }
                }
            }
        }
    }
    img
}
