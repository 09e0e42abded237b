//! On-disk layout:
//!
//! ```text
//! DIR/images/<sample_id>.png
//! DIR/annotations.json   [{sample_id, domain, annotations: [{human_box, object_box, object_class, verb_class}], prompt_category?}]
//! DIR/manifest.json      {grammar, num_categories, rare_threshold, category_counts, splits}
//! ```
//!
//! Boxes are `[cx, cy, w, h]` normalized to `[0, 1]`.
//!
//! The HICO-style format reads `DIR/hico_annotations.json`, a list of
//! `{file_name, annotations: [{bbox: [x1, y1, x2, y2], category_id}],
//! hoi_annotation: [{subject_id, object_id, category_id}], domain?, split?}`
//! with pixel boxes, images under `DIR/images/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetManifest, Grammar, SampleRecord, Splits};
use super::{Domain, HoiAnnotation, Image};
use crate::boxes::BBox;
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HICO_FILE: &str = "hico_annotations.json";
const DEFAULT_RARE_THRESHOLD: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestFormat {
    Internal,
    HicoStyle,
}

impl FromStr for IngestFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(Self::Internal),
            "hico_style" => Ok(Self::HicoStyle),
            other => Err(Error::Config(format!(
                "unknown format '{other}'; expected internal or hico_style"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    grammar: Grammar,
    num_categories: usize,
    rare_threshold: usize,
    category_counts: BTreeMap<usize, usize>,
    splits: Splits,
}

fn image_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join("images").join(format!("{sample_id}.png"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, &e))
}

pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Writes images, annotations and manifest under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (rec, img) in ds.manifest.samples.iter().zip(&ds.images) {
        save_png(&image_path(dir, &rec.sample_id), img)?;
    }
    write_json(&dir.join(ANNOTATIONS_FILE), &ds.manifest.samples)?;
    let m = &ds.manifest;
    write_json(
        &dir.join(MANIFEST_FILE),
        &ManifestFile {
            grammar: m.grammar,
            num_categories: m.num_categories,
            rare_threshold: m.rare_threshold,
            category_counts: m.category_counts.clone(),
            splits: m.splits.clone(),
        },
    )
}

fn validate_annotation(a: &HoiAnnotation, grammar: &Grammar, location: &str) -> Result<()> {
    for (name, b) in [("human_box", &a.human_box), ("object_box", &a.object_box)] {
        if let Some(field) = b.invalid_field() {
            let value = match field {
                "cx" => b.cx,
                "cy" => b.cy,
                "w" => b.w,
                _ => b.h,
            };
            return Err(Error::Validation {
                location: format!("{location}.{name}.{field}"),
                message: format!("box coordinate {value} outside [0, 1] or non-positive size"),
            });
        }
    }
    if a.object_class >= grammar.num_objects {
        return Err(Error::Validation {
            location: format!("{location}.object_class"),
            message: format!("object class {} >= {}", a.object_class, grammar.num_objects),
        });
    }
    if a.verb_class >= grammar.num_verbs {
        return Err(Error::Validation {
            location: format!("{location}.verb_class"),
            message: format!("verb class {} >= {}", a.verb_class, grammar.num_verbs),
        });
    }
    Ok(())
}

fn inferred_grammar(records: &[SampleRecord]) -> Grammar {
    let anns = records.iter().flat_map(|r| r.annotations.iter());
    let (mut v, mut o) = (0, 0);
    for a in anns {
        v = v.max(a.verb_class + 1);
        o = o.max(a.object_class + 1);
    }
    Grammar {
        num_verbs: v,
        num_objects: o,
    }
}

/// Reads and validates a dataset directory without loading pixels.
pub fn ingest_external(dir: &Path, format: IngestFormat) -> Result<DatasetManifest> {
    match format {
        IngestFormat::Internal => ingest_internal(dir),
        IngestFormat::HicoStyle => ingest_hico(dir),
    }
}

fn ingest_internal(dir: &Path) -> Result<DatasetManifest> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let records: Vec<SampleRecord> = read_json(&ann_path)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        let mf: ManifestFile = read_json(&manifest_path)?;
        DatasetManifest {
            grammar: mf.grammar,
            num_categories: mf.num_categories,
            rare_threshold: mf.rare_threshold,
            category_counts: mf.category_counts,
            splits: mf.splits,
            samples: Vec::new(),
        }
    } else {
        let grammar = inferred_grammar(&records);
        let mut m = DatasetManifest::empty(
            grammar,
            grammar.num_verbs * grammar.num_objects,
            DEFAULT_RARE_THRESHOLD,
        );
        m.splits.train = records.iter().map(|r| r.sample_id.clone()).collect();
        m
    };
    let file = ann_path.display().to_string();
    for (i, r) in records.iter().enumerate() {
        for (j, a) in r.annotations.iter().enumerate() {
            validate_annotation(
                a,
                &manifest.grammar,
                &format!("{file}: entry {i} ({}) annotations[{j}]", r.sample_id),
            )?;
        }
        let img = image_path(dir, &r.sample_id);
        if !img.exists() {
            return Err(Error::MissingImage {
                reference: img.display().to_string(),
                location: format!("{file}: entry {i} ({})", r.sample_id),
            });
        }
    }
    manifest.samples = records;
    if !manifest_path.exists() {
        manifest.recount();
    }
    Ok(manifest)
}

#[derive(Deserialize)]
struct HicoBox {
    bbox: [f32; 4],
    category_id: usize,
}

#[derive(Deserialize)]
struct HicoHoi {
    subject_id: usize,
    object_id: usize,
    category_id: usize,
}

#[derive(Deserialize)]
struct HicoEntry {
    file_name: String,
    #[serde(default)]
    annotations: Vec<HicoBox>,
    #[serde(default)]
    hoi_annotation: Vec<HicoHoi>,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn ingest_hico(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(HICO_FILE);
    let entries: Vec<HicoEntry> = read_json(&path)?;
    let file = path.display().to_string();
    let mut records = Vec::with_capacity(entries.len());
    let mut splits = Splits::default();
    for (i, e) in entries.iter().enumerate() {
        let loc = format!("{file}: entry {i} ({})", e.file_name);
        let img_path = dir.join("images").join(&e.file_name);
        if !img_path.exists() {
            return Err(Error::MissingImage {
                reference: img_path.display().to_string(),
                location: loc,
            });
        }
        let (w, h) = image::image_dimensions(&img_path).map_err(|err| Error::Image {
            path: img_path.clone(),
            message: err.to_string(),
        })?;
        let to_box = |b: &[f32; 4]| {
            BBox::from_corners(b[0] / w as f32, b[1] / h as f32, b[2] / w as f32, b[3] / h as f32)
        };
        let mut anns = Vec::new();
        for (j, hoi) in e.hoi_annotation.iter().enumerate() {
            let get = |id: usize, role: &str| {
                e.annotations.get(id).ok_or_else(|| Error::Validation {
                    location: format!("{loc} hoi_annotation[{j}].{role}"),
                    message: format!("box index {id} out of range ({} boxes)", e.annotations.len()),
                })
            };
            let subject = get(hoi.subject_id, "subject_id")?;
            let object = get(hoi.object_id, "object_id")?;
            anns.push(HoiAnnotation {
                human_box: to_box(&subject.bbox),
                object_box: to_box(&object.bbox),
                object_class: object.category_id,
                verb_class: hoi.category_id,
            });
        }
        let domain = match &e.domain {
            Some(d) => Domain::from_str(d).map_err(|_| Error::Validation {
                location: format!("{loc}.domain"),
                message: format!("unknown domain '{d}'"),
            })?,
            None => Domain::Original,
        };
        let sample_id = Path::new(&e.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| e.file_name.clone());
        match e.split.as_deref() {
            Some("test") => splits.test.push(sample_id.clone()),
            _ => splits.train.push(sample_id.clone()),
        }
        records.push(SampleRecord {
            sample_id,
            domain,
            annotations: anns,
            prompt_category: None,
        });
    }
    let grammar = inferred_grammar(&records);
    for (i, r) in records.iter().enumerate() {
        for (j, a) in r.annotations.iter().enumerate() {
            validate_annotation(a, &grammar, &format!("{file}: entry {i} hoi_annotation[{j}]"))?;
        }
    }
    let mut m = DatasetManifest::empty(
        grammar,
        grammar.num_verbs * grammar.num_objects,
        DEFAULT_RARE_THRESHOLD,
    );
    m.splits = splits;
    m.samples = records;
    m.recount();
    Ok(m)
}

/// Ingests an internal-format directory and loads every image.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = ingest_internal(dir)?;
    let images = manifest
        .samples
        .iter()
        .map(|r| load_png(&image_path(dir, &r.sample_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(manifest, images))
}
