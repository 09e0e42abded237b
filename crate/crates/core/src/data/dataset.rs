use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{derive_seed, synthesize_scene};
use super::{Domain, HoiAnnotation, Image, Sample};
use crate::config::{DataConfig, SceneConfig};
use crate::error::{Error, Result};

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const GEN_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    pub num_verbs: usize,
    pub num_objects: usize,
}

impl From<&SceneConfig> for Grammar {
    fn from(s: &SceneConfig) -> Self {
        Self {
            num_verbs: s.num_verbs,
            num_objects: s.num_objects,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub domain: Domain,
    pub annotations: Vec<HoiAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_category: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Sample list, per-category training counts and the rare partition.
///
/// Counts cover original-domain training annotations only; generated
/// samples are supplementary and do not change which categories are rare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grammar: Grammar,
    pub num_categories: usize,
    pub rare_threshold: usize,
    pub category_counts: BTreeMap<usize, usize>,
    pub splits: Splits,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn empty(grammar: Grammar, num_categories: usize, rare_threshold: usize) -> Self {
        Self {
            grammar,
            num_categories,
            rare_threshold,
            category_counts: (0..num_categories).map(|c| (c, 0)).collect(),
            splits: Splits::default(),
            samples: Vec::new(),
        }
    }

    /// Manifest with only a count table, for checking the partition of an
    /// externally described dataset.
    pub fn from_counts(counts: &[usize], rare_threshold: usize) -> Self {
        let mut m = Self::empty(
            Grammar {
                num_verbs: counts.len(),
                num_objects: 1,
            },
            counts.len(),
            rare_threshold,
        );
        m.category_counts = counts.iter().copied().enumerate().collect();
        m
    }

    pub fn is_rare(&self, category: usize) -> bool {
        self.category_counts.get(&category).copied().unwrap_or(0) < self.rare_threshold
    }

    pub fn rare_categories(&self) -> Vec<usize> {
        (0..self.num_categories).filter(|c| self.is_rare(*c)).collect()
    }

    pub fn nonrare_categories(&self) -> Vec<usize> {
        (0..self.num_categories).filter(|c| !self.is_rare(*c)).collect()
    }

    pub fn record(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn category_of(&self, a: &HoiAnnotation) -> usize {
        a.category(self.grammar.num_objects)
    }

    /// Recomputes `category_counts` from original-domain training samples.
    pub fn recount(&mut self) {
        let train: BTreeSet<&str> = self.splits.train.iter().map(String::as_str).collect();
        let mut counts: BTreeMap<usize, usize> = (0..self.num_categories).map(|c| (c, 0)).collect();
        for s in &self.samples {
            if s.domain == Domain::Original && train.contains(s.sample_id.as_str()) {
                for a in &s.annotations {
                    *counts.entry(a.category(self.grammar.num_objects)).or_insert(0) += 1;
                }
            }
        }
        self.category_counts = counts;
    }
}

/// Manifest plus pixels, aligned with `manifest.samples`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Image>) -> Self {
        assert_eq!(manifest.samples.len(), images.len());
        let index = manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.sample_id.clone(), i))
            .collect();
        Self {
            manifest,
            images,
            index,
        }
    }

    pub fn push(&mut self, sample: Sample, train: bool) {
        let id = sample.sample_id.clone();
        self.index.insert(id.clone(), self.images.len());
        self.manifest.samples.push(SampleRecord {
            sample_id: id.clone(),
            domain: sample.domain(),
            annotations: sample.annotations,
            prompt_category: sample.prompt_category,
        });
        self.images.push(sample.image);
        if train {
            self.manifest.splits.train.push(id);
        } else {
            self.manifest.splits.test.push(id);
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn sample(&self, i: usize) -> Sample {
        let r = &self.manifest.samples[i];
        Sample::new(
            r.sample_id.clone(),
            self.images[i].clone(),
            r.domain,
            r.annotations.clone(),
            r.prompt_category,
        )
    }

    fn split_positions(&self, ids: &[String], domain: Option<Domain>) -> Vec<usize> {
        ids.iter()
            .filter_map(|id| self.position(id))
            .filter(|&i| domain.is_none_or(|d| self.manifest.samples[i].domain == d))
            .collect()
    }

    pub fn train_original(&self) -> Vec<usize> {
        self.split_positions(&self.manifest.splits.train, Some(Domain::Original))
    }

    pub fn train_generated(&self) -> Vec<usize> {
        self.split_positions(&self.manifest.splits.train, Some(Domain::Generated))
    }

    pub fn test(&self) -> Vec<usize> {
        self.split_positions(&self.manifest.splits.test, None)
    }
}

/// Per-category training counts: `tail_classes` categories (chosen by seed)
/// get `tail_count`; the rest follow a Zipf profile floored at the rare
/// threshold so they stay non-rare.
pub fn longtail_profile(cfg: &DataConfig) -> Result<Vec<usize>> {
    if cfg.tail_classes > cfg.classes {
        return Err(Error::Config(format!(
            "tail_classes {} exceeds classes {}",
            cfg.tail_classes, cfg.classes
        )));
    }
    if cfg.tail_classes > 0 && cfg.tail_count >= cfg.rare_threshold {
        return Err(Error::Config(format!(
            "tail count {} must be below rare_threshold {} for tail classes to be rare",
            cfg.tail_count, cfg.rare_threshold
        )));
    }
    if cfg.tail_classes > 0 && cfg.tail_count == 0 {
        return Err(Error::Config("tail count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..cfg.classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x7A11])));
    let mut counts = vec![0usize; cfg.classes];
    for (rank, &c) in order.iter().enumerate() {
        counts[c] = if rank >= cfg.classes - cfg.tail_classes {
            cfg.tail_count
        } else {
            let z = cfg.head_max as f32 / ((rank + 1) as f32).powf(cfg.zipf_exponent);
            (z.round() as usize).max(cfg.rare_threshold)
        };
    }
    Ok(counts)
}

/// Renders the original-domain train/test sets for a long-tail profile.
pub fn build_longtail_dataset(scene: &SceneConfig, cfg: &DataConfig) -> Result<Dataset> {
    scene.validate()?;
    if cfg.classes == 0 || cfg.classes > scene.num_categories() {
        return Err(Error::Config(format!(
            "classes must be in 1..={}, got {}",
            scene.num_categories(),
            cfg.classes
        )));
    }
    let counts = longtail_profile(cfg)?;
    let mut ds = Dataset::new(
        DatasetManifest::empty(Grammar::from(scene), cfg.classes, cfg.rare_threshold),
        Vec::new(),
    );
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let seed = derive_seed(&[cfg.seed, TRAIN_STREAM, c as u64, i as u64]);
            ds.push(synthesize_scene(scene, c, Domain::Original, seed)?, true);
        }
    }
    for c in 0..cfg.classes {
        for i in 0..cfg.test_per_class {
            let seed = derive_seed(&[cfg.seed, TEST_STREAM, c as u64, i as u64]);
            ds.push(synthesize_scene(scene, c, Domain::Original, seed)?, false);
        }
    }
    ds.manifest.recount();
    Ok(ds)
}

/// Adds `per_rare` generated-domain training images for every rare category.
pub fn generate_supplement(
    ds: &Dataset,
    scene: &SceneConfig,
    per_rare: usize,
    seed: u64,
) -> Result<Dataset> {
    if per_rare == 0 {
        return Err(Error::Config("per_rare_count must be positive".into()));
    }
    let mut out = ds.clone();
    for c in ds.manifest.rare_categories() {
        for i in 0..per_rare {
            let s = derive_seed(&[seed, GEN_STREAM, c as u64, i as u64]);
            out.push(synthesize_scene(scene, c, Domain::Generated, s)?, true);
        }
    }
    Ok(out)
}
