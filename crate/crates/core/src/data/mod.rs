//! Two-domain long-tail HOI data: scene synthesis, manifests, disk I/O.

mod augment;
mod dataset;
mod io;
mod scene;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

pub use augment::random_shift;
pub use dataset::{
    build_longtail_dataset, generate_supplement, longtail_profile, Dataset, DatasetManifest,
    Grammar, SampleRecord, Splits,
};
pub use io::{ingest_external, load_dataset, write_dataset, IngestFormat};
pub use scene::{
    decode_relation, derive_seed, patchify, synthesize_scene, unpatchify, OBJECT_NAMES, VERB_NAMES,
};

/// `H × W × 3`, values in `[0, 1]`.
pub type Image = Array3<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Original,
    Generated,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Original => "original",
            Domain::Generated => "generated",
        }
    }

    /// Discriminator target: 1 for original, 0 for generated.
    pub fn label(self) -> f32 {
        match self {
            Domain::Original => 1.0,
            Domain::Generated => 0.0,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "original" => Ok(Domain::Original),
            "generated" => Ok(Domain::Generated),
            other => Err(crate::Error::Config(format!(
                "invalid domain '{other}'; expected original or generated"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiAnnotation {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb_class: usize,
}

impl HoiAnnotation {
    /// Triplet category id for a grammar with `num_objects` object classes.
    pub fn category(&self, num_objects: usize) -> usize {
        self.verb_class * num_objects + self.object_class
    }
}

/// One rendered or loaded image with its annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    pub image: Image,
    domain: Domain,
    pub annotations: Vec<HoiAnnotation>,
    /// Category named in the generation prompt, for generated images.
    pub prompt_category: Option<usize>,
}

impl Sample {
    pub fn new(
        sample_id: String,
        image: Image,
        domain: Domain,
        annotations: Vec<HoiAnnotation>,
        prompt_category: Option<usize>,
    ) -> Self {
        Self {
            sample_id,
            image,
            domain,
            annotations,
            prompt_category,
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }
}
