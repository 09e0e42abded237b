//! Experiment configuration.
//!
//! Everything is addressable through flat dotted keys (`align.k`,
//! `ctx.sigma`, ...) so config files, presets and CLI overrides all go
//! through [`ExperimentConfig::set`].

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::ExecMode;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "invalid {} '{}'; expected one of: {}",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(
    /// Adjacency rule between prototype and regular nodes.
    GraphVariant {
        Bidirectional => "bidirectional",
        FullyConnected => "fully_connected",
        Directed => "directed",
    }
);

string_enum!(
    Aggregator {
        Gcn => "gcn",
        Transformer => "transformer",
    }
);

string_enum!(
    ControllerKind {
        CrossAttention => "cross_attention",
        SelfAttention => "self_attention",
        Mlp => "mlp",
    }
);

string_enum!(
    LossScope {
        MaskedOnly => "masked_only",
        AllPatches => "all_patches",
    }
);

string_enum!(
    Conditioning {
        Gated => "gated",
        None => "none",
    }
);

string_enum!(
    GateKind {
        Hard => "hard",
        StraightThrough => "straight_through",
    }
);

string_enum!(
    LabelSource {
        Pseudo => "pseudo",
        Prompt => "prompt",
    }
);

string_enum!(
    /// `hoi`: verb and object must match. `action`: verb only (V-COCO scenario-1 style).
    EvalMode {
        Hoi => "hoi",
        Action => "action",
    }
);

/// Appearance shift applied to every generated-domain rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub texture_amplitude: f32,
    pub texture_period: f32,
    pub hue_degrees: f32,
    pub noise_sigma: f32,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            texture_amplitude: 0.06,
            texture_period: 6.0,
            hue_degrees: 20.0,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_verbs: usize,
    pub num_objects: usize,
    pub shift: DomainShift,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            patch_size: 8,
            num_verbs: 6,
            num_objects: 5,
            shift: DomainShift::default(),
        }
    }
}

impl SceneConfig {
    pub fn num_categories(&self) -> usize {
        self.num_verbs * self.num_objects
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image size {} is below the 32 px minimum the scene grammar needs",
                self.image_size
            )));
        }
        if !(1..=6).contains(&self.num_verbs) || !(1..=5).contains(&self.num_objects) {
            return Err(Error::Config(format!(
                "scene grammar supports 1..=6 verbs and 1..=5 objects, got {} and {}",
                self.num_verbs, self.num_objects
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Number of triplet categories used, a prefix of the scene grammar's ids.
    pub classes: usize,
    pub rare_threshold: usize,
    pub tail_classes: usize,
    pub tail_count: usize,
    pub head_max: usize,
    pub zipf_exponent: f32,
    pub test_per_class: usize,
    pub per_rare: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 30,
            rare_threshold: 10,
            tail_classes: 8,
            tail_count: 8,
            head_max: 40,
            zipf_exponent: 0.6,
            test_per_class: 6,
            per_rare: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Backbone/encoder discriminators (L_enc).
    pub encoder: bool,
    /// Prototype-graph instance discriminator (L_inst).
    pub instance: bool,
    pub k: usize,
    pub graph_variant: GraphVariant,
    pub gcn_layers: usize,
    pub grl_lambda: f32,
    /// Linear ramp of the reversal coefficient over this many steps; 0 = constant.
    pub grl_warmup_steps: usize,
    pub aggregator: Aggregator,
    pub disc_hidden: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            encoder: false,
            instance: false,
            k: 6,
            graph_variant: GraphVariant::Bidirectional,
            gcn_layers: 1,
            grl_lambda: 1.0,
            grl_warmup_steps: 0,
            aggregator: Aggregator::Gcn,
            disc_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub enabled: bool,
    pub sigma: f32,
    pub controller: ControllerKind,
    pub loss_scope: LossScope,
    pub conditioning: Conditioning,
    pub gate: GateKind,
    /// One gate value per token instead of one per channel.
    pub per_token_gate: bool,
    pub decoder_layers: usize,
    pub decoder_width: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma: 0.8,
            controller: ControllerKind::CrossAttention,
            loss_scope: LossScope::MaskedOnly,
            conditioning: Conditioning::Gated,
            gate: GateKind::Hard,
            per_token_gate: false,
            decoder_layers: 2,
            decoder_width: 64,
        }
    }
}

/// Weights of the set-prediction HOI loss and its matching cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiLossWeights {
    pub bbox: f32,
    pub giou: f32,
    pub object: f32,
    pub verb: f32,
    pub no_object: f32,
}

impl Default for HoiLossWeights {
    fn default() -> Self {
        Self {
            bbox: 2.5,
            giou: 1.0,
            object: 1.0,
            verb: 1.0,
            no_object: 0.1,
        }
    }
}

/// Multipliers on the ledger terms. All default to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub sup: f32,
    pub unsup: f32,
    pub enc: f32,
    pub inst: f32,
    pub ctx: f32,
}

impl Default for ComponentWeights {
    fn default() -> Self {
        Self {
            sup: 1.0,
            unsup: 1.0,
            enc: 1.0,
            inst: 1.0,
            ctx: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_backbone: f32,
    pub lr_rest: f32,
    pub lr_disc: f32,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f32,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub pseudo_threshold: f32,
    /// Drop a pseudo-label that overlaps a higher-scoring one of the same
    /// category above this IoU (both boxes); 1.0 disables.
    pub pseudo_dedup_iou: f32,
    pub frozen: Vec<String>,
    pub use_generated: bool,
    pub label_source: LabelSource,
    /// Route prompt-labelled generated images through L_sup as well.
    pub generated_in_sup: bool,
    /// Random whole-pixel translation of every training image.
    pub augment: bool,
    pub weights: ComponentWeights,
    pub hoi: HoiLossWeights,
    pub eval_every: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_rest: 1e-4,
            lr_disc: 1e-3,
            pretrain_epochs: 30,
            pretrain_lr: 1e-3,
            finetune_steps: 300,
            batch_size: 8,
            pseudo_threshold: 1.4,
            pseudo_dedup_iou: 0.7,
            frozen: vec!["pair_decoder".to_string()],
            use_generated: true,
            label_source: LabelSource::Pseudo,
            generated_in_sup: false,
            augment: true,
            weights: ComponentWeights::default(),
            hoi: HoiLossWeights::default(),
            eval_every: 0,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f32,
    pub mode: EvalMode,
    pub probe_folds: usize,
    /// Per image, only the highest-scoring triplet candidates are kept.
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mode: EvalMode::Hoi,
            probe_folds: 5,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub ctx: ContextConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

impl ExperimentConfig {
    /// Small configuration sized for single-core CPU experiments: 48 px
    /// images with 8 px patches (6×6 token grid) and width-32 transformers.
    /// Head categories are capped at 100 originals; pretraining runs 100
    /// epochs of batch 4.
    pub fn quick() -> Self {
        let mut cfg = Self::default();
        cfg.scene.image_size = 48;
        cfg.model.dim = 32;
        cfg.model.heads = 2;
        cfg.align.disc_hidden = 32;
        cfg.ctx.decoder_width = 32;
        cfg.data.head_max = 100;
        cfg.train.batch_size = 4;
        cfg.train.pretrain_epochs = 100;
        cfg.train.finetune_steps = 1000;
        cfg
    }

    /// Tiny configuration for tests and smoke runs: 32 px images, 8
    /// categories of which 2 are rare, a few steps of each phase.
    pub fn toy() -> Self {
        let mut cfg = Self::quick();
        cfg.scene.image_size = 32;
        cfg.model.dim = 16;
        cfg.model.encoder_layers = 1;
        cfg.model.decoder_layers = 1;
        cfg.model.num_queries = 8;
        cfg.align.k = 4;
        cfg.align.disc_hidden = 16;
        cfg.ctx.decoder_width = 16;
        cfg.ctx.decoder_layers = 1;
        cfg.data = DataConfig {
            classes: 8,
            rare_threshold: 4,
            tail_classes: 2,
            tail_count: 2,
            head_max: 8,
            zipf_exponent: 0.6,
            test_per_class: 2,
            per_rare: 4,
            seed: 0,
        };
        cfg.train.batch_size = 4;
        cfg.train.pretrain_epochs = 2;
        cfg.train.finetune_steps = 4;
        cfg
    }

    /// Every settable key, grouped by section.
    pub const KEYS: &'static [&'static str] = &[
        "align.aggregator",
        "align.disc_hidden",
        "align.encoder",
        "align.gcn_layers",
        "align.graph_variant",
        "align.grl_lambda",
        "align.grl_warmup_steps",
        "align.instance",
        "align.k",
        "ctx.conditioning",
        "ctx.controller",
        "ctx.decoder_layers",
        "ctx.decoder_width",
        "ctx.enabled",
        "ctx.gate",
        "ctx.loss_scope",
        "ctx.per_token_gate",
        "ctx.sigma",
        "data.classes",
        "data.head_max",
        "data.per_rare",
        "data.rare_threshold",
        "data.seed",
        "data.tail_classes",
        "data.tail_count",
        "data.test_per_class",
        "data.zipf_exponent",
        "eval.iou_threshold",
        "eval.max_detections",
        "eval.mode",
        "eval.probe_folds",
        "model.decoder_layers",
        "model.dim",
        "model.encoder_layers",
        "model.heads",
        "model.num_queries",
        "model.seed",
        "scene.hue_degrees",
        "scene.image_size",
        "scene.noise_sigma",
        "scene.num_objects",
        "scene.num_verbs",
        "scene.patch_size",
        "scene.texture_amplitude",
        "scene.texture_period",
        "train.augment",
        "train.batch_size",
        "train.eval_every",
        "train.exec",
        "train.finetune_steps",
        "train.frozen",
        "train.generated_in_sup",
        "train.label_source",
        "train.lr_backbone",
        "train.lr_disc",
        "train.lr_rest",
        "train.pretrain_epochs",
        "train.pretrain_lr",
        "train.pseudo_dedup_iou",
        "train.pseudo_threshold",
        "train.seed",
        "train.use_generated",
        "train.w_ctx",
        "train.w_enc",
        "train.w_inst",
        "train.w_sup",
        "train.w_unsup",
        "train.w_bbox",
        "train.w_giou",
        "train.w_object",
        "train.w_verb",
        "train.w_no_object",
    ];

    /// Sets one flat key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim().trim_matches('"');
        match key {
            "scene.image_size" => self.scene.image_size = parse(key, v)?,
            "scene.patch_size" => self.scene.patch_size = parse(key, v)?,
            "scene.num_verbs" => self.scene.num_verbs = parse(key, v)?,
            "scene.num_objects" => self.scene.num_objects = parse(key, v)?,
            "scene.texture_amplitude" => self.scene.shift.texture_amplitude = parse(key, v)?,
            "scene.texture_period" => self.scene.shift.texture_period = parse(key, v)?,
            "scene.hue_degrees" => self.scene.shift.hue_degrees = parse(key, v)?,
            "scene.noise_sigma" => self.scene.shift.noise_sigma = parse(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.rare_threshold" => self.data.rare_threshold = parse(key, v)?,
            "data.tail_classes" => self.data.tail_classes = parse(key, v)?,
            "data.tail_count" => self.data.tail_count = parse(key, v)?,
            "data.head_max" => self.data.head_max = parse(key, v)?,
            "data.zipf_exponent" => self.data.zipf_exponent = parse(key, v)?,
            "data.test_per_class" => self.data.test_per_class = parse(key, v)?,
            "data.per_rare" => self.data.per_rare = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.encoder_layers" => self.model.encoder_layers = parse(key, v)?,
            "model.decoder_layers" => self.model.decoder_layers = parse(key, v)?,
            "model.num_queries" => self.model.num_queries = parse(key, v)?,
            "model.seed" => self.model.seed = parse(key, v)?,
            "align.encoder" => self.align.encoder = parse_bool(key, v)?,
            "align.instance" => self.align.instance = parse_bool(key, v)?,
            "align.k" => self.align.k = parse(key, v)?,
            "align.graph_variant" => self.align.graph_variant = v.parse()?,
            "align.gcn_layers" => self.align.gcn_layers = parse(key, v)?,
            "align.grl_lambda" => self.align.grl_lambda = parse(key, v)?,
            "align.grl_warmup_steps" => self.align.grl_warmup_steps = parse(key, v)?,
            "align.aggregator" => self.align.aggregator = v.parse()?,
            "align.disc_hidden" => self.align.disc_hidden = parse(key, v)?,
            "ctx.enabled" => self.ctx.enabled = parse_bool(key, v)?,
            "ctx.sigma" => self.ctx.sigma = parse(key, v)?,
            "ctx.controller" => self.ctx.controller = v.parse()?,
            "ctx.loss_scope" => self.ctx.loss_scope = v.parse()?,
            "ctx.conditioning" => self.ctx.conditioning = v.parse()?,
            "ctx.gate" => self.ctx.gate = v.parse()?,
            "ctx.per_token_gate" => self.ctx.per_token_gate = parse_bool(key, v)?,
            "ctx.decoder_layers" => self.ctx.decoder_layers = parse(key, v)?,
            "ctx.decoder_width" => self.ctx.decoder_width = parse(key, v)?,
            "train.lr_backbone" => self.train.lr_backbone = parse(key, v)?,
            "train.lr_rest" => self.train.lr_rest = parse(key, v)?,
            "train.lr_disc" => self.train.lr_disc = parse(key, v)?,
            "train.pretrain_epochs" => self.train.pretrain_epochs = parse(key, v)?,
            "train.pretrain_lr" => self.train.pretrain_lr = parse(key, v)?,
            "train.finetune_steps" => self.train.finetune_steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.pseudo_threshold" => self.train.pseudo_threshold = parse(key, v)?,
            "train.pseudo_dedup_iou" => self.train.pseudo_dedup_iou = parse(key, v)?,
            "train.frozen" => {
                self.train.frozen = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "train.use_generated" => self.train.use_generated = parse_bool(key, v)?,
            "train.label_source" => self.train.label_source = v.parse()?,
            "train.generated_in_sup" => self.train.generated_in_sup = parse_bool(key, v)?,
            "train.augment" => self.train.augment = parse_bool(key, v)?,
            "train.w_sup" => self.train.weights.sup = parse(key, v)?,
            "train.w_unsup" => self.train.weights.unsup = parse(key, v)?,
            "train.w_enc" => self.train.weights.enc = parse(key, v)?,
            "train.w_inst" => self.train.weights.inst = parse(key, v)?,
            "train.w_ctx" => self.train.weights.ctx = parse(key, v)?,
            "train.w_bbox" => self.train.hoi.bbox = parse(key, v)?,
            "train.w_giou" => self.train.hoi.giou = parse(key, v)?,
            "train.w_object" => self.train.hoi.object = parse(key, v)?,
            "train.w_verb" => self.train.hoi.verb = parse(key, v)?,
            "train.w_no_object" => self.train.hoi.no_object = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.exec" => self.train.exec = v.parse()?,
            "eval.iou_threshold" => self.eval.iou_threshold = parse(key, v)?,
            "eval.mode" => self.eval.mode = v.parse()?,
            "eval.probe_folds" => self.eval.probe_folds = parse(key, v)?,
            "eval.max_detections" => self.eval.max_detections = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}'; known keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Sets the same seed on data, model and trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.model.num_queries == 0 {
            return Err(Error::Config("model.num_queries must be at least 1".into()));
        }
        if self.model.dim == 0 || !self.model.dim.is_multiple_of(self.model.heads.max(1)) || self.model.heads == 0 {
            return Err(Error::Config(format!(
                "model.dim {} must be a positive multiple of model.heads {}",
                self.model.dim, self.model.heads
            )));
        }
        if self.align.k == 0 || self.align.k > self.model.num_queries {
            return Err(Error::Config(format!(
                "align.k must be in 1..={} (num_queries), got {}",
                self.model.num_queries, self.align.k
            )));
        }
        if !(self.ctx.sigma > 0.0 && self.ctx.sigma < 1.0) {
            return Err(Error::Config(format!(
                "ctx.sigma must lie strictly between 0 and 1, got {}",
                self.ctx.sigma
            )));
        }
        if !self.ctx.decoder_width.is_multiple_of(self.model.heads) {
            return Err(Error::Config(format!(
                "ctx.decoder_width {} must be a multiple of model.heads {}",
                self.ctx.decoder_width, self.model.heads
            )));
        }
        if !(self.align.grl_lambda.is_finite() && self.align.grl_lambda >= 0.0) {
            return Err(Error::Config("align.grl_lambda must be finite and >= 0".into()));
        }
        if self.train.pseudo_threshold < 0.0 {
            return Err(Error::Config(format!(
                "train.pseudo_threshold must be >= 0, got {}",
                self.train.pseudo_threshold
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.data.classes == 0 || self.data.classes > self.scene.num_categories() {
            return Err(Error::Config(format!(
                "data.classes must be in 1..={}, got {}",
                self.scene.num_categories(),
                self.data.classes
            )));
        }
        Ok(())
    }

    /// Loads a flat key-value TOML file. A top-level `preset` key applies a
    /// named preset before the remaining keys.
    pub fn from_file(path: &Path) -> Result<(Self, Option<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<(Self, Option<String>)> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {e}")))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        let preset = flat.remove("preset");
        let mut cfg = match flat.remove("scale").as_deref() {
            None | Some("standard") => Self::default(),
            Some("quick") => Self::quick(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown scale '{other}'; expected standard or quick"
                )))
            }
        };
        if let Some(p) = &preset {
            crate::presets::Preset::from_str(p)?.apply(&mut cfg);
        }
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok((cfg, preset))
    }

    /// SHA-256 over the architecture-defining part of the config.
    pub fn model_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let arch = serde_json::json!({
            "image_size": self.scene.image_size,
            "patch_size": self.scene.patch_size,
            "num_verbs": self.scene.num_verbs,
            "num_objects": self.scene.num_objects,
            "model": {
                "dim": self.model.dim,
                "heads": self.model.heads,
                "encoder_layers": self.model.encoder_layers,
                "decoder_layers": self.model.decoder_layers,
                "num_queries": self.model.num_queries,
            },
            "align": {
                "gcn_layers": self.align.gcn_layers,
                "aggregator": self.align.aggregator,
                "disc_hidden": self.align.disc_hidden,
            },
            "ctx": {
                "controller": self.ctx.controller,
                "decoder_layers": self.ctx.decoder_layers,
                "decoder_width": self.ctx.decoder_width,
                "per_token_gate": self.ctx.per_token_gate,
            },
        });
        hex::encode(Sha256::digest(arch.to_string().as_bytes()))
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        toml::Value::Array(items) => {
            let joined: Vec<String> = items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.insert(prefix.to_string(), joined.join(","));
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}
