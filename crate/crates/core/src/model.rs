//! The detector together with both plug-in components, sharing one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::AlignmentModule;
use crate::config::ExperimentConfig;
use crate::context::ContextModule;
use crate::data::derive_seed;
use crate::detector::{DetectorDims, HoiDetector, BACKBONE, ENCODER, HEADS, PAIR_DECODER, REL_DECODER};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Prefixes of every detector parameter.
pub const DETECTOR_PREFIXES: [&str; 5] = [BACKBONE, ENCODER, PAIR_DECODER, REL_DECODER, HEADS];

/// Module names accepted in `train.frozen`, with their parameter prefixes.
pub const MODULES: [(&str, &str); 7] = [
    ("backbone", BACKBONE),
    ("encoder", ENCODER),
    ("pair_decoder", PAIR_DECODER),
    ("rel_decoder", REL_DECODER),
    ("heads", HEADS),
    ("align", crate::alignment::PREFIX),
    ("ctx", crate::context::PREFIX),
];

pub fn module_prefix(name: &str) -> Result<&'static str> {
    MODULES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, p)| *p)
        .ok_or_else(|| {
            let names: Vec<_> = MODULES.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown module '{name}'; modules: {}", names.join(", ")))
        })
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub detector: HoiDetector,
    pub align: AlignmentModule,
    pub context: ContextModule,
}

impl Model {
    /// Builds every module regardless of toggles, so a store can move between
    /// presets. Each module draws from its own seed stream.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.model.seed;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xDE7]));
        let detector = HoiDetector::new(&mut store, &mut rng, DetectorDims::from_config(cfg))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xA119]));
        let align = AlignmentModule::new(&mut store, &mut rng, &cfg.align, cfg.model.dim, cfg.model.heads);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xC7C]));
        let context = ContextModule::new(&mut store, &mut rng, &cfg.ctx, &detector);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            detector,
            align,
            context,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.cfg.model_fingerprint()
    }

    /// Copies detector weights from `other` by name.
    pub fn load_detector_from(&mut self, other: &ParamStore) -> Result<()> {
        let ids: Vec<_> = self
            .store
            .iter()
            .filter(|(_, p)| DETECTOR_PREFIXES.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in ids {
            let src = other
                .id(&name)
                .ok_or_else(|| Error::Config(format!("source weights lack parameter '{name}'")))?;
            let value = other.value(src);
            if value.dim() != self.store.value(id).dim() {
                return Err(Error::Shape(format!(
                    "parameter '{name}' is {:?} in the source, {:?} here",
                    value.dim(),
                    self.store.value(id).dim()
                )));
            }
            self.store.value_mut(id).assign(value);
        }
        Ok(())
    }

    /// Per-parameter trainable flags after applying `train.frozen`.
    pub fn trainable_mask(&self, frozen: &[String]) -> Result<Vec<bool>> {
        let prefixes = frozen.iter().map(|n| module_prefix(n)).collect::<Result<Vec<_>>>()?;
        Ok(self
            .store
            .iter()
            .map(|(_, p)| !prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .collect())
    }
}
