//! Minimal one-stage HOI detector: patch stem, transformer encoder,
//! human-object pair decoder, relationship decoder, prediction heads.

mod predict;

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::config::{ExperimentConfig, SceneConfig};
use crate::data::{patchify, Image};
use crate::error::{Error, Result};
use crate::nn::{sine_position_table, DecoderLayer, EncoderLayer, Linear, Mlp};
use crate::params::{normal_init, Group, ParamId, ParamStore};

pub use predict::{image_detections, pseudo_label, Prediction, Triplet};

/// Parameter-name prefixes, used for freezing and gradient bookkeeping.
pub const BACKBONE: &str = "backbone.";
pub const ENCODER: &str = "encoder.";
pub const PAIR_DECODER: &str = "pair_decoder.";
pub const REL_DECODER: &str = "rel_decoder.";
pub const HEADS: &str = "heads.";

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorDims {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub num_objects: usize,
    pub num_verbs: usize,
}

impl DetectorDims {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self::new(&cfg.scene, cfg)
    }

    fn new(scene: &SceneConfig, cfg: &ExperimentConfig) -> Self {
        Self {
            image_size: scene.image_size,
            patch_size: scene.patch_size,
            dim: cfg.model.dim,
            heads: cfg.model.heads,
            encoder_layers: cfg.model.encoder_layers,
            decoder_layers: cfg.model.decoder_layers,
            num_queries: cfg.model.num_queries,
            num_objects: scene.num_objects,
            num_verbs: scene.num_verbs,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Values of the four feature families for one image.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// Backbone grid features, `H'·W' × D`.
    pub x_b: Mat,
    /// Encoder tokens, `H'·W' × D`.
    pub x_e: Mat,
    /// Pair-decoder tokens, `N_q × D`.
    pub x_ho: Mat,
    /// Relationship-decoder tokens, `N_q × D`.
    pub x_ve: Mat,
}

impl FeatureBundle {
    pub fn is_finite(&self) -> bool {
        [&self.x_b, &self.x_e, &self.x_ho, &self.x_ve]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Raw head outputs as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `N_q × 4`, sigmoid-activated `cxcywh`.
    pub human_boxes: Var,
    pub object_boxes: Var,
    /// `N_q × (C_obj + 1)`; the last column is no-object.
    pub object_logits: Var,
    /// `N_q × C_verb`.
    pub verb_logits: Var,
}

/// Graph nodes of one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub x_b: Var,
    pub x_e: Var,
    pub x_ho: Var,
    pub x_ve: Var,
    pub heads: HeadOutputs,
}

impl ForwardPass {
    pub fn bundle(&self, g: &Graph) -> FeatureBundle {
        FeatureBundle {
            x_b: g.value(self.x_b).clone(),
            x_e: g.value(self.x_e).clone(),
            x_ho: g.value(self.x_ho).clone(),
            x_ve: g.value(self.x_ve).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HoiDetector {
    pub dims: DetectorDims,
    patch_embed: Linear,
    stem_mix: Linear,
    input_proj: Linear,
    pos: Mat,
    encoder: Vec<EncoderLayer>,
    queries: ParamId,
    pair_decoder: Vec<DecoderLayer>,
    rel_decoder: Vec<DecoderLayer>,
    human_box: Mlp,
    object_box: Mlp,
    object_cls: Linear,
    verb_cls: Linear,
}

impl HoiDetector {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dims: DetectorDims) -> Result<Self> {
        if dims.num_queries == 0 {
            return Err(Error::Config("detector needs at least one pair query".into()));
        }
        if dims.patch_size == 0 || !dims.image_size.is_multiple_of(dims.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by stem stride {}",
                dims.image_size, dims.patch_size
            )));
        }
        let d = dims.dim;
        let patch_embed = Linear::new(store, rng, "backbone.patch_embed", Group::Backbone, dims.patch_len(), d);
        let stem_mix = Linear::new(store, rng, "backbone.mix", Group::Backbone, d, d);
        let input_proj = Linear::new(store, rng, "encoder.input_proj", Group::Detector, d, d);
        let encoder = (0..dims.encoder_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("encoder.layers.{i}"), Group::Detector, d, dims.heads))
            .collect();
        let queries = store.add(
            "pair_decoder.queries",
            normal_init(rng, dims.num_queries, d, 1.0),
            Group::Detector,
        );
        let pair_decoder = (0..dims.decoder_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("pair_decoder.layers.{i}"), Group::Detector, d, dims.heads))
            .collect();
        let rel_decoder = (0..dims.decoder_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("rel_decoder.layers.{i}"), Group::Detector, d, dims.heads))
            .collect();
        let human_box = Mlp::new(store, rng, "heads.human_box", Group::Detector, d, d, 4);
        let object_box = Mlp::new(store, rng, "heads.object_box", Group::Detector, d, d, 4);
        let object_cls = Linear::new(store, rng, "heads.object_cls", Group::Detector, d, dims.num_objects + 1);
        let verb_cls = Linear::new(store, rng, "heads.verb_cls", Group::Detector, d, dims.num_verbs);
        // start verbs near "absent" so the many negatives do not dominate early steps
        if let Some(b) = verb_cls.bias {
            store.value_mut(b).fill(-2.0);
        }
        let pos = sine_position_table(dims.grid(), dims.grid(), d);
        Ok(Self {
            dims,
            patch_embed,
            stem_mix,
            input_proj,
            pos,
            encoder,
            queries,
            pair_decoder,
            rel_decoder,
            human_box,
            object_box,
            object_cls,
            verb_cls,
        })
    }

    pub fn positions(&self) -> &Mat {
        &self.pos
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.dims.image_size;
        if image.dim() != (s, s, 3) {
            let (h, w, c) = image.dim();
            return Err(Error::Shape(format!(
                "expected a {s}×{s}×3 image, got {h}×{w}×{c}"
            )));
        }
        Ok(())
    }

    pub fn patches(&self, image: &Image) -> Result<Mat> {
        self.check_image(image)?;
        Ok(patchify(image, self.dims.patch_size))
    }

    /// Backbone features from a patch matrix, `H'·W' × D`.
    pub fn extract_features(&self, g: &mut Graph, patches: Var) -> Var {
        let h = self.patch_embed.forward(g, patches);
        let h = g.relu(h);
        let h = self.stem_mix.forward(g, h);
        g.relu(h)
    }

    /// Projects `x_b` and runs the encoder stack; positions enter the
    /// attention queries and keys of every layer.
    pub fn encode(&self, g: &mut Graph, x_b: Var) -> Var {
        let pos = self.pos.clone();
        self.encode_with_positions(g, x_b, pos)
    }

    pub fn encode_with_positions(&self, g: &mut Graph, x_b: Var, pos: Mat) -> Var {
        let x = self.input_proj.forward(g, x_b);
        if self.encoder.is_empty() {
            return x;
        }
        let p = g.constant(pos);
        self.encoder.iter().fold(x, |x, layer| layer.forward_pos(g, x, Some(p)))
    }

    /// Cross-attention keys: encoder tokens plus the position table.
    fn memory_keys(&self, g: &mut Graph, x_e: Var) -> Var {
        if g.shape(x_e).0 != self.pos.nrows() {
            return x_e;
        }
        let p = g.constant(self.pos.clone());
        g.add(x_e, p)
    }

    pub fn decode_pairs(&self, g: &mut Graph, x_e: Var) -> Var {
        let q = g.param(self.queries);
        let keys = self.memory_keys(g, x_e);
        self.pair_decoder.iter().fold(q, |t, layer| layer.forward_keyed(g, t, keys, x_e))
    }

    /// Pair decoding from caller-provided queries.
    pub fn decode_pairs_with(&self, g: &mut Graph, x_e: Var, queries: Var) -> Result<Var> {
        let (rows, cols) = g.shape(queries);
        if rows != self.dims.num_queries || cols != self.dims.dim {
            return Err(Error::Shape(format!(
                "pair queries are {rows}×{cols}, heads expect {}×{}",
                self.dims.num_queries, self.dims.dim
            )));
        }
        let keys = self.memory_keys(g, x_e);
        Ok(self.pair_decoder.iter().fold(queries, |t, layer| layer.forward_keyed(g, t, keys, x_e)))
    }

    pub fn decode_relations(&self, g: &mut Graph, x_e: Var, x_ho: Var) -> Result<Var> {
        let rows = g.shape(x_ho).0;
        if rows != self.dims.num_queries {
            return Err(Error::Shape(format!(
                "pair tokens have {rows} rows, query config expects {}",
                self.dims.num_queries
            )));
        }
        let keys = self.memory_keys(g, x_e);
        Ok(self.rel_decoder.iter().fold(x_ho, |t, layer| layer.forward_keyed(g, t, keys, x_e)))
    }

    pub fn heads(&self, g: &mut Graph, x_ho: Var, x_ve: Var) -> HeadOutputs {
        let hb = self.human_box.forward(g, x_ho);
        let ob = self.object_box.forward(g, x_ho);
        HeadOutputs {
            human_boxes: g.sigmoid(hb),
            object_boxes: g.sigmoid(ob),
            object_logits: self.object_cls.forward(g, x_ho),
            verb_logits: self.verb_cls.forward(g, x_ve),
        }
    }

    /// Full forward pass from a patch matrix already in the graph.
    pub fn forward_patches(&self, g: &mut Graph, patches: Var) -> Result<ForwardPass> {
        let x_b = self.extract_features(g, patches);
        let x_e = self.encode(g, x_b);
        for v in g.value(x_e).iter() {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite encoder output".into()));
            }
        }
        let x_ho = self.decode_pairs(g, x_e);
        let x_ve = self.decode_relations(g, x_e, x_ho)?;
        let heads = self.heads(g, x_ho, x_ve);
        Ok(ForwardPass {
            x_b,
            x_e,
            x_ho,
            x_ve,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, image: &Image) -> Result<ForwardPass> {
        let p = self.patches(image)?;
        let p = g.constant(p);
        self.forward_patches(g, p)
    }

    /// Eval-mode inference: features and per-query predictions.
    pub fn infer(&self, store: &ParamStore, image: &Image) -> Result<(FeatureBundle, Vec<Prediction>)> {
        let mut g = Graph::new(store);
        let pass = self.forward(&mut g, image)?;
        let preds = Prediction::from_heads(&g, &pass.heads);
        Ok((pass.bundle(&g), preds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(image_size: usize, encoder_layers: usize) -> DetectorDims {
        DetectorDims {
            image_size,
            patch_size: 8,
            dim: 16,
            heads: 2,
            encoder_layers,
            decoder_layers: 1,
            num_queries: 4,
            num_objects: 5,
            num_verbs: 6,
        }
    }

    fn build(d: DetectorDims) -> (ParamStore, HoiDetector) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det = HoiDetector::new(&mut store, &mut rng, d).unwrap();
        (store, det)
    }

    #[test]
    fn stride_eight_stem_on_96_pixels_gives_12_by_12() {
        let (store, det) = build(dims(96, 1));
        let (bundle, preds) = det.infer(&store, &Image::zeros((96, 96, 3))).unwrap();
        assert_eq!(bundle.x_b.dim(), (144, 16));
        assert_eq!(bundle.x_e.nrows(), 144);
        assert_eq!(bundle.x_ho.nrows(), 4);
        assert_eq!(bundle.x_ve.nrows(), 4);
        assert!(bundle.is_finite());
        assert_eq!(preds.len(), 4);
    }

    #[test]
    fn wrong_image_dims_name_expected_shape() {
        let (store, det) = build(dims(48, 1));
        let err = det.infer(&store, &Image::zeros((40, 48, 3))).unwrap_err();
        assert!(err.to_string().contains("48×48×3"), "{err}");
    }

    #[test]
    fn inference_is_deterministic() {
        let (store, det) = build(dims(48, 1));
        let img = Image::from_shape_fn((48, 48, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let (a, pa) = det.infer(&store, &img).unwrap();
        let (b, pb) = det.infer(&store, &img).unwrap();
        assert_eq!(a.x_b, b.x_b);
        assert_eq!(a.x_ve, b.x_ve);
        assert_eq!(pa, pb);
    }

    #[test]
    fn zero_layer_encoder_is_projection() {
        let (store, det) = build(dims(48, 0));
        let mut g = Graph::new(&store);
        let x_b = g.input(Mat::from_shape_fn((36, 16), |(i, j)| (i as f32 - j as f32) * 0.01));
        let x_e = det.encode(&mut g, x_b);
        let mut h = Graph::new(&store);
        let x_b2 = h.input(g.value(x_b).clone());
        let proj = det.input_proj.forward(&mut h, x_b2);
        assert_eq!(g.value(x_e), h.value(proj));
    }

    #[test]
    fn encoder_is_permutation_equivariant_with_matching_positions() {
        let mut d = dims(32, 2);
        d.image_size = 16;
        let (store, det) = build(d);
        let x = Mat::from_shape_fn((4, 16), |(i, j)| ((i * 5 + j) % 7) as f32 * 0.3 - 1.0);
        let perm = [2usize, 0, 3, 1];
        let xp = x.select(ndarray::Axis(0), &perm);
        let pos = det.positions().clone();
        let posp = pos.select(ndarray::Axis(0), &perm);
        let mut g = Graph::new(&store);
        let a = g.constant(x);
        let ea = det.encode_with_positions(&mut g, a, pos);
        let b = g.constant(xp);
        let eb = det.encode_with_positions(&mut g, b, posp);
        let expected = g.value(ea).select(ndarray::Axis(0), &perm);
        let diff = (&expected - g.value(eb)).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
        assert!(diff < 1e-5, "max deviation {diff}");
    }

    #[test]
    fn zero_queries_rejected_at_construction() {
        let mut d = dims(48, 1);
        d.num_queries = 0;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(HoiDetector::new(&mut store, &mut rng, d), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_query_and_pair_rows_are_shape_errors() {
        let (store, det) = build(dims(48, 1));
        let mut g = Graph::new(&store);
        let x_e = g.constant(Mat::zeros((36, 16)));
        let q = g.constant(Mat::zeros((3, 16)));
        assert!(matches!(det.decode_pairs_with(&mut g, x_e, q), Err(Error::Shape(_))));
        let x_ho = g.constant(Mat::zeros((5, 16)));
        assert!(matches!(det.decode_relations(&mut g, x_e, x_ho), Err(Error::Shape(_))));
        let good = g.constant(Mat::zeros((4, 16)));
        let x_ho = det.decode_pairs_with(&mut g, x_e, good).unwrap();
        assert_eq!(g.shape(x_ho), (4, 16));
        let x_ve = det.decode_relations(&mut g, x_e, x_ho).unwrap();
        assert_eq!(g.shape(x_ve), (4, 16));
    }
}
