//! Context enhancement: masked reconstruction of a generated image,
//! conditioned on gated encoder tokens of a paired original image.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::config::{Conditioning, ContextConfig, ControllerKind, GateKind, LossScope};
use crate::data::{patchify, Image};
use crate::detector::HoiDetector;
use crate::error::{Error, Result};
use crate::nn::{sine_position_table, DecoderLayer, EncoderLayer, Linear, Mlp};
use crate::params::{normal_init, Group, ParamId, ParamStore};

pub const PREFIX: &str = "ctx.";
pub const DECODER_PREFIX: &str = "ctx.decoder.";

/// Round-half-up of `sigma · n`.
pub fn mask_count(sigma: f32, n: usize) -> usize {
    (f64::from(sigma) * n as f64 + 0.5).floor() as usize
}

/// Which patches of a `rows × cols` grid are hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub rows: usize,
    pub cols: usize,
    pub sigma: f32,
    /// Row-major, `true` = masked.
    pub mask: Vec<bool>,
}

impl MaskPlan {
    pub fn new(rows: usize, cols: usize, sigma: f32, seed: u64) -> Result<Self> {
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {sigma}")));
        }
        let n = rows * cols;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = vec![false; n];
        for i in index::sample(&mut rng, n, mask_count(sigma, n)) {
            mask[i] = true;
        }
        Ok(Self { rows, cols, sigma, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Masks `image` and zeroes the hidden patches in pixel space.
pub fn mask_image(image: &Image, patch: usize, sigma: f32, seed: u64) -> Result<(Image, MaskPlan)> {
    let (h, w, _) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}×{w} image is not divisible into {patch}px patches")));
    }
    let plan = MaskPlan::new(h / patch, w / patch, sigma, seed)?;
    let mut out = image.clone();
    for (i, _) in plan.mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (i / plan.cols, i % plan.cols);
        out.slice_mut(ndarray::s![r * patch..(r + 1) * patch, c * patch..(c + 1) * patch, ..])
            .fill(0.0);
    }
    Ok((out, plan))
}

/// Produces `D_sign ∈ (0,1)` for each source token.
#[derive(Clone, Debug)]
pub struct Controller {
    kind: ControllerKind,
    cross: Option<DecoderLayer>,
    joint: Option<EncoderLayer>,
    mlp: Option<Mlp>,
    head: Linear,
}

impl Controller {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        kind: ControllerKind,
        dim: usize,
        heads: usize,
        per_token: bool,
    ) -> Self {
        let name = "ctx.controller";
        let (mut cross, mut joint, mut mlp) = (None, None, None);
        match kind {
            ControllerKind::CrossAttention => {
                cross = Some(DecoderLayer::new(store, rng, &format!("{name}.cross"), Group::Cefa, dim, heads))
            }
            ControllerKind::SelfAttention => {
                joint = Some(EncoderLayer::new(store, rng, &format!("{name}.self"), Group::Cefa, dim, heads))
            }
            ControllerKind::Mlp => mlp = Some(Mlp::new(store, rng, &format!("{name}.mlp"), Group::Cefa, dim, dim, dim)),
        }
        let out = if per_token { 1 } else { dim };
        let head = Linear::new(store, rng, &format!("{name}.head"), Group::Cefa, dim, out);
        Self {
            kind,
            cross,
            joint,
            mlp,
            head,
        }
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn zero_head(&self, store: &mut ParamStore) {
        self.head.zero(store);
    }

    /// `X_src` queries, `X_mask` keys/values.
    pub fn forward(&self, g: &mut Graph, x_src: Var, x_mask: Var) -> Result<Var> {
        let (ds, dm) = (g.shape(x_src).1, g.shape(x_mask).1);
        if ds != dm {
            return Err(Error::Shape(format!(
                "controller inputs disagree on channels: X_src has {ds}, X_mask has {dm}"
            )));
        }
        let h = if let Some(layer) = &self.cross {
            layer.forward_cross(g, x_src, x_mask)
        } else if let Some(layer) = &self.joint {
            let n = g.shape(x_src).0;
            let both = g.concat_rows(&[x_src, x_mask]);
            let h = layer.forward(g, both);
            g.slice_rows(h, 0, n)
        } else {
            self.mlp.as_ref().expect("controller variant").forward(g, x_src)
        };
        let z = self.head.forward(g, h);
        Ok(g.sigmoid(z))
    }
}

/// `Sign ⊙ X_src` with `Sign = [D_sign > 0.5]`. A one-column `D_sign` gates
/// whole tokens.
pub fn gate_and_condition(g: &mut Graph, d_sign: Var, x_src: Var, kind: GateKind) -> Result<Var> {
    let (rs, cs) = g.shape(d_sign);
    let (rx, cx) = g.shape(x_src);
    if rs != rx || (cs != cx && cs != 1) {
        return Err(Error::Shape(format!("gate is {rs}×{cs}, source tokens are {rx}×{cx}")));
    }
    let sign = match kind {
        GateKind::Hard => g.hard_gate(d_sign),
        GateKind::StraightThrough => g.straight_through_gate(d_sign),
    };
    let sign = if cs == 1 && cx != 1 {
        let ones = g.constant(Mat::ones((1, cx)));
        g.matmul(sign, ones)
    } else {
        sign
    };
    Ok(g.mul(sign, x_src))
}

/// Lightweight transformer mapping tokens back to patch pixels.
#[derive(Clone, Debug)]
pub struct ReconDecoder {
    proj: Linear,
    pos: Mat,
    layers: Vec<EncoderLayer>,
    head: Linear,
    tokens: usize,
}

impl ReconDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        width: usize,
        heads: usize,
        layers: usize,
        grid: usize,
        patch_len: usize,
    ) -> Self {
        let heads = if width.is_multiple_of(heads) { heads } else { 1 };
        Self {
            proj: Linear::new(store, rng, "ctx.decoder.proj", Group::Cefa, dim, width),
            pos: sine_position_table(grid, grid, width),
            layers: (0..layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("ctx.decoder.layers.{i}"), Group::Cefa, width, heads))
                .collect(),
            head: Linear::new(store, rng, "ctx.decoder.pixels", Group::Cefa, width, patch_len),
            tokens: grid * grid,
        }
    }

    /// Per-patch pixels for the generated image, `T × patch_len`. Source
    /// tokens only provide context and are dropped before the pixel head.
    pub fn forward(&self, g: &mut Graph, x_src_cond: Option<Var>, x_mask: Var) -> Result<Var> {
        let n = g.shape(x_mask).0;
        if n != self.tokens {
            return Err(Error::Shape(format!(
                "reconstruction expects {} tokens, got {n}",
                self.tokens
            )));
        }
        let pos = g.constant(self.pos.clone());
        let m = self.proj.forward(g, x_mask);
        let m = g.add(m, pos);
        let (x, offset) = match x_src_cond {
            Some(src) => {
                let s = self.proj.forward(g, src);
                let s = g.add(s, pos);
                let ns = g.shape(s).0;
                (g.concat_rows(&[s, m]), ns)
            }
            None => (m, 0),
        };
        let x = self.layers.iter().fold(x, |x, layer| layer.forward(g, x));
        let rows = g.shape(x).0;
        let x = g.slice_rows(x, offset, rows);
        Ok(self.head.forward(g, x))
    }
}

fn scope_weights(plan: &MaskPlan, scope: LossScope) -> Vec<bool> {
    match scope {
        LossScope::MaskedOnly => plan.mask.clone(),
        LossScope::AllPatches => vec![true; plan.len()],
    }
}

fn check_plan(recon: (usize, usize), target: &Mat, plan: &MaskPlan) -> Result<()> {
    if recon != target.dim() || target.nrows() != plan.len() {
        return Err(Error::Shape(format!(
            "reconstruction {}×{}, target {}×{}, mask plan {} patches",
            recon.0,
            recon.1,
            target.nrows(),
            target.ncols(),
            plan.len()
        )));
    }
    Ok(())
}

/// Pixel MSE over the patches in scope; zero when the scope is empty.
pub fn context_loss(g: &mut Graph, recon: Var, target: &Mat, plan: &MaskPlan, scope: LossScope) -> Result<Var> {
    check_plan(g.shape(recon), target, plan)?;
    let keep = scope_weights(plan, scope);
    let count = keep.iter().filter(|&&k| k).count();
    let weights = Mat::from_shape_fn(target.dim(), |(i, _)| if keep[i] { 1.0 } else { 0.0 });
    let t = g.constant(target.clone());
    let diff = g.sub(recon, t);
    let sq = g.mul(diff, diff);
    let sq = g.mul_const(sq, weights);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / (count * target.ncols()).max(1) as f32))
}

/// Value-only version of [`context_loss`].
pub fn context_loss_value(recon: &Mat, target: &Mat, plan: &MaskPlan, scope: LossScope) -> Result<f32> {
    check_plan(recon.dim(), target, plan)?;
    let keep = scope_weights(plan, scope);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, (r, t)) in recon.rows().into_iter().zip(target.rows()).enumerate() {
        if keep[i] {
            total += r.iter().zip(t.iter()).map(|(a, b)| f64::from((a - b) * (a - b))).sum::<f64>();
            count += r.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { (total / count as f64) as f32 })
}

/// Graph nodes of one context-branch pass.
#[derive(Clone, Debug)]
pub struct ContextPass {
    pub loss: Var,
    pub recon: Var,
    pub d_sign: Option<Var>,
    pub x_mask: Var,
    pub plan: MaskPlan,
}

#[derive(Clone, Debug)]
pub struct ContextModule {
    pub cfg: ContextConfig,
    pub mask_token: ParamId,
    pub controller: Controller,
    pub decoder: ReconDecoder,
    patch: usize,
}

impl ContextModule {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ContextConfig, det: &HoiDetector) -> Self {
        let d = &det.dims;
        Self {
            cfg: cfg.clone(),
            mask_token: store.add("ctx.mask_token", normal_init(rng, 1, d.dim, 0.02), Group::Cefa),
            controller: Controller::new(store, rng, cfg.controller, d.dim, d.heads, cfg.per_token_gate),
            decoder: ReconDecoder::new(
                store,
                rng,
                d.dim,
                cfg.decoder_width,
                d.heads,
                cfg.decoder_layers,
                d.grid(),
                d.patch_len(),
            ),
            patch: d.patch_size,
        }
    }

    /// Encodes a masked copy of `gen_image` through the shared backbone and
    /// encoder, then reconstructs it with `x_src` as gated context.
    pub fn forward(
        &self,
        g: &mut Graph,
        det: &HoiDetector,
        x_src: Var,
        gen_image: &Image,
        mask_seed: u64,
    ) -> Result<ContextPass> {
        det.check_image(gen_image)?;
        let target = patchify(gen_image, self.patch);
        let grid = det.dims.grid();
        let plan = MaskPlan::new(grid, grid, self.cfg.sigma, mask_seed)?;
        let p = g.constant(target.clone());
        let x_b = det.extract_features(g, p);
        let tok = g.param(self.mask_token);
        let x_b = g.replace_rows(x_b, tok, &plan.mask);
        let x_mask = det.encode(g, x_b);
        let (cond, d_sign) = match self.cfg.conditioning {
            Conditioning::Gated => {
                let d_sign = self.controller.forward(g, x_src, x_mask)?;
                let cond = gate_and_condition(g, d_sign, x_src, self.cfg.gate)?;
                (Some(cond), Some(d_sign))
            }
            Conditioning::None => (None, None),
        };
        let recon = self.decoder.forward(g, cond, x_mask)?;
        let loss = context_loss(g, recon, &target, &plan, self.cfg.loss_scope)?;
        Ok(ContextPass {
            loss,
            recon,
            d_sign,
            x_mask,
            plan,
        })
    }
}
