//! Adversarial feature alignment: gradient reversal, token-level domain
//! discriminators, and the prototype graph over relationship tokens.
//!
//! Every discriminator loss is plain binary cross-entropy with the domain as
//! label (original = 1). Features pass through [`grl`] first, so one
//! optimizer step trains the discriminators to separate the domains while
//! the detector upstream receives the reversed gradient.

use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::config::{AlignConfig, Aggregator, GraphVariant};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Linear};
use crate::params::{Group, ParamStore};

pub const PREFIX: &str = "align.";

/// Identity forward, `-lambda · g` backward.
pub fn grl(g: &mut Graph, x: Var, lambda: f32) -> Var {
    g.grl(x, lambda)
}

/// GRL coefficient at `step` with a linear warm-up.
pub fn grl_lambda(cfg: &AlignConfig, step: usize) -> f32 {
    if cfg.grl_warmup_steps == 0 {
        cfg.grl_lambda
    } else {
        cfg.grl_lambda * (step as f32 / cfg.grl_warmup_steps as f32).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Backbone features.
    Db,
    /// Encoder tokens.
    De,
    /// Prototype tokens from the relationship decoder.
    Ddec,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Db => "D_b",
            Head::De => "D_e",
            Head::Ddec => "D_dec",
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d_b" | "db" | "backbone" => Ok(Head::Db),
            "d_e" | "de" | "encoder" => Ok(Head::De),
            "d_dec" | "ddec" | "decoder" | "instance" => Ok(Head::Ddec),
            _ => Err(Error::Config(format!(
                "unknown discriminator head '{s}'; expected one of D_b, D_e, D_dec"
            ))),
        }
    }
}

/// Two-layer MLP producing one logit per token.
#[derive(Clone, Debug)]
pub struct Discriminator {
    hidden: Linear,
    out: Linear,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), Group::Discriminator, dim, hidden),
            out: Linear::new(store, rng, &format!("{name}.1"), Group::Discriminator, hidden, 1),
        }
    }

    /// `T × 1` logits of "original domain".
    pub fn logits(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.out.forward(g, h)
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        self.out.zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct Discriminators {
    pub d_b: Discriminator,
    pub d_e: Discriminator,
    pub d_dec: Discriminator,
}

impl Discriminators {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            d_b: Discriminator::new(store, rng, "align.d_b", dim, hidden),
            d_e: Discriminator::new(store, rng, "align.d_e", dim, hidden),
            d_dec: Discriminator::new(store, rng, "align.d_dec", dim, hidden),
        }
    }

    pub fn head(&self, which: Head) -> &Discriminator {
        match which {
            Head::Db => &self.d_b,
            Head::De => &self.d_e,
            Head::Ddec => &self.d_dec,
        }
    }

    /// Per-token probabilities of "original domain".
    pub fn discriminate(&self, g: &mut Graph, x: Var, which: Head) -> Var {
        let z = self.head(which).logits(g, x);
        g.sigmoid(z)
    }
}

/// Token-averaged BCE of `logits` against a single domain label.
pub fn domain_bce(g: &mut Graph, logits: Var, domain: Domain) -> Var {
    let (rows, cols) = g.shape(logits);
    let target = Mat::from_elem((rows, cols), domain.label());
    let total = g.bce_with_logits(logits, target);
    g.scale(total, 1.0 / (rows * cols).max(1) as f32)
}

/// Same loss from probabilities; used as a reference in tests and reports.
pub fn domain_bce_probs(probs: &[f32], domain: Domain) -> f32 {
    let t = domain.label();
    let sum: f32 = probs.iter().map(|&p| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())).sum();
    sum / probs.len().max(1) as f32
}

fn check_finite(g: &Graph, v: Var, head: Head) -> Result<()> {
    let x = g.scalar(v);
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {} discriminator loss: {x}", head.name())))
    }
}

/// Backbone + encoder alignment loss; both inputs pass through the GRL.
pub fn enc_alignment_loss(
    g: &mut Graph,
    discs: &Discriminators,
    x_b: Var,
    x_e: Var,
    domain: Domain,
    lambda: f32,
) -> Result<Var> {
    let rb = grl(g, x_b, lambda);
    let zb = discs.d_b.logits(g, rb);
    let lb = domain_bce(g, zb, domain);
    check_finite(g, lb, Head::Db)?;
    let re = grl(g, x_e, lambda);
    let ze = discs.d_e.logits(g, re);
    let le = domain_bce(g, ze, domain);
    check_finite(g, le, Head::De)?;
    Ok(g.add(lb, le))
}

/// Indices of the `k` highest scores, ties going to the lower index,
/// returned in ascending index order.
pub fn select_prototypes(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!(
            "prototype count k={k} must be in 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut p = order[..k].to_vec();
    p.sort_unstable();
    Ok(p)
}

/// Binary adjacency with zero diagonal.
pub fn build_graph(n: usize, prototypes: &[usize], variant: GraphVariant) -> Result<Mat> {
    let mut is_proto = vec![false; n];
    for &i in prototypes {
        if i >= n {
            return Err(Error::Shape(format!("prototype index {i} out of range for {n} nodes")));
        }
        is_proto[i] = true;
    }
    Ok(Mat::from_shape_fn((n, n), |(i, j)| {
        let edge = i != j
            && match variant {
                GraphVariant::Bidirectional => is_proto[i] || is_proto[j],
                GraphVariant::FullyConnected => true,
                // row = source: regular → prototype, plus prototype ↔ prototype
                GraphVariant::Directed => is_proto[j],
            };
        if edge {
            1.0
        } else {
            0.0
        }
    }))
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn normalized_adjacency(a: &Mat) -> Mat {
    let n = a.nrows();
    let mut a_tilde = a.clone();
    for i in 0..n {
        a_tilde[[i, i]] += 1.0;
    }
    let inv_sqrt: Vec<f32> = a_tilde.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Mat::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * a_tilde[[i, j]] * inv_sqrt[j])
}

/// One GCN layer `act(Â X W)`.
pub fn propagate(g: &mut Graph, a: &Mat, x: Var, w: Var, relu: bool) -> Result<Var> {
    let (n, d) = g.shape(x);
    if a.nrows() != a.ncols() || a.nrows() != n {
        return Err(Error::Shape(format!(
            "adjacency is {}×{}, features have {n} rows",
            a.nrows(),
            a.ncols()
        )));
    }
    if g.shape(w).0 != d {
        return Err(Error::Shape(format!(
            "GCN weight has {} input rows, features have {d} channels",
            g.shape(w).0
        )));
    }
    let a_hat = g.constant(normalized_adjacency(a));
    let ax = g.matmul(a_hat, x);
    let out = g.matmul(ax, w);
    Ok(if relu { g.relu(out) } else { out })
}

/// Rows of `x` at `prototypes`, in order.
pub fn extract_prototypes(g: &mut Graph, x: Var, prototypes: &[usize]) -> Result<Var> {
    let n = g.shape(x).0;
    if let Some(&bad) = prototypes.iter().find(|&&i| i >= n) {
        return Err(Error::Shape(format!("prototype index {bad} out of range for {n} rows")));
    }
    Ok(g.select_rows(x, prototypes))
}

/// `D_dec` loss on prototype tokens. The caller places the GRL.
pub fn instance_alignment_loss(g: &mut Graph, discs: &Discriminators, x_p: Var, domain: Domain) -> Result<Var> {
    if g.shape(x_p).0 == 0 {
        return Err(Error::Config("instance alignment needs at least one prototype".into()));
    }
    let z = discs.d_dec.logits(g, x_p);
    let l = domain_bce(g, z, domain);
    check_finite(g, l, Head::Ddec)?;
    Ok(l)
}

/// Node features, adjacency and prototype set of one image.
#[derive(Clone, Debug)]
pub struct PrototypeGraph {
    pub node_features: Mat,
    pub adjacency: Mat,
    pub prototypes: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdversarialTerms {
    pub l_enc: Option<Var>,
    pub l_inst: Option<Var>,
}

impl AdversarialTerms {
    /// `L_adv = L_enc + L_inst`, or `None` when both are disabled.
    pub fn total(&self, g: &mut Graph) -> Option<Var> {
        match (self.l_enc, self.l_inst) {
            (Some(a), Some(b)) => Some(g.add(a, b)),
            (a, b) => a.or(b),
        }
    }
}

/// Discriminators plus the instance aggregator.
#[derive(Clone, Debug)]
pub struct AlignmentModule {
    pub cfg: AlignConfig,
    pub discs: Discriminators,
    gcn: Vec<Linear>,
    transformer: Option<EncoderLayer>,
}

impl AlignmentModule {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &AlignConfig, dim: usize, heads: usize) -> Self {
        let discs = Discriminators::new(store, rng, dim, cfg.disc_hidden);
        let gcn = (0..cfg.gcn_layers)
            .map(|i| {
                let lin = Linear::no_bias(store, rng, &format!("align.gcn.{i}"), Group::Discriminator, dim, dim);
                // start at the identity so prototypes initially keep their own features
                let w = store.value_mut(lin.weight);
                w.fill(0.0);
                w.diag_mut().fill(1.0);
                lin
            })
            .collect();
        let transformer = (cfg.aggregator == Aggregator::Transformer).then(|| {
            EncoderLayer::new(store, rng, "align.aggregator", Group::Discriminator, dim, heads)
        });
        Self {
            cfg: cfg.clone(),
            discs,
            gcn,
            transformer,
        }
    }

    /// Aggregates relationship tokens and returns the prototype rows.
    pub fn aggregate(&self, g: &mut Graph, x_ve: Var, scores: &[f32]) -> Result<(Var, PrototypeGraph)> {
        let n = g.shape(x_ve).0;
        let p = select_prototypes(scores, self.cfg.k.min(n))?;
        let adjacency = build_graph(n, &p, self.cfg.graph_variant)?;
        let node_features = g.value(x_ve).clone();
        let x = match &self.transformer {
            Some(layer) => layer.forward(g, x_ve),
            None => {
                let mut x = x_ve;
                for lin in &self.gcn {
                    let w = g.param(lin.weight);
                    x = propagate(g, &adjacency, x, w, true)?;
                }
                x
            }
        };
        let x_p = extract_prototypes(g, x, &p)?;
        Ok((
            x_p,
            PrototypeGraph {
                node_features,
                adjacency,
                prototypes: p,
            },
        ))
    }

    /// `L_enc` and `L_inst` for one image, each present only when enabled.
    /// The GRL sits on `x_ve` ahead of the aggregator, so aggregator weights
    /// are trained together with `D_dec`.
    #[allow(clippy::too_many_arguments)]
    pub fn adversarial_loss(
        &self,
        g: &mut Graph,
        x_b: Var,
        x_e: Var,
        x_ve: Var,
        scores: &[f32],
        domain: Domain,
        lambda: f32,
    ) -> Result<AdversarialTerms> {
        let l_enc = if self.cfg.encoder {
            Some(enc_alignment_loss(g, &self.discs, x_b, x_e, domain, lambda)?)
        } else {
            None
        };
        let l_inst = if self.cfg.instance {
            let r = grl(g, x_ve, lambda);
            let (x_p, _) = self.aggregate(g, r, scores)?;
            Some(instance_alignment_loss(g, &self.discs, x_p, domain)?)
        } else {
            None
        };
        Ok(AdversarialTerms { l_enc, l_inst })
    }
}
