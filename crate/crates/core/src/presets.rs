//! Named configurations for the component ablation and the alternative
//! settings, and the matrices that group them.

use std::str::FromStr;

use crate::config::{Aggregator, Conditioning, ControllerKind, ExperimentConfig, GraphVariant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Original data only.
    Baseline,
    /// Original + generated data, no alignment or context module.
    NaiveMerge,
    InstanceOnly,
    ContextOnly,
    FullCefa,
    CtxNonCondition,
    InstTransformer,
    CtrlMlp,
    CtrlSelfAttention,
    GraphFullyConnected,
    GraphDirected,
}

impl Preset {
    pub const ALL: &'static [Preset] = &[
        Preset::Baseline,
        Preset::NaiveMerge,
        Preset::InstanceOnly,
        Preset::ContextOnly,
        Preset::FullCefa,
        Preset::CtxNonCondition,
        Preset::InstTransformer,
        Preset::CtrlMlp,
        Preset::CtrlSelfAttention,
        Preset::GraphFullyConnected,
        Preset::GraphDirected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::NaiveMerge => "naive_merge",
            Preset::InstanceOnly => "instance_only",
            Preset::ContextOnly => "context_only",
            Preset::FullCefa => "full_cefa",
            Preset::CtxNonCondition => "ctx_non_condition",
            Preset::InstTransformer => "inst_transformer",
            Preset::CtrlMlp => "ctrl_mlp",
            Preset::CtrlSelfAttention => "ctrl_self_attention",
            Preset::GraphFullyConnected => "graph_fully_connected",
            Preset::GraphDirected => "graph_directed",
        }
    }

    /// Sets the toggles this preset owns; everything else is left alone.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (instance, context) = match self {
            Preset::Baseline | Preset::NaiveMerge => (false, false),
            Preset::InstanceOnly => (true, false),
            Preset::ContextOnly => (false, true),
            _ => (true, true),
        };
        cfg.train.use_generated = self != Preset::Baseline;
        cfg.align.encoder = instance;
        cfg.align.instance = instance;
        cfg.ctx.enabled = context;
        match self {
            Preset::CtxNonCondition => cfg.ctx.conditioning = Conditioning::None,
            Preset::InstTransformer => cfg.align.aggregator = Aggregator::Transformer,
            Preset::CtrlMlp => cfg.ctx.controller = ControllerKind::Mlp,
            Preset::CtrlSelfAttention => cfg.ctx.controller = ControllerKind::SelfAttention,
            Preset::GraphFullyConnected => cfg.align.graph_variant = GraphVariant::FullyConnected,
            Preset::GraphDirected => cfg.align.graph_variant = GraphVariant::Directed,
            _ => {}
        }
    }

    pub fn config(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        self.apply(&mut cfg);
        cfg
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset '{s}'; available presets: {}", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One cell of an ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub preset: Preset,
    pub per_rare: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matrix {
    Table3,
    Table4,
    Fig4,
}

pub const FIG4_PER_RARE: [usize; 5] = [10, 25, 50, 100, 200];

impl Matrix {
    pub fn cells(self) -> Vec<Cell> {
        let plain = |p: Preset| Cell {
            label: p.name().to_string(),
            preset: p,
            per_rare: None,
        };
        match self {
            Matrix::Table3 => [
                Preset::Baseline,
                Preset::InstanceOnly,
                Preset::ContextOnly,
                Preset::FullCefa,
            ]
            .into_iter()
            .map(plain)
            .collect(),
            Matrix::Table4 => [
                Preset::CtxNonCondition,
                Preset::InstTransformer,
                Preset::CtrlMlp,
                Preset::CtrlSelfAttention,
                Preset::GraphFullyConnected,
                Preset::GraphDirected,
                Preset::FullCefa,
            ]
            .into_iter()
            .map(plain)
            .collect(),
            Matrix::Fig4 => FIG4_PER_RARE
                .iter()
                .map(|&n| Cell {
                    label: format!("per_rare_{n}"),
                    preset: Preset::FullCefa,
                    per_rare: Some(n),
                })
                .collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Matrix::Table3 => "table3",
            Matrix::Table4 => "table4",
            Matrix::Fig4 => "fig4",
        }
    }
}

impl FromStr for Matrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Matrix::Table3),
            "table4" => Ok(Matrix::Table4),
            "fig4" => Ok(Matrix::Fig4),
            other => Err(Error::Config(format!(
                "unknown preset matrix '{other}'; available: table3, table4, fig4"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table3_rows() {
        let names: Vec<_> = Matrix::Table3.cells().into_iter().map(|c| c.label).collect();
        assert_eq!(names, ["baseline", "instance_only", "context_only", "full_cefa"]);
    }

    #[test]
    fn full_is_union_of_instance_and_context() {
        let base = ExperimentConfig::default();
        let inst = Preset::InstanceOnly.config(&base);
        let ctx = Preset::ContextOnly.config(&base);
        let full = Preset::FullCefa.config(&base);
        assert_eq!(full.align.encoder, inst.align.encoder || ctx.align.encoder);
        assert_eq!(full.align.instance, inst.align.instance || ctx.align.instance);
        assert_eq!(full.ctx.enabled, inst.ctx.enabled || ctx.ctx.enabled);
        assert!(full.align.instance && full.ctx.enabled);
    }

    #[test]
    fn naive_merge_disables_every_component() {
        let cfg = Preset::NaiveMerge.config(&Preset::FullCefa.config(&ExperimentConfig::default()));
        assert!(!cfg.align.encoder && !cfg.align.instance && !cfg.ctx.enabled);
        assert!(cfg.train.use_generated);
    }

    #[test]
    fn unknown_preset_lists_choices() {
        let msg = "nope".parse::<Preset>().unwrap_err().to_string();
        assert!(msg.contains("full_cefa") && msg.contains("naive_merge"));
    }

    #[test]
    fn fig4_sweep_values() {
        let sweep: Vec<_> = Matrix::Fig4.cells().iter().map(|c| c.per_rare.unwrap()).collect();
        assert_eq!(sweep, vec![10, 25, 50, 100, 200]);
    }
}
