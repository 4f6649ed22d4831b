//! Architecture templates, channel-count vectors and exact parameter/FLOP accounting.
//!
//! A template is a layer graph whose widths are owned by prune groups. Free groups
//! are the searchable dimensions; frozen groups (residual trunks, concat outputs,
//! classifier widths) keep their original width so that every add-junction and
//! concat stays dimensionally consistent.

mod file;
mod templates;

pub use file::{parse_structure, read_structure, to_canonical_string, write_structure, StructureMeta};
pub use templates::{build_template, toynet_template, DEFAULT_TOY_CLASSES, DEFAULT_TOY_WIDTH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StructError {
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("group {group} has {value} channels, allowed range is [1, {max}]")]
    ChannelOutOfRange { group: usize, value: usize, max: usize },
    #[error("template `{arch}` is inconsistent: {detail}")]
    InvalidTemplate { arch: String, detail: String },
    #[error("malformed structure file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Dense,
    BatchNorm,
    Pool,
    Add,
    Concat,
}

/// Where a layer reads its activations from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerInput {
    /// The network input image.
    Image,
    /// The output of an earlier layer, by index.
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Square kernel side; also the pooling window for `Pool`.
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_spatial: (usize, usize),
    pub bias: bool,
    pub inputs: Vec<LayerInput>,
    /// Group that sets the output width. Only conv, dense and concat layers own one.
    pub out_group: Option<usize>,
}

impl LayerSpec {
    pub fn out_spatial(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv | LayerKind::Pool => {
                let side = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
                (side(self.in_spatial.0), side(self.in_spatial.1))
            }
            LayerKind::Dense => (1, 1),
            LayerKind::BatchNorm | LayerKind::Add | LayerKind::Concat => self.in_spatial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeRole {
    Produces,
    Consumes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemberEdge {
    pub layer: usize,
    pub role: EdgeRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneGroup {
    pub id: usize,
    pub name: String,
    pub original_count: usize,
    pub frozen: bool,
    pub member_edges: Vec<MemberEdge>,
}

impl PruneGroup {
    /// Index of the first layer whose output width this group sets. Feature dumps
    /// for a free group are keyed by this layer's name.
    pub fn producer(&self) -> Option<usize> {
        self.member_edges
            .iter()
            .find(|e| e.role == EdgeRole::Produces)
            .map(|e| e.layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchTemplate {
    pub arch_id: String,
    pub layers: Vec<LayerSpec>,
    /// Free groups first, frozen groups after.
    pub groups: Vec<PruneGroup>,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

impl ArchTemplate {
    pub fn num_free(&self) -> usize {
        self.groups.iter().take_while(|g| !g.frozen).count()
    }

    pub fn free_groups(&self) -> &[PruneGroup] {
        &self.groups[..self.num_free()]
    }

    /// Original width of every free group, in search order.
    pub fn original_counts(&self) -> Vec<usize> {
        self.free_groups().iter().map(|g| g.original_count).collect()
    }

    pub fn baseline(&self) -> StructureVector {
        StructureVector::new(&self.arch_id, self.original_counts())
    }

    /// The smallest network the template admits: one channel per free group.
    pub fn minimal(&self) -> StructureVector {
        StructureVector::new(&self.arch_id, vec![1; self.num_free()])
    }

    /// Name of the layer whose feature maps drive the clustering of free group `g`.
    pub fn capture_layer(&self, g: usize) -> Option<&str> {
        self.groups
            .get(g)
            .and_then(|grp| grp.producer())
            .map(|l| self.layers[l].name.as_str())
    }

    pub fn validate(&self, s: &StructureVector) -> Result<(), StructError> {
        if s.arch_id != self.arch_id {
            return Err(StructError::StructureMismatch(format!(
                "structure is for `{}`, template is `{}`",
                s.arch_id, self.arch_id
            )));
        }
        let free = self.num_free();
        if s.channels.len() != free {
            return Err(StructError::StructureMismatch(format!(
                "`{}` has {} free groups, structure has {} entries",
                self.arch_id,
                free,
                s.channels.len()
            )));
        }
        for (group, (&value, g)) in s.channels.iter().zip(self.free_groups()).enumerate() {
            if value < 1 || value > g.original_count {
                return Err(StructError::ChannelOutOfRange {
                    group,
                    value,
                    max: g.original_count,
                });
            }
        }
        Ok(())
    }

    /// Width of every group (free and frozen) under structure `s`.
    pub fn group_widths(&self, s: &StructureVector) -> Result<Vec<usize>, StructError> {
        self.validate(s)?;
        Ok(self
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| if g.frozen { g.original_count } else { s.channels[i] })
            .collect())
    }
}

/// Per-group channel counts, one entry per free group of a template.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructureVector {
    #[serde(rename = "arch")]
    pub arch_id: String,
    pub channels: Vec<usize>,
}

impl StructureVector {
    pub fn new(arch_id: impl Into<String>, channels: Vec<usize>) -> Self {
        Self {
            arch_id: arch_id.into(),
            channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    /// Input width. For dense layers this is the flattened feature count.
    pub c_in: usize,
    pub c_out: usize,
    pub in_spatial: (usize, usize),
    pub out_spatial: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteNetwork {
    pub arch_id: String,
    pub layers: Vec<ResolvedLayer>,
}

impl ConcreteNetwork {
    /// Reads the width of every free group back from its producing layer.
    pub fn free_widths(&self, t: &ArchTemplate) -> Vec<usize> {
        t.free_groups()
            .iter()
            .map(|g| g.producer().map_or(0, |l| self.layers[l].c_out))
            .collect()
    }
}

/// Expands a structure vector into per-layer widths, checking every junction.
pub fn apply_structure(t: &ArchTemplate, s: &StructureVector) -> Result<ConcreteNetwork, StructError> {
    let widths = t.group_widths(s)?;
    let bad = |detail: String| StructError::InvalidTemplate {
        arch: t.arch_id.clone(),
        detail,
    };

    let mut resolved: Vec<ResolvedLayer> = Vec::with_capacity(t.layers.len());
    for layer in &t.layers {
        let mut sources = Vec::with_capacity(layer.inputs.len());
        for input in &layer.inputs {
            let src = match *input {
                LayerInput::Image => (t.input_shape.0, (t.input_shape.1, t.input_shape.2)),
                LayerInput::Layer(j) if j < resolved.len() => (resolved[j].c_out, resolved[j].out_spatial),
                LayerInput::Layer(j) => return Err(bad(format!("layer `{}` reads from later layer {j}", layer.name))),
            };
            if src.1 != layer.in_spatial {
                return Err(bad(format!(
                    "layer `{}` expects {:?} input, producer gives {:?}",
                    layer.name, layer.in_spatial, src.1
                )));
            }
            sources.push(src.0);
        }
        let first = *sources
            .first()
            .ok_or_else(|| bad(format!("layer `{}` has no inputs", layer.name)))?;

        let c_in = match layer.kind {
            LayerKind::Concat => sources.iter().sum(),
            LayerKind::Add => {
                if sources.iter().any(|&w| w != first) {
                    return Err(bad(format!("add `{}` operands differ: {sources:?}", layer.name)));
                }
                first
            }
            LayerKind::Dense => first * layer.in_spatial.0 * layer.in_spatial.1,
            _ => first,
        };
        let c_out = match (layer.kind, layer.out_group) {
            (LayerKind::Conv | LayerKind::Dense, Some(g)) => widths[g],
            (LayerKind::Concat, Some(g)) => {
                if widths[g] != c_in {
                    return Err(bad(format!(
                        "concat `{}` sums to {c_in}, its group says {}",
                        layer.name, widths[g]
                    )));
                }
                c_in
            }
            (LayerKind::BatchNorm | LayerKind::Pool | LayerKind::Add, None) => c_in,
            _ => return Err(bad(format!("layer `{}` has a misplaced width group", layer.name))),
        };
        resolved.push(ResolvedLayer {
            name: layer.name.clone(),
            kind: layer.kind,
            kernel: layer.kernel,
            stride: layer.stride,
            padding: layer.padding,
            bias: layer.bias,
            c_in,
            c_out,
            in_spatial: layer.in_spatial,
            out_spatial: layer.out_spatial(),
        });
    }

    Ok(ConcreteNetwork {
        arch_id: t.arch_id.clone(),
        layers: resolved,
    })
}

/// Trainable parameters: conv weights (+bias), dense weights and bias, batchnorm affine pairs.
pub fn count_params(n: &ConcreteNetwork) -> u64 {
    n.layers
        .iter()
        .map(|l| {
            let (ci, co, k) = (l.c_in as u64, l.c_out as u64, l.kernel as u64);
            match l.kind {
                LayerKind::Conv => k * k * ci * co + if l.bias { co } else { 0 },
                LayerKind::Dense => ci * co + co,
                LayerKind::BatchNorm => 2 * co,
                LayerKind::Pool | LayerKind::Add | LayerKind::Concat => 0,
            }
        })
        .sum()
}

/// Multiply-accumulates of conv and dense layers.
pub fn count_flops(n: &ConcreteNetwork) -> u64 {
    n.layers
        .iter()
        .map(|l| {
            let (ci, co, k) = (l.c_in as u64, l.c_out as u64, l.kernel as u64);
            match l.kind {
                LayerKind::Conv => k * k * ci * co * l.out_spatial.0 as u64 * l.out_spatial.1 as u64,
                LayerKind::Dense => ci * co,
                _ => 0,
            }
        })
        .sum()
}

/// Percentage of `baseline` removed when going down to `pruned`.
pub fn drop_percent(baseline: f64, pruned: f64) -> f64 {
    100.0 * (baseline - pruned) / baseline
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupDelta {
    pub group: usize,
    pub name: String,
    pub baseline: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub arch_id: String,
    pub baseline: Totals,
    pub pruned: Totals,
    pub params_drop: i64,
    pub params_drop_pct: f64,
    pub flops_drop: i64,
    pub flops_drop_pct: f64,
    pub groups: Vec<GroupDelta>,
}

impl CompressionReport {
    /// Report from totals alone, for figures that have no structure behind them.
    pub fn from_totals(arch_id: impl Into<String>, baseline: Totals, pruned: Totals, groups: Vec<GroupDelta>) -> Self {
        Self {
            arch_id: arch_id.into(),
            baseline,
            pruned,
            params_drop: baseline.params as i64 - pruned.params as i64,
            params_drop_pct: drop_percent(baseline.params as f64, pruned.params as f64),
            flops_drop: baseline.flops as i64 - pruned.flops as i64,
            flops_drop_pct: drop_percent(baseline.flops as f64, pruned.flops as f64),
            groups,
        }
    }
}

pub fn totals(t: &ArchTemplate, s: &StructureVector) -> Result<Totals, StructError> {
    let net = apply_structure(t, s)?;
    Ok(Totals {
        params: count_params(&net),
        flops: count_flops(&net),
    })
}

pub fn compression_report(
    t: &ArchTemplate,
    baseline: &StructureVector,
    pruned: &StructureVector,
) -> Result<CompressionReport, StructError> {
    let base = totals(t, baseline)?;
    let cut = totals(t, pruned)?;
    let groups = t
        .free_groups()
        .iter()
        .enumerate()
        .map(|(i, g)| GroupDelta {
            group: i,
            name: g.name.clone(),
            baseline: baseline.channels[i],
            pruned: pruned.channels[i],
        })
        .collect();
    Ok(CompressionReport::from_totals(&t.arch_id, base, cut, groups))
}
