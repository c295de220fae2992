//! Cell DAG structure, the 8-operation candidate set, mixed-edge computation
//! under softmax or sigmoid gating, architecture parameters, and
//! discretization into a [`Genotype`](crate::genotype::Genotype).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{Genotype, GenotypeEdge};
use crate::tensor::{sigmoid, Element, Tape, Tensor, Var};

/// The candidate operations, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperationKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
}

impl OperationKind {
    /// All 8 operations in canonical order.
    pub const ALL: [OperationKind; 8] = [
        OperationKind::None,
        OperationKind::MaxPool3x3,
        OperationKind::AvgPool3x3,
        OperationKind::SkipConnect,
        OperationKind::SepConv3x3,
        OperationKind::SepConv5x5,
        OperationKind::DilConv3x3,
        OperationKind::DilConv5x5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::None => "none",
            OperationKind::MaxPool3x3 => "max_pool_3x3",
            OperationKind::AvgPool3x3 => "avg_pool_3x3",
            OperationKind::SkipConnect => "skip_connect",
            OperationKind::SepConv3x3 => "sep_conv_3x3",
            OperationKind::SepConv5x5 => "sep_conv_5x5",
            OperationKind::DilConv3x3 => "dil_conv_3x3",
            OperationKind::DilConv5x5 => "dil_conv_5x5",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        OperationKind::ALL
            .iter()
            .copied()
            .find(|op| op.name() == name)
            .ok_or_else(|| Error::Parse(format!("unknown operation name `{name}`")))
    }
}

/// Structural constants of a cell: 2 input nodes, 4 intermediate nodes whose
/// channel concatenation forms the output, and an edge from every earlier
/// node to every intermediate node.
#[derive(Debug, Clone, Copy)]
pub struct CellSpec;

impl CellSpec {
    pub const NUM_INPUT_NODES: usize = 2;
    pub const NUM_INTERMEDIATE: usize = 4;
    pub const NUM_EDGES: usize = 14;
    /// Node id of the concatenation output (0,1 inputs; 2..=5 intermediates).
    pub const OUTPUT_NODE: usize = 6;

    /// Edges in canonical order: for each intermediate node `dst` (2..=5),
    /// one edge from every earlier node `src < dst`.
    pub fn edges() -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(Self::NUM_EDGES);
        for dst in Self::NUM_INPUT_NODES..Self::NUM_INPUT_NODES + Self::NUM_INTERMEDIATE {
            for src in 0..dst {
                edges.push((src, dst));
            }
        }
        edges
    }
}

/// Which cell an architecture matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduce,
}

/// Gating applied to per-edge attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    Softmax,
    Sigmoid,
}

/// Per-edge, per-operation attention weights for both cell kinds, shared
/// across all cells of the same kind. Stored in `f64`; updated only by the
/// architecture optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    /// Candidate set, a subset of [`OperationKind::ALL`] in canonical order.
    pub ops: Vec<OperationKind>,
    /// `[14 x ops.len()]` row-major.
    pub alpha_normal: Vec<f64>,
    pub alpha_reduce: Vec<f64>,
}

impl ArchParams {
    /// Zero-initialized matrices: uniform softmax gates, 0.5 sigmoid gates.
    pub fn zeros(ops: &[OperationKind]) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::InvalidArg("empty candidate operation set".into()));
        }
        let mut sorted = ops.to_vec();
        sorted.dedup();
        if sorted.len() != ops.len() {
            return Err(Error::InvalidArg("duplicate candidate operation".into()));
        }
        Ok(ArchParams {
            ops: ops.to_vec(),
            alpha_normal: vec![0.0; CellSpec::NUM_EDGES * ops.len()],
            alpha_reduce: vec![0.0; CellSpec::NUM_EDGES * ops.len()],
        })
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn matrix(&self, kind: CellKind) -> &[f64] {
        match kind {
            CellKind::Normal => &self.alpha_normal,
            CellKind::Reduce => &self.alpha_reduce,
        }
    }

    pub fn matrix_mut(&mut self, kind: CellKind) -> &mut [f64] {
        match kind {
            CellKind::Normal => &mut self.alpha_normal,
            CellKind::Reduce => &mut self.alpha_reduce,
        }
    }

    pub fn edge_row(&self, kind: CellKind, edge: usize) -> &[f64] {
        let k = self.num_ops();
        &self.matrix(kind)[edge * k..(edge + 1) * k]
    }

    /// Matrices as tensors of the training element type.
    pub fn matrix_tensor<T: Element>(&self, kind: CellKind) -> Tensor<T> {
        Tensor::from_f64_slice(
            vec![CellSpec::NUM_EDGES, self.num_ops()],
            self.matrix(kind),
        )
        .expect("alpha matrix is rectangular")
    }

    pub fn check_finite(&self) -> Result<()> {
        for (kind, m) in [("normal", &self.alpha_normal), ("reduce", &self.alpha_reduce)] {
            if let Some(i) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite alpha in {kind} matrix at flat index {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Softmax-gated mixed edge: `sum_o softmax(alpha)_o * o(x)` (on tape).
///
/// `alpha_row` is the `[num_ops]` attention row for this edge; `ops_out` are
/// the candidate operation outputs, all of one shape.
pub fn mixed_edge_softmax<T: Element>(
    tape: &mut Tape<T>,
    ops_out: &[Var],
    alpha_row: Var,
) -> Result<Var> {
    let gates = tape.softmax_lastdim(alpha_row);
    tape.weighted_sum(ops_out, gates)
}

/// Sigmoid-gated mixed edge: `sum_o sigmoid(alpha_o) * o(x)`; gates are
/// independent across operations.
pub fn mixed_edge_sigmoid<T: Element>(
    tape: &mut Tape<T>,
    ops_out: &[Var],
    alpha_row: Var,
) -> Result<Var> {
    let gates = tape.sigmoid(alpha_row);
    tape.weighted_sum(ops_out, gates)
}

pub fn mixed_edge<T: Element>(
    tape: &mut Tape<T>,
    gating: Gating,
    ops_out: &[Var],
    alpha_row: Var,
) -> Result<Var> {
    match gating {
        Gating::Softmax => mixed_edge_softmax(tape, ops_out, alpha_row),
        Gating::Sigmoid => mixed_edge_sigmoid(tape, ops_out, alpha_row),
    }
}

/// Discretization rule applied to the final architecture weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizeRule {
    /// Per edge, the operation with the largest attention weight wins; ties
    /// break to the lowest canonical index; `none` is a legal winner and
    /// yields an absent edge.
    SoftmaxArgmax,
    /// Per edge, keep the non-`none` operation with the largest sigmoid gate
    /// if its gate exceeds the threshold, else no operation.
    SigmoidThreshold(f64),
    /// Per intermediate node, keep the two incoming edges with the strongest
    /// non-`none` operations, each reduced to its best non-`none` op.
    DartsTop2,
}

impl DiscretizeRule {
    pub fn label(&self) -> String {
        match self {
            DiscretizeRule::SoftmaxArgmax => "softmax_argmax".into(),
            DiscretizeRule::SigmoidThreshold(t) => format!("sigmoid_threshold({t})"),
            DiscretizeRule::DartsTop2 => "darts_top2".into(),
        }
    }
}

fn argmax_lowest_index(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn discretize_matrix(
    alpha: &[f64],
    ops: &[OperationKind],
    rule: DiscretizeRule,
) -> Vec<Option<OperationKind>> {
    let k = ops.len();
    let edges = CellSpec::edges();
    match rule {
        DiscretizeRule::SoftmaxArgmax => edges
            .iter()
            .enumerate()
            .map(|(e, _)| {
                let winner = ops[argmax_lowest_index(&alpha[e * k..(e + 1) * k])];
                match winner {
                    OperationKind::None => None,
                    op => Some(op),
                }
            })
            .collect(),
        DiscretizeRule::SigmoidThreshold(t) => edges
            .iter()
            .enumerate()
            .map(|(e, _)| {
                let row = &alpha[e * k..(e + 1) * k];
                let mut best: Option<(usize, f64)> = None;
                for (i, (&a, &op)) in row.iter().zip(ops.iter()).enumerate() {
                    if op == OperationKind::None {
                        continue;
                    }
                    let g = sigmoid(a);
                    match best {
                        Some((_, bg)) if g <= bg => {}
                        _ => best = Some((i, g)),
                    }
                }
                best.and_then(|(i, g)| if g > t { Some(ops[i]) } else { None })
            })
            .collect(),
        DiscretizeRule::DartsTop2 => {
            // Edge strength = largest non-`none` weight; per node keep the
            // two strongest incoming edges.
            let edge_list = CellSpec::edges();
            let best_non_none: Vec<Option<(usize, f64)>> = (0..edge_list.len())
                .map(|e| {
                    let row = &alpha[e * k..(e + 1) * k];
                    let mut best: Option<(usize, f64)> = None;
                    for (i, (&a, &op)) in row.iter().zip(ops.iter()).enumerate() {
                        if op == OperationKind::None {
                            continue;
                        }
                        match best {
                            Some((_, bv)) if a <= bv => {}
                            _ => best = Some((i, a)),
                        }
                    }
                    best
                })
                .collect();
            let mut chosen = vec![None; edge_list.len()];
            for dst in
                CellSpec::NUM_INPUT_NODES..CellSpec::NUM_INPUT_NODES + CellSpec::NUM_INTERMEDIATE
            {
                let incoming: Vec<usize> = edge_list
                    .iter()
                    .enumerate()
                    .filter(|(_, &(_, d))| d == dst)
                    .map(|(e, _)| e)
                    .collect();
                let mut ranked: Vec<(usize, f64)> = incoming
                    .iter()
                    .filter_map(|&e| best_non_none[e].map(|(_, v)| (e, v)))
                    .collect();
                // Stable by edge order on ties.
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                for &(e, _) in ranked.iter().take(2) {
                    chosen[e] = best_non_none[e].map(|(i, _)| ops[i]);
                }
            }
            chosen
        }
    }
}

/// Extract a discrete [`Genotype`] from architecture weights.
pub fn discretize(
    arch: &ArchParams,
    gating: Gating,
    rule: DiscretizeRule,
    config_hash: &str,
) -> Genotype {
    let edges = CellSpec::edges();
    let build = |alpha: &[f64]| -> Vec<GenotypeEdge> {
        discretize_matrix(alpha, &arch.ops, rule)
            .into_iter()
            .zip(edges.iter())
            .map(|(op, &(src, dst))| GenotypeEdge {
                from: src,
                to: dst,
                op: op.unwrap_or(OperationKind::None),
            })
            .collect()
    };
    Genotype {
        version: 1,
        gating_mode: gating,
        discretize_rule: rule.label(),
        config_hash: config_hash.to_string(),
        normal: build(&arch.alpha_normal),
        reduce: build(&arch.alpha_reduce),
    }
}
