//! Discrete cell descriptions: JSON serialization and DOT export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{CellKind, CellSpec, Gating, OperationKind};

/// One edge of a discretized cell. `op == none` means the edge is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeEdge {
    pub from: usize,
    pub to: usize,
    pub op: OperationKind,
}

/// Discretized architecture: one chosen operation per edge for each cell
/// kind, plus the metadata needed to reproduce the choice.
///
/// Node ids: 0,1 inputs; 2..=5 intermediates; 6 output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub version: u32,
    pub gating_mode: Gating,
    pub discretize_rule: String,
    pub config_hash: String,
    pub normal: Vec<GenotypeEdge>,
    pub reduce: Vec<GenotypeEdge>,
}

impl Genotype {
    pub fn edges(&self, kind: CellKind) -> &[GenotypeEdge] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    /// Number of retained (non-`none`) operations in one cell kind.
    pub fn num_retained(&self, kind: CellKind) -> usize {
        self.edges(kind)
            .iter()
            .filter(|e| e.op != OperationKind::None)
            .count()
    }

    /// Every edge of the canonical cell appears exactly once, in canonical
    /// order.
    pub fn validate(&self) -> Result<()> {
        let canonical = CellSpec::edges();
        for (kind, edges) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if edges.len() != canonical.len() {
                return Err(Error::Parse(format!(
                    "{kind} cell has {} edges, expected {}",
                    edges.len(),
                    canonical.len()
                )));
            }
            for (i, (e, &(src, dst))) in edges.iter().zip(canonical.iter()).enumerate() {
                if (e.from, e.to) != (src, dst) {
                    return Err(Error::Parse(format!(
                        "{kind} cell edge {i} is ({},{}), expected canonical ({src},{dst})",
                        e.from, e.to
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn serialize_text(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("genotype: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// DOT digraph for one cell kind: one node per cell node, one labeled
    /// edge per retained operation.
    pub fn to_dot(&self, kind: CellKind) -> String {
        let name = match kind {
            CellKind::Normal => "normal",
            CellKind::Reduce => "reduce",
        };
        let mut out = String::new();
        out.push_str(&format!("digraph {name} {{\n"));
        out.push_str("  rankdir=LR;\n");
        for node in 0..CellSpec::NUM_INPUT_NODES {
            out.push_str(&format!(
                "  n{node} [label=\"c_{{k-{}}}\" shape=box];\n",
                CellSpec::NUM_INPUT_NODES - node
            ));
        }
        for node in CellSpec::NUM_INPUT_NODES..CellSpec::OUTPUT_NODE {
            out.push_str(&format!("  n{node} [label=\"{node}\"];\n"));
        }
        out.push_str(&format!(
            "  n{} [label=\"c_k\" shape=box];\n",
            CellSpec::OUTPUT_NODE
        ));
        for e in self.edges(kind) {
            if e.op != OperationKind::None {
                out.push_str(&format!(
                    "  n{} -> n{} [label=\"{}\"];\n",
                    e.from,
                    e.to,
                    e.op.name()
                ));
            }
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{discretize, ArchParams, DiscretizeRule};

    fn empty_genotype() -> Genotype {
        let arch = ArchParams::zeros(&OperationKind::ALL).unwrap();
        discretize(&arch, Gating::Softmax, DiscretizeRule::SoftmaxArgmax, "h0")
    }

    #[test]
    fn empty_genotype_round_trips() {
        let g = empty_genotype();
        let text = g.serialize_text().unwrap();
        let back = Genotype::parse_text(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn genotype_with_all_op_kinds_round_trips() {
        let mut g = empty_genotype();
        for (i, e) in g.normal.iter_mut().enumerate() {
            e.op = OperationKind::ALL[i % 8];
        }
        let text = g.serialize_text().unwrap();
        let back = Genotype::parse_text(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn unknown_op_name_is_rejected_naming_the_token() {
        let g = empty_genotype();
        let text = g
            .serialize_text()
            .unwrap()
            .replace("\"none\"", "\"wormhole_conv\"");
        let err = Genotype::parse_text(&text).unwrap_err();
        assert!(err.to_string().contains("wormhole_conv"), "got: {err}");
    }

    #[test]
    fn non_canonical_edge_order_is_rejected() {
        let mut g = empty_genotype();
        g.normal.swap(0, 1);
        let text = serde_json::to_string(&g).unwrap();
        let err = Genotype::parse_text(&text).unwrap_err();
        assert!(err.to_string().contains("canonical"), "got: {err}");
    }

    #[test]
    fn dot_export_of_empty_genotype_has_seven_nodes_and_no_op_edges() {
        let g = empty_genotype();
        let dot = g.to_dot(CellKind::Normal);
        let node_count = dot.lines().filter(|l| l.contains("[label=") && !l.contains("->")).count();
        assert_eq!(node_count, 7);
        assert_eq!(dot.matches("->").count(), 0);
    }

    #[test]
    fn dot_edge_count_equals_retained_op_count() {
        let mut g = empty_genotype();
        g.normal[0].op = OperationKind::SepConv3x3;
        let dot = g.to_dot(CellKind::Normal);
        assert_eq!(dot.matches("->").count(), 1);
        assert!(dot.contains("sep_conv_3x3"));

        g.normal[3].op = OperationKind::SkipConnect;
        g.normal[7].op = OperationKind::MaxPool3x3;
        let dot = g.to_dot(CellKind::Normal);
        assert_eq!(dot.matches("->").count(), g.num_retained(CellKind::Normal));
    }
}
