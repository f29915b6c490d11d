//! FLOP accounting.
//!
//! One multiply-accumulate counts as 2 FLOPs. Element-wise work (batch
//! norm, ReLU, pooling) is counted too, so the per-classifier totals match
//! exactly what the lazy evaluator executes. Concatenation is free.

use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::graph::{GraphNode, NetworkGraph, NodeId, Primitive};

/// Per-sample FLOPs of one primitive.
pub fn primitive_flops(p: &Primitive) -> u64 {
    let f = match *p {
        Primitive::Conv { cin, cout, ref geometry, .. } => {
            2 * geometry.kernel_h * geometry.kernel_w * cin * cout * geometry.out_h * geometry.out_w
        }
        Primitive::BatchNorm { channels, h, w, .. } => 4 * channels * h * w,
        Primitive::Relu { channels, h, w } => channels * h * w,
        Primitive::AvgPool { channels, kh, kw, in_h, in_w } => channels * (in_h / kh) * (in_w / kw) * kh * kw,
        Primitive::Flatten { .. } => 0,
        Primitive::Linear { fin, fout, .. } => 2 * fin * fout,
    };
    f as u64
}

/// Per-sample FLOPs of a node (0 for concatenation and the input).
pub fn node_flops(node: &GraphNode) -> u64 {
    node.primitives.iter().map(primitive_flops).sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostTable {
    /// Indexed by node id.
    pub node_flops: Vec<u64>,
    /// `C_k`: FLOPs to evaluate everything up to and including classifier
    /// `k` (index `k - 1`), counting every node once.
    pub classifier_costs: Vec<u64>,
}

impl CostTable {
    pub fn total(&self) -> u64 {
        self.classifier_costs.last().copied().unwrap_or(0)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.classifier_costs.iter().map(|&c| c as f64).collect()
    }
}

/// Cumulative classifier costs: `C_k` sums node FLOPs over the union of the
/// ancestor sets of classifiers `1..=k`.
pub fn classifier_costs(graph: &NetworkGraph) -> CostTable {
    let node_flops: Vec<u64> = graph.nodes().iter().map(node_flops).collect();
    let mut covered: BTreeSet<NodeId> = BTreeSet::new();
    let mut running = 0u64;
    let mut classifier_costs = Vec::with_capacity(graph.num_classifiers());
    for &clf in graph.classifiers() {
        for n in graph.ancestors(clf) {
            if covered.insert(n) {
                running += node_flops[n.0];
            }
        }
        classifier_costs.push(running);
    }
    CostTable { node_flops, classifier_costs }
}

/// Writes the per-node table: `node,kind,layer,scale,flops`.
pub fn write_node_csv<W: Write>(graph: &NetworkGraph, table: &CostTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "kind", "layer", "scale", "flops"])?;
    for node in graph.nodes() {
        w.write_record([
            node.id.0.to_string(),
            node.kind.as_str().to_string(),
            node.layer.to_string(),
            node.scale.to_string(),
            table.node_flops[node.id.0].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the classifier table: `classifier,layer,cumulative_flops`.
pub fn write_classifier_csv<W: Write>(graph: &NetworkGraph, table: &CostTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["classifier", "layer", "cumulative_flops"])?;
    for (k, (layer, c)) in graph.classifier_layers().iter().zip(&table.classifier_costs).enumerate() {
        w.write_record([(k + 1).to_string(), layer.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
