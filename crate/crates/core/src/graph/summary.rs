//! Human- and machine-readable descriptions of a built network.

use std::fmt::Write as _;

use serde::Serialize;

use super::{NetworkGraph, NodeShape};
use crate::cost::CostTable;

#[derive(Clone, Debug, Serialize)]
pub struct NodeSummary {
    pub id: usize,
    pub kind: &'static str,
    pub layer: usize,
    pub scale: usize,
    pub inputs: Vec<usize>,
    pub shape: NodeShape,
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifierSummary {
    pub index: usize,
    pub layer: usize,
    pub node: usize,
    pub cumulative_flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FeatureSummary {
    pub layer: usize,
    pub scale: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GraphSummary {
    pub config_hash: String,
    pub num_parameters: usize,
    pub nodes: Vec<NodeSummary>,
    pub features: Vec<FeatureSummary>,
    pub classifiers: Vec<ClassifierSummary>,
}

impl GraphSummary {
    pub fn new(graph: &NetworkGraph, costs: &CostTable) -> Self {
        let nodes = graph
            .nodes()
            .iter()
            .map(|n| NodeSummary {
                id: n.id.0,
                kind: n.kind.as_str(),
                layer: n.layer,
                scale: n.scale,
                inputs: n.inputs.iter().map(|i| i.0).collect(),
                shape: n.shape,
                flops: costs.node_flops[n.id.0],
            })
            .collect();
        let features = graph
            .feature_positions()
            .into_iter()
            .map(|(layer, scale)| FeatureSummary {
                layer,
                scale,
                channels: graph.channels_at(layer, scale).unwrap_or(0),
            })
            .collect();
        let classifiers = graph
            .classifiers()
            .iter()
            .enumerate()
            .map(|(k, id)| ClassifierSummary {
                index: k + 1,
                layer: graph.classifier_layers()[k],
                node: id.0,
                cumulative_flops: costs.classifier_costs[k],
            })
            .collect();
        Self {
            config_hash: graph.config().arch_hash(),
            num_parameters: graph.num_parameters(),
            nodes,
            features,
            classifiers,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}  parameters {}", self.config_hash, self.num_parameters);
        let _ = writeln!(s, "\nnodes:");
        let _ = writeln!(s, "{:>5}  {:<16} {:>5} {:>5}  {:<18} {:>12}  inputs", "id", "kind", "layer", "scale", "shape", "flops");
        for n in &self.nodes {
            let shape = match n.shape {
                NodeShape::Map { channels, h, w } => format!("{channels}x{h}x{w}"),
                NodeShape::Logits { classes } => format!("logits[{classes}]"),
            };
            let inputs: Vec<String> = n.inputs.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(
                s,
                "{:>5}  {:<16} {:>5} {:>5}  {:<18} {:>12}  {}",
                n.id,
                n.kind,
                n.layer,
                n.scale,
                shape,
                n.flops,
                inputs.join(",")
            );
        }
        let _ = writeln!(s, "\nfeature channels (layer, scale):");
        for f in &self.features {
            let _ = writeln!(s, "  ({:>3}, {}) {:>6}", f.layer, f.scale, f.channels);
        }
        let _ = writeln!(s, "\nclassifiers: {}", self.classifiers.len());
        for c in &self.classifiers {
            let _ = writeln!(s, "  k={:<3} layer {:>3}  C_k = {}", c.index, c.layer, c.cumulative_flops);
        }
        s
    }
}
