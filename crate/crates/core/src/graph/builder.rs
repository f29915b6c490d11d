use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GraphNode, NetworkConfig, NetworkGraph, NodeId, NodeKind, NodeShape, ParamId, Primitive, StatsId};
use crate::cost;
use crate::error::{config_err, Result};
use crate::tensor::ops::ConvGeometry;
use crate::tensor::{RunningStats, Tensor};

/// Spatial extent of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Extent {
    h: usize,
    w: usize,
}

impl Extent {
    fn halved(self) -> Self {
        Extent { h: self.h.div_ceil(2), w: self.w.div_ceil(2) }
    }
}

/// Output of the most recent layer at one scale: what the next layer's
/// transforms read.
#[derive(Clone, Copy, Debug)]
struct Slot {
    node: NodeId,
    channels: usize,
    extent: Extent,
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<GraphNode>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder {
    fn new_param(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.params.push(tensor);
        self.param_names.push(name);
        ParamId(self.params.len() - 1)
    }

    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut self.rng));
        self.new_param(name, t)
    }

    /// Conv (no bias) → BN → ReLU.
    fn conv_bn_relu(
        &mut self,
        prims: &mut Vec<Primitive>,
        tag: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        input: Extent,
    ) -> Result<Extent> {
        let idx = prims.len();
        let padding = kernel / 2;
        // stride-2 convs downsample to ceil(H/2); stride-1 convs must tile exactly
        let geometry = ConvGeometry::new(input.h, input.w, kernel, kernel, stride, padding, stride == 1)?;
        let out = Extent { h: geometry.out_h, w: geometry.out_w };
        let weight = self.kaiming(
            format!("{tag}.conv{idx}.weight"),
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
            2.0,
        );
        let gamma = self.new_param(format!("{tag}.bn{idx}.gamma"), Tensor::full(&[cout], 1.0));
        let beta = self.new_param(format!("{tag}.bn{idx}.beta"), Tensor::zeros(&[cout]));
        self.stats.push(RunningStats::new(cout));
        let stats = StatsId(self.stats.len() - 1);
        prims.push(Primitive::Conv { weight, cin, cout, geometry });
        prims.push(Primitive::BatchNorm { gamma, beta, stats, channels: cout, h: out.h, w: out.w });
        prims.push(Primitive::Relu { channels: cout, h: out.h, w: out.w });
        Ok(out)
    }

    fn push_node(&mut self, kind: NodeKind, scale: usize, layer: usize, inputs: Vec<NodeId>, primitives: Vec<Primitive>, shape: NodeShape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode { id, kind, scale, layer, inputs, primitives, shape });
        id
    }

    fn map_node(&mut self, kind: NodeKind, scale: usize, layer: usize, inputs: Vec<NodeId>, primitives: Vec<Primitive>, channels: usize, extent: Extent) -> Slot {
        let shape = NodeShape::Map { channels, h: extent.h, w: extent.w };
        let node = self.push_node(kind, scale, layer, inputs, primitives, shape);
        Slot { node, channels, extent }
    }

    /// Conv1x1-BN-ReLU-Conv3x3-BN-ReLU; the 3x3 conv has stride 2 for `h̃`.
    fn bottleneck_transform(
        &mut self,
        kind: NodeKind,
        scale: usize,
        layer: usize,
        from: Slot,
        cout: usize,
        bottleneck_factor: usize,
    ) -> Result<Slot> {
        let tag = format!("{}.l{layer}.s{scale}", kind.as_str());
        let inner = from.channels.min(bottleneck_factor * cout);
        let stride = if kind == NodeKind::Diagonal { 2 } else { 1 };
        let mut prims = Vec::new();
        let mid = self.conv_bn_relu(&mut prims, &tag, from.channels, inner, 1, 1, from.extent)?;
        let out = self.conv_bn_relu(&mut prims, &tag, inner, cout, 3, stride, mid)?;
        Ok(self.map_node(kind, scale, layer, vec![from.node], prims, cout, out))
    }

    fn classifier_head(&mut self, config: &NetworkConfig, layer: usize, scale: usize, from: Slot) -> Result<NodeId> {
        let tag = format!("classifier.l{layer}");
        let width = if config.head_matches_input { from.channels } else { config.head_channels };
        let mut prims = Vec::new();
        let e1 = self.conv_bn_relu(&mut prims, &tag, from.channels, width, 3, 2, from.extent)?;
        let e2 = self.conv_bn_relu(&mut prims, &tag, width, width, 3, 2, e1)?;
        // 2x2 average pool; global when the map is already smaller than that
        let (kh, kw) = if e2.h >= 2 && e2.w >= 2 { (2, 2) } else { (e2.h, e2.w) };
        prims.push(Primitive::AvgPool { channels: width, kh, kw, in_h: e2.h, in_w: e2.w });
        let features = width * (e2.h / kh) * (e2.w / kw);
        prims.push(Primitive::Flatten { features });
        let fout = config.num_classes;
        let weight = self.kaiming(format!("{tag}.linear.weight"), &[fout, features], features, 1.0);
        let bias = self.new_param(format!("{tag}.linear.bias"), Tensor::zeros(&[fout]));
        prims.push(Primitive::Linear { weight, bias, fin: features, fout });
        Ok(self.push_node(NodeKind::ClassifierHead, scale, layer, vec![from.node], prims, NodeShape::Logits { classes: fout }))
    }
}

/// Block index (0-based) of every layer (1-based), for reduction.
fn block_of_layers(num_layers: usize, blocks: usize) -> Vec<usize> {
    let base = num_layers / blocks;
    let rem = num_layers % blocks;
    let mut out = vec![0; num_layers + 1];
    let mut layer = 1;
    for b in 0..blocks {
        // the remainder goes to the later blocks
        let size = base + usize::from(b >= blocks - rem);
        for _ in 0..size {
            out[layer] = b;
            layer += 1;
        }
    }
    out
}

pub(super) fn build(config: &NetworkConfig) -> Result<NetworkGraph> {
    config.validate()?;
    let scales = config.effective_scales();
    let layers = config.num_layers;
    let growth = config.effective_growth().to_vec();
    let dense = config.ablation.dense_connectivity;
    let classifier_layers = config.classifier_layers()?;
    let blocks = if config.reduction { scales } else { 1 };
    let block_of = block_of_layers(layers, blocks);

    let mut extents = vec![Extent { h: config.input.height, w: config.input.width }];
    for _ in 1..scales {
        extents.push(extents.last().unwrap().halved());
    }
    let coarse = extents[scales - 1];
    if coarse.h < 2 || coarse.w < 2 {
        return Err(config_err(format!(
            "input {}x{} leaves a {}x{} map at scale {scales}, smaller than the 2x2 classifier pool",
            config.input.height, config.input.width, coarse.h, coarse.w
        )));
    }

    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        nodes: Vec::new(),
        params: Vec::new(),
        param_names: Vec::new(),
        stats: Vec::new(),
    };
    let input_extent = extents[0];
    let input = b.map_node(NodeKind::Input, 0, 0, vec![], vec![], config.input.channels, input_extent);

    let mut history: BTreeMap<(usize, usize), NodeId> = BTreeMap::new();
    let mut classifiers = Vec::new();
    // prev[s - 1]: output of the previous layer at scale s, if that scale is alive
    let mut prev: Vec<Option<Slot>> = vec![None; scales];

    // Layer 1 seeds every scale, each from the one above it.
    let mut from = input;
    for s in 1..=scales {
        let cout = config.seed_multiplier * growth[s - 1];
        let tag = format!("seed.s{s}");
        let mut prims = Vec::new();
        let stride = if s == 1 { 1 } else { 2 };
        let out = b.conv_bn_relu(&mut prims, &tag, from.channels, cout, 3, stride, from.extent)?;
        debug_assert_eq!(out, extents[s - 1]);
        let slot = b.map_node(NodeKind::SeedConv, s, 1, vec![from.node], prims, cout, out);
        history.insert((1, s), slot.node);
        prev[s - 1] = Some(slot);
        from = slot;
    }
    let mut next_classifier = classifier_layers.iter().copied().peekable();
    if next_classifier.peek() == Some(&1) {
        next_classifier.next();
        classifiers.push(b.classifier_head(config, 1, scales, prev[scales - 1].unwrap())?);
    }

    for layer in 2..=layers {
        let block = block_of[layer];
        let growth_mult = if config.densenet_star { 1usize << block } else { 1 };
        if block != block_of[layer - 1] {
            // Transition: halve every scale alive in the previous block.
            for s in 1..=scales {
                let Some(slot) = prev[s - 1] else { continue };
                let half = slot.channels / 2;
                if half == 0 {
                    return Err(config_err(format!("transition before layer {layer} leaves scale {s} with no channels")));
                }
                let mut prims = Vec::new();
                let tag = format!("transition.l{}.s{s}", layer - 1);
                let out = b.conv_bn_relu(&mut prims, &tag, slot.channels, half, 1, 1, slot.extent)?;
                prev[s - 1] = Some(b.map_node(NodeKind::Transition, s, layer - 1, vec![slot.node], prims, half, out));
            }
        }
        let first_alive = block + 1;
        let mut next: Vec<Option<Slot>> = vec![None; scales];
        for s in first_alive..=scales {
            let own = prev[s - 1].expect("alive scale has a previous output");
            let finer = if s > 1 { prev[s - 2] } else { None };
            let k = growth[s - 1] * growth_mult;
            let mut parts = Vec::new();
            if dense {
                parts.push(own.node);
            }
            let h_out = if finer.is_some() { k / 2 } else { k };
            let h = b.bottleneck_transform(NodeKind::Horizontal, s, layer, own, h_out, config.bottleneck_factor)?;
            parts.push(h.node);
            let mut channels = h.channels + if dense { own.channels } else { 0 };
            if let Some(f) = finer {
                let d = b.bottleneck_transform(NodeKind::Diagonal, s, layer, f, k / 2, config.bottleneck_factor)?;
                debug_assert_eq!(d.extent, own.extent);
                parts.push(d.node);
                channels += d.channels;
            }
            let slot = if parts.len() == 1 {
                h
            } else {
                b.map_node(NodeKind::Concat, s, layer, parts, vec![], channels, own.extent)
            };
            history.insert((layer, s), slot.node);
            next[s - 1] = Some(slot);
        }
        prev = next;
        if next_classifier.peek() == Some(&layer) {
            next_classifier.next();
            classifiers.push(b.classifier_head(config, layer, scales, prev[scales - 1].unwrap())?);
        }
    }
    debug_assert!(next_classifier.peek().is_none());

    let node_flops = b.nodes.iter().map(cost::node_flops).collect();
    Ok(NetworkGraph {
        config: config.clone(),
        nodes: b.nodes,
        classifiers,
        classifier_layers,
        history,
        params: b.params,
        param_names: b.param_names,
        stats: b.stats,
        node_flops,
    })
}
