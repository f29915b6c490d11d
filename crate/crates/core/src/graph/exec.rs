//! Node evaluation, both directly (inference) and on a tape (training).
//! Both paths call the same kernels in the same order.

use super::{GraphNode, NetworkGraph, NodeKind, ParamId, Primitive};
use crate::error::{Error, Result};
use crate::tensor::{ops, BnMode, RunningStats, Tape, Tensor, Var, BN_MOMENTUM};

/// Evaluates one node on already-computed input tensors, with batch norm
/// in inference mode.
pub fn apply_eval(graph: &NetworkGraph, node: &GraphNode, inputs: &[&Tensor]) -> Result<Tensor> {
    if node.kind == NodeKind::Input {
        return Err(Error::Usage("the input node is not evaluated".into()));
    }
    let mut x = match inputs {
        [single] => (*single).clone(),
        many => ops::concat_channels(many)?,
    };
    for prim in &node.primitives {
        x = match *prim {
            Primitive::Conv { weight, ref geometry, .. } => ops::conv2d_with(&x, graph.param(weight), geometry)?,
            Primitive::BatchNorm { gamma, beta, stats, .. } => {
                ops::batch_norm_eval(&x, graph.param(gamma), graph.param(beta), &graph.stats()[stats.0])?.0
            }
            Primitive::Relu { .. } => ops::relu(&x),
            Primitive::AvgPool { kh, kw, .. } => ops::avg_pool(&x, kh, kw)?,
            Primitive::Flatten { features } => {
                let b = x.batch_size();
                x.reshape(vec![b, features])?
            }
            Primitive::Linear { weight, bias, .. } => ops::linear(&x, graph.param(weight), graph.param(bias))?,
        };
    }
    Ok(x)
}

/// Tape handles for every parameter of a graph, indexed by [`ParamId`].
pub struct TapeParams {
    vars: Vec<Var>,
}

impl TapeParams {
    /// Registers every parameter of `graph` as a trainable leaf.
    pub fn register(tape: &mut Tape, graph: &NetworkGraph) -> Self {
        let vars = graph.params().iter().map(|p| tape.param(p.clone())).collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Records one node on `tape`. In train mode batch norm uses batch
/// statistics and updates `stats` in place.
pub fn apply_tape(
    tape: &mut Tape,
    node: &GraphNode,
    inputs: &[Var],
    params: &TapeParams,
    stats: &mut [RunningStats],
    train: bool,
) -> Result<Var> {
    let mut x = match inputs {
        [single] => *single,
        many => tape.concat(many)?,
    };
    for prim in &node.primitives {
        x = match *prim {
            Primitive::Conv { weight, ref geometry, .. } => tape.conv2d_with(x, params.var(weight), geometry)?,
            Primitive::BatchNorm { gamma, beta, stats: sid, .. } => {
                let mode = if train {
                    BnMode::Train { stats: &mut stats[sid.0], momentum: BN_MOMENTUM }
                } else {
                    BnMode::Eval(&stats[sid.0])
                };
                tape.batch_norm(x, params.var(gamma), params.var(beta), mode)?
            }
            Primitive::Relu { .. } => tape.relu(x),
            Primitive::AvgPool { kh, kw, .. } => tape.avg_pool(x, kh, kw)?,
            Primitive::Flatten { .. } => tape.flatten(x)?,
            Primitive::Linear { weight, bias, .. } => tape.linear(x, params.var(weight), params.var(bias))?,
        };
    }
    Ok(x)
}
