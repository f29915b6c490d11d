use super::ops::{self, BnCache, ConvGeometry, RunningStats};
use super::Tensor;
use crate::error::{config_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    BatchNorm,
    Relu,
    AvgPool,
    Linear,
    Flatten,
    Concat,
    Softmax,
    CrossEntropy,
    Sum,
    Scale,
    Add,
}

#[derive(Debug)]
enum Saved {
    None,
    Conv(ConvGeometry),
    Bn(BnCache),
    Pool(usize, usize),
    CrossEntropy { probs: Tensor, labels: Vec<usize> },
    Factor(f64),
    Channels(Vec<usize>),
}

/// One recorded operation: which kernel ran, on what, and the intermediates
/// its backward pass needs.
#[derive(Debug)]
pub struct OpRecord {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
    saved: Saved,
}

/// How a batch-norm op sources its statistics.
pub enum BnMode<'a> {
    /// Normalise with batch statistics and fold them into `stats`.
    Train { stats: &'a mut RunningStats, momentum: f64 },
    /// Normalise with the stored running statistics.
    Eval(&'a RunningStats),
}

/// Append-only record of a forward pass, replayed once in reverse by
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    is_leaf: Vec<bool>,
    records: Vec<OpRecord>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_value(&mut self, t: Tensor, requires_grad: bool, leaf: bool) -> Var {
        self.values.push(t);
        self.requires_grad.push(requires_grad);
        self.is_leaf.push(leaf);
        Var(self.values.len() - 1)
    }

    fn record(&mut self, kind: OpKind, inputs: Vec<Var>, out: Tensor, saved: Saved) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        let output = self.push_value(out, rg, false);
        self.records.push(OpRecord { kind, inputs, output, saved });
        output
    }

    /// A constant input (no gradient).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_value(t, false, true)
    }

    /// A trainable input; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_value(t, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad()
    }

    pub fn records(&self) -> &[OpRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), stride, padding)?;
        let [_, _, h, wd] = self.value(x).dims4()?;
        let [_, _, kh, kw] = self.value(w).dims4()?;
        let g = ConvGeometry::new(h, wd, kh, kw, stride, padding, true)?;
        Ok(self.record(OpKind::Conv2d, vec![x, w], out, Saved::Conv(g)))
    }

    /// 3x3 / stride 2 / padding 1, with a `ceil(H/2)` output.
    pub fn downsample_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::strided_downsample_conv(self.value(x), self.value(w))?;
        let [_, _, h, wd] = self.value(x).dims4()?;
        let g = ConvGeometry::new(h, wd, 3, 3, 2, 1, false)?;
        Ok(self.record(OpKind::Conv2d, vec![x, w], out, Saved::Conv(g)))
    }

    /// Convolution with a geometry computed by the caller.
    pub fn conv2d_with(&mut self, x: Var, w: Var, g: &ConvGeometry) -> Result<Var> {
        let out = ops::conv2d_with(self.value(x), self.value(w), g)?;
        Ok(self.record(OpKind::Conv2d, vec![x, w], out, Saved::Conv(*g)))
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let (out, cache) = match mode {
            BnMode::Train { stats, momentum } => {
                let (out, cache) = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
                if stats.channels() != cache.mean.len() {
                    return Err(config_err("running stats channel count mismatch"));
                }
                stats.update(&cache, momentum);
                (out, cache)
            }
            BnMode::Eval(stats) => ops::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), stats)?,
        };
        Ok(self.record(OpKind::BatchNorm, vec![x, gamma, beta], out, Saved::Bn(cache)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.record(OpKind::Relu, vec![x], out, Saved::None)
    }

    pub fn avg_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let out = ops::avg_pool(self.value(x), kh, kw)?;
        Ok(self.record(OpKind::AvgPool, vec![x], out, Saved::Pool(kh, kw)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.record(OpKind::Linear, vec![x, w, b], out, Saved::None))
    }

    /// `[B, ...]` → `[B, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = t.batch_size();
        let out = t.clone().reshape(vec![b, t.len() / b])?;
        Ok(self.record(OpKind::Flatten, vec![x], out, Saved::None))
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat_channels(&tensors)?;
        let channels = tensors.iter().map(|t| t.shape()[1]).collect();
        Ok(self.record(OpKind::Concat, inputs.to_vec(), out, Saved::Channels(channels)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax(self.value(x))?;
        Ok(self.record(OpKind::Softmax, vec![x], out, Saved::None))
    }

    /// Mean cross entropy over the batch, as a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        let saved = Saved::CrossEntropy { probs, labels: labels.to_vec() };
        Ok(self.record(OpKind::CrossEntropy, vec![logits], Tensor::scalar(loss), saved))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(OpKind::Sum, vec![x], Tensor::scalar(s), Saved::None)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect());
        self.record(OpKind::Scale, vec![x], out, Saved::Factor(factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(config_err(format!("add of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect());
        Ok(self.record(OpKind::Add, vec![a, b], out, Saved::None))
    }

    /// Reverse-mode sweep from a scalar `loss`. Every trainable leaf ends up
    /// with a gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        let values = &self.values;
        let rg = &self.requires_grad;

        for rec in self.records.iter().rev() {
            let Some(dy) = grads[rec.output.0].take() else { continue };
            let wants = |v: Var| rg[v.0];
            let mut acc = |v: Var, g: Vec<f64>| match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            };
            let ins = &rec.inputs;
            match (&rec.kind, &rec.saved) {
                (OpKind::Conv2d, Saved::Conv(g)) => {
                    let (dx, dw) = ops::conv2d_backward(&values[ins[0].0], &values[ins[1].0], g, &dy, wants(ins[0]));
                    if let Some(dx) = dx {
                        acc(ins[0], dx);
                    }
                    if wants(ins[1]) {
                        acc(ins[1], dw);
                    }
                }
                (OpKind::BatchNorm, Saved::Bn(cache)) => {
                    let dims = values[ins[0].0].dims4()?;
                    let (dx, dg, db) = ops::batch_norm_backward(dims, &values[ins[1].0], cache, &dy);
                    for (v, g) in [(ins[0], dx), (ins[1], dg), (ins[2], db)] {
                        if wants(v) {
                            acc(v, g);
                        }
                    }
                }
                (OpKind::Relu, _) => acc(ins[0], ops::relu_backward(&values[ins[0].0], &dy)),
                (OpKind::AvgPool, Saved::Pool(kh, kw)) => {
                    let dims = values[ins[0].0].dims4()?;
                    acc(ins[0], ops::avg_pool_backward(dims, *kh, *kw, &dy));
                }
                (OpKind::Linear, _) => {
                    let (dx, dw, db) = ops::linear_backward(&values[ins[0].0], &values[ins[1].0], &dy);
                    for (v, g) in [(ins[0], dx), (ins[1], dw), (ins[2], db)] {
                        if wants(v) {
                            acc(v, g);
                        }
                    }
                }
                (OpKind::Flatten, _) => acc(ins[0], dy),
                (OpKind::Concat, Saved::Channels(channels)) => {
                    let out = &values[rec.output.0];
                    let grad_t = Tensor::from_parts(out.shape().to_vec(), dy);
                    for (v, part) in ins.iter().zip(grad_t.split_channels(channels)?) {
                        if wants(*v) {
                            acc(*v, part.into_data());
                        }
                    }
                }
                (OpKind::Softmax, _) => acc(ins[0], ops::softmax_backward(&values[rec.output.0], &dy)),
                (OpKind::CrossEntropy, Saved::CrossEntropy { probs, labels }) => {
                    acc(ins[0], ops::cross_entropy_backward(probs, labels, dy[0]));
                }
                (OpKind::Sum, _) => acc(ins[0], vec![dy[0]; values[ins[0].0].len()]),
                (OpKind::Scale, Saved::Factor(f)) => acc(ins[0], dy.iter().map(|g| g * f).collect()),
                (OpKind::Add, _) => {
                    if wants(ins[0]) {
                        acc(ins[0], dy.clone());
                    }
                    if wants(ins[1]) {
                        acc(ins[1], dy);
                    }
                }
                (kind, _) => unreachable!("record {kind:?} saved the wrong intermediates"),
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if !self.requires_grad[i] {
                continue;
            }
            match g {
                Some(g) => self.values[i].set_grad(g),
                None if self.is_leaf[i] => {
                    let n = self.values[i].len();
                    self.values[i].set_grad(vec![0.0; n]);
                }
                None => {}
            }
        }
        Ok(())
    }
}
