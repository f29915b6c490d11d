//! Forward and backward kernels.
//!
//! Every function here is pure: it reads its operands and returns fresh
//! tensors. The tape and the inference runtime both call into this module,
//! so a given input always takes the same arithmetic path.

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{config_err, input_err, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Spatial bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn output_extent(size: usize, kernel: usize, stride: usize, padding: usize, exact: bool) -> Result<usize> {
    if stride == 0 {
        return Err(config_err("convolution stride must be at least 1"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(config_err(format!(
            "input extent {size} with padding {padding} is smaller than kernel {kernel}"
        )));
    }
    let span = padded - kernel;
    if exact && span % stride != 0 {
        return Err(config_err(format!(
            "({size} + 2*{padding} - {kernel}) / {stride} is not an integer output size"
        )));
    }
    Ok(span / stride + 1)
}

impl ConvGeometry {
    /// Geometry of a stride/padding convolution. With `exact`, window
    /// placements that do not tile the padded input are rejected; otherwise
    /// trailing rows/columns that do not fit a full window are skipped.
    pub fn new(
        in_h: usize,
        in_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        exact: bool,
    ) -> Result<Self> {
        let out_h = output_extent(in_h, kernel_h, stride, padding, exact)?;
        let out_w = output_extent(in_w, kernel_w, stride, padding, exact)?;
        Ok(Self { stride, padding, kernel_h, kernel_w, in_h, in_w, out_h, out_w })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self, cin: usize) -> usize {
        cin * self.kernel_h * self.kernel_w
    }
}

/// Output positions `ox` whose input column `ox * stride + k - padding`
/// falls inside `0..extent`.
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride).min(out);
    // largest ox with ox * stride + k < extent + padding
    let hi = if extent + padding > k { ((extent + padding - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Writes the patches of one sample into columns `offset..offset + out_plane`
/// of a column matrix with `ld` columns.
fn im2col(x: &[f64], cin: usize, g: &ConvGeometry, col: &mut [f64], ld: usize, offset: usize) {
    let out_plane = g.out_h * g.out_w;
    if g.is_pointwise() {
        for c in 0..cin {
            col[c * ld + offset..c * ld + offset + out_plane].copy_from_slice(&x[c * out_plane..(c + 1) * out_plane]);
        }
        return;
    }
    for c in 0..cin {
        let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.in_h, ki, g.stride, g.padding);
            for kj in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.in_w, kj, g.stride, g.padding);
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * ld + offset..row * ld + offset + out_plane];
                dst[..y_lo * g.out_w].fill(0.0);
                dst[y_hi * g.out_w..].fill(0.0);
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.padding;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    if x_lo == x_hi {
                        continue;
                    }
                    let ix0 = x_lo * g.stride + kj - g.padding;
                    let src_line = &src[iy * g.in_w..(iy + 1) * g.in_w];
                    if g.stride == 1 {
                        line[x_lo..x_hi].copy_from_slice(&src_line[ix0..ix0 + x_hi - x_lo]);
                    } else {
                        for (v, s) in line[x_lo..x_hi].iter_mut().zip(src_line[ix0..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], cin: usize, g: &ConvGeometry, dx: &mut [f64], ld: usize, offset: usize) {
    let out_plane = g.out_h * g.out_w;
    if g.is_pointwise() {
        for c in 0..cin {
            let src = &col[c * ld + offset..c * ld + offset + out_plane];
            for (d, v) in dx[c * out_plane..(c + 1) * out_plane].iter_mut().zip(src) {
                *d += *v;
            }
        }
        return;
    }
    for c in 0..cin {
        let dst = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.in_h, ki, g.stride, g.padding);
            for kj in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.in_w, kj, g.stride, g.padding);
                if x_lo == x_hi {
                    continue;
                }
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * ld + offset..row * ld + offset + out_plane];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.padding;
                    let ix0 = x_lo * g.stride + kj - g.padding;
                    let line = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                    let dst_line = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                    for (d, v) in dst_line[ix0..].iter_mut().step_by(g.stride).zip(line) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Upper bound on column-matrix entries per GEMM; batches are processed in
/// chunks of samples that fit.
const COL_BUDGET: usize = 1 << 15;

fn chunk_len(rows: usize, out_plane: usize, batch: usize) -> usize {
    (COL_BUDGET / (rows * out_plane).max(1)).clamp(1, batch.max(1))
}

thread_local! {
    static SCRATCH: std::cell::RefCell<[Vec<f64>; 3]> = const { std::cell::RefCell::new([Vec::new(), Vec::new(), Vec::new()]) };
}

/// Runs `f` with three reusable buffers of at least the given lengths.
/// Their contents on entry are unspecified.
fn with_scratch<R>(lens: [usize; 3], f: impl FnOnce(&mut [f64], &mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        for (b, &n) in bufs.iter_mut().zip(&lens) {
            if b.len() < n {
                b.resize(n, 0.0);
            }
        }
        let [a, b, c] = &mut *bufs;
        f(&mut a[..lens[0]], &mut b[..lens[1]], &mut c[..lens[2]])
    })
}

fn check_conv(x: &Tensor, w: &Tensor, stride: usize, padding: usize, exact: bool) -> Result<ConvGeometry> {
    let [_, cin, h, wd] = x.dims4()?;
    let [_, wcin, kh, kw] = w.dims4().map_err(|_| config_err("conv weight must be [cout, cin, kh, kw]"))?;
    if wcin != cin {
        return Err(config_err(format!("conv weight expects {wcin} input channels, input has {cin}")));
    }
    ConvGeometry::new(h, wd, kh, kw, stride, padding, exact)
}

/// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, Kh, Kw]`.
///
/// The output extent `(H + 2p - Kh) / stride + 1` must be an integer.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = check_conv(x, w, stride, padding, true)?;
    conv2d_with(x, w, &g)
}

/// 3x3, stride 2, padding 1 convolution; output is `ceil(H/2) x ceil(W/2)`.
pub fn strided_downsample_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [_, _, kh, kw] = w.dims4()?;
    if (kh, kw) != (3, 3) {
        return Err(config_err(format!("downsampling conv needs a 3x3 kernel, got {kh}x{kw}")));
    }
    let g = check_conv(x, w, 2, 1, false)?;
    conv2d_with(x, w, &g)
}

/// Convolution with a precomputed geometry (which must match the operands).
pub fn conv2d_with(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let [b, cin, _, _] = x.dims4()?;
    let cout = w.shape()[0];
    let rows = g.col_rows(cin);
    let plane = g.out_h * g.out_w;
    let in_stride = cin * g.in_h * g.in_w;
    let chunk = chunk_len(rows, plane, b);
    let mut out = vec![0.0; b * cout * plane];
    with_scratch([rows * chunk * plane, cout * chunk * plane, 0], |col, y, _| {
        for n0 in (0..b).step_by(chunk) {
            let nb = chunk.min(b - n0);
            let ld = nb * plane;
            for j in 0..nb {
                let xs = &x.data()[(n0 + j) * in_stride..(n0 + j + 1) * in_stride];
                im2col(xs, cin, g, col, ld, j * plane);
            }
            gemm(cout, rows, ld, Mat::n(w.data()), Mat::n(&col[..rows * ld]), &mut y[..cout * ld], false);
            for j in 0..nb {
                for o in 0..cout {
                    let dst = ((n0 + j) * cout + o) * plane;
                    out[dst..dst + plane].copy_from_slice(&y[o * ld + j * plane..o * ld + (j + 1) * plane]);
                }
            }
        }
    });
    Tensor::from_parts(vec![b, cout, g.out_h, g.out_w], out).ensure_finite("conv2d")
}

/// Gradients of a convolution. `dx` is skipped when `need_input_grad` is
/// false (e.g. for the network input).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeometry,
    dy: &[f64],
    need_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let [b, cin, _, _] = x.shape()[..] else { unreachable!("conv input is 4-d") };
    let cout = w.shape()[0];
    let rows = g.col_rows(cin);
    let plane = g.out_h * g.out_w;
    let in_stride = cin * g.in_h * g.in_w;
    let chunk = chunk_len(rows, plane, b);
    let mut dw = vec![0.0; w.len()];
    let mut dx = need_input_grad.then(|| vec![0.0; x.len()]);
    let lens = [rows * chunk * plane, rows * chunk * plane, cout * chunk * plane];
    with_scratch(lens, |col, dcol, dyc| {
        for n0 in (0..b).step_by(chunk) {
            let nb = chunk.min(b - n0);
            let ld = nb * plane;
            for j in 0..nb {
                let xs = &x.data()[(n0 + j) * in_stride..(n0 + j + 1) * in_stride];
                im2col(xs, cin, g, col, ld, j * plane);
                for o in 0..cout {
                    let src = ((n0 + j) * cout + o) * plane;
                    dyc[o * ld + j * plane..o * ld + (j + 1) * plane].copy_from_slice(&dy[src..src + plane]);
                }
            }
            // dW += dY · colᵀ
            gemm(cout, ld, rows, Mat::n(&dyc[..cout * ld]), Mat::t(&col[..rows * ld]), &mut dw, true);
            if let Some(dx) = dx.as_mut() {
                gemm(rows, cout, ld, Mat::t(w.data()), Mat::n(&dyc[..cout * ld]), &mut dcol[..rows * ld], false);
                for j in 0..nb {
                    let dxs = &mut dx[(n0 + j) * in_stride..(n0 + j + 1) * in_stride];
                    col2im_add(dcol, cin, g, dxs, ld, j * plane);
                }
            }
        }
    });
    (dx, dw)
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, cache: &BnCache, momentum: f64) {
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * cache.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * cache.var[c];
        }
    }
}

/// Intermediates a batch-norm backward pass needs.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Whether statistics came from the batch (train) or running averages.
    pub batch_stats: bool,
}

fn check_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    if gamma.len() != dims[1] || beta.len() != dims[1] {
        return Err(config_err(format!(
            "batch norm over {} channels got gamma/beta of length {}/{}",
            dims[1],
            gamma.len(),
            beta.len()
        )));
    }
    Ok(dims)
}

fn bn_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: Vec<f64>, var: Vec<f64>, batch_stats: bool) -> (Tensor, BnCache) {
    let [b, c, h, w] = x.shape()[..] else { unreachable!() };
    let plane = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let (m, s, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                let xh = (x.data()[i] - m) * s;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
    let cache = BnCache { xhat, inv_std, mean, var, batch_stats };
    (Tensor::from_parts(x.shape().to_vec(), out), cache)
}

/// Batch norm using statistics of this batch (biased variance).
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnCache)> {
    let [b, c, h, w] = check_bn(x, gamma, beta)?;
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for n in 0..b {
            let base = (n * c + ch) * plane;
            s += x.data()[base..base + plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for n in 0..b {
            let base = (n * c + ch) * plane;
            v += x.data()[base..base + plane].iter().map(|xi| (xi - m) * (xi - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let (y, cache) = bn_apply(x, gamma, beta, mean, var, true);
    Ok((y.ensure_finite("batch_norm")?, cache))
}

/// Batch norm using stored running statistics.
pub fn batch_norm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<(Tensor, BnCache)> {
    let [_, c, _, _] = check_bn(x, gamma, beta)?;
    if stats.channels() != c {
        return Err(config_err(format!("running stats cover {} channels, input has {c}", stats.channels())));
    }
    let (y, cache) = bn_apply(x, gamma, beta, stats.mean.clone(), stats.var.clone(), false);
    Ok((y.ensure_finite("batch_norm")?, cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(dims: [usize; 4], gamma: &Tensor, cache: &BnCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += dy[i] * cache.xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let (sum_dy, sum_dy_xhat) = (dbeta[ch], dgamma[ch]);
                for i in base..base + plane {
                    dx[i] = scale * (dy[i] - sum_dy / count - cache.xhat[i] * sum_dy_xhat / count);
                }
            } else {
                for i in base..base + plane {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
}

/// Derivative taken as 0 at exactly zero.
pub fn relu_backward(x: &Tensor, dy: &[f64]) -> Vec<f64> {
    x.data().iter().zip(dy).map(|(xi, g)| if *xi > 0.0 { *g } else { 0.0 }).collect()
}

/// Non-overlapping `kh x kw` average pooling; trailing rows/columns that do
/// not fill a window are dropped.
pub fn avg_pool(x: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(config_err(format!("pool window {kh}x{kw} does not fit a {h}x{w} map")));
    }
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        s += src[(oy * kh + i) * w + ox * kw + j];
                    }
                }
                out[(bc * oh + oy) * ow + ox] = s * norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

pub fn avg_pool_backward(dims: [usize; 4], kh: usize, kw: usize, dy: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut dx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(bc * oh + oy) * ow + ox] * norm;
                for i in 0..kh {
                    for j in 0..kw {
                        dx[bc * h * w + (oy * kh + i) * w + ox * kw + j] = g;
                    }
                }
            }
        }
    }
    dx
}

/// `x: [B, in]`, `w: [out, in]`, `b: [out]` → `[B, out]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [batch, fin] = x.dims2()?;
    let [fout, win] = w.dims2()?;
    if win != fin || bias.len() != fout {
        return Err(config_err(format!(
            "linear layer [{fout}x{win}] + bias[{}] cannot take {fin} inputs",
            bias.len()
        )));
    }
    let mut out = vec![0.0; batch * fout];
    for r in 0..batch {
        let xr = &x.data()[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let wr = &w.data()[o * fin..(o + 1) * fin];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            out[r * fout + o] = dot + bias.data()[o];
        }
    }
    Tensor::from_parts(vec![batch, fout], out).ensure_finite("linear")
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [batch, fin] = x.shape()[..] else { unreachable!() };
    let fout = w.shape()[0];
    let mut dx = vec![0.0; batch * fin];
    let mut dw = vec![0.0; fout * fin];
    gemm(batch, fout, fin, Mat::n(dy), Mat::n(w.data()), &mut dx, false);
    gemm(fout, batch, fin, Mat::t(dy), Mat::n(x.data()), &mut dw, false);
    let mut db = vec![0.0; fout];
    for r in 0..batch {
        for o in 0..fout {
            db[o] += dy[r * fout + o];
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax of a `[B, C]` tensor (max-shifted).
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let [b, c] = x.dims2()?;
    let mut out = vec![0.0; b * c];
    for r in 0..b {
        let row = &x.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * c + j] = e;
            z += e;
        }
        for v in &mut out[r * c..(r + 1) * c] {
            *v /= z;
        }
    }
    Tensor::from_parts(vec![b, c], out).ensure_finite("softmax")
}

pub fn softmax_backward(y: &Tensor, dy: &[f64]) -> Vec<f64> {
    let [b, c] = y.shape()[..] else { unreachable!() };
    let mut dx = vec![0.0; b * c];
    for r in 0..b {
        let yr = &y.data()[r * c..(r + 1) * c];
        let gr = &dy[r * c..(r + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[r * c + j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

/// Mean over the batch of `-log softmax(logits)[label]`. Also returns the
/// softmax probabilities for the backward pass.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, c] = logits.dims2()?;
    if labels.len() != b {
        return Err(input_err(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(input_err(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(crate::Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

/// Gradient of the mean cross entropy w.r.t. the logits, times `upstream`.
pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Vec<f64> {
    let [b, c] = probs.shape()[..] else { unreachable!() };
    let scale = upstream / b as f64;
    let mut dx: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
    for (r, &y) in labels.iter().enumerate() {
        dx[r * c + y] -= scale;
    }
    dx
}

/// Concatenates `[B, Ci, H, W]` tensors along channels, in order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| config_err("concat of zero tensors"))?;
    let [b, _, h, w] = first.dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let [tb, tc, th, tw] = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(config_err(format!(
                "concat mismatch: [{b}, _, {h}, {w}] vs {:?}",
                t.shape()
            )));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total_c * plane);
    for n in 0..b {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![b, total_c, h, w], data))
}
