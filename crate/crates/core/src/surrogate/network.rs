//! Small sequential CNN with hand-written backpropagation.
//!
//! Parameters live in one flat vector; each layer records the offsets of
//! its weights and biases, which keeps the optimizer, serialization and
//! gradient checking independent of the layer mix.
//!
//! Inputs are handed over channel-major (`c, row, col`); internally every
//! spatial activation is position-major (`row, col, c`) so that a whole
//! batch of convolutions becomes a single matrix product over im2col rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    /// Stride-1 convolution with zero "same" padding; odd square kernel.
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        h: usize,
        w: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu {
        len: usize,
    },
    Pool {
        kind: PoolKind,
        c: usize,
        h: usize,
        w: usize,
        ph: usize,
        pw: usize,
    },
    Dense {
        inp: usize,
        out: usize,
        w_off: usize,
        b_off: usize,
    },
    Dropout {
        len: usize,
        rate: f64,
    },
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match *self {
            Layer::Conv { in_c, h, w, .. } => in_c * h * w,
            Layer::Relu { len } | Layer::Dropout { len, .. } => len,
            Layer::Pool { c, h, w, .. } => c * h * w,
            Layer::Dense { inp, .. } => inp,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            Layer::Conv { out_c, h, w, .. } => out_c * h * w,
            Layer::Relu { len } | Layer::Dropout { len, .. } => len,
            Layer::Pool {
                c, h, w, ph, pw, ..
            } => c * (h / ph) * (w / pw),
            Layer::Dense { out, .. } => out,
        }
    }

    /// `(fan_in, weight count, bias count)` for parameterized layers.
    fn param_shape(&self) -> Option<(usize, usize, usize, usize, usize)> {
        match *self {
            Layer::Conv {
                in_c,
                out_c,
                k,
                w_off,
                b_off,
                ..
            } => Some((in_c * k * k, out_c * in_c * k * k, out_c, w_off, b_off)),
            Layer::Dense {
                inp,
                out,
                w_off,
                b_off,
            } => Some((inp, out * inp, out, w_off, b_off)),
            _ => None,
        }
    }

    /// Compact description used in the model file: kind tag plus six dims.
    pub fn descriptor(&self) -> (u8, [u64; 6]) {
        let u = |v: usize| v as u64;
        match *self {
            Layer::Conv {
                in_c,
                out_c,
                k,
                h,
                w,
                ..
            } => (1, [u(in_c), u(out_c), u(k), u(h), u(w), 0]),
            Layer::Relu { len } => (2, [u(len), 0, 0, 0, 0, 0]),
            Layer::Pool {
                kind,
                c,
                h,
                w,
                ph,
                pw,
            } => (
                if kind == PoolKind::Max { 3 } else { 4 },
                [u(c), u(h), u(w), u(ph), u(pw), 0],
            ),
            Layer::Dense { inp, out, .. } => (5, [u(inp), u(out), 0, 0, 0, 0]),
            Layer::Dropout { len, rate } => (6, [u(len), rate.to_bits(), 0, 0, 0, 0]),
        }
    }
}

/// Incremental builder that tracks the running activation shape.
pub struct NetworkBuilder {
    layers: Vec<Layer>,
    shape: (usize, usize, usize),
    flat: Option<usize>,
    n_params: usize,
    input_shape: (usize, usize, usize),
}

impl NetworkBuilder {
    pub fn new(channels: usize, h: usize, w: usize) -> Self {
        Self {
            layers: Vec::new(),
            shape: (channels, h, w),
            flat: None,
            n_params: 0,
            input_shape: (channels, h, w),
        }
    }

    fn len(&self) -> usize {
        self.flat
            .unwrap_or(self.shape.0 * self.shape.1 * self.shape.2)
    }

    pub fn conv(mut self, out_c: usize, k: usize) -> Self {
        assert!(self.flat.is_none(), "conv after dense");
        assert!(k % 2 == 1, "kernel size must be odd");
        let (in_c, h, w) = self.shape;
        let w_off = self.n_params;
        let b_off = w_off + out_c * in_c * k * k;
        self.n_params = b_off + out_c;
        self.layers.push(Layer::Conv {
            in_c,
            out_c,
            k,
            h,
            w,
            w_off,
            b_off,
        });
        self.shape = (out_c, h, w);
        self
    }

    pub fn relu(mut self) -> Self {
        let len = self.len();
        self.layers.push(Layer::Relu { len });
        self
    }

    /// Pools by `size` along each axis that is at least `size` long; axes
    /// that are too short are left alone, and a no-op pool is skipped.
    pub fn pool(mut self, kind: PoolKind, size: usize) -> Self {
        let (c, h, w) = self.shape;
        let ph = if h >= size { size } else { 1 };
        let pw = if w >= size { size } else { 1 };
        if ph * pw > 1 {
            self.layers.push(Layer::Pool {
                kind,
                c,
                h,
                w,
                ph,
                pw,
            });
            self.shape = (c, h / ph, w / pw);
        }
        self
    }

    pub fn dense(mut self, out: usize) -> Self {
        let inp = self.len();
        let w_off = self.n_params;
        let b_off = w_off + out * inp;
        self.n_params = b_off + out;
        self.layers.push(Layer::Dense {
            inp,
            out,
            w_off,
            b_off,
        });
        self.flat = Some(out);
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        if rate > 0.0 {
            let len = self.len();
            self.layers.push(Layer::Dropout { len, rate });
        }
        self
    }

    pub fn build(self) -> Network {
        Network {
            layers: self.layers,
            n_params: self.n_params,
            input_len: self.input_shape.0 * self.input_shape.1 * self.input_shape.2,
            input_shape: self.input_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub n_params: usize,
    pub input_len: usize,
    /// `(channels, rows, cols)` of the input tensor.
    pub input_shape: (usize, usize, usize),
}

/// Scratch buffers for up to `capacity` samples; reuse across calls.
pub struct Workspace {
    capacity: usize,
    input: Vec<f64>,
    /// `acts[0]` is the position-major input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// im2col rows for convolutions, kept for the backward pass.
    cols: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    masks: Vec<Vec<f64>>,
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
    dcols: Vec<f64>,
}

impl Workspace {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Channel-major input of every sample in the batch, back to back.
    pub fn input_mut(&mut self) -> &mut [f64] {
        &mut self.input
    }

    /// Channel-major input of sample `i`.
    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.input.len() / self.capacity;
        &mut self.input[i * n..(i + 1) * n]
    }
}

fn conv_cols(layer: &Layer) -> usize {
    match *layer {
        Layer::Conv { in_c, k, h, w, .. } => h * w * in_c * k * k,
        _ => 0,
    }
}

impl Network {
    pub fn output_len(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_len, |l| l.output_len())
    }

    /// Single-sample workspace.
    pub fn workspace(&self) -> Workspace {
        self.batch_workspace(1)
    }

    pub fn batch_workspace(&self, capacity: usize) -> Workspace {
        assert!(capacity >= 1, "workspace capacity must be positive");
        let n = capacity;
        let mut acts = vec![vec![0.0; n * self.input_len]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; n * l.output_len()]));
        let per_layer =
            |f: &dyn Fn(&Layer) -> usize| -> Vec<usize> { self.layers.iter().map(f).collect() };
        let cols = per_layer(&conv_cols)
            .into_iter()
            .map(|c| vec![0.0; n * c])
            .collect();
        let argmax = per_layer(&|l| {
            if matches!(l, Layer::Pool { .. }) {
                l.output_len()
            } else {
                0
            }
        })
        .into_iter()
        .map(|c| vec![0; n * c])
        .collect();
        let masks = per_layer(&|l| {
            if matches!(l, Layer::Dropout { .. }) {
                l.output_len()
            } else {
                0
            }
        })
        .into_iter()
        .map(|c| vec![0.0; n * c])
        .collect();
        let widest = acts.iter().map(Vec::len).max().unwrap_or(0);
        let widest_cols = self.layers.iter().map(conv_cols).max().unwrap_or(0);
        Workspace {
            capacity,
            input: vec![0.0; n * self.input_len],
            acts,
            cols,
            argmax,
            masks,
            grad_a: vec![0.0; widest],
            grad_b: vec![0.0; widest],
            dcols: vec![0.0; n * widest_cols],
        }
    }

    /// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        for l in &self.layers {
            if let Some((fan_in, nw, _, w_off, _)) = l.param_shape() {
                let bound = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[w_off..w_off + nw] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
        }
        params
    }

    /// Forward pass of a single sample held in `ws.input_mut()`.
    pub fn forward<R: Rng>(&self, params: &[f64], ws: &mut Workspace, rng: Option<&mut R>) -> f64 {
        self.forward_batch(params, ws, 1, rng)[0]
    }

    /// Forward pass of the first `n` samples of the workspace; returns their
    /// outputs back to back. Dropout is active only when `rng` is given.
    pub fn forward_batch<'w, R: Rng>(
        &self,
        params: &[f64],
        ws: &'w mut Workspace,
        n: usize,
        mut rng: Option<&mut R>,
    ) -> &'w [f64] {
        assert!(
            n >= 1 && n <= ws.capacity,
            "batch of {n} exceeds workspace capacity {}",
            ws.capacity
        );
        let (c, h, w) = self.input_shape;
        let hw = h * w;
        for s in 0..n {
            let src = &ws.input[s * self.input_len..(s + 1) * self.input_len];
            let dst = &mut ws.acts[0][s * self.input_len..(s + 1) * self.input_len];
            for ch in 0..c {
                for p in 0..hw {
                    dst[p * c + ch] = src[ch * hw + p];
                }
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(i + 1);
            let x = &before[i][..n * layer.input_len()];
            let y = &mut after[0][..n * layer.output_len()];
            match *layer {
                Layer::Conv {
                    in_c,
                    out_c,
                    k,
                    h,
                    w,
                    w_off,
                    b_off,
                } => {
                    let ck = in_c * k * k;
                    let cols = &mut ws.cols[i][..n * h * w * ck];
                    im2col(x, cols, n, in_c, k, h, w);
                    gemm(
                        n * h * w,
                        ck,
                        out_c,
                        cols,
                        (ck, 1),
                        &params[w_off..b_off],
                        (1, ck),
                        y,
                        out_c,
                        0.0,
                    );
                    add_bias(y, &params[b_off..b_off + out_c]);
                }
                Layer::Relu { .. } => {
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = v.max(0.0);
                    }
                }
                Layer::Pool {
                    kind,
                    c,
                    h,
                    w,
                    ph,
                    pw,
                } => pool_forward(kind, x, y, &mut ws.argmax[i], n, c, h, w, ph, pw),
                Layer::Dense {
                    inp,
                    out,
                    w_off,
                    b_off,
                } => {
                    gemm(
                        n,
                        inp,
                        out,
                        x,
                        (inp, 1),
                        &params[w_off..b_off],
                        (1, inp),
                        y,
                        out,
                        0.0,
                    );
                    add_bias(y, &params[b_off..b_off + out]);
                }
                Layer::Dropout { rate, .. } => {
                    let mask = &mut ws.masks[i][..y.len()];
                    match rng.as_deref_mut() {
                        Some(rng) => {
                            let keep = 1.0 / (1.0 - rate);
                            for ((o, &v), m) in y.iter_mut().zip(x).zip(mask.iter_mut()) {
                                *m = if rng.gen::<f64>() < rate { 0.0 } else { keep };
                                *o = v * *m;
                            }
                        }
                        None => {
                            y.copy_from_slice(x);
                            mask.iter_mut().for_each(|m| *m = 1.0);
                        }
                    }
                }
            }
        }
        let out = self.output_len();
        &ws.acts.last().expect("input buffer")[..n * out]
    }

    /// Single-sample backward pass; see [`Network::backward_batch`].
    pub fn backward(&self, params: &[f64], ws: &mut Workspace, d_out: f64, grad: &mut [f64]) {
        self.backward_batch(params, ws, &[d_out], grad);
    }

    /// Accumulates `sum_s d_out[s] * d(output_s)/d(params)` into `grad`, using
    /// the activations left in `ws` by the preceding forward pass over the
    /// same `d_out.len()` samples.
    pub fn backward_batch(
        &self,
        params: &[f64],
        ws: &mut Workspace,
        d_out: &[f64],
        grad: &mut [f64],
    ) {
        let n = d_out.len() / self.output_len().max(1);
        assert!(n >= 1 && n <= ws.capacity);
        let Workspace {
            acts,
            cols,
            argmax,
            masks,
            grad_a,
            grad_b,
            dcols,
            ..
        } = ws;
        let (mut gy, mut gx) = (grad_a, grad_b);
        gy[..d_out.len()].copy_from_slice(d_out);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts[i][..n * layer.input_len()];
            let dy = &gy[..n * layer.output_len()];
            let dx = &mut gx[..n * layer.input_len()];
            match *layer {
                Layer::Conv {
                    in_c,
                    out_c,
                    k,
                    h,
                    w,
                    w_off,
                    b_off,
                } => {
                    let ck = in_c * k * k;
                    let rows = n * h * w;
                    let c = &cols[i][..rows * ck];
                    col_sums(dy, out_c, &mut grad[b_off..b_off + out_c]);
                    // dW (out_c x ck) += dYᵀ · cols
                    gemm(
                        out_c,
                        rows,
                        ck,
                        dy,
                        (1, out_c),
                        c,
                        (ck, 1),
                        &mut grad[w_off..b_off],
                        ck,
                        1.0,
                    );
                    if i > 0 {
                        let dc = &mut dcols[..rows * ck];
                        gemm(
                            rows,
                            out_c,
                            ck,
                            dy,
                            (out_c, 1),
                            &params[w_off..b_off],
                            (ck, 1),
                            dc,
                            ck,
                            0.0,
                        );
                        col2im(dc, dx, n, in_c, k, h, w);
                    }
                }
                Layer::Relu { .. } => {
                    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(x) {
                        *d = if v > 0.0 { g } else { 0.0 };
                    }
                }
                Layer::Pool {
                    kind,
                    c,
                    h,
                    w,
                    ph,
                    pw,
                } => pool_backward(kind, dy, dx, &argmax[i], n, c, h, w, ph, pw),
                Layer::Dense {
                    inp,
                    out,
                    w_off,
                    b_off,
                } => {
                    col_sums(dy, out, &mut grad[b_off..b_off + out]);
                    gemm(
                        out,
                        n,
                        inp,
                        dy,
                        (1, out),
                        x,
                        (inp, 1),
                        &mut grad[w_off..b_off],
                        inp,
                        1.0,
                    );
                    if i > 0 {
                        gemm(
                            n,
                            out,
                            inp,
                            dy,
                            (out, 1),
                            &params[w_off..b_off],
                            (inp, 1),
                            dx,
                            inp,
                            0.0,
                        );
                    }
                }
                Layer::Dropout { .. } => {
                    for ((d, &g), &m) in dx.iter_mut().zip(dy).zip(&masks[i][..dy.len()]) {
                        *d = g * m;
                    }
                }
            }
            std::mem::swap(&mut gy, &mut gx);
        }
    }
}

/// `c (m x n, row-major) = beta * c + a (m x k) · b (k x n)`, with `a` and `b`
/// given as `(row stride, column stride)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span =
        |rows: usize, cols: usize, s: (usize, usize)| (rows - 1) * s.0 + (cols - 1) * s.1 + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb));
    }
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn add_bias(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sums(dy: &[f64], width: usize, acc: &mut [f64]) {
    for row in dy.chunks_exact(width) {
        for (a, g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
}

/// One row per output position, columns ordered `(c, ki, kj)` to match the
/// weight layout; out-of-bounds taps are zero.
fn im2col(x: &[f64], cols: &mut [f64], n: usize, in_c: usize, k: usize, h: usize, w: usize) {
    let pad = (k / 2) as isize;
    let ck = in_c * k * k;
    let per = h * w * in_c;
    for s in 0..n {
        let xs = &x[s * per..(s + 1) * per];
        for i in 0..h {
            for j in 0..w {
                let row = &mut cols[((s * h + i) * w + j) * ck..][..ck];
                for ki in 0..k {
                    let si = i as isize + ki as isize - pad;
                    for kj in 0..k {
                        let sj = j as isize + kj as isize - pad;
                        let inside = si >= 0 && sj >= 0 && si < h as isize && sj < w as isize;
                        let base = if inside {
                            (si as usize * w + sj as usize) * in_c
                        } else {
                            0
                        };
                        for c in 0..in_c {
                            row[(c * k + ki) * k + kj] = if inside { xs[base + c] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(dcols: &[f64], dx: &mut [f64], n: usize, in_c: usize, k: usize, h: usize, w: usize) {
    let pad = (k / 2) as isize;
    let ck = in_c * k * k;
    let per = h * w * in_c;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for s in 0..n {
        let dxs = &mut dx[s * per..(s + 1) * per];
        for i in 0..h {
            for j in 0..w {
                let row = &dcols[((s * h + i) * w + j) * ck..][..ck];
                for ki in 0..k {
                    let si = i as isize + ki as isize - pad;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let sj = j as isize + kj as isize - pad;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let base = (si as usize * w + sj as usize) * in_c;
                        for c in 0..in_c {
                            dxs[base + c] += row[(c * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pool_forward(
    kind: PoolKind,
    x: &[f64],
    y: &mut [f64],
    arg: &mut [usize],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) {
    let (oh, ow) = (h / ph, w / pw);
    let inv = 1.0 / (ph * pw) as f64;
    for s in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let out = ((s * oh + i) * ow + j) * c + ch;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    let mut sum = 0.0;
                    for a in 0..ph {
                        for b in 0..pw {
                            let at = ((s * h + i * ph + a) * w + j * pw + b) * c + ch;
                            sum += x[at];
                            if x[at] > best {
                                best = x[at];
                                best_at = at;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            y[out] = best;
                            arg[out] = best_at;
                        }
                        PoolKind::Average => y[out] = sum * inv,
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pool_backward(
    kind: PoolKind,
    dy: &[f64],
    dx: &mut [f64],
    arg: &[usize],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) {
    let (oh, ow) = (h / ph, w / pw);
    dx.iter_mut().for_each(|v| *v = 0.0);
    let inv = 1.0 / (ph * pw) as f64;
    for s in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let out = ((s * oh + i) * ow + j) * c + ch;
                    match kind {
                        PoolKind::Max => dx[arg[out]] += dy[out],
                        PoolKind::Average => {
                            for a in 0..ph {
                                for b in 0..pw {
                                    dx[((s * h + i * ph + a) * w + j * pw + b) * c + ch] +=
                                        dy[out] * inv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    /// Reference convolution by explicit index arithmetic.
    #[allow(clippy::too_many_arguments)]
    fn naive_conv(
        x: &[f64],
        wts: &[f64],
        bias: &[f64],
        in_c: usize,
        out_c: usize,
        k: usize,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; out_c * h * w];
        for o in 0..out_c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = bias[o];
                    for c in 0..in_c {
                        for ki in 0..k as isize {
                            for kj in 0..k as isize {
                                let (si, sj) = (i + ki - pad, j + kj - pad);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                let wv = wts[((o * in_c + c) * k + ki as usize) * k + kj as usize];
                                acc += wv * x[(c * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                    y[(o * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (in_c, out_c, k, h, w) in [
            (1, 1, 1, 1, 1),
            (2, 3, 3, 4, 5),
            (3, 2, 5, 3, 3),
            (5, 4, 3, 8, 8),
        ] {
            let net = NetworkBuilder::new(in_c, h, w).conv(out_c, k).build();
            let params: Vec<f64> = (0..net.n_params)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let x: Vec<f64> = (0..in_c * h * w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let nw = out_c * in_c * k * k;
            let want = naive_conv(&x, &params[..nw], &params[nw..], in_c, out_c, k, h, w);
            let mut ws = net.workspace();
            ws.input_mut().copy_from_slice(&x);
            net.forward::<NoRng>(&params, &mut ws, None);
            let got = ws.acts.last().unwrap();
            for o in 0..out_c {
                for p in 0..h * w {
                    assert!((got[p * out_c + o] - want[o * h * w + p]).abs() < 1e-12);
                }
            }
        }
    }

    fn mixed_net() -> Network {
        NetworkBuilder::new(3, 4, 4)
            .conv(4, 3)
            .relu()
            .pool(PoolKind::Max, 2)
            .conv(2, 1)
            .relu()
            .pool(PoolKind::Average, 2)
            .dense(5)
            .relu()
            .dropout(0.5)
            .dense(1)
            .build()
    }

    #[test]
    fn batch_matches_single_samples() {
        let net = mixed_net();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = net.init_params(&mut rng);
        let n = 7;
        let inputs: Vec<f64> = (0..n * net.input_len)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let d_out: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut batch = net.batch_workspace(n + 3);
        batch.input_mut()[..inputs.len()].copy_from_slice(&inputs);
        let outs = net
            .forward_batch::<NoRng>(&params, &mut batch, n, None)
            .to_vec();
        let mut g_batch = vec![0.0; net.n_params];
        net.backward_batch(&params, &mut batch, &d_out, &mut g_batch);

        let mut single = net.workspace();
        let mut g_single = vec![0.0; net.n_params];
        for s in 0..n {
            single
                .input_mut()
                .copy_from_slice(&inputs[s * net.input_len..(s + 1) * net.input_len]);
            let y = net.forward::<NoRng>(&params, &mut single, None);
            assert!((y - outs[s]).abs() < 1e-12);
            net.backward(&params, &mut single, d_out[s], &mut g_single);
        }
        for (a, b) in g_batch.iter().zip(&g_single) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn pooling_shapes() {
        let net = NetworkBuilder::new(5, 1, 1)
            .conv(2, 3)
            .pool(PoolKind::Max, 2)
            .build();
        assert_eq!(net.layers.len(), 1);
        let net = NetworkBuilder::new(5, 4, 1)
            .conv(2, 3)
            .pool(PoolKind::Max, 2)
            .build();
        assert_eq!(net.output_len(), 2 * 2);
        let net = NetworkBuilder::new(1, 8, 8)
            .pool(PoolKind::Max, 2)
            .pool(PoolKind::Max, 2)
            .pool(PoolKind::Max, 2)
            .pool(PoolKind::Max, 2)
            .build();
        assert_eq!(net.layers.len(), 3);
        assert_eq!(net.output_len(), 1);
    }

    #[test]
    fn max_and_average_pool_values() {
        for (kind, want) in [(PoolKind::Max, [4.0, 8.0]), (PoolKind::Average, [2.5, 6.5])] {
            let net = NetworkBuilder::new(1, 2, 4).pool(kind, 2).build();
            let mut ws = net.workspace();
            ws.input_mut()
                .copy_from_slice(&[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
            net.forward::<NoRng>(&[], &mut ws, None);
            assert_eq!(ws.acts.last().unwrap(), &want);
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = NetworkBuilder::new(5, 4, 4)
            .conv(4, 3)
            .relu()
            .pool(PoolKind::Max, 2)
            .dense(8)
            .relu()
            .dense(1)
            .build();
        let params = vec![0.0; net.n_params];
        let mut ws = net.workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in ws.input_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        assert_eq!(net.forward::<NoRng>(&params, &mut ws, None), 0.0);
    }

    #[test]
    fn dropout_scaling_and_inference_identity() {
        let net = NetworkBuilder::new(1, 1, 1)
            .dense(200)
            .dropout(0.25)
            .build();
        let mut params = vec![0.0; net.n_params];
        params[200..].iter_mut().for_each(|b| *b = 1.0);
        let mut ws = net.workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.forward(&params, &mut ws, Some(&mut rng));
        let out = ws.acts.last().unwrap();
        assert!(out
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let dropped = out.iter().filter(|&&v| v == 0.0).count();
        assert!((20..80).contains(&dropped), "{dropped}");
        net.forward::<NoRng>(&params, &mut ws, None);
        assert!(ws.acts.last().unwrap().iter().all(|&v| v == 1.0));
    }
}
