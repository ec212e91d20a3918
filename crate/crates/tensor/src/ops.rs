//! Forward and backward kernels on plain tensors.
//!
//! The forward functions are the reference semantics of each tape op; the
//! `*_backward` functions compute vector-Jacobian products given the
//! upstream gradient.

use crate::{Real, Result, Tensor, TensorError};

fn mismatch(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.to_vec(),
    }
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    m: usize,
    n: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Self> {
        let (cin, m, n) = input.chw("conv2d_same")?;
        let &[cout, kcin, kh, kw] = kernels.shape() else {
            return Err(mismatch("conv2d_same", "kernels [Cout, Cin, kh, kw]", kernels.shape()));
        };
        if kcin != cin {
            return Err(mismatch(
                "conv2d_same",
                format!("kernels with {cin} input channels"),
                kernels.shape(),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::EvenKernel {
                op: "conv2d_same",
                kh,
                kw,
            });
        }
        Ok(Self {
            cin,
            cout,
            m,
            n,
            kh,
            kw,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cells(&self) -> usize {
        self.m * self.n
    }

    /// Row `(c, ki, kj)` of the patch matrix holds, for every output cell
    /// `(i', j')`, the input value at `(i' - ki + kh/2, j' - kj + kw/2)`, or 0
    /// when that falls outside the grid.
    fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let (m, n) = (self.m, self.n);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut col = vec![T::zero(); self.patch_len() * self.cells()];
        for c in 0..self.cin {
            let plane = &input[c * m * n..(c + 1) * m * n];
            for ki in 0..self.kh {
                let di = ph - ki as isize;
                for kj in 0..self.kw {
                    let dj = pw - kj as isize;
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * m * n..(row + 1) * m * n];
                    let (j_lo, j_hi) = valid_range(n, dj);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in 0..m {
                        let si = i as isize + di;
                        if si < 0 || si >= m as isize {
                            continue;
                        }
                        let src_row = si as usize * n;
                        let s0 = (j_lo as isize + dj) as usize;
                        dst[i * n + j_lo..i * n + j_hi]
                            .copy_from_slice(&plane[src_row + s0..src_row + s0 + (j_hi - j_lo)]);
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T], grad_in: &mut [T]) {
        let (m, n) = (self.m, self.n);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for c in 0..self.cin {
            let plane = &mut grad_in[c * m * n..(c + 1) * m * n];
            for ki in 0..self.kh {
                let di = ph - ki as isize;
                for kj in 0..self.kw {
                    let dj = pw - kj as isize;
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * m * n..(row + 1) * m * n];
                    let (j_lo, j_hi) = valid_range(n, dj);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in 0..m {
                        let si = i as isize + di;
                        if si < 0 || si >= m as isize {
                            continue;
                        }
                        let dst_row = si as usize * n;
                        let s0 = (j_lo as isize + dj) as usize;
                        for (d, s) in plane[dst_row + s0..dst_row + s0 + (j_hi - j_lo)]
                            .iter_mut()
                            .zip(&src[i * n + j_lo..i * n + j_hi])
                        {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `j` with `0 <= j + shift < n`.
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).clamp(0, n as isize) as usize;
    (lo.min(n), hi)
}

/// Zero-padded "same" convolution.
///
/// `out[c', i', j'] = bias[c'] + sum_{c,i,j} k[c', c, i, j] * x[c, i' - i + kh/2, j' - j + kw/2]`
/// with out-of-grid input read as zero.
pub fn conv2d_same<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernels)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(mismatch("conv2d_same", format!("bias [{}]", g.cout), b.shape()));
        }
    }
    let cells = g.cells();
    let mut out = vec![T::zero(); g.cout * cells];
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(cells.max(1)).enumerate().take(g.cout) {
            chunk.fill(b.data()[c]);
        }
    }
    if cells > 0 && g.patch_len() > 0 {
        let col = g.im2col(input.data());
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            g.patch_len(),
            cells,
            kernels.data(),
            false,
            &col,
            false,
            &mut out,
            beta,
        );
    }
    Tensor::new(&[g.cout, g.m, g.n], out)
}

/// Gradients of [`conv2d_same`] with respect to input, kernels and bias.
pub fn conv2d_same_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, kernels)?;
    let cells = g.cells();
    let k = g.patch_len();
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_k = Tensor::zeros(kernels.shape());
    let grad_b = Tensor::from_fn(&[g.cout], |c| {
        grad_out.data()[c * cells..(c + 1) * cells].iter().copied().sum()
    });
    if cells == 0 || k == 0 {
        return Ok((grad_in, grad_k, grad_b));
    }
    let col = g.im2col(input.data());
    // dK = G . col^T
    T::gemm(
        g.cout,
        cells,
        k,
        grad_out.data(),
        false,
        &col,
        true,
        grad_k.data_mut(),
        T::zero(),
    );
    // dcol = K^T . G
    let mut dcol = vec![T::zero(); k * cells];
    T::gemm(
        k,
        g.cout,
        cells,
        kernels.data(),
        true,
        grad_out.data(),
        false,
        &mut dcol,
        T::zero(),
    );
    g.col2im(&dcol, grad_in.data_mut());
    Ok((grad_in, grad_k, grad_b))
}

/// Maximum over the channel axis. Ties resolve to the lowest channel index.
pub fn channel_max<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, m, n) = input.chw("channel_max")?;
    if c == 0 {
        return Err(TensorError::EmptyChannels);
    }
    let cells = m * n;
    let data = input.data();
    let mut values = data[..cells].to_vec();
    let mut argmax = vec![0u32; cells];
    for ch in 1..c {
        let plane = &data[ch * cells..(ch + 1) * cells];
        for ((v, a), &x) in values.iter_mut().zip(argmax.iter_mut()).zip(plane) {
            if x > *v {
                *v = x;
                *a = ch as u32;
            }
        }
    }
    Ok((Tensor::new(&[m, n], values)?, argmax))
}

pub fn channel_max_backward<T: Real>(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let cells = argmax.len();
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (cell, (&a, &go)) in argmax.iter().zip(grad_out.data()).enumerate() {
        g[a as usize * cells + cell] += go;
    }
    grad
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns pool over a
/// partial window. Returns the pooled tensor and, per output cell, the flat
/// input index of the selected element (lowest index on ties).
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, m, n) = input.chw("maxpool2d")?;
    if m == 0 || n == 0 {
        return Err(TensorError::EmptySpatial { op: "maxpool2d" });
    }
    let (om, on) = (m.div_ceil(2), n.div_ceil(2));
    let data = input.data();
    let mut out = Vec::with_capacity(c * om * on);
    let mut idx = Vec::with_capacity(c * om * on);
    for ch in 0..c {
        for oi in 0..om {
            for oj in 0..on {
                let mut best = ch * m * n + (2 * oi) * n + 2 * oj;
                for i in 2 * oi..(2 * oi + 2).min(m) {
                    for j in 2 * oj..(2 * oj + 2).min(n) {
                        let f = ch * m * n + i * n + j;
                        if data[f] > data[best] {
                            best = f;
                        }
                    }
                }
                out.push(data[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[c, om, on], out)?, idx))
}

pub fn maxpool2d_backward<T: Real>(input_shape: &[usize], argidx: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&f, &go) in argidx.iter().zip(grad_out.data()) {
        g[f as usize] += go;
    }
    grad
}

/// `W . x + b` where `x` is read as a flat vector of length `d`.
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let &[k, d] = w.shape() else {
        return Err(mismatch("dense", "weights [k, d]", w.shape()));
    };
    if x.numel() != d {
        return Err(mismatch("dense", format!("input with {d} elements"), x.shape()));
    }
    if b.shape() != [k] {
        return Err(mismatch("dense", format!("bias [{k}]"), b.shape()));
    }
    let mut out = b.data().to_vec();
    if k * d > 0 {
        T::gemm(k, d, 1, w.data(), false, x.data(), false, &mut out, T::one());
    }
    Tensor::new(&[k], out)
}

/// Returns `(dx, dW, db)`.
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (k, d) = (w.shape()[0], w.shape()[1]);
    let go = grad_out.data();
    let mut dw = Tensor::zeros(w.shape());
    for (row, &g) in dw.data_mut().chunks_mut(d.max(1)).zip(go) {
        for (r, &xv) in row.iter_mut().zip(x.data()) {
            *r = g * xv;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    if k * d > 0 {
        T::gemm(d, k, 1, w.data(), true, go, false, dx.data_mut(), T::zero());
    }
    (dx, dw, grad_out.clone())
}

/// Numerically stabilised softmax with the negative log-likelihood of
/// `label`. Returns `(loss, probs)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let k = logits.numel();
    if k < 2 {
        return Err(mismatch("softmax_cross_entropy", "at least 2 logits", logits.shape()));
    }
    if label >= k {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax(logits);
    let max = logits.data().iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let log_z = logits.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = -(logits.data()[label] - max - log_z);
    Ok((loss, probs))
}

pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let max = logits.data().iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let exps: Vec<T> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    Tensor::from_fn(logits.shape(), |i| exps[i] / z)
}

/// Stack `b` after `a` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, m, n) = a.chw("concat_channels")?;
    let (cb, mb, nb) = b.chw("concat_channels")?;
    if (m, n) != (mb, nb) {
        return Err(mismatch("concat_channels", format!("[*, {m}, {n}]"), b.shape()));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, m, n], data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Real>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, m, n) = x.chw("split_channels")?;
    if ca > c {
        return Err(mismatch("split_channels", format!("at least {ca} channels"), x.shape()));
    }
    let cut = ca * m * n;
    Ok((
        Tensor::new(&[ca, m, n], x.data()[..cut].to_vec())?,
        Tensor::new(&[c - ca, m, n], x.data()[cut..].to_vec())?,
    ))
}

/// Nearest-neighbour upsampling by 2: every cell becomes a 2x2 block.
pub fn upsample_nearest<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, m, n) = input.chw("upsample_nearest")?;
    let (om, on) = (2 * m, 2 * n);
    let src = input.data();
    let mut out = Vec::with_capacity(c * om * on);
    for ch in 0..c {
        for oi in 0..om {
            let row = &src[(ch * m + oi / 2) * n..(ch * m + oi / 2 + 1) * n];
            for oj in 0..on {
                out.push(row[oj / 2]);
            }
        }
    }
    Tensor::new(&[c, om, on], out)
}

pub fn upsample_nearest_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (input_shape[1], input_shape[2]);
    let (om, on) = (2 * m, 2 * n);
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (f, &go) in grad_out.data().iter().enumerate() {
        let ch = f / (om * on);
        let oi = (f / on) % om;
        let oj = f % on;
        g[(ch * m + oi / 2) * n + oj / 2] += go;
    }
    grad
}

/// The channel vector at cell `(i, j)` of a `[C, m, n]` tensor.
pub fn pick_cell<T: Real>(input: &Tensor<T>, i: usize, j: usize) -> Result<Tensor<T>> {
    let (c, m, n) = input.chw("pick_cell")?;
    if i >= m || j >= n {
        return Err(TensorError::IndexOutOfRange {
            op: "pick_cell",
            i,
            j,
            m,
            n,
        });
    }
    Ok(Tensor::from_fn(&[c], |ch| input.at3(ch, i, j)))
}

/// Top-left `rows x cols` window of a `[C, m, n]` tensor.
pub fn crop<T: Real>(input: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let (c, m, n) = input.chw("crop")?;
    if rows > m || cols > n {
        return Err(mismatch("crop", format!("at least [*, {rows}, {cols}]"), input.shape()));
    }
    let mut out = Vec::with_capacity(c * rows * cols);
    for ch in 0..c {
        for i in 0..rows {
            let start = (ch * m + i) * n;
            out.extend_from_slice(&input.data()[start..start + cols]);
        }
    }
    Tensor::new(&[c, rows, cols], out)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(T::zero()))
}
