//! Numeric kernels behind the graph operations.
//!
//! Every kernel takes an [`Exec`] and produces bitwise-identical results in
//! both modes: work is split only across independent outputs, and any
//! cross-sample reduction is summed in a fixed order afterwards.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls
    /// back to sequential execution.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Target number of elements handed to one rayon task for row-wise kernels.
const ROW_TASK_ELEMS: usize = 8192;

pub(crate) fn for_each_chunk<F>(exec: Exec, data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => data
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// Like [`for_each_chunk`] over two buffers split into the same number of chunks.
pub(crate) fn for_each_chunk2<F>(exec: Exec, a: &mut [f64], ca: usize, b: &mut [f64], cb: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    if ca == 0 || cb == 0 || a.is_empty() {
        return;
    }
    debug_assert_eq!(a.len() / ca, b.len() / cb);
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => a
            .par_chunks_mut(ca)
            .zip(b.par_chunks_mut(cb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y)),
        _ => a
            .chunks_mut(ca)
            .zip(b.chunks_mut(cb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y)),
    }
}

pub(crate) fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Applies `f(row_index, row)` to each row of length `cols`, grouping rows
/// into tasks of roughly [`ROW_TASK_ELEMS`] elements.
fn for_each_row<F>(exec: Exec, data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let rows_per_task = (ROW_TASK_ELEMS / cols.max(1)).max(1);
    for_each_chunk(exec, data, rows_per_task * cols, |task, chunk| {
        for (r, row) in chunk.chunks_mut(cols).enumerate() {
            f(task * rows_per_task + r, row);
        }
    });
}

/// `e^x` accurate to a few ulp, branch-free so loops over it vectorize.
/// Arguments below -708 flush to zero; above 709 saturate at `e^709`.
#[inline]
pub fn exp(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const C: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let xc = x.max(-708.0).min(709.0);
    let shifted = xc * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = xc - k * LN2_HI - k * LN2_LO;
    let mut p = C[13];
    p = p * r + C[12];
    p = p * r + C[11];
    p = p * r + C[10];
    p = p * r + C[9];
    p = p * r + C[8];
    p = p * r + C[7];
    p = p * r + C[6];
    p = p * r + C[5];
    p = p * r + C[4];
    p = p * r + C[3];
    p = p * r + C[2];
    p = p * r + C[1];
    p = p * r + C[0];
    let ki = shifted.to_bits() as i64 - SHIFT.to_bits() as i64;
    let scale = f64::from_bits(((ki + 1023) << 52) as u64);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

/// Row and column strides of a logical matrix inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Layout of a row-major `rows × cols` matrix, optionally read transposed.
    pub fn row_major(cols: usize, transposed: bool) -> Self {
        if transposed {
            Strides { row: 1, col: cols }
        } else {
            Strides { row: cols, col: 1 }
        }
    }

    pub fn t(self) -> Self {
        Strides {
            row: self.col,
            col: self.row,
        }
    }
}

/// `c (m×n, row-major) (+)= a (m×k) · b (k×n)`, with arbitrary operand strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    accumulate: bool,
) {
    gemm_strided(m, k, n, a, sa, b, sb, c, Strides::row_major(n, false), accumulate)
}

/// [`gemm`] with a strided output.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    sc: Strides,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > (m - 1) * sc.row + (n - 1) * sc.col, "gemm output too small");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * sc.row + j * sc.col] = 0.0;
                }
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * sa.row + (k - 1) * sa.col, "gemm lhs too small");
    assert!(b.len() > (k - 1) * sb.row + (n - 1) * sb.col, "gemm rhs too small");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of all three operands were checked above for the given
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

/// Batched [`gemm`]: operand `i` of each side starts at `i * (m*k)` / `i * (k*n)`.
#[allow(clippy::too_many_arguments)]
pub fn batched_gemm(
    exec: Exec,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), batch * m * n);
    for_each_chunk(exec, c, m * n, |i, ci| {
        gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            sa,
            &b[i * k * n..(i + 1) * k * n],
            sb,
            ci,
            accumulate,
        )
    });
}

/// Multi-head self-attention over a packed `[batch, tokens, 3·dim]` tensor
/// holding queries, keys and values side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    fn qkv_len(&self) -> usize {
        self.tokens * 3 * self.dim
    }

    fn probs_len(&self) -> usize {
        self.heads * self.tokens * self.tokens
    }
}

/// Writes the merged-head context `[batch, tokens, dim]` and the attention
/// weights `[batch·heads, tokens, tokens]`.
pub fn attention_forward(exec: Exec, geom: AttnGeom, qkv: &[f64], ctx: &mut [f64], probs: &mut [f64]) {
    let AttnGeom { tokens: t, dim: d, heads, .. } = geom;
    let dh = geom.head_dim();
    let scale = geom.scale();
    let row = Strides { row: 3 * d, col: 1 };
    for_each_chunk2(exec, ctx, t * d, probs, geom.probs_len(), |i, ctx_i, probs_i| {
        let src = &qkv[i * geom.qkv_len()..(i + 1) * geom.qkv_len()];
        for h in 0..heads {
            let p = &mut probs_i[h * t * t..(h + 1) * t * t];
            let (q, k, v) = (&src[h * dh..], &src[d + h * dh..], &src[2 * d + h * dh..]);
            gemm(t, dh, t, q, row, k, row.t(), p, false);
            for r in p.chunks_mut(t) {
                let max = r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut sum = 0.0;
                for x in r.iter_mut() {
                    *x = exp((*x - max) * scale);
                    sum += *x;
                }
                let inv = 1.0 / sum;
                r.iter_mut().for_each(|x| *x *= inv);
            }
            gemm_strided(t, t, dh, p, Strides::row_major(t, false), v, row, &mut ctx_i[h * dh..], Strides { row: d, col: 1 }, false);
        }
    });
}

/// Gradient of [`attention_forward`] with respect to the packed input,
/// written (not accumulated) into `gqkv`.
pub fn attention_backward(exec: Exec, geom: AttnGeom, qkv: &[f64], probs: &[f64], gctx: &[f64], gqkv: &mut [f64]) {
    let AttnGeom { tokens: t, dim: d, heads, .. } = geom;
    let dh = geom.head_dim();
    let scale = geom.scale();
    let row = Strides { row: 3 * d, col: 1 };
    let ctx_row = Strides { row: d, col: 1 };
    let sq = Strides::row_major(t, false);
    for_each_chunk(exec, gqkv, geom.qkv_len(), |i, gi| {
        let src = &qkv[i * geom.qkv_len()..(i + 1) * geom.qkv_len()];
        let gc = &gctx[i * t * d..(i + 1) * t * d];
        let mut dp = vec![0.0; t * t];
        for h in 0..heads {
            let p = &probs[(i * heads + h) * t * t..(i * heads + h + 1) * t * t];
            let (q, k, v) = (&src[h * dh..], &src[d + h * dh..], &src[2 * d + h * dh..]);
            let gch = &gc[h * dh..];
            gemm(t, dh, t, gch, ctx_row, v, row.t(), &mut dp, false);
            gemm_strided(t, t, dh, p, sq.t(), gch, ctx_row, &mut gi[2 * d + h * dh..], row, false);
            for (pr, dr) in p.chunks(t).zip(dp.chunks_mut(t)) {
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &y) in dr.iter_mut().zip(pr) {
                    *x = y * (*x - dot) * scale;
                }
            }
            gemm_strided(t, t, dh, &dp, sq, k, row, &mut gi[h * dh..], row, false);
            gemm_strided(t, t, dh, &dp, sq.t(), q, row, &mut gi[d + h * dh..], row, false);
        }
    });
}

/// Tanh-approximated GELU; also returns the inner `tanh` for the backward pass.
pub fn gelu(exec: Exec, x: &[f64], out: &mut [f64], tanh: &mut [f64]) {
    tanh.iter_mut().zip(x).for_each(|(t, &v)| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        *t = 1.0 - 2.0 / (exp(2.0 * u) + 1.0);
    });
    for_each_chunk(exec, out, ROW_TASK_ELEMS, |c, o| {
        let base = c * ROW_TASK_ELEMS;
        for (j, y) in o.iter_mut().enumerate() {
            *y = 0.5 * x[base + j] * (1.0 + tanh[base + j]);
        }
    });
}

/// `dGELU/dx` at `x` given the cached inner `tanh`.
#[inline]
pub fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Max-subtracted softmax over rows of length `cols`.
pub fn softmax_rows(exec: Exec, x: &[f64], cols: usize, out: &mut [f64]) {
    out.copy_from_slice(x);
    for_each_row(exec, out, cols, |_, row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    });
}

/// `gx += y ⊙ (gy − Σ y·gy)` row-wise.
pub fn softmax_rows_backward(exec: Exec, y: &[f64], gy: &[f64], cols: usize, gx: &mut [f64]) {
    for_each_row(exec, gx, cols, |r, gxr| {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &gy[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((g, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
            *g += yv * (gv - dot);
        }
    });
}

/// Log-softmax over rows, restricted to entries where `mask` is true.
/// Masked-out entries produce 0 and receive no gradient.
pub fn log_softmax_rows(exec: Exec, x: &[f64], mask: Option<&[bool]>, cols: usize, out: &mut [f64]) {
    out.copy_from_slice(x);
    for_each_row(exec, out, cols, |r, row| {
        let keep = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if keep(c) {
                max = max.max(v);
            }
        }
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mut sum = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if keep(c) {
                sum += (v - max).exp();
            }
        }
        let lse = max + sum.ln();
        for (c, v) in row.iter_mut().enumerate() {
            *v = if keep(c) { *v - lse } else { 0.0 };
        }
    });
}

/// `gx += gy − softmax · Σ gy` over the kept entries of each row.
pub fn log_softmax_rows_backward(
    exec: Exec,
    y: &[f64],
    gy: &[f64],
    mask: Option<&[bool]>,
    cols: usize,
    gx: &mut [f64],
) {
    for_each_row(exec, gx, cols, |r, gxr| {
        let keep = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &gy[r * cols..(r + 1) * cols];
        let gsum: f64 = (0..cols).filter(|&c| keep(c)).map(|c| gr[c]).sum();
        for c in 0..cols {
            if keep(c) {
                gxr[c] += gr[c] - yr[c].exp() * gsum;
            }
        }
    });
}

/// Layer normalization over rows. Writes the normalized values and the
/// reciprocal standard deviations used by the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows(
    exec: Exec,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    let cols = gamma.len();
    let n = cols as f64;
    for (r, row) in x.chunks(cols).enumerate() {
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        rstd[r] = 1.0 / (var + eps).sqrt();
    }
    let rstd = &*rstd;
    xhat.copy_from_slice(x);
    for_each_row(exec, xhat, cols, |r, row| {
        let mean = row.iter().sum::<f64>() / n;
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd[r]);
    });
    out.copy_from_slice(xhat);
    for_each_row(exec, out, cols, |_, row| {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    });
}

/// Input gradient of layer normalization.
pub fn layer_norm_backward_input(
    exec: Exec,
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    gy: &[f64],
    gx: &mut [f64],
) {
    let cols = gamma.len();
    for_each_row(exec, gx, cols, |r, gxr| {
        let xr = &xhat[r * cols..(r + 1) * cols];
        let gr = &gy[r * cols..(r + 1) * cols];
        let n = cols as f64;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..cols {
            let gh = gr[c] * gamma[c];
            sum_g += gh;
            sum_gx += gh * xr[c];
        }
        for c in 0..cols {
            let gh = gr[c] * gamma[c];
            gxr[c] += rstd[r] * (gh - sum_g / n - xr[c] * sum_gx / n);
        }
    });
}

/// Geometry of a 2-d convolution over NCHW input and OIHW kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_spatial(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one sample into a `[c·kh·kw, oh·ow]` patch matrix.
fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            input[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back into `input_grad`.
fn col2im_add(g: &ConvGeom, cols: &[f64], input_grad: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        input_grad[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation `out[b,o] = Σ_c kernel[o,c] ⋆ input[b,c] (+ bias[o])`.
pub fn conv2d_forward(
    exec: Exec,
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let spatial = g.out_spatial();
    let plen = g.patch_len();
    for_each_chunk(exec, out, g.out_ch * spatial, |b, ob| {
        let mut cols = vec![0.0; plen * spatial];
        im2col(g, &input[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        gemm(
            g.out_ch,
            plen,
            spatial,
            kernel,
            Strides::row_major(plen, false),
            &cols,
            Strides::row_major(spatial, false),
            ob,
            false,
        );
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_mut(spatial).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    });
}

/// Accumulates the input gradient of [`conv2d_forward`].
pub fn conv2d_backward_input(exec: Exec, g: &ConvGeom, kernel: &[f64], gout: &[f64], gin: &mut [f64]) {
    let spatial = g.out_spatial();
    let plen = g.patch_len();
    for_each_chunk(exec, gin, g.in_len(), |b, gb| {
        let mut cols = vec![0.0; plen * spatial];
        gemm(
            plen,
            g.out_ch,
            spatial,
            kernel,
            Strides::row_major(plen, true),
            &gout[b * g.out_ch * spatial..(b + 1) * g.out_ch * spatial],
            Strides::row_major(spatial, false),
            &mut cols,
            false,
        );
        col2im_add(g, &cols, gb);
    });
}

/// Accumulates the kernel gradient of [`conv2d_forward`].
pub fn conv2d_backward_kernel(exec: Exec, g: &ConvGeom, input: &[f64], gout: &[f64], gk: &mut [f64]) {
    let spatial = g.out_spatial();
    let plen = g.patch_len();
    let partials = map_indices(exec, g.batch, |b| {
        let mut cols = vec![0.0; plen * spatial];
        im2col(g, &input[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let mut part = vec![0.0; g.out_ch * plen];
        gemm(
            g.out_ch,
            spatial,
            plen,
            &gout[b * g.out_ch * spatial..(b + 1) * g.out_ch * spatial],
            Strides::row_major(spatial, false),
            &cols,
            Strides::row_major(spatial, true),
            &mut part,
            false,
        );
        part
    });
    for part in partials {
        gk.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }
}

/// General axis permutation: `out` has shape `shape[perm[0]], shape[perm[1]], …`.
pub fn permute(exec: Exec, x: &[f64], shape: &[usize], perm: &[usize], out: &mut [f64]) {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = *out_shape.last().unwrap_or(&1);
    let last_stride = *src_strides.last().unwrap_or(&1);
    for_each_row(exec, out, last, |r, row| {
        // decode the row index into the leading output coordinates
        let mut rem = r;
        let mut base = 0;
        for d in (0..nd.saturating_sub(1)).rev() {
            let idx = rem % out_shape[d];
            rem /= out_shape[d];
            base += idx * src_strides[d];
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[base + j * last_stride];
        }
    });
}

/// Inverse of a permutation.
pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
