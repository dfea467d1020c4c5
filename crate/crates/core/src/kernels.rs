//! Forward and backward kernels for the layers the tape records.
//!
//! Layout conventions: feature maps are `[frames, channels, height, width]`,
//! projection matrices are `[in, out]` so that `y = x · W`.

use crate::tensor::{attention_probs, Scalar};

/// Geometry of a square-kernel 2-D convolution with `pad = k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let p = self.pad();
        (
            (self.h + 2 * p - self.k) / self.stride + 1,
            (self.w + 2 * p - self.k) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeom, wo: usize, kx: usize) -> (usize, usize) {
    let p = g.pad();
    let lo = p.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + p > kx { ((g.w + p - kx - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = g.pad() as isize;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, wo, kx);
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad();
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = g.pad() as isize;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, wo, kx);
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad();
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    for (d, &v) in line[first..].iter_mut().step_by(g.stride).zip(s) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[f] = W * x[f] + b` for every frame.
pub fn conv2d_forward<T: Scalar>(x: &[T], frames: usize, w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let in_frame = g.c_in * g.h * g.w;
    let out_frame = g.c_out * n;
    let mut out = vec![T::zero(); frames * out_frame];
    let mut cols = if g.direct() { Vec::new() } else { vec![T::zero(); g.patch() * n] };
    for f in 0..frames {
        let xf = &x[f * in_frame..(f + 1) * in_frame];
        let of = &mut out[f * out_frame..(f + 1) * out_frame];
        for (co, chunk) in of.chunks_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
        let src: &[T] = if g.direct() {
            xf
        } else {
            im2col(xf, g, &mut cols);
            &cols
        };
        T::gemm(
            g.c_out,
            g.patch(),
            n,
            T::one(),
            w,
            (g.patch() as isize, 1),
            src,
            (n as isize, 1),
            T::one(),
            of,
            (n as isize, 1),
        );
    }
    out
}

/// `[c_in, c_out, k, k]` kernel rotated by 180 degrees.
fn flip_kernel<T: Scalar>(w: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); w.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for i in 0..kk {
                out[(ci * g.c_out + co) * kk + (kk - 1 - i)] = w[(co * g.c_in + ci) * kk + i];
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    frames: usize,
    w: &[T],
    g: &ConvGeom,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let in_frame = g.c_in * g.h * g.w;
    let out_frame = g.c_out * n;
    let patch = g.patch();
    let mut cols = if g.direct() { Vec::new() } else { vec![T::zero(); patch * n] };
    let mut dcols = if g.stride == 1 { Vec::new() } else { vec![T::zero(); patch * n] };
    let mut flipped_kernel: Option<Vec<T>> = None;
    let mut dx = dx;
    for f in 0..frames {
        let xf = &x[f * in_frame..(f + 1) * in_frame];
        let df = &dout[f * out_frame..(f + 1) * out_frame];
        for (co, chunk) in df.chunks(n).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.direct() {
            xf
        } else {
            im2col(xf, g, &mut cols);
            &cols
        };
        // dW += dOut · colsᵀ
        T::gemm(
            g.c_out,
            n,
            patch,
            T::one(),
            df,
            (n as isize, 1),
            src,
            (1, n as isize),
            T::one(),
            dw,
            (patch as isize, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            let dxf = &mut dx[f * in_frame..(f + 1) * in_frame];
            if g.direct() {
                T::gemm(
                    patch,
                    g.c_out,
                    n,
                    T::one(),
                    w,
                    (1, patch as isize),
                    df,
                    (n as isize, 1),
                    T::one(),
                    dxf,
                    (n as isize, 1),
                );
            } else if g.stride == 1 {
                // Stride-1 input gradient is a convolution of `dout` with
                // the spatially flipped, channel-transposed kernel.
                let flipped = flipped_kernel.get_or_insert_with(|| flip_kernel(w, g));
                let tg = ConvGeom { c_in: g.c_out, c_out: g.c_in, ..*g };
                let zero = vec![T::zero(); g.c_in];
                let d = conv2d_forward(df, 1, flipped, &zero, &tg);
                for (a, b) in dxf.iter_mut().zip(d) {
                    *a += b;
                }
            } else {
                T::gemm(
                    patch,
                    g.c_out,
                    n,
                    T::one(),
                    w,
                    (1, patch as isize),
                    df,
                    (n as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (n as isize, 1),
                );
                col2im(&dcols, g, dxf);
            }
        }
    }
}

/// Saved activations of one cross-attention call.
#[derive(Debug, Clone)]
pub struct CrossAttnCache<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Per frame: queries `[S, d]`, probabilities `[S, n]`, attended values `[S, d]`.
    pub q: Vec<Vec<T>>,
    pub p: Vec<Vec<T>>,
    pub a: Vec<Vec<T>>,
}

/// Shapes of a cross-attention call.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttnGeom {
    pub frames: usize,
    pub channels: usize,
    pub positions: usize,
    pub d_text: usize,
    pub d_attn: usize,
    pub tokens: usize,
}

/// Cross-attention of every spatial position (queries) against the first
/// `tokens` rows of `e` (keys/values), projected back to `channels`.
/// Returns `[frames, channels, positions]` without the residual.
#[allow(clippy::too_many_arguments)]
pub fn cross_attn_forward<T: Scalar>(
    h: &[T],
    e: &[T],
    wq: &[T],
    wk: &[T],
    wv: &[T],
    wo: &[T],
    g: &CrossAttnGeom,
) -> (Vec<T>, CrossAttnCache<T>) {
    let (c, s, d, n, dt) = (g.channels, g.positions, g.d_attn, g.tokens, g.d_text);
    let mut k = vec![T::zero(); n * d];
    let mut v = vec![T::zero(); n * d];
    T::gemm(n, dt, d, T::one(), e, (dt as isize, 1), wk, (d as isize, 1), T::zero(), &mut k, (d as isize, 1));
    T::gemm(n, dt, d, T::one(), e, (dt as isize, 1), wv, (d as isize, 1), T::zero(), &mut v, (d as isize, 1));
    let mut out = vec![T::zero(); g.frames * c * s];
    let mut cache = CrossAttnCache {
        k,
        v,
        q: Vec::with_capacity(g.frames),
        p: Vec::with_capacity(g.frames),
        a: Vec::with_capacity(g.frames),
    };
    for f in 0..g.frames {
        let hf = &h[f * c * s..(f + 1) * c * s];
        let mut q = vec![T::zero(); s * d];
        T::gemm(s, c, d, T::one(), hf, (1, s as isize), wq, (d as isize, 1), T::zero(), &mut q, (d as isize, 1));
        let p = attention_probs(&q, &cache.k, s, n, d);
        let mut a = vec![T::zero(); s * d];
        T::gemm(s, n, d, T::one(), &p, (n as isize, 1), &cache.v, (d as isize, 1), T::zero(), &mut a, (d as isize, 1));
        let of = &mut out[f * c * s..(f + 1) * c * s];
        T::gemm(s, d, c, T::one(), &a, (d as isize, 1), wo, (c as isize, 1), T::zero(), of, (1, s as isize));
        cache.q.push(q);
        cache.p.push(p);
        cache.a.push(a);
    }
    (out, cache)
}

/// Gradient buffers for [`cross_attn_backward`]; all accumulate.
pub struct CrossAttnGrads<'a, T> {
    pub dh: Option<&'a mut [T]>,
    pub de: Option<&'a mut [T]>,
    pub dwq: &'a mut [T],
    pub dwk: &'a mut [T],
    pub dwv: &'a mut [T],
    pub dwo: &'a mut [T],
}

fn softmax_backward_rows<T: Scalar>(p: &[T], dp: &mut [T], width: usize, scale: T) {
    for (prow, drow) in p.chunks(width).zip(dp.chunks_mut(width)) {
        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in drow.iter_mut().zip(prow) {
            *d = pv * (*d - dot) * scale;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cross_attn_backward<T: Scalar>(
    h: &[T],
    e: &[T],
    wq: &[T],
    wk: &[T],
    wv: &[T],
    wo: &[T],
    g: &CrossAttnGeom,
    cache: &CrossAttnCache<T>,
    dout: &[T],
    grads: CrossAttnGrads<'_, T>,
) {
    let (c, s, d, n, dt) = (g.channels, g.positions, g.d_attn, g.tokens, g.d_text);
    let scale = T::one() / T::from_usize(d).expect("d").sqrt();
    let CrossAttnGrads {
        mut dh,
        de,
        dwq,
        dwk,
        dwv,
        dwo,
    } = grads;
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut da = vec![T::zero(); s * d];
    let mut dp = vec![T::zero(); s * n];
    let mut dq = vec![T::zero(); s * d];
    for f in 0..g.frames {
        let hf = &h[f * c * s..(f + 1) * c * s];
        let df = &dout[f * c * s..(f + 1) * c * s];
        let (q, p, a) = (&cache.q[f], &cache.p[f], &cache.a[f]);
        // dWo += Aᵀ dO, with dO = dfᵀ viewed as [S, C]
        T::gemm(d, s, c, T::one(), a, (1, d as isize), df, (1, s as isize), T::one(), dwo, (c as isize, 1));
        // dA = dO Woᵀ
        T::gemm(s, c, d, T::one(), df, (1, s as isize), wo, (1, c as isize), T::zero(), &mut da, (d as isize, 1));
        // dP = dA Vᵀ ; dV += Pᵀ dA
        T::gemm(s, d, n, T::one(), &da, (d as isize, 1), &cache.v, (1, d as isize), T::zero(), &mut dp, (n as isize, 1));
        T::gemm(n, s, d, T::one(), p, (1, n as isize), &da, (d as isize, 1), T::one(), &mut dv, (d as isize, 1));
        softmax_backward_rows(p, &mut dp, n, scale);
        // dQ = dS K ; dK += dSᵀ Q
        T::gemm(s, n, d, T::one(), &dp, (n as isize, 1), &cache.k, (d as isize, 1), T::zero(), &mut dq, (d as isize, 1));
        T::gemm(n, s, d, T::one(), &dp, (1, n as isize), q, (d as isize, 1), T::one(), &mut dk, (d as isize, 1));
        // dWq += h_f dQ ; dh_f += Wq dQᵀ
        T::gemm(c, s, d, T::one(), hf, (s as isize, 1), &dq, (d as isize, 1), T::one(), dwq, (d as isize, 1));
        if let Some(dh) = dh.as_deref_mut() {
            let dhf = &mut dh[f * c * s..(f + 1) * c * s];
            T::gemm(c, d, s, T::one(), wq, (d as isize, 1), &dq, (1, d as isize), T::one(), dhf, (s as isize, 1));
        }
    }
    T::gemm(dt, n, d, T::one(), e, (1, dt as isize), &dk, (d as isize, 1), T::one(), dwk, (d as isize, 1));
    T::gemm(dt, n, d, T::one(), e, (1, dt as isize), &dv, (d as isize, 1), T::one(), dwv, (d as isize, 1));
    if let Some(de) = de {
        T::gemm(n, d, dt, T::one(), &dk, (d as isize, 1), wk, (1, d as isize), T::one(), de, (dt as isize, 1));
        T::gemm(n, d, dt, T::one(), &dv, (d as isize, 1), wv, (1, d as isize), T::one(), de, (dt as isize, 1));
    }
}

/// Saved activations of a temporal attention call, one entry per position.
#[derive(Debug, Clone)]
pub struct TemporalCache<T> {
    pub q: Vec<Vec<T>>,
    pub k: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub p: Vec<Vec<T>>,
    pub m: Vec<Vec<T>>,
}

/// Self-attention across frames at every spatial position:
/// `out = x + (P V − V) Wo` with `P = softmax(Q Kᵀ/√d)`. With a single frame
/// `P = 1`, so the mixing term vanishes and the features pass through.
#[allow(clippy::too_many_arguments)]
pub fn temporal_attn_forward<T: Scalar>(
    x: &[T],
    frames: usize,
    channels: usize,
    positions: usize,
    d: usize,
    wq: &[T],
    wk: &[T],
    wv: &[T],
    wo: &[T],
) -> (Vec<T>, TemporalCache<T>) {
    let (fr, c, s) = (frames, channels, positions);
    let xs = ((c * s) as isize, s as isize);
    let mut out = x.to_vec();
    let mut cache = TemporalCache {
        q: Vec::with_capacity(s),
        k: Vec::with_capacity(s),
        v: Vec::with_capacity(s),
        p: Vec::with_capacity(s),
        m: Vec::with_capacity(s),
    };
    for pos in 0..s {
        let xv = &x[pos..];
        let mut q = vec![T::zero(); fr * d];
        let mut k = vec![T::zero(); fr * d];
        let mut v = vec![T::zero(); fr * d];
        T::gemm(fr, c, d, T::one(), xv, xs, wq, (d as isize, 1), T::zero(), &mut q, (d as isize, 1));
        T::gemm(fr, c, d, T::one(), xv, xs, wk, (d as isize, 1), T::zero(), &mut k, (d as isize, 1));
        T::gemm(fr, c, d, T::one(), xv, xs, wv, (d as isize, 1), T::zero(), &mut v, (d as isize, 1));
        let p = attention_probs(&q, &k, fr, fr, d);
        let mut m = vec![T::zero(); fr * d];
        T::gemm(fr, fr, d, T::one(), &p, (fr as isize, 1), &v, (d as isize, 1), T::zero(), &mut m, (d as isize, 1));
        for (mv, &vv) in m.iter_mut().zip(&v) {
            *mv -= vv;
        }
        T::gemm(fr, d, c, T::one(), &m, (d as isize, 1), wo, (c as isize, 1), T::one(), &mut out[pos..], xs);
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
        cache.p.push(p);
        cache.m.push(m);
    }
    (out, cache)
}

#[allow(clippy::too_many_arguments)]
pub fn temporal_attn_backward<T: Scalar>(
    x: &[T],
    frames: usize,
    channels: usize,
    positions: usize,
    d: usize,
    weights: [&[T]; 4],
    cache: &TemporalCache<T>,
    dout: &[T],
    dx: Option<&mut [T]>,
    dweights: [&mut [T]; 4],
) {
    let (fr, c, s) = (frames, channels, positions);
    let xs = ((c * s) as isize, s as isize);
    let [wq, wk, wv, wo] = weights;
    let [dwq, dwk, dwv, dwo] = dweights;
    let scale = T::one() / T::from_usize(d).expect("d").sqrt();
    let mut dx = dx;
    if let Some(dx) = dx.as_deref_mut() {
        for (a, &b) in dx.iter_mut().zip(dout) {
            *a += b;
        }
    }
    let mut dm = vec![T::zero(); fr * d];
    let mut dv = vec![T::zero(); fr * d];
    let mut dp = vec![T::zero(); fr * fr];
    let mut dq = vec![T::zero(); fr * d];
    let mut dk = vec![T::zero(); fr * d];
    for pos in 0..s {
        let xv = &x[pos..];
        let dov = &dout[pos..];
        let (q, k, v, p, m) = (&cache.q[pos], &cache.k[pos], &cache.v[pos], &cache.p[pos], &cache.m[pos]);
        T::gemm(d, fr, c, T::one(), m, (1, d as isize), dov, xs, T::one(), dwo, (c as isize, 1));
        T::gemm(fr, c, d, T::one(), dov, xs, wo, (1, c as isize), T::zero(), &mut dm, (d as isize, 1));
        // M = P V − V
        T::gemm(fr, fr, d, T::one(), p, (1, fr as isize), &dm, (d as isize, 1), T::zero(), &mut dv, (d as isize, 1));
        for (a, &b) in dv.iter_mut().zip(&dm) {
            *a -= b;
        }
        T::gemm(fr, d, fr, T::one(), &dm, (d as isize, 1), v, (1, d as isize), T::zero(), &mut dp, (fr as isize, 1));
        softmax_backward_rows(p, &mut dp, fr, scale);
        T::gemm(fr, fr, d, T::one(), &dp, (fr as isize, 1), k, (d as isize, 1), T::zero(), &mut dq, (d as isize, 1));
        T::gemm(fr, fr, d, T::one(), &dp, (1, fr as isize), q, (d as isize, 1), T::zero(), &mut dk, (d as isize, 1));
        let xt = (xs.1, xs.0);
        T::gemm(c, fr, d, T::one(), xv, xt, &dq, (d as isize, 1), T::one(), dwq, (d as isize, 1));
        T::gemm(c, fr, d, T::one(), xv, xt, &dk, (d as isize, 1), T::one(), dwk, (d as isize, 1));
        T::gemm(c, fr, d, T::one(), xv, xt, &dv, (d as isize, 1), T::one(), dwv, (d as isize, 1));
        if let Some(dx) = dx.as_deref_mut() {
            let dxv = &mut dx[pos..];
            T::gemm(fr, d, c, T::one(), &dq, (d as isize, 1), wq, (1, d as isize), T::one(), dxv, xs);
            T::gemm(fr, d, c, T::one(), &dk, (d as isize, 1), wk, (1, d as isize), T::one(), dxv, xs);
            T::gemm(fr, d, c, T::one(), &dv, (d as isize, 1), wv, (1, d as isize), T::one(), dxv, xs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as the reference.
    fn conv_oracle(x: &[f64], frames: usize, w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let p = g.pad() as isize;
        let mut out = vec![0.0; frames * g.c_out * ho * wo];
        for f in 0..frames {
            for co in 0..g.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride) as isize + ky as isize - p;
                                    let ix = (ox * g.stride) as isize + kx as isize - p;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                        * x[((f * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((f * g.c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let g = ConvGeom { c_in: 2, c_out: 3, h: 6, w: 5, k, stride };
            let x = pseudo(2 * 2 * 30, 1);
            let w = pseudo(3 * 2 * k * k, 2);
            let b = pseudo(3, 3);
            let got = conv2d_forward(&x, 2, &w, &b, &g);
            let want = conv_oracle(&x, 2, &w, &b, &g);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let g = ConvGeom { c_in: 2, c_out: 2, h: 5, w: 4, k, stride };
            let (ho, wo) = g.out_hw();
            let x = pseudo(2 * 20, 4);
            let w = pseudo(2 * 2 * k * k, 5);
            let b = pseudo(2, 6);
            let r = pseudo(2 * 2 * ho * wo, 7);
            let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
                conv2d_forward(x, 1, w, b, &g).iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let (mut dx, mut dw, mut db) = (vec![0.0; 20 * 2], vec![0.0; w.len()], vec![0.0; 2]);
            // single frame for simplicity
            conv2d_backward(&x[..40], 1, &w, &g, &r[..2 * ho * wo], Some(&mut dx[..40]), &mut dw, &mut db);
            let h = 1e-6;
            for i in 0..w.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[i] += h;
                wm[i] -= h;
                let fd = (loss(&x[..40], &wp, &b) - loss(&x[..40], &wm, &b)) / (2.0 * h);
                assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", dw[i]);
            }
            for i in 0..40 {
                let (mut xp, mut xm) = (x[..40].to_vec(), x[..40].to_vec());
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
                assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx[i]);
            }
        }
    }

    #[test]
    fn temporal_single_frame_passes_through() {
        let x = pseudo(4 * 6, 9);
        let ws: Vec<Vec<f64>> = (0..4).map(|i| pseudo(4 * 3, 10 + i)).collect();
        let (out, _) = temporal_attn_forward(&x, 1, 4, 6, 3, &ws[0], &ws[1], &ws[2], &ws[3][..3 * 4]);
        assert_eq!(out, x);
    }
}
