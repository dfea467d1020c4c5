//! Minimal reverse-mode tape over [`Tensor`] values.
//!
//! Every layer of the denoiser and the control encoders is recorded here as a
//! coarse op (a whole convolution, a whole attention block) with a
//! hand-derived pullback in [`crate::kernels`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, CrossAttnCache, CrossAttnGeom, CrossAttnGrads, TemporalCache};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One row of an embedding lookup.
#[derive(Debug, Clone)]
pub enum EmbedRow<T> {
    Table(usize),
    Fixed(Vec<T>),
    Pad,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        frames: usize,
    },
    Add(Var, Var),
    Silu(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    MaskMul {
        x: Var,
        mask: Tensor<T>,
    },
    Scale(Var, T),
    AddConst(Var),
    Upsample2x(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossAttn {
        h: Var,
        e: Var,
        w: [Var; 4],
        geom: CrossAttnGeom,
        cache: CrossAttnCache<T>,
    },
    TemporalAttn {
        x: Var,
        w: [Var; 4],
        d: usize,
        cache: TemporalCache<T>,
    },
    Embed {
        table: Var,
        rows: Vec<EmbedRow<T>>,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn feature_dims(t: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match t {
        [f, c, h, w] => Ok((*f, *c, *h, *w)),
        d => Err(Error::shape(format!("{what}: expected [frames, channels, h, w], got {d:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (frames, c_in, h, wd) = feature_dims(self.value(x).dims(), "conv2d input")?;
        let (c_out, wc_in, k) = match self.value(w).dims() {
            [co, ci, k1, k2] if k1 == k2 => (*co, *ci, *k1),
            d => return Err(Error::shape(format!("conv2d weight dims {d:?}"))),
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        self.value(b).expect_dims(&[c_out], "conv2d bias")?;
        let geom = ConvGeom { c_in, c_out, h, w: wd, k, stride };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            frames,
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(vec![frames, c_out, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, frames }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(value, Op::Silu(x))
    }

    /// `x · (1 + scale_c) + shift_c` with per-channel `scale` and `shift`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (f, c, h, w) = feature_dims(self.value(x).dims(), "channel_affine")?;
        for v in [scale, shift] {
            if self.value(v).len() != c {
                return Err(Error::shape(format!(
                    "channel_affine: {} coefficients for {c} channels",
                    self.value(v).len()
                )));
            }
        }
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = self.value(x).data().to_vec();
        for fi in 0..f {
            for ci in 0..c {
                let g = T::one() + sc[ci];
                let plane = &mut out[(fi * c + ci) * h * w..(fi * c + ci + 1) * h * w];
                for v in plane {
                    *v = *v * g + sh[ci];
                }
            }
        }
        let value = Tensor::new(vec![f, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }))
    }

    /// Multiply `[F, C, H, W]` features by a constant `[F, H, W]` mask.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let (f, c, h, w) = feature_dims(self.value(x).dims(), "mask_mul")?;
        if mask.dims() != [f, h, w] {
            return Err(Error::shape(format!(
                "mask {:?} does not match features {:?}",
                mask.dims(),
                self.value(x).dims()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for fi in 0..f {
            let m = &mask.data()[fi * h * w..(fi + 1) * h * w];
            for ci in 0..c {
                let plane = &mut out[(fi * c + ci) * h * w..(fi * c + ci + 1) * h * w];
                for (v, &mv) in plane.iter_mut().zip(m) {
                    *v *= mv;
                }
            }
        }
        let value = Tensor::new(vec![f, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::MaskMul {
                x,
                mask: mask.clone(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let value = self.value(x).map(|v| v * alpha);
        self.push(value, Op::Scale(x, alpha))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let value = self.value(x).zip_map(c, |a, b| a + b)?;
        Ok(self.push(value, Op::AddConst(x)))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (f, c, h, w) = feature_dims(self.value(x).dims(), "upsample2x")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(f * c * h * w * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for x in 0..2 * w {
                    out.push(row[x / 2]);
                }
            }
        }
        let value = Tensor::new(vec![f, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x)))
    }

    /// `x · w + b` for `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, k) = match self.value(x).dims() {
            [n, k] => (*n, *k),
            d => return Err(Error::shape(format!("linear input dims {d:?}"))),
        };
        let m = match self.value(w).dims() {
            [k2, m] if *k2 == k => *m,
            d => return Err(Error::shape(format!("linear weight {d:?} for input width {k}"))),
        };
        self.value(b).expect_dims(&[m], "linear bias")?;
        let mut out: Vec<T> = (0..n).flat_map(|_| self.value(b).data().to_vec()).collect();
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (m as isize, 1),
            T::one(),
            &mut out,
            (m as isize, 1),
        );
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Cross-attention of feature map `h` against the first `tokens` rows of
    /// the text embedding `e`. Weights are `[wq, wk, wv, wo]`.
    pub fn cross_attention(&mut self, h: Var, e: Var, tokens: usize, w: [Var; 4]) -> Result<Var> {
        let (frames, channels, hh, ww) = feature_dims(self.value(h).dims(), "cross_attention")?;
        let (l_max, d_text) = match self.value(e).dims() {
            [l, d] => (*l, *d),
            d => return Err(Error::shape(format!("text embedding dims {d:?}"))),
        };
        if tokens == 0 || tokens > l_max {
            return Err(Error::shape(format!("{tokens} tokens in a {l_max}-row embedding")));
        }
        let d_attn = match self.value(w[0]).dims() {
            [c, d] if *c == channels => *d,
            d => {
                return Err(Error::shape(format!(
                    "W_Q dims {d:?} for {channels}-channel hidden states"
                )))
            }
        };
        self.value(w[1]).expect_dims(&[d_text, d_attn], "W_K")?;
        self.value(w[2]).expect_dims(&[d_text, d_attn], "W_V")?;
        self.value(w[3]).expect_dims(&[d_attn, channels], "W_O")?;
        let geom = CrossAttnGeom {
            frames,
            channels,
            positions: hh * ww,
            d_text,
            d_attn,
            tokens,
        };
        let (out, cache) = kernels::cross_attn_forward(
            self.value(h).data(),
            &self.value(e).data()[..tokens * d_text],
            self.value(w[0]).data(),
            self.value(w[1]).data(),
            self.value(w[2]).data(),
            self.value(w[3]).data(),
            &geom,
        );
        let value = Tensor::new(vec![frames, channels, hh, ww], out)?;
        Ok(self.push(value, Op::CrossAttn { h, e, w, geom, cache }))
    }

    /// Attention across the frame axis at each spatial position. Weights are
    /// `[wq, wk, wv, wo]`; the residual is built in.
    pub fn temporal_attention(&mut self, x: Var, w: [Var; 4]) -> Result<Var> {
        let (frames, channels, hh, ww) = feature_dims(self.value(x).dims(), "temporal_attention")?;
        let d = match self.value(w[0]).dims() {
            [c, d] if *c == channels => *d,
            dd => return Err(Error::shape(format!("temporal W_Q dims {dd:?}"))),
        };
        self.value(w[1]).expect_dims(&[channels, d], "temporal W_K")?;
        self.value(w[2]).expect_dims(&[channels, d], "temporal W_V")?;
        self.value(w[3]).expect_dims(&[d, channels], "temporal W_O")?;
        let (out, cache) = kernels::temporal_attn_forward(
            self.value(x).data(),
            frames,
            channels,
            hh * ww,
            d,
            self.value(w[0]).data(),
            self.value(w[1]).data(),
            self.value(w[2]).data(),
            self.value(w[3]).data(),
        );
        let value = Tensor::new(vec![frames, channels, hh, ww], out)?;
        Ok(self.push(value, Op::TemporalAttn { x, w, d, cache }))
    }

    /// Gather embedding rows; `Fixed` rows are constants, `Pad` rows are zero.
    pub fn embed(&mut self, table: Var, rows: Vec<EmbedRow<T>>) -> Result<Var> {
        let (vocab, d) = match self.value(table).dims() {
            [v, d] => (*v, *d),
            dd => return Err(Error::shape(format!("embedding table dims {dd:?}"))),
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        for row in &rows {
            match row {
                EmbedRow::Table(i) if *i < vocab => {
                    out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d])
                }
                EmbedRow::Table(i) => {
                    return Err(Error::shape(format!("token {i} outside a {vocab}-row table")))
                }
                EmbedRow::Fixed(v) if v.len() == d => out.extend_from_slice(v),
                EmbedRow::Fixed(v) => {
                    return Err(Error::shape(format!("fixed row of width {} for d={d}", v.len())))
                }
                EmbedRow::Pad => out.extend(std::iter::repeat(T::zero()).take(d)),
            }
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(value, Op::Embed { table, rows }))
    }

    /// Mean squared error against a constant target; yields a 1-element tensor.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_dims(target.dims(), "mse target")?;
        let n = T::from_usize(p.len()).expect("len");
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::new(vec![1], vec![total / n])?;
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_dims = self.value(output).dims().to_vec();
        grads[output.0] = Some(Tensor::ones(out_dims));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.pullback(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn pullback(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let zeros_like = |v: Var| Tensor::<T>::zeros(self.value(v).dims().to_vec());
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if grads[v.0].is_none() {
                    grads[v.0] = Some(zeros_like(v));
                }
                grads[v.0].as_mut().unwrap().data_mut()
            }};
        }
        let acc = |dst: &mut [T], src: &[T]| {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(slot!(*a), g.data());
                acc(slot!(*b), g.data());
            }
            Op::AddConst(x) => acc(slot!(*x), g.data()),
            Op::Scale(x, alpha) => {
                let alpha = *alpha;
                let dx = slot!(*x);
                for (d, &gv) in dx.iter_mut().zip(g.data()) {
                    *d += gv * alpha;
                }
            }
            Op::Silu(x) => {
                let xs = self.value(*x).data().to_vec();
                let dx = slot!(*x);
                for ((d, &gv), &xv) in dx.iter_mut().zip(g.data()).zip(&xs) {
                    let s = T::one() / (T::one() + (-xv).exp());
                    *d += gv * s * (T::one() + xv * (T::one() - s));
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (f, c, h, w) = feature_dims(g.dims(), "").expect("checked in forward");
                let hw = h * w;
                let xv = self.value(*x).data();
                let sc = self.value(*scale).data().to_vec();
                let mut dsc = vec![T::zero(); c];
                let mut dsh = vec![T::zero(); c];
                for fi in 0..f {
                    for ci in 0..c {
                        let r = (fi * c + ci) * hw..(fi * c + ci + 1) * hw;
                        let gp = &g.data()[r.clone()];
                        dsh[ci] += gp.iter().copied().sum::<T>();
                        dsc[ci] += gp.iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
                let dx = slot!(*x);
                for fi in 0..f {
                    for ci in 0..c {
                        let gain = T::one() + sc[ci];
                        let r = (fi * c + ci) * hw..(fi * c + ci + 1) * hw;
                        for (d, &gv) in dx[r.clone()].iter_mut().zip(&g.data()[r]) {
                            *d += gv * gain;
                        }
                    }
                }
                acc(slot!(*scale), &dsc);
                acc(slot!(*shift), &dsh);
            }
            Op::MaskMul { x, mask } => {
                let (f, c, h, w) = feature_dims(g.dims(), "").expect("checked in forward");
                let hw = h * w;
                let dx = slot!(*x);
                for fi in 0..f {
                    let m = &mask.data()[fi * hw..(fi + 1) * hw];
                    for ci in 0..c {
                        let r = (fi * c + ci) * hw..(fi * c + ci + 1) * hw;
                        for ((d, &gv), &mv) in dx[r.clone()].iter_mut().zip(&g.data()[r]).zip(m) {
                            *d += gv * mv;
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let (_, _, h2, w2) = feature_dims(g.dims(), "").expect("checked in forward");
                let (h, w) = (h2 / 2, w2 / 2);
                let dx = slot!(*x);
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(h2 * w2)) {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dplane[(y / 2) * w + xx / 2] += gplane[y * w2 + xx];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, frames } => {
                let mut dw = vec![T::zero(); self.value(*w).len()];
                let mut db = vec![T::zero(); geom.c_out];
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                kernels::conv2d_backward(xv, *frames, self.value(*w).data(), geom, g.data(), Some(&mut dx), &mut dw, &mut db);
                acc(slot!(*x), &dx);
                acc(slot!(*w), &dw);
                acc(slot!(*b), &db);
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (self.value(*x).dims()[0], self.value(*x).dims()[1]);
                let m = self.value(*w).dims()[1];
                let mut dx = vec![T::zero(); n * k];
                let mut dw = vec![T::zero(); k * m];
                let mut db = vec![T::zero(); m];
                T::gemm(n, m, k, T::one(), g.data(), (m as isize, 1), self.value(*w).data(), (1, m as isize), T::zero(), &mut dx, (k as isize, 1));
                T::gemm(k, n, m, T::one(), self.value(*x).data(), (1, k as isize), g.data(), (m as isize, 1), T::zero(), &mut dw, (m as isize, 1));
                for row in g.data().chunks(m) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                acc(slot!(*x), &dx);
                acc(slot!(*w), &dw);
                acc(slot!(*b), &db);
            }
            Op::CrossAttn { h, e, w, geom, cache } => {
                let mut dh = vec![T::zero(); self.value(*h).len()];
                let mut de = vec![T::zero(); geom.tokens * geom.d_text];
                let mut dws: Vec<Vec<T>> = w.iter().map(|v| vec![T::zero(); self.value(*v).len()]).collect();
                {
                    let [dwq, dwk, dwv, dwo] = &mut dws[..] else { unreachable!() };
                    kernels::cross_attn_backward(
                        self.value(*h).data(),
                        &self.value(*e).data()[..geom.tokens * geom.d_text],
                        self.value(w[0]).data(),
                        self.value(w[1]).data(),
                        self.value(w[2]).data(),
                        self.value(w[3]).data(),
                        geom,
                        cache,
                        g.data(),
                        CrossAttnGrads {
                            dh: Some(&mut dh),
                            de: Some(&mut de),
                            dwq,
                            dwk,
                            dwv,
                            dwo,
                        },
                    );
                }
                acc(slot!(*h), &dh);
                acc(&mut slot!(*e)[..de.len()], &de);
                for (v, d) in w.iter().zip(&dws) {
                    acc(slot!(*v), d);
                }
            }
            Op::TemporalAttn { x, w, d, cache } => {
                let (frames, channels, hh, ww) = feature_dims(g.dims(), "").expect("checked in forward");
                let mut dx = vec![T::zero(); self.value(*x).len()];
                let mut dws: Vec<Vec<T>> = w.iter().map(|v| vec![T::zero(); self.value(*v).len()]).collect();
                {
                    let [dwq, dwk, dwv, dwo] = &mut dws[..] else { unreachable!() };
                    kernels::temporal_attn_backward(
                        self.value(*x).data(),
                        frames,
                        channels,
                        hh * ww,
                        *d,
                        [
                            self.value(w[0]).data(),
                            self.value(w[1]).data(),
                            self.value(w[2]).data(),
                            self.value(w[3]).data(),
                        ],
                        cache,
                        g.data(),
                        Some(&mut dx),
                        [dwq, dwk, dwv, dwo],
                    );
                }
                acc(slot!(*x), &dx);
                for (v, dv) in w.iter().zip(&dws) {
                    acc(slot!(*v), dv);
                }
            }
            Op::Embed { table, rows } => {
                let d = self.value(*table).dims()[1];
                let dt = slot!(*table);
                for (r, row) in rows.iter().enumerate() {
                    if let EmbedRow::Table(idx) = row {
                        for (a, &b) in dt[idx * d..(idx + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data().to_vec();
                let scale = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).expect("len");
                let dp = slot!(*pred);
                for ((d, &pv), &tv) in dp.iter_mut().zip(&p).zip(target.data()) {
                    *d += (pv - tv) * scale;
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
