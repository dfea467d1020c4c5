//! Dense row-major tensors and the handful of kernels the engine needs.
//!
//! Everything here is a pure function of its inputs. Matrix products go
//! through a single-threaded blocked GEMM, so a given build on a given
//! machine always reproduces the same bits.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. The engine runs in `f32`; `f64` exists for
/// finite-difference gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a_strides.0 >= 0 && a_strides.1 >= 0);
                assert!(b_strides.0 >= 0 && b_strides.1 >= 0);
                assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
                assert!(a.len() >= span(m, k, a_strides), "gemm: a too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: b too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: c too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the three views were bounds-checked above and `c`
                // is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("extents must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "extents must be positive, got {dims:?}"
        );
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let n: usize = dims.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self::new(dims, data).expect("positive extents")
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_dims(other.dims(), "zip_map")?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::shape(format!(
                "{what}: expected {dims:?}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Contiguous sub-block along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Self {
        let inner: usize = self.dims[1..].iter().product();
        let dims = if self.dims.len() == 1 {
            vec![1]
        } else {
            self.dims[1..].to_vec()
        };
        Self {
            dims,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// `len` consecutive entries of the leading axis starting at `start`.
    pub fn narrow_outer(&self, start: usize, len: usize) -> Self {
        let inner: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = len;
        Self {
            dims,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        }
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            p.expect_dims(first.dims(), "stack")?;
            data.extend_from_slice(p.data());
        }
        Self::new(dims, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn bits_eq(&self, other: &Self) -> bool
    where
        T: ToBits,
    {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }
}

/// Bitwise view of a scalar, for reproducibility assertions.
pub trait ToBits {
    fn to_bits_u64(self) -> u64;
}

impl ToBits for f32 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl ToBits for f64 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        d => Err(Error::shape(format!("{what}: expected a matrix, got dims {d:?}"))),
    }
}

/// Plain matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: lhs {m}x{k}, rhs {k2}x{n}"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    Tensor::new(vec![m, n], out)
}

/// In-place stable softmax of one row of `scale * x`.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], scale: T) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| m.max(v * scale));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax of `scale · x` along the last axis, computed with max subtraction.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if !x.is_finite() || !scale.is_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let last = *x.dims().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(last) {
        softmax_row(row, scale);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeMode {
    Nearest,
    #[default]
    Bilinear,
}

impl std::str::FromStr for ResizeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nearest" => Ok(ResizeMode::Nearest),
            "bilinear" => Ok(ResizeMode::Bilinear),
            other => Err(format!("unknown resize mode {other:?}")),
        }
    }
}

/// Source index and weight pairs for one output axis.
fn resize_taps(src: usize, dst: usize, mode: ResizeMode) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| match mode {
            ResizeMode::Nearest => {
                let s = ((i as f64 * ratio).floor() as usize).min(src - 1);
                (s, s, 0.0)
            }
            ResizeMode::Bilinear => {
                // Sample centres sit at (i + 0.5) * ratio - 0.5, clamped to the edge.
                let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            }
        })
        .collect()
}

/// Resize the trailing two axes of `x` to `target`. Leading axes are treated as
/// independent planes.
pub fn resize<T: Scalar>(
    x: &Tensor<T>,
    target: (usize, usize),
    mode: ResizeMode,
) -> Result<Tensor<T>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::shape(format!("resize target {th}x{tw} has a zero extent")));
    }
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "resize needs at least 2 axes, got {:?}",
            x.dims()
        )));
    }
    let r = x.rank();
    let (h, w) = (x.dims()[r - 2], x.dims()[r - 1]);
    if (h, w) == (th, tw) {
        return Ok(x.clone());
    }
    let rows = resize_taps(h, th, mode);
    let cols = resize_taps(w, tw, mode);
    let planes = x.len() / (h * w);
    let mut out = Vec::with_capacity(planes * th * tw);
    for plane in x.data().chunks(h * w) {
        for &(r0, r1, fy) in &rows {
            let fy = T::from_f64_lossy(fy);
            for &(c0, c1, fx) in &cols {
                let fx = T::from_f64_lossy(fx);
                let v = match mode {
                    ResizeMode::Nearest => plane[r0 * w + c0],
                    ResizeMode::Bilinear => {
                        let top = plane[r0 * w + c0] * (T::one() - fx) + plane[r0 * w + c1] * fx;
                        let bot = plane[r1 * w + c0] * (T::one() - fx) + plane[r1 * w + c1] * fx;
                        top * (T::one() - fy) + bot * fy
                    }
                };
                out.push(v);
            }
        }
    }
    let mut dims = x.dims().to_vec();
    dims[r - 2] = th;
    dims[r - 1] = tw;
    Tensor::new(dims, out)
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d) V`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (nq, d) = matrix_dims(q, "attention Q")?;
    let (nk, dk) = matrix_dims(k, "attention K")?;
    let (nv, dv) = matrix_dims(v, "attention V")?;
    if d != dk {
        return Err(Error::shape(format!(
            "attention: Q width {d} differs from K width {dk}"
        )));
    }
    if nk != nv {
        return Err(Error::shape(format!(
            "attention: K has {nk} rows but V has {nv}"
        )));
    }
    let probs = attention_probs(q.data(), k.data(), nq, nk, d);
    let mut out = vec![T::zero(); nq * dv];
    T::gemm(
        nq,
        nk,
        dv,
        T::one(),
        &probs,
        (nk as isize, 1),
        v.data(),
        (dv as isize, 1),
        T::zero(),
        &mut out,
        (dv as isize, 1),
    );
    Tensor::new(vec![nq, dv], out)
}

/// Row-softmaxed `Q Kᵀ / √d` for row-major `q` (nq×d) and `k` (nk×d).
pub(crate) fn attention_probs<T: Scalar>(q: &[T], k: &[T], nq: usize, nk: usize, d: usize) -> Vec<T> {
    let mut scores = vec![T::zero(); nq * nk];
    T::gemm(
        nq,
        d,
        nk,
        T::one(),
        q,
        (d as isize, 1),
        k,
        (1, d as isize),
        T::zero(),
        &mut scores,
        (nk as isize, 1),
    );
    let scale = T::one() / T::from_usize(d).expect("d").sqrt();
    for row in scores.chunks_mut(nk) {
        softmax_row(row, scale);
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let eye = t2(&[&[1., 0.], &[0., 1.]]);
        let a = t2(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(vec![2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let b = t2(&[&[5., 6.], &[7., 8.]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![0f32, 0.]).unwrap(), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![1f64, 0.]).unwrap(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.7311).abs() < 1e-4 && (s.data()[1] - 0.2689).abs() < 1e-4);
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![1f64, 0.]).unwrap(), 1000.0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::new(vec![2], vec![f32::NAN, 0.]).unwrap();
        assert!(matches!(softmax_lastdim(&x, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn resize_constant_fields() {
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear] {
            let r = resize(&Tensor::<f32>::ones(vec![2, 2]), (4, 4), mode).unwrap();
            assert_eq!(r.dims(), &[4, 4]);
            assert!(r.data().iter().all(|&v| v == 1.0));
            let r = resize(&Tensor::<f32>::full(vec![1, 1], 0.3), (3, 5), mode).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn nearest_downsample_picks_cell_corners() {
        // Checkerboard with distinct values so we can see which source was read.
        let x = Tensor::<f32>::from_fn(vec![4, 4], |i| i as f32);
        let r = resize(&x, (2, 2), ResizeMode::Nearest).unwrap();
        // floor(dst * 4/2) -> rows/cols {0, 2}
        assert_eq!(r.data(), &[0., 2., 8., 10.]);
        let cb = Tensor::<f32>::from_fn(vec![4, 4], |i| ((i / 4 + i % 4) % 2) as f32);
        let r = resize(&cb, (2, 2), ResizeMode::Nearest).unwrap();
        assert_eq!(r.data(), &[0., 0., 0., 0.]);
    }

    #[test]
    fn bilinear_halving_is_box_average() {
        let x = Tensor::<f64>::from_fn(vec![2, 4], |i| i as f64);
        let r = resize(&x, (1, 2), ResizeMode::Bilinear).unwrap();
        assert_eq!(r.data(), &[(0. + 1. + 4. + 5.) / 4., (2. + 3. + 6. + 7.) / 4.]);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let x = Tensor::<f32>::ones(vec![2, 2]);
        assert!(matches!(resize(&x, (0, 2), ResizeMode::Nearest), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = t2(&[&[1., -2.], &[0.5, 3.], &[0., 0.]]);
        let k = t2(&[&[0.3, 0.7]]);
        let v = t2(&[&[4., 5., 6.]]);
        let out = attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, &[4., 5., 6.]);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = t2(&[&[1., 2.], &[-3., 0.5]]);
        let k = t2(&[&[0.1, 0.2], &[0.1, 0.2], &[0.1, 0.2]]);
        let v = t2(&[&[1., 0.], &[2., 3.], &[6., 3.]]);
        let out = attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-6 && (row[1] - 2.0).abs() < 1e-6);
        }
    }

    fn attention_loop_oracle(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize, dv: usize) -> Vec<f64> {
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..nk {
                for c in 0..dv {
                    out[i * dv + c] += w[j] / z * v[j * dv + c];
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_scalar_loop() {
        let q = [0.3, -1.2, 0.8, 0.1, -0.5, 0.9];
        let k = [1.1, 0.4, -0.7, 0.2, 0.05, -1.3];
        let v = [0.6, -0.2, 1.5, 0.3, -0.9, 0.7];
        let expected = attention_loop_oracle(&q, &k, &v, 3, 3, 2, 2);
        let out = attention(
            &Tensor::new(vec![3, 2], q.map(|x| x as f32).to_vec()).unwrap(),
            &Tensor::new(vec![3, 2], k.map(|x| x as f32).to_vec()).unwrap(),
            &Tensor::new(vec![3, 2], v.map(|x| x as f32).to_vec()).unwrap(),
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rejects_mismatches() {
        let q = Tensor::<f32>::zeros(vec![2, 3]);
        let k = Tensor::<f32>::zeros(vec![2, 2]);
        let v = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(attention(&q, &k, &v).is_err());
        let k = Tensor::<f32>::zeros(vec![2, 3]);
        let v = Tensor::<f32>::zeros(vec![3, 2]);
        assert!(attention(&q, &k, &v).is_err());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-3.0f32..3.0, n)
    }

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one(x in vec_strategy(12), scale in -50.0f32..50.0) {
            let t = Tensor::new(vec![3, 4], x).unwrap();
            let s = softmax_lastdim(&t, scale).unwrap();
            for row in s.data().chunks(4) {
                let total: f32 = row.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn resize_same_size_is_bitwise_identity(x in vec_strategy(20)) {
            let t = Tensor::new(vec![4, 5], x).unwrap();
            for mode in [ResizeMode::Nearest, ResizeMode::Bilinear] {
                prop_assert!(resize(&t, (4, 5), mode).unwrap().bits_eq(&t));
            }
        }

        #[test]
        fn attention_invariant_to_key_value_permutation(
            q in vec_strategy(6), k in vec_strategy(8), v in vec_strategy(12), shift in 1usize..4
        ) {
            let qt = Tensor::new(vec![3, 2], q).unwrap();
            let base = attention(&qt, &Tensor::new(vec![4, 2], k.clone()).unwrap(), &Tensor::new(vec![4, 3], v.clone()).unwrap()).unwrap();
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let kp: Vec<f32> = perm.iter().flat_map(|&i| k[i * 2..i * 2 + 2].to_vec()).collect();
            let vp: Vec<f32> = perm.iter().flat_map(|&i| v[i * 3..i * 3 + 3].to_vec()).collect();
            let out = attention(&qt, &Tensor::new(vec![4, 2], kp).unwrap(), &Tensor::new(vec![4, 3], vp).unwrap()).unwrap();
            prop_assert!(out.max_abs_diff(&base) < 1e-6);
        }

        #[test]
        fn matmul_is_associative(
            a in proptest::collection::vec(-1.0f32..1.0, 16),
            b in proptest::collection::vec(-1.0f32..1.0, 16),
            c in proptest::collection::vec(-1.0f32..1.0, 16),
        ) {
            let (a, b, c) = (
                Tensor::new(vec![4, 4], a).unwrap(),
                Tensor::new(vec![4, 4], b).unwrap(),
                Tensor::new(vec![4, 4], c).unwrap(),
            );
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-4);
        }
    }
}
