//! Dense row-major tensors and the numeric kernels shared by the plain
//! inference path and the differentiation graph.
//!
//! Convolution is cross-correlation (no kernel flip), NCHW layout, weights
//! `[F, C, kh, kw]`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable in tensors and graphs.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Whether an operand of [`gemm`] is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c (m×n) = op(a) · op(b) + (accumulate ? c : 0)` for row-major buffers.
///
/// `a` is stored as `m×k` (or `k×m` when transposed), `b` as `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: lengths checked above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Returns the single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Self {
        assert!(!self.shape.is_empty() && start <= end && end <= self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn gather_outer(&self, idx: &[usize]) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Self::zeros(&[m, n]);
        gemm(m, k, n, &self.data, Trans::No, &other.data, Trans::No, &mut out.data, false);
        Ok(out)
    }

    /// `[m×k] · [n×k]ᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = Self::zeros(&[m, n]);
        gemm(m, k, n, &self.data, Trans::No, &other.data, Trans::Yes, &mut out.data, false);
        Ok(out)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }
}

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel} larger than padded input {padded}"),
            ));
        }
        if !(padded - kernel).is_multiple_of(self.stride) {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "non-integral output extent: ({input} + 2*{} - {kernel}) / {}",
                    self.padding, self.stride
                ),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Geometry of one convolution call, resolved against concrete shapes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], geom: ConvGeom) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and FCkk weight, got {x_shape:?} / {w_shape:?}"),
            ));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs weight channels {}", x_shape[1], w_shape[1]),
            ));
        }
        let oh = geom.out_extent(x_shape[2], w_shape[2])?;
        let ow = geom.out_extent(x_shape[3], w_shape[3])?;
        Ok(Self {
            n: x_shape[0],
            c: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            f: w_shape[0],
            kh: w_shape[2],
            kw: w_shape[3],
            oh,
            ow,
            geom,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Columns `ox` whose kernel window `[ox·s − pad, ox·s − pad + kw)` lies
/// inside `0..w`.
fn interior(d: &ConvDims) -> std::ops::Range<usize> {
    let (s, pad) = (d.geom.stride, d.geom.padding);
    let lo = pad.div_ceil(s).min(d.ow);
    let hi = if d.w + pad >= d.kw {
        ((d.w + pad - d.kw) / s + 1).min(d.ow)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Visits every in-bounds (patch offset, image offset) run of one output
/// row `oy`: `f(col_offset, img_offset, len)` where `len` is `kw` on the
/// interior and 1 at the borders.
#[inline]
fn for_each_run(d: &ConvDims, oy: usize, inner: &std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
    let (s, pad) = (d.geom.stride as isize, d.geom.padding as isize);
    let ck = d.patch();
    for c in 0..d.c {
        for ky in 0..d.kh {
            let iy = oy as isize * s + ky as isize - pad;
            if iy < 0 || iy as usize >= d.h {
                continue;
            }
            let src = c * d.h * d.w + iy as usize * d.w;
            let col = (c * d.kh + ky) * d.kw;
            for ox in 0..d.ow {
                let base = (oy * d.ow + ox) * ck + col;
                let x0 = ox as isize * s - pad;
                if inner.contains(&ox) {
                    f(base, src + x0 as usize, d.kw);
                } else {
                    for kx in 0..d.kw {
                        let ix = x0 + kx as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            f(base + kx, src + ix as usize, 1);
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `x` into `[N·P, C·kh·kw]`, one row per output position.
pub(crate) fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let (p, ck) = (d.positions(), d.patch());
    let mut cols = vec![T::zero(); d.n * p * ck];
    let plane = d.c * d.h * d.w;
    let inner = interior(d);
    par::for_each_chunk_mut(&mut cols, p * ck, |n, block| {
        let img = &x[n * plane..(n + 1) * plane];
        for oy in 0..d.oh {
            for_each_run(d, oy, &inner, |dst, src, len| {
                block[dst..dst + len].copy_from_slice(&img[src..src + len]);
            });
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters-adds `[N·P, C·kh·kw]` rows back into NCHW.
pub(crate) fn col2im<T: Scalar>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let (p, ck) = (d.positions(), d.patch());
    let plane = d.c * d.h * d.w;
    let mut out = vec![T::zero(); d.n * plane];
    let inner = interior(d);
    par::for_each_chunk_mut(&mut out, plane, |n, img| {
        let block = &cols[n * p * ck..(n + 1) * p * ck];
        for oy in 0..d.oh {
            for_each_run(d, oy, &inner, |src, dst, len| {
                for (o, v) in img[dst..dst + len].iter_mut().zip(&block[src..src + len]) {
                    *o = *o + *v;
                }
            });
        }
    });
    out
}

/// `[N, F, P]` <-> `[N·P, F]` layout change.
pub(crate) fn nfp_to_rows<T: Scalar>(src: &[T], n: usize, f: usize, p: usize) -> Vec<T> {
    let mut rows = vec![T::zero(); n * p * f];
    par::for_each_chunk_mut(&mut rows, p * f, |s, block| {
        let img = &src[s * f * p..(s + 1) * f * p];
        for fi in 0..f {
            for pi in 0..p {
                block[pi * f + fi] = img[fi * p + pi];
            }
        }
    });
    rows
}

pub(crate) fn rows_to_nfp<T: Scalar>(rows: &[T], n: usize, f: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * f * p];
    par::for_each_chunk_mut(&mut out, f * p, |s, img| {
        let block = &rows[s * p * f..(s + 1) * p * f];
        for pi in 0..p {
            for fi in 0..f {
                img[fi * p + pi] = block[pi * f + fi];
            }
        }
    });
    out
}

/// Cross-correlation `y = x ⋆ w + b`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let d = ConvDims::resolve(x.shape(), w.shape(), geom)?;
    if let Some(b) = b {
        if b.shape() != [d.f] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), d.f),
            ));
        }
    }
    let (p, ck) = (d.positions(), d.patch());
    let cols = im2col(x.data(), &d);
    let mut rows = vec![T::zero(); d.n * p * d.f];
    gemm(d.n * p, ck, d.f, &cols, Trans::No, w.data(), Trans::Yes, &mut rows, false);
    let mut out = rows_to_nfp(&rows, d.n, d.f, p);
    if let Some(b) = b {
        add_channel_bias(&mut out, b.data(), d.f, p);
    }
    Tensor::new(vec![d.n, d.f, d.oh, d.ow], out)
}

pub(crate) fn add_channel_bias<T: Scalar>(out: &mut [T], b: &[T], f: usize, p: usize) {
    for (i, chunk) in out.chunks_mut(p).enumerate() {
        let bv = b[i % f];
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
}

/// Gradient of a convolution with respect to its input (the transposed
/// convolution), producing `[N, C, h, w]` from `[N, F, oh, ow]`.
pub fn conv2d_input_grad<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    input_hw: (usize, usize),
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let ws = w.shape();
    if dy.rank() != 4 || ws.len() != 4 || dy.shape()[1] != ws[0] {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("{:?} with weight {:?}", dy.shape(), ws),
        ));
    }
    let n = dy.shape()[0];
    let d = ConvDims::resolve(&[n, ws[1], input_hw.0, input_hw.1], ws, geom)?;
    if (d.oh, d.ow) != (dy.shape()[2], dy.shape()[3]) {
        return Err(Error::shape(
            "conv_transpose2d",
            format!(
                "output extent {:?} inconsistent with input {:?}",
                &dy.shape()[2..],
                input_hw
            ),
        ));
    }
    let (p, ck) = (d.positions(), d.patch());
    let rows = nfp_to_rows(dy.data(), n, d.f, p);
    let mut cols = vec![T::zero(); n * p * ck];
    gemm(n * p, d.f, ck, &rows, Trans::No, w.data(), Trans::No, &mut cols, false);
    Tensor::new(vec![n, d.c, d.h, d.w], col2im(&cols, &d))
}

/// Gradient of a convolution with respect to its weight:
/// `dW[f, ck] = Σ_{n,p} dy[n,f,p] · cols(x)[n,p,ck]`.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    w_shape: &[usize],
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let d = ConvDims::resolve(x.shape(), w_shape, geom)?;
    if dy.shape() != [d.n, d.f, d.oh, d.ow] {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!("dy {:?}", dy.shape()),
        ));
    }
    let (p, ck) = (d.positions(), d.patch());
    let cols = im2col(x.data(), &d);
    let rows = nfp_to_rows(dy.data(), d.n, d.f, p);
    let mut dw = vec![T::zero(); d.f * ck];
    gemm(d.f, d.n * p, ck, &rows, Trans::Yes, &cols, Trans::No, &mut dw, false);
    Tensor::new(w_shape.to_vec(), dw)
}
