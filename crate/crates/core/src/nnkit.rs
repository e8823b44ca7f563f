//! Minimal differentiable kernels: convolution, activations, bilinear resize,
//! channel concatenation and parameter initialisation.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training/inference and in `f64` for finite-difference verification.
//! Backward passes are explicit per op; networks compose them by hand.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorio::{FlowField, ImagePlane, ParamStore};

/// Floating point element type used by the kernels.
pub trait Real:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Takes a buffer of at least `len` elements from the per-thread pool.
    /// Contents are unspecified.
    fn take_scratch(len: usize) -> Vec<Self>;

    /// Returns a buffer to the per-thread pool.
    fn give_scratch(buf: Vec<Self>);
    /// `C = A·B + beta·C` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

const SCRATCH_POOL: usize = 4;

macro_rules! impl_real {
    ($t:ty, $gemm:path, $pool:ident) => {
        thread_local! {
            static $pool: std::cell::RefCell<Vec<Vec<$t>>> = const { std::cell::RefCell::new(Vec::new()) };
        }

        impl Real for $t {
            fn take_scratch(len: usize) -> Vec<Self> {
                let mut buf = $pool.with(|p| p.borrow_mut().pop()).unwrap_or_default();
                if buf.len() < len {
                    buf.resize(len, 0.0);
                }
                buf
            }

            fn give_scratch(buf: Vec<Self>) {
                $pool.with(|p| {
                    let mut p = p.borrow_mut();
                    if p.len() < SCRATCH_POOL {
                        p.push(buf);
                    }
                });
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every element the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, POOL_F32);
impl_real!(f64, matrixmultiply::dgemm, POOL_F64);

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if n * c * h * w == 0 {
            return Err(Error::ShapeMismatch(format!("empty tensor {n}x{c}x{h}x{w}")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::filled(n, c, h, w, T::zero())
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: T) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.h * self.w;
        let off = (n * self.c + c) * hw;
        &self.data[off..off + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.h * self.w;
        let off = (n * self.c + c) * hw;
        &mut self.data[off..off + hw]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.c * self.h * self.w;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.c * self.h * self.w;
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.dims(), other.dims(), "zip_map dims");
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims(), other.dims(), "add_assign dims");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Channel range `[start, start + len)` of every batch item.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.c, "narrow_channels out of range");
        let hw = self.plane_len();
        let mut data = Vec::with_capacity(self.n * len * hw);
        for n in 0..self.n {
            let item = self.item(n);
            data.extend_from_slice(&item[start * hw..(start + len) * hw]);
        }
        Tensor4 {
            n: self.n,
            c: len,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Single-item tensor from an interleaved image.
    pub fn from_image(img: &ImagePlane) -> Self {
        let (h, w, ch) = img.dims();
        let src = img.data();
        let mut t = Self::zeros(1, ch, h, w);
        for c in 0..ch {
            let plane = t.plane_mut(0, c);
            for (i, p) in plane.iter_mut().enumerate() {
                *p = T::from_f64(src[i * ch + c] as f64);
            }
        }
        t
    }

    /// Interleaved image from batch item 0 (values narrowed to `f32`).
    pub fn to_image(&self) -> Result<ImagePlane> {
        let mut data = vec![0f32; self.c * self.h * self.w];
        for c in 0..self.c {
            for (i, v) in self.plane(0, c).iter().enumerate() {
                data[i * self.c + c] = v.as_f64() as f32;
            }
        }
        ImagePlane::new(self.h, self.w, self.c, data)
    }

    pub fn from_flow(flow: &FlowField) -> Self {
        let (h, w) = flow.dims();
        let mut t = Self::zeros(1, 2, h, w);
        let uv = flow.data();
        for i in 0..h * w {
            t.data[i] = T::from_f64(uv[2 * i] as f64);
            t.data[h * w + i] = T::from_f64(uv[2 * i + 1] as f64);
        }
        t
    }

    pub fn to_flow(&self) -> Result<FlowField> {
        if self.c != 2 {
            return Err(Error::ShapeMismatch(format!("flow tensor has {} channels", self.c)));
        }
        let hw = self.plane_len();
        let mut uv = vec![0f32; hw * 2];
        for i in 0..hw {
            uv[2 * i] = self.data[i].as_f64() as f32;
            uv[2 * i + 1] = self.data[hw + i].as_f64() as f32;
        }
        FlowField::new(self.h, self.w, uv)
    }
}

/// Concatenates along channels. All inputs share `n`, `h`, `w`.
pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
    let (n, h, w) = (first.n, first.h, first.w);
    if let Some(p) = parts.iter().find(|p| (p.n, p.h, p.w) != (n, h, w)) {
        return Err(Error::DimMismatch(format!(
            "concat: {:?} vs {:?}",
            (n, h, w),
            (p.n, p.h, p.w)
        )));
    }
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(ni));
        }
    }
    Ok(Tensor4 { n, c, h, w, data })
}

/// Inverse of [`concat_channels`].
pub fn split_channels<T: Real>(t: &Tensor4<T>, sizes: &[usize]) -> Vec<Tensor4<T>> {
    assert_eq!(sizes.iter().sum::<usize>(), t.c, "split sizes");
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = t.narrow_channels(start, len);
            start += len;
            part
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// Geometry of a square-kernel convolution with same-style padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation: 1,
            padding: Padding::Zero,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::ShapeMismatch(format!("invalid conv spec {self:?}")));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::ShapeMismatch(format!("conv with zero channels {self:?}")));
        }
        Ok(())
    }

    /// Padding on each side; keeps `H×W` for stride 1.
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let p = self.pad();
        ((h + 2 * p - span) / self.stride + 1, (w + 2 * p - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.col_rows()
    }

    pub fn fan_in(&self) -> usize {
        self.col_rows()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

/// Unfolds one batch item (`in_ch × h × w`) into `col_rows × (ho·wo)`.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, cols: &mut [T]) {
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.pad() as isize);
    let hw_out = ho * wo;
    for ci in 0..spec.in_ch {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let off_x = (kx * d) as isize - p;
                let off_y = (ky * d) as isize - p;
                for oy in 0..ho {
                    let iy = (oy * s) as isize + off_y;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy_c = match spec.padding {
                        Padding::Zero if iy < 0 || iy >= h as isize => {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        _ => iy.clamp(0, h as isize - 1) as usize,
                    };
                    let srow = &src[iy_c * w..(iy_c + 1) * w];
                    if s == 1 {
                        // Valid output range where ix = ox + off_x is in bounds.
                        let lo = (-off_x).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - off_x).clamp(lo as isize, wo as isize) as usize;
                        let (left, edge) = match spec.padding {
                            Padding::Zero => (T::zero(), T::zero()),
                            Padding::Replicate => (srow[0], srow[w - 1]),
                        };
                        drow[..lo].iter_mut().for_each(|v| *v = left);
                        if hi > lo {
                            let a = (lo as isize + off_x) as usize;
                            drow[lo..hi].copy_from_slice(&srow[a..a + hi - lo]);
                        }
                        drow[hi..].iter_mut().for_each(|v| *v = edge);
                    } else {
                        for (ox, v) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + off_x;
                            *v = if ix >= 0 && ix < w as isize {
                                srow[ix as usize]
                            } else {
                                match spec.padding {
                                    Padding::Zero => T::zero(),
                                    Padding::Replicate => srow[ix.clamp(0, w as isize - 1) as usize],
                                }
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back and accumulates into `gx`.
fn col2im<T: Real>(cols: &[T], h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, gx: &mut [T]) {
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.pad() as isize);
    let hw_out = ho * wo;
    for ci in 0..spec.in_ch {
        let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let off_x = (kx * d) as isize - p;
                let off_y = (ky * d) as isize - p;
                for oy in 0..ho {
                    let iy = (oy * s) as isize + off_y;
                    if spec.padding == Padding::Zero && (iy < 0 || iy >= h as isize) {
                        continue;
                    }
                    let iy = iy.clamp(0, h as isize - 1) as usize;
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    let drow = &mut dst[iy * w..(iy + 1) * w];
                    if s == 1 {
                        let lo = (-off_x).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - off_x).clamp(lo as isize, wo as isize) as usize;
                        if hi > lo {
                            let a = (lo as isize + off_x) as usize;
                            for (dv, &g) in drow[a..a + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *dv += g;
                            }
                        }
                        if spec.padding == Padding::Replicate {
                            for &g in &srow[..lo] {
                                drow[0] += g;
                            }
                            for &g in &srow[hi..] {
                                drow[w - 1] += g;
                            }
                        }
                        continue;
                    }
                    for (ox, &g) in srow.iter().enumerate() {
                        let ix = (ox * s) as isize + off_x;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += g;
                        } else if spec.padding == Padding::Replicate {
                            drow[ix.clamp(0, w as isize - 1) as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_args<T: Real>(x: &Tensor4<T>, w: &[T], b: &[T], spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if x.c != spec.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            spec.in_ch, x.c
        )));
    }
    if w.len() != spec.weight_len() || b.len() != spec.out_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {} / bias {} do not match {:?}",
            w.len(),
            b.len(),
            spec
        )));
    }
    let span = spec.dilation * (spec.kernel - 1) + 1;
    if x.h + 2 * spec.pad() < span || x.w + 2 * spec.pad() < span {
        return Err(Error::ShapeMismatch(format!("input {}x{} too small for {:?}", x.h, x.w, spec)));
    }
    Ok(())
}

/// Cross-correlation with dilation and stride. Weights are `[out, in, k, k]`.
pub fn conv2d_forward<T: Real>(x: &Tensor4<T>, w: &[T], b: &[T], spec: &ConvSpec) -> Result<Tensor4<T>> {
    check_conv_args(x, w, b, spec)?;
    let (ho, wo) = spec.out_dims(x.h, x.w);
    let hw = ho * wo;
    let kk = spec.col_rows();
    let mut out = Tensor4::zeros(x.n, spec.out_ch, ho, wo);
    let mut cols = if spec.is_pointwise() { Vec::new() } else { T::take_scratch(kk * hw) };
    for ni in 0..x.n {
        let item = x.item(ni);
        let col_ref: &[T] = if spec.is_pointwise() {
            item
        } else {
            im2col(item, x.h, x.w, spec, ho, wo, &mut cols);
            &cols
        };
        let o = out.item_mut(ni);
        for (co, bias) in b.iter().enumerate() {
            o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = *bias);
        }
        T::gemm(spec.out_ch, kk, hw, w, kk, 1, col_ref, hw, 1, T::one(), o, hw, 1);
    }
    T::give_scratch(cols);
    Ok(out)
}

/// Gradients of [`conv2d_forward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_w: Vec<T>,
    pub grad_b: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor4<T>,
    x: &Tensor4<T>,
    w: &[T],
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let mut grad_w = vec![T::zero(); spec.weight_len()];
    let mut grad_b = vec![T::zero(); spec.out_ch];
    let grad_x = conv2d_backward_acc(grad_out, x, w, spec, &mut grad_w, &mut grad_b, true)?
        .expect("grad_x requested");
    Ok(ConvGrads {
        grad_x,
        grad_w,
        grad_b,
    })
}

/// Accumulates weight/bias gradients in place; returns the input gradient
/// when `need_grad_x`.
pub fn conv2d_backward_acc<T: Real>(
    grad_out: &Tensor4<T>,
    x: &Tensor4<T>,
    w: &[T],
    spec: &ConvSpec,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_grad_x: bool,
) -> Result<Option<Tensor4<T>>> {
    check_conv_args(x, w, &grad_b[..], spec)?;
    let (ho, wo) = spec.out_dims(x.h, x.w);
    if grad_out.dims() != (x.n, spec.out_ch, ho, wo) {
        return Err(Error::ShapeMismatch(format!(
            "conv grad_out {:?}, expected {:?}",
            grad_out.dims(),
            (x.n, spec.out_ch, ho, wo)
        )));
    }
    if grad_w.len() != spec.weight_len() {
        return Err(Error::ShapeMismatch("conv grad_w length".into()));
    }
    let hw = ho * wo;
    let kk = spec.col_rows();
    let mut cols = if spec.is_pointwise() { Vec::new() } else { T::take_scratch(kk * hw) };
    let needs_gcols = need_grad_x && !spec.is_pointwise();
    let mut gcols = if needs_gcols { T::take_scratch(kk * hw) } else { Vec::new() };
    let mut grad_x = if need_grad_x { Some(x.zeros_like()) } else { None };
    for ni in 0..x.n {
        let item = x.item(ni);
        let g = grad_out.item(ni);
        for (co, gb) in grad_b.iter_mut().enumerate() {
            *gb += g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        let col_ref: &[T] = if spec.is_pointwise() {
            item
        } else {
            im2col(item, x.h, x.w, spec, ho, wo, &mut cols);
            &cols
        };
        // grad_w (out × kk) += g (out × hw) · colsᵀ (hw × kk)
        T::gemm(spec.out_ch, hw, kk, g, hw, 1, col_ref, 1, hw, T::one(), grad_w, kk, 1);
        if let Some(gx) = grad_x.as_mut() {
            let gx_item = gx.item_mut(ni);
            if spec.is_pointwise() {
                // grad_x (kk × hw) = wᵀ · g, written straight into the item.
                T::gemm(kk, spec.out_ch, hw, w, 1, kk, g, hw, 1, T::zero(), gx_item, hw, 1);
            } else {
                T::gemm(kk, spec.out_ch, hw, w, 1, kk, g, hw, 1, T::zero(), &mut gcols, hw, 1);
                col2im(&gcols, x.h, x.w, spec, ho, wo, gx_item);
            }
        }
    }
    T::give_scratch(cols);
    T::give_scratch(gcols);
    Ok(grad_x)
}

// ---------------------------------------------------------------------------
// Pointwise activations

/// Per-channel PReLU: `x` for `x >= 0`, `slope[c]·x` otherwise.
pub fn prelu<T: Real>(x: &Tensor4<T>, slope: &[T]) -> Tensor4<T> {
    assert_eq!(slope.len(), x.c, "prelu slope per channel");
    let mut out = x.clone();
    for n in 0..x.n {
        for (c, &a) in slope.iter().enumerate() {
            for v in out.plane_mut(n, c) {
                if *v < T::zero() {
                    *v *= a;
                }
            }
        }
    }
    out
}

/// Returns the input gradient and accumulates into `grad_slope`.
pub fn prelu_backward<T: Real>(grad_out: &Tensor4<T>, x: &Tensor4<T>, slope: &[T], grad_slope: &mut [T]) -> Tensor4<T> {
    let mut gx = grad_out.clone();
    for n in 0..x.n {
        for (c, &a) in slope.iter().enumerate() {
            let xs = x.plane(n, c);
            let mut acc = T::zero();
            for (g, &xv) in gx.plane_mut(n, c).iter_mut().zip(xs) {
                if xv < T::zero() {
                    acc += *g * xv;
                    *g *= a;
                }
            }
            grad_slope[c] += acc;
        }
    }
    gx
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// Uses the forward output `y`.
pub fn sigmoid_backward<T: Real>(grad_out: &Tensor4<T>, y: &Tensor4<T>) -> Tensor4<T> {
    grad_out.zip_map(y, |g, s| g * s * (T::one() - s))
}

pub fn tanh<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Real>(grad_out: &Tensor4<T>, y: &Tensor4<T>) -> Tensor4<T> {
    grad_out.zip_map(y, |g, t| g * (T::one() - t * t))
}

pub fn softplus<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(softplus_scalar)
}

/// Uses the forward input `x`.
pub fn softplus_backward<T: Real>(grad_out: &Tensor4<T>, x: &Tensor4<T>) -> Tensor4<T> {
    grad_out.zip_map(x, |g, v| g * sigmoid_scalar(v))
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centres, no corner alignment)

#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn resize_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: T::from_f64(src - i0 as f64),
            }
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Tensor4<T> {
    if (out_h, out_w) == (x.h, x.w) {
        return x.clone();
    }
    let ty = resize_taps::<T>(x.h, out_h);
    let tx = resize_taps::<T>(x.w, out_w);
    let mut out = Tensor4::zeros(x.n, x.c, out_h, out_w);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                let r0 = &src[a.i0 * x.w..(a.i0 + 1) * x.w];
                let r1 = &src[a.i1 * x.w..(a.i1 + 1) * x.w];
                for (ox, b) in tx.iter().enumerate() {
                    let top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
                    let bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
                    dst[oy * out_w + ox] = top + (bot - top) * a.frac;
                }
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<T: Real>(grad_out: &Tensor4<T>, in_h: usize, in_w: usize) -> Tensor4<T> {
    if (in_h, in_w) == (grad_out.h, grad_out.w) {
        return grad_out.clone();
    }
    let ty = resize_taps::<T>(in_h, grad_out.h);
    let tx = resize_taps::<T>(in_w, grad_out.w);
    let mut gx = Tensor4::zeros(grad_out.n, grad_out.c, in_h, in_w);
    for n in 0..grad_out.n {
        for c in 0..grad_out.c {
            let g = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let v = g[oy * grad_out.w + ox];
                    let top = v * (T::one() - a.frac);
                    let bot = v * a.frac;
                    dst[a.i0 * in_w + b.i0] += top * (T::one() - b.frac);
                    dst[a.i0 * in_w + b.i1] += top * b.frac;
                    dst[a.i1 * in_w + b.i0] += bot * (T::one() - b.frac);
                    dst[a.i1 * in_w + b.i1] += bot * b.frac;
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Parameterised layers

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-uniform with the gain of a 0.25-slope PReLU, zero bias.
    Kaiming,
    /// All weights and biases zero.
    Zero,
}

pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Half-width of the uniform weight distribution for a given fan-in.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / ((1.0 + PRELU_INIT_SLOPE * PRELU_INIT_SLOPE) * fan_in as f64)).sqrt()
}

/// Convolution, optionally followed by a per-channel PReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub prelu: bool,
    pub init: Init,
}

/// Values saved by [`ConvLayer::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub input: Tensor4<T>,
    pub pre: Option<Tensor4<T>>,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, spec: ConvSpec, prelu: bool) -> Self {
        ConvLayer {
            name: name.into(),
            spec,
            prelu,
            init: Init::Kaiming,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zero;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn slope_name(&self) -> String {
        format!("{}.slope", self.name)
    }

    /// Adds this layer's tensors to `store`.
    pub fn init_into<R: Rng>(&self, store: &mut ParamStore<f32>, rng: &mut R) -> Result<()> {
        self.spec.validate()?;
        let n = self.spec.weight_len();
        let weights = match self.init {
            Init::Zero => vec![0.0; n],
            Init::Kaiming => {
                let bound = kaiming_bound(self.spec.fan_in());
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            }
        };
        store.insert(self.weight_name(), self.spec.weight_shape(), weights)?;
        store.insert(self.bias_name(), vec![self.spec.out_ch], vec![0.0; self.spec.out_ch])?;
        if self.prelu {
            store.insert(
                self.slope_name(),
                vec![self.spec.out_ch],
                vec![PRELU_INIT_SLOPE as f32; self.spec.out_ch],
            )?;
        }
        Ok(())
    }

    fn weights<'a, T: Real>(&self, p: &'a ParamStore<T>) -> Result<(&'a [T], &'a [T])> {
        let w = p.tensor_shaped(&self.weight_name(), &self.spec.weight_shape())?;
        let b = p.tensor_shaped(&self.bias_name(), &[self.spec.out_ch])?;
        Ok((w, b))
    }

    /// Forward pass without saving anything.
    pub fn infer<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (w, b) = self.weights(p)?;
        let pre = conv2d_forward(x, w, b, &self.spec)?;
        if self.prelu {
            let slope = p.tensor_shaped(&self.slope_name(), &[self.spec.out_ch])?;
            Ok(prelu(&pre, slope))
        } else {
            Ok(pre)
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, ConvCache<T>)> {
        let (w, b) = self.weights(p)?;
        let pre = conv2d_forward(x, w, b, &self.spec)?;
        if self.prelu {
            let slope = p.tensor_shaped(&self.slope_name(), &[self.spec.out_ch])?;
            let out = prelu(&pre, slope);
            Ok((
                out,
                ConvCache {
                    input: x.clone(),
                    pre: Some(pre),
                },
            ))
        } else {
            Ok((
                pre,
                ConvCache {
                    input: x.clone(),
                    pre: None,
                },
            ))
        }
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_grad_x`.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &ConvCache<T>,
        grad_out: &Tensor4<T>,
        grads: &mut ParamStore<T>,
        need_grad_x: bool,
    ) -> Result<Option<Tensor4<T>>> {
        let (w, _) = self.weights(p)?;
        let g_pre = match &cache.pre {
            Some(pre) => {
                let slope = p.tensor(&self.slope_name())?;
                let gs = grads.tensor_mut(&self.slope_name())?;
                prelu_backward(grad_out, pre, slope, gs)
            }
            None => grad_out.clone(),
        };
        let wi = grads
            .position(&self.weight_name())
            .ok_or_else(|| Error::MissingParams(self.weight_name()))?;
        let bi = grads
            .position(&self.bias_name())
            .ok_or_else(|| Error::MissingParams(self.bias_name()))?;
        let entries = grads.entries_mut();
        let (gw, gb) = if wi < bi {
            let (lo, hi) = entries.split_at_mut(bi);
            (&mut lo[wi].values, &mut hi[0].values)
        } else {
            let (lo, hi) = entries.split_at_mut(wi);
            (&mut hi[0].values, &mut lo[bi].values)
        };
        conv2d_backward_acc(&g_pre, &cache.input, w, &self.spec, gw, gb, need_grad_x)
    }
}

/// Deterministic parameter set for a list of layers.
pub fn init_params(layers: &[ConvLayer], seed: u64) -> Result<ParamStore<f32>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for layer in layers {
        layer.init_into(&mut store, &mut rng)?;
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// Finite-difference verification

pub mod gradcheck {
    //! Central-difference gradient verification helpers (64-bit).

    use rand::Rng;

    /// Outcome of checking one coordinate.
    #[derive(Clone, Copy, Debug)]
    pub struct Probe {
        pub index: usize,
        pub analytic: f64,
        pub numeric: f64,
    }

    impl Probe {
        pub fn rel_error(&self) -> f64 {
            let scale = self.analytic.abs().max(self.numeric.abs());
            if scale < 1e-10 {
                (self.analytic - self.numeric).abs()
            } else {
                (self.analytic - self.numeric).abs() / scale
            }
        }
    }

    /// Central difference of `f` at coordinate `i` with step `h`.
    pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }

    /// Compares `analytic` against central differences at `count` random
    /// coordinates (all coordinates when there are fewer), skipping any
    /// coordinate rejected by `skip`.
    pub fn probe_random<R: Rng>(
        f: &mut dyn FnMut(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
        count: usize,
        h: f64,
        rng: &mut R,
        skip: &dyn Fn(usize) -> bool,
    ) -> Vec<Probe> {
        let candidates: Vec<usize> = (0..x.len()).filter(|&i| !skip(i)).collect();
        let picks: Vec<usize> = if candidates.len() <= count {
            candidates
        } else {
            (0..count)
                .map(|_| candidates[rng.random_range(0..candidates.len())])
                .collect()
        };
        picks
            .into_iter()
            .map(|i| Probe {
                index: i,
                analytic: analytic[i],
                numeric: central_difference(f, x, i, h),
            })
            .collect()
    }

    /// Like [`probe_random`], but a draw whose central differences at `h`
    /// and `h/10` disagree by more than `kink_tol` (relative) has a
    /// non-differentiable point inside its stencil and is replaced by another
    /// draw. Returns the probes and the number of rejected draws.
    pub fn probe_random_smooth<R: Rng>(
        f: &mut dyn FnMut(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
        count: usize,
        h: f64,
        kink_tol: f64,
        rng: &mut R,
    ) -> (Vec<Probe>, usize) {
        let mut probes = Vec::with_capacity(count);
        let mut rejected = 0;
        while probes.len() < count.min(x.len()) && rejected <= 4 * count {
            let i = rng.random_range(0..x.len());
            let wide = central_difference(f, x, i, h);
            let narrow = central_difference(f, x, i, h / 10.0);
            if (wide - narrow).abs() > kink_tol * wide.abs().max(1.0) {
                rejected += 1;
                continue;
            }
            probes.push(Probe {
                index: i,
                analytic: analytic[i],
                numeric: wide,
            });
        }
        (probes, rejected)
    }

    /// Relative error whose denominator never drops below `floor`, for
    /// gradients small enough to meet the round-off noise of the loss.
    pub fn max_rel_error_floored(probes: &[Probe], floor: f64) -> f64 {
        probes
            .iter()
            .map(|p| (p.analytic - p.numeric).abs() / p.analytic.abs().max(p.numeric.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    pub fn max_rel_error(probes: &[Probe]) -> f64 {
        probes.iter().map(Probe::rel_error).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const RTOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
        let data = (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor4::new(n, c, h, w, data).unwrap()
    }

    fn random_vec(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_direct(x: &Tensor4<f64>, w: &[f64], b: &[f64], spec: &ConvSpec) -> Tensor4<f64> {
        let (ho, wo) = spec.out_dims(x.h, x.w);
        let k = spec.kernel;
        let p = spec.pad() as isize;
        let mut out = Tensor4::zeros(x.n, spec.out_ch, ho, wo);
        for n in 0..x.n {
            for co in 0..spec.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..spec.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - p;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - p;
                                    let inside = iy >= 0 && ix >= 0 && iy < x.h as isize && ix < x.w as isize;
                                    let v = match (inside, spec.padding) {
                                        (true, _) => x.at(n, ci, iy as usize, ix as usize),
                                        (false, Padding::Zero) => 0.0,
                                        (false, Padding::Replicate) => x.at(
                                            n,
                                            ci,
                                            iy.clamp(0, x.h as isize - 1) as usize,
                                            ix.clamp(0, x.w as isize - 1) as usize,
                                        ),
                                    };
                                    acc += w[((co * spec.in_ch + ci) * k + ky) * k + kx] * v;
                                }
                            }
                        }
                        *out.at_mut(n, co, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    fn specs() -> Vec<ConvSpec> {
        vec![
            ConvSpec::new(3, 4, 3),
            ConvSpec::new(2, 3, 3).dilation(2),
            ConvSpec::new(2, 2, 3).stride(2),
            ConvSpec::new(3, 2, 1),
            ConvSpec::new(2, 3, 3).padding(Padding::Replicate),
            ConvSpec::new(2, 2, 5).dilation(2).padding(Padding::Replicate),
        ]
    }

    #[test]
    fn pointwise_identity_conv() {
        let mut r = rng(1);
        let x = random_tensor(&mut r, 1, 3, 5, 4);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let y = conv2d_forward(&x, &w, &[0.0; 3], &ConvSpec::new(3, 3, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut r = rng(2);
        let x = random_tensor(&mut r, 1, 2, 6, 6);
        let y = conv2d_forward(&x, &[0.0; 18], &[0.75], &ConvSpec::new(2, 1, 3)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn single_pixel_matches_hand_dot_product() {
        let x = Tensor4::new(1, 1, 1, 1, vec![2.0]).unwrap();
        let w: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let y = conv2d_forward(&x, &w, &[0.5], &ConvSpec::new(1, 1, 3)).unwrap();
        // Only the centre tap sees the pixel: 5·2 + 0.5.
        assert_eq!(y.data, vec![10.5]);
    }

    #[test]
    fn forward_matches_direct_oracle() {
        let mut r = rng(3);
        for spec in specs() {
            let x = random_tensor(&mut r, 2, spec.in_ch, 7, 6);
            let w = random_vec(&mut r, spec.weight_len());
            let b = random_vec(&mut r, spec.out_ch);
            let fast = conv2d_forward(&x, &w, &b, &spec).unwrap();
            let slow = conv_direct(&x, &w, &b, &spec);
            assert_eq!(fast.dims(), slow.dims());
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12, "{spec:?}");
            }
        }
    }

    #[test]
    fn same_padding_preserves_dims() {
        for spec in specs().into_iter().filter(|s| s.stride == 1) {
            assert_eq!(spec.out_dims(9, 13), (9, 13));
        }
        assert_eq!(ConvSpec::new(1, 1, 3).stride(2).out_dims(9, 8), (5, 4));
    }

    #[test]
    fn conv_backward_gradcheck() {
        let mut r = rng(4);
        for spec in specs() {
            let x = random_tensor(&mut r, 1, spec.in_ch, 6, 5);
            let w = random_vec(&mut r, spec.weight_len());
            let b = random_vec(&mut r, spec.out_ch);
            let (ho, wo) = spec.out_dims(6, 5);
            let probe = random_vec(&mut r, spec.out_ch * ho * wo);
            let grad_out = Tensor4::new(1, spec.out_ch, ho, wo, probe.clone()).unwrap();
            let g = conv2d_backward(&grad_out, &x, &w, &spec).unwrap();

            let mut fx = |v: &[f64]| {
                let xt = Tensor4::new(1, spec.in_ch, 6, 5, v.to_vec()).unwrap();
                dot(&conv2d_forward(&xt, &w, &b, &spec).unwrap().data, &probe)
            };
            let px = probe_random(&mut fx, &x.data, &g.grad_x.data, 100, STEP, &mut r, &|_| false);
            assert!(max_rel_error(&px) < RTOL, "grad_x {spec:?}");

            let mut fw = |v: &[f64]| dot(&conv2d_forward(&x, v, &b, &spec).unwrap().data, &probe);
            let pw = probe_random(&mut fw, &w, &g.grad_w, 100, STEP, &mut r, &|_| false);
            assert!(max_rel_error(&pw) < RTOL, "grad_w {spec:?}");

            // Bias gradient is the spatial sum of grad_out.
            for co in 0..spec.out_ch {
                let s: f64 = grad_out.plane(0, co).iter().sum();
                assert!((g.grad_b[co] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut r = rng(5);
        let spec = ConvSpec::new(2, 3, 3);
        let x = random_tensor(&mut r, 1, 2, 4, 4);
        let w = random_vec(&mut r, spec.weight_len());
        let g = conv2d_backward(&Tensor4::zeros(1, 3, 4, 4), &x, &w, &spec).unwrap();
        assert!(g.grad_x.data.iter().chain(&g.grad_w).chain(&g.grad_b).all(|&v| v == 0.0));
    }

    #[test]
    fn prelu_values_and_gradcheck() {
        let x = Tensor4::new(1, 1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(prelu(&x, &[0.25]).data, vec![-0.25, 0.0, 2.0]);

        let mut r = rng(6);
        let x = random_tensor(&mut r, 1, 3, 6, 6);
        let slope = random_vec(&mut r, 3);
        let probe = random_vec(&mut r, x.data.len());
        let gout = Tensor4::new(1, 3, 6, 6, probe.clone()).unwrap();
        let mut gs = vec![0.0; 3];
        let gx = prelu_backward(&gout, &x, &slope, &mut gs);
        let mut fx = |v: &[f64]| dot(&prelu(&Tensor4::new(1, 3, 6, 6, v.to_vec()).unwrap(), &slope).data, &probe);
        let skip = |i: usize| x.data[i].abs() < 1e-6;
        let p = probe_random(&mut fx, &x.data, &gx.data, 100, STEP, &mut r, &skip);
        assert!(p.len() >= 100);
        assert!(max_rel_error(&p) < RTOL);
        let mut fs = |v: &[f64]| dot(&prelu(&x, v).data, &probe);
        let p = probe_random(&mut fs, &slope, &gs, 100, STEP, &mut r, &|_| false);
        assert!(max_rel_error(&p) < RTOL);
    }

    #[test]
    fn activation_reference_values() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert!((softplus_scalar(0.0f64) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!(softplus_scalar(-800.0f64) >= 0.0);
        assert_eq!(softplus_scalar(800.0f64), 800.0);
    }

    #[test]
    fn activation_gradchecks() {
        let mut r = rng(7);
        let x = random_tensor(&mut r, 1, 2, 8, 8).map(|v| v * 4.0);
        let probe = random_vec(&mut r, x.data.len());
        let gout = Tensor4::new(1, 2, 8, 8, probe.clone()).unwrap();
        let shape = |v: &[f64]| Tensor4::new(1, 2, 8, 8, v.to_vec()).unwrap();

        let gx = sigmoid_backward(&gout, &sigmoid(&x));
        let mut f = |v: &[f64]| dot(&sigmoid(&shape(v)).data, &probe);
        assert!(max_rel_error(&probe_random(&mut f, &x.data, &gx.data, 100, STEP, &mut r, &|_| false)) < RTOL);

        let gx = tanh_backward(&gout, &tanh(&x));
        let mut f = |v: &[f64]| dot(&tanh(&shape(v)).data, &probe);
        assert!(max_rel_error(&probe_random(&mut f, &x.data, &gx.data, 100, STEP, &mut r, &|_| false)) < RTOL);

        let gx = softplus_backward(&gout, &x);
        let mut f = |v: &[f64]| dot(&softplus(&shape(v)).data, &probe);
        assert!(max_rel_error(&probe_random(&mut f, &x.data, &gx.data, 100, STEP, &mut r, &|_| false)) < RTOL);
    }

    #[test]
    fn resize_identity_constant_and_ramp() {
        let mut r = rng(8);
        let x = random_tensor(&mut r, 1, 2, 5, 5);
        assert_eq!(bilinear_resize(&x, 5, 5), x);
        let k = Tensor4::filled(1, 1, 3, 4, 0.7);
        assert!(bilinear_resize(&k, 6, 8).data.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        // 1-D ramp [0, 1, 2, 3] upsampled ×2 with half-pixel centres.
        let ramp = Tensor4::new(1, 1, 1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = bilinear_resize(&ramp, 1, 8);
        assert_eq!(up.data, vec![0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }

    #[test]
    fn resize_gradcheck() {
        let mut r = rng(9);
        for &(ih, iw, oh, ow) in &[(4usize, 5usize, 8usize, 10usize), (7, 6, 4, 3), (3, 3, 5, 7)] {
            let x = random_tensor(&mut r, 1, 2, ih, iw);
            let probe = random_vec(&mut r, 2 * oh * ow);
            let gout = Tensor4::new(1, 2, oh, ow, probe.clone()).unwrap();
            let gx = bilinear_resize_backward(&gout, ih, iw);
            let mut f = |v: &[f64]| {
                dot(&bilinear_resize(&Tensor4::new(1, 2, ih, iw, v.to_vec()).unwrap(), oh, ow).data, &probe)
            };
            let p = probe_random(&mut f, &x.data, &gx.data, 100, STEP, &mut r, &|_| false);
            assert!(max_rel_error(&p) < RTOL);
        }
    }

    #[test]
    fn concat_split_inverse() {
        let mut r = rng(10);
        let a = random_tensor(&mut r, 2, 3, 4, 4);
        let b = random_tensor(&mut r, 2, 1, 4, 4);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.c, 4);
        let parts = split_channels(&cat, &[3, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = random_tensor(&mut r, 2, 1, 5, 4);
        assert!(matches!(concat_channels(&[&a, &bad]), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let layers = vec![
            ConvLayer::new("a", ConvSpec::new(3, 8, 3), true),
            ConvLayer::new("b", ConvSpec::new(8, 2, 3), false).zero_init(),
        ];
        let p1 = init_params(&layers, 11).unwrap();
        let p2 = init_params(&layers, 11).unwrap();
        let p3 = init_params(&layers, 12).unwrap();
        assert!(p1.bit_eq(&p2));
        assert!(!p1.bit_eq(&p3));
        let bound = kaiming_bound(27) as f32;
        assert!(p1.tensor("a.weight").unwrap().iter().all(|v| v.abs() <= bound));
        assert!(p1.tensor("a.bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(p1.tensor("a.slope").unwrap().iter().all(|&v| v == 0.25));
        assert!(p1.tensor("b.weight").unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(p1.get("a.weight").unwrap().shape, vec![8, 3, 3, 3]);
    }

    #[test]
    fn two_layer_network_jvp_matches_finite_difference() {
        let mut r = rng(13);
        let layers = [
            ConvLayer::new("l1", ConvSpec::new(2, 4, 3), true),
            ConvLayer::new("l2", ConvSpec::new(4, 2, 3).dilation(2), true),
        ];
        let params = init_params(&layers, 5).unwrap().cast::<f64>();
        let x = random_tensor(&mut r, 1, 2, 7, 7);
        let dir = random_vec(&mut r, x.data.len());
        let probe = random_vec(&mut r, 2 * 49);
        let net = |xin: &Tensor4<f64>| {
            let h = layers[0].infer(&params, xin).unwrap();
            layers[1].infer(&params, &h).unwrap()
        };
        let (h, c1) = layers[0].forward(&params, &x).unwrap();
        let (_, c2) = layers[1].forward(&params, &h).unwrap();
        let mut grads = params.zeros_like();
        let gout = Tensor4::new(1, 2, 7, 7, probe.clone()).unwrap();
        let gh = layers[1].backward(&params, &c2, &gout, &mut grads, true).unwrap().unwrap();
        let gx = layers[0].backward(&params, &c1, &gh, &mut grads, true).unwrap().unwrap();
        let analytic = dot(&gx.data, &dir);
        let eps = 1e-5;
        let shifted = |s: f64| {
            let v: Vec<f64> = x.data.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            dot(&net(&Tensor4::new(1, 2, 7, 7, v).unwrap()).data, &probe)
        };
        let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        assert!((analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let layer = ConvLayer::new("c", ConvSpec::new(3, 16, 3).dilation(2), true);
        let p = init_params(std::slice::from_ref(&layer), 3).unwrap();
        let mut r = rng(14);
        let x = random_tensor(&mut r, 1, 3, 12, 12).cast::<f32>();
        let a = layer.infer(&p, &x).unwrap();
        let b = layer.infer(&p, &x).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
