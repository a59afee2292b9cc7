//! Forward and adjoint kernels shared by the graph and by plain-tensor code
//! (baseline solvers, synthesis). Nothing here records gradients.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Tensor};

// ---------------------------------------------------------------- broadcasting

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Offset into an input of shape `inp` for each element of the broadcast
/// output shape `out`.
pub fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        let oi = i + rank - inp.len();
        strides[oi] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let n = numel(out);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_vec(a.shape(), data)?.with_dtype(a.dtype()));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let oa = broadcast_offsets(&out, a.shape());
    let ob = broadcast_offsets(&out, b.shape());
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    let dtype = if out.as_slice() == a.shape() {
        a.dtype()
    } else {
        DType::Real64
    };
    Ok(Tensor::from_vec(&out, data)?.with_dtype(dtype))
}

/// Sums a gradient of the broadcast output shape back onto `target` shape.
pub fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let offs = broadcast_offsets(out, target);
    let mut r = vec![0.0; numel(target)];
    for (g, &o) in grad.iter().zip(&offs) {
        r[o] += g;
    }
    r
}

// ---------------------------------------------------------------- gemm

/// `c = alpha * a @ b + beta * c` on strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    debug_assert!(
        m == 0 || k == 0 || a.len() > ((m - 1) as isize * rsa + (k - 1) as isize * csa) as usize
    );
    debug_assert!(
        k == 0 || n == 0 || b.len() > ((k - 1) as isize * rsb + (n - 1) as isize * csb) as usize
    );
    debug_assert!(
        m == 0 || n == 0 || c.len() > ((m - 1) as isize * rsc + (n - 1) as isize * csc) as usize
    );
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        0.0,
        &mut c,
        n as isize,
        1,
    );
    Tensor::from_vec(&[m, n], c)
}

/// Gradients of `a @ b` given the output gradient.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    // ga = g @ b^T
    gemm(
        m,
        n,
        k,
        g,
        n as isize,
        1,
        b.data(),
        1,
        n as isize,
        0.0,
        &mut ga,
        k as isize,
        1,
    );
    // gb = a^T @ g
    gemm(
        k,
        m,
        n,
        a.data(),
        1,
        k as isize,
        g,
        n as isize,
        1,
        0.0,
        &mut gb,
        n as isize,
        1,
    );
    (ga, gb)
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wshape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || wshape.len() != 4 || x[1] != wshape[1] || wshape[2] != wshape[3] {
            return Err(Error::shape("conv2d", x, wshape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let k = wshape[2];
        let (h, w) = (x[2], x[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", x, wshape));
        }
        Ok(ConvGeom {
            n: x[0],
            cin: x[1],
            h,
            w,
            cout: wshape[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Output positions `o` in `0..n_out` whose input index `o * stride + k - pad`
/// falls inside `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(n_out);
    let hi = if n_in + pad > k {
        (n_in + pad - k).div_ceil(stride).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_range(g.h, g.ho, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = valid_range(g.w, g.wo, g.stride, kx, g.pad);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                dst[..y0 * g.wo].fill(0.0);
                dst[y1 * g.wo..].fill(0.0);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    drow[..x0].fill(0.0);
                    drow[x1..].fill(0.0);
                    let ix0 = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for (d, v) in drow[x0..x1]
                            .iter_mut()
                            .zip(src[ix0..].iter().step_by(g.stride))
                        {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_range(g.h, g.ho, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = valid_range(g.w, g.wo, g.stride, kx, g.pad);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo + x0..oy * g.wo + x1];
                    let ix0 = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in drow[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` on two reusable buffers of the given lengths. Their contents are
/// stale, so callers must overwrite every entry before reading.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let (ba, bb) = &mut *s.borrow_mut();
        if ba.len() < a {
            ba.resize(a, 0.0);
        }
        if bb.len() < b {
            bb.resize(b, 0.0);
        }
        f(&mut ba[..a], &mut bb[..b])
    })
}

pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let (rows, ncol) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.n * g.cout * ncol];
    let xin = g.cin * g.h * g.w;
    with_scratch(rows * ncol, 0, |cols, _| {
        for s in 0..g.n {
            im2col(&g, &x.data()[s * xin..(s + 1) * xin], cols);
            let o = &mut out[s * g.cout * ncol..(s + 1) * g.cout * ncol];
            if let Some(b) = b {
                for (co, chunk) in o.chunks_mut(ncol).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            gemm(
                g.cout,
                rows,
                ncol,
                w.data(),
                rows as isize,
                1,
                cols,
                ncol as isize,
                1,
                beta,
                o,
                ncol as isize,
                1,
            );
        }
    });
    Tensor::from_vec(&g.out_shape(), out)
}

/// Returns `(dx, dw, db)` for the given output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (rows, ncol) = (g.rows(), g.cols());
    let xin = g.cin * g.h * g.w;
    let mut dw = vec![0.0; g.cout * rows];
    let mut db = vec![0.0; g.cout];
    let mut dx = if need_dx {
        Some(vec![0.0; x.numel()])
    } else {
        None
    };
    let dcols_len = if need_dx { rows * ncol } else { 0 };
    with_scratch(rows * ncol, dcols_len, |cols, dcols| {
        for s in 0..g.n {
            let go = &gout[s * g.cout * ncol..(s + 1) * g.cout * ncol];
            for (co, chunk) in go.chunks(ncol).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
            im2col(&g, &x.data()[s * xin..(s + 1) * xin], cols);
            // dw += go @ cols^T
            gemm(
                g.cout,
                ncol,
                rows,
                go,
                ncol as isize,
                1,
                cols,
                1,
                ncol as isize,
                1.0,
                &mut dw,
                rows as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                // dcols = w^T @ go
                gemm(
                    rows,
                    g.cout,
                    ncol,
                    w.data(),
                    1,
                    rows as isize,
                    go,
                    ncol as isize,
                    1,
                    0.0,
                    dcols,
                    ncol as isize,
                    1,
                );
                col2im(&g, dcols, &mut dx[s * xin..(s + 1) * xin]);
            }
        }
    });
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------- resampling

pub fn upsample_nearest(x: &Tensor, f: usize) -> Result<Tensor> {
    if x.rank() < 2 || f == 0 {
        return Err(Error::invalid(format!(
            "upsample: bad input {:?} factor {f}",
            x.shape()
        )));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let outer = x.numel() / (h * w).max(1);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; outer * ho * wo];
    for o in 0..outer {
        let src = &x.data()[o * h * w..(o + 1) * h * w];
        let dst = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_vec(&shape, out)
}

pub fn upsample_nearest_backward(in_shape: &[usize], g: &[f64], f: usize) -> Vec<f64> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let outer = numel(in_shape) / (h * w).max(1);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        let src = &g[o * ho * wo..(o + 1) * ho * wo];
        let dst = &mut out[o * h * w..(o + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / f) * w + xx / f] += src[y * wo + xx];
            }
        }
    }
    out
}

// ---------------------------------------------------------------- fft

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_inplace(buf: &mut [Complex64], len: usize, inverse: bool) {
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    });
    plan.process(buf);
}

/// Orthonormal 2-D DFT over the last two axes of a paired-plane tensor
/// (`[.., 2, H, W]`).
pub fn fft2(x: &Tensor, inverse: bool) -> Result<Tensor> {
    let r = x.rank();
    if r < 3 || x.shape()[r - 3] != 2 {
        return Err(Error::invalid(format!(
            "fft2: shape {:?} is not paired-plane complex storage [.., 2, H, W]",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let plane = h * w;
    if plane == 0 {
        return Ok(x.clone());
    }
    let outer = x.numel() / (2 * plane);
    let scale = 1.0 / (plane as f64).sqrt();
    let mut out = vec![0.0; x.numel()];
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];
    let mut tbuf = vec![Complex64::new(0.0, 0.0); plane];
    for o in 0..outer {
        let re = &x.data()[(2 * o) * plane..(2 * o + 1) * plane];
        let im = &x.data()[(2 * o + 1) * plane..(2 * o + 2) * plane];
        for i in 0..plane {
            buf[i] = Complex64::new(re[i], im[i]);
        }
        fft_inplace(&mut buf, w, inverse);
        for y in 0..h {
            for xx in 0..w {
                tbuf[xx * h + y] = buf[y * w + xx];
            }
        }
        fft_inplace(&mut tbuf, h, inverse);
        let (ore, oim) = out[(2 * o) * plane..(2 * o + 2) * plane].split_at_mut(plane);
        for y in 0..h {
            for xx in 0..w {
                let v = tbuf[xx * h + y] * scale;
                ore[y * w + xx] = v.re;
                oim[y * w + xx] = v.im;
            }
        }
    }
    Ok(Tensor::from_vec(x.shape(), out)?.with_dtype(DType::Complex64Pair))
}

// ---------------------------------------------------------------- warp

#[derive(Clone, Copy)]
struct Sample {
    y0: usize,
    x0: usize,
    wy: f64,
    wx: f64,
    // derivative of the clamped coordinate w.r.t. the offset (0 or 1)
    cy: f64,
    cx: f64,
}

fn sample_coord(p: usize, off: f64, n: usize) -> (usize, f64, f64) {
    let hi = (n - 1) as f64;
    let raw = p as f64 + off;
    let (c, d) = if raw <= 0.0 {
        (0.0, if raw < 0.0 { 0.0 } else { 1.0 })
    } else if raw >= hi {
        (hi, if raw > hi { 0.0 } else { 1.0 })
    } else {
        (raw, 1.0)
    };
    if n == 1 {
        return (0, 0.0, 0.0);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, c - i0 as f64, d)
}

fn warp_check(img: &Tensor, field: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if img.rank() != 4 || field.rank() != 4 {
        return Err(Error::shape("warp", img.shape(), field.shape()));
    }
    let [n, c, h, w] = [
        img.shape()[0],
        img.shape()[1],
        img.shape()[2],
        img.shape()[3],
    ];
    if field.shape() != [n, 2, h, w] {
        return Err(Error::shape("warp", img.shape(), field.shape()));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("warp: empty image"));
    }
    if field.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("warp: NaN in displacement field".into()));
    }
    Ok((n, c, h, w))
}

fn samples_for(field: &[f64], h: usize, w: usize) -> Vec<Sample> {
    let plane = h * w;
    let mut s = Vec::with_capacity(plane);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (y0, wy, cy) = sample_coord(y, field[i], h);
            let (x0, wx, cx) = sample_coord(x, field[plane + i], w);
            s.push(Sample {
                y0,
                x0,
                wy,
                wx,
                cy,
                cx,
            });
        }
    }
    s
}

#[inline]
fn corners(src: &[f64], s: &Sample, h: usize, w: usize) -> (f64, f64, f64, f64) {
    let y1 = if h > 1 { s.y0 + 1 } else { s.y0 };
    let x1 = if w > 1 { s.x0 + 1 } else { s.x0 };
    (
        src[s.y0 * w + s.x0],
        src[s.y0 * w + x1],
        src[y1 * w + s.x0],
        src[y1 * w + x1],
    )
}

/// Bilinear resampling `out(p) = img(p + v(p))` with coordinates clamped to
/// the image rectangle. `field` is `[N, 2, H, W]` holding `(dy, dx)`.
pub fn warp(img: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = warp_check(img, field)?;
    let plane = h * w;
    let mut out = vec![0.0; img.numel()];
    for b in 0..n {
        let samples = samples_for(&field.data()[b * 2 * plane..(b + 1) * 2 * plane], h, w);
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let src = &img.data()[off..off + plane];
            let dst = &mut out[off..off + plane];
            for (d, s) in dst.iter_mut().zip(&samples) {
                let (i00, i01, i10, i11) = corners(src, s, h, w);
                *d = (1.0 - s.wy) * ((1.0 - s.wx) * i00 + s.wx * i01)
                    + s.wy * ((1.0 - s.wx) * i10 + s.wx * i11);
            }
        }
    }
    Ok(Tensor::from_vec(img.shape(), out)?.with_dtype(img.dtype()))
}

/// Returns `(d img, d field)`.
pub fn warp_backward(img: &Tensor, field: &Tensor, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = warp_check(img, field)?;
    let plane = h * w;
    let mut gimg = vec![0.0; img.numel()];
    let mut gfield = vec![0.0; field.numel()];
    for b in 0..n {
        let samples = samples_for(&field.data()[b * 2 * plane..(b + 1) * 2 * plane], h, w);
        let gf = &mut gfield[b * 2 * plane..(b + 1) * 2 * plane];
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let src = &img.data()[off..off + plane];
            let gsrc = &g[off..off + plane];
            let gi = &mut gimg[off..off + plane];
            let y1d = usize::from(h > 1);
            let x1d = usize::from(w > 1);
            for (p, s) in samples.iter().enumerate() {
                let go = gsrc[p];
                if go == 0.0 {
                    continue;
                }
                let (i00, i01, i10, i11) = corners(src, s, h, w);
                let (y1, x1) = (s.y0 + y1d, s.x0 + x1d);
                gi[s.y0 * w + s.x0] += go * (1.0 - s.wy) * (1.0 - s.wx);
                gi[s.y0 * w + x1] += go * (1.0 - s.wy) * s.wx;
                gi[y1 * w + s.x0] += go * s.wy * (1.0 - s.wx);
                gi[y1 * w + x1] += go * s.wy * s.wx;
                let dvy = (1.0 - s.wx) * (i10 - i00) + s.wx * (i11 - i01);
                let dvx = (1.0 - s.wy) * (i01 - i00) + s.wy * (i11 - i10);
                gf[p] += go * dvy * s.cy;
                gf[plane + p] += go * dvx * s.cx;
            }
        }
    }
    Ok((gimg, gfield))
}

// ---------------------------------------------------------------- box filter

/// Zero-padded `window x window` moving sum over the last two axes.
pub fn box_filter(x: &Tensor, window: usize) -> Result<Tensor> {
    if window % 2 == 0 || x.rank() < 2 {
        return Err(Error::invalid(format!(
            "box_filter: window {window} must be odd, input {:?} rank >= 2",
            x.shape()
        )));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let plane = h * w;
    let outer = if plane == 0 { 0 } else { x.numel() / plane };
    let rad = window / 2;
    let mut out = vec![0.0; x.numel()];
    let mut tmp = vec![0.0; plane];
    let mut prefix = vec![0.0; h.max(w) + 1];
    for o in 0..outer {
        let src = &x.data()[o * plane..(o + 1) * plane];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            prefix[0] = 0.0;
            for i in 0..w {
                prefix[i + 1] = prefix[i] + row[i];
            }
            for xx in 0..w {
                let lo = xx.saturating_sub(rad);
                let hi = (xx + rad + 1).min(w);
                tmp[y * w + xx] = prefix[hi] - prefix[lo];
            }
        }
        let dst = &mut out[o * plane..(o + 1) * plane];
        for xx in 0..w {
            prefix[0] = 0.0;
            for i in 0..h {
                prefix[i + 1] = prefix[i] + tmp[i * w + xx];
            }
            for y in 0..h {
                let lo = y.saturating_sub(rad);
                let hi = (y + rad + 1).min(h);
                dst[y * w + xx] = prefix[hi] - prefix[lo];
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

// ---------------------------------------------------------------- layout ops

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(format!(
            "concat axis {axis} out of range for {:?}",
            first.shape()
        )));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::from_vec(&shape, out)
}

pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::invalid(format!(
            "narrow: axis {axis} range {start}..{} out of bounds for {:?}",
            start + len,
            x.shape()
        )));
    }
    let outer = numel(&x.shape()[..axis]);
    let inner = numel(&x.shape()[axis + 1..]);
    let full = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(&shape, out)
}

pub fn narrow_backward(in_shape: &[usize], axis: usize, start: usize, g: &[f64]) -> Vec<f64> {
    let outer = numel(&in_shape[..axis]);
    let inner = numel(&in_shape[axis + 1..]);
    let full = in_shape[axis];
    let len = g.len() / (outer * inner).max(1);
    let mut out = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

/// Zero padding of the last two axes by `[top, bottom, left, right]`.
pub fn pad2d(x: &Tensor, pads: [usize; 4]) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::invalid("pad2d: rank < 2"));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    let outer = numel(&x.shape()[..r - 2]);
    let mut out = vec![0.0; outer * ho * wo];
    for o in 0..outer {
        for y in 0..h {
            let src = &x.data()[(o * h + y) * w..(o * h + y + 1) * w];
            let d = (o * ho + y + pads[0]) * wo + pads[2];
            out[d..d + w].copy_from_slice(src);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_vec(&shape, out)
}

pub fn pad2d_backward(in_shape: &[usize], pads: [usize; 4], g: &[f64]) -> Vec<f64> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    let outer = numel(&in_shape[..r - 2]);
    let mut out = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        for y in 0..h {
            let s = (o * ho + y + pads[0]) * wo + pads[2];
            out[(o * h + y) * w..(o * h + y + 1) * w].copy_from_slice(&g[s..s + w]);
        }
    }
    out
}
