//! Loop kernels shared by the tape primitives.

use super::Element;

const NC: usize = 512;
const KC: usize = 128;

/// `c[m×n] (+)= op(a) · op(b)` in row-major storage.
///
/// `a` is `m×k` (`k×m` when `trans_a`), `b` is `k×n` (`n×k` when `trans_b`).
/// The summation order is fixed, so results do not depend on the caller.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if trans_b {
        let at;
        let a: &[T] = if trans_a {
            at = transpose(a, k, m);
            &at
        } else {
            a
        };
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let v = dot(ar, &b[j * k..(j + 1) * k]);
                c[i * n + j] += v;
            }
        }
        return;
    }
    let a_at = |i: usize, p: usize| if trans_a { a[p * m + i] } else { a[i * k + p] };

    for j0 in (0..n).step_by(NC) {
        let j1 = (j0 + NC).min(n);
        let w = j1 - j0;
        for p0 in (0..k).step_by(KC) {
            let p1 = (p0 + KC).min(k);
            let mut i = 0;
            while i + 4 <= m {
                let (head, tail) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
                let (r0, r1) = head.split_at_mut(n);
                let (r2, r3) = tail.split_at_mut(n);
                let c0 = &mut r0[j0..j1];
                let c1 = &mut r1[j0..j1];
                let c2 = &mut r2[j0..j1];
                let c3 = &mut r3[j0..j1];
                for p in p0..p1 {
                    let x0 = a_at(i, p);
                    let x1 = a_at(i + 1, p);
                    let x2 = a_at(i + 2, p);
                    let x3 = a_at(i + 3, p);
                    let brow = &b[p * n + j0..p * n + j1];
                    for j in 0..w {
                        let bv = brow[j];
                        c0[j] += x0 * bv;
                        c1[j] += x1 * bv;
                        c2[j] += x2 * bv;
                        c3[j] += x3 * bv;
                    }
                }
                i += 4;
            }
            while i < m {
                let crow = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let x = a_at(i, p);
                    let brow = &b[p * n + j0..p * n + j1];
                    for j in 0..w {
                        crow[j] += x * brow[j];
                    }
                }
                i += 1;
            }
        }
    }
}

/// Inner product with a fixed 16-lane summation order.
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const L: usize = 16;
    let mut acc = [T::zero(); L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    for v in acc {
        s += v;
    }
    s
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom { cin, h, w, kh, kw, stride, pad, ho, wo })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `cin×h×w` image into a `(cin·kh·kw)×(ho·wo)` column matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a column matrix back, accumulating into `x`.
pub fn col2im<T: Element>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn contiguous_strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for d in (0..dims.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * dims[d + 1];
    }
    s
}

/// Strides of `in_dims` laid over `out_dims`, zero along broadcast axes.
pub fn broadcast_strides(in_dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(in_dims);
    in_dims
        .iter()
        .zip(out_dims)
        .zip(base)
        .map(|((&i, &o), s)| if i == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Visits every index of `dims` in row-major order as
/// `(linear index, offset under sa, offset under sb)`.
pub fn visit2(dims: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = dims.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = dims[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer: usize = dims[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob, mut lin) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(lin, oa + j * ia, ob + j * ib);
            lin += 1;
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < dims[d] {
                break;
            }
            oa -= sa[d] * dims[d];
            ob -= sb[d] * dims[d];
            idx[d] = 0;
        }
    }
}

/// Like [`visit2`], but hands out maximal trailing runs along which each
/// operand either advances by one or stays put:
/// `f(linear start, offset a, offset b, run length, step a, step b)`.
pub fn visit_runs(
    dims: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let fits = |s: usize, len: usize, mode: Option<usize>| match mode {
        None if s == len => Some(1),
        None if s == 0 => Some(0),
        Some(1) if s == len => Some(1),
        Some(0) if s == 0 => Some(0),
        _ => None,
    };
    let (mut len, mut ia, mut ib, mut k) = (1usize, None, None, dims.len());
    while k > 0 {
        let d = k - 1;
        if dims[d] != 1 {
            match (fits(sa[d], len, ia), fits(sb[d], len, ib)) {
                (Some(x), Some(y)) => {
                    ia = Some(x);
                    ib = Some(y);
                    len *= dims[d];
                }
                _ => break,
            }
        }
        k -= 1;
    }
    let (ia, ib) = (ia.unwrap_or(1), ib.unwrap_or(1));
    if k == 0 {
        f(0, 0, 0, len, ia, ib);
    } else {
        visit2(&dims[..k], &sa[..k], &sb[..k], |l, oa, ob| f(l * len, oa, ob, len, ia, ib));
    }
}

/// `out[j] = f(a[oa + j·IA], b[ob + j·IB])` over one run.
#[inline]
fn run_map<T: Copy, const IA: usize, const IB: usize>(out: &mut [T], a: &[T], oa: usize, b: &[T], ob: usize, f: impl Fn(T, T) -> T) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = f(a[oa + j * IA], b[ob + j * IB]);
    }
}

/// Broadcasting element-wise map over runs from [`visit_runs`].
#[allow(clippy::too_many_arguments)]
pub fn map_run<T: Copy>(out: &mut [T], a: &[T], oa: usize, ia: usize, b: &[T], ob: usize, ib: usize, f: impl Fn(T, T) -> T) {
    match (ia, ib) {
        (1, 1) => run_map::<T, 1, 1>(out, a, oa, b, ob, f),
        (1, _) => run_map::<T, 1, 0>(out, a, oa, b, ob, f),
        (_, 1) => run_map::<T, 0, 1>(out, a, oa, b, ob, f),
        _ => run_map::<T, 0, 0>(out, a, oa, b, ob, f),
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn run_acc<T: Element, const IACC: usize, const IA: usize, const IB: usize>(
    acc: &mut [T],
    oacc: usize,
    g: &[T],
    a: &[T],
    oa: usize,
    b: &[T],
    ob: usize,
    f: impl Fn(T, T, T) -> T,
) {
    if IACC == 0 {
        let mut s = T::zero();
        for (j, &gv) in g.iter().enumerate() {
            s += f(gv, a[oa + j * IA], b[ob + j * IB]);
        }
        acc[oacc] += s;
    } else {
        let dst = &mut acc[oacc..oacc + g.len()];
        for (j, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(gv, a[oa + j * IA], b[ob + j * IB]);
        }
    }
}

/// `acc[oacc + j·iacc] += f(g[j], a[oa + j·ia], b[ob + j·ib])` over one run.
#[allow(clippy::too_many_arguments)]
pub fn acc_run<T: Element>(
    acc: &mut [T],
    oacc: usize,
    iacc: usize,
    g: &[T],
    a: &[T],
    oa: usize,
    ia: usize,
    b: &[T],
    ob: usize,
    ib: usize,
    f: impl Fn(T, T, T) -> T,
) {
    match (iacc, ia, ib) {
        (1, 1, 1) => run_acc::<T, 1, 1, 1>(acc, oacc, g, a, oa, b, ob, f),
        (1, 1, 0) => run_acc::<T, 1, 1, 0>(acc, oacc, g, a, oa, b, ob, f),
        (1, 0, 1) => run_acc::<T, 1, 0, 1>(acc, oacc, g, a, oa, b, ob, f),
        (1, 0, 0) => run_acc::<T, 1, 0, 0>(acc, oacc, g, a, oa, b, ob, f),
        (0, 1, 1) => run_acc::<T, 0, 1, 1>(acc, oacc, g, a, oa, b, ob, f),
        (0, 1, 0) => run_acc::<T, 0, 1, 0>(acc, oacc, g, a, oa, b, ob, f),
        (0, 0, 1) => run_acc::<T, 0, 0, 1>(acc, oacc, g, a, oa, b, ob, f),
        _ => run_acc::<T, 0, 0, 0>(acc, oacc, g, a, oa, b, ob, f),
    }
}

/// One axis of a half-pixel-centred bilinear resize: for every destination
/// index, the two source taps and the weight of the upper tap.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w1 = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}
