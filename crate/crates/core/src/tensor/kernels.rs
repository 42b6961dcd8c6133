//! Raw slice kernels behind the tape operations.

use crate::scalar::Scalar;

const TILE: usize = 512;

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// Dot product with eight independent lanes; the summation order is fixed.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
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
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample (`cin×h×w`) into a `(cin·k·k) × (ho·wo)` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let out = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into `grad_input`.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (r, p) = (g.rows(), g.pixels());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut scratch = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); r * p] };
    for s in 0..g.n {
        let sample = &input[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        let cols: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, &mut scratch);
            &scratch
        };
        let out_s = &mut out[s * g.cout * p..(s + 1) * g.cout * p];
        for t0 in (0..p).step_by(TILE) {
            let t1 = (t0 + TILE).min(p);
            for co in 0..g.cout {
                let dst = &mut out_s[co * p + t0..co * p + t1];
                dst.fill(bias[co]);
                let wrow = &weight[co * r..(co + 1) * r];
                for (ri, &wv) in wrow.iter().enumerate() {
                    axpy(wv, &cols[ri * p + t0..ri * p + t1], dst);
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let (r, p) = (g.rows(), g.pixels());
    let mut gw = vec![T::zero(); g.cout * r];
    let mut gb = vec![T::zero(); g.cout];
    let mut gi = need_input.then(|| vec![T::zero(); input.len()]);
    let mut scratch = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); r * p] };
    let mut dcols = vec![T::zero(); if need_input { r * p } else { 0 }];
    let mut partial = vec![T::zero(); g.cout * r];

    for s in 0..g.n {
        let sample = &input[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        let cols: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, &mut scratch);
            &scratch
        };
        let go = &grad_out[s * g.cout * p..(s + 1) * g.cout * p];

        for (co, b) in gb.iter_mut().enumerate() {
            *b = *b + go[co * p..(co + 1) * p].iter().copied().sum::<T>();
        }

        partial.fill(T::zero());
        if need_input {
            dcols.fill(T::zero());
        }
        for t0 in (0..p).step_by(TILE) {
            let t1 = (t0 + TILE).min(p);
            for co in 0..g.cout {
                let grow = &go[co * p + t0..co * p + t1];
                for ri in 0..r {
                    let c = &cols[ri * p + t0..ri * p + t1];
                    partial[co * r + ri] = partial[co * r + ri] + dot(grow, c);
                }
            }
            if need_input {
                for ri in 0..r {
                    let dst = &mut dcols[ri * p + t0..ri * p + t1];
                    for co in 0..g.cout {
                        axpy(weight[co * r + ri], &go[co * p + t0..co * p + t1], dst);
                    }
                }
            }
        }
        axpy(T::one(), &partial, &mut gw);

        if let Some(gi) = gi.as_mut() {
            let dst = &mut gi[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                axpy(T::one(), &dcols, dst);
            } else {
                col2im(g, &dcols, dst);
            }
        }
    }
    ConvGrads { input: gi, weight: gw, bias: gb }
}

/// 2×2/stride-2 max pooling. Returns values and the flat input index of each
/// window's maximum (first in row-major scan on ties).
pub(crate) fn max_pool_forward<T: Scalar>(shape: (usize, usize, usize, usize), input: &[T]) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, w) = shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_forward<T: Scalar>(shape: (usize, usize, usize, usize), input: &[T]) -> Vec<T> {
    let (n, c, h, w) = shape;
    let w2 = 2 * w;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let o = 2 * y * w2 + 2 * x;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + w2] = v;
                dst[o + w2 + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(shape: (usize, usize, usize, usize), grad_out: &[T]) -> Vec<T> {
    let (n, c, h, w) = shape;
    let w2 = 2 * w;
    let mut gi = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * w2 + 2 * x;
                dst[y * w + x] = (src[o] + src[o + 1]) + (src[o + w2] + src[o + w2 + 1]);
            }
        }
    }
    gi
}

/// Two-channel softmax over axis 1, stabilized by subtracting the pixel max.
pub(crate) fn softmax2_forward<T: Scalar>(n: usize, hw: usize, logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for s in 0..n {
        let base = s * 2 * hw;
        for i in 0..hw {
            let (a, b) = (logits[base + i], logits[base + hw + i]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let z = ea + eb;
            out[base + i] = ea / z;
            out[base + hw + i] = eb / z;
        }
    }
    out
}

pub(crate) fn softmax2_backward<T: Scalar>(n: usize, hw: usize, probs: &[T], grad_out: &[T]) -> Vec<T> {
    let mut gi = vec![T::zero(); probs.len()];
    for s in 0..n {
        let base = s * 2 * hw;
        for i in 0..hw {
            let (p0, p1) = (probs[base + i], probs[base + hw + i]);
            let (g0, g1) = (grad_out[base + i], grad_out[base + hw + i]);
            let inner = g0 * p0 + g1 * p1;
            gi[base + i] = p0 * (g0 - inner);
            gi[base + hw + i] = p1 * (g1 - inner);
        }
    }
    gi
}
