//! Batched layer kernels on `N × C × H × W` buffers.

use super::tensor::{gemm, Mat, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let (ho, wo) = self.out_hw();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let (ho, wo) = self.out_hw();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                line[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y[n] = W · im2col(x[n]) + b`, with `W` shaped `out × (c·k·k)`.
pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, out_ch: usize, n: usize, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let (kk, hw) = (g.c * g.k * g.k, ho * wo);
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let xs = &x[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w];
        let ys = &mut y[s * out_ch * hw..(s + 1) * out_ch * hw];
        for (o, plane) in ys.chunks_mut(hw).enumerate() {
            plane.fill(b[o]);
        }
        let cols: &[T] = if g.pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        gemm(Mat::n(w, out_ch, kk), Mat::n(cols, kk, hw), T::one(), ys);
    }
}

/// Accumulates weight and bias gradients; writes the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    out_ch: usize,
    n: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    gw: &mut [T],
    gb: &mut [T],
    mut gx: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let (kk, hw) = (g.c * g.k * g.k, ho * wo);
    let chw = g.c * g.h * g.w;
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut gcol = if g.pointwise() || gx.is_none() { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let xs = &x[s * chw..(s + 1) * chw];
        let gys = &gy[s * out_ch * hw..(s + 1) * out_ch * hw];
        for (o, plane) in gys.chunks(hw).enumerate() {
            gb[o] += plane.iter().copied().sum::<T>();
        }
        let cols: &[T] = if g.pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        gemm(Mat::n(gys, out_ch, hw), Mat::t(cols, kk, hw), T::one(), gw);
        if let Some(gx) = gx.as_deref_mut() {
            let gxs = &mut gx[s * chw..(s + 1) * chw];
            if g.pointwise() {
                gemm(Mat::t(w, out_ch, kk), Mat::n(gys, out_ch, hw), T::one(), gxs);
            } else {
                gemm(Mat::t(w, out_ch, kk), Mat::n(gys, out_ch, hw), T::zero(), &mut gcol);
                g.col2im(&gcol, gxs);
            }
        }
    }
}

/// 2×2 max pooling with stride 2; records the flat argmax of each window.
pub(crate) fn maxpool_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T], y: &mut [T], idx: &mut [u32]) {
    let (ho, wo) = (h / 2, w / 2);
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx;
                    if xp[i] > xp[best] {
                        best = i;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                y[o] = xp[best];
                idx[o] = (p * h * w + best) as u32;
            }
        }
    }
}

pub(crate) fn upsample_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T], y: &mut [T]) {
    let w2 = 2 * w;
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * 4 * h * w..(p + 1) * 4 * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let v = xp[iy * w + ix];
                yp[2 * iy * w2 + 2 * ix] = v;
                yp[2 * iy * w2 + 2 * ix + 1] = v;
                yp[(2 * iy + 1) * w2 + 2 * ix] = v;
                yp[(2 * iy + 1) * w2 + 2 * ix + 1] = v;
            }
        }
    }
}

pub(crate) fn upsample_backward<T: Real>(planes: usize, h: usize, w: usize, gy: &[T], gx: &mut [T]) {
    let w2 = 2 * w;
    for p in 0..planes {
        let gp = &gy[p * 4 * h * w..(p + 1) * 4 * h * w];
        for iy in 0..h {
            for ix in 0..w {
                gx[p * h * w + iy * w + ix] += gp[2 * iy * w2 + 2 * ix]
                    + gp[2 * iy * w2 + 2 * ix + 1]
                    + gp[(2 * iy + 1) * w2 + 2 * ix]
                    + gp[(2 * iy + 1) * w2 + 2 * ix + 1];
            }
        }
    }
}

/// Normalized pixel-center coordinates `((j + 0.5) / w, (i + 0.5) / h)`.
pub(crate) fn grid<T: Real>(h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let mut gx = Vec::with_capacity(h * w);
    let mut gy = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            gx.push(T::of((j as f64 + 0.5) / w as f64));
            gy.push(T::of((i as f64 + 0.5) / h as f64));
        }
    }
    (gx, gy)
}

/// Softmax over each plane; returns probabilities and writes expected
/// normalized `(x, y)` per plane.
pub(crate) fn soft_argmax_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T], y: &mut [T]) -> Vec<T> {
    let (gx, gy) = grid::<T>(h, w);
    let hw = h * w;
    let mut prob = vec![T::zero(); planes * hw];
    for p in 0..planes {
        let xp = &x[p * hw..(p + 1) * hw];
        let pp = &mut prob[p * hw..(p + 1) * hw];
        let m = xp.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (q, &v) in pp.iter_mut().zip(xp) {
            *q = (v - m).exp();
            z += *q;
        }
        let (mut ex, mut ey) = (T::zero(), T::zero());
        for i in 0..hw {
            pp[i] = pp[i] / z;
            ex += pp[i] * gx[i];
            ey += pp[i] * gy[i];
        }
        y[2 * p] = ex;
        y[2 * p + 1] = ey;
    }
    prob
}

pub(crate) fn soft_argmax_backward<T: Real>(planes: usize, h: usize, w: usize, prob: &[T], gy: &[T], gx: &mut [T]) {
    let (cx, cy) = grid::<T>(h, w);
    let hw = h * w;
    for p in 0..planes {
        let pp = &prob[p * hw..(p + 1) * hw];
        let (ga, gb) = (gy[2 * p], gy[2 * p + 1]);
        let mean: T = (0..hw).map(|i| pp[i] * (ga * cx[i] + gb * cy[i])).sum();
        for i in 0..hw {
            gx[p * hw + i] += pp[i] * (ga * cx[i] + gb * cy[i] - mean);
        }
    }
}
