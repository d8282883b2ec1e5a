//! Forward and backward kernels for the graph operators.
//!
//! Convolutions run as im2col plus a SIMD GEMM; everything else is a plain
//! loop. All kernels are deterministic: fixed iteration order, no threading.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mask;

// ---- conv2d ----

/// Stride-1 convolution with zero padding `k/2`, kernels 1x1 or 3x3.
/// `x` is `[ci, h, w]`, `weight` is `[co, ci, k, k]`, `bias` is `[co]`.
pub(crate) fn conv2d_forward<S: Scalar>(
    x: &[S],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[S],
    co: usize,
    k: usize,
    bias: &[S],
) -> Vec<S> {
    let hw = h * w;
    let mut out = vec![S::zero(); co * hw];
    if k == 1 {
        // 1x1 conv is a channel-mixing matmul: W (co x ci) * X (ci x hw).
        S::gemm(
            co, ci, hw,
            S::one(),
            weight, ci as isize, 1,
            x, hw as isize, 1,
            S::zero(),
            &mut out, hw as isize, 1,
        );
    } else {
        let col = im2col(x, ci, h, w, k);
        let ck2 = ci * k * k;
        S::gemm(
            co, ck2, hw,
            S::one(),
            weight, ck2 as isize, 1,
            &col, hw as isize, 1,
            S::zero(),
            &mut out, hw as isize, 1,
        );
    }
    for o in 0..co {
        let b = bias[o];
        if b != S::zero() {
            for v in &mut out[o * hw..(o + 1) * hw] {
                *v += b;
            }
        }
    }
    out
}

/// Gradients of conv2d wrt input, weight and bias given `gout = dL/dout`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[S],
    co: usize,
    k: usize,
    gout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let hw = h * w;
    let mut db = vec![S::zero(); co];
    for o in 0..co {
        let mut acc = S::zero();
        for p in 0..hw {
            acc += gout[o * hw + p];
        }
        db[o] = acc;
    }

    let mut dx = vec![S::zero(); ci * hw];
    if k == 1 {
        let mut dw = vec![S::zero(); co * ci];
        // dW = gout (co x hw) * x^T (hw x ci)
        S::gemm(
            co, hw, ci,
            S::one(),
            gout, hw as isize, 1,
            x, 1, hw as isize,
            S::zero(),
            &mut dw, ci as isize, 1,
        );
        // dX = W^T (ci x co) * gout (co x hw)
        S::gemm(
            ci, co, hw,
            S::one(),
            weight, 1, ci as isize,
            gout, hw as isize, 1,
            S::zero(),
            &mut dx, hw as isize, 1,
        );
        (dx, dw, db)
    } else {
        let ck2 = ci * k * k;
        let col = im2col(x, ci, h, w, k);
        let mut dw = vec![S::zero(); co * ck2];
        // dW = gout (co x hw) * col^T (hw x ck2)
        S::gemm(
            co, hw, ck2,
            S::one(),
            gout, hw as isize, 1,
            &col, 1, hw as isize,
            S::zero(),
            &mut dw, ck2 as isize, 1,
        );
        // dCol = W^T (ck2 x co) * gout (co x hw), then scatter back.
        let mut dcol = vec![S::zero(); ck2 * hw];
        S::gemm(
            ck2, co, hw,
            S::one(),
            weight, 1, ck2 as isize,
            gout, hw as isize, 1,
            S::zero(),
            &mut dcol, hw as isize, 1,
        );
        col2im_add(&dcol, ci, h, w, k, &mut dx);
        (dx, dw, db)
    }
}

/// Unfold `[ci, h, w]` into `[ci*k*k, h*w]` with zero padding `k/2`.
fn im2col<S: Scalar>(x: &[S], ci: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = k / 2;
    let hw = h * w;
    let mut col = vec![S::zero(); ci * k * k * hw];
    for c in 0..ci {
        let xc = &x[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = ((c * k + dy) * k + dx) * hw;
                for oy in 0..h {
                    let iy = oy + dy;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst = row + oy * w;
                    let src = iy * w;
                    // valid ox range so that ix = ox + dx - pad stays in [0, w)
                    let lo = pad.saturating_sub(dx);
                    let hi = (w + pad - dx).min(w);
                    for ox in lo..hi {
                        col[dst + ox] = xc[src + ox + dx - pad];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of an im2col-shaped gradient back onto the input grid.
fn col2im_add<S: Scalar>(dcol: &[S], ci: usize, h: usize, w: usize, k: usize, dx_out: &mut [S]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        for dy in 0..k {
            for dxk in 0..k {
                let row = ((c * k + dy) * k + dxk) * hw;
                for oy in 0..h {
                    let iy = oy + dy;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let lo = pad.saturating_sub(dxk);
                    let hi = (w + pad - dxk).min(w);
                    for ox in lo..hi {
                        dx_out[c * hw + iy * w + ox + dxk - pad] += dcol[row + oy * w + ox];
                    }
                }
            }
        }
    }
}

// ---- pooling and upsampling ----

/// 2x2 non-overlapping average pooling; each output is the mean of its block,
/// accumulated in row-major block order.
pub(crate) fn avg_pool_2x2_forward<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64c(0.25);
    let mut out = vec![S::zero(); c * oh * ow];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = (2 * oy, 2 * ox);
                let s = xc[iy * w + ix] + xc[iy * w + ix + 1] + xc[(iy + 1) * w + ix] + xc[(iy + 1) * w + ix + 1];
                oc[oy * ow + ox] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_2x2_backward<S: Scalar>(gout: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64c(0.25);
    let mut dx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let gc = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let dc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gc[oy * ow + ox] * quarter;
                let (iy, ix) = (2 * oy, 2 * ox);
                dc[iy * w + ix] += g;
                dc[iy * w + ix + 1] += g;
                dc[(iy + 1) * w + ix] += g;
                dc[(iy + 1) * w + ix + 1] += g;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling: every input pixel fills a 2x2 block.
pub(crate) fn upsample_nearest_2x_forward<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); c * oh * ow];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let v = xc[iy * w + ix];
                let base = 2 * iy * ow + 2 * ix;
                oc[base] = v;
                oc[base + 1] = v;
                oc[base + ow] = v;
                oc[base + ow + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_2x_backward<S: Scalar>(gout: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let gc = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let dc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let base = 2 * iy * ow + 2 * ix;
                dc[iy * w + ix] = gc[base] + gc[base + 1] + gc[base + ow] + gc[base + ow + 1];
            }
        }
    }
    dx
}

// ---- pairwise smoothness ----

/// Packed upper triangle of a symmetric pairwise weight matrix. Entry `(j, k)`
/// with `j < k` holds the similarity between samples `j` and `k`; the diagonal
/// is implicit (self pairs contribute nothing to a squared difference).
#[derive(Clone, Debug)]
pub struct SimMatrix<S> {
    n: usize,
    upper: Vec<S>,
}

impl<S: Scalar> SimMatrix<S> {
    pub fn new(n: usize, upper: Vec<S>) -> Result<Self> {
        let want = n * n.saturating_sub(1) / 2;
        if upper.len() != want {
            return Err(Error::Shape {
                op: "sim_matrix",
                details: format!("n = {} wants {} packed entries, got {}", n, want, upper.len()),
            });
        }
        Ok(Self { n, upper })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn pair_index(&self, j: usize, k: usize) -> usize {
        debug_assert!(j < k && k < self.n);
        j * self.n - j * (j + 1) / 2 + (k - j - 1)
    }

    pub fn get(&self, j: usize, k: usize) -> S {
        use std::cmp::Ordering;
        match j.cmp(&k) {
            Ordering::Equal => S::one(),
            Ordering::Less => self.upper[self.pair_index(j, k)],
            Ordering::Greater => self.upper[self.pair_index(k, j)],
        }
    }
}

/// `(1/n^2) * sum over ordered pairs of sim(j,k) * (z_j - z_k)^2`, evaluated
/// as twice the upper triangle. Fewer than two samples yields 0.
pub(crate) fn pairwise_smoothness_forward<S: Scalar>(z: &[S], sim: &SimMatrix<S>) -> S {
    let n = z.len();
    if n < 2 {
        return S::zero();
    }
    let mut acc = S::zero();
    let mut idx = 0;
    for j in 0..n {
        let zj = z[j];
        for k in (j + 1)..n {
            let w = sim.upper[idx];
            idx += 1;
            if w != S::zero() {
                let d = zj - z[k];
                acc += w * d * d;
            }
        }
    }
    let n2 = S::from_f64c((n * n) as f64);
    S::from_f64c(2.0) * acc / n2
}

pub(crate) fn pairwise_smoothness_backward<S: Scalar>(z: &[S], sim: &SimMatrix<S>, gout: S, dz: &mut [S]) {
    let n = z.len();
    if n < 2 {
        return;
    }
    let n2 = S::from_f64c((n * n) as f64);
    let scale = S::from_f64c(4.0) * gout / n2;
    let mut idx = 0;
    for j in 0..n {
        let zj = z[j];
        for k in (j + 1)..n {
            let w = sim.upper[idx];
            idx += 1;
            if w != S::zero() {
                let g = scale * w * (zj - z[k]);
                dz[j] += g;
                dz[k] -= g;
            }
        }
    }
}

// ---- small reductions ----

pub(crate) fn masked_mean_forward<S: Scalar>(x: &[S], mask: &Mask) -> S {
    let mut acc = S::zero();
    for (i, v) in x.iter().enumerate() {
        if mask.get(i) {
            acc += *v;
        }
    }
    acc / S::from_f64c(mask.count() as f64)
}

pub(crate) fn masked_mse_forward<S: Scalar>(x: &[S], target: &[S], mask: &Mask) -> S {
    let mut acc = S::zero();
    for i in 0..x.len() {
        if mask.get(i) {
            let d = x[i] - target[i];
            acc += d * d;
        }
    }
    acc / S::from_f64c(mask.count() as f64)
}
