//! Raw numeric kernels shared by forward and backward passes.

use super::Real;

/// `out[m×n] (+)= a[m×k] · b[k×n]`, with optional transposed views of the
/// operands. `a` is stored as `[k×m]` when `ta`, `b` as `[n×k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    out: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        out,
        n as isize,
        1,
    );
}

/// Unfolds one `[c×h×w]` image into `[c·9 × h·w]` patches for a 3×3 kernel
/// with zero padding 1.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    if x_lo < x_hi {
                        let off = kx as isize - 1;
                        let s0 = (x_lo as isize + off) as usize;
                        dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let off = kx as isize - 1;
                    let s0 = (x_lo as isize + off) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, &g) in dst.iter_mut().zip(&src[x_lo..x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv2d_forward<T: Real>(x: &[T], kernel: &[T], d: ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let c9 = d.c_in * 9;
    let mut col = vec![T::zero(); c9 * hw];
    let mut out = vec![T::zero(); d.batch * d.c_out * hw];
    for b in 0..d.batch {
        im2col(&x[b * d.c_in * hw..(b + 1) * d.c_in * hw], d.c_in, d.h, d.w, &mut col);
        gemm(
            d.c_out,
            c9,
            hw,
            kernel,
            false,
            &col,
            false,
            &mut out[b * d.c_out * hw..(b + 1) * d.c_out * hw],
            false,
        );
    }
    out
}

/// Returns `(d_input, d_kernel)`; `d_input` is skipped when not needed.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    d: ConvDims,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = d.h * d.w;
    let c9 = d.c_in * 9;
    let mut col = vec![T::zero(); c9 * hw];
    let mut dk = need_dk.then(|| vec![T::zero(); d.c_out * c9]);
    let mut dx = need_dx.then(|| vec![T::zero(); d.batch * d.c_in * hw]);
    for b in 0..d.batch {
        let g = &dout[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * d.c_in * hw..(b + 1) * d.c_in * hw], d.c_in, d.h, d.w, &mut col);
            gemm(d.c_out, hw, c9, g, false, &col, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(c9, d.c_out, hw, kernel, true, g, false, &mut col, false);
            col2im(&col, d.c_in, d.h, d.w, &mut dx[b * d.c_in * hw..(b + 1) * d.c_in * hw]);
        }
    }
    (dx, dk)
}

/// Max pooling over non-overlapping `(wh, ww)` windows of a `[planes×h×w]`
/// stack. Returns pooled values and the flat source index of each maximum
/// (first maximum in row-major window order wins ties).
pub fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    wh: usize,
    ww: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / wh, w / ww);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * wh * w + ox * ww;
                for dy in 0..wh {
                    for dx in 0..ww {
                        let idx = base + (oy * wh + dy) * w + ox * ww + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub groups: usize,
    pub queries: usize,
    pub keys: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Grouped multi-head scaled dot-product attention. Rows of `q` are
/// `[groups·queries × width]`, rows of `k`/`v` are `[groups·keys × width]`;
/// queries of group `g` only see keys of group `g`. Head `h` owns columns
/// `h·dh..(h+1)·dh`. Returns the concatenated head outputs and the softmax
/// weights laid out `[groups × heads × queries × keys]`.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], d: AttnDims) -> (Vec<T>, Vec<T>) {
    let dh = d.head_width();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); d.groups * d.queries * d.width];
    let mut probs = vec![T::zero(); d.groups * d.heads * d.queries * d.keys];
    let mut scores = vec![T::zero(); d.keys];
    for g in 0..d.groups {
        for h in 0..d.heads {
            let c0 = h * dh;
            for i in 0..d.queries {
                let qrow = &q[(g * d.queries + i) * d.width + c0..][..dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &k[(g * d.keys + j) * d.width + c0..][..dh];
                    *s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let p = &mut probs[((g * d.heads + h) * d.queries + i) * d.keys..][..d.keys];
                for (pj, &s) in p.iter_mut().zip(&scores) {
                    *pj = s / z;
                }
                let orow = &mut out[(g * d.queries + i) * d.width + c0..][..dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = &v[(g * d.keys + j) * d.width + c0..][..dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of [`attention_forward`].
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    d: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d.head_width();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); d.keys];
    for g in 0..d.groups {
        for h in 0..d.heads {
            let c0 = h * dh;
            for i in 0..d.queries {
                let qoff = (g * d.queries + i) * d.width + c0;
                let grow = &dout[qoff..][..dh];
                let p = &probs[((g * d.heads + h) * d.queries + i) * d.keys..][..d.keys];
                for j in 0..d.keys {
                    let voff = (g * d.keys + j) * d.width + c0;
                    dp[j] = grow
                        .iter()
                        .zip(&v[voff..voff + dh])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for (dvv, &gg) in dv[voff..voff + dh].iter_mut().zip(grow) {
                        *dvv += p[j] * gg;
                    }
                }
                let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for j in 0..d.keys {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let koff = (g * d.keys + j) * d.width + c0;
                    for c in 0..dh {
                        dq[qoff + c] += ds * k[koff + c];
                        dk[koff + c] += ds * q[qoff + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
