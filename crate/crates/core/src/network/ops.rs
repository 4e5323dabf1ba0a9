//! Layer primitives with hand-written backward passes.
//!
//! Every backward function is the exact adjoint of its forward counterpart;
//! `network::tests` and the acceptance suite check them against central
//! finite differences in `f64`.

use super::tensor::{Real, Tensor};

/// Writes the `k×k` (`k` odd, zero padding `k/2`) patch matrix of one sample:
/// `col[(ci·k·k + ky·k + kx), y·W + x] = x[ci, y+ky-k/2, x+kx-k/2]`.
fn im2col<T: Real>(x: &Tensor<T>, b: usize, k: usize, col: &mut [T]) {
    let (h, w) = (x.height(), x.width());
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..x.channels() {
        let plane = x.plane(b, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the patch matrix back into `dx`.
fn col2im<T: Real>(col: &[T], k: usize, dx: &mut Tensor<T>, b: usize) {
    let (h, w) = (dx.height(), dx.width());
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..dx.channels() {
        let plane = dx.plane_mut(b, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                let x_lo = (-ddx).max(0) as usize;
                let x_hi = (w as isize - ddx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x_lo as isize + ddx) as usize;
                    for (d, &g) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                    {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

/// Same-padded `k×k` convolution, stride 1. `weight` is `[cout, cin, k, k]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let [bsz, cin, h, w] = x.shape();
    let hw = h * w;
    let kk = cin * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut out = Tensor::zeros(bsz, cout, h, w);
    let row_stride = bsz * hw;
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for b in 0..bsz {
        let c_out = &mut out.data_mut()[b * hw..];
        if k == 1 {
            T::gemm(cout, cin, hw, weight, (cin, 1), &x.data()[b * hw..], (row_stride, 1), T::zero(), c_out, (row_stride, 1));
        } else {
            im2col(x, b, k, &mut col);
            T::gemm(cout, kk, hw, weight, (kk, 1), &col, (hw, 1), T::zero(), c_out, (row_stride, 1));
        }
    }
    for (co, &bv) in bias.iter().enumerate() {
        for v in out.channel_mut(co) {
            *v = *v + bv;
        }
    }
    out
}

/// Backward of [`conv2d`]. Accumulates into `dweight`/`dbias`; returns the
/// input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [bsz, cin, h, w] = x.shape();
    let hw = h * w;
    let kk = cin * k * k;
    let row_stride = bsz * hw;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db = *db + dy.channel(co).iter().copied().sum::<T>();
    }
    let mut dx = need_dx.then(|| Tensor::zeros(bsz, cin, h, w));
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for b in 0..bsz {
        let g = &dy.data()[b * hw..];
        if k == 1 {
            let xb = &x.data()[b * hw..];
            // dW[co, ci] += Σ_p dY[co, p] X[ci, p]
            T::gemm(cout, hw, cin, g, (row_stride, 1), xb, (1, row_stride), T::one(), dweight, (cin, 1));
            if let Some(dx) = dx.as_mut() {
                // dX[ci, p] = Σ_co W[co, ci] dY[co, p]
                T::gemm(cin, cout, hw, weight, (1, cin), g, (row_stride, 1), T::zero(), &mut dx.data_mut()[b * hw..], (row_stride, 1));
            }
        } else {
            im2col(x, b, k, &mut col);
            T::gemm(cout, hw, kk, g, (row_stride, 1), &col, (1, hw), T::one(), dweight, (kk, 1));
            if let Some(dx) = dx.as_mut() {
                T::gemm(kk, cout, hw, weight, (1, kk), g, (row_stride, 1), T::zero(), &mut col, (hw, 1));
                col2im(&col, k, dx, b);
            }
        }
    }
    dx
}

/// 2×2 transposed convolution with stride 2. `weight` is `[cin, cout, 2, 2]`.
pub fn conv_transpose2x2<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor<T> {
    let [bsz, cin, h, w] = x.shape();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let j = cout * 4;
    debug_assert_eq!(weight.len(), cin * j);
    let mut out = Tensor::zeros(bsz, cout, oh, ow);
    let mut tmp = vec![T::zero(); j * hw];
    for b in 0..bsz {
        // tmp[j, p] = Σ_ci W[ci, j] X[ci, p]
        T::gemm(j, cin, hw, weight, (1, j), &x.data()[b * hw..], (bsz * hw, 1), T::zero(), &mut tmp, (hw, 1));
        for co in 0..cout {
            let bv = bias[co];
            let plane = out.plane_mut(b, co);
            for a in 0..2 {
                for c in 0..2 {
                    let src = &tmp[(co * 4 + a * 2 + c) * hw..][..hw];
                    for y in 0..h {
                        let dst_row = &mut plane[(2 * y + a) * ow..][..ow];
                        for xx in 0..w {
                            dst_row[2 * xx + c] = src[y * w + xx] + bv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv_transpose2x2`].
pub fn conv_transpose2x2_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let [bsz, cin, h, w] = x.shape();
    let hw = h * w;
    let ow = 2 * w;
    let j = cout * 4;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db = *db + dy.channel(co).iter().copied().sum::<T>();
    }
    let mut dx = Tensor::zeros(bsz, cin, h, w);
    let mut tmp = vec![T::zero(); j * hw];
    for b in 0..bsz {
        for co in 0..cout {
            let plane = dy.plane(b, co);
            for a in 0..2 {
                for c in 0..2 {
                    let dst = &mut tmp[(co * 4 + a * 2 + c) * hw..][..hw];
                    for y in 0..h {
                        let src_row = &plane[(2 * y + a) * ow..][..ow];
                        for xx in 0..w {
                            dst[y * w + xx] = src_row[2 * xx + c];
                        }
                    }
                }
            }
        }
        let xb = &x.data()[b * hw..];
        // dW[ci, j] += Σ_p X[ci, p] tmp[j, p]
        T::gemm(cin, hw, j, xb, (bsz * hw, 1), &tmp, (1, hw), T::one(), dweight, (j, 1));
        // dX[ci, p] = Σ_j W[ci, j] tmp[j, p]
        T::gemm(cin, j, hw, weight, (j, 1), &tmp, (hw, 1), T::zero(), &mut dx.data_mut()[b * hw..], (bsz * hw, 1));
    }
    dx
}

/// Saved state of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Batch normalization with batch statistics (biased variance).
pub fn batch_norm_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> (Tensor<T>, BatchNormCache<T>) {
    let c = x.channels();
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    let mut batch_mean = Vec::with_capacity(c);
    let mut batch_var = Vec::with_capacity(c);
    for ci in 0..c {
        let vals = x.channel(ci);
        let n = T::from_usize(vals.len()).unwrap();
        let mean = vals.iter().copied().sum::<T>() / n;
        let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for ((nv, ov), &v) in normalized
            .channel_mut(ci)
            .iter_mut()
            .zip(out.channel_mut(ci).iter_mut())
            .zip(vals)
        {
            let xh = (v - mean) * is;
            *nv = xh;
            *ov = gamma[ci] * xh + beta[ci];
        }
        inv_std.push(is);
        batch_mean.push(mean);
        batch_var.push(var);
    }
    (
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean,
            batch_var,
        },
    )
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: T) -> Tensor<T> {
    let mut out = x.clone();
    for ci in 0..x.channels() {
        let scale = gamma[ci] / (var[ci] + eps).sqrt();
        let shift = beta[ci] - mean[ci] * scale;
        for v in out.channel_mut(ci) {
            *v = *v * scale + shift;
        }
    }
    out
}

/// Backward of [`batch_norm_train`] (gradient flows through the batch statistics).
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let mut dx = dy.clone();
    for ci in 0..dy.channels() {
        let g = dy.channel(ci);
        let xh = cache.normalized.channel(ci);
        let n = T::from_usize(g.len()).unwrap();
        let sum_g = g.iter().copied().sum::<T>();
        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        dgamma[ci] = dgamma[ci] + sum_gx;
        dbeta[ci] = dbeta[ci] + sum_g;
        let k = gamma[ci] * cache.inv_std[ci] / n;
        for ((d, &gv), &xv) in dx.channel_mut(ci).iter_mut().zip(g).zip(xh) {
            *d = k * (n * gv - sum_g - xv * sum_gx);
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` in place by the ReLU output `y`.
pub fn relu_backward_inplace<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled map and the winning offset
/// (0..4, row-major in the window) of every output element. Ties resolve to
/// the first maximum.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let [bsz, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(bsz, c, oh, ow);
    let mut arg = vec![0u8; bsz * c * oh * ow];
    let ohw = oh * ow;
    for ci in 0..c {
        for b in 0..bsz {
            let src = x.plane(b, ci);
            let base = (ci * bsz + b) * ohw;
            let dst = out.plane_mut(b, ci);
            for y in 0..oh {
                for xx in 0..ow {
                    let i0 = 2 * y * w + 2 * xx;
                    let cand = [src[i0], src[i0 + 1], src[i0 + w], src[i0 + w + 1]];
                    let mut best = 0;
                    for (i, &v) in cand.iter().enumerate().skip(1) {
                        if v > cand[best] {
                            best = i;
                        }
                    }
                    dst[y * ow + xx] = cand[best];
                    arg[base + y * ow + xx] = best as u8;
                }
            }
        }
    }
    (out, arg)
}

/// Routes the pooled gradient back to the winning input positions.
pub fn max_pool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u8], in_h: usize, in_w: usize) -> Tensor<T> {
    let [bsz, c, oh, ow] = dy.shape();
    let mut dx = Tensor::zeros(bsz, c, in_h, in_w);
    let ohw = oh * ow;
    for ci in 0..c {
        for b in 0..bsz {
            let g = dy.plane(b, ci);
            let base = (ci * bsz + b) * ohw;
            let dst = dx.plane_mut(b, ci);
            for y in 0..oh {
                for xx in 0..ow {
                    let a = arg[base + y * ow + xx] as usize;
                    let idx = (2 * y + a / 2) * in_w + 2 * xx + a % 2;
                    dst[idx] = dst[idx] + g[y * ow + xx];
                }
            }
        }
    }
    dx
}

/// Interpolation taps of a half-pixel-aligned linear resize along one axis.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane (half-pixel centers, edge clamping).
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [bsz, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = Tensor::zeros(bsz, c, out_h, out_w);
    for ci in 0..c {
        for b in 0..bsz {
            let src = x.plane(b, ci);
            let dst = out.plane_mut(b, ci);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [bsz, c, out_h, out_w] = dy.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = linear_taps(in_h, out_h);
    let tx = linear_taps(in_w, out_w);
    let mut dx = Tensor::zeros(bsz, c, in_h, in_w);
    for ci in 0..c {
        for b in 0..bsz {
            let g = dy.plane(b, ci);
            let dst = dx.plane_mut(b, ci);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let gv = g[oy * out_w + ox];
                    let top = gv * (T::one() - fy);
                    let bot = gv * fy;
                    dst[y0 * in_w + x0] = dst[y0 * in_w + x0] + top * (T::one() - fx);
                    dst[y0 * in_w + x1] = dst[y0 * in_w + x1] + top * fx;
                    dst[y1 * in_w + x0] = dst[y1 * in_w + x0] + bot * (T::one() - fx);
                    dst[y1 * in_w + x1] = dst[y1 * in_w + x1] + bot * fx;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_nchw(shape, &v)
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Naive direct convolution in NCHW indexing.
    fn conv_naive(x: &Tensor<f64>, w: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let [bsz, cin, h, wd] = x.shape();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(bsz, cout, h, wd);
        for b in 0..bsz {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                                        s += w[((co * cin + ci) * k + ky) * k + kx] * x.at(b, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        let i = out.index(b, co, y, xx);
                        out.data_mut()[i] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let x = random([2, 3, 5, 4], &mut rng);
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d(&x, &w, &b, 4, k);
            let slow = conv_naive(&x, &w, &b, 4, k);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    // <dy, f(x)> must equal <f^T(dy), x> for each linear map.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3] {
            let x = random([2, 3, 6, 5], &mut rng);
            let w: Vec<f64> = (0..2 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zero_b = vec![0.0; 2];
            let y = conv2d(&x, &w, &zero_b, 2, k);
            let dy = random(y.shape(), &mut rng);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 2];
            let dx = conv2d_backward(&x, &w, 2, k, &dy, &mut dw, &mut db, true).unwrap();
            assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-9);
            // linear in w too: <dy, y> = <dw, w>
            let dw_dot: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((dot(&dy, &y) - dw_dot).abs() < 1e-9);
            let db_expect: Vec<f64> = (0..2).map(|c| dy.channel(c).iter().sum()).collect();
            assert_eq!(db, db_expect);
        }
    }

    #[test]
    fn transposed_conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 3, 3, 4], &mut rng);
        let w: Vec<f64> = (0..3 * 2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv_transpose2x2(&x, &w, &[0.0, 0.0], 2);
        assert_eq!(y.shape(), [2, 2, 6, 8]);
        // every output pixel sees exactly one input pixel per input channel
        let expect: f64 = (0..3).map(|ci| w[(ci * 2 + 1) * 4 + 3] * x.at(1, ci, 2, 1)).sum();
        assert!((y.at(1, 1, 5, 3) - expect).abs() < 1e-12);
        let dy = random(y.shape(), &mut rng);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        let dx = conv_transpose2x2_backward(&x, &w, 2, &dy, &mut dw, &mut db);
        assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-9);
        let dw_dot: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((dot(&dy, &y) - dw_dot).abs() < 1e-9);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 2, 4, 4], &mut rng);
        let y = resize_bilinear(&x, 16, 16);
        let dy = random(y.shape(), &mut rng);
        let dx = resize_bilinear_backward(&dy, 4, 4);
        assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-9);
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::from_nchw([1, 1, 3, 3], &[2.5f64; 9]);
        let y = resize_bilinear(&x, 12, 12);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_nchw([1, 1, 2, 4], &[1.0f64, 3.0, 0.0, 0.0, 2.0, -1.0, 5.0, 0.0]);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[3.0, 5.0]);
        let dx = max_pool2_backward(&Tensor::from_nchw([1, 1, 1, 2], &[1.0, 2.0]), &arg, 2, 4);
        assert_eq!(dx.to_nchw(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([3, 2, 4, 4], &mut rng);
        let (y, _) = batch_norm_train(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12);
        for c in 0..2 {
            let v = y.channel(c);
            let m: f64 = v.iter().sum::<f64>() / v.len() as f64;
            let var: f64 = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random([2, 2, 3, 3], &mut rng);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.4];
        let probe = random(x.shape(), &mut rng);
        let loss = |x: &Tensor<f64>| {
            let (y, _) = batch_norm_train(x, &gamma, &beta, 1e-5);
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b * a).sum::<f64>()
        };
        let (y, cache) = batch_norm_train(&x, &gamma, &beta, 1e-5);
        let mut dy = y.clone();
        for (d, p) in dy.data_mut().iter_mut().zip(probe.data()) {
            *d = 2.0 * *d * p;
        }
        let mut dg = [0.0; 2];
        let mut dbt = [0.0; 2];
        let dx = batch_norm_backward(&cache, &gamma, &dy, &mut dg, &mut dbt);
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx.data()[i]).abs() < 1e-6, "{fd} vs {}", dx.data()[i]);
        }
    }
}
