//! Forward/backward primitives for the denoiser: 3x3 convolution via im2col,
//! pooling, nearest upsampling, SiLU, layernorm, linear layers, row softmax,
//! and the sinusoidal time embedding.
//!
//! Everything is per-sample f32; matmuls go through `ndarray::dot`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

/// im2col for a 3x3 kernel, stride 1, zero padding 1.
/// Output `[cin * 9, h * w]`; row index is `c * 9 + ky * 3 + kx`.
pub fn im2col3(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let dy = ky as i64 - 1;
                let dx = kx as i64 - 1;
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as i64 + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        cols[[row, y * w + xx]] = x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col3`].
pub fn col2im3(cols: &Array2<f32>, c: usize, h: usize, w: usize) -> Array3<f32> {
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let dy = ky as i64 - 1;
                let dx = kx as i64 - 1;
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as i64 + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        x[[ci, sy as usize, sx as usize]] += cols[[row, y * w + xx]];
                    }
                }
            }
        }
    }
    x
}

/// 3x3 same-size convolution. `weight` is `[cout, cin * 9]`.
pub fn conv3_forward(x: &Array3<f32>, weight: ArrayView2<f32>, bias: ArrayView1<f32>) -> Array3<f32> {
    let (_, h, w) = x.dim();
    let cout = weight.shape()[0];
    let cols = im2col3(x);
    let y2 = weight.dot(&cols); // [cout, h*w]
    let mut y = Array3::zeros((cout, h, w));
    for co in 0..cout {
        let b = bias[co];
        for i in 0..h * w {
            y[[co, i / w, i % w]] = y2[[co, i]] + b;
        }
    }
    y
}

/// Backward of [`conv3_forward`]. Recomputes im2col(x) instead of caching it.
/// Returns `dx` and accumulates into `dweight`/`dbias`.
pub fn conv3_backward(
    x: &Array3<f32>,
    weight: ArrayView2<f32>,
    dy: &Array3<f32>,
    dweight: &mut ndarray::ArrayViewMut2<f32>,
    dbias: &mut ndarray::ArrayViewMut1<f32>,
) -> Array3<f32> {
    let (cin, h, w) = x.dim();
    let cout = dy.shape()[0];
    let cols = im2col3(x);
    let dy2 = Array2::from_shape_fn((cout, h * w), |(co, i)| dy[[co, i / w, i % w]]);
    let dw = dy2.dot(&cols.t()); // [cout, cin*9]
    *dweight += &dw;
    for co in 0..cout {
        let mut s = 0.0;
        for i in 0..h * w {
            s += dy2[[co, i]];
        }
        dbias[co] += s;
    }
    let dcols = weight.t().dot(&dy2); // [cin*9, h*w]
    col2im3(&dcols, cin, h, w)
}

/// 2x2 average pooling.
pub fn avgpool2_forward(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                y[[ci, yy, xx]] = 0.25
                    * (x[[ci, 2 * yy, 2 * xx]]
                        + x[[ci, 2 * yy, 2 * xx + 1]]
                        + x[[ci, 2 * yy + 1, 2 * xx]]
                        + x[[ci, 2 * yy + 1, 2 * xx + 1]]);
            }
        }
    }
    y
}

pub fn avgpool2_backward(dy: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                let g = dy[[ci, yy, xx]] * 0.25;
                dx[[ci, 2 * yy, 2 * xx]] += g;
                dx[[ci, 2 * yy, 2 * xx + 1]] += g;
                dx[[ci, 2 * yy + 1, 2 * xx]] += g;
                dx[[ci, 2 * yy + 1, 2 * xx + 1]] += g;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2_forward(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for yy in 0..h * 2 {
            for xx in 0..w * 2 {
                y[[ci, yy, xx]] = x[[ci, yy / 2, xx / 2]];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dx[[ci, yy / 2, xx / 2]] += dy[[ci, yy, xx]];
            }
        }
    }
    dx
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// SiLU applied in place over any array.
pub fn silu_forward(z: &Array3<f32>) -> Array3<f32> {
    z.mapv(|v| v * sigmoid(v))
}

/// dL/dz given dL/dy and the pre-activation z.
pub fn silu_backward(z: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(z).for_each(|d, &zv| {
        let s = sigmoid(zv);
        *d *= s * (1.0 + zv * (1.0 - s));
    });
    dx
}

pub fn silu_vec_forward(z: &Array1<f32>) -> Array1<f32> {
    z.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec_backward(z: &Array1<f32>, dy: &Array1<f32>) -> Array1<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(z).for_each(|d, &zv| {
        let s = sigmoid(zv);
        *d *= s * (1.0 + zv * (1.0 - s));
    });
    dx
}

const LN_EPS: f32 = 1e-5;

pub struct LayerNormCache {
    /// Normalized activations, `[tokens, channels]`.
    pub xhat: Array2<f32>,
    pub rstd: Vec<f32>,
}

/// Layernorm over the channel axis at every token. `x` is `[tokens, channels]`.
pub fn layernorm_forward(
    x: &Array2<f32>,
    gain: ArrayView1<f32>,
    bias: ArrayView1<f32>,
) -> (Array2<f32>, LayerNormCache) {
    let (t, c) = x.dim();
    let mut y = Array2::zeros((t, c));
    let mut xhat = Array2::zeros((t, c));
    let mut rstd = vec![0f32; t];
    for ti in 0..t {
        let row = x.row(ti);
        let mean = row.sum() / c as f32;
        let mut var = 0.0;
        for v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= c as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[ti] = r;
        for ci in 0..c {
            let xh = (x[[ti, ci]] - mean) * r;
            xhat[[ti, ci]] = xh;
            y[[ti, ci]] = xh * gain[ci] + bias[ci];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layernorm_backward(
    cache: &LayerNormCache,
    gain: ArrayView1<f32>,
    dy: &Array2<f32>,
    dgain: &mut ndarray::ArrayViewMut1<f32>,
    dbias: &mut ndarray::ArrayViewMut1<f32>,
) -> Array2<f32> {
    let (t, c) = dy.dim();
    let mut dx = Array2::zeros((t, c));
    for ti in 0..t {
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for ci in 0..c {
            let dyv = dy[[ti, ci]];
            let xh = cache.xhat[[ti, ci]];
            dgain[ci] += dyv * xh;
            dbias[ci] += dyv;
            let dxhat = dyv * gain[ci];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
        }
        let inv_c = 1.0 / c as f32;
        for ci in 0..c {
            let dxhat = dy[[ti, ci]] * gain[ci];
            dx[[ti, ci]] = cache.rstd[ti]
                * (dxhat - inv_c * sum_dxhat - cache.xhat[[ti, ci]] * inv_c * sum_dxhat_xhat);
        }
    }
    dx
}

/// `y = x @ w (+ b)`, x `[tokens, in]`, w `[in, out]`.
pub fn linear_forward(
    x: &Array2<f32>,
    w: ArrayView2<f32>,
    b: Option<ArrayView1<f32>>,
) -> Array2<f32> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        for mut row in y.rows_mut() {
            row += &b;
        }
    }
    y
}

pub fn linear_backward(
    x: &Array2<f32>,
    w: ArrayView2<f32>,
    dy: &Array2<f32>,
    dw: &mut ndarray::ArrayViewMut2<f32>,
    db: Option<&mut ndarray::ArrayViewMut1<f32>>,
) -> Array2<f32> {
    *dw += &x.t().dot(dy);
    if let Some(db) = db {
        for row in dy.rows() {
            *db += &row;
        }
    }
    dy.dot(&w.t())
}

/// Row-wise softmax of `[rows, cols]`.
pub fn softmax_rows(x: &Array2<f32>) -> Array2<f32> {
    let (r, c) = x.dim();
    let mut y = Array2::zeros((r, c));
    for i in 0..r {
        let row = x.row(i);
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            y[[i, j]] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for j in 0..c {
            y[[i, j]] *= inv;
        }
    }
    y
}

/// Softmax backward: `dlogits = p * (dp - sum(p * dp))` per row.
pub fn softmax_rows_backward(probs: &Array2<f32>, dprobs: &Array2<f32>) -> Array2<f32> {
    let (r, c) = probs.dim();
    let mut dl = Array2::zeros((r, c));
    for i in 0..r {
        let mut dot = 0.0f32;
        for j in 0..c {
            dot += probs[[i, j]] * dprobs[[i, j]];
        }
        for j in 0..c {
            dl[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - dot);
        }
    }
    dl
}

/// Sinusoidal embedding of an integer timestep into `dim` features
/// (first half sines, second half cosines).
pub fn time_embedding(t: usize, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin() as f32;
        e[half + i] = arg.cos() as f32;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_simple_fn(d, || rng.random_range(-1.0f32..1.0))
    }

    fn randn2(rng: &mut ChaCha8Rng, d: (usize, usize)) -> Array2<f32> {
        Array2::from_shape_simple_fn(d, || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn3(&mut rng, (2, 4, 5));
        let c = randn2(&mut rng, (2 * 9, 20));
        let lhs: f32 = im2col3(&x).iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(col2im3(&c, 2, 4, 5).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn3(&mut rng, (1, 4, 4));
        // kernel that picks the center tap
        let mut w = Array2::zeros((1, 9));
        w[[0, 4]] = 1.0;
        let b = Array1::zeros(1);
        let y = conv3_forward(&x, w.view(), b.view());
        assert!(x.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    /// Directional finite-difference check of the conv backward pass.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn3(&mut rng, (2, 4, 4));
        let w = randn2(&mut rng, (3, 2 * 9));
        let b = Array1::from_shape_simple_fn(3, || rng.random_range(-0.5f32..0.5));
        let proj = randn3(&mut rng, (3, 4, 4)); // dL/dy

        let loss = |w: &Array2<f32>, b: &Array1<f32>, x: &Array3<f32>| -> f32 {
            conv3_forward(x, w.view(), b.view())
                .iter()
                .zip(proj.iter())
                .map(|(a, p)| a * p)
                .sum()
        };

        let mut dw = Array2::zeros(w.dim());
        let mut db = Array1::zeros(3);
        let dx = conv3_backward(&x, w.view(), &proj, &mut dw.view_mut(), &mut db.view_mut());

        let eps = 1e-2f32;
        // a few random weight coordinates
        for _ in 0..8 {
            let co = rng.random_range(0..3);
            let ci = rng.random_range(0..18);
            let mut wp = w.clone();
            wp[[co, ci]] += eps;
            let mut wm = w.clone();
            wm[[co, ci]] -= eps;
            let num = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * eps);
            assert!((num - dw[[co, ci]]).abs() < 2e-2, "dw {num} vs {}", dw[[co, ci]]);
        }
        // a few input coordinates
        for _ in 0..8 {
            let c = rng.random_range(0..2);
            let y = rng.random_range(0..4);
            let xx = rng.random_range(0..4);
            let mut xp = x.clone();
            xp[[c, y, xx]] += eps;
            let mut xm = x.clone();
            xm[[c, y, xx]] -= eps;
            let num = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * eps);
            assert!((num - dx[[c, y, xx]]).abs() < 2e-2, "dx {num} vs {}", dx[[c, y, xx]]);
        }
        // bias
        let mut bp = b.clone();
        bp[1] += eps;
        let mut bm = b.clone();
        bm[1] -= eps;
        let num = (loss(&w, &bp, &x) - loss(&w, &bm, &x)) / (2.0 * eps);
        assert!((num - db[1]).abs() < 2e-2);
    }

    #[test]
    fn pool_and_upsample_backwards_are_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn3(&mut rng, (2, 6, 6));
        let dy = randn3(&mut rng, (2, 3, 3));
        let lhs: f32 = avgpool2_forward(&x).iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 =
            x.iter().zip(avgpool2_backward(&dy, 6, 6).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);

        let xs = randn3(&mut rng, (2, 3, 3));
        let dys = randn3(&mut rng, (2, 6, 6));
        let lhs: f32 = upsample2_forward(&xs).iter().zip(dys.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = xs.iter().zip(upsample2_backward(&dys).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn2(&mut rng, (3, 6));
        let g = Array1::from_shape_simple_fn(6, || rng.random_range(0.5f32..1.5));
        let b = Array1::from_shape_simple_fn(6, || rng.random_range(-0.5f32..0.5));
        let proj = randn2(&mut rng, (3, 6));

        let loss = |x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>| -> f32 {
            layernorm_forward(x, g.view(), b.view())
                .0
                .iter()
                .zip(proj.iter())
                .map(|(a, p)| a * p)
                .sum()
        };

        let (_, cache) = layernorm_forward(&x, g.view(), b.view());
        let mut dg = Array1::zeros(6);
        let mut db = Array1::zeros(6);
        let dx = layernorm_backward(&cache, g.view(), &proj, &mut dg.view_mut(), &mut db.view_mut());

        let eps = 1e-2f32;
        for _ in 0..10 {
            let t = rng.random_range(0..3);
            let c = rng.random_range(0..6);
            let mut xp = x.clone();
            xp[[t, c]] += eps;
            let mut xm = x.clone();
            xm[[t, c]] -= eps;
            let num = (loss(&xp, &g, &b) - loss(&xm, &g, &b)) / (2.0 * eps);
            assert!((num - dx[[t, c]]).abs() < 2e-2, "dx {num} vs {}", dx[[t, c]]);
        }
        for c in 0..6 {
            let mut gp = g.clone();
            gp[c] += eps;
            let mut gm = g.clone();
            gm[c] -= eps;
            let num = (loss(&x, &gp, &b) - loss(&x, &gm, &b)) / (2.0 * eps);
            assert!((num - dg[c]).abs() < 2e-2);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn2(&mut rng, (4, 3));
        let w = randn2(&mut rng, (3, 5));
        let b = Array1::from_shape_simple_fn(5, || rng.random_range(-0.5f32..0.5));
        let proj = randn2(&mut rng, (4, 5));

        let loss = |x: &Array2<f32>, w: &Array2<f32>, b: &Array1<f32>| -> f32 {
            linear_forward(x, w.view(), Some(b.view()))
                .iter()
                .zip(proj.iter())
                .map(|(a, p)| a * p)
                .sum()
        };

        let mut dw = Array2::zeros((3, 5));
        let mut db = Array1::zeros(5);
        let dx = linear_backward(&x, w.view(), &proj, &mut dw.view_mut(), Some(&mut db.view_mut()));

        let eps = 1e-2f32;
        for _ in 0..10 {
            let i = rng.random_range(0..3);
            let j = rng.random_range(0..5);
            let mut wp = w.clone();
            wp[[i, j]] += eps;
            let mut wm = w.clone();
            wm[[i, j]] -= eps;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!((num - dw[[i, j]]).abs() < 2e-2);
        }
        for _ in 0..6 {
            let t = rng.random_range(0..4);
            let c = rng.random_range(0..3);
            let mut xp = x.clone();
            xp[[t, c]] += eps;
            let mut xm = x.clone();
            xm[[t, c]] -= eps;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((num - dx[[t, c]]).abs() < 2e-2);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn2(&mut rng, (3, 4));
        let proj = randn2(&mut rng, (3, 4));
        let loss = |x: &Array2<f32>| -> f32 {
            softmax_rows(x).iter().zip(proj.iter()).map(|(a, p)| a * p).sum()
        };
        let p = softmax_rows(&x);
        let dl = softmax_rows_backward(&p, &proj);
        let eps = 1e-2f32;
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
                assert!((num - dl[[i, j]]).abs() < 1e-2, "{num} vs {}", dl[[i, j]]);
            }
        }
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = randn3(&mut rng, (1, 2, 3));
        let proj = randn3(&mut rng, (1, 2, 3));
        let dz = silu_backward(&z, &proj);
        let eps = 1e-3f32;
        for idx in 0..6 {
            let c = (idx / 6, (idx / 3) % 2, idx % 3);
            let mut zp = z.clone();
            zp[c] += eps;
            let mut zm = z.clone();
            zm[c] -= eps;
            let lp: f32 = silu_forward(&zp).iter().zip(proj.iter()).map(|(a, p)| a * p).sum();
            let lm: f32 = silu_forward(&zm).iter().zip(proj.iter()).map(|(a, p)| a * p).sum();
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - dz[c]).abs() < 1e-2);
        }
    }

    #[test]
    fn time_embedding_is_bounded_and_distinct() {
        let a = time_embedding(0, 32);
        let b = time_embedding(500, 32);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 0.1));
    }
}
