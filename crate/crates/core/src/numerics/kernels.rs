//! Forward and backward kernels on raw `f64` buffers.
//!
//! These carry no autodiff bookkeeping; the tape wraps them and the
//! benchmark calls them directly.

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a (m, k) @ b (k, n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m, n) @ b (k, n)^T -> (m, k)`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(ar, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// `a (m, k)^T @ c (m, n) -> (k, n)`.
pub fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let cr = &c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &cv) in out[p * n..(p + 1) * n].iter_mut().zip(cr) {
                *o += av * cv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds `bias` to every row of width `bias.len()`.
pub fn add_rows(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of a `(rows, cols)` buffer.
pub fn sum_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Same-padded 2D convolution. `x (h, w, cin)`, `weight (kh, kw, cin, cout)`.
pub fn conv2d(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    (h, w, cin): (usize, usize, usize),
    (kh, kw, cout): (usize, usize, usize),
) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            let y = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
            if let Some(b) = bias {
                y.copy_from_slice(b);
            }
            for u in 0..kh {
                let Some(si) = (i + u).checked_sub(ph).filter(|&s| s < h) else {
                    continue;
                };
                for v in 0..kw {
                    let Some(sj) = (j + v).checked_sub(pw).filter(|&s| s < w) else {
                        continue;
                    };
                    let px = &x[(si * w + sj) * cin..(si * w + sj + 1) * cin];
                    let wk = &weight[(u * kw + v) * cin * cout..(u * kw + v + 1) * cin * cout];
                    for (ci, &xv) in px.iter().enumerate() {
                        for (o, &wv) in y.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight, and bias.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    (h, w, cin): (usize, usize, usize),
    (kh, kw, cout): (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let db = sum_rows(dy, cout);
    for i in 0..h {
        for j in 0..w {
            let g = &dy[(i * w + j) * cout..(i * w + j + 1) * cout];
            for u in 0..kh {
                let Some(si) = (i + u).checked_sub(ph).filter(|&s| s < h) else {
                    continue;
                };
                for v in 0..kw {
                    let Some(sj) = (j + v).checked_sub(pw).filter(|&s| s < w) else {
                        continue;
                    };
                    let base = (si * w + sj) * cin;
                    let koff = (u * kw + v) * cin * cout;
                    for ci in 0..cin {
                        let wk = &weight[koff + ci * cout..koff + (ci + 1) * cout];
                        dx[base + ci] += dot(g, wk);
                        let xv = x[base + ci];
                        for (d, &gv) in dw[koff + ci * cout..koff + (ci + 1) * cout]
                            .iter_mut()
                            .zip(g)
                        {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 transposed convolution. `x (h, w, cin)`, `weight (2, 2, cin, cout)`,
/// output `(2h, 2w, cout)`.
pub fn conv_transpose2x2(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    (h, w, cin): (usize, usize, usize),
    cout: usize,
) -> Vec<f64> {
    let wo = 2 * w;
    let mut out = vec![0.0; 4 * h * w * cout];
    for i in 0..h {
        for j in 0..w {
            let px = &x[(i * w + j) * cin..(i * w + j + 1) * cin];
            for u in 0..2 {
                for v in 0..2 {
                    let o0 = ((2 * i + u) * wo + 2 * j + v) * cout;
                    let y = &mut out[o0..o0 + cout];
                    if let Some(b) = bias {
                        y.copy_from_slice(b);
                    }
                    let wk = &weight[(u * 2 + v) * cin * cout..(u * 2 + v + 1) * cin * cout];
                    for (ci, &xv) in px.iter().enumerate() {
                        for (o, &wv) in y.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2x2_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    (h, w, cin): (usize, usize, usize),
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let wo = 2 * w;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let db = sum_rows(dy, cout);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * cin;
            for u in 0..2 {
                for v in 0..2 {
                    let o0 = ((2 * i + u) * wo + 2 * j + v) * cout;
                    let g = &dy[o0..o0 + cout];
                    let koff = (u * 2 + v) * cin * cout;
                    for ci in 0..cin {
                        dx[base + ci] += dot(g, &weight[koff + ci * cout..koff + (ci + 1) * cout]);
                        let xv = x[base + ci];
                        for (d, &gv) in dw[koff + ci * cout..koff + (ci + 1) * cout]
                            .iter_mut()
                            .zip(g)
                        {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Layer normalization over rows of width `gamma.len()`.
/// Returns `(y, xhat, inv_std)`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = inv;
        for c in 0..d {
            let n = (row[c] - mean) * inv;
            xhat[r * d + c] = n;
            y[r * d + c] = n * gamma[c] + beta[c];
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let nf = d as f64;
    for (r, &inv) in inv_std.iter().enumerate() {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..d {
            let dxh = g[c] * gamma[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[c];
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
        }
        for c in 0..d {
            let dxh = g[c] * gamma[c];
            dx[r * d + c] = inv / nf * (nf * dxh - sum_dxh - xh[c] * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh form of the Gaussian-error linear unit.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

/// Softmax over rows of width `d`.
pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            z += *ov;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Smooth-L1 with unit transition point.
pub fn smooth_l1(r: f64) -> f64 {
    if r.abs() < 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

pub fn smooth_l1_grad(r: f64) -> f64 {
    if r.abs() < 1.0 {
        r
    } else {
        r.signum()
    }
}

/// Nearest-neighbour source index when resizing `from` samples to `to`.
pub fn nearest_source(i: usize, from: usize, to: usize) -> usize {
    (i * from) / to
}

pub fn resize_nearest(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    (ht, wt): (usize, usize),
) -> Vec<f64> {
    let mut out = Vec::with_capacity(ht * wt * c);
    for i in 0..ht {
        let si = nearest_source(i, h, ht);
        for j in 0..wt {
            let sj = nearest_source(j, w, wt);
            out.extend_from_slice(&x[(si * w + sj) * c..(si * w + sj + 1) * c]);
        }
    }
    out
}

pub fn resize_nearest_backward(
    dy: &[f64],
    (h, w, c): (usize, usize, usize),
    (ht, wt): (usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; h * w * c];
    for i in 0..ht {
        let si = nearest_source(i, h, ht);
        for j in 0..wt {
            let sj = nearest_source(j, w, wt);
            let src = &dy[(i * wt + j) * c..(i * wt + j + 1) * c];
            for (d, g) in dx[(si * w + sj) * c..(si * w + sj + 1) * c]
                .iter_mut()
                .zip(src)
            {
                *d += g;
            }
        }
    }
    dx
}

/// Splits `dims` around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // (2,3)
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // (3,4)
        let c = matmul(&a, &b, 2, 3, 4);
        // b^T laid out as (4,3)
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let c2 = matmul_nt(&a, &bt, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T (3,2) stored as a (2,3): a^T @ c -> (3,4)
        let at_c = matmul_tn(&a, &c, 2, 3, 4);
        assert_eq!(at_c.len(), 12);
    }

    #[test]
    fn zero_kernel_conv_yields_bias() {
        let x: Vec<f64> = (0..4 * 4 * 2).map(|i| i as f64).collect();
        let w = vec![0.0; 3 * 3 * 2 * 3];
        let out = conv2d(&x, &w, Some(&[1.0, -2.0, 0.5]), (4, 4, 2), (3, 3, 3));
        for px in out.chunks(3) {
            assert_eq!(px, &[1.0, -2.0, 0.5]);
        }
        let out = conv2d(&x, &w, None, (4, 4, 2), (3, 3, 3));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_resize_upsamples_by_repetition() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = resize_nearest(&x, (2, 2, 1), (4, 4));
        assert_eq!(&y[0..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&y[12..16], &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn smooth_l1_zones() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(0.0), 0.0);
    }
}
