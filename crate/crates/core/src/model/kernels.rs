//! Dense row-major kernels. Everything accumulates into its output so
//! backward passes can sum contributions without temporaries.

use crate::Real;

const LANES: usize = 8;

#[inline(always)]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |s, &v| s + v)
}

/// `y += alpha * x`
#[inline(always)]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
pub fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    debug_assert!(c.len() >= n * m && a.len() >= n * k && b.len() >= k * m);
    let mut i = 0;
    while i + 4 <= n {
        let block = &mut c[i * m..(i + 4) * m];
        let (c0, rest) = block.split_at_mut(m);
        let (c1, rest) = rest.split_at_mut(m);
        let (c2, c3) = rest.split_at_mut(m);
        for p in 0..k {
            let br = &b[p * m..(p + 1) * m];
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            for j in 0..m {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < n {
        let ci = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(ci, a[i * k + p], &b[p * m..(p + 1) * m]);
        }
        i += 1;
    }
}

/// `c[n×m] += a[n×k] · bᵀ` where `b` is `[m×k]`.
pub fn matmul_bt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    debug_assert!(c.len() >= n * m && a.len() >= n * k && b.len() >= m * k);
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        let ci = &mut c[i * m..(i + 1) * m];
        for (j, cij) in ci.iter_mut().enumerate() {
            *cij += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×m] += aᵀ · b` where `a` is `[n×k]` and `b` is `[n×m]`.
pub fn matmul_at_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    debug_assert!(c.len() >= k * m && a.len() >= n * k && b.len() >= n * m);
    let mut i = 0;
    while i + 4 <= n {
        let b0 = &b[i * m..(i + 1) * m];
        let b1 = &b[(i + 1) * m..(i + 2) * m];
        let b2 = &b[(i + 2) * m..(i + 3) * m];
        let b3 = &b[(i + 3) * m..(i + 4) * m];
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let cp = &mut c[p * m..(p + 1) * m];
            for j in 0..m {
                cp[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        i += 4;
    }
    while i < n {
        let bi = &b[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(&mut c[p * m..(p + 1) * m], a[i * k + p], bi);
        }
        i += 1;
    }
}

/// `y[n×out] = x[n×in] · w[in×out] + bias`
pub fn linear<T: Real>(y: &mut [T], x: &[T], w: &[T], bias: &[T], n: usize, inp: usize, out: usize) {
    for row in y[..n * out].chunks_exact_mut(out) {
        row.copy_from_slice(bias);
    }
    matmul_acc(y, x, w, n, inp, out);
}

/// Backward of [`linear`]: accumulates into `dx` (if given), `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
    n: usize,
    inp: usize,
    out: usize,
) {
    if let Some(dx) = dx {
        matmul_bt_acc(dx, dy, w, n, out, inp);
    }
    matmul_at_acc(dw, x, dy, n, inp, out);
    for row in dy[..n * out].chunks_exact(out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Writes normalized inputs to `xhat`, the affine
/// output to `y`, and per-row reciprocal std to `rstd`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
    n: usize,
    d: usize,
) {
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let hr = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            hr[j] = h;
            yr[j] = h * gamma[j] + beta[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    n: usize,
    d: usize,
) {
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut mean_g = T::zero();
        let mut mean_gh = T::zero();
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            mean_g += g;
            mean_gh += g * hr[j];
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
        }
        mean_g *= inv_d;
        mean_gh *= inv_d;
        let rs = rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dyr[j] * gamma[j] - mean_g - hr[j] * mean_gh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline(always)]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline(always)]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `log(sum(exp(v)))` over entries not excluded by `banned`.
pub fn log_sum_exp<T: Real>(v: &[T], banned: Option<&[bool]>) -> T {
    let allowed = |i: usize| banned.map_or(true, |b| !b[i]);
    let mut max = T::neg_infinity();
    for (i, &x) in v.iter().enumerate() {
        if allowed(i) && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (i, &x) in v.iter().enumerate() {
        if allowed(i) {
            sum += (x - max).exp();
        }
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        for &(n, k, m) in &[(1, 1, 1), (5, 3, 7), (9, 17, 10), (4, 8, 4)] {
            let a = ramp(n * k, 0.1);
            let b = ramp(k * m, 0.3);
            let want = naive(&a, &b, n, k, m);
            let mut c = vec![0.0; n * m];
            matmul_acc(&mut c, &a, &b, n, k, m);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

            let mut bt = vec![0.0; m * k];
            for p in 0..k {
                for j in 0..m {
                    bt[j * k + p] = b[p * m + j];
                }
            }
            let mut c2 = vec![0.0; n * m];
            matmul_bt_acc(&mut c2, &a, &bt, n, k, m);
            assert!(c2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

            let mut at = vec![0.0; k * n];
            for i in 0..n {
                for p in 0..k {
                    at[p * n + i] = a[i * k + p];
                }
            }
            let mut c3 = vec![0.0; n * m];
            matmul_at_acc(&mut c3, &at, &b, k, n, m);
            assert!(c3.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![1.0f64, -3.0, 250.0, 0.5];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
