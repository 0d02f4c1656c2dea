//! Dense row-major kernels shared by the networks, generic over `f32`/`f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: out too short");
                // SAFETY: bounds of all three operands were checked above for
                // non-negative strides, which is all this module uses.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `out (m x n) [+]= a (m x k) * b (k x n)`; `ta`/`tb` read the operand as
/// stored transposed (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}

pub fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += *b);
    }
}

/// Accumulates the column sums of a `rows x cols` matrix into `out`.
pub fn col_sum_into<F: Real>(x: &[F], out: &mut [F]) {
    for row in x.chunks(out.len()) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += *v);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Writes normalized rows into `xhat`, the affine output
/// into `y`, and `1/std` per row into `rstd`.
pub fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F], xhat: &mut [F], y: &mut [F], rstd: &mut [F]) {
    let d = gain.len();
    let eps = F::lit(LN_EPS);
    let inv_d = F::one() / F::from_usize(d).unwrap();
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
            yr[i] = xh[i] * gain[i] + bias[i];
        }
    }
}

/// Backward of [`layer_norm`]: accumulates into `dgain`/`dbias` and adds the
/// input gradient into `dx`.
pub fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let d = gain.len();
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut g = vec![F::zero(); d];
    for (r, dyr) in dy.chunks(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_g = F::zero();
        let mut mean_gx = F::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            g[i] = dyr[i] * gain[i];
            mean_g += g[i];
            mean_gx += g[i] * xh[i];
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd[r] * (g[i] - mean_g - xh[i] * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(u: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * u * (F::one() + (c * (u + a * u * u * u)).tanh())
}

pub fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + th) + half * u * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * a * u * u)
}

/// In-place numerically stable softmax over each row of length `n`.
pub fn softmax_rows<F: Real>(x: &mut [F], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

pub fn all_finite<F: Real>(x: &[F]) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut out = vec![1.0; m * n];
                matmul(m, k, n, aa, ta, bb, tb, &mut out, false);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
                matmul(m, k, n, aa, ta, bb, tb, &mut out, true);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - 2.0 * y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let d = 6;
        let x: Vec<f64> = (0..2 * d).map(|i| ((i * 7 % 5) as f64) * 0.4 - 0.6).collect();
        let gain: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
        let bias = vec![0.05; d];
        let w: Vec<f64> = (0..2 * d).map(|i| (i as f64 * 0.9).cos()).collect();
        let loss = |x: &[f64]| {
            let (mut xh, mut y, mut rs) = (vec![0.0; 2 * d], vec![0.0; 2 * d], vec![0.0; 2]);
            layer_norm(x, &gain, &bias, &mut xh, &mut y, &mut rs);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut xh, mut y, mut rs) = (vec![0.0; 2 * d], vec![0.0; 2 * d], vec![0.0; 2]);
        layer_norm(&x, &gain, &bias, &mut xh, &mut y, &mut rs);
        let (mut dg, mut db, mut dx) = (vec![0.0; d], vec![0.0; d], vec![0.0; 2 * d]);
        layer_norm_backward(&w, &xh, &rs, &gain, &mut dg, &mut db, &mut dx);
        for i in 0..2 * d {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-6, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = vec![1.0, 2.0, 3.0];
        let mut b = vec![101.0, 102.0, 103.0];
        softmax_rows(&mut a, 3);
        softmax_rows(&mut b, 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
