//! Dense building blocks with explicit backward passes. All buffers are
//! row-major and contiguous.

use crate::error::{Error, Result};
use crate::numeric::Real;

/// Element type the network can run in.
pub trait Scalar: Real {
    /// Raw strided GEMM, `C = alpha A B + beta C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C[m, n] = op(A) op(B) + (accumulate ? C : 0)`.
///
/// `A` is stored `[m, k]`, or `[k, m]` when `ta`; `B` is `[k, n]`, or `[n, k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(F::zero());
        }
        return;
    }
    // SAFETY: lengths checked above; slices cannot alias since `c` is unique.
    unsafe {
        F::gemm_raw(m, k, n, F::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Row-wise RMSNorm with gain. Returns the per-row `1 / rms`.
pub fn rmsnorm_rows<F: Scalar>(x: &[F], gain: &[F], eps: f64, out: &mut [F]) -> Vec<F> {
    let d = gain.len();
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = xr.iter().map(|v| v.widen() * v.widen()).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for ((y, v), g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = F::narrow(v.widen() * r * g.widen());
        }
        inv.push(F::narrow(r));
    }
    inv
}

/// Backward of [`rmsnorm_rows`]. Writes `dx` and accumulates `dgain`.
pub fn rmsnorm_rows_backward<F: Scalar>(x: &[F], gain: &[F], inv: &[F], dy: &[F], dx: &mut [F], dgain: &mut [F]) {
    let d = gain.len();
    for (row, ((xr, dyr), dxr)) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
        let r = inv[row].widen();
        let mut dotv = 0.0;
        for c in 0..d {
            let gd = gain[c].widen() * dyr[c].widen();
            dotv += gd * xr[c].widen();
            dgain[c] = F::narrow(dgain[c].widen() + dyr[c].widen() * xr[c].widen() * r);
        }
        let k = dotv * r * r * r / d as f64;
        for c in 0..d {
            dxr[c] = F::narrow(gain[c].widen() * dyr[c].widen() * r - xr[c].widen() * k);
        }
    }
}

/// Row-wise LayerNorm with gain and bias. Returns per-row `(mean, 1 / std)`.
pub fn layernorm_rows<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: f64, out: &mut [F]) -> Vec<(F, F)> {
    let d = gain.len();
    let mut stats = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().map(|v| v.widen()).sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            yr[c] = F::narrow((xr[c].widen() - mean) * rstd * gain[c].widen() + bias[c].widen());
        }
        stats.push((F::narrow(mean), F::narrow(rstd)));
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_rows_backward<F: Scalar>(
    x: &[F],
    gain: &[F],
    stats: &[(F, F)],
    dy: &[F],
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    let d = gain.len();
    let n = d as f64;
    for (row, ((xr, dyr), dxr)) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
        let (mean, rstd) = (stats[row].0.widen(), stats[row].1.widen());
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..d {
            let xhat = (xr[c].widen() - mean) * rstd;
            let g = dyr[c].widen() * gain[c].widen();
            sum_g += g;
            sum_gx += g * xhat;
            dgain[c] = F::narrow(dgain[c].widen() + dyr[c].widen() * xhat);
            dbias[c] = F::narrow(dbias[c].widen() + dyr[c].widen());
        }
        for c in 0..d {
            let xhat = (xr[c].widen() - mean) * rstd;
            let g = dyr[c].widen() * gain[c].widen();
            dxr[c] = F::narrow(rstd * (g - sum_g / n - xhat * sum_gx / n));
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rotary embedding tables for pairs `(2m, 2m + 1)` at angle `pos * theta^(-2m/d)`.
#[derive(Debug, Clone)]
pub struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    len: usize,
}

impl Rope {
    pub fn new(head_dim: usize, max_len: usize, theta: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::InvalidParam(format!("rope needs an even head_dim, got {head_dim}")));
        }
        if !(theta > 0.0) {
            return Err(Error::InvalidParam(format!("rope_theta must be > 0, got {theta}")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for m in 0..half {
                let angle = pos as f64 * theta.powf(-2.0 * m as f64 / head_dim as f64);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            half,
            cos,
            sin,
            len: max_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.len
    }

    /// Rotates `[T, d]` rows in place; `inverse` applies the transpose.
    pub fn apply<F: Scalar>(&self, x: &mut [F], inverse: bool) {
        let d = 2 * self.half;
        for (pos, row) in x.chunks_mut(d).enumerate() {
            assert!(pos < self.len, "rope position {pos} beyond table length {}", self.len);
            for m in 0..self.half {
                let c = self.cos[pos * self.half + m];
                let s = if inverse { -self.sin[pos * self.half + m] } else { self.sin[pos * self.half + m] };
                let (a, b) = (row[2 * m].widen(), row[2 * m + 1].widen());
                row[2 * m] = F::narrow(a * c - b * s);
                row[2 * m + 1] = F::narrow(a * s + b * c);
            }
        }
    }
}

/// Applies rotary embedding to `[T, d]` rows at positions `0..T`.
pub fn rope_apply<F: Scalar>(x: &[F], head_dim: usize, theta: f64) -> Result<Vec<F>> {
    if head_dim == 0 || x.len() % head_dim != 0 {
        return Err(Error::Shape(format!("rope input length {} not a multiple of {head_dim}", x.len())));
    }
    let rope = Rope::new(head_dim, x.len() / head_dim, theta)?;
    let mut out = x.to_vec();
    rope.apply(&mut out, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 3, 2, &a, &b, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(true, true, 2, 3, 2, &at, &bt, &mut c2, false);
        assert_eq!(c2, c);
        gemm(true, true, 2, 3, 2, &at, &bt, &mut c2, true);
        assert_eq!(c2, [8.0, 10.0, 20.0, 22.0]);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn rmsnorm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, g, dy) = (randv(&mut rng, 12), randv(&mut rng, 4), randv(&mut rng, 12));
        let loss = |x: &[f64]| {
            let mut y = vec![0.0; 12];
            rmsnorm_rows(x, &g, 1e-6, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = vec![0.0; 12];
        let inv = rmsnorm_rows(&x, &g, 1e-6, &mut y);
        let mut dx = vec![0.0; 12];
        let mut dg = vec![0.0; 4];
        rmsnorm_rows_backward(&x, &g, &inv, &dy, &mut dx, &mut dg);
        fd_check(loss, &x, &dx);
        let loss_g = |g: &[f64]| {
            let mut y = vec![0.0; 12];
            rmsnorm_rows(&x, g, 1e-6, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        fd_check(loss_g, &g, &dg);
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, g, b, dy) = (randv(&mut rng, 15), randv(&mut rng, 5), randv(&mut rng, 5), randv(&mut rng, 15));
        let loss = |x: &[f64]| {
            let mut y = vec![0.0; 15];
            layernorm_rows(x, &g, &b, 1e-5, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = vec![0.0; 15];
        let st = layernorm_rows(&x, &g, &b, 1e-5, &mut y);
        let (mut dx, mut dg, mut db) = (vec![0.0; 15], vec![0.0; 5], vec![0.0; 5]);
        layernorm_rows_backward(&x, &g, &st, &dy, &mut dx, &mut dg, &mut db);
        fd_check(loss, &x, &dx);
        let sum_dy: Vec<f64> = (0..5).map(|c| (0..3).map(|r| dy[r * 5 + c]).sum()).collect();
        fd_check(
            |bb: &[f64]| {
                let mut y = vec![0.0; 15];
                layernorm_rows(&x, &g, bb, 1e-5, &mut y);
                y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
            },
            &b,
            &sum_dy,
        );
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for x in [-3.0, -0.5, 0.0, 0.3, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rope_identity_at_zero_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randv(&mut rng, 8 * 16);
        let y = rope_apply(&x, 16, 10_000.0).unwrap();
        assert_eq!(&y[..16], &x[..16]);
        for (xr, yr) in x.chunks(16).zip(y.chunks(16)) {
            let nx: f64 = xr.iter().map(|v| v * v).sum();
            let ny: f64 = yr.iter().map(|v| v * v).sum();
            assert!((nx.sqrt() - ny.sqrt()).abs() < 1e-6);
        }
        assert!(rope_apply(&x[..9], 3, 10_000.0).is_err());
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randv(&mut rng, 5 * 8);
        let rope = Rope::new(8, 5, 10_000.0).unwrap();
        let mut y = x.clone();
        rope.apply(&mut y, false);
        rope.apply(&mut y, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
