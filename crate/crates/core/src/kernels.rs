//! Gaussian smoothing kernels and the closed-form covariances obtained by
//! convolving them with white-noise latent processes.
//!
//! A smoothing kernel is `g(x) = α π^{-d/4} |Λ|^{-1/4} exp(-½ xᵀ Λ⁻¹ x)` with a
//! diagonal length-scale matrix `Λ = diag(exp(log_lambda))`.

use serde::{Deserialize, Serialize};

use crate::error::{MgcpError, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    /// Scale. Sign-free; only its magnitude is penalized.
    pub alpha: T,
    /// Logarithms of the diagonal of `Λ`.
    pub log_lambda: Vec<T>,
}

impl<T: Real> KernelParams<T> {
    pub fn new(alpha: T, log_lambda: Vec<T>) -> Self {
        Self { alpha, log_lambda }
    }

    /// Kernel with the given scale and every length-scale equal to `lambda`.
    pub fn isotropic(alpha: T, lambda: T, dim: usize) -> Self {
        Self {
            alpha,
            log_lambda: vec![lambda.ln(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lambda.len()
    }

    pub fn lambdas(&self) -> Vec<T> {
        self.log_lambda.iter().map(|l| l.exp()).collect()
    }

    pub fn is_valid(&self) -> bool {
        self.alpha.is_finite()
            && self
                .log_lambda
                .iter()
                .all(|l| l.is_finite() && l.exp() > T::zero() && l.exp().is_finite())
    }
}

fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(MgcpError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

/// Evaluates the smoothing kernel `g(x)`.
pub fn smoothing_kernel_eval<T: Real>(x: &[T], k: &KernelParams<T>) -> Result<T> {
    check_dim("smoothing kernel input", k.dim(), x.len())?;
    Ok(SmoothingKernel::new(k).eval(x))
}

/// `cov(v) = ∫ g₁(u) g₂(u − v) du` for two kernels driven by the same latent
/// process.
pub fn cov_cross<T: Real>(v: &[T], k1: &KernelParams<T>, k2: &KernelParams<T>) -> Result<T> {
    check_dim("cross covariance kernels", k1.dim(), k2.dim())?;
    check_dim("cross covariance offset", k1.dim(), v.len())?;
    Ok(CrossTerm::new(k1, k2).value_at(v))
}

/// Auto-covariance of a source output, `α² exp(-¼ vᵀ Λ⁻¹ v)`.
pub fn cov_auto_source<T: Real>(v: &[T], k: &KernelParams<T>) -> Result<T> {
    check_dim("auto covariance offset", k.dim(), v.len())?;
    Ok(AutoTerm::new(k).value_at(v))
}

/// Auto-covariance of the target output: the sum of the auto terms of every
/// kernel feeding it (one transfer kernel per source plus its own kernel).
pub fn cov_auto_target<T: Real>(v: &[T], kernels: &[KernelParams<T>]) -> Result<T> {
    if kernels.is_empty() {
        return Err(MgcpError::InvalidData(
            "target auto-covariance needs at least one kernel".into(),
        ));
    }
    let mut acc = T::zero();
    for k in kernels {
        acc += cov_auto_source(v, k)?;
    }
    Ok(acc)
}

/// Smoothing kernel with its normalising constant hoisted.
#[derive(Debug, Clone)]
pub struct SmoothingKernel<T> {
    scale: T,
    half_inv_lambda: Vec<T>,
}

impl<T: Real> SmoothingKernel<T> {
    pub fn new(k: &KernelParams<T>) -> Self {
        let d = T::of_usize(k.dim());
        let sum_log: T = k.log_lambda.iter().copied().sum();
        // π^{-d/4} |Λ|^{-1/4}
        let norm = (-(d / T::lit(4.0)) * T::PI().ln() - sum_log / T::lit(4.0)).exp();
        Self {
            scale: k.alpha * norm,
            half_inv_lambda: k
                .log_lambda
                .iter()
                .map(|l| T::lit(0.5) * (-*l).exp())
                .collect(),
        }
    }

    pub fn eval(&self, x: &[T]) -> T {
        let mut e = T::zero();
        for (xi, h) in x.iter().zip(&self.half_inv_lambda) {
            e += *h * *xi * *xi;
        }
        self.scale * (-e).exp()
    }
}

/// Auto term `α² exp(-¼ vᵀ Λ⁻¹ v)` with cached inverse length-scales.
#[derive(Debug, Clone)]
pub(crate) struct AutoTerm<T> {
    pub alpha: T,
    quarter_inv_lambda: Vec<T>,
}

impl<T: Real> AutoTerm<T> {
    pub fn new(k: &KernelParams<T>) -> Self {
        Self {
            alpha: k.alpha,
            quarter_inv_lambda: k
                .log_lambda
                .iter()
                .map(|l| T::lit(0.25) * (-*l).exp())
                .collect(),
        }
    }

    /// `exp(-¼ vᵀ Λ⁻¹ v)` for `v = x − y`.
    #[inline]
    pub fn unit(&self, x: &[T], y: &[T]) -> T {
        let mut e = T::zero();
        for ((a, b), q) in x.iter().zip(y).zip(&self.quarter_inv_lambda) {
            let v = *a - *b;
            e += *q * v * v;
        }
        (-e).exp()
    }

    #[inline]
    pub fn value(&self, x: &[T], y: &[T]) -> T {
        self.alpha * self.alpha * self.unit(x, y)
    }

    pub fn value_at(&self, v: &[T]) -> T {
        let zero = vec![T::zero(); v.len()];
        self.value(v, &zero)
    }

    /// Accumulates `weight * ∂K/∂(α, log Λ₁..Λ_d)` into `grad` (length d+1).
    #[inline]
    pub fn accumulate_grad(&self, x: &[T], y: &[T], weight: T, grad: &mut [T]) {
        let u = self.unit(x, y);
        let k = self.alpha * self.alpha * u;
        grad[0] += weight * T::lit(2.0) * self.alpha * u;
        let wk = weight * k;
        for (j, q) in self.quarter_inv_lambda.iter().enumerate() {
            let v = x[j] - y[j];
            grad[j + 1] += wk * *q * v * v;
        }
    }
}

/// Cross term `α₁α₂ 2^{d/2} |Λ₁|^{1/4}|Λ₂|^{1/4} |Λ₁+Λ₂|^{-1/2} exp(-½ vᵀ(Λ₁+Λ₂)⁻¹v)`.
#[derive(Debug, Clone)]
pub(crate) struct CrossTerm<T> {
    pub alpha1: T,
    pub alpha2: T,
    prefactor: T,
    half_inv_sum: Vec<T>,
    ratio1: Vec<T>,
    ratio2: Vec<T>,
}

impl<T: Real> CrossTerm<T> {
    pub fn new(k1: &KernelParams<T>, k2: &KernelParams<T>) -> Self {
        let mut log_pref = T::zero();
        let d = k1.dim();
        let mut half_inv_sum = Vec::with_capacity(d);
        let mut ratio1 = Vec::with_capacity(d);
        let mut ratio2 = Vec::with_capacity(d);
        for (l1, l2) in k1.log_lambda.iter().zip(&k2.log_lambda) {
            let (a, b) = (l1.exp(), l2.exp());
            let s = a + b;
            log_pref += T::lit(0.5) * T::LN_2() + T::lit(0.25) * (*l1 + *l2) - T::lit(0.5) * s.ln();
            half_inv_sum.push(T::lit(0.5) / s);
            ratio1.push(a / s);
            ratio2.push(b / s);
        }
        Self {
            alpha1: k1.alpha,
            alpha2: k2.alpha,
            prefactor: log_pref.exp(),
            half_inv_sum,
            ratio1,
            ratio2,
        }
    }

    /// The covariance with both scales set to one.
    #[inline]
    pub fn unit(&self, x: &[T], y: &[T]) -> T {
        let mut e = T::zero();
        for ((a, b), h) in x.iter().zip(y).zip(&self.half_inv_sum) {
            let v = *a - *b;
            e += *h * v * v;
        }
        self.prefactor * (-e).exp()
    }

    #[inline]
    pub fn value(&self, x: &[T], y: &[T]) -> T {
        self.alpha1 * self.alpha2 * self.unit(x, y)
    }

    pub fn value_at(&self, v: &[T]) -> T {
        let zero = vec![T::zero(); v.len()];
        self.value(v, &zero)
    }

    /// Accumulates `weight * ∂K/∂θ` into the gradient slots of both kernels
    /// (each of length d+1, scale first).
    #[inline]
    pub fn accumulate_grad(&self, x: &[T], y: &[T], weight: T, g1: &mut [T], g2: &mut [T]) {
        let r = self.unit(x, y);
        g1[0] += weight * self.alpha2 * r;
        g2[0] += weight * self.alpha1 * r;
        let wk = weight * self.alpha1 * self.alpha2 * r;
        let quarter = T::lit(0.25);
        let half = T::lit(0.5);
        for j in 0..self.half_inv_sum.len() {
            let v = x[j] - y[j];
            let hv2 = self.half_inv_sum[j] * v * v;
            g1[j + 1] += wk * (quarter - half * self.ratio1[j] + hv2 * self.ratio1[j]);
            g2[j + 1] += wk * (quarter - half * self.ratio2[j] + hv2 * self.ratio2[j]);
        }
    }
}

/// Numerical convolution of two smoothing kernels, used to check the closed
/// forms. Supports `d ≤ 2`.
pub mod oracle {
    use super::*;

    /// Grid points per dimension.
    pub const POINTS_1D: usize = 4001;
    pub const POINTS_2D: usize = 1201;
    /// Half-width of the integration window in length-scale standard deviations.
    pub const WINDOW_SIGMAS: f64 = 8.0;

    fn simpson_weights(n: usize) -> Vec<f64> {
        debug_assert!(n % 2 == 1);
        (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                }
            })
            .collect()
    }

    fn axis(v: f64, l1: f64, l2: f64, n: usize) -> (Vec<f64>, f64) {
        let (s1, s2) = (l1.sqrt(), l2.sqrt());
        let lo = (-WINDOW_SIGMAS * s1).min(v - WINDOW_SIGMAS * s2);
        let hi = (WINDOW_SIGMAS * s1).max(v + WINDOW_SIGMAS * s2);
        let h = (hi - lo) / (n - 1) as f64;
        ((0..n).map(|i| lo + h * i as f64).collect(), h)
    }

    /// `∫ g₁(u) g₂(u − v) du` by composite Simpson quadrature.
    pub fn cov_quadrature_oracle(v: &[f64], k1: &KernelParams<f64>, k2: &KernelParams<f64>) -> Result<f64> {
        check_dim("quadrature kernels", k1.dim(), k2.dim())?;
        check_dim("quadrature offset", k1.dim(), v.len())?;
        if v.len() > 2 || v.is_empty() {
            return Err(MgcpError::DimensionMismatch {
                context: "quadrature oracle supports d in {1, 2}",
                expected: 2,
                found: v.len(),
            });
        }
        let g1 = SmoothingKernel::new(k1);
        let g2 = SmoothingKernel::new(k2);
        let l1 = k1.lambdas();
        let l2 = k2.lambdas();
        if v.len() == 1 {
            let n = POINTS_1D;
            let (xs, h) = axis(v[0], l1[0], l2[0], n);
            let w = simpson_weights(n);
            let mut acc = 0.0;
            for (u, wi) in xs.iter().zip(&w) {
                acc += wi * g1.eval(&[*u]) * g2.eval(&[*u - v[0]]);
            }
            return Ok(acc * h / 3.0);
        }
        let n = POINTS_2D;
        let (xs, hx) = axis(v[0], l1[0], l2[0], n);
        let (ys, hy) = axis(v[1], l1[1], l2[1], n);
        let w = simpson_weights(n);
        let mut acc = 0.0;
        for (ux, wx) in xs.iter().zip(&w) {
            let mut row = 0.0;
            for (uy, wy) in ys.iter().zip(&w) {
                row += wy * g1.eval(&[*ux, *uy]) * g2.eval(&[*ux - v[0], *uy - v[1]]);
            }
            acc += wx * row;
        }
        Ok(acc * hx * hy / 9.0)
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::cov_quadrature_oracle;
    use super::*;

    fn k(alpha: f64, lambda: &[f64]) -> KernelParams<f64> {
        KernelParams::new(alpha, lambda.iter().map(|l| l.ln()).collect())
    }

    #[test]
    fn smoothing_kernel_examples() {
        let at_zero = smoothing_kernel_eval(&[0.0], &k(1.0, &[1.0])).unwrap();
        assert!((at_zero - std::f64::consts::PI.powf(-0.25)).abs() < 1e-15);
        assert!((at_zero - 0.7511255).abs() < 1e-7);
        assert_eq!(smoothing_kernel_eval(&[0.3], &k(0.0, &[1.0])).unwrap(), 0.0);
        // π^{-1/4} 2^{-1/4} e^{-1/4}
        let v = smoothing_kernel_eval(&[1.0], &k(1.0, &[2.0])).unwrap();
        let exact = std::f64::consts::PI.powf(-0.25) * 2f64.powf(-0.25) * (-0.25f64).exp();
        assert!((v - exact).abs() < 1e-15);
        assert!((v - 0.4919054).abs() < 1e-6, "{v}");
    }

    #[test]
    fn smoothing_kernel_rejects_bad_dim() {
        let err = smoothing_kernel_eval(&[0.0, 1.0], &k(1.0, &[1.0])).unwrap_err();
        assert!(matches!(err, MgcpError::DimensionMismatch { .. }));
    }

    #[test]
    fn cross_examples() {
        assert!((cov_cross(&[0.0], &k(1.0, &[1.0]), &k(1.0, &[1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cov_cross(&[0.7], &k(1.0, &[1.0]), &k(0.0, &[2.0])).unwrap(), 0.0);
        let c = cov_cross(&[2.0], &k(1.0, &[1.0]), &k(1.0, &[3.0])).unwrap();
        // √2 · 3^{1/4} / 2 · e^{-1/2}
        let exact = 2f64.sqrt() * 3f64.powf(0.25) / 2.0 * (-0.5f64).exp();
        assert!((c - exact).abs() < 1e-15);
        assert!((c - 0.564444).abs() < 1e-5, "{c}");
        assert!(cov_cross(&[1.0], &k(1.0, &[1.0]), &k(1.0, &[1.0, 2.0])).is_err());
    }

    #[test]
    fn auto_examples() {
        assert_eq!(cov_auto_source(&[0.0], &k(2.0, &[1.0])).unwrap(), 4.0);
        assert_eq!(cov_auto_source(&[0.4], &k(0.0, &[1.0])).unwrap(), 0.0);
        let v = cov_auto_source(&[1.0], &k(1.0, &[1.0])).unwrap();
        assert!((v - (-0.25f64).exp()).abs() < 1e-15);
        assert!((v - 0.7788008).abs() < 1e-7);
    }

    #[test]
    fn auto_target_examples() {
        assert_eq!(cov_auto_target(&[0.0], &[k(1.0, &[1.0]), k(2.0, &[1.0])]).unwrap(), 5.0);
        assert_eq!(cov_auto_target(&[0.3], &[k(0.0, &[1.0]), k(0.0, &[2.0])]).unwrap(), 0.0);
        let v = cov_auto_target(&[1.0], &[k(1.0, &[1.0]), k(1.0, &[2.0])]).unwrap();
        assert!((v - 1.6613).abs() < 1e-4, "{v}");
        assert!(cov_auto_target::<f64>(&[0.0], &[]).is_err());
    }

    #[test]
    fn cross_with_itself_is_auto() {
        let a = k(1.3, &[0.7, 2.2]);
        let v = [0.4, -1.1];
        let c = cov_cross(&v, &a, &a).unwrap();
        let s = cov_auto_source(&v, &a).unwrap();
        assert!((c - s).abs() < 1e-14);
    }

    #[test]
    fn oracle_examples() {
        let one = k(1.0, &[1.0]);
        assert!((cov_quadrature_oracle(&[0.0], &one, &one).unwrap() - 1.0).abs() < 1e-6);
        let q = cov_quadrature_oracle(&[2.0], &one, &k(1.0, &[3.0])).unwrap();
        let exact = 2f64.sqrt() * 3f64.powf(0.25) / 2.0 * (-0.5f64).exp();
        assert!((q - exact).abs() < 1e-6);
        assert!((q - 0.564444).abs() < 1e-5);
        assert_eq!(cov_quadrature_oracle(&[0.5], &k(0.0, &[1.0]), &one).unwrap(), 0.0);
        let two = cov_quadrature_oracle(&[0.5, -0.2], &k(1.0, &[1.0, 0.5]), &k(0.8, &[2.0, 1.5])).unwrap();
        let closed = cov_cross(&[0.5, -0.2], &k(1.0, &[1.0, 0.5]), &k(0.8, &[2.0, 1.5])).unwrap();
        assert!((two - closed).abs() < 1e-6);
    }

    #[test]
    fn f32_matches_f64() {
        let k32 = KernelParams::<f32>::new(1.0, vec![0.0]);
        let v = cov_cross(&[2.0f32], &k32, &KernelParams::new(1.0, vec![3f32.ln()])).unwrap();
        assert!((v as f64 - 0.564444).abs() < 1e-5);
    }

    fn fd_check_cross(x: &[f64], y: &[f64], k1: &KernelParams<f64>, k2: &KernelParams<f64>) {
        let d = x.len();
        let term = CrossTerm::new(k1, k2);
        let mut g1 = vec![0.0; d + 1];
        let mut g2 = vec![0.0; d + 1];
        term.accumulate_grad(x, y, 1.0, &mut g1, &mut g2);
        let h = 1e-6;
        let eval = |a: &KernelParams<f64>, b: &KernelParams<f64>| CrossTerm::new(a, b).value(x, y);
        for (grad, first) in [(&g1, true), (&g2, false)] {
            for p in 0..=d {
                let (mut p1, mut p2) = (k1.clone(), k2.clone());
                let (mut m1, mut m2) = (k1.clone(), k2.clone());
                let (tp, tm) = if first { (&mut p1, &mut m1) } else { (&mut p2, &mut m2) };
                if p == 0 {
                    tp.alpha += h;
                    tm.alpha -= h;
                } else {
                    tp.log_lambda[p - 1] += h;
                    tm.log_lambda[p - 1] -= h;
                }
                let fd = (eval(&p1, &p2) - eval(&m1, &m2)) / (2.0 * h);
                assert!((fd - grad[p]).abs() < 1e-7 * (1.0 + fd.abs()), "p={p} fd={fd} an={}", grad[p]);
            }
        }
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        fd_check_cross(&[0.3, -0.8], &[1.1, 0.2], &k(1.4, &[0.6, 2.0]), &k(-0.7, &[1.5, 0.3]));
        let a = k(0.9, &[0.5, 1.7]);
        let term = AutoTerm::new(&a);
        let (x, y) = ([0.2, 0.4], [-0.5, 1.0]);
        let mut g = vec![0.0; 3];
        term.accumulate_grad(&x, &y, 1.0, &mut g);
        let h = 1e-6;
        for p in 0..3 {
            let (mut kp, mut km) = (a.clone(), a.clone());
            if p == 0 {
                kp.alpha += h;
                km.alpha -= h;
            } else {
                kp.log_lambda[p - 1] += h;
                km.log_lambda[p - 1] -= h;
            }
            let fd = (AutoTerm::new(&kp).value(&x, &y) - AutoTerm::new(&km).value(&x, &y)) / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-8);
        }
    }
}
