//! WKB expansion of the transition density of a parabolic operator.
//!
//! For `p_t = 1/2 sum a_ij p_ij + sum b_i p_i + c p` with smooth elliptic
//! coefficients, the fundamental solution has the local representation
//!
//! ```text
//! p(dt, x, y) = (2 pi dt)^(-n/2) exp( -d^2(x,y) / (2 dt) + sum_k c_k(x,y) dt^k )
//! ```
//!
//! where `d` is the Riemannian distance of the inverse-diffusion metric
//! (eikonal equation `d^2 = 1/4 grad(d^2)' a grad(d^2)`) and the `c_k` solve
//! transport equations along the rays. This module evaluates the truncated
//! expansion and its derivatives in closed form under coefficient freezing:
//! per evaluation pair `(x, y)` the coefficients are frozen either at the
//! midpoint (`midpoint-frozen`, exact for constant coefficients) or averaged
//! along the straight ray with a Simpson rule (`taylor-1`, first-order
//! transport correction). Frozen closed forms:
//!
//! ```text
//! d^2 = (x-y)' a^-1 (x-y)
//! c0  = -1/2 ln det a  -  (x-y)' a^-1 b
//! c1  = -1/2 b' a^-1 b + c
//! c2  = 0
//! ```
//!
//! which reproduce the drifted Gaussian exactly for constant coefficients
//! with truncation `M >= 1`. Evaluations are pure; a built [`WkbDensity`] is
//! immutable and can be shared across worker threads.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// How variable coefficients are collapsed to a constant-coefficient
/// expansion for one evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreezePolicy {
    /// Freeze `a`, `b`, `c` at the pair midpoint `(x + y)/2`.
    #[default]
    MidpointFrozen,
    /// Simpson-average the metric `a^-1`, the tilt `a^-1 b`, and `c` along
    /// the straight ray from `y` to `x`.
    Taylor1,
}

impl FreezePolicy {
    pub const NAMES: &'static [&'static str] = &["midpoint-frozen", "taylor-1"];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "midpoint-frozen" => Ok(FreezePolicy::MidpointFrozen),
            "taylor-1" => Ok(FreezePolicy::Taylor1),
            other => Err(Error::Config(format!(
                "unknown freeze policy '{other}' (known: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FreezePolicy::MidpointFrozen => "midpoint-frozen",
            FreezePolicy::Taylor1 => "taylor-1",
        }
    }
}

pub type MatrixFn = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Coefficient evaluators of the generator, functions of `(t, x)`.
#[derive(Clone)]
pub struct CoefficientField {
    pub a: MatrixFn,
    pub b: VectorFn,
    /// Zero-order coefficient; folded into `c_1` under freezing (so a
    /// constant `c = -r` discounts the density by `exp(-r dt)` exactly).
    pub c: ScalarFn,
}

impl CoefficientField {
    pub fn new(a: MatrixFn, b: VectorFn, c: ScalarFn) -> Self {
        CoefficientField { a, b, c }
    }

    pub fn constant(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self::constant_with_zero_order(a, b, 0.0)
    }

    pub fn constant_with_zero_order(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Self {
        CoefficientField {
            a: Arc::new(move |_t, _x| a.clone()),
            b: Arc::new(move |_t, _x| b.clone()),
            c: Arc::new(move |_t, _x| c),
        }
    }
}

/// Truncated WKB expansion of a transition density.
#[derive(Clone)]
pub struct WkbDensity {
    pub dim: usize,
    /// Truncation index `M`: terms `c_0 .. c_M` are kept (0..=2).
    pub order: usize,
    pub policy: FreezePolicy,
    pub coeffs: CoefficientField,
    /// Eikonal residual tolerance used by audits (tight for constant
    /// coefficients, loose under freezing).
    pub tol_eik: f64,
}

pub const MAX_ORDER: usize = 2;
pub const TOL_EIK_CONSTANT: f64 = 1e-10;
pub const TOL_EIK_FROZEN: f64 = 1e-4;

impl WkbDensity {
    pub fn new(dim: usize, coeffs: CoefficientField, order: usize, policy: FreezePolicy) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("WkbDensity: dimension must be >= 1"));
        }
        if order > MAX_ORDER {
            return Err(Error::domain(format!(
                "WkbDensity: truncation order {order} > supported maximum {MAX_ORDER}"
            )));
        }
        Ok(WkbDensity { dim, order, policy, coeffs, tol_eik: TOL_EIK_FROZEN })
    }

    /// Frozen constant-coefficient expansion for the pair `(x, y)` with the
    /// coefficient time frozen at `t_anchor`.
    pub fn pair(&self, t_anchor: f64, x: &[f64], y: &[f64]) -> Result<FrozenExpansion> {
        freeze_pair(
            self.dim,
            self.order,
            self.policy,
            &|pt| (self.coeffs.a)(t_anchor, pt),
            &|pt| (self.coeffs.b)(t_anchor, pt),
            &|pt| (self.coeffs.c)(t_anchor, pt),
            x,
            y,
        )
    }

    /// Density `p(t, x; s, y)`, `t > s`, anchoring the pair per policy.
    pub fn density(&self, t: f64, x: &[f64], s: f64, y: &[f64]) -> Result<f64> {
        let dt = check_dt(t, s)?;
        Ok(self.pair(0.5 * (t + s), x, y)?.density(dt, x, y))
    }

    /// Analytic `p`, gradient, Hessian, and time derivative at `(t, x; s, y)`.
    pub fn density_derivatives(&self, t: f64, x: &[f64], s: f64, y: &[f64]) -> Result<DensityDerivatives> {
        let dt = check_dt(t, s)?;
        Ok(self.pair(0.5 * (t + s), x, y)?.derivatives(dt, x, y))
    }

    /// Residual of the eikonal equation at `(x, y)` with the true coefficient
    /// `a(t, x)`: `|d^2 - 1/4 grad d^2 . a grad d^2|`. Zero for constant
    /// coefficients; `O(|x-y|)`-small under freezing.
    pub fn eikonal_residual(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        let pair = self.pair(t, x, y)?;
        let a_true = (self.coeffs.a)(t, x);
        let delta = DVector::from_row_slice(x) - DVector::from_row_slice(y);
        let grad = 2.0 * &pair.a_inv * &delta; // grad_x d^2
        let d2 = delta.dot(&(&pair.a_inv * &delta));
        Ok((d2 - 0.25 * grad.dot(&(&a_true * &grad))).abs())
    }
}

fn check_dt(t: f64, s: f64) -> Result<f64> {
    if !(t > s) {
        return Err(Error::domain(format!("density: need t > s (got t={t}, s={s})")));
    }
    Ok(t - s)
}

/// Value and derivatives of the density at one evaluation point.
#[derive(Debug, Clone)]
pub struct DensityDerivatives {
    pub p: f64,
    /// Spatial gradient in `x`; component 0 is `dp/dx1`.
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// Derivative in the field time `t` (equivalently in `dt`).
    pub dp_dt: f64,
}

impl DensityDerivatives {
    pub fn dp_dx1(&self) -> f64 {
        self.grad[0]
    }
}

/// Constant-coefficient expansion anchored to one evaluation pair.
///
/// All coefficient data is frozen; evaluations treat the fields as constants,
/// so derivatives are the exact derivatives of this anchored closed form.
#[derive(Debug, Clone)]
pub struct FrozenExpansion {
    pub dim: usize,
    pub order: usize,
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    /// Drift tilt `a^-1 b`.
    ab: DVector<f64>,
    /// `c_0` at coincident points: `-1/2 ln det a`.
    c0_diag: f64,
    /// `c_1 = -1/2 b' a^-1 b + c`.
    c1: f64,
}

impl FrozenExpansion {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a_inv(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    pub fn drift_tilt(&self) -> &DVector<f64> {
        &self.ab
    }

    pub fn c0_diag(&self) -> f64 {
        self.c0_diag
    }

    pub fn c1(&self) -> f64 {
        if self.order >= 1 {
            self.c1
        } else {
            0.0
        }
    }

    /// Squared Riemannian distance of the frozen metric.
    pub fn distance_sq(&self, x: &[f64], y: &[f64]) -> f64 {
        let delta = DVector::from_row_slice(x) - DVector::from_row_slice(y);
        delta.dot(&(&self.a_inv * &delta))
    }

    /// Transport coefficient `c_0(x, y) = -1/2 ln det a - (x-y)' a^-1 b`.
    pub fn c0(&self, x: &[f64], y: &[f64]) -> f64 {
        let delta = DVector::from_row_slice(x) - DVector::from_row_slice(y);
        self.c0_diag - delta.dot(&self.ab)
    }

    /// Higher transport coefficients `c_{k+1}` from the frozen recursion.
    ///
    /// With constant right sides the ray-transport term vanishes and the
    /// recursion closes: `c_1 = -1/2 b' a^-1 b + c`, `c_2 = 0`. Orders beyond
    /// the supported truncation are an error.
    pub fn ck_next(&self, k: usize) -> Result<f64> {
        match k {
            0 => Ok(self.c1),
            1 => Ok(0.0),
            _ => Err(Error::domain(format!(
                "ck_next: order {} exceeds supported truncation {MAX_ORDER}",
                k + 1
            ))),
        }
    }

    /// Log-density exponent `q = -d^2/(2 dt) + sum_k c_k dt^k` (without the
    /// `(2 pi dt)^(-n/2)` prefactor).
    fn exponent(&self, dt: f64, x: &[f64], y: &[f64]) -> f64 {
        let mut q = -self.distance_sq(x, y) / (2.0 * dt) + self.c0(x, y);
        if self.order >= 1 {
            q += self.c1 * dt;
        }
        q
    }

    pub fn density(&self, dt: f64, x: &[f64], y: &[f64]) -> f64 {
        debug_assert!(dt > 0.0);
        let pref = (2.0 * std::f64::consts::PI * dt).powf(-(self.dim as f64) / 2.0);
        pref * self.exponent(dt, x, y).exp()
    }

    pub fn derivatives(&self, dt: f64, x: &[f64], y: &[f64]) -> DensityDerivatives {
        let p = self.density(dt, x, y);
        let delta = DVector::from_row_slice(x) - DVector::from_row_slice(y);
        let ainv_delta = &self.a_inv * &delta;
        // grad q = -a^-1 (x-y)/dt - a^-1 b
        let grad_q = -&ainv_delta / dt - &self.ab;
        let grad = &grad_q * p;
        let hess_q = -&self.a_inv / dt;
        let hess = p * (&grad_q * grad_q.transpose() + hess_q);
        let mut dq_dt = -(self.dim as f64) / (2.0 * dt) + delta.dot(&ainv_delta) / (2.0 * dt * dt);
        if self.order >= 1 {
            dq_dt += self.c1;
        }
        DensityDerivatives { p, grad, hess, dp_dt: p * dq_dt }
    }
}

/// Builds the frozen expansion for a pair under the given policy.
#[allow(clippy::too_many_arguments)]
pub fn freeze_pair(
    dim: usize,
    order: usize,
    policy: FreezePolicy,
    a_eval: &dyn Fn(&[f64]) -> DMatrix<f64>,
    b_eval: &dyn Fn(&[f64]) -> DVector<f64>,
    c_eval: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    y: &[f64],
) -> Result<FrozenExpansion> {
    let mid: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
    let (a, a_inv, ln_det_a, ab, c) = match policy {
        FreezePolicy::MidpointFrozen => {
            let a = symmetrized(a_eval(&mid));
            let (a_inv, ln_det) = spd_inverse(&a)?;
            let b = b_eval(&mid);
            let ab = &a_inv * &b;
            (a, a_inv, ln_det, ab, c_eval(&mid))
        }
        FreezePolicy::Taylor1 => {
            // Simpson rule integrates the metric and tilt exactly for
            // quadratic variation along the ray.
            let mut metric = DMatrix::zeros(dim, dim);
            let mut tilt = DVector::zeros(dim);
            let mut c_acc = 0.0;
            for (pt, w) in [(x, 1.0 / 6.0), (&mid[..], 4.0 / 6.0), (y, 1.0 / 6.0)] {
                let a_pt = symmetrized(a_eval(pt));
                let (inv, _) = spd_inverse(&a_pt)?;
                tilt += w * (&inv * b_eval(pt));
                metric += w * inv;
                c_acc += w * c_eval(pt);
            }
            let (a_eff, neg_ln_det) = spd_inverse(&metric)?;
            (a_eff, metric, -neg_ln_det, tilt, c_acc)
        }
    };
    let b_ainv_b = ab.dot(&(&a * &ab));
    Ok(FrozenExpansion {
        dim,
        order,
        a,
        a_inv,
        ab,
        c0_diag: -0.5 * ln_det_a,
        c1: -0.5 * b_ainv_b + c,
    })
}

fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Inverse and log-determinant of an SPD matrix via Cholesky.
fn spd_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = Cholesky::new(m.clone()).ok_or_else(|| {
        Error::Ellipticity(format!("coefficient matrix not positive definite: {m:.6}"))
    })?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((chol.inverse(), ln_det))
}

/// Squared Riemannian distance induced by the metric `a^-1`, per policy.
///
/// Exact for constant `a`; midpoint freezing carries an `O(|x-y|)` relative
/// error for varying coefficients, the Simpson average one order better.
pub fn eikonal_distance(
    a_eval: &dyn Fn(&[f64]) -> DMatrix<f64>,
    x: &[f64],
    y: &[f64],
    policy: FreezePolicy,
) -> Result<f64> {
    let dim = x.len();
    let zero_b = |_: &[f64]| DVector::zeros(dim);
    let zero_c = |_: &[f64]| 0.0;
    let pair = freeze_pair(dim, 0, policy, a_eval, &zero_b, &zero_c, x, y)?;
    Ok(pair.distance_sq(x, y))
}

/// Transport coefficient `c_0(x, y)` for the frozen expansion.
pub fn transport_c0(
    a_eval: &dyn Fn(&[f64]) -> DMatrix<f64>,
    b_eval: &dyn Fn(&[f64]) -> DVector<f64>,
    x: &[f64],
    y: &[f64],
    policy: FreezePolicy,
) -> Result<f64> {
    let zero_c = |_: &[f64]| 0.0;
    let pair = freeze_pair(x.len(), 1, policy, a_eval, b_eval, &zero_c, x, y)?;
    Ok(pair.c0(x, y))
}

/// Next transport coefficient `c_{k+1}` for the frozen expansion.
pub fn transport_ck_next(
    k: usize,
    a_eval: &dyn Fn(&[f64]) -> DMatrix<f64>,
    b_eval: &dyn Fn(&[f64]) -> DVector<f64>,
    x: &[f64],
    y: &[f64],
    policy: FreezePolicy,
) -> Result<f64> {
    let zero_c = |_: &[f64]| 0.0;
    let pair = freeze_pair(x.len(), MAX_ORDER, policy, a_eval, b_eval, &zero_c, x, y)?;
    pair.ck_next(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn const_density(dim: usize, a: DMatrix<f64>, b: DVector<f64>, order: usize) -> WkbDensity {
        WkbDensity::new(dim, CoefficientField::constant(a, b), order, FreezePolicy::MidpointFrozen)
            .unwrap()
    }

    /// Exact transition density of `p_t = 1/2 a p_xx + b p_x` in 1D:
    /// a Gaussian drifting with mean `-b dt`.
    fn exact_drifted_1d(a: f64, b: f64, dt: f64, x: f64, y: f64) -> f64 {
        let var = a * dt;
        (2.0 * std::f64::consts::PI * var).powf(-0.5)
            * (-(x - y + b * dt).powi(2) / (2.0 * var)).exp()
    }

    #[test]
    fn eikonal_identity_and_diagonal() {
        let eye = |_: &[f64]| DMatrix::<f64>::identity(3, 3);
        let x = [0.3, -0.2, 1.0];
        let y = [0.0, 0.1, 0.4];
        let d2 = eikonal_distance(&eye, &x, &y, FreezePolicy::MidpointFrozen).unwrap();
        let expect: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_relative_eq!(d2, expect, max_relative = 1e-14);

        let diag = |_: &[f64]| {
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0]))
        };
        let d2 = eikonal_distance(&diag, &[1.0, 1.0], &[0.0, 0.0], FreezePolicy::Taylor1).unwrap();
        assert_relative_eq!(d2, 1.0 / 0.5 + 1.0 / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn eikonal_rejects_degenerate_metric() {
        let sing = |_: &[f64]| DMatrix::<f64>::zeros(2, 2);
        assert!(matches!(
            eikonal_distance(&sing, &[1.0, 0.0], &[0.0, 0.0], FreezePolicy::MidpointFrozen),
            Err(Error::Ellipticity(_))
        ));
    }

    #[test]
    fn c0_examples() {
        // a = I, b = 0: c0 vanishes identically.
        let eye = |_: &[f64]| DMatrix::<f64>::identity(2, 2);
        let zero = |_: &[f64]| DVector::<f64>::zeros(2);
        let c0 = transport_c0(&eye, &zero, &[0.7, -0.1], &[0.2, 0.4], FreezePolicy::MidpointFrozen)
            .unwrap();
        assert_relative_eq!(c0, 0.0, epsilon = 1e-15);

        // 1D constant drift: c0(x, y) = -b (x - y), matching the expansion of
        // the exact drifted Gaussian exponent.
        let one = |_: &[f64]| DMatrix::<f64>::identity(1, 1);
        let b = 0.37;
        let bf = move |_: &[f64]| DVector::from_vec(vec![b]);
        let (x, y) = (1.3, 0.4);
        let c0 = transport_c0(&one, &bf, &[x], &[y], FreezePolicy::MidpointFrozen).unwrap();
        assert_relative_eq!(c0, -b * (x - y), max_relative = 1e-14);

        // Determinant normalization at coincident points: for a = diag(4) the
        // density must match (2 pi 4 dt)^(-1/2), i.e. c0(y,y) = -ln 2.
        let four = |_: &[f64]| DMatrix::from_element(1, 1, 4.0);
        let zero1 = |_: &[f64]| DVector::<f64>::zeros(1);
        let c0 = transport_c0(&four, &zero1, &[0.9], &[0.9], FreezePolicy::MidpointFrozen).unwrap();
        assert_relative_eq!(c0, -(2.0f64).ln(), max_relative = 1e-14);
    }

    #[test]
    fn ck_examples() {
        let one = |_: &[f64]| DMatrix::<f64>::identity(1, 1);
        let b = -0.8;
        let bf = move |_: &[f64]| DVector::from_vec(vec![b]);
        let c1 = transport_ck_next(0, &one, &bf, &[0.5], &[0.1], FreezePolicy::MidpointFrozen)
            .unwrap();
        assert_relative_eq!(c1, -b * b / 2.0, max_relative = 1e-14);
        let c2 = transport_ck_next(1, &one, &bf, &[0.5], &[0.1], FreezePolicy::MidpointFrozen)
            .unwrap();
        assert_eq!(c2, 0.0);
        assert!(transport_ck_next(2, &one, &bf, &[0.5], &[0.1], FreezePolicy::MidpointFrozen)
            .is_err());
    }

    #[test]
    fn density_standard_normal_peak() {
        let p = const_density(1, DMatrix::identity(1, 1), DVector::zeros(1), 1);
        let v = p.density(1.0, &[0.3], 0.0, &[0.3]).unwrap();
        assert_relative_eq!(v, (2.0 * std::f64::consts::PI).powf(-0.5), max_relative = 1e-13);
        assert!(p.density(0.0, &[0.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn density_matches_exact_drifted_gaussian() {
        let b = 0.3;
        let p = const_density(1, DMatrix::identity(1, 1), DVector::from_vec(vec![b]), 1);
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let x = rng.gen_range(-2.0..2.0);
            let y = rng.gen_range(-2.0..2.0);
            let dt = rng.gen_range(0.01..0.5);
            let ours = p.density(dt, &[x], 0.0, &[y]).unwrap();
            let exact = exact_drifted_1d(1.0, b, dt, x, y);
            assert_relative_eq!(ours, exact, max_relative = 1e-12);
        }
    }

    #[test]
    fn density_truncation_matters_for_drift() {
        // With M = 0 the c1 term is dropped, so the drifted case loses the
        // exp(c1 dt) factor; the residual sweep in the audit relies on this.
        let b = 0.5;
        let p0 = const_density(1, DMatrix::identity(1, 1), DVector::from_vec(vec![b]), 0);
        let v0 = p0.density(0.4, &[1.0], 0.0, &[0.2]).unwrap();
        let exact = exact_drifted_1d(1.0, b, 0.4, 1.0, 0.2);
        let rel = (v0 - exact).abs() / exact;
        assert!(rel > 1e-3, "M=0 should be visibly off, got rel err {rel:e}");
    }

    #[test]
    fn derivatives_match_finite_differences_fixed_anchor() {
        // Anchored expansion: analytic derivatives are exact derivatives of
        // the anchored closed form, checked against central differences.
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 1.1]);
        let b = DVector::from_vec(vec![0.3, -0.4]);
        let w = const_density(2, a, b, 1);
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let dt = rng.gen_range(0.05..0.6);
            let pair = w.pair(0.0, &x, &y).unwrap();
            let d = pair.derivatives(dt, &x, &y);
            let h = 1e-5;
            for i in 0..2 {
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                let fd = (pair.density(dt, &xp, &y) - pair.density(dt, &xm, &y)) / (2.0 * h);
                // Floor the denominator by the natural derivative scale so
                // sign-change points do not blow up the relative error.
                let denom = fd.abs().max(d.p / dt.sqrt());
                assert!(
                    (fd - d.grad[i]).abs() / denom < 1e-6,
                    "grad[{i}]: fd {fd:e} vs analytic {:e}",
                    d.grad[i]
                );
                for j in 0..2 {
                    let eval = |di: f64, dj: f64| {
                        let mut xx = x;
                        xx[i] += di;
                        xx[j] += dj;
                        pair.density(dt, &xx, &y)
                    };
                    let fd2 = if i == j {
                        (eval(h, 0.0) - 2.0 * eval(0.0, 0.0) + eval(-h, 0.0)) / (h * h)
                    } else {
                        (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h)
                    };
                    let denom = fd2.abs().max(d.p / dt);
                    assert!(
                        (fd2 - d.hess[(i, j)]).abs() / denom < 1e-4,
                        "hess[({i},{j})]: fd {fd2:e} vs analytic {:e}",
                        d.hess[(i, j)]
                    );
                }
            }
            // Time derivative.
            let ht = 1e-6 * dt.max(0.1);
            let fd_t = (pair.density(dt + ht, &x, &y) - pair.density(dt - ht, &x, &y)) / (2.0 * ht);
            assert!(
                (fd_t - d.dp_dt).abs() / fd_t.abs().max(1e-12) < 1e-6,
                "dp_dt: fd {fd_t:e} vs analytic {:e}",
                d.dp_dt
            );
        }
    }

    #[test]
    fn gradient_vanishes_at_peak_without_drift() {
        let w = const_density(2, DMatrix::identity(2, 2), DVector::zeros(2), 1);
        let d = w.density_derivatives(0.5, &[0.4, -0.2], 0.0, &[0.4, -0.2]).unwrap();
        assert!(d.grad.amax() < 1e-14);
    }

    #[test]
    fn heat_equation_residual_shrinks_with_order() {
        // Constant coefficients with drift: M = 0 leaves an O(1) residual of
        // p_t - 1/2 a p_xx - b p_x (missing exp(c1 dt)); M = 1 is exact.
        let a = 1.3;
        let b = 0.6;
        let residual = |order: usize| -> f64 {
            let w = const_density(
                1,
                DMatrix::from_element(1, 1, a),
                DVector::from_vec(vec![b]),
                order,
            );
            let (t, x, y) = (0.3, 0.7, 0.2);
            let d = w.density_derivatives(t, &[x], 0.0, &[y]).unwrap();
            (d.dp_dt - 0.5 * a * d.hess[(0, 0)] - b * d.grad[0]).abs()
        };
        let r0 = residual(0);
        let r1 = residual(1);
        assert!(r1 < 1e-13, "M=1 residual {r1:e}");
        assert!(r0 > 1e3 * r1.max(1e-16), "M=0 residual {r0:e} not larger");
    }

    #[test]
    fn symmetry_and_positivity() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.7]);
        let w = const_density(2, a, DVector::zeros(2), 1);
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let y = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let dt = rng.gen_range(0.01..1.0);
            let pxy = w.density(dt, &x, 0.0, &y).unwrap();
            let pyx = w.density(dt, &y, 0.0, &x).unwrap();
            assert!(pxy > 0.0);
            assert_relative_eq!(pxy, pyx, max_relative = 1e-13);
        }
    }

    #[test]
    fn eikonal_residual_constant_vs_frozen() {
        let w = const_density(2, DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.5]), DVector::zeros(2), 1);
        let r = w.eikonal_residual(0.0, &[0.6, 0.1], &[0.0, -0.2]).unwrap();
        assert!(r < TOL_EIK_CONSTANT, "constant-coefficient residual {r:e}");

        // Smoothly varying metric: residual small but nonzero under freezing.
        let afn: MatrixFn = Arc::new(|_t, x: &[f64]| {
            DMatrix::from_element(1, 1, 1.0 + 0.2 * x[0].sin())
        });
        let coeffs = CoefficientField::new(
            afn,
            Arc::new(|_t, _x: &[f64]| DVector::zeros(1)),
            Arc::new(|_t, _x: &[f64]| 0.0),
        );
        let w = WkbDensity::new(1, coeffs, 1, FreezePolicy::MidpointFrozen).unwrap();
        let r = w.eikonal_residual(0.0, &[0.15], &[0.05]).unwrap();
        assert!(r > 0.0 && r < TOL_EIK_FROZEN, "frozen residual {r:e}");
    }

    #[test]
    fn taylor1_reduces_to_midpoint_for_constant_coefficients() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, -0.1, -0.1, 1.4]);
        let b = DVector::from_vec(vec![0.2, 0.1]);
        let coeffs = CoefficientField::constant(a, b);
        let wm = WkbDensity::new(2, coeffs.clone(), 1, FreezePolicy::MidpointFrozen).unwrap();
        let wt = WkbDensity::new(2, coeffs, 1, FreezePolicy::Taylor1).unwrap();
        let (x, y, dt) = ([0.4, -0.3], [-0.1, 0.2], 0.23);
        assert_relative_eq!(
            wm.density(dt, &x, 0.0, &y).unwrap(),
            wt.density(dt, &x, 0.0, &y).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn chapman_kolmogorov_error_shrinks_with_substep() {
        // int p(t,x;s,z) p(s,z;r,y) dz == p(t,x;r,y) for the exact density;
        // quadrature over a wide z-box, constant coefficients.
        let w = const_density(1, DMatrix::from_element(1, 1, 0.8), DVector::from_vec(vec![0.2]), 1);
        let ck_error = |dt: f64| -> f64 {
            let (x, y) = (0.3, -0.1);
            let direct = w.density(2.0 * dt, &[x], 0.0, &[y]).unwrap();
            // Simpson over z.
            let (lo, hi, m) = (-6.0, 6.0, 2001);
            let h = (hi - lo) / (m - 1) as f64;
            let mut acc = 0.0;
            for i in 0..m {
                let z = lo + i as f64 * h;
                let wgt = if i == 0 || i == m - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += wgt
                    * w.density(2.0 * dt, &[x], dt, &[z]).unwrap()
                    * w.density(dt, &[z], 0.0, &[y]).unwrap();
            }
            acc *= h / 3.0;
            (acc - direct).abs() / direct
        };
        // Constant coefficients: composition is exact up to quadrature.
        assert!(ck_error(0.05) < 1e-8);
        assert!(ck_error(0.1) < 1e-8);
    }
}
