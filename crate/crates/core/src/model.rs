//! Market model: diffusion coefficients, rate, payoff, ellipticity checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Time convention used throughout the solver.
///
/// All time grids are expressed in time-to-maturity: `t = 0` is the maturity
/// date (where the value equals the payoff) and `t = T` is "now".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeConvention {
    #[default]
    TimeToMaturity,
}

pub type CovFn = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;
pub type RateFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Annualized covariance field `v(t, S) = sigma sigma^T`.
#[derive(Clone)]
pub enum Covariance {
    /// Constant matrix fast path.
    Constant(DMatrix<f64>),
    Field(CovFn),
}

/// Short-rate field `r(t, S)`.
#[derive(Clone)]
pub enum Rate {
    Constant(f64),
    Field(RateFn),
}

/// Diffusion market model for `n` assets.
///
/// Evaluators are pure functions of `(t, S)` and safe to call from many
/// workers at once.
#[derive(Clone)]
pub struct MarketModel {
    pub n: usize,
    pub covariance: Covariance,
    pub rate: Rate,
    pub strike: f64,
    pub horizon: f64,
    pub time_convention: TimeConvention,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("n", &self.n)
            .field("strike", &self.strike)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl MarketModel {
    pub fn new(n: usize, covariance: Covariance, rate: Rate, strike: f64, horizon: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("model dimension must be >= 1"));
        }
        if !(strike > 0.0) || !(horizon > 0.0) {
            return Err(Error::domain(format!(
                "strike and horizon must be positive (got K={strike}, T={horizon})"
            )));
        }
        Ok(MarketModel { n, covariance, rate, strike, horizon, time_convention: TimeConvention::TimeToMaturity })
    }

    pub fn constant(n: usize, v: DMatrix<f64>, r: f64, strike: f64, horizon: f64) -> Result<Self> {
        if v.nrows() != n || v.ncols() != n {
            return Err(Error::domain(format!(
                "covariance must be {n}x{n}, got {}x{}",
                v.nrows(),
                v.ncols()
            )));
        }
        Self::new(n, Covariance::Constant(v), Rate::Constant(r), strike, horizon)
    }

    /// Univariate Black-Scholes-style model with volatility `sigma`.
    pub fn black_scholes(sigma: f64, r: f64, strike: f64, horizon: f64) -> Result<Self> {
        Self::constant(1, DMatrix::from_element(1, 1, sigma * sigma), r, strike, horizon)
    }

    pub fn cov(&self, t: f64, s: &[f64]) -> DMatrix<f64> {
        match &self.covariance {
            Covariance::Constant(m) => m.clone(),
            Covariance::Field(f) => f(t, s),
        }
    }

    pub fn rate(&self, t: f64, s: &[f64]) -> f64 {
        match &self.rate {
            Rate::Constant(r) => *r,
            Rate::Field(f) => f(t, s),
        }
    }

    pub fn has_constant_coefficients(&self) -> bool {
        matches!(&self.covariance, Covariance::Constant(_)) && matches!(&self.rate, Rate::Constant(_))
    }
}

/// Basket put payoff `max(K - sum S_i, 0)` with unit weights.
pub fn payoff(s: &[f64], strike: f64) -> Result<f64> {
    if let Some(bad) = s.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::domain(format!("payoff: non-positive asset price {bad}")));
    }
    Ok((strike - s.iter().sum::<f64>()).max(0.0))
}

/// Estimated uniform ellipticity bounds over a sample set.
///
/// Returns `(lambda_hat, Lambda_hat)`: the smallest and largest eigenvalues of
/// `v(t, S)` over all samples. A non-positive `lambda_hat` is an ellipticity
/// violation and an error; degenerate (hypoelliptic) models are rejected, not
/// supported.
pub fn ellipticity_bounds(model: &MarketModel, samples: &[(f64, Vec<f64>)]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::domain("ellipticity_bounds: empty sample list"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (t, s) in samples {
        let v = model.cov(*t, s);
        let asym = matrix_asymmetry(&v);
        if asym > 0.0 {
            return Err(Error::domain(format!(
                "covariance not symmetric at (t={t}, S={s:?}): max |v_ij - v_ji| = {asym:e}"
            )));
        }
        let eig = v.symmetric_eigenvalues();
        lo = lo.min(eig.min());
        hi = hi.max(eig.max());
    }
    if !(lo > 0.0) {
        return Err(Error::Ellipticity(format!(
            "estimated lambda_hat = {lo:e} <= 0 over {} samples; solver refuses to run",
            samples.len()
        )));
    }
    Ok((lo, hi))
}

pub fn matrix_asymmetry(v: &DMatrix<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..v.nrows() {
        for j in (i + 1)..v.ncols() {
            m = m.max((v[(i, j)] - v[(j, i)]).abs());
        }
    }
    m
}

/// Deterministic sample set over the working domain for the ellipticity gate.
///
/// Covers three time slices and a small price lattice spanning roughly
/// `[K/(4n), 4K/n]` per asset; capped so high dimensions stay cheap.
pub fn default_ellipticity_samples(model: &MarketModel) -> Vec<(f64, Vec<f64>)> {
    let n = model.n;
    let k = model.strike;
    let t_slices = [0.0, 0.5 * model.horizon, model.horizon];
    let levels = [0.25 * k / n as f64, k / n as f64, 4.0 * k / n as f64];
    let total = levels.len().pow(n as u32);
    let mut out = Vec::new();
    // Simple deterministic stride keeps the lattice at most ~81 points.
    let stride = (total / 81).max(1);
    let mut idx = 0usize;
    while idx < total {
        let mut s = Vec::with_capacity(n);
        let mut rem = idx;
        for _ in 0..n {
            s.push(levels[rem % levels.len()]);
            rem /= levels.len();
        }
        for &t in &t_slices {
            out.push((t, s.clone()));
        }
        idx += stride;
    }
    out
}

/// Transformed put payoff in the fixed-boundary coordinates.
///
/// `psi0(x) = max(K - x1 F(0, xhat), 0)`; with the maturity boundary pinned at
/// `F(0, .) = K` this vanishes on the computational domain `x1 >= 1`. The
/// dimensionally inconsistent variant `max(K - x1, 0)` is kept behind a switch
/// for ablation studies.
pub fn transformed_payoff(x1: f64, f0: f64, strike: f64, literal: bool) -> f64 {
    if literal {
        (strike - x1).max(0.0)
    } else {
        (strike - x1 * f0).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;

    #[test]
    fn payoff_examples() {
        assert_relative_eq!(payoff(&[50.0, 30.0], 100.0).unwrap(), 20.0);
        assert_relative_eq!(payoff(&[120.0], 100.0).unwrap(), 0.0);
        assert_relative_eq!(payoff(&[1.0, 1.0, 1.0], 3.0).unwrap(), 0.0);
        assert!(payoff(&[1.0, -2.0], 3.0).is_err());
        assert!(payoff(&[0.0], 3.0).is_err());
    }

    #[test]
    fn ellipticity_examples() {
        let model = MarketModel::constant(2, DMatrix::identity(2, 2), 0.0, 1.0, 1.0).unwrap();
        let samples = vec![(0.0, vec![1.0, 1.0]), (0.5, vec![2.0, 0.5])];
        let (lo, hi) = ellipticity_bounds(&model, &samples).unwrap();
        assert_relative_eq!(lo, 1.0);
        assert_relative_eq!(hi, 1.0);

        let model = MarketModel::constant(
            2,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.04, 0.09])),
            0.0,
            1.0,
            1.0,
        )
        .unwrap();
        let (lo, hi) = ellipticity_bounds(&model, &samples).unwrap();
        assert_relative_eq!(lo, 0.04);
        assert_relative_eq!(hi, 0.09);

        // Degenerate matrix: zero eigenvalue.
        let mut v = DMatrix::zeros(2, 2);
        v[(0, 0)] = 1.0;
        let model = MarketModel::constant(2, v, 0.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            ellipticity_bounds(&model, &samples),
            Err(Error::Ellipticity(_))
        ));
    }

    #[test]
    fn ellipticity_rejects_empty_and_asymmetric() {
        let model = MarketModel::constant(1, DMatrix::identity(1, 1), 0.0, 1.0, 1.0).unwrap();
        assert!(ellipticity_bounds(&model, &[]).is_err());

        let f: CovFn = Arc::new(|_t, _s| {
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0])
        });
        let model =
            MarketModel::new(2, Covariance::Field(f), Rate::Constant(0.0), 1.0, 1.0).unwrap();
        assert!(ellipticity_bounds(&model, &[(0.0, vec![1.0, 1.0])]).is_err());
    }

    #[test]
    fn ellipticity_monotone_under_sample_inclusion() {
        let f: CovFn = Arc::new(|t, s: &[f64]| {
            let scale = 1.0 + 0.5 * (t + s[0]).sin().abs();
            DMatrix::from_element(1, 1, 0.04 * scale)
        });
        let model =
            MarketModel::new(1, Covariance::Field(f), Rate::Constant(0.0), 1.0, 1.0).unwrap();
        let samples: Vec<(f64, Vec<f64>)> =
            (0..20).map(|i| (0.05 * i as f64, vec![0.3 + 0.21 * i as f64])).collect();
        let (mut prev_lo, mut prev_hi) = ellipticity_bounds(&model, &samples[..1]).unwrap();
        for m in 2..=samples.len() {
            let (lo, hi) = ellipticity_bounds(&model, &samples[..m]).unwrap();
            assert!(lo <= prev_lo + 1e-15);
            assert!(hi >= prev_hi - 1e-15);
            prev_lo = lo;
            prev_hi = hi;
        }
    }

    proptest! {
        // |payoff(S) - payoff(S')| <= |sum S - sum S'| : convex and 1-Lipschitz
        // in the index level.
        #[test]
        fn payoff_lipschitz(
            s1 in proptest::collection::vec(0.01f64..200.0, 1..5),
            shift in proptest::collection::vec(0.01f64..200.0, 1..5),
            k in 1.0f64..150.0,
        ) {
            let n = s1.len().min(shift.len());
            let a = &s1[..n];
            let b = &shift[..n];
            let pa = payoff(a, k).unwrap();
            let pb = payoff(b, k).unwrap();
            let da: f64 = a.iter().sum::<f64>();
            let db: f64 = b.iter().sum::<f64>();
            prop_assert!((pa - pb).abs() <= (da - db).abs() + 1e-12);
        }
    }
}
