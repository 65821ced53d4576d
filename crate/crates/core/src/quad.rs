//! Numerical integration backends and density convolutions.
//!
//! Two interchangeable integrators live behind the [`Integrator`] trait and
//! are selected by name through [`registry`]: a deterministic tensor
//! Gauss-Legendre rule and a Monte Carlo backend with optional Gaussian
//! importance sampling. The convolution operations build on them:
//! [`convolve_initial`] integrates the density against initial data over the
//! truncated domain, [`convolve_boundary`] performs the time-singular
//! hyperplane convolution with product integration (substitution
//! `tau = t - sigma^2` removes the square-root singularity), and
//! [`mc_derivative`] is the likelihood-ratio style estimator that pushes
//! spatial derivatives onto the analytic density.
//!
//! Monte Carlo results are bit-reproducible under a fixed seed: samples are
//! generated in fixed-size chunks with per-chunk counter-derived RNG streams
//! and reduced in chunk order, independent of the worker count.

use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::volterra::BoundaryDensity;
use crate::wkb::{FrozenExpansion, WkbDensity};

/// Axis-aligned integration box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(h > l)) {
            return Err(Error::domain(format!("invalid box: lo={lo:?} hi={hi:?}")));
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&l, &h))| v >= l && v <= h)
    }
}

/// Integral value plus an error indicator (stderr for Monte Carlo, a
/// coarse-rule Richardson delta for deterministic rules).
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error_estimate: f64,
}

/// Integration strategy over a box domain.
pub trait Integrator: Send + Sync {
    fn name(&self) -> &'static str;

    fn integrate(&self, domain: &BoxDomain, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> QuadResult;

    /// Importance-sampled variant; deterministic backends ignore the
    /// proposal. `f` is the full integrand (not pre-divided by the proposal).
    fn integrate_with_proposal(
        &self,
        domain: &BoxDomain,
        f: &(dyn Fn(&[f64]) -> f64 + Sync),
        _proposal: Option<&GaussianSampler>,
    ) -> QuadResult {
        self.integrate(domain, f)
    }
}

// ---------------------------------------------------------------------------
// Gauss-Legendre tensor rule
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton on the Legendre
/// polynomial), cached per order. Nodes are in increasing order; weights are
/// strictly positive.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&n) {
        return hit.clone();
    }
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x.abs();
        nodes[n - 1 - i] = x.abs();
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        let (_, d) = legendre_and_derivative(n, 0.0);
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (d * d);
    }
    cache.lock().unwrap().insert(n, (nodes.clone(), weights.clone()));
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Deterministic tensor-product Gauss-Legendre integrator.
#[derive(Debug, Clone)]
pub struct GaussLegendreTensor {
    pub nodes_per_axis: usize,
    /// When set, a half-order pass provides the reported error estimate.
    pub estimate_error: bool,
}

impl GaussLegendreTensor {
    pub fn new(nodes_per_axis: usize) -> Self {
        GaussLegendreTensor { nodes_per_axis: nodes_per_axis.max(2), estimate_error: true }
    }

    fn run(&self, domain: &BoxDomain, f: &(dyn Fn(&[f64]) -> f64 + Sync), n: usize) -> f64 {
        let dim = domain.dim();
        let (nodes, weights) = gauss_legendre(n);
        // Per-axis affine map to the box.
        let mut axis_nodes = Vec::with_capacity(dim);
        let mut axis_weights = Vec::with_capacity(dim);
        for a in 0..dim {
            let half = 0.5 * (domain.hi[a] - domain.lo[a]);
            let mid = 0.5 * (domain.hi[a] + domain.lo[a]);
            axis_nodes.push(nodes.iter().map(|&z| mid + half * z).collect::<Vec<_>>());
            axis_weights.push(weights.iter().map(|&w| w * half).collect::<Vec<_>>());
        }
        let total = n.pow(dim as u32);
        let chunk = 1024;
        let partials: Vec<f64> = (0..total.div_ceil(chunk))
            .into_par_iter()
            .map(|ci| {
                let mut acc = 0.0;
                let mut pt = vec![0.0; dim];
                for flat in ci * chunk..((ci + 1) * chunk).min(total) {
                    let mut rem = flat;
                    let mut w = 1.0;
                    for a in (0..dim).rev() {
                        let j = rem % n;
                        rem /= n;
                        pt[a] = axis_nodes[a][j];
                        w *= axis_weights[a][j];
                    }
                    acc += w * f(&pt);
                }
                acc
            })
            .collect();
        partials.iter().sum()
    }
}

impl Integrator for GaussLegendreTensor {
    fn name(&self) -> &'static str {
        "gauss-legendre-tensor"
    }

    fn integrate(&self, domain: &BoxDomain, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> QuadResult {
        let value = self.run(domain, f, self.nodes_per_axis);
        let error_estimate = if self.estimate_error {
            let coarse = self.run(domain, f, (self.nodes_per_axis / 2).max(2));
            (value - coarse).abs()
        } else {
            0.0
        };
        QuadResult { value, error_estimate }
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo
// ---------------------------------------------------------------------------

const MC_CHUNK: usize = 8192;

/// Chunk-deterministic sample mean: every chunk owns an RNG stream derived
/// from `(seed, chunk index)` and partial sums are reduced in chunk order, so
/// the result is identical for any worker count.
pub fn mc_mean_stderr(
    samples: usize,
    seed: u64,
    eval: &(dyn Fn(&mut ChaCha8Rng) -> f64 + Sync),
) -> (f64, f64) {
    assert!(samples >= 2);
    let chunks = samples.div_ceil(MC_CHUNK);
    let partials: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let count = MC_CHUNK.min(samples - ci * MC_CHUNK);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..count {
                let v = eval(&mut rng);
                sum += v;
                sumsq += v * v;
            }
            (sum, sumsq, count)
        })
        .collect();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for (s, s2, _) in &partials {
        sum += s;
        sumsq += s2;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = ((sumsq / m) - mean * mean).max(0.0) * m / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Monte Carlo integrator; uniform over the box, or importance-sampled when
/// a Gaussian proposal is supplied.
#[derive(Debug, Clone)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
}

impl MonteCarlo {
    pub fn new(samples: usize, seed: u64) -> Self {
        MonteCarlo { samples: samples.max(2), seed }
    }
}

impl Integrator for MonteCarlo {
    fn name(&self) -> &'static str {
        "mc"
    }

    fn integrate(&self, domain: &BoxDomain, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> QuadResult {
        let vol = domain.volume();
        let dim = domain.dim();
        let lo = domain.lo.clone();
        let hi = domain.hi.clone();
        let (mean, stderr) = mc_mean_stderr(self.samples, self.seed, &move |rng| {
            let pt: Vec<f64> = (0..dim).map(|a| rng.gen_range(lo[a]..hi[a])).collect();
            f(&pt)
        });
        QuadResult { value: vol * mean, error_estimate: vol * stderr }
    }

    fn integrate_with_proposal(
        &self,
        domain: &BoxDomain,
        f: &(dyn Fn(&[f64]) -> f64 + Sync),
        proposal: Option<&GaussianSampler>,
    ) -> QuadResult {
        let Some(sampler) = proposal else {
            return self.integrate(domain, f);
        };
        let (mean, stderr) = mc_mean_stderr(self.samples, self.seed, &move |rng| {
            let y = sampler.draw(rng);
            if domain.contains(&y) {
                f(&y) / sampler.pdf(&y)
            } else {
                0.0
            }
        });
        QuadResult { value: mean, error_estimate: stderr }
    }
}

// ---------------------------------------------------------------------------
// Gaussian proposal sampler
// ---------------------------------------------------------------------------

/// Gaussian proposal: map `g(z) = mean + L z` of standard normal noise, with
/// the matching density `q`. The map is regular (`det L != 0`) and `q > 0`
/// everywhere, so importance ratios are well defined on any target domain.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    precision: DMatrix<f64>,
    norm: f64,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::domain("proposal covariance not positive definite"))?;
        let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let norm = ((2.0 * std::f64::consts::PI).powi(dim as i32).ln() + ln_det) * -0.5;
        Ok(GaussianSampler {
            mean,
            chol_l: chol.l(),
            precision: chol.inverse(),
            norm: norm.exp(),
        })
    }

    /// Proposal matched to a frozen density at field point `x` over step `dt`:
    /// mean `x + b dt`, covariance `a dt`, so the ratio `p/q` stays near one
    /// even for strongly peaked small-time densities.
    pub fn matched(pair: &FrozenExpansion, x: &[f64], dt: f64) -> Result<Self> {
        let b = pair.a() * pair.drift_tilt();
        let mean = DVector::from_row_slice(x) + dt * b;
        Self::new(mean, pair.a() * dt)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Proposal map `g(z)` applied to base noise `z`.
    pub fn map(&self, z: &[f64]) -> Vec<f64> {
        let zv = DVector::from_row_slice(z);
        (&self.mean + &self.chol_l * zv).iter().copied().collect()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.map(&z)
    }

    /// Proposal density `q(y)`.
    pub fn pdf(&self, y: &[f64]) -> f64 {
        let d = DVector::from_row_slice(y) - &self.mean;
        self.norm * (-0.5 * d.dot(&(&self.precision * &d))).exp()
    }
}

// ---------------------------------------------------------------------------
// Rules and registry
// ---------------------------------------------------------------------------

/// A concrete integration rule: backend plus target box.
#[derive(Clone)]
pub struct QuadratureRule {
    pub domain: BoxDomain,
    pub integrator: Arc<dyn Integrator>,
}

impl QuadratureRule {
    pub fn gauss(domain: BoxDomain, nodes_per_axis: usize) -> Self {
        QuadratureRule { domain, integrator: Arc::new(GaussLegendreTensor::new(nodes_per_axis)) }
    }

    pub fn mc(domain: BoxDomain, samples: usize, seed: u64) -> Self {
        QuadratureRule { domain, integrator: Arc::new(MonteCarlo::new(samples, seed)) }
    }
}

/// Name-based integrator registry.
pub mod registry {
    use super::*;

    pub const NAMES: &[&str] = &["gauss-legendre-tensor", "mc"];

    #[derive(Debug, Clone, Copy)]
    pub struct IntegratorSpec {
        pub nodes_per_axis: usize,
        pub samples: usize,
        pub seed: u64,
    }

    pub fn integrator(name: &str, spec: IntegratorSpec) -> Result<Arc<dyn Integrator>> {
        match name {
            "gauss-legendre-tensor" => Ok(Arc::new(GaussLegendreTensor::new(spec.nodes_per_axis))),
            "mc" => Ok(Arc::new(MonteCarlo::new(spec.samples, spec.seed))),
            other => Err(Error::Config(format!(
                "unknown quadrature backend '{other}' (known: {})",
                NAMES.join(", ")
            ))),
        }
    }

    /// Dimension-based default: deterministic tensor quadrature up to
    /// `switch_dim - 1` dimensions, Monte Carlo from `switch_dim` up.
    pub fn auto(dim: usize, switch_dim: usize, spec: IntegratorSpec) -> Arc<dyn Integrator> {
        if dim >= switch_dim {
            Arc::new(MonteCarlo::new(spec.samples, spec.seed))
        } else {
            Arc::new(GaussLegendreTensor::new(spec.nodes_per_axis))
        }
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Convolution result with reported error and a domain-coverage flag.
#[derive(Debug, Clone, Copy)]
pub struct Convolution {
    pub value: f64,
    pub error_estimate: f64,
    /// Set when the density's six-sigma box is not contained in the rule
    /// domain, i.e. the quadrature box may truncate the integrand's support.
    pub coverage_warning: bool,
}

/// `int_O p(t, x; t0, y) f(y) dy` over the rule's box.
pub fn convolve_initial(
    p: &WkbDensity,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
    x: &[f64],
    t0: f64,
    rule: &QuadratureRule,
) -> Result<Convolution> {
    if !(t > t0) {
        return Err(Error::domain(format!("convolve_initial: need t > t0 (got {t}, {t0})")));
    }
    let dt = t - t0;
    let anchor = p.pair(0.5 * (t + t0), x, x)?;
    let coverage_warning = !six_sigma_covered(&anchor, x, dt, &rule.domain);
    let proposal = GaussianSampler::matched(&anchor, x, dt)?;
    let integrand = move |y: &[f64]| -> f64 {
        let fv = f(y);
        if fv == 0.0 {
            return 0.0;
        }
        match p.density(t, x, t0, y) {
            Ok(pv) => pv * fv,
            Err(_) => 0.0,
        }
    };
    let res = rule.integrator.integrate_with_proposal(&rule.domain, &integrand, Some(&proposal));
    Ok(Convolution { value: res.value, error_estimate: res.error_estimate, coverage_warning })
}

fn six_sigma_covered(pair: &FrozenExpansion, x: &[f64], dt: f64, domain: &BoxDomain) -> bool {
    let b = pair.a() * pair.drift_tilt();
    for i in 0..domain.dim() {
        let sigma = (pair.a()[(i, i)] * dt).sqrt();
        let center = x[i] + b[i] * dt;
        if center - 6.0 * sigma < domain.lo[i] || center + 6.0 * sigma > domain.hi[i] {
            return false;
        }
    }
    true
}

/// Kernel singularity class in the time variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Singularity {
    /// `|K| <= C (t - tau)^(-1/2)`: integrated with the `tau = t - sigma^2`
    /// substitution (product integration).
    InverseSqrt,
    /// Bounded kernel: plain composite trapezoid in `tau`.
    Smooth,
}

/// Kernel on the boundary hyperplane, `K(t, xhat; tau, yhat)` for `tau < t`.
pub trait HyperplaneKernel: Sync {
    fn eval(&self, t: f64, xhat: &[f64], tau: f64, yhat: &[f64]) -> f64;

    fn singularity(&self) -> Singularity {
        Singularity::InverseSqrt
    }
}

/// Hyperplane-time convolution `int_0^t int_H K(t,xhat;tau,yhat)
/// phi(tau,yhat) dyhat dtau`.
///
/// The time axis follows the density grid of `phi`; the angle integral uses
/// the rule's integrator over the rule's box (skipped entirely when the
/// hyperplane is zero-dimensional).
pub fn convolve_boundary(
    kernel: &dyn HyperplaneKernel,
    phi: &BoundaryDensity,
    t: f64,
    xhat: &[f64],
    rule: &QuadratureRule,
) -> Result<f64> {
    let time_axis = phi.time_axis();
    let t_start = time_axis[0];
    if t > *time_axis.last().unwrap() + 1e-12 {
        return Err(Error::domain(format!(
            "convolve_boundary: phi grid ends at {} but t = {t}",
            time_axis.last().unwrap()
        )));
    }
    if t <= t_start {
        return Ok(0.0);
    }
    let angle_dim = phi.angle_dim();
    // Angle reduction of the kernel against phi at a fixed source time.
    let reduce = |tau: f64| -> f64 {
        if angle_dim == 0 {
            kernel.eval(t, xhat, tau, &[]) * phi.value_at(tau, &[])
        } else {
            let integrand =
                move |yhat: &[f64]| kernel.eval(t, xhat, tau, yhat) * phi.value_at(tau, yhat);
            rule.integrator.integrate(&rule.domain, &integrand).value
        }
    };
    // Source times strictly below t, ascending.
    let taus: Vec<f64> = time_axis.iter().copied().filter(|&tau| tau < t - 1e-14).collect();
    match kernel.singularity() {
        Singularity::Smooth => {
            // Composite trapezoid over [t_start, t] including the endpoint.
            let mut nodes = taus;
            nodes.push(t);
            let mut acc = 0.0;
            let mut prev_val = reduce(nodes[0]);
            for w in nodes.windows(2) {
                let next_val = reduce(w[1]);
                acc += 0.5 * (w[1] - w[0]) * (prev_val + next_val);
                prev_val = next_val;
            }
            Ok(acc)
        }
        Singularity::InverseSqrt => {
            // sigma = sqrt(t - tau); integrand g(sigma) = 2 sigma K(..) phi is
            // bounded and smooth. Trapezoid over mapped grid nodes; the cell
            // adjacent to the singularity uses interior Gauss points.
            let mut sigmas: Vec<f64> = taus.iter().map(|&tau| (t - tau).sqrt()).collect();
            sigmas.reverse(); // ascending sigma
            let g = |sigma: f64| 2.0 * sigma * reduce(t - sigma * sigma);
            let mut acc = gauss2_cell(0.0, sigmas[0], &g);
            let mut prev = g(sigmas[0]);
            for w in sigmas.windows(2) {
                let next = g(w[1]);
                acc += 0.5 * (w[1] - w[0]) * (prev + next);
                prev = next;
            }
            Ok(acc)
        }
    }
}

/// Two-point Gauss-Legendre on `[a, b]`; both nodes interior.
pub fn gauss2_cell(a: f64, b: f64, g: &dyn Fn(f64) -> f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let off = half / 3.0f64.sqrt();
    half * (g(mid - off) + g(mid + off))
}

// ---------------------------------------------------------------------------
// Monte Carlo derivative estimator
// ---------------------------------------------------------------------------

/// Spatial derivative order of the estimator, up to second order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivOrder {
    Value,
    First(usize),
    Second(usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Degenerate-proposal heuristic: `stderr > 10 |value|`.
    pub flagged_degenerate: bool,
}

/// Monte Carlo estimator of `D^alpha_x int p(t, x; s, y) u(y) dy`.
///
/// Samples `y` from the proposal (frozen at the query point, so the
/// derivative passes onto the analytic density and no score term appears) and
/// averages `D^alpha_x p(t, x; s, y) u(y) / q(y)`; unbiased for the frozen
/// density.
#[allow(clippy::too_many_arguments)]
pub fn mc_derivative(
    p: &WkbDensity,
    u: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
    x: &[f64],
    s: f64,
    order: DerivOrder,
    sampler: &GaussianSampler,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if !(t > s) {
        return Err(Error::domain(format!("mc_derivative: need t > s (got {t}, {s})")));
    }
    if samples < 2 {
        return Err(Error::domain("mc_derivative: need at least 2 samples"));
    }
    let dt = t - s;
    let pair = p.pair(0.5 * (t + s), x, x)?;
    let eval = move |rng: &mut ChaCha8Rng| -> f64 {
        let y = sampler.draw(rng);
        let uy = u(&y);
        if uy == 0.0 {
            return 0.0;
        }
        let q = sampler.pdf(&y);
        let d = match order {
            DerivOrder::Value => pair.density(dt, x, &y),
            DerivOrder::First(i) => pair.derivatives(dt, x, &y).grad[i],
            DerivOrder::Second(i, j) => pair.derivatives(dt, x, &y).hess[(i, j)],
        };
        d * uy / q
    };
    let (value, stderr) = mc_mean_stderr(samples, seed, &eval);
    Ok(McEstimate { value, stderr, flagged_degenerate: stderr > 10.0 * value.abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{uniform_axis, TensorGrid};
    use crate::wkb::{CoefficientField, FreezePolicy};
    use approx::assert_relative_eq;
    use statrs::function::erf::erf;

    fn const_density_1d(a: f64, b: f64) -> WkbDensity {
        WkbDensity::new(
            1,
            CoefficientField::constant(DMatrix::from_element(1, 1, a), DVector::from_vec(vec![b])),
            1,
            FreezePolicy::MidpointFrozen,
        )
        .unwrap()
    }

    #[test]
    fn gauss_legendre_exact_on_polynomials() {
        for n in [2usize, 4, 8, 13] {
            let (nodes, weights) = gauss_legendre(n);
            assert!(weights.iter().all(|&w| w > 0.0));
            assert!(nodes.windows(2).all(|w| w[0] < w[1]));
            // Exact through degree 2n - 1.
            for k in 0..(2 * n) {
                let quad: f64 =
                    nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact =
                    if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
                assert!((quad - exact).abs() < 1e-12, "n={n} k={k}: {quad} vs {exact}");
            }
        }
    }

    #[test]
    fn gauss_order_at_least_four_under_doubling() {
        // Smooth non-polynomial integrand; observed convergence order of the
        // tensor rule should comfortably exceed 4.
        let domain = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let f = |p: &[f64]| (p[0] * 3.0).sin() * (-p[1] * 2.0).exp() + (p[0] * p[1]).cos();
        let exact = GaussLegendreTensor::new(48).integrate(&domain, &f).value;
        let e1 = (GaussLegendreTensor::new(4).integrate(&domain, &f).value - exact).abs();
        let e2 = (GaussLegendreTensor::new(8).integrate(&domain, &f).value - exact).abs();
        let order = (e1 / e2).log2();
        assert!(order >= 4.0, "observed order {order}");
    }

    #[test]
    fn convolve_initial_examples() {
        // f == 1, constant coefficients, small dt: density normalization.
        let p = const_density_1d(1.0, 0.0);
        let rule = QuadratureRule::gauss(BoxDomain::new(vec![-4.0], vec![4.0]).unwrap(), 40);
        let one = |_: &[f64]| 1.0;
        let c = convolve_initial(&p, &one, 0.05, &[0.0], 0.0, &rule).unwrap();
        assert!((c.value - 1.0).abs() < 1e-3, "normalization {}", c.value);
        assert!(!c.coverage_warning);

        // f == 0 gives exactly zero.
        let zero = |_: &[f64]| 0.0;
        let c = convolve_initial(&p, &zero, 0.05, &[0.0], 0.0, &rule).unwrap();
        assert_eq!(c.value, 0.0);

        // Truncated-linear payoff against the Gaussian kernel: closed form
        // via the error function. With a = sigma^2, zero drift:
        // int p(t,x,y) max(K - y, 0) dy
        //   = (K - x) Phi((K - x)/s) + s phi_n((K - x)/s),  s = sigma sqrt(t).
        // The payoff vanishes above the strike, so restricting the box there
        // keeps the integrand smooth for the Gauss rule.
        let sigma = 0.3;
        let p = const_density_1d(sigma * sigma, 0.0);
        let rule = QuadratureRule::gauss(BoxDomain::new(vec![-0.5], vec![1.0]).unwrap(), 64);
        let strike = 1.0;
        let payoff = move |y: &[f64]| (strike - y[0]).max(0.0);
        let (t, x) = (0.25, 0.9);
        let c = convolve_initial(&p, &payoff, t, &[x], 0.0, &rule).unwrap();
        let s = sigma * t.sqrt();
        let z = (strike - x) / s;
        let phi_cdf = 0.5 * (1.0 + erf(z / 2.0f64.sqrt()));
        let phi_pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let exact = (strike - x) * phi_cdf + s * phi_pdf;
        assert_relative_eq!(c.value, exact, max_relative = 1e-4);
    }

    #[test]
    fn convolve_initial_flags_small_domain() {
        let p = const_density_1d(1.0, 0.0);
        let rule = QuadratureRule::gauss(BoxDomain::new(vec![-0.5], vec![0.5]).unwrap(), 24);
        let one = |_: &[f64]| 1.0;
        let c = convolve_initial(&p, &one, 1.0, &[0.0], 0.0, &rule).unwrap();
        assert!(c.coverage_warning);
        assert!(c.value < 1.0);
    }

    struct AbelKernel;
    impl HyperplaneKernel for AbelKernel {
        fn eval(&self, t: f64, _x: &[f64], tau: f64, _y: &[f64]) -> f64 {
            (t - tau).powf(-0.5)
        }
    }

    fn unit_phi(angle_dim: usize, nt: usize) -> BoundaryDensity {
        let mut axes = vec![uniform_axis(0.0, 1.0, nt)];
        for _ in 0..angle_dim {
            axes.push(uniform_axis(0.0, 1.0, 9));
        }
        let mut g = TensorGrid::zeros(axes);
        g.values_mut().fill(1.0);
        BoundaryDensity::new(g)
    }

    #[test]
    fn convolve_boundary_zero_phi_and_abel() {
        let phi0 = {
            let mut p = unit_phi(0, 33);
            p.grid.values_mut().fill(0.0);
            p
        };
        let rule = QuadratureRule::gauss(BoxDomain::new(vec![0.0], vec![1.0]).unwrap(), 8);
        let v = convolve_boundary(&AbelKernel, &phi0, 0.7, &[], &rule).unwrap();
        assert_eq!(v, 0.0);

        // Abel integral with phi == 1: int_0^t (t - tau)^(-1/2) dtau = 2 sqrt(t).
        let phi1 = unit_phi(0, 33);
        for &t in &[0.3, 0.6, 1.0] {
            let v = convolve_boundary(&AbelKernel, &phi1, t, &[], &rule).unwrap();
            assert_relative_eq!(v, 2.0 * t.sqrt(), max_relative = 1e-3);
        }
    }

    /// Gaussian kernel restricted to the hyperplane, constant coefficients.
    struct GaussOnH {
        a_tangent: f64,
        scale: f64,
    }
    impl HyperplaneKernel for GaussOnH {
        fn eval(&self, t: f64, xhat: &[f64], tau: f64, yhat: &[f64]) -> f64 {
            let s = t - tau;
            let d = xhat[0] - yhat[0];
            self.scale * (2.0 * std::f64::consts::PI * s).powf(-1.0)
                * (-d * d / (2.0 * self.a_tangent * s)).exp()
                / self.a_tangent.sqrt()
        }
    }

    #[test]
    fn convolve_boundary_matches_refined_reference() {
        // phi == 1, 1-dimensional hyperplane; reference from a much finer
        // time grid and angle rule.
        // The angle rule must resolve the kernel width sqrt(a s) of the
        // near-diagonal cells in both passes; the grids differ in time.
        let kernel = GaussOnH { a_tangent: 0.5, scale: 1.0 };
        let phi_coarse = unit_phi(1, 41);
        let phi_fine = unit_phi(1, 481);
        let rule_coarse = QuadratureRule::gauss(BoxDomain::new(vec![0.0], vec![1.0]).unwrap(), 96);
        let rule_fine = QuadratureRule::gauss(BoxDomain::new(vec![0.0], vec![1.0]).unwrap(), 128);
        let (t, xhat) = (0.8, [0.45]);
        let coarse = convolve_boundary(&kernel, &phi_coarse, t, &xhat, &rule_coarse).unwrap();
        let fine = convolve_boundary(&kernel, &phi_fine, t, &xhat, &rule_fine).unwrap();
        assert_relative_eq!(coarse, fine, max_relative = 1e-4);
    }

    #[test]
    fn mc_reproducible_and_stderr_scaling() {
        let domain = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let f = |p: &[f64]| (p[0] * p[1]).exp();
        let a = MonteCarlo::new(40_000, 42).integrate(&domain, &f);
        let b = MonteCarlo::new(40_000, 42).integrate(&domain, &f);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.error_estimate.to_bits(), b.error_estimate.to_bits());

        // Quadrupling samples should halve stderr within a factor 1.5.
        let s1 = MonteCarlo::new(20_000, 7).integrate(&domain, &f).error_estimate;
        let s4 = MonteCarlo::new(80_000, 7).integrate(&domain, &f).error_estimate;
        let ratio = s1 / s4;
        assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "stderr ratio {ratio}");
    }

    #[test]
    fn mc_derivative_self_normalized_case() {
        // u == 1, alpha = 0, proposal exactly matching the density: every
        // weight is p/q = 1, so the estimate is 1 with zero stderr.
        let p = const_density_1d(0.7, 0.2);
        let (t, s, x) = (0.4, 0.0, 0.3);
        let pair = p.pair(0.5 * (t + s), &[x], &[x]).unwrap();
        let sampler = GaussianSampler::matched(&pair, &[x], t - s).unwrap();
        let one = |_: &[f64]| 1.0;
        let est =
            mc_derivative(&p, &one, t, &[x], s, DerivOrder::Value, &sampler, 5000, 1).unwrap();
        assert_relative_eq!(est.value, 1.0, max_relative = 1e-12);
        assert!(est.stderr < 1e-12);
        assert!(!est.flagged_degenerate);
    }

    #[test]
    fn mc_derivative_agrees_with_quadrature_2d() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.8]);
        let b = DVector::from_vec(vec![0.1, -0.2]);
        let p = WkbDensity::new(
            2,
            CoefficientField::constant(a, b),
            1,
            FreezePolicy::MidpointFrozen,
        )
        .unwrap();
        let u = |y: &[f64]| (1.0 + y[0] * y[0] + 0.5 * y[1]).ln().max(0.0) + 1.0;
        let (t, s) = (0.3, 0.0);
        let x = [0.2, -0.1];
        let domain = BoxDomain::new(vec![-5.0, -5.0], vec![5.0, 5.0]).unwrap();
        let rule = QuadratureRule::gauss(domain, 48);
        let det = convolve_initial(&p, &u, t, &x, s, &rule).unwrap();
        let pair = p.pair(0.5 * (t + s), &x, &x).unwrap();
        let sampler = GaussianSampler::matched(&pair, &x, t - s).unwrap();
        let est =
            mc_derivative(&p, &u, t, &x, s, DerivOrder::Value, &sampler, 100_000, 13).unwrap();
        assert!(
            (est.value - det.value).abs() < 3.0 * est.stderr.max(1e-12),
            "mc {} +- {} vs quadrature {}",
            est.value,
            est.stderr,
            det.value
        );
    }

    #[test]
    fn mc_first_derivative_matches_closed_form() {
        // d/dx of the Gaussian convolution of u(y) = y: for p_t = a/2 p_xx
        // with drift b, int p(t,x,y) y dy = x + b t, so the derivative is 1.
        let p = const_density_1d(0.9, 0.4);
        let (t, s, x) = (0.5, 0.0, 0.1);
        let pair = p.pair(0.5 * (t + s), &[x], &[x]).unwrap();
        let sampler = GaussianSampler::matched(&pair, &[x], t - s).unwrap();
        let u = |y: &[f64]| y[0];
        let est =
            mc_derivative(&p, &u, t, &[x], s, DerivOrder::First(0), &sampler, 200_000, 99)
                .unwrap();
        assert!(
            (est.value - 1.0).abs() < 3.0 * est.stderr,
            "estimate {} +- {}",
            est.value,
            est.stderr
        );
    }

    #[test]
    fn registry_selects_by_name_and_dimension() {
        let spec = registry::IntegratorSpec { nodes_per_axis: 8, samples: 1000, seed: 0 };
        assert_eq!(registry::integrator("mc", spec).unwrap().name(), "mc");
        assert_eq!(
            registry::integrator("gauss-legendre-tensor", spec).unwrap().name(),
            "gauss-legendre-tensor"
        );
        assert!(registry::integrator("simpson", spec).is_err());
        assert_eq!(registry::auto(2, 4, spec).name(), "gauss-legendre-tensor");
        assert_eq!(registry::auto(4, 4, spec).name(), "mc");
    }
}
