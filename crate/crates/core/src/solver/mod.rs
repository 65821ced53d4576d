//! Fixed-point driver for the free-boundary surface.
//!
//! One iteration, given the current boundary surface `F^n`:
//!
//! 1. build the transformed-operator coefficients for `F^n` and a WKB
//!    density `p_n` over them,
//! 2. assemble the boundary-equation data on the hyperplane `x1 = 1` and
//!    solve the Volterra equation for the boundary density `phi`,
//! 3. reassemble the value on the hyperplane from the convolution
//!    representation and set `F^{n+1} = K - u(t, 1, .)`,
//! 4. refresh the surface's derivative fields: spatial ones from the
//!    interpolant, the time derivative by differentiating the density inside
//!    the representation (integration by parts moves the time derivative onto
//!    the boundary density, leaving regular integrals).
//!
//! The jump relation behind step 2: the normal derivative of the single-layer
//! potential at the wall carries a jump `-phi / a11` (half-Gaussian limit of
//! the anchored density). Scaling the kernel and inhomogeneity by `a11 / 2`
//! puts the equation in the normalized second-kind form `phi/2 = Gamma +
//! int K phi` that the Volterra solver consumes, with `phi` itself unscaled.
//!
//! Iterations stop when the geometric-tail bound `rho_n k/(1-k) <= eps`
//! holds for the running contraction estimate `k`, mirroring a Cauchy
//! criterion in the discrete surface norm.

pub mod hplane;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{graded_time_axis, TensorGrid};
use crate::model::{default_ellipticity_samples, ellipticity_bounds, MarketModel};
use crate::quad::{registry, BoxDomain, QuadratureRule, Singularity};
use crate::transform::{BoundarySurface, TransformedPoint};
use crate::volterra::{gamma as gamma_op, solve_second_kind, BoundaryDensity, KernelOp};
use crate::wkb::{CoefficientField, FreezePolicy, WkbDensity};

pub use hplane::{Flavor, HPlaneOps};

/// Formulation of the per-iteration linear problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Direct iteration on the value `u`.
    #[default]
    U,
    /// Time-scaled iteration on `v = t u` with source `u^n` (stabilization
    /// option; the boundary datum becomes `-K t`).
    V,
}

impl Mode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "u" => Ok(Mode::U),
            "v" => Ok(Mode::V),
            other => Err(Error::Config(format!("unknown solver mode '{other}' (known: u, v)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::U => "u",
            Mode::V => "v",
        }
    }
}

/// Solver settings with spec-pinned defaults.
#[derive(Debug, Clone)]
pub struct Settings {
    pub mode: Mode,
    pub epsilon: f64,
    pub max_iter: usize,
    /// Time-scaling substep factor; 1 solves `[0, T]` in one piece.
    pub rho_factor: f64,
    pub wkb_order: usize,
    pub freeze_policy: FreezePolicy,
    /// Iteration seed for the boundary (strike by default; 1.0 reproduces the
    /// bare front-fixed seed).
    pub boundary_seed: Option<f64>,
    /// Ablation switch: dimensionles initial condition `max(K - x1, 0)`.
    pub literal_ic: bool,
    /// Ablation switch: `d1 p + p` kernel sign instead of `d1 p - p`.
    pub kernel_sign_plus: bool,
    pub quad_nodes: usize,
    pub mc_samples: usize,
    /// Dimension at which convolutions switch to Monte Carlo.
    pub mc_switch_dim: usize,
    /// Forced quadrature backend name, overriding the dimension switch.
    pub backend_override: Option<String>,
    pub seed: u64,
    /// Abort when more than this fraction of boundary nodes gets clamped.
    pub clamp_abort_fraction: f64,
    /// Geometric grading ratio of the time axis.
    pub time_grading: f64,
    /// Cap on the time step as a fraction of the horizon.
    pub max_substep_fraction: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            mode: Mode::U,
            epsilon: 1e-3,
            max_iter: 25,
            rho_factor: 1.0,
            wkb_order: 1,
            freeze_policy: FreezePolicy::MidpointFrozen,
            boundary_seed: None,
            literal_ic: false,
            kernel_sign_plus: false,
            quad_nodes: 24,
            mc_samples: 100_000,
            mc_switch_dim: 4,
            backend_override: None,
            seed: 0,
            clamp_abort_fraction: 0.01,
            time_grading: 1.2,
            max_substep_fraction: 0.05,
        }
    }
}

/// Discretization of one solve interval.
#[derive(Debug, Clone)]
pub struct SolverGrids {
    pub n: usize,
    pub time: Vec<f64>,
    pub x1: Vec<f64>,
    pub angles: Vec<Vec<f64>>,
}

impl SolverGrids {
    pub fn build(
        n: usize,
        t_start: f64,
        t_end: f64,
        time_steps: usize,
        x1_nodes: usize,
        angle_nodes: usize,
        x1_max: f64,
        simplex_margin: f64,
        log_x1: bool,
        grading: f64,
        max_step: f64,
    ) -> Result<Self> {
        let mut time = graded_time_axis(t_end - t_start, time_steps, grading, max_step)?;
        for t in time.iter_mut() {
            *t += t_start;
        }
        Ok(SolverGrids {
            n,
            time,
            x1: crate::grid::x1_axis(x1_max, x1_nodes, log_x1)?,
            angles: crate::grid::angle_axes(n, angle_nodes, simplex_margin)?,
        })
    }

    pub fn angle_dim(&self) -> usize {
        self.n - 1
    }

    fn surface_axes(&self) -> Vec<Vec<f64>> {
        let mut axes = vec![self.time.clone()];
        axes.extend(self.angles.iter().cloned());
        axes
    }

    /// Flat list of angle-node coordinate vectors (lexicographic order).
    fn angle_nodes_flat(&self) -> Vec<Vec<f64>> {
        if self.angle_dim() == 0 {
            return vec![Vec::new()];
        }
        let probe = TensorGrid::zeros(self.angles.clone());
        probe.indices().map(|idx| probe.node(&idx)).collect()
    }
}

/// Discrete surface distance: sup of value differences plus sup of first and
/// second divided-difference differences along every axis (proxy for a
/// second-order Hoelder norm; the weights of the continuous norm are
/// deliberately dropped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscreteNorm {
    pub value: f64,
    pub sup: f64,
}

pub fn discrete_norm(a: &TensorGrid, b: &TensorGrid) -> DiscreteNorm {
    assert_eq!(a.shape(), b.shape());
    let mut sup = 0.0f64;
    for (x, y) in a.values().iter().zip(b.values()) {
        sup = sup.max((x - y).abs());
    }
    let mut total = sup;
    for axis in 0..a.ndim() {
        total += diff_sup(a, b, axis, 1) + diff_sup(a, b, axis, 2);
    }
    DiscreteNorm { value: total, sup }
}

fn diff_sup(a: &TensorGrid, b: &TensorGrid, axis: usize, order: usize) -> f64 {
    let nodes = a.axis(axis);
    if nodes.len() <= order {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for idx in a.indices() {
        if idx[axis] + order >= nodes.len() {
            continue;
        }
        let mut ia = idx.clone();
        let d = |g: &TensorGrid, ia: &mut Vec<usize>| -> f64 {
            // Divided differences along the axis.
            let i = ia[axis];
            let h1 = nodes[i + 1] - nodes[i];
            if order == 1 {
                let v0 = g.get(ia);
                ia[axis] = i + 1;
                let v1 = g.get(ia);
                ia[axis] = i;
                (v1 - v0) / h1
            } else {
                let h2 = nodes[i + 2] - nodes[i + 1];
                let v0 = g.get(ia);
                ia[axis] = i + 1;
                let v1 = g.get(ia);
                ia[axis] = i + 2;
                let v2 = g.get(ia);
                ia[axis] = i;
                2.0 * ((v2 - v1) / h2 - (v1 - v0) / h1) / (h1 + h2)
            }
        };
        let da = d(a, &mut ia);
        let db = d(b, &mut ia);
        worst = worst.max((da - db).abs());
    }
    worst
}

/// Graded partition of `[0, T]` driven by the time-scaling factor.
///
/// The first interval has length `rho_factor * T`, subsequent intervals grow
/// geometrically (ratio 1.3) and the last one is clipped at the horizon. The
/// iteration restarts on each interval with the previous interval's terminal
/// value as initial data.
pub fn substep_schedule(horizon: f64, rho_factor: f64) -> Result<Vec<(f64, f64)>> {
    if !(rho_factor > 0.0 && rho_factor <= 1.0) {
        return Err(Error::domain(format!("substep_schedule: rho_factor {rho_factor} outside (0, 1]")));
    }
    let mut out = Vec::new();
    let mut start = 0.0;
    let mut len = rho_factor * horizon;
    while start < horizon - 1e-12 * horizon {
        let end = (start + len).min(horizon);
        out.push((start, end));
        start = end;
        len *= 1.3;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-iteration operator bundle
// ---------------------------------------------------------------------------

type PsiFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Everything needed to evaluate the representation under the density of one
/// boundary iterate: anchored kernel rows, initial-data convolutions, the
/// jump scale, and the quadrature rule over the truncated domain.
pub struct IterOps {
    pub hp: HPlaneOps,
    pub coeffs: CoefficientField,
    pub surface: Arc<BoundarySurface>,
    pub grids: SolverGrids,
    pub strike: f64,
    pub t0: f64,
    /// Transformed initial data; `None` means identically zero.
    pub psi0: Option<PsiFn>,
    pub o_rule: QuadratureRule,
    pub sign_plus: bool,
    angle_nodes: Vec<Vec<f64>>,
}

impl IterOps {
    /// Full coordinates of the hyperplane field node `alpha`.
    pub fn h_point(&self, alpha: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.grids.n);
        x.push(1.0);
        x.extend_from_slice(&self.angle_nodes[alpha]);
        x
    }

    /// Jump scale `a11(t, (1, xhat)) / 2` at a hyperplane field node.
    pub fn a11_half(&self, t: f64, alpha: usize) -> f64 {
        let x = self.h_point(alpha);
        0.5 * (self.coeffs.a)(t, &x)[(0, 0)]
    }

    /// Time-singular potential `int_{t0}^{t} int_H flavor(p)(t, x; tau, .)
    /// phi(tau, .) dH dtau` with the same product integration as the
    /// Volterra march. `t` must be a node of the density's time grid.
    pub fn potential(&self, t: f64, x: &[f64], flavor: Flavor, phi: &BoundaryDensity) -> Result<f64> {
        let axis = phi.time_axis();
        let k = time_index(axis, t)?;
        if k == 0 {
            return Ok(0.0);
        }
        let m = phi.slice_len();
        let mut row = vec![0.0; m];
        let mut acc = 0.0;
        // First sigma cell by interior Gauss points.
        let s1 = (t - axis[k - 1]).sqrt();
        let h_k = t - axis[k - 1];
        let half = 0.5 * s1;
        let off = half / 3.0f64.sqrt();
        for sg in [half - off, half + off] {
            let tau = t - sg * sg;
            let theta = ((tau - axis[k - 1]) / h_k).clamp(0.0, 1.0);
            self.hp.kernel_row(t, x, tau, flavor, &mut row)?;
            let prev = phi.slice(k - 1);
            let cur = phi.slice(k);
            let dot: f64 = row
                .iter()
                .zip(prev.iter().zip(cur))
                .map(|(r, (p0, p1))| r * ((1.0 - theta) * p0 + theta * p1))
                .sum();
            acc += half * 2.0 * sg * dot;
        }
        // Trapezoid over mapped grid nodes.
        let sigmas: Vec<f64> = (0..k).rev().map(|j| (t - axis[j]).sqrt()).collect();
        self.hp.kernel_row(t, x, axis[k - 1], flavor, &mut row)?;
        let mut g_prev = 2.0
            * sigmas[0]
            * row.iter().zip(phi.slice(k - 1)).map(|(r, p)| r * p).sum::<f64>();
        for (idx, w) in sigmas.windows(2).enumerate() {
            let j = k - 2 - idx;
            self.hp.kernel_row(t, x, axis[j], flavor, &mut row)?;
            let g_next =
                2.0 * w[1] * row.iter().zip(phi.slice(j)).map(|(r, p)| r * p).sum::<f64>();
            acc += 0.5 * (w[1] - w[0]) * (g_prev + g_next);
            g_prev = g_next;
        }
        Ok(acc)
    }

    /// Initial-data convolution `int_O flavor(p)(t, x; t0, y) psi(y) dy`;
    /// zero when the initial data vanishes.
    pub fn initial_term(&self, t: f64, x: &[f64], flavor: Flavor) -> Result<f64> {
        let Some(psi) = &self.psi0 else {
            return Ok(0.0);
        };
        if !(t > self.t0) {
            // At the initial instant the convolution degenerates to the data.
            return Ok(match flavor {
                Flavor::Density => psi(x),
                _ => 0.0,
            });
        }
        let density = &self.hp.density;
        let psi = psi.clone();
        let integrand = move |y: &[f64]| -> f64 {
            let w = psi(y);
            if w == 0.0 {
                return 0.0;
            }
            match density.density_derivatives(t, x, self.t0, y) {
                Ok(d) => {
                    let v = match flavor {
                        Flavor::Density => d.p,
                        Flavor::Dx1 => d.dp_dx1(),
                        Flavor::DxMinusDensity => d.dp_dx1() - d.p,
                        Flavor::DxPlusDensity => d.dp_dx1() + d.p,
                        Flavor::DAngle(j) => d.grad[1 + j],
                        Flavor::DAngleAngle(j, l) => d.hess[(1 + j, 1 + l)],
                        Flavor::Dt => d.dp_dt,
                    };
                    v * w
                }
                Err(_) => 0.0,
            }
        };
        Ok(self.o_rule.integrator.integrate(&self.o_rule.domain, &integrand).value)
    }

    /// Value of the representation at `(t, x)` (boundary potential plus
    /// initial convolution).
    pub fn value_at(&self, t: f64, x: &[f64], phi: &BoundaryDensity) -> Result<f64> {
        Ok(self.potential(t, x, Flavor::Density, phi)? + self.initial_term(t, x, Flavor::Density)?)
    }

    /// Inhomogeneity grid of the normalized boundary equation (already
    /// scaled by `a11/2`); `k_eff` per mode.
    pub fn gamma_grid(&self, mode: Mode) -> Result<TensorGrid> {
        let axes = self.grids.surface_axes();
        let mut grid = TensorGrid::zeros(axes);
        let time = self.grids.time.clone();
        let m = self.angle_nodes.len();
        let values: Vec<Result<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|flat| {
                let k = flat / m;
                let alpha = flat % m;
                let t = time[k];
                let k_eff = match mode {
                    Mode::U => self.strike,
                    Mode::V => (t - self.t0) * self.strike,
                };
                let base = if self.psi0.is_none() {
                    k_eff
                } else if k == 0 {
                    // Delta-family limit of the data term at the wall.
                    let x = self.h_point(alpha);
                    let psi = self.psi0.as_ref().unwrap();
                    let h = 1e-5;
                    let mut xp = x.clone();
                    xp[0] += h;
                    let mut xm = x.clone();
                    xm[0] -= h;
                    let dpsi = (psi(&xp) - psi(&xm)) / (2.0 * h);
                    k_eff + dpsi - psi(&x)
                } else {
                    let psi = self.psi0.as_ref().unwrap().clone();
                    let g = gamma_op(
                        &self.hp.density,
                        &move |y: &[f64]| psi(y),
                        t,
                        &self.angle_nodes[alpha],
                        self.t0,
                        k_eff,
                        &self.o_rule,
                    )?;
                    g.value
                };
                Ok(self.a11_half(t, alpha) * base)
            })
            .collect();
        for (dst, v) in grid.values_mut().iter_mut().zip(values) {
            *dst = v?;
        }
        Ok(grid)
    }

    /// Boundary values `u(t_k, 1, xhat_alpha)`; the first slice carries the
    /// initial data directly.
    pub fn boundary_values(&self, phi: &BoundaryDensity) -> Result<TensorGrid> {
        let axes = self.grids.surface_axes();
        let mut grid = TensorGrid::zeros(axes);
        let time = self.grids.time.clone();
        let m = self.angle_nodes.len();
        let values: Vec<Result<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|flat| {
                let k = flat / m;
                let alpha = flat % m;
                let x = self.h_point(alpha);
                if k == 0 {
                    return Ok(match &self.psi0 {
                        Some(psi) => psi(&x),
                        None => 0.0,
                    });
                }
                self.value_at(time[k], &x, phi)
            })
            .collect();
        for (dst, v) in grid.values_mut().iter_mut().zip(values) {
            *dst = v?;
        }
        Ok(grid)
    }

    /// Value samples on the full `(t, x1, xhat)` grid.
    pub fn value_samples(&self, phi: &BoundaryDensity) -> Result<TensorGrid> {
        let mut axes = vec![self.grids.time.clone(), self.grids.x1.clone()];
        axes.extend(self.grids.angles.iter().cloned());
        let mut grid = TensorGrid::zeros(axes);
        let time = self.grids.time.clone();
        let m = self.angle_nodes.len();
        let nx1 = self.grids.x1.len();
        let values: Vec<Result<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|flat| {
                let alpha = flat % m;
                let i = (flat / m) % nx1;
                let k = flat / (m * nx1);
                let mut x = Vec::with_capacity(self.grids.n);
                x.push(self.grids.x1[i]);
                x.extend_from_slice(&self.angle_nodes[alpha]);
                if k == 0 {
                    return Ok(match &self.psi0 {
                        Some(psi) => psi(&x),
                        None => 0.0,
                    });
                }
                self.value_at(time[k], &x, phi)
            })
            .collect();
        for (dst, v) in grid.values_mut().iter_mut().zip(values) {
            *dst = v?;
        }
        Ok(grid)
    }

    /// Boundary time derivative `F_t = -u_t` on the surface grid by moving
    /// the time derivative onto the boundary density (integration by parts):
    /// `u_t = int_H p(t, .; t0) phi(t0) + int int p phi_tau + d/dt (initial
    /// term)`. The first slice copies the second (the boundary slope is not
    /// defined at maturity).
    pub fn boundary_time_derivative(&self, phi: &BoundaryDensity) -> Result<TensorGrid> {
        let axes = self.grids.surface_axes();
        let mut grid = TensorGrid::zeros(axes);
        let time = self.grids.time.clone();
        let m = self.angle_nodes.len();
        // Time-derivative grid of phi from its interpolant.
        let mut phi_tau = BoundaryDensity::new(TensorGrid::zeros(phi.grid.axes().to_vec()));
        let nodes: Vec<Vec<usize>> = phi.grid.indices().collect();
        for idx in &nodes {
            let pt = phi.grid.node(idx);
            phi_tau.grid.set(idx, phi.grid.interp_deriv(&pt, &[0]));
        }
        let values: Vec<Result<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|flat| {
                let k = flat / m;
                let alpha = flat % m;
                if k == 0 {
                    return Ok(f64::NAN); // replaced below
                }
                let t = time[k];
                let x = self.h_point(alpha);
                let mut row = vec![0.0; m];
                self.hp.kernel_row(t, &x, self.t0, Flavor::Density, &mut row)?;
                let boundary_term: f64 =
                    row.iter().zip(phi.slice(0)).map(|(r, p)| r * p).sum();
                let memory = self.potential(t, &x, Flavor::Density, &phi_tau)?;
                let initial = self.initial_term(t, &x, Flavor::Dt)?;
                Ok(-(boundary_term + memory + initial))
            })
            .collect();
        for (dst, v) in grid.values_mut().iter_mut().zip(values) {
            *dst = v?;
        }
        // Pin the maturity slice to its neighbor.
        let slice_len = m;
        let (first, rest) = grid.values_mut().split_at_mut(slice_len);
        first.copy_from_slice(&rest[..slice_len]);
        Ok(grid)
    }

    /// Smooth-fit residual `sup |u_x1 - u + K|` over the hyperplane grid
    /// (skipping the maturity slice), with `u_x1` carrying the single-layer
    /// jump `-phi/a11` explicitly.
    pub fn smooth_fit_residual(&self, phi: &BoundaryDensity, u_h: &TensorGrid) -> Result<f64> {
        let time = &self.grids.time;
        let m = self.angle_nodes.len();
        let worst: Vec<Result<f64>> = (1..time.len())
            .into_par_iter()
            .map(|k| {
                let t = time[k];
                let mut local = 0.0f64;
                for alpha in 0..m {
                    let x = self.h_point(alpha);
                    let jump = -phi.slice(k)[alpha] / (2.0 * self.a11_half(t, alpha));
                    let pv = self.potential(t, &x, Flavor::Dx1, phi)?
                        + self.initial_term(t, &x, Flavor::Dx1)?;
                    let u = u_h.values()[k * m + alpha];
                    local = local.max((jump + pv - u + self.strike).abs());
                }
                Ok(local)
            })
            .collect();
        let mut res = 0.0f64;
        for w in worst {
            res = res.max(w?);
        }
        Ok(res)
    }
}

fn time_index(axis: &[f64], t: f64) -> Result<usize> {
    axis.iter()
        .position(|&v| (v - t).abs() <= 1e-10 * (1.0 + t.abs()))
        .ok_or_else(|| Error::domain(format!("time {t} is not a grid node")))
}

/// Production Volterra kernel: `(a11/2) (d1 p - p)` rows on the hyperplane.
struct BoundaryKernel<'a> {
    ops: &'a IterOps,
}

impl KernelOp for BoundaryKernel<'_> {
    fn row(&self, t: f64, alpha: usize, tau: f64, out: &mut [f64]) -> Result<()> {
        let x = self.ops.h_point(alpha);
        let flavor = if self.ops.sign_plus {
            Flavor::DxPlusDensity
        } else {
            Flavor::DxMinusDensity
        };
        self.ops.hp.kernel_row(t, &x, tau, flavor, out)?;
        let scale = self.ops.a11_half(t, alpha);
        for v in out.iter_mut() {
            *v *= scale;
        }
        Ok(())
    }

    fn singularity(&self) -> Singularity {
        Singularity::InverseSqrt
    }
}

// ---------------------------------------------------------------------------
// Iteration state and driver
// ---------------------------------------------------------------------------

/// State of the fixed-point iteration after `iteration` updates.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub iteration: usize,
    pub surface: BoundarySurface,
    pub phi: BoundaryDensity,
    /// Value on the hyperplane, `u^n(t, 1, xhat)`.
    pub boundary_values: TensorGrid,
    /// Value samples on the full grid (assembled on demand).
    pub value_samples: Option<TensorGrid>,
    pub residual_history: Vec<f64>,
    pub sup_residual_history: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub clamp_counts: Vec<usize>,
}

/// One solve interval plus its immutable context.
pub struct Workspace {
    pub model: MarketModel,
    pub grids: SolverGrids,
    pub settings: Settings,
    pub t0: f64,
    pub psi0: Option<PsiFn>,
}

impl Workspace {
    pub fn new(
        model: MarketModel,
        grids: SolverGrids,
        settings: Settings,
        t0: f64,
        psi0: Option<PsiFn>,
    ) -> Result<Self> {
        let samples = default_ellipticity_samples(&model);
        ellipticity_bounds(&model, &samples)?;
        if settings.mode == Mode::V && t0 > 0.0 {
            return Err(Error::Config(
                "the time-scaled mode anchors at t = 0 and cannot restart from t0 > 0".into(),
            ));
        }
        Ok(Workspace { model, grids, settings, t0, psi0 })
    }

    /// Transformed-operator coefficient evaluators for a boundary iterate.
    fn coefficient_field(&self, surface: &Arc<BoundarySurface>) -> CoefficientField {
        let floor = 1e-8 * self.model.strike;
        let make = |surface: Arc<BoundarySurface>, model: MarketModel| {
            move |t: f64, x: &[f64]| {
                let mut p = TransformedPoint::from_coords(x);
                // Evaluations may probe slightly outside the inscribed box;
                // clamp to the surface hull and keep F positive.
                p.x1 = p.x1.max(1e-6);
                let mut sample = surface.sample(t, &p.angles);
                sample.f = sample.f.max(floor);
                transformed_coefficients_total(&model, &sample, t, &p)
            }
        };
        let fa = make(surface.clone(), self.model.clone());
        let fb = make(surface.clone(), self.model.clone());
        let fc = make(surface.clone(), self.model.clone());
        CoefficientField::new(
            Arc::new(move |t, x| fa(t, x).a),
            Arc::new(move |t, x| fb(t, x).b),
            Arc::new(move |t, x| fc(t, x).c),
        )
    }

    /// Builds the per-iteration operator bundle for `F^n`.
    pub fn iteration_ops(&self, surface: &BoundarySurface) -> Result<IterOps> {
        let surface = Arc::new(surface.clone());
        let coeffs = self.coefficient_field(&surface);
        let density = WkbDensity::new(
            self.grids.n,
            coeffs.clone(),
            self.settings.wkb_order,
            self.settings.freeze_policy,
        )?;
        let hp = HPlaneOps::new(density, self.grids.angles.clone());
        let mut lo = vec![1.0];
        let mut hi = vec![*self.grids.x1.last().unwrap()];
        for axis in &self.grids.angles {
            lo.push(axis[0]);
            hi.push(*axis.last().unwrap());
        }
        let spec = registry::IntegratorSpec {
            nodes_per_axis: self.settings.quad_nodes,
            samples: self.settings.mc_samples,
            seed: self.settings.seed,
        };
        let integrator = match &self.settings.backend_override {
            Some(name) => registry::integrator(name, spec)?,
            None => registry::auto(self.grids.n, self.settings.mc_switch_dim, spec),
        };
        let o_rule = QuadratureRule { domain: BoxDomain::new(lo, hi)?, integrator };
        let angle_nodes = self.grids.angle_nodes_flat();
        Ok(IterOps {
            hp,
            coeffs,
            surface,
            grids: self.grids.clone(),
            strike: self.model.strike,
            t0: self.t0,
            psi0: self.psi0.clone(),
            o_rule,
            sign_plus: self.settings.kernel_sign_plus,
            angle_nodes,
        })
    }
}

/// Full transformed coefficients at a point with an explicit sample (free
/// function so closures can stay lightweight).
fn transformed_coefficients_total(
    model: &MarketModel,
    sample: &crate::transform::BoundarySample,
    t: f64,
    p: &TransformedPoint,
) -> crate::transform::TransformedCoefficients {
    crate::transform::transformed_coefficients_at(model, sample, t, p).unwrap_or_else(|_| {
        // Outside the admissible wedge (clamped inputs should prevent this);
        // return a benign elliptic fallback to keep evaluators total.
        let n = p.dim();
        crate::transform::TransformedCoefficients {
            a: nalgebra::DMatrix::identity(n, n) * 1e-8,
            b: DVector::zeros(n),
            c: 0.0,
        }
    })
}

/// Builds the initial iterate: seeds the boundary, runs one representation
/// pass (density for the seed, Volterra solve, boundary convolutions), and
/// assembles `F^1 = K - u^1` on the hyperplane.
pub fn step1_init(ws: &Workspace) -> Result<IterationState> {
    let k = ws.model.strike;
    let seed = ws.settings.boundary_seed.unwrap_or(k);
    if !(seed > 0.0 && seed <= k) {
        return Err(Error::domain(format!("boundary seed {seed} outside (0, K]")));
    }
    let surface = BoundarySurface::flat(
        {
            let mut axes = vec![ws.grids.time.clone()];
            axes.extend(ws.grids.angles.iter().cloned());
            axes
        },
        ws.grids.n,
        seed,
    );
    let state = IterationState {
        iteration: 0,
        surface,
        phi: BoundaryDensity::zeros(ws.grids.time.clone(), ws.grids.angles.clone()),
        boundary_values: TensorGrid::zeros({
            let mut axes = vec![ws.grids.time.clone()];
            axes.extend(ws.grids.angles.iter().cloned());
            axes
        }),
        value_samples: None,
        residual_history: Vec::new(),
        sup_residual_history: Vec::new(),
        contraction_ratios: Vec::new(),
        clamp_counts: Vec::new(),
    };
    step2_update(ws, &state).map_err(|e| match e {
        Error::Solver { .. } => e,
        other => Error::solver("step1", other.to_string()),
    })
}

/// One fixed-point update `F^n -> F^{n+1}`.
pub fn step2_update(ws: &Workspace, state: &IterationState) -> Result<IterationState> {
    let ops = ws.iteration_ops(&state.surface)?;
    let k_strike = ws.model.strike;

    let (phi, u_h) = match ws.settings.mode {
        Mode::U => {
            let gamma = ops.gamma_grid(Mode::U).map_err(stage("gamma"))?;
            let kernel = BoundaryKernel { ops: &ops };
            let phi = solve_second_kind(&kernel, &gamma).map_err(stage("volterra"))?;
            let u_h = ops.boundary_values(&phi).map_err(stage("boundary-convolution"))?;
            (phi, u_h)
        }
        Mode::V => {
            let source = state
                .value_samples
                .clone()
                .map(Ok)
                .unwrap_or_else(|| ops.value_samples(&state.phi))
                .map_err(stage("v-source"))?;
            v_mode_update(ws, &ops, &source)?
        }
    };

    // F^{n+1} = K - u on the hyperplane, clamped into (0, K].
    let mut f_grid = u_h.clone();
    for v in f_grid.values_mut().iter_mut() {
        *v = k_strike - *v;
    }
    let mut new_surface = BoundarySurface::from_values(f_grid, ws.grids.n);
    let clamped = new_surface.clamp_values(1e-8 * k_strike, k_strike);
    let frac = clamped as f64 / new_surface.values().len() as f64;
    if frac > ws.settings.clamp_abort_fraction {
        return Err(Error::solver(
            "clamp",
            format!(
                "{clamped} of {} boundary nodes clamped ({:.2}% > {:.2}% budget)",
                new_surface.values().len(),
                100.0 * frac,
                100.0 * ws.settings.clamp_abort_fraction
            ),
        ));
    }
    new_surface.refresh_spatial_derivatives();
    let f_t = ops.boundary_time_derivative(&phi).map_err(stage("greeks-ft"))?;
    new_surface.set_time_derivative(f_t);

    let residual = discrete_norm(new_surface.values(), state.surface.values());
    let mut residual_history = state.residual_history.clone();
    let mut sup_history = state.sup_residual_history.clone();
    let mut ratios = state.contraction_ratios.clone();
    if let Some(prev) = residual_history.last() {
        if *prev > 0.0 {
            ratios.push(residual.value / prev);
        }
    }
    residual_history.push(residual.value);
    sup_history.push(residual.sup);
    let mut clamp_counts = state.clamp_counts.clone();
    clamp_counts.push(clamped);

    Ok(IterationState {
        iteration: state.iteration + 1,
        surface: new_surface,
        phi,
        boundary_values: u_h,
        value_samples: None,
        residual_history,
        sup_residual_history: sup_history,
        contraction_ratios: ratios,
        clamp_counts,
    })
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        err @ Error::Solver { .. } => err,
        other => Error::solver(name, other.to_string()),
    }
}

/// Time-scaled update: solve for `v = t u` with source `u^n`, boundary datum
/// `-K t`; returns the boundary density of `v` and `u^{n+1} = v/t` on `H`.
fn v_mode_update(
    ws: &Workspace,
    ops: &IterOps,
    u_source: &TensorGrid,
) -> Result<(BoundaryDensity, TensorGrid)> {
    let time = ws.grids.time.clone();
    let m = ops.angle_nodes.len();
    let k_strike = ws.model.strike;

    // Source potential W(t, x) = int_0^t int_O p(t,x;s,y) u^n(s,y) dy ds and
    // its x1 derivative on the hyperplane. Bounded integrand: trapezoid in s
    // with the s -> t endpoint replaced by its analytic limit.
    let w_and_dw = |t: f64, x: &[f64]| -> Result<(f64, f64)> {
        let k = time_index(&time, t)?;
        if k == 0 {
            return Ok((0.0, 0.0));
        }
        let interp_u = |s: f64, y: &[f64]| -> f64 {
            let mut pt = Vec::with_capacity(1 + y.len());
            pt.push(s);
            pt.extend_from_slice(y);
            u_source.interp(&pt)
        };
        let mut vals = Vec::with_capacity(k + 1);
        for &s in &time[..k] {
            let density = &ops.hp.density;
            let value = ops.o_rule.integrator.integrate(&ops.o_rule.domain, &move |y: &[f64]| {
                let u = interp_u(s, y);
                if u == 0.0 {
                    return 0.0;
                }
                match density.density_derivatives(t, x, s, y) {
                    Ok(d) => d.p * u,
                    Err(_) => 0.0,
                }
            });
            let dvalue = ops.o_rule.integrator.integrate(&ops.o_rule.domain, &move |y: &[f64]| {
                let u = interp_u(s, y);
                if u == 0.0 {
                    return 0.0;
                }
                match density.density_derivatives(t, x, s, y) {
                    Ok(d) => d.dp_dx1() * u,
                    Err(_) => 0.0,
                }
            });
            vals.push((value.value, dvalue.value));
        }
        // Endpoint s = t: lim int p u = u(t, x); lim int d1 p u = d1 u(t, x).
        let mut pt = Vec::with_capacity(1 + x.len());
        pt.push(t);
        pt.extend_from_slice(x);
        vals.push((u_source.interp(&pt), u_source.interp_deriv(&pt, &[1])));
        let mut w = 0.0;
        let mut dw = 0.0;
        for (j, pair) in vals.windows(2).enumerate() {
            let h = time[j + 1] - time[j];
            w += 0.5 * h * (pair[0].0 + pair[1].0);
            dw += 0.5 * h * (pair[0].1 + pair[1].1);
        }
        Ok((w, dw))
    };

    // Gamma_v = (a11/2) [ (d1 W - W)|_H + t K ].
    let axes = {
        let mut axes = vec![time.clone()];
        axes.extend(ws.grids.angles.iter().cloned());
        axes
    };
    let mut gamma = TensorGrid::zeros(axes);
    let entries: Vec<Result<f64>> = (0..gamma.len())
        .into_par_iter()
        .map(|flat| {
            let k = flat / m;
            let alpha = flat % m;
            let t = time[k];
            let x = ops.h_point(alpha);
            let (w, dw) = w_and_dw(t, &x)?;
            Ok(ops.a11_half(t, alpha) * (dw - w + (t - ws.t0) * k_strike))
        })
        .collect();
    for (dst, v) in gamma.values_mut().iter_mut().zip(entries) {
        *dst = v?;
    }

    let kernel = BoundaryKernel { ops };
    let phi_v = solve_second_kind(&kernel, &gamma).map_err(stage("volterra-v"))?;

    // u = v / t on the hyperplane (psi0 slice at t = t0).
    let mut u_h = TensorGrid::zeros(gamma.axes().to_vec());
    let entries: Vec<Result<f64>> = (0..u_h.len())
        .into_par_iter()
        .map(|flat| {
            let k = flat / m;
            let alpha = flat % m;
            let x = ops.h_point(alpha);
            if k == 0 {
                return Ok(match &ops.psi0 {
                    Some(psi) => psi(&x),
                    None => 0.0,
                });
            }
            let t = time[k];
            let (w, _) = w_and_dw(t, &x)?;
            let v = ops.potential(t, &x, Flavor::Density, &phi_v)? + w;
            Ok(v / (t - ws.t0))
        })
        .collect();
    for (dst, v) in u_h.values_mut().iter_mut().zip(entries) {
        *dst = v?;
    }
    Ok((phi_v, u_h))
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

/// Greeks of the boundary surface: derivative fields from differentiating
/// the density inside the converged representation.
#[derive(Debug, Clone)]
pub struct GreeksSurface {
    pub axes: Vec<Vec<f64>>,
    pub n: usize,
    pub f_t: TensorGrid,
    pub f_j: Vec<TensorGrid>,
    /// Upper triangle in [`crate::transform::tri_index`] order.
    pub f_jl: Vec<TensorGrid>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct InvariantReport {
    pub min_boundary: f64,
    pub max_boundary: f64,
    pub monotonicity_violations: usize,
    pub dominance_violations: usize,
    pub max_bc3_residual: f64,
    pub clamped_nodes_final: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub converged: bool,
    pub iterations: usize,
    pub mode: String,
    pub intervals: usize,
    pub residual_history: Vec<f64>,
    pub sup_residual_history: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub contraction_estimate: f64,
    pub clamp_counts: Vec<usize>,
    pub smooth_fit_residual: f64,
    pub invariants: InvariantReport,
    /// Wall times per stage; excluded from determinism comparisons.
    pub timings_ms: Vec<(String, f64)>,
}

pub struct RunOutcome {
    pub surface: BoundarySurface,
    pub greeks: GreeksSurface,
    pub value_samples: TensorGrid,
    pub phi: BoundaryDensity,
    pub report: RunReport,
}

/// Grid resolution bundle for [`run`].
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub time_steps: usize,
    pub x1_nodes: usize,
    pub angle_nodes: usize,
    pub x1_max: f64,
    pub simplex_margin: f64,
    pub log_x1: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            time_steps: 48,
            x1_nodes: 25,
            angle_nodes: 17,
            x1_max: 8.0,
            simplex_margin: 1e-3,
            log_x1: false,
        }
    }
}

/// Runs the fixed-point iteration over the substep schedule and extracts
/// the converged boundary, its Greeks, and a run report.
pub fn run(model: &MarketModel, grid_spec: GridSpec, settings: Settings) -> Result<RunOutcome> {
    let horizon = model.horizon;
    let intervals = substep_schedule(horizon, settings.rho_factor)?;
    let mut timings: Vec<(String, f64)> = Vec::new();

    let mut surfaces: Vec<BoundarySurface> = Vec::new();
    let mut greeks_parts: Vec<GreeksSurface> = Vec::new();
    let mut phis: Vec<BoundaryDensity> = Vec::new();
    let mut samples_parts: Vec<TensorGrid> = Vec::new();
    let mut all_residuals = Vec::new();
    let mut all_sup_residuals = Vec::new();
    let mut all_ratios = Vec::new();
    let mut all_clamps = Vec::new();
    let mut converged_all = true;
    let mut iterations_total = 0;
    let mut smooth_fit_worst = 0.0f64;
    let mut last_khat = 0.5;

    let mut prev_samples: Option<TensorGrid> = None;
    for (iv, &(t_a, t_b)) in intervals.iter().enumerate() {
        let t_setup = Instant::now();
        let steps = ((grid_spec.time_steps as f64) * (t_b - t_a) / horizon).ceil() as usize;
        let grids = SolverGrids::build(
            model.n,
            t_a,
            t_b,
            steps.max(8),
            grid_spec.x1_nodes,
            grid_spec.angle_nodes,
            grid_spec.x1_max,
            grid_spec.simplex_margin,
            grid_spec.log_x1,
            settings.time_grading,
            settings.max_substep_fraction * horizon,
        )?;
        let psi0: Option<PsiFn> = if iv == 0 {
            initial_data(model, &settings)
        } else {
            let samples = prev_samples.clone().expect("previous interval samples");
            Some(Arc::new(move |x: &[f64]| {
                let mut pt = Vec::with_capacity(1 + x.len());
                pt.push(t_a);
                pt.extend_from_slice(x);
                samples.interp(&pt).max(0.0)
            }))
        };
        let ws = Workspace::new(model.clone(), grids, settings.clone(), t_a, psi0)?;
        timings.push((format!("setup[{iv}]"), ms(t_setup)));

        let t_iter = Instant::now();
        let mut state = step1_init(&ws)?;
        let mut stale_count = 0usize;
        let converged;
        loop {
            let khat = match state.contraction_ratios.last() {
                Some(&r) => r.clamp(0.05, 0.95),
                None => 0.5,
            };
            last_khat = khat;
            let rho_n = *state.residual_history.last().unwrap();
            if rho_n <= settings.epsilon * (1.0 - khat) / khat {
                converged = true;
                break;
            }
            if let Some(&r) = state.contraction_ratios.last() {
                if r >= 1.0 {
                    stale_count += 1;
                    if stale_count >= 3 {
                        return Err(Error::Divergence(format!(
                            "contraction estimate >= 1 for 3 consecutive iterations \
                             (last {r:.3}); reduce rho_factor to shorten the solve interval"
                        )));
                    }
                } else {
                    stale_count = 0;
                }
            }
            if state.iteration >= settings.max_iter {
                converged = false;
                break;
            }
            state = step2_update(&ws, &state)?;
        }
        timings.push((format!("iterate[{iv}]"), ms(t_iter)));

        let t_post = Instant::now();
        let ops = ws.iteration_ops(&state.surface)?;
        let samples = ops.value_samples(&state.phi)?;
        let sf = ops.smooth_fit_residual(&state.phi, &state.boundary_values)?;
        smooth_fit_worst = smooth_fit_worst.max(sf);
        let greeks = extract_greeks(&ops, &state)?;
        timings.push((format!("post[{iv}]"), ms(t_post)));

        converged_all &= converged;
        iterations_total += state.iteration;
        all_residuals.extend(state.residual_history.iter().copied());
        all_sup_residuals.extend(state.sup_residual_history.iter().copied());
        all_ratios.extend(state.contraction_ratios.iter().copied());
        all_clamps.extend(state.clamp_counts.iter().copied());
        prev_samples = Some(samples.clone());
        surfaces.push(state.surface.clone());
        greeks_parts.push(greeks);
        phis.push(state.phi.clone());
        samples_parts.push(samples);
    }

    let t_concat = Instant::now();
    let surface = concat_surfaces(&surfaces)?;
    let greeks = concat_greeks(&greeks_parts)?;
    let phi = concat_phis(&phis)?;
    let value_samples = concat_time_grids(
        &samples_parts.iter().collect::<Vec<_>>(),
        |g| g,
    )?;
    timings.push(("concat".into(), ms(t_concat)));

    let invariants = invariant_report(model, &surface, &value_samples);
    let clamp_final = *all_clamps.last().unwrap_or(&0);
    let report = RunReport {
        converged: converged_all,
        iterations: iterations_total,
        mode: settings.mode.name().to_string(),
        intervals: intervals.len(),
        residual_history: all_residuals,
        sup_residual_history: all_sup_residuals,
        contraction_ratios: all_ratios,
        contraction_estimate: last_khat,
        clamp_counts: all_clamps,
        smooth_fit_residual: smooth_fit_worst,
        invariants: InvariantReport { clamped_nodes_final: clamp_final, ..invariants },
        timings_ms: timings,
    };
    Ok(RunOutcome { surface, greeks, value_samples, phi, report })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn initial_data(model: &MarketModel, settings: &Settings) -> Option<PsiFn> {
    if settings.literal_ic {
        let k = model.strike;
        Some(Arc::new(move |x: &[f64]| (k - x[0]).max(0.0)))
    } else {
        // psi0(x) = max(K - x1 F(0, .), 0) with F(0, .) = K vanishes on the
        // computational domain x1 >= 1.
        None
    }
}

/// Greeks from the converged representation: `F_t` by the integration-by-
/// parts path, `F_j`, `F_jl` by differentiating the density inside the
/// convolutions.
pub fn extract_greeks(ops: &IterOps, state: &IterationState) -> Result<GreeksSurface> {
    let axes = {
        let mut axes = vec![ops.grids.time.clone()];
        axes.extend(ops.grids.angles.iter().cloned());
        axes
    };
    let angle_dim = ops.grids.angle_dim();
    let f_t = ops.boundary_time_derivative(&state.phi)?;
    let mut f_j = Vec::with_capacity(angle_dim);
    let mut f_jl = Vec::with_capacity(crate::transform::tri_len(angle_dim));
    let time = &ops.grids.time;
    let m = ops.angle_nodes.len();
    let grid_for = |flavor: Flavor| -> Result<TensorGrid> {
        let mut g = TensorGrid::zeros(axes.clone());
        let entries: Vec<Result<f64>> = (0..g.len())
            .into_par_iter()
            .map(|flat| {
                let k = flat / m;
                let alpha = flat % m;
                if k == 0 {
                    return Ok(0.0);
                }
                let x = ops.h_point(alpha);
                let v = ops.potential(time[k], &x, flavor, &state.phi)?
                    + ops.initial_term(time[k], &x, flavor)?;
                Ok(-v) // F = K - u
            })
            .collect();
        for (dst, v) in g.values_mut().iter_mut().zip(entries) {
            *dst = v?;
        }
        // Maturity slice from the neighbor (no representation at t = t0).
        let (first, rest) = g.values_mut().split_at_mut(m);
        first.copy_from_slice(&rest[..m]);
        Ok(g)
    };
    for j in 0..angle_dim {
        f_j.push(grid_for(Flavor::DAngle(j))?);
    }
    for j in 0..angle_dim {
        for l in j..angle_dim {
            f_jl.push(grid_for(Flavor::DAngleAngle(j, l))?);
        }
    }
    Ok(GreeksSurface { axes, n: ops.grids.n, f_t, f_j, f_jl })
}

fn invariant_report(
    model: &MarketModel,
    surface: &BoundarySurface,
    samples: &TensorGrid,
) -> InvariantReport {
    let k = model.strike;
    let mut min_b = f64::INFINITY;
    let mut max_b: f64 = 0.0;
    for &v in surface.values().values() {
        min_b = min_b.min(v);
        max_b = max_b.max(v);
    }
    // Monotonicity in time-to-maturity at fixed angles: F must not increase.
    let mut mono = 0usize;
    let values = surface.values();
    let nt = values.axis(0).len();
    let m = values.len() / nt;
    for alpha in 0..m {
        for kdx in 0..nt - 1 {
            let a = values.values()[kdx * m + alpha];
            let b = values.values()[(kdx + 1) * m + alpha];
            if b > a + 1e-6 * k {
                mono += 1;
            }
        }
    }
    // Dominance: u >= max(K - x1 F, 0) within quadrature tolerance.
    let tol_dom = 1e-2 * k;
    let mut dom = 0usize;
    let s_axes = samples.axes().to_vec();
    for idx in samples.indices() {
        let u = samples.get(&idx);
        let t = s_axes[0][idx[0]];
        let x1 = s_axes[1][idx[1]];
        let angles: Vec<f64> = (2..s_axes.len()).map(|a| s_axes[a][idx[a]]).collect();
        let f = surface.value_at(t, &angles);
        let payoff = (k - x1 * f).max(0.0);
        if u < payoff - tol_dom {
            dom += 1;
        }
    }
    // BC3 self-consistency is the fixed-point residual itself: compare
    // F + u - K on the wall using the interpolated samples at x1 = 1.
    let mut bc3 = 0.0f64;
    let fv = surface.values();
    for idx in fv.indices() {
        let t = fv.axis(0)[idx[0]];
        let angles: Vec<f64> = (1..fv.ndim()).map(|a| fv.axis(a)[idx[a]]).collect();
        let mut pt = vec![t, 1.0];
        pt.extend_from_slice(&angles);
        let u_wall = samples.interp(&pt);
        bc3 = bc3.max((fv.get(&idx) + u_wall - k).abs());
    }
    InvariantReport {
        min_boundary: min_b,
        max_boundary: max_b,
        monotonicity_violations: mono,
        dominance_violations: dom,
        max_bc3_residual: bc3,
        clamped_nodes_final: 0,
    }
}

// ---------------------------------------------------------------------------
// Interval concatenation
// ---------------------------------------------------------------------------

fn concat_time_grids<'a, T>(parts: &[&'a T], grid: impl Fn(&'a T) -> &'a TensorGrid) -> Result<TensorGrid> {
    if parts.len() == 1 {
        return Ok(grid(parts[0]).clone());
    }
    let first = grid(parts[0]);
    let tail_axes = first.axes()[1..].to_vec();
    let mut time = Vec::new();
    let mut data = Vec::new();
    let slice_len: usize = tail_axes.iter().map(Vec::len).product::<usize>().max(1);
    for (i, part) in parts.iter().enumerate() {
        let g = grid(part);
        if g.axes()[1..] != tail_axes[..] {
            return Err(Error::domain("interval grids disagree on spatial axes"));
        }
        let axis = g.axis(0);
        let skip = usize::from(i > 0); // shared junction node
        for (k, &t) in axis.iter().enumerate().skip(skip) {
            time.push(t);
            data.extend_from_slice(&g.values()[k * slice_len..(k + 1) * slice_len]);
        }
    }
    let mut axes = vec![time];
    axes.extend(tail_axes);
    let mut out = TensorGrid::zeros(axes);
    out.values_mut().copy_from_slice(&data);
    Ok(out)
}

fn concat_surfaces(parts: &[BoundarySurface]) -> Result<BoundarySurface> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let n = parts[0].n;
    let refs: Vec<&BoundarySurface> = parts.iter().collect();
    let values = concat_time_grids(&refs, |s| s.values())?;
    let f_t = concat_time_grids(&refs, |s| s.f_t_grid())?;
    let mut surface = BoundarySurface::from_values(values, n);
    surface.set_time_derivative(f_t);
    Ok(surface)
}

fn concat_greeks(parts: &[GreeksSurface]) -> Result<GreeksSurface> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let refs: Vec<&GreeksSurface> = parts.iter().collect();
    let f_t = concat_time_grids(&refs, |g| &g.f_t)?;
    let mut f_j = Vec::new();
    for j in 0..parts[0].f_j.len() {
        f_j.push(concat_time_grids(&refs, move |g| &g.f_j[j])?);
    }
    let mut f_jl = Vec::new();
    for j in 0..parts[0].f_jl.len() {
        f_jl.push(concat_time_grids(&refs, move |g| &g.f_jl[j])?);
    }
    let axes = f_t.axes().to_vec();
    Ok(GreeksSurface { axes, n: parts[0].n, f_t, f_j, f_jl })
}

fn concat_phis(parts: &[BoundaryDensity]) -> Result<BoundaryDensity> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let refs: Vec<&BoundaryDensity> = parts.iter().collect();
    Ok(BoundaryDensity::new(concat_time_grids(&refs, |p| &p.grid)?))
}
