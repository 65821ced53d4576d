//! Hyperplane kernel rows: exact integrals of the frozen density (and its
//! derivatives) against the hat basis of the angle grid.
//!
//! Every kernel appearing in the boundary representation is a polynomial of
//! degree at most two in the source offset times the frozen Gaussian, so its
//! integral against piecewise-linear hat functions reduces to Gaussian
//! partial moments (error functions). This keeps the near-diagonal time
//! slabs accurate without any angle quadrature: the Gaussian may be far
//! narrower than the grid and the row integrals are still exact.
//!
//! The expansion is anchored per (field point, source time) at the field
//! point's hyperplane foot, so the anchor never depends on the source angle
//! and the Gaussian structure is exact. One angle dimension uses the closed
//! form; higher angle dimensions fall back to per-cell Gauss quadrature.

use nalgebra::DVector;
use statrs::function::erf::erf;

use crate::error::Result;
use crate::wkb::{FrozenExpansion, WkbDensity};

/// Kernel flavor: which derivative of the density enters the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Density,
    /// d p / d x1.
    Dx1,
    /// Volterra kernel `d p / d x1 - p` (sign-flipped variant for ablation).
    DxMinusDensity,
    /// `d p / d x1 + p`, the printed-sign variant.
    DxPlusDensity,
    /// First derivative along angle axis `j` (0-based among angles).
    DAngle(usize),
    /// Second derivative along angle axes `(j, l)`.
    DAngleAngle(usize, usize),
    /// Derivative in the field time.
    Dt,
}

/// Row engine over a fixed angle grid.
pub struct HPlaneOps {
    pub dim: usize,
    pub angle_axes: Vec<Vec<f64>>,
    pub density: WkbDensity,
}

impl HPlaneOps {
    pub fn new(density: WkbDensity, angle_axes: Vec<Vec<f64>>) -> Self {
        HPlaneOps { dim: density.dim, angle_axes, density }
    }

    pub fn angle_dim(&self) -> usize {
        self.dim - 1
    }

    /// Number of angle nodes (1 when the hyperplane is a point).
    pub fn slice_len(&self) -> usize {
        self.angle_axes.iter().map(Vec::len).product::<usize>().max(1)
    }

    /// Frozen expansion anchored for field point `x` at source time `tau`.
    ///
    /// The spatial anchor is the midpoint between `x` and its hyperplane foot
    /// `(1, xhat)`; the coefficient time is frozen at `(t + tau)/2`.
    pub fn anchored(&self, t: f64, x: &[f64], tau: f64) -> Result<FrozenExpansion> {
        let mut foot = x.to_vec();
        foot[0] = 1.0;
        let mut mid = x.to_vec();
        mid[0] = 0.5 * (x[0] + 1.0);
        self.density.pair(0.5 * (t + tau), &mid, &foot)
    }

    /// Writes the row of `int K(t, x; tau, (1, yhat)) hat_beta(yhat) dyhat`
    /// over the angle-node basis into `out` (length [`Self::slice_len`]).
    pub fn kernel_row(
        &self,
        t: f64,
        x: &[f64],
        tau: f64,
        flavor: Flavor,
        out: &mut [f64],
    ) -> Result<()> {
        let pair = self.anchored(t, x, tau)?;
        self.kernel_row_with(&pair, t - tau, x, flavor, out);
        Ok(())
    }

    /// Same as [`Self::kernel_row`] with a pre-built anchor.
    pub fn kernel_row_with(
        &self,
        pair: &FrozenExpansion,
        dt: f64,
        x: &[f64],
        flavor: Flavor,
        out: &mut [f64],
    ) {
        match self.angle_dim() {
            0 => {
                let delta = [x[0] - 1.0];
                out[0] = flavor_value(pair, dt, &delta, flavor);
            }
            1 => self.row_erf_1angle(pair, dt, x, flavor, out),
            _ => self.row_quadrature(pair, dt, x, flavor, out),
        }
    }

    /// Exact row for one angle dimension via Gaussian partial moments.
    fn row_erf_1angle(
        &self,
        pair: &FrozenExpansion,
        dt: f64,
        x: &[f64],
        flavor: Flavor,
        out: &mut [f64],
    ) {
        let axis = &self.angle_axes[0];
        let b = pair.a_inv();
        let ab = pair.drift_tilt();
        let d1 = x[0] - 1.0;
        let xhat = x[1];
        let n = self.dim as f64;

        // Gaussian in the source angle u: amplitude * exp(-(u - mu)^2/(2 s2)).
        let s2 = dt / b[(1, 1)];
        let t1 = b[(0, 1)] * d1 / dt + ab[1];
        let c_exp =
            -b[(0, 0)] * d1 * d1 / (2.0 * dt) - ab[0] * d1 + pair.c0_diag() + pair.c1() * dt;
        let pref = (2.0 * std::f64::consts::PI * dt).powf(-n / 2.0);
        let amp = pref * (c_exp + 0.5 * t1 * t1 * s2).exp();
        let mu = xhat + t1 * s2;
        // Offset z = xhat - u in terms of w = u - mu: z = z0 - w.
        let z0 = -t1 * s2;

        // Flavor polynomial in z, degree <= 2.
        let (q0, q1, q2) = flavor_poly(pair, dt, d1, n, flavor);
        // Recentered to w.
        let r0 = q0 + q1 * z0 + q2 * z0 * z0;
        let r1 = -q1 - 2.0 * q2 * z0;
        let r2 = q2;

        out.fill(0.0);
        let s = s2.sqrt();
        for c in 0..axis.len() - 1 {
            let (ua, ub) = (axis[c], axis[c + 1]);
            let (wa, wb) = (ua - mu, ub - mu);
            let m = gauss_partial_moments(s, wa, wb);
            let hc = ub - ua;
            // Ascending hat (node c+1) and descending hat (node c): linear in
            // w with hat = l0 + l1 w.
            for (node, l0, l1) in
                [(c + 1, (mu - ua) / hc, 1.0 / hc), (c, (ub - mu) / hc, -1.0 / hc)]
            {
                let mut acc = 0.0;
                for (rk, k) in [(r0, 0usize), (r1, 1), (r2, 2)] {
                    if rk == 0.0 {
                        continue;
                    }
                    acc += rk * (l0 * m[k] + l1 * m[k + 1]);
                }
                out[node] += amp * acc;
            }
        }
    }

    /// Quadrature fallback for two or more angle dimensions: per-cell
    /// 3-point Gauss per axis against the tensor hat basis.
    fn row_quadrature(
        &self,
        pair: &FrozenExpansion,
        dt: f64,
        x: &[f64],
        flavor: Flavor,
        out: &mut [f64],
    ) {
        let d = self.angle_dim();
        out.fill(0.0);
        let shape: Vec<usize> = self.angle_axes.iter().map(Vec::len).collect();
        let cells: Vec<usize> = shape.iter().map(|&m| m - 1).collect();
        let total_cells: usize = cells.iter().product();
        let gl = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let glw = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mut cell_idx = vec![0usize; d];
        let mut pt_idx = vec![0usize; d];
        for cf in 0..total_cells {
            let mut rem = cf;
            for a in (0..d).rev() {
                cell_idx[a] = rem % cells[a];
                rem /= cells[a];
            }
            for pf in 0..3usize.pow(d as u32) {
                let mut rem = pf;
                let mut w = 1.0;
                let mut y = Vec::with_capacity(d);
                for a in (0..d).rev() {
                    pt_idx[a] = rem % 3;
                    rem /= 3;
                }
                for a in 0..d {
                    let lo = self.angle_axes[a][cell_idx[a]];
                    let hi = self.angle_axes[a][cell_idx[a] + 1];
                    let half = 0.5 * (hi - lo);
                    y.push(0.5 * (lo + hi) + half * gl[pt_idx[a]]);
                    w *= half * glw[pt_idx[a]];
                }
                let mut delta = Vec::with_capacity(self.dim);
                delta.push(x[0] - 1.0);
                for a in 0..d {
                    delta.push(x[1 + a] - y[a]);
                }
                let kv = w * flavor_value(pair, dt, &delta, flavor);
                if kv == 0.0 {
                    continue;
                }
                // Distribute onto the 2^d hat nodes of this cell.
                for corner in 0..(1usize << d) {
                    let mut weight = kv;
                    let mut flat = 0usize;
                    for a in 0..d {
                        let hi_side = (corner >> a) & 1 == 1;
                        let lo = self.angle_axes[a][cell_idx[a]];
                        let hi = self.angle_axes[a][cell_idx[a] + 1];
                        let frac = (y[a] - lo) / (hi - lo);
                        weight *= if hi_side { frac } else { 1.0 - frac };
                        let node = cell_idx[a] + usize::from(hi_side);
                        flat = flat * shape[a] + node;
                    }
                    out[flat] += weight;
                }
            }
        }
    }
}

/// Pointwise kernel value for a given flavor and offset `delta = x - y`.
pub fn flavor_value(pair: &FrozenExpansion, dt: f64, delta: &[f64], flavor: Flavor) -> f64 {
    let n = delta.len();
    let dv = DVector::from_row_slice(delta);
    let bd = pair.a_inv() * &dv;
    let q = -dv.dot(&bd) / (2.0 * dt) - dv.dot(pair.drift_tilt()) + pair.c0_diag()
        + pair.c1() * dt;
    let p = (2.0 * std::f64::consts::PI * dt).powf(-(n as f64) / 2.0) * q.exp();
    let g = |i: usize| -bd[i] / dt - pair.drift_tilt()[i];
    match flavor {
        Flavor::Density => p,
        Flavor::Dx1 => p * g(0),
        Flavor::DxMinusDensity => p * (g(0) - 1.0),
        Flavor::DxPlusDensity => p * (g(0) + 1.0),
        Flavor::DAngle(j) => p * g(1 + j),
        Flavor::DAngleAngle(j, l) => {
            p * (g(1 + j) * g(1 + l) - pair.a_inv()[(1 + j, 1 + l)] / dt)
        }
        Flavor::Dt => {
            p * (-(n as f64) / (2.0 * dt) + dv.dot(&bd) / (2.0 * dt * dt) + pair.c1())
        }
    }
}

/// Flavor polynomial coefficients in the tangential offset `z` for the
/// one-angle closed form (dimension 2).
fn flavor_poly(pair: &FrozenExpansion, dt: f64, d1: f64, n: f64, flavor: Flavor) -> (f64, f64, f64) {
    let b = pair.a_inv();
    let ab = pair.drift_tilt();
    let d0 = -b[(0, 0)] * d1 / dt - ab[0];
    let dz = -b[(0, 1)] / dt;
    let e0 = -b[(1, 0)] * d1 / dt - ab[1];
    let ez = -b[(1, 1)] / dt;
    match flavor {
        Flavor::Density => (1.0, 0.0, 0.0),
        Flavor::Dx1 => (d0, dz, 0.0),
        Flavor::DxMinusDensity => (d0 - 1.0, dz, 0.0),
        Flavor::DxPlusDensity => (d0 + 1.0, dz, 0.0),
        Flavor::DAngle(0) => (e0, ez, 0.0),
        Flavor::DAngle(_) => unreachable!("one angle axis"),
        Flavor::DAngleAngle(0, 0) => (e0 * e0 - b[(1, 1)] / dt, 2.0 * e0 * ez, ez * ez),
        Flavor::DAngleAngle(..) => unreachable!("one angle axis"),
        Flavor::Dt => (
            -n / (2.0 * dt) + pair.c1() + b[(0, 0)] * d1 * d1 / (2.0 * dt * dt),
            b[(0, 1)] * d1 / (dt * dt),
            b[(1, 1)] / (2.0 * dt * dt),
        ),
    }
}

/// Partial Gaussian moments `int_{wa}^{wb} w^k exp(-w^2/(2 s^2)) dw` for
/// `k = 0..3`.
pub fn gauss_partial_moments(s: f64, wa: f64, wb: f64) -> [f64; 4] {
    let s2 = s * s;
    let inv = 1.0 / (s * std::f64::consts::SQRT_2);
    let e = |w: f64| (-w * w / (2.0 * s2)).exp();
    let (ea, eb) = (e(wa), e(wb));
    let i0 = s * (std::f64::consts::PI / 2.0).sqrt() * (erf(wb * inv) - erf(wa * inv));
    let i1 = -s2 * (eb - ea);
    let i2 = -s2 * (wb * eb - wa * ea) + s2 * i0;
    let i3 = -s2 * (wb * wb * eb - wa * wa * ea) + 2.0 * s2 * i1;
    [i0, i1, i2, i3]
}
