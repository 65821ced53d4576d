//! Front-fixing change of variables and the transformed PDE coefficients.
//!
//! The map sends asset prices `S in R^n_+` to `(x1, x2, .., xn)` with
//! `x1 = sum(S) / F(t, xhat)` (index level scaled by the boundary) and
//! `xj = S_j / sum(S)` for `j >= 2` (angles). The free boundary becomes the
//! fixed hyperplane `x1 = 1` and the boundary function `F` enters the
//! transformed operator through its value and derivatives. Inverse map:
//! `S1 = x1 F (1 - sum_{j>=2} xj)`, `Sj = xj x1 F`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::TensorGrid;
use crate::model::MarketModel;

/// Point in the transformed coordinates: scaled index level plus angles.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPoint {
    pub x1: f64,
    /// Angle variables `x2..xn`; empty in the univariate case.
    pub angles: Vec<f64>,
}

impl TransformedPoint {
    pub fn new(x1: f64, angles: Vec<f64>) -> Self {
        TransformedPoint { x1, angles }
    }

    pub fn dim(&self) -> usize {
        self.angles.len() + 1
    }

    pub fn angle_sum(&self) -> f64 {
        self.angles.iter().sum()
    }

    /// Full coordinate vector `(x1, x2, .., xn)`.
    pub fn coords(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.x1);
        v.extend_from_slice(&self.angles);
        v
    }

    pub fn from_coords(x: &[f64]) -> Self {
        TransformedPoint { x1: x[0], angles: x[1..].to_vec() }
    }
}

/// Spatial part of the front-fixing map at a given boundary value.
pub fn to_transformed(s: &[f64], f_value: f64) -> Result<TransformedPoint> {
    if let Some(bad) = s.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::domain(format!("to_transformed: non-positive price {bad}")));
    }
    if !(f_value > 0.0) {
        return Err(Error::domain(format!("to_transformed: boundary value {f_value} <= 0")));
    }
    let total: f64 = s.iter().sum();
    let angles = s.iter().skip(1).map(|&sj| sj / total).collect();
    Ok(TransformedPoint { x1: total / f_value, angles })
}

/// Inverse of [`to_transformed`].
pub fn from_transformed(p: &TransformedPoint, f_value: f64) -> Result<Vec<f64>> {
    if !(f_value > 0.0) {
        return Err(Error::domain(format!("from_transformed: boundary value {f_value} <= 0")));
    }
    let rest = p.angle_sum();
    if rest >= 1.0 {
        return Err(Error::domain(format!(
            "from_transformed: angle sum {rest} >= 1 leaves no mass for S1"
        )));
    }
    if !(p.x1 > 0.0) {
        return Err(Error::domain(format!("from_transformed: x1 = {} <= 0", p.x1)));
    }
    let level = p.x1 * f_value;
    let mut s = Vec::with_capacity(p.dim());
    s.push(level * (1.0 - rest));
    for &xj in &p.angles {
        s.push(xj * level);
    }
    Ok(s)
}

/// Pointwise sample of a boundary surface: value plus derivative fields.
#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub f: f64,
    pub f_t: f64,
    /// d F / d x_j for the angle variables, length `n - 1`.
    pub f_j: Vec<f64>,
    /// Second derivatives over angle pairs, `(n-1) x (n-1)`, symmetric.
    pub f_jl: DMatrix<f64>,
}

impl BoundarySample {
    pub fn flat(f: f64, angle_dim: usize) -> Self {
        BoundarySample { f, f_t: 0.0, f_j: vec![0.0; angle_dim], f_jl: DMatrix::zeros(angle_dim, angle_dim) }
    }
}

/// Discrete free-boundary surface `F(t, xhat)` with stored derivative fields.
///
/// Lives on a tensor grid: time axis first, then one axis per angle variable.
/// Derivative fields are kept per node and interpolated with the same tensor
/// rule as the values, so evaluations are cheap and mutually consistent. The
/// spatial fields are refreshed from the value interpolant; the time
/// derivative is set externally (the solver produces it by differentiating
/// the density representation).
#[derive(Debug, Clone)]
pub struct BoundarySurface {
    pub n: usize,
    values: TensorGrid,
    f_t: TensorGrid,
    f_j: Vec<TensorGrid>,
    /// Upper triangle (including diagonal) of second angle derivatives in
    /// row-major pair order; see [`tri_index`].
    f_jl: Vec<TensorGrid>,
}

/// Index of the pair `(j, l)`, `j <= l`, in an upper-triangle layout of size `m`.
pub fn tri_index(j: usize, l: usize, m: usize) -> usize {
    debug_assert!(j <= l && l < m);
    j * m - j * (j + 1) / 2 + l
}

pub fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

impl BoundarySurface {
    /// Constant surface with zero derivative fields.
    pub fn flat(axes: Vec<Vec<f64>>, n: usize, value: f64) -> Self {
        let angle_dim = n - 1;
        assert_eq!(axes.len(), 1 + angle_dim);
        let mut values = TensorGrid::zeros(axes.clone());
        values.values_mut().fill(value);
        let zero = TensorGrid::zeros(axes);
        BoundarySurface {
            n,
            values,
            f_t: zero.clone(),
            f_j: vec![zero.clone(); angle_dim],
            f_jl: vec![zero; tri_len(angle_dim)],
        }
    }

    /// Builds a surface from a value grid, refreshing spatial derivatives.
    pub fn from_values(values: TensorGrid, n: usize) -> Self {
        let axes = values.axes().to_vec();
        let zero = TensorGrid::zeros(axes);
        let angle_dim = n - 1;
        let mut s = BoundarySurface {
            n,
            values,
            f_t: zero.clone(),
            f_j: vec![zero.clone(); angle_dim],
            f_jl: vec![zero; tri_len(angle_dim)],
        };
        s.refresh_spatial_derivatives();
        s
    }

    pub fn values(&self) -> &TensorGrid {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut TensorGrid {
        &mut self.values
    }

    pub fn time_axis(&self) -> &[f64] {
        self.values.axis(0)
    }

    pub fn angle_axes(&self) -> &[Vec<f64>] {
        &self.values.axes()[1..]
    }

    pub fn angle_dim(&self) -> usize {
        self.n - 1
    }

    pub fn f_t_grid(&self) -> &TensorGrid {
        &self.f_t
    }

    pub fn f_j_grid(&self, j: usize) -> &TensorGrid {
        &self.f_j[j]
    }

    pub fn f_jl_grid(&self, j: usize, l: usize) -> &TensorGrid {
        let (a, b) = if j <= l { (j, l) } else { (l, j) };
        &self.f_jl[tri_index(a, b, self.angle_dim())]
    }

    pub fn set_time_derivative(&mut self, f_t: TensorGrid) {
        assert_eq!(f_t.shape(), self.values.shape());
        self.f_t = f_t;
    }

    /// Recomputes `F_j` and `F_jl` at every node from the value interpolant.
    pub fn refresh_spatial_derivatives(&mut self) {
        let angle_dim = self.angle_dim();
        if angle_dim == 0 {
            return;
        }
        let nodes: Vec<Vec<usize>> = self.values.indices().collect();
        for j in 0..angle_dim {
            let mut g = TensorGrid::zeros(self.values.axes().to_vec());
            for idx in &nodes {
                let pt = self.values.node(idx);
                g.set(idx, self.values.interp_deriv(&pt, &[1 + j]));
            }
            self.f_j[j] = g;
        }
        for j in 0..angle_dim {
            for l in j..angle_dim {
                let mut g = TensorGrid::zeros(self.values.axes().to_vec());
                for idx in &nodes {
                    let pt = self.values.node(idx);
                    g.set(idx, self.values.interp_deriv(&pt, &[1 + j, 1 + l]));
                }
                self.f_jl[tri_index(j, l, angle_dim)] = g;
            }
        }
    }

    /// Interpolated sample of `F` and all derivative fields at `(t, xhat)`.
    pub fn sample(&self, t: f64, angles: &[f64]) -> BoundarySample {
        let angle_dim = self.angle_dim();
        debug_assert_eq!(angles.len(), angle_dim);
        let mut pt = Vec::with_capacity(1 + angle_dim);
        pt.push(t);
        pt.extend_from_slice(angles);
        let f = self.values.interp(&pt);
        let f_t = self.f_t.interp(&pt);
        let f_j: Vec<f64> = (0..angle_dim).map(|j| self.f_j[j].interp(&pt)).collect();
        let mut f_jl = DMatrix::zeros(angle_dim, angle_dim);
        for j in 0..angle_dim {
            for l in j..angle_dim {
                let v = self.f_jl[tri_index(j, l, angle_dim)].interp(&pt);
                f_jl[(j, l)] = v;
                f_jl[(l, j)] = v;
            }
        }
        BoundarySample { f, f_t, f_j, f_jl }
    }

    pub fn value_at(&self, t: f64, angles: &[f64]) -> f64 {
        let mut pt = Vec::with_capacity(1 + angles.len());
        pt.push(t);
        pt.extend_from_slice(angles);
        self.values.interp(&pt)
    }

    /// Clamps values into `(floor, cap]`; returns the number of clamped nodes.
    pub fn clamp_values(&mut self, floor: f64, cap: f64) -> usize {
        let mut count = 0;
        for v in self.values.values_mut() {
            if *v > cap {
                *v = cap;
                count += 1;
            } else if *v < floor {
                *v = floor;
                count += 1;
            }
        }
        count
    }
}

/// Transformed PDE coefficients at one point.
///
/// `a` is the second-order matrix, `b` the full drift (including the
/// `(F_t/F) x1` and `r x1` terms folded into component 1), `c` the zero-order
/// coefficient (`-r` when pricing; the unforced generator uses `c = 0`).
#[derive(Debug, Clone)]
pub struct TransformedCoefficients {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

/// Jacobian `J[(j, i)] = d x_j / d S_i` of the spatial transform.
///
/// For `j >= 2`: `d x_j / d S_i = (delta_ij - x_j) / (x1 F)`. For the scaled
/// level: `d x1 / d S_i = (1/F)(1 - sum_{j>=2} (delta_ij - x_j) F_j / F)`.
pub fn jacobian(p: &TransformedPoint, sample: &BoundarySample) -> Result<DMatrix<f64>> {
    let n = p.dim();
    if !(sample.f > 0.0) {
        return Err(Error::domain(format!("jacobian: boundary value {} <= 0", sample.f)));
    }
    let f = sample.f;
    let level = p.x1 * f; // sum of prices
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        // Row 0: d x1 / d S_i.
        let mut corr = 0.0;
        for j in 1..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            corr += (delta - p.angles[j - 1]) * sample.f_j[j - 1] / f;
        }
        jac[(0, i)] = (1.0 - corr) / f;
        // Rows j >= 1: angle derivatives.
        for j in 1..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            jac[(j, i)] = (delta - p.angles[j - 1]) / level;
        }
    }
    Ok(jac)
}

/// Second derivatives `d^2 x_m / (d S_i d S_k)` for all coordinates.
///
/// Returns one symmetric `n x n` matrix per transformed coordinate `m`.
/// Angles: `d^2 x_j / dS_i dS_k = (2 x_j - delta_ij - delta_kj) / (x1 F)^2`.
/// The level derivative picks up boundary curvature through `F_j`, `F_jl`.
pub fn transform_hessians(p: &TransformedPoint, sample: &BoundarySample) -> Result<Vec<DMatrix<f64>>> {
    let n = p.dim();
    if !(sample.f > 0.0) {
        return Err(Error::domain(format!("transform_hessians: boundary value {} <= 0", sample.f)));
    }
    let f = sample.f;
    let level = p.x1 * f;
    let level2 = level * level;
    let mut out = Vec::with_capacity(n);

    // x1: d/dS_k of G_i where G_i = d x1/d S_i depends on S only through the
    // angles. dG_i/dx_l = -sum_{j>=2} (delta_ij - x_j)(F_jl/F^2 - 2 F_j F_l/F^3).
    let mut h1 = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for l in 1..n {
                let mut dg = 0.0;
                for j in 1..n {
                    let delta_ij = if i == j { 1.0 } else { 0.0 };
                    let fj = sample.f_j[j - 1];
                    let fl = sample.f_j[l - 1];
                    let fjl = sample.f_jl[(j - 1, l - 1)];
                    dg -= (delta_ij - p.angles[j - 1]) * (fjl / (f * f) - 2.0 * fj * fl / (f * f * f));
                }
                let delta_kl = if k == l { 1.0 } else { 0.0 };
                acc += dg * (delta_kl - p.angles[l - 1]) / level;
            }
            h1[(i, k)] = acc;
        }
    }
    out.push(h1);

    for j in 1..n {
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                let d_ij = if i == j { 1.0 } else { 0.0 };
                let d_kj = if k == j { 1.0 } else { 0.0 };
                h[(i, k)] = (2.0 * p.angles[j - 1] - d_ij - d_kj) / level2;
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// Transformed operator coefficients at `(t, p)` for boundary surface `F`.
///
/// Second order: `a_ab = sum_kl v_kl S_k S_l J[a,k] J[b,l]`. First order:
/// `b_a = (1/2) sum_kl v_kl S_k S_l d^2 x_a / dS_k dS_l`, with the transformed
/// time-derivative and rate terms `(F_t/F + r) x1` added to component 1.
/// Zero order: `c = -r`.
pub fn transformed_coefficients(
    model: &MarketModel,
    surface: &BoundarySurface,
    t: f64,
    p: &TransformedPoint,
) -> Result<TransformedCoefficients> {
    let sample = surface.sample(t, &p.angles);
    transformed_coefficients_at(model, &sample, t, p)
}

/// Same as [`transformed_coefficients`] but with an explicit boundary sample.
pub fn transformed_coefficients_at(
    model: &MarketModel,
    sample: &BoundarySample,
    t: f64,
    p: &TransformedPoint,
) -> Result<TransformedCoefficients> {
    let n = p.dim();
    if p.angle_sum() >= 1.0 {
        return Err(Error::domain(format!(
            "transformed_coefficients: angle sum {} >= 1",
            p.angle_sum()
        )));
    }
    if !(sample.f > 0.0) {
        return Err(Error::domain(format!(
            "transformed_coefficients: boundary value {} <= 0",
            sample.f
        )));
    }
    let s = from_transformed(p, sample.f)?;
    let v = model.cov(t, &s);
    let r = model.rate(t, &s);
    let jac = jacobian(p, sample)?;
    let hess = transform_hessians(p, sample)?;

    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for k in 0..n {
        for l in 0..n {
            let w = v[(k, l)] * s[k] * s[l];
            if w == 0.0 {
                continue;
            }
            for alpha in 0..n {
                let jak = jac[(alpha, k)];
                if jak != 0.0 {
                    for beta in 0..n {
                        a[(alpha, beta)] += w * jak * jac[(beta, l)];
                    }
                }
                b[alpha] += 0.5 * w * hess[alpha][(k, l)];
            }
        }
    }
    // Symmetrize away rounding noise; a is symmetric analytically.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    b[0] += (sample.f_t / sample.f) * p.x1 + r * p.x1;
    Ok(TransformedCoefficients { a, b, c: -r })
}
