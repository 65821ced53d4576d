//! Tensor grids, axis builders, and local polynomial interpolation.
//!
//! All solver fields (boundary surface, boundary density, value samples) live
//! on tensor grids: an ordered list of strictly increasing axes plus a flat
//! row-major value array (last axis fastest). Interpolation is local Lagrange
//! with a 4-point stencil per axis (tensor cubic), degrading to the available
//! stencil width near edges; derivatives come from differentiating the same
//! local polynomial, so value and derivative queries are always consistent.

use crate::error::{Error, Result};

/// Dense scalar field over a tensor-product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    axes: Vec<Vec<f64>>,
    data: Vec<f64>,
}

impl TensorGrid {
    pub fn zeros(axes: Vec<Vec<f64>>) -> Self {
        let len = axes.iter().map(Vec::len).product::<usize>().max(1);
        debug_assert!(axes.iter().all(|a| a.windows(2).all(|w| w[0] < w[1])));
        TensorGrid { axes, data: vec![0.0; len] }
    }

    pub fn from_fn(axes: Vec<Vec<f64>>, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut g = Self::zeros(axes);
        let mut buf = vec![0usize; g.ndim()];
        for flat in 0..g.len() {
            g.multi_index(flat, &mut buf);
            let node: Vec<f64> = buf.iter().enumerate().map(|(a, &i)| g.axes[a][i]).collect();
            g.data[flat] = f(&node);
        }
        g
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, a: usize) -> &[f64] {
        &self.axes[a]
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.ndim());
        let mut flat = 0;
        for (a, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.axes[a].len());
            flat = flat * self.axes[a].len() + i;
        }
        flat
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for a in (0..self.ndim()).rev() {
            let n = self.axes[a].len();
            out[a] = flat % n;
            flat /= n;
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let flat = self.flat_index(idx);
        self.data[flat] = v;
    }

    pub fn node(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().enumerate().map(|(a, &i)| self.axes[a][i]).collect()
    }

    /// Iterates multi-indices in row-major (lexicographic) order.
    pub fn indices(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        let ndim = self.ndim();
        (0..self.len()).map(move |flat| {
            let mut idx = vec![0usize; ndim];
            self.multi_index(flat, &mut idx);
            idx
        })
    }

    /// Interpolated value at `point` (clamped to the grid hull).
    pub fn interp(&self, point: &[f64]) -> f64 {
        self.interp_deriv(point, &[])
    }

    /// Interpolated partial derivative; `deriv_axes` lists the axes to
    /// differentiate along (an axis appearing twice means a second
    /// derivative). Empty list recovers the plain value.
    pub fn interp_deriv(&self, point: &[f64], deriv_axes: &[usize]) -> f64 {
        debug_assert_eq!(point.len(), self.ndim());
        let ndim = self.ndim();
        if ndim == 0 {
            return self.data[0];
        }
        let mut stencils: Vec<(usize, Vec<f64>)> = Vec::with_capacity(ndim);
        for a in 0..ndim {
            let order = deriv_axes.iter().filter(|&&d| d == a).count();
            let (start, nodes) = stencil(&self.axes[a], point[a]);
            let w = lagrange_weights(&nodes, clamp_to(&self.axes[a], point[a]), order);
            stencils.push((start, w));
        }
        // Accumulate the tensor contraction over the stencil box.
        let mut acc = 0.0;
        let mut idx = vec![0usize; ndim];
        let dims: Vec<usize> = stencils.iter().map(|(_, w)| w.len()).collect();
        let total: usize = dims.iter().product();
        for k in 0..total {
            let mut rem = k;
            let mut weight = 1.0;
            for a in (0..ndim).rev() {
                let j = rem % dims[a];
                rem /= dims[a];
                idx[a] = stencils[a].0 + j;
                weight *= stencils[a].1[j];
            }
            if weight != 0.0 {
                acc += weight * self.data[self.flat_index(&idx)];
            }
        }
        acc
    }
}

fn clamp_to(axis: &[f64], x: f64) -> f64 {
    x.clamp(axis[0], axis[axis.len() - 1])
}

/// Picks up to four nodes bracketing `x`; returns (start index, node values).
fn stencil(axis: &[f64], x: f64) -> (usize, Vec<f64>) {
    let n = axis.len();
    if n <= 4 {
        return (0, axis.to_vec());
    }
    let x = clamp_to(axis, x);
    // Index of the first node >= x.
    let hi = axis.partition_point(|&v| v < x).min(n - 1);
    let lo = hi.saturating_sub(1);
    let start = lo.saturating_sub(1).min(n - 4);
    (start, axis[start..start + 4].to_vec())
}

/// Lagrange basis weights (or their derivatives) on a small node set.
///
/// `order` 0 returns the interpolation weights at `x`, 1 the first-derivative
/// weights, 2 the second-derivative weights.
pub fn lagrange_weights(nodes: &[f64], x: f64, order: usize) -> Vec<f64> {
    let m = nodes.len();
    assert!(m >= 1 && order <= 2);
    if m == 1 {
        return vec![if order == 0 { 1.0 } else { 0.0 }];
    }
    let mut w = vec![0.0; m];
    for i in 0..m {
        let denom: f64 = (0..m).filter(|&j| j != i).map(|j| nodes[i] - nodes[j]).product();
        let val = match order {
            0 => (0..m).filter(|&j| j != i).map(|j| x - nodes[j]).product::<f64>(),
            1 => {
                let mut s = 0.0;
                for k in (0..m).filter(|&k| k != i) {
                    s += (0..m)
                        .filter(|&j| j != i && j != k)
                        .map(|j| x - nodes[j])
                        .product::<f64>();
                }
                s
            }
            _ => {
                let mut s = 0.0;
                for k in (0..m).filter(|&k| k != i) {
                    for l in (0..m).filter(|&l| l != i && l != k) {
                        s += (0..m)
                            .filter(|&j| j != i && j != k && j != l)
                            .map(|j| x - nodes[j])
                            .product::<f64>();
                    }
                }
                s
            }
        };
        w[i] = val / denom;
    }
    w
}

/// Geometrically graded time axis on `[0, t_end]`.
///
/// The first step is the shortest and consecutive steps grow by `ratio`
/// until `max_step` (if finite) caps them; the axis always ends exactly at
/// `t_end`. Grading concentrates nodes near `t = 0`, where boundary densities
/// of obstacle problems lose regularity.
pub fn graded_time_axis(t_end: f64, steps: usize, ratio: f64, max_step: f64) -> Result<Vec<f64>> {
    if !(t_end > 0.0) || steps == 0 || !(ratio >= 1.0) {
        return Err(Error::domain(format!(
            "graded_time_axis: need t_end > 0, steps > 0, ratio >= 1 (got {t_end}, {steps}, {ratio})"
        )));
    }
    // Unit profile of step lengths, then scale to fill [0, t_end].
    let mut profile = Vec::with_capacity(steps);
    let mut h = 1.0;
    for _ in 0..steps {
        profile.push(h);
        h *= ratio;
    }
    if max_step.is_finite() && max_step > 0.0 {
        // Cap relative to the final (largest) step so the cap expresses a
        // bound on the step fraction of the horizon after scaling.
        let scale0: f64 = t_end / profile.iter().sum::<f64>();
        for p in profile.iter_mut() {
            *p = (*p * scale0).min(max_step);
        }
        let scale = t_end / profile.iter().sum::<f64>();
        for p in profile.iter_mut() {
            *p *= scale;
        }
    } else {
        let scale = t_end / profile.iter().sum::<f64>();
        for p in profile.iter_mut() {
            *p *= scale;
        }
    }
    let mut axis = Vec::with_capacity(steps + 1);
    axis.push(0.0);
    let mut t = 0.0;
    for p in &profile {
        t += p;
        axis.push(t);
    }
    *axis.last_mut().unwrap() = t_end;
    Ok(axis)
}

pub fn uniform_axis(lo: f64, hi: f64, nodes: usize) -> Vec<f64> {
    assert!(nodes >= 1 && hi >= lo);
    if nodes == 1 {
        return vec![lo];
    }
    (0..nodes).map(|i| lo + (hi - lo) * i as f64 / (nodes - 1) as f64).collect()
}

/// Scaled-index axis on `[1, x1_max]`, optionally uniform in `ln x1`.
pub fn x1_axis(x1_max: f64, nodes: usize, log_spaced: bool) -> Result<Vec<f64>> {
    if !(x1_max > 1.0) || nodes < 2 {
        return Err(Error::domain(format!(
            "x1_axis: need x1_max > 1 and nodes >= 2 (got {x1_max}, {nodes})"
        )));
    }
    Ok(if log_spaced {
        uniform_axis(0.0, x1_max.ln(), nodes).into_iter().map(f64::exp).collect()
    } else {
        uniform_axis(1.0, x1_max, nodes)
    })
}

/// Angle axes for the open price simplex in dimension `n`.
///
/// Each of the `n - 1` axes spans `[margin, (1 - margin)/(n - 1)]`, a box
/// inscribed in the simplex `{ x_j > 0, sum x_j < 1 }`, so every tensor node
/// maps to strictly positive asset prices. For `n = 2` the box is the full
/// cross-section `(0, 1)`.
pub fn angle_axes(n: usize, nodes_per_axis: usize, margin: f64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::domain("angle_axes: dimension must be >= 1".to_string()));
    }
    if n == 1 {
        return Ok(Vec::new());
    }
    let hi = (1.0 - margin) / (n - 1) as f64;
    if !(margin > 0.0) || hi <= margin {
        return Err(Error::domain(format!(
            "angle_axes: margin {margin} leaves no room in dimension {n}"
        )));
    }
    Ok(vec![uniform_axis(margin, hi, nodes_per_axis.max(2)); n - 1])
}
