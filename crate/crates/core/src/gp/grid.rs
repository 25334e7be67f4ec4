//! Regular inducing grids and local linear interpolation onto them.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One equally spaced axis of an inducing grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lower: f64,
    pub spacing: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn upper(&self) -> f64 {
        self.lower + self.spacing * (self.count - 1) as f64
    }

    pub fn location(&self, j: usize) -> f64 {
        self.lower + self.spacing * j as f64
    }
}

/// Cartesian product of equally spaced 1-D grids. Points are enumerated in
/// row-major order with dimension 0 varying slowest, which matches the
/// Kronecker ordering `K_1 ⊗ K_2 ⊗ …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingGrid {
    axes: Vec<GridAxis>,
}

impl InducingGrid {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::config("grid", "at least one dimension required"));
        }
        for (d, ax) in axes.iter().enumerate() {
            if ax.count < 2 {
                return Err(Error::config(
                    format!("grid.axis[{d}].count"),
                    "needs at least 2 points",
                ));
            }
            if !(ax.spacing > 0.0) || !ax.spacing.is_finite() || !ax.lower.is_finite() {
                return Err(Error::config(
                    format!("grid.axis[{d}].spacing"),
                    "spacing must be positive and finite",
                ));
            }
        }
        Ok(Self { axes })
    }

    /// Grid whose hull covers `[lo_d, hi_d]` plus one spacing of margin on
    /// each side.
    pub fn covering(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() {
            return Err(Error::Dimension(format!(
                "grid bounds of lengths {}, {} and counts of length {}",
                lo.len(),
                hi.len(),
                counts.len()
            )));
        }
        let mut axes = Vec::with_capacity(lo.len());
        for d in 0..lo.len() {
            if counts[d] < 4 {
                return Err(Error::config(
                    "gp.grid_size",
                    "a covering grid needs at least 4 points per dimension",
                ));
            }
            let (mut a, mut b) = (lo[d], hi[d]);
            if !(b > a) {
                // degenerate range: open a unit-width window around it
                a -= 0.5;
                b += 0.5;
            }
            let spacing = (b - a) / (counts[d] - 3) as f64;
            axes.push(GridAxis {
                lower: a - spacing,
                spacing,
                count: counts[d],
            });
        }
        Self::new(axes)
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.count).collect()
    }

    /// Total number of inducing points `M = Π m_d`.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All grid points as an `M × d` matrix.
    pub fn points(&self) -> Array2<f64> {
        let m = self.len();
        let d = self.dim();
        let mut out = Array2::zeros((m, d));
        for flat in 0..m {
            let mut rem = flat;
            for k in (0..d).rev() {
                let c = self.axes[k].count;
                out[[flat, k]] = self.axes[k].location(rem % c);
                rem /= c;
            }
        }
        out
    }

    fn strides(&self) -> Vec<usize> {
        let d = self.dim();
        let mut s = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.axes[k + 1].count;
        }
        s
    }

    /// Lower cell index and fractional offset of every coordinate of `x`.
    pub(crate) fn locate(&self, x: ArrayView2<f64>) -> Result<Vec<(usize, f64)>> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(Error::Dimension(format!(
                "points have {} columns, grid has {} dimensions",
                x.ncols(),
                d
            )));
        }
        let mut cells = Vec::with_capacity(x.nrows() * d);
        for row in x.rows() {
            for (k, ax) in self.axes.iter().enumerate() {
                let v = row[k];
                let tol = 1e-12 * ax.spacing;
                if !(v >= ax.lower - tol && v <= ax.upper() + tol) {
                    return Err(Error::Extrapolation {
                        dim: k,
                        value: v,
                        lower: ax.lower,
                        upper: ax.upper(),
                    });
                }
                let t = ((v - ax.lower) / ax.spacing).clamp(0.0, (ax.count - 1) as f64);
                let j = (t.floor() as usize).min(ax.count - 2);
                cells.push((j, t - j as f64));
            }
        }
        Ok(cells)
    }

    /// Corner enumeration for one located point: flat grid index, weight and
    /// per-dimension weight factors. `cells` holds the `d` (cell, frac) pairs.
    pub(crate) fn corners(&self, cells: &[(usize, f64)]) -> Vec<Corner> {
        let d = self.dim();
        let strides = self.strides();
        let mut out = Vec::with_capacity(1 << d);
        for mask in 0..(1usize << d) {
            let mut index = 0;
            let mut weight = 1.0;
            let mut upper = 0u32;
            for k in 0..d {
                let (j, f) = cells[k];
                let hi = (mask >> (d - 1 - k)) & 1 == 1;
                if hi {
                    index += (j + 1) * strides[k];
                    weight *= f;
                    upper |= 1 << k;
                } else {
                    index += j * strides[k];
                    weight *= 1.0 - f;
                }
            }
            out.push(Corner {
                index,
                weight,
                upper,
            });
        }
        out
    }

    /// Derivative of a corner's weight with respect to coordinate `k`.
    pub(crate) fn corner_weight_derivative(
        &self,
        cells: &[(usize, f64)],
        corner: &Corner,
        k: usize,
    ) -> f64 {
        let mut g = 1.0;
        for (e, &(_, f)) in cells.iter().enumerate() {
            let hi = corner.upper >> e & 1 == 1;
            if e == k {
                g *= if hi { 1.0 } else { -1.0 } / self.axes[e].spacing;
            } else {
                g *= if hi { f } else { 1.0 - f };
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner {
    pub index: usize,
    pub weight: f64,
    upper: u32,
}

/// Sparse interpolation matrix `W` (one row per data point) with at most
/// two nonzeros per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseInterpolation {
    pub n_grid: usize,
    /// Per data point: (grid index, weight) pairs with nonzero weight.
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseInterpolation {
    pub fn n_points(&self) -> usize {
        self.entries.len()
    }

    /// `W v` with `v` indexed by grid point: one value per data point.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * v[j]).sum())
            .collect()
    }

    /// `Wᵀ u` with `u` indexed by data point: one value per grid point.
    pub fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_grid];
        for (row, &ui) in self.entries.iter().zip(u) {
            for &(j, w) in row {
                out[j] += w * ui;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.n_points(), self.n_grid));
        for (i, row) in self.entries.iter().enumerate() {
            for &(j, v) in row {
                w[[i, j]] += v;
            }
        }
        w
    }
}

/// Local linear interpolation weights of every row of `x` onto `grid`.
pub fn interpolation_weights(
    x: ArrayView2<f64>,
    grid: &InducingGrid,
) -> Result<SparseInterpolation> {
    let d = grid.dim();
    let cells = grid.locate(x)?;
    let entries = cells
        .chunks(d)
        .map(|c| {
            grid.corners(c)
                .into_iter()
                .filter(|corner| corner.weight != 0.0)
                .map(|corner| (corner.index, corner.weight))
                .collect()
        })
        .collect();
    Ok(SparseInterpolation {
        n_grid: grid.len(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_grid() -> InducingGrid {
        InducingGrid::new(vec![GridAxis {
            lower: 0.0,
            spacing: 1.0,
            count: 5,
        }])
        .unwrap()
    }

    #[test]
    fn knot_gives_single_unit_weight() {
        let w = interpolation_weights(array![[2.0]].view(), &unit_grid()).unwrap();
        assert_eq!(w.entries[0], vec![(2, 1.0)]);
    }

    #[test]
    fn midpoint_splits_evenly() {
        let w = interpolation_weights(array![[1.5]].view(), &unit_grid()).unwrap();
        assert_eq!(w.entries[0], vec![(1, 0.5), (2, 0.5)]);
    }

    #[test]
    fn quarter_point_weights() {
        let w = interpolation_weights(array![[1.25]].view(), &unit_grid()).unwrap();
        assert_eq!(w.entries[0], vec![(1, 0.75), (2, 0.25)]);
    }

    #[test]
    fn upper_edge_is_inside() {
        let w = interpolation_weights(array![[4.0]].view(), &unit_grid()).unwrap();
        assert_eq!(w.entries[0], vec![(4, 1.0)]);
    }

    #[test]
    fn outside_hull_is_extrapolation_error() {
        let err = interpolation_weights(array![[4.5]].view(), &unit_grid()).unwrap_err();
        assert!(matches!(err, Error::Extrapolation { dim: 0, .. }));
        let err = interpolation_weights(array![[-0.01]].view(), &unit_grid()).unwrap_err();
        assert!(matches!(err, Error::Extrapolation { .. }));
    }

    #[test]
    fn two_dimensional_weights_are_products() {
        let g = InducingGrid::new(vec![
            GridAxis {
                lower: 0.0,
                spacing: 1.0,
                count: 3,
            },
            GridAxis {
                lower: 0.0,
                spacing: 0.5,
                count: 4,
            },
        ])
        .unwrap();
        let w = interpolation_weights(array![[0.25, 0.75]].view(), &g).unwrap();
        let row = &w.entries[0];
        assert_eq!(row.len(), 4);
        let total: f64 = row.iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        // (0.25 from axis 0 cell 0) x (0.5 within axis 1 cell 1)
        let pts = g.points();
        let recon: Vec<f64> = (0..2)
            .map(|k| row.iter().map(|&(j, wt)| wt * pts[[j, k]]).sum())
            .collect();
        assert!((recon[0] - 0.25).abs() < 1e-15);
        assert!((recon[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn covering_grid_has_margin() {
        let g = InducingGrid::covering(&[-1.0], &[1.0], &[11]).unwrap();
        let ax = &g.axes()[0];
        assert!((ax.lower - (-1.0 - ax.spacing)).abs() < 1e-12);
        assert!((ax.upper() - (1.0 + ax.spacing)).abs() < 1e-12);
    }
}
