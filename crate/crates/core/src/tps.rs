//! Thin-plate spline interpolation for scattered 2-D data: kernel
//! `φ(d) = d²·log d` (φ(0) = 0) plus an affine part, fitted through the
//! standard augmented symmetric system with optional smoothing added on the
//! kernel block diagonal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Fitted thin-plate spline.
#[derive(Debug, Clone)]
pub struct TpsModel {
    pub nodes: Vec<[f64; 2]>,
    pub kernel_weights: DVector<f64>,
    /// (a0, a1, a2): constant, x, y coefficients.
    pub affine: [f64; 3],
    pub smoothing: f64,
}

fn kernel(d: f64) -> f64 {
    if d <= 0.0 {
        0.0
    } else {
        d * d * d.ln()
    }
}

/// Averages values at exactly coincident points.
fn merge_duplicates(points: &[(f64, f64, f64)]) -> Vec<(f64, f64, f64)> {
    let mut merged: Vec<(f64, f64, f64, usize)> = Vec::with_capacity(points.len());
    for &(x, y, v) in points {
        match merged.iter_mut().find(|(mx, my, _, _)| *mx == x && *my == y) {
            Some(entry) => {
                entry.2 += v;
                entry.3 += 1;
            }
            None => merged.push((x, y, v, 1)),
        }
    }
    merged.into_iter().map(|(x, y, v, n)| (x, y, v / n as f64)).collect()
}

fn collinear(points: &[(f64, f64, f64)]) -> bool {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let centered = DMatrix::from_fn(points.len(), 2, |r, c| {
        if c == 0 {
            points[r].0 - cx
        } else {
            points[r].1 - cy
        }
    });
    let sv = centered.singular_values();
    sv[1] <= 1e-10 * sv[0].max(1.0)
}

/// Fits a TPS through `(x, y, value)` samples. Coincident points are
/// averaged first; fewer than 3 distinct points or a collinear set is a
/// validation error. With `smoothing` 0 the model interpolates its nodes.
pub fn tps_fit(points: &[(f64, f64, f64)], smoothing: f64) -> Result<TpsModel> {
    if smoothing < 0.0 {
        return Err(Error::Validation("TPS smoothing must be nonnegative".into()));
    }
    let points = merge_duplicates(points);
    if points.len() < 3 {
        return Err(Error::Validation(format!(
            "TPS needs at least 3 distinct points, got {}",
            points.len()
        )));
    }
    if collinear(&points) {
        return Err(Error::Validation("TPS nodes are collinear".into()));
    }

    let n = points.len();
    let dim = n + 3;
    let mut system = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for a in 0..n {
        for b in 0..n {
            if a == b {
                system[(a, b)] = smoothing;
            } else {
                let dx = points[a].0 - points[b].0;
                let dy = points[a].1 - points[b].1;
                system[(a, b)] = kernel((dx * dx + dy * dy).sqrt());
            }
        }
        system[(a, n)] = 1.0;
        system[(a, n + 1)] = points[a].0;
        system[(a, n + 2)] = points[a].1;
        system[(n, a)] = 1.0;
        system[(n + 1, a)] = points[a].0;
        system[(n + 2, a)] = points[a].1;
        rhs[a] = points[a].2;
    }

    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("TPS system is singular".into()))?;
    let kernel_weights = DVector::from_fn(n, |i, _| sol[i]);
    let model = TpsModel {
        nodes: points.iter().map(|p| [p.0, p.1]).collect(),
        kernel_weights,
        affine: [sol[n], sol[n + 1], sol[n + 2]],
        smoothing,
    };
    model.check_side_conditions()?;
    Ok(model)
}

impl TpsModel {
    /// Verifies the orthogonality side conditions
    /// `Σwᵢ = Σwᵢxᵢ = Σwᵢyᵢ = 0` to 1e-8 (relative to the weight scale).
    pub fn check_side_conditions(&self) -> Result<()> {
        let scale = self
            .kernel_weights
            .iter()
            .zip(&self.nodes)
            .map(|(w, p)| w.abs() * (1.0 + p[0].abs() + p[1].abs()))
            .sum::<f64>()
            .max(1.0);
        let sums = self.kernel_weights.iter().zip(&self.nodes).fold([0.0; 3], |mut acc, (w, p)| {
            acc[0] += w;
            acc[1] += w * p[0];
            acc[2] += w * p[1];
            acc
        });
        if sums.iter().any(|s| s.abs() > 1e-8 * scale) {
            return Err(Error::Numerical(format!("TPS side conditions violated: sums {sums:?}")));
        }
        Ok(())
    }

    pub fn eval_at(&self, x: f64, y: f64) -> f64 {
        let mut v = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for (w, p) in self.kernel_weights.iter().zip(&self.nodes) {
            let dx = x - p[0];
            let dy = y - p[1];
            v += w * kernel((dx * dx + dy * dy).sqrt());
        }
        v
    }
}

/// Evaluates the model over the full I×J grid at coordinates `y = (i, j)`.
pub fn tps_eval(model: &TpsModel, grid: (usize, usize)) -> DMatrix<f64> {
    DMatrix::from_fn(grid.0, grid.1, |i, j| model.eval_at(i as f64, j as f64))
}
