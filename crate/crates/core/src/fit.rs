//! Least-squares lines for log-log asymptotics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Line fit `y = slope * x + intercept`. `points` keeps the raw `(r, value)` pairs; the
/// abscissa actually regressed on is named in `abscissa`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub abscissa: String,
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    /// Two standard errors of the slope.
    pub halfwidth: f64,
    /// Smallest and largest pointwise quotient `y / x` over the grid; a limit that exists
    /// shows up as these two closing in on the slope.
    pub quotient_min: f64,
    pub quotient_max: f64,
}

pub fn fit_line(
    abscissa: &str,
    points: Vec<(f64, f64)>,
    xs: &[f64],
    ys: &[f64],
    min_points: usize,
) -> Result<SlopeFit> {
    let m = xs.len();
    if m < min_points.max(2) || ys.len() != m {
        return Err(Error::DegenerateFit {
            needed: min_points.max(2),
            got: m,
        });
    }
    let mf = m as f64;
    let mx = xs.iter().sum::<f64>() / mf;
    let my = ys.iter().sum::<f64>() / mf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit { needed: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - slope * x - intercept;
            e * e
        })
        .sum();
    let residual_rms = (ss / mf).sqrt();
    let dof = (m as f64 - 2.0).max(1.0);
    let halfwidth = 2.0 * (ss / dof / sxx).sqrt();
    let quotients: Vec<f64> = xs
        .iter()
        .zip(ys)
        .filter(|(x, _)| **x != 0.0)
        .map(|(x, y)| y / x)
        .collect();
    Ok(SlopeFit {
        abscissa: abscissa.to_string(),
        points,
        slope,
        intercept,
        residual_rms,
        halfwidth,
        quotient_min: quotients.iter().cloned().fold(f64::INFINITY, f64::min),
        quotient_max: quotients.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// `count` geometric points from `lo` to `hi` inclusive, increasing.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && lo > 0.0 && hi > lo);
    let step = (hi / lo).ln() / (count - 1) as f64;
    (0..count)
        .map(|i| {
            if i == count - 1 {
                hi
            } else {
                lo * (step * i as f64).exp()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_zero_residual() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let f = fit_line("x", vec![], &xs, &ys, 3).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-14);
        assert!((f.intercept + 1.0).abs() < 1e-13);
        assert!(f.residual_rms < 1e-13);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_line("x", vec![], &[1.0, 2.0], &[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = geometric_grid(0.05, 0.3, 8);
        assert_eq!(g.len(), 8);
        assert!((g[0] - 0.05).abs() < 1e-15 && g[7] == 0.3);
        let ratio = g[1] / g[0];
        assert!((g[5] / g[4] - ratio).abs() < 1e-12);
    }
}
