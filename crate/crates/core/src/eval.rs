//! Depth metrics and linear depth calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;

/// Normalized depths below this are clamped before threshold ratios.
pub const RATIO_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Root mean squared error (m).
    pub rmse: f64,
    /// Mean absolute relative error as a ratio.
    pub abs_rel: f64,
    /// `abs_rel × 100`.
    pub abs_rel_x100: f64,
    /// Fractions within `1.25^i` after range normalization.
    pub delta: [f64; 3],
    pub pixels: usize,
    pub mask: String,
}

/// Pixels where prediction and ground truth are finite, the ground truth is
/// positive and `extra` (if given) is at least `threshold`.
pub fn valid_mask(z: &Field, zstar: &Field, extra: Option<(&Field, f64)>) -> Vec<bool> {
    z.data
        .iter()
        .zip(&zstar.data)
        .enumerate()
        .map(|(k, (&a, &b))| a.is_finite() && b.is_finite() && b > 0.0 && extra.map_or(true, |(f, t)| f.data[k] >= t))
        .collect()
}

pub fn compute_metrics(
    z: &Field,
    zstar: &Field,
    mask: &[bool],
    range: [f64; 2],
    description: &str,
) -> Result<MetricsReport> {
    if !z.same_shape(zstar) || mask.len() != z.len() {
        return Err(Error::Shape("prediction, ground truth and mask sizes differ".into()));
    }
    if !(range[1] > range[0]) {
        return Err(Error::Config(format!("invalid depth range {range:?}")));
    }
    let pairs: Vec<(f64, f64)> = z
        .data
        .iter()
        .zip(&zstar.data)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a, b))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = pairs.len() as f64;
    let norm = |v: f64| ((v - range[0]) / (range[1] - range[0])).max(RATIO_EPS);
    let mse = pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let abs_rel = pairs.iter().map(|(a, b)| (a - b).abs() / b).sum::<f64>() / n;
    let delta = [1, 2, 3].map(|i| {
        let t = 1.25f64.powi(i);
        let hits = pairs
            .iter()
            .filter(|(a, b)| {
                let (x, y) = (norm(*a), norm(*b));
                (x / y).max(y / x) < t
            })
            .count();
        hits as f64 / n
    });
    Ok(MetricsReport {
        rmse: mse.sqrt(),
        abs_rel,
        abs_rel_x100: 100.0 * abs_rel,
        delta,
        pixels: pairs.len(),
        mask: description.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub omega0: f64,
    pub omega1: f64,
    /// Root mean squared residual of the fit.
    pub residual: f64,
}

impl Calibration {
    pub fn apply(&self, z: f64) -> f64 {
        self.omega0 + self.omega1 * z
    }
}

/// Least-squares line `z* ≈ ω0 + ω1 z̄` through measured pairs `(z̄, z*)`.
pub fn calibrate_linear(pairs: &[(f64, f64)]) -> Result<Calibration> {
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Config("calibration pairs must be finite".into()));
    }
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Err(Error::RankDeficient("need at least two measurements".into()));
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let scale = pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= 1e-24 * scale * scale * n {
        return Err(Error::RankDeficient("all predicted depths are identical".into()));
    }
    let omega1 = sxy / sxx;
    let omega0 = my - omega1 * mx;
    let residual = (pairs.iter().map(|p| (p.1 - omega0 - omega1 * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Calibration {
        omega0,
        omega1,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn field(v: &[f64]) -> Field {
        Grid {
            width: v.len(),
            height: 1,
            data: v.to_vec(),
        }
    }

    #[test]
    fn two_pixel_example() {
        let z = field(&[1.0, 1.1]);
        let zs = field(&[1.0, 1.0]);
        let m = compute_metrics(&z, &zs, &[true, true], [0.75, 1.18], "all").unwrap();
        assert!((m.rmse - 0.07071067811865482).abs() < 1e-9);
        assert!((m.abs_rel - 0.05).abs() < 1e-9);
        assert_eq!(m.delta, [0.5, 1.0, 1.0]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let z = field(&[1.0]);
        assert!(matches!(
            compute_metrics(&z, &z, &[false], [0.75, 1.18], ""),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate_linear(&[(1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert!(c.omega0.abs() < 1e-12 && (c.omega1 - 1.0).abs() < 1e-12);
        let c = calibrate_linear(&[(1.0, 2.0), (2.0, 4.0)]).unwrap();
        assert!(c.omega0.abs() < 1e-12 && (c.omega1 - 2.0).abs() < 1e-12 && c.residual < 1e-12);
        let c = calibrate_linear(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.3)]).unwrap();
        assert!((c.omega1 - 1.15).abs() < 1e-12 && (c.omega0 + 0.05).abs() < 1e-12);
        assert!(matches!(
            calibrate_linear(&[(1.0, 1.0), (1.0, 2.0)]),
            Err(Error::RankDeficient(_))
        ));
    }
}
