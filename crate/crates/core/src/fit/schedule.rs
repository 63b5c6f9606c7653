//! Loss weights and their schedules over outer iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A weight that is either constant or piecewise linear in training epochs.
///
/// Key epochs live on a reference span `1..=span` that is stretched over the
/// outer iterations actually run, so iteration `t` of `n` maps to epoch
/// `1 + t (span − 1) / (n − 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    Keyed { span: f64, keys: Vec<[f64; 2]> },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant(v) if v.is_finite() && *v >= 0.0 => Ok(()),
            Schedule::Constant(v) => Err(Error::Config(format!("loss weight must be finite and >= 0, got {v}"))),
            Schedule::Keyed { span, keys } => {
                if !(span.is_finite() && *span >= 1.0) || keys.is_empty() {
                    return Err(Error::Config(
                        "keyed schedule needs span >= 1 and at least one key".into(),
                    ));
                }
                if keys.iter().any(|[e, v]| !e.is_finite() || !v.is_finite() || *v < 0.0) {
                    return Err(Error::Config(
                        "schedule keys must be finite with non-negative values".into(),
                    ));
                }
                if keys.windows(2).any(|w| w[1][0] <= w[0][0]) {
                    return Err(Error::Config("schedule key epochs must increase".into()));
                }
                Ok(())
            }
        }
    }

    /// Value at outer iteration `t` of `n`.
    pub fn at(&self, t: usize, n: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Keyed { span, keys } => {
                let e = if n <= 1 {
                    *span
                } else {
                    1.0 + t as f64 * (span - 1.0) / (n - 1) as f64
                };
                interpolate(keys, e)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Schedule::Constant(v) => *v == 0.0,
            Schedule::Keyed { keys, .. } => keys.iter().all(|k| k[1] == 0.0),
        }
    }
}

fn interpolate(keys: &[[f64; 2]], e: f64) -> f64 {
    let first = keys[0];
    let last = keys[keys.len() - 1];
    if e <= first[0] {
        return first[1];
    }
    if e >= last[0] {
        return last[1];
    }
    keys.windows(2)
        .find(|w| e <= w[1][0])
        .map(|w| {
            let t = (e - w[0][0]) / (w[1][0] - w[0][0]);
            w[0][1] + t * (w[1][1] - w[0][1])
        })
        .unwrap_or(last[1])
}

/// Weights of the local and global objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitWeights {
    /// Local colour, derivative and boundary-localization weights.
    pub beta: [f64; 3],
    /// Global weights `γ1..γ8`.
    pub gamma: [Schedule; 8],
}

/// Colour-consistency schedule of the base configuration.
pub fn color_consistency_schedule() -> Schedule {
    Schedule::Keyed {
        span: 350.0,
        keys: vec![[1.0, 0.2], [30.0, 0.1], [100.0, 0.05]],
    }
}

/// Depth-supervision schedule of the base configuration.
pub fn depth_schedule() -> Schedule {
    Schedule::Keyed {
        span: 350.0,
        keys: vec![[1.0, 0.0001], [30.0, 0.05], [100.0, 0.5]],
    }
}

impl FitWeights {
    /// Weights for fitting noisy pairs without ground truth.
    ///
    /// Both terms that compare against the Sobel magnitude of an observed
    /// image are off: noise inflates that magnitude everywhere, which drags
    /// the fitted smoothness upward. Derivative consistency is off too;
    /// without the Sobel anchor it pulls smoothness toward the mean of
    /// neighbouring patches, which biases edges near corners.
    pub fn self_supervised() -> Self {
        use Schedule::Constant as C;
        Self {
            beta: [1.0, 0.0, 0.0],
            gamma: [
                C(1.0),
                color_consistency_schedule(),
                C(1.0),
                C(0.0),
                C(0.0),
                C(0.0),
                C(0.0),
                C(0.0),
            ],
        }
    }

    /// Weights that also use the boundary-distance and depth targets.
    pub fn supervised() -> Self {
        let mut w = Self::self_supervised();
        w.beta[2] = 0.1;
        w.gamma[5] = Schedule::Constant(1.0);
        w.gamma[6] = depth_schedule();
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config(format!(
                "local weights must be finite and >= 0, got {:?}",
                self.beta
            )));
        }
        self.gamma.iter().try_for_each(Schedule::validate)
    }

    /// All `γ` values at outer iteration `t` of `n`.
    pub fn gamma_at(&self, t: usize, n: usize) -> [f64; 8] {
        std::array::from_fn(|i| self.gamma[i].at(t, n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_schedule_hits_key_values_at_mapped_iterations() {
        let s = color_consistency_schedule();
        assert_eq!(s.at(0, 350), 0.2);
        assert!((s.at(29, 350) - 0.1).abs() < 1e-12);
        assert!((s.at(99, 350) - 0.05).abs() < 1e-12);
        assert_eq!(s.at(349, 350), 0.05);
        // stretched onto 30 iterations: first and last ends still match
        assert_eq!(s.at(0, 30), 0.2);
        assert_eq!(s.at(29, 30), 0.05);
        let mid = s.at(1, 30);
        assert!(mid < 0.2 && mid > 0.1);
    }

    #[test]
    fn schedules_roundtrip_through_json() {
        let w = FitWeights::supervised();
        let s = serde_json::to_string(&w).unwrap();
        let back: FitWeights = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
        assert!(serde_json::from_str::<Schedule>("-1").unwrap().validate().is_err());
    }
}
