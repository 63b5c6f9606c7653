//! Estimation of wedge patches by direct minimization of the local and
//! global objectives.

mod global;
pub mod lm;
mod local;
pub mod params;
pub mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EtaBounds, MAX_WEDGES};
use crate::render::{RIDGE_LAMBDA, STROKE_DELTA};

pub use global::{
    global_loss, initialize_consistent, refine_global, resolve_ownership, ConsistencyMaps, ConsistentPatch,
    ConsistentWedge, GlobalContext, GlobalProblem, GlobalTargets, Refinement,
};
pub use lm::{LmOptions, LmResult, Problem};
pub use local::{
    fit_patch_local, fit_patch_local_single, is_flat, local_loss, LocalFit, LocalProblem, LocalWedge, PatchTarget,
};
pub use params::{Geometry, ParamBox};
pub use schedule::{FitWeights, Schedule};

/// Which targets the objectives may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// Noisy images only; supervised terms are inactive.
    #[default]
    #[serde(rename = "self")]
    SelfSupervised,
    /// Synthetic validation with clean images, boundary distances and depth.
    #[serde(rename = "supervised")]
    Supervised,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Profile::SelfSupervised),
            "supervised" => Ok(Profile::Supervised),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}, expected self or supervised"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub profile: Profile,
    pub patch_size: usize,
    pub stride: usize,
    /// Multi-start count per patch and image.
    pub restarts: usize,
    /// Largest wedge count tried per patch.
    pub max_wedges: usize,
    pub local_lm: LmOptions,
    pub outer_iterations: usize,
    /// Optimizer iterations per patch between global-map rebuilds.
    pub inner_iterations: usize,
    /// A patch is flat when its variance is below this multiple of the
    /// variance predicted by its pixel differences.
    pub flat_factor: f64,
    /// Scale of the information-criterion penalty for extra wedges.
    pub model_penalty: f64,
    /// Extra wedges must also lower the loss by this fraction of the
    /// constant-colour loss.
    pub min_gain: f64,
    pub weights: FitWeights,
    /// Boundary stroke width (px).
    pub delta: f64,
    /// Boundary threshold of the depth and confidence maps.
    pub tau: f64,
    /// Share of the confident patches at a pixel that must place it inside
    /// a wedge with a valid depth before it gets a sparse depth.
    pub side_quorum: f64,
    /// A patch lends a pixel its wedge depth only when the pixel centre
    /// lies at least this far (px) inside the wedge's visible region.
    pub side_margin: f64,
    /// Ridge weight of the colour solve.
    pub lambda: f64,
    pub w_scale: f64,
    pub eta: EtaBounds,
    /// A wedge depth needs at least this much visible own boundary (px).
    pub min_visible_boundary: f64,
    /// Wedges whose vertex lies in the patch and whose opening differs from a
    /// half-plane by more than this (rad) give no depth: the blurred corner
    /// is only approximately an error function of the distance.
    pub max_corner_bend: f64,
    /// Smoothing passes of wedge depths along shared boundaries.
    pub consensus_passes: usize,
    /// Boundary overlap, as a share of the shorter boundary, that links two
    /// wedges during smoothing.
    pub consensus_overlap: f64,
    /// Largest RGB distance between the colours of two linked wedges.
    pub consensus_color_tolerance: f64,
    /// Half-width, in robust spreads of a wedge's smoothness difference, of
    /// the window a linked value must fall in to join a consensus mean.
    pub consensus_outlier: f64,
    /// Angular distance from a half-plane (rad) that counts as convex evidence.
    pub ownership_margin: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            profile: Profile::SelfSupervised,
            patch_size: 21,
            stride: 2,
            restarts: 8,
            max_wedges: 2,
            local_lm: LmOptions::default(),
            outer_iterations: 30,
            inner_iterations: 2,
            flat_factor: 1.3,
            model_penalty: 1.0,
            min_gain: 0.02,
            weights: FitWeights::self_supervised(),
            delta: STROKE_DELTA,
            tau: 0.5,
            side_quorum: 0.5,
            side_margin: 0.1,
            lambda: RIDGE_LAMBDA,
            w_scale: 1.0,
            eta: EtaBounds::default(),
            min_visible_boundary: 3.0,
            max_corner_bend: 0.8,
            consensus_passes: 200,
            consensus_overlap: 0.3,
            consensus_color_tolerance: 0.15,
            consensus_outlier: 2.5,
            ownership_margin: 0.15,
        }
    }
}

impl FitConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let weights = match profile {
            Profile::SelfSupervised => FitWeights::self_supervised(),
            Profile::Supervised => FitWeights::supervised(),
        };
        Self {
            profile,
            weights,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "patch size {} and stride {} must satisfy 3 <= size, 1 <= stride <= size",
                self.patch_size, self.stride
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("at least one restart is required".into()));
        }
        if self.max_wedges == 0 || self.max_wedges > MAX_WEDGES {
            return Err(Error::Config(format!("max_wedges must be in 1..={MAX_WEDGES}")));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "stroke width must be positive, got {}",
                self.delta
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.consensus_overlap) {
            return Err(Error::Config(format!(
                "consensus_overlap must lie in [0, 1], got {}",
                self.consensus_overlap
            )));
        }
        if !(self.consensus_outlier > 0.0) {
            return Err(Error::Config(format!(
                "consensus_outlier must be positive, got {}",
                self.consensus_outlier
            )));
        }
        if !(self.side_margin >= 0.0 && self.side_margin.is_finite()) {
            return Err(Error::Config(format!(
                "side_margin must be finite and >= 0, got {}",
                self.side_margin
            )));
        }
        if !(0.0..=1.0).contains(&self.side_quorum) {
            return Err(Error::Config(format!(
                "side_quorum must lie in [0, 1], got {}",
                self.side_quorum
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "ridge weight must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.w_scale > 0.0 && self.w_scale.is_finite()) {
            return Err(Error::Config("w_scale must be positive".into()));
        }
        if !(self.flat_factor >= 0.0
            && self.model_penalty >= 0.0
            && self.min_gain >= 0.0
            && self.min_visible_boundary >= 0.0)
        {
            return Err(Error::Config(
                "flat_factor, model_penalty, min_gain and min_visible_boundary must be >= 0".into(),
            ));
        }
        self.eta.validate()?;
        self.weights.validate()
    }

    pub(crate) fn param_box(&self) -> ParamBox {
        ParamBox::new(self.patch_size, self.patch_size, self.eta)
    }
}

/// Overlapping square patches covering an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

fn offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = extent - size;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

impl PatchGrid {
    pub fn new(image_width: usize, image_height: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 || image_width < patch_size || image_height < patch_size {
            return Err(Error::Shape(format!(
                "image {image_width}x{image_height} cannot hold {patch_size}px patches at stride {stride}"
            )));
        }
        Ok(Self {
            image_width,
            image_height,
            patch_size,
            stride,
            xs: offsets(image_width, patch_size, stride),
            ys: offsets(image_height, patch_size, stride),
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel of patch `i` (row-major over the grid).
    pub fn origin(&self, i: usize) -> [usize; 2] {
        [self.xs[i % self.xs.len()], self.ys[i / self.xs.len()]]
    }

    /// Grid column and row of patch `i`.
    pub fn cell(&self, i: usize) -> [usize; 2] {
        [i % self.xs.len(), i / self.xs.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_every_pixel() {
        for (w, h) in [(21, 21), (30, 25), (147, 147), (50, 22)] {
            let g = PatchGrid::new(w, h, 21, 2).unwrap();
            let mut hits = vec![0usize; w * h];
            for i in 0..g.len() {
                let [x0, y0] = g.origin(i);
                for y in y0..y0 + 21 {
                    for x in x0..x0 + 21 {
                        hits[y * w + x] += 1;
                    }
                }
            }
            assert!(hits.iter().all(|&c| c > 0), "{w}x{h}");
        }
        let g = PatchGrid::new(147, 147, 21, 2).unwrap();
        assert_eq!(g.len(), 64 * 64);
        assert!(PatchGrid::new(20, 40, 21, 2).is_err());
    }

    #[test]
    fn profile_parses_and_sets_supervised_terms() {
        assert_eq!("self".parse::<Profile>().unwrap(), Profile::SelfSupervised);
        assert!("other".parse::<Profile>().is_err());
        let s = FitConfig::for_profile(Profile::Supervised);
        assert!(s.weights.beta[2] > 0.0 && !s.weights.gamma[6].is_zero());
        let u = FitConfig::for_profile(Profile::SelfSupervised);
        assert!(u.weights.gamma[5].is_zero() && u.weights.gamma[6].is_zero());
        u.validate().unwrap();
    }
}
