//! Signed and unsigned distance maps of the wedge representation.
//!
//! Coordinates are patch-local pixels with the origin at the top-left corner
//! of the patch and pixel centres at `+0.5`. Angles are measured from the `+x`
//! axis towards `+y`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pixel_center, Field, Rgb};
use crate::real::Real;

/// Upper bound on wedges per patch.
pub const MAX_WEDGES: usize = 4;

/// Default lower smoothness bound (px).
pub const ETA_MIN: f64 = 0.3;
/// Default upper smoothness bound (px).
pub const ETA_MAX: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for EtaBounds {
    fn default() -> Self {
        Self {
            min: ETA_MIN,
            max: ETA_MAX,
        }
    }
}

impl EtaBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max.is_finite() && self.min < self.max) {
            return Err(Error::Config(format!(
                "smoothness bounds must satisfy 0 < min < max < inf, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, eta: f64) -> bool {
        eta >= self.min && eta <= self.max
    }
}

/// One constant-colour angular region with a smooth boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wedge {
    pub vertex: [f64; 2],
    /// `[θ1, θ2]` with `θ1 ∈ [0, 2π)` and `θ2 ∈ (θ1, θ1 + 2π)`.
    pub angles: [f64; 2],
    pub color: Rgb,
    pub eta: f64,
}

impl Wedge {
    /// Builds a wedge, normalizing the angles into the canonical frame.
    pub fn new(vertex: [f64; 2], theta1: f64, theta2: f64, color: Rgb, eta: f64) -> Result<Self> {
        let t1 = theta1.rem_euclid(TAU);
        let width = (theta2 - theta1).rem_euclid(TAU);
        if !(width > 0.0) {
            return Err(Error::Config("wedge must have positive angular width".into()));
        }
        let w = Self {
            vertex,
            angles: [t1, t1 + width],
            color,
            eta,
        };
        w.validate(&EtaBounds {
            min: f64::MIN_POSITIVE,
            max: f64::MAX,
        })?;
        Ok(w)
    }

    pub fn validate(&self, eta: &EtaBounds) -> Result<()> {
        let [t1, t2] = self.angles;
        let finite = self
            .vertex
            .iter()
            .chain(&self.angles)
            .chain(&self.color)
            .all(|v| v.is_finite());
        if !finite || !self.eta.is_finite() {
            return Err(Error::Config("wedge parameters must be finite".into()));
        }
        if !(0.0..TAU).contains(&t1) || !(t2 > t1 && t2 < t1 + TAU) {
            return Err(Error::Config(format!(
                "wedge angles [{t1}, {t2}] out of canonical frame"
            )));
        }
        if !eta.contains(self.eta) {
            return Err(Error::Config(format!(
                "wedge smoothness {} outside [{}, {}]",
                self.eta, eta.min, eta.max
            )));
        }
        Ok(())
    }

    pub fn geom(&self) -> WedgeGeom<f64> {
        WedgeGeom::new(self.vertex[0], self.vertex[1], self.angles[0], self.angles[1])
    }
}

/// A patch: ordered wedges (last is frontmost) over a background colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WedgePatch {
    pub wedges: Vec<Wedge>,
    pub background: Rgb,
    pub width: usize,
    pub height: usize,
}

impl WedgePatch {
    pub fn validate(&self, eta: &EtaBounds) -> Result<()> {
        if self.wedges.is_empty() || self.wedges.len() > MAX_WEDGES {
            return Err(Error::Config(format!(
                "patch needs 1..={MAX_WEDGES} wedges, got {}",
                self.wedges.len()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("patch must be non-empty".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for wedge in &self.wedges {
            wedge.validate(eta)?;
            let [x, y] = wedge.vertex;
            if !(x >= -w && x <= 2.0 * w && y >= -h && y <= 2.0 * h) {
                return Err(Error::Config(format!(
                    "vertex ({x}, {y}) outside the dilated patch box"
                )));
            }
        }
        if !self.background.iter().all(|c| c.is_finite()) {
            return Err(Error::Config("background colour must be finite".into()));
        }
        Ok(())
    }

    pub fn geoms(&self) -> Vec<WedgeGeom<f64>> {
        self.wedges.iter().map(Wedge::geom).collect()
    }
}

/// How Heaviside steps are evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Heaviside {
    /// Exact step with `H(0) = 1`.
    Exact,
    /// Logistic `1 / (1 + exp(-x / temperature))`.
    Logistic { temperature: f64 },
}

impl Heaviside {
    /// Temperature of the smooth surrogate used inside loss gradients.
    pub const SURROGATE: Heaviside = Heaviside::Logistic { temperature: 0.1 };

    #[inline]
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Heaviside::Exact => {
                if x.value() >= 0.0 {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Heaviside::Logistic { temperature } => (x / temperature).logistic(),
        }
    }
}

/// Wedge geometry with trigonometry precomputed, generic over the scalar.
#[derive(Clone, Copy, Debug)]
pub struct WedgeGeom<T> {
    pub px: T,
    pub py: T,
    sin: [T; 2],
    cos: [T; 2],
    /// Angular width in `(0, 2π)`, primal value only.
    width: f64,
}

impl<T: Real> WedgeGeom<T> {
    pub fn new(px: T, py: T, theta1: T, theta2: T) -> Self {
        let width = (theta2.value() - theta1.value()).rem_euclid(TAU);
        Self {
            px,
            py,
            sin: [theta1.sin(), theta2.sin()],
            cos: [theta1.cos(), theta2.cos()],
            width,
        }
    }

    /// Radial `r` and axial `a` coordinates of pixel `(x, y)` for edge `t`.
    #[inline]
    fn radial_axial(&self, x: f64, y: f64, t: usize) -> (T, T) {
        let dx = -self.px + x;
        let dy = -self.py + y;
        let r = dy * self.cos[t] - dx * self.sin[t];
        let a = dx * self.cos[t] + dy * self.sin[t];
        (r, a)
    }

    #[inline]
    fn edge_distance(r: T, a: T, w_scale: f64) -> T {
        if a.value() >= 0.0 {
            r
        } else {
            let v = (r * r + a * a * (w_scale * w_scale)).sqrt();
            if r.value() >= 0.0 {
                v
            } else {
                -v
            }
        }
    }

    /// Signed distance of pixel `(x, y)` to this wedge: positive inside.
    #[inline]
    pub fn signed_distance(&self, x: f64, y: f64, w_scale: f64) -> T {
        let (r1, a1) = self.radial_axial(x, y, 0);
        let (r2, a2) = self.radial_axial(x, y, 1);
        let d1 = Self::edge_distance(r1, a1, w_scale).abs();
        let d2 = Self::edge_distance(r2, a2, w_scale).abs();
        let d = d1.min(d2);
        if inside(r1.value(), r2.value(), self.width) {
            d
        } else {
            -d
        }
    }
}

/// Cone membership from the radial coordinates of both edges.
///
/// `r1 >= 0` is the counter-clockwise side of the starting edge and `r2 <= 0`
/// the clockwise side of the ending edge.
#[inline]
fn inside(r1: f64, r2: f64, width: f64) -> bool {
    if width <= std::f64::consts::PI {
        r1 >= 0.0 && r2 <= 0.0
    } else {
        r1 >= 0.0 || r2 <= 0.0
    }
}

/// Signed distance from `x` to the edge ray leaving `p` at angle `theta`.
pub fn edge_signed_distance(x: [f64; 2], p: [f64; 2], theta: f64, w_scale: f64) -> f64 {
    let g = WedgeGeom::new(p[0], p[1], theta, theta + 1.0);
    let (r, a) = g.radial_axial(x[0], x[1], 0);
    WedgeGeom::<f64>::edge_distance(r, a, w_scale)
}

/// `+1` when `x` lies in the closed angular sector `[θ1, θ2]` around `p`.
pub fn wedge_indicator(x: [f64; 2], p: [f64; 2], theta1: f64, theta2: f64) -> f64 {
    let g = WedgeGeom::new(p[0], p[1], theta1, theta2);
    let (r1, _) = g.radial_axial(x[0], x[1], 0);
    let (r2, _) = g.radial_axial(x[0], x[1], 1);
    if inside(r1, r2, g.width) {
        1.0
    } else {
        -1.0
    }
}

/// Per-pixel wedge quantities for up to [`MAX_WEDGES`] wedges.
#[derive(Clone, Copy, Debug)]
pub struct PixelGeometry<T> {
    pub n: usize,
    pub d: [T; MAX_WEDGES],
    pub masks: [T; MAX_WEDGES],
    pub u: T,
}

/// Distances, unoccluded masks and boundary distance at one pixel centre.
#[inline]
pub fn pixel_geometry<T: Real>(
    geoms: &[WedgeGeom<T>],
    x: f64,
    y: f64,
    w_scale: f64,
    heaviside: Heaviside,
) -> PixelGeometry<T> {
    let n = geoms.len();
    let mut d = [T::zero(); MAX_WEDGES];
    let mut absd = [T::zero(); MAX_WEDGES];
    for i in 0..n {
        d[i] = geoms[i].signed_distance(x, y, w_scale);
        absd[i] = d[i].abs();
    }
    if n == 0 {
        return PixelGeometry {
            n,
            d,
            masks: [T::zero(); MAX_WEDGES],
            u: T::cst(f64::INFINITY),
        };
    }
    // suffix minima: min(|d_i|, ..., |d_l|)
    let mut suffix = [T::zero(); MAX_WEDGES];
    suffix[n - 1] = absd[n - 1];
    for i in (0..n - 1).rev() {
        suffix[i] = absd[i].min(suffix[i + 1]);
    }
    let mut masks = [T::zero(); MAX_WEDGES];
    let mut not_front = T::one();
    for i in (0..n).rev() {
        let h = heaviside.eval(d[i]);
        masks[i] = h * not_front;
        not_front *= T::one() - h;
    }
    let u = match heaviside {
        Heaviside::Exact => match (0..n).find(|&i| masks[i].value() == 1.0) {
            Some(i) => suffix[i],
            None => suffix[0],
        },
        Heaviside::Logistic { .. } => {
            let mut u = T::zero();
            let mut covered = T::zero();
            for i in 0..n {
                u += masks[i] * suffix[i];
                covered += masks[i];
            }
            u + (T::one() - covered) * suffix[0]
        }
    };
    PixelGeometry { n, d, masks, u }
}

/// Full-patch distance maps evaluated with exact steps.
#[derive(Clone, Debug)]
pub struct DistanceMaps {
    pub signed: Vec<Field>,
    pub masks: Vec<Field>,
    pub unsigned: Field,
}

impl DistanceMaps {
    pub fn compute(patch: &WedgePatch, w_scale: f64) -> Self {
        let geoms = patch.geoms();
        let n = geoms.len();
        let (w, h) = (patch.width, patch.height);
        let mut signed = vec![Field::filled(w, h, 0.0); n];
        let mut masks = vec![Field::filled(w, h, 0.0); n];
        let mut unsigned = Field::filled(w, h, 0.0);
        for yi in 0..h {
            for xi in 0..w {
                let (x, y) = pixel_center(xi, yi);
                let g = pixel_geometry(&geoms, x, y, w_scale, Heaviside::Exact);
                for i in 0..n {
                    signed[i].set(xi, yi, g.d[i]);
                    masks[i].set(xi, yi, g.masks[i]);
                }
                unsigned.set(xi, yi, g.u);
            }
        }
        Self {
            signed,
            masks,
            unsigned,
        }
    }
}

/// Signed distance map `d_i` of wedge `index` (0-based) at pixel centres.
pub fn wedge_signed_distance_map(patch: &WedgePatch, index: usize, w_scale: f64) -> Field {
    let g = patch.wedges[index].geom();
    Field::from_fn(patch.width, patch.height, |xi, yi| {
        let (x, y) = pixel_center(xi, yi);
        g.signed_distance(x, y, w_scale)
    })
}

pub fn occlusion_masks(patch: &WedgePatch, w_scale: f64) -> Vec<Field> {
    DistanceMaps::compute(patch, w_scale).masks
}

pub fn unoccluded_distance_map(patch: &WedgePatch, w_scale: f64) -> Field {
    DistanceMaps::compute(patch, w_scale).unsigned
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use super::*;

    fn quadrant_patch(n: usize) -> WedgePatch {
        WedgePatch {
            wedges: vec![Wedge::new([0.0, 0.0], 0.0, FRAC_PI_2, [1.0; 3], 1.0).unwrap()],
            background: [0.0; 3],
            width: n,
            height: n,
        }
    }

    #[test]
    fn edge_distance_examples() {
        assert_eq!(edge_signed_distance([2.0, 3.0], [0.0, 0.0], 0.0, 1.0), 3.0);
        assert!(edge_signed_distance([0.0, 5.0], [0.0, 0.0], FRAC_PI_2, 1.0).abs() < 1e-12);
        assert!((edge_signed_distance([-3.0, 4.0], [0.0, 0.0], 0.0, 1.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn indicator_examples() {
        let p = [0.0, 0.0];
        assert_eq!(wedge_indicator([1.0, 1.0], p, 0.0, FRAC_PI_2), 1.0);
        assert_eq!(wedge_indicator([-1.0, 1.0], p, 0.0, FRAC_PI_2), -1.0);
        assert_eq!(wedge_indicator([1.0, 0.0], p, 0.0, FRAC_PI_2), 1.0);
        assert_eq!(wedge_indicator(p, p, 0.3, 0.4), 1.0);
    }

    #[test]
    fn indicator_matches_lifted_angle_rule() {
        let mut state = 7u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..5000 {
            let t1 = next() * TAU;
            let t2 = t1 + 0.01 + next() * (TAU - 0.02);
            let x = [next() * 20.0 - 10.0, next() * 20.0 - 10.0];
            let phi = x[1].atan2(x[0]);
            let lifted = t1 + (phi - t1).rem_euclid(TAU);
            // skip points within rounding distance of either ray
            if (lifted - t1).abs() < 1e-9 || (lifted - t2).abs() < 1e-9 {
                continue;
            }
            let want = if lifted <= t2 { 1.0 } else { -1.0 };
            assert_eq!(wedge_indicator(x, [0.0, 0.0], t1, t2), want, "t1={t1} t2={t2} x={x:?}");
        }
    }

    #[test]
    fn wedge_distance_examples() {
        let g = WedgeGeom::new(0.0, 0.0, 0.0, FRAC_PI_2);
        assert!((g.signed_distance(1.0, 2.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((g.signed_distance(2.0, -1.0, 1.0) + 1.0).abs() < 1e-12);
        assert_eq!(g.signed_distance(3.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn edge_distance_is_euclidean_distance_to_ray() {
        let origin = [4.3, 4.1];
        for k in 0..12 {
            let theta = k as f64 * 0.53;
            for yi in 0..9 {
                for xi in 0..9 {
                    let (x, y) = pixel_center(xi, yi);
                    let got = edge_signed_distance([x, y], origin, theta, 1.0).abs();
                    // brute force over a densely sampled ray
                    let mut best = f64::INFINITY;
                    for s in 0..=40_000 {
                        let t = s as f64 * 5e-4;
                        let q = [origin[0] + t * theta.cos(), origin[1] + t * theta.sin()];
                        best = best.min(((x - q[0]).powi(2) + (y - q[1]).powi(2)).sqrt());
                    }
                    // sampling spacing 5e-4 bounds the brute-force error by 2.5e-4²/d
                    let slack = if best > 1e-3 { 1.0 / 8.0 * 25e-8 / best } else { 2.5e-4 };
                    assert!((got - best).abs() <= 1e-6 + slack, "{got} vs {best}");
                }
            }
        }
    }

    #[test]
    fn masks_partition_with_background() {
        let patch = WedgePatch {
            wedges: vec![
                Wedge::new([3.0, 4.0], 0.2, 2.5, [1.0, 0.0, 0.0], 1.0).unwrap(),
                Wedge::new([6.0, 2.0], 1.0, 4.0, [0.0, 1.0, 0.0], 1.0).unwrap(),
            ],
            background: [0.0; 3],
            width: 9,
            height: 9,
        };
        let maps = DistanceMaps::compute(&patch, 1.0);
        for k in 0..81 {
            let s: f64 = maps.masks.iter().map(|m| m.data[k]).sum();
            assert!(s == 0.0 || s == 1.0);
            let inside_any = maps.signed.iter().any(|d| d.data[k] >= 0.0);
            assert_eq!(s == 1.0, inside_any);
            assert!(maps.unsigned.data[k] >= 0.0);
        }
    }

    #[test]
    fn front_wedge_occludes_back_wedge() {
        let patch = WedgePatch {
            wedges: vec![
                Wedge::new([0.0, 0.0], 0.0, FRAC_PI_2, [1.0; 3], 1.0).unwrap(),
                Wedge::new([0.0, 0.0], 0.0, PI, [1.0; 3], 1.0).unwrap(),
            ],
            background: [0.0; 3],
            width: 5,
            height: 5,
        };
        let masks = occlusion_masks(&patch, 1.0);
        assert_eq!(masks[0].get(2, 2), 0.0);
        assert_eq!(masks[1].get(2, 2), 1.0);
    }

    #[test]
    fn single_wedge_mask_is_step_of_distance() {
        let patch = quadrant_patch(7);
        let maps = DistanceMaps::compute(&patch, 1.0);
        for k in 0..49 {
            let want = if maps.signed[0].data[k] >= 0.0 { 1.0 } else { 0.0 };
            assert_eq!(maps.masks[0].data[k], want);
            assert_eq!(maps.unsigned.data[k], maps.signed[0].data[k].abs());
        }
    }

    #[test]
    fn unoccluded_distance_example() {
        // pixel inside back wedge only: u = min(|d1|, |d2|)
        let patch = WedgePatch {
            wedges: vec![
                Wedge::new([-10.0, -10.0], 0.0, 1.5, [1.0; 3], 1.0).unwrap(),
                Wedge::new([20.0, -10.0], 1.7, 3.0, [0.5; 3], 1.0).unwrap(),
            ],
            background: [0.0; 3],
            width: 9,
            height: 9,
        };
        let maps = DistanceMaps::compute(&patch, 1.0);
        for k in 0..81 {
            if maps.masks[0].data[k] == 1.0 {
                let want = maps.signed[0].data[k].abs().min(maps.signed[1].data[k].abs());
                assert_eq!(maps.unsigned.data[k], want);
            }
        }
    }

    #[test]
    fn unsigned_distance_is_lipschitz_within_mask_regions() {
        let patch = WedgePatch {
            wedges: vec![
                Wedge::new([2.5, 7.0], 5.0, 7.0, [1.0; 3], 1.0).unwrap(),
                Wedge::new([6.0, 3.0], 2.0, 4.5, [0.5; 3], 1.0).unwrap(),
            ],
            background: [0.0; 3],
            width: 11,
            height: 11,
        };
        let maps = DistanceMaps::compute(&patch, 1.0);
        let label = |x: usize, y: usize| maps.masks.iter().position(|m| m.get(x, y) == 1.0).map_or(0, |i| i + 1);
        for y in 0..11 {
            for x in 0..10 {
                if label(x, y) == label(x + 1, y) {
                    let du = (maps.unsigned.get(x, y) - maps.unsigned.get(x + 1, y)).abs();
                    assert!(du <= 1.0 + 1e-9);
                }
                if label(y, x) == label(y, x + 1) {
                    let du = (maps.unsigned.get(y, x) - maps.unsigned.get(y, x + 1)).abs();
                    assert!(du <= 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn rotation_by_quarter_turn_permutes_maps() {
        // rotate about the patch centre: (x, y) -> (n - y, x), angles + π/2
        let n = 9usize;
        let c = n as f64;
        let base = WedgePatch {
            wedges: vec![
                Wedge::new([2.0, 3.5], 0.3, 2.0, [1.0; 3], 1.0).unwrap(),
                Wedge::new([6.5, 5.0], 3.0, 5.5, [0.5; 3], 1.0).unwrap(),
            ],
            background: [0.0; 3],
            width: n,
            height: n,
        };
        let mut rotated = base.clone();
        for w in rotated.wedges.iter_mut() {
            let [x, y] = w.vertex;
            *w = Wedge::new(
                [c - y, x],
                w.angles[0] + FRAC_PI_2,
                w.angles[1] + FRAC_PI_2,
                w.color,
                w.eta,
            )
            .unwrap();
        }
        let a = DistanceMaps::compute(&base, 1.0);
        let b = DistanceMaps::compute(&rotated, 1.0);
        for y in 0..n {
            for x in 0..n {
                let (rx, ry) = (n - 1 - y, x);
                assert!((a.unsigned.get(x, y) - b.unsigned.get(rx, ry)).abs() < 1e-9);
                for i in 0..2 {
                    assert!((a.signed[i].get(x, y) - b.signed[i].get(rx, ry)).abs() < 1e-9);
                }
            }
        }
    }
}
