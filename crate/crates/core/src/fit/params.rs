//! Unconstrained encodings of wedge parameters.
//!
//! Bounded quantities go through a logistic squash so the optimizer works on
//! an unbounded vector; the starting angle is left free.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::geometry::{EtaBounds, WedgeGeom};
use crate::real::Real;

/// Smallest angular width (rad); the largest is `2π` minus this.
pub const MIN_WIDTH: f64 = 0.05;

#[inline]
pub fn squash<T: Real>(q: T, lo: f64, hi: f64) -> T {
    q.logistic() * (hi - lo) + lo
}

pub fn unsquash(v: f64, lo: f64, hi: f64) -> f64 {
    let t = ((v - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
    (t / (1.0 - t)).ln()
}

/// Box constraints for one patch of side `size`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamBox {
    pub width: f64,
    pub height: f64,
    pub eta: EtaBounds,
}

impl ParamBox {
    pub fn new(width: usize, height: usize, eta: EtaBounds) -> Self {
        Self {
            width: width as f64,
            height: height as f64,
            eta,
        }
    }

    /// Vertex bounds: the patch extent dilated by one side length.
    fn x_range(&self) -> (f64, f64) {
        (-self.width, 2.0 * self.width)
    }

    fn y_range(&self) -> (f64, f64) {
        (-self.height, 2.0 * self.height)
    }

    /// Builds the geometry of one wedge from `[qx, qy, θ1, qΔ]`.
    #[inline]
    pub fn geom<T: Real>(&self, q: &[T]) -> WedgeGeom<T> {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        let px = squash(q[0], x0, x1);
        let py = squash(q[1], y0, y1);
        let width = squash(q[3], MIN_WIDTH, TAU - MIN_WIDTH);
        WedgeGeom::new(px, py, q[2], q[2] + width)
    }

    #[inline]
    pub fn eta<T: Real>(&self, q: T) -> T {
        squash(q, self.eta.min, self.eta.max)
    }

    pub fn encode_geometry(&self, g: &Geometry) -> [f64; 4] {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        [
            unsquash(g.vertex[0], x0, x1),
            unsquash(g.vertex[1], y0, y1),
            g.theta1,
            unsquash(g.width, MIN_WIDTH, TAU - MIN_WIDTH),
        ]
    }

    pub fn decode_geometry(&self, q: &[f64]) -> Geometry {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        Geometry {
            vertex: [squash(q[0], x0, x1), squash(q[1], y0, y1)],
            theta1: q[2].rem_euclid(TAU),
            width: squash(q[3], MIN_WIDTH, TAU - MIN_WIDTH),
        }
    }

    pub fn encode_eta(&self, eta: f64) -> f64 {
        unsquash(eta, self.eta.min, self.eta.max)
    }

    pub fn clamp_eta(&self, eta: f64) -> f64 {
        eta.clamp(self.eta.min, self.eta.max)
    }
}

/// Vertex, starting angle and angular width of one wedge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub vertex: [f64; 2],
    pub theta1: f64,
    pub width: f64,
}

impl Geometry {
    pub fn theta2(&self) -> f64 {
        self.theta1 + self.width
    }

    pub fn to_geom(&self) -> WedgeGeom<f64> {
        WedgeGeom::new(self.vertex[0], self.vertex[1], self.theta1, self.theta2())
    }

    /// The other side of the same two rays.
    pub fn complement(&self) -> Geometry {
        Geometry {
            vertex: self.vertex,
            theta1: self.theta2().rem_euclid(TAU),
            width: TAU - self.width,
        }
    }

    pub fn is_reflex(&self) -> bool {
        self.width > PI
    }

    /// Half-plane whose boundary passes through `point` along direction `phi`.
    pub fn half_plane(point: [f64; 2], phi: f64) -> Geometry {
        Geometry {
            vertex: point,
            theta1: phi.rem_euclid(TAU),
            width: PI,
        }
    }
}
