//! Thin-lens defocus, smoothness composition, closed-form depth and sensor
//! photometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Which of the two optical powers an image was captured with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Power {
    Plus,
    Minus,
}

impl Power {
    pub const BOTH: [Power; 2] = [Power::Plus, Power::Minus];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    /// Aperture Gaussian SD (m).
    #[serde(rename = "Σ", alias = "sigma_aperture")]
    pub sigma_aperture: f64,
    /// Optical power of the `+` image (1/m).
    #[serde(rename = "ρ_plus", alias = "rho_plus")]
    pub rho_plus: f64,
    /// Optical power of the `−` image (1/m).
    #[serde(rename = "ρ_minus", alias = "rho_minus")]
    pub rho_minus: f64,
    /// Lens to sensor distance (m).
    pub s: f64,
    /// Sensor length per pixel (m).
    pub pixel_pitch: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Scene texture smoothness (px) used by the synthetic renderer.
    #[serde(rename = "ξ", alias = "xi", default)]
    pub xi: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            sigma_aperture: 1e-3,
            rho_plus: 10.2,
            rho_minus: 10.0,
            s: 0.1,
            pixel_pitch: 4e-5,
            z_min: 0.75,
            z_max: 1.18,
            xi: 0.0,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_aperture,
            self.rho_plus,
            self.rho_minus,
            self.s,
            self.pixel_pitch,
            self.z_min,
            self.z_max,
            self.xi,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("optics parameters must be finite".into()));
        }
        if !(self.sigma_aperture > 0.0 && self.s > 0.0 && self.pixel_pitch > 0.0) {
            return Err(Error::Config("Σ, s and pixel_pitch must be positive".into()));
        }
        if !(self.z_min > 0.0 && self.z_min < self.z_max) {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 < z_min < z_max, got [{}, {}]",
                self.z_min, self.z_max
            )));
        }
        if self.xi < 0.0 {
            return Err(Error::Config("ξ must be non-negative".into()));
        }
        if self.rho_plus == self.rho_minus {
            return Err(Error::SingularOptics(
                "ρ_plus equals ρ_minus, depth is not identifiable".into(),
            ));
        }
        Ok(())
    }

    pub fn rho(&self, power: Power) -> f64 {
        match power {
            Power::Plus => self.rho_plus,
            Power::Minus => self.rho_minus,
        }
    }

    /// Signed defocus SD in pixels.
    pub fn sigma_px(&self, z: f64, power: Power) -> f64 {
        defocus_sigma(z, self.sigma_aperture, self.rho(power), self.s) / self.pixel_pitch
    }

    /// Observed boundary smoothness (px) of an object at depth `z`.
    pub fn eta_px(&self, z: f64, power: Power) -> f64 {
        combined_smoothness(self.sigma_px(z, power), self.xi)
    }

    /// Depth from a pair of pixel-domain smoothness values.
    pub fn depth(&self, eta_plus_px: f64, eta_minus_px: f64) -> Result<Depth> {
        depth_from_smoothness(eta_plus_px * self.pixel_pitch, eta_minus_px * self.pixel_pitch, self)
    }

    /// Depth from `η₊² − η₋²` in px². The inverse depth is affine in this
    /// difference, so averaging it averages inverse depths.
    pub fn depth_from_difference(&self, diff_px2: f64) -> Result<Depth> {
        let p = self.pixel_pitch;
        depth_from_smoothness((diff_px2.max(0.0)).sqrt() * p, (-diff_px2).max(0.0).sqrt() * p, self)
    }

    /// Closed-form depth from pixel-domain smoothness, differentiable in both inputs.
    pub fn depth_px<T: Real>(&self, eta_plus_px: T, eta_minus_px: T) -> T {
        let (sg, s, rp, rm) = (self.sigma_aperture, self.s, self.rho_plus, self.rho_minus);
        let num = 2.0 * sg * sg * s * s * (rm - rp);
        let k = sg * sg * s * (rp - rm) * (s * rp + s * rm - 2.0);
        let p2 = self.pixel_pitch * self.pixel_pitch;
        let den = (eta_plus_px * eta_plus_px - eta_minus_px * eta_minus_px) * p2 - k;
        T::cst(num) / den
    }

    pub fn in_range(&self, z: f64) -> bool {
        z >= self.z_min && z <= self.z_max
    }
}

/// Thin-lens defocus SD in sensor length units; may be negative.
pub fn defocus_sigma(z: f64, sigma_aperture: f64, rho: f64, s: f64) -> f64 {
    sigma_aperture * ((1.0 / z - rho) * s + 1.0)
}

pub fn combined_smoothness(sigma: f64, xi: f64) -> f64 {
    sigma.hypot(xi)
}

/// Raw depth from the closed-form inversion plus whether it lies in the working range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Depth {
    pub z: f64,
    pub valid: bool,
}

/// Closed-form depth from smoothness values given in sensor length units.
pub fn depth_from_smoothness(eta_plus: f64, eta_minus: f64, cfg: &OpticsConfig) -> Result<Depth> {
    let (sg, s, rp, rm) = (cfg.sigma_aperture, cfg.s, cfg.rho_plus, cfg.rho_minus);
    let num = 2.0 * sg * sg * s * s * (rm - rp);
    let den = eta_plus * eta_plus - eta_minus * eta_minus - sg * sg * s * (rp - rm) * (s * rp + s * rm - 2.0);
    if den.abs() < 1e-15 {
        return Err(Error::SingularOptics(format!("depth denominator {den:e} vanishes")));
    }
    let z = num / den;
    Ok(Depth {
        z,
        valid: cfg.in_range(z),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConstants {
    /// Exposure (s).
    pub t: f64,
    #[serde(rename = "QE", alias = "qe")]
    pub qe: f64,
    /// Wavelength (m).
    #[serde(rename = "λ_G", alias = "lambda_g")]
    pub lambda_g: f64,
    /// Pixel area (m²).
    #[serde(rename = "A_pix", alias = "a_pix")]
    pub a_pix: f64,
    #[serde(rename = "f-number", alias = "f_number")]
    pub f_number: f64,
    #[serde(rename = "K_m", alias = "k_m")]
    pub k_m: f64,
    #[serde(rename = "V(λ_G)", alias = "v")]
    pub v: f64,
    pub h: f64,
    pub c_light: f64,
}

impl Default for CameraConstants {
    fn default() -> Self {
        Self {
            t: 1.0 / 200.0,
            qe: 0.73,
            lambda_g: 532e-9,
            a_pix: 5.93e-6 * 5.93e-6,
            f_number: 5.6,
            k_m: 683.0,
            v: 0.83,
            h: 6.626e-34,
            c_light: 3e8,
        }
    }
}

impl CameraConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.t,
            self.qe,
            self.lambda_g,
            self.a_pix,
            self.f_number,
            self.k_m,
            self.v,
            self.h,
            self.c_light,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("camera constants must be finite and positive".into()))
        }
    }
}

/// Noise SD in 8-bit LSB for photon level `alpha` and read noise `sigma_read`.
pub fn noise_sd_lsb(alpha: f64, sigma_read: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("photon level must be positive, got {alpha}")));
    }
    Ok(255.0 * (alpha + sigma_read * sigma_read).sqrt() / alpha)
}

/// Scene illuminance (lux) at which the sensor collects `alpha` photons at full scale.
pub fn illuminance_lux(alpha: f64, cc: &CameraConstants) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("photon level must be positive, got {alpha}")));
    }
    let geometric = 8.0 * cc.f_number * cc.f_number / cc.a_pix;
    let photons = alpha / (cc.t * cc.qe);
    let energy = cc.h * cc.c_light / cc.lambda_g;
    Ok(geometric * photons * energy * cc.k_m * cc.v)
}
