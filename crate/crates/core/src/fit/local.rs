//! Independent per-image fit of one patch.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::{self, LmResult, Problem};
use super::params::{Geometry, ParamBox};
use super::FitConfig;
use crate::error::{Error, Result};
use crate::geometry::{Heaviside, Wedge, WedgeGeom, WedgePatch};
use crate::grid::{Field, Rgb, RgbField};
use crate::real::Real;
use crate::render::{composite, rasterize, rasterize_collective, sobel, RidgeSystem};
use crate::synth::mix_seed;

/// Target of a patch fit: colours, their Sobel magnitude and optionally the
/// distance to the true boundary (capped at the patch side).
#[derive(Clone, Debug)]
pub struct PatchTarget {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Rgb>,
    pub derivative: Vec<f64>,
    pub ustar: Option<Vec<f64>>,
}

impl PatchTarget {
    pub fn new(patch: &RgbField, ustar: Option<&Field>) -> Self {
        let (w, h) = (patch.width, patch.height);
        let cap = w.max(h) as f64;
        Self {
            width: w,
            height: h,
            color: patch.data.clone(),
            derivative: sobel(&patch.data, w, h),
            ustar: ustar.map(|u| u.data.iter().map(|&v| v.min(cap)).collect()),
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Shared settings of the local residuals.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LocalTerms {
    pub beta: [f64; 3],
    pub delta: f64,
    pub lambda: f64,
    pub w_scale: f64,
    pub heaviside: Heaviside,
}

impl LocalTerms {
    pub fn from_config(cfg: &FitConfig) -> Self {
        Self {
            beta: cfg.weights.beta,
            delta: cfg.delta,
            lambda: cfg.lambda,
            w_scale: cfg.w_scale,
            heaviside: Heaviside::SURROGATE,
        }
    }

    fn uses_boundary(&self, t: &PatchTarget) -> bool {
        self.beta[2] > 0.0 && t.ustar.is_some()
    }

    pub fn num_residuals(&self, t: &PatchTarget) -> usize {
        let n = t.pixels();
        3 * n + if self.beta[1] > 0.0 { n } else { 0 } + if self.uses_boundary(t) { n } else { 0 }
    }
}

/// Pushes the weighted local residuals; colours are solved by ridge
/// regression when not given.
pub(crate) fn local_residuals<T: Real>(
    geoms: &[WedgeGeom<T>],
    etas: &[T],
    colors: Option<&[[T; 3]]>,
    t: &PatchTarget,
    terms: &LocalTerms,
    out: &mut Vec<T>,
) {
    let (w, h) = (t.width, t.height);
    let npx = t.pixels() as f64;
    let boundary = terms.uses_boundary(t);
    let layers = if boundary {
        rasterize(geoms, etas, w, h, terms.w_scale, terms.delta, terms.heaviside)
    } else {
        rasterize_collective(geoms, etas, w, h, terms.w_scale)
    };
    let solved;
    let colors = match colors {
        Some(c) => c,
        None => {
            let mut sys = RidgeSystem::new(geoms.len() + 1);
            sys.add_layers(&layers, &t.color);
            match sys.solve(terms.lambda) {
                Ok(c) => {
                    solved = c;
                    &solved[..]
                }
                Err(_) => {
                    let m = terms.num_residuals(t);
                    out.extend(std::iter::repeat(T::cst(f64::NAN)).take(m));
                    return;
                }
            }
        }
    };
    let c = composite(&layers, colors);
    let s1 = (terms.beta[0] / npx).sqrt();
    for (ck, pk) in c.iter().zip(&t.color) {
        for ch in 0..3 {
            out.push((ck[ch] - pk[ch]) * s1);
        }
    }
    if terms.beta[1] > 0.0 {
        let s2 = (terms.beta[1] / npx).sqrt();
        let cd = sobel(&c, w, h);
        out.extend(cd.iter().zip(&t.derivative).map(|(&a, &b)| (a - b) * s2));
    }
    if boundary {
        let ustar = t.ustar.as_deref().unwrap_or_default();
        for (&b, &u) in layers.boundary.iter().zip(ustar) {
            out.push(b.sqrt() * (terms.beta[2] * u / npx).sqrt());
        }
    }
}

/// Local objective of a wedge patch with its own colours, using exact steps.
pub fn local_loss(
    patch: &WedgePatch,
    target: &RgbField,
    target_derivative: &Field,
    ustar: Option<&Field>,
    beta: [f64; 3],
    delta: f64,
) -> Result<f64> {
    if target.width != patch.width || target.height != patch.height || !target.same_shape(target_derivative) {
        return Err(Error::Shape("targets must match the patch size".into()));
    }
    if ustar.is_some_and(|u| !u.same_shape(target)) {
        return Err(Error::Shape(
            "boundary-distance target must match the patch size".into(),
        ));
    }
    let t = PatchTarget {
        width: target.width,
        height: target.height,
        color: target.data.clone(),
        derivative: target_derivative.data.clone(),
        ustar: ustar.map(|u| u.data.clone()),
    };
    let terms = LocalTerms {
        beta,
        delta,
        lambda: 0.0,
        w_scale: 1.0,
        heaviside: Heaviside::Exact,
    };
    let geoms = patch.geoms();
    let etas: Vec<f64> = patch.wedges.iter().map(|w| w.eta).collect();
    let mut colors = vec![patch.background];
    colors.extend(patch.wedges.iter().map(|w| w.color));
    let mut r = Vec::new();
    local_residuals(&geoms, &etas, Some(&colors), &t, &terms, &mut r);
    Ok(r.iter().map(|v| v * v).sum())
}

/// Fit problem over `l` wedges: `[qx, qy, θ1, qΔ, qη]` per wedge.
pub struct LocalProblem<'a> {
    target: &'a PatchTarget,
    terms: LocalTerms,
    pbox: ParamBox,
    wedges: usize,
}

impl Problem for LocalProblem<'_> {
    fn num_params(&self) -> usize {
        5 * self.wedges
    }

    fn num_residuals(&self) -> usize {
        self.terms.num_residuals(self.target)
    }

    fn residuals<T: Real>(&self, x: &[T], out: &mut Vec<T>) {
        let geoms: Vec<WedgeGeom<T>> = x.chunks_exact(5).map(|q| self.pbox.geom(q)).collect();
        let etas: Vec<T> = x.chunks_exact(5).map(|q| self.pbox.eta(q[4])).collect();
        local_residuals(&geoms, &etas, None, self.target, &self.terms, out);
    }
}

impl<'a> LocalProblem<'a> {
    /// The smoothed objective the local fitter minimizes, over `wedges` wedges.
    pub fn new(target: &'a PatchTarget, cfg: &FitConfig, wedges: usize) -> Self {
        Self {
            target,
            terms: LocalTerms::from_config(cfg),
            pbox: cfg.param_box(),
            wedges,
        }
    }

    fn encode(&self, wedges: &[LocalWedge]) -> Vec<f64> {
        wedges
            .iter()
            .flat_map(|w| {
                let g = self.pbox.encode_geometry(&w.geometry);
                [g[0], g[1], g[2], g[3], self.pbox.encode_eta(w.eta)]
            })
            .collect()
    }

    fn decode(&self, x: &[f64]) -> Vec<LocalWedge> {
        x.chunks_exact(5)
            .map(|q| LocalWedge {
                geometry: self.pbox.decode_geometry(q),
                eta: self.pbox.eta(q[4]),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalWedge {
    pub geometry: Geometry,
    pub eta: f64,
}

/// Result of fitting one patch of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalFit {
    /// Active wedges, back to front; empty for a flat patch.
    pub wedges: Vec<LocalWedge>,
    /// Background colour followed by one colour per wedge.
    pub colors: Vec<Rgb>,
    pub loss: f64,
    /// Final loss of every restart in the order they were run.
    pub restart_losses: Vec<f64>,
    /// Loss trace of the restart that produced the returned model.
    pub trace: Vec<f64>,
}

impl LocalFit {
    /// Full wedge-patch view. A flat fit is exported as one wedge parked
    /// outside the patch with the background colour.
    pub fn to_wedge_patch(&self, width: usize, height: usize) -> WedgePatch {
        let wedges = if self.wedges.is_empty() {
            vec![parked_wedge(width, height, self.colors[0])]
        } else {
            self.wedges
                .iter()
                .zip(&self.colors[1..])
                .map(|(w, &c)| Wedge {
                    vertex: w.geometry.vertex,
                    angles: [w.geometry.theta1, w.geometry.theta2()],
                    color: c,
                    eta: w.eta,
                })
                .collect()
        };
        WedgePatch {
            wedges,
            background: self.colors[0],
            width,
            height,
        }
    }
}

/// A wedge at the corner of the dilated box whose rays point away from the patch.
pub(crate) fn parked_wedge(width: usize, height: usize, color: Rgb) -> Wedge {
    Wedge {
        vertex: [-(width as f64), -(height as f64)],
        angles: [PI + 0.2, 1.5 * PI - 0.2],
        color,
        eta: 1.0,
    }
}

/// Total variance and the noise variance predicted by pixel differences.
fn patch_variances(color: &[Rgb], width: usize, height: usize) -> (f64, f64) {
    let n = color.len() as f64;
    let mut var = 0.0;
    for ch in 0..3 {
        let mean = color.iter().map(|c| c[ch]).sum::<f64>() / n;
        var += color.iter().map(|c| (c[ch] - mean).powi(2)).sum::<f64>() / n;
    }
    let mut diff = 0.0;
    let mut count = 0usize;
    for y in 0..height {
        for x in 0..width {
            let a = color[y * width + x];
            if x + 1 < width {
                let b = color[y * width + x + 1];
                diff += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
                count += 1;
            }
            if y + 1 < height {
                let b = color[(y + 1) * width + x];
                diff += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
                count += 1;
            }
        }
    }
    (var, if count > 0 { diff / (2.0 * count as f64) } else { 0.0 })
}

/// Whether a patch holds no edge worth fitting.
pub fn is_flat(target: &PatchTarget, flat_factor: f64) -> bool {
    let (var, noise) = patch_variances(&target.color, target.width, target.height);
    var <= flat_factor * noise + 1e-6
}

/// Half-plane through the gradient-weighted centroid along the dominant edge direction.
fn edge_init(t: &PatchTarget) -> Geometry {
    let (w, h) = (t.width, t.height);
    let at = |x: usize, y: usize| t.color[y * w + x];
    let (mut jxx, mut jxy, mut jyy, mut sw, mut cx, mut cy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let mut gxx = 0.0;
            let mut gxy = 0.0;
            let mut gyy = 0.0;
            for ch in 0..3 {
                let gx = (at(xr, y)[ch] - at(xl, y)[ch]) / (xr - xl).max(1) as f64;
                let gy = (at(x, yd)[ch] - at(x, yu)[ch]) / (yd - yu).max(1) as f64;
                gxx += gx * gx;
                gxy += gx * gy;
                gyy += gy * gy;
            }
            let m = gxx + gyy;
            jxx += gxx;
            jxy += gxy;
            jyy += gyy;
            sw += m;
            cx += m * (x as f64 + 0.5);
            cy += m * (y as f64 + 0.5);
        }
    }
    if sw <= 0.0 {
        return Geometry::half_plane([w as f64 / 2.0, h as f64 / 2.0], 0.0);
    }
    // orientation of the dominant gradient; the edge runs perpendicular to it
    let normal = 0.5 * (2.0 * jxy).atan2(jxx - jyy);
    Geometry::half_plane([cx / sw, cy / sw], normal + PI / 2.0)
}

fn random_geometry(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Geometry {
    Geometry {
        vertex: [rng.gen_range(0.0..w), rng.gen_range(0.0..h)],
        theta1: rng.gen_range(0.0..TAU),
        width: rng.gen_range(0.3..TAU - 0.3),
    }
}

/// Initial smoothness of every restart (px).
const ETA_INIT: f64 = 1.5;

struct Candidate {
    wedges: Vec<LocalWedge>,
    result: LmResult,
}

/// Fits one image patch by multi-start optimization with model selection
/// over the wedge count.
pub fn fit_patch_local_single(target: &PatchTarget, cfg: &FitConfig, seed: u64) -> Result<LocalFit> {
    let terms = LocalTerms::from_config(cfg);
    let pbox = cfg.param_box();
    let (w, h) = (target.width as f64, target.height as f64);
    let flat = flat_fit(target, &terms);
    let (var, noise) = patch_variances(&target.color, target.width, target.height);
    if var <= cfg.flat_factor * noise + 1e-6 {
        return Ok(flat);
    }
    // smallest loss improvement that justifies another wedge
    let min_gain = cfg.min_gain * flat.loss;
    // a fit this close to the noise floor leaves nothing for more wedges;
    // pure noise adds 24 times its variance to the squared Sobel magnitude
    let good_enough = min_gain + (terms.beta[0] + 24.0 * terms.beta[1]) * noise;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stage_restarts = split_restarts(cfg.restarts, cfg.max_wedges);
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    let mut best: Vec<Option<Candidate>> = Vec::with_capacity(cfg.max_wedges);
    for (stage, &count) in stage_restarts.iter().enumerate() {
        let l = stage + 1;
        let problem = LocalProblem {
            target,
            terms,
            pbox,
            wedges: l,
        };
        let prev = best
            .last()
            .and_then(|b: &Option<Candidate>| b.as_ref())
            .map(|c| c.wedges.clone());
        let mut stage_best: Option<Candidate> = None;
        for r in 0..count {
            let init: Vec<LocalWedge> = match (&prev, r) {
                (None, 0) => vec![LocalWedge {
                    geometry: edge_init(target),
                    eta: ETA_INIT,
                }],
                (Some(p), r) if r < count.div_ceil(2) => {
                    let extra = LocalWedge {
                        geometry: random_geometry(&mut rng, w, h),
                        eta: ETA_INIT,
                    };
                    let mut v = p.clone();
                    if r % 2 == 0 {
                        v.push(extra);
                    } else {
                        v.insert(0, extra);
                    }
                    v
                }
                _ => (0..l)
                    .map(|_| LocalWedge {
                        geometry: random_geometry(&mut rng, w, h),
                        eta: ETA_INIT,
                    })
                    .collect(),
            };
            let res = lm::minimize(&problem, &problem.encode(&init), &cfg.local_lm);
            restart_losses.push(res.loss);
            if !res.loss.is_finite() {
                continue;
            }
            if stage_best.as_ref().map_or(true, |b| res.loss < b.result.loss) {
                stage_best = Some(Candidate {
                    wedges: problem.decode(&res.x),
                    result: res,
                });
            }
        }
        let done = stage_best.as_ref().is_some_and(|b| b.result.loss <= good_enough);
        best.push(stage_best);
        if done {
            break;
        }
    }
    // smallest model whose loss is not beaten by a larger one beyond the penalty
    let m = terms.num_residuals(target) as f64;
    let mut chosen: Option<&Candidate> = None;
    for cand in best.iter().flatten() {
        chosen = match chosen {
            None => Some(cand),
            Some(cur) => {
                let extra = 8.0 * (cand.wedges.len() - cur.wedges.len()) as f64;
                let bar = cand.result.loss * (1.0 + cfg.model_penalty * extra * m.ln() / m) + 1e-7;
                if cur.result.loss > bar && cur.result.loss - cand.result.loss > min_gain {
                    Some(cand)
                } else {
                    Some(cur)
                }
            }
        };
    }
    let chosen = chosen.ok_or(Error::AllRestartsDegenerate {
        restarts: restart_losses.len(),
    })?;
    let mut wedges = chosen.wedges.clone();
    let mut colors = solve_colors(&wedges, target, &terms)?;
    if wedges.len() == 1 && wedges[0].geometry.is_reflex() {
        wedges[0].geometry = wedges[0].geometry.complement();
        colors.swap(0, 1);
    }
    Ok(LocalFit {
        wedges,
        colors,
        loss: chosen.result.loss,
        restart_losses,
        trace: chosen.result.trace.clone(),
    })
}

fn split_restarts(total: usize, max_wedges: usize) -> Vec<usize> {
    if max_wedges == 1 || total < 2 {
        return vec![total];
    }
    let first = ((total * 3) / 8).max(1);
    let rest = total - first;
    let stages = max_wedges - 1;
    let mut v = vec![first];
    v.extend((0..stages).map(|i| rest / stages + usize::from(i < rest % stages)));
    v
}

fn flat_fit(target: &PatchTarget, terms: &LocalTerms) -> LocalFit {
    let n = target.pixels() as f64;
    let mut mean = [0.0; 3];
    for c in &target.color {
        for ch in 0..3 {
            mean[ch] += c[ch] / n;
        }
    }
    let mut r = Vec::new();
    local_residuals::<f64>(&[], &[], Some(&[mean]), target, terms, &mut r);
    let loss = r.iter().map(|v| v * v).sum();
    LocalFit {
        wedges: Vec::new(),
        colors: vec![mean],
        loss,
        restart_losses: Vec::new(),
        trace: vec![loss],
    }
}

pub(crate) fn solve_colors(wedges: &[LocalWedge], target: &PatchTarget, terms: &LocalTerms) -> Result<Vec<Rgb>> {
    let geoms: Vec<WedgeGeom<f64>> = wedges.iter().map(|w| w.geometry.to_geom()).collect();
    let etas: Vec<f64> = wedges.iter().map(|w| w.eta).collect();
    let layers = rasterize_collective(&geoms, &etas, target.width, target.height, terms.w_scale);
    let mut sys = RidgeSystem::new(wedges.len() + 1);
    sys.add_layers(&layers, &target.color);
    sys.solve(terms.lambda)
}

/// Fits both images of a patch independently.
pub fn fit_patch_local(
    plus: &PatchTarget,
    minus: &PatchTarget,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(LocalFit, LocalFit)> {
    Ok((
        fit_patch_local_single(plus, cfg, mix_seed(seed, 0, 0x10ca1))?,
        fit_patch_local_single(minus, cfg, mix_seed(seed, 1, 0x10ca1))?,
    ))
}
