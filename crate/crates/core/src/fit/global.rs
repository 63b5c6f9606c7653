//! Joint refinement of all patches of an image pair under shared geometry.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::lm::{self, LmOptions, Problem};
use super::local::{parked_wedge, LocalFit, LocalWedge, PatchTarget};
use super::params::{Geometry, ParamBox};
use super::{FitConfig, PatchGrid};
use crate::error::{Error, Result};
use crate::geometry::{pixel_geometry, Heaviside, Wedge, WedgeGeom, WedgePatch};
use crate::grid::{pixel_center, Field, Rgb, RgbField};
use crate::optics::{OpticsConfig, Power};
use crate::par::Exec;
use crate::real::Real;
use crate::render::{composite, rasterize, rasterize_collective, sobel, RidgeSystem};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistentWedge {
    pub geometry: Geometry,
    /// Smoothness in the `+` and `−` image (px).
    pub eta: [f64; 2],
}

/// One patch with geometry and colours shared by both images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistentPatch {
    pub origin: [usize; 2],
    pub size: usize,
    /// Active wedges, back to front.
    pub wedges: Vec<ConsistentWedge>,
    /// Background colour followed by one colour per wedge.
    pub colors: Vec<Rgb>,
    pub loss: f64,
    pub seed: u64,
}

/// Per-patch rasters of a consistent patch.
#[derive(Clone, Debug)]
pub struct PatchRender {
    pub wedges: usize,
    pub boundary: Vec<f64>,
    /// `wedges` unoccluded masks per pixel.
    pub masks: Vec<f64>,
    pub color: [Vec<Rgb>; 2],
    pub derivative: [Vec<f64>; 2],
}

impl ConsistentPatch {
    fn geoms(&self) -> Vec<WedgeGeom<f64>> {
        self.wedges.iter().map(|w| w.geometry.to_geom()).collect()
    }

    fn etas(&self, k: usize) -> Vec<f64> {
        self.wedges.iter().map(|w| w.eta[k]).collect()
    }

    pub fn render(&self, cfg: &FitConfig, heaviside: Heaviside) -> PatchRender {
        self.render_with_eta(cfg, heaviside, None)
    }

    /// Renders with every smoothness replaced by `eta` when given.
    pub fn render_with_eta(&self, cfg: &FitConfig, heaviside: Heaviside, eta: Option<f64>) -> PatchRender {
        let geoms = self.geoms();
        let n = self.size;
        let images = [0, 1].map(|k| {
            let etas = match eta {
                Some(e) => vec![e; self.wedges.len()],
                None => self.etas(k),
            };
            rasterize(&geoms, &etas, n, n, cfg.w_scale, cfg.delta, heaviside)
        });
        let color = [0, 1].map(|k| composite(&images[k], &self.colors));
        let derivative = [0, 1].map(|k| sobel(&color[k], n, n));
        let [plus, _] = images;
        PatchRender {
            wedges: self.wedges.len(),
            boundary: plus.boundary,
            masks: plus.masks,
            color,
            derivative,
        }
    }

    /// Wedge-patch view of one image.
    pub fn wedge_patch(&self, power: Power) -> WedgePatch {
        let k = power_index(power);
        let wedges = if self.wedges.is_empty() {
            vec![parked_wedge(self.size, self.size, self.colors[0])]
        } else {
            self.wedges
                .iter()
                .zip(&self.colors[1..])
                .map(|(w, &c)| Wedge {
                    vertex: w.geometry.vertex,
                    angles: [w.geometry.theta1, w.geometry.theta2()],
                    color: c,
                    eta: w.eta[k],
                })
                .collect()
        };
        WedgePatch {
            wedges,
            background: self.colors[0],
            width: self.size,
            height: self.size,
        }
    }

    /// Pixels (patch-local, row-major) within `radius` of each wedge's own
    /// visible boundary.
    pub fn own_boundary(&self, w_scale: f64, radius: f64) -> Vec<Vec<usize>> {
        let geoms = self.geoms();
        let l = geoms.len();
        let mut out = vec![Vec::new(); l];
        for yi in 0..self.size {
            for xi in 0..self.size {
                let (x, y) = pixel_center(xi, yi);
                let g = pixel_geometry(&geoms, x, y, w_scale, Heaviside::Exact);
                // the nearest visible boundary belongs to the last wedge attaining u
                if let Some(i) = (0..l).rev().find(|&i| g.d[i].abs() == g.u) {
                    if g.u < radius {
                        out[i].push(yi * self.size + xi);
                    }
                }
            }
        }
        out
    }

    /// How far (px) each pixel centre lies inside each wedge's visible
    /// region; negative outside. Stored `wedges` values per pixel.
    pub fn side_clearance(&self, w_scale: f64) -> Vec<f64> {
        let geoms = self.geoms();
        let l = geoms.len();
        let mut out = Vec::with_capacity(self.size * self.size * l);
        for yi in 0..self.size {
            for xi in 0..self.size {
                let (x, y) = pixel_center(xi, yi);
                let d: Vec<f64> = geoms.iter().map(|g| g.signed_distance(x, y, w_scale)).collect();
                for i in 0..l {
                    out.push(d[i + 1..].iter().fold(d[i], |c, &dj| c.min(-dj)));
                }
            }
        }
        out
    }

    /// Approximate visible length (px) of each wedge's own boundary.
    pub fn visible_boundary(&self, w_scale: f64) -> Vec<f64> {
        self.own_boundary(w_scale, 0.5).iter().map(|v| v.len() as f64).collect()
    }

    /// Whether each wedge's geometry supports a depth estimate: enough
    /// visible boundary and no sharp corner inside the patch.
    pub fn depth_support(&self, cfg: &FitConfig) -> Vec<bool> {
        let size = self.size as f64;
        self.wedges
            .iter()
            .zip(self.visible_boundary(cfg.w_scale))
            .map(|(w, vis)| {
                // the blurred corner reaches a few smoothness lengths past the vertex
                let reach = 2.0 * w.eta[0].max(w.eta[1]);
                let [vx, vy] = w.geometry.vertex;
                let corner = (-reach..=size + reach).contains(&vx)
                    && (-reach..=size + reach).contains(&vy)
                    && (PI - w.geometry.width).abs() > cfg.max_corner_bend;
                !corner && vis >= cfg.min_visible_boundary
            })
            .collect()
    }

    /// Depth of each wedge, `None` when out of range, singular or without
    /// geometric support.
    pub fn wedge_depths(&self, cfg: &FitConfig, optics: &OpticsConfig) -> Vec<Option<f64>> {
        self.wedges
            .iter()
            .zip(self.depth_support(cfg))
            .map(|(w, ok)| {
                let d = optics.depth(w.eta[0], w.eta[1]).ok()?;
                (ok && d.valid).then_some(d.z)
            })
            .collect()
    }
}

fn power_index(p: Power) -> usize {
    match p {
        Power::Plus => 0,
        Power::Minus => 1,
    }
}

/// Images and optional supervision targets of a pair.
#[derive(Clone, Copy, Debug)]
pub struct GlobalTargets<'a> {
    pub images: [&'a RgbField; 2],
    pub ustar: Option<&'a Field>,
    pub zstar: Option<&'a Field>,
}

impl GlobalTargets<'_> {
    pub fn patch_target(&self, k: usize, origin: [usize; 2], size: usize) -> PatchTarget {
        let crop = self.images[k].crop(origin[0], origin[1], size, size);
        let u = self.ustar.map(|u| u.crop(origin[0], origin[1], size, size));
        PatchTarget::new(&crop, u.as_ref())
    }
}

/// Global maps with `B`, `C±` and the mean per-patch derivative `C′±`.
#[derive(Clone, Debug)]
pub struct ConsistencyMaps {
    pub width: usize,
    pub height: usize,
    pub boundary: Vec<f64>,
    pub color: [Vec<Rgb>; 2],
    pub derivative: [Vec<f64>; 2],
}

/// Patches rendered per parallel batch while accumulating maps.
const RENDER_BATCH: usize = 256;

impl ConsistencyMaps {
    pub fn build(patches: &[ConsistentPatch], grid: &PatchGrid, cfg: &FitConfig, exec: Exec) -> Self {
        let (w, h) = (grid.image_width, grid.image_height);
        let npx = w * h;
        let mut count = vec![0u32; npx];
        let mut boundary = vec![0.0; npx];
        let mut color = [vec![[0.0; 3]; npx], vec![[0.0; 3]; npx]];
        let mut derivative = [vec![0.0; npx], vec![0.0; npx]];
        for chunk in patches.chunks(RENDER_BATCH) {
            let renders = exec.map(chunk, |p| p.render(cfg, Heaviside::SURROGATE));
            for (p, r) in chunk.iter().zip(&renders) {
                let [x0, y0] = p.origin;
                for py in 0..p.size {
                    for px in 0..p.size {
                        let k = py * p.size + px;
                        let g = (y0 + py) * w + x0 + px;
                        count[g] += 1;
                        boundary[g] += r.boundary[k];
                        for s in 0..2 {
                            for ch in 0..3 {
                                color[s][g][ch] += r.color[s][k][ch];
                            }
                            derivative[s][g] += r.derivative[s][k];
                        }
                    }
                }
            }
        }
        for g in 0..npx {
            let n = count[g].max(1) as f64;
            boundary[g] /= n;
            for s in 0..2 {
                for ch in 0..3 {
                    color[s][g][ch] /= n;
                }
                derivative[s][g] /= n;
            }
        }
        Self {
            width: w,
            height: h,
            boundary,
            color,
            derivative,
        }
    }

    fn crop<T: Copy>(&self, v: &[T], origin: [usize; 2], size: usize) -> Vec<T> {
        (0..size)
            .flat_map(|y| {
                let row = (origin[1] + y) * self.width + origin[0];
                v[row..row + size].iter().copied()
            })
            .collect()
    }
}

/// Frozen global maps restricted to one patch.
#[derive(Clone, Debug)]
pub struct MapCrops {
    pub boundary: Vec<f64>,
    pub color: [Vec<Rgb>; 2],
    pub derivative: [Vec<f64>; 2],
}

/// Everything one patch's global objective reads.
#[derive(Clone, Debug)]
pub struct GlobalContext {
    pub targets: [PatchTarget; 2],
    pub zstar: Option<Vec<f64>>,
    pub maps: Option<MapCrops>,
}

impl GlobalContext {
    pub fn new(targets: &GlobalTargets, maps: Option<&ConsistencyMaps>, origin: [usize; 2], size: usize) -> Self {
        Self {
            targets: [0, 1].map(|k| targets.patch_target(k, origin, size)),
            zstar: targets.zstar.map(|z| z.crop(origin[0], origin[1], size, size).data),
            maps: maps.map(|m| MapCrops {
                boundary: m.crop(&m.boundary, origin, size),
                color: [0, 1].map(|s| m.crop(&m.color[s], origin, size)),
                derivative: [0, 1].map(|s| m.crop(&m.derivative[s], origin, size)),
            }),
        }
    }

    fn pixels(&self) -> usize {
        self.targets[0].pixels()
    }
}

/// Which global terms are live for a given weight vector and context.
#[derive(Clone, Copy, Debug)]
struct Active {
    g: [bool; 8],
}

impl Active {
    fn new(gamma: &[f64; 8], ctx: &GlobalContext) -> Self {
        let maps = ctx.maps.is_some();
        let u = ctx.targets[0].ustar.is_some();
        let z = ctx.zstar.is_some();
        let avail = [true, maps, maps, true, maps, u, z, z];
        Self {
            g: std::array::from_fn(|i| gamma[i] > 0.0 && avail[i]),
        }
    }

    fn num_residuals(&self, n: usize) -> usize {
        let per = [6 * n, 6 * n, n, 2 * n, 2 * n, n, n, n];
        (0..8).filter(|&i| self.g[i]).map(|i| per[i]).sum()
    }

    fn needs_boundary(&self) -> bool {
        self.g[2] || self.g[5] || self.g[6] || self.g[7]
    }

    fn needs_derivative(&self) -> bool {
        self.g[3] || self.g[4]
    }
}

/// Shared settings of the global residuals.
struct GlobalTerms<'a> {
    gamma: [f64; 8],
    active: Active,
    cfg: &'a FitConfig,
    optics: &'a OpticsConfig,
}

fn global_residuals<T: Real>(
    geoms: &[WedgeGeom<T>],
    etas: [&[T]; 2],
    colors: Option<&[[T; 3]]>,
    ctx: &GlobalContext,
    terms: &GlobalTerms,
    out: &mut Vec<T>,
) {
    let n = ctx.pixels();
    let size = ctx.targets[0].width;
    let cfg = terms.cfg;
    let act = terms.active;
    let npx = n as f64;
    let plus = if act.needs_boundary() {
        rasterize(geoms, etas[0], size, size, cfg.w_scale, cfg.delta, Heaviside::SURROGATE)
    } else {
        rasterize_collective(geoms, etas[0], size, size, cfg.w_scale)
    };
    let minus = rasterize_collective(geoms, etas[1], size, size, cfg.w_scale);
    let layers = [&plus, &minus];
    let solved;
    let colors = match colors {
        Some(c) => c,
        None => {
            let mut sys = RidgeSystem::new(geoms.len() + 1);
            for k in 0..2 {
                sys.add_layers(layers[k], &ctx.targets[k].color);
            }
            match sys.solve(cfg.lambda) {
                Ok(c) => {
                    solved = c;
                    &solved[..]
                }
                Err(_) => {
                    out.extend(std::iter::repeat(T::cst(f64::NAN)).take(act.num_residuals(n)));
                    return;
                }
            }
        }
    };
    let c = [composite(layers[0], colors), composite(layers[1], colors)];
    let g = &terms.gamma;
    // colour terms average over both images
    let half = |gi: f64| (gi / (2.0 * npx)).sqrt();
    if act.g[0] {
        let s = half(g[0]);
        for k in 0..2 {
            for (ck, pk) in c[k].iter().zip(&ctx.targets[k].color) {
                out.extend((0..3).map(|ch| (ck[ch] - pk[ch]) * s));
            }
        }
    }
    if act.g[1] {
        let s = half(g[1]);
        let maps = ctx.maps.as_ref().expect("maps present when active");
        for k in 0..2 {
            for (ck, mk) in c[k].iter().zip(&maps.color[k]) {
                out.extend((0..3).map(|ch| (ck[ch] - mk[ch]) * s));
            }
        }
    }
    if act.g[2] {
        let s = (g[2] / npx).sqrt();
        let maps = ctx.maps.as_ref().expect("maps present when active");
        out.extend(plus.boundary.iter().zip(&maps.boundary).map(|(&b, &m)| (b - m) * s));
    }
    if act.needs_derivative() {
        let cd = [sobel(&c[0], size, size), sobel(&c[1], size, size)];
        if act.g[3] {
            let s = half(g[3]);
            for k in 0..2 {
                out.extend(cd[k].iter().zip(&ctx.targets[k].derivative).map(|(&a, &b)| (a - b) * s));
            }
        }
        if act.g[4] {
            let s = half(g[4]);
            let maps = ctx.maps.as_ref().expect("maps present when active");
            for k in 0..2 {
                out.extend(cd[k].iter().zip(&maps.derivative[k]).map(|(&a, &b)| (a - b) * s));
            }
        }
    }
    if act.g[5] {
        let ustar = ctx.targets[0].ustar.as_deref().unwrap_or_default();
        out.extend(
            plus.boundary
                .iter()
                .zip(ustar)
                .map(|(&b, &u)| b.sqrt() * (g[5] * u / npx).sqrt()),
        );
    }
    if act.g[6] || act.g[7] {
        let zstar = ctx.zstar.as_deref().unwrap_or_default();
        let l = geoms.len();
        let z: Vec<T> = (0..l).map(|i| terms.optics.depth_px(etas[0][i], etas[1][i])).collect();
        let h = Heaviside::SURROGATE;
        if act.g[6] {
            let s = (g[6] / npx).sqrt();
            for (k, &zs) in zstar.iter().enumerate() {
                if !zs.is_finite() {
                    out.push(T::zero());
                    continue;
                }
                let b = plus.boundary[k];
                let mut r = T::zero();
                for i in 0..l {
                    r += h.eval(b * plus.mask(k, i) - cfg.tau) * (z[i] - zs);
                }
                out.push(r * s);
            }
        }
        if act.g[7] {
            let s = (g[7] / npx).sqrt();
            for (k, &zs) in zstar.iter().enumerate() {
                if !zs.is_finite() {
                    out.push(T::zero());
                    continue;
                }
                let mut r = T::zero();
                for i in 0..l {
                    r += plus.mask(k, i) * (z[i] - zs);
                }
                out.push(r * s);
            }
        }
    }
}

/// Per-patch global problem over `[qx, qy, θ1, qΔ, qη+, qη−]` per wedge.
/// Objective of one patch with shared geometry: `[qx, qy, θ1, qΔ, qη+, qη−]`
/// per wedge, colours solved in closed form.
pub struct GlobalProblem<'a> {
    ctx: &'a GlobalContext,
    terms: GlobalTerms<'a>,
    pbox: ParamBox,
    wedges: usize,
}

impl Problem for GlobalProblem<'_> {
    fn num_params(&self) -> usize {
        6 * self.wedges
    }

    fn num_residuals(&self) -> usize {
        self.terms.active.num_residuals(self.ctx.pixels())
    }

    fn residuals<T: Real>(&self, x: &[T], out: &mut Vec<T>) {
        let geoms: Vec<WedgeGeom<T>> = x.chunks_exact(6).map(|q| self.pbox.geom(q)).collect();
        let ep: Vec<T> = x.chunks_exact(6).map(|q| self.pbox.eta(q[4])).collect();
        let em: Vec<T> = x.chunks_exact(6).map(|q| self.pbox.eta(q[5])).collect();
        global_residuals(&geoms, [&ep, &em], None, self.ctx, &self.terms, out);
    }
}

impl<'a> GlobalProblem<'a> {
    pub fn new(
        ctx: &'a GlobalContext,
        gamma: [f64; 8],
        wedges: usize,
        cfg: &'a FitConfig,
        optics: &'a OpticsConfig,
    ) -> Self {
        Self {
            ctx,
            terms: GlobalTerms {
                gamma,
                active: Active::new(&gamma, ctx),
                cfg,
                optics,
            },
            pbox: cfg.param_box(),
            wedges,
        }
    }

    fn encode(&self, wedges: &[ConsistentWedge]) -> Vec<f64> {
        wedges
            .iter()
            .flat_map(|w| {
                let g = self.pbox.encode_geometry(&w.geometry);
                [
                    g[0],
                    g[1],
                    g[2],
                    g[3],
                    self.pbox.encode_eta(w.eta[0]),
                    self.pbox.encode_eta(w.eta[1]),
                ]
            })
            .collect()
    }

    fn decode(&self, x: &[f64]) -> Vec<ConsistentWedge> {
        x.chunks_exact(6)
            .map(|q| ConsistentWedge {
                geometry: self.pbox.decode_geometry(q),
                eta: [self.pbox.eta(q[4]), self.pbox.eta(q[5])],
            })
            .collect()
    }

    fn solve_colors(&self, wedges: &[ConsistentWedge]) -> Result<Vec<Rgb>> {
        let cfg = self.terms.cfg;
        let geoms: Vec<WedgeGeom<f64>> = wedges.iter().map(|w| w.geometry.to_geom()).collect();
        let size = self.ctx.targets[0].width;
        let mut sys = RidgeSystem::new(wedges.len() + 1);
        for k in 0..2 {
            let etas: Vec<f64> = wedges.iter().map(|w| w.eta[k]).collect();
            let layers = rasterize_collective(&geoms, &etas, size, size, cfg.w_scale);
            sys.add_layers(&layers, &self.ctx.targets[k].color);
        }
        sys.solve(cfg.lambda)
    }

    /// Loss with explicit colours (used for patches that are not optimized).
    fn loss_with_colors(&self, wedges: &[ConsistentWedge], colors: &[Rgb]) -> f64 {
        let geoms: Vec<WedgeGeom<f64>> = wedges.iter().map(|w| w.geometry.to_geom()).collect();
        let ep: Vec<f64> = wedges.iter().map(|w| w.eta[0]).collect();
        let em: Vec<f64> = wedges.iter().map(|w| w.eta[1]).collect();
        let mut r = Vec::new();
        global_residuals(&geoms, [&ep, &em], Some(colors), self.ctx, &self.terms, &mut r);
        let s: f64 = r.iter().map(|v| v * v).sum();
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    }
}

/// Total global objective of a patch set: `Σ_m Σ_i γ_i g_i^m`, with the
/// global maps rebuilt from the patches themselves.
pub fn global_loss(
    patches: &[ConsistentPatch],
    grid: &PatchGrid,
    targets: &GlobalTargets,
    gamma: [f64; 8],
    cfg: &FitConfig,
    optics: &OpticsConfig,
    exec: Exec,
) -> f64 {
    let maps = ConsistencyMaps::build(patches, grid, cfg, exec);
    exec.map(patches, |p| {
        let ctx = GlobalContext::new(targets, Some(&maps), p.origin, p.size);
        GlobalProblem::new(&ctx, gamma, p.wedges.len(), cfg, optics).loss_with_colors(&p.wedges, &p.colors)
    })
    .iter()
    .sum()
}

/// Fraction of pixels on which two wedge geometries disagree, directly and
/// with the second one complemented.
fn disagreement(a: &Geometry, b: &Geometry, size: usize) -> (f64, f64) {
    let (ga, gb) = (a.to_geom(), b.to_geom());
    let mut same = 0usize;
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = pixel_center(xi, yi);
            let ia = ga.signed_distance(x, y, 1.0) >= 0.0;
            let ib = gb.signed_distance(x, y, 1.0) >= 0.0;
            same += usize::from(ia == ib);
        }
    }
    let n = (size * size) as f64;
    let diff = 1.0 - same as f64 / n;
    (diff, 1.0 - diff)
}

/// Largest disagreement still treated as the same wedge.
const MATCH_TOLERANCE: f64 = 0.15;

struct Matched {
    index: usize,
    complement: bool,
}

fn match_wedge(w: &LocalWedge, others: &[LocalWedge], size: usize) -> Option<Matched> {
    others
        .iter()
        .enumerate()
        .map(|(j, o)| {
            let (d, dc) = disagreement(&w.geometry, &o.geometry, size);
            (j, d.min(dc), dc < d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|m| m.1 <= MATCH_TOLERANCE)
        .map(|(index, _, complement)| Matched { index, complement })
}

fn circular_mean(a: f64, b: f64) -> f64 {
    (a.sin() + b.sin()).atan2(a.cos() + b.cos()).rem_euclid(TAU)
}

/// Candidate shared geometries built from fit `a` (image `ka`) and `b`.
fn candidates_from(a: &LocalFit, b: &LocalFit, ka: usize, size: usize) -> Vec<Vec<ConsistentWedge>> {
    let matches: Vec<Option<Matched>> = a.wedges.iter().map(|w| match_wedge(w, &b.wedges, size)).collect();
    let own: Vec<ConsistentWedge> = a
        .wedges
        .iter()
        .zip(&matches)
        .map(|(w, m)| {
            let other = m.as_ref().map_or(w.eta, |m| b.wedges[m.index].eta);
            let mut eta = [w.eta; 2];
            eta[1 - ka] = other;
            ConsistentWedge {
                geometry: w.geometry,
                eta,
            }
        })
        .collect();
    let mut out = vec![own.clone()];
    let one_to_one = a.wedges.len() == b.wedges.len()
        && matches
            .iter()
            .enumerate()
            .all(|(i, m)| m.as_ref().is_some_and(|m| m.index == i && !m.complement));
    if one_to_one && !a.wedges.is_empty() {
        let avg = own
            .iter()
            .zip(&b.wedges)
            .map(|(w, o)| {
                let (g, h) = (w.geometry, o.geometry);
                ConsistentWedge {
                    geometry: Geometry {
                        vertex: [0.5 * (g.vertex[0] + h.vertex[0]), 0.5 * (g.vertex[1] + h.vertex[1])],
                        theta1: circular_mean(g.theta1, h.theta1),
                        width: 0.5 * (g.width + h.width),
                    },
                    eta: w.eta,
                }
            })
            .collect();
        out.push(avg);
    }
    out
}

/// Builds the shared-geometry starting point of a patch from its two
/// independent fits: the averaged geometry or either fit's geometry,
/// whichever explains both images best.
pub fn initialize_consistent(
    fits: &(LocalFit, LocalFit),
    targets: &GlobalTargets,
    origin: [usize; 2],
    cfg: &FitConfig,
    optics: &OpticsConfig,
    seed: u64,
) -> Result<ConsistentPatch> {
    let size = cfg.patch_size;
    let ctx = GlobalContext::new(targets, None, origin, size);
    let (a, b) = fits;
    let mut cands = candidates_from(a, b, 0, size);
    cands.extend(candidates_from(b, a, 1, size));
    cands.push(Vec::new());
    let mut gamma = [0.0; 8];
    gamma[0] = 1.0;
    let mut best: Option<ConsistentPatch> = None;
    for wedges in cands {
        if wedges.is_empty() && !(a.wedges.is_empty() || b.wedges.is_empty()) {
            continue;
        }
        let problem = GlobalProblem::new(&ctx, gamma, wedges.len(), cfg, optics);
        let Ok(colors) = problem.solve_colors(&wedges) else {
            continue;
        };
        let loss = problem.loss_with_colors(&wedges, &colors);
        if best.as_ref().map_or(true, |b| loss < b.loss) {
            best = Some(ConsistentPatch {
                origin,
                size,
                wedges,
                colors,
                loss,
                seed,
            });
        }
    }
    best.ok_or(Error::DegenerateAlpha)
}

/// Outcome of the joint refinement.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub patches: Vec<ConsistentPatch>,
    /// Total objective after each map rebuild, with that iteration's weights.
    pub loss_history: Vec<f64>,
    /// Weights used at each outer iteration.
    pub gamma_history: Vec<[f64; 8]>,
}

/// Block-coordinate refinement: rebuild the global maps from frozen
/// patches, then improve every patch against them, for the configured
/// number of outer iterations.
pub fn refine_global(
    init: Vec<ConsistentPatch>,
    grid: &PatchGrid,
    targets: &GlobalTargets,
    cfg: &FitConfig,
    optics: &OpticsConfig,
    exec: Exec,
) -> Result<Refinement> {
    let n = cfg.outer_iterations;
    let mut patches = init;
    let mut loss_history = Vec::with_capacity(n + 1);
    let mut gamma_history = Vec::with_capacity(n);
    let lm_opts = LmOptions {
        max_iters: cfg.inner_iterations,
        ..cfg.local_lm.clone()
    };
    for t in 0..n {
        let gamma = cfg.weights.gamma_at(t, n);
        let maps = ConsistencyMaps::build(&patches, grid, cfg, exec);
        let updated = exec.try_map_range(patches.len(), |i| {
            let p = &patches[i];
            let ctx = GlobalContext::new(targets, Some(&maps), p.origin, p.size);
            let problem = GlobalProblem::new(&ctx, gamma, p.wedges.len(), cfg, optics);
            let start = problem.loss_with_colors(&p.wedges, &p.colors);
            if p.wedges.is_empty() || cfg.inner_iterations == 0 {
                return Ok((p.clone(), start));
            }
            let res = lm::minimize(&problem, &problem.encode(&p.wedges), &lm_opts);
            let wedges = problem.decode(&res.x);
            let colors = problem.solve_colors(&wedges)?;
            let loss = problem.loss_with_colors(&wedges, &colors);
            // keep the old state if re-solving the colours did not help
            if loss <= start {
                Ok((
                    ConsistentPatch {
                        wedges,
                        colors,
                        loss,
                        ..p.clone()
                    },
                    start,
                ))
            } else {
                Ok((p.clone(), start))
            }
        })?;
        loss_history.push(updated.iter().map(|(_, s)| s).sum());
        gamma_history.push(gamma);
        patches = updated.into_iter().map(|(p, _)| p).collect();
        log::debug!("outer iteration {t}: loss {:.6e}", loss_history[t]);
    }
    if let Some(&gamma) = gamma_history.last() {
        loss_history.push(global_loss(&patches, grid, targets, gamma, cfg, optics, exec));
    }
    Ok(Refinement {
        patches,
        loss_history,
        gamma_history,
    })
}

/// Puts single-wedge patches on the occluding side of their edge.
///
/// A single wedge and its complement render identically, so the side that
/// owns the boundary is not identifiable from one patch. Wedges clearly
/// narrower than a half-plane are taken as convex occluders; near-straight
/// edges follow the colour pairing of convex evidence nearby.
pub fn resolve_ownership(patches: &mut [ConsistentPatch], cfg: &FitConfig) {
    for p in patches.iter_mut() {
        if p.wedges.len() == 1 && p.wedges[0].geometry.is_reflex() {
            p.wedges[0].geometry = p.wedges[0].geometry.complement();
            p.colors.swap(0, 1);
        }
    }
    let centre = |p: &ConsistentPatch| {
        let h = p.size as f64 / 2.0;
        [p.origin[0] as f64 + h, p.origin[1] as f64 + h]
    };
    // (centre, owner colour, other colour)
    let evidence: Vec<([f64; 2], Rgb, Rgb)> = patches
        .iter()
        .filter(|p| p.wedges.len() == 1 && PI - p.wedges[0].geometry.width >= cfg.ownership_margin)
        .map(|p| (centre(p), p.colors[1], p.colors[0]))
        .collect();
    if evidence.is_empty() {
        return;
    }
    let radius = 4.0 * cfg.patch_size as f64;
    let close = |a: &Rgb, b: &Rgb| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt() < OWNER_COLOR_TOLERANCE;
    for p in patches.iter_mut() {
        if p.wedges.len() != 1 || PI - p.wedges[0].geometry.width >= cfg.ownership_margin {
            continue;
        }
        let c = centre(p);
        let (mut keep, mut flip) = (0.0, 0.0);
        for (e, owner, other) in &evidence {
            let dist = ((e[0] - c[0]).powi(2) + (e[1] - c[1]).powi(2)).sqrt();
            if dist > radius {
                continue;
            }
            let w = (-dist / cfg.patch_size as f64).exp();
            if close(owner, &p.colors[1]) && close(other, &p.colors[0]) {
                keep += w;
            } else if close(owner, &p.colors[0]) && close(other, &p.colors[1]) {
                flip += w;
            }
        }
        if flip > keep {
            p.wedges[0].geometry = p.wedges[0].geometry.complement();
            p.colors.swap(0, 1);
        }
    }
}

/// Colour distance below which two regions are taken to be the same surface.
const OWNER_COLOR_TOLERANCE: f64 = 0.15;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn straight_edge(origin: [usize; 2], x_edge: f64) -> ConsistentPatch {
        // vertical edge at global x = x_edge; wedge covers x > x_edge
        let local = x_edge - origin[0] as f64;
        ConsistentPatch {
            origin,
            size: 5,
            wedges: vec![ConsistentWedge {
                geometry: Geometry {
                    vertex: [local, 2.5],
                    theta1: 1.5 * PI,
                    width: PI,
                },
                eta: [1.0, 1.0],
            }],
            colors: vec![[0.0; 3], [1.0; 3]],
            loss: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn single_patch_has_no_consistency_loss() {
        let cfg = FitConfig {
            patch_size: 5,
            ..FitConfig::default()
        };
        let grid = PatchGrid::new(5, 5, 5, 1).unwrap();
        let p = straight_edge([0, 0], 2.3);
        let img = Grid {
            width: 5,
            height: 5,
            data: p.render(&cfg, Heaviside::SURROGATE).color[0].clone(),
        };
        let targets = GlobalTargets {
            images: [&img, &img],
            ustar: None,
            zstar: None,
        };
        let optics = OpticsConfig::default();
        let mut gamma = [0.0; 8];
        gamma[1] = 1.0;
        gamma[2] = 1.0;
        gamma[4] = 1.0;
        let l = global_loss(&[p], &grid, &targets, gamma, &cfg, &optics, Exec::Serial);
        assert!(l.abs() < 1e-24, "{l}");
    }

    #[test]
    fn boundary_consistency_matches_hand_computation() {
        // two 5x5 patches at the same place with different edges
        let cfg = FitConfig {
            patch_size: 5,
            ..FitConfig::default()
        };
        let grid = PatchGrid::new(5, 5, 5, 1).unwrap();
        let a = straight_edge([0, 0], 1.7);
        let b = straight_edge([0, 0], 3.2);
        let img = Grid::filled(5, 5, [0.5; 3]);
        let targets = GlobalTargets {
            images: [&img, &img],
            ustar: None,
            zstar: None,
        };
        let mut gamma = [0.0; 8];
        gamma[2] = 1.0;
        let l = global_loss(
            &[a.clone(), b.clone()],
            &grid,
            &targets,
            gamma,
            &cfg,
            &OpticsConfig::default(),
            Exec::Serial,
        );
        let ba = a.render(&cfg, Heaviside::SURROGATE).boundary;
        let bb = b.render(&cfg, Heaviside::SURROGATE).boundary;
        // each map deviates from the mean by half the difference
        let expect: f64 = ba
            .iter()
            .zip(&bb)
            .map(|(x, y)| 2.0 * ((x - y) / 2.0).powi(2))
            .sum::<f64>()
            / 25.0;
        assert!((l - expect).abs() < 1e-12, "{l} {expect}");
        assert!(expect > 0.01);
    }

    #[test]
    fn ownership_follows_convex_evidence() {
        let cfg = FitConfig::default();
        let corner = ConsistentPatch {
            origin: [0, 0],
            size: 21,
            wedges: vec![ConsistentWedge {
                geometry: Geometry {
                    vertex: [10.0, 10.0],
                    theta1: 0.0,
                    width: PI / 2.0,
                },
                eta: [1.0, 1.0],
            }],
            colors: vec![[0.1; 3], [0.9, 0.2, 0.2]],
            loss: 0.0,
            seed: 0,
        };
        // a straight edge whose wedge currently holds the background colour
        let mut edge = corner.clone();
        edge.origin = [10, 0];
        edge.wedges[0].geometry.width = PI;
        edge.colors = vec![[0.9, 0.2, 0.2], [0.1; 3]];
        let mut ps = vec![corner, edge];
        resolve_ownership(&mut ps, &cfg);
        assert_eq!(ps[1].colors[1], [0.9, 0.2, 0.2]);
        assert!((ps[1].wedges[0].geometry.width - PI).abs() < 1e-12);
    }
}
