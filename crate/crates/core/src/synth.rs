//! Layered synthetic scenes, defocused image pairs and sensor noise.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pixel_center, Field, Grid, Rgb, RgbField};
use crate::io;
use crate::optics::{OpticsConfig, Power};
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rectangle {
        center: [f64; 2],
        half_extent: [f64; 2],
        angle: f64,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    Triangle {
        vertices: [[f64; 2]; 3],
    },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rectangle {
                center,
                half_extent,
                angle,
            } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= half_extent[0] && v.abs() <= half_extent[1]
            }
            Shape::Circle { center, radius } => (x - center[0]).powi(2) + (y - center[1]).powi(2) <= radius * radius,
            Shape::Triangle { vertices: v } => {
                let cross = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let e = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
                e.iter().all(|&k| k >= 0.0) || e.iter().all(|&k| k <= 0.0)
            }
        }
    }

    fn corners(&self) -> Option<Vec<[f64; 2]>> {
        match *self {
            Shape::Rectangle {
                center,
                half_extent: [a, b],
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                Some(
                    [[a, b], [-a, b], [-a, -b], [a, -b]]
                        .iter()
                        .map(|[u, v]| [center[0] + u * c - v * s, center[1] + u * s + v * c])
                        .collect(),
                )
            }
            Shape::Triangle { vertices } => Some(vertices.to_vec()),
            Shape::Circle { .. } => None,
        }
    }

    /// Points along the outline with spacing at most `spacing`.
    pub fn outline(&self, spacing: f64) -> Vec<[f64; 2]> {
        match (self, self.corners()) {
            (Shape::Circle { center, radius }, _) => {
                let n = ((TAU * radius / spacing).ceil() as usize).max(8);
                (0..n)
                    .map(|k| {
                        let t = TAU * k as f64 / n as f64;
                        [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                    })
                    .collect()
            }
            (_, Some(c)) => {
                let mut pts = Vec::new();
                for i in 0..c.len() {
                    let (a, b) = (c[i], c[(i + 1) % c.len()]);
                    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                    let n = ((len / spacing).ceil() as usize).max(1);
                    for k in 0..n {
                        let t = k as f64 / n as f64;
                        pts.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                    }
                }
                pts
            }
            _ => unreachable!("polygons always have corners"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub shape: Shape,
    pub color: Rgb,
    /// Depth (m).
    pub depth: f64,
}

/// Background plus layers ordered back to front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub background: Rgb,
    pub background_depth: f64,
    pub layers: Vec<Layer>,
}

impl Scene {
    pub fn validate(&self, cfg: &OpticsConfig) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene must be non-empty".into()));
        }
        let depths = std::iter::once(self.background_depth).chain(self.layers.iter().map(|l| l.depth));
        for z in depths {
            if !cfg.in_range(z) {
                return Err(Error::Config(format!(
                    "depth {z} outside [{}, {}]",
                    cfg.z_min, cfg.z_max
                )));
            }
        }
        let colors = std::iter::once(&self.background).chain(self.layers.iter().map(|l| &l.color));
        for c in colors {
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::Config("scene colours must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Hard silhouette of layer `k` sampled at pixel centres.
    pub fn silhouette(&self, k: usize) -> Field {
        let shape = &self.layers[k].shape;
        Field::from_fn(self.width, self.height, |xi, yi| {
            let (x, y) = pixel_center(xi, yi);
            if shape.contains(x, y) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Depth of the front-most layer covering each pixel centre.
    pub fn depth_map(&self) -> Field {
        Field::from_fn(self.width, self.height, |xi, yi| {
            let (x, y) = pixel_center(xi, yi);
            self.layers
                .iter()
                .rev()
                .find(|l| l.shape.contains(x, y))
                .map_or(self.background_depth, |l| l.depth)
        })
    }

    /// Distance from each pixel centre to the nearest visible silhouette
    /// boundary; `+inf` when the scene has no layers.
    pub fn boundary_distance(&self) -> Field {
        const SPACING: f64 = 0.05;
        let (w, h) = (self.width as f64, self.height as f64);
        let mut segs = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let pts = layer.shape.outline(SPACING);
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                let near_image = m[0] >= -2.0 && m[0] <= w + 2.0 && m[1] >= -2.0 && m[1] <= h + 2.0;
                let hidden = self.layers[k + 1..].iter().any(|f| f.shape.contains(m[0], m[1]));
                if near_image && !hidden {
                    segs.push([a, b]);
                }
            }
        }
        nearest_segment_distance(self.width, self.height, &segs, SPACING)
    }
}

fn segment_distance(p: [f64; 2], s: &[[f64; 2]; 2]) -> f64 {
    let [a, b] = *s;
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// Distance transform against short segments bucketed by midpoint.
fn nearest_segment_distance(width: usize, height: usize, segs: &[[[f64; 2]; 2]], max_len: f64) -> Field {
    if segs.is_empty() {
        return Field::filled(width, height, f64::INFINITY);
    }
    const CELL: f64 = 4.0;
    let mid = |s: &[[f64; 2]; 2]| [0.5 * (s[0][0] + s[1][0]), 0.5 * (s[0][1] + s[1][1])];
    let x0 = segs.iter().map(|s| mid(s)[0]).fold(0.0, f64::min);
    let y0 = segs.iter().map(|s| mid(s)[1]).fold(0.0, f64::min);
    let x1 = segs.iter().map(|s| mid(s)[0]).fold(width as f64, f64::max);
    let y1 = segs.iter().map(|s| mid(s)[1]).fold(height as f64, f64::max);
    let nx = ((x1 - x0) / CELL).floor() as usize + 1;
    let ny = ((y1 - y0) / CELL).floor() as usize + 1;
    let cell_of = |x: f64, y: f64| {
        let cx = (((x - x0) / CELL).floor() as isize).clamp(0, nx as isize - 1);
        let cy = (((y - y0) / CELL).floor() as isize).clamp(0, ny as isize - 1);
        (cx, cy)
    };
    let mut buckets: Vec<Vec<[[f64; 2]; 2]>> = vec![Vec::new(); nx * ny];
    for s in segs {
        let m = mid(s);
        let (cx, cy) = cell_of(m[0], m[1]);
        buckets[cy as usize * nx + cx as usize].push(*s);
    }
    Field::from_fn(width, height, |xi, yi| {
        let (x, y) = pixel_center(xi, yi);
        let (cx, cy) = cell_of(x, y);
        let mut best = f64::INFINITY;
        let max_ring = nx.max(ny) as isize;
        for r in 0..=max_ring {
            for gy in cy - r..=cy + r {
                for gx in cx - r..=cx + r {
                    let on_ring = (gy - cy).abs() == r || (gx - cx).abs() == r;
                    if !on_ring || gx < 0 || gy < 0 || gx >= nx as isize || gy >= ny as isize {
                        continue;
                    }
                    for s in &buckets[gy as usize * nx + gx as usize] {
                        best = best.min(segment_distance([x, y], s));
                    }
                }
            }
            // midpoints beyond ring r are at least r cells away
            if best <= r as f64 * CELL - max_len {
                break;
            }
        }
        best
    })
}

/// Separable Gaussian blur truncated at 4σ with replicate padding.
pub fn gaussian_blur(f: &Field, sigma: f64) -> Result<Field> {
    let sigma = sigma.abs();
    if sigma < 1e-9 {
        return Ok(f.clone());
    }
    let radius = (4.0 * sigma).ceil() as usize;
    if radius > f.width.max(f.height) {
        return Err(Error::Config(format!(
            "blur SD {sigma:.2} px needs a kernel wider than the {}x{} image",
            f.width, f.height
        )));
    }
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let t = k as f64 - radius as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let r = radius as isize;
    let rows = Field::from_fn(f.width, f.height, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * f.get_clamped(x as isize + k as isize - r, y as isize))
            .sum()
    });
    Ok(Field::from_fn(f.width, f.height, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * rows.get_clamped(x as isize, y as isize + k as isize - r))
            .sum()
    }))
}

#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub image: RgbField,
    pub depth: Field,
    pub boundary_distance: Field,
}

/// Renders one defocused view: each layer's silhouette is blurred with its
/// depth-dependent PSF and composited back to front.
pub fn render_scene(scene: &Scene, cfg: &OpticsConfig, power: Power) -> Result<RenderedImage> {
    scene.validate(cfg)?;
    let image = render_view(scene, cfg, power)?;
    Ok(RenderedImage {
        image,
        depth: scene.depth_map(),
        boundary_distance: scene.boundary_distance(),
    })
}

fn render_view(scene: &Scene, cfg: &OpticsConfig, power: Power) -> Result<RgbField> {
    let mut image = Grid::filled(scene.width, scene.height, scene.background);
    for layer in &scene.layers {
        let sigma = cfg.eta_px(layer.depth, power);
        let a = blurred_silhouette(&layer.shape, scene.width, scene.height, sigma)?;
        for (p, &ak) in image.data.iter_mut().zip(&a.data) {
            for ch in 0..3 {
                p[ch] = ak * layer.color[ch] + (1.0 - ak) * p[ch];
            }
        }
    }
    Ok(image)
}

/// Sub-pixel samples per pixel side used before blurring; odd so that one
/// sample sits on each pixel centre.
const SUPERSAMPLE: usize = 3;

/// Silhouette convolved with a Gaussian of SD `sigma` px, read at pixel centres.
///
/// The silhouette is sampled on a grid `SUPERSAMPLE` times finer than the
/// image so the discrete convolution tracks the continuous one.
pub fn blurred_silhouette(shape: &Shape, width: usize, height: usize, sigma: f64) -> Result<Field> {
    let k = SUPERSAMPLE;
    let sigma = sigma.abs();
    if sigma < 1e-9 {
        return Ok(Field::from_fn(width, height, |x, y| {
            let (xc, yc) = pixel_center(x, y);
            if shape.contains(xc, yc) {
                1.0
            } else {
                0.0
            }
        }));
    }
    let radius = (4.0 * sigma).ceil() as usize;
    if radius > width.max(height) {
        return Err(Error::Config(format!(
            "blur SD {sigma:.2} px needs a kernel wider than the {width}x{height} image"
        )));
    }
    let (fw, fh) = (width * k, height * k);
    let fine = Grid::from_fn(fw, fh, |x, y| {
        let (xc, yc) = ((x as f64 + 0.5) / k as f64, (y as f64 + 0.5) / k as f64);
        if shape.contains(xc, yc) {
            1.0
        } else {
            0.0
        }
    });
    let fr = radius * k;
    let mut kernel: Vec<f64> = (0..=2 * fr)
        .map(|i| {
            let t = (i as f64 - fr as f64) / k as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= norm);
    let r = fr as isize;
    let centre = (k / 2) as isize;
    // horizontal pass evaluated only at the fine columns under pixel centres
    let rows = Field::from_fn(width, fh, |x, y| {
        let cx = (x * k) as isize + centre;
        kernel
            .iter()
            .enumerate()
            .map(|(i, w)| w * fine.get_clamped(cx + i as isize - r, y as isize))
            .sum()
    });
    Ok(Field::from_fn(width, height, |x, y| {
        let cy = (y * k) as isize + centre;
        kernel
            .iter()
            .enumerate()
            .map(|(i, w)| w * rows.get_clamped(x as isize, cy + i as isize - r))
            .sum()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Photon level: expected photon count at unit intensity.
    #[serde(rename = "α", alias = "alpha")]
    pub alpha: f64,
    pub sigma_read: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "photon level α must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.sigma_read >= 0.0 && self.sigma_read.is_finite()) {
            return Err(Error::Config("read noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Poisson shot noise plus Gaussian read noise, normalized by the photon level.
pub fn add_noise(clean: &RgbField, nm: &NoiseModel) -> Result<RgbField> {
    nm.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
    let read = Normal::new(0.0, nm.sigma_read).map_err(|e| Error::Config(e.to_string()))?;
    let mut sample = |v: f64| -> Result<f64> {
        let lambda = nm.alpha * v.max(0.0);
        let shot = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rng)
        } else {
            0.0
        };
        Ok((shot + read.sample(&mut rng)) / nm.alpha)
    };
    let mut out = clean.clone();
    for p in out.data.iter_mut() {
        for v in p.iter_mut() {
            *v = sample(*v)?;
        }
    }
    Ok(out)
}

/// Counts, seeds and distributions of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Inclusive range of shapes per scene.
    pub shapes: [usize; 2],
    /// Photon level drawn uniformly per scene.
    pub alpha_range: [f64; 2],
    pub sigma_read: f64,
    /// Minimum Euclidean RGB distance between a layer and everything below it.
    pub min_contrast: f64,
    /// Shape size as a fraction of the shorter image side.
    pub size_range: [f64; 2],
    pub optics: OpticsConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 0,
            width: 147,
            height: 147,
            shapes: [1, 3],
            alpha_range: [180.0, 200.0],
            sigma_read: 2.0,
            min_contrast: 0.3,
            size_range: [0.1, 0.3],
            optics: OpticsConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        let [a0, a1] = self.alpha_range;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return Err(Error::Config(format!(
                "photon level range must satisfy 0 < α_min <= α_max, got [{a0}, {a1}]"
            )));
        }
        if self.shapes[0] > self.shapes[1] {
            return Err(Error::Config("shape count range is inverted".into()));
        }
        if !(self.size_range[0] > 0.0 && self.size_range[0] <= self.size_range[1]) {
            return Err(Error::Config("size range must be positive and ordered".into()));
        }
        if !(0.0..1.0).contains(&self.min_contrast) {
            return Err(Error::Config("min_contrast must lie in [0, 1)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        NoiseModel {
            alpha: a0,
            sigma_read: self.sigma_read,
            seed: 0,
        }
        .validate()
    }
}

/// Deterministic 64-bit mixer used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, index: u64, kind: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ kind.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_color(rng: &mut ChaCha8Rng, below: &[Rgb], min_contrast: f64) -> Rgb {
    loop {
        let c: Rgb = [rng.gen(), rng.gen(), rng.gen()];
        let ok = below.iter().all(|b| {
            let d2: f64 = (0..3).map(|i| (c[i] - b[i]).powi(2)).sum();
            d2.sqrt() >= min_contrast
        });
        if ok {
            return c;
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> Shape {
    let side = spec.width.min(spec.height) as f64;
    let center = [
        rng.gen_range(0.15..=0.85) * spec.width as f64,
        rng.gen_range(0.15..=0.85) * spec.height as f64,
    ];
    let kind = rng.gen_range(0..3);
    let mut size = || rng.gen_range(spec.size_range[0]..=spec.size_range[1]) * side;
    match kind {
        0 => {
            let half_extent = [size(), size()];
            Shape::Rectangle {
                center,
                half_extent,
                angle: rng.gen_range(0.0..PI),
            }
        }
        1 => Shape::Circle { center, radius: size() },
        _ => {
            let r = size() * 1.3;
            let angles = loop {
                let mut a = [
                    rng.gen_range(0.0..TAU),
                    rng.gen_range(0.0..TAU),
                    rng.gen_range(0.0..TAU),
                ];
                a.sort_by(f64::total_cmp);
                let gaps = [a[1] - a[0], a[2] - a[1], TAU - a[2] + a[0]];
                if gaps.iter().all(|&g| g >= PI / 4.0) {
                    break a;
                }
            };
            Shape::Triangle {
                vertices: angles.map(|t| [center[0] + r * t.cos(), center[1] + r * t.sin()]),
            }
        }
    }
}

/// Samples a scene; nearer layers are composited in front of farther ones.
pub fn sample_scene(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.gen_range(spec.shapes[0]..=spec.shapes[1]);
    let (z0, z1) = (spec.optics.z_min, spec.optics.z_max);
    let mut depths: Vec<f64> = (0..=n).map(|_| rng.gen_range(z0..=z1)).collect();
    depths.sort_by(|a, b| b.total_cmp(a));
    let background: Rgb = [rng.gen(), rng.gen(), rng.gen()];
    let mut below = vec![background];
    let mut layers = Vec::with_capacity(n);
    for &depth in &depths[1..] {
        let shape = random_shape(rng, spec);
        let color = random_color(rng, &below, spec.min_contrast);
        below.push(color);
        layers.push(Layer { shape, color, depth });
    }
    Scene {
        width: spec.width,
        height: spec.height,
        background,
        background_depth: depths[0],
        layers,
    }
}

/// One image pair with ground truth, in memory.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub scene: Scene,
    pub alpha: f64,
    pub noise_seeds: [u64; 2],
    pub clean: [RgbField; 2],
    pub noisy: [RgbField; 2],
    pub depth: Field,
    pub boundary_distance: Field,
}

/// Generates scene `index` of a dataset: geometry, clean and noisy pairs.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let scene = sample_scene(spec, &mut rng);
    let [a0, a1] = spec.alpha_range;
    let alpha = if a0 == a1 { a0 } else { rng.gen_range(a0..=a1) };
    let noise_seeds = [
        mix_seed(spec.seed, index as u64, 1),
        mix_seed(spec.seed, index as u64, 2),
    ];
    let plus = render_scene(&scene, &spec.optics, Power::Plus)?;
    let minus = render_view(&scene, &spec.optics, Power::Minus)?;
    let noisy = |img: &RgbField, seed| {
        add_noise(
            img,
            &NoiseModel {
                alpha,
                sigma_read: spec.sigma_read,
                seed,
            },
        )
    };
    let noisy = [noisy(&plus.image, noise_seeds[0])?, noisy(&minus, noise_seeds[1])?];
    Ok(SceneSample {
        scene,
        alpha,
        noise_seeds,
        clean: [plus.image, minus],
        noisy,
        depth: plus.depth,
        boundary_distance: plus.boundary_distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub clean_plus: String,
    pub clean_minus: String,
    pub noisy_plus: String,
    pub noisy_minus: String,
    pub depth: String,
    pub boundary_distance: String,
    pub scene: String,
}

impl SceneFiles {
    fn in_dir(dir: &str) -> Self {
        let f = |name: &str| format!("{dir}/{name}");
        Self {
            clean_plus: f("clean_plus.f32"),
            clean_minus: f("clean_minus.f32"),
            noisy_plus: f("noisy_plus.f32"),
            noisy_minus: f("noisy_minus.f32"),
            depth: f("depth.f32"),
            boundary_distance: f("boundary_distance.f32"),
            scene: f("scene.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub alpha: f64,
    pub noise_seed_plus: u64,
    pub noise_seed_minus: u64,
    pub files: SceneFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub scenes: Vec<SceneRecord>,
}

/// Writes `spec.count` scenes plus `manifest.json` under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path, exec: Exec) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scenes = exec.try_map_range(spec.count, |index| {
        let sample = generate_scene(spec, index)?;
        let name = format!("scene_{index:04}");
        let dir = out_dir.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let files = SceneFiles::in_dir(&name);
        let at = |rel: &str| out_dir.join(rel);
        io::write_rgb(&at(&files.clean_plus), &sample.clean[0])?;
        io::write_rgb(&at(&files.clean_minus), &sample.clean[1])?;
        io::write_rgb(&at(&files.noisy_plus), &sample.noisy[0])?;
        io::write_rgb(&at(&files.noisy_minus), &sample.noisy[1])?;
        io::write_field(&at(&files.depth), &sample.depth)?;
        io::write_field(&at(&files.boundary_distance), &sample.boundary_distance)?;
        io::write_json(&at(&files.scene), &sample.scene)?;
        for (stem, img) in [
            ("clean_plus", &sample.clean[0]),
            ("clean_minus", &sample.clean[1]),
            ("noisy_plus", &sample.noisy[0]),
            ("noisy_minus", &sample.noisy[1]),
        ] {
            io::write_png16_rgb(&dir.join(format!("{stem}.png")), img)?;
        }
        io::write_depth_png(
            &dir.join("depth.png"),
            &sample.depth,
            spec.optics.z_min,
            spec.optics.z_max,
        )?;
        Ok(SceneRecord {
            index,
            alpha: sample.alpha,
            noise_seed_plus: sample.noise_seeds[0],
            noise_seed_minus: sample.noise_seeds[1],
            files,
        })
    })?;
    let manifest = Manifest {
        spec: spec.clone(),
        scenes,
    };
    io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_scene(z: f64) -> Scene {
        Scene {
            width: 41,
            height: 41,
            background: [0.1, 0.2, 0.3],
            background_depth: 1.1,
            layers: vec![Layer {
                shape: Shape::Circle {
                    center: [20.5, 20.5],
                    radius: 9.0,
                },
                color: [0.9, 0.8, 0.1],
                depth: z,
            }],
        }
    }

    #[test]
    fn background_only_scene() {
        let s = Scene {
            layers: vec![],
            ..disk_scene(1.0)
        };
        let r = render_scene(&s, &OpticsConfig::default(), Power::Plus).unwrap();
        assert!(r.image.data.iter().all(|p| *p == s.background));
        assert!(r.depth.data.iter().all(|&z| z == 1.1));
        assert!(r.boundary_distance.data.iter().all(|u| u.is_infinite()));
    }

    #[test]
    fn in_focus_disk_is_binary() {
        let cfg = OpticsConfig::default();
        // σ = 0 when 1/z = ρ - 1/s
        let z = 1.0 / (cfg.rho_plus - 1.0 / cfg.s);
        let cfg = OpticsConfig { z_max: 10.0, ..cfg };
        let r = render_scene(&disk_scene(z), &cfg, Power::Plus).unwrap();
        for p in &r.image.data {
            assert!(*p == [0.9, 0.8, 0.1] || *p == [0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn straight_edge_matches_erf_profile() {
        let cfg = OpticsConfig::default();
        let z = 0.9;
        let sigma = cfg.eta_px(z, Power::Minus);
        // edge at x = 30 exactly on a pixel border
        let scene = Scene {
            width: 60,
            height: 20,
            background: [0.0; 3],
            background_depth: 1.1,
            layers: vec![Layer {
                shape: Shape::Rectangle {
                    center: [130.0, 10.0],
                    half_extent: [100.0, 100.0],
                    angle: 0.0,
                },
                color: [1.0, 0.5, 0.25],
                depth: z,
            }],
        };
        let r = render_scene(&scene, &cfg, Power::Minus).unwrap();
        let mut worst: f64 = 0.0;
        for x in 10..50 {
            let (xc, _) = pixel_center(x, 10);
            let a = 0.5 * (1.0 + libm::erf((xc - 30.0) / (std::f64::consts::SQRT_2 * sigma)));
            let got = r.image.get(x, 10);
            for ch in 0..3 {
                worst = worst.max((got[ch] - a * scene.layers[0].color[ch]).abs());
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn blur_conserves_energy() {
        let s = disk_scene(0.8);
        let sil = s.silhouette(0);
        let b = gaussian_blur(&sil, 3.0).unwrap();
        assert!((sil.mean() - b.mean()).abs() < 1e-6);
        assert!(gaussian_blur(&sil, 30.0).is_err());
        let shape = &s.layers[0].shape;
        assert!(blurred_silhouette(shape, 41, 41, 50.0).is_err());
        let sharp = blurred_silhouette(shape, 41, 41, 0.0).unwrap();
        assert_eq!(sharp, sil);
    }

    #[test]
    fn equal_powers_give_identical_views() {
        let cfg = OpticsConfig {
            rho_plus: 10.0,
            ..OpticsConfig::default()
        };
        let s = disk_scene(0.9);
        let a = render_view(&s, &cfg, Power::Plus).unwrap();
        let b = render_view(&s, &cfg, Power::Minus).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boundary_distance_of_a_disk() {
        let s = disk_scene(0.9);
        let u = s.boundary_distance();
        for y in 0..41 {
            for x in 0..41 {
                let (xc, yc) = pixel_center(x, y);
                let want = (((xc - 20.5).powi(2) + (yc - 20.5).powi(2)).sqrt() - 9.0).abs();
                assert!((u.get(x, y) - want).abs() < 1e-3, "{x},{y}");
            }
        }
    }

    #[test]
    fn occluded_outline_is_not_a_boundary() {
        let mut s = disk_scene(0.9);
        s.layers.push(Layer {
            shape: Shape::Rectangle {
                center: [20.5, 20.5],
                half_extent: [15.0, 15.0],
                angle: 0.0,
            },
            color: [0.0, 1.0, 0.0],
            depth: 0.8,
        });
        let u = s.boundary_distance();
        // centre pixel: the disk outline is hidden, the square edge is 15 px away
        assert!((u.get(20, 20) - 15.0).abs() < 1e-3);
    }

    #[test]
    fn noise_is_deterministic_and_near_clean_when_bright() {
        let clean = Grid::from_fn(20, 20, |x, y| [x as f64 / 20.0, y as f64 / 20.0, 0.5]);
        let nm = NoiseModel {
            alpha: 1e8,
            sigma_read: 0.0,
            seed: 3,
        };
        let a = add_noise(&clean, &nm).unwrap();
        let b = add_noise(&clean, &nm).unwrap();
        assert_eq!(a, b);
        let close = a
            .data
            .iter()
            .flatten()
            .zip(clean.data.iter().flatten())
            .filter(|(n, c)| (*n - *c).abs() <= 1e-3 * c.abs().max(1e-3))
            .count();
        assert!(close as f64 >= 0.99 * 1200.0);
        assert!(add_noise(&clean, &NoiseModel { alpha: 0.0, ..nm }).is_err());
    }

    #[test]
    fn sampled_scenes_respect_the_depth_range() {
        let spec = DatasetSpec::default();
        for i in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            rng.set_stream(i);
            let s = sample_scene(&spec, &mut rng);
            s.validate(&spec.optics).unwrap();
            let d = s.depth_map();
            assert!(d.data.iter().all(|&z| (0.75..=1.18).contains(&z)));
            // front layers are nearer
            let mut prev = s.background_depth;
            for l in &s.layers {
                assert!(l.depth <= prev);
                prev = l.depth;
            }
        }
    }
}
