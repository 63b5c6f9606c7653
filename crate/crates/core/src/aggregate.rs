//! Global boundary, colour, depth and confidence maps from fitted patches,
//! and block tiling for large images.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{ConsistentPatch, FitConfig, PatchGrid};
use crate::geometry::Heaviside;
use crate::grid::{Field, Grid, Rgb, RgbField};
use crate::optics::{OpticsConfig, Power};
use crate::par::Exec;
use crate::render::sobel;

/// All global rasters of one image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMaps {
    pub boundary: Field,
    pub color_plus: RgbField,
    pub color_minus: RgbField,
    /// Sobel magnitude of `color_plus`.
    pub derivative: Field,
    /// Depth on confident boundary pixels; NaN elsewhere.
    pub depth_sparse: Field,
    /// Depth inside wedges; NaN on background-only pixels.
    pub depth_dense: Field,
    pub confidence: Field,
    /// Number of patches covering each pixel.
    pub coverage: Field,
}

impl GlobalMaps {
    pub fn width(&self) -> usize {
        self.boundary.width
    }

    pub fn height(&self) -> usize {
        self.boundary.height
    }
}

#[derive(Clone, Copy, Debug)]
struct Acc {
    count: f64,
    boundary: f64,
    color: [Rgb; 2],
    sparse: (f64, f64),
    dense: (f64, f64),
    confident: f64,
}

const ZERO: Acc = Acc {
    count: 0.0,
    boundary: 0.0,
    color: [[0.0; 3]; 2],
    sparse: (0.0, 0.0),
    dense: (0.0, 0.0),
    confident: 0.0,
};

/// Patches rendered per parallel batch.
const BATCH: usize = 256;

/// Depth of every wedge of the selected patches after smoothing along
/// shared boundaries.
///
/// Two wedges are linked when their own boundary pixels overlap by at least
/// `consensus_overlap` of the smaller set and their own colours agree. Each
/// pass replaces a wedge's `η₊² − η₋²` by the weighted mean over itself and
/// its links, keeping only values within `consensus_outlier` spreads of the
/// group's weighted median; that difference is affine in inverse depth, so
/// the mean stays unbiased in `1/z`. With zero passes every wedge keeps its
/// own depth.
pub fn consensus_depths(
    patches: &[&ConsistentPatch],
    width: usize,
    cfg: &FitConfig,
    optics: &OpticsConfig,
    exec: Exec,
) -> Vec<Vec<Option<f64>>> {
    if cfg.consensus_passes == 0 {
        return exec.map(patches, |p| p.wedge_depths(cfg, optics));
    }
    struct Node {
        diff: f64,
        weight: f64,
        color: Rgb,
        pixels: Vec<usize>,
    }
    let per_patch: Vec<Vec<Option<Node>>> = exec.map(patches, |p| {
        let support = p.depth_support(cfg);
        let own = p.own_boundary(cfg.w_scale, 1.0);
        p.wedges
            .iter()
            .zip(support)
            .zip(own)
            .enumerate()
            .map(|(i, ((w, ok), px))| {
                let valid = ok && optics.depth(w.eta[0], w.eta[1]).is_ok() && !px.is_empty();
                // smoothness precision grows with the squared contrast across the edge
                let own = p.colors[i + 1];
                let contrast = p
                    .colors
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i + 1)
                    .map(|(_, c)| (0..3).map(|ch| (c[ch] - own[ch]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                valid.then(|| Node {
                    diff: w.eta[0] * w.eta[0] - w.eta[1] * w.eta[1],
                    weight: px.len() as f64 * contrast,
                    color: own,
                    pixels: px
                        .iter()
                        .map(|&k| (p.origin[1] + k / p.size) * width + p.origin[0] + k % p.size)
                        .collect(),
                })
            })
            .collect()
    });
    let nodes: Vec<&Node> = per_patch.iter().flatten().flatten().collect();
    let mut by_pixel: std::collections::HashMap<usize, Vec<u32>> = std::collections::HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        for &k in &n.pixels {
            by_pixel.entry(k).or_default().push(i as u32);
        }
    }
    let mut overlap: std::collections::HashMap<(u32, u32), u32> = std::collections::HashMap::new();
    for ids in by_pixel.values() {
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                *overlap.entry((i, j)).or_default() += 1;
            }
        }
    }
    let mut links: Vec<Vec<u32>> = vec![Vec::new(); nodes.len()];
    let mut pairs: Vec<_> = overlap.into_iter().collect();
    pairs.sort_unstable();
    for ((i, j), c) in pairs {
        let (a, b) = (nodes[i as usize], nodes[j as usize]);
        let small = a.pixels.len().min(b.pixels.len()) as f64;
        // boundaries of different objects rarely share the object colour
        let same_object =
            (0..3).map(|ch| (a.color[ch] - b.color[ch]).powi(2)).sum::<f64>().sqrt() <= cfg.consensus_color_tolerance;
        if same_object && c as f64 >= (cfg.consensus_overlap * small).max(2.0) {
            links[i as usize].push(j);
            links[j as usize].push(i);
        }
    }
    // per-node spread from the differences across links (MAD, robust to outliers)
    let mut gaps: Vec<f64> = links
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            l.iter()
                .filter(move |&&j| j as usize > i)
                .map(move |&j| (i, j as usize))
        })
        .map(|(i, j)| (nodes[i].diff - nodes[j].diff).abs())
        .collect();
    gaps.sort_unstable_by(f64::total_cmp);
    let spread = gaps.get(gaps.len() / 2).map_or(f64::INFINITY, |g| 1.4826 * g / SQRT_2);
    let window = cfg.consensus_outlier * SQRT_2 * spread.max(1e-6);
    let mut diff: Vec<f64> = nodes.iter().map(|n| n.diff).collect();
    for _ in 0..cfg.consensus_passes {
        diff = exec.map_range(nodes.len(), |i| {
            let mut group: Vec<(f64, f64)> = std::iter::once(i)
                .chain(links[i].iter().map(|&j| j as usize))
                .map(|j| (diff[j], nodes[j].weight))
                .collect();
            let centre = weighted_median(&mut group);
            let (num, den) = group
                .iter()
                .filter(|(v, _)| (v - centre).abs() <= window)
                .fold((0.0, 0.0), |(n, d), (v, w)| (n + w * v, d + w));
            num / den
        });
    }
    let mut smoothed = diff.into_iter();
    per_patch
        .iter()
        .map(|wedges| {
            wedges
                .iter()
                .map(|n| {
                    let d = smoothed.by_ref().take(usize::from(n.is_some())).next()?;
                    optics.depth_from_difference(d).ok().filter(|d| d.valid).map(|d| d.z)
                })
                .collect()
        })
        .collect()
}

/// Weighted median; sorts `items` by value.
fn weighted_median(items: &mut [(f64, f64)]) -> f64 {
    items.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let half = 0.5 * items.iter().map(|x| x.1).sum::<f64>();
    let mut acc = 0.0;
    for &(v, w) in items.iter() {
        acc += w;
        if acc >= half {
            return v;
        }
    }
    items.last().map_or(f64::NAN, |x| x.0)
}

/// Single pass over the patches producing every map with exact steps.
///
/// `include` drops patches from the reduction (block margins); `eta`
/// replaces every smoothness in the colour maps.
pub fn aggregate(
    patches: &[ConsistentPatch],
    grid: &PatchGrid,
    cfg: &FitConfig,
    optics: &OpticsConfig,
    include: Option<&[bool]>,
    eta: Option<f64>,
    exec: Exec,
) -> Result<GlobalMaps> {
    if let Some(e) = eta {
        if !cfg.eta.contains(e) {
            return Err(Error::Config(format!(
                "smoothness override {e} outside [{}, {}]",
                cfg.eta.min, cfg.eta.max
            )));
        }
    }
    if include.is_some_and(|m| m.len() != patches.len()) {
        return Err(Error::Shape("patch filter length differs from the patch count".into()));
    }
    let (w, h) = (grid.image_width, grid.image_height);
    let mut acc = vec![ZERO; w * h];
    let selected: Vec<&ConsistentPatch> = patches
        .iter()
        .enumerate()
        .filter(|(i, _)| include.map_or(true, |m| m[*i]))
        .map(|(_, p)| p)
        .collect();
    let all_depths = consensus_depths(&selected, w, cfg, optics, exec);
    for (chunk, chunk_depths) in selected.chunks(BATCH).zip(all_depths.chunks(BATCH)) {
        let rendered = exec.map(chunk, |p| {
            (
                p.render_with_eta(cfg, Heaviside::Exact, eta),
                p.side_clearance(cfg.w_scale),
            )
        });
        for ((p, (r, clearance)), depths) in chunk.iter().zip(&rendered).zip(chunk_depths) {
            let l = r.wedges;
            for py in 0..p.size {
                for px in 0..p.size {
                    let k = py * p.size + px;
                    let a = &mut acc[(p.origin[1] + py) * w + p.origin[0] + px];
                    let b = r.boundary[k];
                    a.count += 1.0;
                    a.boundary += b;
                    for s in 0..2 {
                        for ch in 0..3 {
                            a.color[s][ch] += r.color[s][k][ch];
                        }
                    }
                    if b >= cfg.tau {
                        a.confident += 1.0;
                    }
                    for (i, z) in depths.iter().enumerate() {
                        let Some(z) = *z else { continue };
                        let m = r.masks[k * l + i];
                        if b * m >= cfg.tau && clearance[k * l + i] >= cfg.side_margin {
                            a.sparse.0 += z;
                            a.sparse.1 += 1.0;
                        }
                        a.dense.0 += m * z;
                        a.dense.1 += m;
                    }
                }
            }
        }
    }
    let field = |f: &dyn Fn(&Acc) -> f64| Grid {
        width: w,
        height: h,
        data: acc.iter().map(f).collect(),
    };
    let ratio = |(n, d): (f64, f64)| if d > 0.0 { n / d } else { f64::NAN };
    let mean = |a: &Acc, v: f64| if a.count > 0.0 { v / a.count } else { 0.0 };
    let color = |s: usize| Grid {
        width: w,
        height: h,
        data: acc.iter().map(|a| a.color[s].map(|c| mean(a, c))).collect(),
    };
    let color_plus = color(0);
    let derivative = Grid {
        width: w,
        height: h,
        data: sobel(&color_plus.data, w, h),
    };
    Ok(GlobalMaps {
        boundary: field(&|a| mean(a, a.boundary)),
        color_minus: color(1),
        color_plus,
        derivative,
        depth_sparse: field(&|a| {
            if a.sparse.1 >= cfg.side_quorum * a.confident {
                ratio(a.sparse)
            } else {
                f64::NAN
            }
        }),
        depth_dense: field(&|a| ratio(a.dense)),
        confidence: field(&|a| mean(a, a.confident)),
        coverage: field(&|a| a.count),
    })
}

pub fn global_boundary_map(patches: &[ConsistentPatch], grid: &PatchGrid, cfg: &FitConfig) -> Result<Field> {
    Ok(aggregate(
        patches,
        grid,
        cfg,
        &OpticsConfig::default(),
        None,
        None,
        Exec::default(),
    )?
    .boundary)
}

/// Mean colour map of one image; `eta` renders every wedge with one smoothness.
pub fn global_color_map(
    patches: &[ConsistentPatch],
    grid: &PatchGrid,
    cfg: &FitConfig,
    power: Power,
    eta: Option<f64>,
) -> Result<RgbField> {
    let maps = aggregate(patches, grid, cfg, &OpticsConfig::default(), None, eta, Exec::default())?;
    Ok(match power {
        Power::Plus => maps.color_plus,
        Power::Minus => maps.color_minus,
    })
}

/// Sparse depth and confidence.
pub fn sparse_depth_map(
    patches: &[ConsistentPatch],
    grid: &PatchGrid,
    cfg: &FitConfig,
    optics: &OpticsConfig,
) -> Result<(Field, Field)> {
    let maps = aggregate(patches, grid, cfg, optics, None, None, Exec::default())?;
    Ok((maps.depth_sparse, maps.confidence))
}

pub fn dense_depth_map(
    patches: &[ConsistentPatch],
    grid: &PatchGrid,
    cfg: &FitConfig,
    optics: &OpticsConfig,
) -> Result<Field> {
    Ok(aggregate(patches, grid, cfg, optics, None, None, Exec::default())?.depth_dense)
}

/// Tiling of large images into overlapping blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub enabled: bool,
    /// Block side (px).
    pub block_size: usize,
    /// Patch rows and columns dropped along interior block sides.
    pub margin_patches: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            block_size: 147,
            margin_patches: 1,
        }
    }
}

impl BlockConfig {
    /// Block stride for patches of side `patch` at stride `stride`.
    pub fn stride(&self, patch: usize, stride: usize) -> Result<usize> {
        let s = self.block_size as i64 - patch as i64 + (1 - 2 * self.margin_patches as i64) * stride as i64;
        if s <= 0 {
            return Err(Error::Config(format!(
                "block stride {s} is not positive for block {} and {} margin patches",
                self.block_size, self.margin_patches
            )));
        }
        Ok(s as usize)
    }

    /// Number of blocks along an image side of `extent` px.
    pub fn count(&self, extent: usize, patch: usize, stride: usize) -> Result<usize> {
        if extent < self.block_size {
            return Err(Error::Shape(format!(
                "image side {extent} is smaller than the block side {}",
                self.block_size
            )));
        }
        let sb = self.stride(patch, stride)?;
        Ok((extent - self.block_size).div_ceil(sb) + 1)
    }

    /// Block start offsets along one side; the last block is flush with the edge.
    pub fn offsets(&self, extent: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
        let n = self.count(extent, patch, stride)?;
        let sb = self.stride(patch, stride)?;
        Ok((0..n).map(|b| (b * sb).min(extent - self.block_size)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs of the depth pipeline for one pair or one block of it.
#[derive(Clone, Debug)]
pub struct PairInputs {
    pub plus: RgbField,
    pub minus: RgbField,
    pub ustar: Option<Field>,
    pub zstar: Option<Field>,
}

impl PairInputs {
    pub fn width(&self) -> usize {
        self.plus.width
    }

    pub fn height(&self) -> usize {
        self.plus.height
    }

    pub fn validate(&self) -> Result<()> {
        if !self.plus.same_shape(&self.minus) {
            return Err(Error::Shape(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.plus.width, self.plus.height, self.minus.width, self.minus.height
            )));
        }
        for (name, f) in [("boundary distance", &self.ustar), ("depth", &self.zstar)] {
            if f.as_ref().is_some_and(|f| !f.same_shape(&self.plus)) {
                return Err(Error::Shape(format!("{name} target size differs from the images")));
            }
        }
        Ok(())
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            plus: self.plus.crop(x0, y0, w, h),
            minus: self.minus.crop(x0, y0, w, h),
            ustar: self.ustar.as_ref().map(|f| f.crop(x0, y0, w, h)),
            zstar: self.zstar.as_ref().map(|f| f.crop(x0, y0, w, h)),
        }
    }
}

/// Patch rows and columns to drop on each side: `[left, right, top, bottom]`.
pub type Margins = [usize; 4];

/// Keep-mask over a patch grid that drops the outermost patches on the
/// sides listed in `margins`.
pub fn margin_filter(grid: &PatchGrid, margins: Margins) -> Vec<bool> {
    let (nx, ny) = (grid.xs.len(), grid.ys.len());
    (0..grid.len())
        .map(|i| {
            let [cx, cy] = grid.cell(i);
            cx >= margins[0] && cx + margins[1] < nx && cy >= margins[2] && cy + margins[3] < ny
        })
        .collect()
}

/// Runs `pipeline` on every block and stitches the outputs by a per-pixel
/// mean over the blocks that cover each pixel.
pub fn process_blocks<F>(inputs: &PairInputs, bc: &BlockConfig, cfg: &FitConfig, pipeline: F) -> Result<GlobalMaps>
where
    F: Fn(&PairInputs, Margins) -> Result<GlobalMaps>,
{
    inputs.validate()?;
    let (w, h) = (inputs.width(), inputs.height());
    let xs = bc.offsets(w, cfg.patch_size, cfg.stride)?;
    let ys = bc.offsets(h, cfg.patch_size, cfg.stride)?;
    log::info!("block grid {}x{} of {}px blocks", xs.len(), ys.len(), bc.block_size);
    if xs.len() == 1 && ys.len() == 1 && w == bc.block_size && h == bc.block_size {
        return pipeline(inputs, [0; 4]);
    }
    let side = |v: &[usize], b: usize| -> [usize; 2] {
        let n = bc.margin_patches;
        [if b > 0 { n } else { 0 }, if b + 1 < v.len() { n } else { 0 }]
    };
    let mut sum = StitchAcc::new(w, h);
    for (by, &y0) in ys.iter().enumerate() {
        for (bx, &x0) in xs.iter().enumerate() {
            let [l, r] = side(&xs, bx);
            let [t, b] = side(&ys, by);
            log::debug!("block ({bx}, {by}) at ({x0}, {y0})");
            let block = inputs.crop(x0, y0, bc.block_size, bc.block_size);
            let maps = pipeline(&block, [l, r, t, b])?;
            sum.add(&maps, x0, y0);
        }
    }
    Ok(sum.finish())
}

struct StitchAcc {
    w: usize,
    h: usize,
    n: Vec<f64>,
    boundary: Vec<f64>,
    color: [Vec<Rgb>; 2],
    conf: Vec<f64>,
    coverage: Vec<f64>,
    sparse: Vec<(f64, f64)>,
    dense: Vec<(f64, f64)>,
}

impl StitchAcc {
    fn new(w: usize, h: usize) -> Self {
        let n = w * h;
        Self {
            w,
            h,
            n: vec![0.0; n],
            boundary: vec![0.0; n],
            color: [vec![[0.0; 3]; n], vec![[0.0; 3]; n]],
            conf: vec![0.0; n],
            coverage: vec![0.0; n],
            sparse: vec![(0.0, 0.0); n],
            dense: vec![(0.0, 0.0); n],
        }
    }

    fn add(&mut self, m: &GlobalMaps, x0: usize, y0: usize) {
        for y in 0..m.height() {
            for x in 0..m.width() {
                let k = y * m.width() + x;
                if m.coverage.data[k] == 0.0 {
                    continue;
                }
                let g = (y0 + y) * self.w + x0 + x;
                self.n[g] += 1.0;
                self.boundary[g] += m.boundary.data[k];
                self.conf[g] += m.confidence.data[k];
                self.coverage[g] += m.coverage.data[k];
                for (s, c) in [&m.color_plus, &m.color_minus].into_iter().enumerate() {
                    for ch in 0..3 {
                        self.color[s][g][ch] += c.data[k][ch];
                    }
                }
                for (acc, z) in [
                    (&mut self.sparse[g], m.depth_sparse.data[k]),
                    (&mut self.dense[g], m.depth_dense.data[k]),
                ] {
                    if z.is_finite() {
                        acc.0 += z;
                        acc.1 += 1.0;
                    }
                }
            }
        }
    }

    fn finish(self) -> GlobalMaps {
        let (w, h) = (self.w, self.h);
        let grid = |data: Vec<f64>| Grid {
            width: w,
            height: h,
            data,
        };
        let div = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(&self.n)
                .map(|(s, &n)| if n > 0.0 { s / n } else { 0.0 })
                .collect()
        };
        let ratio =
            |v: &[(f64, f64)]| -> Vec<f64> { v.iter().map(|&(s, n)| if n > 0.0 { s / n } else { f64::NAN }).collect() };
        let color = |s: usize| Grid {
            width: w,
            height: h,
            data: self.color[s]
                .iter()
                .zip(&self.n)
                .map(|(c, &n)| if n > 0.0 { c.map(|v| v / n) } else { [0.0; 3] })
                .collect(),
        };
        let color_plus = color(0);
        let derivative = grid(sobel(&color_plus.data, w, h));
        GlobalMaps {
            boundary: grid(div(&self.boundary)),
            color_minus: color(1),
            color_plus,
            derivative,
            depth_sparse: grid(ratio(&self.sparse)),
            depth_dense: grid(ratio(&self.dense)),
            confidence: grid(div(&self.conf)),
            coverage: grid(self.coverage),
        }
    }
}
