//! Rendering of wedge patches: alpha maps, colour compositing, boundary-centre
//! map, Sobel derivative map and the ridge-regression colour solve.
//!
//! The kernels are generic over [`Real`] so the fitter can differentiate
//! through them; the `*_map` functions are the plain `f64` entry points.

use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::geometry::{pixel_geometry, Heaviside, WedgeGeom, WedgePatch, MAX_WEDGES};
use crate::grid::{pixel_center, Field, Grid, Rgb, RgbField};
use crate::real::Real;

/// Default ridge weight of the colour solve.
pub const RIDGE_LAMBDA: f64 = 5e-3;
/// Default boundary stroke width (px).
pub const STROKE_DELTA: f64 = 1.0;

/// Smooth occupancy of a wedge from its signed distance.
#[inline]
pub fn alpha<T: Real>(d: T, eta: T) -> T {
    ((d / (eta * SQRT_2)).erf() + 1.0) * 0.5
}

pub fn alpha_map(d: &Field, eta: f64) -> Field {
    d.map(|v| alpha(v, eta))
}

/// Collective alphas `α_{l→i}` for `i = 0..=l` with the background `α_0 ≡ 1`.
#[inline]
pub fn collective_alphas<T: Real>(alphas: &[T], out: &mut [T]) {
    let l = alphas.len();
    let mut transmit = T::one();
    for i in (1..=l).rev() {
        out[i] = alphas[i - 1] * transmit;
        transmit *= T::one() - alphas[i - 1];
    }
    out[0] = transmit;
}

/// Per-pixel layers of a rendered patch.
#[derive(Clone, Debug)]
pub struct Layers<T> {
    pub width: usize,
    pub height: usize,
    /// Number of wedges `l`; `collective` stores `l + 1` entries per pixel.
    pub wedges: usize,
    pub collective: Vec<T>,
    pub masks: Vec<T>,
    pub boundary: Vec<T>,
}

impl<T: Real> Layers<T> {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn collective_at(&self, k: usize) -> &[T] {
        let n = self.wedges + 1;
        &self.collective[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn mask(&self, k: usize, i: usize) -> T {
        self.masks[k * self.wedges + i]
    }
}

/// Evaluates collective alphas, unoccluded masks and the boundary map.
pub fn rasterize<T: Real>(
    geoms: &[WedgeGeom<T>],
    etas: &[T],
    width: usize,
    height: usize,
    w_scale: f64,
    delta: f64,
    heaviside: Heaviside,
) -> Layers<T> {
    let l = geoms.len();
    debug_assert_eq!(l, etas.len());
    let npix = width * height;
    let mut collective = Vec::with_capacity(npix * (l + 1));
    let mut masks = Vec::with_capacity(npix * l);
    let mut boundary = Vec::with_capacity(npix);
    let mut alphas = [T::zero(); MAX_WEDGES];
    let mut coll = [T::zero(); MAX_WEDGES + 1];
    let inv_delta2 = 1.0 / (delta * delta);
    for yi in 0..height {
        for xi in 0..width {
            let (x, y) = pixel_center(xi, yi);
            let g = pixel_geometry(geoms, x, y, w_scale, heaviside);
            for i in 0..l {
                alphas[i] = alpha(g.d[i], etas[i]);
            }
            collective_alphas(&alphas[..l], &mut coll[..=l]);
            collective.extend_from_slice(&coll[..=l]);
            masks.extend_from_slice(&g.masks[..l]);
            boundary.push((-(g.u * g.u) * inv_delta2).exp());
        }
    }
    Layers {
        width,
        height,
        wedges: l,
        collective,
        masks,
        boundary,
    }
}

/// Collective alphas only; `masks` and `boundary` are left empty.
pub fn rasterize_collective<T: Real>(
    geoms: &[WedgeGeom<T>],
    etas: &[T],
    width: usize,
    height: usize,
    w_scale: f64,
) -> Layers<T> {
    let l = geoms.len();
    let mut collective = Vec::with_capacity(width * height * (l + 1));
    let mut alphas = [T::zero(); MAX_WEDGES];
    let mut coll = [T::zero(); MAX_WEDGES + 1];
    for yi in 0..height {
        for xi in 0..width {
            let (x, y) = pixel_center(xi, yi);
            for i in 0..l {
                alphas[i] = alpha(geoms[i].signed_distance(x, y, w_scale), etas[i]);
            }
            collective_alphas(&alphas[..l], &mut coll[..=l]);
            collective.extend_from_slice(&coll[..=l]);
        }
    }
    Layers {
        width,
        height,
        wedges: l,
        collective,
        masks: Vec::new(),
        boundary: Vec::new(),
    }
}

/// Accumulates `AᵀA` and `AᵀP` over one or more images sharing the colours.
#[derive(Clone, Debug)]
pub struct RidgeSystem<T> {
    k: usize,
    ata: Vec<T>,
    atp: Vec<[T; 3]>,
}

impl<T: Real> RidgeSystem<T> {
    pub fn new(columns: usize) -> Self {
        Self {
            k: columns,
            ata: vec![T::zero(); columns * columns],
            atp: vec![[T::zero(); 3]; columns],
        }
    }

    pub fn add_layers(&mut self, layers: &Layers<T>, target: &[Rgb]) {
        debug_assert_eq!(layers.wedges + 1, self.k);
        for (kp, p) in target.iter().enumerate() {
            let a = layers.collective_at(kp);
            self.add_row(a, p);
        }
    }

    #[inline]
    pub fn add_row(&mut self, a: &[T], p: &Rgb) {
        let k = self.k;
        for i in 0..k {
            for j in i..k {
                self.ata[i * k + j] += a[i] * a[j];
            }
            for c in 0..3 {
                self.atp[i][c] += a[i] * p[c];
            }
        }
    }

    /// Solves `(AᵀA + λI) x = AᵀP` for every channel.
    pub fn solve(&self, lambda: f64) -> Result<Vec<[T; 3]>> {
        let k = self.k;
        let mut m = vec![T::zero(); k * k];
        for i in 0..k {
            for j in i..k {
                m[i * k + j] = self.ata[i * k + j];
                m[j * k + i] = self.ata[i * k + j];
            }
            m[i * k + i] += T::cst(lambda);
        }
        let chol = cholesky(&m, k).ok_or(Error::DegenerateAlpha)?;
        let mut out = vec![[T::zero(); 3]; k];
        for c in 0..3 {
            let rhs: Vec<T> = self.atp.iter().map(|r| r[c]).collect();
            let x = cholesky_solve(&chol, k, &rhs);
            for i in 0..k {
                out[i][c] = x[i];
            }
        }
        Ok(out)
    }
}

/// Lower Cholesky factor of a symmetric positive definite `k×k` matrix.
pub(crate) fn cholesky<T: Real>(m: &[T], k: usize) -> Option<Vec<T>> {
    let scale = (0..k)
        .map(|i| m[i * k + i].value().abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut l = vec![T::zero(); k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = m[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if !(s.value() > 1e-12 * scale) {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

pub(crate) fn cholesky_solve<T: Real>(l: &[T], k: usize, b: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * k + p] * y[p];
        }
        y[i] = s / l[i * k + i];
    }
    let mut x = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for p in i + 1..k {
            s -= l[p * k + i] * x[p];
        }
        x[i] = s / l[i * k + i];
    }
    x
}

/// Composites colours `c_0..c_l` with the collective alphas.
pub fn composite<T: Real>(layers: &Layers<T>, colors: &[[T; 3]]) -> Vec<[T; 3]> {
    let k = layers.wedges + 1;
    (0..layers.pixels())
        .map(|kp| {
            let a = layers.collective_at(kp);
            let mut c = [T::zero(); 3];
            for i in 0..k {
                for ch in 0..3 {
                    c[ch] += colors[i][ch] * a[i];
                }
            }
            c
        })
        .collect()
}

/// Sobel gradient magnitude over all channels with replicate padding.
pub fn sobel<T: Real>(c: &[[T; 3]], width: usize, height: usize) -> Vec<T> {
    let at = |x: isize, y: isize| -> &[T; 3] {
        let cx = x.clamp(0, width as isize - 1) as usize;
        let cy = y.clamp(0, height as isize - 1) as usize;
        &c[cy * width + cx]
    };
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut s = T::zero();
            for ch in 0..3 {
                let gx = (at(x + 1, y - 1)[ch] + at(x + 1, y)[ch] * 2.0 + at(x + 1, y + 1)[ch])
                    - (at(x - 1, y - 1)[ch] + at(x - 1, y)[ch] * 2.0 + at(x - 1, y + 1)[ch]);
                let gy = (at(x - 1, y + 1)[ch] + at(x, y + 1)[ch] * 2.0 + at(x + 1, y + 1)[ch])
                    - (at(x - 1, y - 1)[ch] + at(x, y - 1)[ch] * 2.0 + at(x + 1, y - 1)[ch]);
                s += gx * gx + gy * gy;
            }
            out.push(s.sqrt());
        }
    }
    out
}

/// Everything derived from one wedge patch.
#[derive(Clone, Debug)]
pub struct RenderedPatch {
    pub alphas: Vec<Field>,
    /// `α_{l→i}` for `i = 0..=l`.
    pub collective: Vec<Field>,
    pub color: RgbField,
    pub boundary: Field,
    pub derivative: Field,
    pub delta: f64,
}

impl RenderedPatch {
    pub fn render(patch: &WedgePatch, delta: f64, w_scale: f64) -> Self {
        let geoms = patch.geoms();
        let etas: Vec<f64> = patch.wedges.iter().map(|w| w.eta).collect();
        let (w, h) = (patch.width, patch.height);
        let layers = rasterize(&geoms, &etas, w, h, w_scale, delta, Heaviside::Exact);
        let mut colors = vec![patch.background];
        colors.extend(patch.wedges.iter().map(|w| w.color));
        let color = Grid {
            width: w,
            height: h,
            data: composite(&layers, &colors),
        };
        let derivative = Grid {
            width: w,
            height: h,
            data: sobel(&color.data, w, h),
        };
        let l = patch.wedges.len();
        let alphas = (0..l)
            .map(|i| {
                let g = &geoms[i];
                Field::from_fn(w, h, |xi, yi| {
                    let (x, y) = pixel_center(xi, yi);
                    alpha(g.signed_distance(x, y, w_scale), etas[i])
                })
            })
            .collect();
        let collective = (0..=l)
            .map(|i| Grid {
                width: w,
                height: h,
                data: (0..w * h).map(|k| layers.collective_at(k)[i]).collect(),
            })
            .collect();
        Self {
            alphas,
            collective,
            color,
            boundary: Grid {
                width: w,
                height: h,
                data: layers.boundary,
            },
            derivative,
            delta,
        }
    }
}

pub fn composite_color_map(patch: &WedgePatch, w_scale: f64) -> RgbField {
    RenderedPatch::render(patch, STROKE_DELTA, w_scale).color
}

pub fn boundary_center_map(patch: &WedgePatch, delta: f64, w_scale: f64) -> Result<Field> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("stroke width must be positive, got {delta}")));
    }
    Ok(RenderedPatch::render(patch, delta, w_scale).boundary)
}

pub fn sobel_derivative_map(c: &RgbField) -> Result<Field> {
    if c.width < 3 || c.height < 3 {
        return Err(Error::Shape(format!(
            "Sobel needs at least 3x3, got {}x{}",
            c.width, c.height
        )));
    }
    Ok(Grid {
        width: c.width,
        height: c.height,
        data: sobel(&c.data, c.width, c.height),
    })
}

/// Ridge regression of wedge colours against an observed patch.
///
/// `collective` holds the maps `α_{l→0} … α_{l→l}`; the result is `c_0 … c_l`.
pub fn solve_colors_ridge(observed: &RgbField, collective: &[Field], lambda: f64) -> Result<Vec<Rgb>> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("ridge weight must be >= 0, got {lambda}")));
    }
    if collective.iter().any(|a| !a.same_shape(observed)) {
        return Err(Error::Shape("alpha maps and patch differ in size".into()));
    }
    let k = collective.len();
    let mut sys = RidgeSystem::<f64>::new(k);
    let mut row = vec![0.0; k];
    for (kp, p) in observed.data.iter().enumerate() {
        for i in 0..k {
            row[i] = collective[i].data[kp];
        }
        sys.add_row(&row, p);
    }
    sys.solve(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Wedge;

    fn half_plane(eta: f64) -> WedgePatch {
        // wedge covering x >= 3.5 (vertical boundary through x = 3.5)
        WedgePatch {
            wedges: vec![Wedge::new(
                [3.5, 3.5],
                -std::f64::consts::FRAC_PI_2,
                std::f64::consts::FRAC_PI_2,
                [0.9, 0.6, 0.2],
                eta,
            )
            .unwrap()],
            background: [0.1, 0.2, 0.3],
            width: 7,
            height: 7,
        }
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha(0.0, 1.0), 0.5);
        let v = alpha(SQRT_2 * 1.3, 1.3);
        assert!((v - 0.5 * (1.0 + libm::erf(1.0))).abs() < 1e-15);
        assert!((v - 0.92135).abs() < 1e-5);
        assert!((alpha(10.0 * 0.3, 0.3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composite_limits() {
        let p = half_plane(0.3);
        let c = composite_color_map(&p, 1.0);
        // column 0 centre is 3 px outside, column 6 is 3 px inside (10η)
        assert!((c.get(0, 3)[0] - 0.1).abs() < 1e-9);
        assert!((c.get(6, 3)[0] - 0.9).abs() < 1e-9);
        // the boundary x = 3.5 passes through the centres of column 3
        let p2 = half_plane(1.0);
        let c2 = composite_color_map(&p2, 1.0);
        for ch in 0..3 {
            let want = 0.5 * p2.wedges[0].color[ch] + 0.5 * p2.background[ch];
            assert!((c2.get(3, 2)[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_map_examples() {
        let p = half_plane(1.0);
        let b = boundary_center_map(&p, 1.0, 1.0).unwrap();
        assert!((b.get(3, 3) - 1.0).abs() < 1e-12); // u = 0
        assert!((b.get(4, 3) - (-1.0f64).exp()).abs() < 1e-12); // u = δ
        assert!((b.get(5, 3) - (-4.0f64).exp()).abs() < 1e-12); // u = 2δ
        assert!(boundary_center_map(&p, 0.0, 1.0).is_err());
    }

    #[test]
    fn sobel_examples() {
        let flat = Grid::filled(5, 5, [0.3, 0.3, 0.3]);
        assert!(sobel_derivative_map(&flat).unwrap().data.iter().all(|&v| v == 0.0));
        let step = Grid::from_fn(4, 4, |x, _| if x >= 2 { [1.0, 0.0, 0.0] } else { [0.0; 3] });
        let d = sobel_derivative_map(&step).unwrap();
        assert_eq!(d.get(1, 2), 4.0);
        assert_eq!(d.get(2, 2), 4.0);
        assert_eq!(d.get(0, 2), 0.0);
        let rot = Grid::from_fn(4, 4, |x, y| step.get(y, 3 - x));
        let dr = sobel_derivative_map(&rot).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(dr.get(x, y), d.get(y, 3 - x));
            }
        }
        assert!(sobel_derivative_map(&Grid::filled(2, 5, [0.0; 3])).is_err());
    }

    #[test]
    fn ridge_recovers_true_colors() {
        let patch = WedgePatch {
            wedges: vec![
                Wedge::new([2.0, 2.0], 0.1, 1.6, [0.8, 0.1, 0.4], 0.8).unwrap(),
                Wedge::new([6.0, 5.0], 2.5, 4.4, [0.2, 0.9, 0.5], 1.1).unwrap(),
            ],
            background: [0.3, 0.3, 0.7],
            width: 9,
            height: 9,
        };
        let r = RenderedPatch::render(&patch, 1.0, 1.0);
        let colors = solve_colors_ridge(&r.color, &r.collective, 0.0).unwrap();
        let want = [patch.background, patch.wedges[0].color, patch.wedges[1].color];
        for (got, want) in colors.iter().zip(want.iter()) {
            for ch in 0..3 {
                assert!((got[ch] - want[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ridge_rank_one_closed_form() {
        let n = 25;
        let v = 0.7;
        let lambda = 0.5;
        let obs = Grid::filled(5, 5, [v; 3]);
        let bg = Grid::filled(5, 5, 0.0);
        let fg = Grid::filled(5, 5, 1.0);
        let c = solve_colors_ridge(&obs, &[bg.clone(), fg.clone()], lambda).unwrap();
        assert!(c[0][0].abs() < 1e-15);
        assert!((c[1][0] - v * n as f64 / (n as f64 + lambda)).abs() < 1e-12);
        assert!(matches!(
            solve_colors_ridge(&obs, &[bg, fg.clone()], 0.0),
            Err(Error::DegenerateAlpha)
        ));
        let big = solve_colors_ridge(&obs, &[Grid::filled(5, 5, 0.5), fg], 1e12).unwrap();
        assert!(big.iter().flatten().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn partition_of_unity() {
        let a = [0.3, 0.8, 0.55];
        let mut out = [0.0; 4];
        collective_alphas(&a, &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(out[3], 0.55);
    }
}
