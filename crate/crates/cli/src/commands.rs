//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blurry_edges::aggregate::{GlobalMaps, PairInputs};
use blurry_edges::eval::{calibrate_linear, compute_metrics, valid_mask};
use blurry_edges::fit::FitConfig;
use blurry_edges::geometry::WedgePatch;
use blurry_edges::grid::Field;
use blurry_edges::io;
use blurry_edges::par::Exec;
use blurry_edges::pipeline::estimate_depth;
use blurry_edges::render::RenderedPatch;
use blurry_edges::synth::{generate_dataset, Manifest};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{EvalMask, RunConfig};
use crate::GlobalArgs;

pub fn effective_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(p) = g.profile {
        let FitConfig { profile, weights, .. } = FitConfig::for_profile(p);
        cfg.fit.profile = profile;
        cfg.fit.weights = weights;
    }
    Ok(cfg)
}

pub fn synth(mut cfg: RunConfig, count: Option<usize>, out: &Path) -> Result<()> {
    if let Some(n) = count {
        cfg.dataset.count = n;
    }
    let spec = cfg.dataset_spec();
    spec.validate()?;
    cfg.echo(out)?;
    let manifest = generate_dataset(&spec, out, Exec::Parallel)?;
    log::info!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    /// Image taken with the larger optical power (`.f32` raster or PNG).
    #[arg(long, requires = "minus", conflicts_with = "dataset")]
    plus: Option<PathBuf>,
    /// Image taken with the smaller optical power.
    #[arg(long, requires = "plus")]
    minus: Option<PathBuf>,
    /// Boundary-distance raster for the supervised profile.
    #[arg(long)]
    ustar: Option<PathBuf>,
    /// Depth raster for the supervised profile.
    #[arg(long)]
    zstar: Option<PathBuf>,
    /// Process every scene of a `synth` output directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// With `--dataset`, use the noiseless images.
    #[arg(long)]
    clean: bool,
}

fn read_opt_field(p: Option<&Path>) -> Result<Option<Field>> {
    p.map(|p| io::read_field(p).map_err(Into::into)).transpose()
}

pub fn depth(cfg: RunConfig, args: &DepthArgs, out: &Path) -> Result<()> {
    cfg.optics.validate()?;
    cfg.fit.validate()?;
    cfg.blocks.validate()?;
    cfg.echo(out)?;
    if let Some(dir) = &args.dataset {
        let manifest: Manifest = io::read_json(&dir.join("manifest.json"))?;
        for rec in &manifest.scenes {
            let f = &rec.files;
            let (p, m) = if args.clean {
                (&f.clean_plus, &f.clean_minus)
            } else {
                (&f.noisy_plus, &f.noisy_minus)
            };
            let inputs = PairInputs {
                plus: io::read_image(&dir.join(p))?,
                minus: io::read_image(&dir.join(m))?,
                ustar: Some(io::read_field(&dir.join(&f.boundary_distance))?),
                zstar: Some(io::read_field(&dir.join(&f.depth))?),
            };
            let scene_dir = out.join(format!("scene_{:04}", rec.index));
            log::info!("scene {}", rec.index);
            depth_one(&cfg, &inputs, &scene_dir)?;
        }
        return Ok(());
    }
    let (Some(plus), Some(minus)) = (&args.plus, &args.minus) else {
        bail!("depth needs --plus and --minus, or --dataset");
    };
    let inputs = PairInputs {
        plus: io::read_image(plus)?,
        minus: io::read_image(minus)?,
        ustar: read_opt_field(args.ustar.as_deref())?,
        zstar: read_opt_field(args.zstar.as_deref())?,
    };
    depth_one(&cfg, &inputs, out)
}

fn depth_one(cfg: &RunConfig, inputs: &PairInputs, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let run = estimate_depth(inputs, &cfg.fit, &cfg.blocks, &cfg.optics, cfg.seed, Exec::Parallel)?;
    let t = run.timings;
    log::info!(
        "timing: local {:.1}s, init {:.1}s, refine {:.1}s, aggregate {:.1}s, total {:.1}s",
        t.local,
        t.init,
        t.refine,
        t.aggregate,
        t.total()
    );
    write_maps(&run.maps, cfg, out)?;
    io::write_json(&out.join("fit.json"), &run.document(&cfg.fit))?;
    Ok(())
}

fn write_maps(m: &GlobalMaps, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (z0, z1) = (cfg.optics.z_min, cfg.optics.z_max);
    io::write_field(&out.join("boundary.f32"), &m.boundary)?;
    io::write_png8_gray(&out.join("boundary.png"), &m.boundary)?;
    io::write_rgb(&out.join("color_plus.f32"), &m.color_plus)?;
    io::write_png8_rgb(&out.join("color_plus.png"), &m.color_plus)?;
    io::write_rgb(&out.join("color_minus.f32"), &m.color_minus)?;
    io::write_png8_rgb(&out.join("color_minus.png"), &m.color_minus)?;
    io::write_field(&out.join("derivative.f32"), &m.derivative)?;
    io::write_field(&out.join("depth_sparse.f32"), &m.depth_sparse)?;
    io::write_depth_png(&out.join("depth_sparse.png"), &m.depth_sparse, z0, z1)?;
    io::write_field(&out.join("depth_dense.f32"), &m.depth_dense)?;
    io::write_depth_png(&out.join("depth_dense.png"), &m.depth_dense, z0, z1)?;
    io::write_field(&out.join("confidence.f32"), &m.confidence)?;
    io::write_png8_gray(&out.join("confidence.png"), &m.confidence)?;
    Ok(())
}

/// One row of the metrics table; metrics are NaN when the row is flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene: String,
    pub status: String,
    pub pixels: usize,
    pub rmse: f64,
    pub abs_rel: f64,
    pub abs_rel_x100: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

struct Pair {
    name: String,
    pred: PathBuf,
    confidence: PathBuf,
    truth: PathBuf,
}

fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<Pair>> {
    let manifest_path = gt.join("manifest.json");
    if manifest_path.exists() {
        let manifest: Manifest = io::read_json(&manifest_path)?;
        return Ok(manifest
            .scenes
            .iter()
            .map(|rec| {
                let name = format!("scene_{:04}", rec.index);
                Pair {
                    pred: pred.join(&name).join("depth_sparse.f32"),
                    confidence: pred.join(&name).join("confidence.f32"),
                    truth: gt.join(&rec.files.depth),
                    name,
                }
            })
            .collect());
    }
    Ok(vec![Pair {
        name: "scene".into(),
        pred: pred.join("depth_sparse.f32"),
        confidence: pred.join("confidence.f32"),
        truth: gt.join("depth.f32"),
    }])
}

fn flagged(name: &str, status: &str) -> MetricsRow {
    MetricsRow {
        scene: name.into(),
        status: status.into(),
        pixels: 0,
        rmse: f64::NAN,
        abs_rel: f64::NAN,
        abs_rel_x100: f64::NAN,
        delta1: f64::NAN,
        delta2: f64::NAN,
        delta3: f64::NAN,
    }
}

fn metrics_row(name: &str, z: &Field, zstar: &Field, mask: &[bool], cfg: &RunConfig) -> Result<MetricsRow> {
    let range = [cfg.optics.z_min, cfg.optics.z_max];
    match compute_metrics(z, zstar, mask, range, name) {
        Ok(r) => Ok(MetricsRow {
            scene: name.into(),
            status: "ok".into(),
            pixels: r.pixels,
            rmse: r.rmse,
            abs_rel: r.abs_rel,
            abs_rel_x100: r.abs_rel_x100,
            delta1: r.delta[0],
            delta2: r.delta[1],
            delta3: r.delta[2],
        }),
        Err(blurry_edges::Error::EmptyMask) => Ok(flagged(name, "no_valid_pixels")),
        Err(e) => Err(e.into()),
    }
}

pub fn eval(cfg: RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    cfg.echo(out)?;
    let mut rows = Vec::new();
    let (mut all_z, mut all_t) = (Vec::new(), Vec::new());
    for pair in eval_pairs(pred, gt)? {
        let z = io::read_field(&pair.pred)?;
        let zstar = io::read_field(&pair.truth)?;
        if !z.same_shape(&zstar) {
            bail!("{} and {} differ in size", pair.pred.display(), pair.truth.display());
        }
        let confidence = match cfg.eval.mask {
            EvalMask::Confident => Some(io::read_field(&pair.confidence)?),
            EvalMask::Valid => None,
        };
        let mask = valid_mask(
            &z,
            &zstar,
            confidence.as_ref().map(|c| (c, cfg.eval.confidence_threshold)),
        );
        let row = metrics_row(&pair.name, &z, &zstar, &mask, &cfg)?;
        if row.status != "ok" {
            log::warn!("{}: no valid pixels, row flagged", pair.name);
        }
        for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            all_z.push(z.data[k]);
            all_t.push(zstar.data[k]);
        }
        rows.push(row);
    }
    let n = all_z.len();
    let pooled = |v: Vec<f64>| Field {
        width: n,
        height: 1,
        data: v,
    };
    rows.push(metrics_row(
        "all",
        &pooled(all_z),
        &pooled(all_t),
        &vec![true; n],
        &cfg,
    )?);
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("cannot write {}", csv_path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    io::write_json(&out.join("metrics.json"), &rows)?;
    for r in &rows {
        println!(
            "{:<12} {:<16} px {:>6}  rmse {:.4} m  absrel {:.4}  delta {:.3} {:.3} {:.3}",
            r.scene, r.status, r.pixels, r.rmse, r.abs_rel, r.delta1, r.delta2, r.delta3
        );
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Measurement {
    predicted: f64,
    truth: f64,
}

pub fn calibrate(cfg: RunConfig, input: &Path, out: &Path) -> Result<()> {
    cfg.echo(out)?;
    let mut reader = csv::Reader::from_path(input).with_context(|| format!("cannot read {}", input.display()))?;
    let pairs = reader
        .deserialize::<Measurement>()
        .map(|r| r.map(|m| (m.predicted, m.truth)))
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("{}: expected columns predicted,truth", input.display()))?;
    let cal = calibrate_linear(&pairs)?;
    io::write_json(&out.join("calibration.json"), &cal)?;
    println!(
        "omega0 {:.6} omega1 {:.6} residual {:.3e}",
        cal.omega0, cal.omega1, cal.residual
    );
    Ok(())
}

pub fn render(cfg: RunConfig, patch: &Path, out: &Path) -> Result<()> {
    let p: WedgePatch = io::read_json(patch)?;
    p.validate(&cfg.fit.eta)?;
    std::fs::create_dir_all(out)?;
    let r = RenderedPatch::render(&p, cfg.fit.delta, cfg.fit.w_scale);
    io::write_png8_rgb(&out.join("render.png"), &r.color)?;
    io::write_rgb(&out.join("render.f32"), &r.color)?;
    io::write_png8_gray(&out.join("render_boundary.png"), &r.boundary)?;
    Ok(())
}
