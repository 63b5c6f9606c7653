//! End-to-end depth estimation: local fits, joint refinement, aggregation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, margin_filter, process_blocks, BlockConfig, GlobalMaps, Margins, PairInputs};
use crate::error::Result;
use crate::fit::{
    fit_patch_local, initialize_consistent, refine_global, resolve_ownership, ConsistentPatch, FitConfig,
    GlobalTargets, PatchGrid, Profile,
};
use crate::optics::OpticsConfig;
use crate::par::Exec;
use crate::synth::mix_seed;

/// Wall-clock seconds per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub local: f64,
    pub init: f64,
    pub refine: f64,
    pub aggregate: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.local + self.init + self.refine + self.aggregate
    }

    fn add(&mut self, o: &StageTimings) {
        self.local += o.local;
        self.init += o.init;
        self.refine += o.refine;
        self.aggregate += o.aggregate;
    }
}

/// One pipeline pass over an image (or block).
#[derive(Clone, Debug)]
pub struct BlockRun {
    pub origin: [usize; 2],
    pub grid: PatchGrid,
    pub patches: Vec<ConsistentPatch>,
    pub loss_history: Vec<f64>,
    pub timings: StageTimings,
    pub maps: GlobalMaps,
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Fits and aggregates one image pair without tiling.
pub fn run_single(
    inputs: &PairInputs,
    cfg: &FitConfig,
    optics: &OpticsConfig,
    seed: u64,
    margins: Margins,
    exec: Exec,
) -> Result<BlockRun> {
    cfg.validate()?;
    optics.validate()?;
    inputs.validate()?;
    let grid = PatchGrid::new(inputs.width(), inputs.height(), cfg.patch_size, cfg.stride)?;
    let supervised = cfg.profile == Profile::Supervised;
    let targets = GlobalTargets {
        images: [&inputs.plus, &inputs.minus],
        ustar: inputs.ustar.as_ref().filter(|_| supervised),
        zstar: inputs.zstar.as_ref().filter(|_| supervised),
    };
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let local = exec.try_map_range(grid.len(), |i| {
        let o = grid.origin(i);
        let a = targets.patch_target(0, o, cfg.patch_size);
        let b = targets.patch_target(1, o, cfg.patch_size);
        fit_patch_local(&a, &b, cfg, mix_seed(seed, i as u64, 3))
    })?;
    timings.local = seconds(t);
    let flat = local
        .iter()
        .filter(|(a, b)| a.wedges.is_empty() && b.wedges.is_empty())
        .count();
    log::info!(
        "local stage: {} patches ({} flat) in {:.1}s",
        grid.len(),
        flat,
        timings.local
    );

    let t = Instant::now();
    let init = exec.try_map_range(grid.len(), |i| {
        initialize_consistent(
            &local[i],
            &targets,
            grid.origin(i),
            cfg,
            optics,
            mix_seed(seed, i as u64, 3),
        )
    })?;
    drop(local);
    timings.init = seconds(t);

    let t = Instant::now();
    let refined = refine_global(init, &grid, &targets, cfg, optics, exec)?;
    let mut patches = refined.patches;
    resolve_ownership(&mut patches, cfg);
    timings.refine = seconds(t);
    log::info!(
        "global stage: {} outer iterations in {:.1}s, loss {:.4e} -> {:.4e}",
        cfg.outer_iterations,
        timings.refine,
        refined.loss_history.first().copied().unwrap_or(f64::NAN),
        refined.loss_history.last().copied().unwrap_or(f64::NAN)
    );

    let t = Instant::now();
    let keep = margin_filter(&grid, margins);
    let maps = aggregate(&patches, &grid, cfg, optics, Some(&keep), None, exec)?;
    timings.aggregate = seconds(t);
    Ok(BlockRun {
        origin: [0, 0],
        grid,
        patches,
        loss_history: refined.loss_history,
        timings,
        maps,
    })
}

/// Result of a full run, possibly over several blocks.
#[derive(Clone, Debug)]
pub struct DepthRun {
    pub maps: GlobalMaps,
    pub blocks: Vec<BlockRun>,
    pub timings: StageTimings,
}

/// Estimates all global maps of a pair, tiling into blocks when the image
/// is larger than one block and tiling is enabled.
pub fn estimate_depth(
    inputs: &PairInputs,
    cfg: &FitConfig,
    blocks: &BlockConfig,
    optics: &OpticsConfig,
    seed: u64,
    exec: Exec,
) -> Result<DepthRun> {
    inputs.validate()?;
    let fits_one_block = inputs.width() <= blocks.block_size && inputs.height() <= blocks.block_size;
    if !blocks.enabled || fits_one_block {
        let run = run_single(inputs, cfg, optics, seed, [0; 4], exec)?;
        return Ok(DepthRun {
            maps: run.maps.clone(),
            timings: run.timings,
            blocks: vec![run],
        });
    }
    blocks.validate()?;
    let runs = std::sync::Mutex::new(Vec::new());
    let bx = blocks.count(inputs.width(), cfg.patch_size, cfg.stride)?;
    let by = blocks.count(inputs.height(), cfg.patch_size, cfg.stride)?;
    log::info!("block path: {bx}x{by} blocks (n_b = {bx} per side)");
    let xs = blocks.offsets(inputs.width(), cfg.patch_size, cfg.stride)?;
    let ys = blocks.offsets(inputs.height(), cfg.patch_size, cfg.stride)?;
    let origins: Vec<[usize; 2]> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect();
    let counter = std::sync::atomic::AtomicUsize::new(0);
    let maps = process_blocks(inputs, blocks, cfg, |block, margins| {
        let i = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let mut run = run_single(block, cfg, optics, mix_seed(seed, i as u64, 4), margins, exec)?;
        run.origin = origins[i];
        let maps = run.maps.clone();
        runs.lock().expect("block list lock").push(run);
        Ok(maps)
    })?;
    let blocks = runs.into_inner().expect("block list lock");
    let mut timings = StageTimings::default();
    blocks.iter().for_each(|b| timings.add(&b.timings));
    Ok(DepthRun { maps, blocks, timings })
}

/// Serializable record of the fitted patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub blocks: Vec<BlockDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDocument {
    pub origin: [usize; 2],
    pub grid_columns: usize,
    pub grid_rows: usize,
    pub loss_history: Vec<f64>,
    pub patches: Vec<PatchRecord>,
}

/// One patch as flat arrays: per wedge `[x, y]`, `[θ1, θ2]`, `η+`, `η−`,
/// and the colours with the background first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub origin: [usize; 2],
    pub vertices: Vec<f64>,
    pub angles: Vec<f64>,
    pub eta_plus: Vec<f64>,
    pub eta_minus: Vec<f64>,
    pub colors: Vec<f64>,
    pub loss: f64,
    pub seed: u64,
}

impl From<&ConsistentPatch> for PatchRecord {
    fn from(p: &ConsistentPatch) -> Self {
        Self {
            origin: p.origin,
            vertices: p.wedges.iter().flat_map(|w| w.geometry.vertex).collect(),
            angles: p
                .wedges
                .iter()
                .flat_map(|w| [w.geometry.theta1, w.geometry.theta2()])
                .collect(),
            eta_plus: p.wedges.iter().map(|w| w.eta[0]).collect(),
            eta_minus: p.wedges.iter().map(|w| w.eta[1]).collect(),
            colors: p.colors.iter().flatten().copied().collect(),
            loss: p.loss,
            seed: p.seed,
        }
    }
}

impl DepthRun {
    pub fn document(&self, cfg: &FitConfig) -> FitDocument {
        FitDocument {
            image_width: self.maps.width(),
            image_height: self.maps.height(),
            patch_size: cfg.patch_size,
            stride: cfg.stride,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDocument {
                    origin: b.origin,
                    grid_columns: b.grid.xs.len(),
                    grid_rows: b.grid.ys.len(),
                    loss_history: b.loss_history.clone(),
                    patches: b.patches.iter().map(PatchRecord::from).collect(),
                })
                .collect(),
        }
    }
}
