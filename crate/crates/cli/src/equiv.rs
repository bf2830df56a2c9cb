use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use tilestream::network::{sum_loss, GradientSet, Network};
use tilestream::ops::crop;
use tilestream::probe::{canonical_tile, probe};
use tilestream::stream::{plan_for_grid, plan_tiles, stream_backward, stream_forward, PlanMode};
use tilestream::{sten, DType, Element, Tensor};

/// Tolerances a streamed run must meet against the conventional passes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerance {
    pub forward_abs: f64,
    /// Absolute in f64, per-tensor relative (`max|a-b| / max|b|`) in f32.
    pub grad: f64,
    pub grad_is_relative: bool,
}

impl Tolerance {
    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::F64 => Tolerance {
                forward_abs: 1e-12,
                grad: 1e-10,
                grad_is_relative: false,
            },
            DType::F32 => Tolerance {
                forward_abs: 1e-5,
                grad: 1e-4,
                grad_is_relative: true,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDiff {
    pub layer: usize,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivReport {
    pub max_abs_forward_diff: f64,
    pub max_abs_grad_diff: f64,
    pub max_rel_grad_diff: f64,
    pub max_abs_input_grad_diff: f64,
    pub pass: bool,
    pub tiles: usize,
    pub grid: Vec<usize>,
    pub tile_size: Vec<usize>,
    pub overlap: Vec<usize>,
    pub tolerance: Tolerance,
    /// Per-layer worst parameter-gradient difference.
    pub layer_grad_diffs: Vec<LayerDiff>,
    /// Worst input-gradient difference inside each tile's input window, in
    /// tile order; locates where a bad plan goes wrong.
    pub tile_input_grad_diffs: Vec<f64>,
}

pub struct EquivOptions<'a> {
    pub grid: &'a [usize],
    /// Shrinks every probed backward width by this much before planning.
    /// Only useful as a negative control.
    pub reduce_overlap: usize,
    pub dump: Option<&'a Path>,
}

fn layer_diffs<T: Element>(a: &GradientSet<T>, b: &GradientSet<T>) -> Result<Vec<LayerDiff>> {
    let mut out = Vec::new();
    for (layer, (x, y)) in a.layers.iter().zip(&b.layers).enumerate() {
        if let (Some(x), Some(y)) = (x, y) {
            let mut worst = x.weight.max_abs_diff(&y.weight)?;
            if let (Some(bx), Some(by)) = (&x.bias, &y.bias) {
                worst = worst.max(bx.max_abs_diff(by)?);
            }
            out.push(LayerDiff {
                layer,
                max_abs_diff: worst,
            });
        }
    }
    Ok(out)
}

/// Runs the conventional and the streamed forward and backward passes on
/// `input` with a sum loss and compares them.
pub fn run_equiv<T: Element>(net: &Network<T>, input: &Tensor<T>, opts: &EquivOptions) -> Result<EquivReport> {
    let spec = net.spec();
    let size = input.spatial().to_vec();
    let plan = if opts.reduce_overlap == 0 {
        plan_for_grid(spec, &size, opts.grid, PlanMode::BackwardWithInput)?
    } else {
        let good = plan_for_grid(spec, &size, opts.grid, PlanMode::BackwardWithInput)?;
        let report = probe(spec, &canonical_tile(spec, size.len())?)?
            .with_reduced_backward_overlap(opts.reduce_overlap);
        plan_tiles(spec, &size, &good.tile_size, &report, PlanMode::BackwardWithInput)?
    };

    let full = net.forward_full(input)?;
    let (_, loss_grad) = sum_loss(full.prediction());
    let oracle = net.backward_full(input, &full, &loss_grad, true)?;
    let state = stream_forward(net, input, &plan)?;
    let forward_diff = state.prediction().max_abs_diff(full.prediction())?;
    let streamed_prediction = state.prediction().clone();
    let streamed = stream_backward(net, input, &plan, state, &loss_grad, true)?.grads;

    let abs = streamed.max_abs_diff(&oracle)?;
    let rel = streamed.max_rel_diff(&oracle)?;
    let dx = streamed.input.as_ref().context("streamed input gradient missing")?;
    let dx_ref = oracle.input.as_ref().context("input gradient missing")?;
    let input_diff = dx.max_abs_diff(dx_ref)?;
    let mut tile_diffs = Vec::with_capacity(plan.tile_count());
    for tile in &plan.tiles {
        tile_diffs.push(crop(dx, &tile.input)?.max_abs_diff(&crop(dx_ref, &tile.input)?)?);
    }

    let tol = Tolerance::for_dtype(T::DTYPE);
    let grad_measure = if tol.grad_is_relative { rel } else { abs };
    let pass = forward_diff <= tol.forward_abs && grad_measure <= tol.grad && {
        let input_measure = if tol.grad_is_relative {
            input_diff / dx_ref.max_abs().as_f64().max(f64::MIN_POSITIVE)
        } else {
            input_diff
        };
        input_measure <= tol.grad
    };

    if let Some(dir) = opts.dump {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        sten::write(&dir.join("prediction_full.sten"), full.prediction())?;
        sten::write(&dir.join("prediction_stream.sten"), &streamed_prediction)?;
        sten::write(&dir.join("input_grad_full.sten"), dx_ref)?;
        sten::write(&dir.join("input_grad_stream.sten"), dx)?;
        let diff = dx.zip_map(dx_ref, |a, b| (a - b).abs())?;
        sten::write(&dir.join("input_grad_absdiff.sten"), &diff)?;
        for (l, (a, b)) in streamed.layers.iter().zip(&oracle.layers).enumerate() {
            if let (Some(a), Some(b)) = (a, b) {
                sten::write(&dir.join(format!("layer{l}_weight_grad_stream.sten")), &a.weight)?;
                sten::write(&dir.join(format!("layer{l}_weight_grad_full.sten")), &b.weight)?;
            }
        }
    }

    Ok(EquivReport {
        max_abs_forward_diff: forward_diff,
        max_abs_grad_diff: abs,
        max_rel_grad_diff: rel,
        max_abs_input_grad_diff: input_diff,
        pass,
        tiles: plan.tile_count(),
        grid: plan.grid.clone(),
        tile_size: plan.tile_size.clone(),
        overlap: plan.overlap.clone(),
        tolerance: tol,
        layer_grad_diffs: layer_diffs(&streamed, &oracle)?,
        tile_input_grad_diffs: tile_diffs,
    })
}
