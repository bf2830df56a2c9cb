use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use tilestream::ledger::{self, Ledger};
use tilestream::network::{sum_loss, LayerSpec, Network, NetworkSpec};
use tilestream::stream::{plan_for, stream_backward, stream_forward, PlanMode, TilePlan};
use tilestream::{Element, Tensor};

use crate::input::random_tensor;

/// One measured forward and backward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub input: usize,
    pub tile: usize,
    pub n_tiles: usize,
    pub repeat: usize,
    /// Empty for shape-only runs, where no arithmetic is done.
    pub forward_ms: Option<f64>,
    pub backward_ms: Option<f64>,
    pub peak_bytes: u64,
    pub shape_only: bool,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub tiles: Vec<usize>,
    pub repeats: usize,
    pub channels: usize,
    pub seed: u64,
    /// Inputs wider than this are accounted without arithmetic.
    pub shape_only_above: usize,
}

/// Result of a single timed pass.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub n_tiles: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub peak_bytes: u64,
}

fn bench_input<T: Element>(channels: usize, spatial: &[usize], seed: u64, shape_only: bool) -> Tensor<T> {
    if shape_only {
        let mut shape = vec![1, channels];
        shape.extend_from_slice(spatial);
        ledger::shape_only(|| Tensor::zeros(&shape))
    } else {
        random_tensor(1, channels, spatial, seed)
    }
}

/// Runs `pass` under a fresh ledger and fills in its peak.
fn ledgered(shape_only: bool, pass: impl FnOnce() -> Result<Measurement>) -> Result<Measurement> {
    let ledger = Ledger::new();
    let mut m = ledger::scope(&ledger, || {
        if shape_only {
            ledger::shape_only(pass)
        } else {
            pass()
        }
    })?;
    m.peak_bytes = ledger.peak_bytes();
    Ok(m)
}

/// Times the conventional forward and backward pass on a square input of
/// side `size`. The input itself is not charged to the ledger.
pub fn measure_full<T: Element>(net: &Network<T>, size: usize, seed: u64, shape_only: bool) -> Result<Measurement> {
    let input = bench_input::<T>(net.sample_shape()[0], &[size, size], seed, shape_only);
    ledgered(shape_only, || {
        let t0 = Instant::now();
        let store = net.forward_full(&input)?;
        let forward_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let (_, g) = sum_loss(store.prediction());
        let grads = net.backward_full(&input, &store, &g, false)?;
        let backward_ms = t1.elapsed().as_secs_f64() * 1e3;
        drop((store, g, grads));
        Ok(Measurement {
            n_tiles: 1,
            forward_ms,
            backward_ms,
            peak_bytes: 0,
        })
    })
}

/// Times the streamed forward and backward pass over `plan`.
pub fn measure_streamed<T: Element>(net: &Network<T>, plan: &TilePlan, seed: u64, shape_only: bool) -> Result<Measurement> {
    let input = bench_input::<T>(net.sample_shape()[0], &plan.input_size, seed, shape_only);
    ledgered(shape_only, || {
        let t0 = Instant::now();
        let state = stream_forward(net, &input, plan)?;
        let forward_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let (_, g) = sum_loss(state.prediction());
        let grads = stream_backward(net, &input, plan, state, &g, false)?;
        let backward_ms = t1.elapsed().as_secs_f64() * 1e3;
        drop((g, grads));
        Ok(Measurement {
            n_tiles: plan.tile_count(),
            forward_ms,
            backward_ms,
            peak_bytes: 0,
        })
    })
}

/// Square tiles of side `tile`; a tile covering the input runs the
/// conventional passes instead.
pub fn measure<T: Element>(net: &Network<T>, size: usize, tile: usize, seed: u64, shape_only: bool) -> Result<Measurement> {
    if tile >= size {
        return measure_full(net, size, seed, shape_only);
    }
    let plan = plan_for(net.spec(), &[size, size], &[tile, tile], PlanMode::Backward)?;
    measure_streamed(net, &plan, seed, shape_only)
}

/// Every (size, tile, repeat) combination, in that order.
pub fn run_bench<T: Element>(spec: &NetworkSpec, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &size in &opts.sizes {
        let net = Network::<T>::init(spec, &[opts.channels, size, size], opts.seed)?;
        let shape_only = size > opts.shape_only_above;
        for &tile in &opts.tiles {
            for repeat in 0..opts.repeats {
                let m = measure(&net, size, tile, opts.seed, shape_only)?;
                rows.push(BenchRow {
                    input: size,
                    tile: tile.min(size),
                    n_tiles: m.n_tiles,
                    repeat,
                    forward_ms: (!shape_only).then_some(m.forward_ms),
                    backward_ms: (!shape_only).then_some(m.backward_ms),
                    peak_bytes: m.peak_bytes,
                    shape_only,
                });
            }
        }
    }
    Ok(rows)
}

/// Peak bytes of the conventional forward and backward pass from shapes
/// alone. While layer `l` is differentiated the ledger holds every stored
/// activation, the loss gradient, the gradients entering and leaving `l`,
/// and the parameter gradients of layers `l..`.
pub fn full_pass_closed_form(spec: &NetworkSpec, channels: usize, size: usize) -> Result<u64> {
    let trace = tilestream::network::validate(spec, &[1, channels, size, size])?;
    let numel = |s: &Vec<usize>| s.iter().product::<usize>() as u64;
    let outputs: Vec<u64> = trace.outputs.iter().map(numel).collect();
    let stored: u64 = outputs.iter().sum();
    let last = outputs.len() - 1;
    let params: Vec<u64> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let input = if l == 0 { &trace.input } else { &trace.outputs[l - 1] };
            match *layer {
                LayerSpec::Conv { out, k, bias, .. } => {
                    let taps = (k as u64).pow(input.len() as u32 - 2);
                    out as u64 * input[1] as u64 * taps + if bias { out as u64 } else { 0 }
                }
                LayerSpec::Linear { out } => (out as u64) * (numel(input) / input[0] as u64 + 1),
                _ => 0,
            }
        })
        .collect();
    let mut peak = stored;
    for l in (0..=last).rev() {
        let grad_in = if l < last { outputs[l] } else { 0 };
        let grad_out = if l > 0 { outputs[l - 1] } else { 0 };
        let param_grads: u64 = params[l..].iter().sum();
        peak = peak.max(stored + outputs[last] + grad_in + grad_out + param_grads);
    }
    Ok(peak * spec.dtype.size_of() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeats_have_identical_peaks() {
        let spec: NetworkSpec = "split=2 dtype=f64\nconv out=4 k=3\nconv out=2 k=3\n".parse().unwrap();
        let rows = run_bench::<f64>(
            &spec,
            &BenchOptions {
                sizes: vec![40],
                tiles: vec![40, 20],
                repeats: 3,
                channels: 2,
                seed: 1,
                shape_only_above: 1024,
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[..3].iter().all(|r| r.peak_bytes == rows[0].peak_bytes && r.n_tiles == 1));
        assert!(rows[3..].iter().all(|r| r.peak_bytes == rows[3].peak_bytes && r.n_tiles > 1));
        assert!(rows.iter().all(|r| r.forward_ms.is_some()));
    }

    #[test]
    fn shape_only_matches_real_accounting() {
        let spec: NetworkSpec = "split=2 dtype=f32\nconv out=4 k=3\nconv out=2 k=3\n".parse().unwrap();
        let net = Network::<f32>::init(&spec, &[3, 48, 48], 0).unwrap();
        for tile in [48, 20] {
            let real = measure(&net, 48, tile, 0, false).unwrap();
            let shapes = measure(&net, 48, tile, 0, true).unwrap();
            assert_eq!(real.peak_bytes, shapes.peak_bytes);
        }
    }

    #[test]
    fn closed_form_matches_the_ledger() {
        let spec: NetworkSpec = "split=3 dtype=f64\nconv out=4 k=3 bias\nrelu\nconv out=2 k=3\nlinear out=3\n"
            .parse()
            .unwrap();
        let net = Network::<f64>::init(&spec, &[2, 30, 30], 0).unwrap();
        let measured = measure_full(&net, 30, 0, false).unwrap().peak_bytes;
        assert_eq!(full_pass_closed_form(&spec, 2, 30).unwrap(), measured);
    }
}
