use serde::Serialize;

use crate::context;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::ops::crop;
use crate::parallel::par_map;
use crate::tensor::{Element, Tensor};

use super::engine::{round_len, stream_backward, stream_forward};
use super::plan::{Tile, TilePlan};

/// Per-channel mean and standard deviation of split-layer activations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
    /// Set when rounding drove some variance below zero and it was clamped.
    pub clamped: bool,
}

/// Running per-channel sums in f64.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: u64,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            sum: vec![0.0; channels],
            sum_sq: vec![0.0; channels],
            count: 0,
        }
    }

    /// Adds every value of `t` (batch, channels, spatial...).
    pub fn add<T: Element>(&mut self, t: &Tensor<T>) -> Result<()> {
        if t.rank() < 3 || t.channels() != self.sum.len() {
            return Err(Error::dim(format!(
                "expected {} channels with spatial dims, got {:?}",
                self.sum.len(),
                t.shape()
            )));
        }
        let plane: usize = t.spatial().iter().product();
        for (i, chunk) in t.data().chunks(plane).enumerate() {
            let c = i % self.sum.len();
            for &v in chunk {
                let v = v.as_f64();
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += (t.batch() * plane) as u64;
        Ok(())
    }

    pub fn finish(&self) -> Result<ChannelStats> {
        if self.count == 0 {
            return Err(Error::Usage("no activations accumulated".into()));
        }
        let n = self.count as f64;
        let mut clamped = false;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = sq / n - m * m;
                if var < 0.0 {
                    clamped = true;
                }
                var.max(0.0).sqrt()
            })
            .collect();
        Ok(ChannelStats {
            mean,
            std,
            count: self.count,
            clamped,
        })
    }
}

fn tile_output<T: Element>(
    net: &Network<T>,
    input: &Tensor<T>,
    plan: &TilePlan,
    tile: &Tile,
) -> Result<Tensor<T>> {
    let x = crop(input, &tile.input)?;
    let y = net.run_layers(0..net.split(), &x)?;
    crop(&y, &tile.output_region.relative_to(&plan.footprint(tile).origin))
}

/// Split-layer channel statistics over `inputs`, computed tile by tile
/// without assembling the full activation map.
pub fn stream_stats<'a, T: Element>(
    net: &Network<T>,
    inputs: impl IntoIterator<Item = &'a Tensor<T>>,
    plan: &TilePlan,
) -> Result<ChannelStats> {
    let channels = net.trace(1)?.outputs[net.split() - 1][1];
    let mut acc = StatsAccumulator::new(channels);
    context::phase("stream_stats", || -> Result<()> {
        for input in inputs {
            crate::network::validate(net.spec(), input.shape())?;
            if input.spatial() != plan.input_size.as_slice() {
                return Err(Error::Usage(format!(
                    "input spatial size {:?} does not match the plan's {:?}",
                    input.spatial(),
                    plan.input_size
                )));
            }
            for round in plan.tiles.chunks(round_len()) {
                for y in par_map(round, |tile| tile_output(net, input, plan, tile)) {
                    acc.add(&y?)?;
                }
            }
        }
        Ok(())
    })?;
    acc.finish()
}

/// Turns an input gradient into a saliency map: max absolute value over
/// channels, clipped at the 99th percentile and scaled into [0, 1].
pub fn saliency_map<T: Element>(input_grad: &Tensor<T>) -> Result<Tensor<T>> {
    if input_grad.rank() < 3 || input_grad.batch() != 1 {
        return Err(Error::dim(format!(
            "saliency needs a single-sample gradient, got {:?}",
            input_grad.shape()
        )));
    }
    let spatial = input_grad.spatial().to_vec();
    let plane: usize = spatial.iter().product();
    let mut map = vec![T::zero(); plane];
    for chunk in input_grad.data().chunks(plane) {
        for (m, &g) in map.iter_mut().zip(chunk) {
            *m = m.max(g.abs());
        }
    }
    let mut sorted: Vec<f64> = map.iter().map(|v| v.as_f64()).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * plane as f64).ceil() as usize).clamp(1, plane);
    let clip = sorted[rank - 1];
    if clip > 0.0 {
        let clip = T::from_f64(clip);
        for m in &mut map {
            *m = m.min(clip) / clip;
        }
    }
    Tensor::from_vec(&spatial, map)
}

/// One-hot gradient for output entry `class` of a single-sample prediction.
pub fn class_gradient<T: Element>(prediction: &Tensor<T>, class: usize) -> Result<Tensor<T>> {
    let per_sample = prediction.numel() / prediction.batch().max(1);
    if prediction.batch() != 1 || class >= per_sample {
        return Err(Error::Usage(format!(
            "class {class} out of range for prediction {:?}",
            prediction.shape()
        )));
    }
    let mut g = vec![T::zero(); prediction.numel()];
    g[class] = T::one();
    Tensor::from_vec(prediction.shape(), g)
}

/// Saliency of `class` for a single input, using streamed passes.
pub fn saliency<T: Element>(
    net: &Network<T>,
    input: &Tensor<T>,
    plan: &TilePlan,
    class: usize,
) -> Result<Tensor<T>> {
    let state = stream_forward(net, input, plan)?;
    let g = class_gradient(state.prediction(), class)?;
    let grads = stream_backward(net, input, plan, state, &g, true)?;
    let input_grad = grads
        .grads
        .input
        .ok_or_else(|| Error::internal("streamed backward returned no input gradient"))?;
    saliency_map(&input_grad)
}
