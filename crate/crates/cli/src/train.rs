use anyhow::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tilestream::network::{cross_entropy, Network, NetworkSpec};
use tilestream::stream::{plan_for_grid, stream_backward, stream_forward, PlanMode, TilePlan};
use tilestream::{Element, Tensor};

use crate::dataset::{synthetic, Dataset};

/// Small classifier in the style of the paper's reference network: three
/// conv/ReLU/pool stages and a linear head, streamed over the first two.
pub const DEMO_NET: &str = "\
split=6 dtype=f64
conv out=8 k=7 stride=1 bias
relu
maxpool k=2 stride=2
conv out=16 k=3 stride=1 bias
relu
maxpool k=2 stride=2
conv out=16 k=3 stride=1 bias
relu
maxpool k=2 stride=2
linear out=10
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Stream,
    Full,
    Both,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub samples: usize,
    pub side: usize,
    pub batch: usize,
    pub lr: f64,
    pub grid: Vec<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 0,
            mode: TrainMode::Both,
            samples: 60,
            side: 64,
            batch: 10,
            lr: 0.01,
            grid: vec![2, 2],
        }
    }
}

/// Loss and accuracy per epoch. Epoch 0 evaluates the initial weights; later
/// epochs report the mean training loss and accuracy seen during the epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_full: Option<f64>,
    pub loss_stream: Option<f64>,
    pub acc_full: Option<f64>,
    pub acc_stream: Option<f64>,
    pub abs_loss_diff: Option<f64>,
}

struct Learner<T: Element> {
    net: Network<T>,
    plan: Option<TilePlan>,
}

fn correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == label
        })
        .count()
}

impl<T: Element> Learner<T> {
    /// Loss and number of correct predictions; updates the weights when `lr` is given.
    fn pass(&mut self, x: &Tensor<T>, labels: &[usize], lr: Option<f64>) -> Result<(f64, usize)> {
        match &self.plan {
            Some(plan) => {
                let state = stream_forward(&self.net, x, plan)?;
                let (loss, g) = cross_entropy(state.prediction(), labels)?;
                let hits = correct(state.prediction(), labels);
                if let Some(lr) = lr {
                    let grads = stream_backward(&self.net, x, plan, state, &g, false)?.grads;
                    self.net.sgd_step(&grads, lr)?;
                }
                Ok((loss.as_f64(), hits))
            }
            None => {
                let store = self.net.forward_full(x)?;
                let (loss, g) = cross_entropy(store.prediction(), labels)?;
                let hits = correct(store.prediction(), labels);
                if let Some(lr) = lr {
                    let grads = self.net.backward_full(x, &store, &g, false)?;
                    self.net.sgd_step(&grads, lr)?;
                }
                Ok((loss.as_f64(), hits))
            }
        }
    }

    /// Mean loss and accuracy over `batches`, training when `lr` is given.
    fn epoch(&mut self, data: &Dataset<T>, batches: &[Vec<usize>], lr: Option<f64>) -> Result<(f64, f64)> {
        let (mut loss, mut hits) = (0.0, 0);
        for idx in batches {
            let picked = Dataset {
                images: idx.iter().map(|&i| data.images[i].clone()).collect(),
                labels: idx.iter().map(|&i| data.labels[i]).collect(),
            };
            let (x, labels) = picked.batch(0..idx.len());
            let (l, h) = self.pass(&x, &labels, lr)?;
            loss += l * idx.len() as f64;
            hits += h;
        }
        let n = data.len() as f64;
        Ok((loss / n, 100.0 * hits as f64 / n))
    }
}

/// Trains the demo network from one initialization in the requested modes,
/// visiting the same batches in the same order in each.
pub fn train_demo<T: Element>(opts: &TrainOptions) -> Result<Vec<EpochRow>> {
    let mut spec: NetworkSpec = DEMO_NET.parse()?;
    spec.dtype = T::DTYPE;
    let net = Network::<T>::init(&spec, &[1, opts.side, opts.side], opts.seed)?;
    let data = synthetic::<T>(opts.samples, opts.side, opts.seed ^ 0xda7a);
    let mut full = matches!(opts.mode, TrainMode::Full | TrainMode::Both).then(|| Learner {
        net: net.clone(),
        plan: None,
    });
    let mut stream = match opts.mode {
        TrainMode::Full => None,
        _ => Some(Learner {
            net,
            plan: Some(plan_for_grid(
                &spec,
                &[opts.side, opts.side],
                &opts.grid,
                PlanMode::Backward,
            )?),
        }),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5a4d);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(opts.epochs + 1);
    for epoch in 0..=opts.epochs {
        let lr = (epoch > 0).then_some(opts.lr);
        if epoch > 0 {
            order.shuffle(&mut rng);
        }
        let batches: Vec<Vec<usize>> = order.chunks(opts.batch.max(1)).map(<[usize]>::to_vec).collect();
        let mut row = EpochRow {
            epoch,
            ..EpochRow::default()
        };
        if let Some(l) = full.as_mut() {
            let (loss, acc) = l.epoch(&data, &batches, lr)?;
            row.loss_full = Some(loss);
            row.acc_full = Some(acc);
        }
        if let Some(l) = stream.as_mut() {
            let (loss, acc) = l.epoch(&data, &batches, lr)?;
            row.loss_stream = Some(loss);
            row.acc_stream = Some(acc);
        }
        if let (Some(a), Some(b)) = (row.loss_full, row.loss_stream) {
            row.abs_loss_diff = Some((a - b).abs());
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_give_identical_initial_loss() {
        let opts = TrainOptions {
            epochs: 0,
            samples: 10,
            ..TrainOptions::default()
        };
        let rows = train_demo::<f64>(&opts).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].loss_full, rows[0].loss_stream);
        assert!((rows[0].loss_full.unwrap() - 10f64.ln()).abs() < 2.0);
    }

    #[test]
    fn demo_net_streams_two_stages() {
        let spec: NetworkSpec = DEMO_NET.parse().unwrap();
        assert_eq!(spec.output_stride(), 4);
        let trace = tilestream::network::validate(&spec, &[1, 1, 64, 64]).unwrap();
        assert_eq!(trace.output(), &[1, 10]);
    }
}
