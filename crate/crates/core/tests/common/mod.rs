#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::network::{GradientSet, LayerSpec, Network, NetworkSpec};
use tilestream::probe::canonical_tile;
use tilestream::{DType, Element, Tensor};

/// A random network together with an input extent it accepts.
#[derive(Debug, Clone)]
pub struct Case {
    pub spec: NetworkSpec,
    pub channels: usize,
    pub size: Vec<usize>,
    pub seed: u64,
}

impl Case {
    pub fn net<T: Element>(&self) -> Network<T> {
        let mut sample = vec![self.channels];
        sample.extend_from_slice(&self.size);
        Network::init(&self.spec, &sample, self.seed).unwrap()
    }

    pub fn input<T: Element>(&self, batch: usize) -> Tensor<T> {
        random_input(batch, self.channels, &self.size, self.seed ^ 0x5eed)
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.spec.dtype = dtype;
        self
    }
}

pub fn random_input<T: Element>(batch: usize, channels: usize, size: &[usize], seed: u64) -> Tensor<T> {
    let mut shape = vec![batch, channels];
    shape.extend_from_slice(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Draws a sequential network with a local prefix of at most `max_depth`
/// layers (conv kernels 1/3/5/7, strides 1/2, optional pools and ReLUs),
/// a random tail, and an input of rank `rank` no wider than `max_extent`.
pub fn random_case(seed: u64, rank: usize, max_depth: usize, max_extent: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let depth = rng.gen_range(1..=max_depth);
        let mut layers = Vec::with_capacity(depth + 3);
        let mut stride = 1;
        for _ in 0..depth {
            let roll: f64 = rng.gen();
            let s = if stride < 8 && rng.gen_bool(0.3) { 2 } else { 1 };
            if roll < 0.6 {
                let k = [1, 3, 5, 7][rng.gen_range(0..4)];
                layers.push(LayerSpec::Conv {
                    out: rng.gen_range(1..=3),
                    k,
                    stride: s,
                    bias: rng.gen_bool(0.5),
                });
            } else if roll < 0.8 {
                layers.push(LayerSpec::Relu);
            } else {
                let k = if s == 2 { 2 } else { rng.gen_range(2..=3) };
                layers.push(LayerSpec::MaxPool { k, stride: s });
            }
            stride *= s;
        }
        if !layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
            layers.insert(0, LayerSpec::Conv { out: 2, k: 3, stride: 1, bias: true });
        }
        let split = layers.len();
        match rng.gen_range(0..3) {
            0 => {}
            1 => layers.push(LayerSpec::Linear { out: 3 }),
            _ => {
                layers.push(LayerSpec::Conv { out: 2, k: 3, stride: 1, bias: true });
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::Linear { out: 2 });
            }
        }
        let spec = NetworkSpec::new(layers, split, DType::F64);
        let canon = canonical_tile(&spec, rank).unwrap()[0];
        let tail_room = 3 * spec.output_stride();
        if canon + tail_room > max_extent {
            continue;
        }
        let size = (0..rank)
            .map(|_| rng.gen_range(canon / 2 + tail_room..=max_extent.min(canon * 3)))
            .collect();
        return Case {
            spec,
            channels: rng.gen_range(1..=3),
            size,
            seed,
        };
    }
}

/// Largest absolute difference over every parameter gradient.
pub fn param_abs_diff<T: Element>(a: &GradientSet<T>, b: &GradientSet<T>) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.param_tensors().zip(b.param_tensors()) {
        worst = worst.max(x.max_abs_diff(y).unwrap());
    }
    assert_eq!(a.param_tensors().count(), b.param_tensors().count());
    worst
}

/// Largest per-tensor relative difference `max|a-b| / max|b|`.
pub fn param_rel_diff<T: Element>(a: &GradientSet<T>, b: &GradientSet<T>) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.param_tensors().zip(b.param_tensors()) {
        let scale = y.max_abs().as_f64();
        let diff = x.max_abs_diff(y).unwrap();
        worst = worst.max(if scale == 0.0 { diff } else { diff / scale });
    }
    worst
}

/// Property-test settings with a fixed seed, so every run draws the same cases.
pub fn fixed(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x7113_5eed),
        failure_persistence: None,
        ..Default::default()
    }
}
