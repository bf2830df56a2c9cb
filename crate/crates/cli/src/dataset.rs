//! Seeded synthetic classification images.
//!
//! Each image is smooth low-frequency background noise with `label` small
//! checkerboard motifs stamped at random non-overlapping positions, so the
//! class can only be read from fine detail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::{Element, Tensor};

pub const CLASSES: usize = 10;
const MOTIF: usize = 4;

#[derive(Debug, Clone)]
pub struct Dataset<T: Element> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Element> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks samples `range` into one (batch, channels, H, W) tensor.
    pub fn batch(&self, range: std::ops::Range<usize>) -> (Tensor<T>, Vec<usize>) {
        let first = &self.images[range.start];
        let mut shape = first.shape().to_vec();
        shape[0] = range.len();
        let mut data = Vec::with_capacity(first.numel() * range.len());
        for img in &self.images[range.clone()] {
            data.extend_from_slice(img.data());
        }
        let t = Tensor::from_vec(&shape, data).expect("stacked shape");
        (t, self.labels[range].to_vec())
    }
}

fn stamp(img: &mut [f64], side: usize, y: usize, x: usize, phase: usize) {
    for dy in 0..MOTIF {
        for dx in 0..MOTIF {
            let v = if (dy + dx + phase) % 2 == 0 { 1.0 } else { -1.0 };
            img[(y + dy) * side + (x + dx)] = v;
        }
    }
}

/// `count` single-channel images of side `side`, labels cycling through the
/// classes so every class is represented.
pub fn synthetic<T: Element>(count: usize, side: usize, seed: u64) -> Dataset<T> {
    assert!(side >= 4 * MOTIF, "images too small for the motifs");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = side / (MOTIF + 2);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % CLASSES;
        let (fy, fx, amp): (f64, f64, f64) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.1..0.3));
        let mut img: Vec<f64> = (0..side * side)
            .map(|p| {
                let (y, x) = ((p / side) as f64, (p % side) as f64);
                let w = std::f64::consts::TAU / side as f64;
                amp * ((fy * w * y).sin() + (fx * w * x).cos()) + rng.gen_range(-0.05..0.05)
            })
            .collect();
        let mut slots: Vec<usize> = (0..cells * cells).collect();
        for k in 0..label {
            let j = rng.gen_range(k..slots.len());
            slots.swap(k, j);
            let (cy, cx) = (slots[k] / cells, slots[k] % cells);
            stamp(&mut img, side, cy * (MOTIF + 2) + 1, cx * (MOTIF + 2) + 1, rng.gen_range(0..2));
        }
        let data = img.into_iter().map(T::from_f64).collect();
        images.push(Tensor::from_vec(&[1, 1, side, side], data).expect("image shape"));
        labels.push(label);
    }
    Dataset { images, labels }
}
