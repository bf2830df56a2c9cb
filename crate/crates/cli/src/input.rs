use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream::{sten, Element, Tensor};

/// Where an input tensor comes from: a tensor file or seeded uniform noise.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    File(PathBuf),
    Random { size: Vec<usize>, seed: u64 },
}

impl FromStr for InputSource {
    type Err = anyhow::Error;

    /// `random:HxW:seed`, `random:W:seed`, or a path.
    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("random:") else {
            return Ok(InputSource::File(PathBuf::from(s)));
        };
        let (dims, seed) = rest
            .split_once(':')
            .with_context(|| format!("expected random:HxW:seed, got {s:?}"))?;
        Ok(InputSource::Random {
            size: parse_grid(dims)?,
            seed: seed.parse().with_context(|| format!("bad seed in {s:?}"))?,
        })
    }
}

impl InputSource {
    /// Loads (or generates, with `channels` channels) a single-sample input.
    pub fn load<T: Element>(&self, channels: usize) -> Result<Tensor<T>> {
        match self {
            InputSource::File(path) => {
                let t = sten::read::<T>(path)
                    .with_context(|| format!("reading input {}", path.display()))?;
                if t.rank() < 3 {
                    bail!("input tensor must be (batch, channels, spatial...), got {:?}", t.shape());
                }
                Ok(t)
            }
            InputSource::Random { size, seed } => Ok(random_tensor(1, channels, size, *seed)),
        }
    }
}

/// Uniform noise in [-1, 1) of shape (batch, channels, size...).
pub fn random_tensor<T: Element>(batch: usize, channels: usize, size: &[usize], seed: u64) -> Tensor<T> {
    let mut shape = vec![batch, channels];
    shape.extend_from_slice(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Parses `RxC` or a single number into per-dim extents.
pub fn parse_grid(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            let v: usize = p.trim().parse().with_context(|| format!("bad extent in {s:?}"))?;
            if v == 0 {
                bail!("zero extent in {s:?}");
            }
            Ok(v)
        })
        .collect()
}
