use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::context;
use crate::ledger::Tracker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major array laid out as (batch, channels, spatial...).
///
/// Tensors are immutable once built; kernels construct their outputs in a
/// scratch `Vec` and wrap it at the end.
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    _tracker: Option<Tracker>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::wrap(shape.to_vec(), data))
    }

    pub(crate) fn wrap(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let bytes = (data.len() * std::mem::size_of::<T>()) as u64;
        Self {
            shape,
            data,
            _tracker: Tracker::attach(bytes),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self::wrap(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self::wrap(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self::wrap(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<T> {
        std::mem::take(&mut self.data)
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> u64 {
        (self.numel() * std::mem::size_of::<T>()) as u64
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extents (everything after batch and channels).
    pub fn spatial(&self) -> &[usize] {
        &self.shape[2.min(self.shape.len())..]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        let mut this = self;
        this.shape = shape.to_vec();
        Ok(this)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::wrap(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self::wrap(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs())))
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::wrap(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub(crate) fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!(
                "expected shape {shape:?}, found {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// True if both tensors have the same shape and bit-identical payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        if context::is_shape_only() {
            return Self::zeros(&self.shape);
        }
        Self::wrap(self.shape.clone(), self.data.clone())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("dtype", &T::DTYPE).field("shape", &self.shape);
        if self.numel() <= 16 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Axis-aligned box over the spatial dims of a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub origin: Vec<usize>,
    pub extent: Vec<usize>,
}

impl Region {
    pub fn new(origin: Vec<usize>, extent: Vec<usize>) -> Self {
        assert_eq!(origin.len(), extent.len());
        Self { origin, extent }
    }

    pub fn whole(extent: &[usize]) -> Self {
        Self::new(vec![0; extent.len()], extent.to_vec())
    }

    pub fn rank(&self) -> usize {
        self.origin.len()
    }

    pub fn numel(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.extent.iter().any(|&e| e == 0)
    }

    pub fn end(&self, dim: usize) -> usize {
        self.origin[dim] + self.extent[dim]
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        (0..self.rank()).all(|d| other.origin[d] >= self.origin[d] && other.end(d) <= self.end(d))
    }

    pub fn intersect(&self, other: &Region) -> Region {
        let mut origin = Vec::with_capacity(self.rank());
        let mut extent = Vec::with_capacity(self.rank());
        for d in 0..self.rank() {
            let lo = self.origin[d].max(other.origin[d]);
            let hi = self.end(d).min(other.end(d));
            origin.push(lo);
            extent.push(hi.saturating_sub(lo));
        }
        Region { origin, extent }
    }

    /// Shifts the region by `-offset` (moving into a frame that starts at `offset`).
    pub fn relative_to(&self, offset: &[usize]) -> Region {
        Region {
            origin: self.origin.iter().zip(offset).map(|(o, f)| o - f).collect(),
            extent: self.extent.clone(),
        }
    }

    pub fn translate(&self, offset: &[usize]) -> Region {
        Region {
            origin: self.origin.iter().zip(offset).map(|(o, f)| o + f).collect(),
            extent: self.extent.clone(),
        }
    }
}

/// Views a rank-1 or rank-2 spatial shape as (rows, cols).
pub(crate) fn as_2d(spatial: &[usize]) -> Result<(usize, usize)> {
    match spatial {
        [w] => Ok((1, *w)),
        [h, w] => Ok((*h, *w)),
        other => Err(Error::dim(format!(
            "only 1D and 2D spatial ranks are supported, got {:?}",
            other
        ))),
    }
}

/// Same as [`as_2d`] for a per-dim parameter (stride, window, origin).
pub(crate) fn param_2d(values: &[usize], pad: usize) -> (usize, usize) {
    match values {
        [w] => (pad, *w),
        [h, w] => (*h, *w),
        _ => unreachable!("validated by as_2d"),
    }
}
