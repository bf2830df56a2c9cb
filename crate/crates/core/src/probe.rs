//! Invalid border widths of the streamed prefix.
//!
//! [`probe`] measures them by pushing a constant tile through a copy of the
//! prefix whose kernels are replaced by all-ones windows (pools included),
//! embedded in a zero canvas that stands in for the surrounding image. With
//! unit weights every intermediate value is an exact small integer, so
//! "differs from the whole-image value" is an exact comparison.
//! [`analytic_overlap`] derives the same widths by propagating dependency
//! sets through the layer windows without any arithmetic.
//!
//! Forward widths are reported per layer output, relative to the tile's
//! footprint at that layer (`ceil(tile / stride)` positions). Tiles start
//! on the stride grid, so only the far side loses positions. Backward widths
//! are reported per layer *input*, in the frame of the tile's own activation
//! at that point: the number of rows or columns at each edge whose gradient
//! is incomplete when only the tile's share of the split-layer gradient is
//! backpropagated.

use serde::{Deserialize, Serialize};

use crate::context;
use crate::error::{Error, Result};
use crate::network::{layer_output_shape, NetworkSpec};
use crate::ops::{conv_backward_input, conv_forward, ConvParams};
use crate::tensor::{as_2d, Element, Region, Tensor};

/// Relative tolerance for [`non_max_indices`] on f64 data.
pub const EPSILON_F64: f64 = 1e-6;
/// Relative tolerance for [`non_max_indices`] on f32 data.
pub const EPSILON_F32: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOverlap {
    /// `(low, high)` per spatial dim, at the layer output.
    pub invalid_forward: Vec<(usize, usize)>,
    /// `(low, high)` per spatial dim, at the layer input.
    pub invalid_backward: Vec<(usize, usize)>,
    /// Cumulative stride at the layer output.
    pub stride: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// One entry per prefix layer.
    pub layers: Vec<LayerOverlap>,
    pub output_stride: Vec<usize>,
    pub tile_size_probed: Vec<usize>,
}

impl ProbeReport {
    pub fn rank(&self) -> usize {
        self.output_stride.len()
    }

    /// Input pixels per dim that consecutive tiles must share so their
    /// split-layer outputs meet without a gap.
    pub fn forward_overlap(&self) -> Vec<usize> {
        let last = self.layers.last().expect("non-empty prefix");
        (0..self.rank())
            .map(|d| {
                let (lo, hi) = last.invalid_forward[d];
                (lo + hi) * self.output_stride[d]
            })
            .collect()
    }

    /// Same widths and strides, ignoring the probed tile size.
    pub fn same_overlap(&self, other: &ProbeReport) -> bool {
        self.layers == other.layers && self.output_stride == other.output_stride
    }

    /// Copy with every backward width shrunk by `by` (saturating). Only for
    /// negative-control testing: plans built from it under-crop gradients.
    pub fn with_reduced_backward_overlap(&self, by: usize) -> ProbeReport {
        let mut r = self.clone();
        for l in &mut r.layers {
            for w in &mut l.invalid_backward {
                *w = (w.0.saturating_sub(by), w.1.saturating_sub(by));
            }
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Status {
    Valid,
    Invalid,
    /// Receives nothing even in the whole-image computation; matches either way.
    Wild,
}

/// Per-dim `(low, high)` counts of edge rows/columns that hold no valid
/// element. Wildcard-only lines do not end an edge run, and only runs ending
/// in an invalid line count. `status` covers `planes` copies of `extent`.
pub(crate) fn border_widths(extent: &[usize], status: &[Status]) -> Result<Vec<(usize, usize)>> {
    let (h, w) = as_2d(extent)?;
    let plane = h * w;
    if plane == 0 || status.len() % plane != 0 {
        return Err(Error::internal("status map does not match extent"));
    }
    let planes = status.len() / plane;
    let line = |axis: usize, i: usize| -> Status {
        let mut any_invalid = false;
        let count = if axis == 0 { w } else { h };
        for p in 0..planes {
            for j in 0..count {
                let at = p * plane + if axis == 0 { i * w + j } else { j * w + i };
                match status[at] {
                    Status::Valid => return Status::Valid,
                    Status::Invalid => any_invalid = true,
                    Status::Wild => {}
                }
            }
        }
        if any_invalid {
            Status::Invalid
        } else {
            Status::Wild
        }
    };
    let axes: Vec<(usize, usize)> = if extent.len() == 1 {
        vec![(1, w)]
    } else {
        vec![(0, h), (1, w)]
    };
    let mut widths = Vec::with_capacity(axes.len());
    for &(axis, n) in &axes {
        let lines: Vec<Status> = (0..n).map(|i| line(axis, i)).collect();
        let first_valid = lines.iter().position(|&s| s == Status::Valid).ok_or_else(|| {
            Error::TileTooSmall(format!("no valid position along an extent of {n}"))
        })?;
        let last_valid = lines.iter().rposition(|&s| s == Status::Valid).unwrap();
        let lo = lines[..first_valid]
            .iter()
            .rposition(|&s| s == Status::Invalid)
            .map_or(0, |i| i + 1);
        let hi = lines[last_valid + 1..]
            .iter()
            .position(|&s| s == Status::Invalid)
            .map_or(0, |i| n - (last_valid + 1 + i));
        widths.push((lo, hi));
    }
    let (lo_y, hi_y) = if extent.len() == 1 { (0, 0) } else { widths[0] };
    let (lo_x, hi_x) = *widths.last().unwrap();
    for p in 0..planes {
        for y in lo_y..h - hi_y {
            for x in lo_x..w - hi_x {
                if status[p * plane + y * w + x] == Status::Invalid {
                    return Err(Error::NonContiguousInvalidRegion(format!(
                        "invalid value at interior position ({y}, {x}) inside borders {widths:?}"
                    )));
                }
            }
        }
    }
    Ok(widths)
}

/// Per spatial dim, the `(low, high)` number of edge rows/columns whose
/// values are all below `max * (1 - epsilon)`. Fails if such values also
/// appear inside those borders.
pub fn non_max_indices<T: Element>(t: &Tensor<T>, epsilon: f64) -> Result<Vec<(usize, usize)>> {
    if t.rank() < 3 {
        return Err(Error::dim(format!(
            "expected (batch, channels, spatial...), got {:?}",
            t.shape()
        )));
    }
    let max = t
        .data()
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = max * (1.0 - epsilon);
    let status: Vec<Status> = t
        .data()
        .iter()
        .map(|v| {
            if v.as_f64() < threshold {
                Status::Invalid
            } else {
                Status::Valid
            }
        })
        .collect();
    border_widths(t.spatial(), &status)
}

/// `(window, stride)` of each prefix layer; pointwise layers are `(1, 1)`.
pub(crate) fn prefix_windows(spec: &NetworkSpec) -> Vec<(usize, usize)> {
    spec.prefix()
        .iter()
        .map(|l| l.window().expect("prefix layers are local"))
        .collect()
}

/// Cumulative stride before each layer (`strides[l]`) and after the last.
pub(crate) fn cumulative_strides(windows: &[(usize, usize)]) -> Vec<usize> {
    let mut s = vec![1];
    for &(_, stride) in windows {
        s.push(s.last().unwrap() * stride);
    }
    s
}

/// Input pixels seen by one split-layer output.
pub(crate) fn receptive_field(windows: &[(usize, usize)]) -> usize {
    let strides = cumulative_strides(windows);
    1 + windows
        .iter()
        .zip(&strides)
        .map(|(&(k, _), s)| (k - 1) * s)
        .sum::<usize>()
}

/// A stride-aligned tile size comfortably larger than four receptive fields.
/// Backward widths measured at any aligned size this large are the same.
pub fn canonical_tile(spec: &NetworkSpec, rank: usize) -> Result<Vec<usize>> {
    spec.check_structure()?;
    let windows = prefix_windows(spec);
    let s = spec.output_stride();
    let r = receptive_field(&windows);
    Ok(vec![s * (4 * r + s).div_ceil(s); rank])
}

struct Geometry {
    windows: Vec<(usize, usize)>,
    /// Cumulative strides, `len = layers + 1`.
    strides: Vec<usize>,
    /// Canvas margin on every side (multiple of the output stride).
    margin: usize,
}

fn geometry(spec: &NetworkSpec, tile: &[usize]) -> Result<Geometry> {
    spec.check_structure()?;
    if !(1..=2).contains(&tile.len()) || tile.contains(&0) {
        return Err(Error::dim(format!(
            "tile size must have 1 or 2 positive dims, got {tile:?}"
        )));
    }
    let mut shape = vec![1, 1];
    shape.extend_from_slice(tile);
    for (i, layer) in spec.prefix().iter().enumerate() {
        shape = layer_output_shape(i, layer, &shape)?;
    }
    let windows = prefix_windows(spec);
    let strides = cumulative_strides(&windows);
    let s = *strides.last().unwrap();
    let margin = s * (receptive_field(&windows).div_ceil(s) + 1);
    Ok(Geometry {
        windows,
        strides,
        margin,
    })
}

fn report(
    g: &Geometry,
    tile: &[usize],
    forward: Vec<Vec<(usize, usize)>>,
    backward: Vec<Vec<(usize, usize)>>,
) -> ProbeReport {
    let rank = tile.len();
    let layers = forward
        .into_iter()
        .zip(backward)
        .enumerate()
        .map(|(l, (invalid_forward, invalid_backward))| LayerOverlap {
            invalid_forward,
            invalid_backward,
            stride: vec![g.strides[l + 1]; rank],
        })
        .collect();
    ProbeReport {
        layers,
        output_stride: vec![*g.strides.last().unwrap(); rank],
        tile_size_probed: tile.to_vec(),
    }
}

fn ones_kernel(k: usize, stride: usize, rank: usize) -> ConvParams<f64> {
    let mut shape = vec![1, 1];
    shape.extend(std::iter::repeat(k).take(rank));
    ConvParams::new(Tensor::full(&shape, 1.0), None, vec![stride; rank])
        .expect("well-formed unit kernel")
}

fn with_layer(e: Error, l: usize) -> Error {
    match e {
        Error::TileTooSmall(m) => Error::TileTooSmall(format!("layer {l}: {m}")),
        Error::NonContiguousInvalidRegion(m) => {
            Error::NonContiguousInvalidRegion(format!("layer {l}: {m}"))
        }
        other => other,
    }
}

/// Measures invalid border widths of the prefix of `spec` for tiles of
/// `tile_size` (1 or 2 spatial dims). The spec and any network built from it
/// are left untouched; the probe works on its own unit-kernel copy.
pub fn probe(spec: &NetworkSpec, tile_size: &[usize]) -> Result<ProbeReport> {
    context::isolated(|| probe_inner(spec, tile_size))
}

fn probe_inner(spec: &NetworkSpec, tile: &[usize]) -> Result<ProbeReport> {
    let g = geometry(spec, tile)?;
    let rank = tile.len();
    let kernels: Vec<Option<ConvParams<f64>>> = g
        .windows
        .iter()
        .map(|&(k, s)| ((k, s) != (1, 1)).then(|| ones_kernel(k, s, rank)))
        .collect();
    let apply = |l: usize, x: &Tensor<f64>| -> Result<Tensor<f64>> {
        match &kernels[l] {
            Some(p) => conv_forward(x, p),
            None => Ok(x.clone()),
        }
    };
    let unapply = |l: usize, dy: &Tensor<f64>, input_shape: &[usize]| -> Result<Tensor<f64>> {
        match &kernels[l] {
            Some(p) => conv_backward_input(dy, p, input_shape),
            None => Ok(dy.clone()),
        }
    };

    let canvas: Vec<usize> = tile.iter().map(|t| t + 2 * g.margin).collect();
    let mut shape = vec![1, 1];
    shape.extend_from_slice(&canvas);
    let tile_region = Region::new(vec![g.margin; rank], tile.to_vec());
    let (ch, cw) = as_2d(&canvas)?;
    let mut x = Tensor::from_fn(&shape, |i| {
        let pos = if rank == 1 { vec![i % cw] } else { vec![i / cw, i % cw] };
        let inside = (0..rank).all(|d| {
            pos[d] >= tile_region.origin[d] && pos[d] < tile_region.end(d)
        });
        if inside {
            1.0
        } else {
            0.0
        }
    });
    debug_assert_eq!(x.numel(), ch * cw);

    // Forward: non-maximum borders of each layer's footprint.
    let mut forward = Vec::with_capacity(g.windows.len());
    for l in 0..g.windows.len() {
        x = apply(l, &x)?;
        let s = g.strides[l + 1];
        let footprint = Region::new(
            vec![g.margin / s; rank],
            tile.iter().map(|t| t.div_ceil(s)).collect(),
        );
        let view = crate::ops::crop(&x, &footprint)?;
        forward.push(non_max_indices(&view, 0.0).map_err(|e| with_layer(e, l))?);
    }

    // Backward: tile-only gradient against the whole-canvas gradient.
    let mut tile_shapes = vec![{
        let mut s = vec![1, 1];
        s.extend_from_slice(tile);
        s
    }];
    let mut canvas_shapes = vec![shape.clone()];
    for (l, layer) in spec.prefix().iter().enumerate() {
        let single = |shape: &[usize]| -> Result<Vec<usize>> {
            let mut s = layer_output_shape(l, layer, shape)?;
            s[1] = 1;
            Ok(s)
        };
        tile_shapes.push(single(&tile_shapes[l])?);
        canvas_shapes.push(single(&canvas_shapes[l])?);
    }
    let depth = g.windows.len();
    let mut g_tile = Tensor::full(&tile_shapes[depth], 1.0);
    let mut g_ref = Tensor::full(&canvas_shapes[depth], 1.0);
    let mut backward = vec![Vec::new(); depth];
    for l in (0..depth).rev() {
        g_tile = unapply(l, &g_tile, &tile_shapes[l])?;
        g_ref = unapply(l, &g_ref, &canvas_shapes[l])?;
        let offset = g.margin / g.strides[l];
        let window = Region::new(vec![offset; rank], tile_shapes[l][2..].to_vec());
        let reference = crate::ops::crop(&g_ref, &window)?;
        let status: Vec<Status> = g_tile
            .data()
            .iter()
            .zip(reference.data())
            .map(|(&t, &r)| {
                if r == 0.0 {
                    Status::Wild
                } else if t == r {
                    Status::Valid
                } else {
                    Status::Invalid
                }
            })
            .collect();
        backward[l] = border_widths(&tile_shapes[l][2..], &status).map_err(|e| with_layer(e, l))?;
    }
    Ok(report(&g, tile, forward, backward))
}

/// Dependency-set derivation of the same widths [`probe`] measures, one
/// spatial dim at a time and without tensor arithmetic.
pub fn analytic_overlap(spec: &NetworkSpec, tile_size: &[usize]) -> Result<ProbeReport> {
    let g = geometry(spec, tile_size)?;
    let depth = g.windows.len();
    let mut forward = vec![Vec::new(); depth];
    let mut backward = vec![Vec::new(); depth];
    for &t in tile_size {
        let (f, b) = analytic_1d(&g, t)?;
        for l in 0..depth {
            forward[l].push(f[l]);
            backward[l].push(b[l]);
        }
    }
    Ok(report(&g, tile_size, forward, backward))
}

fn out_len(n: usize, k: usize, s: usize) -> usize {
    if n < k {
        0
    } else {
        (n - k) / s + 1
    }
}

#[allow(clippy::type_complexity)]
fn analytic_1d(g: &Geometry, t: usize) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let depth = g.windows.len();
    // Tile extents and whole-canvas extents before each layer.
    let mut tile_len = vec![t];
    let mut canvas_len = vec![t + 2 * g.margin];
    for &(k, s) in &g.windows {
        tile_len.push(out_len(*tile_len.last().unwrap(), k, s));
        canvas_len.push(out_len(*canvas_len.last().unwrap(), k, s));
    }
    let forward = (0..depth)
        .map(|l| (0, t.div_ceil(g.strides[l + 1]) - tile_len[l + 1]))
        .collect();

    // Gradient at a canvas position is nonzero (`alive`) when some seeded
    // split output depends on it, and the tile reproduces it (`complete`)
    // when every alive dependant lies in the tile and is itself complete.
    let mut alive = vec![true; canvas_len[depth]];
    let start = |l: usize| g.margin / g.strides[l];
    let mut complete: Vec<bool> = (0..canvas_len[depth])
        .map(|q| q >= start(depth) && q < start(depth) + tile_len[depth])
        .collect();
    let mut backward = vec![(0, 0); depth];
    for l in (0..depth).rev() {
        let (k, s) = g.windows[l];
        let n_in = canvas_len[l];
        let (t0, t1) = (start(l), start(l) + tile_len[l]);
        let (o0, o1) = (start(l + 1), start(l + 1) + tile_len[l + 1]);
        let mut alive_in = vec![false; n_in];
        let mut complete_in = vec![false; n_in];
        for p in 0..n_in {
            let q_lo = (p + 1).saturating_sub(k).div_ceil(s);
            let q_hi = (p / s).min(alive.len().saturating_sub(1));
            let mut any = false;
            let mut all = p >= t0 && p < t1;
            for q in q_lo..=q_hi {
                if q * s > p || p >= q * s + k || !alive[q] {
                    continue;
                }
                any = true;
                all &= q >= o0 && q < o1 && complete[q];
            }
            alive_in[p] = any;
            complete_in[p] = all;
        }
        let status: Vec<Status> = (t0..t1)
            .map(|p| {
                if !alive_in[p] {
                    Status::Wild
                } else if complete_in[p] {
                    Status::Valid
                } else {
                    Status::Invalid
                }
            })
            .collect();
        backward[l] = border_widths(&[tile_len[l]], &status)
            .map_err(|e| with_layer(e, l))?[0];
        alive = alive_in;
        complete = complete_in;
    }
    Ok((forward, backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_spec;

    fn spec(body: &str, split: usize) -> NetworkSpec {
        parse_spec(&format!("split={split} dtype=f64\n{body}")).unwrap()
    }

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn non_max_examples() {
        let third = 1.0 / 3.0;
        let x = t1(&[third, 2.0 * third, 1.0, 1.0, 2.0 * third, third]);
        assert_eq!(non_max_indices(&x, EPSILON_F64).unwrap(), vec![(2, 2)]);
        assert_eq!(non_max_indices(&t1(&[5.0; 4]), EPSILON_F64).unwrap(), vec![(0, 0)]);
        assert!(matches!(
            non_max_indices(&t1(&[1.0, 0.5, 1.0]), EPSILON_F64),
            Err(Error::NonContiguousInvalidRegion(_))
        ));
    }

    #[test]
    fn non_max_2d_uses_whole_lines() {
        // Plateau in the middle, one low row on top and two low columns right.
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 5], |i| {
            let (y, x) = (i / 5, i % 5);
            if y == 0 || x >= 3 {
                0.5
            } else {
                1.0
            }
        });
        assert_eq!(non_max_indices(&x, 0.0).unwrap(), vec![(1, 0), (0, 2)]);
    }

    #[test]
    fn averaging_kernel_twice_gives_two_per_side() {
        // Scalar oracle: 1/3-kernel applied twice to ones with zero surround.
        let mut v = vec![0.0; 4];
        v.extend([1.0; 6]);
        v.extend([0.0; 4]);
        for _ in 0..2 {
            v = (0..v.len() - 2).map(|i| (v[i] + v[i + 1] + v[i + 2]) / 3.0).collect();
        }
        let mid = &v[2..8];
        assert_eq!(non_max_indices(&t1(mid), EPSILON_F64).unwrap(), vec![(2, 2)]);
    }

    #[test]
    fn wildcards_do_not_break_runs() {
        use Status::*;
        let s = [Invalid, Wild, Invalid, Valid, Wild, Valid, Wild, Invalid, Wild];
        assert_eq!(border_widths(&[9], &s).unwrap(), vec![(3, 2)]);
        assert!(matches!(
            border_widths(&[3], &[Invalid, Wild, Invalid]),
            Err(Error::TileTooSmall(_))
        ));
    }

    #[test]
    fn single_conv_k3() {
        let s = spec("conv out=2 k=3\n", 1);
        let r = probe(&s, &[12, 12]).unwrap();
        assert_eq!(r.forward_overlap(), vec![2, 2]);
        assert_eq!(r.layers[0].invalid_forward, vec![(0, 2); 2]);
        assert_eq!(r.layers[0].invalid_backward, vec![(2, 2); 2]);
        assert_eq!(r.output_stride, vec![1, 1]);
    }

    #[test]
    fn two_convs_overlap_four() {
        let s = spec("conv out=2 k=3\nrelu\nconv out=2 k=3\n", 3);
        let r = probe(&s, &[16]).unwrap();
        assert_eq!(r.forward_overlap(), vec![4]);
        assert_eq!(r.layers[2].invalid_backward, vec![(2, 2)]);
        assert_eq!(r.layers[0].invalid_backward, vec![(4, 4)]);
    }

    #[test]
    fn pointwise_kernel_has_no_overlap() {
        let s = spec("conv out=2 k=1\n", 1);
        let r = probe(&s, &[5, 5]).unwrap();
        assert_eq!(r.forward_overlap(), vec![0, 0]);
        assert_eq!(r.layers[0].invalid_backward, vec![(0, 0); 2]);
    }

    #[test]
    fn conv_pool_conv_overlap_six() {
        let s = spec("conv out=1 k=3\nmaxpool k=2 stride=2\nconv out=1 k=3\n", 3);
        let r = probe(&s, &[32]).unwrap();
        assert_eq!(r.forward_overlap(), vec![6]);
        assert_eq!(r.output_stride, vec![2]);
        assert!(r.same_overlap(&analytic_overlap(&s, &[32]).unwrap()));
    }

    #[test]
    fn strided_pointwise_after_conv_has_dead_positions() {
        let s = spec("conv out=1 k=3\nconv out=1 k=1 stride=2\n", 2);
        let p = probe(&s, &[20]).unwrap();
        let a = analytic_overlap(&s, &[20]).unwrap();
        assert!(p.same_overlap(&a), "{p:?} vs {a:?}");
        assert_eq!(p.layers[0].invalid_backward, vec![(1, 2)]);
    }

    #[test]
    fn too_small_tile() {
        let s = spec("conv out=1 k=3\nconv out=1 k=3\n", 2);
        assert!(matches!(probe(&s, &[5]), Err(Error::TileTooSmall(_))));
        assert!(matches!(probe(&s, &[4]), Err(Error::ShapeUnderflow { .. })));
    }

    #[test]
    fn split_zero_is_rejected() {
        let mut s = spec("conv out=1 k=3\n", 1);
        s.split = 0;
        assert!(matches!(analytic_overlap(&s, &[8]), Err(Error::Usage(_))));
        assert!(matches!(probe(&s, &[8]), Err(Error::Usage(_))));
    }

    #[test]
    fn probe_ignores_shape_only_mode() {
        let s = spec("conv out=1 k=3\n", 1);
        let r = context::shape_only(|| probe(&s, &[8]).unwrap());
        assert_eq!(r.forward_overlap(), vec![2]);
    }
}
