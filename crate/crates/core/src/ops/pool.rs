use crate::context;
use crate::error::{Error, Result};
use crate::ops::conv::valid_output_extent;
use crate::tensor::{as_2d, param_2d, Element, Tensor};

/// Flat input index of the element selected by each pooling window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    pub indices: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

struct PoolGeometry {
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    out_shape: Vec<usize>,
}

fn pool_geometry(shape: &[usize], window: &[usize], stride: &[usize]) -> Result<PoolGeometry> {
    if shape.len() < 3 {
        return Err(Error::dim(format!("pooling needs (batch, channels, spatial...), got {shape:?}")));
    }
    let spatial = &shape[2..];
    let out = valid_output_extent(spatial, window, stride)?;
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::dim("pooling stride must be positive"));
    }
    let (h, w) = as_2d(spatial)?;
    let (kh, kw) = param_2d(window, 1);
    let (sh, sw) = param_2d(stride, 1);
    let (oh, ow) = as_2d(&out)?;
    let mut out_shape = shape[..2].to_vec();
    out_shape.extend_from_slice(&out);
    Ok(PoolGeometry {
        planes: shape[0] * shape[1],
        h,
        w,
        kh,
        kw,
        sh,
        sw,
        oh,
        ow,
        out_shape,
    })
}

/// Max pooling; ties resolve to the lowest flat index (row-major scan with a
/// strict comparison).
pub fn maxpool_forward<T: Element>(
    input: &Tensor<T>,
    window: &[usize],
    stride: &[usize],
) -> Result<(Tensor<T>, ArgmaxMap)> {
    let g = pool_geometry(input.shape(), window, stride)?;
    let n_out = g.planes * g.oh * g.ow;
    let mut out = vec![T::zero(); n_out];
    let mut idx = vec![0usize; n_out];
    if !context::is_shape_only() {
        let x = input.data();
        for plane in 0..g.planes {
            let base = plane * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut best = base + oy * g.sh * g.w + ox * g.sw;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let i = base + (oy * g.sh + ky) * g.w + ox * g.sw + kx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (plane * g.oh + oy) * g.ow + ox;
                    out[o] = x[best];
                    idx[o] = best;
                }
            }
        }
    }
    let map = ArgmaxMap {
        indices: idx,
        input_shape: input.shape().to_vec(),
        output_shape: g.out_shape.clone(),
    };
    Ok((Tensor::wrap(g.out_shape, out), map))
}

/// Scatter-adds `grad_output` into the positions recorded by the forward pass.
pub fn maxpool_backward<T: Element>(
    grad_output: &Tensor<T>,
    argmax: &ArgmaxMap,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    grad_output.expect_shape(&argmax.output_shape)?;
    if argmax.input_shape != input_shape {
        return Err(Error::internal(format!(
            "argmax map recorded for {:?}, asked to route into {input_shape:?}",
            argmax.input_shape
        )));
    }
    let numel: usize = input_shape.iter().product();
    let mut dx = vec![T::zero(); numel];
    if !context::is_shape_only() {
        for (&i, &g) in argmax.indices.iter().zip(grad_output.data()) {
            let slot = dx.get_mut(i).ok_or_else(|| {
                Error::internal(format!("argmax index {i} outside input of {numel} elements"))
            })?;
            *slot = *slot + g;
        }
    }
    Ok(Tensor::wrap(input_shape.to_vec(), dx))
}

/// Average pooling. Used by the overlap probe as the averaging stand-in for
/// max pooling.
pub fn avgpool_forward<T: Element>(
    input: &Tensor<T>,
    window: &[usize],
    stride: &[usize],
) -> Result<Tensor<T>> {
    let g = pool_geometry(input.shape(), window, stride)?;
    let mut out = vec![T::zero(); g.planes * g.oh * g.ow];
    let norm = T::from_f64(1.0 / (g.kh * g.kw) as f64);
    let x = input.data();
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        acc = acc + x[base + (oy * g.sh + ky) * g.w + ox * g.sw + kx];
                    }
                }
                out[(plane * g.oh + oy) * g.ow + ox] = acc * norm;
            }
        }
    }
    Ok(Tensor::wrap(g.out_shape, out))
}

pub fn avgpool_backward<T: Element>(
    grad_output: &Tensor<T>,
    window: &[usize],
    stride: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let g = pool_geometry(input_shape, window, stride)?;
    grad_output.expect_shape(&g.out_shape)?;
    let norm = T::from_f64(1.0 / (g.kh * g.kw) as f64);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    let dy = grad_output.data();
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dy[(plane * g.oh + oy) * g.ow + ox] * norm;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let slot = &mut dx[base + (oy * g.sh + ky) * g.w + ox * g.sw + kx];
                        *slot = *slot + d;
                    }
                }
            }
        }
    }
    Ok(Tensor::wrap(input_shape.to_vec(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, data.len()], data.to_vec()).unwrap()
    }

    /// Exhaustive window scan: first maximum in row-major order.
    fn scan_oracle(x: &[f64], h: usize, w: usize, k: usize, s: usize) -> (Vec<f64>, Vec<usize>) {
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut vals = vec![];
        let mut idx = vec![];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut cands = vec![];
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (oy * s + ky) * w + ox * s + kx;
                        cands.push((x[i], i));
                    }
                }
                let m = cands.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
                let first = cands.iter().find(|c| c.0 == m).unwrap();
                vals.push(first.0);
                idx.push(first.1);
            }
        }
        (vals, idx)
    }

    #[test]
    fn forward_1d_with_tie() {
        let (out, map) = maxpool_forward(&t1(&[1.0, 3.0, 2.0, 2.0]), &[2], &[2]).unwrap();
        assert_eq!(out.data(), &[3.0, 2.0]);
        assert_eq!(map.indices, vec![1, 2]);
    }

    #[test]
    fn constant_input_selects_first_index() {
        let (out, map) = maxpool_forward(&t1(&[4.0; 6]), &[3], &[3]).unwrap();
        assert_eq!(out.data(), &[4.0, 4.0]);
        assert_eq!(map.indices, vec![0, 3]);
    }

    #[test]
    fn ramp_2d_picks_bottom_right() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let t = Tensor::from_vec(&[1, 1, 4, 4], x.clone()).unwrap();
        let (out, map) = maxpool_forward(&t, &[2, 2], &[2, 2]).unwrap();
        let (vals, idx) = scan_oracle(&x, 4, 4, 2, 2);
        assert_eq!(out.data(), vals.as_slice());
        assert_eq!(map.indices, idx);
        assert_eq!(map.indices, vec![5, 7, 13, 15]);
    }

    #[test]
    fn window_larger_than_input() {
        assert!(matches!(
            maxpool_forward(&t1(&[1.0, 2.0]), &[3], &[1]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_scatters() {
        let map = ArgmaxMap {
            indices: vec![1, 2],
            input_shape: vec![1, 1, 4],
            output_shape: vec![1, 1, 2],
        };
        let dx = maxpool_backward(&t1(&[1.0, 1.0]), &map, &[1, 1, 4]).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 1.0, 0.0]);
        let zero = maxpool_backward(&t1(&[0.0, 0.0]), &map, &[1, 1, 4]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlapping_windows_accumulate() {
        let map = ArgmaxMap {
            indices: vec![0, 0],
            input_shape: vec![1, 1, 3],
            output_shape: vec![1, 1, 2],
        };
        let dx = maxpool_backward(&t1(&[1.0, 2.0]), &map, &[1, 1, 3]).unwrap();
        assert_eq!(dx.data(), &[3.0, 0.0, 0.0]);

        let x = t1(&[1.0, 5.0, 0.0]);
        let (_, map) = maxpool_forward(&x, &[2], &[1]).unwrap();
        assert_eq!(map.indices, vec![1, 1]);
        let dx = maxpool_backward(&t1(&[1.0, 2.0]), &map, x.shape()).unwrap();
        assert_eq!(dx.data(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn out_of_bounds_argmax_is_internal_error() {
        let map = ArgmaxMap {
            indices: vec![9],
            input_shape: vec![1, 1, 4],
            output_shape: vec![1, 1, 1],
        };
        assert!(matches!(
            maxpool_backward(&t1(&[1.0]), &map, &[1, 1, 4]),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn disjoint_windows_preserve_gradient_mass() {
        let x: Vec<f64> = (0..36).map(|v| ((v * 7919) % 13) as f64).collect();
        let t = Tensor::from_vec(&[1, 1, 6, 6], x).unwrap();
        let (out, map) = maxpool_forward(&t, &[2, 2], &[2, 2]).unwrap();
        let g = Tensor::from_fn(out.shape(), |i| i as f64 * 0.5 - 1.0);
        let dx = maxpool_backward(&g, &map, t.shape()).unwrap();
        assert_eq!(dx.sum(), g.sum());
    }

    #[test]
    fn avgpool_adjoint() {
        let x = t1(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = avgpool_forward(&x, &[2], &[1]).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5]);
        let g = t1(&[1.0, 0.0, 0.0, 2.0]);
        let dx = avgpool_backward(&g, &[2], &[1], x.shape()).unwrap();
        assert_eq!(dx.data(), &[0.5, 0.5, 0.0, 1.0, 1.0]);
    }
}
