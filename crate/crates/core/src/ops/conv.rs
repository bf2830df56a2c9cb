//! Valid (unpadded) convolution over 1D or 2D spatial inputs.
//!
//! Every output element accumulates its products in a fixed
//! (in-channel, kernel-row, kernel-col) order and adds the bias last, so a
//! value computed from a cropped tile is bit-identical to the same value
//! computed from the whole image.

use crate::context;
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{as_2d, param_2d, Element, Tensor};

#[derive(Debug, Clone)]
pub struct ConvParams<T: Element> {
    /// (out_channels, in_channels, spatial...)
    pub kernel: Tensor<T>,
    /// (out_channels)
    pub bias: Option<Tensor<T>>,
    pub stride: Vec<usize>,
}

impl<T: Element> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>, stride: Vec<usize>) -> Result<Self> {
        let rank = kernel.rank();
        if rank != 3 && rank != 4 {
            return Err(Error::dim(format!(
                "kernel must be (out, in, spatial...) with 1 or 2 spatial dims, got {:?}",
                kernel.shape()
            )));
        }
        if stride.len() != rank - 2 || stride.iter().any(|&s| s == 0) {
            return Err(Error::dim(format!(
                "stride {stride:?} does not fit a {}-D kernel",
                rank - 2
            )));
        }
        if let Some(b) = &bias {
            b.expect_shape(&[kernel.shape()[0]])?;
        }
        Ok(Self {
            kernel,
            bias,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_extent(&self) -> &[usize] {
        &self.kernel.shape()[2..]
    }

    pub fn output_spatial(&self, input_spatial: &[usize]) -> Result<Vec<usize>> {
        valid_output_extent(input_spatial, self.kernel_extent(), &self.stride)
    }
}

/// `floor((in - k) / s) + 1` per dim; errors when the window does not fit.
pub fn valid_output_extent(input: &[usize], window: &[usize], stride: &[usize]) -> Result<Vec<usize>> {
    if input.len() != window.len() || input.len() != stride.len() {
        return Err(Error::dim(format!(
            "rank mismatch: input {input:?}, window {window:?}, stride {stride:?}"
        )));
    }
    input
        .iter()
        .zip(window)
        .zip(stride)
        .map(|((&n, &k), &s)| {
            if k == 0 || k > n {
                Err(Error::dim(format!(
                    "window {window:?} does not fit input extent {input:?}"
                )))
            } else {
                Ok((n - k) / s + 1)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
}

/// Rows per cache block for planes `width` elements wide.
fn row_block(width: usize) -> usize {
    const BLOCK_ELEMS: usize = 8192;
    (BLOCK_ELEMS / width.max(1)).max(1)
}

fn geometry<T: Element>(input_shape: &[usize], p: &ConvParams<T>) -> Result<Geometry> {
    if input_shape.len() != p.kernel.rank() {
        return Err(Error::dim(format!(
            "input {input_shape:?} and kernel {:?} have different ranks",
            p.kernel.shape()
        )));
    }
    if input_shape[1] != p.in_channels() {
        return Err(Error::dim(format!(
            "input has {} channels, kernel expects {}",
            input_shape[1],
            p.in_channels()
        )));
    }
    let spatial = &input_shape[2..];
    let out = p.output_spatial(spatial)?;
    let (h, w) = as_2d(spatial)?;
    let (kh, kw) = as_2d(p.kernel_extent())?;
    let (sh, sw) = param_2d(&p.stride, 1);
    let (oh, ow) = as_2d(&out)?;
    Ok(Geometry {
        batch: input_shape[0],
        cin: input_shape[1],
        h,
        w,
        cout: p.out_channels(),
        kh,
        kw,
        sh,
        sw,
        oh,
        ow,
    })
}

fn output_shape(input_shape: &[usize], g: &Geometry) -> Vec<usize> {
    let mut shape = vec![g.batch, g.cout];
    if input_shape.len() == 4 {
        shape.push(g.oh);
    }
    shape.push(g.ow);
    shape
}

pub fn conv_forward<T: Element>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), p)?;
    let shape = output_shape(input.shape(), &g);
    let mut out = vec![T::zero(); g.batch * g.cout * g.oh * g.ow];
    if context::is_shape_only() {
        return Ok(Tensor::wrap(shape, out));
    }
    let x = input.data();
    let k = p.kernel.data();
    let bias = p.bias.as_ref().map(|b| b.data());
    let rows = row_block(g.ow);
    for_each_chunk_mut(&mut out, g.oh * g.ow, |plane_idx, plane| {
        let (b, oc) = (plane_idx / g.cout, plane_idx % g.cout);
        for r0 in (0..g.oh).step_by(rows) {
            let r1 = (r0 + rows).min(g.oh);
            for ic in 0..g.cin {
                let xin = &x[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                        for oy in r0..r1 {
                            let row = &xin[(oy * g.sh + ky) * g.w..][..g.w];
                            let orow = &mut plane[oy * g.ow..][..g.ow];
                            if g.sw == 1 {
                                for (o, &xv) in orow.iter_mut().zip(&row[kx..kx + g.ow]) {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o = *o + wv * row[ox * g.sw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let bv = bias[oc];
            plane.iter_mut().for_each(|o| *o = *o + bv);
        }
    });
    Ok(Tensor::wrap(shape, out))
}

/// Parameter gradients of one convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Element> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        self.carry += if self.sum.abs() >= v.abs() {
            (self.sum - t) + v
        } else {
            (v - t) + self.sum
        };
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Unrounded parameter gradients of one convolution, for callers that add
/// several partial gradients before rounding once.
#[derive(Debug, Clone, PartialEq)]
pub struct WideConvGrads {
    pub kernel: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl WideConvGrads {
    pub fn add_assign(&mut self, other: &Self) {
        self.kernel.iter_mut().zip(&other.kernel).for_each(|(a, b)| *a += b);
        if let (Some(a), Some(b)) = (self.bias.as_mut(), other.bias.as_ref()) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }

    /// Rounds to `T` with the kernel shape of `p`.
    pub fn round<T: Element>(&self, p: &ConvParams<T>) -> ConvGrads<T> {
        ConvGrads {
            kernel: Tensor::wrap(
                p.kernel.shape().to_vec(),
                self.kernel.iter().map(|&v| T::from_f64(v)).collect(),
            ),
            bias: self
                .bias
                .as_ref()
                .map(|b| Tensor::wrap(vec![b.len()], b.iter().map(|&v| T::from_f64(v)).collect())),
        }
    }
}

/// `dW[o,i,j] = sum over batch and output positions p of dY[o,p] * X[i, p*stride + j]`.
pub fn conv_backward_kernel<T: Element>(
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    Ok(conv_backward_kernel_wide(input, grad_output, p)?.round(p))
}

/// [`conv_backward_kernel`] with the sums left in `f64`.
pub fn conv_backward_kernel_wide<T: Element>(
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<WideConvGrads> {
    let g = geometry(input.shape(), p)?;
    grad_output.expect_shape(&output_shape(input.shape(), &g))?;
    let per_oc = g.cin * g.kh * g.kw;
    let mut dw = vec![0.0f64; g.cout * per_oc];
    let mut db = p.bias.as_ref().map(|_| vec![0.0f64; g.cout]);
    if !context::is_shape_only() {
        let x = input.data();
        let dy = grad_output.data();
        let rows = row_block(g.ow);
        for_each_chunk_mut(&mut dw, per_oc, |oc, dw_oc| {
            // One lane per output column keeps the inner loop vectorisable;
            // each row block's lane total joins a compensated sum per tap.
            let mut totals = vec![CompensatedSum::default(); per_oc];
            let mut lanes = vec![0.0f64; g.ow];
            for b in 0..g.batch {
                let dplane = &dy[(b * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
                for r0 in (0..g.oh).step_by(rows) {
                    let r1 = (r0 + rows).min(g.oh);
                    for ic in 0..g.cin {
                        let xin = &x[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                lanes.iter_mut().for_each(|l| *l = 0.0);
                                for oy in r0..r1 {
                                    let drow = &dplane[oy * g.ow..][..g.ow];
                                    let row = &xin[(oy * g.sh + ky) * g.w..][..g.w];
                                    if g.sw == 1 {
                                        for ((l, &d), &xv) in
                                            lanes.iter_mut().zip(drow).zip(&row[kx..kx + g.ow])
                                        {
                                            *l += d.as_f64() * xv.as_f64();
                                        }
                                    } else {
                                        for (ox, (l, &d)) in lanes.iter_mut().zip(drow).enumerate() {
                                            *l += d.as_f64() * row[ox * g.sw + kx].as_f64();
                                        }
                                    }
                                }
                                totals[(ic * g.kh + ky) * g.kw + kx].add(lanes.iter().sum());
                            }
                        }
                    }
                }
            }
            for (slot, total) in dw_oc.iter_mut().zip(&totals) {
                *slot = total.value();
            }
        });
        if let Some(db) = db.as_mut() {
            for (oc, slot) in db.iter_mut().enumerate() {
                let mut acc = CompensatedSum::default();
                for b in 0..g.batch {
                    for &d in &dy[(b * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow] {
                        acc.add(d.as_f64());
                    }
                }
                *slot = acc.value();
            }
        }
    }
    Ok(WideConvGrads {
        kernel: dw,
        bias: db,
    })
}

/// Input gradient by scattering `w[j] * dY[p]` into `dX[p*stride + j]`.
///
/// `input_shape` is required because strided layers drop trailing input
/// positions that no window reaches; those receive zero gradient.
pub fn conv_backward_input<T: Element>(
    grad_output: &Tensor<T>,
    p: &ConvParams<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let g = geometry(input_shape, p)?;
    grad_output.expect_shape(&output_shape(input_shape, &g))?;
    let mut dx = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    if !context::is_shape_only() {
        let dy = grad_output.data();
        let k = p.kernel.data();
        let rows = row_block(g.w);
        for_each_chunk_mut(&mut dx, g.h * g.w, |plane_idx, plane| {
            let (b, ic) = (plane_idx / g.cin, plane_idx % g.cin);
            // Blocks of input rows; output row oy reaches input row oy*sh + ky.
            for y0 in (0..g.h).step_by(rows) {
                let y1 = (y0 + rows).min(g.h);
                for oc in 0..g.cout {
                    let dplane = &dy[(b * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
                    for ky in 0..g.kh {
                        let lo = y0.saturating_sub(ky).div_ceil(g.sh);
                        let hi = y1.saturating_sub(ky).div_ceil(g.sh).min(g.oh);
                        for kx in 0..g.kw {
                            let wv = k[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                            for oy in lo..hi {
                                let drow = &dplane[oy * g.ow..][..g.ow];
                                let xrow = &mut plane[(oy * g.sh + ky) * g.w..][..g.w];
                                if g.sw == 1 {
                                    for (xv, &d) in xrow[kx..kx + g.ow].iter_mut().zip(drow) {
                                        *xv = *xv + wv * d;
                                    }
                                } else {
                                    for (ox, &d) in drow.iter().enumerate() {
                                        let xv = &mut xrow[ox * g.sw + kx];
                                        *xv = *xv + wv * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(Tensor::wrap(input_shape.to_vec(), dx))
}

/// Zeros added on each side of the (dilated) output gradient before the
/// full convolution: `n - 1` for a kernel of extent `n`.
pub fn full_padding(kernel_extent: usize) -> usize {
    kernel_extent - 1
}

/// Inserts `stride - 1` zeros between gradient elements and pads each side
/// with `n - 1` zeros (plus the trailing positions a strided window never
/// reached), producing the operand of the flipped-kernel full convolution.
pub fn dilate_and_pad<T: Element>(
    grad_output: &Tensor<T>,
    p: &ConvParams<T>,
    input_spatial: &[usize],
) -> Result<Tensor<T>> {
    let (oh, ow) = as_2d(grad_output.spatial())?;
    let (h, w) = as_2d(input_spatial)?;
    let (kh, kw) = as_2d(p.kernel_extent())?;
    let (sh, sw) = param_2d(&p.stride, 1);
    let (dh, dw) = ((oh - 1) * sh + 1, (ow - 1) * sw + 1);
    // trailing input positions past the last window
    let (rh, rw) = (h - ((oh - 1) * sh + kh), w - ((ow - 1) * sw + kw));
    let (ph, pw) = (full_padding(kh), full_padding(kw));
    let (th, tw) = (dh + 2 * ph + rh, dw + 2 * pw + rw);
    let (batch, c) = (grad_output.batch(), grad_output.channels());
    let mut out = vec![T::zero(); batch * c * th * tw];
    if !context::is_shape_only() {
        let dy = grad_output.data();
        for plane in 0..batch * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[plane * th * tw + (ph + oy * sh) * tw + pw + ox * sw] =
                        dy[plane * oh * ow + oy * ow + ox];
                }
            }
        }
    }
    let mut shape = vec![batch, c];
    if input_spatial.len() == 2 {
        shape.push(th);
    }
    shape.push(tw);
    Ok(Tensor::wrap(shape, out))
}

/// Input gradient computed literally as a full convolution: the dilated,
/// zero-padded output gradient convolved with the spatially flipped kernel
/// whose in/out channel axes are swapped.
pub fn conv_backward_input_full<T: Element>(
    grad_output: &Tensor<T>,
    p: &ConvParams<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let g = geometry(input_shape, p)?;
    grad_output.expect_shape(&output_shape(input_shape, &g))?;
    let padded = dilate_and_pad(grad_output, p, &input_shape[2..])?;
    let k = p.kernel.data();
    let flipped = Tensor::from_fn(
        &[g.cin, g.cout, g.kh, g.kw],
        |idx| {
            let kx = idx % g.kw;
            let ky = (idx / g.kw) % g.kh;
            let oc = (idx / (g.kw * g.kh)) % g.cout;
            let ic = idx / (g.kw * g.kh * g.cout);
            k[((oc * g.cin + ic) * g.kh + (g.kh - 1 - ky)) * g.kw + (g.kw - 1 - kx)]
        },
    );
    let mut kshape = vec![g.cin, g.cout];
    kshape.extend_from_slice(p.kernel_extent());
    let stride = vec![1; p.stride.len()];
    let params = ConvParams::new(flipped.reshape(&kshape)?, None, stride)?;
    conv_forward(&padded, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, rand_tensor, scalar_loop};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, data.len()], data.to_vec()).unwrap()
    }

    fn params1(w: &[f64], stride: usize) -> ConvParams<f64> {
        ConvParams::new(
            Tensor::from_vec(&[1, 1, w.len()], w.to_vec()).unwrap(),
            None,
            vec![stride],
        )
        .unwrap()
    }

    #[test]
    fn forward_1d_matches_scalar_loop() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, -1.0];
        let expected = scalar_loop::conv1d(&x, &w, 1);
        assert_eq!(expected, vec![-2.0, -2.0]);
        let out = conv_forward(&t1(&x), &params1(&w, 1)).unwrap();
        assert_eq!(out.data(), expected.as_slice());
        assert_eq!(out.shape(), &[1, 1, 2]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = t1(&[0.5, -3.0, 2.25, 7.0, 1.0]);
        let out = conv_forward(&x, &params1(&[1.0], 1)).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn averaging_kernel_on_constant_input() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let p = ConvParams::new(k, None, vec![1, 1]).unwrap();
        let out = conv_forward(&x, &p).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_gradient_1d() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let dp = [1.0, 0.0];
        let expected = scalar_loop::conv1d_kernel_grad(&x, &dp, 3, 1);
        assert_eq!(expected, vec![1.0, 2.0, 3.0]);
        let p = params1(&[0.3, 0.1, -0.2], 1);
        let grads = conv_backward_kernel(&t1(&x), &t1(&dp), &p).unwrap();
        assert_eq!(grads.kernel.data(), expected.as_slice());
        assert!(grads.bias.is_none());

        let zero = conv_backward_kernel(&t1(&x), &t1(&[0.0, 0.0]), &p).unwrap();
        assert!(zero.kernel.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_1d() {
        let w = [1.0, 0.0, -1.0];
        let dp = [1.0, 0.0];
        let expected = scalar_loop::conv1d_input_grad(&dp, &w, 4, 1);
        assert_eq!(expected, vec![1.0, 0.0, -1.0, 0.0]);
        let p = params1(&w, 1);
        let dx = conv_backward_input(&t1(&dp), &p, &[1, 1, 4]).unwrap();
        assert_eq!(dx.data(), expected.as_slice());
        let full = conv_backward_input_full(&t1(&dp), &p, &[1, 1, 4]).unwrap();
        assert_eq!(full.data(), expected.as_slice());

        let zero = conv_backward_input(&t1(&[0.0, 0.0]), &p, &[1, 1, 4]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_convolution_pads_two_zeros_per_side_for_n3() {
        assert_eq!(full_padding(3), 2);
        let p = params1(&[1.0, 2.0, 3.0], 1);
        let dp = t1(&[5.0, 6.0]);
        let padded = dilate_and_pad(&dp, &p, &[4]).unwrap();
        assert_eq!(padded.data(), &[0.0, 0.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn dilation_for_stride_two() {
        // input 6, k 2, stride 2 -> 3 outputs, no trailing positions
        let p = params1(&[1.0, 1.0], 2);
        let padded = dilate_and_pad(&t1(&[1.0, 2.0, 3.0]), &p, &[6]).unwrap();
        assert_eq!(padded.data(), &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn bias_is_added_and_its_gradient_sums() {
        let k = Tensor::from_vec(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        let p = ConvParams::new(k, Some(b), vec![1]).unwrap();
        let x = t1(&[1.0, 2.0]);
        let out = conv_forward(&x, &p).unwrap();
        assert_eq!(out.data(), &[1.5, 2.5, 1.0, 3.0]);
        let dy = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grads = conv_backward_kernel(&x, &dy, &p).unwrap();
        assert_eq!(grads.bias.unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_errors() {
        let p = params1(&[1.0, 1.0, 1.0], 1);
        assert!(matches!(
            conv_forward(&t1(&[1.0, 2.0]), &p),
            Err(Error::Dimension(_))
        ));
        let two_ch = Tensor::<f64>::zeros(&[1, 2, 5]);
        assert!(conv_forward(&two_ch, &p).is_err());
        let x = t1(&[1.0, 2.0, 3.0, 4.0]);
        assert!(conv_backward_kernel(&x, &t1(&[1.0]), &p).is_err());
    }

    #[test]
    fn strided_2d_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor::<f64>(&mut rng, &[2, 3, 9, 8]);
        let k = rand_tensor::<f64>(&mut rng, &[4, 3, 3, 2]);
        let b = rand_tensor::<f64>(&mut rng, &[4]);
        let p = ConvParams::new(k.clone(), Some(b.clone()), vec![2, 3]).unwrap();
        let out = conv_forward(&x, &p).unwrap();
        let expected = scalar_loop::conv2d(&x, &k, Some(&b), (2, 3));
        assert_close(&out, &expected, 1e-12);
    }

    #[test]
    fn scatter_and_full_convolution_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, input) in [((1, 1), [7, 6]), ((2, 2), [9, 8]), ((2, 1), [10, 7])] {
            let k = rand_tensor::<f64>(&mut rng, &[3, 2, 3, 3]);
            let p = ConvParams::new(k, None, vec![stride.0, stride.1]).unwrap();
            let shape = [1, 2, input[0], input[1]];
            let out = p.output_spatial(&input).unwrap();
            let dy = rand_tensor::<f64>(&mut rng, &[1, 3, out[0], out[1]]);
            let a = conv_backward_input(&dy, &p, &shape).unwrap();
            let b = conv_backward_input_full(&dy, &p, &shape).unwrap();
            assert_close(&a, &b, 1e-12);
        }
    }
}
