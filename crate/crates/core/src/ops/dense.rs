use crate::context;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    if context::is_shape_only() {
        return Tensor::zeros(input.shape());
    }
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if context::is_shape_only() {
        input.expect_shape(grad_output.shape())?;
        return Ok(Tensor::zeros(input.shape()));
    }
    input.zip_map(grad_output, |x, g| if x > T::zero() { g } else { T::zero() })
}

#[derive(Debug, Clone)]
pub struct LinearParams<T: Element> {
    /// (out_features, in_features)
    pub weight: Tensor<T>,
    /// (out_features)
    pub bias: Tensor<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::dim(format!(
                "linear weight must be (out, in), got {:?}",
                weight.shape()
            )));
        }
        bias.expect_shape(&[weight.shape()[0]])?;
        Ok(Self { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn features<T: Element>(input: &Tensor<T>, p: &LinearParams<T>) -> Result<(usize, usize)> {
    let batch = input.batch();
    let f = input.numel() / batch;
    if f != p.in_features() {
        return Err(Error::dim(format!(
            "linear layer expects {} input features, got {f} from shape {:?}",
            p.in_features(),
            input.shape()
        )));
    }
    Ok((batch, f))
}

/// `y[b, o] = sum_f W[o, f] x[b, f] + bias[o]`; non-batch dims are flattened.
pub fn linear_forward<T: Element>(input: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let (batch, f) = features(input, p)?;
    let out_f = p.out_features();
    let mut out = vec![T::zero(); batch * out_f];
    if !context::is_shape_only() {
        let x = input.data();
        let w = p.weight.data();
        let bias = p.bias.data();
        for b in 0..batch {
            let xb = &x[b * f..][..f];
            for o in 0..out_f {
                let acc = w[o * f..][..f]
                    .iter()
                    .zip(xb)
                    .fold(T::zero(), |acc, (&wv, &xv)| acc + wv * xv);
                out[b * out_f + o] = acc + bias[o];
            }
        }
    }
    Ok(Tensor::wrap(vec![batch, out_f], out))
}

pub struct LinearGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    p: &LinearParams<T>,
) -> Result<LinearGrads<T>> {
    let (batch, f) = features(input, p)?;
    let out_f = p.out_features();
    grad_output.expect_shape(&[batch, out_f])?;
    let mut dx = vec![T::zero(); batch * f];
    let mut dw = vec![T::zero(); out_f * f];
    let mut db = vec![T::zero(); out_f];
    if !context::is_shape_only() {
        let x = input.data();
        let w = p.weight.data();
        let dy = grad_output.data();
        for b in 0..batch {
            let xb = &x[b * f..][..f];
            let dxb = &mut dx[b * f..][..f];
            for o in 0..out_f {
                let g = dy[b * out_f + o];
                db[o] = db[o] + g;
                for ((dwv, dxv), (&xv, &wv)) in dw[o * f..][..f]
                    .iter_mut()
                    .zip(dxb.iter_mut())
                    .zip(xb.iter().zip(&w[o * f..][..f]))
                {
                    *dwv = *dwv + g * xv;
                    *dxv = *dxv + g * wv;
                }
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::wrap(input.shape().to_vec(), dx),
        weight: Tensor::wrap(p.weight.shape().to_vec(), dw),
        bias: Tensor::wrap(vec![out_f], db),
    })
}
