use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{validate, LayerSpec, NetworkSpec, ShapeTrace};
use crate::error::{Error, Result};
use crate::ops::{
    conv_backward_input, conv_backward_kernel, conv_forward, linear_backward, linear_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, ArgmaxMap, ConvParams,
    LinearParams,
};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub enum LayerParams<T: Element> {
    None,
    Conv(ConvParams<T>),
    Linear(LinearParams<T>),
}

/// Gradient of one layer's parameters; `weight` is the conv kernel or the
/// linear weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> ParamGrad<T> {
    /// Elementwise sum of two gradients of the same layer.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let bias = match (&self.bias, &other.bias) {
            (Some(a), Some(b)) => Some(a.add(b)?),
            (None, None) => None,
            _ => return Err(Error::dim("bias present in only one gradient")),
        };
        Ok(Self {
            weight: self.weight.add(&other.weight)?,
            bias,
        })
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }
}

/// Per-layer parameter gradients (`None` for parameter-free layers) and an
/// optional gradient with respect to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T: Element> {
    pub layers: Vec<Option<ParamGrad<T>>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Element> GradientSet<T> {
    pub fn empty(layer_count: usize) -> Self {
        Self {
            layers: vec![None; layer_count],
            input: None,
        }
    }

    pub fn param_tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten().flat_map(|g| g.tensors())
    }

    fn paired<'a>(&'a self, other: &'a Self) -> Result<Vec<(&'a Tensor<T>, &'a Tensor<T>)>> {
        let mismatch = || Error::dim("gradient sets have different structure");
        if self.layers.len() != other.layers.len() {
            return Err(mismatch());
        }
        let mut pairs = Vec::new();
        for (a, b) in self.layers.iter().zip(&other.layers) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) if a.bias.is_some() == b.bias.is_some() => {
                    pairs.extend(a.tensors().zip(b.tensors()));
                }
                _ => return Err(mismatch()),
            }
        }
        Ok(pairs)
    }

    /// Largest absolute difference over all parameter gradients.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.paired(other)?
            .into_iter()
            .try_fold(0.0f64, |m, (a, b)| Ok(m.max(a.max_abs_diff(b)?)))
    }

    /// Largest per-tensor `max|a - b| / max|b|` over all parameter gradients,
    /// with `other` as the reference. A reference tensor that is exactly zero
    /// contributes its absolute difference instead.
    pub fn max_rel_diff(&self, other: &Self) -> Result<f64> {
        self.paired(other)?.into_iter().try_fold(0.0f64, |m, (a, b)| {
            let diff = a.max_abs_diff(b)?;
            let scale = b.max_abs().as_f64();
            Ok(m.max(if scale > 0.0 { diff / scale } else { diff }))
        })
    }

    /// True if every parameter gradient (and the input gradient, when both
    /// carry one) is bit-identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let params = self
            .paired(other)
            .map(|p| p.into_iter().all(|(a, b)| a.bit_eq(b)))
            .unwrap_or(false);
        let input = match (&self.input, &other.input) {
            (Some(a), Some(b)) => a.bit_eq(b),
            _ => true,
        };
        params && input
    }
}

/// Every layer output of a forward pass plus the max-pool routing maps.
#[derive(Debug)]
pub struct ActivationStore<T: Element> {
    pub outputs: Vec<Tensor<T>>,
    pub argmax: Vec<Option<ArgmaxMap>>,
}

impl<T: Element> ActivationStore<T> {
    pub fn prediction(&self) -> &Tensor<T> {
        self.outputs.last().expect("store holds at least one layer")
    }

    /// Total bytes of the retained activations.
    pub fn bytes(&self) -> u64 {
        self.outputs.iter().map(|t| t.bytes()).sum()
    }
}

/// A network specification bound to concrete parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Element> {
    spec: NetworkSpec,
    sample_shape: Vec<usize>,
    params: Vec<LayerParams<T>>,
}

impl<T: Element> Network<T> {
    /// Builds a network for samples of shape `(channels, spatial...)`.
    /// Kernels and weights are uniform in `±sqrt(6 / fan_in)`; biases start at zero.
    pub fn init(spec: &NetworkSpec, sample_shape: &[usize], seed: u64) -> Result<Self> {
        let trace = Self::check(spec, sample_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
        };
        let mut params = Vec::with_capacity(spec.layers.len());
        for (l, layer) in spec.layers.iter().enumerate() {
            let input = trace.input_of(l);
            params.push(match *layer {
                LayerSpec::Conv {
                    out,
                    k,
                    stride,
                    bias,
                } => {
                    let rank = input.len() - 2;
                    let mut shape = vec![out, input[1]];
                    shape.extend(std::iter::repeat(k).take(rank));
                    let fan_in: usize = shape[1..].iter().product();
                    LayerParams::Conv(ConvParams::new(
                        uniform(&shape, fan_in),
                        bias.then(|| Tensor::zeros(&[out])),
                        vec![stride; rank],
                    )?)
                }
                LayerSpec::Linear { out } => {
                    let fan_in: usize = input[1..].iter().product();
                    LayerParams::Linear(LinearParams::new(
                        uniform(&[out, fan_in], fan_in),
                        Tensor::zeros(&[out]),
                    )?)
                }
                _ => LayerParams::None,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            sample_shape: sample_shape.to_vec(),
            params,
        })
    }

    /// Builds a network from explicit parameters, checking their shapes.
    pub fn from_params(
        spec: &NetworkSpec,
        sample_shape: &[usize],
        params: Vec<LayerParams<T>>,
    ) -> Result<Self> {
        let reference = Self::init(spec, sample_shape, 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::dim(format!(
                "{} parameter entries for {} layers",
                params.len(),
                reference.params.len()
            )));
        }
        for (l, (p, r)) in params.iter().zip(&reference.params).enumerate() {
            let ok = match (p, r) {
                (LayerParams::None, LayerParams::None) => true,
                (LayerParams::Conv(p), LayerParams::Conv(r)) => {
                    p.kernel.shape() == r.kernel.shape()
                        && p.stride == r.stride
                        && p.bias.is_some() == r.bias.is_some()
                }
                (LayerParams::Linear(p), LayerParams::Linear(r)) => {
                    p.weight.shape() == r.weight.shape()
                }
                _ => false,
            };
            if !ok {
                return Err(Error::dim(format!(
                    "parameters for layer {l} ({}) do not match the specification",
                    spec.layers[l].kind()
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            sample_shape: sample_shape.to_vec(),
            params,
        })
    }

    fn check(spec: &NetworkSpec, sample_shape: &[usize]) -> Result<ShapeTrace> {
        if spec.dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                expected: spec.dtype,
                found: T::DTYPE,
            });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(sample_shape);
        validate(spec, &shape)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    /// Direct parameter access for tests and optimizers. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn layer_count(&self) -> usize {
        self.params.len()
    }

    pub fn split(&self) -> usize {
        self.spec.split
    }

    /// Shape trace for a batch of `batch` samples of the bound geometry.
    pub fn trace(&self, batch: usize) -> Result<ShapeTrace> {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.sample_shape);
        validate(&self.spec, &shape)
    }

    /// Applies layer `l` to `x`, returning the max-pool routing map when
    /// the layer is a pool.
    pub fn forward_layer(&self, l: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Option<ArgmaxMap>)> {
        let layer = &self.spec.layers[l];
        Ok(match (layer, &self.params[l]) {
            (LayerSpec::Conv { .. }, LayerParams::Conv(p)) => (conv_forward(x, p)?, None),
            (LayerSpec::MaxPool { k, stride }, _) => {
                let rank = x.rank().saturating_sub(2).max(1);
                let (y, map) = maxpool_forward(x, &vec![*k; rank], &vec![*stride; rank])?;
                (y, Some(map))
            }
            (LayerSpec::Relu, _) => (relu_forward(x), None),
            (LayerSpec::Flatten, _) => {
                let shape = [x.batch(), x.numel() / x.batch()];
                (x.clone().reshape(&shape)?, None)
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear(p)) => (linear_forward(x, p)?, None),
            _ => return Err(Error::internal(format!("layer {l} has mismatched parameters"))),
        })
    }

    /// Gradient with respect to the input of layer `l` only.
    pub fn input_gradient(
        &self,
        l: usize,
        x: &Tensor<T>,
        argmax: Option<&ArgmaxMap>,
        grad_output: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match (&self.spec.layers[l], &self.params[l]) {
            (LayerSpec::Conv { .. }, LayerParams::Conv(p)) => {
                conv_backward_input(grad_output, p, x.shape())
            }
            (LayerSpec::MaxPool { .. }, _) => {
                let map = argmax.ok_or_else(|| {
                    Error::internal(format!("max-pool layer {l} has no routing map"))
                })?;
                maxpool_backward(grad_output, map, x.shape())
            }
            (LayerSpec::Relu, _) => relu_backward(x, grad_output),
            (LayerSpec::Flatten, _) => grad_output.clone().reshape(x.shape()),
            (LayerSpec::Linear { .. }, LayerParams::Linear(p)) => {
                Ok(linear_backward(x, grad_output, p)?.input)
            }
            _ => Err(Error::internal(format!("layer {l} has mismatched parameters"))),
        }
    }

    /// Backpropagates through layer `l`. `x` is the layer's forward input.
    /// Returns the input gradient when `need_input` is set and the parameter
    /// gradient for layers that have parameters.
    pub fn backward_layer(
        &self,
        l: usize,
        x: &Tensor<T>,
        argmax: Option<&ArgmaxMap>,
        grad_output: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Option<Tensor<T>>, Option<ParamGrad<T>>)> {
        Ok(match (&self.spec.layers[l], &self.params[l]) {
            (LayerSpec::Conv { .. }, LayerParams::Conv(p)) => {
                let g = conv_backward_kernel(x, grad_output, p)?;
                let dx = need_input
                    .then(|| conv_backward_input(grad_output, p, x.shape()))
                    .transpose()?;
                (
                    dx,
                    Some(ParamGrad {
                        weight: g.kernel,
                        bias: g.bias,
                    }),
                )
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear(p)) => {
                let g = linear_backward(x, grad_output, p)?;
                (
                    need_input.then_some(g.input),
                    Some(ParamGrad {
                        weight: g.weight,
                        bias: Some(g.bias),
                    }),
                )
            }
            _ => (
                need_input
                    .then(|| self.input_gradient(l, x, argmax, grad_output))
                    .transpose()?,
                None,
            ),
        })
    }

    /// Runs `layers` on `x`, keeping every output.
    pub fn record_layers(&self, layers: Range<usize>, x: &Tensor<T>) -> Result<ActivationStore<T>> {
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(layers.len());
        let mut argmax = Vec::with_capacity(layers.len());
        for l in layers {
            let (y, map) = self.forward_layer(l, outputs.last().unwrap_or(x))?;
            outputs.push(y);
            argmax.push(map);
        }
        Ok(ActivationStore { outputs, argmax })
    }

    /// Runs `layers` on `x`, dropping each intermediate as soon as the next
    /// layer has consumed it.
    pub fn run_layers(&self, layers: Range<usize>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut current: Option<Tensor<T>> = None;
        for l in layers {
            let (y, _) = self.forward_layer(l, current.as_ref().unwrap_or(x))?;
            current = Some(y);
        }
        current.ok_or_else(|| Error::Usage("empty layer range".into()))
    }

    /// Backpropagates `grad` through `layers` (recorded in `store` from
    /// input `x`), writing parameter gradients into `grads`. Returns the
    /// gradient with respect to `x` when `need_input` is set.
    pub fn backprop_layers(
        &self,
        layers: Range<usize>,
        x: &Tensor<T>,
        store: &ActivationStore<T>,
        grad: &Tensor<T>,
        need_input: bool,
        grads: &mut GradientSet<T>,
    ) -> Result<Option<Tensor<T>>> {
        let first = layers.start;
        let mut current: Option<Tensor<T>> = None;
        for l in layers.rev() {
            let i = l - first;
            let input = if i == 0 { x } else { &store.outputs[i - 1] };
            let want = need_input || l > first;
            let (dx, pg) = self.backward_layer(
                l,
                input,
                store.argmax[i].as_ref(),
                current.as_ref().unwrap_or(grad),
                want,
            )?;
            grads.layers[l] = pg;
            current = dx;
        }
        Ok(current)
    }

    /// Conventional forward pass retaining every activation.
    pub fn forward_full(&self, input: &Tensor<T>) -> Result<ActivationStore<T>> {
        validate(&self.spec, input.shape())?;
        self.record_layers(0..self.layer_count(), input)
    }

    /// Conventional backward pass; `loss_grad` is the gradient of the loss
    /// with respect to the prediction.
    pub fn backward_full(
        &self,
        input: &Tensor<T>,
        store: &ActivationStore<T>,
        loss_grad: &Tensor<T>,
        need_input: bool,
    ) -> Result<GradientSet<T>> {
        if store.outputs.len() != self.layer_count() {
            return Err(Error::Usage(
                "activation store does not come from a full forward pass".into(),
            ));
        }
        loss_grad.expect_shape(store.prediction().shape())?;
        let mut grads = GradientSet::empty(self.layer_count());
        grads.input = self.backprop_layers(
            0..self.layer_count(),
            input,
            store,
            loss_grad,
            need_input,
            &mut grads,
        )?;
        Ok(grads)
    }

    /// Plain SGD: `param -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &GradientSet<T>, lr: f64) -> Result<()> {
        if grads.layers.len() != self.params.len() {
            return Err(Error::dim("gradient set does not match the network"));
        }
        let lr = T::from_f64(lr);
        let step = |p: &mut Tensor<T>, g: &Tensor<T>| -> Result<()> {
            *p = p.zip_map(g, |pv, gv| pv - lr * gv)?;
            Ok(())
        };
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            match (p, g) {
                (LayerParams::None, None) => {}
                (LayerParams::Conv(c), Some(g)) => {
                    step(&mut c.kernel, &g.weight)?;
                    if let (Some(b), Some(gb)) = (c.bias.as_mut(), g.bias.as_ref()) {
                        step(b, gb)?;
                    }
                }
                (LayerParams::Linear(lp), Some(g)) => {
                    step(&mut lp.weight, &g.weight)?;
                    if let Some(gb) = &g.bias {
                        step(&mut lp.bias, gb)?;
                    }
                }
                _ => return Err(Error::dim("gradient set does not match the network")),
            }
        }
        Ok(())
    }
}
