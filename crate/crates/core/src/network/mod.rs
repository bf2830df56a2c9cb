//! Sequential network description, validation and the conventional
//! (non-streamed) execution path.

mod loss;
mod model;
mod spec;

pub use loss::{cross_entropy, sum_loss};
pub use model::{ActivationStore, GradientSet, LayerParams, Network, ParamGrad};
pub use spec::{
    emit_spec, layer_output_shape, parse_spec, validate, LayerSpec, NetworkSpec, ShapeTrace,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{ConvParams, LinearParams};
    use crate::tensor::{DType, Tensor};
    use crate::Error;

    const TABLE2: &str = include_str!("../../../../nets/table2.net");

    #[test]
    fn table2_trace_ends_at_1x1x256() {
        let spec = parse_spec(TABLE2).unwrap();
        assert_eq!(spec.layers.len(), 11);
        let trace = validate(&spec, &[1, 3, 320, 320]).unwrap();
        assert_eq!(trace.outputs[9], vec![1, 256, 1, 1]);
        assert_eq!(trace.output(), &[1, 10]);
    }

    #[test]
    fn dtype_mismatch_on_init() {
        let spec = NetworkSpec::new(vec![LayerSpec::Relu], 1, DType::F32);
        assert!(matches!(
            Network::<f64>::init(&spec, &[1, 4], 0),
            Err(Error::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn identity_prefix_gives_linear_head_on_raw_input() {
        let spec = parse_spec("split=2 dtype=f64\nconv out=2 k=1\nrelu\nlinear out=3\n").unwrap();
        let mut net = Network::<f64>::init(&spec, &[2, 3, 3], 7).unwrap();
        let eye = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        net.params_mut()[0] = LayerParams::Conv(ConvParams::new(eye, None, vec![1, 1]).unwrap());
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| (i % 7) as f64 * 0.25);
        let store = net.forward_full(&x).unwrap();
        let LayerParams::Linear(head) = &net.params()[2] else {
            unreachable!()
        };
        let direct = crate::ops::linear_forward(&x, head).unwrap();
        assert!(store.prediction().bit_eq(&direct));
    }

    #[test]
    fn linear_head_shape_is_checked() {
        let spec = parse_spec("split=1 dtype=f64\nrelu\nlinear out=2\n").unwrap();
        let bad = vec![
            LayerParams::None,
            LayerParams::Linear(
                LinearParams::new(Tensor::zeros(&[2, 5]), Tensor::zeros(&[2])).unwrap(),
            ),
        ];
        assert!(Network::<f64>::from_params(&spec, &[1, 4], bad).is_err());
    }

    #[test]
    fn same_seed_same_gradients() {
        let spec = parse_spec(
            "split=3 dtype=f64\nconv out=3 k=3 bias\nrelu\nmaxpool k=2\nflatten\nlinear out=4\n",
        )
        .unwrap();
        let run = || {
            let net = Network::<f64>::init(&spec, &[2, 10, 10], 42).unwrap();
            let x = Tensor::from_fn(&[2, 2, 10, 10], |i| ((i * 37) % 11) as f64 - 5.0);
            let store = net.forward_full(&x).unwrap();
            let (_, g) = sum_loss(store.prediction());
            net.backward_full(&x, &store, &g, true).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.bit_eq(&b));
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        assert!(a.input.is_some());
    }
}
