//! Independent scalar-loop oracles and helpers for unit tests.

use rand::Rng;

use crate::tensor::{Element, Tensor};

pub fn rand_tensor<T: Element>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

pub fn assert_close<T: Element>(a: &Tensor<T>, b: &Tensor<T>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b).unwrap();
    assert!(diff <= tol, "max abs diff {diff} > {tol}");
}

pub mod scalar_loop {
    use crate::tensor::Tensor;

    /// `(x * w)_k = sum_i w_i x_{k*s+i}`
    pub fn conv1d(x: &[f64], w: &[f64], s: usize) -> Vec<f64> {
        let n = w.len();
        (0..(x.len() - n) / s + 1)
            .map(|k| (0..n).map(|i| w[i] * x[k * s + i]).sum())
            .collect()
    }

    /// `dw_j = sum_i dp_i x_{i*s+j}` over outputs i whose input index is in range.
    pub fn conv1d_kernel_grad(x: &[f64], dp: &[f64], n: usize, s: usize) -> Vec<f64> {
        (0..n)
            .map(|j| {
                (0..dp.len())
                    .filter(|&i| i * s + j < x.len())
                    .map(|i| dp[i] * x[i * s + j])
                    .sum()
            })
            .collect()
    }

    /// `dx_i = sum_j w_j dp_{(i-j)/s}` where `(i-j)` is a non-negative
    /// multiple of `s` indexing a valid output.
    pub fn conv1d_input_grad(dp: &[f64], w: &[f64], len: usize, s: usize) -> Vec<f64> {
        (0..len)
            .map(|i| {
                (0..w.len())
                    .filter(|&j| i >= j && (i - j) % s == 0 && (i - j) / s < dp.len())
                    .map(|j| w[j] * dp[(i - j) / s])
                    .sum()
            })
            .collect()
    }

    pub fn conv2d(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        (sh, sw): (usize, usize),
    ) -> Tensor<f64> {
        let [b, ci, h, w] = x.shape().try_into().unwrap();
        let [co, _, kh, kw] = k.shape().try_into().unwrap();
        let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        let xd = x.data();
        let kd = k.data();
        Tensor::from_fn(&[b, co, oh, ow], |idx| {
            let ox = idx % ow;
            let oy = (idx / ow) % oh;
            let oc = (idx / (ow * oh)) % co;
            let bb = idx / (ow * oh * co);
            let mut acc = 0.0;
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        acc += kd[((oc * ci + ic) * kh + ky) * kw + kx]
                            * xd[((bb * ci + ic) * h + oy * sh + ky) * w + ox * sw + kx];
                    }
                }
            }
            acc + bias.map_or(0.0, |b| b.data()[oc])
        })
    }
}
