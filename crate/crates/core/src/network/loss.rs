use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Sum of all prediction entries; its gradient is all ones.
pub fn sum_loss<T: Element>(prediction: &Tensor<T>) -> (T, Tensor<T>) {
    (prediction.sum(), Tensor::full(prediction.shape(), T::one()))
}

/// Softmax cross-entropy averaged over the batch. `logits` is
/// (batch, classes) and `labels` holds one class index per sample.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.batch() != labels.len() {
        return Err(Error::dim(format!(
            "cross-entropy needs (batch, classes) logits and one label per sample, got {:?} and {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::dim(format!("label {bad} out of range for {classes} classes")));
    }
    let inv_batch = T::from_f64(1.0 / batch as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.numel());
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exp: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: T = exp.iter().copied().sum();
        loss = loss + (total.ln() + max - row[label]);
        grad.extend(exp.iter().enumerate().map(|(c, &e)| {
            let p = e / total;
            let target = if c == label { T::one() } else { T::zero() };
            (p - target) * inv_batch
        }));
    }
    Ok((loss * inv_batch, Tensor::from_vec(logits.shape(), grad)?))
}
