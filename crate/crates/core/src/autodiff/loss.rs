use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive smoothing used by [`soft_jaccard_loss`].
pub const JACCARD_SMOOTHING: f64 = 1.0;

const PROB_FLOOR: f64 = 1e-7;

/// Mean categorical cross-entropy over the batch.
///
/// `probabilities` and `one_hot` are `[N, K]`. Returns the loss and its
/// gradient with respect to the probabilities; chaining that gradient
/// through a softmax yields the usual `p - t`.
pub fn cross_entropy_loss<T: Real>(
    probabilities: &Tensor<T>,
    one_hot: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if probabilities.shape() != one_hot.shape() || probabilities.shape().len() != 2 {
        return Err(Error::arg(format!(
            "probabilities {:?} and targets {:?} must both be [N, K]",
            probabilities.shape(),
            one_hot.shape()
        )));
    }
    let k = probabilities.shape()[1];
    for (row, t) in one_hot.data().chunks(k).enumerate() {
        let ones = t.iter().filter(|&&v| v == T::one()).count();
        let zeros = t.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::arg(format!("target row {row} is not one-hot")));
        }
    }
    let n = T::from_usize(probabilities.batch()).unwrap();
    let floor = T::lit(PROB_FLOOR);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(probabilities.shape());
    for ((&p, &t), g) in probabilities
        .data()
        .iter()
        .zip(one_hot.data())
        .zip(grad.data_mut())
    {
        if t == T::one() {
            let clamped = p.max(floor).min(T::one());
            loss -= clamped.ln();
            if p > floor && p <= T::one() {
                *g = -T::one() / (clamped * n);
            }
        }
    }
    Ok((loss / n, grad))
}

/// One minus the soft Jaccard index, averaged over the batch, with the
/// default smoothing of [`JACCARD_SMOOTHING`].
///
/// `predicted` holds probabilities in `[0, 1]`, `target` a binary mask of
/// the same shape. Returns the loss and its gradient.
pub fn soft_jaccard_loss<T: Real>(predicted: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    soft_jaccard_loss_smoothed(predicted, target, JACCARD_SMOOTHING)
}

pub fn soft_jaccard_loss_smoothed<T: Real>(
    predicted: &Tensor<T>,
    target: &Tensor<T>,
    smoothing: f64,
) -> Result<(T, Tensor<T>)> {
    if predicted.shape() != target.shape() {
        return Err(Error::arg(format!(
            "prediction {:?} and target {:?} differ in shape",
            predicted.shape(),
            target.shape()
        )));
    }
    let smooth = T::lit(smoothing);
    let n = predicted.batch().max(1);
    let nt = T::from_usize(n).unwrap();
    let mut grad = Tensor::zeros(predicted.shape());
    let mut loss = T::zero();
    for i in 0..n {
        let p = predicted.item(i);
        let t = target.item(i);
        let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
        let sum_p: T = p.iter().copied().sum();
        let sum_t: T = t.iter().copied().sum();
        let num = inter + smooth;
        let den = sum_p + sum_t - inter + smooth;
        if den == T::zero() {
            // both empty without smoothing: perfect agreement
            continue;
        }
        loss += T::one() - num / den;
        let len = p.len();
        let g = &mut grad.data_mut()[i * len..(i + 1) * len];
        let den2 = den * den;
        for (gv, &tv) in g.iter_mut().zip(t) {
            // d(num/den)/dp = (t·den − num·(1 − t)) / den²
            let dj = (tv * den - num * (T::one() - tv)) / den2;
            *gv = -dj / nt;
        }
    }
    Ok((loss / nt, grad))
}
