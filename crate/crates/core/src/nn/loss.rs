use super::{ops, NnError, Scalar, Tensor};

/// Row-wise softmax of a `[B × C]` logit tensor.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let [_, c] = z.shape() else {
        return Err(NnError::Shape(format!("softmax expects [B, C], got {:?}", z.shape())));
    };
    Tensor::from_vec(z.shape(), ops::softmax_rows(z.data(), *c))
}

/// One-hot encode class indices into `[B × classes]`.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Vec<T>, NnError> {
    let mut out = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(NnError::Label(format!("label {y} out of range for {classes} classes")));
        }
        out[i * classes + y] = T::one();
    }
    Ok(out)
}

/// Mean categorical cross-entropy plus an already-computed L2 term:
/// `−(1/B)·Σ log(max(p_true, 1e-12)) + l2`.
pub fn cross_entropy<T: Scalar>(probs: &[T], onehot: &[T], classes: usize, l2: T) -> Result<T, NnError> {
    if probs.len() != onehot.len() || classes == 0 || probs.len() % classes != 0 {
        return Err(NnError::Shape("probabilities and labels disagree in shape".into()));
    }
    let batch = probs.len() / classes;
    let floor = T::of(1e-12);
    let mut total = T::zero();
    for (p, y) in probs.chunks(classes).zip(onehot.chunks(classes)) {
        let ones = y.iter().filter(|&&v| v == T::one()).count();
        let zeros = y.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(NnError::Label(format!("row {y:?} is not one-hot")));
        }
        let k = y.iter().position(|&v| v == T::one()).expect("one-hot");
        total -= p[k].max(floor).ln();
    }
    Ok(total / T::of(batch as f64) + l2)
}

/// ∂L/∂logits for softmax followed by mean cross-entropy: `(p − y)/B`.
pub fn softmax_ce_grad<T: Scalar>(probs: &[T], onehot: &[T], batch: usize) -> Vec<T> {
    let inv = T::one() / T::of(batch as f64);
    probs.iter().zip(onehot).map(|(&p, &y)| (p - y) * inv).collect()
}

/// Argmax per row with ties broken toward the lower class index.
pub fn argmax_rows<T: Scalar>(probs: &[T], classes: usize) -> Vec<usize> {
    probs
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn argmax_accuracy<T: Scalar>(probs: &[T], labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(probs, classes).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}
