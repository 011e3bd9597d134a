//! Softmax cross-entropy.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Row-wise softmax, stabilized by the row max.
pub fn softmax_rows<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let mut mx = row[0];
        for v in row.iter() {
            if *v > mx {
                mx = *v;
            }
        }
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    p
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / B`.
pub fn cross_entropy<S: Scalar>(logits: &Array2<S>, labels: &[usize]) -> (S, Array2<S>) {
    let b = logits.dim().0;
    assert_eq!(b, labels.len(), "labels must match batch size");
    let p = softmax_rows(logits);
    let inv_b = S::from_f64(1.0 / b as f64);
    let mut loss = S::zero();
    let mut grad = p;
    for (i, &y) in labels.iter().enumerate() {
        loss -= grad[[i, y]].ln();
        grad[[i, y]] -= S::one();
    }
    for v in grad.iter_mut() {
        *v *= inv_b;
    }
    (loss * inv_b, grad)
}

/// Fraction of rows whose argmax equals the label. Ties break toward the
/// lowest class index.
pub fn accuracy<S: Scalar>(logits: &Array2<S>, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels.iter()) {
        if argmax_lowest(row.iter().copied()) == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Index of the max value; the first occurrence wins on ties.
pub fn argmax_lowest<S: Scalar>(values: impl Iterator<Item = S>) -> usize {
    let mut best_i = 0;
    let mut best = None;
    for (i, v) in values.enumerate() {
        match best {
            None => best = Some(v),
            Some(b) if v > b => {
                best = Some(v);
                best_i = i;
            }
            _ => {}
        }
    }
    best_i
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_c_loss() {
        let logits = Array2::<f64>::zeros((4, 7));
        let (loss, _) = cross_entropy(&logits, &[0, 1, 2, 3]);
        assert!((loss - (7.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = array![[1.0, -0.5, 2.0], [0.0, 0.1, -0.1]];
        let (_, g) = cross_entropy(&logits, &[2, 0]);
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_lowest([1.0, 3.0, 3.0, 2.0].into_iter()), 1);
        assert_eq!(argmax_lowest([5.0, 5.0].into_iter()), 0);
    }

    #[test]
    fn accuracy_counts_matches() {
        let logits = array![[2.0, 1.0], [0.0, 1.0], [1.0, 1.0]];
        // row 2 ties -> predicts class 0
        assert!((accuracy(&logits, &[0, 1, 0]) - 1.0).abs() < 1e-12);
        assert!((accuracy(&logits, &[0, 0, 1]) - (1.0 / 3.0)).abs() < 1e-12);
    }
}
