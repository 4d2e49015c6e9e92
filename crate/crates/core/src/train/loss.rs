use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean negative log-likelihood of a batch and its gradient with respect to
/// the logits that produced `probs`.
#[derive(Clone, Debug)]
pub struct Loss<T = f32> {
    /// `mean_n -ln S[n, label_n]`
    pub value: f64,
    /// `-ln S[n, label_n]` for each row.
    pub per_sample: Vec<f64>,
    /// `(S - onehot) / n`
    pub dlogits: Tensor<T>,
}

/// Cross-entropy of softmax probabilities against class indices.
///
/// A true-class probability that has underflowed to zero is read as the
/// smallest positive normal value, so the loss stays finite.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Loss<T>> {
    let [n, t] = probs.dims() else {
        return Err(Error::shape(format!(
            "loss expects [batch, classes] probabilities, got {:?}",
            probs.dims()
        )));
    };
    let (n, t) = (*n, *t);
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= t) {
        return Err(Error::LabelOutOfRange { label, classes: t });
    }
    let scale = T::lit(1.0 / n as f64);
    let mut dlogits = probs.data().to_vec();
    let mut per_sample = Vec::with_capacity(n);
    for (row, &label) in dlogits.chunks_mut(t).zip(labels) {
        let s = row[label].as_f64().max(f64::from(f32::MIN_POSITIVE));
        per_sample.push(-s.ln());
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|g| *g = *g * scale);
    }
    Ok(Loss {
        value: per_sample.iter().sum::<f64>() / n as f64,
        per_sample,
        dlogits: Tensor::from_parts(vec![n, t], dlogits),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gradcheck::{max_relative_error, numeric_gradient};
    use crate::layers::softmax;
    use crate::rng::Rng;

    fn probs(rows: &[&[f64]]) -> Tensor<f64> {
        let t = rows[0].len();
        Tensor::from_vec(&[rows.len(), t], rows.concat()).unwrap()
    }

    #[test]
    fn certain_prediction_costs_nothing() {
        let l = cross_entropy_loss(&probs(&[&[0.0, 1.0]]), &[1]).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn uniform_two_class_is_ln_two() {
        let l = cross_entropy_loss(&probs(&[&[0.5, 0.5]]), &[0]).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.dlogits.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn loss_and_probability_invert() {
        let l = cross_entropy_loss(&probs(&[&[0.951548, 0.048452]]), &[0]).unwrap();
        assert!(((-l.value).exp() - 0.951548).abs() < 1e-12);
        // both printed figures are rounded to six places
        assert!((l.value - 0.049667).abs() < 2e-6);
        assert!(((-0.049667f64).exp() - 0.951548).abs() < 2e-6);
    }

    #[test]
    fn gradient_is_averaged_over_the_batch() {
        let l = cross_entropy_loss(&probs(&[&[0.25, 0.75], &[0.5, 0.5]]), &[1, 0]).unwrap();
        assert_eq!(l.dlogits.data(), &[0.125, -0.125, -0.25, 0.25]);
        assert_eq!(l.per_sample.len(), 2);
    }

    #[test]
    fn underflowed_probability_stays_finite() {
        let l = cross_entropy_loss(&probs(&[&[1.0, 0.0]]), &[1]).unwrap();
        assert!(l.value.is_finite() && l.value > 80.0);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let p = probs(&[&[0.5, 0.5]]);
        assert!(matches!(
            cross_entropy_loss(&p, &[2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
        assert!(cross_entropy_loss(&p, &[0, 1]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
        assert_eq!(argmax(&[0.1f32, 0.3, 0.3]), 1);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let logits = rng.uniform(-3.0, 3.0, &[4, 3]).unwrap().cast::<f64>();
        let labels = [0, 2, 1, 1];
        let objective = |z: &Tensor<f64>| {
            cross_entropy_loss(&softmax(z).unwrap(), &labels)
                .unwrap()
                .value
        };
        let analytic = cross_entropy_loss(&softmax(&logits).unwrap(), &labels).unwrap();
        let numeric = numeric_gradient(&logits, 1e-5, objective);
        let err = max_relative_error(analytic.dlogits.data(), &numeric);
        assert!(err < 1e-6, "max relative error {err}");
    }
}
