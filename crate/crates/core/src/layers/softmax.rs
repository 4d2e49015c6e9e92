use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax of `[n, classes]` logits, `S_j = exp(a_j) / sum_k exp(a_k)`.
///
/// The row maximum is subtracted before exponentiating so large logits do not
/// overflow; the result is unchanged mathematically.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, t] = logits.dims() else {
        return Err(Error::shape(format!(
            "softmax expects [batch, classes], got {:?}",
            logits.dims()
        )));
    };
    let (n, t) = (*n, *t);
    if t < 2 {
        return Err(Error::shape("softmax needs at least two classes"));
    }
    let mut out = Vec::with_capacity(n * t);
    for row in logits.data().chunks(t) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, a| m.max(a.as_f64()));
        let exps: Vec<f64> = row.iter().map(|a| (a.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::lit(e / total)));
    }
    Ok(Tensor::from_parts(vec![n, t], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn row(v: &[f32]) -> Tensor {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    fn argmax(v: &[f32]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn symmetric_logits_are_uniform() {
        assert_eq!(softmax(&row(&[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn direct_evaluation() {
        // exp(k) / (e + e^2 + e^3) for k = 1, 2, 3
        let e: f64 = std::f64::consts::E;
        let z = e + e * e + e * e * e;
        let expect = [e / z, e * e / z, e * e * e / z];
        assert!((expect[0] - 0.090031).abs() < 1e-6);
        let s = softmax(&row(&[1.0, 2.0, 3.0])).unwrap();
        for (a, b) in s.data().iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        let printed = [0.090031, 0.244728, 0.665241];
        for (a, b) in s.data().iter().zip(printed) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let s = softmax(&row(&[1000.0, 0.0])).unwrap();
        assert!(s.all_finite());
        assert_eq!(s.data()[0], 1.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(softmax(&row(&[1.0])).is_err());
        assert!(softmax(&Tensor::<f32>::zeros(&[2]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn rows_normalize_shift_and_keep_argmax(seed in any::<u64>(), t in 2usize..6, shift in -50i32..50) {
            // logits on a 2^-10 grid so that adding an integer shift is exact in f32
            let mut rng = Rng::new(seed);
            let mut logits = rng.uniform(-10.0, 10.0, &[4, t]).unwrap();
            logits.data_mut().iter_mut().for_each(|v| *v = (*v * 1024.0).round() / 1024.0);
            let shift = shift as f32;
            let s = softmax(&logits).unwrap();
            let shifted: Vec<f32> = logits.data().iter().map(|v| v + shift).collect();
            let s2 = softmax(&Tensor::from_vec(&[4, t], shifted).unwrap()).unwrap();
            for (r, (p, l)) in s.data().chunks(t).zip(logits.data().chunks(t)).enumerate() {
                let sum: f64 = p.iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert_eq!(argmax(p), argmax(l));
                for (a, b) in p.iter().zip(&s2.data()[r * t..(r + 1) * t]) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
