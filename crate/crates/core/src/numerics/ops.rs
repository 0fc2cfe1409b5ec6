use crate::error::{Error, Result};

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `Σ (a_i - b_i)²`.
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Cosine similarity. A zero-norm argument is an error, never silently 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable `log Σ exp(v_i)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// In-place `softmax(v / temperature)` with max subtraction.
pub fn softmax_in_place(v: &mut [f64], temperature: f64) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "softmax temperature must be > 0, got {temperature}"
        )));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out, temperature)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn squared_euclidean_examples() {
        let a = [0.3, -1.2, 4.0];
        assert_eq!(squared_euclidean(&a, &a).unwrap(), 0.0);
        assert_eq!(squared_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        let d = squared_euclidean(&[0.1, 0.2, 0.3], &[0.4, 0.0, 0.5]).unwrap();
        assert!((d - 0.17).abs() < 1e-12);
        assert!(matches!(
            squared_euclidean(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = [0.5, -2.0, 1.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[2.5, 2.5, 2.5], 0.3).unwrap();
        for p in &s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[0.0, -1000.0], 1.0).unwrap();
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        let s = softmax(&[1.0, 2.0], 0.5).unwrap();
        assert!((s[0] - 0.11920292).abs() < 1e-8);
        assert!((s[1] - 0.88079708).abs() < 1e-8);
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..20),
                                   c in -100.0f64..100.0,
                                   t in 0.05f64..5.0) {
            let a = softmax(&v, t).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted, t).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_invariant((a, b) in vec_pair(), alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let c = cosine_similarity(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
            prop_assert!((c - cosine_similarity(&sa, &sb).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn squared_euclidean_metric_axioms((a, b) in vec_pair()) {
            let ab = squared_euclidean(&a, &b).unwrap();
            prop_assert_eq!(ab, squared_euclidean(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
            prop_assert_eq!(squared_euclidean(&a, &a).unwrap(), 0.0);
        }
    }
}
