use crate::error::{domain_err, Result};

fn max_of(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax with max-subtraction.
pub fn stable_softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(domain_err("softmax of an empty row"));
    }
    let m = max_of(scores);
    if !m.is_finite() {
        return Err(domain_err("softmax input must be finite"));
    }
    let mut out: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// `log Σ exp(sᵢ)` with max-subtraction; exact for a single element.
pub fn log_sum_exp(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(domain_err("log_sum_exp of an empty row"));
    }
    if scores.len() == 1 {
        return Ok(scores[0]);
    }
    let m = max_of(scores);
    if !m.is_finite() {
        return Ok(m);
    }
    Ok(m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln())
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Log-softmax of a row (stable).
pub fn log_softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(scores)?;
    Ok(scores.iter().map(|s| s - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_scores_give_uniform_probs() {
        assert_eq!(stable_softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn one_to_three_ratio() {
        let p = stable_softmax_row(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs_are_domain_errors() {
        assert!(stable_softmax_row(&[]).is_err());
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        assert!((log_sum_exp(&[3f64.ln(), 0.0]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn log_add_exp_matches_two_element_lse() {
        for &(a, b) in &[(0.0, 0.0), (-3.0, 5.0), (700.0, 710.0), (-1e3, -1e3 + 1.0)] {
            let want = log_sum_exp(&[a, b]).unwrap();
            assert!((log_add_exp(a, b) - want).abs() < 1e-12);
        }
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 2.0), 2.0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in prop::collection::vec(-1e4f64..1e4, 1..32)) {
            let p = stable_softmax_row(&xs).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0 && v <= 1.0));
        }

        #[test]
        fn softmax_is_shift_invariant(xs in prop::collection::vec(-50f64..50.0, 1..16), c in -100f64..100.0) {
            let p = stable_softmax_row(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = stable_softmax_row(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_is_bracketed(xs in prop::collection::vec(-1e4f64..1e4, 1..32)) {
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = log_sum_exp(&xs).unwrap();
            prop_assert!(l.is_finite());
            prop_assert!(l >= m);
            prop_assert!(l <= m + (xs.len() as f64).ln() + 1e-12);
        }
    }
}
