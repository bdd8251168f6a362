//! Log-space scalar helpers shared by the tape ops and the losses.
//!
//! Negative infinity is a first-class log-probability of zero: it is
//! absorbed by `logsumexp` and propagates through sums.  NaN and
//! positive infinity are always contract violations.

use crate::{Error, Result};

/// Numerically stable log(sum(exp(xs))).  Accepts -inf entries (they
/// contribute nothing); an all -inf input yields -inf.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Domain("logsumexp of empty slice".into()));
    }
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x.is_nan() || x == f64::INFINITY {
            return Err(Error::NonFinite(format!("logsumexp input {x}")));
        }
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Two-argument logsumexp, the workhorse of the lattice recursions.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log_softmax(xs) = xs - logsumexp(xs), computed in place of a
/// normalized distribution in log space.
pub fn log_softmax(xs: &[f64]) -> Result<Vec<f64>> {
    let z = logsumexp(xs)?;
    if z == f64::NEG_INFINITY {
        return Err(Error::NonFinite("log_softmax of all -inf row".into()));
    }
    Ok(xs.iter().map(|&x| x - z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_of_three_zeros_is_ln3() {
        let v = logsumexp(&[0.0, 0.0, 0.0]).unwrap();
        assert!((v - 3.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn neg_inf_entries_are_absorbed() {
        let v = logsumexp(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert!((v - 0.0).abs() < 1e-15);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn empty_and_nan_inputs_are_errors() {
        assert!(logsumexp(&[]).is_err());
        assert!(logsumexp(&[f64::NAN]).is_err());
        assert!(logsumexp(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn log_softmax_two_way_split() {
        // [10, 0]: second entry carries log(1 + e^10) - 10 below zero.
        let v = log_softmax(&[10.0, 0.0]).unwrap();
        assert!((v[0] - (-4.5398899216870535e-5)).abs() < 1e-12);
        assert!((v[1] - (-10.000045398899218)).abs() < 1e-9);
    }

    #[test]
    fn logaddexp_matches_direct_sum() {
        let v = logaddexp(0.5_f64.ln(), 0.25_f64.ln());
        assert!((v - 0.75_f64.ln()).abs() < 1e-15);
    }

    proptest! {
        // Shifting every input by a constant shifts the output by the
        // same constant: logsumexp(x + c) = logsumexp(x) + c.
        #[test]
        fn logsumexp_shift_invariance(
            xs in proptest::collection::vec(-30.0_f64..30.0, 1..8),
            c in -50.0_f64..50.0,
        ) {
            let base = logsumexp(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let got = logsumexp(&shifted).unwrap();
            prop_assert!((got - (base + c)).abs() < 1e-9);
        }

        // log_softmax outputs are a normalized distribution.
        #[test]
        fn log_softmax_normalizes(
            xs in proptest::collection::vec(-30.0_f64..30.0, 1..8),
        ) {
            let ls = log_softmax(&xs).unwrap();
            let total: f64 = ls.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
