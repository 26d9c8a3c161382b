//! Numeric substrate: dense row-major tensors, probability kernels and the
//! deterministic PRNG. All arithmetic is f64.

mod rng;
mod tensor;

pub use rng::{derive_seed, sample_gaussian, Rng};
pub use tensor::Tensor2D;

use crate::error::{Error, Result};

/// Floor applied before logarithms so that 0 * ln 0 contributes exactly 0.
const LOG_FLOOR: f64 = 1e-300;

/// log(sum(exp(v))) computed against the max for stability.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax: subtract max, exponentiate, normalize.
/// Output entries are positive and sum to 1 (up to rounding) for any finite
/// input.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Softmax together with log(sum(exp(v))), sharing one exponentiation pass.
/// The pair shows up in every entropy computation: with s = softmax(v),
/// ln s_j = v_j - lse.
pub fn softmax_lse(v: &[f64]) -> (Vec<f64>, f64) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for &x in v {
        let e = (x - max).exp();
        sum += e;
        out.push(e);
    }
    for x in &mut out {
        *x /= sum;
    }
    (out, max + sum.ln())
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::contract(format!("{what}: empty vector")));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::contract(format!(
            "{what}: entries must be finite and nonnegative"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "{what}: probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Shannon entropy H(p) = -sum p_j ln p_j in nats, with 0 ln 0 = 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "entropy")?;
    Ok(p.iter()
        .map(|&x| {
            if x > 0.0 {
                -x * x.max(LOG_FLOOR).ln()
            } else {
                0.0
            }
        })
        .sum())
}

/// KL(p || q) = sum p_j ln(p_j / q_j) in nats.
///
/// Requires q to be strictly positive wherever p is; a violated support is a
/// contract error rather than +inf.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "kl_divergence: dimension mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "kl_divergence p")?;
    check_distribution(q, "kl_divergence q")?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::contract(
                    "kl_divergence: q has zero mass where p is positive",
                ));
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// Uniform distribution over d outcomes.
pub fn uniform(d: usize) -> Vec<f64> {
    vec![1.0 / d as f64; d]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct e^v / sum e^v, no max subtraction. Only valid for small inputs,
    /// which is exactly what makes it an independent oracle here.
    fn softmax_oracle(v: &[f64]) -> Vec<f64> {
        let sum: f64 = v.iter().map(|x| x.exp()).sum();
        v.iter().map(|x| x.exp() / sum).collect()
    }

    #[test]
    fn softmax_of_constant_vector_is_uniform() {
        let s = softmax(&[0.0, 0.0, 0.0, 0.0]);
        for &x in &s {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let v = [1.0, 2.0, 3.0];
        let got = softmax(&v);
        let want = softmax_oracle(&v);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_of_uniform_is_log_dim() {
        let p = uniform(512);
        let h = entropy(&p).unwrap();
        assert!((h - 512f64.ln()).abs() < 1e-12);
        assert!((h - 6.2383).abs() < 1e-4);
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let mut p = vec![0.0; 8];
        p[3] = 1.0;
        assert_eq!(entropy(&p).unwrap(), 0.0);
    }

    #[test]
    fn entropy_direct_value() {
        let h = entropy(&[0.5, 0.25, 0.25]).unwrap();
        // 0.5 ln 2 + 0.25 ln 4 + 0.25 ln 4 = 1.5 ln 2
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((h - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn entropy_rejects_non_distribution() {
        assert!(entropy(&[0.5, 0.2]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
        assert!(entropy(&[]).is_err());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_direct_value() {
        let d = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let want = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((d - want).abs() < 1e-15);
        assert!((d - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_support_violation() {
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant_and_normalized(
            v in proptest::collection::vec(-10.0..10.0f64, 1..16),
            c in -100.0..100.0f64,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v);
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(a.iter().all(|&x| x > 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn entropy_bounds_and_kl_uniform_identity(
            raw in proptest::collection::vec(0.01..10.0f64, 2..64),
        ) {
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let d = p.len();
            let h = entropy(&p).unwrap();
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (d as f64).ln() + 1e-12);
            let kl = kl_divergence(&p, &uniform(d)).unwrap();
            prop_assert!(kl >= -1e-12);
            prop_assert!((kl - ((d as f64).ln() - h)).abs() < 1e-12);
        }
    }
}
