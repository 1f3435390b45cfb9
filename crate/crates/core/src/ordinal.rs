//! Ordered-logistic likelihood and simplex-anchored cutpoints.
//!
//! Position + Consistency is a 0..=4 ordinal score. Its cutpoints are never
//! sampled directly: the sampler moves on a probability simplex `p` and an
//! anchor `phi`, and the cutpoints are the deterministic image
//! `c_k = phi + logit(p_1 + ... + p_k)`. A Dirichlet prior on `p` therefore
//! induces a proper prior on the cutpoints without a separate Jacobian term,
//! and ordering holds automatically.

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::autodiff::Real;

/// Number of Position + Consistency categories (scores 0 through 4).
pub const CATEGORIES: usize = 5;

const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrdinalError {
    #[error("simplex entry {index} is {value}; entries must be positive")]
    NonPositiveEntry { index: usize, value: f64 },
    #[error("simplex sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("cumulative probability reaches 1 at entry {0} before the last category")]
    SaturatedCumulative(usize),
    #[error("simplex has {got} entries, expected {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("anchor must be finite, got {0}")]
    NonFiniteAnchor(f64),
    #[error("cutpoints not strictly increasing at position {0}")]
    NotIncreasing(usize),
    #[error("category {k} out of range for {categories} categories")]
    CategoryOutOfRange { k: usize, categories: usize },
    #[error("concentration entry {0} must be positive")]
    BadConcentration(usize),
}

/// Anchor, simplex, and the induced cutpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CutpointSet {
    phi: f64,
    probs: [f64; CATEGORIES],
    cutpoints: [f64; CATEGORIES - 1],
}

impl CutpointSet {
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn probs(&self) -> &[f64; CATEGORIES] {
        &self.probs
    }

    pub fn cutpoints(&self) -> &[f64; CATEGORIES - 1] {
        &self.cutpoints
    }
}

fn check_simplex(probs: &[f64]) -> Result<(), OrdinalError> {
    if probs.len() != CATEGORIES {
        return Err(OrdinalError::WrongLength {
            got: probs.len(),
            expected: CATEGORIES,
        });
    }
    if let Some((index, &value)) = probs.iter().enumerate().find(|(_, &p)| !(p > 0.0)) {
        return Err(OrdinalError::NonPositiveEntry { index, value });
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL * CATEGORIES as f64 {
        return Err(OrdinalError::NotNormalized(total));
    }
    Ok(())
}

/// Builds cutpoints `c_k = phi + logit(sum_{i<=k} p_i)` for `k = 1..K-1`.
///
/// The upper tail sum is accumulated separately so that `1 - cumsum` does
/// not lose precision when the last categories are rare.
pub fn cutpoints_from_simplex(probs: &[f64], phi: f64) -> Result<CutpointSet, OrdinalError> {
    check_simplex(probs)?;
    if !phi.is_finite() {
        return Err(OrdinalError::NonFiniteAnchor(phi));
    }
    let mut cutpoints = [0.0; CATEGORIES - 1];
    for k in 0..CATEGORIES - 1 {
        let head: f64 = probs[..=k].iter().sum();
        let tail: f64 = probs[k + 1..].iter().sum();
        if tail <= SIMPLEX_TOL || head >= 1.0 {
            return Err(OrdinalError::SaturatedCumulative(k));
        }
        cutpoints[k] = phi + head.ln() - tail.ln();
    }
    for k in 1..cutpoints.len() {
        if cutpoints[k] <= cutpoints[k - 1] {
            return Err(OrdinalError::NotIncreasing(k));
        }
    }
    let mut p = [0.0; CATEGORIES];
    p.copy_from_slice(probs);
    Ok(CutpointSet {
        phi,
        probs: p,
        cutpoints,
    })
}

fn check_increasing(cutpoints: &[f64]) -> Result<(), OrdinalError> {
    for k in 1..cutpoints.len() {
        if !(cutpoints[k] > cutpoints[k - 1]) {
            return Err(OrdinalError::NotIncreasing(k));
        }
    }
    Ok(())
}

fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Threshold ordered-logistic probability of category `k` (0-based) given
/// linear predictor `eta` and `K - 1` increasing cutpoints.
pub fn ordered_logistic_pmf(k: usize, eta: f64, cutpoints: &[f64]) -> Result<f64, OrdinalError> {
    check_increasing(cutpoints)?;
    let categories = cutpoints.len() + 1;
    if k >= categories {
        return Err(OrdinalError::CategoryOutOfRange { k, categories });
    }
    let p = if k == 0 {
        1.0 - inv_logit(eta - cutpoints[0])
    } else if k == categories - 1 {
        inv_logit(eta - cutpoints[k - 1])
    } else {
        inv_logit(eta - cutpoints[k - 1]) - inv_logit(eta - cutpoints[k])
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Log of [`ordered_logistic_pmf`] in a form that stays finite for extreme
/// `eta`. Interior categories use
/// `σ(a) − σ(b) = σ(a)·σ(−b)·(1 − e^{−(a−b)})` with `a − b = c_k − c_{k−1}`.
/// Cutpoints are assumed increasing.
pub fn ordered_logistic_lpmf<T: Real>(k: usize, eta: T, cutpoints: &[T]) -> T {
    let last = cutpoints.len();
    if k == 0 {
        (eta - cutpoints[0]).rsub(0.0).log_sigmoid()
    } else if k == last {
        (eta - cutpoints[last - 1]).log_sigmoid()
    } else {
        let lo = cutpoints[k - 1];
        let hi = cutpoints[k];
        (eta - lo).log_sigmoid() + (hi - eta).log_sigmoid() + (lo - hi).log1m_exp()
    }
}

/// Log Dirichlet density of the simplex.
///
/// The sampler parameterizes the simplex itself (stick-breaking to
/// unconstrained reals, see `model::params`), and the cutpoints are a
/// deterministic function of `(p, phi)`. So this density is the whole
/// cutpoint prior; no Jacobian from `p` to `c` appears anywhere.
pub fn ordinal_prior_logdensity(cs: &CutpointSet, alpha: &[f64]) -> Result<f64, OrdinalError> {
    dirichlet_logdensity(&cs.probs, alpha)
}

pub fn dirichlet_logdensity(probs: &[f64], alpha: &[f64]) -> Result<f64, OrdinalError> {
    check_simplex(probs)?;
    if alpha.len() != probs.len() {
        return Err(OrdinalError::WrongLength {
            got: alpha.len(),
            expected: probs.len(),
        });
    }
    if let Some(i) = alpha.iter().position(|&a| !(a > 0.0)) {
        return Err(OrdinalError::BadConcentration(i));
    }
    let total: f64 = alpha.iter().sum();
    let norm = ln_gamma(total) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    let kernel: f64 = alpha
        .iter()
        .zip(probs)
        .map(|(&a, &p)| (a - 1.0) * p.ln())
        .sum();
    Ok(norm + kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use proptest::prelude::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn uniform_simplex_cutpoints() {
        let cs = cutpoints_from_simplex(&[0.2; 5], 0.0).unwrap();
        let want = [logit(0.2), logit(0.4), logit(0.6), logit(0.8)];
        for (c, w) in cs.cutpoints().iter().zip(want) {
            assert!((c - w).abs() < 1e-12);
        }
        let frozen = [-1.3863, -0.4055, 0.4055, 1.3863];
        for (c, w) in cs.cutpoints().iter().zip(frozen) {
            assert!((c - w).abs() < 1e-4);
        }
    }

    #[test]
    fn anchor_is_additive_shift() {
        let a = cutpoints_from_simplex(&[0.2; 5], 0.0).unwrap();
        let b = cutpoints_from_simplex(&[0.2; 5], 2.0).unwrap();
        for (x, y) in a.cutpoints().iter().zip(b.cutpoints()) {
            assert!((y - x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pmf_at_anchor_recovers_simplex() {
        let p = [0.1, 0.3, 0.25, 0.2, 0.15];
        let cs = cutpoints_from_simplex(&p, 1.3).unwrap();
        for k in 0..5 {
            let got = ordered_logistic_pmf(k, cs.phi(), cs.cutpoints()).unwrap();
            assert!((got - p[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_simplexes() {
        assert!(matches!(
            cutpoints_from_simplex(&[0.0, 0.25, 0.25, 0.25, 0.25], 0.0),
            Err(OrdinalError::NonPositiveEntry { index: 0, .. })
        ));
        assert!(matches!(
            cutpoints_from_simplex(&[0.3, 0.3, 0.3, 0.3, 0.3], 0.0),
            Err(OrdinalError::NotNormalized(_))
        ));
        assert!(matches!(
            cutpoints_from_simplex(&[1.0 - 4e-13, 1e-13, 1e-13, 1e-13, 1e-13], 0.0),
            Err(OrdinalError::SaturatedCumulative(0))
        ));
        assert!(cutpoints_from_simplex(&[0.5, 0.5], 0.0).is_err());
        assert!(cutpoints_from_simplex(&[0.2; 5], f64::NAN).is_err());
    }

    #[test]
    fn two_category_symmetry() {
        assert_eq!(ordered_logistic_pmf(0, 0.0, &[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn three_category_values() {
        let p: Vec<f64> = (0..3)
            .map(|k| ordered_logistic_pmf(k, 0.0, &[-1.0, 1.0]).unwrap())
            .collect();
        // 1 - σ(1), σ(1) - σ(-1), σ(-1)
        let s1 = 1.0 / (1.0 + (-1f64).exp());
        let oracle = [1.0 - s1, s1 - (1.0 - s1), 1.0 - s1];
        for (a, b) in p.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[0] - 0.26894).abs() < 1e-5);
        assert!((p[1] - 0.46212).abs() < 1e-5);
        assert_eq!(p[0], p[2]);
    }

    #[test]
    fn extreme_eta_limits() {
        let c = [-1.0, 0.0, 0.5, 2.0];
        assert!(ordered_logistic_pmf(0, -1e6, &c).unwrap() > 1.0 - 1e-9);
        assert!(ordered_logistic_pmf(4, 1e6, &c).unwrap() > 1.0 - 1e-9);
        for k in 0..5 {
            assert!(ordered_logistic_lpmf(k, -1e6, &c[..]).is_finite());
            assert!(ordered_logistic_lpmf(k, 1e6, &c[..]).is_finite());
        }
    }

    #[test]
    fn non_increasing_cutpoints_rejected() {
        assert!(matches!(
            ordered_logistic_pmf(0, 0.0, &[0.0, 0.0]),
            Err(OrdinalError::NotIncreasing(1))
        ));
        assert!(ordered_logistic_pmf(3, 0.0, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn uniform_dirichlet_is_constant() {
        for p in [[0.2; 5], [0.1, 0.2, 0.3, 0.15, 0.25], [0.96, 0.01, 0.01, 0.01, 0.01]] {
            let cs = cutpoints_from_simplex(&p, 0.5).unwrap();
            let lp = ordinal_prior_logdensity(&cs, &[1.0; 5]).unwrap();
            assert!((lp - 24f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_dirichlet_prefers_heavy_first_entry() {
        let alpha = [2.0, 1.0, 1.0, 1.0, 1.0];
        let a = dirichlet_logdensity(&[0.4, 0.15, 0.15, 0.15, 0.15], &alpha).unwrap();
        let b = dirichlet_logdensity(&[0.1, 0.225, 0.225, 0.225, 0.225], &alpha).unwrap();
        // Γ(6)/Γ(2) · p_1: ln 120 + ln p_1
        assert!((a - (120f64.ln() + 0.4f64.ln())).abs() < 1e-12);
        assert!((b - (120f64.ln() + 0.1f64.ln())).abs() < 1e-12);
        assert!(a > b);
    }

    #[test]
    fn zero_simplex_entry_is_error() {
        assert!(dirichlet_logdensity(&[0.0, 0.25, 0.25, 0.25, 0.25], &[1.0; 5]).is_err());
        assert!(dirichlet_logdensity(&[0.2; 5], &[1.0, 1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn lpmf_gradient_matches_finite_difference() {
        let c = [-1.2, -0.1, 0.7, 1.9];
        for k in 0..5 {
            for &eta in &[-3.0, 0.0, 0.4, 2.5] {
                let mut x = vec![eta];
                x.extend_from_slice(&c);
                let (_, g) = grad(|v| ordered_logistic_lpmf(k, v[0], &v[1..]), &x).unwrap();
                for i in 0..x.len() {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (ordered_logistic_lpmf(k, xp[0], &xp[1..])
                        - ordered_logistic_lpmf(k, xm[0], &xm[1..]))
                        / (2.0 * h);
                    assert!((g[i] - fd).abs() < 1e-6, "k={k} i={i}: {} vs {fd}", g[i]);
                }
            }
        }
    }

    fn sorted_cutpoints() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-4.0f64..4.0, 4).prop_filter_map("distinct", |mut c| {
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c.windows(2).all(|w| w[1] - w[0] > 1e-6).then_some(c)
        })
    }

    fn simplex() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, 5).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn pmf_normalizes(eta in -8.0f64..8.0, c in sorted_cutpoints()) {
            let total: f64 = (0..5).map(|k| ordered_logistic_pmf(k, eta, &c).unwrap()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cumulative_decreases_in_eta(eta in -6.0f64..6.0, d in 0.01f64..3.0, c in sorted_cutpoints()) {
            for k in 0..4 {
                let cum = |e: f64| (0..=k).map(|i| ordered_logistic_pmf(i, e, &c).unwrap()).sum::<f64>();
                prop_assert!(cum(eta + d) <= cum(eta) + 1e-15);
            }
        }

        #[test]
        fn anchor_consistency(p in simplex(), phi in -3.0f64..3.0) {
            let cs = cutpoints_from_simplex(&p, phi).unwrap();
            for k in 0..5 {
                let got = ordered_logistic_pmf(k, phi, cs.cutpoints()).unwrap();
                prop_assert!((got - p[k]).abs() < 1e-10);
                let lp = ordered_logistic_lpmf(k, phi, &cs.cutpoints()[..]);
                prop_assert!((lp.exp() - p[k]).abs() < 1e-10);
            }
        }

        #[test]
        fn shift_equivariance(eta in -5.0f64..5.0, d in -3.0f64..3.0, c in sorted_cutpoints()) {
            let shifted: Vec<f64> = c.iter().map(|x| x + d).collect();
            for k in 0..5 {
                let a = ordered_logistic_pmf(k, eta, &c).unwrap();
                let b = ordered_logistic_pmf(k, eta + d, &shifted).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn lpmf_agrees_with_pmf(eta in -8.0f64..8.0, c in sorted_cutpoints()) {
            for k in 0..5 {
                let p = ordered_logistic_pmf(k, eta, &c).unwrap();
                let lp = ordered_logistic_lpmf(k, eta, &c[..]);
                if p > 1e-8 {
                    prop_assert!((lp - p.ln()).abs() < 1e-7 * (1.0 + p.ln().abs()));
                }
            }
        }
    }
}
