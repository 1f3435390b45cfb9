//! Convergence diagnostics, HDR summaries, posterior predictive checks and
//! the naive frequentist baseline.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::sampler::PosteriorDraws;

pub mod baseline;
pub mod ppc;

pub use baseline::{
    mann_whitney_u, naive_comparison, two_proportion_test, DurationComparison, MannWhitney, MwMethod, NaiveComparison,
    TwoProportion,
};
pub use ppc::{posterior_predictive, PpcChannel, PpcResult};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least {need} chains, got {got}")]
    TooFewChains { need: usize, got: usize },
    #[error("need at least {need} draws, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("chains have unequal lengths")]
    Ragged,
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite draw")]
    NonFinite,
    #[error("HDR mass {0} outside (0, 1)")]
    BadMass(f64),
    #[error("empty group")]
    EmptyGroup,
    #[error("requested {requested} replicates from {available} draws")]
    TooManyReplicates { requested: usize, available: usize },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

fn check_chains(chains: &[Vec<f64>], min_chains: usize) -> Result<usize, DiagnosticsError> {
    if chains.len() < min_chains {
        return Err(DiagnosticsError::TooFewChains {
            need: min_chains,
            got: chains.len(),
        });
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::Ragged);
    }
    if n < 4 {
        return Err(DiagnosticsError::TooFewDraws { need: 4, got: n });
    }
    if chains.iter().flatten().any(|x| !x.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    Ok(n)
}

/// Each chain cut into two halves (a trailing odd draw is dropped).
fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let half = chains[0].len() / 2;
    chains
        .iter()
        .flat_map(|c| [&c[..half], &c[c.len() - half..]])
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic split-chain potential scale reduction.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    check_chains(chains, 2)?;
    let halves = split(chains);
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| sample_var(h)).collect::<Vec<_>>());
    if !(w > 0.0) {
        return Err(DiagnosticsError::ZeroVariance);
    }
    let b = n * sample_var(&means);
    let var_plus = w * (n - 1.0) / n + b / n;
    Ok((var_plus / w).sqrt())
}

/// Bulk effective sample size: rank-normalized split chains, Geyer's
/// initial monotone sequence over the multi-chain autocorrelation.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    check_chains(chains, 1)?;
    let halves: Vec<Vec<f64>> = split(chains).into_iter().map(|h| h.to_vec()).collect();
    ess(&rank_normalize(&halves))
}

/// Monte Carlo standard error of the pooled mean, `sd / √ESS`.
pub fn mcse_mean(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let n_eff = ess(chains)?;
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    Ok((sample_var(&pooled) / n_eff).sqrt())
}

/// Effective sample size of the given chains as they are (no splitting or
/// ranking).
pub fn ess(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    if chains.is_empty() {
        return Err(DiagnosticsError::TooFewChains { need: 1, got: 0 });
    }
    if chains[0].len() < 2 {
        return Err(DiagnosticsError::TooFewDraws { need: 2, got: chains[0].len() });
    }
    if chains.iter().any(|c| c.len() != chains[0].len()) {
        return Err(DiagnosticsError::Ragged);
    }
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |c: usize, t: usize| -> f64 {
        let x = &chains[c];
        let mu = means[c];
        (0..n - t).map(|i| (x[i] - mu) * (x[i + t] - mu)).sum::<f64>() / n as f64
    };
    let mean_acov = |t: usize| (0..m).map(|c| acov(c, t)).sum::<f64>() / m as f64;
    let chain_vars: Vec<f64> = (0..m).map(|c| acov(c, 0) * n as f64 / (n as f64 - 1.0)).collect();
    let mean_var = mean(&chain_vars);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return Err(DiagnosticsError::ZeroVariance);
    }
    let rho_at = |t: usize| 1.0 - (mean_var - mean_acov(t)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho_at(1);
    rho[1] = rho_odd;
    let mut s = 1;
    while s + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(s + 1);
        rho_odd = rho_at(s + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    // Avoid a negative last autocorrelation skewing the estimate.
    if rho[max_s] > 0.0 && max_s + 1 < n {
        rho[max_s + 1] = rho[max_s];
    }
    // Initial monotone sequence.
    let mut s = 1;
    while s + 3 <= max_s {
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s] {
            rho[s + 1] = (rho[s - 1] + rho[s]) / 2.0;
            rho[s + 2] = rho[s + 1];
        }
        s += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_s + 1 < n { rho[max_s + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..=max_s].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Ok(total / tau)
}

/// Pooled average ranks mapped through the normal quantile function
/// (Blom offset 3/8).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let ranks = average_ranks(&pooled);
    let s = pooled.len() as f64;
    let std = Normal::new(0.0, 1.0).unwrap();
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| std.inverse_cdf((r - 0.375) / (s + 0.25)))
        .collect();
    z.chunks(chains[0].len()).map(|c| c.to_vec()).collect()
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sorted-index bounds `(first, last)` of the narrowest window holding
/// `⌈mass·N⌉` samples. Ties go to the lowest window.
pub fn hdr_indices(sorted: &[f64], mass: f64) -> Result<(usize, usize), DiagnosticsError> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(DiagnosticsError::BadMass(mass));
    }
    if sorted.len() < 20 {
        return Err(DiagnosticsError::TooFewDraws {
            need: 20,
            got: sorted.len(),
        });
    }
    let n = sorted.len();
    let k = ((mass * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (0, k - 1);
    let mut width = f64::INFINITY;
    for i in 0..=n - k {
        let w = sorted[i + k - 1] - sorted[i];
        if w < width {
            width = w;
            best = (i, i + k - 1);
        }
    }
    Ok(best)
}

/// Highest-density interval: the narrowest interval containing
/// `⌈mass·N⌉` of the samples.
pub fn hdr(samples: &[f64], mass: f64) -> Result<(f64, f64), DiagnosticsError> {
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = hdr_indices(&s, mass)?;
    Ok((s[lo], s[hi]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub hdr_lo: f64,
    pub hdr_hi: f64,
    /// `None` when there is a single chain or no within-chain variance.
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    /// `max(P(θ > 0), P(θ < 0))`.
    pub prob_direction: f64,
    /// The HDR excludes zero.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub hdr_mass: f64,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub divergences: usize,
    pub max_tree_depth: usize,
    pub max_depth_hits: usize,
    pub max_rhat: Option<f64>,
    pub min_ess_bulk: Option<f64>,
    pub params: Vec<ParamSummary>,
}

pub fn summarize_param(name: &str, chains: &[Vec<f64>], mass: f64) -> Result<ParamSummary, DiagnosticsError> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let (hdr_lo, hdr_hi) = hdr(&pooled, mass)?;
    let n = pooled.len() as f64;
    let m = mean(&pooled);
    let pos = pooled.iter().filter(|&&x| x > 0.0).count() as f64 / n;
    let neg = pooled.iter().filter(|&&x| x < 0.0).count() as f64 / n;
    Ok(ParamSummary {
        name: name.to_string(),
        mean: m,
        sd: sample_var(&pooled).sqrt(),
        hdr_lo,
        hdr_hi,
        rhat: split_rhat(chains).ok(),
        ess_bulk: ess_bulk(chains).ok(),
        prob_direction: pos.max(neg),
        significant: hdr_lo > 0.0 || hdr_hi < 0.0,
    })
}

/// Per-parameter summaries plus global sampler health.
pub fn fit_report(draws: &PosteriorDraws, mass: f64, max_tree_depth: usize) -> Result<FitReport, DiagnosticsError> {
    let params = (0..draws.names.len())
        .map(|j| summarize_param(&draws.names[j], &draws.param_chains(j), mass))
        .collect::<Result<Vec<_>, _>>()?;
    let max_rhat = params.iter().filter_map(|p| p.rhat).reduce(f64::max);
    let min_ess_bulk = params.iter().filter_map(|p| p.ess_bulk).reduce(f64::min);
    Ok(FitReport {
        hdr_mass: mass,
        chains: draws.n_chains(),
        draws_per_chain: draws.n_draws(),
        divergences: draws.divergences(),
        max_tree_depth,
        max_depth_hits: draws.max_depth_hits(max_tree_depth),
        max_rhat,
        min_ess_bulk,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(rng: &mut ChaCha8Rng, n: usize, mu: f64) -> Vec<f64> {
        (0..n).map(|_| mu + rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn rhat_of_independent_chains_is_near_one() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chains: Vec<Vec<f64>> = (0..4).map(|_| normals(&mut rng, 900, 0.0)).collect();
            assert!(split_rhat(&chains).unwrap() < 1.01);
        }
    }

    #[test]
    fn rhat_flags_separated_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains = vec![normals(&mut rng, 900, 0.0), normals(&mut rng, 900, 10.0)];
        // Four halves at 0, 0, 10, 10: B/n ≈ 100/3·... so R̂ ≈ sqrt(1 + 33.3) ≈ 5.9.
        let r = split_rhat(&chains).unwrap();
        assert!(r > 3.0, "{r}");
        let var_plus_over_w: f64 = (899.0 / 900.0) + 100.0 / 3.0;
        assert!((r - var_plus_over_w.sqrt()).abs() < 0.5);
    }

    #[test]
    fn rhat_degenerate_and_affine_invariant() {
        assert!(matches!(
            split_rhat(&[vec![1.0; 10], vec![1.0; 10]]),
            Err(DiagnosticsError::ZeroVariance)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chains: Vec<Vec<f64>> = (0..3).map(|i| normals(&mut rng, 200, i as f64 * 0.3)).collect();
        let t: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| 3.0 * x + 7.0).collect()).collect();
        assert!((split_rhat(&chains).unwrap() - split_rhat(&t).unwrap()).abs() < 1e-10);
        assert!(matches!(split_rhat(&chains[..1]), Err(DiagnosticsError::TooFewChains { .. })));
    }

    #[test]
    fn ess_of_independent_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| normals(&mut rng, 1000, 0.0)).collect();
        let e = ess_bulk(&chains).unwrap();
        assert!((e / 4000.0 - 1.0).abs() < 0.15, "{e}");
    }

    #[test]
    fn ess_of_ar1_matches_theory() {
        let phi: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5000;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
                (0..n)
                    .map(|_| {
                        x = phi * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let want = 4.0 * n as f64 * (1.0 - phi) / (1.0 + phi);
        let e = ess_bulk(&chains).unwrap();
        assert!((e / want - 1.0).abs() < 0.3, "{e} vs {want}");
    }

    #[test]
    fn ess_of_constant_chain_fails() {
        assert!(ess_bulk(&[vec![2.0; 50]]).is_err());
    }

    #[test]
    fn hdr_of_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normals(&mut rng, 1_000_000, 0.0);
        let (lo, hi) = hdr(&x, 0.95).unwrap();
        assert!((lo + 1.960).abs() < 0.02 && (hi - 1.960).abs() < 0.02, "{lo} {hi}");
    }

    #[test]
    fn hdr_of_uniform_has_half_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let (lo, hi) = hdr(&x, 0.5).unwrap();
        assert!((hi - lo - 0.5).abs() < 0.02);
    }

    #[test]
    fn hdr_of_triangular_sample_is_symmetric() {
        // Deterministic symmetric triangular sample on [−1, 1] via its
        // quantile function.
        let n = 10_001;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                if u < 0.5 {
                    -1.0 + (2.0 * u).sqrt()
                } else {
                    1.0 - (2.0 * (1.0 - u)).sqrt()
                }
            })
            .collect();
        for mass in [0.5, 0.8, 0.95] {
            let (lo, hi) = hdr(&x, mass).unwrap();
            assert!((lo + hi).abs() < 0.01, "{lo} {hi}");
        }
    }

    #[test]
    fn hdr_rejects_bad_input() {
        assert!(matches!(hdr(&[1.0; 10], 0.9), Err(DiagnosticsError::TooFewDraws { .. })));
        assert!(matches!(hdr(&[1.0; 30], 1.5), Err(DiagnosticsError::BadMass(_))));
    }

    #[test]
    fn hdr_contains_stated_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = normals(&mut rng, 3600, 0.0);
        let (lo, hi) = hdr(&x, 0.95).unwrap();
        let inside = x.iter().filter(|&&v| v >= lo && v <= hi).count();
        assert_eq!(inside, (0.95f64 * 3600.0).ceil() as usize);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        /// Nesting on unimodal samples (gamma-like skew plus normal noise).
        #[test]
        fn hdr_nests_on_unimodal_samples(seed in 0u64..10_000, n in 200usize..2000, skew in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z + skew * z * z
                })
                .collect();
            x.sort_by(f64::total_cmp);
            let (a_lo, a_hi) = hdr_indices(&x, 0.5).unwrap();
            let (b_lo, b_hi) = hdr_indices(&x, 0.95).unwrap();
            prop_assert!(b_lo <= a_lo && a_hi <= b_hi);
        }
    }

    #[test]
    fn report_marks_missing_rhat_for_one_chain() {
        use crate::sampler::{ChainDraws, DrawStats, PosteriorDraws};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stats = DrawStats {
            divergent: false,
            tree_depth: 3,
            n_leapfrog: 7,
            accept: 0.9,
            energy: 1.0,
            step_size: 0.5,
            lp: 0.0,
        };
        let chain = ChainDraws {
            draws: (0..100).map(|_| vec![rng.sample(StandardNormal), 3.0 + rng.random::<f64>()]).collect(),
            stats: vec![stats; 100],
            step_size: 0.5,
            inv_metric: vec![1.0, 1.0],
            warmup_divergences: 0,
        };
        let draws = PosteriorDraws {
            names: vec!["a".into(), "b".into()],
            chains: vec![chain],
        };
        let r = fit_report(&draws, 0.95, 10).unwrap();
        assert!(r.max_rhat.is_none());
        assert!(r.params.iter().all(|p| p.rhat.is_none() && p.ess_bulk.is_some()));
        assert!(r.params[1].significant);
        assert_eq!(r.params[1].prob_direction, 1.0);
    }
}
