//! Naive two-arm comparisons that ignore confounding: Mann-Whitney U on the
//! durations and a pooled two-proportion z-test on cesarean rates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{average_ranks, DiagnosticsError};
use crate::cohort::{Cohort, Outcome, Treatment};

/// Combined sample sizes up to this use exact enumeration (absent ties).
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of the first group: the number of (a, b) pairs with a > b,
    /// ties counting one half.
    pub u: f64,
    pub p_two_sided: f64,
    pub method: MwMethod,
    pub n_a: usize,
    pub n_b: usize,
}

fn std_normal_sf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sf(z)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::EmptyGroup);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let r_a: f64 = ranks[..na].iter().sum();
    let u = r_a - (na * (na + 1)) as f64 / 2.0;

    // Tie groups.
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }

    if n <= EXACT_MAX_N && tie_term == 0.0 {
        return Ok(MannWhitney {
            u,
            p_two_sided: exact_p(na, nb, u),
            method: MwMethod::Exact,
            n_a: na,
            n_b: nb,
        });
    }

    let (naf, nbf, nf) = (na as f64, nb as f64, n as f64);
    let mu = naf * nbf / 2.0;
    let var = naf * nbf / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p = if var > 0.0 {
        let z = (((u - mu).abs() - 0.5) / var.sqrt()).max(0.0);
        (2.0 * std_normal_sf(z)).min(1.0)
    } else {
        1.0
    };
    Ok(MannWhitney {
        u,
        p_two_sided: p,
        method: MwMethod::Normal,
        n_a: na,
        n_b: nb,
    })
}

/// Two-sided exact p by enumerating every assignment of ranks 1..=N to the
/// first group: `2·min(P(U ≤ u), P(U ≥ u))`, capped at 1.
fn exact_p(na: usize, nb: usize, u: f64) -> f64 {
    let n = na + nb;
    let base = (na * (na + 1)) as f64 / 2.0;
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let rank_sum: usize = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
        let ui = rank_sum as f64 - base;
        total += 1;
        if ui <= u + 1e-9 {
            le += 1;
        }
        if ui >= u - 1e-9 {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoProportion {
    pub x_a: usize,
    pub n_a: usize,
    pub x_b: usize,
    pub n_b: usize,
    /// `x_a/n_a − x_b/n_b`.
    pub diff: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

/// Pooled two-proportion z-test.
pub fn two_proportion_test(x_a: usize, n_a: usize, x_b: usize, n_b: usize) -> Result<TwoProportion, DiagnosticsError> {
    if n_a == 0 || n_b == 0 {
        return Err(DiagnosticsError::EmptyGroup);
    }
    let (pa, pb) = (x_a as f64 / n_a as f64, x_b as f64 / n_b as f64);
    let pool = (x_a + x_b) as f64 / (n_a + n_b) as f64;
    let se = (pool * (1.0 - pool) * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt();
    let (z, p) = if se > 0.0 {
        let z = (pa - pb) / se;
        (z, (2.0 * std_normal_sf(z.abs())).min(1.0))
    } else {
        (0.0, 1.0)
    };
    Ok(TwoProportion {
        x_a,
        n_a,
        x_b,
        n_b,
        diff: pa - pb,
        z,
        p_two_sided: p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationComparison {
    pub outcome: String,
    pub mann_whitney: MannWhitney,
}

/// The unadjusted PIT-vs-MISO comparison: Mann-Whitney on each duration
/// (present values only) and a two-proportion test on cesarean rates.
/// Group `a` is PIT throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveComparison {
    pub n_pit: usize,
    pub n_miso: usize,
    pub durations: Vec<DurationComparison>,
    pub cs: TwoProportion,
}

pub fn naive_comparison(cohort: &Cohort) -> Result<NaiveComparison, DiagnosticsError> {
    let recs = cohort.records();
    let arm = |t: Treatment| recs.iter().filter(move |r| r.treatment == t);
    let (n_pit, n_miso) = (arm(Treatment::Pit).count(), arm(Treatment::Miso).count());
    if n_pit == 0 || n_miso == 0 {
        return Err(DiagnosticsError::EmptyGroup);
    }
    let durations = Outcome::CONTINUOUS
        .iter()
        .map(|&o| {
            let a: Vec<f64> = arm(Treatment::Pit).filter_map(|r| r.duration(o)).collect();
            let b: Vec<f64> = arm(Treatment::Miso).filter_map(|r| r.duration(o)).collect();
            Ok(DurationComparison {
                outcome: o.name().to_string(),
                mann_whitney: mann_whitney_u(&a, &b)?,
            })
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    let cs_count = |t| arm(t).filter(|r| r.cs).count();
    let cs = two_proportion_test(cs_count(Treatment::Pit), n_pit, cs_count(Treatment::Miso), n_miso)?;
    Ok(NaiveComparison {
        n_pit,
        n_miso,
        durations,
        cs,
    })
}
