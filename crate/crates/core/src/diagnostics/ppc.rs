//! Posterior predictive replicates of the six observed channels: the four
//! durations (in hours), cesarean, and the Position + Consistency score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DiagnosticsError;
use crate::cohort::{DesignTable, Outcome, OutcomeTransform};
use crate::model::{Model, Params};
use crate::ordinal::{ordered_logistic_pmf, CATEGORIES};
use crate::sampler::PosteriorDraws;

pub const DURATION_BINS: usize = 20;
pub const CHANNELS: [&str; 6] = ["rom_admit", "rom_agent", "aug_fully", "aug_deliv", "cs", "poscon"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcChannel {
    pub name: String,
    /// `bins + 1` edges; values beyond the ends are counted in the end bins.
    pub edges: Vec<f64>,
    pub observed: Vec<u64>,
    pub replicates: Vec<Vec<u64>>,
    pub observed_mean: f64,
    pub observed_sd: f64,
    pub replicate_means: Vec<f64>,
    pub replicate_sds: Vec<f64>,
    /// Replicated values whose back-transform was undefined and were clamped.
    pub clamped: usize,
}

impl PpcChannel {
    /// Whether the observed mean and sd both fall inside the central
    /// `mass` interval of the replicated statistics.
    pub fn covers(&self, mass: f64) -> bool {
        let inside = |x: f64, v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            let k = s.len() - 1;
            let lo = s[((1.0 - mass) / 2.0 * k as f64).floor() as usize];
            let hi = s[((1.0 + mass) / 2.0 * k as f64).ceil() as usize];
            lo <= x && x <= hi
        };
        inside(self.observed_mean, &self.replicate_means) && inside(self.observed_sd, &self.replicate_sds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcResult {
    /// Chain-major indices of the posterior draws used, one per replicate.
    pub draw_indices: Vec<usize>,
    pub channels: Vec<PpcChannel>,
}

/// One simulated dataset. Durations are generated only where the observed
/// cohort has a value, so replicate and observed histograms compare like
/// with like.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub poscon: Vec<u8>,
    pub durations: Vec<[Option<f64>; 4]>,
    pub cs: Vec<bool>,
    pub clamped: [usize; 4],
}

/// `n_rep` evenly spaced indices into `total` draws.
pub fn thin_indices(total: usize, n_rep: usize) -> Vec<usize> {
    (0..n_rep).map(|i| i * total / n_rep).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Simulates every row from the generative model at `p`. Uses only
/// parameters, covariates and presence masks, never observed outcome
/// values. Back-transforms outside the Box-Cox image are clamped to
/// `[0, ceiling[j]]` and counted.
pub fn replicate(
    model: &Model,
    transforms: &[OutcomeTransform],
    p: &Params<f64>,
    ceiling: &[f64; 4],
    rng: &mut ChaCha8Rng,
) -> Result<Replicate, DiagnosticsError> {
    let data = model.data();
    let n = data.n();
    let mut out = Replicate {
        poscon: Vec::with_capacity(n),
        durations: Vec::with_capacity(n),
        cs: Vec::with_capacity(n),
        clamped: [0; 4],
    };
    for i in 0..n {
        let eta = model.eta(i, p)?;
        let u: f64 = rng.random();
        let mut k = CATEGORIES - 1;
        let mut acc = 0.0;
        for c in 0..CATEGORIES {
            acc += ordered_logistic_pmf(c, eta, &p.cutpoints).expect("cutpoints from a valid draw");
            if u < acc {
                k = c;
                break;
            }
        }
        let mut durs = [None; 4];
        for (j, o) in Outcome::CONTINUOUS.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            if data.y[i][j].is_none() {
                continue;
            }
            let mu = model.outcome_mean(i, p, *o, k)?;
            let ystd = mu + p.noise_sigma[j] * z;
            durs[j] = Some(match transforms[j].inverse(ystd) {
                Some(h) => h,
                None => {
                    out.clamped[j] += 1;
                    if transforms[j].lambda > 0.0 {
                        0.0
                    } else {
                        ceiling[j]
                    }
                }
            });
        }
        let q = sigmoid(model.outcome_mean(i, p, Outcome::Cs, k)?);
        out.cs.push(rng.random::<f64>() < q);
        out.poscon.push(k as u8);
        out.durations.push(durs);
    }
    Ok(out)
}

fn histogram(values: &[f64], edges: &[f64]) -> Vec<u64> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if v <= lo {
            0
        } else if v >= hi {
            bins - 1
        } else {
            (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    counts
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    crate::cohort::mean_sd(v)
}

struct Builder {
    name: &'static str,
    edges: Vec<f64>,
    observed: Vec<f64>,
    replicates: Vec<Vec<u64>>,
    means: Vec<f64>,
    sds: Vec<f64>,
    clamped: usize,
}

impl Builder {
    fn new(name: &'static str, edges: Vec<f64>, observed: Vec<f64>) -> Self {
        Self {
            name,
            edges,
            observed,
            replicates: Vec::new(),
            means: Vec::new(),
            sds: Vec::new(),
            clamped: 0,
        }
    }

    fn push(&mut self, values: &[f64]) {
        self.replicates.push(histogram(values, &self.edges));
        let (m, s) = mean_sd(values);
        self.means.push(m);
        self.sds.push(s);
    }

    fn finish(self) -> PpcChannel {
        let (m, s) = mean_sd(&self.observed);
        PpcChannel {
            name: self.name.to_string(),
            observed: histogram(&self.observed, &self.edges),
            edges: self.edges,
            replicates: self.replicates,
            observed_mean: m,
            observed_sd: s,
            replicate_means: self.means,
            replicate_sds: self.sds,
            clamped: self.clamped,
        }
    }
}

/// Replicates the cohort at `n_rep` evenly thinned posterior draws and bins
/// each channel with the observed data's edges. Replicate `r` draws from its
/// own stream `(seed, r)`.
pub fn posterior_predictive(
    draws: &PosteriorDraws,
    model: &Model,
    table: &DesignTable,
    n_rep: usize,
    seed: u64,
) -> Result<PpcResult, DiagnosticsError> {
    let total = draws.total_draws();
    if n_rep == 0 || n_rep > total {
        return Err(DiagnosticsError::TooManyReplicates {
            requested: n_rep,
            available: total,
        });
    }
    let data = model.data();
    let n = data.n();

    let mut builders: Vec<Builder> = Vec::with_capacity(6);
    let mut ceiling = [0.0; 4];
    for j in 0..4 {
        let obs: Vec<f64> = table
            .rows
            .iter()
            .filter_map(|r| r.outcomes[j])
            .map(|z| table.transforms[j].inverse(z).unwrap_or(0.0))
            .collect();
        let hi = obs.iter().cloned().fold(0.0, f64::max);
        ceiling[j] = hi * 4.0;
        let edges = (0..=DURATION_BINS).map(|b| hi * b as f64 / DURATION_BINS as f64).collect();
        builders.push(Builder::new(CHANNELS[j], edges, obs));
    }
    let obs_cs: Vec<f64> = data.cs.iter().map(|&c| c as u8 as f64).collect();
    builders.push(Builder::new("cs", vec![0.0, 1.0, 2.0], obs_cs));
    let pc_rows: Vec<usize> = (0..n).filter(|&i| data.poscon[i].is_some()).collect();
    let obs_pc: Vec<f64> = pc_rows.iter().map(|&i| data.poscon[i].unwrap() as f64).collect();
    builders.push(Builder::new("poscon", (0..=CATEGORIES).map(|k| k as f64).collect(), obs_pc));

    let flat: Vec<&Vec<f64>> = draws.iter_draws().collect();
    let draw_indices = thin_indices(total, n_rep);
    for (r, &d) in draw_indices.iter().enumerate() {
        let p = model.space().params_from_constrained(flat[d])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let rep = replicate(model, &table.transforms, &p, &ceiling, &mut rng)?;
        for (j, b) in builders.iter_mut().take(4).enumerate() {
            let v: Vec<f64> = rep.durations.iter().filter_map(|d| d[j]).collect();
            b.push(&v);
            b.clamped += rep.clamped[j];
        }
        builders[4].push(&rep.cs.iter().map(|&c| c as u8 as f64).collect::<Vec<_>>());
        builders[5].push(&pc_rows.iter().map(|&i| rep.poscon[i] as f64).collect::<Vec<_>>());
    }
    Ok(PpcResult {
        draw_indices,
        channels: builders.into_iter().map(Builder::finish).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::tests::synthetic_cohort;
    use crate::model::{ModelSpec, ParameterSpace, PreparedData};
    use crate::sampler::{ChainDraws, DrawStats};

    fn setup(n: usize) -> (Model, DesignTable, PosteriorDraws) {
        let table = crate::cohort::preprocess_outcomes(&synthetic_cohort(n, 21)).unwrap();
        let space = ParameterSpace::new(ModelSpec::prom()).unwrap();
        let model = Model::new(space.clone(), PreparedData::new(&table, &space).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = DrawStats {
            divergent: false,
            tree_depth: 1,
            n_leapfrog: 1,
            accept: 1.0,
            energy: 0.0,
            step_size: 0.1,
            lp: 0.0,
        };
        let chains = (0..2)
            .map(|_| {
                let draws: Vec<Vec<f64>> = (0..15)
                    .map(|_| {
                        let theta: Vec<f64> = (0..space.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
                        let (p, _) = space.constrain(&theta).unwrap();
                        space.constrained_values(&p)
                    })
                    .collect();
                ChainDraws {
                    stats: vec![stats; draws.len()],
                    draws,
                    step_size: 0.1,
                    inv_metric: vec![],
                    warmup_divergences: 0,
                }
            })
            .collect();
        let draws = PosteriorDraws {
            names: space.constrained_names(),
            chains,
        };
        (model, table, draws)
    }

    #[test]
    fn thinning_identity_and_spacing() {
        assert_eq!(thin_indices(30, 30), (0..30).collect::<Vec<_>>());
        assert_eq!(thin_indices(3600, 200)[1], 18);
        let t = thin_indices(3600, 200);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn structure_and_support() {
        let (model, table, draws) = setup(40);
        let r = posterior_predictive(&draws, &model, &table, 30, 9).unwrap();
        assert_eq!(r.draw_indices, (0..30).collect::<Vec<_>>());
        assert_eq!(r.channels.len(), 6);
        for (c, name) in r.channels.iter().zip(CHANNELS) {
            assert_eq!(c.name, name);
            assert_eq!(c.replicates.len(), 30);
            let total: u64 = c.observed.iter().sum();
            assert!(c.replicates.iter().all(|h| h.iter().sum::<u64>() == total));
            assert_eq!(c.edges.len(), c.observed.len() + 1);
        }
        assert_eq!(r.channels[5].edges.len(), 6);
        assert!(matches!(
            posterior_predictive(&draws, &model, &table, 31, 9),
            Err(DiagnosticsError::TooManyReplicates { .. })
        ));
    }

    #[test]
    fn replicate_poscon_within_support() {
        let (model, table, draws) = setup(40);
        let p = model.space().params_from_constrained(&draws.chains[0].draws[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rep = replicate(&model, &table.transforms, &p, &[1e3; 4], &mut rng).unwrap();
            assert!(rep.poscon.iter().all(|&k| (k as usize) < CATEGORIES));
        }
    }

    #[test]
    fn replicates_ignore_observed_outcome_values() {
        let (model, table, draws) = setup(40);
        let p = model.space().params_from_constrained(&draws.chains[1].draws[3]).unwrap();
        // Permute observed values among rows, keeping presence masks.
        let mut scrambled = model.data().clone();
        for j in 0..4 {
            let present: Vec<usize> = (0..scrambled.n()).filter(|&i| scrambled.y[i][j].is_some()).collect();
            let vals: Vec<f64> = present.iter().map(|&i| scrambled.y[i][j].unwrap()).collect();
            for (k, &i) in present.iter().enumerate() {
                scrambled.y[i][j] = Some(vals[(k + 1) % vals.len()]);
            }
        }
        scrambled.cs.rotate_left(1);
        let other = Model::new(model.space().clone(), scrambled);
        let a = replicate(&model, &table.transforms, &p, &[1e3; 4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = replicate(&other, &table.transforms, &p, &[1e3; 4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic() {
        let (model, table, draws) = setup(30);
        let a = posterior_predictive(&draws, &model, &table, 10, 4).unwrap();
        let b = posterior_predictive(&draws, &model, &table, 10, 4).unwrap();
        assert_eq!(a, b);
    }
}
