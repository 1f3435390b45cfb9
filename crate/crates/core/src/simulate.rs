//! Synthetic cohorts from the clinical decision process: true Bishop
//! components, a noisy bedside score, a soft physician threshold deciding
//! PIT vs MISO, and outcomes generated from the true components.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{inv_boxcox, mean_sd, Cohort, CohortError, Outcome, PatientRecord, Provenance, Treatment};
use crate::model::{Coefficient, Covariate, ModelSpec};
use crate::ordinal::{ordered_logistic_pmf, CATEGORIES};

/// Redraw budget for a single outcome cell.
pub const MAX_REDRAWS: usize = 1000;

/// Highest possible total Bishop score.
pub const MAX_TOTAL: u8 = 13;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid truth: {0}")]
    InvalidTruth(String),
    #[error("patient {row}, {outcome}: inverse Box-Cox undefined after {MAX_REDRAWS} redraws")]
    TooManyRedraws { row: usize, outcome: Outcome },
    #[error("n must be at least 1")]
    ZeroN,
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("{0}")]
    Io(String),
}

/// Generating parameters of one continuous outcome, on the Box-Cox scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousTruth {
    pub lambda: f64,
    /// Transformed value for a patient at the covariate means.
    pub location: f64,
    pub noise_sd: f64,
    /// Per-unit effects on the transformed scale. Bishop components are per
    /// point, binaries per 0/1 step, BMI and GA per cohort sd. Absent
    /// covariates have no effect.
    pub coefficients: BTreeMap<Covariate, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousOutcomes {
    pub rom_admit: ContinuousTruth,
    pub rom_agent: ContinuousTruth,
    pub aug_fully: ContinuousTruth,
    pub aug_deliv: ContinuousTruth,
}

impl ContinuousOutcomes {
    pub fn get(&self, outcome: Outcome) -> Option<&ContinuousTruth> {
        match outcome {
            Outcome::RomAdmit => Some(&self.rom_admit),
            Outcome::RomAgent => Some(&self.rom_agent),
            Outcome::AugFully => Some(&self.aug_fully),
            Outcome::AugDeliv => Some(&self.aug_deliv),
            Outcome::Cs => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsTruth {
    /// Log-odds effects; the predictor has no intercept.
    pub coefficients: BTreeMap<Covariate, f64>,
}

/// Ordered-logistic generator of the true Position + Consistency score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrdinalTruth {
    pub eta_nullip: f64,
    pub cutpoints: [f64; CATEGORIES - 1],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub nullip_rate: f64,
    pub gbs_rate: f64,
    pub fgr_rate: f64,
    pub epidural_rate: f64,
    pub bmi_mean: f64,
    pub bmi_sd: f64,
    pub ga_mean: f64,
    pub ga_sd: f64,
    /// Probabilities of 0..=3 points.
    pub dilation_probs: [f64; 4],
    pub effacement_probs: [f64; 4],
    pub station_probs: [f64; 4],
}

/// Everything the simulator needs; every field is required in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTruth {
    pub outcomes: ContinuousOutcomes,
    pub cs: CsTruth,
    pub ordinal: OrdinalTruth,
    pub threshold_mean: f64,
    pub threshold_sd: f64,
    pub measurement_noise_sd: f64,
    pub missing_rate: f64,
    pub population: Population,
}

fn coefs(pairs: &[(Covariate, f64)]) -> BTreeMap<Covariate, f64> {
    pairs.iter().copied().collect()
}

/// The null scenario: Bishop components matter, treatment does not.
pub fn default_truth() -> SimTruth {
    use Covariate::*;
    let shared = |d: f64, e: f64, s: f64, pc: f64| {
        vec![(Dilation, d), (Effacement, e), (Station, s), (Poscon, pc), (Treatment, 0.0)]
    };
    let with = |mut base: Vec<(Covariate, f64)>, extra: &[(Covariate, f64)]| {
        base.extend_from_slice(extra);
        coefs(&base)
    };
    SimTruth {
        outcomes: ContinuousOutcomes {
            rom_admit: ContinuousTruth {
                lambda: 0.0,
                location: 4f64.ln(),
                noise_sd: 1.2,
                coefficients: with(shared(0.1, -0.05, -0.1, 0.05), &[(Gbs, -0.3)]),
            },
            rom_agent: ContinuousTruth {
                lambda: 0.0,
                location: 8f64.ln(),
                noise_sd: 0.6,
                coefficients: with(shared(0.1, 0.08, -0.05, 0.1), &[(Gbs, -0.2)]),
            },
            aug_fully: ContinuousTruth {
                lambda: 0.5,
                location: 2.0 * (10f64.sqrt() - 1.0),
                noise_sd: 1.5,
                coefficients: with(shared(-0.3, -0.2, -0.45, -0.25), &[(Nullip, 0.9), (Epidural, -0.3)]),
            },
            aug_deliv: ContinuousTruth {
                lambda: 0.5,
                location: 2.0 * (12f64.sqrt() - 1.0),
                noise_sd: 1.5,
                coefficients: with(
                    shared(-0.35, -0.25, -0.5, -0.3),
                    &[(Nullip, 1.0), (Epidural, 0.3), (Fgr, -0.8)],
                ),
            },
        },
        cs: CsTruth {
            coefficients: with(shared(-0.3, -0.2, -0.3, -0.2), &[(Bmi, 0.4), (Ga, -0.2)]),
        },
        ordinal: OrdinalTruth {
            eta_nullip: -0.5,
            cutpoints: [-1.5, -0.2, 1.0, 2.5],
        },
        threshold_mean: 4.0,
        threshold_sd: 1.0,
        measurement_noise_sd: 1.0,
        missing_rate: 36.0 / 82.0,
        population: Population {
            nullip_rate: 0.45,
            gbs_rate: 0.25,
            fgr_rate: 0.1,
            epidural_rate: 0.7,
            bmi_mean: 31.0,
            bmi_sd: 6.0,
            ga_mean: 38.5,
            ga_sd: 1.5,
            dilation_probs: [0.25, 0.45, 0.2, 0.1],
            effacement_probs: [0.2, 0.35, 0.3, 0.15],
            station_probs: [0.3, 0.35, 0.25, 0.1],
        },
    }
}

fn check_rate(name: &str, p: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SimError::InvalidTruth(format!("{name}={p} must lie in [0, 1]")))
    }
}

fn check_probs(name: &str, p: &[f64]) -> Result<(), SimError> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(SimError::InvalidTruth(format!("{name} must be non-negative and sum to 1")));
    }
    Ok(())
}

impl SimTruth {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let t: Self = serde_json::from_str(text).map_err(|e| SimError::InvalidTruth(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidTruth(msg));
        for o in Outcome::CONTINUOUS {
            let c = self.outcomes.get(o).expect("continuous");
            if !(c.noise_sd > 0.0) || !c.noise_sd.is_finite() {
                return bad(format!("{o} noise_sd={} must be positive", c.noise_sd));
            }
            if !c.lambda.is_finite() || !c.location.is_finite() {
                return bad(format!("{o} lambda and location must be finite"));
            }
            if inv_boxcox(c.location, c.lambda).is_none() {
                return bad(format!("{o} location lies outside the Box-Cox image"));
            }
            if c.coefficients.values().any(|v| !v.is_finite()) {
                return bad(format!("{o} has a non-finite coefficient"));
            }
        }
        if self.cs.coefficients.values().any(|v| !v.is_finite()) {
            return bad("cs has a non-finite coefficient".into());
        }
        let cp = &self.ordinal.cutpoints;
        if !self.ordinal.eta_nullip.is_finite() || cp.iter().any(|c| !c.is_finite()) || cp.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ordinal cutpoints must be finite and strictly increasing".into());
        }
        if !self.threshold_mean.is_finite() || !(self.threshold_sd >= 0.0) || !self.threshold_sd.is_finite() {
            return bad("threshold_sd must be non-negative, threshold_mean finite".into());
        }
        if !(self.measurement_noise_sd >= 0.0) || !self.measurement_noise_sd.is_finite() {
            return bad("measurement_noise_sd must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate={} must lie in [0, 1)", self.missing_rate));
        }
        let p = &self.population;
        check_rate("nullip_rate", p.nullip_rate)?;
        check_rate("gbs_rate", p.gbs_rate)?;
        check_rate("fgr_rate", p.fgr_rate)?;
        check_rate("epidural_rate", p.epidural_rate)?;
        if !(p.bmi_sd > 0.0 && p.ga_sd > 0.0) || !p.bmi_mean.is_finite() || !p.ga_mean.is_finite() {
            return bad("bmi/ga need finite means and positive sds".into());
        }
        check_probs("dilation_probs", &p.dilation_probs)?;
        check_probs("effacement_probs", &p.effacement_probs)?;
        check_probs("station_probs", &p.station_probs)?;
        Ok(())
    }

    /// Effect of `covariate` on `outcome` (zero when absent).
    pub fn coefficient(&self, outcome: Outcome, covariate: Covariate) -> f64 {
        let map = match self.outcomes.get(outcome) {
            Some(c) => &c.coefficients,
            None => &self.cs.coefficients,
        };
        map.get(&covariate).copied().unwrap_or(0.0)
    }
}

/// Per-patient quantities the cohort does not reveal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenRow {
    pub id: String,
    pub position: u8,
    pub consistency: u8,
    pub true_poscon: u8,
    pub poscon_observed: bool,
    pub true_total: u8,
    pub measured_total: u8,
    pub threshold: f64,
    pub pit: bool,
    /// Box-Cox-scale outcome values before inversion.
    pub t_rom_admit: f64,
    pub t_rom_agent: f64,
    pub t_aug_fully: f64,
    pub t_aug_deliv: f64,
    pub cs_logit: f64,
}

impl HiddenRow {
    pub fn transformed(&self, outcome: Outcome) -> Option<f64> {
        match outcome {
            Outcome::RomAdmit => Some(self.t_rom_admit),
            Outcome::RomAgent => Some(self.t_rom_agent),
            Outcome::AugFully => Some(self.t_aug_fully),
            Outcome::AugDeliv => Some(self.t_aug_deliv),
            Outcome::Cs => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub cohort: Cohort,
    pub hidden: Vec<HiddenRow>,
    /// Total inverse-Box-Cox redraws across all cells.
    pub redraws: usize,
}

struct Draft {
    dilation: u8,
    effacement: u8,
    station: u8,
    position: u8,
    consistency: u8,
    nullip: bool,
    epidural: bool,
    fgr: bool,
    gbs: bool,
    ga: f64,
    bmi: f64,
    measured: u8,
    threshold: f64,
    observed: bool,
}

impl Draft {
    fn poscon(&self) -> u8 {
        self.position + self.consistency
    }

    fn total(&self) -> u8 {
        self.dilation + self.effacement + self.station + self.poscon()
    }

    fn raw(&self, c: Covariate) -> f64 {
        match c {
            Covariate::Dilation => self.dilation as f64,
            Covariate::Effacement => self.effacement as f64,
            Covariate::Station => self.station as f64,
            Covariate::Poscon => self.poscon() as f64,
            Covariate::Treatment => (self.measured as f64 > self.threshold) as u8 as f64,
            Covariate::Gbs => self.gbs as u8 as f64,
            Covariate::Nullip => self.nullip as u8 as f64,
            Covariate::Epidural => self.epidural as u8 as f64,
            Covariate::Fgr => self.fgr as u8 as f64,
            Covariate::Bmi => self.bmi,
            Covariate::Ga => self.ga,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}

fn sample_poscon(rng: &mut ChaCha8Rng, eta: f64, cutpoints: &[f64]) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for k in 0..CATEGORIES {
        acc += ordered_logistic_pmf(k, eta, cutpoints).expect("validated cutpoints");
        if u < acc {
            return k as u8;
        }
    }
    (CATEGORIES - 1) as u8
}

/// Simulates `n` patients. Pure in `(truth, n, seed)`.
///
/// Linear predictors use covariates centered on their cohort means (BMI and
/// GA z-scored), the same coding the model applies, so the generating
/// coefficients are directly comparable with fitted ones after dividing the
/// continuous-outcome effects by the sd of the transformed outcome.
pub fn simulate_cohort(truth: &SimTruth, n: usize, seed: u64) -> Result<SimOutput, SimError> {
    truth.validate()?;
    if n == 0 {
        return Err(SimError::ZeroN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pop = &truth.population;
    let points = |p: &[f64; 4]| WeightedIndex::new(p).expect("validated probabilities");
    let (dil, eff, sta) = (points(&pop.dilation_probs), points(&pop.effacement_probs), points(&pop.station_probs));

    let mut drafts = Vec::with_capacity(n);
    for _ in 0..n {
        let nullip = rng.random_bool(pop.nullip_rate);
        let gbs = rng.random_bool(pop.gbs_rate);
        let fgr = rng.random_bool(pop.fgr_rate);
        let epidural = rng.random_bool(pop.epidural_rate);
        let bmi = (normal(&mut rng, pop.bmi_mean, pop.bmi_sd) * 10.0).round() / 10.0;
        let ga = (normal(&mut rng, pop.ga_mean, pop.ga_sd) * 10.0).round() / 10.0;
        let dilation = dil.sample(&mut rng) as u8;
        let effacement = eff.sample(&mut rng) as u8;
        let station = sta.sample(&mut rng) as u8;
        let eta = truth.ordinal.eta_nullip * nullip as u8 as f64;
        let poscon = sample_poscon(&mut rng, eta, &truth.ordinal.cutpoints);
        // Position and consistency are 0..=2 each; split uniformly over the
        // admissible pairs.
        let lo = poscon.saturating_sub(2);
        let hi = poscon.min(2);
        let position = rng.random_range(lo..=hi);
        let consistency = poscon - position;
        let total = (dilation + effacement + station + poscon) as f64;
        let measured = normal(&mut rng, total, truth.measurement_noise_sd)
            .round()
            .clamp(0.0, MAX_TOTAL as f64) as u8;
        let threshold = normal(&mut rng, truth.threshold_mean, truth.threshold_sd);
        let observed = !rng.random_bool(truth.missing_rate);
        drafts.push(Draft {
            dilation,
            effacement,
            station,
            position,
            consistency,
            nullip,
            epidural,
            fgr,
            gbs,
            ga,
            bmi,
            measured,
            threshold,
            observed,
        });
    }

    // Centering constants from the realized cohort.
    let centers: BTreeMap<Covariate, (f64, f64)> = Covariate::ALL
        .iter()
        .map(|&c| {
            let xs: Vec<f64> = drafts.iter().map(|d| d.raw(c)).collect();
            let (m, s) = mean_sd(&xs);
            let scale = if matches!(c, Covariate::Bmi | Covariate::Ga) && s > 0.0 { s } else { 1.0 };
            (c, (m, scale))
        })
        .collect();
    let predictor = |d: &Draft, map: &BTreeMap<Covariate, f64>| -> f64 {
        map.iter()
            .map(|(c, b)| {
                let (m, s) = centers[c];
                b * (d.raw(*c) - m) / s
            })
            .sum()
    };

    let mut redraws = 0;
    let mut records = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    for (i, d) in drafts.iter().enumerate() {
        let id = format!("sim{i:05}");
        let mut t = [0.0; 4];
        let mut y = [0.0; 4];
        for (j, o) in Outcome::CONTINUOUS.iter().enumerate() {
            let ct = truth.outcomes.get(*o).expect("continuous");
            let mu = ct.location + predictor(d, &ct.coefficients);
            let mut tries = 0;
            loop {
                let tv = normal(&mut rng, mu, ct.noise_sd);
                if let Some(v) = inv_boxcox(tv, ct.lambda) {
                    t[j] = tv;
                    y[j] = v;
                    break;
                }
                tries += 1;
                redraws += 1;
                if tries > MAX_REDRAWS {
                    return Err(SimError::TooManyRedraws { row: i, outcome: *o });
                }
            }
        }
        let cs_logit = predictor(d, &truth.cs.coefficients);
        let cs = rng.random::<f64>() < 1.0 / (1.0 + (-cs_logit).exp());
        let pit = d.raw(Covariate::Treatment) == 1.0;
        records.push(PatientRecord {
            id: id.clone(),
            dilation_pts: d.dilation,
            effacement_pts: d.effacement,
            station_pts: d.station,
            poscon_pts: d.observed.then_some(d.poscon()),
            nullip: d.nullip,
            epidural: d.epidural,
            fgr: d.fgr,
            gbs: d.gbs,
            ga_weeks: d.ga,
            bmi: d.bmi,
            treatment: if pit { Treatment::Pit } else { Treatment::Miso },
            rom_admit_h: Some(y[0]),
            rom_agent_h: Some(y[1]),
            aug_fully_h: Some(y[2]),
            aug_deliv_h: Some(y[3]),
            cs,
        });
        hidden.push(HiddenRow {
            id,
            position: d.position,
            consistency: d.consistency,
            true_poscon: d.poscon(),
            poscon_observed: d.observed,
            true_total: d.total(),
            measured_total: d.measured,
            threshold: d.threshold,
            pit,
            t_rom_admit: t[0],
            t_rom_agent: t[1],
            t_aug_fully: t[2],
            t_aug_deliv: t[3],
            cs_logit,
        });
    }
    Ok(SimOutput {
        cohort: Cohort::new(records, Provenance::Synthetic)?,
        hidden,
        redraws,
    })
}

/// True coefficients on the model's scale: continuous-outcome effects are
/// divided by the sample sd of the transformed outcome (the model
/// standardizes after Box-Cox); cesarean effects are already log-odds.
pub fn model_scale_truth(truth: &SimTruth, hidden: &[HiddenRow], spec: &ModelSpec) -> Vec<(Coefficient, f64)> {
    let scale = |o: Outcome| -> f64 {
        match o {
            Outcome::Cs => 1.0,
            _ => {
                let t: Vec<f64> = hidden.iter().filter_map(|h| h.transformed(o)).collect();
                mean_sd(&t).1
            }
        }
    };
    let scales: BTreeMap<Outcome, f64> = Outcome::ALL.iter().map(|&o| (o, scale(o))).collect();
    spec.coefficients()
        .into_iter()
        .map(|c| {
            let v = truth.coefficient(c.outcome, c.family) / scales[&c.outcome];
            (c, v)
        })
        .collect()
}

pub fn write_hidden<W: Write>(hidden: &[HiddenRow], writer: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    for h in hidden {
        w.serialize(h).map_err(|e| SimError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| SimError::Io(e.to_string()))
}

pub fn save_hidden(hidden: &[HiddenRow], path: impl AsRef<Path>) -> Result<(), SimError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    write_hidden(hidden, std::io::BufWriter::new(file))
}
