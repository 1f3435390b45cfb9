//! Named parameter blocks and their constrained ↔ unconstrained maps.
//!
//! Unconstrained layout (F families, C coefficients):
//!
//! | offset          | len | block                                     |
//! |-----------------|-----|-------------------------------------------|
//! | 0               | 1   | `aleph_nullip`                            |
//! | 1               | 1   | `aleph_pit`                               |
//! | 2               | 1   | `b_pc`                                    |
//! | 3               | 1   | `phi` via `4·logit⁻¹(u)`                  |
//! | 4               | 4   | simplex via stick-breaking                |
//! | 8               | F   | family locations `mu`                     |
//! | 8 + F           | F   | family scales, `log σ`                    |
//! | 8 + 2F          | C   | coefficients (raw `z` when non-centered)  |
//! | 8 + 2F + C      | 4   | outcome noise scales, `log σ°`            |
//!
//! With the induction wiring F = 11 and C = 34, so the dimension is 68.

use serde::{Deserialize, Serialize};

use super::spec::{Coefficient, Covariate, ModelSpec};
use super::ModelError;
use crate::autodiff::Real;
use crate::cohort::Outcome;
use crate::ordinal::CATEGORIES;

const LN_4: f64 = std::f64::consts::LN_2 * 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `β = μ + σ·z` with `z ~ N(0, 1)` sampled.
    #[default]
    NonCentered,
    /// `β ~ N(μ, σ)` sampled directly.
    Centered,
}

/// Parameters on their natural scale, generic over the scalar type so the
/// same code builds the tape and the plain value.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub aleph_nullip: T,
    pub aleph_pit: T,
    pub b_pc: T,
    pub phi: T,
    pub simplex: [T; CATEGORIES],
    pub cutpoints: [T; CATEGORIES - 1],
    pub hyper_mu: Vec<T>,
    pub hyper_sigma: Vec<T>,
    pub log_hyper_sigma: Vec<T>,
    /// Standardized coefficients `(β − μ)/σ`.
    pub z: Vec<T>,
    pub beta: Vec<T>,
    pub noise_sigma: [T; 4],
    pub log_noise_sigma: [T; 4],
    pub inv_noise_sigma: [T; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ParameterSpace {
    spec: ModelSpec,
    families: Vec<Covariate>,
    coefficients: Vec<Coefficient>,
    coef_family: Vec<usize>,
    parameterization: Parameterization,
}

pub(crate) struct StickBreak<T> {
    pub simplex: [T; CATEGORIES],
    /// `ln(p_{k+1} + ... + p_K)` for `k = 0..K-1`.
    pub log_tail: [T; CATEGORIES - 1],
    pub log_jacobian: T,
}

/// Stick-breaking map from `K − 1` reals to the `K`-simplex. The offsets
/// `−ln(K − 1 − k)` send the origin to the uniform simplex.
pub(crate) fn stick_breaking<T: Real>(y: &[T]) -> StickBreak<T> {
    let zero = y[0].lift(0.0);
    let mut log_r = zero;
    let mut simplex = [zero; CATEGORIES];
    let mut log_tail = [zero; CATEGORIES - 1];
    let mut terms = Vec::with_capacity(3 * (CATEGORIES - 1));
    for k in 0..CATEGORIES - 1 {
        let a = y[k] - ((CATEGORIES - 1 - k) as f64).ln();
        let log_z = a.log_sigmoid();
        let log_1mz = (-a).log_sigmoid();
        simplex[k] = if k == 0 { log_z.exp() } else { (log_r + log_z).exp() };
        terms.push(log_z);
        terms.push(log_1mz);
        if k > 0 {
            terms.push(log_r);
        }
        log_r = if k == 0 { log_1mz } else { log_r + log_1mz };
        log_tail[k] = log_r;
    }
    simplex[CATEGORIES - 1] = log_r.exp();
    StickBreak {
        simplex,
        log_tail,
        log_jacobian: T::sum(&terms),
    }
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

impl ParameterSpace {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        Self::with_parameterization(spec, Parameterization::default())
    }

    pub fn with_parameterization(
        spec: ModelSpec,
        parameterization: Parameterization,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let families = spec.families();
        let coefficients = spec.coefficients();
        let coef_family = coefficients
            .iter()
            .map(|c| families.iter().position(|&f| f == c.family).unwrap())
            .collect();
        Ok(Self {
            spec,
            families,
            coefficients,
            coef_family,
            parameterization,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn families(&self) -> &[Covariate] {
        &self.families
    }

    pub fn coefficients(&self) -> &[Coefficient] {
        &self.coefficients
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn coefficient_index(&self, family: Covariate, outcome: Outcome) -> Option<usize> {
        self.coefficients
            .iter()
            .position(|c| c.family == family && c.outcome == outcome)
    }

    pub fn family_index(&self, family: Covariate) -> Option<usize> {
        self.families.iter().position(|&f| f == family)
    }

    pub fn family_of(&self, coefficient: usize) -> usize {
        self.coef_family[coefficient]
    }

    fn n_fam(&self) -> usize {
        self.families.len()
    }

    pub(crate) fn mu_offset(&self) -> usize {
        8
    }

    pub(crate) fn sigma_offset(&self) -> usize {
        8 + self.n_fam()
    }

    pub(crate) fn coef_offset(&self) -> usize {
        8 + 2 * self.n_fam()
    }

    pub(crate) fn noise_offset(&self) -> usize {
        self.coef_offset() + self.coefficients.len()
    }

    pub fn dim(&self) -> usize {
        self.noise_offset() + 4
    }

    pub fn blocks(&self) -> Vec<Block> {
        let b = |name: &str, offset, len| Block {
            name: name.into(),
            offset,
            len,
        };
        vec![
            b("aleph_nullip", 0, 1),
            b("aleph_pit", 1, 1),
            b("b_pc", 2, 1),
            b("phi", 3, 1),
            b("simplex", 4, CATEGORIES - 1),
            b("mu", self.mu_offset(), self.n_fam()),
            b("log_sigma", self.sigma_offset(), self.n_fam()),
            b(
                match self.parameterization {
                    Parameterization::NonCentered => "z",
                    Parameterization::Centered => "beta",
                },
                self.coef_offset(),
                self.coefficients.len(),
            ),
            b("log_sigma_obs", self.noise_offset(), 4),
        ]
    }

    /// Names of the values produced by [`Self::constrained_values`].
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["aleph_nullip", "aleph_pit", "b_pc", "phi"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((0..CATEGORIES).map(|k| format!("simplex[{k}]")));
        names.extend((0..CATEGORIES - 1).map(|k| format!("cutpoint[{k}]")));
        names.extend(self.families.iter().map(|f| format!("mu_{f}")));
        names.extend(self.families.iter().map(|f| format!("sigma_{f}")));
        names.extend(self.coefficients.iter().map(|c| c.name()));
        names.extend(Outcome::CONTINUOUS.iter().map(|o| format!("sigma_obs[{o}]")));
        names
    }

    /// Maps an unconstrained vector to parameters plus the log-Jacobian of
    /// the transform.
    pub fn constrain<T: Real>(&self, theta: &[T]) -> Result<(Params<T>, T), ModelError> {
        if theta.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        let mut jac: Vec<T> = Vec::with_capacity(4 + 2 * self.n_fam());

        // phi = 4·σ(u); dphi/du = 4·σ(u)·σ(−u)
        let u = theta[3];
        let phi = u.sigmoid() * 4.0;
        jac.push(u.log_sigmoid() + (-u).log_sigmoid() + LN_4);

        let sb = stick_breaking(&theta[4..8]);
        jac.push(sb.log_jacobian);
        let mut cutpoints = [phi; CATEGORIES - 1];
        for k in 0..CATEGORIES - 1 {
            let lt = sb.log_tail[k];
            cutpoints[k] = phi + lt.log1m_exp() - lt;
        }

        let mo = self.mu_offset();
        let so = self.sigma_offset();
        let hyper_mu: Vec<T> = theta[mo..mo + self.n_fam()].to_vec();
        let log_hyper_sigma: Vec<T> = theta[so..so + self.n_fam()].to_vec();
        let hyper_sigma: Vec<T> = log_hyper_sigma.iter().map(|s| s.exp()).collect();
        jac.extend(log_hyper_sigma.iter().copied());

        let co = self.coef_offset();
        let raw = &theta[co..co + self.coefficients.len()];
        let (z, beta): (Vec<T>, Vec<T>) = match self.parameterization {
            Parameterization::NonCentered => {
                let beta = raw
                    .iter()
                    .zip(&self.coef_family)
                    .map(|(&z, &f)| hyper_mu[f] + hyper_sigma[f] * z)
                    .collect();
                (raw.to_vec(), beta)
            }
            Parameterization::Centered => {
                let z = raw
                    .iter()
                    .zip(&self.coef_family)
                    .map(|(&b, &f)| (b - hyper_mu[f]) * (-log_hyper_sigma[f]).exp())
                    .collect();
                (z, raw.to_vec())
            }
        };

        let no = self.noise_offset();
        let mut log_noise_sigma = [u; 4];
        log_noise_sigma.copy_from_slice(&theta[no..no + 4]);
        let noise_sigma = log_noise_sigma.map(|s| s.exp());
        let inv_noise_sigma = log_noise_sigma.map(|s| (-s).exp());
        jac.extend(log_noise_sigma.iter().copied());

        let params = Params {
            aleph_nullip: theta[0],
            aleph_pit: theta[1],
            b_pc: theta[2],
            phi,
            simplex: sb.simplex,
            cutpoints,
            hyper_mu,
            hyper_sigma,
            log_hyper_sigma,
            z,
            beta,
            noise_sigma,
            log_noise_sigma,
            inv_noise_sigma,
        };
        Ok((params, T::sum(&jac)))
    }

    /// Inverse of [`Self::constrain`].
    pub fn unconstrain(&self, p: &Params<f64>) -> Result<Vec<f64>, ModelError> {
        let mut theta = vec![0.0; self.dim()];
        theta[0] = p.aleph_nullip;
        theta[1] = p.aleph_pit;
        theta[2] = p.b_pc;
        if !(p.phi > 0.0 && p.phi < 4.0) {
            return Err(ModelError::OutOfSupport(format!("phi = {}", p.phi)));
        }
        theta[3] = logit(p.phi / 4.0);
        for k in 0..CATEGORIES - 1 {
            // Remaining stick measured as a tail sum, not 1 − head.
            let rest: f64 = p.simplex[k..].iter().sum();
            let zk = p.simplex[k] / rest;
            if !(zk > 0.0 && zk < 1.0) {
                return Err(ModelError::OutOfSupport(format!("simplex {:?}", p.simplex)));
            }
            theta[4 + k] = logit(zk) + ((CATEGORIES - 1 - k) as f64).ln();
        }
        for f in 0..self.n_fam() {
            theta[self.mu_offset() + f] = p.hyper_mu[f];
            if !(p.hyper_sigma[f] > 0.0) {
                return Err(ModelError::OutOfSupport(format!("sigma family {f}")));
            }
            theta[self.sigma_offset() + f] = p.hyper_sigma[f].ln();
        }
        for (c, &f) in self.coef_family.iter().enumerate() {
            theta[self.coef_offset() + c] = match self.parameterization {
                Parameterization::NonCentered => (p.beta[c] - p.hyper_mu[f]) / p.hyper_sigma[f],
                Parameterization::Centered => p.beta[c],
            };
        }
        for j in 0..4 {
            if !(p.noise_sigma[j] > 0.0) {
                return Err(ModelError::OutOfSupport(format!("sigma_obs {j}")));
            }
            theta[self.noise_offset() + j] = p.noise_sigma[j].ln();
        }
        Ok(theta)
    }

    /// Flattens parameters in [`Self::constrained_names`] order.
    pub fn constrained_values(&self, p: &Params<f64>) -> Vec<f64> {
        let mut v = vec![p.aleph_nullip, p.aleph_pit, p.b_pc, p.phi];
        v.extend_from_slice(&p.simplex);
        v.extend_from_slice(&p.cutpoints);
        v.extend_from_slice(&p.hyper_mu);
        v.extend_from_slice(&p.hyper_sigma);
        v.extend_from_slice(&p.beta);
        v.extend_from_slice(&p.noise_sigma);
        v
    }

    /// Rebuilds parameters from a flat constrained vector (e.g. a stored
    /// posterior draw).
    pub fn params_from_constrained(&self, v: &[f64]) -> Result<Params<f64>, ModelError> {
        let expected = self.constrained_names().len();
        if v.len() != expected {
            return Err(ModelError::Dimension {
                expected,
                got: v.len(),
            });
        }
        let f = self.n_fam();
        let c = self.coefficients.len();
        let mut i = 0;
        let mut take = |n: usize| {
            let s = &v[i..i + n];
            i += n;
            s
        };
        let head = take(4);
        let (aleph_nullip, aleph_pit, b_pc, phi) = (head[0], head[1], head[2], head[3]);
        let mut simplex = [0.0; CATEGORIES];
        simplex.copy_from_slice(take(CATEGORIES));
        let mut cutpoints = [0.0; CATEGORIES - 1];
        cutpoints.copy_from_slice(take(CATEGORIES - 1));
        let hyper_mu = take(f).to_vec();
        let hyper_sigma = take(f).to_vec();
        let beta = take(c).to_vec();
        let mut noise_sigma = [0.0; 4];
        noise_sigma.copy_from_slice(take(4));
        let z = beta
            .iter()
            .zip(&self.coef_family)
            .map(|(b, &fi)| (b - hyper_mu[fi]) / hyper_sigma[fi])
            .collect();
        Ok(Params {
            aleph_nullip,
            aleph_pit,
            b_pc,
            phi,
            simplex,
            cutpoints,
            log_hyper_sigma: hyper_sigma.iter().map(|s: &f64| s.ln()).collect(),
            hyper_mu,
            hyper_sigma,
            z,
            beta,
            noise_sigma,
            log_noise_sigma: noise_sigma.map(f64::ln),
            inv_noise_sigma: noise_sigma.map(|s| 1.0 / s),
        })
    }
}
