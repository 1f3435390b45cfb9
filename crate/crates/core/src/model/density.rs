use std::cell::RefCell;
use std::f64::consts::{LN_2, PI};

use super::data::PreparedData;
use super::params::{ParameterSpace, Parameterization, Params};
use super::ModelError;
use crate::autodiff::{grad_on, Real, Tape, Var, HALF_LN_2PI};
use crate::cohort::Outcome;
use crate::ordinal::{ordered_logistic_lpmf, CATEGORIES};

const LN_24: f64 = 3.178_053_830_347_945_6;

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::new());
}

fn std_normal<T: Real>(x: T) -> T {
    x.square() * -0.5 - HALF_LN_2PI
}

fn half_normal_std<T: Real>(sigma: T) -> T {
    sigma.square() * -0.5 + (LN_2 - HALF_LN_2PI)
}

/// Prior log-density of the sampled representation on its constrained
/// scale (no transform Jacobians): standard normal for ℵ, family locations
/// and raw coefficients; Cauchy(0, 1) for `b_pc`; HalfNormal(1) for all
/// scales; uniform(0, 4) for `phi`; Dirichlet(1) for the simplex.
pub fn prior_logdensity<T: Real>(space: &ParameterSpace, p: &Params<T>) -> T {
    let mut terms = Vec::with_capacity(8 + 2 * p.hyper_mu.len() + p.beta.len());
    terms.push(std_normal(p.aleph_nullip));
    terms.push(std_normal(p.aleph_pit));
    terms.push((p.b_pc.square() + 1.0).ln().rsub(-PI.ln()));
    // uniform(0, 4) on phi and Dirichlet(1) on the 5-simplex are constants
    terms.push(p.phi.lift(LN_24 - 2.0 * LN_2));
    terms.extend(p.hyper_mu.iter().map(|&m| std_normal(m)));
    terms.extend(p.hyper_sigma.iter().map(|&s| half_normal_std(s)));
    terms.extend(p.z.iter().map(|&z| std_normal(z)));
    if space.parameterization() == Parameterization::Centered {
        // N(β | μ, σ) = N(z | 0, 1) / σ
        for c in 0..p.beta.len() {
            terms.push(-p.log_hyper_sigma[space.family_of(c)]);
        }
    }
    terms.extend(p.noise_sigma.iter().map(|&s| half_normal_std(s)));
    T::sum(&terms)
}

/// Per-evaluation quantities shared by all rows.
struct Shared<T> {
    /// `ln f(k | η, c)` for (nullip, pit) ∈ {0,1}², index `2·nullip + pit`.
    ord_lp: [[T; CATEGORIES]; 4],
    /// `β_pc^o · (k − poscon_mean)` per outcome.
    shift: Vec<[T; CATEGORIES]>,
    /// Non-poscon coefficients per outcome, in block column order.
    betas: Vec<Vec<T>>,
}

/// The model bound to a dataset.
#[derive(Debug, Clone)]
pub struct Model {
    space: ParameterSpace,
    data: PreparedData,
}

impl Model {
    pub fn new(space: ParameterSpace, data: PreparedData) -> Self {
        Self { space, data }
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    fn check_theta<T: Real>(&self, theta: &[T]) -> Result<(), ModelError> {
        if theta.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if let Some(i) = theta.iter().position(|t| !t.value().is_finite()) {
            return Err(ModelError::NonFiniteInput(i));
        }
        Ok(())
    }

    fn check_row(&self, i: usize) -> Result<(), ModelError> {
        if i >= self.data.n() {
            return Err(ModelError::RowOutOfRange(i));
        }
        Ok(())
    }

    /// Log joint density of the unconstrained vector: priors, transform
    /// Jacobians, and the likelihood with missing poscon marginalized.
    pub fn log_posterior<T: Real>(&self, theta: &[T]) -> Result<T, ModelError> {
        self.check_theta(theta)?;
        Ok(self.log_posterior_unchecked(theta))
    }

    fn log_posterior_unchecked<T: Real>(&self, theta: &[T]) -> T {
        let (p, log_jac) = self.space.constrain(theta).expect("dimension checked");
        let prior = prior_logdensity(&self.space, &p);
        let lik = self.log_likelihood(&p);
        prior + log_jac + lik
    }

    /// Value and gradient, recorded on a per-thread reusable tape.
    pub fn log_posterior_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_theta(theta)?;
        TAPE.with(|cell| {
            let mut tape = cell.borrow_mut();
            tape.clear();
            let out = grad_on(&tape, |x| self.log_posterior_fused(x), theta);
            tape.clear();
            Ok(out?)
        })
    }

    /// Same density as [`Self::log_posterior`], but the likelihood enters
    /// the tape as one node with hand-derived partials; only the ordinal
    /// terms are recorded operation by operation.
    fn log_posterior_fused<'t>(&self, theta: &[Var<'t>]) -> Var<'t> {
        let (p, log_jac) = self.space.constrain(theta).expect("dimension checked");
        let prior = prior_logdensity(&self.space, &p);
        prior + log_jac + self.log_likelihood_fused(&p)
    }

    fn log_likelihood_fused<'t>(&self, p: &Params<Var<'t>>) -> Var<'t> {
        let tape = p.phi.tape();
        let val = |xs: &[Var<'t>]| -> Vec<f64> { xs.iter().map(|v| v.value()).collect() };
        let beta = val(&p.beta);
        let log_sigma = val(&p.log_noise_sigma);
        let inv_var: Vec<f64> = log_sigma.iter().map(|l| (-2.0 * l).exp()).collect();
        let ord_var = self.ordinal_table(p);
        let ord: [[f64; CATEGORIES]; 4] = ord_var.map(|row| row.map(|v| v.value()));
        let d = &self.data;
        let pc_offset: [f64; CATEGORIES] = std::array::from_fn(|k| k as f64 - d.poscon_mean);
        let shift: Vec<[f64; CATEGORIES]> = d
            .blocks
            .iter()
            .map(|b| pc_offset.map(|o| beta[b.poscon_coef] * o))
            .collect();

        let mut value = 0.0;
        let mut g_beta = vec![0.0; beta.len()];
        let mut g_log_sigma = [0.0; 4];
        let mut g_shift = [[0.0; CATEGORIES]; 5];
        let mut w_ord = [[0.0; CATEGORIES]; 4];
        for i in 0..d.n() {
            let base: [f64; 5] = std::array::from_fn(|o| {
                let b = &d.blocks[o];
                b.coef.iter().zip(b.row(i)).map(|(&c, x)| beta[c] * x).sum()
            });
            let g = self.group(i);
            let cs = d.cs[i] as u8 as f64;
            // Term value and d(term)/d(cs logit) for category k, sharing one
            // exponential between the log-likelihood and the logistic.
            let term = |k: usize| -> (f64, f64) {
                let mut t = ord[g][k];
                for (j, y) in d.y[i].iter().enumerate() {
                    if let Some(y) = *y {
                        let r = y - base[j] - shift[j][k];
                        t += -HALF_LN_2PI - log_sigma[j] - 0.5 * r * r * inv_var[j];
                    }
                }
                let eta = base[4] + shift[4][k];
                let e = (-eta.abs()).exp();
                let sig = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (t + cs * eta - eta.max(0.0) - e.ln_1p(), cs - sig)
            };
            let mut weights = [0.0; CATEGORIES];
            let mut d_eta = [0.0; CATEGORIES];
            match d.poscon[i] {
                Some(k) => {
                    let k = k as usize;
                    let (t, de) = term(k);
                    weights[k] = 1.0;
                    d_eta[k] = de;
                    value += t;
                }
                None => {
                    let mut t = [0.0; CATEGORIES];
                    for k in 0..CATEGORIES {
                        (t[k], d_eta[k]) = term(k);
                    }
                    let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..CATEGORIES {
                        weights[k] = (t[k] - m).exp();
                        total += weights[k];
                    }
                    value += m + total.ln();
                    for w in &mut weights {
                        *w /= total;
                    }
                }
            }
            let mut g_base = [0.0; 5];
            for (k, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                w_ord[g][k] += w;
                for (j, y) in d.y[i].iter().enumerate() {
                    if let Some(y) = *y {
                        let r = y - base[j] - shift[j][k];
                        let dmu = w * r * inv_var[j];
                        g_base[j] += dmu;
                        g_shift[j][k] += dmu;
                        g_log_sigma[j] += w * (r * r * inv_var[j] - 1.0);
                    }
                }
                let dl = w * d_eta[k];
                g_base[4] += dl;
                g_shift[4][k] += dl;
            }
            for (o, b) in d.blocks.iter().enumerate() {
                for (&c, x) in b.coef.iter().zip(b.row(i)) {
                    g_beta[c] += g_base[o] * x;
                }
            }
        }
        for (o, b) in d.blocks.iter().enumerate() {
            g_beta[b.poscon_coef] += (0..CATEGORIES).map(|k| g_shift[o][k] * pc_offset[k]).sum::<f64>();
        }
        let ord_value: f64 = (0..4)
            .flat_map(|g| (0..CATEGORIES).map(move |k| (g, k)))
            .map(|(g, k)| w_ord[g][k] * ord[g][k])
            .sum();

        let inputs: Vec<(Var<'t>, f64)> = p
            .beta
            .iter()
            .copied()
            .zip(g_beta)
            .chain(p.log_noise_sigma.iter().copied().zip(g_log_sigma))
            .collect();
        let rest = tape.custom(value - ord_value, &inputs);
        let ord_flat: Vec<Var<'t>> = ord_var.iter().flatten().copied().collect();
        let w_flat: Vec<f64> = w_ord.iter().flatten().copied().collect();
        rest + Var::dot(&ord_flat, &w_flat)
    }

    /// Log prior of the unconstrained vector, including Jacobians.
    pub fn log_prior_unconstrained(&self, theta: &[f64]) -> Result<f64, ModelError> {
        self.check_theta(theta)?;
        let (p, log_jac) = self.space.constrain(theta)?;
        Ok(prior_logdensity(&self.space, &p) + log_jac)
    }

    fn ordinal_table<T: Real>(&self, p: &Params<T>) -> [[T; CATEGORIES]; 4] {
        let mut ord_lp = [[p.phi; CATEGORIES]; 4];
        for (g, row) in ord_lp.iter_mut().enumerate() {
            let mut eta = p.b_pc;
            if g & 2 != 0 {
                eta = eta + p.aleph_nullip;
            }
            if g & 1 != 0 {
                eta = eta + p.aleph_pit;
            }
            for (k, v) in row.iter_mut().enumerate() {
                *v = ordered_logistic_lpmf(k, eta, &p.cutpoints);
            }
        }
        ord_lp
    }

    fn shared<T: Real>(&self, p: &Params<T>) -> Shared<T> {
        let ord_lp = self.ordinal_table(p);
        let pc_mean = self.data.poscon_mean;
        let shift = self
            .data
            .blocks
            .iter()
            .map(|b| {
                let beta = p.beta[b.poscon_coef];
                std::array::from_fn(|k| beta * (k as f64 - pc_mean))
            })
            .collect();
        let betas = self
            .data
            .blocks
            .iter()
            .map(|b| b.coef.iter().map(|&c| p.beta[c]).collect())
            .collect();
        Shared {
            ord_lp,
            shift,
            betas,
        }
    }

    fn bases<T: Real>(&self, sh: &Shared<T>, i: usize) -> [T; 5] {
        std::array::from_fn(|o| T::dot(&sh.betas[o], self.data.blocks[o].row(i)))
    }

    fn group(&self, i: usize) -> usize {
        2 * self.data.nullip[i] as usize + self.data.pit[i] as usize
    }

    /// Log of f(k | η, c) · Π Normal(y°) · Bernoulli(cs) for category `k`.
    fn row_term<T: Real>(
        &self,
        sh: &Shared<T>,
        p: &Params<T>,
        base: &[T; 5],
        i: usize,
        k: usize,
    ) -> T {
        let mut terms: Vec<T> = Vec::with_capacity(6);
        terms.push(sh.ord_lp[self.group(i)][k]);
        for (j, y) in self.data.y[i].iter().enumerate() {
            if let Some(y) = *y {
                let mu = base[j] + sh.shift[j][k];
                terms.push(T::normal_lpdf(y, mu, p.log_noise_sigma[j], p.inv_noise_sigma[j]));
            }
        }
        terms.push(T::bernoulli_logit_lpmf(self.data.cs[i], base[4] + sh.shift[4][k]));
        T::sum(&terms)
    }

    fn row_terms<T: Real>(&self, sh: &Shared<T>, p: &Params<T>, i: usize) -> [T; CATEGORIES] {
        let base = self.bases(sh, i);
        std::array::from_fn(|k| self.row_term(sh, p, &base, i, k))
    }

    fn row_loglik_with<T: Real>(
        &self,
        sh: &Shared<T>,
        p: &Params<T>,
        i: usize,
        marginal: bool,
    ) -> T {
        match self.data.poscon[i] {
            Some(k) if !marginal => {
                let base = self.bases(sh, i);
                self.row_term(sh, p, &base, i, k as usize)
            }
            _ => T::log_sum_exp(&self.row_terms(sh, p, i)),
        }
    }

    /// Sum over rows of the row log-likelihoods, in row order.
    pub fn log_likelihood<T: Real>(&self, p: &Params<T>) -> T {
        let sh = self.shared(p);
        let rows: Vec<T> = (0..self.data.n())
            .map(|i| self.row_loglik_with(&sh, p, i, false))
            .collect();
        T::sum(&rows)
    }

    /// Row log-likelihood, using the observed poscon when present.
    pub fn row_loglik(&self, i: usize, p: &Params<f64>) -> Result<f64, ModelError> {
        self.check_row(i)?;
        Ok(self.row_loglik_with(&self.shared(p), p, i, false))
    }

    /// Row log-likelihood marginalized over all five poscon categories
    /// (ignoring any observed value).
    pub fn row_loglik_marginal(&self, i: usize, p: &Params<f64>) -> Result<f64, ModelError> {
        self.check_row(i)?;
        Ok(self.row_loglik_with(&self.shared(p), p, i, true))
    }

    /// The five joint log terms of row `i`, one per poscon category.
    pub fn row_category_terms(&self, i: usize, p: &Params<f64>) -> Result<[f64; CATEGORIES], ModelError> {
        self.check_row(i)?;
        Ok(self.row_terms(&self.shared(p), p, i))
    }

    /// Posterior category probabilities of poscon for row `i` given the
    /// parameters; a point mass when the score was observed.
    pub fn poscon_posterior(&self, i: usize, p: &Params<f64>) -> Result<[f64; CATEGORIES], ModelError> {
        self.check_row(i)?;
        if let Some(k) = self.data.poscon[i] {
            let mut out = [0.0; CATEGORIES];
            out[k as usize] = 1.0;
            return Ok(out);
        }
        let t = self.row_terms(&self.shared(p), p, i);
        let lse = f64::log_sum_exp(&t);
        Ok(t.map(|v| (v - lse).exp()))
    }

    /// Ordinal linear predictor `ℵ_nullip·nullip + ℵ_pit·pit + b_pc`.
    pub fn eta(&self, i: usize, p: &Params<f64>) -> Result<f64, ModelError> {
        self.check_row(i)?;
        let mut eta = p.b_pc;
        if self.data.nullip[i] {
            eta += p.aleph_nullip;
        }
        if self.data.pit[i] {
            eta += p.aleph_pit;
        }
        Ok(eta)
    }

    /// Linear predictor of `outcome` for row `i` at poscon category `k`, on
    /// the standardized transformed scale (a logit for cesarean).
    pub fn outcome_mean(
        &self,
        i: usize,
        p: &Params<f64>,
        outcome: Outcome,
        k: usize,
    ) -> Result<f64, ModelError> {
        self.check_row(i)?;
        if k >= CATEGORIES {
            return Err(ModelError::PosconOutOfRange(k));
        }
        let b = &self.data.blocks[outcome.index()];
        let base: f64 = b.coef.iter().zip(b.row(i)).map(|(&c, x)| p.beta[c] * x).sum();
        Ok(base + p.beta[b.poscon_coef] * (k as f64 - self.data.poscon_mean))
    }
}
