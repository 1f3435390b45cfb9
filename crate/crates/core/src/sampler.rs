//! No-U-Turn sampler with multinomial trajectory sampling, dual-averaging
//! step size and windowed diagonal mass-matrix adaptation.
//!
//! The transition follows the usual generalized-U-turn formulation: the
//! trajectory doubles in a random direction, a proposal is drawn from the new
//! subtree with probability proportional to its total weight (biased
//! progressive sampling at the top, uniform progressive sampling inside
//! subtrees), and doubling stops on a U-turn between the trajectory ends
//! (including the two merge-boundary checks) or at `max_tree_depth`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Model;

/// Hamiltonian error above which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;
const INIT_RETRIES: usize = 100;
const INIT_RADIUS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {chain}: log density not finite at any of {tries} initial points")]
    Init { chain: usize, tries: usize },
    #[error("chain {chain}: every warmup transition diverged")]
    AllDivergent { chain: usize },
    #[error("chain {chain}: step-size search left [1e-300, 1e7]")]
    StepSize { chain: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed draw table: {0}")]
    Format(String),
}

/// A differentiable log density on ℝ^d.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density, or
    /// `None` when it cannot be evaluated (treated as −∞).
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> Option<f64>;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Reported values for a draw; identity by default.
    fn constrained(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }
}

impl Target for Model {
    fn dim(&self) -> usize {
        Model::dim(self)
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> Option<f64> {
        let (v, g) = self.log_posterior_grad(theta).ok()?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return None;
        }
        grad.copy_from_slice(&g);
        Some(v)
    }

    fn param_names(&self) -> Vec<String> {
        self.space().constrained_names()
    }

    fn constrained(&self, theta: &[f64]) -> Vec<f64> {
        let (p, _) = self.space().constrain(theta).expect("dimension checked by sampler");
        self.space().constrained_values(&p)
    }
}

/// Zero-mean normal given by its precision matrix; a reference target with
/// known moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    precision: Vec<Vec<f64>>,
}

impl GaussianTarget {
    pub fn standard(dim: usize) -> Self {
        let precision = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { precision }
    }

    /// Unit variances, correlation `rho`.
    pub fn bivariate(rho: f64) -> Result<Self, SamplerError> {
        if !(rho.abs() < 1.0) {
            return Err(SamplerError::Config(format!("correlation {rho} outside (-1, 1)")));
        }
        let s = 1.0 / (1.0 - rho * rho);
        Ok(Self {
            precision: vec![vec![s, -rho * s], vec![-rho * s, s]],
        })
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.precision.len()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> Option<f64> {
        let mut lp = 0.0;
        for (g, row) in grad.iter_mut().zip(&self.precision) {
            *g = -dot(row, theta);
        }
        for (x, g) in theta.iter().zip(grad.iter()) {
            lp += 0.5 * x * g;
        }
        Some(lp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutsConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 600,
            samples: 900,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.chains < 1 {
            return Err(SamplerError::Config("chains must be ≥ 1".into()));
        }
        if self.warmup < 100 {
            return Err(SamplerError::Config("warmup must be ≥ 100".into()));
        }
        if self.samples < 1 {
            return Err(SamplerError::Config("samples must be ≥ 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config("target_accept must lie in (0, 1)".into()));
        }
        if self.max_tree_depth < 1 || self.max_tree_depth > 20 {
            return Err(SamplerError::Config("max_tree_depth must lie in 1..=20".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawStats {
    pub divergent: bool,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    /// Mean Metropolis acceptance over the trajectory.
    pub accept: f64,
    /// Hamiltonian at the selected state.
    pub energy: f64,
    pub step_size: f64,
    pub lp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// `draws[d]` is the constrained parameter vector of draw `d`.
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<DrawStats>,
    /// Adapted values, frozen for every post-warmup draw.
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

/// Uniform `[−2, 2]` starting points, one counter-based stream per chain.
pub fn init_points(dim: usize, seed: u64, chains: usize) -> Vec<Vec<f64>> {
    (0..chains)
        .map(|c| {
            let mut rng = chain_rng(seed, c);
            uniform_point(dim, &mut rng)
        })
        .collect()
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn uniform_point(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.random_range(-INIT_RADIUS..=INIT_RADIUS))
        .collect()
}

/// Runs `cfg.chains` chains in parallel. Output is independent of thread
/// scheduling: chain `c` only ever touches its own stream.
pub fn sample<T: Target>(target: &T, cfg: &NutsConfig) -> Result<PosteriorDraws, SamplerError> {
    cfg.validate()?;
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PosteriorDraws {
        names: target.param_names(),
        chains,
    })
}

fn run_chain<T: Target>(target: &T, cfg: &NutsConfig, chain: usize) -> Result<ChainDraws, SamplerError> {
    let mut rng = chain_rng(cfg.seed, chain);
    let mut nuts = Nuts::start(target, cfg, &mut rng).map_err(|e| e.at(chain))?;
    let mut adapt = Adaptation::new(cfg, nuts.eps, target.dim());
    let mut warmup_div = 0;
    for _ in 0..cfg.warmup {
        let st = nuts.transition(&mut rng);
        warmup_div += st.divergent as usize;
        nuts.eps = adapt.stepsize.learn(st.accept);
        if let Some(var) = adapt.variance.learn(&nuts.z.q) {
            nuts.inv_metric = var;
            nuts.init_stepsize(&mut rng).map_err(|e| e.at(chain))?;
            adapt.stepsize.restart(nuts.eps);
        }
    }
    if warmup_div == cfg.warmup {
        return Err(SamplerError::AllDivergent { chain });
    }
    nuts.eps = adapt.stepsize.final_step_size();

    let mut draws = Vec::with_capacity(cfg.samples);
    let mut stats = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let st = nuts.transition(&mut rng);
        draws.push(target.constrained(&nuts.z.q));
        stats.push(st);
    }
    Ok(ChainDraws {
        draws,
        stats,
        step_size: nuts.eps,
        inv_metric: nuts.inv_metric,
        warmup_divergences: warmup_div,
    })
}

enum StartError {
    Init(usize),
    StepSize,
}

impl StartError {
    fn at(self, chain: usize) -> SamplerError {
        match self {
            StartError::Init(tries) => SamplerError::Init { chain, tries },
            StartError::StepSize => SamplerError::StepSize { chain },
        }
    }
}

#[derive(Debug, Clone)]
struct PsPoint {
    q: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    logp: f64,
}

struct Nuts<'a, T> {
    target: &'a T,
    eps: f64,
    inv_metric: Vec<f64>,
    max_depth: usize,
    z: PsPoint,
    divergent: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<'a, T: Target> Nuts<'a, T> {
    /// Finds a finite starting point and an initial step size.
    fn start(target: &'a T, cfg: &NutsConfig, rng: &mut ChaCha8Rng) -> Result<Self, StartError> {
        let d = target.dim();
        let mut g = vec![0.0; d];
        let mut found = None;
        for _ in 0..=INIT_RETRIES {
            let q = uniform_point(d, rng);
            if let Some(lp) = target.logp_grad(&q, &mut g) {
                if lp.is_finite() && g.iter().all(|x| x.is_finite()) {
                    found = Some(PsPoint {
                        q,
                        p: vec![0.0; d],
                        g: g.clone(),
                        logp: lp,
                    });
                    break;
                }
            }
        }
        let z = found.ok_or(StartError::Init(INIT_RETRIES + 1))?;
        let mut nuts = Self {
            target,
            eps: 1.0,
            inv_metric: vec![1.0; d],
            max_depth: cfg.max_tree_depth,
            z,
            divergent: false,
        };
        nuts.init_stepsize(rng)?;
        Ok(nuts)
    }

    fn sample_p(&mut self, rng: &mut ChaCha8Rng) {
        for (p, m) in self.z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn hamiltonian(&self, z: &PsPoint) -> f64 {
        let k: f64 = z
            .p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
            * 0.5;
        let h = k - z.logp;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, z: &PsPoint) -> Vec<f64> {
        z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    /// One leapfrog step of the current state.
    fn evolve(&mut self, eps: f64) {
        let z = &mut self.z;
        for (p, g) in z.p.iter_mut().zip(&z.g) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        match self.target.logp_grad(&z.q, &mut z.g) {
            Some(lp) if lp.is_finite() => {
                z.logp = lp;
                for (p, g) in z.p.iter_mut().zip(&z.g) {
                    *p += 0.5 * eps * g;
                }
            }
            _ => z.logp = f64::NEG_INFINITY,
        }
    }

    /// Doubles or halves the step size until one leapfrog step's acceptance
    /// crosses 0.5.
    fn init_stepsize(&mut self, rng: &mut ChaCha8Rng) -> Result<(), StartError> {
        let target = 0.5f64.ln();
        let z_init = self.z.clone();
        let trial = |s: &mut Self, rng: &mut ChaCha8Rng| {
            s.z = z_init.clone();
            s.sample_p(rng);
            let h0 = s.hamiltonian(&s.z);
            s.evolve(s.eps);
            let h = s.hamiltonian(&s.z);
            h0 - h
        };
        let delta = trial(self, rng);
        let up = delta > target;
        loop {
            let delta = trial(self, rng);
            if up && !(delta > target) || !up && !(delta < target) {
                break;
            }
            self.eps = if up { 2.0 * self.eps } else { 0.5 * self.eps };
            if !(self.eps <= 1e7 && self.eps >= 1e-300) {
                self.z = z_init;
                return Err(StartError::StepSize);
            }
        }
        self.z = z_init;
        Ok(())
    }

    fn transition(&mut self, rng: &mut ChaCha8Rng) -> DrawStats {
        self.sample_p(rng);
        self.divergent = false;
        let h0 = self.hamiltonian(&self.z);

        let mut z_fwd = self.z.clone();
        let mut z_bwd = self.z.clone();
        let mut z_sample = self.z.clone();
        let mut z_propose = self.z.clone();

        let p0 = self.z.p.clone();
        let ps0 = self.p_sharp(&self.z);
        let (mut p_fwd_fwd, mut p_fwd_bwd, mut p_bwd_fwd, mut p_bwd_bwd) =
            (p0.clone(), p0.clone(), p0.clone(), p0.clone());
        let (mut ps_fwd_fwd, mut ps_fwd_bwd, mut ps_bwd_fwd, mut ps_bwd_bwd) =
            (ps0.clone(), ps0.clone(), ps0.clone(), ps0);
        let mut rho = p0;

        let mut log_sum_weight = 0.0;
        let mut n_leapfrog = 0;
        let mut sum_metro = 0.0;
        let mut depth = 0;
        let d = self.z.q.len();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; d];
            let mut rho_bwd = vec![0.0; d];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if rng.random::<f64>() > 0.5 {
                self.z = z_fwd.clone();
                rho_bwd.copy_from_slice(&rho);
                p_bwd_fwd.copy_from_slice(&p_fwd_bwd);
                ps_bwd_fwd.copy_from_slice(&ps_fwd_bwd);
                let ok = self.build_tree(
                    depth,
                    &mut z_propose,
                    &mut ps_fwd_bwd,
                    &mut ps_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bwd,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro,
                    rng,
                );
                z_fwd = self.z.clone();
                ok
            } else {
                self.z = z_bwd.clone();
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bwd.copy_from_slice(&p_bwd_fwd);
                ps_fwd_bwd.copy_from_slice(&ps_bwd_fwd);
                let ok = self.build_tree(
                    depth,
                    &mut z_propose,
                    &mut ps_bwd_fwd,
                    &mut ps_bwd_bwd,
                    &mut rho_bwd,
                    &mut p_bwd_fwd,
                    &mut p_bwd_bwd,
                    h0,
                    -1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro,
                    rng,
                );
                z_bwd = self.z.clone();
                ok
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample = z_propose.clone();
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    z_sample = z_propose.clone();
                }
            }
            log_sum_weight = log_add(log_sum_weight, lsw_subtree);

            for i in 0..d {
                rho[i] = rho_bwd[i] + rho_fwd[i];
            }
            let mut persist = criterion(&ps_bwd_bwd, &ps_fwd_fwd, &rho);
            let ext: Vec<f64> = rho_bwd.iter().zip(&p_fwd_bwd).map(|(a, b)| a + b).collect();
            persist &= criterion(&ps_bwd_bwd, &ps_fwd_bwd, &ext);
            let ext: Vec<f64> = rho_fwd.iter().zip(&p_bwd_fwd).map(|(a, b)| a + b).collect();
            persist &= criterion(&ps_bwd_fwd, &ps_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }

        self.z = z_sample;
        DrawStats {
            divergent: self.divergent,
            tree_depth: depth,
            n_leapfrog,
            accept: if n_leapfrog > 0 {
                sum_metro / n_leapfrog as f64
            } else {
                0.0
            },
            energy: self.hamiltonian(&self.z),
            step_size: self.eps,
            lp: self.z.logp,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z_propose: &mut PsPoint,
        ps_beg: &mut Vec<f64>,
        ps_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        n_leapfrog: &mut usize,
        log_sum_weight: &mut f64,
        sum_metro: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.evolve(sign * self.eps);
            *n_leapfrog += 1;
            let h = self.hamiltonian(&self.z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_add(*log_sum_weight, h0 - h);
            *sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(&self.z);
            *ps_beg = self.p_sharp(&self.z);
            ps_end.clone_from(ps_beg);
            add_assign(rho, &self.z.p);
            p_beg.clone_from(&self.z.p);
            p_end.clone_from(p_beg);
            return !self.divergent;
        }

        let d = rho.len();
        // First half.
        let mut rho_init = vec![0.0; d];
        let mut p_init_end = vec![0.0; d];
        let mut ps_init_end = vec![0.0; d];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z_propose,
            ps_beg,
            &mut ps_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_init,
            sum_metro,
            rng,
        ) {
            return false;
        }

        // Second half.
        let mut z_propose_final = self.z.clone();
        let mut rho_final = vec![0.0; d];
        let mut p_final_beg = vec![0.0; d];
        let mut ps_final_beg = vec![0.0; d];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            &mut z_propose_final,
            &mut ps_final_beg,
            ps_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_final,
            sum_metro,
            rng,
        ) {
            return false;
        }

        // Uniform progressive sampling within the subtree.
        let lsw_subtree = log_add(lsw_init, lsw_final);
        *log_sum_weight = log_add(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree: Vec<f64> = rho_init.iter().zip(&rho_final).map(|(a, b)| a + b).collect();
        add_assign(rho, &rho_subtree);
        let mut persist = criterion(ps_beg, ps_end, &rho_subtree);
        let ext: Vec<f64> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| a + b).collect();
        persist &= criterion(ps_beg, &ps_final_beg, &ext);
        let ext: Vec<f64> = rho_final.iter().zip(&p_init_end).map(|(a, b)| a + b).collect();
        persist &= criterion(&ps_init_end, ps_end, &ext);
        persist
    }
}

/// Dual averaging of `ln ε` toward a target acceptance statistic.
#[derive(Debug, Clone)]
pub struct StepSizeAdaptation {
    delta: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl StepSizeAdaptation {
    pub fn new(target_accept: f64, eps: f64) -> Self {
        let mut s = Self {
            delta: target_accept,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 0.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        };
        s.restart(eps);
        s
    }

    /// Re-centres on `ln(10 ε)` and clears the running averages.
    pub fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size.
    pub fn learn(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Windowed diagonal-variance estimation: a 75-iteration initial buffer,
/// doubling windows starting at 25, and a 50-iteration terminal buffer.
/// Short warmups shrink the buffers to 15% / 10% / 75%.
#[derive(Debug, Clone)]
pub struct VarianceAdaptation {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceAdaptation {
    pub fn new(warmup: usize, dim: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        Self {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: init + base - 1,
            counter: 0,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Feeds one warmup position; returns the new inverse metric when a
    /// window closes.
    pub fn learn(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        if self.in_window() {
            self.n += 1;
            for i in 0..q.len() {
                let delta = q[i] - self.mean[i];
                self.mean[i] += delta / self.n as f64;
                self.m2[i] += delta * (q[i] - self.mean[i]);
            }
        }
        if self.window_ends() {
            self.compute_next_window();
            let n = self.n as f64;
            let var = self
                .m2
                .iter()
                .map(|m2| {
                    let v = m2 / (n - 1.0);
                    (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))
                })
                .collect();
            self.n = 0;
            self.mean.iter_mut().for_each(|x| *x = 0.0);
            self.m2.iter_mut().for_each(|x| *x = 0.0);
            self.counter += 1;
            return Some(var);
        }
        self.counter += 1;
        None
    }

    /// `(first, last)` iteration indices of each variance window.
    pub fn windows(warmup: usize) -> Vec<(usize, usize)> {
        let mut a = Self::new(warmup, 1);
        let mut out = Vec::new();
        let mut start = None;
        for it in 0..warmup {
            if a.in_window() && start.is_none() {
                start = Some(it);
            }
            if a.learn(&[it as f64]).is_some() {
                out.push((start.take().unwrap(), it));
            }
        }
        out
    }
}

struct Adaptation {
    stepsize: StepSizeAdaptation,
    variance: VarianceAdaptation,
}

impl Adaptation {
    fn new(cfg: &NutsConfig, eps: f64, dim: usize) -> Self {
        Self {
            stepsize: StepSizeAdaptation::new(cfg.target_accept, eps),
            variance: VarianceAdaptation::new(cfg.warmup, dim),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NdjsonDraw {
    chain: usize,
    draw: usize,
    params: serde_json::Map<String, serde_json::Value>,
    stats: DrawStats,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Draws per chain (all chains have the same count).
    pub fn n_draws(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-chain traces of parameter `j`.
    pub fn param_chains(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[j]).collect())
            .collect()
    }

    /// All draws of parameter `j`, chain-major.
    pub fn pooled(&self, j: usize) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(move |d| d[j]))
            .collect()
    }

    /// Draw vectors in chain-major order.
    pub fn iter_draws(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| s.divergent)
            .count()
    }

    pub fn max_depth_hits(&self, max_tree_depth: usize) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| s.tree_depth >= max_tree_depth)
            .count()
    }

    pub fn check(&self) -> Result<(), SamplerError> {
        let n = self.n_draws();
        for (c, ch) in self.chains.iter().enumerate() {
            if ch.draws.len() != n || ch.stats.len() != n {
                return Err(SamplerError::Format(format!("chain {c} has a ragged draw count")));
            }
            if ch.draws.iter().any(|d| d.len() != self.names.len()) {
                return Err(SamplerError::Format(format!("chain {c} has a draw of the wrong width")));
            }
        }
        Ok(())
    }

    /// One JSON object per draw: chain, draw index, named parameters, stats.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<(), SamplerError> {
        for (c, ch) in self.chains.iter().enumerate() {
            for (d, (draw, st)) in ch.draws.iter().zip(&ch.stats).enumerate() {
                let params = self
                    .names
                    .iter()
                    .zip(draw)
                    .map(|(n, v)| (n.clone(), serde_json::json!(v)))
                    .collect();
                let line = NdjsonDraw {
                    chain: c,
                    draw: d,
                    params,
                    stats: *st,
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the output of [`Self::write_ndjson`]. Chain step sizes are taken
    /// from the draw stats; inverse metrics are not stored and come back
    /// empty.
    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, SamplerError> {
        let mut names: Option<Vec<String>> = None;
        let mut chains: Vec<ChainDraws> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: NdjsonDraw = serde_json::from_str(&line)?;
            let these: Vec<String> = rec.params.keys().cloned().collect();
            match &names {
                None => names = Some(these),
                Some(n) if *n != these => {
                    return Err(SamplerError::Format(format!("line {}: parameter names differ", lineno + 1)))
                }
                _ => {}
            }
            let values = rec
                .params
                .values()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| SamplerError::Format(format!("line {}: non-numeric value", lineno + 1)))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if rec.chain == chains.len() {
                chains.push(ChainDraws {
                    draws: Vec::new(),
                    stats: Vec::new(),
                    step_size: rec.stats.step_size,
                    inv_metric: Vec::new(),
                    warmup_divergences: 0,
                });
            }
            if rec.chain + 1 != chains.len() {
                return Err(SamplerError::Format(format!("line {}: chains out of order", lineno + 1)));
            }
            let ch = &mut chains[rec.chain];
            if rec.draw != ch.draws.len() {
                return Err(SamplerError::Format(format!("line {}: draws out of order", lineno + 1)));
            }
            ch.draws.push(values);
            ch.stats.push(rec.stats);
        }
        let out = Self {
            names: names.ok_or_else(|| SamplerError::Format("no draws".into()))?,
            chains,
        };
        out.check()?;
        Ok(out)
    }

    /// Wide CSV: chain, draw, one column per parameter, then sampler stats.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SamplerError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend(
            ["divergent", "tree_depth", "n_leapfrog", "accept", "energy", "step_size", "lp"]
                .iter()
                .map(|s| s.to_string()),
        );
        wr.write_record(&header)?;
        for (c, ch) in self.chains.iter().enumerate() {
            for (d, (draw, st)) in ch.draws.iter().zip(&ch.stats).enumerate() {
                let mut rec = vec![c.to_string(), d.to_string()];
                rec.extend(draw.iter().map(|v| v.to_string()));
                rec.push((st.divergent as u8).to_string());
                rec.push(st.tree_depth.to_string());
                rec.push(st.n_leapfrog.to_string());
                rec.push(st.accept.to_string());
                rec.push(st.energy.to_string());
                rec.push(st.step_size.to_string());
                rec.push(st.lp.to_string());
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent Gaussian with per-coordinate scales.
    pub(crate) struct Gauss(pub Vec<f64>);

    impl Target for Gauss {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> Option<f64> {
            let mut lp = 0.0;
            for i in 0..x.len() {
                let s2 = self.0[i] * self.0[i];
                lp -= 0.5 * x[i] * x[i] / s2;
                g[i] = -x[i] / s2;
            }
            Some(lp)
        }
    }

    fn cfg(seed: u64) -> NutsConfig {
        NutsConfig {
            chains: 2,
            warmup: 300,
            samples: 300,
            seed,
            ..NutsConfig::default()
        }
    }

    #[test]
    fn window_schedule() {
        assert_eq!(
            VarianceAdaptation::windows(600),
            vec![(75, 99), (100, 149), (150, 249), (250, 549)]
        );
        assert_eq!(VarianceAdaptation::windows(150), vec![(75, 99)]);
        // Short warmups fall back to proportional buffers.
        assert_eq!(VarianceAdaptation::windows(100), vec![(15, 89)]);
    }

    #[test]
    fn config_validation() {
        assert!(NutsConfig::default().validate().is_ok());
        for bad in [
            NutsConfig { warmup: 99, ..NutsConfig::default() },
            NutsConfig { chains: 0, ..NutsConfig::default() },
            NutsConfig { samples: 0, ..NutsConfig::default() },
            NutsConfig { target_accept: 1.0, ..NutsConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(SamplerError::Config(_))));
        }
    }

    #[test]
    fn init_points_are_seeded_and_distinct() {
        let a = init_points(5, 7, 4);
        assert_eq!(a, init_points(5, 7, 4));
        assert!(a.iter().flatten().all(|x| (-2.0..=2.0).contains(x)));
        for seed in 0..1000 {
            let pts = init_points(3, seed, 4);
            for i in 0..4 {
                for j in i + 1..4 {
                    assert_ne!(pts[i], pts[j]);
                }
            }
        }
    }

    #[test]
    fn identical_seeds_identical_draws() {
        let t = Gauss(vec![1.0, 2.0, 0.5]);
        let a = sample(&t, &cfg(42)).unwrap();
        let b = sample(&t, &cfg(42)).unwrap();
        assert_eq!(a, b);
        let c = sample(&t, &cfg(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn adaptation_is_frozen_after_warmup() {
        let t = Gauss(vec![1.0, 10.0]);
        let draws = sample(&t, &cfg(1)).unwrap();
        for ch in &draws.chains {
            assert!(ch.stats.iter().all(|s| s.step_size == ch.step_size));
            // The metric learned the scales roughly.
            assert!(ch.inv_metric[1] / ch.inv_metric[0] > 20.0);
        }
        // Re-run the post-warmup phase by hand and confirm neither the step
        // size nor the metric moves.
        let mut rng = chain_rng(5, 0);
        let c = cfg(5);
        let mut nuts = Nuts::start(&t, &c, &mut rng).ok().unwrap();
        nuts.inv_metric = vec![0.5, 80.0];
        nuts.eps = 0.7;
        for _ in 0..200 {
            let st = nuts.transition(&mut rng);
            assert_eq!(st.step_size, 0.7);
            assert_eq!(nuts.inv_metric, vec![0.5, 80.0]);
        }
    }

    #[test]
    fn energy_error_is_small_at_adapted_step() {
        let t = Gauss(vec![1.0, 3.0, 0.3]);
        let draws = sample(&t, &cfg(3)).unwrap();
        for ch in &draws.chains {
            let mut rng = chain_rng(99, 0);
            let mut nuts = Nuts::start(&t, &cfg(3), &mut rng).ok().unwrap();
            nuts.eps = ch.step_size;
            nuts.inv_metric = ch.inv_metric.clone();
            let mut total = 0.0;
            let n = 200;
            for _ in 0..n {
                nuts.sample_p(&mut rng);
                let h0 = nuts.hamiltonian(&nuts.z);
                for _ in 0..10 {
                    nuts.evolve(nuts.eps);
                }
                total += (nuts.hamiltonian(&nuts.z) - h0).abs();
                nuts.transition(&mut rng);
            }
            assert!(total / (n as f64) < 1.0);
        }
    }

    #[test]
    fn init_failure_is_reported() {
        struct Nowhere;
        impl Target for Nowhere {
            fn dim(&self) -> usize {
                2
            }
            fn logp_grad(&self, _: &[f64], _: &mut [f64]) -> Option<f64> {
                None
            }
        }
        assert!(matches!(
            sample(&Nowhere, &cfg(0)),
            Err(SamplerError::Init { chain: 0, .. })
        ));
    }

    #[test]
    fn divergence_detected_at_cliff() {
        // A density that is finite only on a ball: leapfrog steps leaving it
        // must be flagged divergent rather than silently accepted.
        struct Ball;
        impl Target for Ball {
            fn dim(&self) -> usize {
                2
            }
            fn logp_grad(&self, x: &[f64], g: &mut [f64]) -> Option<f64> {
                if x[0] * x[0] + x[1] * x[1] > 9.0 {
                    return None;
                }
                g.copy_from_slice(&[-x[0], -x[1]]);
                Some(-0.5 * (x[0] * x[0] + x[1] * x[1]))
            }
        }
        let draws = sample(&Ball, &cfg(8)).unwrap();
        assert!(draws.iter_draws().all(|d| d[0] * d[0] + d[1] * d[1] <= 9.0));
    }

    #[test]
    fn ndjson_and_csv_round_trip() {
        let t = Gauss(vec![1.0, 2.0]);
        let draws = sample(&t, &NutsConfig { samples: 20, ..cfg(4) }).unwrap();
        let mut buf = Vec::new();
        draws.write_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 40);
        assert!(text.lines().next().unwrap().starts_with("{\"chain\":0,\"draw\":0,\"params\":{\"x[0]\""));
        let back = PosteriorDraws::read_ndjson(&buf[..]).unwrap();
        assert_eq!(back.names, draws.names);
        for (a, b) in back.chains.iter().zip(&draws.chains) {
            assert_eq!(a.draws, b.draws);
            assert_eq!(a.stats, b.stats);
        }
        let mut csv_buf = Vec::new();
        draws.write_csv(&mut csv_buf).unwrap();
        let mut rd = csv::Reader::from_reader(&csv_buf[..]);
        assert_eq!(rd.headers().unwrap().len(), 2 + 2 + 7);
        assert_eq!(rd.records().count(), 40);
    }

    #[test]
    fn rejects_scrambled_ndjson() {
        let t = Gauss(vec![1.0]);
        let draws = sample(&t, &NutsConfig { samples: 3, ..cfg(4) }).unwrap();
        let mut buf = Vec::new();
        draws.write_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        assert!(PosteriorDraws::read_ndjson(lines.join("\n").as_bytes()).is_err());
    }
}
