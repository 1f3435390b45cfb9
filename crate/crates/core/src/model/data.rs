use std::collections::BTreeMap;

use super::params::ParameterSpace;
use super::spec::Covariate;
use super::ModelError;
use crate::cohort::{DesignRow, DesignTable, Outcome};
use crate::ordinal::CATEGORIES;

/// Design columns for one outcome, poscon excluded (it varies with the
/// imputed category and is added separately).
#[derive(Debug, Clone)]
pub struct OutcomeBlock {
    pub outcome: Outcome,
    pub covariates: Vec<Covariate>,
    /// Index into `Params::beta` for each entry of `covariates`.
    pub coef: Vec<usize>,
    pub poscon_coef: usize,
    /// Row-major `n × covariates.len()`.
    pub x: Vec<f64>,
}

impl OutcomeBlock {
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.covariates.len();
        &self.x[i * p..(i + 1) * p]
    }
}

/// The cohort laid out for repeated density evaluation.
///
/// Binary covariates enter the outcome predictors mean-centered, like the
/// continuous ones, since none of the predictors has an intercept. The
/// ordinal predictor uses the raw 0/1 nullip and PIT indicators.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub ids: Vec<String>,
    pub blocks: Vec<OutcomeBlock>,
    pub poscon: Vec<Option<u8>>,
    pub poscon_mean: f64,
    pub nullip: Vec<bool>,
    pub pit: Vec<bool>,
    /// Standardized continuous outcomes, [`Outcome::CONTINUOUS`] order.
    pub y: Vec<[Option<f64>; 4]>,
    pub cs: Vec<bool>,
    pub binary_means: BTreeMap<Covariate, f64>,
}

fn raw_value(row: &DesignRow, c: Covariate) -> f64 {
    match c {
        Covariate::Dilation => row.dilation,
        Covariate::Effacement => row.effacement,
        Covariate::Station => row.station,
        Covariate::Poscon => f64::NAN,
        Covariate::Treatment => row.treatment,
        Covariate::Gbs => row.gbs,
        Covariate::Nullip => row.nullip,
        Covariate::Epidural => row.epidural,
        Covariate::Fgr => row.fgr,
        Covariate::Bmi => row.bmi,
        Covariate::Ga => row.ga,
    }
}

impl PreparedData {
    pub fn new(table: &DesignTable, space: &ParameterSpace) -> Result<Self, ModelError> {
        let rows = &table.rows;
        if rows.is_empty() {
            return Err(ModelError::Data("empty design".into()));
        }
        let n = rows.len() as f64;
        let binary_means: BTreeMap<Covariate, f64> = Covariate::ALL
            .iter()
            .filter(|c| c.is_binary())
            .map(|&c| (c, rows.iter().map(|r| raw_value(r, c)).sum::<f64>() / n))
            .collect();
        let value = |r: &DesignRow, c: Covariate| {
            raw_value(r, c) - binary_means.get(&c).copied().unwrap_or(0.0)
        };

        let spec = space.spec();
        let mut blocks = Vec::with_capacity(Outcome::ALL.len());
        for o in Outcome::ALL {
            let covariates: Vec<Covariate> = spec
                .covariates_for(o)
                .into_iter()
                .filter(|&c| c != Covariate::Poscon)
                .collect();
            let coef = covariates
                .iter()
                .map(|&c| space.coefficient_index(c, o).expect("validated spec"))
                .collect();
            let poscon_coef = space
                .coefficient_index(Covariate::Poscon, o)
                .expect("validated spec");
            let mut x = Vec::with_capacity(rows.len() * covariates.len());
            for r in rows {
                x.extend(covariates.iter().map(|&c| value(r, c)));
            }
            blocks.push(OutcomeBlock {
                outcome: o,
                covariates,
                coef,
                poscon_coef,
                x,
            });
        }

        let poscon: Vec<Option<u8>> = rows.iter().map(|r| r.poscon).collect();
        if let Some(&bad) = poscon.iter().flatten().find(|&&k| k as usize >= CATEGORIES) {
            return Err(ModelError::PosconOutOfRange(bad as usize));
        }
        let data = Self {
            ids: rows.iter().map(|r| r.id.clone()).collect(),
            blocks,
            poscon,
            poscon_mean: table.poscon_mean,
            nullip: rows.iter().map(|r| r.nullip != 0.0).collect(),
            pit: rows.iter().map(|r| r.treatment != 0.0).collect(),
            y: rows.iter().map(|r| r.outcomes).collect(),
            cs: rows.iter().map(|r| r.cs).collect(),
            binary_means,
        };
        data.check()?;
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn n_missing_poscon(&self) -> usize {
        self.poscon.iter().filter(|p| p.is_none()).count()
    }

    /// Row counts agree across all blocks and every value is finite.
    pub fn check(&self) -> Result<(), ModelError> {
        let n = self.n();
        let lens = [
            self.poscon.len(),
            self.nullip.len(),
            self.pit.len(),
            self.y.len(),
            self.cs.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(ModelError::Data(format!("row counts disagree: {n} vs {lens:?}")));
        }
        for b in &self.blocks {
            if b.x.len() != n * b.covariates.len() {
                return Err(ModelError::Data(format!("{} design has wrong size", b.outcome)));
            }
            if b.x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Data(format!("{} design has non-finite entries", b.outcome)));
            }
        }
        if self.y.iter().flatten().flatten().any(|v| !v.is_finite()) || !self.poscon_mean.is_finite() {
            return Err(ModelError::Data("non-finite outcome".into()));
        }
        Ok(())
    }

    /// A copy with row `i` removed.
    pub fn without_row(&self, i: usize) -> Self {
        let mut d = self.clone();
        d.ids.remove(i);
        d.poscon.remove(i);
        d.nullip.remove(i);
        d.pit.remove(i);
        d.y.remove(i);
        d.cs.remove(i);
        for b in &mut d.blocks {
            let p = b.covariates.len();
            b.x.drain(i * p..(i + 1) * p);
        }
        d
    }
}
