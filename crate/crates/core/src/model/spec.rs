use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::cohort::Outcome;

/// Input variables that carry a β coefficient. Each covariate is also a
/// hyperprior family: all of its per-outcome coefficients share one
/// `(μ, σ)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Dilation,
    Effacement,
    Station,
    Poscon,
    Treatment,
    Gbs,
    Nullip,
    Epidural,
    Fgr,
    Bmi,
    Ga,
}

impl Covariate {
    pub const ALL: [Covariate; 11] = [
        Covariate::Dilation,
        Covariate::Effacement,
        Covariate::Station,
        Covariate::Poscon,
        Covariate::Treatment,
        Covariate::Gbs,
        Covariate::Nullip,
        Covariate::Epidural,
        Covariate::Fgr,
        Covariate::Bmi,
        Covariate::Ga,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Dilation => "dilation",
            Covariate::Effacement => "effacement",
            Covariate::Station => "station",
            Covariate::Poscon => "poscon",
            Covariate::Treatment => "treatment",
            Covariate::Gbs => "gbs",
            Covariate::Nullip => "nullip",
            Covariate::Epidural => "epidural",
            Covariate::Fgr => "fgr",
            Covariate::Bmi => "bmi",
            Covariate::Ga => "ga",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// 0/1 indicators; these are mean-centered before entering the outcome
    /// predictors.
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            Covariate::Treatment
                | Covariate::Gbs
                | Covariate::Nullip
                | Covariate::Epidural
                | Covariate::Fgr
        )
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One outcome-specific coefficient `β^outcome_covariate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coefficient {
    pub family: Covariate,
    pub outcome: Outcome,
}

impl Coefficient {
    pub fn name(&self) -> String {
        format!("beta_{}[{}]", self.family.name(), self.outcome.name())
    }
}

/// Covariate → outcome wiring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcomes: Vec<Outcome>,
    /// Applied to every outcome.
    pub shared_covariates: Vec<Covariate>,
    /// Outcome-specific additions.
    pub extra_covariates: BTreeMap<Outcome, Vec<Covariate>>,
    /// Family → the outcomes whose coefficient for that covariate shares
    /// the family's hyperprior.
    pub hyperprior_sharing: BTreeMap<Covariate, Vec<Outcome>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::prom()
    }
}

impl ModelSpec {
    /// The induction-outcome wiring: Bishop components and treatment on all
    /// five outcomes, plus GBS on the two ROM outcomes, nullip and epidural
    /// on both augmentation outcomes, FGR on augmentation-to-delivery, and
    /// BMI and GA on cesarean.
    pub fn prom() -> Self {
        let shared = vec![
            Covariate::Dilation,
            Covariate::Effacement,
            Covariate::Station,
            Covariate::Poscon,
            Covariate::Treatment,
        ];
        let extra: BTreeMap<Outcome, Vec<Covariate>> = [
            (Outcome::RomAdmit, vec![Covariate::Gbs]),
            (Outcome::RomAgent, vec![Covariate::Gbs]),
            (Outcome::AugFully, vec![Covariate::Nullip, Covariate::Epidural]),
            (
                Outcome::AugDeliv,
                vec![Covariate::Nullip, Covariate::Epidural, Covariate::Fgr],
            ),
            (Outcome::Cs, vec![Covariate::Bmi, Covariate::Ga]),
        ]
        .into_iter()
        .collect();
        Self::from_wiring(Outcome::ALL.to_vec(), shared, extra)
    }

    /// Builds a spec where every covariate symbol is its own family.
    pub fn from_wiring(
        outcomes: Vec<Outcome>,
        shared_covariates: Vec<Covariate>,
        extra_covariates: BTreeMap<Outcome, Vec<Covariate>>,
    ) -> Self {
        let mut sharing: BTreeMap<Covariate, Vec<Outcome>> = BTreeMap::new();
        for &o in &outcomes {
            for &c in shared_covariates
                .iter()
                .chain(extra_covariates.get(&o).into_iter().flatten())
            {
                sharing.entry(c).or_default().push(o);
            }
        }
        Self {
            outcomes,
            shared_covariates,
            extra_covariates,
            hyperprior_sharing: sharing,
        }
    }

    /// Covariates entering `outcome`'s predictor, shared first.
    pub fn covariates_for(&self, outcome: Outcome) -> Vec<Covariate> {
        let mut v = self.shared_covariates.clone();
        if let Some(extra) = self.extra_covariates.get(&outcome) {
            v.extend(extra.iter().copied());
        }
        v
    }

    /// Families in canonical covariate order.
    pub fn families(&self) -> Vec<Covariate> {
        self.hyperprior_sharing.keys().copied().collect()
    }

    /// All coefficients, grouped by family then outcome.
    pub fn coefficients(&self) -> Vec<Coefficient> {
        self.hyperprior_sharing
            .iter()
            .flat_map(|(&family, outs)| {
                outs.iter().map(move |&outcome| Coefficient { family, outcome })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut outs = self.outcomes.clone();
        outs.sort();
        outs.dedup();
        if outs != Outcome::ALL.to_vec() || self.outcomes.len() != 5 {
            return Err(ModelError::Spec(format!(
                "expected exactly the five outcomes, got {:?}",
                self.outcomes
            )));
        }
        for &o in &self.outcomes {
            let covs = self.covariates_for(o);
            for &c in &self.shared_covariates {
                if !covs.contains(&c) {
                    return Err(ModelError::Spec(format!("{o} lacks shared covariate {c}")));
                }
            }
            let mut sorted = covs.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != covs.len() {
                return Err(ModelError::Spec(format!("{o} lists a covariate twice")));
            }
        }
        // Every wired coefficient must sit in exactly one family, and every
        // family member must be wired.
        let mut wired: Vec<(Covariate, Outcome)> = self
            .outcomes
            .iter()
            .flat_map(|&o| self.covariates_for(o).into_iter().map(move |c| (c, o)))
            .collect();
        let mut shared: Vec<(Covariate, Outcome)> = self
            .hyperprior_sharing
            .iter()
            .flat_map(|(&c, outs)| outs.iter().map(move |&o| (c, o)))
            .collect();
        wired.sort();
        shared.sort();
        let before = shared.len();
        shared.dedup();
        if shared.len() != before || wired != shared {
            return Err(ModelError::Spec(
                "hyperprior families do not partition the wired coefficients".into(),
            ));
        }
        if !self.shared_covariates.contains(&Covariate::Poscon) {
            return Err(ModelError::Spec("poscon must be a shared covariate".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prom_wiring() {
        let s = ModelSpec::prom();
        s.validate().unwrap();
        assert_eq!(s.families().len(), 11);
        assert_eq!(s.coefficients().len(), 34);
        assert_eq!(
            s.covariates_for(Outcome::AugDeliv),
            vec![
                Covariate::Dilation,
                Covariate::Effacement,
                Covariate::Station,
                Covariate::Poscon,
                Covariate::Treatment,
                Covariate::Nullip,
                Covariate::Epidural,
                Covariate::Fgr
            ]
        );
        assert_eq!(s.hyperprior_sharing[&Covariate::Treatment].len(), 5);
        assert_eq!(s.hyperprior_sharing[&Covariate::Fgr], vec![Outcome::AugDeliv]);
        assert_eq!(s.hyperprior_sharing[&Covariate::Gbs], vec![Outcome::RomAdmit, Outcome::RomAgent]);
        assert_eq!(s.hyperprior_sharing[&Covariate::Ga], vec![Outcome::Cs]);
    }

    #[test]
    fn json_round_trip() {
        let s = ModelSpec::prom();
        let text = serde_json::to_string_pretty(&s).unwrap();
        assert!(text.contains("\"aug_deliv\""));
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_broken_sharing() {
        let mut s = ModelSpec::prom();
        s.hyperprior_sharing
            .get_mut(&Covariate::Fgr)
            .unwrap()
            .push(Outcome::Cs);
        assert!(s.validate().is_err());
        let mut s = ModelSpec::prom();
        s.outcomes.pop();
        assert!(s.validate().is_err());
    }
}
