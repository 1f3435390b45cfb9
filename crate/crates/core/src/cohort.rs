//! Cohort data model, CSV ingestion, and outcome preprocessing.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest number of present values a Box-Cox fit accepts.
pub const MIN_FIT_VALUES: usize = 5;

const LAMBDA_LO: f64 = -2.0;
const LAMBDA_HI: f64 = 2.0;
const LAMBDA_STEP: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: missing columns {missing:?}, unexpected columns {unexpected:?}")]
    Header {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("{} row(s) rejected; first: {}", .0.len(), .0[0])]
    InvalidRows(Vec<RowDiagnostic>),
    #[error("cohort has no records")]
    Empty,
    #[error("duplicate patient id {0:?}")]
    DuplicateId(String),
    #[error("Box-Cox input must be positive, got {0}")]
    NonPositive(f64),
    #[error("need at least {MIN_FIT_VALUES} values to fit a transform, got {0}")]
    TooFewValues(usize),
    #[error("outcome {outcome} has only {present} present values (need {MIN_FIT_VALUES})")]
    SparseOutcome { outcome: &'static str, present: usize },
    #[error("values have zero variance; transform is undefined")]
    ZeroVariance,
}

/// One rejected input row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowDiagnostic {
    /// 1-based data row (the header is not counted).
    pub row: usize,
    pub id: Option<String>,
    pub reason: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.id {
            Some(id) => write!(f, "row {} (id {id}): {}", self.row, self.reason),
            None => write!(f, "row {}: {}", self.row, self.reason),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Treatment {
    #[serde(rename = "PIT")]
    Pit,
    #[serde(rename = "MISO")]
    Miso,
}

impl Treatment {
    pub fn label(self) -> &'static str {
        match self {
            Treatment::Pit => "PIT",
            Treatment::Miso => "MISO",
        }
    }

    /// PIT = 1, MISO = 0.
    pub fn indicator(self) -> f64 {
        match self {
            Treatment::Pit => 1.0,
            Treatment::Miso => 0.0,
        }
    }
}

impl FromStr for Treatment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PIT" => Ok(Treatment::Pit),
            "MISO" => Ok(Treatment::Miso),
            other => Err(format!("unknown treatment label {other:?} (expected PIT or MISO)")),
        }
    }
}

/// The five modeled outcomes. The first four are continuous durations in
/// hours; `Cs` is binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    RomAdmit,
    RomAgent,
    AugFully,
    AugDeliv,
    Cs,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::RomAdmit,
        Outcome::RomAgent,
        Outcome::AugFully,
        Outcome::AugDeliv,
        Outcome::Cs,
    ];
    pub const CONTINUOUS: [Outcome; 4] = [
        Outcome::RomAdmit,
        Outcome::RomAgent,
        Outcome::AugFully,
        Outcome::AugDeliv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::RomAdmit => "rom_admit",
            Outcome::RomAgent => "rom_agent",
            Outcome::AugFully => "aug_fully",
            Outcome::AugDeliv => "aug_deliv",
            Outcome::Cs => "cs",
        }
    }

    /// Position among the four continuous outcomes.
    pub fn continuous_index(self) -> Option<usize> {
        Outcome::CONTINUOUS.iter().position(|&o| o == self)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub dilation_pts: u8,
    pub effacement_pts: u8,
    pub station_pts: u8,
    pub poscon_pts: Option<u8>,
    pub nullip: bool,
    pub epidural: bool,
    pub fgr: bool,
    pub gbs: bool,
    pub ga_weeks: f64,
    pub bmi: f64,
    pub treatment: Treatment,
    pub rom_admit_h: Option<f64>,
    pub rom_agent_h: Option<f64>,
    pub aug_fully_h: Option<f64>,
    pub aug_deliv_h: Option<f64>,
    pub cs: bool,
}

impl PatientRecord {
    pub fn duration(&self, outcome: Outcome) -> Option<f64> {
        match outcome {
            Outcome::RomAdmit => self.rom_admit_h,
            Outcome::RomAgent => self.rom_agent_h,
            Outcome::AugFully => self.aug_fully_h,
            Outcome::AugDeliv => self.aug_deliv_h,
            Outcome::Cs => None,
        }
    }

    pub fn duration_mut(&mut self, outcome: Outcome) -> Option<&mut Option<f64>> {
        match outcome {
            Outcome::RomAdmit => Some(&mut self.rom_admit_h),
            Outcome::RomAgent => Some(&mut self.rom_agent_h),
            Outcome::AugFully => Some(&mut self.aug_fully_h),
            Outcome::AugDeliv => Some(&mut self.aug_deliv_h),
            Outcome::Cs => None,
        }
    }

    /// Checks the per-record invariants (point ranges, positive durations).
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("dilation_pts", self.dilation_pts),
            ("effacement_pts", self.effacement_pts),
            ("station_pts", self.station_pts),
        ] {
            if v > 3 {
                return Err(format!("{name}={v} outside Bishop range 0..=3"));
            }
        }
        if let Some(v) = self.poscon_pts {
            if v > 4 {
                return Err(format!("poscon_pts={v} outside Bishop range 0..=4"));
            }
        }
        for o in Outcome::CONTINUOUS {
            if let Some(v) = self.duration(o) {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(format!("{}_h={v} must be a positive duration", o.name()));
                }
            }
        }
        for (name, v) in [("ga_weeks", self.ga_weeks), ("bmi", self.bmi)] {
            if !v.is_finite() {
                return Err(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// A validated, non-empty cohort with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<PatientRecord>,
    provenance: Provenance,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>, provenance: Provenance) -> Result<Self, CohortError> {
        if records.is_empty() {
            return Err(CohortError::Empty);
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut bad = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if let Err(reason) = r.validate() {
                bad.push(RowDiagnostic {
                    row: i + 1,
                    id: Some(r.id.clone()),
                    reason,
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(CohortError::DuplicateId(r.id.clone()));
            }
        }
        if !bad.is_empty() {
            return Err(CohortError::InvalidRows(bad));
        }
        Ok(Self {
            records,
            provenance,
        })
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn into_records(self) -> Vec<PatientRecord> {
        self.records
    }
}

/// Canonical column names of the cohort CSV, in file order.
pub const COLUMNS: [&str; 17] = [
    "id",
    "dilation_pts",
    "effacement_pts",
    "station_pts",
    "poscon_pts",
    "nullip",
    "epidural",
    "fgr",
    "gbs",
    "ga_weeks",
    "bmi",
    "treatment",
    "rom_admit_h",
    "rom_agent_h",
    "aug_fully_h",
    "aug_deliv_h",
    "cs",
];

/// Maps each canonical column to the header used in a particular file.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSchema {
    headers: [String; 17],
}

impl Default for CohortSchema {
    fn default() -> Self {
        Self {
            headers: COLUMNS.map(String::from),
        }
    }
}

impl CohortSchema {
    /// Renames one canonical column. Unknown canonical names are ignored.
    pub fn with_header(mut self, canonical: &str, header: &str) -> Self {
        if let Some(i) = COLUMNS.iter().position(|c| *c == canonical) {
            self.headers[i] = header.to_string();
        }
        self
    }

    pub fn header(&self, canonical: &str) -> Option<&str> {
        COLUMNS
            .iter()
            .position(|c| *c == canonical)
            .map(|i| self.headers[i].as_str())
    }
}

/// Result of reading a cohort file: every data row lands in exactly one of
/// `records` or `diagnostics`.
#[derive(Debug, Clone)]
pub struct CohortLoad {
    pub records: Vec<PatientRecord>,
    pub diagnostics: Vec<RowDiagnostic>,
    pub rows: usize,
}

impl CohortLoad {
    /// Strict conversion: any rejected row fails the whole load.
    pub fn into_cohort(self, provenance: Provenance) -> Result<Cohort, CohortError> {
        if !self.diagnostics.is_empty() {
            return Err(CohortError::InvalidRows(self.diagnostics));
        }
        Cohort::new(self.records, provenance)
    }
}

fn parse_points(field: &str, name: &str, max: u8) -> Result<u8, String> {
    let v: i64 = field
        .trim()
        .parse()
        .map_err(|_| format!("{name}: malformed integer {field:?}"))?;
    if !(0..=max as i64).contains(&v) {
        return Err(format!("{name}={v} outside Bishop range 0..={max}"));
    }
    Ok(v as u8)
}

fn parse_bool(field: &str, name: &str) -> Result<bool, String> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("{name}: expected 0 or 1, got {other:?}")),
    }
}

fn parse_real(field: &str, name: &str) -> Result<f64, String> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("{name}: malformed number {field:?}"))?;
    if !v.is_finite() {
        return Err(format!("{name}: non-finite value {field:?}"));
    }
    Ok(v)
}

fn parse_duration(field: &str, name: &str) -> Result<Option<f64>, String> {
    if field.trim().is_empty() {
        return Ok(None);
    }
    let v = parse_real(field, name)?;
    if v <= 0.0 {
        return Err(format!("{name}={v} must be a positive duration"));
    }
    Ok(Some(v))
}

fn parse_row(cols: &[usize; 17], rec: &csv::StringRecord) -> Result<PatientRecord, String> {
    let f = |i: usize| rec.get(cols[i]).unwrap_or("");
    let id = f(0).trim().to_string();
    if id.is_empty() {
        return Err("id: empty".into());
    }
    let poscon = f(4);
    Ok(PatientRecord {
        id,
        dilation_pts: parse_points(f(1), COLUMNS[1], 3)?,
        effacement_pts: parse_points(f(2), COLUMNS[2], 3)?,
        station_pts: parse_points(f(3), COLUMNS[3], 3)?,
        poscon_pts: if poscon.trim().is_empty() {
            None
        } else {
            Some(parse_points(poscon, COLUMNS[4], 4)?)
        },
        nullip: parse_bool(f(5), COLUMNS[5])?,
        epidural: parse_bool(f(6), COLUMNS[6])?,
        fgr: parse_bool(f(7), COLUMNS[7])?,
        gbs: parse_bool(f(8), COLUMNS[8])?,
        ga_weeks: parse_real(f(9), COLUMNS[9])?,
        bmi: parse_real(f(10), COLUMNS[10])?,
        treatment: f(11).trim().parse()?,
        rom_admit_h: parse_duration(f(12), COLUMNS[12])?,
        rom_agent_h: parse_duration(f(13), COLUMNS[13])?,
        aug_fully_h: parse_duration(f(14), COLUMNS[14])?,
        aug_deliv_h: parse_duration(f(15), COLUMNS[15])?,
        cs: parse_bool(f(16), COLUMNS[16])?,
    })
}

/// Reads cohort rows from any reader. Header problems are fatal; row
/// problems become diagnostics.
pub fn read_cohort<R: Read>(reader: R, schema: &CohortSchema) -> Result<CohortLoad, CohortError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut cols = [0usize; 17];
    let mut missing = Vec::new();
    for (i, h) in schema.headers.iter().enumerate() {
        match header.iter().position(|x| x.trim() == h) {
            Some(p) => cols[i] = p,
            None => missing.push(h.clone()),
        }
    }
    let unexpected: Vec<String> = header
        .iter()
        .filter(|h| !schema.headers.iter().any(|s| s == h.trim()))
        .map(String::from)
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(CohortError::Header {
            missing,
            unexpected,
        });
    }

    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        rows += 1;
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(RowDiagnostic {
                    row,
                    id: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if rec.len() != header.len() {
            diagnostics.push(RowDiagnostic {
                row,
                id: rec.get(cols[0]).map(String::from),
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
            continue;
        }
        match parse_row(&cols, &rec) {
            Ok(r) => {
                if seen.insert(r.id.clone()) {
                    records.push(r);
                } else {
                    diagnostics.push(RowDiagnostic {
                        row,
                        id: Some(r.id.clone()),
                        reason: format!("duplicate id {:?}", r.id),
                    });
                }
            }
            Err(reason) => diagnostics.push(RowDiagnostic {
                row,
                id: rec.get(cols[0]).map(|s| s.trim().to_string()),
                reason,
            }),
        }
    }
    Ok(CohortLoad {
        records,
        diagnostics,
        rows,
    })
}

pub fn load_cohort(path: impl AsRef<Path>, schema: &CohortSchema) -> Result<CohortLoad, CohortError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_cohort(std::io::BufReader::new(file), schema)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes the canonical CSV. Reals use the shortest round-trip formatting,
/// so a load of the written file reproduces the records exactly.
pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS)?;
    for r in cohort.records() {
        w.write_record([
            r.id.clone(),
            r.dilation_pts.to_string(),
            r.effacement_pts.to_string(),
            r.station_pts.to_string(),
            r.poscon_pts.map(|v| v.to_string()).unwrap_or_default(),
            flag(r.nullip).into(),
            flag(r.epidural).into(),
            flag(r.fgr).into(),
            flag(r.gbs).into(),
            r.ga_weeks.to_string(),
            r.bmi.to_string(),
            r.treatment.label().into(),
            opt(r.rom_admit_h),
            opt(r.rom_agent_h),
            opt(r.aug_fully_h),
            opt(r.aug_deliv_h),
            flag(r.cs).into(),
        ])?;
    }
    w.flush().map_err(|source| CohortError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<(), CohortError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_cohort(cohort, std::io::BufWriter::new(file))
}

/// Box-Cox power transform: `(y^λ − 1)/λ`, or `ln y` at `λ = 0`.
pub fn boxcox(y: f64, lambda: f64) -> Result<f64, CohortError> {
    if !(y > 0.0) {
        return Err(CohortError::NonPositive(y));
    }
    if lambda == 0.0 {
        Ok(y.ln())
    } else {
        // expm1 keeps the λ → 0 limit accurate.
        Ok((lambda * y.ln()).exp_m1() / lambda)
    }
}

/// Inverse Box-Cox; `None` where `λ·t + 1 ≤ 0` (outside the image).
pub fn inv_boxcox(t: f64, lambda: f64) -> Option<f64> {
    if lambda == 0.0 {
        let y = t.exp();
        return (y > 0.0 && y.is_finite()).then_some(y);
    }
    let base = lambda * t;
    if !(base > -1.0) {
        return None;
    }
    let y = (base.ln_1p() / lambda).exp();
    (y > 0.0 && y.is_finite()).then_some(y)
}

/// Gaussian profile log-likelihood of the Box-Cox transformed sample,
/// up to an additive constant: `−n/2·ln σ̂²(λ) + (λ − 1)·Σ ln y`.
pub fn boxcox_profile_loglik(values: &[f64], lambda: f64) -> Result<f64, CohortError> {
    let n = values.len() as f64;
    let mut t = Vec::with_capacity(values.len());
    let mut log_sum = 0.0;
    for &y in values {
        t.push(boxcox(y, lambda)?);
        log_sum += y.ln();
    }
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return Err(CohortError::ZeroVariance);
    }
    Ok(-0.5 * n * var.ln() + (lambda - 1.0) * log_sum)
}

/// Profile-likelihood λ over the grid `[−2, 2]` in steps of 0.01.
pub fn fit_lambda(values: &[f64]) -> Result<f64, CohortError> {
    if values.len() < MIN_FIT_VALUES {
        return Err(CohortError::TooFewValues(values.len()));
    }
    if let Some(&bad) = values.iter().find(|&&y| !(y > 0.0)) {
        return Err(CohortError::NonPositive(bad));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Err(CohortError::ZeroVariance);
    }
    let steps = ((LAMBDA_HI - LAMBDA_LO) / LAMBDA_STEP).round() as i64;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=steps {
        // Integer grid, so λ = 0 is hit exactly.
        let lambda = (i - steps / 2) as f64 / 100.0;
        match boxcox_profile_loglik(values, lambda) {
            Ok(ll) if ll > best.0 => best = (ll, lambda),
            _ => {}
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Err(CohortError::ZeroVariance);
    }
    Ok(best.1)
}

/// Box-Cox followed by standardization; invertible for present values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTransform {
    pub outcome_name: String,
    pub lambda: f64,
    pub center: f64,
    pub scale: f64,
}

impl OutcomeTransform {
    /// Fits λ by profile likelihood, then the mean and sample sd of the
    /// transformed values.
    pub fn fit(outcome: Outcome, values: &[f64]) -> Result<Self, CohortError> {
        let lambda = fit_lambda(values)?;
        let t: Vec<f64> = values
            .iter()
            .map(|&y| boxcox(y, lambda))
            .collect::<Result<_, _>>()?;
        let (center, scale) = mean_sd(&t);
        if !(scale > 0.0) {
            return Err(CohortError::ZeroVariance);
        }
        Ok(Self {
            outcome_name: outcome.name().to_string(),
            lambda,
            center,
            scale,
        })
    }

    pub fn forward(&self, y: f64) -> Result<f64, CohortError> {
        Ok((boxcox(y, self.lambda)? - self.center) / self.scale)
    }

    /// `None` where the standardized value maps outside the Box-Cox image.
    pub fn inverse(&self, z: f64) -> Option<f64> {
        inv_boxcox(z * self.scale + self.center, self.lambda)
    }
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of the preprocessed design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub id: String,
    /// Bishop points minus the cohort mean (not rescaled).
    pub dilation: f64,
    pub effacement: f64,
    pub station: f64,
    /// Raw observed Position + Consistency score.
    pub poscon: Option<u8>,
    pub nullip: f64,
    pub epidural: f64,
    pub fgr: f64,
    pub gbs: f64,
    /// PIT = 1, MISO = 0.
    pub treatment: f64,
    pub bmi: f64,
    pub ga: f64,
    /// Transformed, standardized continuous outcomes in
    /// [`Outcome::CONTINUOUS`] order.
    pub outcomes: [Option<f64>; 4],
    pub cs: bool,
}

/// Model-ready cohort plus everything needed to map back to hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTable {
    pub rows: Vec<DesignRow>,
    pub transforms: Vec<OutcomeTransform>,
    /// Mean of the observed Position + Consistency scores.
    pub poscon_mean: f64,
    pub dilation_mean: f64,
    pub effacement_mean: f64,
    pub station_mean: f64,
    pub bmi_mean: f64,
    pub bmi_sd: f64,
    pub ga_mean: f64,
    pub ga_sd: f64,
}

fn zscore_params(xs: &[f64]) -> (f64, f64) {
    let (m, s) = mean_sd(xs);
    // A constant column carries no information; leave it centered at zero.
    (m, if s > 0.0 { s } else { 1.0 })
}

/// Box-Cox + standardizes the four durations, z-scores GA and BMI, centers
/// the Bishop point covariates, and codes binaries as 0/1 (PIT = 1).
pub fn preprocess_outcomes(cohort: &Cohort) -> Result<DesignTable, CohortError> {
    let recs = cohort.records();
    let mut transforms = Vec::with_capacity(4);
    for o in Outcome::CONTINUOUS {
        let present: Vec<f64> = recs.iter().filter_map(|r| r.duration(o)).collect();
        if present.len() < MIN_FIT_VALUES {
            return Err(CohortError::SparseOutcome {
                outcome: o.name(),
                present: present.len(),
            });
        }
        transforms.push(OutcomeTransform::fit(o, &present)?);
    }

    let col = |f: fn(&PatientRecord) -> f64| -> Vec<f64> { recs.iter().map(f).collect() };
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let dilation_mean = mean(&col(|r| r.dilation_pts as f64));
    let effacement_mean = mean(&col(|r| r.effacement_pts as f64));
    let station_mean = mean(&col(|r| r.station_pts as f64));
    let observed_pc: Vec<f64> = recs
        .iter()
        .filter_map(|r| r.poscon_pts.map(f64::from))
        .collect();
    // With no observed score at all, center on the middle category.
    let poscon_mean = if observed_pc.is_empty() {
        2.0
    } else {
        mean(&observed_pc)
    };
    let (bmi_mean, bmi_sd) = zscore_params(&col(|r| r.bmi));
    let (ga_mean, ga_sd) = zscore_params(&col(|r| r.ga_weeks));

    let mut rows = Vec::with_capacity(recs.len());
    for r in recs {
        let mut outcomes = [None; 4];
        for (j, o) in Outcome::CONTINUOUS.iter().enumerate() {
            if let Some(y) = r.duration(*o) {
                outcomes[j] = Some(transforms[j].forward(y)?);
            }
        }
        rows.push(DesignRow {
            id: r.id.clone(),
            dilation: r.dilation_pts as f64 - dilation_mean,
            effacement: r.effacement_pts as f64 - effacement_mean,
            station: r.station_pts as f64 - station_mean,
            poscon: r.poscon_pts,
            nullip: r.nullip as u8 as f64,
            epidural: r.epidural as u8 as f64,
            fgr: r.fgr as u8 as f64,
            gbs: r.gbs as u8 as f64,
            treatment: r.treatment.indicator(),
            bmi: (r.bmi - bmi_mean) / bmi_sd,
            ga: (r.ga_weeks - ga_mean) / ga_sd,
            outcomes,
            cs: r.cs,
        });
    }
    Ok(DesignTable {
        rows,
        transforms,
        poscon_mean,
        dilation_mean,
        effacement_mean,
        station_mean,
        bmi_mean,
        bmi_sd,
        ga_mean,
        ga_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const HEADER: &str = "id,dilation_pts,effacement_pts,station_pts,poscon_pts,nullip,epidural,fgr,gbs,ga_weeks,bmi,treatment,rom_admit_h,rom_agent_h,aug_fully_h,aug_deliv_h,cs";

    fn load_str(body: &str) -> CohortLoad {
        let text = format!("{HEADER}\n{body}");
        read_cohort(text.as_bytes(), &CohortSchema::default()).unwrap()
    }

    #[test]
    fn empty_poscon_is_absent() {
        let load = load_str("p1,1,2,0,,1,0,0,1,39.1,28.5,PIT,3.5,5,8.25,10,0\n");
        assert!(load.diagnostics.is_empty());
        assert_eq!(load.records[0].poscon_pts, None);
        assert_eq!(load.records[0].treatment, Treatment::Pit);
        assert!(load.records[0].nullip && load.records[0].gbs);
    }

    #[test]
    fn missing_outcome_cells_are_absent() {
        let load = load_str("p1,1,2,0,3,1,0,0,1,39.1,28.5,MISO,,5,,10,1\n");
        let r = &load.records[0];
        assert_eq!(r.rom_admit_h, None);
        assert_eq!(r.aug_fully_h, None);
        assert_eq!(r.aug_deliv_h, Some(10.0));
    }

    #[test]
    fn out_of_range_points_cite_bounds() {
        let load = load_str("p1,5,2,0,3,1,0,0,1,39.1,28.5,PIT,3.5,5,8,10,0\n");
        assert!(load.records.is_empty());
        let d = &load.diagnostics[0];
        assert_eq!(d.row, 1);
        assert!(d.reason.contains("dilation_pts=5"), "{}", d.reason);
        assert!(d.reason.contains("0..=3"));
        let load = load_str("p1,1,2,0,5,1,0,0,1,39.1,28.5,PIT,3.5,5,8,10,0\n");
        assert!(load.diagnostics[0].reason.contains("0..=4"));
    }

    #[test]
    fn row_level_errors() {
        let body = "\
a,1,1,1,1,0,0,0,0,39,30,PIT,1,2,3,4,0
b,1,x,1,1,0,0,0,0,39,30,PIT,1,2,3,4,0
a,1,1,1,1,0,0,0,0,39,30,PIT,1,2,3,4,0
c,1,1,1,1,0,0,0,0,39,30,OXY,1,2,3,4,0
d,1,1,1,1,0,0,0,0,39,30,MISO,-1,2,3,4,0
e,1,1,1,1,2,0,0,0,39,30,MISO,1,2,3,4,0
f,1,1,1,1,0,0,0,0,39,30,MISO,1,2,3,4,0
";
        let load = load_str(body);
        assert_eq!(load.rows, 7);
        assert_eq!(load.records.len() + load.diagnostics.len(), load.rows);
        let rows: Vec<usize> = load.diagnostics.iter().map(|d| d.row).collect();
        assert_eq!(rows, vec![2, 3, 4, 5, 6]);
        assert!(load.diagnostics[0].reason.contains("malformed"));
        assert!(load.diagnostics[1].reason.contains("duplicate"));
        assert!(load.diagnostics[2].reason.contains("unknown treatment"));
        assert!(load.diagnostics[3].reason.contains("positive"));
        assert!(load.diagnostics[4].reason.contains("expected 0 or 1"));
        assert!(matches!(
            load.into_cohort(Provenance::Real),
            Err(CohortError::InvalidRows(d)) if d.len() == 5
        ));
    }

    #[test]
    fn header_mismatch_is_fatal() {
        let text = "id,dilation_pts\nx,1\n";
        match read_cohort(text.as_bytes(), &CohortSchema::default()) {
            Err(CohortError::Header { missing, .. }) => assert_eq!(missing.len(), 15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_renames_columns() {
        let text = HEADER.replace("bmi", "body_mass") + "\np1,1,2,0,,1,0,0,1,39.1,28.5,PIT,3.5,5,8.25,10,0\n";
        let schema = CohortSchema::default().with_header("bmi", "body_mass");
        let load = read_cohort(text.as_bytes(), &schema).unwrap();
        assert_eq!(load.records[0].bmi, 28.5);
    }

    #[test]
    fn boxcox_examples() {
        for l in [-2.0, -0.5, 0.0, 0.3, 1.0, 2.0] {
            assert_eq!(boxcox(1.0, l).unwrap(), 0.0);
        }
        assert!((boxcox(7.0, 1.0).unwrap() - 6.0).abs() < 1e-12);
        assert!((boxcox(3.0, 2.0).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(boxcox(0.0, 1.0), Err(CohortError::NonPositive(_))));
        assert!(boxcox(-1.0, 0.0).is_err());
    }

    #[test]
    fn boxcox_round_trip_over_grid() {
        for i in 0..=400 {
            let lambda = (i as f64 - 200.0) / 100.0;
            for j in 1..=200 {
                let y = j as f64 * 0.997;
                let t = boxcox(y, lambda).unwrap();
                let back = inv_boxcox(t, lambda).unwrap();
                assert!((back - y).abs() < 1e-9, "λ={lambda} y={y} back={back}");
            }
        }
    }

    #[test]
    fn boxcox_continuous_at_zero() {
        for i in 0..=1000 {
            let y = 0.1 + i as f64 * (100.0 - 0.1) / 1000.0;
            assert!((boxcox(y, 1e-8).unwrap() - y.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn inverse_outside_image_is_none() {
        assert_eq!(inv_boxcox(-3.0, 0.5), None);
        assert!(inv_boxcox(-1.9, 0.5).is_some());
    }

    /// Golden-section maximization of the profile likelihood, independent of
    /// the grid search.
    fn golden_lambda(values: &[f64]) -> f64 {
        let f = |l: f64| boxcox_profile_loglik(values, l).unwrap();
        let (mut a, mut b) = (-2.0f64, 2.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        (a + b) / 2.0
    }

    #[test]
    fn lognormal_sample_gives_lambda_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = Normal::<f64>::new(0.0, 1.0).unwrap();
        let v: Vec<f64> = (0..5000).map(|_| n.sample(&mut rng).exp()).collect();
        let l = fit_lambda(&v).unwrap();
        assert!(l.abs() < 0.25, "{l}");
        assert!((l - golden_lambda(&v)).abs() <= 0.0051);
    }

    #[test]
    fn shifted_normal_sample_gives_lambda_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = Normal::new(20.0, 2.0).unwrap();
        let v: Vec<f64> = (0..5000).map(|_| n.sample(&mut rng)).collect();
        let l = fit_lambda(&v).unwrap();
        assert!((l - 1.0).abs() < 0.5, "{l}");
        assert!((l - golden_lambda(&v)).abs() <= 0.0051);
    }

    #[test]
    fn fit_lambda_errors() {
        assert!(matches!(fit_lambda(&[1.0, 2.0, 3.0]), Err(CohortError::TooFewValues(3))));
        assert!(matches!(fit_lambda(&[1.0, 2.0, 3.0, 0.0, 5.0]), Err(CohortError::NonPositive(_))));
        assert!(matches!(fit_lambda(&[4.0; 8]), Err(CohortError::ZeroVariance)));
    }

    fn record(id: &str, t: Treatment, y: f64) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            dilation_pts: 1,
            effacement_pts: 2,
            station_pts: (y as u8) % 4,
            poscon_pts: if y > 5.0 { Some(2) } else { None },
            nullip: y > 3.0,
            epidural: true,
            fgr: false,
            gbs: false,
            ga_weeks: 38.0 + y / 10.0,
            bmi: 25.0 + y,
            treatment: t,
            rom_admit_h: Some(y),
            rom_agent_h: Some(y * 1.5 + 1.0),
            aug_fully_h: Some(y * y + 2.0),
            aug_deliv_h: if y > 2.0 { Some(y + 4.0) } else { None },
            cs: y > 8.0,
        }
    }

    fn small_cohort(t: Treatment) -> Cohort {
        let recs = (1..=12)
            .map(|i| record(&format!("p{i}"), if i % 3 == 0 { t } else { Treatment::Miso }, i as f64 * 0.9))
            .collect();
        Cohort::new(recs, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn preprocess_standardizes_outcomes() {
        let d = preprocess_outcomes(&small_cohort(Treatment::Pit)).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = d.rows.iter().filter_map(|r| r.outcomes[j]).collect();
            let (m, s) = mean_sd(&col);
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((s - 1.0).abs() < 1e-9, "sd {s}");
        }
    }

    #[test]
    fn preprocess_inverse_round_trip() {
        let c = small_cohort(Treatment::Pit);
        let d = preprocess_outcomes(&c).unwrap();
        for (r, row) in c.records().iter().zip(&d.rows) {
            for (j, o) in Outcome::CONTINUOUS.iter().enumerate() {
                if let (Some(y), Some(z)) = (r.duration(*o), row.outcomes[j]) {
                    let back = d.transforms[j].inverse(z).unwrap();
                    assert!((back - y).abs() < 1e-9 * y.max(1.0));
                }
            }
        }
    }

    #[test]
    fn all_miso_treatment_column_is_zero() {
        let d = preprocess_outcomes(&small_cohort(Treatment::Miso)).unwrap();
        assert!(d.rows.iter().all(|r| r.treatment == 0.0));
        let d = preprocess_outcomes(&small_cohort(Treatment::Pit)).unwrap();
        assert_eq!(d.rows.iter().filter(|r| r.treatment == 1.0).count(), 4);
    }

    #[test]
    fn preprocess_centers_bishop_points() {
        let d = preprocess_outcomes(&small_cohort(Treatment::Pit)).unwrap();
        let s: f64 = d.rows.iter().map(|r| r.station).sum();
        assert!(s.abs() < 1e-12);
        assert!(d.rows.iter().all(|r| r.dilation == 0.0));
        let bmi: Vec<f64> = d.rows.iter().map(|r| r.bmi).collect();
        let (m, sd) = mean_sd(&bmi);
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_outcome_is_error() {
        let mut recs = small_cohort(Treatment::Pit).into_records();
        for r in recs.iter_mut().skip(3) {
            r.rom_agent_h = None;
        }
        let c = Cohort::new(recs, Provenance::Real).unwrap();
        assert!(matches!(
            preprocess_outcomes(&c),
            Err(CohortError::SparseOutcome { outcome: "rom_agent", present: 3 })
        ));
    }

    #[test]
    fn cohort_invariants() {
        assert!(matches!(Cohort::new(vec![], Provenance::Real), Err(CohortError::Empty)));
        let r = record("a", Treatment::Pit, 2.0);
        assert!(matches!(
            Cohort::new(vec![r.clone(), r], Provenance::Real),
            Err(CohortError::DuplicateId(_))
        ));
    }
}
