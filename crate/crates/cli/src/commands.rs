use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use prom_core::cohort::{load_cohort, save_cohort, Cohort, CohortSchema, DesignTable, OutcomeTransform, Provenance};
use prom_core::diagnostics::{fit_report, naive_comparison, posterior_predictive, summarize_param, DiagnosticsError};
use prom_core::model::{build_model, Model, ModelSpec, Parameterization};
use prom_core::ordinal::CATEGORIES;
use prom_core::sampler::{sample, NutsConfig, PosteriorDraws, SamplerError};
use prom_core::simulate::{default_truth, save_hidden, simulate_cohort, SimError, SimTruth};

use crate::manifest::{sidecar, RunManifest, SamplerSummary};
use crate::Failure;

fn input(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

fn sampler_failure(e: SamplerError) -> Failure {
    match e {
        SamplerError::Init { .. } | SamplerError::AllDivergent { .. } | SamplerError::StepSize { .. } => {
            Failure::Numeric(e.into())
        }
        other => input(other),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(input)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(input)?;
    writeln!(w).and_then(|_| w.flush()).map_err(input)
}

fn load(path: &Path) -> Result<Cohort, Failure> {
    load_cohort(path, &CohortSchema::default())
        .and_then(|l| l.into_cohort(Provenance::Real))
        .with_context(|| format!("invalid cohort {}", path.display()))
        .map_err(input)
}

fn read_posterior(path: &Path) -> Result<PosteriorDraws, Failure> {
    let file = File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(input)?;
    let draws = PosteriorDraws::read_ndjson(BufReader::new(file))
        .with_context(|| format!("malformed posterior {}", path.display()))
        .map_err(input)?;
    if draws.total_draws() == 0 {
        return Err(input(anyhow!("posterior {} has no draws", path.display())));
    }
    Ok(draws)
}

fn check_mass(mass: f64) -> Result<(), Failure> {
    if mass > 0.0 && mass < 1.0 {
        Ok(())
    } else {
        Err(input(anyhow!("--hdr must lie in (0, 1), got {mass}")))
    }
}

fn finish(mut manifest: RunManifest, path: &Path, started: Instant) -> Result<(), Failure> {
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.outputs.push(path.to_path_buf());
    manifest.write(path).map_err(input)
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Number of patients.
    #[arg(long, default_value_t = 82)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// `default` or a path to a truth JSON file.
    #[arg(long, default_value = "default")]
    pub truth: String,
    /// Cohort CSV; the truth JSON, hidden-truth CSV and manifest are written
    /// alongside it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("simulate", args).map_err(input)?;
    let truth = if args.truth == "default" {
        default_truth()
    } else {
        let text = std::fs::read_to_string(&args.truth)
            .with_context(|| format!("cannot read truth file {}", args.truth))
            .map_err(input)?;
        manifest.inputs.push(PathBuf::from(&args.truth));
        SimTruth::from_json(&text)
            .with_context(|| format!("truth file {}", args.truth))
            .map_err(input)?
    };
    let out = simulate_cohort(&truth, args.n, args.seed).map_err(|e| match e {
        SimError::TooManyRedraws { .. } => Failure::Numeric(e.into()),
        other => input(other),
    })?;
    save_cohort(&out.cohort, &args.out).map_err(input)?;
    let truth_path = sidecar(&args.out, "truth.json");
    write_json(&truth_path, &truth)?;
    let hidden_path = sidecar(&args.out, "hidden.csv");
    save_hidden(&out.hidden, &hidden_path).map_err(input)?;

    manifest.seeds.push(args.seed);
    manifest.outputs = vec![args.out.clone(), truth_path, hidden_path];
    manifest.details = serde_json::json!({ "redraws": out.redraws });
    finish(manifest, &sidecar(&args.out, "manifest.json"), started)
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamArg {
    NonCentered,
    Centered,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::NonCentered => Parameterization::NonCentered,
            ParamArg::Centered => Parameterization::Centered,
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArgs {
    /// Cohort CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 600)]
    pub warmup: usize,
    #[arg(long, default_value_t = 900)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.8)]
    pub target_accept: f64,
    #[arg(long, default_value_t = 10)]
    pub max_depth: usize,
    /// HDR mass used in the diagnostics report.
    #[arg(long, default_value_t = 0.95)]
    pub hdr: f64,
    #[arg(long, value_enum, default_value_t = ParamArg::NonCentered)]
    pub parameterization: ParamArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// The preprocessing constants needed to map model-scale values back to
/// hours and raw covariates.
#[derive(Serialize)]
struct TransformsFile<'a> {
    outcomes: &'a [OutcomeTransform],
    poscon_mean: f64,
    dilation_mean: f64,
    effacement_mean: f64,
    station_mean: f64,
    bmi_mean: f64,
    bmi_sd: f64,
    ga_mean: f64,
    ga_sd: f64,
}

impl<'a> From<&'a DesignTable> for TransformsFile<'a> {
    fn from(t: &'a DesignTable) -> Self {
        Self {
            outcomes: &t.transforms,
            poscon_mean: t.poscon_mean,
            dilation_mean: t.dilation_mean,
            effacement_mean: t.effacement_mean,
            station_mean: t.station_mean,
            bmi_mean: t.bmi_mean,
            bmi_sd: t.bmi_sd,
            ga_mean: t.ga_mean,
            ga_sd: t.ga_sd,
        }
    }
}

/// Posterior probability of each Position + Consistency category per
/// patient, averaged over draws.
fn write_imputation(path: &Path, model: &Model, draws: &PosteriorDraws) -> Result<(), Failure> {
    let data = model.data();
    let mut probs = vec![[0.0; CATEGORIES]; data.n()];
    for d in draws.iter_draws() {
        let p = model.space().params_from_constrained(d).map_err(input)?;
        for (i, acc) in probs.iter_mut().enumerate() {
            let q = model.poscon_posterior(i, &p).map_err(input)?;
            for (a, v) in acc.iter_mut().zip(q) {
                *a += v;
            }
        }
    }
    let total = draws.total_draws() as f64;
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["id".to_string(), "observed".to_string()];
    header.extend((0..CATEGORIES).map(|k| format!("p{k}")));
    header.push("expected".into());
    w.write_record(&header).map_err(input)?;
    for (i, acc) in probs.iter().enumerate() {
        let q: Vec<f64> = acc.iter().map(|a| a / total).collect();
        let expected: f64 = q.iter().enumerate().map(|(k, v)| k as f64 * v).sum();
        let mut row = vec![
            data.ids[i].clone(),
            data.poscon[i].map(|k| k.to_string()).unwrap_or_default(),
        ];
        row.extend(q.iter().map(f64::to_string));
        row.push(expected.to_string());
        w.write_record(&row).map_err(input)?;
    }
    w.flush().map_err(input)
}

pub fn fit(args: &FitArgs) -> Result<(), Failure> {
    let started = Instant::now();
    check_mass(args.hdr)?;
    let cfg = NutsConfig {
        chains: args.chains,
        warmup: args.warmup,
        samples: args.samples,
        target_accept: args.target_accept,
        max_tree_depth: args.max_depth,
        seed: args.seed,
    };
    cfg.validate().map_err(input)?;
    let cohort = load(&args.data)?;
    let (model, table) = build_model(&cohort, ModelSpec::prom(), args.parameterization.into()).map_err(input)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))
        .map_err(input)?;

    let draws = sample(&model, &cfg).map_err(sampler_failure)?;
    let report = fit_report(&draws, args.hdr, args.max_depth).map_err(|e| Failure::Numeric(e.into()))?;
    if report.divergences > 0 {
        eprintln!(
            "warning: {} divergent transitions out of {}",
            report.divergences,
            draws.total_draws()
        );
    }

    let dir = &args.out_dir;
    let out = |name: &str| dir.join(name);
    let mut w = create(&out("posterior.ndjson"))?;
    draws.write_ndjson(&mut w).map_err(input)?;
    w.flush().map_err(input)?;
    draws.write_csv(create(&out("posterior.csv"))?).map_err(input)?;
    write_json(&out("model_spec.json"), model.space().spec())?;
    write_json(&out("transforms.json"), &TransformsFile::from(&table))?;
    write_json(&out("report.json"), &report)?;
    write_imputation(&out("imputation.csv"), &model, &draws)?;

    let mut manifest = RunManifest::new("fit", args).map_err(input)?;
    manifest.seeds.push(args.seed);
    manifest.inputs.push(args.data.clone());
    manifest.outputs = [
        "posterior.ndjson",
        "posterior.csv",
        "model_spec.json",
        "transforms.json",
        "report.json",
        "imputation.csv",
    ]
    .iter()
    .map(|n| out(n))
    .collect();
    let total = draws.total_draws();
    manifest.sampler = Some(SamplerSummary {
        divergences: report.divergences,
        total_draws: total,
        divergence_rate: report.divergences as f64 / total as f64,
        max_depth_hits: report.max_depth_hits,
        max_rhat: report.max_rhat,
        min_ess_bulk: report.min_ess_bulk,
    });
    manifest.details = serde_json::json!({
        "step_sizes": draws.chains.iter().map(|c| c.step_size).collect::<Vec<_>>(),
        "warmup_divergences": draws.chains.iter().map(|c| c.warmup_divergences).collect::<Vec<_>>(),
    });
    finish(manifest, &out("manifest.json"), started)
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizeArgs {
    /// Posterior NDJSON written by `fit`.
    #[arg(long)]
    pub posterior: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub hdr: f64,
    /// Forest CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ForestRow {
    parameter: String,
    family: String,
    outcome: String,
    mean: f64,
    sd: f64,
    hdr_lo: f64,
    hdr_hi: f64,
    significant: bool,
}

pub fn summarize(args: &SummarizeArgs) -> Result<(), Failure> {
    let started = Instant::now();
    check_mass(args.hdr)?;
    let draws = read_posterior(&args.posterior)?;
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    for c in ModelSpec::prom().coefficients() {
        let name = c.name();
        let j = draws
            .param_index(&name)
            .ok_or_else(|| input(anyhow!("posterior has no column {name}")))?;
        let s = summarize_param(&name, &draws.param_chains(j), args.hdr).map_err(input)?;
        w.serialize(ForestRow {
            parameter: name,
            family: c.family.name().to_string(),
            outcome: c.outcome.name().to_string(),
            mean: s.mean,
            sd: s.sd,
            hdr_lo: s.hdr_lo,
            hdr_hi: s.hdr_hi,
            significant: s.significant,
        })
        .map_err(input)?;
    }
    w.flush().map_err(input)?;

    let mut manifest = RunManifest::new("summarize", args).map_err(input)?;
    manifest.inputs.push(args.posterior.clone());
    manifest.outputs.push(args.out.clone());
    finish(manifest, &sidecar(&args.out, "manifest.json"), started)
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcArgs {
    #[arg(long)]
    pub posterior: PathBuf,
    /// The cohort the posterior was fitted to.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of replicated datasets (evenly thinned draws).
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
    /// Long-format histogram CSV; a JSON of per-channel statistics is
    /// written alongside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PpcStats {
    channel: String,
    observed_mean: f64,
    observed_sd: f64,
    covers_95: bool,
    clamped: usize,
    replicate_means: Vec<f64>,
    replicate_sds: Vec<f64>,
}

pub fn ppc(args: &PpcArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let draws = read_posterior(&args.posterior)?;
    let cohort = load(&args.data)?;
    let (model, table) = build_model(&cohort, ModelSpec::prom(), Parameterization::NonCentered).map_err(input)?;
    if draws.names != model.space().constrained_names() {
        return Err(input(anyhow!(
            "posterior columns do not match the model's parameters"
        )));
    }
    let result = posterior_predictive(&draws, &model, &table, args.draws, args.seed).map_err(|e| match e {
        DiagnosticsError::TooManyReplicates { .. } | DiagnosticsError::Model(_) => input(e),
        other => Failure::Numeric(other.into()),
    })?;

    let mut w = csv::Writer::from_writer(create(&args.out)?);
    w.write_record(["channel", "replicate", "bin_lo", "bin_hi", "count"]).map_err(input)?;
    for ch in &result.channels {
        let groups = std::iter::once(("observed".to_string(), &ch.observed))
            .chain(ch.replicates.iter().enumerate().map(|(r, c)| (r.to_string(), c)));
        for (label, counts) in groups {
            for (b, count) in counts.iter().enumerate() {
                w.write_record([
                    ch.name.clone(),
                    label.clone(),
                    ch.edges[b].to_string(),
                    ch.edges[b + 1].to_string(),
                    count.to_string(),
                ])
                .map_err(input)?;
            }
        }
    }
    w.flush().map_err(input)?;
    let stats: Vec<PpcStats> = result
        .channels
        .iter()
        .map(|ch| PpcStats {
            channel: ch.name.clone(),
            observed_mean: ch.observed_mean,
            observed_sd: ch.observed_sd,
            covers_95: ch.covers(0.95),
            clamped: ch.clamped,
            replicate_means: ch.replicate_means.clone(),
            replicate_sds: ch.replicate_sds.clone(),
        })
        .collect();
    let stats_path = sidecar(&args.out, "stats.json");
    write_json(&stats_path, &stats)?;

    let mut manifest = RunManifest::new("ppc", args).map_err(input)?;
    manifest.seeds.push(args.seed);
    manifest.inputs = vec![args.posterior.clone(), args.data.clone()];
    manifest.outputs = vec![args.out.clone(), stats_path];
    manifest.details = serde_json::json!({ "draw_indices": result.draw_indices });
    finish(manifest, &sidecar(&args.out, "manifest.json"), started)
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Result JSON.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn baseline(args: &BaselineArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let cohort = load(&args.data)?;
    let result = naive_comparison(&cohort)
        .context("both treatment arms need patients")
        .map_err(input)?;
    write_json(&args.out, &result)?;
    let mut manifest = RunManifest::new("baseline", args).map_err(input)?;
    manifest.inputs.push(args.data.clone());
    manifest.outputs.push(args.out.clone());
    finish(manifest, &sidecar(&args.out, "manifest.json"), started)
}
