//! Train/test splitting, prefix-conditioned forecasting, and the
//! subtypes-by-states error grid.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::predictive_bin_distributions;
use crate::mixture::{assign_subtype, fit_mixture, MixtureConfig, MixtureDiagnostics, MixtureModel};
use crate::trajectory::Trajectory;

/// `⌈fraction · n⌉`, immune to representation error such as `0.7 · 10`
/// evaluating to `7.000000000000001`.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_fraction(fraction: f64, what: &str) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{what} must lie strictly between 0 and 1, got {fraction}")))
    }
}

/// Seeded split of a cohort into train and test patients.
///
/// Patients are ordered by id, shuffled, and the first `⌈fraction · N⌉` go
/// to training. Both halves come back sorted by id.
pub fn split_cohort(
    cohort: &[Trajectory],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    check_fraction(train_fraction, "train fraction")?;
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.sort_by(|&a, &b| cohort[a].id().cmp(cohort[b].id()));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ceil_count(train_fraction, cohort.len());
    let collect = |idx: &[usize]| {
        let mut part: Vec<Trajectory> = idx.iter().map(|&i| cohort[i].clone()).collect();
        part.sort_by(|a, b| a.id().cmp(b.id()));
        part
    };
    Ok((collect(&order[..n_train]), collect(&order[n_train..])))
}

/// Keeps the first `⌈fraction · n⌉` timepoints; the rest are held out.
pub fn prefix_split(traj: &Trajectory, prefix_fraction: f64) -> (Trajectory, Option<Trajectory>) {
    traj.split_at(ceil_count(prefix_fraction, traj.len()))
}

/// Forecast score for one test patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientForecast {
    pub patient: String,
    /// Subtype chosen from the prefix.
    pub subtype: usize,
    /// Mean `-ln p(observed bin)` over scored held-out entries.
    pub cross_entropy: f64,
    pub scored: usize,
    /// Held-out (time, feature) entries skipped as missing.
    pub skipped: usize,
}

/// Assigns a subtype from the prefix and scores the predictive bin
/// distributions against the held-out observations.
pub fn forecast_patient(mixture: &MixtureModel, traj: &Trajectory, prefix_fraction: f64) -> Result<PatientForecast> {
    check_fraction(prefix_fraction, "prefix fraction")?;
    let (prefix, held_out) = prefix_split(traj, prefix_fraction);
    let Some(held_out) = held_out else {
        return Err(Error::NoHeldOutObservations(traj.id().to_string()));
    };
    if held_out.observed_count() == 0 {
        return Err(Error::NoHeldOutObservations(traj.id().to_string()));
    }
    let (subtype, _) = assign_subtype(mixture, &prefix)?;
    let predictive = predictive_bin_distributions(&mixture.subtypes[subtype], &prefix, held_out.times())?;
    let mut total = 0.0;
    let mut scored = 0;
    for (obs, dist) in held_out.observations().iter().zip(&predictive) {
        for (d, j) in obs.observed() {
            total -= dist[d][j].ln();
            scored += 1;
        }
    }
    let features = held_out.features();
    Ok(PatientForecast {
        patient: traj.id().to_string(),
        subtype,
        cross_entropy: total / scored as f64,
        scored,
        skipped: held_out.len() * features - scored,
    })
}

/// Per-patient mean cross-entropy of the forecast.
pub fn forecast_cross_entropy(mixture: &MixtureModel, traj: &Trajectory, prefix_fraction: f64) -> Result<f64> {
    Ok(forecast_patient(mixture, traj, prefix_fraction)?.cross_entropy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub subtypes: usize,
    pub states: usize,
    pub prefix_fraction: f64,
    pub seed: u64,
    pub patients: Vec<PatientForecast>,
    /// Mean over patients of the per-patient cross-entropy.
    pub mean: f64,
    /// Sample standard deviation over patients divided by `√n`.
    pub standard_error: f64,
    pub scored_observations: usize,
    pub skipped_observations: usize,
    /// Test patients with nothing left to score after the prefix.
    pub excluded: Vec<String>,
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Forecasts every test patient and aggregates the scores.
pub fn forecast_report(
    mixture: &MixtureModel,
    test: &[Trajectory],
    prefix_fraction: f64,
    seed: u64,
) -> Result<ForecastReport> {
    check_fraction(prefix_fraction, "prefix fraction")?;
    if test.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let outcomes: Vec<Result<PatientForecast>> =
        test.par_iter().map(|t| forecast_patient(mixture, t, prefix_fraction)).collect();
    let mut patients = Vec::new();
    let mut excluded = Vec::new();
    for (traj, outcome) in test.iter().zip(outcomes) {
        match outcome {
            Ok(p) => patients.push(p),
            Err(Error::NoHeldOutObservations(_)) => excluded.push(traj.id().to_string()),
            Err(e) => return Err(e),
        }
    }
    if patients.is_empty() {
        return Err(Error::NoHeldOutObservations(format!("any of the {} test patients", test.len())));
    }
    let scores: Vec<f64> = patients.iter().map(|p| p.cross_entropy).collect();
    let (mean, standard_error) = mean_and_standard_error(&scores);
    Ok(ForecastReport {
        subtypes: mixture.len(),
        states: mixture.states(),
        prefix_fraction,
        seed,
        scored_observations: patients.iter().map(|p| p.scored).sum(),
        skipped_observations: patients.iter().map(|p| p.skipped).sum(),
        patients,
        mean,
        standard_error,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub train_fraction: f64,
    pub prefix_fraction: f64,
    /// Seeds the split and every fit.
    pub seed: u64,
    /// Bins per feature of the full cohort.
    pub bins: Vec<usize>,
    /// Feature columns used for fitting and scoring; `None` keeps all.
    pub features: Option<Vec<usize>>,
    pub mixture: MixtureConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            train_fraction: 0.8,
            prefix_fraction: 0.7,
            seed: 0,
            bins: Vec::new(),
            features: None,
            mixture: MixtureConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub report: ForecastReport,
    pub diagnostics: MixtureDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub subtype_values: Vec<usize>,
    pub state_values: Vec<usize>,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
    /// Row-major over subtype values, then state values.
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, subtypes: usize, states: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.report.subtypes == subtypes && c.report.states == states)
    }

    /// Text table of `mean ± standard error`: one row per subtype count,
    /// one column per state count.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>4}", "M\\K");
        for k in &self.state_values {
            let _ = write!(out, " {:>17}", k);
        }
        out.push('\n');
        for &m in &self.subtype_values {
            let _ = write!(out, "{m:>4}");
            for &k in &self.state_values {
                match self.cell(m, k) {
                    Some(c) => {
                        let _ =
                            write!(out, " {:>17}", format!("{:.4} ± {:.4}", c.report.mean, c.report.standard_error));
                    }
                    None => {
                        let _ = write!(out, " {:>17}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Comma-separated cell records with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subtypes,states,mean,standard_error,patients,scored,skipped,excluded\n");
        for c in &self.cells {
            let r = &c.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.subtypes,
                r.states,
                r.mean,
                r.standard_error,
                r.patients.len(),
                r.scored_observations,
                r.skipped_observations,
                r.excluded.len()
            );
        }
        out
    }
}

/// Restricts trajectories and mixture settings to the configured feature
/// subset. The terminal-state constraint survives only if its feature does.
fn select_features(cohort: &[Trajectory], config: &GridConfig) -> Result<(Vec<Trajectory>, Vec<usize>, MixtureConfig)> {
    let Some(features) = &config.features else {
        return Ok((cohort.to_vec(), config.bins.clone(), config.mixture.clone()));
    };
    if features.is_empty() {
        return Err(Error::InvalidConfig("feature subset is empty".into()));
    }
    if let Some(&f) = features.iter().find(|&&f| f >= config.bins.len()) {
        return Err(Error::InvalidConfig(format!("feature index {f} out of range")));
    }
    let mut mixture = config.mixture.clone();
    mixture.em.terminal_feature =
        config.mixture.em.terminal_feature.and_then(|t| features.iter().position(|&f| f == t));
    Ok((
        cohort.iter().map(|t| t.select_features(features)).collect(),
        features.iter().map(|&f| config.bins[f]).collect(),
        mixture,
    ))
}

/// Fits a mixture for every (subtypes, states) pair on one shared training
/// split and scores forecasts on the shared test split.
pub fn grid_evaluate(
    cohort: &[Trajectory],
    subtype_values: &[usize],
    state_values: &[usize],
    config: &GridConfig,
) -> Result<GridReport> {
    if subtype_values.is_empty() || state_values.is_empty() {
        return Err(Error::InvalidConfig("grid needs at least one subtype count and one state count".into()));
    }
    check_fraction(config.prefix_fraction, "prefix fraction")?;
    let (cohort, bins, mut mixture) = select_features(cohort, config)?;
    mixture.em.seed = config.seed;
    let (train, test) = split_cohort(&cohort, config.train_fraction, config.seed)?;
    if test.is_empty() {
        return Err(Error::InvalidConfig("train fraction leaves no test patients".into()));
    }
    let pairs: Vec<(usize, usize)> =
        subtype_values.iter().flat_map(|&m| state_values.iter().map(move |&k| (m, k))).collect();
    let cells = pairs
        .par_iter()
        .map(|&(m, k)| {
            let (model, diagnostics) = fit_mixture(&train, m, k, &bins, &mixture)?;
            let report = forecast_report(&model, &test, config.prefix_fraction, config.seed)?;
            Ok(GridCell { report, diagnostics })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridReport {
        subtype_values: subtype_values.to_vec(),
        state_values: state_values.to_vec(),
        train_patients: train.iter().map(|t| t.id().to_string()).collect(),
        test_patients: test.iter().map(|t| t.id().to_string()).collect(),
        cells,
    })
}
