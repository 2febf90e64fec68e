//! Cohort files, run configuration, and model persistence.
//!
//! Cohorts are long-format CSV: one row per (patient, time) with a column
//! per feature, empty fields meaning missing. Models are versioned JSON
//! whose floats round-trip exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ctmc::{GeneratorMatrix, RateBounds, Structure};
use crate::emissions::{BinningScheme, EmissionTable, FeatureBinning, Observation};
use crate::error::{Error, Result};
use crate::evaluation::GridConfig;
use crate::inference::SubtypeModel;
use crate::learning::EmConfig;
use crate::mixture::{Assignment, MixtureConfig, MixtureModel};
use crate::synthesis::{CohortConfig, SyntheticCohort, TimeProcess};
use crate::trajectory::Trajectory;

pub const MODEL_FORMAT: &str = "cthmm-mixture";
pub const MODEL_VERSION: u32 = 1;

const PATIENT_COLUMN: &str = "patient_id";
const TIME_COLUMN: &str = "time";

/// Settings for simulated cohorts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub patients: usize,
    pub min_observations: usize,
    pub max_observations: usize,
    pub mean_gap: f64,
    pub missing_rate: f64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        let tp = TimeProcess::default();
        SimulationSettings {
            patients: 200,
            min_observations: tp.min_observations,
            max_observations: tp.max_observations,
            mean_gap: tp.mean_gap,
            missing_rate: 0.0,
        }
    }
}

/// Everything a CLI run needs besides file paths given on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Unit of the time column; rates are per this unit.
    pub time_unit: String,
    pub features: Vec<FeatureBinning>,
    /// 0/1 column appended as a two-bin feature after `features`.
    pub intervention_column: Option<String>,
    /// Features used by forecast and grid; `None` means every feature.
    pub evaluation_features: Option<Vec<String>>,
    pub subtypes: Vec<usize>,
    pub states: Vec<usize>,
    pub left_to_right: bool,
    pub terminal_intervention: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub smoothing: f64,
    pub min_rate: f64,
    pub max_rate: f64,
    pub restarts: usize,
    pub interval_quantum: Option<f64>,
    pub max_alternations: usize,
    pub reestimate_prior: bool,
    pub train_fraction: f64,
    pub prefix_fraction: f64,
    pub seed: u64,
    pub simulation: SimulationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        RunConfig {
            time_unit: "hours".into(),
            features: vec![
                FeatureBinning { name: "heart_rate".into(), lower: 40.0, upper: 150.0, bins: 5 },
                FeatureBinning { name: "systolic_bp".into(), lower: 40.0, upper: 200.0, bins: 5 },
            ],
            intervention_column: None,
            evaluation_features: None,
            subtypes: vec![1],
            states: vec![4],
            left_to_right: false,
            terminal_intervention: false,
            max_iterations: em.max_iterations,
            tolerance: em.tolerance,
            smoothing: em.smoothing,
            min_rate: em.rate_bounds.min,
            max_rate: em.rate_bounds.max,
            restarts: em.restarts,
            interval_quantum: em.interval_quantum,
            max_alternations: MixtureConfig::default().max_alternations,
            reestimate_prior: false,
            train_fraction: 0.8,
            prefix_fraction: 0.7,
            seed: 0,
            simulation: SimulationSettings::default(),
        }
    }
}

fn check_open_fraction(value: f64, what: &str) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{what} must lie strictly between 0 and 1, got {value}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1).unwrap_or(0);
            Error::Parse { line, message: e.message().to_string() }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_unit.trim().is_empty() {
            return Err(Error::InvalidConfig("time_unit must be declared".into()));
        }
        let scheme = self.scheme()?;
        if let Some(eval) = &self.evaluation_features {
            scheme.select(eval)?;
        }
        if self.terminal_intervention && self.intervention_column.is_none() {
            return Err(Error::InvalidConfig("terminal_intervention requires intervention_column".into()));
        }
        if self.subtypes.is_empty() || self.subtypes.contains(&0) {
            return Err(Error::InvalidConfig("subtypes must be a non-empty list of positive counts".into()));
        }
        if self.states.is_empty() || self.states.contains(&0) {
            return Err(Error::InvalidConfig("states must be a non-empty list of positive counts".into()));
        }
        check_open_fraction(self.train_fraction, "train_fraction")?;
        check_open_fraction(self.prefix_fraction, "prefix_fraction")?;
        self.mixture_config()?.em.validate()?;
        self.cohort_config().validate()
    }

    /// Configured features, with the intervention indicator last when set.
    pub fn scheme(&self) -> Result<BinningScheme> {
        let mut features = self.features.clone();
        if let Some(column) = &self.intervention_column {
            features.push(FeatureBinning::new(column.clone(), 0.0, 1.0, 2)?);
        }
        if features.is_empty() {
            return Err(Error::InvalidConfig("no features configured".into()));
        }
        if let Some(name) = features.iter().map(|f| &f.name).find(|n| *n == PATIENT_COLUMN || *n == TIME_COLUMN) {
            return Err(Error::InvalidConfig(format!("feature name {name} collides with a reserved column")));
        }
        BinningScheme::new(features)
    }

    pub fn structure(&self) -> Structure {
        if self.left_to_right {
            Structure::LeftToRight
        } else {
            Structure::Full
        }
    }

    /// Index of the intervention feature in [`scheme`](Self::scheme).
    pub fn intervention_index(&self) -> Option<usize> {
        self.intervention_column.as_ref().map(|_| self.features.len())
    }

    pub fn mixture_config(&self) -> Result<MixtureConfig> {
        let em = EmConfig {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            smoothing: self.smoothing,
            rate_bounds: RateBounds { min: self.min_rate, max: self.max_rate },
            structure: self.structure(),
            seed: self.seed,
            restarts: self.restarts,
            interval_quantum: self.interval_quantum,
            terminal_feature: if self.terminal_intervention { self.intervention_index() } else { None },
        };
        em.validate()?;
        Ok(MixtureConfig { em, max_alternations: self.max_alternations, reestimate_prior: self.reestimate_prior })
    }

    /// Indices of the evaluation features within the full scheme.
    pub fn evaluation_indices(&self) -> Result<Option<Vec<usize>>> {
        let Some(names) = &self.evaluation_features else {
            return Ok(None);
        };
        let scheme = self.scheme()?;
        names
            .iter()
            .map(|n| scheme.index_of(n).ok_or_else(|| Error::UnknownFeature(n.clone())))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn grid_config(&self) -> Result<GridConfig> {
        Ok(GridConfig {
            train_fraction: self.train_fraction,
            prefix_fraction: self.prefix_fraction,
            seed: self.seed,
            bins: self.scheme()?.bins_per_feature(),
            features: self.evaluation_indices()?,
            mixture: self.mixture_config()?,
        })
    }

    pub fn cohort_config(&self) -> CohortConfig {
        let s = &self.simulation;
        CohortConfig {
            patients: s.patients,
            time_process: TimeProcess {
                min_observations: s.min_observations,
                max_observations: s.max_observations,
                mean_gap: s.mean_gap,
            },
            missing_rate: s.missing_rate,
            seed: self.seed,
        }
    }
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => parse_error(line, format!("{kind:?}")),
    }
}

/// Reads a long-format cohort and discretizes it with the configured scheme.
///
/// Patients appear in order of first appearance; each patient's rows are
/// sorted by time. Out-of-range values become missing, and rows with every
/// feature missing are kept for their timestamps.
pub fn read_cohort(reader: impl Read, config: &RunConfig) -> Result<Vec<Trajectory>> {
    let scheme = config.scheme()?;
    let intervention = config.intervention_index();
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = match csv.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(csv_error(e)),
    };
    if headers.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let patient_col = column(PATIENT_COLUMN)?;
    let time_col = column(TIME_COLUMN)?;
    let feature_cols = scheme.features().iter().map(|f| column(&f.name)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, u64, Observation)>> = HashMap::new();
    for record in csv.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let patient = field(patient_col);
        if patient.is_empty() {
            return Err(parse_error(line, "empty patient_id"));
        }
        let time: f64 = field(time_col)
            .parse()
            .map_err(|_| parse_error(line, format!("time {:?} is not a number", field(time_col))))?;
        if !time.is_finite() {
            return Err(parse_error(line, format!("time {time} is not finite")));
        }
        let mut bins = Vec::with_capacity(feature_cols.len());
        for (d, (&col, binning)) in feature_cols.iter().zip(scheme.features()).enumerate() {
            let raw = field(col);
            if raw.is_empty() {
                bins.push(None);
                continue;
            }
            let value: f64 = raw
                .parse()
                .map_err(|_| parse_error(line, format!("{} value {raw:?} is not a number", binning.name)))?;
            if Some(d) == intervention && value != 0.0 && value != 1.0 {
                return Err(parse_error(line, format!("{} must be 0 or 1, got {raw}", binning.name)));
            }
            bins.push(binning.discretize(value));
        }
        if !rows.contains_key(patient) {
            order.push(patient.to_string());
        }
        rows.entry(patient.to_string()).or_default().push((time, line, Observation(bins)));
    }
    if order.is_empty() {
        return Err(Error::EmptyCohort);
    }
    order
        .into_iter()
        .map(|id| {
            let mut records = rows.remove(&id).expect("patient recorded");
            records.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some(w) = records.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::DuplicateTimestamp { patient: id, time: w[0].0 });
            }
            let (times, observations) = records.into_iter().map(|(t, _, o)| (t, o)).unzip();
            Trajectory::new(id, times, observations)
        })
        .collect()
}

pub fn load_cohort(path: impl AsRef<Path>, config: &RunConfig) -> Result<Vec<Trajectory>> {
    read_cohort(fs::File::open(path)?, config)
}

/// Writes a cohort in long format using bin centers (0/1 for the
/// intervention indicator), so reading it back yields the same bins.
pub fn write_cohort(writer: impl Write, cohort: &[Trajectory], config: &RunConfig) -> Result<()> {
    let scheme = config.scheme()?;
    let intervention = config.intervention_index();
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec![PATIENT_COLUMN.to_string(), TIME_COLUMN.to_string()];
    header.extend(scheme.features().iter().map(|f| f.name.clone()));
    csv.write_record(&header).map_err(csv_error)?;
    for traj in cohort {
        if traj.features() != scheme.len() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory {} has {} features, scheme has {}",
                traj.id(),
                traj.features(),
                scheme.len()
            )));
        }
        for (t, obs) in traj.times().iter().zip(traj.observations()) {
            let mut record = vec![traj.id().to_string(), t.to_string()];
            for (d, binning) in scheme.features().iter().enumerate() {
                record.push(match obs.get(d) {
                    None => String::new(),
                    Some(j) if Some(d) == intervention => j.to_string(),
                    Some(j) => binning.center(j).to_string(),
                });
            }
            csv.write_record(&record).map_err(csv_error)?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &[Trajectory], config: &RunConfig) -> Result<()> {
    write_cohort(fs::File::create(path)?, cohort, config)
}

/// Ground truth of a synthetic cohort: one row per observation time with the
/// patient's subtype and hidden state.
pub fn write_truth(writer: impl Write, cohort: &SyntheticCohort) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([PATIENT_COLUMN, TIME_COLUMN, "subtype", "state"]).map_err(csv_error)?;
    for ((traj, &label), states) in cohort.trajectories.iter().zip(&cohort.labels).zip(&cohort.hidden_states) {
        for (t, s) in traj.times().iter().zip(states) {
            csv.write_record([traj.id().to_string(), t.to_string(), label.to_string(), s.to_string()])
                .map_err(csv_error)?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// True subtype per patient from a ground-truth file.
pub fn read_truth_labels(reader: impl Read) -> Result<BTreeMap<String, usize>> {
    let mut csv = csv::Reader::from_reader(reader);
    let headers = csv.headers().map_err(csv_error)?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let (p, s) = (column(PATIENT_COLUMN)?, column("subtype")?);
    let mut labels = BTreeMap::new();
    for record in csv.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let label: usize = record
            .get(s)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| parse_error(line, "subtype is not a non-negative integer"))?;
        let patient = record.get(p).unwrap_or("").trim().to_string();
        if let Some(previous) = labels.insert(patient.clone(), label) {
            if previous != label {
                return Err(parse_error(line, format!("patient {patient} has conflicting subtypes")));
            }
        }
    }
    Ok(labels)
}

/// Descriptive data stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub time_unit: String,
    pub scheme: Option<BinningScheme>,
}

impl Default for ModelMetadata {
    fn default() -> Self {
        ModelMetadata { time_unit: "hours".into(), scheme: None }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubtypeRecord {
    initial: Vec<f64>,
    rates: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
    emissions: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    time_unit: String,
    scheme: Option<BinningScheme>,
    prior: Vec<f64>,
    subtypes: Vec<SubtypeRecord>,
    assignments: Vec<Assignment>,
    /// `None` stands for a non-finite objective.
    objective_trace: Vec<Option<f64>>,
}

fn matrix_rows<T: Copy + nalgebra::Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

fn matrix_from_rows<T: Copy + nalgebra::Scalar>(rows: &[Vec<T>], what: &str) -> Result<DMatrix<T>> {
    let k = rows.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvariantViolation(format!("{what} is not a square matrix")));
    }
    Ok(DMatrix::from_fn(k, k, |r, c| rows[r][c]))
}

/// Any validation failure in a stored model is reported as a violated
/// invariant of the file.
fn as_invariant(e: Error) -> Error {
    match e {
        Error::InvariantViolation(_) => e,
        other => Error::InvariantViolation(other.to_string()),
    }
}

pub fn model_to_string(mixture: &MixtureModel, metadata: &ModelMetadata) -> Result<String> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        time_unit: metadata.time_unit.clone(),
        scheme: metadata.scheme.clone(),
        prior: mixture.prior.clone(),
        subtypes: mixture
            .subtypes
            .iter()
            .map(|s| SubtypeRecord {
                initial: s.initial.clone(),
                rates: matrix_rows(s.generator.rates()),
                mask: matrix_rows(s.generator.mask()),
                emissions: s.emissions.rows().to_vec(),
            })
            .collect(),
        assignments: mixture.assignments.clone(),
        objective_trace: mixture.objective_trace.iter().map(|&v| v.is_finite().then_some(v)).collect(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn model_from_str(text: &str) -> Result<(MixtureModel, ModelMetadata)> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::InvariantViolation(format!("malformed model file: {e}")))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(MODEL_FORMAT) => {}
        other => {
            return Err(Error::InvariantViolation(format!("not a model file (format {other:?})")));
        }
    }
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::InvariantViolation("model file has no version".into()))?;
    if found != MODEL_VERSION as u64 {
        return Err(Error::VersionMismatch { found: found.min(u32::MAX as u64) as u32, expected: MODEL_VERSION });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::InvariantViolation(e.to_string()))?;
    let subtypes = file
        .subtypes
        .into_iter()
        .enumerate()
        .map(|(m, s)| {
            let generator =
                GeneratorMatrix::from_parts(matrix_from_rows(&s.rates, "rates")?, matrix_from_rows(&s.mask, "mask")?)?;
            SubtypeModel::new(s.initial, generator, EmissionTable::new(s.emissions)?)
                .map_err(|e| Error::InvariantViolation(format!("subtype {m}: {e}")))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(as_invariant)?;
    let mixture = MixtureModel {
        subtypes,
        prior: file.prior,
        assignments: file.assignments,
        objective_trace: file.objective_trace.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect(),
    };
    mixture.validate().map_err(as_invariant)?;
    if let Some(scheme) = &file.scheme {
        if scheme.bins_per_feature() != mixture.bins() {
            return Err(Error::InvariantViolation("stored binning disagrees with the emission tables".into()));
        }
        for f in scheme.features() {
            f.validate().map_err(as_invariant)?;
        }
    }
    Ok((mixture, ModelMetadata { time_unit: file.time_unit, scheme: file.scheme }))
}

pub fn save_model(mixture: &MixtureModel, metadata: &ModelMetadata, path: impl AsRef<Path>) -> Result<()> {
    mixture.validate()?;
    fs::write(path, model_to_string(mixture, metadata)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MixtureModel, ModelMetadata)> {
    model_from_str(&fs::read_to_string(path)?)
}
