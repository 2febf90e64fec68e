//! Seeded synthetic cohorts with known subtypes and hidden states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;

use crate::ctmc::{GeneratorMatrix, RateBounds, Structure};
use crate::emissions::{EmissionTable, Observation};
use crate::error::{Error, Result};
use crate::inference::SubtypeModel;
use crate::mixture::MixtureModel;
use crate::trajectory::Trajectory;

/// Piecewise-constant CTMC path on `[0, horizon]`.
///
/// `states[i]` holds from `jump_times[i]` until the next jump time (or the
/// horizon); `jump_times[0]` is always 0.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenPath {
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl HiddenPath {
    pub fn state_at(&self, t: f64) -> usize {
        let i = self.jump_times.partition_point(|&s| s <= t);
        self.states[i.saturating_sub(1)]
    }

    pub fn initial_state(&self) -> usize {
        self.states[0]
    }

    pub fn final_state(&self) -> usize {
        self.states[self.states.len() - 1]
    }

    /// Number of `from -> to` jumps along the path.
    pub fn transition_count(&self, from: usize, to: usize) -> usize {
        self.states.windows(2).filter(|w| w[0] == from && w[1] == to).count()
    }

    /// Total time spent in `state`.
    pub fn sojourn(&self, state: usize) -> f64 {
        (0..self.states.len())
            .filter(|&i| self.states[i] == state)
            .map(|i| {
                let end = self.jump_times.get(i + 1).copied().unwrap_or(self.horizon);
                end - self.jump_times[i]
            })
            .sum()
    }

    /// Completed holding times in `state` (excluding the one cut by the
    /// horizon).
    pub fn completed_holding_times(&self, state: usize) -> Vec<f64> {
        (0..self.states.len().saturating_sub(1))
            .filter(|&i| self.states[i] == state)
            .map(|i| self.jump_times[i + 1] - self.jump_times[i])
            .collect()
    }
}

/// Index drawn from unnormalized non-negative weights.
pub(crate) fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Round-off fallback: last index with positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Gillespie simulation from a fixed start state.
pub fn sample_path_from(generator: &GeneratorMatrix, start: usize, horizon: f64, rng: &mut impl Rng) -> HiddenPath {
    let k = generator.size();
    let mut jump_times = vec![0.0];
    let mut states = vec![start];
    let mut state = start;
    let mut t = 0.0;
    let mut weights = vec![0.0; k];
    loop {
        let exit = generator.exit_rate(state);
        if exit <= 0.0 {
            break;
        }
        let hold: f64 = Exp::new(exit).expect("positive exit rate").sample(rng);
        t += hold;
        if t >= horizon {
            break;
        }
        for (b, w) in weights.iter_mut().enumerate() {
            *w = if b == state { 0.0 } else { generator.rate(state, b) };
        }
        state = sample_index(&weights, rng);
        jump_times.push(t);
        states.push(state);
    }
    HiddenPath { jump_times, states, horizon }
}

/// Gillespie simulation with the start state drawn from `initial`.
pub fn sample_hidden_path(
    generator: &GeneratorMatrix,
    initial: &[f64],
    horizon: f64,
    rng: &mut impl Rng,
) -> HiddenPath {
    let start = sample_index(initial, rng);
    sample_path_from(generator, start, horizon, rng)
}

/// Samples hidden states and observations at the given times.
///
/// The hidden chain starts at the first observation time. Each feature is
/// drawn from the state's emission row and then hidden independently with
/// probability `missing_rate`.
pub fn sample_trajectory(
    model: &SubtypeModel,
    id: impl Into<String>,
    obs_times: &[f64],
    missing_rate: f64,
    rng: &mut impl Rng,
) -> Result<(Trajectory, Vec<usize>)> {
    let id = id.into();
    if obs_times.is_empty() {
        return Err(Error::InvalidTrajectory { id, reason: "no observation times".into() });
    }
    let start = obs_times[0];
    let horizon = obs_times[obs_times.len() - 1] - start;
    let path = sample_hidden_path(&model.generator, &model.initial, horizon, rng);
    let mut states = Vec::with_capacity(obs_times.len());
    let mut observations = Vec::with_capacity(obs_times.len());
    for &t in obs_times {
        let s = path.state_at(t - start);
        states.push(s);
        let bins = (0..model.features())
            .map(|d| {
                let j = sample_index(model.emissions.row(s, d), rng);
                let hidden = rng.random::<f64>() < missing_rate;
                (!hidden).then_some(j)
            })
            .collect();
        observations.push(Observation(bins));
    }
    Ok((Trajectory::new(id, obs_times.to_vec(), observations)?, states))
}

/// How many observations a synthetic patient gets and how far apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeProcess {
    pub min_observations: usize,
    pub max_observations: usize,
    /// Gaps are exponential with this mean.
    pub mean_gap: f64,
}

impl Default for TimeProcess {
    fn default() -> Self {
        TimeProcess { min_observations: 5, max_observations: 40, mean_gap: 1.0 }
    }
}

impl TimeProcess {
    pub fn sample_times(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = rng.random_range(self.min_observations..=self.max_observations);
        let gap = Exp::new(1.0 / self.mean_gap).expect("positive mean gap");
        let mut t = 0.0;
        let mut times = Vec::with_capacity(n);
        times.push(t);
        while times.len() < n {
            let g: f64 = gap.sample(rng);
            // A zero draw would repeat a timestamp.
            if g > 0.0 {
                t += g;
                times.push(t);
            }
        }
        times
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub patients: usize,
    pub time_process: TimeProcess,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig { patients: 200, time_process: TimeProcess::default(), missing_rate: 0.0, seed: 0 }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::InvalidConfig("at least one patient is required".into()));
        }
        let tp = &self.time_process;
        if tp.min_observations == 0 || tp.min_observations > tp.max_observations {
            return Err(Error::InvalidConfig("observation count range is empty".into()));
        }
        if !(tp.mean_gap > 0.0 && tp.mean_gap.is_finite()) {
            return Err(Error::InvalidConfig("mean_gap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidConfig("missing_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Trajectories together with the ground truth that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub trajectories: Vec<Trajectory>,
    pub labels: Vec<usize>,
    /// Hidden state at each observation time, per patient.
    pub hidden_states: Vec<Vec<usize>>,
    pub config: CohortConfig,
}

/// Per-patient generator: the patient index selects an independent stream.
pub fn patient_rng(seed: u64, patient: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient as u64);
    rng
}

/// Samples a labeled cohort from a mixture's subtypes and prior.
pub fn sample_mixture_cohort(mixture: &MixtureModel, config: &CohortConfig) -> Result<SyntheticCohort> {
    sample_cohort(&mixture.subtypes, &mixture.prior, config)
}

/// Samples a labeled cohort from subtype models and a subtype prior.
pub fn sample_cohort(subtypes: &[SubtypeModel], prior: &[f64], config: &CohortConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    if subtypes.is_empty() || subtypes.len() != prior.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} subtype models but a prior of length {}",
            subtypes.len(),
            prior.len()
        )));
    }
    let width = config.patients.to_string().len();
    let mut cohort = SyntheticCohort {
        trajectories: Vec::with_capacity(config.patients),
        labels: Vec::with_capacity(config.patients),
        hidden_states: Vec::with_capacity(config.patients),
        config: config.clone(),
    };
    for n in 0..config.patients {
        let mut rng = patient_rng(config.seed, n);
        let label = sample_index(prior, &mut rng);
        let times = config.time_process.sample_times(&mut rng);
        let id = format!("p{n:0width$}");
        let (traj, states) = sample_trajectory(&subtypes[label], id, &times, config.missing_rate, &mut rng)?;
        cohort.trajectories.push(traj);
        cohort.labels.push(label);
        cohort.hidden_states.push(states);
    }
    Ok(cohort)
}

/// A deterministic left-to-right mixture for demos and simulation.
///
/// Subtype `m`, state `k` puts most emission mass of feature `d` on bin
/// `(k + m·(d + 1)) mod J`; forward rates are drawn from `[0.1, 0.5]`.
pub fn demo_mixture(subtypes: usize, states: usize, bins: &[usize], seed: u64) -> Result<MixtureModel> {
    if subtypes == 0 || states == 0 || bins.is_empty() || bins.contains(&0) {
        return Err(Error::InvalidConfig("demo mixture needs positive subtype, state and bin counts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = Structure::LeftToRight.mask(states);
    let mut models = Vec::with_capacity(subtypes);
    for m in 0..subtypes {
        let mut raw = DMatrix::zeros(states, states);
        for a in 0..states.saturating_sub(1) {
            raw[(a, a + 1)] = rng.random_range(0.1..0.5);
        }
        let generator = GeneratorMatrix::new(&raw, &mask, RateBounds::default())?;
        let mut initial = vec![0.3 / states as f64; states];
        initial[0] += 0.7;
        let emissions = (0..states)
            .map(|k| {
                bins.iter()
                    .enumerate()
                    .map(|(d, &j)| {
                        let peak = (k + m * (d + 1)) % j;
                        let rest = if j > 1 { 0.25 / (j - 1) as f64 } else { 0.0 };
                        (0..j)
                            .map(|b| {
                                if b == peak {
                                    if j > 1 {
                                        0.75
                                    } else {
                                        1.0
                                    }
                                } else {
                                    rest
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        models.push(SubtypeModel::new(initial, generator, EmissionTable::new(emissions)?)?);
    }
    MixtureModel::new(models, vec![1.0 / subtypes as f64; subtypes], Vec::new())
}
