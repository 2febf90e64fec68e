//! EM for a single subtype model.
//!
//! The E-step runs forward-backward on every trajectory and accumulates
//! posterior-weighted emission counts, initial-state posteriors and, per
//! distinct observation gap Δ, the pairwise endpoint counts `C_ab(Δ)`. The
//! M-step is closed form: smoothed count ratios for the emissions and the
//! initial distribution, and expected transitions over expected sojourn
//! (both end-conditioned, under the E-step generator) for the rates.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{GeneratorMatrix, RateBounds, Structure};
use crate::emissions::EmissionTable;
use crate::error::{Error, Result};
use crate::inference::{forward_backward_with, log_likelihood_with, SubtypeModel, TransitionTable};
use crate::trajectory::Trajectory;

/// Expected sojourn below this leaves a state's rates untouched.
pub const MIN_OCCUPANCY: f64 = 1e-10;

const CHUNK: usize = 32;

/// A positive interval usable as an ordered map key.
///
/// Positive finite doubles order the same way as their bit patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntervalKey(u64);

impl IntervalKey {
    pub fn new(interval: f64) -> Self {
        debug_assert!(interval > 0.0 && interval.is_finite());
        IntervalKey(interval.to_bits())
    }

    pub fn interval(self) -> f64 {
        f64::from_bits(self.0)
    }
}

/// Additive E-step statistics for one subtype.
#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    /// `C_ab(Δ)` per distinct interval.
    pub transition_counts: BTreeMap<IntervalKey, DMatrix<f64>>,
    /// `Σ_n γ_{n,t_1,k}`.
    pub initial: Vec<f64>,
    /// `Σ_n Σ_t γ_{n,t,k} 1[Y_{n,t,d} = j]`, indexed `[k][d][j]`.
    pub emission_counts: Vec<Vec<Vec<f64>>>,
    pub trajectories: usize,
    pub timepoints: usize,
}

impl SufficientStats {
    pub fn empty(states: usize, bins: &[usize]) -> Self {
        SufficientStats {
            transition_counts: BTreeMap::new(),
            initial: vec![0.0; states],
            emission_counts: vec![bins.iter().map(|&j| vec![0.0; j]).collect(); states],
            trajectories: 0,
            timepoints: 0,
        }
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn merge(&mut self, other: &SufficientStats) {
        for (key, c) in &other.transition_counts {
            self.transition_counts.entry(*key).and_modify(|m| *m += c).or_insert_with(|| c.clone());
        }
        for (a, b) in self.initial.iter_mut().zip(&other.initial) {
            *a += b;
        }
        for (sa, sb) in self.emission_counts.iter_mut().zip(&other.emission_counts) {
            for (ra, rb) in sa.iter_mut().zip(sb) {
                for (a, b) in ra.iter_mut().zip(rb) {
                    *a += b;
                }
            }
        }
        self.trajectories += other.trajectories;
        self.timepoints += other.timepoints;
    }
}

/// EM settings for one subtype fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop when `|Δll| / (|ll| + 1)` falls below this.
    pub tolerance: f64,
    /// Laplace pseudo-count per emission bin.
    pub smoothing: f64,
    pub rate_bounds: RateBounds,
    pub structure: Structure,
    pub seed: u64,
    pub restarts: usize,
    /// Optional grid width for observation gaps.
    pub interval_quantum: Option<f64>,
    /// Binary feature pinned to "present" in the final state only.
    pub terminal_feature: Option<usize>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 200,
            tolerance: 1e-6,
            smoothing: 1e-3,
            rate_bounds: RateBounds::default(),
            structure: Structure::Full,
            seed: 0,
            restarts: 5,
            interval_quantum: None,
            terminal_feature: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::InvalidConfig("smoothing must be non-negative".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be at least 1".into()));
        }
        if let Some(q) = self.interval_quantum {
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::InvalidConfig("interval_quantum must be positive".into()));
            }
        }
        self.rate_bounds.validate()
    }

    /// Probability mass left on the "wrong" bin of the terminal indicator.
    pub fn terminal_epsilon(&self) -> f64 {
        if self.smoothing > 0.0 {
            self.smoothing.min(0.5)
        } else {
            1e-6
        }
    }
}

/// Per-fit record of what EM did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// M-steps applied in the winning run.
    pub iterations: usize,
    pub converged: bool,
    /// Total log-likelihood of each successive model in the winning run.
    pub log_likelihood_trace: Vec<f64>,
    /// Final log-likelihood per restart; `None` for a failed restart.
    pub restart_scores: Vec<Option<f64>>,
    pub best_restart: usize,
    /// Rate-matrix rows left unchanged for lack of occupancy.
    pub degenerate_rows: usize,
}

impl FitDiagnostics {
    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihood_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

fn check_inputs(model: &SubtypeModel, trajectories: &[Trajectory]) -> Result<()> {
    trajectories.iter().try_for_each(|t| model.check_compatible(t))
}

fn accumulate(model: &SubtypeModel, traj: &Trajectory, table: &TransitionTable, stats: &mut SufficientStats) -> f64 {
    let post = forward_backward_with(model, traj, table);
    stats.trajectories += 1;
    stats.timepoints += traj.len();
    if !post.log_likelihood.is_finite() {
        return post.log_likelihood;
    }
    let k = model.states();
    for s in 0..k {
        stats.initial[s] += post.gamma[(0, s)];
    }
    for (i, obs) in traj.observations().iter().enumerate() {
        for (d, j) in obs.observed() {
            for s in 0..k {
                stats.emission_counts[s][d][j] += post.gamma[(i, s)];
            }
        }
    }
    for (gap, xi) in traj.gaps().zip(&post.xi) {
        let key = IntervalKey::new(table.key(gap));
        stats.transition_counts.entry(key).and_modify(|m| *m += xi).or_insert_with(|| xi.clone());
    }
    post.log_likelihood
}

/// E-step over a cohort. Returns the statistics and the total
/// log-likelihood of the cohort under `model`.
///
/// Trajectories are processed in fixed-size chunks in parallel and merged in
/// order, so the result does not depend on the thread count.
pub fn e_step(
    model: &SubtypeModel,
    trajectories: &[Trajectory],
    interval_quantum: Option<f64>,
) -> Result<(SufficientStats, f64)> {
    check_inputs(model, trajectories)?;
    let table = TransitionTable::build(&model.generator, trajectories, interval_quantum)?;
    let bins = model.emissions.bins();
    let partials: Vec<(SufficientStats, f64)> = trajectories
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut stats = SufficientStats::empty(model.states(), &bins);
            let ll: f64 = chunk.iter().map(|t| accumulate(model, t, &table, &mut stats)).sum();
            (stats, ll)
        })
        .collect();
    let mut stats = SufficientStats::empty(model.states(), &bins);
    let mut total = 0.0;
    for (s, ll) in &partials {
        stats.merge(s);
        total += ll;
    }
    Ok((stats, total))
}

/// Total log-likelihood of a cohort under one model (forward passes only).
pub fn cohort_log_likelihood(
    model: &SubtypeModel,
    trajectories: &[Trajectory],
    interval_quantum: Option<f64>,
) -> Result<f64> {
    check_inputs(model, trajectories)?;
    let table = TransitionTable::build(&model.generator, trajectories, interval_quantum)?;
    let partials: Vec<f64> = trajectories
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|t| log_likelihood_with(model, t, &table)).sum())
        .collect();
    Ok(partials.iter().sum())
}

/// `w[k][d][j] = (count + ε) / (Σ_j count + J ε)`; an all-zero row with
/// `ε = 0` becomes uniform.
pub fn m_step_emissions(stats: &SufficientStats, smoothing: f64) -> EmissionTable {
    let rows = stats
        .emission_counts
        .iter()
        .map(|state| {
            state
                .iter()
                .map(|counts| {
                    let j = counts.len() as f64;
                    let total: f64 = counts.iter().sum::<f64>() + j * smoothing;
                    if total > 0.0 {
                        counts.iter().map(|c| (c + smoothing) / total).collect()
                    } else {
                        vec![1.0 / j; counts.len()]
                    }
                })
                .collect()
        })
        .collect();
    EmissionTable::from_rows_unchecked(rows)
}

/// Initial-state posteriors normalized to the simplex.
pub fn m_step_initial(stats: &SufficientStats) -> Vec<f64> {
    let total: f64 = stats.initial.iter().sum();
    let k = stats.states();
    if total > 0.0 {
        stats.initial.iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Rate update plus the states whose rows were held fixed.
#[derive(Clone, Debug)]
pub struct GeneratorUpdate {
    pub generator: GeneratorMatrix,
    pub degenerate_states: Vec<usize>,
}

/// `Q_ab = Σ_Δ E[N_ab | ·] C(Δ) / Σ_Δ E[R_a | ·] C(Δ)` with expectations
/// under `previous`, clamped into `bounds`.
///
/// A state with total expected sojourn below [`MIN_OCCUPANCY`] keeps its
/// previous row and is reported in `degenerate_states`. Non-finite
/// statistics fail with [`Error::DegenerateOccupancy`].
pub fn m_step_generator(
    stats: &SufficientStats,
    previous: &GeneratorMatrix,
    bounds: RateBounds,
) -> Result<GeneratorUpdate> {
    let k = previous.size();
    let mut transitions = DMatrix::zeros(k, k);
    let mut sojourn = vec![0.0; k];
    if k > 1 {
        for (key, counts) in &stats.transition_counts {
            let dt = key.interval();
            let p = previous.transition_matrix(dt)?;
            let (n, r) = previous.weighted_path_statistics(dt, &p, counts);
            transitions += n;
            for (acc, v) in sojourn.iter_mut().zip(r) {
                *acc += v;
            }
        }
    }

    let mask = previous.mask();
    let mut rates = previous.rates().clone();
    let mut degenerate_states = Vec::new();
    for a in 0..k {
        let allowed: Vec<usize> = (0..k).filter(|&b| b != a && mask[(a, b)]).collect();
        if allowed.is_empty() {
            continue;
        }
        if !sojourn[a].is_finite() {
            return Err(Error::DegenerateOccupancy { state: a });
        }
        if sojourn[a] < MIN_OCCUPANCY {
            degenerate_states.push(a);
            continue;
        }
        for b in allowed {
            let rate = transitions[(a, b)] / sojourn[a];
            if !rate.is_finite() {
                return Err(Error::DegenerateOccupancy { state: a });
            }
            rates[(a, b)] = bounds.clamp(rate);
        }
    }
    Ok(GeneratorUpdate { generator: GeneratorMatrix::from_offdiagonal(rates, mask.clone()), degenerate_states })
}

/// Pins a binary indicator feature: bin 1 ("present") has probability
/// `1 − ε` in the last state and `ε` everywhere else.
pub fn apply_terminal_constraint(emissions: &mut EmissionTable, feature: usize, epsilon: f64) -> Result<()> {
    if feature >= emissions.features() || emissions.bins()[feature] != 2 {
        return Err(Error::InvalidConfig(format!(
            "terminal indicator feature {feature} must exist and have exactly 2 bins"
        )));
    }
    let last = emissions.states() - 1;
    for s in 0..emissions.states() {
        *emissions.row_mut(s, feature) =
            if s == last { vec![epsilon, 1.0 - epsilon] } else { vec![1.0 - epsilon, epsilon] };
    }
    Ok(())
}

fn m_step(stats: &SufficientStats, model: &SubtypeModel, config: &EmConfig) -> Result<(SubtypeModel, usize)> {
    let mut emissions = m_step_emissions(stats, config.smoothing);
    if let Some(f) = config.terminal_feature {
        apply_terminal_constraint(&mut emissions, f, config.terminal_epsilon())?;
    }
    let update = m_step_generator(stats, &model.generator, config.rate_bounds)?;
    let next = SubtypeModel { initial: m_step_initial(stats), generator: update.generator, emissions };
    Ok((next, update.degenerate_states.len()))
}

fn relative_change(previous: f64, current: f64) -> f64 {
    (current - previous).abs() / (current.abs() + 1.0)
}

/// Result of one EM run from a given starting point.
#[derive(Clone, Debug)]
pub struct EmRun {
    pub model: SubtypeModel,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood_trace: Vec<f64>,
    pub degenerate_rows: usize,
}

/// Runs EM from `initial` until the relative log-likelihood change drops
/// below the tolerance or the iteration cap is reached.
pub fn refine_disease_model(initial: SubtypeModel, trajectories: &[Trajectory], config: &EmConfig) -> Result<EmRun> {
    config.validate()?;
    if trajectories.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut model = initial;
    let mut trace = Vec::new();
    let mut degenerate_rows = 0;
    for iteration in 0..config.max_iterations {
        let (stats, ll) = e_step(&model, trajectories, config.interval_quantum)?;
        if let Some(&previous) = trace.last() {
            if relative_change(previous, ll) < config.tolerance {
                trace.push(ll);
                return Ok(EmRun {
                    model,
                    iterations: iteration,
                    converged: true,
                    log_likelihood_trace: trace,
                    degenerate_rows,
                });
            }
        }
        trace.push(ll);
        let (next, degenerate) = m_step(&stats, &model, config)?;
        degenerate_rows += degenerate;
        model = next;
    }
    let ll = cohort_log_likelihood(&model, trajectories, config.interval_quantum)?;
    let converged = trace.last().is_some_and(|&p| relative_change(p, ll) < config.tolerance);
    trace.push(ll);
    Ok(EmRun { model, iterations: config.max_iterations, converged, log_likelihood_trace: trace, degenerate_rows })
}

/// Smoothed bin frequencies over every observation in the cohort.
pub fn empirical_bin_frequencies(trajectories: &[Trajectory], bins: &[usize], smoothing: f64) -> Vec<Vec<f64>> {
    let mut counts: Vec<Vec<f64>> = bins.iter().map(|&j| vec![0.0; j]).collect();
    for t in trajectories {
        for obs in t.observations() {
            for (d, j) in obs.observed() {
                counts[d][j] += 1.0;
            }
        }
    }
    counts
        .into_iter()
        .map(|row| {
            let j = row.len() as f64;
            let total: f64 = row.iter().sum::<f64>() + j * smoothing;
            if total > 0.0 {
                row.iter().map(|c| (c + smoothing) / total).collect()
            } else {
                vec![1.0 / j; row.len()]
            }
        })
        .collect()
}

/// Random starting point: Dirichlet(1) initial distribution, rates uniform
/// on [0.01, 1] wherever the structure allows, and emissions from the global
/// bin frequencies with ±20% multiplicative noise. With one state the
/// emissions are the frequencies themselves.
pub fn initial_model(
    trajectories: &[Trajectory],
    states: usize,
    bins: &[usize],
    config: &EmConfig,
    rng: &mut impl Rng,
) -> Result<SubtypeModel> {
    let base = empirical_bin_frequencies(trajectories, bins, config.smoothing);

    let initial = if states == 1 {
        vec![1.0]
    } else {
        let draws: Vec<f64> = (0..states).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        draws.iter().map(|x: &f64| x / total).collect()
    };

    let mask = config.structure.mask(states);
    let raw = DMatrix::from_fn(states, states, |a, b| if mask[(a, b)] { rng.random_range(0.01..=1.0) } else { 0.0 });
    let generator = GeneratorMatrix::new(&raw, &mask, config.rate_bounds)?;

    let rows = (0..states)
        .map(|_| {
            base.iter()
                .map(|freq| {
                    if states == 1 {
                        return freq.clone();
                    }
                    let noisy: Vec<f64> = freq.iter().map(|p| p * rng.random_range(0.8..=1.2)).collect();
                    let total: f64 = noisy.iter().sum();
                    noisy.iter().map(|p| p / total).collect()
                })
                .collect()
        })
        .collect();
    let mut emissions = EmissionTable::from_rows_unchecked(rows);
    if let Some(f) = config.terminal_feature {
        apply_terminal_constraint(&mut emissions, f, config.terminal_epsilon())?;
    }
    Ok(SubtypeModel { initial, generator, emissions })
}

pub(crate) fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Fits one subtype model with random restarts; the run with the highest
/// final log-likelihood wins.
pub fn fit_disease_model(
    trajectories: &[Trajectory],
    states: usize,
    bins: &[usize],
    config: &EmConfig,
) -> Result<(SubtypeModel, FitDiagnostics)> {
    config.validate()?;
    if trajectories.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if states == 0 {
        return Err(Error::InvalidConfig("at least one hidden state is required".into()));
    }
    // A single state has nothing random to initialize.
    let restarts = if states == 1 { 1 } else { config.restarts };
    let mut best: Option<(usize, EmRun)> = None;
    let mut scores = Vec::with_capacity(restarts);
    let mut last_error = None;
    for r in 0..restarts {
        let mut rng = restart_rng(config.seed, r);
        let outcome = initial_model(trajectories, states, bins, config, &mut rng)
            .and_then(|init| refine_disease_model(init, trajectories, config));
        match outcome {
            Ok(run) => {
                let score = *run.log_likelihood_trace.last().expect("trace is never empty");
                scores.push(Some(score));
                let better = match &best {
                    None => true,
                    Some((_, b)) => score > *b.log_likelihood_trace.last().unwrap(),
                };
                if better {
                    best = Some((r, run));
                }
            }
            Err(e @ (Error::DegenerateOccupancy { .. } | Error::ExpmInaccuracy { .. })) => {
                scores.push(None);
                last_error = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let Some((best_restart, run)) = best else {
        return Err(last_error.expect("every restart failed with a recorded error"));
    };
    let diagnostics = FitDiagnostics {
        iterations: run.iterations,
        converged: run.converged,
        log_likelihood_trace: run.log_likelihood_trace,
        restart_scores: scores,
        best_restart,
        degenerate_rows: run.degenerate_rows,
    };
    Ok((run.model, diagnostics))
}
