//! Exact posterior inference for one trajectory under one subtype model.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::ctmc::{GeneratorMatrix, TransitionMatrix};
use crate::emissions::{BinningScheme, EmissionTable};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

const SIMPLEX_TOL: f64 = 1e-12;

/// Initial distribution, generator and emission table of one disease
/// trajectory model.
#[derive(Clone, Debug, PartialEq)]
pub struct SubtypeModel {
    pub initial: Vec<f64>,
    pub generator: GeneratorMatrix,
    pub emissions: EmissionTable,
}

impl SubtypeModel {
    pub fn new(initial: Vec<f64>, generator: GeneratorMatrix, emissions: EmissionTable) -> Result<Self> {
        let model = SubtypeModel { initial, generator, emissions };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.initial.len();
        if k == 0 {
            return Err(Error::InvariantViolation("model has no states".into()));
        }
        if self.generator.size() != k || self.emissions.states() != k {
            return Err(Error::InvariantViolation(format!(
                "state counts disagree: initial {k}, generator {}, emissions {}",
                self.generator.size(),
                self.emissions.states()
            )));
        }
        check_simplex(&self.initial, "initial distribution")?;
        self.emissions.validate()
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn features(&self) -> usize {
        self.emissions.features()
    }

    /// Checks feature count and bin ranges of a trajectory against the model.
    pub fn check_compatible(&self, traj: &Trajectory) -> Result<()> {
        let bins = self.emissions.bins();
        if traj.features() != bins.len() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory {} has {} features, model has {}",
                traj.id(),
                traj.features(),
                bins.len()
            )));
        }
        for obs in traj.observations() {
            for (d, j) in obs.observed() {
                if j >= bins[d] {
                    return Err(Error::DimensionMismatch(format!(
                        "trajectory {} uses bin {j} of feature {d}, which has {} bins",
                        traj.id(),
                        bins[d]
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvariantViolation(format!("{what} has an entry outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvariantViolation(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Rounds an interval onto a grid of width `step`, never below one step.
pub fn quantize_interval(interval: f64, step: Option<f64>) -> f64 {
    match step {
        Some(s) if s > 0.0 => (interval / s).round().max(1.0) * s,
        _ => interval,
    }
}

/// Transition matrices for a fixed generator, keyed by (optionally
/// quantized) interval. Built once, then shared read-only.
#[derive(Clone, Debug)]
pub struct TransitionTable {
    quantum: Option<f64>,
    matrices: HashMap<u64, TransitionMatrix>,
}

impl TransitionTable {
    pub fn build<'a>(
        generator: &GeneratorMatrix,
        trajectories: impl IntoIterator<Item = &'a Trajectory>,
        quantum: Option<f64>,
    ) -> Result<Self> {
        let mut matrices = HashMap::new();
        for traj in trajectories {
            for gap in traj.gaps() {
                let dt = quantize_interval(gap, quantum);
                if let std::collections::hash_map::Entry::Vacant(e) = matrices.entry(dt.to_bits()) {
                    e.insert(generator.transition_matrix(dt)?);
                }
            }
        }
        Ok(TransitionTable { quantum, matrices })
    }

    pub fn quantum(&self) -> Option<f64> {
        self.quantum
    }

    /// The interval key a raw gap maps to.
    pub fn key(&self, gap: f64) -> f64 {
        quantize_interval(gap, self.quantum)
    }

    pub fn get(&self, gap: f64) -> &TransitionMatrix {
        let dt = self.key(gap);
        self.matrices.get(&dt.to_bits()).expect("transition table built for a different set of trajectories")
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Posterior quantities from the scaled forward-backward pass.
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    pub log_likelihood: f64,
    /// `n × K`: `P(Z_{t_i} = k | Y)`.
    pub gamma: DMatrix<f64>,
    /// `n − 1` matrices `P(Z_{t_i} = a, Z_{t_{i+1}} = b | Y)`.
    pub xi: Vec<DMatrix<f64>>,
    /// Log of each step's normalizer, including the emission offset.
    pub log_scales: Vec<f64>,
}

/// Emission probabilities per timepoint, each row shifted by its max log
/// value so at least one entry is 1.
fn scaled_emissions(model: &SubtypeModel, traj: &Trajectory) -> (DMatrix<f64>, Vec<f64>) {
    let k = model.states();
    let n = traj.len();
    let mut e = DMatrix::zeros(n, k);
    let mut offsets = Vec::with_capacity(n);
    for (i, obs) in traj.observations().iter().enumerate() {
        let logs: Vec<f64> = (0..k).map(|s| model.emissions.log_likelihood(s, obs)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max = if max.is_finite() { max } else { 0.0 };
        for s in 0..k {
            e[(i, s)] = (logs[s] - max).exp();
        }
        offsets.push(max);
    }
    (e, offsets)
}

struct ForwardPass {
    alpha: DMatrix<f64>,
    scales: Vec<f64>,
    log_scales: Vec<f64>,
    log_likelihood: f64,
}

fn forward(
    model: &SubtypeModel,
    traj: &Trajectory,
    table: &TransitionTable,
    e: &DMatrix<f64>,
    offsets: &[f64],
) -> ForwardPass {
    let k = model.states();
    let n = traj.len();
    let mut alpha = DMatrix::zeros(n, k);
    let mut scales = vec![0.0; n];
    let mut log_scales = vec![0.0; n];
    let mut log_likelihood = 0.0;
    let times = traj.times();
    for i in 0..n {
        let mut total = 0.0;
        for b in 0..k {
            let prior = if i == 0 {
                model.initial[b]
            } else {
                let p = table.get(times[i] - times[i - 1]);
                (0..k).map(|a| alpha[(i - 1, a)] * p.prob(a, b)).sum()
            };
            let v = prior * e[(i, b)];
            alpha[(i, b)] = v;
            total += v;
        }
        scales[i] = total;
        log_scales[i] = total.ln() + offsets[i];
        log_likelihood += log_scales[i];
        if total > 0.0 {
            for b in 0..k {
                alpha[(i, b)] /= total;
            }
        }
    }
    ForwardPass { alpha, scales, log_scales, log_likelihood }
}

/// Forward-backward with transition matrices computed for this trajectory.
pub fn forward_backward(model: &SubtypeModel, traj: &Trajectory) -> Result<PosteriorSummary> {
    model.check_compatible(traj)?;
    let table = TransitionTable::build(&model.generator, [traj], None)?;
    Ok(forward_backward_with(model, traj, &table))
}

/// Scaled forward-backward using precomputed transition matrices.
///
/// When the trajectory is impossible under the model the log-likelihood is
/// `-inf` and the posterior matrices are all zero.
pub fn forward_backward_with(model: &SubtypeModel, traj: &Trajectory, table: &TransitionTable) -> PosteriorSummary {
    let k = model.states();
    let n = traj.len();
    let (e, offsets) = scaled_emissions(model, traj);
    let fwd = forward(model, traj, table, &e, &offsets);
    if !fwd.log_likelihood.is_finite() {
        return PosteriorSummary {
            log_likelihood: f64::NEG_INFINITY,
            gamma: DMatrix::zeros(n, k),
            xi: vec![DMatrix::zeros(k, k); n.saturating_sub(1)],
            log_scales: fwd.log_scales,
        };
    }

    let times = traj.times();
    let mut beta = DMatrix::from_element(n, k, 1.0);
    let mut xi = vec![DMatrix::zeros(k, k); n.saturating_sub(1)];
    for i in (0..n.saturating_sub(1)).rev() {
        let p = table.get(times[i + 1] - times[i]);
        let c = fwd.scales[i + 1];
        // weighted[b] = e_{i+1}(b) β_{i+1}(b) / c_{i+1}
        let weighted: Vec<f64> = (0..k).map(|b| e[(i + 1, b)] * beta[(i + 1, b)] / c).collect();
        let xi_i = &mut xi[i];
        let mut xi_total = 0.0;
        for a in 0..k {
            let mut acc = 0.0;
            for b in 0..k {
                let t = p.prob(a, b) * weighted[b];
                acc += t;
                let joint = fwd.alpha[(i, a)] * t;
                xi_i[(a, b)] = joint;
                xi_total += joint;
            }
            beta[(i, a)] = acc;
        }
        if xi_total > 0.0 {
            *xi_i /= xi_total;
        }
    }

    let mut gamma = fwd.alpha.component_mul(&beta);
    for i in 0..n {
        let mut row = gamma.row_mut(i);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row /= s;
        }
    }
    PosteriorSummary { log_likelihood: fwd.log_likelihood, gamma, xi, log_scales: fwd.log_scales }
}

/// `log P(Y)` with the hidden states marginalized out.
pub fn trajectory_log_likelihood(model: &SubtypeModel, traj: &Trajectory) -> Result<f64> {
    model.check_compatible(traj)?;
    let table = TransitionTable::build(&model.generator, [traj], None)?;
    Ok(log_likelihood_with(model, traj, &table))
}

/// Forward pass only.
pub fn log_likelihood_with(model: &SubtypeModel, traj: &Trajectory, table: &TransitionTable) -> f64 {
    let (e, offsets) = scaled_emissions(model, traj);
    forward(model, traj, table, &e, &offsets).log_likelihood
}

/// Filtered state distribution `P(Z_{t_n} | Y_{1:n})` at the last timepoint.
pub fn filtered_state(model: &SubtypeModel, traj: &Trajectory) -> Result<Vec<f64>> {
    model.check_compatible(traj)?;
    let table = TransitionTable::build(&model.generator, [traj], None)?;
    let (e, offsets) = scaled_emissions(model, traj);
    let fwd = forward(model, traj, &table, &e, &offsets);
    if !fwd.log_likelihood.is_finite() {
        return Err(Error::InvalidTrajectory {
            id: traj.id().to_string(),
            reason: "observations have zero probability under the model".into(),
        });
    }
    Ok(fwd.alpha.row(traj.len() - 1).iter().copied().collect())
}

/// Per future time, per feature: predictive probabilities over bins given
/// the observed prefix.
pub fn predictive_bin_distributions(
    model: &SubtypeModel,
    prefix: &Trajectory,
    future_times: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut dist = filtered_state(model, prefix)?;
    let k = model.states();
    let mut last = prefix.end();
    let mut out = Vec::with_capacity(future_times.len());
    for &t in future_times {
        if !(t >= last) {
            return Err(Error::NonCausalQuery { query: t, prefix_end: last });
        }
        let p = model.generator.transition_matrix(t - last)?;
        dist = (0..k).map(|b| (0..k).map(|a| dist[a] * p.prob(a, b)).sum()).collect();
        let total: f64 = dist.iter().sum();
        dist.iter_mut().for_each(|x| *x /= total);
        out.push(bin_mixture(&model.emissions, &dist));
        last = t;
    }
    Ok(out)
}

/// `Σ_k dist_k · w[k][d][·]` for every feature.
pub fn bin_mixture(emissions: &EmissionTable, dist: &[f64]) -> Vec<Vec<f64>> {
    emissions
        .bins()
        .iter()
        .enumerate()
        .map(|(d, &j)| {
            let mut v = vec![0.0; j];
            for (s, &ps) in dist.iter().enumerate() {
                for (vj, w) in v.iter_mut().zip(emissions.row(s, d)) {
                    *vj += ps * w;
                }
            }
            let total: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= total);
            v
        })
        .collect()
}

/// One row of a progression report.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressionStep {
    pub state: usize,
    /// Mean holding time; `f64::INFINITY` for the absorbing final state.
    pub expected_duration: f64,
    /// Expected value of each feature in this state, from bin centers.
    pub expected_values: Vec<f64>,
}

/// Expected durations and feature values along a left-to-right chain
/// starting in `start_state`.
pub fn progression_trajectory(
    model: &SubtypeModel,
    scheme: &BinningScheme,
    start_state: usize,
) -> Result<Vec<ProgressionStep>> {
    if !model.generator.is_left_to_right() {
        return Err(Error::StructureNotChain);
    }
    let k = model.states();
    if start_state >= k {
        return Err(Error::DimensionMismatch(format!("start state {start_state} out of {k} states")));
    }
    if scheme.len() != model.features() {
        return Err(Error::DimensionMismatch(format!(
            "binning has {} features, model has {}",
            scheme.len(),
            model.features()
        )));
    }
    let durations = model.generator.mean_sojourn_times();
    Ok((start_state..k)
        .map(|s| ProgressionStep {
            state: s,
            expected_duration: durations[s],
            expected_values: scheme
                .features()
                .iter()
                .enumerate()
                .map(|(d, f)| model.emissions.expected_feature_value(s, d, f))
                .collect(),
        })
        .collect())
}
