//! Hard-EM subtyping over a mixture of subtype models.
//!
//! Alternates two steps until no patient changes subtype:
//! 1. assign every patient to `argmax_m log P(m) + log P(Y_n | m)`;
//! 2. refit each subtype's model on its assigned patients.
//!
//! The first refit uses random restarts from a partition seeded by k-means++
//! over per-patient bin histograms; later refits warm-start from the previous
//! parameters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{check_simplex, log_likelihood_with, SubtypeModel, TransitionTable};
use crate::learning::{
    empirical_bin_frequencies, fit_disease_model, refine_disease_model, restart_rng, EmConfig, FitDiagnostics,
};
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    pub em: EmConfig,
    pub max_alternations: usize,
    /// Re-estimate the subtype prior from assignment frequencies after each
    /// assignment step; off keeps it uniform.
    pub reestimate_prior: bool,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig { em: EmConfig::default(), max_alternations: 50, reestimate_prior: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub patient: String,
    pub subtype: usize,
}

/// Fitted subtype models with their prior and training assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    pub subtypes: Vec<SubtypeModel>,
    pub prior: Vec<f64>,
    pub assignments: Vec<Assignment>,
    /// `Σ_n log P(m_n, Y_n)` after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl MixtureModel {
    pub fn new(subtypes: Vec<SubtypeModel>, prior: Vec<f64>, assignments: Vec<Assignment>) -> Result<Self> {
        let mixture = MixtureModel { subtypes, prior, assignments, objective_trace: Vec::new() };
        mixture.validate()?;
        Ok(mixture)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.subtypes.first() else {
            return Err(Error::InvariantViolation("mixture has no subtypes".into()));
        };
        if self.prior.len() != self.subtypes.len() {
            return Err(Error::InvariantViolation(format!(
                "prior has {} entries for {} subtypes",
                self.prior.len(),
                self.subtypes.len()
            )));
        }
        check_simplex(&self.prior, "subtype prior")?;
        let bins = first.emissions.bins();
        for (m, s) in self.subtypes.iter().enumerate() {
            s.validate()?;
            if s.states() != first.states() || s.emissions.bins() != bins {
                return Err(Error::InvariantViolation(format!("subtype {m} differs in shape from subtype 0")));
            }
        }
        if let Some(a) = self.assignments.iter().find(|a| a.subtype >= self.subtypes.len()) {
            return Err(Error::InvariantViolation(format!(
                "patient {} assigned to subtype {} of {}",
                a.patient,
                a.subtype,
                self.subtypes.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subtypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtypes.is_empty()
    }

    pub fn states(&self) -> usize {
        self.subtypes[0].states()
    }

    pub fn bins(&self) -> Vec<usize> {
        self.subtypes[0].emissions.bins()
    }

    /// Same mixture with subtypes reordered: new subtype `i` is old
    /// subtype `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> MixtureModel {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        MixtureModel {
            subtypes: order.iter().map(|&o| self.subtypes[o].clone()).collect(),
            prior: order.iter().map(|&o| self.prior[o]).collect(),
            assignments: self
                .assignments
                .iter()
                .map(|a| Assignment { patient: a.patient.clone(), subtype: inverse[a.subtype] })
                .collect(),
            objective_trace: self.objective_trace.clone(),
        }
    }
}

fn log_prior(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Index of the largest score; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `log P(m) + log P(Y | m)` for every subtype.
pub fn subtype_scores(mixture: &MixtureModel, traj: &Trajectory) -> Result<Vec<f64>> {
    mixture
        .subtypes
        .iter()
        .zip(&mixture.prior)
        .map(|(model, &p)| Ok(log_prior(p) + crate::inference::trajectory_log_likelihood(model, traj)?))
        .collect()
}

/// Maximum-posterior subtype and all per-subtype log joint scores.
pub fn assign_subtype(mixture: &MixtureModel, traj: &Trajectory) -> Result<(usize, Vec<f64>)> {
    let scores = subtype_scores(mixture, traj)?;
    Ok((argmax(&scores), scores))
}

/// Normalized `P(m | Y)` over subtypes.
pub fn assignment_posteriors(mixture: &MixtureModel, traj: &Trajectory) -> Result<Vec<f64>> {
    Ok(softmax(&subtype_scores(mixture, traj)?))
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / scores.len() as f64; scores.len()];
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Score matrix `[patient][subtype]` over a cohort.
fn score_matrix(
    subtypes: &[SubtypeModel],
    prior: &[f64],
    trajectories: &[Trajectory],
    quantum: Option<f64>,
) -> Result<Vec<Vec<f64>>> {
    let tables = subtypes
        .iter()
        .map(|m| TransitionTable::build(&m.generator, trajectories, quantum))
        .collect::<Result<Vec<_>>>()?;
    Ok(trajectories
        .par_iter()
        .map(|t| {
            subtypes
                .iter()
                .zip(&tables)
                .zip(prior)
                .map(|((m, table), &p)| log_prior(p) + log_likelihood_with(m, t, table))
                .collect()
        })
        .collect())
}

/// Per-patient feature vector: concatenated smoothed bin frequencies, with
/// the cohort frequencies standing in for features a patient never shows.
fn histogram(traj: &Trajectory, bins: &[usize], global: &[Vec<f64>]) -> Vec<f64> {
    let mut counts: Vec<Vec<f64>> = bins.iter().map(|&j| vec![0.0; j]).collect();
    for obs in traj.observations() {
        for (d, j) in obs.observed() {
            counts[d][j] += 1.0;
        }
    }
    counts
        .iter()
        .zip(global)
        .flat_map(|(row, g)| {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter().map(|c| c / total).collect::<Vec<_>>()
            } else {
                g.clone()
            }
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeds an initial partition with k-means++ and a few Lloyd iterations on
/// per-patient bin histograms. Every cluster is non-empty.
pub fn initial_partition(
    trajectories: &[Trajectory],
    subtypes: usize,
    bins: &[usize],
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = trajectories.len();
    let global = empirical_bin_frequencies(trajectories, bins, 0.0);
    let points: Vec<Vec<f64>> = trajectories.iter().map(|t| histogram(t, bins, &global)).collect();

    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < subtypes {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 { crate::synthesis::sample_index(&nearest, rng) } else { rng.random_range(0..n) };
        centers.push(points[next].clone());
        for (d, p) in nearest.iter_mut().zip(&points) {
            *d = d.min(squared_distance(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![0; n];
    for _ in 0..25 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let d: Vec<f64> = centers.iter().map(|c| -squared_distance(p, c)).collect();
                argmax(&d)
            })
            .collect();
        let changed = next != labels;
        labels = next;
        for (m, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == m).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (i, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|p| p[i]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let fit: Vec<f64> = points.iter().zip(&labels).map(|(p, &l)| -squared_distance(p, &centers[l])).collect();
    fill_empty_clusters(&mut labels, subtypes, |n| fit[n]);
    labels
}

/// Moves `⌈N / (10M)⌉` of the worst-scoring patients (never emptying their
/// own cluster) into each empty cluster. Returns how many clusters were
/// repaired.
fn fill_empty_clusters(labels: &mut [usize], clusters: usize, score: impl Fn(usize) -> f64) -> usize {
    let n = labels.len();
    let quota = n.div_ceil(10 * clusters).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
    let mut repaired = 0;
    for m in 0..clusters {
        if labels.contains(&m) {
            continue;
        }
        repaired += 1;
        let mut moved = 0;
        for &p in &order {
            if moved == quota {
                break;
            }
            let from = labels[p];
            if from == m || labels.iter().filter(|&&l| l == from).count() <= 1 {
                continue;
            }
            labels[p] = m;
            moved += 1;
        }
    }
    repaired
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MixtureDiagnostics {
    pub alternations: usize,
    pub converged: bool,
    pub empty_repairs: usize,
    /// Fit diagnostics of each subtype's most recent refit.
    pub subtype_fits: Vec<FitDiagnostics>,
}

fn subtype_config(config: &EmConfig, subtype: usize) -> EmConfig {
    EmConfig { seed: config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(subtype as u64)), ..config.clone() }
}

/// Hard-EM fit of `subtypes` subtype models with `states` hidden states each.
pub fn fit_mixture(
    trajectories: &[Trajectory],
    subtypes: usize,
    states: usize,
    bins: &[usize],
    config: &MixtureConfig,
) -> Result<(MixtureModel, MixtureDiagnostics)> {
    config.em.validate()?;
    if subtypes == 0 {
        return Err(Error::InvalidConfig("at least one subtype is required".into()));
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if trajectories.len() < subtypes {
        return Err(Error::TooFewPatients { patients: trajectories.len(), subtypes });
    }
    if config.max_alternations == 0 {
        return Err(Error::InvalidConfig("max_alternations must be at least 1".into()));
    }
    let quantum = config.em.interval_quantum;
    let mut rng = restart_rng(config.em.seed, usize::MAX);
    let mut labels = if subtypes == 1 {
        vec![0; trajectories.len()]
    } else {
        initial_partition(trajectories, subtypes, bins, &mut rng)
    };
    let mut prior = vec![1.0 / subtypes as f64; subtypes];
    let mut models: Vec<Option<SubtypeModel>> = vec![None; subtypes];
    let mut fits = vec![FitDiagnostics::default(); subtypes];
    let mut trace = Vec::new();
    let mut diagnostics = MixtureDiagnostics::default();

    for alternation in 0..config.max_alternations {
        // Step 2: refit each subtype on its members.
        let refits: Vec<Result<(SubtypeModel, FitDiagnostics)>> = (0..subtypes)
            .into_par_iter()
            .map(|m| {
                let members: Vec<Trajectory> =
                    trajectories.iter().zip(&labels).filter(|(_, &l)| l == m).map(|(t, _)| t.clone()).collect();
                let em = subtype_config(&config.em, m);
                match &models[m] {
                    Some(previous) => {
                        let run = refine_disease_model(previous.clone(), &members, &em)?;
                        let diag = FitDiagnostics {
                            iterations: run.iterations,
                            converged: run.converged,
                            log_likelihood_trace: run.log_likelihood_trace.clone(),
                            restart_scores: vec![run.log_likelihood_trace.last().copied()],
                            best_restart: 0,
                            degenerate_rows: run.degenerate_rows,
                        };
                        Ok((run.model, diag))
                    }
                    None => fit_disease_model(&members, states, bins, &em),
                }
            })
            .collect();
        for (m, r) in refits.into_iter().enumerate() {
            let (model, diag) = r?;
            models[m] = Some(model);
            fits[m] = diag;
        }
        let current: Vec<SubtypeModel> = models.iter().map(|m| m.clone().expect("every subtype fitted")).collect();

        // Step 1: reassign.
        let scores = score_matrix(&current, &prior, trajectories, quantum)?;
        let mut next: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let best: Vec<f64> = scores.iter().zip(&next).map(|(s, &l)| s[l]).collect();
        trace.push(best.iter().sum());
        let repaired = fill_empty_clusters(&mut next, subtypes, |n| best[n]);
        diagnostics.empty_repairs += repaired;
        diagnostics.alternations = alternation + 1;
        if config.reestimate_prior {
            prior =
                (0..subtypes).map(|m| next.iter().filter(|&&l| l == m).count() as f64 / next.len() as f64).collect();
        }
        let stable = next == labels && repaired == 0;
        labels = next;
        if stable {
            diagnostics.converged = true;
            break;
        }
    }

    diagnostics.subtype_fits = fits;
    let mixture = MixtureModel {
        subtypes: models.into_iter().map(|m| m.expect("every subtype fitted")).collect(),
        prior,
        assignments: trajectories
            .iter()
            .zip(&labels)
            .map(|(t, &l)| Assignment { patient: t.id().to_string(), subtype: l })
            .collect(),
        objective_trace: trace,
    };
    Ok((mixture, diagnostics))
}
