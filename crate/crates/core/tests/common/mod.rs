#![allow(dead_code)]

use cthmm::ctmc::{GeneratorMatrix, RateBounds, Structure};
use cthmm::emissions::{EmissionTable, Observation};
use cthmm::expm::expm;
use cthmm::inference::SubtypeModel;
use cthmm::mixture::MixtureModel;
use cthmm::synthesis::sample_path_from;
use cthmm::trajectory::Trajectory;
use nalgebra::DMatrix;
use rand::Rng;

pub fn random_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

pub fn random_generator(k: usize, structure: Structure, lo: f64, hi: f64, rng: &mut impl Rng) -> GeneratorMatrix {
    let mask = structure.mask(k);
    let raw = DMatrix::from_fn(k, k, |a, b| if mask[(a, b)] { rng.random_range(lo..hi) } else { 0.0 });
    GeneratorMatrix::new(&raw, &mask, RateBounds::default()).unwrap()
}

pub fn random_emissions(k: usize, bins: &[usize], rng: &mut impl Rng) -> EmissionTable {
    EmissionTable::new((0..k).map(|_| bins.iter().map(|&j| random_simplex(j, rng)).collect()).collect()).unwrap()
}

pub fn random_model(k: usize, bins: &[usize], structure: Structure, rng: &mut impl Rng) -> SubtypeModel {
    SubtypeModel::new(
        random_simplex(k, rng),
        random_generator(k, structure, 0.05, 2.0, rng),
        random_emissions(k, bins, rng),
    )
    .unwrap()
}

pub fn random_trajectory(id: &str, n: usize, bins: &[usize], missing: f64, rng: &mut impl Rng) -> Trajectory {
    let mut t = rng.random_range(-5.0..5.0);
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        times.push(t);
        t += rng.random_range(0.1..3.0);
    }
    let obs = (0..n)
        .map(|_| {
            Observation(
                bins.iter().map(|&j| (rng.random::<f64>() >= missing).then(|| rng.random_range(0..j))).collect(),
            )
        })
        .collect();
    Trajectory::new(id, times, obs).unwrap()
}

/// Joint probabilities of every hidden sequence, enumerated directly.
pub struct Enumeration {
    pub likelihood: f64,
    pub gamma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<Vec<f64>>>,
}

pub fn enumerate_posterior(model: &SubtypeModel, traj: &Trajectory) -> Enumeration {
    let k = model.states();
    let n = traj.len();
    let steps: Vec<DMatrix<f64>> = traj.gaps().map(|g| expm(&(model.generator.rates() * g))).collect();
    let emit = |i: usize, s: usize| -> f64 {
        traj.observations()[i].observed().map(|(d, j)| model.emissions.prob(s, d, j)).product()
    };
    let mut gamma = vec![vec![0.0; k]; n];
    let mut xi = vec![vec![vec![0.0; k]; k]; n.saturating_sub(1)];
    let mut total = 0.0;
    let mut path = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for z in path.iter_mut() {
            *z = c % k;
            c /= k;
        }
        let mut p = model.initial[path[0]] * emit(0, path[0]);
        for i in 1..n {
            p *= steps[i - 1][(path[i - 1], path[i])] * emit(i, path[i]);
        }
        total += p;
        for i in 0..n {
            gamma[i][path[i]] += p;
        }
        for i in 0..n.saturating_sub(1) {
            xi[i][path[i]][path[i + 1]] += p;
        }
    }
    for row in gamma.iter_mut() {
        row.iter_mut().for_each(|v| *v /= total);
    }
    for m in xi.iter_mut() {
        m.iter_mut().flatten().for_each(|v| *v /= total);
    }
    Enumeration { likelihood: total, gamma, xi }
}

/// Running mean and variance.
#[derive(Clone, Copy, Default)]
pub struct Moments {
    pub n: f64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n
    }

    pub fn standard_error(&self) -> f64 {
        let mean = self.mean();
        let var = ((self.sum_sq - self.n * mean * mean) / (self.n - 1.0)).max(0.0);
        (var / self.n).sqrt()
    }
}

/// Monte Carlo path statistics from `start`, grouped by end state:
/// `counts[b][c][d]` and `sojourn[b][c]`.
pub struct PathMoments {
    pub paths: Vec<usize>,
    pub counts: Vec<Vec<Vec<Moments>>>,
    pub sojourn: Vec<Vec<Moments>>,
}

pub fn simulate_end_conditioned(
    q: &GeneratorMatrix,
    start: usize,
    interval: f64,
    paths: usize,
    rng: &mut impl Rng,
) -> PathMoments {
    let k = q.size();
    let mut out = PathMoments {
        paths: vec![0; k],
        counts: vec![vec![vec![Moments::default(); k]; k]; k],
        sojourn: vec![vec![Moments::default(); k]; k],
    };
    for _ in 0..paths {
        let path = sample_path_from(q, start, interval, rng);
        let b = path.final_state();
        out.paths[b] += 1;
        for c in 0..k {
            out.sojourn[b][c].push(path.sojourn(c));
            for d in 0..k {
                if c != d {
                    out.counts[b][c][d].push(path.transition_count(c, d) as f64);
                }
            }
        }
    }
    out
}

/// Left-to-right rates only on the superdiagonal, absorbing final state, and
/// the terminal indicator pinned high in the final state only.
pub fn check_structural_constraints(model: &SubtypeModel, indicator: usize, epsilon: f64) -> Result<(), String> {
    let q = &model.generator;
    let k = q.size();
    for a in 0..k {
        for b in 0..k {
            if a != b && b != a + 1 && q.rate(a, b) != 0.0 {
                return Err(format!("rate ({a}, {b}) = {} off the superdiagonal", q.rate(a, b)));
            }
        }
    }
    if q.exit_rate(k - 1) != 0.0 {
        return Err(format!("final state leaves at rate {}", q.exit_rate(k - 1)));
    }
    let present = model.emissions.prob(k - 1, indicator, 1);
    if present < 1.0 - 2.0 * epsilon {
        return Err(format!("final-state indicator probability {present} below {}", 1.0 - 2.0 * epsilon));
    }
    Ok(())
}

pub fn check_mixture_constraints(mixture: &MixtureModel, indicator: usize, epsilon: f64) -> Result<(), String> {
    mixture.subtypes.iter().enumerate().try_for_each(|(m, s)| {
        check_structural_constraints(s, indicator, epsilon).map_err(|e| format!("subtype {m}: {e}"))
    })
}

/// Best label accuracy over all relabelings of `predicted`, with the
/// permutation achieving it (`perm[predicted] = true`).
pub fn best_permutation_accuracy(truth: &[usize], predicted: &[usize], m: usize) -> (f64, Vec<usize>) {
    let mut best = (-1.0, Vec::new());
    for perm in permutations(m) {
        let hits = truth.iter().zip(predicted).filter(|(&t, &p)| perm[p] == t).count();
        let acc = hits as f64 / truth.len() as f64;
        if acc > best.0 {
            best = (acc, perm);
        }
    }
    best
}

pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Sparse emission rows: most mass on `peak`, the rest spread evenly.
pub fn peaked_row(j: usize, peak: usize, mass: f64) -> Vec<f64> {
    (0..j).map(|b| if b == peak { mass } else { (1.0 - mass) / (j - 1) as f64 }).collect()
}

pub fn chain_generator(rates: &[f64]) -> GeneratorMatrix {
    let k = rates.len() + 1;
    let raw = DMatrix::from_fn(k, k, |a, b| if b == a + 1 { rates[a] } else { 0.0 });
    GeneratorMatrix::new(&raw, &Structure::LeftToRight.mask(k), RateBounds::default()).unwrap()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total variation between two states' joint emission distributions, with
/// features independent given the state.
pub fn joint_total_variation(w1: &EmissionTable, s1: usize, w2: &EmissionTable, s2: usize) -> f64 {
    let bins = w1.bins();
    let mut cell = vec![0usize; bins.len()];
    let mut tv = 0.0;
    loop {
        let p: f64 = cell.iter().enumerate().map(|(d, &j)| w1.prob(s1, d, j)).product();
        let q: f64 = cell.iter().enumerate().map(|(d, &j)| w2.prob(s2, d, j)).product();
        tv += (p - q).abs();
        let mut d = 0;
        loop {
            if d == bins.len() {
                return 0.5 * tv;
            }
            cell[d] += 1;
            if cell[d] < bins[d] {
                break;
            }
            cell[d] = 0;
            d += 1;
        }
    }
}
