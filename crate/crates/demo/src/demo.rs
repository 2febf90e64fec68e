use cthmm::ctmc::{GeneratorMatrix, RateBounds, Structure};
use cthmm::inference::progression_trajectory;
use cthmm::synthesis::{demo_mixture, patient_rng, sample_path_from};
use cthmm::{Error, Result, RunConfig};
use nalgebra::DMatrix;

/// Columns per progression row: subtype, state, duration, then one per feature.
pub const PROGRESSION_COLUMNS: usize = 5;

fn chain(rates: &[f64]) -> Result<GeneratorMatrix> {
    let k = rates.len() + 1;
    let mut raw = DMatrix::zeros(k, k);
    for (a, &r) in rates.iter().enumerate() {
        raw[(a, a + 1)] = r;
    }
    GeneratorMatrix::new(&raw, &Structure::LeftToRight.mask(k), RateBounds::default())
}

pub fn transition_curves(rates: &[f64], horizon: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidConfig("need at least 2 points and a positive finite horizon".into()));
    }
    let q = chain(rates)?;
    let k = q.size();
    let mut out = Vec::with_capacity(points * k);
    for i in 0..points {
        let p = q.transition_matrix(horizon * i as f64 / (points - 1) as f64)?;
        out.extend((0..k).map(|b| p.prob(0, b)));
    }
    Ok(out)
}

pub fn sample_path(rates: &[f64], horizon: f64, seed: u64) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidConfig("horizon must be positive and finite".into()));
    }
    let path = sample_path_from(&chain(rates)?, 0, horizon, &mut patient_rng(seed, 0));
    Ok(path.jump_times.iter().zip(&path.states).flat_map(|(&t, &s)| [t, s as f64]).collect())
}

pub fn progression(subtypes: usize, states: usize, seed: u64) -> Result<Vec<f64>> {
    let scheme = RunConfig::default().scheme()?;
    let mixture = demo_mixture(subtypes, states, &scheme.bins_per_feature(), seed)?;
    let mut out = Vec::with_capacity(subtypes * states * PROGRESSION_COLUMNS);
    for (m, subtype) in mixture.subtypes.iter().enumerate() {
        for step in progression_trajectory(subtype, &scheme, 0)? {
            out.extend([m as f64, step.state as f64, step.expected_duration]);
            out.extend(step.expected_values);
        }
    }
    Ok(out)
}
