mod common;

use common::*;
use cthmm::ctmc::Structure;
use cthmm::emissions::{EmissionTable, Observation};
use cthmm::error::Error;
use cthmm::evaluation::{
    ceil_count, forecast_patient, forecast_report, grid_evaluate, mean_and_standard_error, prefix_split, split_cohort,
    GridConfig,
};
use cthmm::inference::SubtypeModel;
use cthmm::learning::EmConfig;
use cthmm::mixture::{fit_mixture, MixtureConfig, MixtureModel};
use cthmm::synthesis::{demo_mixture, sample_mixture_cohort, CohortConfig};
use cthmm::trajectory::Trajectory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_mixture(m: usize, bins: &[usize], rng: &mut ChaCha8Rng) -> MixtureModel {
    let subtypes = (0..m).map(|_| random_model(3, bins, Structure::Full, rng)).collect();
    MixtureModel::new(subtypes, random_simplex(m, rng), Vec::new()).unwrap()
}

fn test_cohort(n: usize, bins: &[usize], rng: &mut ChaCha8Rng) -> Vec<Trajectory> {
    (0..n).map(|i| random_trajectory(&format!("p{i:03}"), 4 + i % 5, bins, 0.2, rng)).collect()
}

#[test]
fn uniform_predictor_scores_log_bin_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let base = random_model(3, &[5], Structure::Full, &mut rng);
    let uniform = EmissionTable::new(vec![vec![vec![0.2; 5]]; 3]).unwrap();
    let model = SubtypeModel::new(base.initial, base.generator, uniform).unwrap();
    let mixture = MixtureModel::new(vec![model], vec![1.0], Vec::new()).unwrap();
    for t in test_cohort(20, &[5], &mut rng) {
        match forecast_patient(&mixture, &t, 0.7) {
            Ok(f) => assert!((f.cross_entropy - 5f64.ln()).abs() <= 1e-12),
            Err(Error::NoHeldOutObservations(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn report_ignores_test_order_and_time_origin() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mixture = random_mixture(2, &[3, 4], &mut rng);
    let test = test_cohort(25, &[3, 4], &mut rng);
    let base = forecast_report(&mixture, &test, 0.7, 0).unwrap();

    let mut reversed = test.clone();
    reversed.reverse();
    let r = forecast_report(&mixture, &reversed, 0.7, 0).unwrap();
    assert!((r.mean - base.mean).abs() <= 1e-12);
    assert!((r.standard_error - base.standard_error).abs() <= 1e-12);

    let shifted: Vec<Trajectory> = test.iter().map(|t| t.shifted(123.25)).collect();
    let s = forecast_report(&mixture, &shifted, 0.7, 0).unwrap();
    assert!((s.mean - base.mean).abs() <= 1e-9);
    for (a, b) in base.patients.iter().zip(&s.patients) {
        assert_eq!(a.subtype, b.subtype);
        assert!((a.cross_entropy - b.cross_entropy).abs() <= 1e-9);
    }
}

#[test]
fn unobserved_feature_does_not_change_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let wide = random_mixture(2, &[4, 3], &mut rng);
    let narrow_subtypes = wide
        .subtypes
        .iter()
        .map(|s| {
            let rows = (0..s.states()).map(|k| vec![s.emissions.row(k, 0).to_vec()]).collect();
            SubtypeModel::new(s.initial.clone(), s.generator.clone(), EmissionTable::new(rows).unwrap()).unwrap()
        })
        .collect();
    let narrow = MixtureModel::new(narrow_subtypes, wide.prior.clone(), Vec::new()).unwrap();
    for t in test_cohort(15, &[4], &mut rng) {
        let padded = Trajectory::new(
            t.id(),
            t.times().to_vec(),
            t.observations().iter().map(|o| Observation(vec![o.get(0), None])).collect(),
        )
        .unwrap();
        match (forecast_patient(&wide, &padded, 0.6), forecast_patient(&narrow, &t, 0.6)) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a.subtype, b.subtype);
                assert!((a.cross_entropy - b.cross_entropy).abs() <= 1e-12);
                assert_eq!(a.scored, b.scored);
                assert_eq!(a.skipped, b.skipped + padded.len() - ceil_count(0.6, padded.len()));
            }
            (Err(_), Err(_)) => {}
            (a, b) => panic!("outcomes differ: {a:?} vs {b:?}"),
        }
    }
}

#[test]
fn split_partitions_by_ceiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let cohort = test_cohort(23, &[3], &mut rng);
    let (train, test) = split_cohort(&cohort, 0.8, 9).unwrap();
    assert_eq!(train.len(), 19);
    assert_eq!(test.len(), 4);
    let mut ids: Vec<&str> = train.iter().chain(&test).map(|t| t.id()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 23);
    let mut shuffled = cohort.clone();
    shuffled.reverse();
    assert_eq!(split_cohort(&shuffled, 0.8, 9).unwrap(), (train, test));
    assert!(matches!(split_cohort(&[], 0.8, 9), Err(Error::EmptyCohort)));
    assert!(matches!(split_cohort(&cohort, 1.0, 9), Err(Error::InvalidConfig(_))));

    let t = &cohort[3];
    let (prefix, rest) = prefix_split(t, 0.7);
    assert_eq!(prefix.len(), ceil_count(0.7, t.len()));
    assert_eq!(prefix.len() + rest.map_or(0, |r| r.len()), t.len());
}

#[test]
fn standard_error_is_recomputable() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mixture = random_mixture(2, &[3], &mut rng);
    let report = forecast_report(&mixture, &test_cohort(30, &[3], &mut rng), 0.7, 0).unwrap();
    let values: Vec<f64> = report.patients.iter().map(|p| p.cross_entropy).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((report.mean - mean).abs() <= 1e-12);
    assert!((report.standard_error - (var / n).sqrt()).abs() <= 1e-12);
    assert_eq!(mean_and_standard_error(&[2.0]), (2.0, 0.0));
    assert_eq!(report.patients.len() + report.excluded.len(), 30);
}

fn grid_setup() -> (Vec<Trajectory>, GridConfig) {
    let truth = demo_mixture(2, 3, &[4], 36).unwrap();
    let cohort = sample_mixture_cohort(
        &truth,
        &CohortConfig { patients: 60, missing_rate: 0.1, seed: 36, ..CohortConfig::default() },
    )
    .unwrap()
    .trajectories;
    let config = GridConfig {
        seed: 36,
        bins: vec![4],
        mixture: MixtureConfig {
            em: EmConfig { restarts: 2, max_iterations: 30, ..EmConfig::default() },
            ..MixtureConfig::default()
        },
        ..GridConfig::default()
    };
    (cohort, config)
}

#[test]
fn single_cell_grid_matches_direct_run() {
    let (cohort, config) = grid_setup();
    let grid = grid_evaluate(&cohort, &[1], &[2], &config).unwrap();
    let (train, test) = split_cohort(&cohort, config.train_fraction, config.seed).unwrap();
    let mut mixture_config = config.mixture.clone();
    mixture_config.em.seed = config.seed;
    let (model, _) = fit_mixture(&train, 1, 2, &[4], &mixture_config).unwrap();
    let direct = forecast_report(&model, &test, config.prefix_fraction, config.seed).unwrap();
    assert_eq!(grid.cell(1, 2).unwrap().report, direct);
}

#[test]
fn grids_are_reproducible() {
    let (cohort, config) = grid_setup();
    let a = grid_evaluate(&cohort, &[1, 2], &[1, 2], &config).unwrap();
    let b = grid_evaluate(&cohort, &[1, 2], &[1, 2], &config).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.render_table(), b.render_table());
    assert_eq!(a.cells.len(), 4);
    assert!(a.cell(2, 2).is_some() && a.cell(3, 1).is_none());
}
