use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cthmm::evaluation::{forecast_report, grid_evaluate};
use cthmm::inference::progression_trajectory;
use cthmm::io::{load_cohort, load_model, read_truth_labels, save_cohort, save_model, write_truth};
use cthmm::learning::apply_terminal_constraint;
use cthmm::mixture::{assign_subtype, fit_mixture};
use cthmm::synthesis::{demo_mixture, sample_mixture_cohort};
use cthmm::{BinningScheme, Error, MixtureModel, ModelMetadata, Result, RunConfig, Trajectory};

use crate::{Command, Settings};

pub fn run(command: Command, settings: &Settings) -> Result<()> {
    match command {
        Command::Fit { data, model, out, truth } => fit(settings, &data, &model, out.as_deref(), truth.as_deref()),
        Command::Assign { model, data, out } => assign(settings, &model, &data, out.as_deref()),
        Command::Forecast { model, data, out } => forecast(settings, &model, &data, out.as_deref()),
        Command::Grid { data, out } => grid(settings, &data, out.as_deref()),
        Command::Simulate { out, truth, model } => simulate(settings, &out, truth, model.as_deref()),
        Command::Report { model, out } => report(settings, &model, out.as_deref()),
    }
}

impl Settings {
    fn run_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => at(path, RunConfig::load(path))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(m) = &self.subtypes {
            config.subtypes = m.clone();
        }
        if let Some(k) = &self.states {
            config.states = k.clone();
        }
        if let Some(f) = self.train_fraction {
            config.train_fraction = f;
        }
        if let Some(f) = self.prefix_fraction {
            config.prefix_fraction = f;
        }
        if let Some(features) = &self.features {
            config.evaluation_features = Some(features.clone());
        }
        if let Some(flag) = self.left_to_right {
            config.left_to_right = flag;
        }
        if let Some(flag) = self.terminal_intervention {
            config.terminal_intervention = flag;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Names the file in I/O errors.
fn at<T>(path: &Path, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => at(path, fs::write(path, text).map_err(Error::from))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn single(values: &[usize], what: &str) -> Result<usize> {
    match values {
        [v] => Ok(*v),
        _ => Err(Error::InvalidConfig(format!("expected a single {what} count, got {values:?}; lists are for grid"))),
    }
}

/// Feature columns used for fitting, the matching scheme, and where the
/// terminal indicator lands among them.
struct Selection {
    indices: Vec<usize>,
    scheme: BinningScheme,
    terminal: Option<usize>,
}

/// All configured features unless `names` picks a subset.
fn selection(config: &RunConfig, names: Option<&[String]>) -> Result<Selection> {
    let full = config.scheme()?;
    let indices = match names {
        Some(names) => names
            .iter()
            .map(|n| full.index_of(n).ok_or_else(|| Error::UnknownFeature(n.clone())))
            .collect::<Result<Vec<_>>>()?,
        None => (0..full.len()).collect(),
    };
    let names: Vec<String> = indices.iter().map(|&i| full.features()[i].name.clone()).collect();
    let terminal = config.mixture_config()?.em.terminal_feature.and_then(|t| indices.iter().position(|&i| i == t));
    Ok(Selection { scheme: full.select(&names)?, indices, terminal })
}

/// Reads a cohort with the binning stored in the model, falling back to the
/// run configuration for models saved without one.
fn model_cohort(
    data: &Path,
    settings: &Settings,
    mixture: &MixtureModel,
    meta: &ModelMetadata,
) -> Result<Vec<Trajectory>> {
    let (config, indices) = match &meta.scheme {
        Some(scheme) => {
            let config = RunConfig {
                time_unit: meta.time_unit.clone(),
                features: scheme.features().to_vec(),
                intervention_column: None,
                evaluation_features: None,
                terminal_intervention: false,
                ..settings.run_config()?
            };
            (config, (0..scheme.len()).collect())
        }
        None => {
            let config = settings.run_config()?;
            (config.clone(), selection(&config, None)?.indices)
        }
    };
    let cohort: Vec<Trajectory> =
        at(data, load_cohort(data, &config))?.iter().map(|t| t.select_features(&indices)).collect();
    let bins: Vec<usize> =
        indices.iter().map(|&i| config.scheme().map(|s| s.features()[i].bins)).collect::<Result<_>>()?;
    if bins != mixture.bins() {
        return Err(Error::DimensionMismatch(format!(
            "cohort bins {bins:?} do not match model bins {:?}",
            mixture.bins()
        )));
    }
    Ok(cohort)
}

fn fit(settings: &Settings, data: &Path, model: &Path, out: Option<&Path>, truth: Option<&Path>) -> Result<()> {
    let config = settings.run_config()?;
    let m = single(&config.subtypes, "subtype")?;
    let k = single(&config.states, "state")?;
    let sel = selection(&config, settings.features.as_deref())?;
    let cohort: Vec<Trajectory> =
        at(data, load_cohort(data, &config))?.iter().map(|t| t.select_features(&sel.indices)).collect();
    let mut mixture_config = config.mixture_config()?;
    mixture_config.em.terminal_feature = sel.terminal;
    let (mixture, diagnostics) = fit_mixture(&cohort, m, k, &sel.scheme.bins_per_feature(), &mixture_config)?;
    let meta = ModelMetadata { time_unit: config.time_unit.clone(), scheme: Some(sel.scheme) };
    at(model, save_model(&mixture, &meta, model))?;
    if let Some(out) = out {
        at(out, fs::write(out, serde_json::to_string_pretty(&diagnostics)? + "\n").map_err(Error::from))?;
    }

    let mut sizes = vec![0usize; m];
    for a in &mixture.assignments {
        sizes[a.subtype] += 1;
    }
    let mut text = format!(
        "fitted {m} subtype(s) x {k} state(s) on {} patients: {} alternation(s), converged {}, objective {}\n",
        cohort.len(),
        diagnostics.alternations,
        diagnostics.converged,
        mixture.objective_trace.last().copied().unwrap_or(f64::NAN),
    );
    for (s, n) in sizes.iter().enumerate() {
        writeln!(text, "subtype {s}: {n} patients, prior {}", mixture.prior[s]).unwrap();
    }
    if let Some(truth) = truth {
        let labels = at(truth, fs::File::open(truth).map_err(Error::from).and_then(read_truth_labels))?;
        let (hits, total) = label_recovery(&mixture, &labels)?;
        writeln!(text, "label accuracy {} ({hits}/{total} patients, best relabeling)", hits as f64 / total as f64)
            .unwrap();
    }
    print!("{text}");
    Ok(())
}

/// Correct assignments under the best one-to-one relabeling of subtypes.
fn label_recovery(mixture: &MixtureModel, truth: &BTreeMap<String, usize>) -> Result<(usize, usize)> {
    let mut pairs = Vec::with_capacity(mixture.assignments.len());
    for a in &mixture.assignments {
        let t = truth
            .get(&a.patient)
            .ok_or_else(|| Error::InvalidConfig(format!("patient {} is missing from the truth file", a.patient)))?;
        pairs.push((a.subtype, *t));
    }
    let n = pairs.iter().map(|&(p, t)| p.max(t) + 1).max().unwrap_or(0);
    if n > 16 {
        return Err(Error::InvalidConfig(format!("label recovery supports at most 16 labels, got {n}")));
    }
    let mut confusion = vec![vec![0usize; n]; n];
    for &(p, t) in &pairs {
        confusion[p][t] += 1;
    }
    // best[mask]: most hits matching the first popcount(mask) predicted
    // labels to the true labels in `mask`.
    let mut best = vec![0usize; 1 << n];
    for mask in 0usize..1 << n {
        let p = mask.count_ones() as usize;
        if p >= n {
            continue;
        }
        for t in (0..n).filter(|t| mask & (1 << t) == 0) {
            let next = mask | (1 << t);
            best[next] = best[next].max(best[mask] + confusion[p][t]);
        }
    }
    Ok((best[(1 << n) - 1], pairs.len()))
}

fn assign(settings: &Settings, model: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (mixture, meta) = at(model, load_model(model))?;
    let cohort = model_cohort(data, settings, &mixture, &meta)?;
    let mut text = String::from("patient_id,subtype");
    for m in 0..mixture.len() {
        write!(text, ",score_{m}").unwrap();
    }
    text.push('\n');
    for traj in &cohort {
        let (subtype, scores) = assign_subtype(&mixture, traj)?;
        write!(text, "{},{subtype}", traj.id()).unwrap();
        for s in scores {
            write!(text, ",{s}").unwrap();
        }
        text.push('\n');
    }
    emit(out, &text)?;
    eprintln!("assigned {} patients to {} subtype(s)", cohort.len(), mixture.len());
    Ok(())
}

fn forecast(settings: &Settings, model: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let config = settings.run_config()?;
    let (mixture, meta) = at(model, load_model(model))?;
    let cohort = model_cohort(data, settings, &mixture, &meta)?;
    let report = forecast_report(&mixture, &cohort, config.prefix_fraction, config.seed)?;
    let mut text = String::from("patient_id,subtype,cross_entropy,scored,skipped\n");
    for p in &report.patients {
        writeln!(text, "{},{},{},{},{}", p.patient, p.subtype, p.cross_entropy, p.scored, p.skipped).unwrap();
    }
    emit(out, &text)?;
    eprintln!(
        "mean cross-entropy {:.4} ± {:.4} over {} patients ({} excluded without held-out observations)",
        report.mean,
        report.standard_error,
        report.patients.len(),
        report.excluded.len()
    );
    Ok(())
}

fn grid(settings: &Settings, data: &Path, out: Option<&Path>) -> Result<()> {
    let config = settings.run_config()?;
    let cohort = at(data, load_cohort(data, &config))?;
    let report = grid_evaluate(&cohort, &config.subtypes, &config.states, &config.grid_config()?)?;
    emit(out, &report.to_csv())?;
    eprint!("{}", report.render_table());
    Ok(())
}

fn default_truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "cohort".into());
    out.with_file_name(format!("{stem}.truth.csv"))
}

fn simulate(settings: &Settings, out: &Path, truth: Option<PathBuf>, model: Option<&Path>) -> Result<()> {
    let config = settings.run_config()?;
    let scheme = config.scheme()?;
    let bins = scheme.bins_per_feature();
    let mixture = match model {
        Some(path) => {
            let (mixture, meta) = at(path, load_model(path))?;
            if let Some(stored) = &meta.scheme {
                if stored.features() != scheme.features() {
                    return Err(Error::InvalidConfig("model binning differs from the configured features".into()));
                }
            }
            if mixture.bins() != bins {
                return Err(Error::DimensionMismatch(format!(
                    "model bins {:?} do not match configured bins {bins:?}",
                    mixture.bins()
                )));
            }
            mixture
        }
        None => {
            let m = single(&config.subtypes, "subtype")?;
            let k = single(&config.states, "state")?;
            let mut mixture = demo_mixture(m, k, &bins, config.seed)?;
            let em = config.mixture_config()?.em;
            if let Some(t) = em.terminal_feature {
                for s in &mut mixture.subtypes {
                    apply_terminal_constraint(&mut s.emissions, t, em.terminal_epsilon())?;
                }
                mixture.validate()?;
            }
            mixture
        }
    };
    let cohort = sample_mixture_cohort(&mixture, &config.cohort_config())?;
    at(out, save_cohort(out, &cohort.trajectories, &config))?;
    let truth = truth.unwrap_or_else(|| default_truth_path(out));
    at(&truth, fs::File::create(&truth).map_err(Error::from).and_then(|f| write_truth(f, &cohort)))?;
    eprintln!(
        "sampled {} patients from {} subtype(s); truth in {}",
        cohort.trajectories.len(),
        mixture.len(),
        truth.display()
    );
    Ok(())
}

fn report(settings: &Settings, model: &Path, out: Option<&Path>) -> Result<()> {
    let (mixture, meta) = at(model, load_model(model))?;
    let scheme = match meta.scheme {
        Some(s) => s,
        None => settings.run_config()?.scheme()?,
    };
    let mut text = format!("subtype,state,expected_duration_{}", meta.time_unit);
    for f in scheme.features() {
        write!(text, ",{}", f.name).unwrap();
    }
    text.push('\n');
    for (m, subtype) in mixture.subtypes.iter().enumerate() {
        for step in progression_trajectory(subtype, &scheme, 0)? {
            write!(text, "{m},{},{}", step.state, step.expected_duration).unwrap();
            for v in step.expected_values {
                write!(text, ",{v}").unwrap();
            }
            text.push('\n');
        }
    }
    emit(out, &text)
}
