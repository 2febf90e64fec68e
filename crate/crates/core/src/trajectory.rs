use crate::emissions::Observation;
use crate::error::{Error, Result};

/// One patient's observation times and binned observation vectors.
///
/// Timestamps are finite and strictly increasing; there is at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    id: String,
    times: Vec<f64>,
    observations: Vec<Observation>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, times: Vec<f64>, observations: Vec<Observation>) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidTrajectory { id: id.clone(), reason };
        if times.is_empty() {
            return Err(invalid("no timepoints".into()));
        }
        if times.len() != observations.len() {
            return Err(invalid(format!("{} timestamps but {} observation vectors", times.len(), observations.len())));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(invalid("non-finite timestamp".into()));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(invalid(format!("timestamps not strictly increasing at {} -> {}", w[0], w[1])));
        }
        let d = observations[0].features();
        if observations.iter().any(|o| o.features() != d) {
            return Err(invalid("observation vectors differ in length".into()));
        }
        Ok(Trajectory { id, times, observations })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> usize {
        self.observations[0].features()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Gaps between consecutive timestamps.
    pub fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.times.windows(2).map(|w| w[1] - w[0])
    }

    /// Splits after the first `n` timepoints. The tail is `None` when empty.
    pub fn split_at(&self, n: usize) -> (Trajectory, Option<Trajectory>) {
        let n = n.clamp(1, self.len());
        let head = Trajectory {
            id: self.id.clone(),
            times: self.times[..n].to_vec(),
            observations: self.observations[..n].to_vec(),
        };
        let tail = (n < self.len()).then(|| Trajectory {
            id: self.id.clone(),
            times: self.times[n..].to_vec(),
            observations: self.observations[n..].to_vec(),
        });
        (head, tail)
    }

    /// Same trajectory with every timestamp moved by `offset`.
    pub fn shifted(&self, offset: f64) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            times: self.times.iter().map(|t| t + offset).collect(),
            observations: self.observations.clone(),
        }
    }

    /// Keeps only the given feature columns.
    pub fn select_features(&self, features: &[usize]) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            times: self.times.clone(),
            observations: self.observations.iter().map(|o| o.select(features)).collect(),
        }
    }

    /// Number of non-missing (time, feature) entries.
    pub fn observed_count(&self) -> usize {
        self.observations.iter().map(|o| o.observed().count()).sum()
    }
}
