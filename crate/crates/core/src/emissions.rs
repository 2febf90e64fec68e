//! Categorical per-feature observation model.
//!
//! Each feature is discretized into equal-width bins over a fixed range;
//! values outside the range are treated as missing. Given the hidden state,
//! features are independent categorical draws, and missing features drop out
//! of the likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Equal-width binning of one feature over `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBinning {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub bins: usize,
}

impl FeatureBinning {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64, bins: usize) -> Result<Self> {
        let binning = FeatureBinning { name: name.into(), lower, upper, bins };
        binning.validate()?;
        Ok(binning)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::InvalidConfig(format!(
                "feature {}: range [{}, {}] is empty",
                self.name, self.lower, self.upper
            )));
        }
        if self.bins < 2 {
            return Err(Error::InvalidConfig(format!(
                "feature {}: at least 2 bins required, got {}",
                self.name, self.bins
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.bins as f64
    }

    /// `bins + 1` edges, first `lower`, last `upper`.
    pub fn edges(&self) -> Vec<f64> {
        let w = self.width();
        (0..=self.bins).map(|j| if j == self.bins { self.upper } else { self.lower + j as f64 * w }).collect()
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.lower + (bin as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|j| self.center(j)).collect()
    }

    /// Bin index for `value`, or `None` when it is out of range or NaN.
    ///
    /// Bins are half-open `[edge_j, edge_{j+1})` except the last, which also
    /// takes `upper`.
    pub fn discretize(&self, value: f64) -> Option<usize> {
        if !(value >= self.lower && value <= self.upper) {
            return None;
        }
        let j = ((value - self.lower) / self.width()).floor() as usize;
        Some(j.min(self.bins - 1))
    }
}

/// Binnings for every feature, in model feature order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinningScheme {
    features: Vec<FeatureBinning>,
}

impl BinningScheme {
    pub fn new(features: Vec<FeatureBinning>) -> Result<Self> {
        for (i, f) in features.iter().enumerate() {
            f.validate()?;
            if features[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::InvalidConfig(format!("feature {} listed twice", f.name)));
            }
        }
        Ok(BinningScheme { features })
    }

    pub fn features(&self) -> &[FeatureBinning] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, name: &str) -> Result<&FeatureBinning> {
        self.index_of(name).map(|i| &self.features[i]).ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn bins_per_feature(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.bins).collect()
    }

    pub fn discretize(&self, value: f64, feature: &str) -> Result<Option<usize>> {
        Ok(self.feature(feature)?.discretize(value))
    }

    /// Keeps only the named features, in the given order.
    pub fn select(&self, names: &[String]) -> Result<BinningScheme> {
        let features = names.iter().map(|n| self.feature(n).cloned()).collect::<Result<Vec<_>>>()?;
        BinningScheme::new(features)
    }
}

/// One observation time: a bin per feature, `None` where missing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<Option<usize>>);

impl Observation {
    pub fn missing(features: usize) -> Self {
        Observation(vec![None; features])
    }

    pub fn features(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, feature: usize) -> Option<usize> {
        self.0[feature]
    }

    pub fn is_all_missing(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().enumerate().filter_map(|(d, b)| b.map(|j| (d, j)))
    }

    pub fn select(&self, features: &[usize]) -> Observation {
        Observation(features.iter().map(|&d| self.0[d]).collect())
    }
}

impl From<Vec<Option<usize>>> for Observation {
    fn from(v: Vec<Option<usize>>) -> Self {
        Observation(v)
    }
}

/// `w[k][d][j] = P(Y_d = j | Z = k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionTable {
    probs: Vec<Vec<Vec<f64>>>,
}

impl EmissionTable {
    /// Validates that every `(state, feature)` row is a probability vector and
    /// that bin counts agree across states.
    pub fn new(probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let table = EmissionTable { probs };
        table.validate()?;
        Ok(table)
    }

    pub(crate) fn from_rows_unchecked(probs: Vec<Vec<Vec<f64>>>) -> Self {
        EmissionTable { probs }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.probs.first() else {
            return Err(Error::InvariantViolation("emission table has no states".into()));
        };
        let bins: Vec<usize> = first.iter().map(Vec::len).collect();
        for (k, state) in self.probs.iter().enumerate() {
            let shape: Vec<usize> = state.iter().map(Vec::len).collect();
            if shape != bins {
                return Err(Error::InvariantViolation(format!(
                    "emission state {k} has bin layout {shape:?}, expected {bins:?}"
                )));
            }
            for (d, row) in state.iter().enumerate() {
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::InvariantViolation(format!(
                        "emission row ({k}, {d}) has an entry outside [0, 1]"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvariantViolation(format!("emission row ({k}, {d}) sums to {sum}")));
                }
            }
        }
        Ok(())
    }

    pub fn uniform(states: usize, bins: &[usize]) -> Self {
        let state: Vec<Vec<f64>> = bins.iter().map(|&j| vec![1.0 / j as f64; j]).collect();
        EmissionTable { probs: vec![state; states] }
    }

    pub fn states(&self) -> usize {
        self.probs.len()
    }

    pub fn features(&self) -> usize {
        self.probs[0].len()
    }

    pub fn bins(&self) -> Vec<usize> {
        self.probs[0].iter().map(Vec::len).collect()
    }

    pub fn row(&self, state: usize, feature: usize) -> &[f64] {
        &self.probs[state][feature]
    }

    pub(crate) fn row_mut(&mut self, state: usize, feature: usize) -> &mut Vec<f64> {
        &mut self.probs[state][feature]
    }

    pub fn prob(&self, state: usize, feature: usize, bin: usize) -> f64 {
        self.probs[state][feature][bin]
    }

    pub fn rows(&self) -> &[Vec<Vec<f64>>] {
        &self.probs
    }

    /// `Σ_d log w[state][d][y_d]` over observed features; 0 when nothing is
    /// observed.
    pub fn log_likelihood(&self, state: usize, obs: &Observation) -> f64 {
        let rows = &self.probs[state];
        obs.observed().map(|(d, j)| rows[d][j].ln()).sum()
    }

    /// `Σ_j w[state][feature][j] · center_j`.
    pub fn expected_feature_value(&self, state: usize, feature: usize, binning: &FeatureBinning) -> f64 {
        self.probs[state][feature].iter().enumerate().map(|(j, p)| p * binning.center(j)).sum()
    }

    /// Restricts the table to a subset of features.
    pub fn select(&self, features: &[usize]) -> EmissionTable {
        EmissionTable { probs: self.probs.iter().map(|s| features.iter().map(|&d| s[d].clone()).collect()).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn heart_rate() -> FeatureBinning {
        FeatureBinning::new("heart_rate", 40.0, 150.0, 5).unwrap()
    }

    #[test]
    fn lower_bound_is_first_bin() {
        assert_eq!(heart_rate().discretize(40.0), Some(0));
    }

    #[test]
    fn outliers_are_missing() {
        let hr = heart_rate();
        assert_eq!(hr.discretize(151.0), None);
        assert_eq!(hr.discretize(39.999), None);
        assert_eq!(hr.discretize(f64::NAN), None);
    }

    #[test]
    fn interior_value() {
        assert_eq!(heart_rate().discretize(95.0), Some(2));
    }

    #[test]
    fn upper_bound_goes_to_last_bin() {
        assert_eq!(heart_rate().discretize(150.0), Some(4));
    }

    #[test]
    fn edges_and_centers() {
        let hr = heart_rate();
        assert_eq!(hr.edges(), vec![40.0, 62.0, 84.0, 106.0, 128.0, 150.0]);
        assert_eq!(hr.centers(), vec![51.0, 73.0, 95.0, 117.0, 139.0]);
    }

    #[test]
    fn invalid_binnings() {
        assert!(FeatureBinning::new("x", 1.0, 1.0, 5).is_err());
        assert!(FeatureBinning::new("x", 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn scheme_lookup() {
        let scheme = BinningScheme::new(vec![heart_rate()]).unwrap();
        assert_eq!(scheme.discretize(95.0, "heart_rate").unwrap(), Some(2));
        assert!(matches!(scheme.discretize(95.0, "sbp"), Err(Error::UnknownFeature(_))));
        assert!(BinningScheme::new(vec![heart_rate(), heart_rate()]).is_err());
    }

    fn table() -> EmissionTable {
        EmissionTable::new(vec![vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.4, 0.1]]]).unwrap()
    }

    #[test]
    fn all_missing_has_zero_log_likelihood() {
        assert_eq!(table().log_likelihood(0, &Observation::missing(2)), 0.0);
    }

    #[test]
    fn single_feature_log_likelihood() {
        let obs = Observation(vec![Some(0), None]);
        assert_abs_diff_eq!(table().log_likelihood(0, &obs), 0.2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn independent_features_multiply() {
        let obs = Observation(vec![Some(2), Some(2)]);
        assert_abs_diff_eq!(table().log_likelihood(0, &obs), 0.05f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn expected_values() {
        let hr = heart_rate();
        let point = EmissionTable::new(vec![vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]]]).unwrap();
        assert_eq!(point.expected_feature_value(0, 0, &hr), 51.0);
        let uniform = EmissionTable::uniform(1, &[5]);
        assert_abs_diff_eq!(uniform.expected_feature_value(0, 0, &hr), 95.0, epsilon = 1e-12);
        let ends = EmissionTable::new(vec![vec![vec![0.5, 0.0, 0.0, 0.0, 0.5]]]).unwrap();
        assert_eq!(ends.expected_feature_value(0, 0, &hr), 95.0);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(matches!(EmissionTable::new(vec![vec![vec![0.5, 0.3]]]), Err(Error::InvariantViolation(_))));
        assert!(EmissionTable::new(vec![vec![vec![1.5, -0.5]]]).is_err());
        assert!(EmissionTable::new(vec![vec![vec![0.5, 0.5]], vec![vec![1.0 / 3.0; 3]]]).is_err());
    }

    proptest! {
        #[test]
        fn discretize_is_monotone(a in 40.0f64..=150.0, b in 40.0f64..=150.0) {
            let hr = heart_rate();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(hr.discretize(lo).unwrap() <= hr.discretize(hi).unwrap());
        }

        #[test]
        fn center_within_half_width(v in 40.0f64..=150.0, bins in 2usize..12) {
            let f = FeatureBinning::new("f", 40.0, 150.0, bins).unwrap();
            let j = f.discretize(v).unwrap();
            prop_assert!((f.center(j) - v).abs() <= f.width() / 2.0 + 1e-12);
        }

        #[test]
        fn log_likelihood_is_additive(mask in proptest::collection::vec(any::<bool>(), 2), drop in 0usize..2) {
            let t = table();
            let obs = Observation(mask.iter().enumerate().map(|(d, &m)| m.then_some(d)).collect());
            let mut without = obs.clone();
            without.0[drop] = None;
            let term = obs.get(drop).map_or(0.0, |j| t.prob(0, drop, j).ln());
            prop_assert!((t.log_likelihood(0, &obs) - t.log_likelihood(0, &without) - term).abs() < 1e-14);
        }
    }
}
