//! Continuous-time Markov chain core.
//!
//! Generators carry a structure mask and bounded rates. Interval transition
//! probabilities come from [`expm`](crate::expm::expm); end-conditioned path
//! statistics (expected transition counts and sojourn times given the states
//! at both ends of an interval) come from the augmented-matrix construction
//!
//! ```text
//! expm(Δ · [[Q, B], [0, Q]]) = [[P, ∫₀^Δ e^{sQ} B e^{(Δ-s)Q} ds], [0, P]]
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expm::expm;

/// Endpoint probabilities below this are treated as unreachable.
pub const P_FLOOR: f64 = 1e-12;

const ROW_RENORM_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for RateBounds {
    fn default() -> Self {
        RateBounds { min: 1e-6, max: 1e3 }
    }
}

impl RateBounds {
    pub fn clamp(&self, rate: f64) -> f64 {
        rate.clamp(self.min, self.max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::InvalidConfig(format!(
                "rate bounds must satisfy 0 < min <= max < inf, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Which transitions a generator may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    /// Every off-diagonal transition allowed.
    #[default]
    Full,
    /// Only `k -> k + 1`; the last state is absorbing.
    LeftToRight,
}

impl Structure {
    pub fn mask(self, states: usize) -> DMatrix<bool> {
        DMatrix::from_fn(states, states, |a, b| match self {
            Structure::Full => a != b,
            Structure::LeftToRight => b == a + 1,
        })
    }
}

/// A validated CTMC rate matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorMatrix {
    rates: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl GeneratorMatrix {
    /// Validates raw off-diagonal rates against a structure mask.
    ///
    /// The diagonal of `raw` is ignored and recomputed so rows sum to zero.
    /// Masked-out entries are zeroed; nonzero allowed rates are clamped into
    /// `bounds`. Negative off-diagonal input is rejected rather than repaired.
    pub fn new(raw: &DMatrix<f64>, mask: &DMatrix<bool>, bounds: RateBounds) -> Result<Self> {
        if !raw.is_square() {
            return Err(Error::NonSquareInput { rows: raw.nrows(), cols: raw.ncols() });
        }
        if mask.shape() != raw.shape() {
            return Err(Error::NonSquareInput { rows: mask.nrows(), cols: mask.ncols() });
        }
        let k = raw.nrows();
        let mut rates = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let value = raw[(a, b)];
                if !value.is_finite() {
                    return Err(Error::NonFiniteRate { row: a, col: b });
                }
                if value < 0.0 {
                    return Err(Error::NegativeOffDiagonal { row: a, col: b, value });
                }
                if mask[(a, b)] && value > 0.0 {
                    rates[(a, b)] = bounds.clamp(value);
                }
            }
        }
        let mut clean_mask = mask.clone();
        for a in 0..k {
            clean_mask[(a, a)] = false;
        }
        Ok(Self::from_offdiagonal(rates, clean_mask))
    }

    /// Rebuilds a generator from stored rates without clamping.
    ///
    /// Off-diagonal rates must be finite and non-negative, zero wherever the
    /// mask forbids a transition, and the mask diagonal must be false. The
    /// stored diagonal must agree with the row sums to within rounding.
    pub fn from_parts(rates: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if !rates.is_square() {
            return Err(Error::NonSquareInput { rows: rates.nrows(), cols: rates.ncols() });
        }
        if mask.shape() != rates.shape() {
            return Err(Error::NonSquareInput { rows: mask.nrows(), cols: mask.ncols() });
        }
        let k = rates.nrows();
        for a in 0..k {
            if mask[(a, a)] {
                return Err(Error::InvariantViolation(format!("mask allows self-transition at state {a}")));
            }
            for b in (0..k).filter(|&b| b != a) {
                let value = rates[(a, b)];
                if !value.is_finite() {
                    return Err(Error::NonFiniteRate { row: a, col: b });
                }
                if value < 0.0 {
                    return Err(Error::NegativeOffDiagonal { row: a, col: b, value });
                }
                if !mask[(a, b)] && value != 0.0 {
                    return Err(Error::InvariantViolation(format!("rate {value} at masked entry ({a}, {b})")));
                }
            }
        }
        let stored: Vec<f64> = (0..k).map(|a| rates[(a, a)]).collect();
        let generator = Self::from_offdiagonal(rates, mask);
        for (a, &d) in stored.iter().enumerate() {
            let derived = generator.rates[(a, a)];
            if !d.is_finite() || (d - derived).abs() > 1e-9 * (1.0 + derived.abs()) {
                return Err(Error::InvariantViolation(format!(
                    "row {a} does not sum to zero (diagonal {d}, expected {derived})"
                )));
            }
        }
        Ok(generator)
    }

    /// The all-zero generator: every state absorbing.
    pub fn zeros(states: usize, structure: Structure) -> Self {
        GeneratorMatrix { rates: DMatrix::zeros(states, states), mask: structure.mask(states) }
    }

    /// Builds from off-diagonal rates already known to be valid.
    pub(crate) fn from_offdiagonal(mut rates: DMatrix<f64>, mask: DMatrix<bool>) -> Self {
        let k = rates.nrows();
        for a in 0..k {
            rates[(a, a)] = 0.0;
            let exit: f64 = (0..k).filter(|&b| b != a).map(|b| rates[(a, b)]).sum();
            rates[(a, a)] = -exit;
        }
        GeneratorMatrix { rates, mask }
    }

    pub fn size(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[(from, to)]
    }

    /// Total rate of leaving `state`, i.e. `|Q_kk|`.
    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.rates[(state, state)]
    }

    /// True when the mask allows exactly the `k -> k + 1` transitions.
    pub fn is_left_to_right(&self) -> bool {
        self.mask == Structure::LeftToRight.mask(self.size())
    }

    /// `P(Z(t + Δ) = b | Z(t) = a) = expm(Δ Q)_ab`.
    pub fn transition_matrix(&self, interval: f64) -> Result<TransitionMatrix> {
        if !(interval.is_finite() && interval >= 0.0) {
            return Err(Error::InvalidInterval(interval));
        }
        let k = self.size();
        if interval == 0.0 {
            return Ok(TransitionMatrix { probs: DMatrix::identity(k, k), interval });
        }
        let mut probs = expm(&(&self.rates * interval));
        for a in 0..k {
            let mut row = probs.row_mut(a);
            let mut worst_negative = 0.0f64;
            for p in row.iter_mut() {
                if *p < 0.0 {
                    worst_negative = worst_negative.max(-*p);
                    *p = 0.0;
                }
            }
            let sum: f64 = row.iter().sum();
            let deviation = (sum - 1.0).abs().max(worst_negative);
            if !(deviation <= ROW_RENORM_TOL) {
                return Err(Error::ExpmInaccuracy { row: a, deviation });
            }
            row /= sum;
        }
        Ok(TransitionMatrix { probs, interval })
    }

    /// Expected transition counts and sojourn times for every pair of
    /// interval endpoints, one augmented exponential per integrand.
    pub fn end_conditioned_stats(&self, interval: f64) -> Result<EndConditionedStats> {
        if !(interval.is_finite() && interval > 0.0) {
            return Err(Error::NonPositiveInterval(interval));
        }
        let k = self.size();
        let p = self.transition_matrix(interval)?;
        let mut stats = EndConditionedStats {
            interval,
            states: k,
            transitions: vec![0.0; k * k * k * k],
            sojourn: vec![0.0; k * k * k],
        };
        let mut unit = DMatrix::zeros(k, k);
        for c in 0..k {
            unit[(c, c)] = 1.0;
            let integral = self.interval_integral(interval, &unit);
            unit[(c, c)] = 0.0;
            for a in 0..k {
                for b in 0..k {
                    let pab = p.probs[(a, b)];
                    if pab >= P_FLOOR {
                        stats.sojourn[(a * k + b) * k + c] = (integral[(a, b)] / pab).max(0.0);
                    }
                }
            }
        }
        for c in 0..k {
            for d in 0..k {
                let rate = self.rates[(c, d)];
                if c == d || rate == 0.0 {
                    continue;
                }
                unit[(c, d)] = rate;
                let integral = self.interval_integral(interval, &unit);
                unit[(c, d)] = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        let pab = p.probs[(a, b)];
                        if pab >= P_FLOOR {
                            stats.transitions[((a * k + b) * k + c) * k + d] = (integral[(a, b)] / pab).max(0.0);
                        }
                    }
                }
            }
        }
        Ok(stats)
    }

    /// `∫₀^Δ expm(sQ) B expm((Δ-s)Q) ds` from the upper-right block of a
    /// 2K×2K exponential.
    fn interval_integral(&self, interval: f64, b: &DMatrix<f64>) -> DMatrix<f64> {
        augmented_integral(&self.rates, b, interval)
    }

    /// Expected transition counts `N[c][d]` and sojourn times `R[c]` summed
    /// over endpoint pairs, each pair weighted by `weights[(a, b)]`.
    ///
    /// Equivalent to contracting [`EndConditionedStats`] with the weights, but
    /// needs a single augmented exponential built on `Qᵀ`:
    /// the upper-right block of `expm(Δ [[Qᵀ, W], [0, Qᵀ]])` holds
    /// `Σ_ab W_ab ∫ e^{sQ}_{ac} e^{(Δ-s)Q}_{db} ds` at `(c, d)`, where `W` is the
    /// weights divided elementwise by `P(Δ)`.
    pub fn weighted_path_statistics(
        &self,
        interval: f64,
        transition: &TransitionMatrix,
        weights: &DMatrix<f64>,
    ) -> (DMatrix<f64>, Vec<f64>) {
        let k = self.size();
        let scaled = DMatrix::from_fn(k, k, |a, b| {
            let pab = transition.probs[(a, b)];
            if pab >= P_FLOOR {
                weights[(a, b)] / pab
            } else {
                0.0
            }
        });
        let integral = augmented_integral(&self.rates.transpose(), &scaled, interval);
        let mut counts = DMatrix::zeros(k, k);
        for c in 0..k {
            for d in 0..k {
                if c != d && self.rates[(c, d)] > 0.0 {
                    counts[(c, d)] = (self.rates[(c, d)] * integral[(c, d)]).max(0.0);
                }
            }
        }
        let sojourn = (0..k).map(|c| integral[(c, c)].max(0.0)).collect();
        (counts, sojourn)
    }

    /// Mean holding time `1 / |Q_kk|` per state; `f64::INFINITY` marks an
    /// absorbing state.
    pub fn mean_sojourn_times(&self) -> Vec<f64> {
        (0..self.size())
            .map(|k| {
                let exit = self.exit_rate(k);
                if exit > 0.0 {
                    1.0 / exit
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }
}

fn augmented_integral(q: &DMatrix<f64>, b: &DMatrix<f64>, interval: f64) -> DMatrix<f64> {
    let k = q.nrows();
    let mut aug = DMatrix::zeros(2 * k, 2 * k);
    aug.view_mut((0, 0), (k, k)).copy_from(&(q * interval));
    aug.view_mut((k, k), (k, k)).copy_from(&(q * interval));
    aug.view_mut((0, k), (k, k)).copy_from(&(b * interval));
    expm(&aug).view((0, k), (k, k)).into_owned()
}

/// Row-stochastic matrix of interval transition probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub probs: DMatrix<f64>,
    pub interval: f64,
}

impl TransitionMatrix {
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.probs[(from, to)]
    }

    pub fn size(&self) -> usize {
        self.probs.nrows()
    }
}

/// `E[N_cd(Δ) | Z(0)=a, Z(Δ)=b]` and `E[R_c(Δ) | Z(0)=a, Z(Δ)=b]`.
///
/// Entries for unreachable endpoint pairs are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EndConditionedStats {
    pub interval: f64,
    states: usize,
    transitions: Vec<f64>,
    sojourn: Vec<f64>,
}

impl EndConditionedStats {
    pub fn states(&self) -> usize {
        self.states
    }

    pub fn expected_transitions(&self, start: usize, end: usize, from: usize, to: usize) -> f64 {
        let k = self.states;
        self.transitions[((start * k + end) * k + from) * k + to]
    }

    pub fn expected_sojourn(&self, start: usize, end: usize, state: usize) -> f64 {
        let k = self.states;
        self.sojourn[(start * k + end) * k + state]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(k: usize) -> DMatrix<bool> {
        Structure::Full.mask(k)
    }

    fn random_generator(rng: &mut ChaCha8Rng, k: usize) -> GeneratorMatrix {
        let raw = DMatrix::from_fn(k, k, |a, b| if a == b { 0.0 } else { rng.random_range(0.05..2.0) });
        GeneratorMatrix::new(&raw, &full(k), RateBounds::default()).unwrap()
    }

    #[test]
    fn zero_rates_give_zero_generator() {
        let raw = DMatrix::zeros(3, 3);
        for mask in [full(3), Structure::LeftToRight.mask(3)] {
            let q = GeneratorMatrix::new(&raw, &mask, RateBounds::default()).unwrap();
            assert!(q.rates().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn diagonal_is_derived() {
        let raw = DMatrix::from_row_slice(2, 2, &[7.0, 0.5, 0.0, 9.0]);
        let q = GeneratorMatrix::new(&raw, &full(2), RateBounds::default()).unwrap();
        assert_eq!(q.rate(0, 0), -0.5);
        assert_eq!(q.rate(1, 1), 0.0);
    }

    #[test]
    fn negative_rate_is_rejected() {
        let mut raw = DMatrix::from_element(3, 3, 0.2);
        raw[(1, 2)] = -0.1;
        let err = GeneratorMatrix::new(&raw, &full(3), RateBounds::default()).unwrap_err();
        assert!(matches!(err, Error::NegativeOffDiagonal { row: 1, col: 2, .. }));
    }

    #[test]
    fn non_square_is_rejected() {
        let raw = DMatrix::zeros(2, 3);
        let mask = DMatrix::from_element(2, 3, true);
        assert!(matches!(
            GeneratorMatrix::new(&raw, &mask, RateBounds::default()),
            Err(Error::NonSquareInput { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn mask_and_bounds_are_applied() {
        let raw = DMatrix::from_row_slice(3, 3, &[0.0, 5e3, 1e-9, 0.3, 0.0, 0.4, 0.2, 0.2, 0.0]);
        let q = GeneratorMatrix::new(&raw, &Structure::LeftToRight.mask(3), RateBounds::default()).unwrap();
        assert_eq!(q.rate(0, 1), 1e3);
        assert_eq!(q.rate(0, 2), 0.0);
        assert_eq!(q.rate(1, 0), 0.0);
        assert_eq!(q.rate(1, 2), 0.4);
        assert_eq!(q.rates().row(2).iter().copied().collect::<Vec<_>>(), vec![0.0; 3]);
        assert!(q.is_left_to_right());
    }

    #[test]
    fn zero_interval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_generator(&mut rng, 4);
        assert_eq!(q.transition_matrix(0.0).unwrap().probs, DMatrix::identity(4, 4));
    }

    #[test]
    fn single_exit_chain_halves_at_ln2() {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let q = GeneratorMatrix::new(&raw, &full(2), RateBounds::default()).unwrap();
        let p = q.transition_matrix(std::f64::consts::LN_2).unwrap();
        assert_abs_diff_eq!(p.prob(0, 0), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(p.prob(0, 1), 0.5, epsilon = 1e-14);
        assert_eq!(p.prob(1, 0), 0.0);
        assert_eq!(p.prob(1, 1), 1.0);
    }

    #[test]
    fn negative_interval_is_rejected() {
        let q = GeneratorMatrix::zeros(2, Structure::Full);
        assert!(matches!(q.transition_matrix(-1.0), Err(Error::InvalidInterval(_))));
        assert!(matches!(q.end_conditioned_stats(0.0), Err(Error::NonPositiveInterval(_))));
    }

    #[test]
    fn single_exit_chain_has_one_transition() {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let q = GeneratorMatrix::new(&raw, &full(2), RateBounds::default()).unwrap();
        for dt in [0.1, 1.0, 7.5] {
            let s = q.end_conditioned_stats(dt).unwrap();
            assert_abs_diff_eq!(s.expected_transitions(0, 1, 0, 1), 1.0, epsilon = 1e-10);
            // Staying in state 0 the whole way.
            assert_abs_diff_eq!(s.expected_sojourn(0, 0, 0), dt, epsilon = 1e-10);
            assert_eq!(s.expected_transitions(1, 0, 0, 1), 0.0);
        }
    }

    #[test]
    fn sojourn_sums_to_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in 1..=4 {
            let q = random_generator(&mut rng, k);
            let s = q.end_conditioned_stats(2.5).unwrap();
            for a in 0..k {
                for b in 0..k {
                    let total: f64 = (0..k).map(|c| s.expected_sojourn(a, b, c)).sum();
                    assert_abs_diff_eq!(total, 2.5, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn weighted_route_matches_tensor_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..=4 {
            let q = random_generator(&mut rng, k);
            let dt = rng.random_range(0.1..3.0);
            let p = q.transition_matrix(dt).unwrap();
            let w = DMatrix::from_fn(k, k, |_, _| rng.random_range(0.0..5.0));
            let (counts, sojourn) = q.weighted_path_statistics(dt, &p, &w);
            let s = q.end_conditioned_stats(dt).unwrap();
            for c in 0..k {
                let r: f64 = (0..k)
                    .flat_map(|a| (0..k).map(move |b| (a, b)))
                    .map(|(a, b)| w[(a, b)] * s.expected_sojourn(a, b, c))
                    .sum();
                assert_abs_diff_eq!(sojourn[c], r, epsilon = 1e-10 * r.max(1.0));
                for d in 0..k {
                    let n: f64 = (0..k)
                        .flat_map(|a| (0..k).map(move |b| (a, b)))
                        .map(|(a, b)| w[(a, b)] * s.expected_transitions(a, b, c, d))
                        .sum();
                    assert_abs_diff_eq!(counts[(c, d)], n, epsilon = 1e-10 * n.max(1.0));
                }
            }
        }
    }

    #[test]
    fn mean_sojourn_times() {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let q = GeneratorMatrix::new(&raw, &full(2), RateBounds::default()).unwrap();
        assert_eq!(q.mean_sojourn_times(), vec![0.5, f64::INFINITY]);

        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.25, 0.0]);
        let q = GeneratorMatrix::new(&raw, &full(2), RateBounds::default()).unwrap();
        assert_eq!(q.mean_sojourn_times(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_generator(&mut rng, 3);
        assert_eq!(q.transition_matrix(1.3).unwrap(), q.transition_matrix(1.3).unwrap());
    }
}
