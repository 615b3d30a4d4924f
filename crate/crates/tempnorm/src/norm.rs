//! Streaming baseline-adaptive normalization.
//!
//! A stream is standardized against an exponential moving average (EMA) and
//! exponential moving variance (EMVar) that start at a population prior of
//! mean 0 and variance 1 and adapt toward the individual as samples arrive.
//! The adaptation speed is controlled by a half-life expressed in samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::TempNormError;

/// Output magnitude used when the running variance has collapsed to zero
/// and the current sample deviates from the mean.
pub const DEGENERATE_CAP: f64 = 1e6;

/// Default lower edge of the unused band, in standard deviations.
pub const DEFAULT_LOWER: f64 = 1.0;
/// Default upper edge of the unused band, in standard deviations.
pub const DEFAULT_UPPER: f64 = 2.0;
/// Default binarization threshold for scores in the unused band.
pub const DEFAULT_BINARIZE: f64 = 1.5;

/// Default prenormalization offset for raw ratings.
pub const DEFAULT_OFFSET: f64 = 6.0;
/// Default prenormalization scale for raw ratings.
pub const DEFAULT_SCALE: f64 = 4.0;

/// Adaptation half-life in number of samples.
///
/// `Infinite` freezes the state at the population prior, so normalization
/// reduces to a single population-wide standardization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HalfLife {
    Finite(f64),
    Infinite,
}

impl HalfLife {
    /// A finite half-life; must be a positive finite number of samples.
    pub fn finite(value: f64) -> Result<Self, TempNormError> {
        if value.is_finite() && value > 0.0 {
            Ok(HalfLife::Finite(value))
        } else {
            Err(TempNormError::InvalidParameter(format!(
                "half-life must be positive and finite, got {value}"
            )))
        }
    }

    /// Decay weight of new samples: `1 - 0.5^(1/t_half)`, 0 for `Infinite`.
    pub fn decay(&self) -> f64 {
        match *self {
            HalfLife::Finite(t) => 1.0 - 0.5_f64.powf(1.0 / t),
            HalfLife::Infinite => 0.0,
        }
    }
}

impl fmt::Display for HalfLife {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HalfLife::Finite(t) => write!(f, "{t}"),
            HalfLife::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for HalfLife {
    type Err = TempNormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("inf") {
            return Ok(HalfLife::Infinite);
        }
        let v: f64 = s.parse().map_err(|_| {
            TempNormError::InvalidParameter(format!("unparseable half-life {s:?}"))
        })?;
        HalfLife::finite(v)
    }
}

impl Serialize for HalfLife {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for HalfLife {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Running state of one normalized scalar stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempNorm {
    mean: f64,
    var: f64,
    decay: f64,
    count: u64,
    /// Optional variance floor for production use; 0.0 disables it.
    var_min: f64,
    degenerate_events: u64,
}

impl TempNorm {
    /// Fresh stream at the population prior (mean 0, variance 1).
    pub fn new(half_life: HalfLife) -> Self {
        Self::with_prior(half_life, 0.0, 1.0)
    }

    /// Fresh stream at an explicit prior.
    pub fn with_prior(half_life: HalfLife, mean: f64, var: f64) -> Self {
        TempNorm {
            mean,
            var,
            decay: half_life.decay(),
            count: 0,
            var_min: 0.0,
            degenerate_events: 0,
        }
    }

    /// Sets a lower bound on the running variance.
    pub fn with_var_floor(mut self, var_min: f64) -> Self {
        self.var_min = var_min.max(0.0);
        self
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Number of steps that hit a zero running variance with a nonzero delta.
    pub fn degenerate_events(&self) -> u64 {
        self.degenerate_events
    }

    /// Normalizes one sample and then folds it into the running statistics.
    ///
    /// The sample is scored against the statistics *before* the update, so
    /// the first sample of a fresh stream passes through unchanged.
    pub fn step(&mut self, x: f64) -> Result<f64, TempNormError> {
        if !x.is_finite() {
            return Err(TempNormError::InvalidInput(format!(
                "non-finite sample {x}"
            )));
        }
        let delta = x - self.mean;
        let y = if self.var > 0.0 {
            delta / self.var.sqrt()
        } else if delta == 0.0 {
            0.0
        } else {
            self.degenerate_events += 1;
            delta.signum() * DEGENERATE_CAP
        };
        let beta = self.decay * delta;
        self.mean += beta;
        self.var = (1.0 - self.decay) * (self.var + beta * delta);
        if self.var < self.var_min {
            self.var = self.var_min;
        }
        self.count += 1;
        Ok(y)
    }

    /// Folds a sample into the statistics without emitting a score.
    /// Used for enrollment warm-up.
    pub fn observe(&mut self, x: f64) -> Result<(), TempNormError> {
        self.step(x).map(|_| ())
    }
}

/// Normalizes a whole sequence by folding [`TempNorm::step`] from the prior.
pub fn tempnorm_sequence(xs: &[f64], half_life: HalfLife) -> Result<Vec<f64>, TempNormError> {
    tempnorm_sequence_from(xs, half_life, 0.0, 1.0)
}

/// Same as [`tempnorm_sequence`] but starting at an explicit prior.
pub fn tempnorm_sequence_from(
    xs: &[f64],
    half_life: HalfLife,
    prior_mean: f64,
    prior_var: f64,
) -> Result<Vec<f64>, TempNormError> {
    if xs.is_empty() {
        return Err(TempNormError::InvalidInput("empty sequence".into()));
    }
    let mut state = TempNorm::with_prior(half_life, prior_mean, prior_var);
    let mut out = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let y = state
            .step(x)
            .map_err(|e| TempNormError::AtIndex(i, Box::new(e)))?;
        out.push(y);
    }
    Ok(out)
}

/// `(raw - offset) / scale`; maps raw ratings onto the population prior scale.
pub fn prenormalize(raw: f64, offset: f64, scale: f64) -> Result<f64, TempNormError> {
    if scale <= 0.0 {
        return Err(TempNormError::InvalidParameter(format!(
            "prenormalization scale must be positive, got {scale}"
        )));
    }
    Ok((raw - offset) / scale)
}

/// The larger of the two per-dimension normalized scores.
pub fn combine_max(mania: f64, depression: f64) -> f64 {
    mania.max(depression)
}

/// Band a normalized score falls into. One-sided: large negative scores are
/// typical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Typical,
    Unused,
    Anomaly,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Typical => write!(f, "typical"),
            Region::Unused => write!(f, "unused"),
            Region::Anomaly => write!(f, "anomaly"),
        }
    }
}

/// Assigns a normalized score to a region. Scores exactly at a boundary go
/// to `Unused`.
pub fn classify_region(y: f64, lower: f64, upper: f64) -> Result<Region, TempNormError> {
    if lower >= upper {
        return Err(TempNormError::InvalidParameter(format!(
            "region thresholds must satisfy lower < upper, got {lower} >= {upper}"
        )));
    }
    Ok(if y < lower {
        Region::Typical
    } else if y > upper {
        Region::Anomaly
    } else {
        Region::Unused
    })
}

/// Two-way split of a score; the boundary binarizes upward to `Anomaly`.
pub fn binarize(y: f64, threshold: f64) -> Region {
    if y < threshold {
        Region::Typical
    } else {
        Region::Anomaly
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn decay_spot_values() {
        assert_eq!(HalfLife::finite(1.0).unwrap().decay(), 0.5);
        assert_eq!(HalfLife::Infinite.decay(), 0.0);
        assert_relative_eq!(
            HalfLife::finite(2.0).unwrap().decay(),
            1.0 - 0.5_f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn decay_rejects_nonpositive() {
        assert!(HalfLife::finite(0.0).is_err());
        assert!(HalfLife::finite(-3.0).is_err());
        assert!(HalfLife::finite(f64::NAN).is_err());
    }

    #[test]
    fn half_life_parses_inf() {
        assert_eq!("inf".parse::<HalfLife>().unwrap(), HalfLife::Infinite);
        assert_eq!("16".parse::<HalfLife>().unwrap(), HalfLife::Finite(16.0));
        assert!("zero".parse::<HalfLife>().is_err());
    }

    #[test]
    fn step_hand_trace() {
        let mut s = TempNorm::new(HalfLife::finite(1.0).unwrap());
        let y1 = s.step(1.0).unwrap();
        assert_relative_eq!(y1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.mean(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.var(), 0.75, epsilon = 1e-12);

        let y2 = s.step(1.0).unwrap();
        assert_relative_eq!(y2, 0.5 / 0.75_f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s.mean(), 0.75, epsilon = 1e-12);
        assert_relative_eq!(s.var(), 0.4375, epsilon = 1e-12);
    }

    #[test]
    fn step_at_mean_is_zero() {
        let hl = HalfLife::finite(4.0).unwrap();
        let mut s = TempNorm::with_prior(hl, 2.5, 3.0);
        let y = s.step(2.5).unwrap();
        assert_eq!(y, 0.0);
        assert_eq!(s.mean(), 2.5);
        assert_relative_eq!(s.var(), (1.0 - hl.decay()) * 3.0, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_non_finite() {
        let mut s = TempNorm::new(HalfLife::finite(1.0).unwrap());
        assert!(s.step(f64::NAN).is_err());
        assert!(s.step(f64::INFINITY).is_err());
    }

    #[test]
    fn degenerate_variance_caps_output() {
        let mut s = TempNorm::with_prior(HalfLife::finite(1.0).unwrap(), 0.0, 0.0);
        assert_eq!(s.step(0.0).unwrap(), 0.0);
        assert_eq!(s.degenerate_events(), 0);
        let mut s = TempNorm::with_prior(HalfLife::finite(1.0).unwrap(), 0.0, 0.0);
        assert_eq!(s.step(-2.0).unwrap(), -DEGENERATE_CAP);
        assert_eq!(s.degenerate_events(), 1);
    }

    #[test]
    fn var_floor_holds() {
        let mut s =
            TempNorm::with_prior(HalfLife::finite(1.0).unwrap(), 0.0, 1e-4).with_var_floor(1e-3);
        s.step(0.0).unwrap();
        assert!(s.var() >= 1e-3);
    }

    #[test]
    fn sequence_matches_fold_and_rejects_empty() {
        let hl = HalfLife::finite(1.0).unwrap();
        let ys = tempnorm_sequence(&[1.0, 1.0], hl).unwrap();
        assert_relative_eq!(ys[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ys[1], 0.5773502691896258, epsilon = 1e-9);
        assert!(tempnorm_sequence(&[], hl).is_err());
    }

    #[test]
    fn sequence_error_carries_index() {
        let hl = HalfLife::finite(2.0).unwrap();
        let err = tempnorm_sequence(&[1.0, f64::NAN], hl).unwrap_err();
        match err {
            TempNormError::AtIndex(i, _) => assert_eq!(i, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn infinite_half_life_is_identity() {
        let xs = [0.3, -1.2, 4.0, 0.0];
        let ys = tempnorm_sequence(&xs, HalfLife::Infinite).unwrap();
        assert_eq!(ys, xs);
    }

    #[test]
    fn prenormalize_examples() {
        assert_eq!(prenormalize(10.0, 6.0, 4.0).unwrap(), 1.0);
        assert_eq!(prenormalize(6.0, 6.0, 4.0).unwrap(), 0.0);
        assert_eq!(prenormalize(0.0, 6.0, 4.0).unwrap(), -1.5);
        assert!(prenormalize(1.0, 6.0, 0.0).is_err());
        assert!(prenormalize(1.0, 6.0, -1.0).is_err());
    }

    #[test]
    fn region_assignment() {
        assert_eq!(classify_region(0.5, 1.0, 2.0).unwrap(), Region::Typical);
        assert_eq!(classify_region(-5.0, 1.0, 2.0).unwrap(), Region::Typical);
        assert_eq!(classify_region(1.0, 1.0, 2.0).unwrap(), Region::Unused);
        assert_eq!(classify_region(2.0, 1.0, 2.0).unwrap(), Region::Unused);
        assert_eq!(classify_region(2.5, 1.0, 2.0).unwrap(), Region::Anomaly);
        assert!(classify_region(0.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn binarize_boundary_goes_up() {
        assert_eq!(binarize(1.4, 1.5), Region::Typical);
        assert_eq!(binarize(1.5, 1.5), Region::Anomaly);
        assert_eq!(binarize(1.6, 1.5), Region::Anomaly);
    }

    #[test]
    fn combine_max_examples() {
        assert_eq!(combine_max(2.3, 0.1), 2.3);
        assert_eq!(combine_max(-0.5, -1.0), -0.5);
        assert_eq!(combine_max(1.5, 1.5), 1.5);
    }
}
