//! Region-based evaluation against ground-truth intervention flags:
//! per-subject UAR, half-life sweeps, enrollment curves, and normality
//! diagnostics of the normalized ratings.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::TempNormError;
use crate::norm::{
    binarize, classify_region, combine_max, prenormalize, HalfLife, Region, TempNorm,
    DEFAULT_BINARIZE, DEFAULT_LOWER, DEFAULT_OFFSET, DEFAULT_SCALE, DEFAULT_UPPER,
};
use crate::sim::{Cohort, SubjectTimeline};

/// Shared thresholds and prenormalization constants for evaluation runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalConfig {
    pub offset: f64,
    pub scale: f64,
    pub lower: f64,
    pub upper: f64,
    pub binarize_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            offset: DEFAULT_OFFSET,
            scale: DEFAULT_SCALE,
            lower: DEFAULT_LOWER,
            upper: DEFAULT_UPPER,
            binarize_threshold: DEFAULT_BINARIZE,
        }
    }
}

/// Sample counts per region, with the flagged subset of each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub typical: u32,
    pub typical_flagged: u32,
    pub unused: u32,
    pub unused_flagged: u32,
    pub anomaly: u32,
    pub anomaly_flagged: u32,
}

impl RegionCounts {
    pub fn total(&self) -> u32 {
        self.typical + self.unused + self.anomaly
    }

    pub fn add(&mut self, region: Region, flagged: bool) {
        match region {
            Region::Typical => {
                self.typical += 1;
                if flagged {
                    self.typical_flagged += 1;
                }
            }
            Region::Unused => {
                self.unused += 1;
                if flagged {
                    self.unused_flagged += 1;
                }
            }
            Region::Anomaly => {
                self.anomaly += 1;
                if flagged {
                    self.anomaly_flagged += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &RegionCounts) {
        self.typical += other.typical;
        self.typical_flagged += other.typical_flagged;
        self.unused += other.unused;
        self.unused_flagged += other.unused_flagged;
        self.anomaly += other.anomaly;
        self.anomaly_flagged += other.anomaly_flagged;
    }
}

/// Unweighted average recall: mean over both classes of the within-class
/// accuracy. `true` marks the positive (flagged/anomalous) class.
pub fn uar(predictions: &[bool], truths: &[bool]) -> Result<f64, TempNormError> {
    if predictions.len() != truths.len() {
        return Err(TempNormError::ShapeMismatch(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut pos_total = 0u32;
    let mut pos_correct = 0u32;
    let mut neg_total = 0u32;
    let mut neg_correct = 0u32;
    for (&p, &t) in predictions.iter().zip(truths) {
        if t {
            pos_total += 1;
            if p {
                pos_correct += 1;
            }
        } else {
            neg_total += 1;
            if !p {
                neg_correct += 1;
            }
        }
    }
    if pos_total == 0 || neg_total == 0 {
        return Err(TempNormError::UndefinedUar(
            "a truth class is absent".into(),
        ));
    }
    Ok((pos_correct as f64 / pos_total as f64 + neg_correct as f64 / neg_total as f64) / 2.0)
}

/// Per-sample normalized scores for one subject: both dimensions, their max,
/// and the region of the max.
#[derive(Debug, Clone)]
pub struct SubjectScores {
    pub weeks: Vec<u32>,
    pub mania: Vec<f64>,
    pub depression: Vec<f64>,
    pub max: Vec<f64>,
    pub regions: Vec<Region>,
    pub flags: Vec<bool>,
}

/// Runs the normalization pipeline over one timeline: prenormalize both
/// dimensions, fold two independent streams from the population prior, and
/// classify the per-week max.
pub fn normalize_timeline(
    timeline: &SubjectTimeline,
    half_life: HalfLife,
    cfg: &EvalConfig,
) -> Result<SubjectScores, TempNormError> {
    let mut mania_state = TempNorm::new(half_life);
    let mut depression_state = TempNorm::new(half_life);
    let n = timeline.rows.len();
    let mut scores = SubjectScores {
        weeks: Vec::with_capacity(n),
        mania: Vec::with_capacity(n),
        depression: Vec::with_capacity(n),
        max: Vec::with_capacity(n),
        regions: Vec::with_capacity(n),
        flags: Vec::with_capacity(n),
    };
    for row in &timeline.rows {
        let m = mania_state.step(prenormalize(row.ymrs as f64, cfg.offset, cfg.scale)?)?;
        let h = depression_state.step(prenormalize(row.hdrs as f64, cfg.offset, cfg.scale)?)?;
        let max = combine_max(m, h);
        scores.weeks.push(row.week);
        scores.mania.push(m);
        scores.depression.push(h);
        scores.max.push(max);
        scores.regions.push(classify_region(max, cfg.lower, cfg.upper)?);
        scores.flags.push(row.flag);
    }
    Ok(scores)
}

/// Region counts and (if eligible) UAR of one timeline against its flags.
///
/// Anomaly-region weeks predict intervention, typical-region weeks predict
/// none, and unused-region weeks are excluded. Returns `None` for the UAR
/// when either ground-truth class is empty after the exclusion.
pub fn validate_against_flags(
    timeline: &SubjectTimeline,
    half_life: HalfLife,
    cfg: &EvalConfig,
) -> Result<(RegionCounts, Option<f64>), TempNormError> {
    let scores = normalize_timeline(timeline, half_life, cfg)?;
    let mut counts = RegionCounts::default();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for (region, &flag) in scores.regions.iter().zip(&scores.flags) {
        counts.add(*region, flag);
        match region {
            Region::Typical => {
                predictions.push(false);
                truths.push(flag);
            }
            Region::Anomaly => {
                predictions.push(true);
                truths.push(flag);
            }
            Region::Unused => {}
        }
    }
    match uar(&predictions, &truths) {
        Ok(v) => Ok((counts, Some(v))),
        Err(TempNormError::UndefinedUar(_)) => Ok((counts, None)),
        Err(e) => Err(e),
    }
}

/// Scores already max-combined predictions against normalized ground truth.
///
/// Samples whose truth falls in the unused region are dropped; predictions
/// are binarized at the configured threshold. Returns `None` if a truth
/// class is empty after the drop.
pub fn score_predictions(
    predicted: &[f64],
    truth: &[f64],
    cfg: &EvalConfig,
) -> Result<Option<f64>, TempNormError> {
    if predicted.len() != truth.len() {
        return Err(TempNormError::ShapeMismatch(format!(
            "{} predictions vs {} truths",
            predicted.len(),
            truth.len()
        )));
    }
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        match classify_region(t, cfg.lower, cfg.upper)? {
            Region::Typical => {
                truths.push(false);
            }
            Region::Anomaly => {
                truths.push(true);
            }
            Region::Unused => continue,
        }
        predictions.push(binarize(p, cfg.binarize_threshold) == Region::Anomaly);
    }
    match uar(&predictions, &truths) {
        Ok(v) => Ok(Some(v)),
        Err(TempNormError::UndefinedUar(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One row of a half-life sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub half_life: HalfLife,
    /// Number of subjects with a defined UAR at this half-life.
    pub n_subjects: u32,
    pub counts: RegionCounts,
    pub uar_mean: Option<f64>,
    pub uar_std: Option<f64>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// The default half-life list for sweeps.
pub fn default_half_lives() -> Vec<HalfLife> {
    vec![
        HalfLife::Finite(1.0),
        HalfLife::Finite(2.0),
        HalfLife::Finite(4.0),
        HalfLife::Finite(8.0),
        HalfLife::Finite(16.0),
        HalfLife::Finite(32.0),
        HalfLife::Finite(64.0),
        HalfLife::Infinite,
    ]
}

/// Runs [`validate_against_flags`] over the whole cohort for each half-life.
/// Subjects are processed in id order so results are reduction-order stable.
pub fn sweep_half_life(
    cohort: &Cohort,
    half_lives: &[HalfLife],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>, TempNormError> {
    if cohort.subjects.is_empty() {
        return Err(TempNormError::InvalidInput("empty cohort".into()));
    }
    let mut order: Vec<&SubjectTimeline> = cohort.subjects.iter().collect();
    order.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut rows = Vec::with_capacity(half_lives.len());
    for &hl in half_lives {
        let mut counts = RegionCounts::default();
        let mut uars = Vec::new();
        for subject in &order {
            let (c, u) = validate_against_flags(subject, hl, cfg)?;
            counts.merge(&c);
            if let Some(u) = u {
                uars.push(u);
            }
        }
        let (uar_mean, uar_std) = mean_std(&uars);
        rows.push(SweepRow {
            half_life: hl,
            n_subjects: uars.len() as u32,
            counts,
            uar_mean,
            uar_std,
        });
    }
    Ok(rows)
}

/// Scored sample indices and UAR for one subject after warming the states on
/// the first `enrollment` samples. Enrollment samples update the baseline
/// but are never scored.
pub fn enrollment_scores(
    timeline: &SubjectTimeline,
    half_life: HalfLife,
    enrollment: usize,
    cfg: &EvalConfig,
) -> Result<(Vec<usize>, Option<f64>), TempNormError> {
    let scores = normalize_timeline(timeline, half_life, cfg)?;
    let mut scored = Vec::new();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for i in enrollment..scores.regions.len() {
        scored.push(i);
        match scores.regions[i] {
            Region::Typical => {
                predictions.push(false);
                truths.push(scores.flags[i]);
            }
            Region::Anomaly => {
                predictions.push(true);
                truths.push(scores.flags[i]);
            }
            Region::Unused => {}
        }
    }
    match uar(&predictions, &truths) {
        Ok(v) => Ok((scored, Some(v))),
        Err(TempNormError::UndefinedUar(_)) => Ok((scored, None)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnrollmentRow {
    pub half_life: HalfLife,
    pub enrollment: usize,
    pub n_subjects: u32,
    pub uar_mean: Option<f64>,
}

/// Mean UAR per (half-life, enrollment length) over a fixed subject panel.
///
/// The panel is restricted per half-life to subjects with a defined UAR at
/// the maximum enrollment length, so the subject set does not change as
/// enrollment grows.
pub fn enrollment_curve(
    cohort: &Cohort,
    half_lives: &[HalfLife],
    max_enrollment: usize,
    cfg: &EvalConfig,
) -> Result<Vec<EnrollmentRow>, TempNormError> {
    let mut order: Vec<&SubjectTimeline> = cohort.subjects.iter().collect();
    order.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut rows = Vec::new();
    for &hl in half_lives {
        let mut panel = Vec::new();
        for subject in &order {
            let (_, u) = enrollment_scores(subject, hl, max_enrollment, cfg)?;
            if u.is_some() {
                panel.push(*subject);
            }
        }
        for n in 0..=max_enrollment {
            let mut uars = Vec::new();
            for subject in &panel {
                if let (_, Some(u)) = enrollment_scores(subject, hl, n, cfg)? {
                    uars.push(u);
                }
            }
            let (uar_mean, _) = mean_std(&uars);
            rows.push(EnrollmentRow {
                half_life: hl,
                enrollment: n,
                n_subjects: uars.len() as u32,
                uar_mean,
            });
        }
    }
    Ok(rows)
}

/// Sample mean, sample standard deviation, and the squared correlation of a
/// normal probability plot at Blom plotting positions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistributionDiagnostics {
    pub mean: f64,
    pub std: f64,
    pub r_squared_normal: f64,
}

pub fn distribution_diagnostics(values: &[f64]) -> Result<DistributionDiagnostics, TempNormError> {
    let n = values.len();
    if n < 20 {
        return Err(TempNormError::InsufficientData(format!(
            "diagnostics need at least 20 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt();

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let quantiles: Vec<f64> = (1..=n)
        .map(|i| normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
        .collect();
    let r = pearson(&sorted, &quantiles);
    Ok(DistributionDiagnostics {
        mean,
        std,
        r_squared_normal: r * r,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::WeekRow;
    use approx::assert_relative_eq;

    fn timeline(rows: &[(u32, u32, u32, bool)]) -> SubjectTimeline {
        SubjectTimeline {
            subject_id: "t".into(),
            rows: rows
                .iter()
                .map(|&(week, ymrs, hdrs, flag)| WeekRow {
                    week,
                    ymrs,
                    hdrs,
                    flag,
                    injected: flag,
                })
                .collect(),
        }
    }

    #[test]
    fn uar_examples() {
        assert_eq!(
            uar(&[true, false], &[true, false]).unwrap(),
            1.0
        );
        // All-one-class predictions on balanced truths.
        assert_eq!(
            uar(&[true, true, true, true], &[true, true, false, false]).unwrap(),
            0.5
        );
        // truths [A,A,A,B], preds [A,A,B,B] with B as positive.
        let u = uar(
            &[false, false, true, true],
            &[false, false, false, true],
        )
        .unwrap();
        assert_relative_eq!(u, (2.0 / 3.0 + 1.0) / 2.0, epsilon = 1e-12);
        assert!(uar(&[true], &[true]).is_err());
        assert!(uar(&[true, false], &[false]).is_err());
    }

    #[test]
    fn uar_swaps_classes_symmetrically() {
        let preds = [true, false, true, false, false];
        let truths = [true, true, false, false, true];
        let flipped_p: Vec<bool> = preds.iter().map(|p| !p).collect();
        let flipped_t: Vec<bool> = truths.iter().map(|t| !t).collect();
        assert_eq!(
            uar(&preds, &truths).unwrap(),
            uar(&flipped_p, &flipped_t).unwrap()
        );
    }

    #[test]
    fn constant_low_timeline_is_ineligible() {
        let t = timeline(&[(0, 6, 6, false), (1, 6, 6, false), (2, 6, 6, false)]);
        let (counts, u) =
            validate_against_flags(&t, HalfLife::Infinite, &EvalConfig::default()).unwrap();
        assert_eq!(counts.typical, 3);
        assert!(u.is_none());
    }

    #[test]
    fn clean_separation_gives_perfect_uar() {
        // With an infinite half-life the scores equal the prenormalized
        // ratings: 6 -> 0 (typical), 18 -> 3 (anomaly).
        let t = timeline(&[(0, 6, 6, false), (1, 18, 6, true), (2, 6, 6, false)]);
        let (counts, u) =
            validate_against_flags(&t, HalfLife::Infinite, &EvalConfig::default()).unwrap();
        assert_eq!(counts.anomaly, 1);
        assert_eq!(counts.anomaly_flagged, 1);
        assert_eq!(u, Some(1.0));
    }

    #[test]
    fn drifting_baseline_hurts_population_prior() {
        // Unflagged ratings drifting past raw 14 (prenormalized 2) create
        // false positives under the population prior.
        let rows: Vec<(u32, u32, u32, bool)> =
            (0..20).map(|w| (w, 6 + w, 6, false)).collect();
        let mut rows = rows;
        rows.push((20, 30, 6, true));
        let t = timeline(&rows);
        let (counts, u) =
            validate_against_flags(&t, HalfLife::Infinite, &EvalConfig::default()).unwrap();
        assert!(counts.anomaly > counts.anomaly_flagged);
        assert!(u.unwrap() < 1.0);
    }

    #[test]
    fn score_predictions_examples() {
        let cfg = EvalConfig::default();
        assert_eq!(
            score_predictions(&[0.2, 2.2], &[0.5, 2.5], &cfg).unwrap(),
            Some(1.0)
        );
        // Unused truth sample dropped: remaining single class -> ineligible.
        assert_eq!(
            score_predictions(&[0.2, 0.3, 0.1], &[0.5, 1.5, 0.2], &cfg).unwrap(),
            None
        );
        assert_eq!(
            score_predictions(&[1.6, 1.4], &[0.5, 2.5], &cfg).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn sweep_counts_partition_samples() {
        let cohort = crate::sim::generate_cohort(&crate::sim::CohortConfig::default(), 31).unwrap();
        let total: u32 = cohort.subjects.iter().map(|s| s.rows.len() as u32).sum();
        let rows = sweep_half_life(&cohort, &default_half_lives(), &EvalConfig::default()).unwrap();
        assert_eq!(rows.len(), 8);
        for row in &rows {
            assert_eq!(row.counts.total(), total);
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let cohort = crate::sim::generate_cohort(&crate::sim::CohortConfig::default(), 8).unwrap();
        let a = sweep_half_life(&cohort, &default_half_lives(), &EvalConfig::default()).unwrap();
        let b = sweep_half_life(&cohort, &default_half_lives(), &EvalConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn enrollment_boundaries() {
        let t = timeline(&[(0, 6, 6, false), (1, 18, 6, true), (2, 6, 6, false)]);
        let cfg = EvalConfig::default();
        let hl = HalfLife::Infinite;
        let (scored, u) = enrollment_scores(&t, hl, 0, &cfg).unwrap();
        assert_eq!(scored, vec![0, 1, 2]);
        assert_eq!(u, Some(1.0));
        let (scored, u) = enrollment_scores(&t, hl, 3, &cfg).unwrap();
        assert!(scored.is_empty());
        assert!(u.is_none());
    }

    #[test]
    fn diagnostics_on_exact_quantiles() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 200;
        let values: Vec<f64> = (1..=n)
            .map(|i| normal.inverse_cdf((i as f64 - 0.375) / (n as f64 + 0.25)))
            .collect();
        let d = distribution_diagnostics(&values).unwrap();
        assert!(d.r_squared_normal > 0.999);
        assert!(d.mean.abs() < 1e-9);
        assert!(distribution_diagnostics(&values[..10]).is_err());
    }
}
