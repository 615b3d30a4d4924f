//! Synthetic cohort generation with ground-truth anomaly flags.
//!
//! The generator stands in for a private clinical corpus: each subject has a
//! personal baseline per rating dimension, the baseline drifts as a Gaussian
//! random walk, and anomaly weeks add a bump on top of the latent baseline.
//! All randomness flows through ChaCha8 seeded from a single `u64`, with
//! per-subject sub-seeds derived by SplitMix64, so output is bit-identical
//! across platforms and between serial and parallel generation.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::TempNormError;

/// Parameters of one rating dimension, in raw-rating units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DimParams {
    pub base_mean: f64,
    pub base_std: f64,
    /// Random-walk increment scale per week.
    pub drift_std: f64,
}

/// Generative configuration for a single subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectGenConfig {
    pub n_weeks: u32,
    pub mania: DimParams,
    pub depression: DimParams,
    /// Per-week probability of an injected anomaly.
    pub anomaly_rate: f64,
    /// Anomaly bump in units of base_std; keep >= 2 so injected anomalies
    /// clear the upper region threshold by construction.
    pub anomaly_magnitude: f64,
    /// Probability that a non-anomaly week's raw mania rating collapses to 0.
    pub zero_inflation: f64,
    /// Per-week probability the assessment is missing (row dropped).
    pub missing_rate: f64,
    /// Raw ratings are clipped to [0, rating_cap].
    pub rating_cap: u32,
}

impl Default for SubjectGenConfig {
    fn default() -> Self {
        SubjectGenConfig {
            n_weeks: 40,
            mania: DimParams {
                base_mean: 4.0,
                base_std: 2.0,
                drift_std: 0.25,
            },
            depression: DimParams {
                base_mean: 8.0,
                base_std: 2.0,
                drift_std: 0.25,
            },
            anomaly_rate: 0.15,
            anomaly_magnitude: 3.0,
            zero_inflation: 0.0,
            missing_rate: 0.05,
            rating_cap: 40,
        }
    }
}

impl SubjectGenConfig {
    pub fn validate(&self) -> Result<(), TempNormError> {
        if self.n_weeks == 0 {
            return Err(TempNormError::InvalidParameter(
                "n_weeks must be positive".into(),
            ));
        }
        for (name, p) in [("mania", &self.mania), ("depression", &self.depression)] {
            if p.base_std < 0.0 || p.drift_std < 0.0 {
                return Err(TempNormError::InvalidParameter(format!(
                    "{name} std parameters must be nonnegative"
                )));
            }
        }
        for (name, v) in [
            ("anomaly_rate", self.anomaly_rate),
            ("zero_inflation", self.zero_inflation),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TempNormError::InvalidParameter(format!(
                    "{name} must be in [0,1], got {v}"
                )));
            }
        }
        if self.anomaly_magnitude <= 0.0 {
            return Err(TempNormError::InvalidParameter(
                "anomaly_magnitude must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One observed week of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekRow {
    pub week: u32,
    pub ymrs: u32,
    pub hdrs: u32,
    /// Ground-truth intervention flag; set exactly on injected-anomaly weeks.
    pub flag: bool,
    pub injected: bool,
}

/// Ordered per-subject rating sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectTimeline {
    pub subject_id: String,
    pub rows: Vec<WeekRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectTimeline>,
    pub seed: u64,
}

/// Uniform range used for per-subject parameter jitter; lo == hi disables it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JitterRange {
    pub lo: f64,
    pub hi: f64,
}

impl JitterRange {
    pub fn fixed(v: f64) -> Self {
        JitterRange { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Cohort-level configuration: a subject template plus jitter ranges that
/// give subjects heterogeneous baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub base: SubjectGenConfig,
    pub mania_mean_jitter: JitterRange,
    pub mania_std_jitter: JitterRange,
    pub depression_mean_jitter: JitterRange,
    pub depression_std_jitter: JitterRange,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_subjects: 20,
            base: SubjectGenConfig::default(),
            mania_mean_jitter: JitterRange { lo: 1.0, hi: 9.0 },
            mania_std_jitter: JitterRange { lo: 1.5, hi: 3.0 },
            depression_mean_jitter: JitterRange { lo: 4.0, hi: 14.0 },
            depression_std_jitter: JitterRange { lo: 1.5, hi: 3.0 },
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for the subject at `ordinal` within a cohort.
pub fn subject_seed(cohort_seed: u64, ordinal: u64) -> u64 {
    splitmix64(cohort_seed ^ splitmix64(ordinal))
}

/// Generates one subject timeline. Deterministic for a fixed (config, seed).
pub fn generate_subject(
    cfg: &SubjectGenConfig,
    subject_id: &str,
    seed: u64,
) -> Result<SubjectTimeline, TempNormError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut baseline_m = cfg.mania.base_mean;
    let mut baseline_h = cfg.depression.base_mean;
    let cap = cfg.rating_cap as f64;
    let mut rows = Vec::with_capacity(cfg.n_weeks as usize);
    for week in 0..cfg.n_weeks {
        // Fixed draw order per week so output is reproducible across
        // configuration changes of the same shape.
        let noise_m: f64 = StandardNormal.sample(&mut rng);
        let noise_h: f64 = StandardNormal.sample(&mut rng);
        let drift_m: f64 = StandardNormal.sample(&mut rng);
        let drift_h: f64 = StandardNormal.sample(&mut rng);
        let anomaly_u: f64 = rng.gen();
        let zero_u: f64 = rng.gen();
        let missing_u: f64 = rng.gen();

        let injected = anomaly_u < cfg.anomaly_rate;
        let bump = if injected { cfg.anomaly_magnitude } else { 0.0 };
        let raw_m = baseline_m + noise_m * cfg.mania.base_std + bump * cfg.mania.base_std;
        let raw_h = baseline_h + noise_h * cfg.depression.base_std + bump * cfg.depression.base_std;
        let mut ymrs = raw_m.clamp(0.0, cap).round() as u32;
        let hdrs = raw_h.clamp(0.0, cap).round() as u32;
        // Zero inflation models the mass of asymptomatic mania weeks; it is
        // skipped on anomaly weeks so flags stay detectable.
        if !injected && zero_u < cfg.zero_inflation {
            ymrs = 0;
        }

        baseline_m += drift_m * cfg.mania.drift_std;
        baseline_h += drift_h * cfg.depression.drift_std;

        if missing_u < cfg.missing_rate {
            continue;
        }
        rows.push(WeekRow {
            week,
            ymrs,
            hdrs,
            flag: injected,
            injected,
        });
    }
    Ok(SubjectTimeline {
        subject_id: subject_id.to_string(),
        rows,
    })
}

/// Generates a cohort of subjects with jittered per-subject parameters.
pub fn generate_cohort(cfg: &CohortConfig, seed: u64) -> Result<Cohort, TempNormError> {
    if cfg.n_subjects == 0 {
        return Err(TempNormError::InvalidParameter(
            "n_subjects must be at least 1".into(),
        ));
    }
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let sub_seed = subject_seed(seed, i as u64);
        let mut param_rng = ChaCha8Rng::seed_from_u64(splitmix64(sub_seed ^ 1));
        let mut subject_cfg = cfg.base.clone();
        subject_cfg.mania.base_mean = cfg.mania_mean_jitter.sample(&mut param_rng);
        subject_cfg.mania.base_std = cfg.mania_std_jitter.sample(&mut param_rng);
        subject_cfg.depression.base_mean = cfg.depression_mean_jitter.sample(&mut param_rng);
        subject_cfg.depression.base_std = cfg.depression_std_jitter.sample(&mut param_rng);
        let id = format!("s{i:03}");
        subjects.push(generate_subject(&subject_cfg, &id, sub_seed)?);
    }
    Ok(Cohort { subjects, seed })
}

/// Per-sample quality metadata for selection filters (segment and word
/// counts of the underlying recording).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleQuality {
    pub segments: u32,
    pub words: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub min_samples_per_subject: usize,
    pub min_segments: u32,
    pub min_words: u32,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            min_samples_per_subject: 8,
            min_segments: 5,
            min_words: 100,
        }
    }
}

/// Removes subjects with fewer than `min_samples_per_subject` rows.
///
/// Selection happens before normalization: removed samples must not
/// contribute to any baseline.
pub fn apply_selection(cohort: &Cohort, min_samples_per_subject: usize) -> Cohort {
    Cohort {
        subjects: cohort
            .subjects
            .iter()
            .filter(|s| s.rows.len() >= min_samples_per_subject)
            .cloned()
            .collect(),
        seed: cohort.seed,
    }
}

/// Selection with per-sample quality minima applied first, then the
/// per-subject sample-count rule. Samples with no quality record are kept.
pub fn apply_selection_with_quality(
    cohort: &Cohort,
    quality: &HashMap<(String, u32), SampleQuality>,
    cfg: &SelectionConfig,
) -> Cohort {
    let filtered: Vec<SubjectTimeline> = cohort
        .subjects
        .iter()
        .map(|s| SubjectTimeline {
            subject_id: s.subject_id.clone(),
            rows: s
                .rows
                .iter()
                .filter(|r| {
                    match quality.get(&(s.subject_id.clone(), r.week)) {
                        Some(q) => q.segments >= cfg.min_segments && q.words >= cfg.min_words,
                        None => true,
                    }
                })
                .copied()
                .collect(),
        })
        .collect();
    apply_selection(
        &Cohort {
            subjects: filtered,
            seed: cohort.seed,
        },
        cfg.min_samples_per_subject,
    )
}

/// Writes the cohort as `subject_id,week,ymrs,hdrs,flag` CSV.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, writer: W) -> Result<(), TempNormError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "week", "ymrs", "hdrs", "flag"])?;
    for s in &cohort.subjects {
        for r in &s.rows {
            w.write_record([
                s.subject_id.as_str(),
                &r.week.to_string(),
                &r.ymrs.to_string(),
                &r.hdrs.to_string(),
                if r.flag { "1" } else { "0" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a cohort CSV written by [`write_cohort_csv`]. The seed is not part
/// of the CSV; callers can restore it from the JSON sidecar.
pub fn read_cohort_csv<R: Read>(reader: R) -> Result<Cohort, TempNormError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let expected = ["subject_id", "week", "ymrs", "hdrs", "flag"];
    if headers.iter().ne(expected) {
        return Err(TempNormError::InvalidInput(format!(
            "unexpected cohort CSV header {headers:?}"
        )));
    }
    let mut subjects: Vec<SubjectTimeline> = Vec::new();
    for record in r.records() {
        let record = record?;
        let parse_u32 = |i: usize| -> Result<u32, TempNormError> {
            record[i]
                .parse()
                .map_err(|_| TempNormError::InvalidInput(format!("bad field {:?}", &record[i])))
        };
        let id = record[0].to_string();
        let flag = match &record[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(TempNormError::InvalidInput(format!(
                    "flag must be 0 or 1, got {other:?}"
                )))
            }
        };
        let row = WeekRow {
            week: parse_u32(1)?,
            ymrs: parse_u32(2)?,
            hdrs: parse_u32(3)?,
            flag,
            injected: flag,
        };
        match subjects.last_mut() {
            Some(s) if s.subject_id == id => s.rows.push(row),
            _ => subjects.push(SubjectTimeline {
                subject_id: id,
                rows: vec![row],
            }),
        }
    }
    Ok(Cohort { subjects, seed: 0 })
}
