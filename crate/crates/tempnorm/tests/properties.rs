//! Randomized invariant checks for the normalizer, feature aggregators,
//! scoring, and the training loss pieces.

use proptest::prelude::*;

use tempnorm::eval::uar;
use tempnorm::features::{segment_stats, STAT_NAMES};
use tempnorm::neural::{sample_weight, wmse, RRELU_EVAL_SLOPE, RRELU_HI, RRELU_LO, WEIGHT_CAP};
use tempnorm::norm::{
    binarize, classify_region, combine_max, tempnorm_sequence, HalfLife, Region, TempNorm,
};
use tempnorm::sim::{generate_subject, subject_seed, SubjectGenConfig};

/// Straight-line reference implementation of the streaming update.
fn oracle_sequence(xs: &[f64], half_life: f64) -> Vec<f64> {
    let lambda = 1.0 - 0.5_f64.powf(1.0 / half_life);
    let mut mean = 0.0_f64;
    let mut var = 1.0_f64;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let delta = x - mean;
        out.push(delta / var.sqrt());
        let beta = lambda * delta;
        mean += beta;
        var = (1.0 - lambda) * (var + beta * delta);
    }
    out
}

fn stat_index(name: &str) -> usize {
    STAT_NAMES.iter().position(|&n| n == name).unwrap()
}

proptest! {
    #[test]
    fn decay_is_in_unit_interval_and_monotone(a in 0.01f64..1e4, b in 0.01f64..1e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let d_lo = HalfLife::finite(lo).unwrap().decay();
        let d_hi = HalfLife::finite(hi).unwrap().decay();
        prop_assert!(d_lo > 0.0 && d_lo <= 1.0);
        prop_assert!(d_hi > 0.0 && d_hi <= 1.0);
        // Shorter half-life forgets faster.
        prop_assert!(d_lo >= d_hi);
        prop_assert!(HalfLife::Infinite.decay() == 0.0);
    }

    #[test]
    fn first_sample_passes_through(x in -100.0f64..100.0, hl in 0.1f64..100.0) {
        let mut state = TempNorm::new(HalfLife::finite(hl).unwrap());
        let y = state.step(x).unwrap();
        prop_assert!((y - x).abs() < 1e-12);
    }

    #[test]
    fn streaming_matches_oracle(
        xs in prop::collection::vec(-50.0f64..50.0, 1..40),
        hl in 0.5f64..200.0,
    ) {
        let got = tempnorm_sequence(&xs, HalfLife::finite(hl).unwrap()).unwrap();
        let want = oracle_sequence(&xs, hl);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn variance_stays_positive_and_outputs_finite(
        xs in prop::collection::vec(-1e3f64..1e3, 1..60),
        hl in 0.5f64..200.0,
    ) {
        let mut state = TempNorm::new(HalfLife::finite(hl).unwrap());
        for &x in &xs {
            let y = state.step(x).unwrap();
            prop_assert!(y.is_finite());
            prop_assert!(state.var() > 0.0);
            prop_assert!(state.mean().is_finite());
        }
        prop_assert_eq!(state.count(), xs.len() as u64);
    }

    #[test]
    fn infinite_half_life_never_adapts(xs in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let mut state = TempNorm::new(HalfLife::Infinite);
        for &x in &xs {
            let y = state.step(x).unwrap();
            prop_assert!((y - x).abs() < 1e-12);
            prop_assert!(state.mean() == 0.0);
            prop_assert!(state.var() == 1.0);
        }
    }

    #[test]
    fn var_floor_is_respected(
        xs in prop::collection::vec(-10.0f64..10.0, 1..40),
        floor in 0.01f64..4.0,
    ) {
        let mut state = TempNorm::new(HalfLife::finite(2.0).unwrap()).with_var_floor(floor);
        for &x in &xs {
            state.step(x).unwrap();
            prop_assert!(state.var() >= floor);
        }
    }

    #[test]
    fn percentiles_are_ordered(values in prop::collection::vec(-100.0f64..100.0, 2..50)) {
        let s = segment_stats(&values).unwrap();
        let chain = ["min", "p1", "p10", "p25", "p50", "p75", "p90", "p99", "max"];
        for pair in chain.windows(2) {
            prop_assert!(s[stat_index(pair[0])] <= s[stat_index(pair[1])] + 1e-12);
        }
        prop_assert!((s[stat_index("range")]
            - (s[stat_index("max")] - s[stat_index("min")])).abs() < 1e-12);
        prop_assert!(s[stat_index("min")] <= s[stat_index("mean")] + 1e-12);
        prop_assert!(s[stat_index("mean")] <= s[stat_index("max")] + 1e-12);
    }

    #[test]
    fn exceedance_fractions_are_non_increasing(
        values in prop::collection::vec(-100.0f64..100.0, 2..50),
    ) {
        let s = segment_stats(&values).unwrap();
        let chain = [
            "frac_above_10",
            "frac_above_25",
            "frac_above_50",
            "frac_above_75",
            "frac_above_90",
        ];
        for pair in chain.windows(2) {
            let a = s[stat_index(pair[0])];
            let b = s[stat_index(pair[1])];
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn order_free_stats_ignore_permutation(
        values in prop::collection::vec(-100.0f64..100.0, 2..30),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut shuffled = values.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let a = segment_stats(&values).unwrap();
        let b = segment_stats(&shuffled).unwrap();
        let order_dependent = ["slope", "intercept", "r_squared", "mean_error", "mse"];
        for (i, name) in STAT_NAMES.iter().enumerate() {
            if order_dependent.contains(name) {
                continue;
            }
            prop_assert!((a[i] - b[i]).abs() <= 1e-9 * a[i].abs().max(1.0));
        }
    }

    #[test]
    fn uar_bounds_and_symmetry(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 2..60),
    ) {
        let preds: Vec<bool> = pairs.iter().map(|(p, _)| *p).collect();
        let truths: Vec<bool> = pairs.iter().map(|(_, t)| *t).collect();
        match uar(&preds, &truths) {
            Ok(score) => {
                prop_assert!((0.0..=1.0).contains(&score));
                // Relabeling both classes leaves the mean recall unchanged.
                let flipped_p: Vec<bool> = preds.iter().map(|p| !p).collect();
                let flipped_t: Vec<bool> = truths.iter().map(|t| !t).collect();
                prop_assert!((uar(&flipped_p, &flipped_t).unwrap() - score).abs() < 1e-12);
                prop_assert!((uar(&truths, &truths).unwrap() - 1.0).abs() < 1e-12);
                prop_assert!(uar(&flipped_t, &truths).unwrap().abs() < 1e-12);
            }
            Err(_) => {
                // Eligibility requires both truth classes to appear.
                let pos = truths.iter().filter(|&&t| t).count();
                prop_assert!(pos == 0 || pos == truths.len());
            }
        }
    }

    #[test]
    fn regions_partition_the_line(y in -1e4f64..1e4) {
        let region = classify_region(y, 1.0, 2.0).unwrap();
        let expected = if y < 1.0 {
            Region::Typical
        } else if y > 2.0 {
            Region::Anomaly
        } else {
            Region::Unused
        };
        prop_assert_eq!(region, expected);
        let flagged = binarize(y, 1.5);
        prop_assert_eq!(flagged == Region::Anomaly, y >= 1.5);
    }

    #[test]
    fn combine_max_dominates(m in -100.0f64..100.0, h in -100.0f64..100.0) {
        let c = combine_max(m, h);
        prop_assert!(c >= m && c >= h);
        prop_assert!(c == m || c == h);
    }

    #[test]
    fn sample_weight_is_even_bounded(t in -50.0f64..50.0) {
        let w = sample_weight(t);
        prop_assert!((w - sample_weight(-t)).abs() < 1e-12);
        prop_assert!(w <= WEIGHT_CAP);
        // 1/phi(0) is the global minimum of the uncapped weight.
        prop_assert!(w >= (2.0 * std::f64::consts::PI).sqrt() - 1e-12);
        // Weight grows away from a typical target.
        prop_assert!(w >= sample_weight(0.0) - 1e-12);
    }

    #[test]
    fn wmse_is_a_premetric(
        rows in prop::collection::vec(([-5.0f64..5.0, -5.0f64..5.0],
                                       [-5.0f64..5.0, -5.0f64..5.0]), 1..30),
    ) {
        let preds: Vec<[f64; 2]> = rows.iter().map(|(p, _)| *p).collect();
        let targets: Vec<[f64; 2]> = rows.iter().map(|(_, t)| *t).collect();
        prop_assert!(wmse(&preds, &targets).unwrap() >= 0.0);
        prop_assert!(wmse(&targets, &targets).unwrap().abs() < 1e-15);
    }

    #[test]
    fn subject_generation_is_deterministic(seed in any::<u64>(), ordinal in 0u64..1000) {
        let cfg = SubjectGenConfig::default();
        let s = subject_seed(seed, ordinal);
        let a = generate_subject(&cfg, "s", s).unwrap();
        let b = generate_subject(&cfg, "s", s).unwrap();
        prop_assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            prop_assert_eq!(ra.week, rb.week);
            prop_assert_eq!(ra.ymrs, rb.ymrs);
            prop_assert_eq!(ra.hdrs, rb.hdrs);
            prop_assert_eq!(ra.flag, rb.flag);
        }
    }
}

#[test]
fn rrelu_eval_slope_is_the_expected_train_slope() {
    assert!((RRELU_EVAL_SLOPE - (RRELU_LO + RRELU_HI) / 2.0).abs() < 1e-15);
    assert!(RRELU_LO < RRELU_HI);
}
