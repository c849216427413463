//! Error, calibration and significance statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::blr::PredictiveDistribution;
use crate::error::{FedError, Result};

/// Minimum number of non-zero paired differences for a signed-rank test.
pub const MIN_PAIRS: usize = 5;

/// Largest sample handled by exact enumeration in [`wilcoxon_one_tailed`].
pub const EXACT_LIMIT: usize = 20;

pub fn rmse(pred: &[f64], targets: &[f64]) -> Result<f64> {
    if pred.len() != targets.len() {
        return Err(FedError::DimensionMismatch(format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    if pred.is_empty() {
        return Err(FedError::EmptyInput);
    }
    let sse: f64 = pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Sample mean and standard error of the mean (`sample std / sqrt(n)`).
/// The standard error of a single value is 0.
pub fn mean_sem(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(FedError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Nominal confidences `0.05, 0.10, ..., 0.95`.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
}

/// Empirical coverage of central Gaussian predictive intervals at each level.
pub fn calibration_curve(pred: &PredictiveDistribution, targets: &[f64], levels: &[f64]) -> Result<CalibrationCurve> {
    if pred.len() != targets.len() {
        return Err(FedError::DimensionMismatch(format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    if targets.is_empty() || levels.is_empty() {
        return Err(FedError::EmptyInput);
    }
    if levels.iter().any(|&p| !(p > 0.0 && p < 1.0)) || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FedError::InvalidConfig("levels must be strictly increasing inside (0, 1)".into()));
    }
    if pred.variance.iter().any(|&v| !(v >= 0.0)) {
        return Err(FedError::NonFinite("predictive variances must be non-negative".into()));
    }
    let normal = Normal::standard();
    let std = pred.std_dev();
    let coverage = levels
        .iter()
        .map(|&p| {
            let z = normal.inverse_cdf(0.5 * (1.0 + p));
            let inside =
                targets.iter().zip(&pred.mean).zip(&std).filter(|((t, m), s)| (*t - *m).abs() <= z * **s).count();
            inside as f64 / targets.len() as f64
        })
        .collect();
    Ok(CalibrationCurve { levels: levels.to_vec(), coverage })
}

/// Mean absolute gap between coverage and nominal level.
pub fn ece(curve: &CalibrationCurve) -> f64 {
    let n = curve.levels.len() as f64;
    gaps(curve).sum::<f64>() / n
}

/// Largest gap between coverage and nominal level.
pub fn mce(curve: &CalibrationCurve) -> f64 {
    gaps(curve).fold(0.0, f64::max)
}

fn gaps(curve: &CalibrationCurve) -> impl Iterator<Item = f64> + '_ {
    curve.levels.iter().zip(&curve.coverage).map(|(p, c)| (c - p).abs())
}

/// Mean over levels and points of `(p - inside)^2`. A point lies inside
/// a level's interval with frequency `coverage`, so the per-point sum
/// reduces to the curve.
pub fn brier(curve: &CalibrationCurve) -> f64 {
    let n = curve.levels.len() as f64;
    curve.levels.iter().zip(&curve.coverage).map(|(p, c)| c * (1.0 - p) * (1.0 - p) + (1.0 - c) * p * p).sum::<f64>()
        / n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `a` tends to be smaller than `b`.
    ALess,
    /// `a` tends to be larger than `b`.
    AGreater,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact up to [`EXACT_LIMIT`] pairs, normal approximation beyond.
    Auto,
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Sum of ranks of the positive differences `a - b`.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
}

pub fn wilcoxon_one_tailed(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    wilcoxon_with(a, b, alternative, WilcoxonMethod::Auto)
}

pub fn wilcoxon_with(a: &[f64], b: &[f64], alternative: Alternative, method: WilcoxonMethod) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(FedError::DimensionMismatch(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(FedError::NonFinite("paired differences".into()));
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(FedError::TooFewPairs { needed: MIN_PAIRS, got: n });
    }
    let (ranks, tie_sizes) = midranks(&diffs);
    let w: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_LIMIT,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact { exact_p(&ranks, w, alternative) } else { normal_p(n, &tie_sizes, w, alternative) };
    Ok(TestResult { statistic: w, p_value: p_value.clamp(f64::MIN_POSITIVE, 1.0), n_effective: n })
}

/// Midranks of `|d|` (1-based) and the sizes of tied groups.
fn midranks(diffs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mid;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Null distribution of `W+` over equally likely sign vectors. Midranks are
/// multiples of 1/2, so doubled ranks index an integer grid.
fn exact_p(ranks: &[f64], w: f64, alternative: Alternative) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut dist = vec![0.0; total + 1];
    dist[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            let p = dist[s] * 0.5;
            dist[s] = p;
            dist[s + r] += p;
        }
        reach += r;
    }
    let w2 = (2.0 * w).round() as usize;
    match alternative {
        Alternative::AGreater => dist[w2..].iter().sum(),
        Alternative::ALess => dist[..=w2].iter().sum(),
    }
}

fn normal_p(n: usize, ties: &[usize], w: f64, alternative: Alternative) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let normal = Normal::standard();
    match alternative {
        Alternative::AGreater => normal.sf((w - mean - 0.5) / sd),
        Alternative::ALess => normal.cdf((w - mean + 0.5) / sd),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Enumerates all `2^n` sign vectors.
    fn brute_force_p(ranks: &[f64], w: f64, alternative: Alternative) -> f64 {
        let n = ranks.len();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            let hit = match alternative {
                Alternative::AGreater => s >= w - 1e-9,
                Alternative::ALess => s <= w + 1e-9,
            };
            hits += hit as u64;
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[1.5, -0.5, 2.5], &[0.0, -2.0, 1.0]).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(rmse(&[], &[]), Err(FedError::EmptyInput)));
    }

    #[test]
    fn mean_sem_matches_hand_values() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_sem(&[4.0]).unwrap(), (4.0, 0.0));
    }

    #[test]
    fn ece_mce_arithmetic() {
        let levels: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let curve = CalibrationCurve { coverage: vec![1.0; 9], levels };
        assert!((ece(&curve) - 0.5).abs() < 1e-12);
        assert!((mce(&curve) - 0.9).abs() < 1e-12);
        let single = CalibrationCurve { levels: vec![0.5], coverage: vec![0.3] };
        assert!((ece(&single) - 0.2).abs() < 1e-12 && (mce(&single) - 0.2).abs() < 1e-12);
        let perfect = CalibrationCurve { levels: vec![0.2, 0.7], coverage: vec![0.2, 0.7] };
        assert_eq!((ece(&perfect), mce(&perfect)), (0.0, 0.0));
    }

    #[test]
    fn brier_cases() {
        let half = CalibrationCurve { levels: vec![0.5], coverage: vec![0.5] };
        assert!((brier(&half) - 0.25).abs() < 1e-15);
        // confidence close to 1: inside always -> ~0, never -> ~1
        let hi = CalibrationCurve { levels: vec![1.0 - 1e-12], coverage: vec![1.0] };
        assert!(brier(&hi) < 1e-20);
        let miss = CalibrationCurve { levels: vec![1.0 - 1e-12], coverage: vec![0.0] };
        assert!((brier(&miss) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn coverage_of_sampled_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let variance: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let targets: Vec<f64> =
            mean.iter().zip(&variance).map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let pred = PredictiveDistribution { mean, variance };
        let curve = calibration_curve(&pred, &targets, &default_levels()).unwrap();
        for (p, c) in curve.levels.iter().zip(&curve.coverage) {
            assert!((p - c).abs() < 0.02, "level {p}: coverage {c}");
        }
        assert!(curve.coverage.windows(2).all(|w| w[0] <= w[1]));
        assert!(ece(&curve) <= mce(&curve));
    }

    #[test]
    fn degenerate_coverage() {
        let exact = PredictiveDistribution { mean: vec![1.0, 2.0], variance: vec![0.0, 0.0] };
        let c = calibration_curve(&exact, &[1.0, 2.0], &default_levels()).unwrap();
        assert!(c.coverage.iter().all(|&v| v == 1.0));
        let far = PredictiveDistribution { mean: vec![100.0, -100.0], variance: vec![1e-6, 1e-6] };
        let c = calibration_curve(&far, &[0.0, 0.0], &default_levels()).unwrap();
        assert!(c.coverage.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wilcoxon_all_positive_five() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_one_tailed(&a, &b, Alternative::AGreater).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert_eq!(r.n_effective, 5);
        assert!((r.p_value - 0.03125).abs() < 1e-15);
        let r = wilcoxon_one_tailed(&a, &b, Alternative::ALess).unwrap();
        assert!((r.p_value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_too_few_pairs() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(
            wilcoxon_one_tailed(&a, &a, Alternative::ALess),
            Err(FedError::TooFewPairs { needed: 5, got: 0 })
        ));
        let b = [1.0, 2.0, 3.0, 4.5, 5.5, 6.0];
        assert!(matches!(wilcoxon_one_tailed(&a, &b, Alternative::ALess), Err(FedError::TooFewPairs { .. })));
    }

    #[test]
    fn midranks_for_ties() {
        let (r, t) = midranks(&[1.0, -1.0, 2.0, 3.0, -3.0, 3.0]);
        assert_eq!(r, vec![1.5, 1.5, 3.0, 5.0, 5.0, 5.0]);
        assert_eq!(t, vec![2, 1, 3]);
    }

    #[test]
    fn exact_and_normal_agree_at_twenty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..20).map(|_| rng.sample::<f64, _>(StandardNormal) + 0.3).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
            let e = wilcoxon_with(&a, &b, Alternative::AGreater, WilcoxonMethod::Exact).unwrap();
            let n = wilcoxon_with(&a, &b, Alternative::AGreater, WilcoxonMethod::Normal).unwrap();
            assert!((e.p_value - n.p_value).abs() < 0.01, "{} vs {}", e.p_value, n.p_value);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn exact_matches_enumeration(
            diffs in prop::collection::vec(prop_oneof![-4i32..=-1, 1i32..=4], 5..14),
            greater in any::<bool>(),
        ) {
            let a: Vec<f64> = diffs.iter().map(|&d| d as f64).collect();
            let b = vec![0.0; a.len()];
            let alt = if greater { Alternative::AGreater } else { Alternative::ALess };
            let r = wilcoxon_with(&a, &b, alt, WilcoxonMethod::Exact).unwrap();
            let (ranks, _) = midranks(&a);
            prop_assert!((r.p_value - brute_force_p(&ranks, r.statistic, alt)).abs() < 1e-12);
            let max = (a.len() * (a.len() + 1) / 2) as f64;
            prop_assert!(r.statistic >= 0.0 && r.statistic <= max);
            prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        }

        #[test]
        fn exact_p_invariant_under_monotone_magnitudes(
            mags in prop::collection::vec(0.01f64..10.0, 6..15),
            signs in prop::collection::vec(any::<bool>(), 15),
        ) {
            let d: Vec<f64> = mags.iter().zip(&signs).map(|(m, s)| if *s { *m } else { -*m }).collect();
            let t: Vec<f64> = d.iter().map(|v| v.signum() * (v.abs().powi(3) + 2.0 * v.abs())).collect();
            let zeros = vec![0.0; d.len()];
            let p1 = wilcoxon_one_tailed(&d, &zeros, Alternative::AGreater).unwrap().p_value;
            let p2 = wilcoxon_one_tailed(&t, &zeros, Alternative::AGreater).unwrap().p_value;
            prop_assert!((p1 - p2).abs() < 1e-15);
        }
    }
}
