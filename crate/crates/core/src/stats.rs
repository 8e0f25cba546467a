//! Moment statistics, Welch's t-test and Benjamini–Hochberg control.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::scalar::{mean, Scalar};

/// Fisher skewness from population moments. `None` for fewer than two values or zero spread.
pub fn skewness<T: Scalar>(xs: &[T]) -> Option<T> {
    let (m2, m3, _) = central_moments(xs)?;
    Some(m3 / m2.powf(T::lit(1.5)))
}

/// Excess kurtosis (`m4/m2² − 3`, normal → 0) from population moments.
pub fn excess_kurtosis<T: Scalar>(xs: &[T]) -> Option<T> {
    let (m2, _, m4) = central_moments(xs)?;
    Some(m4 / (m2 * m2) - T::lit(3.0))
}

fn central_moments<T: Scalar>(xs: &[T]) -> Option<(T, T, T)> {
    if xs.len() < 2 {
        return None;
    }
    let mu = mean(xs)?;
    let n = T::from_usize_lossy(xs.len());
    let (mut m2, mut m3, mut m4) = (T::zero(), T::zero(), T::zero());
    for &x in xs {
        let d = x - mu;
        let d2 = d * d;
        m2 = m2 + d2;
        m3 = m3 + d2 * d;
        m4 = m4 + d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 <= T::zero() {
        return None;
    }
    Some((m2, m3, m4))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult<T> {
    pub t: T,
    pub df: T,
    pub p: T,
}

/// Two-sided Welch t-test of `mean(a) − mean(b)`.
///
/// `None` when either sample has fewer than two values. When both samples
/// have zero variance the statistic is 0 (p = 1) for equal means and ±∞
/// (p = 0) otherwise.
pub fn welch_t_test<T: Scalar>(a: &[T], b: &[T]) -> Option<WelchResult<T>> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().map(|v| v.as_f64()).sum::<f64>() / na;
    let mb = b.iter().map(|v| v.as_f64()).sum::<f64>() / nb;
    let va = a.iter().map(|v| (v.as_f64() - ma).powi(2)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|v| (v.as_f64() - mb).powi(2)).sum::<f64>() / (nb - 1.0);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let diff = ma - mb;
    if se2 <= 0.0 {
        let df = T::lit(na + nb - 2.0);
        return Some(if diff == 0.0 {
            WelchResult { t: T::zero(), df, p: T::one() }
        } else {
            WelchResult { t: T::lit(diff.signum() * f64::INFINITY), df, p: T::zero() }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = two_sided_t_p(t, df);
    Some(WelchResult { t: T::lit(t), df: T::lit(df), p: T::lit(p) })
}

/// Two-sided p-value of a t statistic, computed from the lower tail to keep precision for large `|t|`.
pub fn two_sided_t_p(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

/// Benjamini–Hochberg step-up: flags every hypothesis with `p ≤ p(k)` where
/// `k` is the largest rank with `p(k) ≤ k·q/m`.
pub fn bh_fdr<T: Scalar>(p: &[T], q: f64) -> Result<Vec<bool>> {
    if let Some(bad) = p.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Validation(format!("p-value {bad} outside [0, 1]")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Validation(format!("FDR level {q} outside (0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).expect("finite p"));
    let mut cutoff = None;
    for (rank, &i) in order.iter().enumerate() {
        let threshold = (rank + 1) as f64 * q / m as f64;
        if p[i].as_f64() <= threshold {
            cutoff = Some(p[i]);
        }
    }
    Ok(match cutoff {
        Some(c) => p.iter().map(|&v| v <= c).collect(),
        None => vec![false; m],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn moment_examples() {
        let z = [-1.0f64, 0.0, 1.0];
        assert!(skewness(&z).unwrap().abs() < 1e-15);
        assert!((excess_kurtosis(&z).unwrap() + 1.5).abs() < 1e-12);
        assert_eq!(skewness(&[1.0f64, 1.0, 1.0]), None);
    }

    #[test]
    fn welch_hand_example() {
        let r = welch_t_test(&[0.0f64, 1.0], &[2.0, 3.0]).unwrap();
        assert!((r.t + 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((r.df - 2.0).abs() < 1e-12);
        // t_2 two-sided tail at 2√2: 1 - 2/sqrt(3)·… ; direct formula for df=2
        let expected = 1.0 - r.t.abs() / (2.0 + r.t * r.t).sqrt();
        assert!((r.p - expected).abs() < 1e-12);
    }

    #[test]
    fn welch_edge_cases() {
        let r = welch_t_test(&[1.0f64, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-15);
        let c = welch_t_test(&[2.0f64, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!((c.t, c.p), (0.0, 1.0));
        let d = welch_t_test(&[3.0f64, 3.0], &[2.0, 2.0]).unwrap();
        assert_eq!((d.t, d.p), (f64::INFINITY, 0.0));
        assert!(welch_t_test(&[1.0f64], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn welch_antisymmetry() {
        let a = [0.3f64, 1.2, -0.4, 2.2, 0.9];
        let b = [1.0f64, 1.5, 2.5, 0.7];
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
    }

    #[test]
    fn p_monotone_in_t() {
        let ps: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|&t| two_sided_t_p(t, 12.0)).collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
        assert!(two_sided_t_p(40.0, 200.0) > 0.0);
    }

    #[test]
    fn bh_hand_example() {
        let flags = bh_fdr(&[0.001f64, 0.02, 0.03, 0.6], 0.05).unwrap();
        assert_eq!(flags, vec![true, true, true, false]);
        assert_eq!(bh_fdr(&[1.0f64; 5], 0.05).unwrap(), vec![false; 5]);
        assert!(bh_fdr(&[1.2f64], 0.05).is_err());
        assert!(bh_fdr(&[f64::NAN], 0.05).is_err());
        assert!(bh_fdr::<f64>(&[], 0.05).unwrap().is_empty());
    }

    #[test]
    fn bh_step_up_passes_over_early_failures() {
        // rank 1 fails (0.02 > 0.0125) but rank 2 passes, so both are flagged
        let flags = bh_fdr(&[0.02f64, 0.024, 0.9, 0.8], 0.05).unwrap();
        assert_eq!(flags, vec![true, true, false, false]);
    }

    /// Exhaustive oracle: a cutoff `c` taken from the p-values is admissible when
    /// `#{p ≤ c} · q / m ≥ c`; the largest admissible cutoff defines the rejections.
    fn bh_oracle(p: &[f64], q: f64) -> Vec<bool> {
        let m = p.len() as f64;
        let best = p
            .iter()
            .copied()
            .filter(|&c| c <= p.iter().filter(|&&v| v <= c).count() as f64 * q / m)
            .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))));
        p.iter().map(|&v| best.is_some_and(|b| v <= b)).collect()
    }

    #[test]
    fn bh_matches_oracle_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let m = rng.random_range(1..60);
            let p: Vec<f64> = (0..m)
                .map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..0.01) } else { rng.random::<f64>() })
                .collect();
            assert_eq!(bh_fdr(&p, 0.05).unwrap(), bh_oracle(&p, 0.05));
        }
    }
}
