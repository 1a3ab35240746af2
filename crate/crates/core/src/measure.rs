//! Monte Carlo estimators under ℚ, under ℙ (invariance-density weights) and
//! under the survival weights, with influence-function standard errors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compensated (Neumaier) sum in iteration order.
pub fn fsum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Point estimate together with its per-sample influence values `ψ_i`, so that
/// `estimate − truth ≈ mean(ψ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Influence {
    pub value: f64,
    pub psi: Vec<f64>,
}

impl Influence {
    pub fn mean(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::EmptySample);
        }
        let value = fsum(xs.iter().copied()) / xs.len() as f64;
        Ok(Self { value, psi: xs.iter().map(|x| x - value).collect() })
    }

    /// `Σ num / Σ den` with delta-method influence `(num_i − R den_i) / mean(den)`.
    pub fn ratio(num: &[f64], den: &[f64]) -> Result<Self> {
        if num.is_empty() {
            return Err(Error::EmptySample);
        }
        if num.len() != den.len() {
            return Err(Error::Precondition(format!("ratio needs equal lengths, got {} and {}", num.len(), den.len())));
        }
        let sd = fsum(den.iter().copied());
        if !(sd > 0.0) {
            return Err(Error::Precondition(format!("ratio denominator sums to {sd}")));
        }
        let value = fsum(num.iter().copied()) / sd;
        let dbar = sd / den.len() as f64;
        Ok(Self { value, psi: num.iter().zip(den).map(|(x, w)| (x - value * w) / dbar).collect() })
    }

    /// Self-normalized weighted mean `Σ w x / Σ w`.
    pub fn weighted(xs: &[f64], weights: &[f64]) -> Result<Self> {
        let num: Vec<f64> = xs.iter().zip(weights).map(|(x, w)| x * w).collect();
        Self::ratio(&num, weights)
    }

    pub fn n(&self) -> usize {
        self.psi.len()
    }

    pub fn std_error(&self) -> f64 {
        let n = self.psi.len();
        if n < 2 {
            return 0.0;
        }
        (fsum(self.psi.iter().map(|x| x * x)) / (n as f64 * (n as f64 - 1.0))).sqrt()
    }

    /// Paired comparison on the same sample: the standard error of the
    /// difference uses `ψ_lhs − ψ_rhs`, which keeps the common noise out.
    pub fn compare(&self, rhs: &Influence) -> Result<Comparison> {
        if self.n() != rhs.n() {
            return Err(Error::Precondition("paired comparison needs equal sample sizes".into()));
        }
        let diff: Vec<f64> = self.psi.iter().zip(&rhs.psi).map(|(a, b)| a - b).collect();
        let se = Influence { value: 0.0, psi: diff }.std_error();
        Ok(Comparison::new(self.value, rhs.value, se))
    }
}

/// Two estimates and the z-score of their difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub z: f64,
}

impl Comparison {
    pub fn new(lhs: f64, rhs: f64, se: f64) -> Self {
        Self { lhs, rhs, se, z: z_score(lhs - rhs, se, 0.0) }
    }

    /// As [`Comparison::new`], with differences inside `floor` scored as zero.
    pub fn with_floor(self, floor: f64) -> Self {
        Self { z: z_score(self.lhs - self.rhs, self.se, floor), ..self }
    }

    /// Comparison of independent estimates.
    pub fn independent(lhs: &Influence, rhs: &Influence) -> Self {
        Self::new(lhs.value, rhs.value, lhs.std_error().hypot(rhs.std_error()))
    }

    /// Against a known value.
    pub fn against(lhs: &Influence, value: f64) -> Self {
        Self::new(lhs.value, value, lhs.std_error())
    }
}

/// `diff / se`, with differences inside `floor` treated as exact zeros; a
/// nonzero difference with zero standard error is infinitely significant.
pub fn z_score(diff: f64, se: f64, floor: f64) -> f64 {
    if diff.abs() <= floor {
        0.0
    } else if se > 0.0 {
        diff / se
    } else if diff.is_nan() || se.is_nan() {
        f64::NAN
    } else {
        f64::INFINITY.copysign(diff)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// Plain ℚ sample mean.
    None,
    /// Self-normalized `𝒬_T` weights (ℙ expectation).
    Invariance,
    /// `e^{Γ_T} 1{τ > T}` weights.
    Survival,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimator {
    pub name: String,
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub weight_kind: WeightKind,
}

impl WeightedEstimator {
    pub fn from_influence(inf: &Influence, weight_kind: WeightKind) -> Self {
        Self { name: String::new(), mean: inf.value, std_error: inf.std_error(), n: inf.n(), weight_kind }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// ℚ expectation by the plain sample mean.
pub fn expect_q(samples: &[f64]) -> Result<WeightedEstimator> {
    Ok(WeightedEstimator::from_influence(&Influence::mean(samples)?, WeightKind::None))
}

fn check_weights(weights: &[f64], strict: bool) -> Result<()> {
    for (p, &w) in weights.iter().enumerate() {
        let ok = w.is_finite() && if strict { w > 0.0 } else { w >= 0.0 };
        if !ok {
            return Err(Error::Precondition(format!("weight on path {p} is {w}")));
        }
    }
    Ok(())
}

/// ℙ expectation: `Σ 𝒬_T x / Σ 𝒬_T` over ℚ samples.
pub fn expect_p(samples: &[f64], q_weights: &[f64]) -> Result<WeightedEstimator> {
    Ok(WeightedEstimator::from_influence(&p_influence(samples, q_weights)?, WeightKind::Invariance))
}

pub fn p_influence(samples: &[f64], q_weights: &[f64]) -> Result<Influence> {
    if samples.len() != q_weights.len() {
        return Err(Error::Precondition("samples and weights differ in length".into()));
    }
    check_weights(q_weights, true)?;
    Influence::weighted(samples, q_weights)
}

/// Survival-measure expectation with weights `e^{Γ_T} 1{τ > T}`.
pub fn expect_survival(samples: &[f64], cum_hazard_t: &[f64], tau: &[f64], horizon: f64) -> Result<WeightedEstimator> {
    let w: Vec<f64> = cum_hazard_t
        .iter()
        .zip(tau)
        .map(|(&g, &t)| if t > horizon { g.exp() } else { 0.0 })
        .collect();
    check_weights(&w, false)?;
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::Precondition("no path survives to the horizon".into()));
    }
    Ok(WeightedEstimator::from_influence(&Influence::weighted(samples, &w)?, WeightKind::Survival))
}

/// Result of testing that each column of a path × column array has mean zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroMeanTest {
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub max_abs_z: f64,
    pub worst_column: usize,
    pub threshold: f64,
    pub inconclusive: bool,
    pub pass: bool,
}

impl ZeroMeanTest {
    fn from_columns(means: Vec<f64>, std_errors: Vec<f64>, z_scores: Vec<f64>, threshold: f64, inconclusive: bool) -> Self {
        let (mut worst_column, mut max_abs_z) = (0, 0.0_f64);
        for (j, z) in z_scores.iter().enumerate() {
            if z.abs() > max_abs_z || z.is_nan() {
                max_abs_z = z.abs();
                worst_column = j;
                if z.is_nan() {
                    break;
                }
            }
        }
        let inconclusive = inconclusive || z_scores.is_empty();
        let pass = !inconclusive && max_abs_z <= threshold;
        ZeroMeanTest { means, std_errors, z_scores, max_abs_z, worst_column, threshold, inconclusive, pass }
    }

    /// The same column means scored against externally known standard errors.
    pub fn rescored(&self, std_errors: Vec<f64>, floor: f64) -> ZeroMeanTest {
        let z_scores = self.means.iter().zip(&std_errors).map(|(&m, &se)| z_score(m, se, floor)).collect();
        Self::from_columns(self.means.clone(), std_errors, z_scores, self.threshold, self.inconclusive)
    }

    /// The same test restricted to the columns for which `keep` holds.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> ZeroMeanTest {
        let idx: Vec<usize> = (0..self.z_scores.len()).filter(|&j| keep(j)).collect();
        let pick = |v: &[f64]| idx.iter().map(|&j| v[j]).collect::<Vec<_>>();
        let inconclusive = idx.iter().any(|&j| self.std_errors[j].is_nan());
        Self::from_columns(pick(&self.means), pick(&self.std_errors), pick(&self.z_scores), self.threshold, inconclusive)
    }

    pub fn median_abs_z(&self) -> f64 {
        let mut v: Vec<f64> = self.z_scores.iter().map(|z| z.abs()).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    }
}

/// Tests `E[x_{·,j}] = 0` (ℚ) or `E_ℙ[x_{·,j}] = 0` (with `𝒬` weights) for every
/// column `j`, where `row(p)` returns the `n_cols` values of path `p`.
///
/// Column means within `floor` count as zero, which keeps rounding noise on
/// deterministic columns from being reported as drift.
pub fn zero_mean_test<F>(n_paths: usize, n_cols: usize, weights: Option<&[f64]>, threshold: f64, floor: f64, row: F) -> Result<ZeroMeanTest>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    if let Some(w) = weights {
        if w.len() != n_paths {
            return Err(Error::Precondition("weights and paths differ in length".into()));
        }
        check_weights(w, false)?;
    }
    let rows: Vec<Vec<f64>> = (0..n_paths).into_par_iter().map(&row).collect::<Result<_>>()?;
    if let Some(r) = rows.iter().find(|r| r.len() != n_cols) {
        return Err(Error::Precondition(format!("row of length {} where {n_cols} expected", r.len())));
    }
    let cols: Vec<(f64, f64, bool)> = (0..n_cols)
        .into_par_iter()
        .map(|j| {
            let xs: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            if n_paths < 2 || xs.iter().any(|x| !x.is_finite()) {
                return (f64::NAN, f64::NAN, true);
            }
            let inf = match weights {
                Some(w) => Influence::weighted(&xs, w),
                None => Influence::mean(&xs),
            };
            match inf {
                Ok(inf) => (inf.value, inf.std_error(), false),
                Err(_) => (f64::NAN, f64::NAN, true),
            }
        })
        .collect();
    let inconclusive = cols.iter().any(|c| c.2);
    let z_scores: Vec<f64> = cols.iter().map(|&(m, se, _)| z_score(m, se, floor)).collect();
    Ok(ZeroMeanTest::from_columns(cols.iter().map(|c| c.0).collect(), cols.iter().map(|c| c.1).collect(), z_scores, threshold, inconclusive))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fsum_recovers_cancellation() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(fsum(xs), 2.0);
    }

    #[test]
    fn mean_and_standard_error_match_textbook() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let inf = Influence::mean(&xs).unwrap();
        assert_eq!(inf.value, 3.5);
        // sample sd = sqrt(21/3)
        assert!((inf.std_error() - (7.0_f64).sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_reduce_to_plain_mean() {
        let xs = [0.3, -1.2, 2.5, 0.0, 4.1];
        let a = expect_q(&xs).unwrap();
        let b = expect_p(&xs, &[1.0; 5]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!((a.std_error - b.std_error).abs() < 1e-15);
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(expect_p(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert!(expect_p(&[1.0, 2.0], &[1.0, f64::NAN]).is_err());
        assert!(expect_p(&[], &[]).is_err());
    }

    #[test]
    fn survival_weights_select_survivors() {
        let x = [1.0, 2.0, 3.0];
        let g = [0.1, 0.2, 0.3];
        let tau = [0.5, 2.0, 3.0];
        let e = expect_survival(&x, &g, &tau, 1.0).unwrap();
        let want = (2.0 * 0.2_f64.exp() + 3.0 * 0.3_f64.exp()) / (0.2_f64.exp() + 0.3_f64.exp());
        assert!((e.mean - want).abs() < 1e-15);
        assert!(expect_survival(&x, &g, &[0.1, 0.2, 0.3], 1.0).is_err());
    }

    #[test]
    fn paired_comparison_cancels_common_noise() {
        let a = Influence::mean(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Influence::mean(&[1.5, 2.5, 3.5, 4.5]).unwrap();
        let c = a.compare(&b).unwrap();
        assert_eq!(c.se, 0.0);
        assert!(c.z.is_infinite() && c.z < 0.0);
        assert!(Comparison::independent(&a, &b).z.abs() < 1.0);
    }

    #[test]
    fn z_score_degenerate_cases() {
        assert_eq!(z_score(0.0, 0.0, 0.0), 0.0);
        assert_eq!(z_score(1e-18, 0.0, 1e-15), 0.0);
        assert_eq!(z_score(1.0, 0.0, 0.0), f64::INFINITY);
        assert_eq!(z_score(-2.0, 0.5, 0.0), -4.0);
    }

    #[test]
    fn zero_mean_test_flags_drift_and_degenerate_input() {
        let ok = zero_mean_test(4, 2, None, 4.0, 0.0, |p| Ok(vec![0.0, if p % 2 == 0 { 1.0 } else { -1.0 }])).unwrap();
        assert!(ok.pass && !ok.inconclusive);
        let bad = zero_mean_test(4, 1, None, 4.0, 0.0, |_| Ok(vec![0.1])).unwrap();
        assert!(!bad.pass && bad.max_abs_z.is_infinite());
        let one = zero_mean_test(1, 1, None, 4.0, 0.0, |_| Ok(vec![0.0])).unwrap();
        assert!(one.inconclusive && !one.pass);
        let zero_w = zero_mean_test(2, 1, Some(&[0.0, 0.0]), 4.0, 0.0, |_| Ok(vec![1.0])).unwrap();
        assert!(zero_w.inconclusive);
    }
}
