//! Model configuration: factor volatility, default-time map, Cox baseline
//! hazard, jump stream and client default clock.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::special::{norm_cdf, norm_pdf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Deterministic-hazard Cox clock independent of the factor (immersion).
    Cox,
    /// Univariate dynamic Gaussian copula.
    Dgc,
}

/// Increasing map `Ψ: ℝ → (0, ∞)` turning the terminal factor into a default time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiFamily {
    /// `Ψ(x) = scale · exp(x / sigma)`.
    Exponential { scale: f64, sigma: f64 },
    /// `Ψ(x) = scale · ln(1 + exp(x / sigma))`.
    Softplus { scale: f64, sigma: f64 },
}

impl Default for PsiFamily {
    fn default() -> Self {
        PsiFamily::Exponential { scale: 1.0, sigma: 1.0 }
    }
}

impl PsiFamily {
    fn params(&self) -> (f64, f64) {
        match *self {
            PsiFamily::Exponential { scale, sigma } | PsiFamily::Softplus { scale, sigma } => (scale, sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (scale, sigma) = self.params();
        if !(scale.is_finite() && scale > 0.0 && sigma.is_finite() && sigma > 0.0) {
            return config(format!("psi parameters must be positive, got scale={scale}, sigma={sigma}"));
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            PsiFamily::Exponential { scale, sigma } => scale * (x / sigma).exp(),
            PsiFamily::Softplus { scale, sigma } => {
                let y = x / sigma;
                let sp = if y > 30.0 { y + (-y).exp().ln_1p() } else { y.exp().ln_1p() };
                scale * sp
            }
        }
    }

    /// `Ψ⁻¹(t)` for `t > 0`.
    pub fn inverse(&self, t: f64) -> f64 {
        match *self {
            PsiFamily::Exponential { scale, sigma } => sigma * (t / scale).ln(),
            PsiFamily::Softplus { scale, sigma } => {
                let u = t / scale;
                // ln(e^u − 1) = u + ln(1 − e^{−u})
                sigma * (u + (-(-u).exp()).ln_1p())
            }
        }
    }

    /// `(Ψ⁻¹)'(t)` for `t > 0`.
    pub fn inverse_derivative(&self, t: f64) -> f64 {
        match *self {
            PsiFamily::Exponential { sigma, .. } => sigma / t,
            PsiFamily::Softplus { scale, sigma } => {
                let u = t / scale;
                sigma / (scale * (-(-u).exp_m1()))
            }
        }
    }

    /// Checks that `Ψ` is finite, positive and strictly increasing on `[lo, hi]`.
    pub fn check_increasing_on(&self, lo: f64, hi: f64) -> Result<()> {
        const N: usize = 64;
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=N {
            let x = if hi > lo { lo + (hi - lo) * k as f64 / N as f64 } else { lo };
            let y = self.eval(x);
            if !(y > 0.0) || y.is_nan() {
                return Err(Error::Model(format!("psi({x}) = {y} is not in (0, inf)")));
            }
            if hi > lo && !(y > prev) && y.is_finite() {
                return Err(Error::Model(format!("psi is not strictly increasing near x = {x}")));
            }
            prev = y;
        }
        Ok(())
    }
}

/// Deterministic hazard rate of the Cox baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoxHazard {
    Constant { rate: f64 },
    /// `rate(t) = intercept + slope · t`.
    Linear { intercept: f64, slope: f64 },
}

impl Default for CoxHazard {
    fn default() -> Self {
        CoxHazard::Constant { rate: 0.1 }
    }
}

impl CoxHazard {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CoxHazard::Constant { rate } => rate.is_finite() && rate >= 0.0,
            CoxHazard::Linear { intercept, slope } => {
                intercept.is_finite() && slope.is_finite() && intercept >= 0.0 && slope >= 0.0
            }
        };
        if !ok {
            return config(format!("cox hazard must be nonnegative: {self:?}"));
        }
        Ok(())
    }

    pub fn rate(&self, t: f64) -> f64 {
        match *self {
            CoxHazard::Constant { rate } => rate,
            CoxHazard::Linear { intercept, slope } => intercept + slope * t,
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            CoxHazard::Constant { rate } => rate * t,
            CoxHazard::Linear { intercept, slope } => intercept * t + 0.5 * slope * t * t,
        }
    }

    /// First time the cumulative hazard reaches `level` (`+∞` if never).
    pub fn inverse_cumulative(&self, level: f64) -> f64 {
        match *self {
            CoxHazard::Constant { rate } => {
                if rate > 0.0 {
                    level / rate
                } else {
                    f64::INFINITY
                }
            }
            CoxHazard::Linear { intercept, slope } => {
                if slope > 0.0 {
                    // slope/2 t² + intercept t − level = 0, stable root
                    let disc = intercept * intercept + 2.0 * slope * level;
                    2.0 * level / (intercept + disc.sqrt())
                } else if intercept > 0.0 {
                    level / intercept
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

/// Law of the jump marks on `E ⊆ ℝ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkLaw {
    Exponential { mean: f64 },
    Normal { mean: f64, sd: f64 },
    Constant { value: f64 },
}

impl Default for MarkLaw {
    fn default() -> Self {
        MarkLaw::Exponential { mean: 1.0 }
    }
}

impl MarkLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MarkLaw::Exponential { mean } => mean.is_finite() && mean > 0.0,
            MarkLaw::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            MarkLaw::Constant { value } => value.is_finite(),
        };
        if !ok {
            return config(format!("invalid mark law {self:?}"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MarkLaw::Exponential { mean } => {
                let e: f64 = Exp1.sample(rng);
                mean * e
            }
            MarkLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            MarkLaw::Constant { value } => value,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            MarkLaw::Exponential { mean } => mean,
            MarkLaw::Normal { mean, .. } => mean,
            MarkLaw::Constant { value } => value,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            MarkLaw::Exponential { mean } => 2.0 * mean * mean,
            MarkLaw::Normal { mean, sd } => mean * mean + sd * sd,
            MarkLaw::Constant { value } => value * value,
        }
    }

    /// `∫ x 1{|x|>1} m(dx)`, the big-jump part removed by the truncation.
    pub fn big_jump_mean(&self) -> f64 {
        match *self {
            MarkLaw::Exponential { mean } => (1.0 + mean) * (-1.0 / mean).exp(),
            MarkLaw::Normal { mean, sd } => {
                let hi = (1.0 - mean) / sd;
                let lo = (-1.0 - mean) / sd;
                mean * (1.0 - (norm_cdf(hi) - norm_cdf(lo))) + sd * (norm_pdf(hi) - norm_pdf(lo))
            }
            MarkLaw::Constant { value } => {
                if value.abs() > 1.0 {
                    value
                } else {
                    0.0
                }
            }
        }
    }
}

/// Marked Poisson stream independent of the factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    #[serde(default = "default_jump_intensity")]
    pub intensity: f64,
    #[serde(default)]
    pub marks: MarkLaw,
}

fn default_jump_intensity() -> f64 {
    1.0
}

impl Default for JumpConfig {
    fn default() -> Self {
        Self { intensity: default_jump_intensity(), marks: MarkLaw::default() }
    }
}

/// Deterministic factor volatility `ς(s) = √κ e^{−κs/2}`, normalized so that
/// `∫_0^∞ ς² = 1` and `ν²(t) = ∫_t^∞ ς² = e^{−κt}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorVol {
    pub kappa: f64,
}

impl FactorVol {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return config(format!("kappa must be positive, got {kappa}"));
        }
        let vol = Self { kappa };
        let total = vol.normalization();
        if (total - 1.0).abs() > 1e-12 {
            return config(format!("factor volatility is not normalized: integral = {total}"));
        }
        Ok(vol)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.kappa.sqrt() * (-0.5 * self.kappa * t).exp()
    }

    /// `ν(t)`, the residual standard deviation of the terminal factor.
    pub fn nu(&self, t: f64) -> f64 {
        (-0.5 * self.kappa * t).exp()
    }

    /// `∫_0^t ς²`.
    pub fn cum_var(&self, t: f64) -> f64 {
        -(-self.kappa * t).exp_m1()
    }

    /// `∫_a^b ς²`.
    pub fn var_between(&self, a: f64, b: f64) -> f64 {
        (-self.kappa * a).exp() * -(-self.kappa * (b - a)).exp_m1()
    }

    /// `∫_a^b ς`.
    pub fn vol_integral(&self, a: f64, b: f64) -> f64 {
        let k = self.kappa;
        2.0 / k.sqrt() * (-0.5 * k * a).exp() * -(-0.5 * k * (b - a)).exp_m1()
    }

    /// `∫_0^∞ ς²` by Gauss–Laguerre quadrature after the substitution `x = κs`.
    pub fn normalization(&self) -> f64 {
        // ∫_0^∞ κ e^{−κs} ds = ∫_0^∞ e^{−x} dx; 4-point Gauss–Laguerre is exact for the
        // constant integrand left after factoring out the weight.
        const W: [f64; 4] = [0.603_154_104_341_633_6, 0.357_418_692_437_799_7, 0.038_887_908_515_005_38, 0.000_539_294_705_561_327_5];
        let weight_sum: f64 = W.iter().sum();
        let integrand = |s: f64| self.sigma(s).powi(2) / (self.kappa * (-self.kappa * s).exp());
        weight_sum * integrand(0.0)
    }
}

fn default_kappa() -> f64 {
    1.0
}

fn default_horizon() -> f64 {
    1.0
}

fn default_client_hazard() -> Option<f64> {
    Some(0.5)
}

/// Full model block of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub psi: PsiFamily,
    #[serde(default)]
    pub cox_hazard: CoxHazard,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub jumps: JumpConfig,
    /// Hazard rate of the independent client default clock (CVA example);
    /// `null` switches the clock off.
    #[serde(default = "default_client_hazard")]
    pub client_hazard: Option<f64>,
}

impl ModelConfig {
    pub fn dgc() -> Self {
        Self {
            kind: ModelKind::Dgc,
            kappa: 1.0,
            psi: PsiFamily::default(),
            cox_hazard: CoxHazard::default(),
            horizon: 1.0,
            jumps: JumpConfig::default(),
            client_hazard: default_client_hazard(),
        }
    }

    pub fn cox(rate: f64) -> Self {
        Self { kind: ModelKind::Cox, cox_hazard: CoxHazard::Constant { rate }, ..Self::dgc() }
    }

    pub fn validate(&self) -> Result<()> {
        FactorVol::new(self.kappa)?;
        self.psi.validate()?;
        self.cox_hazard.validate()?;
        self.jumps.marks.validate()?;
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return config(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.jumps.intensity.is_finite() && self.jumps.intensity >= 0.0) {
            return config(format!("jump intensity must be nonnegative, got {}", self.jumps.intensity));
        }
        if let Some(rate) = self.client_hazard {
            if !(rate.is_finite() && rate > 0.0) {
                return config(format!("client hazard must be positive, got {rate}"));
            }
        }
        Ok(())
    }

    pub fn vol(&self) -> FactorVol {
        FactorVol { kappa: self.kappa }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_inverse_roundtrip() {
        for psi in [
            PsiFamily::Exponential { scale: 1.0, sigma: 1.0 },
            PsiFamily::Exponential { scale: 2.0, sigma: 0.5 },
            PsiFamily::Softplus { scale: 1.5, sigma: 0.7 },
        ] {
            for &t in &[0.01, 0.3, 1.0, 4.0] {
                let x = psi.inverse(t);
                assert!((psi.eval(x) - t).abs() < 1e-12 * t.max(1.0), "{psi:?} {t}");
                let h = 1e-6;
                let fd = (psi.inverse(t + h) - psi.inverse(t - h)) / (2.0 * h);
                assert!((fd - psi.inverse_derivative(t)).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn psi_default_maps_zero_to_one() {
        assert_eq!(PsiFamily::default().eval(0.0), 1.0);
    }

    #[test]
    fn psi_checks() {
        let psi = PsiFamily::default();
        assert!(psi.check_increasing_on(-5.0, 5.0).is_ok());
        assert!(psi.check_increasing_on(-900.0, -800.0).is_err());
        assert!(PsiFamily::Exponential { scale: -1.0, sigma: 1.0 }.validate().is_err());
    }

    #[test]
    fn cox_inverse_cumulative() {
        let c = CoxHazard::Linear { intercept: 0.2, slope: 0.3 };
        let t = c.inverse_cumulative(0.7);
        assert!((c.cumulative(t) - 0.7).abs() < 1e-14);
        assert_eq!(CoxHazard::Constant { rate: 0.0 }.inverse_cumulative(1.0), f64::INFINITY);
        assert!((CoxHazard::Constant { rate: 0.1 }.inverse_cumulative(0.5) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn factor_vol_closed_forms() {
        let v = FactorVol::new(1.3).unwrap();
        assert!((v.normalization() - 1.0).abs() < 1e-12);
        assert!((v.cum_var(0.7) + v.nu(0.7).powi(2) - 1.0).abs() < 1e-15);
        assert!((v.var_between(0.2, 0.9) - (v.cum_var(0.9) - v.cum_var(0.2))).abs() < 1e-15);
        // ∫ς by Simpson
        let (a, b, n) = (0.1, 0.8, 2000);
        let h = (b - a) / n as f64;
        let mut s = v.sigma(a) + v.sigma(b);
        for k in 1..n {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * v.sigma(a + k as f64 * h);
        }
        assert!((s * h / 3.0 - v.vol_integral(a, b)).abs() < 1e-12);
        assert!(FactorVol::new(0.0).is_err());
        assert!(FactorVol::new(f64::NAN).is_err());
    }

    #[test]
    fn big_jump_means_match_quadrature() {
        let laws = [MarkLaw::Exponential { mean: 1.0 }, MarkLaw::Normal { mean: 0.3, sd: 1.2 }];
        for law in laws {
            let dens = |x: f64| match law {
                MarkLaw::Exponential { mean } => {
                    if x < 0.0 {
                        0.0
                    } else {
                        (-x / mean).exp() / mean
                    }
                }
                MarkLaw::Normal { mean, sd } => norm_pdf((x - mean) / sd) / sd,
                MarkLaw::Constant { .. } => unreachable!(),
            };
            let (a, b, n) = (-40.0, 40.0, 400_000);
            let h = (b - a) / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let x = a + (k as f64 + 0.5) * h;
                if x.abs() > 1.0 {
                    acc += x * dens(x) * h;
                }
            }
            assert!((acc - law.big_jump_mean()).abs() < 1e-5, "{law:?}: {acc}");
        }
    }

    #[test]
    fn model_validation() {
        assert!(ModelConfig::dgc().validate().is_ok());
        let mut m = ModelConfig::dgc();
        m.kappa = -1.0;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::cox(0.1);
        m.client_hazard = Some(0.0);
        assert!(m.validate().is_err());
    }
}
