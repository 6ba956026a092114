//! Transition-kernel schedules.
//!
//! A schedule fixes the Gaussian bridge kernel
//! `p(x_t | x_0, x_T) = N(alpha_t x_0 + beta_t x_T, gamma_t^2 I)` on `[0, T]`
//! with `T = 1`. From `(alpha, beta, gamma)` and their time derivatives the
//! pinned process is the linear SDE `dX = (f X + s x_T) dt + g dW` with
//!
//! ```text
//! f   = alpha' / alpha
//! s   = beta' - f beta
//! g^2 = 2 (gamma gamma' - f gamma^2)
//! ```
//!
//! All derivatives are hand-derived per family. `Custom` schedules fall back
//! to central differences.

mod epsilon;
mod grid;
mod i2sb;
mod reformulation;

pub use epsilon::{EpsilonKind, EpsilonPolicy};
pub use grid::{GridSpec, TimeGrid, DEFAULT_RHO, DEFAULT_T_MAX, DEFAULT_T_MIN};
pub use i2sb::I2sbSchedule;
pub use reformulation::{verify_reformulation, ReformulationFamily};

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time horizon. Every schedule in this crate lives on `[0, HORIZON]`.
pub const HORIZON: f64 = 1.0;

/// Threshold under which `alpha`, `beta` or `gamma` count as zero.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Step used for finite-difference derivatives of custom schedules.
const CUSTOM_FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    /// `alpha = 1 - t`, `beta = t`,
    /// `gamma = gamma_multiplier * (gamma_max / 2) * sqrt(t (1 - t))`.
    ///
    /// With the default multiplier of 1, `gamma^2 = gamma_max^2 t (1 - t) / 4`.
    /// A multiplier of 4 gives the `2 gamma_max sqrt(t (1 - t))` variant.
    Linear {
        gamma_max: f64,
        #[serde(default = "one")]
        gamma_multiplier: f64,
    },
    /// `alpha = cos(pi t / 2)`, `beta = sin(pi t / 2)`, `gamma = gamma_scale sin(pi t)`.
    Trig { gamma_scale: f64 },
    /// DDBM-VE with `sigma_t = sigma_max t`, `a_t = 1`.
    DdbmVe {
        #[serde(default = "one")]
        sigma_max: f64,
    },
    /// DDBM-VP with `sigma_t^2 = exp(beta_d t^2 / 2 + beta_min t) - 1` and
    /// `a_t = exp(-(beta_d t^2 / 2 + beta_min t) / 2)`.
    DdbmVp { beta_d: f64, beta_min: f64 },
    /// I2SB with `sigma_t^2` the integral of a piecewise-constant beta profile.
    I2sb(I2sbSchedule),
    /// EDM: `alpha = 1`, `beta = 0`, `gamma = sigma_t = t`.
    Edm,
    #[serde(skip)]
    Custom(CustomSchedule),
}

fn one() -> f64 {
    1.0
}

/// Values and time derivatives of `(alpha, beta, gamma)` at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScheduleEval {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
    pub d_gamma: f64,
    /// `gamma * gamma'`, i.e. half the derivative of `gamma^2`. Stays finite
    /// at endpoints where `gamma'` itself blows up.
    pub gamma_dgamma: f64,
}

impl ScheduleEval {
    /// `alpha' / alpha`.
    pub fn log_alpha_rate(&self, t: f64) -> Result<f64> {
        if self.alpha.abs() < SINGULAR_TOL {
            return Err(Error::AlphaSingularity { t });
        }
        Ok(self.d_alpha / self.alpha)
    }
}

/// Coefficients of the pinned-process SDE `dX = (f X + s x_T) dt + g dW`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BridgeCoefficients {
    pub f: f64,
    pub s: f64,
    pub g_sq: f64,
}

/// User-supplied `(alpha, beta, gamma)` curve; derivatives are taken by
/// central differences.
#[derive(Clone)]
pub struct CustomSchedule {
    pub name: String,
    func: Arc<dyn Fn(f64) -> (f64, f64, f64) + Send + Sync>,
}

impl CustomSchedule {
    pub fn eval_raw(&self, t: f64) -> (f64, f64, f64) {
        (self.func)(t)
    }
}

impl fmt::Debug for CustomSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSchedule")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

impl Schedule {
    pub fn linear(gamma_max: f64) -> Result<Self> {
        let s = Schedule::Linear {
            gamma_max,
            gamma_multiplier: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn trig(gamma_scale: f64) -> Result<Self> {
        let s = Schedule::Trig { gamma_scale };
        s.validate()?;
        Ok(s)
    }

    pub fn ddbm_ve(sigma_max: f64) -> Result<Self> {
        let s = Schedule::DdbmVe { sigma_max };
        s.validate()?;
        Ok(s)
    }

    pub fn ddbm_vp(beta_d: f64, beta_min: f64) -> Result<Self> {
        let s = Schedule::DdbmVp { beta_d, beta_min };
        s.validate()?;
        Ok(s)
    }

    /// Wraps an arbitrary `(alpha, beta, gamma)` curve. Derivatives are
    /// approximated numerically, so the derivative-consistency property does
    /// not apply.
    pub fn custom<F>(name: impl Into<String>, func: F) -> Self
    where
        F: Fn(f64) -> (f64, f64, f64) + Send + Sync + 'static,
    {
        let name = name.into();
        log::warn!("custom schedule `{name}` uses finite-difference derivatives");
        Schedule::Custom(CustomSchedule {
            name,
            func: Arc::new(func),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Schedule::Linear {
                gamma_max,
                gamma_multiplier,
            } => {
                positive("gamma_max", *gamma_max)?;
                positive("gamma_multiplier", *gamma_multiplier)
            }
            Schedule::Trig { gamma_scale } => positive("gamma_scale", *gamma_scale),
            Schedule::DdbmVe { sigma_max } => positive("sigma_max", *sigma_max),
            Schedule::DdbmVp { beta_d, beta_min } => {
                positive("beta_d", *beta_d)?;
                positive("beta_min", *beta_min)
            }
            Schedule::I2sb(s) => s.validate(),
            Schedule::Edm | Schedule::Custom(_) => Ok(()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Schedule::Linear { .. } => "linear",
            Schedule::Trig { .. } => "trig",
            Schedule::DdbmVe { .. } => "ddbm-ve",
            Schedule::DdbmVp { .. } => "ddbm-vp",
            Schedule::I2sb(_) => "i2sb",
            Schedule::Edm => "edm",
            Schedule::Custom(c) => &c.name,
        }
    }

    /// Bridge-family schedules pin both endpoints. EDM does not.
    pub fn is_bridge(&self) -> bool {
        !matches!(self, Schedule::Edm)
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        !matches!(self, Schedule::Custom(_))
    }

    /// Interior points where the schedule is only piecewise smooth.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Schedule::I2sb(s) => s.knots(),
            _ => Vec::new(),
        }
    }

    /// Evaluates `(alpha, beta, gamma)` and their derivatives at `t`.
    pub fn eval(&self, t: f64) -> Result<ScheduleEval> {
        if !(0.0..=HORIZON).contains(&t) {
            return Err(Error::OutOfRange {
                t,
                lo: 0.0,
                hi: HORIZON,
            });
        }
        self.validate()?;
        Ok(match self {
            Schedule::Linear {
                gamma_max,
                gamma_multiplier,
            } => {
                let k = gamma_multiplier * gamma_max / 2.0;
                let root = (t * (1.0 - t)).sqrt();
                ScheduleEval {
                    alpha: 1.0 - t,
                    beta: t,
                    gamma: k * root,
                    d_alpha: -1.0,
                    d_beta: 1.0,
                    d_gamma: k * (1.0 - 2.0 * t) / (2.0 * root),
                    gamma_dgamma: k * k * (1.0 - 2.0 * t) / 2.0,
                }
            }
            Schedule::Trig { gamma_scale } => {
                let (sin_h, cos_h) = (FRAC_PI_2 * t).sin_cos();
                let (sin_f, cos_f) = (PI * t).sin_cos();
                let gamma = gamma_scale * sin_f;
                let d_gamma = gamma_scale * PI * cos_f;
                ScheduleEval {
                    alpha: cos_h,
                    beta: sin_h,
                    gamma,
                    d_alpha: -FRAC_PI_2 * sin_h,
                    d_beta: FRAC_PI_2 * cos_h,
                    d_gamma,
                    gamma_dgamma: gamma * d_gamma,
                }
            }
            Schedule::DdbmVe { sigma_max } => {
                let root = (1.0 - t * t).sqrt();
                ScheduleEval {
                    alpha: 1.0 - t * t,
                    beta: t * t,
                    gamma: sigma_max * t * root,
                    d_alpha: -2.0 * t,
                    d_beta: 2.0 * t,
                    d_gamma: sigma_max * (1.0 - 2.0 * t * t) / root,
                    gamma_dgamma: sigma_max * sigma_max * (t - 2.0 * t * t * t),
                }
            }
            Schedule::DdbmVp { beta_d, beta_min } => eval_vp(*beta_d, *beta_min, t),
            Schedule::I2sb(s) => s.eval(t),
            Schedule::Edm => ScheduleEval {
                alpha: 1.0,
                beta: 0.0,
                gamma: t,
                d_alpha: 0.0,
                d_beta: 0.0,
                d_gamma: 1.0,
                gamma_dgamma: t,
            },
            Schedule::Custom(c) => eval_custom(c, t),
        })
    }

    /// Linear-SDE coefficients `(f, s, g^2)` of the pinned process at `t`.
    pub fn bridge_coefficients(&self, t: f64) -> Result<BridgeCoefficients> {
        let e = self.eval(t)?;
        let f = e.log_alpha_rate(t)?;
        let s = e.d_beta - f * e.beta;
        let mut g_sq = 2.0 * (e.gamma_dgamma - f * e.gamma * e.gamma);
        if g_sq < 0.0 {
            if g_sq < -SINGULAR_TOL {
                return Err(Error::NegativeRadicand {
                    what: "g^2",
                    t,
                    value: g_sq,
                });
            }
            g_sq = 0.0;
        }
        Ok(BridgeCoefficients { f, s, g_sq })
    }
}

/// DDBM-VP in terms of `E(t) = exp(beta_d t^2 / 2 + beta_min t)`:
/// `a = E^{-1/2}`, `sigma^2 = E - 1`, `r = sigma^2 a_1^2 / (sigma_1^2 a^2)`,
/// `alpha = a (1 - r)`, `beta = sigma^2 a_1 / (sigma_1^2 a)`, `gamma^2 = sigma^2 (1 - r)`.
fn eval_vp(beta_d: f64, beta_min: f64, t: f64) -> ScheduleEval {
    let expo = |t: f64| (0.5 * beta_d * t * t + beta_min * t).exp();
    let e = expo(t);
    let e1 = expo(HORIZON);
    let k = beta_d * t + beta_min;
    let de = e * k;

    let c = e1 * (e1 - 1.0);
    let a = 1.0 / e.sqrt();
    let da = -0.5 * a * k;
    let r = e * (e - 1.0) / c;
    let dr = (2.0 * e - 1.0) * de / c;

    let a1 = 1.0 / e1.sqrt();
    let sigma1_sq = e1 - 1.0;
    let beta_scale = a1 / sigma1_sq;

    let alpha = a * (1.0 - r);
    let d_alpha = da * (1.0 - r) - a * dr;
    let beta = beta_scale * (e - 1.0) * e.sqrt();
    let d_beta = beta_scale * e.sqrt() * k * (e + 0.5 * (e - 1.0));

    let gamma_sq = ((e - 1.0) * (1.0 - r)).max(0.0);
    let d_gamma_sq = de * (1.0 - r) - (e - 1.0) * dr;
    let gamma = gamma_sq.sqrt();
    ScheduleEval {
        alpha,
        beta,
        gamma,
        d_alpha,
        d_beta,
        d_gamma: d_gamma_sq / (2.0 * gamma),
        gamma_dgamma: 0.5 * d_gamma_sq,
    }
}

fn eval_custom(c: &CustomSchedule, t: f64) -> ScheduleEval {
    let h = CUSTOM_FD_STEP;
    let (lo, hi) = ((t - h).max(0.0), (t + h).min(HORIZON));
    let (a, b, g) = c.eval_raw(t);
    let (a_lo, b_lo, g_lo) = c.eval_raw(lo);
    let (a_hi, b_hi, g_hi) = c.eval_raw(hi);
    let span = hi - lo;
    let d_gamma = (g_hi - g_lo) / span;
    ScheduleEval {
        alpha: a,
        beta: b,
        gamma: g,
        d_alpha: (a_hi - a_lo) / span,
        d_beta: (b_hi - b_lo) / span,
        d_gamma,
        gamma_dgamma: (g_hi * g_hi - g_lo * g_lo) / (2.0 * span),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn all_kinds() -> Vec<Schedule> {
        vec![
            Schedule::linear(0.125).unwrap(),
            Schedule::linear(1.0).unwrap(),
            Schedule::trig(1.0).unwrap(),
            Schedule::ddbm_ve(1.0).unwrap(),
            Schedule::ddbm_vp(2.0, 0.1).unwrap(),
            Schedule::I2sb(I2sbSchedule::symmetric(7, 0.1, 1.0).unwrap()),
            Schedule::Edm,
        ]
    }

    #[test]
    fn linear_values() {
        let s = Schedule::linear(0.125).unwrap();
        let e = s.eval(0.0).unwrap();
        assert_eq!((e.alpha, e.beta, e.gamma), (1.0, 0.0, 0.0));
        let e = s.eval(0.5).unwrap();
        assert_abs_diff_eq!(e.alpha, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e.beta, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e.gamma, 0.03125, epsilon = 1e-15);
    }

    #[test]
    fn linear_multiplier_reaches_text_convention() {
        let s = Schedule::Linear {
            gamma_max: 0.125,
            gamma_multiplier: 4.0,
        };
        let e = s.eval(0.3).unwrap();
        assert_abs_diff_eq!(
            e.gamma,
            2.0 * 0.125 * (0.3f64 * 0.7).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn edm_and_trig_values() {
        let e = Schedule::Edm.eval(0.7).unwrap();
        assert_eq!((e.alpha, e.beta, e.gamma), (1.0, 0.0, 0.7));
        let e = Schedule::trig(1.0).unwrap().eval(0.5).unwrap();
        let h = std::f64::consts::SQRT_2 / 2.0;
        assert_abs_diff_eq!(e.alpha, h, epsilon = 1e-15);
        assert_abs_diff_eq!(e.beta, h, epsilon = 1e-15);
        assert_abs_diff_eq!(e.gamma, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn parameter_and_range_errors() {
        assert!(matches!(
            Schedule::linear(0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Schedule::linear(-1.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Schedule::ddbm_vp(0.0, 0.1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Schedule::ddbm_vp(2.0, -0.1),
            Err(Error::InvalidParameter(_))
        ));
        let s = Schedule::linear(0.125).unwrap();
        assert!(matches!(s.eval(1.5), Err(Error::OutOfRange { .. })));
        assert!(matches!(s.eval(-0.1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn bridge_coefficient_examples() {
        let s = Schedule::linear(0.125).unwrap();
        let c = s.bridge_coefficients(0.5).unwrap();
        assert_abs_diff_eq!(c.f, -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.s, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.g_sq, 0.00390625, epsilon = 1e-15);

        for &t in &[0.1, 0.4, 0.9] {
            let c = Schedule::Edm.bridge_coefficients(t).unwrap();
            assert_eq!((c.f, c.s), (0.0, 0.0));
            assert_abs_diff_eq!(c.g_sq, 2.0 * t, epsilon = 1e-15);
        }

        assert!(matches!(
            s.bridge_coefficients(1.0),
            Err(Error::AlphaSingularity { .. })
        ));
    }

    #[test]
    fn endpoint_constraints_hold_for_bridge_kinds() {
        for s in all_kinds().into_iter().filter(|s| s.is_bridge()) {
            let e0 = s.eval(0.0).unwrap();
            let e1 = s.eval(HORIZON).unwrap();
            let name = s.name().to_string();
            assert!((e0.alpha - 1.0).abs() < 1e-12, "{name}");
            assert!(e0.beta.abs() < 1e-12, "{name}");
            assert!(e0.gamma.abs() < 1e-12, "{name}");
            assert!(e1.alpha.abs() < 1e-12, "{name}");
            assert!((e1.beta - 1.0).abs() < 1e-12, "{name}");
            assert!(e1.gamma.abs() < 1e-12, "{name}: {}", e1.gamma);
        }
    }

    #[test]
    fn interior_positivity() {
        for s in all_kinds().into_iter().filter(|s| s.is_bridge()) {
            for i in 1..200 {
                let t = i as f64 / 200.0;
                let e = s.eval(t).unwrap();
                assert!(
                    e.alpha > 0.0 && e.beta > 0.0 && e.gamma > 0.0,
                    "{} t={t}",
                    s.name()
                );
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_central_differences() {
        let h = 1e-6;
        for s in all_kinds() {
            let kinks = s.kinks();
            for i in 1..=99 {
                let t = i as f64 / 100.0;
                if kinks.iter().any(|k| (k - t).abs() < 2.0 * h) {
                    continue;
                }
                let e = s.eval(t).unwrap();
                let lo = s.eval(t - h).unwrap();
                let hi = s.eval(t + h).unwrap();
                let pairs = [
                    (e.d_alpha, (hi.alpha - lo.alpha) / (2.0 * h)),
                    (e.d_beta, (hi.beta - lo.beta) / (2.0 * h)),
                    (e.d_gamma, (hi.gamma - lo.gamma) / (2.0 * h)),
                ];
                for (k, (analytic, fd)) in pairs.iter().enumerate() {
                    let scale = analytic.abs().max(1.0);
                    let rel = (analytic - fd).abs() / scale;
                    assert!(
                        rel < 1e-5,
                        "{} t={t} component {k}: {analytic} vs {fd}",
                        s.name()
                    );
                }
            }
        }
    }

    #[test]
    fn linear_diffusion_is_constant() {
        for &gm in &[0.125, 0.5, 1.0] {
            let s = Schedule::linear(gm).unwrap();
            for i in 1..=99 {
                let t = i as f64 / 100.0;
                let c = s.bridge_coefficients(t).unwrap();
                assert!((c.g_sq - gm * gm / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn g_sq_nonnegative_on_evaluation_interval() {
        for s in all_kinds() {
            for i in 0..=100 {
                let t = DEFAULT_T_MIN + (DEFAULT_T_MAX - DEFAULT_T_MIN) * i as f64 / 100.0;
                let c = s.bridge_coefficients(t).unwrap();
                assert!(c.g_sq >= 0.0 && c.f.is_finite() && c.s.is_finite());
            }
        }
    }

    #[test]
    fn custom_schedule_tracks_linear() {
        let lin = Schedule::linear(0.5).unwrap();
        let custom = Schedule::custom("lin", |t| (1.0 - t, t, 0.25 * (t * (1.0 - t)).sqrt()));
        assert!(!custom.has_analytic_derivatives());
        let a = lin.bridge_coefficients(0.3).unwrap();
        let b = custom.bridge_coefficients(0.3).unwrap();
        assert_abs_diff_eq!(a.f, b.f, epsilon = 1e-6);
        assert_abs_diff_eq!(a.s, b.s, epsilon = 1e-6);
        assert_abs_diff_eq!(a.g_sq, b.g_sq, epsilon = 1e-6);
    }

    #[test]
    fn schedule_config_round_trip() {
        let json = r#"{"kind":"linear","gamma_max":0.125}"#;
        let s: Schedule = serde_json::from_str(json).unwrap();
        assert!(matches!(s, Schedule::Linear { gamma_multiplier, .. } if gamma_multiplier == 1.0));
        let json = r#"{"kind":"i2sb","betas":[0.1,0.2,0.1]}"#;
        let s: Schedule = serde_json::from_str(json).unwrap();
        let back = serde_json::to_string(&s).unwrap();
        let again: Schedule = serde_json::from_str(&back).unwrap();
        assert_eq!(s.eval(0.4).unwrap(), again.eval(0.4).unwrap());
        assert!(serde_json::from_str::<Schedule>(r#"{"kind":"ddbm-vp","beta_d":2}"#).is_err());
    }
}
