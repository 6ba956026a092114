use serde::{Deserialize, Serialize};

use super::{ScheduleEval, HORIZON};
use crate::error::{Error, Result};

/// I2SB schedule: `sigma_t^2` is the exact integral of a piecewise-constant
/// beta profile on `K` equal sub-intervals of `[0, 1]`, and
///
/// ```text
/// alpha = 1 - sigma_t^2 / sigma_1^2
/// beta  = sigma_t^2 / sigma_1^2
/// gamma = sqrt(sigma_t^2 (1 - sigma_t^2 / sigma_1^2))
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "I2sbRaw", into = "I2sbRaw")]
pub struct I2sbSchedule {
    betas: Vec<f64>,
    /// `cumulative[i]` is `sigma^2` at the left edge of interval `i`;
    /// the last entry is `sigma_1^2`.
    cumulative: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct I2sbRaw {
    betas: Vec<f64>,
}

impl TryFrom<I2sbRaw> for I2sbSchedule {
    type Error = Error;

    fn try_from(raw: I2sbRaw) -> Result<Self> {
        I2sbSchedule::new(raw.betas)
    }
}

impl From<I2sbSchedule> for I2sbRaw {
    fn from(s: I2sbSchedule) -> Self {
        I2sbRaw { betas: s.betas }
    }
}

impl I2sbSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("i2sb beta profile must be non-empty"));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::invalid(format!(
                "i2sb betas must be positive, got {b}"
            )));
        }
        let width = HORIZON / betas.len() as f64;
        let mut cumulative = Vec::with_capacity(betas.len() + 1);
        let mut acc = 0.0;
        cumulative.push(acc);
        for b in &betas {
            acc += b * width;
            cumulative.push(acc);
        }
        Ok(Self { betas, cumulative })
    }

    /// Symmetric profile in the style of I2SB: `sqrt(beta)` rises linearly
    /// from `sqrt(beta_min)` to `sqrt(beta_max)` over the first half and is
    /// mirrored over the second half.
    pub fn symmetric(n: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("i2sb profile needs at least 2 intervals"));
        }
        if !(beta_min > 0.0 && beta_max >= beta_min) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}"
            )));
        }
        let half = n.div_ceil(2);
        let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
        let rise: Vec<f64> = (0..half)
            .map(|i| {
                let w = if half == 1 {
                    0.0
                } else {
                    i as f64 / (half - 1) as f64
                };
                (lo + w * (hi - lo)).powi(2)
            })
            .collect();
        let betas = (0..n).map(|i| rise[i.min(n - 1 - i)]).collect::<Vec<_>>();
        Self::new(betas)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub(super) fn validate(&self) -> Result<()> {
        if self.betas.iter().all(|b| b.is_finite() && *b > 0.0) && !self.betas.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid("i2sb betas must be positive"))
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        let k = self.betas.len();
        (1..k).map(|i| i as f64 / k as f64).collect()
    }

    pub fn sigma1_sq(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    /// `sigma_t^2 = int_0^t beta`, together with the active beta (its derivative).
    pub fn sigma_sq(&self, t: f64) -> (f64, f64) {
        let k = self.betas.len();
        let width = HORIZON / k as f64;
        if t >= HORIZON {
            return (self.sigma1_sq(), self.betas[k - 1]);
        }
        let i = ((t / width).floor() as usize).min(k - 1);
        let beta = self.betas[i];
        (self.cumulative[i] + beta * (t - i as f64 * width), beta)
    }

    pub(super) fn eval(&self, t: f64) -> ScheduleEval {
        let s1 = self.sigma1_sq();
        let (sig_sq, rate) = self.sigma_sq(t);
        let ratio = sig_sq / s1;
        let d_ratio = rate / s1;
        let gamma_sq = (sig_sq * (1.0 - ratio)).max(0.0);
        let d_gamma_sq = rate * (1.0 - ratio) - sig_sq * d_ratio;
        let gamma = gamma_sq.sqrt();
        ScheduleEval {
            alpha: 1.0 - ratio,
            beta: ratio,
            gamma,
            d_alpha: -d_ratio,
            d_beta: d_ratio,
            d_gamma: d_gamma_sq / (2.0 * gamma),
            gamma_dgamma: 0.5 * d_gamma_sq,
        }
    }
}
