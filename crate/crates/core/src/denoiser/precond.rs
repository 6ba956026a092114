use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Data statistics that fix the input/output scalings of a network denoiser
/// `D = c_skip x_t + c_out F(c_in x_t, x_cond, c_noise)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preconditioner {
    pub sigma0: f64,
    pub sigma_cond: f64,
    pub sigma0c: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Self {
            sigma0: 0.5,
            sigma_cond: 0.5,
            sigma0c: 0.125,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scalings {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
    pub lambda: f64,
}

impl Preconditioner {
    pub fn new(sigma0: f64, sigma_cond: f64, sigma0c: f64) -> Result<Self> {
        let p = Self {
            sigma0,
            sigma_cond,
            sigma0c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma_cond > 0.0 && self.sigma0c.is_finite()) {
            return Err(Error::invalid(format!(
                "need sigma0, sigma_cond > 0, got {}, {}",
                self.sigma0, self.sigma_cond
            )));
        }
        Ok(())
    }

    /// `Var(x_t)` per coordinate under the data model:
    /// `alpha^2 sigma0^2 + beta^2 sigma_cond^2 + 2 alpha beta sigma0c + gamma^2`.
    pub fn input_variance(&self, sched: &Schedule, t: f64) -> Result<f64> {
        let e = sched.eval(t)?;
        Ok(e.alpha * e.alpha * self.sigma0 * self.sigma0
            + e.beta * e.beta * self.sigma_cond * self.sigma_cond
            + 2.0 * e.alpha * e.beta * self.sigma0c
            + e.gamma * e.gamma)
    }

    pub fn scalings(&self, sched: &Schedule, t: f64) -> Result<Scalings> {
        self.validate()?;
        if !(t > 0.0) {
            return Err(Error::OutOfRange {
                t,
                lo: 0.0,
                hi: crate::schedule::HORIZON,
            });
        }
        let e = sched.eval(t)?;
        let (s0, sc, s0c) = (self.sigma0, self.sigma_cond, self.sigma0c);
        let c_in = 1.0 / self.input_variance(sched, t)?.sqrt();
        let c_skip = (e.alpha * s0 * s0 + e.beta * s0c) * c_in * c_in;
        let radicand =
            e.beta * e.beta * (s0 * s0 * sc * sc - s0c * s0c) + e.gamma * e.gamma * s0 * s0;
        if radicand < -1e-12 {
            return Err(Error::NegativeRadicand {
                what: "c_out",
                t,
                value: radicand,
            });
        }
        let c_out = radicand.max(0.0).sqrt() * c_in;
        Ok(Scalings {
            c_in,
            c_skip,
            c_out,
            c_noise: 0.25 * t.ln(),
            lambda: 1.0 / (c_out * c_out),
        })
    }
}

impl Scalings {
    /// Regression target for the raw network: `(x0 - c_skip x_t) / c_out`.
    pub fn target(&self, x_t: &[f64], x0: &[f64]) -> Vec<f64> {
        x_t.iter()
            .zip(x0)
            .map(|(x, x0)| (x0 - self.c_skip * x) / self.c_out)
            .collect()
    }

    pub fn output(&self, x_t: &[f64], raw: &[f64]) -> Vec<f64> {
        x_t.iter()
            .zip(raw)
            .map(|(x, f)| self.c_skip * x + self.c_out * f)
            .collect()
    }
}

/// `lambda || c_skip x_t + c_out F - x0 ||^2`.
pub fn effective_loss(s: &Scalings, x_t: &[f64], raw: &[f64], x0: &[f64]) -> f64 {
    s.lambda
        * s.output(x_t, raw)
            .iter()
            .zip(x0)
            .map(|(d, x0)| (d - x0).powi(2))
            .sum::<f64>()
}
