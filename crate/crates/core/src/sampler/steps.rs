//! Single steps `x_t -> x_{t-dt}` of the four discretisations.
//!
//! With `' ` marking values at `t - dt`, `z_hat` the predicted noise and `z`
//! a fresh standard normal draw:
//!
//! ```text
//! euler-z           x - [alpha. x0 + beta. xc + (gamma. + eps/gamma) z_hat] dt + sqrt(2 eps dt) z
//! gamma-simplified  alpha' x0 + beta' xc + (gamma' - eps dt / gamma) z_hat + sqrt(2 eps dt) z
//! dbim-style        alpha' x0 + beta' xc + sqrt(gamma'^2 - 2 eps dt) z_hat + sqrt(2 eps dt) z
//! markovian         (alpha' - alpha beta'/beta) x0 + (beta'/beta) x + sqrt(gamma'^2 - beta'^2 gamma^2 / beta^2) z
//! ```

use serde::{Deserialize, Serialize};

use crate::denoiser::zhat;
use crate::error::{Error, Result};
use crate::schedule::{Schedule, ScheduleEval, SINGULAR_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    EulerZ,
    GammaSimplified,
    DbimStyle,
    Markovian,
}

/// Time, step size and stochasticity of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTimes {
    pub t: f64,
    pub dt: f64,
    pub eps: f64,
}

impl StepTimes {
    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::NegativeEpsilon {
                t: self.t,
                value: self.eps,
            });
        }
        Ok(())
    }

    fn evals(&self, sched: &Schedule) -> Result<(ScheduleEval, ScheduleEval)> {
        self.check()?;
        let now = sched.eval(self.t)?;
        if now.gamma < SINGULAR_TOL {
            return Err(Error::GammaSingularity { t: self.t });
        }
        Ok((now, sched.eval(self.t - self.dt)?))
    }
}

fn check_len(d: usize, parts: &[&[f64]]) -> Result<()> {
    match parts.iter().find(|p| p.len() != d) {
        Some(p) => Err(Error::DimensionMismatch {
            expected: d,
            got: p.len(),
        }),
        None => Ok(()),
    }
}

pub fn step_euler_z(
    sched: &Schedule,
    x_t: &[f64],
    x_cond: &[f64],
    x_hat0: &[f64],
    at: StepTimes,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_len(x_t.len(), &[x_cond, x_hat0, z])?;
    let (now, _) = at.evals(sched)?;
    let zh = zhat(sched, x_hat0, x_t, x_cond, at.t)?;
    let k = now.d_gamma + at.eps / now.gamma;
    let noise = (2.0 * at.eps * at.dt).sqrt();
    Ok((0..x_t.len())
        .map(|i| {
            let drift = now.d_alpha * x_hat0[i] + now.d_beta * x_cond[i] + k * zh[i];
            x_t[i] - drift * at.dt + noise * z[i]
        })
        .collect())
}

pub fn step_gamma_simplified(
    sched: &Schedule,
    x_hat0: &[f64],
    x_cond: &[f64],
    zhat_t: &[f64],
    at: StepTimes,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_len(x_hat0.len(), &[x_cond, zhat_t, z])?;
    let (now, prev) = at.evals(sched)?;
    let k = prev.gamma - at.eps * at.dt / now.gamma;
    let noise = (2.0 * at.eps * at.dt).sqrt();
    Ok((0..x_hat0.len())
        .map(|i| prev.alpha * x_hat0[i] + prev.beta * x_cond[i] + k * zhat_t[i] + noise * z[i])
        .collect())
}

pub fn step_dbim(
    sched: &Schedule,
    x_hat0: &[f64],
    x_cond: &[f64],
    zhat_t: &[f64],
    at: StepTimes,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_len(x_hat0.len(), &[x_cond, zhat_t, z])?;
    let (_, prev) = at.evals(sched)?;
    let two_eps_dt = 2.0 * at.eps * at.dt;
    let radicand = prev.gamma * prev.gamma - two_eps_dt;
    if radicand < -SINGULAR_TOL {
        return Err(Error::ConstraintViolation {
            t: at.t,
            value: radicand,
        });
    }
    let k = radicand.max(0.0).sqrt();
    let noise = two_eps_dt.sqrt();
    Ok((0..x_hat0.len())
        .map(|i| prev.alpha * x_hat0[i] + prev.beta * x_cond[i] + k * zhat_t[i] + noise * z[i])
        .collect())
}

/// Markovian bridge step. `x_cond` does not appear: its coefficient cancels.
pub fn step_markovian(
    sched: &Schedule,
    x_hat0: &[f64],
    x_t: &[f64],
    t: f64,
    dt: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_len(x_t.len(), &[x_hat0, z])?;
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let now = sched.eval(t)?;
    let prev = sched.eval(t - dt)?;
    if now.beta < SINGULAR_TOL {
        return Err(Error::BetaSingularity { t });
    }
    let ratio = prev.beta / now.beta;
    let radicand = prev.gamma * prev.gamma - ratio * ratio * now.gamma * now.gamma;
    if radicand < -SINGULAR_TOL {
        return Err(Error::NegativeRadicand {
            what: "markovian step variance",
            t,
            value: radicand,
        });
    }
    let (c0, noise) = (prev.alpha - now.alpha * ratio, radicand.max(0.0).sqrt());
    Ok((0..x_t.len())
        .map(|i| c0 * x_hat0[i] + ratio * x_t[i] + noise * z[i])
        .collect())
}

/// Deterministic re-interpolation `alpha' x0 + beta' xc + gamma' z_hat`,
/// used on zero-tail steps.
pub fn reinterpolate(
    sched: &Schedule,
    x_hat0: &[f64],
    x_cond: &[f64],
    zhat_t: &[f64],
    t_next: f64,
) -> Result<Vec<f64>> {
    check_len(x_hat0.len(), &[x_cond, zhat_t])?;
    let e = sched.eval(t_next)?;
    Ok((0..x_hat0.len())
        .map(|i| e.alpha * x_hat0[i] + e.beta * x_cond[i] + e.gamma * zhat_t[i])
        .collect())
}
