use serde::{Deserialize, Serialize};

use super::{Schedule, SINGULAR_TOL};
use crate::error::{Error, Result};

/// How much stochasticity the sampling SDE injects at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EpsilonKind {
    Zero,
    /// `eps = eta (gamma gamma' - (alpha'/alpha) gamma^2) = eta g^2 / 2`.
    EtaScaled {
        eta: f64,
    },
    /// The choice that collapses the DBIM-style step onto the Markovian
    /// bridge step.
    I2sbMarkovian,
    /// A fixed value. On the EDM schedule it is multiplied by `sigma_t^2`.
    Constant {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPolicy {
    #[serde(flatten)]
    pub kind: EpsilonKind,
    /// The last `tail_zero_steps` sampler steps always use `eps = 0`.
    #[serde(default = "default_tail")]
    pub tail_zero_steps: usize,
}

fn default_tail() -> usize {
    2
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        Self::eta(0.3, 2)
    }
}

impl EpsilonPolicy {
    pub fn zero() -> Self {
        Self {
            kind: EpsilonKind::Zero,
            tail_zero_steps: 0,
        }
    }

    pub fn eta(eta: f64, tail_zero_steps: usize) -> Self {
        Self {
            kind: EpsilonKind::EtaScaled { eta },
            tail_zero_steps,
        }
    }

    pub fn i2sb(tail_zero_steps: usize) -> Self {
        Self {
            kind: EpsilonKind::I2sbMarkovian,
            tail_zero_steps,
        }
    }

    pub fn constant(value: f64, tail_zero_steps: usize) -> Self {
        Self {
            kind: EpsilonKind::Constant { value },
            tail_zero_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EpsilonKind::EtaScaled { eta } if !(0.0..=1.0).contains(&eta) => {
                Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")))
            }
            EpsilonKind::Constant { value } if !(value.is_finite() && value >= 0.0) => Err(
                Error::invalid(format!("constant epsilon must be >= 0, got {value}")),
            ),
            _ => Ok(()),
        }
    }

    /// Epsilon for the step that moves from `t` to `t - dt`.
    ///
    /// `step_index` counts down from `total_steps - 1` to 0, so the final
    /// `tail_zero_steps` steps are those with `step_index < tail_zero_steps`.
    pub fn epsilon(
        &self,
        sched: &Schedule,
        t: f64,
        dt: f64,
        step_index: usize,
        total_steps: usize,
    ) -> Result<f64> {
        self.validate()?;
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if step_index >= total_steps {
            return Err(Error::invalid(format!(
                "step index {step_index} out of range for {total_steps} steps"
            )));
        }
        if step_index < self.tail_zero_steps {
            return Ok(0.0);
        }
        let value = match self.kind {
            EpsilonKind::Zero => 0.0,
            EpsilonKind::EtaScaled { eta } => {
                let e = sched.eval(t)?;
                let rate = e.log_alpha_rate(t)?;
                eta * (e.gamma_dgamma - rate * e.gamma * e.gamma)
            }
            EpsilonKind::I2sbMarkovian => {
                let now = sched.eval(t)?;
                let prev = sched.eval(t - dt)?;
                let beta_sq = now.beta * now.beta;
                if beta_sq < SINGULAR_TOL {
                    return Err(Error::BetaSingularity { t });
                }
                let num = prev.gamma * prev.gamma * beta_sq
                    - prev.beta * prev.beta * now.gamma * now.gamma;
                num / (2.0 * beta_sq * dt)
            }
            EpsilonKind::Constant { value } => match sched {
                Schedule::Edm => value * t * t,
                _ => value,
            },
        };
        if value < 0.0 {
            if value < -SINGULAR_TOL {
                return Err(Error::NegativeEpsilon { t, value });
            }
            return Ok(0.0);
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eta_scaled_example() {
        let s = Schedule::linear(0.125).unwrap();
        let p = EpsilonPolicy::eta(0.3, 2);
        let eps = p.epsilon(&s, 0.5, 0.01, 5, 10).unwrap();
        assert_abs_diff_eq!(eps, 5.859375e-4, epsilon = 1e-15);
    }

    #[test]
    fn eta_one_is_half_g_sq() {
        let s = Schedule::ddbm_vp(2.0, 0.1).unwrap();
        let p = EpsilonPolicy::eta(1.0, 0);
        for &t in &[0.1, 0.5, 0.9] {
            let g_sq = s.bridge_coefficients(t).unwrap().g_sq;
            assert_abs_diff_eq!(
                p.epsilon(&s, t, 0.01, 3, 4).unwrap(),
                g_sq / 2.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn tail_steps_are_zero_for_every_kind() {
        let s = Schedule::linear(0.125).unwrap();
        for p in [
            EpsilonPolicy::eta(1.0, 2),
            EpsilonPolicy::i2sb(2),
            EpsilonPolicy::constant(3.0, 2),
            EpsilonPolicy::zero(),
        ] {
            assert_eq!(p.epsilon(&s, 0.5, 0.25, 1, 10).unwrap(), 0.0);
            assert_eq!(p.epsilon(&s, 0.5, 0.25, 0, 10).unwrap(), 0.0);
        }
    }

    #[test]
    fn i2sb_markovian_example() {
        let s = Schedule::linear(0.125).unwrap();
        let eps = EpsilonPolicy::i2sb(0).epsilon(&s, 0.5, 0.25, 3, 4).unwrap();
        assert_abs_diff_eq!(eps, 9.765625e-4, epsilon = 1e-15);
    }

    #[test]
    fn constant_is_scaled_on_edm() {
        let p = EpsilonPolicy::constant(0.5, 0);
        let lin = Schedule::linear(0.125).unwrap();
        assert_eq!(p.epsilon(&lin, 0.4, 0.1, 1, 2).unwrap(), 0.5);
        assert_abs_diff_eq!(
            p.epsilon(&Schedule::Edm, 0.4, 0.1, 1, 2).unwrap(),
            0.08,
            epsilon = 1e-15
        );
    }

    #[test]
    fn errors() {
        let s = Schedule::linear(0.125).unwrap();
        assert!(matches!(
            EpsilonPolicy::eta(0.3, 0).epsilon(&s, 1.0, 0.01, 3, 4),
            Err(Error::AlphaSingularity { .. })
        ));
        assert!(EpsilonPolicy::eta(1.5, 0)
            .epsilon(&s, 0.5, 0.01, 3, 4)
            .is_err());
        assert!(EpsilonPolicy::constant(-1.0, 0)
            .epsilon(&s, 0.5, 0.01, 3, 4)
            .is_err());
        assert!(EpsilonPolicy::zero().epsilon(&s, 0.5, 0.0, 0, 1).is_err());
        // Reversed schedule pairing: beta shrinking in t makes the I2SB formula negative.
        let rev = Schedule::custom("rev", |t| (t, 1.0 - t, 0.1 * (t * (1.0 - t)).sqrt()));
        assert!(matches!(
            EpsilonPolicy::i2sb(0).epsilon(&rev, 0.5, 0.25, 3, 4),
            Err(Error::NegativeEpsilon { .. })
        ));
    }

    #[test]
    fn policy_config_parses() {
        let p: EpsilonPolicy = serde_json::from_str(r#"{"kind":"eta-scaled","eta":0.3}"#).unwrap();
        assert_eq!(p, EpsilonPolicy::eta(0.3, 2));
    }
}
