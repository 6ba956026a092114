//! Pinned-process and reverse-SDE simulation.
//!
//! Forward: `dX = (f X + s x_cond) dt + g dW` (marginals equal the bridge
//! kernel). Reverse, for any `eps >= 0`:
//!
//! ```text
//! dX = [alpha' x0_hat + beta' x_cond - (gamma gamma' + eps) score] dt + sqrt(2 eps) dW
//! ```
//!
//! integrated backwards in time with Euler-Maruyama.

mod ensemble;

pub use ensemble::{
    estimate_marginal_moments, simulate_ensemble, Direction, EnsembleConfig, MomentEstimate,
    PathEnsemble, Record, Start,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::{Schedule, HORIZON, SINGULAR_TOL};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct State {
    pub x: Vec<f64>,
    pub t: f64,
}

impl State {
    pub fn new(x: Vec<f64>, t: f64) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("state components must be finite"));
        }
        Ok(Self { x, t })
    }
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// `alpha x0 + beta x_cond + gamma z` for a given standard normal draw `z`.
pub fn kernel_with_noise(
    sched: &Schedule,
    x0: &[f64],
    x_cond: &[f64],
    t: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    same_dim(x0, x_cond)?;
    same_dim(x0, z)?;
    let e = sched.eval(t)?;
    Ok(x0
        .iter()
        .zip(x_cond)
        .zip(z)
        .map(|((a, b), z)| e.alpha * a + e.beta * b + e.gamma * z)
        .collect())
}

/// Draws `x_t ~ N(alpha x0 + beta x_cond, gamma^2 I)`.
pub fn sample_kernel(
    sched: &Schedule,
    x0: &[f64],
    x_cond: &[f64],
    t: f64,
    rng: &mut NoiseStream,
) -> Result<Vec<f64>> {
    let z = rng.normal_vec(x0.len());
    kernel_with_noise(sched, x0, x_cond, t, &z)
}

/// One Euler-Maruyama step of the pinned process with an explicit draw `z`.
pub fn forward_step_em_with_noise(
    sched: &Schedule,
    state: &State,
    x_cond: &[f64],
    dt: f64,
    z: &[f64],
) -> Result<State> {
    same_dim(&state.x, x_cond)?;
    same_dim(&state.x, z)?;
    if !(dt >= 0.0) {
        return Err(Error::invalid(format!("dt must be non-negative, got {dt}")));
    }
    if state.t + dt > HORIZON {
        return Err(Error::OutOfRange {
            t: state.t + dt,
            lo: 0.0,
            hi: HORIZON,
        });
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let c = sched.bridge_coefficients(state.t)?;
    let noise = (c.g_sq * dt).sqrt();
    let x = state
        .x
        .iter()
        .zip(x_cond)
        .zip(z)
        .map(|((x, xc), z)| x + (c.f * x + c.s * xc) * dt + noise * z)
        .collect();
    Ok(State { x, t: state.t + dt })
}

pub fn forward_step_em(
    sched: &Schedule,
    state: &State,
    x_cond: &[f64],
    dt: f64,
    rng: &mut NoiseStream,
) -> Result<State> {
    let z = rng.normal_vec(state.x.len());
    forward_step_em_with_noise(sched, state, x_cond, dt, &z)
}

/// Reverse-time drift in denoiser form,
/// `alpha' x0_hat + beta' x_cond - (gamma gamma' + eps) score` with
/// `score = (alpha x0_hat + beta x_cond - x) / gamma^2`.
pub fn reverse_drift(
    sched: &Schedule,
    eps: f64,
    x: &[f64],
    x_cond: &[f64],
    t: f64,
    x_hat0: &[f64],
) -> Result<Vec<f64>> {
    same_dim(x, x_cond)?;
    same_dim(x, x_hat0)?;
    if !(eps >= 0.0) {
        return Err(Error::NegativeEpsilon { t, value: eps });
    }
    let e = sched.eval(t)?;
    if e.gamma < SINGULAR_TOL {
        return Err(Error::GammaSingularity { t });
    }
    let g_sq = e.gamma * e.gamma;
    let k = e.gamma_dgamma + eps;
    Ok(x.iter()
        .zip(x_cond)
        .zip(x_hat0)
        .map(|((x, xc), x0)| {
            let score = (e.alpha * x0 + e.beta * xc - x) / g_sq;
            e.d_alpha * x0 + e.d_beta * xc - k * score
        })
        .collect())
}

/// Reverse-time drift from a raw score, `f x + s x_cond - (g^2 / 2 + eps) score`.
pub fn reverse_drift_from_score(
    sched: &Schedule,
    eps: f64,
    x: &[f64],
    x_cond: &[f64],
    t: f64,
    score: &[f64],
) -> Result<Vec<f64>> {
    same_dim(x, x_cond)?;
    same_dim(x, score)?;
    if !(eps >= 0.0) {
        return Err(Error::NegativeEpsilon { t, value: eps });
    }
    let c = sched.bridge_coefficients(t)?;
    let k = 0.5 * c.g_sq + eps;
    Ok(x.iter()
        .zip(x_cond)
        .zip(score)
        .map(|((x, xc), s)| c.f * x + c.s * xc - k * s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{score_from_denoiser, JointGaussian};
    use crate::metrics::convergence_slope;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kernel_examples() {
        let s = Schedule::linear(0.125).unwrap();
        let x = kernel_with_noise(&s, &[0.0], &[2.0], 0.5, &[0.5]).unwrap();
        assert_abs_diff_eq!(x[0], 1.015625, epsilon = 1e-15);
        let mut rng = NoiseStream::new(1, 0);
        assert_eq!(
            sample_kernel(&s, &[0.3, 0.1], &[2.0, 1.0], 0.0, &mut rng).unwrap(),
            vec![0.3, 0.1]
        );
        assert_eq!(
            sample_kernel(&s, &[0.3, 0.1], &[2.0, 1.0], 1.0, &mut rng).unwrap(),
            vec![2.0, 1.0]
        );
    }

    #[test]
    fn forward_step_examples() {
        let s = Schedule::linear(0.125).unwrap();
        let st = State::new(vec![0.5], 0.5).unwrap();
        let next = forward_step_em_with_noise(&s, &st, &[1.0], 0.01, &[0.0]).unwrap();
        assert_abs_diff_eq!(next.x[0], 0.51, epsilon = 1e-15);
        assert_abs_diff_eq!(next.t, 0.51, epsilon = 1e-15);

        let mut rng = NoiseStream::new(0, 0);
        assert_eq!(forward_step_em(&s, &st, &[1.0], 0.0, &mut rng).unwrap(), st);
        assert!(forward_step_em(&s, &st, &[1.0], -0.1, &mut rng).is_err());

        // Zero-noise schedule: the step is deterministic whatever the draw.
        let flat = Schedule::custom("no-noise", |t| (1.0 - t, t, 0.0));
        let a = forward_step_em_with_noise(&flat, &st, &[1.0], 0.01, &[3.0]).unwrap();
        let b = forward_step_em_with_noise(&flat, &st, &[1.0], 0.01, &[-1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_drift_example() {
        let s = Schedule::linear(0.125).unwrap();
        let d = reverse_drift(&s, 0.0, &[1.4], &[2.0], 0.5, &[1.0]).unwrap();
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-12);
        assert!(matches!(
            reverse_drift(&s, 0.0, &[1.4], &[2.0], 1.0, &[1.0]),
            Err(Error::GammaSingularity { .. })
        ));
    }

    #[test]
    fn drift_forms_agree_across_epsilon() {
        // Denoiser form vs raw-score form, at eps = 0 (ODE), eps = g^2/2
        // (reverse SDE) and an arbitrary value.
        let s = Schedule::ddbm_vp(2.0, 0.1).unwrap();
        let mut rng = NoiseStream::new(4, 0);
        for _ in 0..200 {
            let t = rng.uniform(0.05, 0.95);
            let (x, xc, x0) = (rng.normal_vec(2), rng.normal_vec(2), rng.normal_vec(2));
            let score = score_from_denoiser(&s, &x0, &x, &xc, t).unwrap();
            let half_g_sq = 0.5 * s.bridge_coefficients(t).unwrap().g_sq;
            for eps in [0.0, half_g_sq, 0.37] {
                let a = reverse_drift(&s, eps, &x, &xc, t, &x0).unwrap();
                let b = reverse_drift_from_score(&s, eps, &x, &xc, t, &score).unwrap();
                for i in 0..2 {
                    assert!(
                        (a[i] - b[i]).abs() <= 1e-9 * (1.0 + a[i].abs()),
                        "{} vs {}",
                        a[i],
                        b[i]
                    );
                }
            }
            // eps = g^2/2 gives the classic reverse SDE drift f x + s x_cond - g^2 score.
            let c = s.bridge_coefficients(t).unwrap();
            let sde = reverse_drift_from_score(&s, half_g_sq, &x, &xc, t, &score).unwrap();
            for i in 0..2 {
                let classic = c.f * x[i] + c.s * xc[i] - c.g_sq * score[i];
                assert!((sde[i] - classic).abs() <= 1e-12 * (1.0 + classic.abs()));
            }
        }
    }

    #[test]
    fn weak_order_of_forward_em() {
        // The drift is linear, so the EM ensemble mean follows the zero-noise
        // recursion exactly; measure its terminal error against the kernel mean.
        let s = Schedule::trig(0.5).unwrap();
        let (x0, xc, t_end) = (0.3, 1.0, 0.5);
        let exact = {
            let e = s.eval(t_end).unwrap();
            e.alpha * x0 + e.beta * xc
        };
        let dts = [1e-1, 1e-2, 1e-3];
        let errors: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let n = (t_end / dt).round() as usize;
                let mut st = State::new(vec![x0], 0.0).unwrap();
                for i in 0..n {
                    st = forward_step_em_with_noise(&s, &st, &[xc], dt, &[0.0]).unwrap();
                    st.t = (i + 1) as f64 * dt;
                }
                (st.x[0] - exact).abs()
            })
            .collect();
        let slope = convergence_slope(&dts, &errors).unwrap();
        assert!(slope >= 0.9, "slope {slope}, errors {errors:?}");
    }

    #[test]
    fn gaussian_marginal_helper_matches_kernel_mixture() {
        // Var(x_t | x_cond) = alpha^2 P + gamma^2 for the 1-D noisy copy.
        let dist = JointGaussian::noisy_copy(1, 1.0, 1.0).unwrap();
        let s = Schedule::linear(1.0).unwrap();
        let (mean, cov) = dist.marginal(&s, &[2.0], 0.25).unwrap();
        assert_abs_diff_eq!(mean[0], 0.75 * 1.0 + 0.25 * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[(0, 0)], 0.5625 * 0.5 + 0.25 * 0.1875, epsilon = 1e-15);
    }
}
