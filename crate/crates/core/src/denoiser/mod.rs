//! Denoisers `x0_hat(x_t, x_cond, t)` and the quantities derived from them.
//!
//! The score of the bridge marginal is recovered from a denoiser through
//!
//! ```text
//! score = (alpha x0_hat + beta x_cond - x_t) / gamma^2
//! z_hat = (x_t - alpha x0_hat - beta x_cond) / gamma = -gamma score
//! ```

mod distribution;
mod gaussian;
mod gmm;
mod mlp;
mod precond;

pub use distribution::{estimate_statistics, MapKind, MapPlusNoise, PairedDistribution};
pub use gaussian::JointGaussian;
pub use gmm::Gmm;
pub use mlp::{train_mlp_denoiser, Mlp, MlpDenoiser, TrainConfig, TrainOutcome};
pub use precond::{effective_loss, Preconditioner, Scalings};

use crate::error::{Error, Result};
use crate::schedule::{Schedule, SINGULAR_TOL};

/// Anything that predicts `x0` from a bridge state.
///
/// Implementations are shared read-only across sampler threads.
pub trait Denoise: Sync {
    fn dim(&self) -> usize;
    fn denoise(&self, x_t: &[f64], x_cond: &[f64], t: f64) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub enum Denoiser {
    AnalyticGaussian {
        dist: JointGaussian,
        schedule: Schedule,
    },
    AnalyticGmm {
        dist: Gmm,
        schedule: Schedule,
    },
    Mlp(MlpDenoiser),
}

impl Denoise for Denoiser {
    fn dim(&self) -> usize {
        match self {
            Denoiser::AnalyticGaussian { dist, .. } => dist.dim(),
            Denoiser::AnalyticGmm { dist, .. } => dist.dim(),
            Denoiser::Mlp(m) => m.dim(),
        }
    }

    fn denoise(&self, x_t: &[f64], x_cond: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            Denoiser::AnalyticGaussian { dist, schedule } => {
                analytic_denoise(dist, schedule, x_t, x_cond, t)
            }
            Denoiser::AnalyticGmm { dist, schedule } => {
                dist.posterior_mean(schedule, x_t, x_cond, t)
            }
            Denoiser::Mlp(m) => m.denoise(x_t, x_cond, t),
        }
    }
}

impl Denoiser {
    /// The exact posterior-mean denoiser, when the distribution admits one.
    pub fn analytic(dist: &PairedDistribution, schedule: &Schedule) -> Result<Self> {
        match dist {
            PairedDistribution::JointGaussian(g) => Ok(Denoiser::AnalyticGaussian {
                dist: g.clone(),
                schedule: schedule.clone(),
            }),
            PairedDistribution::GmmCoupling(g) => Ok(Denoiser::AnalyticGmm {
                dist: g.clone(),
                schedule: schedule.clone(),
            }),
            PairedDistribution::MapPlusNoise(_) => Err(Error::invalid(
                "map-plus-noise has no closed-form denoiser; use a trained one",
            )),
        }
    }
}

/// Mean squared difference between two denoisers on `n` bridge states drawn
/// with `(x0, x_cond) ~ dist`, `t ~ U[t_min, t_max]`, `x_t` from the kernel.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_mse(
    a: &dyn Denoise,
    b: &dyn Denoise,
    dist: &PairedDistribution,
    sched: &Schedule,
    n: usize,
    t_min: f64,
    t_max: f64,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut rng = crate::rng::NoiseStream::new(seed, 0);
    let mut sum = 0.0;
    for _ in 0..n {
        let (x0, xc) = dist.sample(&mut rng);
        let t = rng.uniform(t_min, t_max);
        let e = sched.eval(t)?;
        let x_t: Vec<f64> = x0
            .iter()
            .zip(&xc)
            .map(|(u, v)| e.alpha * u + e.beta * v + e.gamma * rng.normal())
            .collect();
        let (pa, pb) = (a.denoise(&x_t, &xc, t)?, b.denoise(&x_t, &xc, t)?);
        sum += pa
            .iter()
            .zip(&pb)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            / x0.len() as f64;
    }
    Ok(sum / n as f64)
}

/// `E[x0 | x_t, x_cond]` for a jointly Gaussian pair.
pub fn analytic_denoise(
    dist: &JointGaussian,
    sched: &Schedule,
    x_t: &[f64],
    x_cond: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    dist.posterior_mean(sched, x_t, x_cond, t)
}

fn check_dims(d: usize, parts: &[&[f64]]) -> Result<()> {
    for p in parts {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
    }
    Ok(())
}

fn gamma_at(sched: &Schedule, t: f64) -> Result<(f64, f64, f64)> {
    let e = sched.eval(t)?;
    if e.gamma < SINGULAR_TOL {
        return Err(Error::GammaSingularity { t });
    }
    Ok((e.alpha, e.beta, e.gamma))
}

/// Score of `p_t(x | x_cond)` implied by a denoiser output.
pub fn score_from_denoiser(
    sched: &Schedule,
    x_hat0: &[f64],
    x_t: &[f64],
    x_cond: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(x_t.len(), &[x_hat0, x_cond])?;
    let (a, b, g) = gamma_at(sched, t)?;
    let g_sq = g * g;
    Ok(x_hat0
        .iter()
        .zip(x_cond)
        .zip(x_t)
        .map(|((x0, xc), x)| (a * x0 + b * xc - x) / g_sq)
        .collect())
}

/// Standardised residual; equals `-gamma * score`.
pub fn zhat(
    sched: &Schedule,
    x_hat0: &[f64],
    x_t: &[f64],
    x_cond: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(x_t.len(), &[x_hat0, x_cond])?;
    let (a, b, g) = gamma_at(sched, t)?;
    Ok(x_hat0
        .iter()
        .zip(x_cond)
        .zip(x_t)
        .map(|((x0, xc), x)| (x - a * x0 - b * xc) / g)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;
    use approx::assert_abs_diff_eq;

    fn custom_half() -> Schedule {
        // alpha = beta = 0.5, gamma = 0.1 at every t.
        Schedule::custom("flat", |_| (0.5, 0.5, 0.1))
    }

    #[test]
    fn score_example() {
        let s = score_from_denoiser(&custom_half(), &[1.0], &[1.4], &[2.0], 0.5).unwrap();
        assert_abs_diff_eq!(s[0], 10.0, epsilon = 1e-12);
        let z = zhat(&custom_half(), &[1.0], &[1.4], &[2.0], 0.5).unwrap();
        assert_abs_diff_eq!(z[0], -1.0, epsilon = 1e-13);
    }

    #[test]
    fn score_and_zhat_vanish_at_kernel_mean() {
        let sched = Schedule::linear(0.125).unwrap();
        let e = sched.eval(0.3).unwrap();
        let (x0, xc) = ([0.4, -1.0], [1.0, 2.0]);
        let mean: Vec<f64> = (0..2).map(|i| e.alpha * x0[i] + e.beta * xc[i]).collect();
        let s = score_from_denoiser(&sched, &x0, &mean, &xc, 0.3).unwrap();
        let z = zhat(&sched, &x0, &mean, &xc, 0.3).unwrap();
        assert!(s.iter().chain(&z).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zhat_reconstructs_state() {
        let sched = Schedule::trig(0.7).unwrap();
        let mut rng = NoiseStream::new(3, 0);
        for _ in 0..100 {
            let t = rng.uniform(0.05, 0.95);
            let (x0, xc, x) = (rng.normal_vec(3), rng.normal_vec(3), rng.normal_vec(3));
            let e = sched.eval(t).unwrap();
            let z = zhat(&sched, &x0, &x, &xc, t).unwrap();
            let s = score_from_denoiser(&sched, &x0, &x, &xc, t).unwrap();
            for i in 0..3 {
                let back = e.alpha * x0[i] + e.beta * xc[i] + e.gamma * z[i];
                assert_abs_diff_eq!(back, x[i], epsilon = 1e-14);
                assert_abs_diff_eq!(z[i], -e.gamma * s[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gamma_singularity_and_dimension_errors() {
        let sched = Schedule::linear(0.125).unwrap();
        assert!(matches!(
            zhat(&sched, &[0.0], &[0.0], &[0.0], 0.0),
            Err(Error::GammaSingularity { .. })
        ));
        assert!(matches!(
            score_from_denoiser(&sched, &[0.0, 1.0], &[0.0], &[0.0], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn analytic_dispatch_is_exact() {
        let dist = JointGaussian::noisy_copy(2, 1.0, 1.0).unwrap();
        let sched = Schedule::linear(0.5).unwrap();
        let den = Denoiser::AnalyticGaussian {
            dist: dist.clone(),
            schedule: sched.clone(),
        };
        let (x, xc) = ([0.3, -0.2], [1.0, 0.5]);
        assert_eq!(
            den.denoise(&x, &xc, 0.4).unwrap(),
            analytic_denoise(&dist, &sched, &x, &xc, 0.4).unwrap()
        );
        assert_eq!(den.dim(), 2);
    }

    #[test]
    fn analytic_constructor_and_self_mse() {
        let sched = Schedule::linear(0.5).unwrap();
        let dist =
            PairedDistribution::JointGaussian(JointGaussian::noisy_copy(2, 1.0, 1.0).unwrap());
        let den = Denoiser::analytic(&dist, &sched).unwrap();
        assert!(matches!(den, Denoiser::AnalyticGaussian { .. }));
        assert_eq!(
            denoiser_mse(&den, &den, &dist, &sched, 50, 0.1, 0.9, 1).unwrap(),
            0.0
        );
        let map: PairedDistribution = serde_json::from_str(
            r#"{"kind":"map-plus-noise","cond_mean":[0.0],"cond_std":1.0,"map":"sine","freq":1.0,"noise":0.1}"#,
        )
        .unwrap();
        assert!(Denoiser::analytic(&map, &sched).is_err());
    }
}
