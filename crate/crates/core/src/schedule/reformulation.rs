//! Cross-checks between the bridge framework and the native drift/diffusion
//! expressions of existing model families.
//!
//! Each check evaluates our `(f, s, g^2)` (or sampler step) on the family's
//! `(alpha, beta, gamma)` and compares it with the family's own formula,
//! written out independently below.

use serde::{Deserialize, Serialize};

use super::{I2sbSchedule, Schedule, TimeGrid, HORIZON};
use crate::error::Result;
use crate::sampler::step_markovian;

/// Probe states `(x, x_T)`, shared by every family.
const PROBES: [(f64, f64); 6] = [
    (-1.5, -1.0),
    (0.0, 0.5),
    (0.7, 1.3),
    (2.0, -0.4),
    (0.3, 0.3),
    (-0.8, 2.5),
];

/// Probe denoiser outputs, used where a check needs `x0_hat`.
const X0_PROBES: [f64; 3] = [-1.0, 0.25, 1.75];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReformulationFamily {
    Ve {
        #[serde(default = "one")]
        sigma_max: f64,
    },
    Vp {
        beta_d: f64,
        beta_min: f64,
    },
    Edm,
    I2sb {
        betas: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl ReformulationFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ReformulationFamily::Ve { .. } => "ve",
            ReformulationFamily::Vp { .. } => "vp",
            ReformulationFamily::Edm => "edm",
            ReformulationFamily::I2sb { .. } => "i2sb",
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self {
            ReformulationFamily::Ve { sigma_max } => Schedule::ddbm_ve(*sigma_max),
            ReformulationFamily::Vp { beta_d, beta_min } => Schedule::ddbm_vp(*beta_d, *beta_min),
            ReformulationFamily::Edm => Ok(Schedule::Edm),
            ReformulationFamily::I2sb { betas } => {
                Ok(Schedule::I2sb(I2sbSchedule::new(betas.clone())?))
            }
        }
    }
}

/// Maximum absolute deviation between the framework form and the family's
/// native form over every grid time and probe state.
pub fn verify_reformulation(family: &ReformulationFamily, grid: &TimeGrid) -> Result<f64> {
    let sched = family.schedule()?;
    let mut worst = 0.0f64;
    match family {
        ReformulationFamily::Ve { sigma_max } => {
            let sigma_t_sq = sigma_max * sigma_max;
            for &t in grid.points() {
                let c = sched.bridge_coefficients(t)?;
                let (sigma, d_sigma) = (sigma_max * t, *sigma_max);
                let g_sq = 2.0 * sigma * d_sigma;
                worst = worst.max((c.g_sq - g_sq).abs());
                for &(x, x_t) in &PROBES {
                    let native = g_sq * (x_t - x) / (sigma_t_sq - sigma * sigma);
                    worst = worst.max((c.f * x + c.s * x_t - native).abs());
                }
            }
        }
        ReformulationFamily::Vp { beta_d, beta_min } => {
            let native = |t: f64| {
                let e = (0.5 * beta_d * t * t + beta_min * t).exp();
                let k = beta_d * t + beta_min;
                let a = e.powf(-0.5);
                let d_a = -0.5 * k * a;
                let sigma = (e - 1.0).sqrt();
                let d_sigma = 0.5 * e * k / sigma;
                (a, d_a, sigma, d_sigma)
            };
            let (a1, _, sigma1, _) = native(HORIZON);
            for &t in grid.points() {
                let c = sched.bridge_coefficients(t)?;
                let (a, d_a, sigma, d_sigma) = native(t);
                let g_sq = 2.0 * sigma * d_sigma - 2.0 * (d_a / a) * sigma * sigma;
                worst = worst.max((c.g_sq - g_sq).abs());
                let denom = sigma1 * sigma1 * a * a - sigma * sigma * a1 * a1;
                for &(x, x_t) in &PROBES {
                    let h = (a1 * a * x_t - a1 * a1 * x) / denom;
                    let drift = (d_a / a) * x + g_sq * h;
                    worst = worst.max((c.f * x + c.s * x_t - drift).abs());
                }
            }
        }
        ReformulationFamily::Edm => {
            for &t in grid.points() {
                let c = sched.bridge_coefficients(t)?;
                let e = sched.eval(t)?;
                for &(x, x_t) in &PROBES {
                    for &x0 in &X0_PROBES {
                        // EDM's own ODE: dx = -sigma sigma' score dt with sigma = t.
                        let score = (x0 - x) / (t * t);
                        let native = -t * score;
                        let ours = c.f * x + c.s * x_t - 0.5 * c.g_sq * score;
                        let ours_x0 =
                            crate::dynamics::reverse_drift(&sched, 0.0, &[x], &[x_t], t, &[x0])?[0];
                        worst = worst
                            .max((ours - native).abs())
                            .max((ours_x0 - native).abs())
                            .max((e.gamma * e.d_gamma - t).abs());
                    }
                }
            }
        }
        ReformulationFamily::I2sb { .. } => {
            let Schedule::I2sb(profile) = &sched else {
                unreachable!("i2sb family builds an i2sb schedule")
            };
            for w in grid.points().windows(2) {
                let (t, t_prev) = (w[0], w[1]);
                // I2SB notation: sigma_n^2 accumulates up to t_n, a_n^2 over [t_n, t_{n+1}].
                let sigma_n_sq = profile.sigma_sq(t_prev).0;
                let a_n_sq = profile.sigma_sq(t).0 - sigma_n_sq;
                let total = a_n_sq + sigma_n_sq;
                for &(x, _) in &PROBES {
                    for &x0 in &X0_PROBES {
                        for &z in &[-1.2, 0.0, 0.9] {
                            let ours = step_markovian(&sched, &[x0], &[x], t, t - t_prev, &[z])?[0];
                            let native = a_n_sq / total * x0
                                + sigma_n_sq / total * x
                                + (sigma_n_sq * a_n_sq / total).sqrt() * z;
                            worst = worst.max((ours - native).abs());
                        }
                    }
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, lo: f64, hi: f64) -> TimeGrid {
        TimeGrid::uniform(n, lo, hi).unwrap()
    }

    #[test]
    fn ve_matches_native_drift() {
        let dev = verify_reformulation(
            &ReformulationFamily::Ve { sigma_max: 1.0 },
            &grid(40, 0.1, 0.9),
        )
        .unwrap();
        assert!(dev <= 1e-10, "{dev}");
    }

    #[test]
    fn edm_matches_native_ode() {
        let dev = verify_reformulation(&ReformulationFamily::Edm, &grid(40, 0.05, 0.95)).unwrap();
        assert!(dev <= 1e-12, "{dev}");
    }

    #[test]
    fn vp_matches_native_drift() {
        let fam = ReformulationFamily::Vp {
            beta_d: 2.0,
            beta_min: 0.1,
        };
        let dev = verify_reformulation(&fam, &grid(40, 0.05, 0.95)).unwrap();
        assert!(dev <= 1e-8, "{dev}");
    }

    #[test]
    fn all_families_on_fifty_point_grid() {
        let g = TimeGrid::rho_spaced(49, 0.01, 0.99, 0.6).unwrap();
        assert_eq!(g.points().len(), 50);
        let betas = I2sbSchedule::symmetric(10, 0.1, 1.0)
            .unwrap()
            .betas()
            .to_vec();
        for fam in [
            ReformulationFamily::Ve { sigma_max: 1.0 },
            ReformulationFamily::Vp {
                beta_d: 2.0,
                beta_min: 0.1,
            },
            ReformulationFamily::Edm,
            ReformulationFamily::I2sb { betas },
        ] {
            let dev = verify_reformulation(&fam, &g).unwrap();
            assert!(dev <= 1e-8, "{}: {dev}", fam.name());
        }
    }

    #[test]
    fn rejects_bad_family_parameters() {
        let g = grid(4, 0.1, 0.9);
        assert!(verify_reformulation(
            &ReformulationFamily::Vp {
                beta_d: 0.0,
                beta_min: 0.1
            },
            &g
        )
        .is_err());
        assert!(verify_reformulation(&ReformulationFamily::I2sb { betas: vec![] }, &g).is_err());
    }
}
