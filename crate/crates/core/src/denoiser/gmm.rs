use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::JointGaussian;
use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::Schedule;

/// Mixture of jointly Gaussian couplings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GmmSpec", into = "GmmSpec")]
pub struct Gmm {
    weights: Vec<f64>,
    components: Vec<JointGaussian>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmSpec {
    weights: Vec<f64>,
    components: Vec<JointGaussian>,
}

impl TryFrom<GmmSpec> for Gmm {
    type Error = Error;

    fn try_from(s: GmmSpec) -> Result<Self> {
        Gmm::new(s.weights, s.components)
    }
}

impl From<Gmm> for GmmSpec {
    fn from(g: Gmm) -> Self {
        GmmSpec {
            weights: g.weights,
            components: g.components,
        }
    }
}

fn log_normal_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularCovariance("mixture component covariance".into()))?;
    let r = x - mean;
    let quad = r.dot(&chol.solve(&r));
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() + log_det + quad))
}

impl Gmm {
    pub fn new(weights: Vec<f64>, components: Vec<JointGaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid(
                "mixture needs one weight per component and at least one component",
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: c.dim(),
            });
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[JointGaussian] {
        &self.components
    }

    /// Posterior component probabilities given `(x_t, x_cond)`.
    pub fn responsibilities(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        x_cond: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let xt = DVector::from_column_slice(x_t);
        let xc = DVector::from_column_slice(x_cond);
        let mut logs = Vec::with_capacity(self.components.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            let (mean, cov) = c.marginal(sched, x_cond, t)?;
            let l = w.ln()
                + log_normal_density(&xc, c.mean_cond(), c.cov_cc())?
                + log_normal_density(&xt, &mean, &cov)?;
            logs.push(l);
        }
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        Ok(logs.iter().map(|l| (l - norm).exp()).collect())
    }

    /// `E[x0 | x_t, x_cond]`: responsibility-weighted component posterior means.
    pub fn posterior_mean(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        x_cond: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let resp = self.responsibilities(sched, x_t, x_cond, t)?;
        let mut out = vec![0.0; self.dim()];
        for (r, c) in resp.iter().zip(&self.components) {
            let m = c.posterior_mean(sched, x_t, x_cond, t)?;
            for (o, v) in out.iter_mut().zip(m) {
                *o += r * v;
            }
        }
        Ok(out)
    }

    /// Draws `(x0, x_cond)`: one uniform for the component, then the pair.
    pub fn sample(&self, rng: &mut NoiseStream) -> (Vec<f64>, Vec<f64>) {
        let u = rng.uniform(0.0, 1.0);
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.components[k].sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shifted(shift: f64) -> JointGaussian {
        let eye = DMatrix::<f64>::identity(2, 2);
        JointGaussian::new(
            DVector::from_element(2, shift),
            DVector::from_element(2, -shift),
            &eye * 0.3,
            &eye * 0.5,
            &eye * 0.2,
        )
        .unwrap()
    }

    #[test]
    fn single_component_equals_gaussian() {
        let g = shifted(0.7);
        let mix = Gmm::new(vec![1.0], vec![g.clone()]).unwrap();
        let sched = Schedule::linear(0.5).unwrap();
        let (x, xc) = ([0.2, 1.1], [-0.5, 0.3]);
        let a = mix.posterior_mean(&sched, &x, &xc, 0.6).unwrap();
        let b = g.posterior_mean(&sched, &x, &xc, 0.6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_components_equal_single() {
        let g = shifted(-0.4);
        let mix = Gmm::new(vec![0.25, 0.5, 0.25], vec![g.clone(), g.clone(), g.clone()]).unwrap();
        let sched = Schedule::trig(0.5).unwrap();
        let (x, xc) = ([1.0, -1.0], [0.1, 0.9]);
        let a = mix.posterior_mean(&sched, &x, &xc, 0.3).unwrap();
        let b = g.posterior_mean(&sched, &x, &xc, 0.3).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn responsibilities_are_stable_far_from_components() {
        let mix = Gmm::new(vec![0.5, 0.5], vec![shifted(-3.0), shifted(3.0)]).unwrap();
        let sched = Schedule::linear(0.5).unwrap();
        let r = mix
            .responsibilities(&sched, &[300.0, 300.0], &[-40.0, -40.0], 0.5)
            .unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[1] > 0.999);
    }

    #[test]
    fn posterior_is_responsibility_weighted() {
        let (g1, g2) = (shifted(-1.0), shifted(1.0));
        let mix = Gmm::new(vec![0.3, 0.7], vec![g1.clone(), g2.clone()]).unwrap();
        let sched = Schedule::linear(1.0).unwrap();
        let (x, xc) = ([0.1, 0.4], [0.2, -0.2]);
        let r = mix.responsibilities(&sched, &x, &xc, 0.5).unwrap();
        let m1 = g1.posterior_mean(&sched, &x, &xc, 0.5).unwrap();
        let m2 = g2.posterior_mean(&sched, &x, &xc, 0.5).unwrap();
        let got = mix.posterior_mean(&sched, &x, &xc, 0.5).unwrap();
        for i in 0..2 {
            assert!((got[i] - (r[0] * m1[i] + r[1] * m2[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(Gmm::new(vec![0.5, 0.4], vec![shifted(0.0), shifted(1.0)]).is_err());
        assert!(Gmm::new(vec![1.0], vec![]).is_err());
        assert!(Gmm::new(vec![1.5, -0.5], vec![shifted(0.0), shifted(1.0)]).is_err());
    }
}
