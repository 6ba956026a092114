use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::{Schedule, SINGULAR_TOL};

/// Jointly Gaussian pair `(x0, x_cond)` in `R^d x R^d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GaussianSpec", into = "GaussianSpec")]
pub struct JointGaussian {
    mean0: DVector<f64>,
    mean_cond: DVector<f64>,
    cov00: DMatrix<f64>,
    cov_cc: DMatrix<f64>,
    cov0c: DMatrix<f64>,
    /// `cov0c cov_cc^-1`.
    gain: DMatrix<f64>,
    /// `Cov(x0 | x_cond) = cov00 - gain cov0c^T`.
    cond_cov: DMatrix<f64>,
    joint_sqrt: DMatrix<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianSpec {
    mean0: Vec<f64>,
    mean_cond: Vec<f64>,
    cov00: Vec<Vec<f64>>,
    cov_cc: Vec<Vec<f64>>,
    /// `Cov(x0, x_cond)`, row index over `x0`.
    cov0c: Vec<Vec<f64>>,
}

fn to_matrix(name: &str, d: usize, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{name} must be {d} x {d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<GaussianSpec> for JointGaussian {
    type Error = Error;

    fn try_from(s: GaussianSpec) -> Result<Self> {
        let d = s.mean0.len();
        if s.mean_cond.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.mean_cond.len(),
            });
        }
        JointGaussian::new(
            DVector::from_vec(s.mean0),
            DVector::from_vec(s.mean_cond),
            to_matrix("cov00", d, &s.cov00)?,
            to_matrix("cov_cc", d, &s.cov_cc)?,
            to_matrix("cov0c", d, &s.cov0c)?,
        )
    }
}

impl From<JointGaussian> for GaussianSpec {
    fn from(g: JointGaussian) -> Self {
        GaussianSpec {
            mean0: g.mean0.iter().copied().collect(),
            mean_cond: g.mean_cond.iter().copied().collect(),
            cov00: to_rows(&g.cov00),
            cov_cc: to_rows(&g.cov_cc),
            cov0c: to_rows(&g.cov0c),
        }
    }
}

/// Symmetric PSD square root by eigendecomposition; tiny negative
/// eigenvalues from rounding are clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

impl JointGaussian {
    pub fn new(
        mean0: DVector<f64>,
        mean_cond: DVector<f64>,
        cov00: DMatrix<f64>,
        cov_cc: DMatrix<f64>,
        cov0c: DMatrix<f64>,
    ) -> Result<Self> {
        let d = mean0.len();
        if d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        for m in [&cov00, &cov_cc, &cov0c] {
            if m.shape() != (d, d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: m.nrows(),
                });
            }
        }
        if mean_cond.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: mean_cond.len(),
            });
        }
        for (name, m) in [("cov00", &cov00), ("cov_cc", &cov_cc)] {
            if (m - m.transpose()).abs().max() > 1e-12 {
                return Err(Error::invalid(format!("{name} must be symmetric")));
            }
        }
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&cov00);
        joint.view_mut((d, d), (d, d)).copy_from(&cov_cc);
        joint.view_mut((0, d), (d, d)).copy_from(&cov0c);
        joint.view_mut((d, 0), (d, d)).copy_from(&cov0c.transpose());
        let scale = joint.abs().max().max(1.0);
        let min_eig = joint.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 * scale {
            return Err(Error::SingularCovariance(format!(
                "joint covariance is not positive semidefinite (min eigenvalue {min_eig})"
            )));
        }
        let chol = cov_cc
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularCovariance("cov_cc must be positive definite".into()))?;
        let gain = chol.solve(&cov0c.transpose()).transpose();
        let cond_cov = &cov00 - &gain * cov0c.transpose();
        let cond_cov = 0.5 * (&cond_cov + cond_cov.transpose());
        Ok(Self {
            joint_sqrt: psd_sqrt(&joint),
            mean0,
            mean_cond,
            cov00,
            cov_cc,
            cov0c,
            gain,
            cond_cov,
        })
    }

    /// `x0 ~ N(0, var0 I)` and `x_cond = x0 + n` with `n ~ N(0, noise_var I)`.
    pub fn noisy_copy(d: usize, var0: f64, noise_var: f64) -> Result<Self> {
        let eye = DMatrix::<f64>::identity(d, d);
        Self::new(
            DVector::zeros(d),
            DVector::zeros(d),
            &eye * var0,
            &eye * (var0 + noise_var),
            &eye * var0,
        )
    }

    /// Zero-mean pair whose coordinates are independent with
    /// `Var(x0_i) = sigma0^2`, `Var(x_cond_i) = sigma_cond^2` and
    /// `Cov(x0_i, x_cond_i) = sigma0c`.
    pub fn from_statistics(d: usize, sigma0: f64, sigma_cond: f64, sigma0c: f64) -> Result<Self> {
        let eye = DMatrix::<f64>::identity(d, d);
        Self::new(
            DVector::zeros(d),
            DVector::zeros(d),
            &eye * (sigma0 * sigma0),
            &eye * (sigma_cond * sigma_cond),
            &eye * sigma0c,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    pub fn mean0(&self) -> &DVector<f64> {
        &self.mean0
    }

    pub fn mean_cond(&self) -> &DVector<f64> {
        &self.mean_cond
    }

    pub fn cov00(&self) -> &DMatrix<f64> {
        &self.cov00
    }

    pub fn cov_cc(&self) -> &DMatrix<f64> {
        &self.cov_cc
    }

    pub fn cov0c(&self) -> &DMatrix<f64> {
        &self.cov0c
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Mean and covariance of `x0 | x_cond`.
    pub fn conditional(&self, x_cond: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check(x_cond)?;
        let xc = DVector::from_column_slice(x_cond);
        let m = &self.mean0 + &self.gain * (xc - &self.mean_cond);
        Ok((m, self.cond_cov.clone()))
    }

    /// Mean and covariance of `x_t | x_cond` under the bridge kernel.
    pub fn marginal(
        &self,
        sched: &Schedule,
        x_cond: &[f64],
        t: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let e = sched.eval(t)?;
        let (m, p) = self.conditional(x_cond)?;
        let xc = DVector::from_column_slice(x_cond);
        let mean = e.alpha * m + e.beta * xc;
        let d = self.dim();
        let cov = e.alpha * e.alpha * p + DMatrix::identity(d, d) * (e.gamma * e.gamma);
        Ok((mean, cov))
    }

    /// `E[x0 | x_t, x_cond]`, in gain form
    /// `m + alpha P S^-1 (x_t - alpha m - beta x_cond)` with `S = alpha^2 P + gamma^2 I`.
    pub fn posterior_mean(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        x_cond: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        self.check(x_t)?;
        let e = sched.eval(t)?;
        let (m, p) = self.conditional(x_cond)?;
        let (_, s) = self.marginal(sched, x_cond, t)?;
        let resid = DVector::from_column_slice(x_t)
            - e.alpha * &m
            - e.beta * DVector::from_column_slice(x_cond);
        let solved = solve_spd(&s, &resid, t)?;
        Ok((m + e.alpha * p * solved).iter().copied().collect())
    }

    /// Closed-form `grad_x log p_t(x | x_cond) = -S^-1 (x - mean)`.
    pub fn conditional_score(
        &self,
        sched: &Schedule,
        x: &[f64],
        x_cond: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        self.check(x)?;
        let (mean, cov) = self.marginal(sched, x_cond, t)?;
        let solved = solve_spd(&cov, &(DVector::from_column_slice(x) - mean), t)?;
        Ok(solved.iter().map(|v| -v).collect())
    }

    /// Draws `(x0, x_cond)`.
    pub fn sample(&self, rng: &mut NoiseStream) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let z = DVector::from_vec(rng.normal_vec(2 * d));
        let v = &self.joint_sqrt * z;
        let x0 = (0..d).map(|i| self.mean0[i] + v[i]).collect();
        let xc = (0..d).map(|i| self.mean_cond[i] + v[d + i]).collect();
        (x0, xc)
    }

    /// Draws `x_t ~ p_t(. | x_cond)`.
    pub fn sample_marginal(
        &self,
        sched: &Schedule,
        x_cond: &[f64],
        t: f64,
        rng: &mut NoiseStream,
    ) -> Result<Vec<f64>> {
        let (mean, cov) = self.marginal(sched, x_cond, t)?;
        let z = DVector::from_vec(rng.normal_vec(self.dim()));
        Ok((mean + psd_sqrt(&cov) * z).iter().copied().collect())
    }
}

fn solve_spd(s: &DMatrix<f64>, rhs: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < SINGULAR_TOL {
        return Err(Error::SingularCovariance(format!(
            "conditional covariance at t = {t} has eigenvalue {min_eig}"
        )));
    }
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularCovariance(format!("cholesky failed at t = {t}")))?;
    Ok(chol.solve(rhs))
}
