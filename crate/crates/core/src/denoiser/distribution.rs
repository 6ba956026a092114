use serde::{Deserialize, Serialize};

use super::{Gmm, JointGaussian, Preconditioner};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;

/// Deterministic map used by [`MapPlusNoise`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "kebab-case")]
pub enum MapKind {
    /// `m(x) = A x + b`, with `A` given row by row.
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    /// `m(x)_i = sin(freq x_i)`.
    Sine { freq: f64 },
}

/// `x_cond ~ N(cond_mean, cond_std^2 I)`, `x0 = m(x_cond) + noise z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPlusNoise {
    pub cond_mean: Vec<f64>,
    pub cond_std: f64,
    #[serde(flatten)]
    pub map: MapKind,
    pub noise: f64,
}

impl MapPlusNoise {
    pub fn validate(&self) -> Result<()> {
        let d = self.cond_mean.len();
        if d == 0 {
            return Err(Error::invalid("cond_mean must be non-empty"));
        }
        if !(self.cond_std > 0.0 && self.noise >= 0.0) {
            return Err(Error::invalid("need cond_std > 0 and noise >= 0"));
        }
        if let MapKind::Affine { matrix, offset } = &self.map {
            if matrix.len() != d || matrix.iter().any(|r| r.len() != d) || offset.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: matrix.len(),
                });
            }
        }
        Ok(())
    }

    pub fn apply_map(&self, x: &[f64]) -> Vec<f64> {
        match &self.map {
            MapKind::Affine { matrix, offset } => matrix
                .iter()
                .zip(offset)
                .map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
                .collect(),
            MapKind::Sine { freq } => x.iter().map(|v| (freq * v).sin()).collect(),
        }
    }

    pub fn sample(&self, rng: &mut NoiseStream) -> (Vec<f64>, Vec<f64>) {
        let d = self.cond_mean.len();
        let xc: Vec<f64> = self
            .cond_mean
            .iter()
            .map(|m| m + self.cond_std * rng.normal())
            .collect();
        let mut x0 = self.apply_map(&xc);
        for v in x0.iter_mut().take(d) {
            *v += self.noise * rng.normal();
        }
        (x0, xc)
    }
}

/// Joint law of `(x0, x_cond)` used for training and for oracles.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PairedDistribution {
    JointGaussian(JointGaussian),
    GmmCoupling(Gmm),
    MapPlusNoise(MapPlusNoise),
}

impl PairedDistribution {
    pub fn dim(&self) -> usize {
        match self {
            PairedDistribution::JointGaussian(g) => g.dim(),
            PairedDistribution::GmmCoupling(g) => g.dim(),
            PairedDistribution::MapPlusNoise(m) => m.cond_mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PairedDistribution::MapPlusNoise(m) => m.validate(),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut NoiseStream) -> (Vec<f64>, Vec<f64>) {
        match self {
            PairedDistribution::JointGaussian(g) => g.sample(rng),
            PairedDistribution::GmmCoupling(g) => g.sample(rng),
            PairedDistribution::MapPlusNoise(m) => m.sample(rng),
        }
    }
}

/// Estimates preconditioning statistics from `n` draws: per-coordinate
/// variances and cross-covariances, averaged over coordinates.
pub fn estimate_statistics(
    dist: &PairedDistribution,
    n: usize,
    seed: u64,
) -> Result<Preconditioner> {
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = dist.dim();
    let mut rng = NoiseStream::new(seed, 0);
    let pairs: Vec<_> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    let nf = n as f64;
    let (mut v0, mut vc, mut c0c) = (0.0, 0.0, 0.0);
    for i in 0..d {
        let m0 = pairs.iter().map(|p| p.0[i]).sum::<f64>() / nf;
        let mc = pairs.iter().map(|p| p.1[i]).sum::<f64>() / nf;
        for (x0, xc) in &pairs {
            v0 += (x0[i] - m0).powi(2);
            vc += (xc[i] - mc).powi(2);
            c0c += (x0[i] - m0) * (xc[i] - mc);
        }
    }
    let denom = (nf - 1.0) * d as f64;
    Preconditioner::new((v0 / denom).sqrt(), (vc / denom).sqrt(), c0c / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics_of_a_known_coupling() {
        let dist = PairedDistribution::JointGaussian(
            JointGaussian::from_statistics(2, 0.5, 0.5, 0.125).unwrap(),
        );
        let p = estimate_statistics(&dist, 200_000, 4).unwrap();
        assert!((p.sigma0 - 0.5).abs() < 0.005);
        assert!((p.sigma_cond - 0.5).abs() < 0.005);
        assert!((p.sigma0c - 0.125).abs() < 0.003);
    }

    #[test]
    fn map_plus_noise_is_sampled_through_the_map() {
        let m = MapPlusNoise {
            cond_mean: vec![0.0, 1.0],
            cond_std: 0.5,
            map: MapKind::Affine {
                matrix: vec![vec![2.0, 0.0], vec![0.0, -1.0]],
                offset: vec![0.5, 0.0],
            },
            noise: 0.0,
        };
        m.validate().unwrap();
        let mut rng = NoiseStream::new(1, 2);
        let (x0, xc) = m.sample(&mut rng);
        assert_eq!(x0, vec![2.0 * xc[0] + 0.5, -xc[1]]);
    }

    #[test]
    fn config_forms_parse() {
        let json = r#"{"kind":"map-plus-noise","cond_mean":[0.0],"cond_std":1.0,"map":"sine","freq":2.0,"noise":0.1}"#;
        let d: PairedDistribution = serde_json::from_str(json).unwrap();
        assert_eq!(d.dim(), 1);
        let json = r#"{"kind":"joint-gaussian","mean0":[0.0],"mean_cond":[0.0],"cov00":[[1.0]],"cov_cc":[[2.0]],"cov0c":[[1.0]]}"#;
        let d: PairedDistribution = serde_json::from_str(json).unwrap();
        assert!(matches!(d, PairedDistribution::JointGaussian(_)));
        assert!(estimate_statistics(&d, 1, 0).is_err());
    }
}
