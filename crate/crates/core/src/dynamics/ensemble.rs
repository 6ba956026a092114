use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoise;
use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::{EpsilonPolicy, Schedule, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Pinned process from `t_min` up to `t_max`.
    Forward,
    /// Sampling SDE from `t_max` down to `t_min`.
    Reverse,
}

pub type StartSampler = Arc<dyn Fn(&mut NoiseStream) -> Result<Vec<f64>> + Send + Sync>;

/// Initial state of each path. A sampler draws from the path's own stream
/// before any integration noise.
#[derive(Clone)]
pub enum Start {
    Point(Vec<f64>),
    Sampler(StartSampler),
}

impl std::fmt::Debug for Start {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Start::Point(x) => f.debug_tuple("Point").field(x).finish(),
            Start::Sampler(_) => f.write_str("Sampler(..)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Record {
    All,
    /// Every k-th time index, plus the final one.
    Every(usize),
    Last,
}

impl Record {
    fn indices(self, n_times: usize) -> Result<Vec<usize>> {
        let last = n_times - 1;
        Ok(match self {
            Record::All => (0..n_times).collect(),
            Record::Every(0) => return Err(Error::invalid("record stride must be positive")),
            Record::Every(k) => {
                let mut v: Vec<usize> = (0..n_times).step_by(k).collect();
                if v.last() != Some(&last) {
                    v.push(last);
                }
                v
            }
            Record::Last => vec![last],
        })
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleConfig<'a> {
    pub schedule: &'a Schedule,
    pub x_cond: Vec<f64>,
    pub start: Start,
    pub grid: &'a TimeGrid,
    pub direction: Direction,
    /// Only used in reverse.
    pub eps: EpsilonPolicy,
    pub n_paths: usize,
    pub seed: u64,
    pub record: Record,
}

/// States indexed `[path][time][coordinate]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    n_paths: usize,
    d: usize,
    times: Vec<f64>,
    seed: u64,
    data: Vec<f64>,
}

impl PathEnsemble {
    pub fn new(
        n_paths: usize,
        d: usize,
        times: Vec<f64>,
        seed: u64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if n_paths == 0 || d == 0 || times.is_empty() {
            return Err(Error::invalid(
                "ensemble needs at least one path, time and coordinate",
            ));
        }
        if data.len() != n_paths * times.len() * d {
            return Err(Error::Format(format!(
                "ensemble data has {} values, expected {}",
                data.len(),
                n_paths * times.len() * d
            )));
        }
        Ok(Self {
            n_paths,
            d,
            times,
            seed,
            data,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn state(&self, path: usize, time_index: usize) -> &[f64] {
        let start = (path * self.times.len() + time_index) * self.d;
        &self.data[start..start + self.d]
    }

    /// Header `n_paths, n_times, d, seed` as little-endian `u64`, then the
    /// states as little-endian `f64`. Times are not stored.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [
            self.n_paths as u64,
            self.times.len() as u64,
            self.d as u64,
            self.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, times: Vec<f64>) -> Result<Self> {
        let mut buf = [0u8; 8];
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut buf)?;
            *h = u64::from_le_bytes(buf);
        }
        let [n_paths, n_times, d, seed] = header.map(|v| v as usize);
        if n_times != times.len() {
            return Err(Error::Format(format!(
                "file holds {n_times} times, {} supplied",
                times.len()
            )));
        }
        let mut data = Vec::with_capacity(n_paths * n_times * d);
        for _ in 0..n_paths * n_times * d {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Self::new(n_paths, d, times, seed as u64, data)
    }

    /// CSV with columns `path_id, time, x_0 .. x_{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (0..self.d).map(|i| format!("x_{i}")).collect();
        writeln!(w, "path_id,time,{}", cols.join(","))?;
        for p in 0..self.n_paths {
            for (k, t) in self.times.iter().enumerate() {
                write!(w, "{p},{t:.16e}")?;
                for v in self.state(p, k) {
                    write!(w, ",{v:.16e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Per-step constants shared by every path.
enum StepPlan {
    Forward { dt: f64, f: f64, s: f64, noise: f64 },
    Reverse { t: f64, dt: f64, eps: f64 },
}

pub fn simulate_ensemble(
    cfg: &EnsembleConfig<'_>,
    denoiser: Option<&dyn Denoise>,
) -> Result<PathEnsemble> {
    if cfg.n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    let d = cfg.x_cond.len();
    if d == 0 {
        return Err(Error::invalid("x_cond must be non-empty"));
    }
    if let Start::Point(x) = &cfg.start {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
    }
    let mut times = cfg.grid.points().to_vec();
    if cfg.direction == Direction::Forward {
        times.reverse();
    }
    let n_steps = times.len() - 1;
    let plan: Vec<StepPlan> = match cfg.direction {
        Direction::Forward => times
            .windows(2)
            .map(|w| {
                let c = cfg
                    .schedule
                    .bridge_coefficients(w[0])
                    .map_err(|e| e.at_time(w[0]))?;
                let dt = w[1] - w[0];
                Ok(StepPlan::Forward {
                    dt,
                    f: c.f,
                    s: c.s,
                    noise: (c.g_sq * dt).sqrt(),
                })
            })
            .collect::<Result<_>>()?,
        Direction::Reverse => {
            cfg.eps.validate()?;
            let den =
                denoiser.ok_or_else(|| Error::invalid("reverse simulation needs a denoiser"))?;
            if den.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: den.dim(),
                });
            }
            times
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let dt = w[0] - w[1];
                    let eps = cfg
                        .eps
                        .epsilon(cfg.schedule, w[0], dt, n_steps - 1 - i, n_steps)
                        .map_err(|e| e.at_time(w[0]))?;
                    Ok(StepPlan::Reverse { t: w[0], dt, eps })
                })
                .collect::<Result<_>>()?
        }
    };
    let recorded = cfg.record.indices(times.len())?;

    let run_path = |path: usize| -> Result<Vec<f64>> {
        let mut rng = NoiseStream::new(cfg.seed, path as u64);
        let mut x = match &cfg.start {
            Start::Point(x) => x.clone(),
            Start::Sampler(f) => {
                let x = f(&mut rng).map_err(|e| e.at_step(path, 0))?;
                if x.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: x.len(),
                    });
                }
                x
            }
        };
        let mut out = Vec::with_capacity(recorded.len() * d);
        let mut next_rec = recorded.iter().peekable();
        if next_rec.peek() == Some(&&0) {
            out.extend_from_slice(&x);
            next_rec.next();
        }
        let mut z = vec![0.0; d];
        for (i, step) in plan.iter().enumerate() {
            match *step {
                StepPlan::Forward {
                    dt, f, s, noise, ..
                } => {
                    rng.fill_normal(&mut z);
                    for ((x, xc), z) in x.iter_mut().zip(&cfg.x_cond).zip(&z) {
                        *x += (f * *x + s * xc) * dt + noise * z;
                    }
                }
                StepPlan::Reverse { t, dt, eps } => {
                    let den = denoiser.expect("checked above");
                    let step_err = |e: Error| e.at_step(path, i);
                    let x0 = den.denoise(&x, &cfg.x_cond, t).map_err(step_err)?;
                    let drift = super::reverse_drift(cfg.schedule, eps, &x, &cfg.x_cond, t, &x0)
                        .map_err(step_err)?;
                    let noise = (2.0 * eps * dt).sqrt();
                    if eps > 0.0 {
                        rng.fill_normal(&mut z);
                    }
                    for ((x, dr), z) in x.iter_mut().zip(&drift).zip(&z) {
                        *x += -dr * dt + noise * z;
                    }
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("state became non-finite").at_step(path, i));
            }
            if next_rec.peek() == Some(&&(i + 1)) {
                out.extend_from_slice(&x);
                next_rec.next();
            }
        }
        Ok(out)
    };

    let per_path: Vec<Result<Vec<f64>>> = (0..cfg.n_paths).into_par_iter().map(run_path).collect();
    let mut data = Vec::with_capacity(cfg.n_paths * recorded.len() * d);
    for r in per_path {
        data.extend(r?);
    }
    let rec_times = recorded.iter().map(|&k| times[k]).collect();
    PathEnsemble::new(cfg.n_paths, d, rec_times, cfg.seed, data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    pub n: usize,
    /// Standard error of each mean component, `sample std / sqrt(n)`.
    pub se_mean: DVector<f64>,
}

impl MomentEstimate {
    pub fn from_rows<'a, I>(rows: I, d: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let n = rows.len();
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: n });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        let nf = n as f64;
        let mean = DVector::from_fn(d, |i, _| rows.iter().map(|r| r[i]).sum::<f64>() / nf);
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let c = rows
                    .iter()
                    .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                    .sum::<f64>()
                    / (nf - 1.0);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let se_mean = DVector::from_fn(d, |i, _| (cov[(i, i)] / nf).sqrt());
        Ok(Self {
            mean,
            cov,
            n,
            se_mean,
        })
    }
}

pub fn estimate_marginal_moments(ens: &PathEnsemble, time_index: usize) -> Result<MomentEstimate> {
    if time_index >= ens.n_times() {
        return Err(Error::invalid(format!(
            "time index {time_index} out of range for {} times",
            ens.n_times()
        )));
    }
    MomentEstimate::from_rows((0..ens.n_paths).map(|p| ens.state(p, time_index)), ens.d)
}
