use serde::{Deserialize, Serialize};

use super::HORIZON;
use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 0.01;
pub const DEFAULT_T_MAX: f64 = 1.0 - 1e-4;
pub const DEFAULT_RHO: f64 = 0.6;

/// Strictly decreasing integration times `t_max = points[0] > ... > points[N] = t_min`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
}

/// Serialisable description of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub steps: usize,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Evenly spaced points instead of rho spacing.
    #[serde(default)]
    pub uniform: bool,
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        if self.uniform {
            TimeGrid::uniform(self.steps, self.t_min, self.t_max)
        } else {
            TimeGrid::rho_spaced(self.steps, self.t_min, self.t_max, self.rho)
        }
    }
}

impl TimeGrid {
    /// Rho-spaced grid:
    /// `t_i = (t_max^(1/rho) + (i/N) (t_min^(1/rho) - t_max^(1/rho)))^rho`.
    pub fn rho_spaced(n: usize, t_min: f64, t_max: f64, rho: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        if !(0.0 < t_min && t_min < t_max && t_max <= HORIZON) {
            return Err(Error::invalid(format!(
                "need 0 < t_min < t_max <= {HORIZON}, got t_min = {t_min}, t_max = {t_max}"
            )));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::invalid(format!("rho must be positive, got {rho}")));
        }
        let inv = 1.0 / rho;
        let (hi, lo) = (t_max.powf(inv), t_min.powf(inv));
        let mut points: Vec<f64> = (0..=n)
            .map(|i| (hi + (i as f64 / n as f64) * (lo - hi)).powf(rho))
            .collect();
        points[0] = t_max;
        points[n] = t_min;
        Self::from_points(points, rho)
    }

    /// Evenly spaced grid on `[t_min, t_max]`, allowing `t_min = 0` and
    /// `t_max = 1` for forward simulation from the pinned start.
    pub fn uniform(n: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        if !(0.0 <= t_min && t_min < t_max && t_max <= HORIZON) {
            return Err(Error::invalid(format!(
                "need 0 <= t_min < t_max <= {HORIZON}, got t_min = {t_min}, t_max = {t_max}"
            )));
        }
        let step = (t_max - t_min) / n as f64;
        let mut points: Vec<f64> = (0..=n).map(|i| t_max - i as f64 * step).collect();
        points[n] = t_min;
        Self::from_points(points, 1.0)
    }

    /// Wraps explicit points, which must be strictly decreasing within `[0, 1]`.
    pub fn from_points(points: Vec<f64>, rho: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("time grid needs at least two points"));
        }
        if points.iter().any(|t| !(0.0..=HORIZON).contains(t)) {
            return Err(Error::invalid("time grid points must lie in [0, 1]"));
        }
        if points.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid("time grid must be strictly decreasing"));
        }
        Ok(Self {
            t_min: *points.last().expect("non-empty"),
            t_max: points[0],
            points,
            rho,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Number of integration steps `N` (one less than the number of points).
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }
}
