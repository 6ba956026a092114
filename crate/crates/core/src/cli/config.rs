//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{PairedDistribution, Preconditioner, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::FeatureMap;
use crate::sampler::{SamplerConfig, Variant};
use crate::schedule::{EpsilonPolicy, GridSpec, ReformulationFamily, Schedule};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Relative paths resolve against the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub experiment: Experiment,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    VerifySchedule(VerifyScheduleSpec),
    SimulateForward(SimulateForwardSpec),
    Sample(SampleSpec),
    TrainDenoiser(TrainDenoiserSpec),
    AfdStudy(AfdStudySpec),
    ConvergenceStudy(ConvergenceStudySpec),
    ReformulationCheck(ReformulationCheckSpec),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::VerifySchedule(_) => "verify-schedule",
            Experiment::SimulateForward(_) => "simulate-forward",
            Experiment::Sample(_) => "sample",
            Experiment::TrainDenoiser(_) => "train-denoiser",
            Experiment::AfdStudy(_) => "afd-study",
            Experiment::ConvergenceStudy(_) => "convergence-study",
            Experiment::ReformulationCheck(_) => "reformulation-check",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyScheduleSpec {
    pub schedule: Schedule,
    /// Points of the uniform dump grid on `[0, 1]`.
    #[serde(default = "default_points")]
    pub points: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateForwardSpec {
    pub schedule: Schedule,
    pub x0: Vec<f64>,
    pub x_cond: Vec<f64>,
    pub grid: GridSpec,
    pub n_paths: usize,
    /// Times at which ensemble moments are checked against the kernel.
    pub check_times: Vec<f64>,
    #[serde(default = "default_se_tol")]
    pub mean_se_tol: f64,
    #[serde(default = "default_var_tol")]
    pub var_rel_tol: f64,
    #[serde(default)]
    pub write_trajectories: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub schedule: Schedule,
    #[serde(default)]
    pub eps_policy: EpsilonPolicy,
    pub grid: GridSpec,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub boot_b: f64,
    #[serde(default = "one_usize")]
    pub replicates: usize,
    #[serde(default)]
    pub record_trajectory: bool,
}

impl SamplerSpec {
    pub fn build(&self, seed: u64) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            schedule: self.schedule.clone(),
            eps_policy: self.eps_policy.clone(),
            grid: self.grid.build()?,
            variant: self.variant,
            boot_b: self.boot_b,
            seed,
            record_trajectory: self.record_trajectory,
            replicates: self.replicates,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Closed-form posterior mean of the task distribution.
    Analytic,
    /// A model file written by `train-denoiser`; relative to the config file.
    Mlp { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub sampler: SamplerSpec,
    pub distribution: PairedDistribution,
    pub denoiser: DenoiserSpec,
    pub n_conditions: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDenoiserSpec {
    pub schedule: Schedule,
    pub distribution: PairedDistribution,
    pub train: TrainConfig,
    /// Estimated from the distribution when absent.
    #[serde(default)]
    pub preconditioner: Option<Preconditioner>,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Fails the run if the test MSE against the analytic denoiser exceeds this.
    #[serde(default)]
    pub max_test_mse: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfdStudySpec {
    pub sampler: SamplerSpec,
    pub distribution: PairedDistribution,
    pub denoiser: DenoiserSpec,
    pub n_conditions: usize,
    pub boot_values: Vec<f64>,
    #[serde(default)]
    pub feature_map: FeatureMap,
    #[serde(default = "yes")]
    pub require_monotone: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceStudySpec {
    pub schedule: Schedule,
    #[serde(default)]
    pub eps_policy: EpsilonPolicy,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_dts")]
    pub dts: Vec<f64>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_slope_range")]
    pub slope_range: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReformulationCheckSpec {
    pub model: ReformulationFamily,
    pub grid: GridSpec,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Random states for the dbim-vs-markovian step comparison (0 skips it).
    #[serde(default)]
    pub markovian_states: usize,
    #[serde(default = "default_markovian_tol")]
    pub markovian_tol: f64,
}

fn default_points() -> usize {
    101
}

fn default_se_tol() -> f64 {
    4.0
}

fn default_var_tol() -> f64 {
    0.03
}

fn default_variant() -> Variant {
    Variant::EulerZ
}

fn one_usize() -> usize {
    1
}

fn default_test_size() -> usize {
    2000
}

fn yes() -> bool {
    true
}

fn default_t() -> f64 {
    0.5
}

fn default_dts() -> Vec<f64> {
    vec![0.04, 0.02, 0.01, 0.005]
}

fn default_dim() -> usize {
    4
}

fn default_probes() -> usize {
    16
}

fn default_slope_range() -> [f64; 2] {
    [1.8, 2.2]
}

fn default_threshold() -> f64 {
    1e-8
}

fn default_markovian_tol() -> f64 {
    1e-12
}

impl ExperimentConfig {
    /// Parses a config document; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Format(format!("config field `{}`: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
