//! Experiment bodies. Each returns its artifacts in memory plus the named
//! numerical checks it performed; nothing touches the filesystem here except
//! loading referenced model files.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::config::{
    AfdStudySpec, ConvergenceStudySpec, DenoiserSpec, Experiment, ExperimentConfig,
    ReformulationCheckSpec, SampleSpec, SimulateForwardSpec, TrainDenoiserSpec, VerifyScheduleSpec,
};
use crate::denoiser::{
    denoiser_mse, estimate_statistics, train_mlp_denoiser, zhat, Denoise, Denoiser, MlpDenoiser,
    PairedDistribution,
};
use crate::dynamics::{
    estimate_marginal_moments, simulate_ensemble, Direction, EnsembleConfig, MomentEstimate,
    Record, Start,
};
use crate::error::{Error, Result};
use crate::metrics::{afd, convergence_slope, ConditionedSamples};
use crate::rng::NoiseStream;
use crate::sampler::{
    sample, step_dbim, step_euler_z, step_gamma_simplified, step_markovian, StepTimes,
};
use crate::schedule::{EpsilonPolicy, ReformulationFamily, Schedule, HORIZON};

/// Stream id for drawing task conditions; sample paths use ids from 0 up.
const CONDITION_STREAM: u64 = u64::MAX;
/// Seed offset for held-out evaluation draws.
const HELD_OUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
/// Draws used to estimate preconditioning statistics.
const STAT_SAMPLES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit: format!("<= {limit:e}"),
            pass: value <= limit,
        }
    }

    fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit: format!("in [{lo}, {hi}]"),
            pass: (lo..=hi).contains(&value),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub artifacts: Vec<Artifact>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn artifact(&self, name: &str) -> Option<&[u8]> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.bytes.as_slice())
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.artifacts.push(Artifact {
            name: name.to_string(),
            bytes,
        });
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes =
            serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }
}

/// Full round-trip decimal.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let cells: Vec<String> = cells.into_iter().collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}_{i}")).collect()
}

/// Runs one experiment. `config_dir` anchors relative file references.
pub fn execute(cfg: &ExperimentConfig, config_dir: &Path) -> Result<Outcome> {
    match &cfg.experiment {
        Experiment::VerifySchedule(s) => verify_schedule(s),
        Experiment::SimulateForward(s) => simulate_forward(s, cfg.seed),
        Experiment::Sample(s) => run_sample(s, cfg.seed, config_dir),
        Experiment::TrainDenoiser(s) => train_denoiser(s, cfg.seed),
        Experiment::AfdStudy(s) => afd_study(s, cfg.seed, config_dir),
        Experiment::ConvergenceStudy(s) => convergence_study(s, cfg.seed),
        Experiment::ReformulationCheck(s) => reformulation_check(s, cfg.seed),
    }
}

fn verify_schedule(spec: &VerifyScheduleSpec) -> Result<Outcome> {
    let sched = &spec.schedule;
    sched.validate()?;
    if spec.points < 3 {
        return Err(Error::invalid("points must be at least 3"));
    }
    let mut csv = String::new();
    csv_row(
        &mut csv,
        [
            "t", "alpha", "beta", "gamma", "d_alpha", "d_beta", "d_gamma", "f", "s", "g_sq",
        ]
        .map(String::from),
    );
    let last = spec.points - 1;
    for i in 0..=last {
        let t = i as f64 / last as f64;
        let e = sched.eval(t)?;
        let mut cells = vec![num(t), num(e.alpha), num(e.beta), num(e.gamma)];
        // Derivatives and SDE coefficients can be singular at the endpoints.
        if i == 0 || i == last {
            cells.extend(std::iter::repeat_n(String::new(), 6));
        } else {
            cells.extend([num(e.d_alpha), num(e.d_beta), num(e.d_gamma)]);
            match sched.bridge_coefficients(t) {
                Ok(c) => cells.extend([num(c.f), num(c.s), num(c.g_sq)]),
                Err(_) => cells.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
        csv_row(&mut csv, cells);
    }
    let mut out = Outcome::default();
    out.add("schedule.csv", csv.into_bytes());

    if sched.is_bridge() {
        let (e0, e1) = (sched.eval(0.0)?, sched.eval(HORIZON)?);
        let endpoint = [
            e0.alpha - 1.0,
            e0.beta,
            e0.gamma,
            e1.alpha,
            e1.beta - 1.0,
            e1.gamma,
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
        out.checks
            .push(Check::at_most("endpoint-constraints", endpoint, 1e-12));
        let mut min_interior = f64::INFINITY;
        for i in 1..last {
            let e = sched.eval(i as f64 / last as f64)?;
            min_interior = min_interior.min(e.alpha).min(e.beta).min(e.gamma);
        }
        out.checks.push(Check {
            name: "interior-positivity".into(),
            value: min_interior,
            limit: "> 0".into(),
            pass: min_interior > 0.0,
        });
    }
    if sched.has_analytic_derivatives() {
        let h = 1e-6;
        let kinks = sched.kinks();
        let mut worst = 0.0f64;
        for i in 1..=99 {
            let t = i as f64 / 100.0;
            if kinks.iter().any(|k| (k - t).abs() < 2.0 * h) {
                continue;
            }
            let (e, lo, hi) = (sched.eval(t)?, sched.eval(t - h)?, sched.eval(t + h)?);
            for (analytic, fd) in [
                (e.d_alpha, (hi.alpha - lo.alpha) / (2.0 * h)),
                (e.d_beta, (hi.beta - lo.beta) / (2.0 * h)),
                (e.d_gamma, (hi.gamma - lo.gamma) / (2.0 * h)),
            ] {
                worst = worst.max((analytic - fd).abs() / analytic.abs().max(1.0));
            }
        }
        out.checks
            .push(Check::at_most("derivative-consistency", worst, 1e-5));
    }
    out.add_json("checks.json", &out.checks.clone())?;
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn simulate_forward(spec: &SimulateForwardSpec, seed: u64) -> Result<Outcome> {
    spec.schedule.validate()?;
    let d = spec.x0.len();
    if spec.x_cond.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: spec.x_cond.len(),
        });
    }
    let grid = spec.grid.build()?;
    let ascending: Vec<f64> = grid.points().iter().rev().copied().collect();
    let mut check_idx = Vec::new();
    for &t in &spec.check_times {
        let k = ascending
            .iter()
            .position(|s| (s - t).abs() <= 1e-9)
            .ok_or_else(|| Error::invalid(format!("check time {t} is not a grid point")))?;
        check_idx.push(k);
    }
    let stride = check_idx.iter().fold(0, |g, &k| gcd(g, k)).max(1);
    let ens = simulate_ensemble(
        &EnsembleConfig {
            schedule: &spec.schedule,
            x_cond: spec.x_cond.clone(),
            start: Start::Point(spec.x0.clone()),
            grid: &grid,
            direction: Direction::Forward,
            eps: EpsilonPolicy::zero(),
            n_paths: spec.n_paths,
            seed,
            record: Record::Every(stride),
        },
        None,
    )?;

    let mut out = Outcome::default();
    let mut csv = String::new();
    csv_row(
        &mut csv,
        [
            "t",
            "component",
            "mean",
            "se_mean",
            "var",
            "kernel_mean",
            "kernel_var",
        ]
        .map(String::from),
    );
    for (ti, &t) in ens.times().iter().enumerate() {
        let m = estimate_marginal_moments(&ens, ti)?;
        let e = spec.schedule.eval(t)?;
        let kvar = e.gamma * e.gamma;
        let mut worst_mean = 0.0f64;
        let mut worst_var = 0.0f64;
        for i in 0..d {
            let kmean = e.alpha * spec.x0[i] + e.beta * spec.x_cond[i];
            csv_row(
                &mut csv,
                [
                    num(t),
                    i.to_string(),
                    num(m.mean[i]),
                    num(m.se_mean[i]),
                    num(m.cov[(i, i)]),
                    num(kmean),
                    num(kvar),
                ],
            );
            worst_mean = worst_mean.max((m.mean[i] - kmean).abs() / m.se_mean[i]);
            worst_var = worst_var.max((m.cov[(i, i)] - kvar).abs() / kvar);
        }
        if spec.check_times.iter().any(|c| (c - t).abs() <= 1e-9) {
            out.checks.push(Check::at_most(
                format!("kernel-mean-se@t={t}"),
                worst_mean,
                spec.mean_se_tol,
            ));
            out.checks.push(Check::at_most(
                format!("kernel-var-rel@t={t}"),
                worst_var,
                spec.var_rel_tol,
            ));
        }
    }
    out.add("moments.csv", csv.into_bytes());
    if spec.write_trajectories {
        let mut bin = Vec::new();
        ens.write_binary(&mut bin)?;
        out.add("trajectories.traj", bin);
        let mut times = String::from("time_index,t\n");
        for (i, t) in ens.times().iter().enumerate() {
            let _ = writeln!(times, "{i},{}", num(*t));
        }
        out.add("trajectory_times.csv", times.into_bytes());
    }
    out.add_json("checks.json", &out.checks.clone())?;
    Ok(out)
}

fn load_denoiser(
    spec: &DenoiserSpec,
    dist: &PairedDistribution,
    sched: &Schedule,
    config_dir: &Path,
) -> Result<Denoiser> {
    let den = match spec {
        DenoiserSpec::Analytic => Denoiser::analytic(dist, sched)?,
        DenoiserSpec::Mlp { path } => {
            let path = config_dir.join(path);
            let file = std::fs::File::open(&path).map_err(|e| {
                Error::invalid(format!("cannot open model {}: {e}", path.display()))
            })?;
            Denoiser::Mlp(MlpDenoiser::load(std::io::BufReader::new(file))?)
        }
    };
    if den.dim() != dist.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist.dim(),
            got: den.dim(),
        });
    }
    Ok(den)
}

type Rows = Vec<Vec<f64>>;

/// Draws `n` task pairs; returns `(x0, x_cond)` rows.
fn draw_conditions(dist: &PairedDistribution, n: usize, seed: u64) -> Result<(Rows, Rows)> {
    dist.validate()?;
    if n == 0 {
        return Err(Error::invalid("n_conditions must be at least 1"));
    }
    let mut rng = NoiseStream::new(seed, CONDITION_STREAM);
    Ok((0..n).map(|_| dist.sample(&mut rng)).unzip())
}

fn run_sample(spec: &SampleSpec, seed: u64, config_dir: &Path) -> Result<Outcome> {
    let cfg = spec.sampler.build(seed)?;
    let den = load_denoiser(
        &spec.denoiser,
        &spec.distribution,
        &cfg.schedule,
        config_dir,
    )?;
    let (refs, conds) = draw_conditions(&spec.distribution, spec.n_conditions, seed)?;
    let result = sample(&cfg, &den, &conds)?;
    let d = den.dim();

    let mut out = Outcome::default();
    let mut csv = String::new();
    let mut header = vec!["row_id".to_string()];
    header.extend(indexed("x0", d));
    header.extend(indexed("x_cond", d));
    csv_row(&mut csv, header);
    for (r, (x0, xc)) in refs.iter().zip(&conds).enumerate() {
        let mut cells = vec![r.to_string()];
        cells.extend(x0.iter().chain(xc).map(|v| num(*v)));
        csv_row(&mut csv, cells);
    }
    out.add("conditions.csv", csv.into_bytes());

    let mut samples = Vec::new();
    result.write_csv(&mut samples)?;
    out.add("samples.csv", samples);

    let mut diag = String::from("step,t,dt,eps,mean_x0_change\n");
    for (i, s) in result.diagnostics.iter().enumerate() {
        csv_row(
            &mut diag,
            [
                i.to_string(),
                num(s.t),
                num(s.dt),
                num(s.eps),
                num(s.mean_x0_change),
            ],
        );
    }
    out.add("diagnostics.csv", diag.into_bytes());

    let moments = MomentEstimate::from_rows(result.x0.iter().map(Vec::as_slice), d)?;
    let matched: Vec<Vec<f64>> = result.row_ids.iter().map(|&r| refs[r].clone()).collect();
    let mse = crate::metrics::mse(&result.x0, &matched)?;
    out.add_json(
        "moments.json",
        &json!({ "samples": moments, "mse_vs_reference_x0": mse }),
    )?;
    if let Some(traj) = &result.trajectories {
        let mut bin = Vec::new();
        traj.write_binary(&mut bin)?;
        out.add("trajectories.traj", bin);
    }
    Ok(out)
}

fn train_denoiser(spec: &TrainDenoiserSpec, seed: u64) -> Result<Outcome> {
    spec.schedule.validate()?;
    spec.distribution.validate()?;
    let mut tc = spec.train.clone();
    tc.seed = seed;
    let prec = match spec.preconditioner {
        Some(p) => p,
        None => estimate_statistics(&spec.distribution, STAT_SAMPLES, seed ^ HELD_OUT_SALT)?,
    };
    let trained = train_mlp_denoiser(&spec.distribution, &spec.schedule, prec, &tc)?;
    let mut out = Outcome::default();
    let test_mse = match Denoiser::analytic(&spec.distribution, &spec.schedule) {
        Ok(reference) => Some(denoiser_mse(
            &trained.denoiser,
            &reference,
            &spec.distribution,
            &spec.schedule,
            spec.test_size,
            tc.t_min,
            tc.t_max,
            seed ^ HELD_OUT_SALT,
        )?),
        Err(_) => None,
    };
    if let Some(limit) = spec.max_test_mse {
        let value = test_mse.ok_or_else(|| {
            Error::invalid("max_test_mse needs a distribution with a closed-form denoiser")
        })?;
        out.checks
            .push(Check::at_most("test-mse-vs-analytic", value, limit));
    }
    let mut model = Vec::new();
    trained.denoiser.save(&mut model)?;
    out.add("model.bin", model);
    out.add_json(
        "training.json",
        &json!({
            "final_running_loss": trained.final_loss,
            "test_mse_vs_analytic": test_mse,
            "preconditioner": prec,
            "layer_sizes": trained.denoiser.net.sizes(),
            "iters": tc.iters,
        }),
    )?;
    out.add_json("checks.json", &out.checks.clone())?;
    Ok(out)
}

fn afd_study(spec: &AfdStudySpec, seed: u64, config_dir: &Path) -> Result<Outcome> {
    let mut cfg = spec.sampler.build(seed)?;
    if spec.boot_values.is_empty() {
        return Err(Error::invalid("boot_values must be non-empty"));
    }
    let den = load_denoiser(
        &spec.denoiser,
        &spec.distribution,
        &cfg.schedule,
        config_dir,
    )?;
    let (_, conds) = draw_conditions(&spec.distribution, spec.n_conditions, seed)?;
    let mut rows = Vec::new();
    let mut csv = String::from("boot_b,afd\n");
    for &b in &spec.boot_values {
        cfg.boot_b = b;
        let result = sample(&cfg, &den, &conds)?;
        let cs =
            ConditionedSamples::from_rows(&result.x0, &result.row_ids, spec.feature_map.clone())?;
        let report = afd(&cs)?;
        csv_row(&mut csv, [num(b), num(report.afd)]);
        rows.push(json!({ "boot_b": b, "afd": report.afd, "per_group": report.per_group }));
    }
    let mut out = Outcome::default();
    if spec.require_monotone {
        let values: Vec<f64> = rows
            .iter()
            .map(|r| r["afd"].as_f64().unwrap_or(f64::NAN))
            .collect();
        let min_step = values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        out.checks.push(Check {
            name: "afd-nondecreasing-in-boot-noise".into(),
            value: if values.len() < 2 { 0.0 } else { min_step },
            limit: ">= 0".into(),
            pass: values.len() < 2 || min_step >= 0.0,
        });
    }
    out.add("afd.csv", csv.into_bytes());
    out.add_json("afd.json", &rows)?;
    out.add_json("checks.json", &out.checks.clone())?;
    Ok(out)
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean single-step gaps `[|euler - gamma|, |gamma - dbim|, |euler - dbim|]`
/// per `dt`, over seeded random probe states at time `t`.
pub fn variant_gaps(
    sched: &Schedule,
    eps_policy: &EpsilonPolicy,
    t: f64,
    dts: &[f64],
    dim: usize,
    probes: usize,
    seed: u64,
) -> Result<Vec<[f64; 3]>> {
    if dim == 0 || probes == 0 {
        return Err(Error::invalid("dim and probes must be positive"));
    }
    let tail = eps_policy.tail_zero_steps;
    let mut rng = NoiseStream::new(seed, 0);
    let mut sums = vec![[0.0; 3]; dts.len()];
    for _ in 0..probes {
        let (x_t, x_cond, x0, z) = (
            rng.normal_vec(dim),
            rng.normal_vec(dim),
            rng.normal_vec(dim),
            rng.normal_vec(dim),
        );
        let zh = zhat(sched, &x0, &x_t, &x_cond, t)?;
        for (k, &dt) in dts.iter().enumerate() {
            let at = StepTimes {
                t,
                dt,
                eps: eps_policy.epsilon(sched, t, dt, tail, tail + 1)?,
            };
            let a = step_euler_z(sched, &x_t, &x_cond, &x0, at, &z)?;
            let b = step_gamma_simplified(sched, &x0, &x_cond, &zh, at, &z)?;
            let c = step_dbim(sched, &x0, &x_cond, &zh, at, &z)?;
            sums[k][0] += norm_diff(&a, &b);
            sums[k][1] += norm_diff(&b, &c);
            sums[k][2] += norm_diff(&a, &c);
        }
    }
    let n = probes as f64;
    Ok(sums.into_iter().map(|g| g.map(|v| v / n)).collect())
}

fn convergence_study(spec: &ConvergenceStudySpec, seed: u64) -> Result<Outcome> {
    spec.schedule.validate()?;
    spec.eps_policy.validate()?;
    let gaps = variant_gaps(
        &spec.schedule,
        &spec.eps_policy,
        spec.t,
        &spec.dts,
        spec.dim,
        spec.probes,
        seed,
    )?;
    const PAIRS: [&str; 3] = ["euler_vs_gamma", "gamma_vs_dbim", "euler_vs_dbim"];
    let mut csv = format!("dt,{}\n", PAIRS.join(","));
    for (dt, g) in spec.dts.iter().zip(&gaps) {
        csv_row(&mut csv, [num(*dt), num(g[0]), num(g[1]), num(g[2])]);
    }
    let [lo, hi] = spec.slope_range;
    let mut out = Outcome::default();
    let mut slopes = serde_json::Map::new();
    for (k, pair) in PAIRS.iter().enumerate() {
        let errors: Vec<f64> = gaps.iter().map(|g| g[k]).collect();
        let slope = convergence_slope(&spec.dts, &errors)?;
        out.checks.push(Check::within(
            format!("slope-{}", pair.replace('_', "-")),
            slope,
            lo,
            hi,
        ));
        slopes.insert(format!("slope_{pair}"), json!(slope));
    }
    slopes.insert("t".into(), json!(spec.t));
    out.add("convergence.csv", csv.into_bytes());
    out.add_json("convergence.json", &slopes)?;
    out.add_json("checks.json", &out.checks.clone())?;
    Ok(out)
}

/// Largest gap between the dbim step under the I2SB epsilon and the
/// Markovian step, over `n` seeded random states.
pub fn markovian_gap(sched: &Schedule, n: usize, seed: u64) -> Result<f64> {
    let policy = EpsilonPolicy::i2sb(0);
    let mut rng = NoiseStream::new(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.uniform(0.05, 0.95);
        let dt = t * rng.uniform(0.05, 0.9);
        let (x_t, x_cond, x0, z) = (
            rng.normal_vec(2),
            rng.normal_vec(2),
            rng.normal_vec(2),
            rng.normal_vec(2),
        );
        let zh = zhat(sched, &x0, &x_t, &x_cond, t)?;
        let at = StepTimes {
            t,
            dt,
            eps: policy.epsilon(sched, t, dt, 0, 1)?,
        };
        let a = step_dbim(sched, &x0, &x_cond, &zh, at, &z)?;
        let b = step_markovian(sched, &x0, &x_t, t, dt, &z)?;
        worst = a
            .iter()
            .zip(&b)
            .fold(worst, |m, (u, v)| m.max((u - v).abs()));
    }
    Ok(worst)
}

fn reformulation_check(spec: &ReformulationCheckSpec, seed: u64) -> Result<Outcome> {
    let grid = spec.grid.build()?;
    let deviation = crate::schedule::verify_reformulation(&spec.model, &grid)?;
    let mut out = Outcome::default();
    out.checks.push(Check::at_most(
        format!("reformulation-{}", spec.model.name()),
        deviation,
        spec.threshold,
    ));
    let mut markov = None;
    if spec.markovian_states > 0 {
        if matches!(spec.model, ReformulationFamily::Edm) {
            return Err(Error::invalid(
                "the markovian comparison needs a bridge family (beta > 0)",
            ));
        }
        let gap = markovian_gap(&spec.model.schedule()?, spec.markovian_states, seed)?;
        out.checks.push(Check::at_most(
            "dbim-i2sb-eps-vs-markovian",
            gap,
            spec.markovian_tol,
        ));
        markov = Some(gap);
    }
    out.add_json(
        "reformulation.json",
        &json!({
            "family": spec.model.name(),
            "deviation": deviation,
            "threshold": spec.threshold,
            "markovian_deviation": markov,
        }),
    )?;
    out.add_json("checks.json", &out.checks.clone())?;
    Ok(out)
}
