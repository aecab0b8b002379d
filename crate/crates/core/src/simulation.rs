//! Synthetic data generator and the bias / MSE / coverage harness.

use nalgebra::{DMatrix, Matrix2, Matrix4, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use std::io::Write;

use rayon::prelude::*;

use crate::data::{DesignMeans, GroupLabel, StudyDataset, SubjectData};
use crate::dist::Ptmvn;
use crate::error::{Error, Result};
use crate::inference::{bootstrap, marginal_trajectory, percentile_bounds, replicate_config, trajectory_stream};
use crate::mcem::FitConfig;
use crate::model::piecewise_row;
use crate::params::ModelParameters;
use crate::rng::{derive_seed, stream};

/// Truth values used when a scenario does not override them. Only the
/// scenario values (n, π, μ_r) come from the published design; the rest are
/// chosen to resemble it and are echoed in every benchmark report.
pub fn default_truth(stable_rate: f64, re_mean: Vector4<f64>) -> ModelParameters {
    let sd = [0.15, 0.1, 0.15, 0.15];
    let mut re_cov = Matrix4::from_fn(|i, j| if i == j { sd[i] * sd[i] } else { 0.0 });
    let set = |m: &mut Matrix4<f64>, i: usize, j: usize, rho: f64| {
        m[(i, j)] = rho * sd[i] * sd[j];
        m[(j, i)] = m[(i, j)];
    };
    set(&mut re_cov, 0, 2, 0.2);
    set(&mut re_cov, 2, 3, -0.3);
    ModelParameters {
        stable_rate,
        tte_coef: nalgebra::DVector::from_vec(vec![0.3]),
        tte_sd: 0.5,
        re_mean,
        re_cov,
        long_coef: nalgebra::DVector::from_vec(vec![0.1]),
        long_sd: 0.05,
        stable_re_mean: Vector2::new(0.0, -0.3),
        stable_re_cov: Matrix2::new(0.01, 0.0, 0.0, 0.0225),
        stable_long_coef: nalgebra::DVector::from_vec(vec![0.1]),
        stable_long_sd: 0.05,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub truth: ModelParameters,
    /// Exponential censoring rate per year.
    pub censor_rate: f64,
    pub visit_spacing: f64,
    /// Scale of the half-normal visit jitter.
    pub visit_noise_sd: f64,
    pub max_visits: usize,
    pub replications: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn scenario(n: usize, stable_rate: f64, re_mean: Vector4<f64>) -> Self {
        Self {
            n,
            truth: default_truth(stable_rate, re_mean),
            censor_rate: 0.5,
            visit_spacing: 0.1,
            visit_noise_sd: 0.02,
            max_visits: 30,
            replications: 1,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        self.truth.validate().map_err(|e| Error::Config(format!("truth: {e}")))?;
        if self.truth.tte_coef.len() != 1 || self.truth.long_coef.len() != 1 || self.truth.stable_long_coef.len() != 1 {
            return fail("the generator uses one covariate per sub-model".into());
        }
        if !(self.censor_rate >= 0.0 && self.censor_rate.is_finite()) {
            return fail(format!("censor_rate must be non-negative, got {}", self.censor_rate));
        }
        if !(self.visit_spacing > 0.0) || !(self.visit_noise_sd >= 0.0) || self.max_visits == 0 {
            return fail("visit_spacing and max_visits must be positive, visit_noise_sd non-negative".into());
        }
        Ok(())
    }
}

/// Latent truth retained for oracle checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrueEffects {
    ChangePoint { omega: f64, b: Vector3<f64>, progression_time: f64 },
    Stable { b: Vector2<f64> },
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: StudyDataset,
    pub labels: Vec<GroupLabel>,
    pub effects: Vec<TrueEffects>,
    /// Subjects redrawn because their first visit still fell after the
    /// observed event time.
    pub regenerated: usize,
}

/// Visit times `|spacing · j - z_j|`, `z_j ~ |N(0, noise²)|`, j = 1..J.
pub fn visit_schedule<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Vec<f64> {
    (1..=config.max_visits)
        .map(|j| {
            let z: f64 = rng.sample::<f64, _>(StandardNormal).abs() * config.visit_noise_sd;
            (config.visit_spacing * j as f64 - z).abs()
        })
        .collect()
}

/// Visits kept for an observed time `t`, or `None` if the subject must be
/// redrawn.
fn observed_visits(schedule: &[f64], t: f64) -> Option<Vec<f64>> {
    let n = schedule.iter().rposition(|&s| s <= t).map_or(0, |j| j + 1);
    let visits: Vec<f64> = if n == 0 {
        vec![0.1 * schedule[0]]
    } else {
        schedule[..n].to_vec()
    };
    if visits[visits.len() - 1] > t || visits.windows(2).any(|w| w[1] <= w[0]) {
        return None;
    }
    Some(visits)
}

const MAX_REDRAWS: usize = 1000;

fn generate_subject<R: Rng + ?Sized>(
    id: String,
    config: &SimConfig,
    rng: &mut R,
) -> Result<(SubjectData, GroupLabel, TrueEffects, usize)> {
    let truth = &config.truth;
    let aft = Normal::new(0.0, truth.tte_sd).map_err(|e| Error::Config(e.to_string()))?;
    let y_cp = Normal::new(0.0, truth.long_sd).map_err(|e| Error::Config(e.to_string()))?;
    let y_st = Normal::new(0.0, truth.stable_long_sd).map_err(|e| Error::Config(e.to_string()))?;
    let stable_chol = truth
        .stable_re_cov
        .cholesky()
        .ok_or_else(|| Error::Factorization("stable_re_cov".into()))?
        .unpack();
    for redraw in 0..MAX_REDRAWS {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let progression = (w * truth.tte_coef[0] + aft.sample(rng)).exp();
        let stable = rng.random::<f64>() < truth.stable_rate;
        let t_star = if stable { f64::INFINITY } else { progression };
        let censor = if config.censor_rate > 0.0 {
            Exp::new(config.censor_rate).map_err(|e| Error::Config(e.to_string()))?.sample(rng)
        } else {
            f64::INFINITY
        };
        let (t, event) = if t_star <= censor { (t_star, true) } else { (censor, false) };
        if !t.is_finite() {
            return Err(Error::Config("stable subjects need a positive censoring rate".into()));
        }
        let effects = if stable {
            let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            TrueEffects::Stable {
                b: truth.stable_re_mean + stable_chol * z,
            }
        } else {
            let r = Ptmvn::new(truth.re_mean, truth.re_cov, 0.0, progression)?.sample(rng)?;
            TrueEffects::ChangePoint {
                omega: r[0],
                b: Vector3::new(r[1], r[2], r[3]),
                progression_time: progression,
            }
        };
        let schedule = visit_schedule(config, rng);
        let Some(visits) = observed_visits(&schedule, t) else {
            continue;
        };
        let y: Vec<f64> = visits
            .iter()
            .map(|&s| match effects {
                TrueEffects::Stable { b } => x * truth.stable_long_coef[0] + b[0] + b[1] * s + y_st.sample(rng),
                TrueEffects::ChangePoint { omega, b, .. } => {
                    let z = piecewise_row(s, omega);
                    x * truth.long_coef[0] + z[0] * b[0] + z[1] * b[1] + z[2] * b[2] + y_cp.sample(rng)
                }
            })
            .collect();
        let subject = SubjectData::new(id, visits, y, t, event, vec![x], vec![x], vec![w])?;
        let label = if stable { GroupLabel::Stable } else { GroupLabel::ChangePoint };
        return Ok((subject, label, effects, redraw));
    }
    Err(Error::Config(format!(
        "could not generate a valid subject in {MAX_REDRAWS} attempts"
    )))
}

/// Draws one synthetic study.
pub fn generate_dataset<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<SimulatedData> {
    config.validate()?;
    let width = config.n.to_string().len();
    let mut subjects = Vec::with_capacity(config.n);
    let mut labels = Vec::with_capacity(config.n);
    let mut effects = Vec::with_capacity(config.n);
    let mut regenerated = 0;
    for i in 0..config.n {
        let (s, l, e, r) = generate_subject(format!("S{:0width$}", i + 1), config, rng)?;
        subjects.push(s);
        labels.push(l);
        effects.push(e);
        regenerated += r;
    }
    if regenerated > 0 {
        log::info!("regenerated {regenerated} subjects whose first visit followed the event");
    }
    Ok(SimulatedData {
        dataset: StudyDataset::new(subjects)?,
        labels,
        effects,
        regenerated,
    })
}

/// Bias, MSE and coverage for one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub truth: f64,
    pub bias: f64,
    pub mse: f64,
    /// `None` when no intervals were supplied.
    pub cover: Option<f64>,
    pub replications: usize,
}

/// `Bias = |Σ(θ̂ - θ)| / B`, `MSE = Σ(θ̂ - θ)² / B`,
/// `Cover = Σ I(L ≤ θ ≤ U) / B`. `estimates[b][j]` is quantity `j` in
/// replication `b`; `cis` is empty or holds one `(lower, upper)` pair of
/// vectors per replication.
pub fn compute_metrics(names: &[String], truth: &[f64], estimates: &[Vec<f64>], cis: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<MetricRow>> {
    if estimates.is_empty() {
        return Err(Error::Metrics("no replications".into()));
    }
    let p = truth.len();
    if names.len() != p || estimates.iter().any(|e| e.len() != p) {
        return Err(Error::Metrics("estimate, truth and name lengths differ".into()));
    }
    if !cis.is_empty() && (cis.len() != estimates.len() || cis.iter().any(|(l, u)| l.len() != p || u.len() != p)) {
        return Err(Error::Metrics("interval count or width does not match the estimates".into()));
    }
    let b = estimates.len() as f64;
    Ok((0..p)
        .map(|j| {
            let err: Vec<f64> = estimates.iter().map(|e| e[j] - truth[j]).collect();
            let cover = (!cis.is_empty()).then(|| {
                cis.iter().filter(|(l, u)| l[j] <= truth[j] && truth[j] <= u[j]).count() as f64 / b
            });
            MetricRow {
                name: names[j].clone(),
                truth: truth[j],
                bias: err.iter().sum::<f64>().abs() / b,
                mse: err.iter().map(|e| e * e).sum::<f64>() / b,
                cover,
                replications: estimates.len(),
            }
        })
        .collect())
}

/// Per-visit mean and second moment of the visit schedule over `draws` draws.
pub fn visit_moments<R: Rng + ?Sized>(config: &SimConfig, draws: usize, rng: &mut R) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(config.max_visits, 2);
    for _ in 0..draws {
        for (j, s) in visit_schedule(config, rng).into_iter().enumerate() {
            acc[(j, 0)] += s;
            acc[(j, 1)] += s * s;
        }
    }
    acc / draws as f64
}

/// Mean outcome on `grid` over `subjects` patients simulated at `truth`
/// with covariates fixed at `means`. Measurement error averages out and is
/// left off.
pub fn simulated_trajectory<R: Rng + ?Sized>(
    truth: &ModelParameters,
    means: &DesignMeans,
    grid: &[f64],
    subjects: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if subjects == 0 {
        return Err(Error::Config("trajectory truth needs at least one subject".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let fixed_cp = dot(&means.long, truth.long_coef.as_slice());
    let fixed_stable = dot(&means.stable, truth.stable_long_coef.as_slice());
    let aft = Normal::new(dot(&means.tte, truth.tte_coef.as_slice()), truth.tte_sd).map_err(|e| Error::Config(e.to_string()))?;
    let stable_chol = truth
        .stable_re_cov
        .cholesky()
        .ok_or_else(|| Error::Factorization("stable_re_cov".into()))?
        .unpack();
    let mut sum = vec![0.0; grid.len()];
    for _ in 0..subjects {
        if rng.random::<f64>() < truth.stable_rate {
            let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let b = truth.stable_re_mean + stable_chol * z;
            for (acc, &s) in sum.iter_mut().zip(grid) {
                *acc += fixed_stable + b[0] + b[1] * s;
            }
        } else {
            let progression = aft.sample(rng).exp();
            let r = Ptmvn::new(truth.re_mean, truth.re_cov, 0.0, progression)?.sample(rng)?;
            for (acc, &s) in sum.iter_mut().zip(grid) {
                let z = piecewise_row(s, r[0]);
                *acc += fixed_cp + z[0] * r[1] + z[1] * r[2] + z[2] * r[3];
            }
        }
    }
    Ok(sum.into_iter().map(|v| v / subjects as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkOptions {
    /// Bootstrap replicates per fit; 0 skips intervals.
    pub bootstrap_replicates: usize,
    pub include_baseline: bool,
    /// Also bootstrap the baseline fits.
    pub bootstrap_baseline: bool,
    pub grid: Vec<f64>,
    pub trajectory_draws: usize,
    /// Simulated patients behind the trajectory truth.
    pub truth_subjects: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            bootstrap_replicates: 100,
            include_baseline: false,
            bootstrap_baseline: false,
            grid: crate::inference::default_grid(),
            trajectory_draws: 2000,
            truth_subjects: 100_000,
        }
    }
}

impl BenchmarkOptions {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap_replicates == 1 {
            return Err(Error::Config("bootstrap_replicates must be 0 or at least 2".into()));
        }
        if self.grid.is_empty() || self.grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("grid must be nonempty and finite".into()));
        }
        if self.trajectory_draws == 0 || self.truth_subjects == 0 {
            return Err(Error::Config("trajectory_draws and truth_subjects must be positive".into()));
        }
        Ok(())
    }
}

/// One model fitted to one simulated study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationFit {
    pub params: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub ci: Option<(Vec<f64>, Vec<f64>)>,
    /// Bootstrap standard deviation of each parameter.
    pub se: Option<Vec<f64>>,
    pub bootstrap_failures: usize,
    pub trajectory: Vec<f64>,
    pub trajectory_ci: Option<(Vec<f64>, Vec<f64>)>,
    pub loglik_trace: Vec<f64>,
    pub loglik_se_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub regenerated: usize,
    pub full: Option<ReplicationFit>,
    pub baseline: Option<ReplicationFit>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub parameters: Vec<MetricRow>,
    pub trajectory: Vec<MetricRow>,
    /// Replications that produced a fit (and intervals, when requested).
    pub used: usize,
    pub failures: usize,
    pub non_converged: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: SimConfig,
    pub fit_config: FitConfig,
    pub options: BenchmarkOptions,
    pub trajectory_truth: Vec<f64>,
    pub full: ModelMetrics,
    pub baseline: Option<ModelMetrics>,
    pub replications: Vec<Replication>,
}

const SIM_TAG: u64 = 0x5349_4d00;
const TRUTH_TAG: u64 = 0x5452_5554;

/// Population covariate means of the generator: every covariate is
/// standard normal.
pub fn population_means(truth: &ModelParameters) -> DesignMeans {
    DesignMeans {
        long: vec![0.0; truth.long_coef.len()],
        stable: vec![0.0; truth.stable_long_coef.len()],
        tte: vec![0.0; truth.tte_coef.len()],
    }
}

fn time_label(s: f64) -> String {
    format!("{}", (s * 1e9).round() / 1e9)
}

fn fit_one(
    data: &StudyDataset,
    config: &FitConfig,
    b: usize,
    seed: u64,
    options: &BenchmarkOptions,
    means: &DesignMeans,
) -> Result<ReplicationFit> {
    let fit = crate::mcem::fit(data, &FitConfig { seed, ..config.clone() })?;
    let traj_seed = derive_seed(seed, &[TRUTH_TAG]);
    let trajectory = marginal_trajectory(&fit.params, means, &options.grid, options.trajectory_draws, &mut trajectory_stream(traj_seed, u64::MAX))?.mean;
    let (ci, se, trajectory_ci, bootstrap_failures) = if b >= 2 {
        let boot = bootstrap(data, &replicate_config(config, &fit.params), b, derive_seed(seed, &[b as u64]))?;
        let curves: Vec<Vec<f64>> = boot
            .replicates
            .iter()
            .filter(|r| r.converged)
            .filter_map(|r| r.params.as_ref())
            .enumerate()
            .map(|(k, p)| {
                let mut rng = trajectory_stream(traj_seed, k as u64);
                marginal_trajectory(p, means, &options.grid, options.trajectory_draws, &mut rng).map(|t| t.mean)
            })
            .collect::<Result<_>>()?;
        let ci = (boot.ci_lower.to_vec(), boot.ci_upper.to_vec());
        (Some(ci), Some(boot.standard_errors()), Some(percentile_bounds(&curves)), boot.failures)
    } else {
        (None, None, None, 0)
    };
    Ok(ReplicationFit {
        params: fit.params.to_vec(),
        converged: fit.converged,
        iterations: fit.iterations_used,
        ci,
        se,
        bootstrap_failures,
        trajectory,
        trajectory_ci,
        loglik_trace: fit.loglik_trace,
        loglik_se_trace: fit.loglik_se_trace,
    })
}

fn replicate_study(index: usize, scenario: &SimConfig, fit_config: &FitConfig, options: &BenchmarkOptions, means: &DesignMeans) -> Replication {
    let seed = derive_seed(scenario.seed, &[SIM_TAG, index as u64]);
    let mut out = Replication { index, seed, regenerated: 0, full: None, baseline: None, errors: Vec::new() };
    let sim = match generate_dataset(scenario, &mut stream(seed, &[0])) {
        Ok(s) => s,
        Err(e) => {
            out.errors.push(format!("generate: {e}"));
            return out;
        }
    };
    out.regenerated = sim.regenerated;
    let full_config = FitConfig { baseline_mode: false, ..fit_config.clone() };
    match fit_one(&sim.dataset, &full_config, options.bootstrap_replicates, derive_seed(seed, &[1]), options, means) {
        Ok(f) => out.full = Some(f),
        Err(e) => out.errors.push(format!("full model: {e}")),
    }
    if options.include_baseline {
        let b = if options.bootstrap_baseline { options.bootstrap_replicates } else { 0 };
        let base_config = FitConfig { baseline_mode: true, ..fit_config.clone() };
        match fit_one(&sim.dataset, &base_config, b, derive_seed(seed, &[2]), options, means) {
            Ok(f) => out.baseline = Some(f),
            Err(e) => out.errors.push(format!("baseline: {e}")),
        }
    }
    for e in &out.errors {
        log::warn!("replication {index}: {e}");
    }
    log::info!("replication {index} done");
    out
}

fn model_metrics(model: &str, names: &[String], truth: &[f64], traj_truth: &[f64], grid: &[f64], fits: &[Option<&ReplicationFit>]) -> Result<ModelMetrics> {
    let with_ci = fits.iter().flatten().any(|f| f.ci.is_some());
    let usable: Vec<&ReplicationFit> = fits.iter().flatten().filter(|f| !with_ci || f.ci.is_some()).copied().collect();
    let failures = fits.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Metrics(format!("{model}: every replication failed")));
    }
    let estimates: Vec<Vec<f64>> = usable.iter().map(|f| f.params.clone()).collect();
    let cis: Vec<(Vec<f64>, Vec<f64>)> = usable.iter().filter_map(|f| f.ci.clone()).collect();
    let parameters = compute_metrics(names, truth, &estimates, &cis)?;
    let labels: Vec<String> = grid.iter().map(|&s| time_label(s)).collect();
    let curves: Vec<Vec<f64>> = usable.iter().map(|f| f.trajectory.clone()).collect();
    let bands: Vec<(Vec<f64>, Vec<f64>)> = usable.iter().filter_map(|f| f.trajectory_ci.clone()).collect();
    let trajectory = compute_metrics(&labels, traj_truth, &curves, &bands)?;
    Ok(ModelMetrics {
        model: model.into(),
        parameters,
        trajectory,
        used: usable.len(),
        failures,
        non_converged: usable.iter().filter(|f| !f.converged).count(),
    })
}

/// Simulates `scenario.replications` studies, fits each (and its baseline
/// when requested), and aggregates bias, MSE and bootstrap coverage for the
/// parameters and for the marginal trajectory. Estimated trajectories are
/// evaluated at the population covariate means, like the truth.
pub fn run_benchmark(scenario: &SimConfig, fit_config: &FitConfig, options: &BenchmarkOptions) -> Result<BenchmarkReport> {
    scenario.validate()?;
    fit_config.validate()?;
    options.validate()?;
    if scenario.replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    let truth = &scenario.truth;
    let means = population_means(truth);
    let trajectory_truth = simulated_trajectory(truth, &means, &options.grid, options.truth_subjects, &mut stream(scenario.seed, &[TRUTH_TAG]))?;
    let replications: Vec<Replication> = (0..scenario.replications)
        .into_par_iter()
        .map(|i| replicate_study(i, scenario, fit_config, options, &means))
        .collect();
    let names = truth.names();
    let truth_vec = truth.to_vec();
    let full_fits: Vec<Option<&ReplicationFit>> = replications.iter().map(|r| r.full.as_ref()).collect();
    let full = model_metrics("full", &names, &truth_vec, &trajectory_truth, &options.grid, &full_fits)?;
    let baseline = if options.include_baseline {
        let fits: Vec<Option<&ReplicationFit>> = replications.iter().map(|r| r.baseline.as_ref()).collect();
        Some(model_metrics("baseline", &names, &truth_vec, &trajectory_truth, &options.grid, &fits)?)
    } else {
        None
    };
    Ok(BenchmarkReport {
        scenario: scenario.clone(),
        fit_config: fit_config.clone(),
        options: options.clone(),
        trajectory_truth,
        full,
        baseline,
        replications,
    })
}

impl BenchmarkReport {
    /// `n=<n> pi=<π> mu_r=<a;b;c;d>`
    pub fn scenario_label(&self) -> String {
        let m = &self.scenario.truth.re_mean;
        format!("n={} pi={} mu_r={};{};{};{}", self.scenario.n, self.scenario.truth.stable_rate, m[0], m[1], m[2], m[3])
    }

    fn models(&self) -> impl Iterator<Item = &ModelMetrics> {
        std::iter::once(&self.full).chain(self.baseline.as_ref())
    }

    /// `parameter,scenario,model,truth,bias,mse,cover,replications`
    pub fn write_parameter_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_rows(writer, "parameter", &self.scenario_label(), self.models().map(|m| (&m.model, &m.parameters)))
    }

    /// Same columns with the grid time in place of the parameter name.
    pub fn write_trajectory_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_rows(writer, "time", &self.scenario_label(), self.models().map(|m| (&m.model, &m.trajectory)))
    }
}

fn write_rows<'a, W: Write>(writer: W, key: &str, scenario: &str, models: impl Iterator<Item = (&'a String, &'a Vec<MetricRow>)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([key, "scenario", "model", "truth", "bias", "mse", "cover", "replications"])?;
    for (model, rows) in models {
        for r in rows {
            let cover = r.cover.map(|c| c.to_string()).unwrap_or_default();
            w.write_record([
                r.name.as_str(),
                scenario,
                model.as_str(),
                &r.truth.to_string(),
                &r.bias.to_string(),
                &r.mse.to_string(),
                &cover,
                &r.replications.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: format!("<{key} metrics csv>").into(),
        source: e,
    })?;
    Ok(())
}
