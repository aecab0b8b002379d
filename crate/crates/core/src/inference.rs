//! Percentile bootstrap, marginal trajectories and treatment effects.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DesignMeans, StudyDataset, DAYS_PER_YEAR};
use crate::dist::{ConditionalB, TruncatedNormal1D};
use crate::error::{Error, Result};
use crate::mcem::{fit, DrawSchedule, FitConfig, FitResult};
use crate::model::piecewise_row;
use crate::params::ModelParameters;
use crate::rng::{derive_seed, stream};

const RESAMPLE_TAG: u64 = 0x5245_5341;
const FIT_TAG: u64 = 0x4649_5454;
const TRAJ_TAG: u64 = 0x5452_414a;

/// Fraction of failed replicates above which the result carries a warning.
pub const FAILURE_WARN_FRACTION: f64 = 0.2;

/// Default number of Monte Carlo draws for a marginal trajectory.
pub const DEFAULT_TRAJECTORY_DRAWS: usize = 100_000;

/// The time grid 0.1, 0.2, …, 2.0 years.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 10.0).collect()
}

/// Resamples `n` subjects with replacement. Copies get distinct ids
/// `<id>#<position>` so that every resampled subject draws its own stream.
pub fn resample<R: Rng + ?Sized>(dataset: &StudyDataset, rng: &mut R) -> Result<StudyDataset> {
    let subjects = dataset.subjects();
    let picked = (0..subjects.len())
        .map(|j| {
            let s = subjects.choose(rng).expect("dataset is never empty");
            s.relabeled(format!("{}#{j}", s.subject_id))
        })
        .collect();
    StudyDataset::new(picked)
}

/// Order-statistic percentile: the `⌈p·n⌉`-th smallest value (at least the
/// first). Sorting makes it independent of the input order.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

pub fn percentile_bounds(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows[0].len();
    (0..dim)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            (percentile(&col, 0.025), percentile(&col, 0.975))
        })
        .unzip()
}

/// Draws per subject in a bootstrap replicate.
pub const REPLICATE_DRAWS: usize = 100;

/// Fit settings for bootstrap replicates. Each replicate starts from the
/// full-data estimate with a fixed, modest draw count and no ESS redraw; the
/// stopping rule is the caller's, so replicates still travel the full
/// distance to their own optimum.
pub fn replicate_config(base: &FitConfig, estimate: &ModelParameters) -> FitConfig {
    FitConfig {
        init: Some(estimate.clone()),
        draws: DrawSchedule { initial: REPLICATE_DRAWS, growth: 1.0, ..base.draws.clone() },
        ess_floor: 0.0,
        ..base.clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapReplicate {
    pub index: usize,
    /// `None` when the fit stopped with an error.
    pub params: Option<ModelParameters>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: Vec<BootstrapReplicate>,
    pub ci_lower: ModelParameters,
    pub ci_upper: ModelParameters,
    /// Replicates that did not converge, including those that errored.
    pub failures: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl BootstrapResult {
    /// Converged replicate estimates as parameter vectors.
    pub fn converged_vectors(&self) -> Vec<Vec<f64>> {
        self.replicates
            .iter()
            .filter(|r| r.converged)
            .filter_map(|r| r.params.as_ref().map(ModelParameters::to_vec))
            .collect()
    }

    /// Standard deviation of each parameter over converged replicates.
    pub fn standard_errors(&self) -> Vec<f64> {
        column_sd(&self.converged_vectors())
    }
}

pub(crate) fn column_sd(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows.first().map_or(0, Vec::len))
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}

fn replicate_seeds(seed: u64, index: usize) -> (u64, u64) {
    (
        derive_seed(seed, &[RESAMPLE_TAG, index as u64]),
        derive_seed(seed, &[FIT_TAG, index as u64]),
    )
}

fn fit_replicate(dataset: &StudyDataset, config: &FitConfig, seed: u64, index: usize) -> (Option<FitResult>, Option<String>) {
    let (resample_seed, fit_seed) = replicate_seeds(seed, index);
    let mut rng = stream(resample_seed, &[]);
    let run = resample(dataset, &mut rng).and_then(|data| {
        let cfg = FitConfig {
            seed: fit_seed,
            ..config.clone()
        };
        fit(&data, &cfg)
    });
    match run {
        Ok(r) => (Some(r), None),
        Err(e) => {
            log::warn!("bootstrap replicate {index} failed: {e}");
            (None, Some(e.to_string()))
        }
    }
}

fn failure_warning(failures: usize, total: usize) -> Option<String> {
    (failures as f64 > FAILURE_WARN_FRACTION * total as f64)
        .then(|| format!("{failures} of {total} bootstrap replicates failed to converge"))
}

/// Percentile bootstrap over `b` resampled datasets, each fitted with
/// `config` (its seed replaced by a per-replicate one). Intervals use the
/// converged replicates only.
pub fn bootstrap(dataset: &StudyDataset, config: &FitConfig, b: usize, seed: u64) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::Config(format!("bootstrap needs at least 2 replicates, got {b}")));
    }
    config.validate()?;
    let runs: Vec<_> = (0..b)
        .into_par_iter()
        .map(|index| fit_replicate(dataset, config, seed, index))
        .collect();
    let replicates: Vec<BootstrapReplicate> = runs
        .into_iter()
        .enumerate()
        .map(|(index, (fit, error))| BootstrapReplicate {
            index,
            converged: fit.as_ref().is_some_and(|f| f.converged),
            iterations: fit.as_ref().map_or(0, |f| f.iterations_used),
            params: fit.map(|f| f.params),
            error,
        })
        .collect();
    let failures = replicates.iter().filter(|r| !r.converged).count();
    if failures == b {
        return Err(Error::Bootstrap(format!("all {b} bootstrap replicates failed")));
    }
    let rows: Vec<Vec<f64>> = replicates
        .iter()
        .filter(|r| r.converged)
        .filter_map(|r| r.params.as_ref().map(ModelParameters::to_vec))
        .collect();
    let (lo, hi) = percentile_bounds(&rows);
    let (p_tte, p_long, p_stable) = (dataset.p_tte(), dataset.p_long(), dataset.p_stable());
    Ok(BootstrapResult {
        ci_lower: ModelParameters::from_vec(&lo, p_tte, p_long, p_stable)?,
        ci_upper: ModelParameters::from_vec(&hi, p_tte, p_long, p_stable)?,
        replicates,
        failures,
        seed,
        warnings: failure_warning(failures, b).into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub stable: Vec<f64>,
    pub change_point: Vec<f64>,
    /// Monte Carlo standard error of `mean`.
    pub mc_se: Vec<f64>,
    pub stable_rate: f64,
    pub ci_lower: Option<Vec<f64>>,
    pub ci_upper: Option<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Population mean tumor burden over `grid` by Monte Carlo: `J` progression
/// times and random effects drawn once and evaluated at every grid point.
pub fn marginal_trajectory<R: Rng + ?Sized>(
    params: &ModelParameters,
    means: &DesignMeans,
    grid: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<TrajectoryEstimate> {
    if draws == 0 {
        return Err(Error::Config("trajectory needs at least one draw".into()));
    }
    if grid.is_empty() || grid.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("trajectory grid must be nonempty and finite".into()));
    }
    let pi = params.stable_rate;
    let fixed_cp = dot(&means.long, params.long_coef.as_slice());
    let fixed_stable = dot(&means.stable, params.stable_long_coef.as_slice());
    let stable: Vec<f64> = grid
        .iter()
        .map(|&s| fixed_stable + params.stable_re_mean[0] + params.stable_re_mean[1] * s)
        .collect();

    let cond = ConditionalB::new(&params.re_mean, &params.re_cov)?;
    let omega = TruncatedNormal1D::new(cond.mu_omega, cond.sd_omega, 0.0, f64::INFINITY)?.sampler();
    let aft = Normal::new(dot(&means.tte, params.tte_coef.as_slice()), params.tte_sd)
        .map_err(|e| Error::Domain(e.to_string()))?;
    let mut sum = vec![0.0; grid.len()];
    let mut sum_sq = vec![0.0; grid.len()];
    for _ in 0..draws {
        let t = aft.sample(rng);
        let w = omega.with_upper(t.exp())?.sample(rng)?;
        let b = cond.sample_at(w, rng);
        for (k, &s) in grid.iter().enumerate() {
            let z = piecewise_row(s, w);
            let v = z[0] * b[0] + z[1] * b[1] + z[2] * b[2];
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let j = draws as f64;
    let change_point: Vec<f64> = sum.iter().map(|v| fixed_cp + v / j).collect();
    let mc_se = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, q)| {
            let m = s / j;
            let var = if draws > 1 { (q / j - m * m).max(0.0) * j / (j - 1.0) } else { 0.0 };
            (1.0 - pi) * (var / j).sqrt()
        })
        .collect();
    let mean = stable
        .iter()
        .zip(&change_point)
        .map(|(st, cp)| pi * st + (1.0 - pi) * cp)
        .collect();
    Ok(TrajectoryEstimate {
        grid: grid.to_vec(),
        mean,
        stable,
        change_point,
        mc_se,
        stable_rate: pi,
        ci_lower: None,
        ci_upper: None,
    })
}

/// Pointwise `treatment − control`.
pub fn average_treatment_effect(treatment: &TrajectoryEstimate, control: &TrajectoryEstimate) -> Result<Vec<f64>> {
    if treatment.grid != control.grid {
        return Err(Error::Alignment("treatment and control trajectories use different grids".into()));
    }
    Ok(treatment.mean.iter().zip(&control.mean).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub grid: Vec<f64>,
    pub ate: Vec<f64>,
    pub ci_lower: Option<Vec<f64>>,
    pub ci_upper: Option<Vec<f64>>,
}

/// First grid times (years and days) of the two landmarks, `None` when never
/// reached on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    /// Arm bands stop overlapping.
    pub separation_years: Option<f64>,
    pub separation_days: Option<f64>,
    /// Upper ATE bound drops below zero.
    pub significance_years: Option<f64>,
    pub significance_days: Option<f64>,
}

/// Extracts the landmarks from per-arm bands and the ATE band.
pub fn landmarks(grid: &[f64], treatment: (&[f64], &[f64]), control: (&[f64], &[f64]), ate_upper: &[f64]) -> Landmarks {
    let separation = (0..grid.len())
        .find(|&k| treatment.1[k] < control.0[k] || control.1[k] < treatment.0[k])
        .map(|k| grid[k]);
    let significance = (0..grid.len()).find(|&k| ate_upper[k] < 0.0).map(|k| grid[k]);
    Landmarks {
        separation_years: separation,
        separation_days: separation.map(|t| t * DAYS_PER_YEAR),
        significance_years: significance,
        significance_days: significance.map(|t| t * DAYS_PER_YEAR),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmTrajectory {
    pub arm: String,
    pub fit: FitResult,
    pub trajectory: TrajectoryEstimate,
    /// Replicates that contributed to the band.
    pub replicates_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryCi {
    pub arms: Vec<ArmTrajectory>,
    /// Present with two arms; the first arm is the treatment arm.
    pub ate: Option<AteEstimate>,
    pub landmarks: Option<Landmarks>,
    pub replicates: usize,
    pub draws: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryOptions {
    pub replicates: usize,
    pub draws: usize,
    /// Start each replicate fit from its arm's full-data estimate.
    pub warm_start: bool,
    pub seed: u64,
}

/// Both arms draw from the same stream, so the ATE carries common random
/// numbers and identical arms give an exactly zero effect.
pub fn trajectory_stream(seed: u64, replicate: u64) -> rand_chacha::ChaCha8Rng {
    stream(seed, &[TRAJ_TAG, replicate])
}

/// Fits each arm, evaluates its trajectory, and builds percentile bands from
/// `replicates` bootstrap refits per arm. Arms are resampled independently;
/// the ATE band pairs the two arms' replicates by index.
pub fn trajectory_ci(arms: &[(String, StudyDataset)], config: &FitConfig, grid: &[f64], options: TrajectoryOptions) -> Result<TrajectoryCi> {
    let fitted = arms
        .iter()
        .enumerate()
        .map(|(a, (name, data))| {
            let seed = derive_seed(options.seed, &[a as u64]);
            Ok((name.clone(), data.clone(), fit(data, &FitConfig { seed, ..config.clone() })?))
        })
        .collect::<Result<Vec<_>>>()?;
    trajectory_ci_from_fits(&fitted, config, grid, options)
}

/// As [`trajectory_ci`], with the full-data fit of each arm supplied.
pub fn trajectory_ci_from_fits(arms: &[(String, StudyDataset, FitResult)], config: &FitConfig, grid: &[f64], options: TrajectoryOptions) -> Result<TrajectoryCi> {
    if arms.is_empty() || arms.len() > 2 {
        return Err(Error::Config(format!("trajectory needs one or two arms, got {}", arms.len())));
    }
    if options.replicates < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 replicates, got {}",
            options.replicates
        )));
    }
    let seed = options.seed;
    let mut out = Vec::new();
    let mut curves: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    let mut warnings = Vec::new();
    for (a, (name, data, full)) in arms.iter().enumerate() {
        let arm_seed = derive_seed(seed, &[a as u64]);
        let point = marginal_trajectory(&full.params, &full.design_means, grid, options.draws, &mut trajectory_stream(seed, u64::MAX))?;
        let rep_config = if options.warm_start { replicate_config(config, &full.params) } else { config.clone() };
        let reps: Vec<Option<Vec<f64>>> = (0..options.replicates)
            .into_par_iter()
            .map(|b| {
                let (fit, _) = fit_replicate(data, &rep_config, arm_seed, b);
                let fit = fit.filter(|f| f.converged)?;
                match marginal_trajectory(&fit.params, &fit.design_means, grid, options.draws, &mut trajectory_stream(seed, b as u64)) {
                    Ok(t) => Some(t.mean),
                    Err(e) => {
                        log::warn!("arm {name} replicate {b}: trajectory failed: {e}");
                        None
                    }
                }
            })
            .collect();
        let good: Vec<Vec<f64>> = reps.iter().flatten().cloned().collect();
        let failures = options.replicates - good.len();
        if good.is_empty() {
            return Err(Error::Bootstrap(format!("all replicates failed for arm {name}")));
        }
        if let Some(w) = failure_warning(failures, options.replicates) {
            warnings.push(format!("arm {name}: {w}"));
        }
        let (lo, hi) = percentile_bounds(&good);
        out.push(ArmTrajectory {
            arm: name.clone(),
            trajectory: TrajectoryEstimate {
                ci_lower: Some(lo),
                ci_upper: Some(hi),
                ..point
            },
            fit: full.clone(),
            replicates_used: good.len(),
            failures,
        });
        curves.push(reps);
    }

    let (ate, marks) = if out.len() == 2 {
        let paired: Vec<Vec<f64>> = curves[0]
            .iter()
            .zip(&curves[1])
            .filter_map(|(t, c)| Some(t.as_ref()?.iter().zip(c.as_ref()?).map(|(a, b)| a - b).collect()))
            .collect();
        if paired.is_empty() {
            return Err(Error::Bootstrap("no replicate converged in both arms".into()));
        }
        let (lo, hi) = percentile_bounds(&paired);
        let (t, c) = (&out[0].trajectory, &out[1].trajectory);
        let band = |x: &TrajectoryEstimate| (x.ci_lower.clone().unwrap_or_default(), x.ci_upper.clone().unwrap_or_default());
        let (tb, cb) = (band(t), band(c));
        let marks = landmarks(grid, (&tb.0, &tb.1), (&cb.0, &cb.1), &hi);
        let ate = AteEstimate {
            grid: grid.to_vec(),
            ate: average_treatment_effect(t, c)?,
            ci_lower: Some(lo),
            ci_upper: Some(hi),
        };
        (Some(ate), Some(marks))
    } else {
        (None, None)
    };
    Ok(TrajectoryCi {
        arms: out,
        ate,
        landmarks: marks,
        replicates: options.replicates,
        draws: options.draws,
        seed,
        warnings,
    })
}

/// Writes `time[,days],mean,lo,hi`; missing bands are left empty.
pub fn write_trajectory_csv<W: Write>(traj: &TrajectoryEstimate, days: bool, writer: W) -> Result<()> {
    let rows = traj
        .grid
        .iter()
        .enumerate()
        .map(|(k, _)| [Some(traj.mean[k]), traj.ci_lower.as_ref().map(|v| v[k]), traj.ci_upper.as_ref().map(|v| v[k])]);
    write_grid_csv(&traj.grid, days, ["mean", "lo", "hi"], rows, writer)
}

/// Writes `time[,days],ate,lo,hi`.
pub fn write_ate_csv<W: Write>(ate: &AteEstimate, days: bool, writer: W) -> Result<()> {
    let rows = ate
        .grid
        .iter()
        .enumerate()
        .map(|(k, _)| [Some(ate.ate[k]), ate.ci_lower.as_ref().map(|v| v[k]), ate.ci_upper.as_ref().map(|v| v[k])]);
    write_grid_csv(&ate.grid, days, ["ate", "lo", "hi"], rows, writer)
}

fn write_grid_csv<W: Write>(grid: &[f64], days: bool, names: [&str; 3], rows: impl Iterator<Item = [Option<f64>; 3]>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["time"];
    if days {
        header.push("days");
    }
    header.extend(names);
    w.write_record(&header)?;
    for (s, vals) in grid.iter().zip(rows) {
        let mut row = vec![s.to_string()];
        if days {
            row.push((s * DAYS_PER_YEAR).to_string());
        }
        row.extend(vals.iter().map(|v| v.map_or(String::new(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<grid csv>".into(),
        source: e,
    })?;
    Ok(())
}
