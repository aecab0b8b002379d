//! Monte Carlo EM driver.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::data::{DesignMeans, StudyDataset, SubjectData};
use crate::error::{Error, Result};
use crate::estep::{run_estep, EStepConfig};
use crate::model::piecewise_row;
use crate::mstep::{m_step, LbfgsConfig, MStepConfig};
use crate::params::ModelParameters;

pub use crate::estep::observed_loglik;

/// Draws per subject as a function of the EM iteration: `initial` for the
/// first `every` iterations, then multiplied by `growth` every `every`
/// iterations, never above `cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawSchedule {
    pub initial: usize,
    pub growth: f64,
    pub every: usize,
    pub cap: usize,
}

impl Default for DrawSchedule {
    fn default() -> Self {
        Self {
            initial: 200,
            growth: 1.5,
            every: 10,
            cap: 5000,
        }
    }
}

impl DrawSchedule {
    /// Stage index (0-based) of a 1-based iteration.
    pub fn stage(&self, iteration: usize) -> usize {
        iteration.saturating_sub(1) / self.every.max(1)
    }

    pub fn draws(&self, iteration: usize) -> usize {
        let k = self.initial as f64 * self.growth.powi(self.stage(iteration) as i32);
        (k.round() as usize).min(self.cap).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_em_iter: usize,
    /// No convergence is declared before this many M-steps.
    pub min_em_iter: usize,
    pub draws: DrawSchedule,
    /// Bound on `|Δθ_j| / (|θ_j| + rel_offset)` over every parameter, which
    /// must hold for `window` consecutive iterations.
    pub rel_tol: f64,
    pub rel_offset: f64,
    pub window: usize,
    pub seed: u64,
    pub baseline_mode: bool,
    /// Reuse each subject's random stream at every iteration. Draws are
    /// nested: a larger draw count extends the smaller one's sample.
    pub common_random_numbers: bool,
    pub ess_floor: f64,
    pub redraw_factor: usize,
    pub lbfgs: LbfgsConfig,
    /// Starting values; the data-driven initializer is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<ModelParameters>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_em_iter: 100,
            min_em_iter: 5,
            draws: DrawSchedule::default(),
            rel_tol: 5e-3,
            rel_offset: 1e-2,
            window: 3,
            seed: 1,
            baseline_mode: false,
            common_random_numbers: true,
            ess_floor: 0.1,
            redraw_factor: 4,
            lbfgs: LbfgsConfig::default(),
            init: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.max_em_iter < 1 {
            return fail("max_em_iter must be at least 1");
        }
        if self.draws.initial < 1 || self.draws.cap < 1 || self.draws.every < 1 {
            return fail("draws.initial, draws.cap and draws.every must be at least 1");
        }
        if !(self.draws.growth >= 1.0) {
            return fail("draws.growth must be at least 1 so the draw count never decreases");
        }
        if !(self.rel_tol > 0.0) || !(self.rel_offset >= 0.0) {
            return fail("rel_tol must be positive and rel_offset non-negative");
        }
        if self.window < 1 {
            return fail("window must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.ess_floor) || self.redraw_factor < 1 {
            return fail("ess_floor must lie in [0, 1] and redraw_factor be at least 1");
        }
        self.lbfgs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub draws: usize,
    pub min_ess: f64,
    pub median_ess: f64,
    /// Largest relative parameter change produced by this iteration's M-step.
    pub max_rel_change: f64,
    pub max_rel_param: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParameters,
    pub loglik_trace: Vec<f64>,
    pub loglik_se_trace: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    pub seed: u64,
    pub n_subjects: usize,
    pub design_means: DesignMeans,
    pub config: FitConfig,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

const MAX_WARNINGS: usize = 200;

fn solve_ls(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    if x.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    (x.transpose() * x).cholesky().map(|c| c.solve(&(x.transpose() * y)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pooled regression of `y` on a visit-level design built by `row`, with
/// the subject's baseline covariates appended.
fn pooled_fit<'a>(
    subjects: impl Iterator<Item = &'a SubjectData>,
    covariates: fn(&SubjectData) -> &[f64],
    row: impl Fn(&SubjectData, f64) -> Vec<f64>,
) -> Option<(DVector<f64>, f64)> {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut width = 0;
    for s in subjects {
        for (&t, &y) in s.visit_times().iter().zip(s.outcomes()) {
            let mut r = row(s, t);
            r.extend_from_slice(covariates(s));
            width = r.len();
            rows.extend(r);
            ys.push(y);
        }
    }
    if ys.len() <= width {
        return None;
    }
    let x = DMatrix::from_row_slice(ys.len(), width, &rows);
    let y = DVector::from_vec(ys);
    let coef = solve_ls(&x, &y)?;
    let resid = &y - &x * &coef;
    Some((coef, resid.norm_squared() / (y.len() - width) as f64))
}

/// Time of the lowest outcome, the crude change point of a subject.
fn nadir_time(s: &SubjectData) -> f64 {
    let (j, _) = s
        .outcomes()
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("subjects have at least one visit");
    s.visit_times()[j]
}

/// Per-subject least squares on `(1, Δ⁻, Δ⁺)` at the subject's nadir.
fn subject_piecewise(s: &SubjectData, shift: f64) -> Option<([f64; 4], f64)> {
    let n = s.n_visits();
    if n < 5 {
        return None;
    }
    let omega = nadir_time(s).max(1e-3);
    let x = DMatrix::from_fn(n, 3, |j, k| piecewise_row(s.visit_times()[j], omega)[k]);
    let y = DVector::from_iterator(n, s.outcomes().iter().map(|v| v - shift));
    let c = solve_ls(&x, &y)?;
    let r = &y - &x * &c;
    Some(([omega, c[0], c[1], c[2]], r.norm_squared() / (n - 3) as f64))
}

fn subject_line(s: &SubjectData, shift: f64) -> Option<([f64; 2], f64)> {
    let n = s.n_visits();
    if n < 3 {
        return None;
    }
    let x = DMatrix::from_fn(n, 2, |j, k| if k == 0 { 1.0 } else { s.visit_times()[j] });
    let y = DVector::from_iterator(n, s.outcomes().iter().map(|v| v - shift));
    let c = solve_ls(&x, &y)?;
    let r = &y - &x * &c;
    Some(([c[0], c[1]], r.norm_squared() / (n - 2) as f64))
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Crude data-driven starting values: regressions for the fixed effects,
/// subject-level fits for the random-effect scales.
pub fn initialize_params(dataset: &StudyDataset, baseline_mode: bool) -> Result<ModelParameters> {
    let events: Vec<&SubjectData> = dataset.subjects().iter().filter(|s| s.event_indicator).collect();
    let censored: Vec<&SubjectData> = dataset.subjects().iter().filter(|s| !s.event_indicator).collect();
    if events.is_empty() {
        return Err(Error::Initialization(
            "no event subjects; the event-time model is not identifiable".into(),
        ));
    }

    // Event-time regression on the observed events.
    let p_tte = dataset.p_tte();
    let w = DMatrix::from_fn(events.len(), p_tte, |i, j| events[i].tte_covariates[j]);
    let lt = DVector::from_iterator(events.len(), events.iter().map(|s| s.event_time.ln()));
    let tte_coef = solve_ls(&w, &lt)
        .ok_or_else(|| Error::Initialization("event-time covariates are collinear among events".into()))?;
    let tte_var = (&lt - &w * &tte_coef).norm_squared() / (events.len().saturating_sub(p_tte)).max(1) as f64;

    // Change-point group: pooled two-piece fit at the median nadir time.
    let mu_omega = median(events.iter().map(|s| nadir_time(s)).collect()).max(0.05);
    let (cp_coef, cp_var) = pooled_fit(events.iter().copied(), |s| &s.long_covariates, |_, t| {
        piecewise_row(t, mu_omega).to_vec()
    })
    .or_else(|| pooled_fit(dataset.subjects().iter(), |s| &s.long_covariates, |_, _| Vec::new()).map(|(c, v)| {
        let mut full = vec![0.0; 3];
        full.extend(c.iter());
        (DVector::from_vec(full), v)
    }))
    .ok_or_else(|| Error::Initialization("too few longitudinal observations".into()))?;
    let long_coef = cp_coef.rows(3, dataset.p_long()).into_owned();

    let fits: Vec<([f64; 4], f64)> = events
        .iter()
        .filter_map(|s| subject_piecewise(s, dot(&s.long_covariates, &long_coef)))
        .collect();
    let long_var = if fits.len() >= 3 {
        median(fits.iter().map(|f| f.1).collect())
    } else {
        0.25 * cp_var
    };
    let prior_sd = [mu_omega * 0.5, 0.1, 0.25, 0.25];
    let mut re_cov = Matrix4::zeros();
    for k in 0..4 {
        let column: Vec<f64> = fits.iter().map(|f| f.0[k]).collect();
        let v = 0.25 * variance(&column);
        re_cov[(k, k)] = if v.is_finite() && v > 1e-6 { v } else { prior_sd[k].powi(2) };
    }
    let re_mean = Vector4::new(mu_omega, cp_coef[0], cp_coef[1], cp_coef[2]);

    // Stable group: lines through the censored trajectories.
    let stable_pool: Vec<&SubjectData> = if censored.is_empty() { dataset.subjects().iter().collect() } else { censored.clone() };
    let (st_coef, st_var) = pooled_fit(stable_pool.iter().copied(), |s| &s.stable_covariates, |_, t| vec![1.0, t])
        .ok_or_else(|| Error::Initialization("too few observations for the stable-group model".into()))?;
    let stable_long_coef = st_coef.rows(2, dataset.p_stable()).into_owned();
    let lines: Vec<([f64; 2], f64)> = stable_pool
        .iter()
        .filter_map(|s| subject_line(s, dot(&s.stable_covariates, &stable_long_coef)))
        .collect();
    let stable_long_var = if lines.len() >= 3 { median(lines.iter().map(|f| f.1).collect()) } else { 0.25 * st_var };
    let mut stable_re_cov = Matrix2::zeros();
    for k in 0..2 {
        let column: Vec<f64> = lines.iter().map(|f| f.0[k]).collect();
        let v = 0.25 * variance(&column);
        stable_re_cov[(k, k)] = if v.is_finite() && v > 1e-6 { v } else { 0.01 };
    }

    let censor_fraction = censored.len() as f64 / dataset.len() as f64;
    let floor = |v: f64| v.max(1e-6);
    let params = ModelParameters {
        stable_rate: if baseline_mode { 0.0 } else { 0.5 * censor_fraction },
        tte_coef,
        tte_sd: floor(tte_var).sqrt(),
        re_mean,
        re_cov,
        long_coef,
        long_sd: floor(long_var).sqrt(),
        stable_re_mean: Vector2::new(st_coef[0], st_coef[1]),
        stable_re_cov,
        stable_long_coef,
        stable_long_sd: floor(stable_long_var).sqrt(),
    };
    params.validate()?;
    Ok(params)
}

/// Largest relative change and the name of the parameter attaining it.
fn max_rel_change(prev: &ModelParameters, next: &ModelParameters, offset: f64) -> (f64, String) {
    let (mut best, mut at) = (0.0, 0);
    for (j, (a, b)) in prev.to_vec().iter().zip(next.to_vec()).enumerate() {
        let r = (b - a).abs() / (a.abs() + offset);
        if r > best {
            (best, at) = (r, j);
        }
    }
    (best, prev.names().swap_remove(at))
}

/// Moving averages (and their standard errors) of `window` consecutive
/// entries, for the last two windows of the trace.
fn trend_ok(trace: &[f64], se: &[f64], window: usize) -> bool {
    let n = trace.len();
    if n < window + 1 {
        return false;
    }
    let avg = |lo: usize| trace[lo..lo + window].iter().sum::<f64>() / window as f64;
    let var = |lo: usize| se[lo..lo + window].iter().map(|s| s * s).sum::<f64>() / (window * window) as f64;
    let (a, b) = (avg(n - window - 1), avg(n - window));
    b - a >= -2.0 * (var(n - window - 1) + var(n - window)).sqrt()
}

/// Fits the model by MCEM.
///
/// Iteration `k` runs an E-step at the current parameters (its likelihood
/// estimate closes out iteration `k - 1`), checks convergence, then runs
/// the M-step. One final E-step evaluates the last update, so the
/// likelihood trace has one entry per M-step.
pub fn fit(dataset: &StudyDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let mut params = match &config.init {
        Some(p) => {
            p.validate()?;
            let mut p = p.clone();
            if config.baseline_mode {
                p.stable_rate = 0.0;
            }
            p
        }
        None => initialize_params(dataset, config.baseline_mode)?,
    };
    let mconfig = MStepConfig {
        lbfgs: config.lbfgs.clone(),
        baseline: config.baseline_mode,
    };

    let mut trace = Vec::new();
    let mut se_trace = Vec::new();
    let mut diagnostics: Vec<IterationDiagnostics> = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;

    for iteration in 1..=config.max_em_iter + 1 {
        // The final pass only evaluates the last update.
        let k = config.draws.draws(iteration.min(config.max_em_iter));
        let stream = if config.common_random_numbers {
            0
        } else {
            iteration as u64
        };
        let econfig = EStepConfig {
            draws: k,
            ess_floor: config.ess_floor,
            redraw_factor: config.redraw_factor,
        };
        let stats = run_estep(dataset, &params, &econfig, config.seed, stream).map_err(|e| e.at_iteration(iteration))?;
        if iteration > 1 {
            trace.push(stats.loglik);
            se_trace.push(stats.loglik_se);
            let m = trace.len();
            let small = m >= config.min_em_iter
                && m >= config.window
                && diagnostics[m - config.window..].iter().all(|d| d.max_rel_change < config.rel_tol);
            if small && trend_ok(&trace, &se_trace, config.window) {
                converged = true;
                break;
            }
        }
        if iteration > config.max_em_iter {
            break;
        }
        let out = m_step(dataset, &stats, &params, &mconfig).map_err(|e| e.at_iteration(iteration))?;
        for w in out.warnings {
            if warnings.len() < MAX_WARNINGS {
                warnings.push(format!("iteration {iteration}: {w}"));
            }
        }
        let (rel, rel_param) = max_rel_change(&params, &out.params, config.rel_offset);
        diagnostics.push(IterationDiagnostics {
            iteration,
            draws: k,
            min_ess: stats.min_ess,
            median_ess: stats.median_ess,
            max_rel_change: rel,
            max_rel_param: rel_param,
        });
        log::debug!(
            "iteration {iteration}: K = {k}, loglik = {:.4}, max rel change = {:.2e}",
            stats.loglik,
            diagnostics.last().map_or(0.0, |d| d.max_rel_change)
        );
        params = out.params;
    }
    if !converged {
        warnings.push(format!(
            "no convergence within {} iterations (rel_tol = {:e})",
            config.max_em_iter, config.rel_tol
        ));
    }

    Ok(FitResult {
        params,
        iterations_used: trace.len(),
        loglik_trace: trace,
        loglik_se_trace: se_trace,
        converged,
        seed: config.seed,
        n_subjects: dataset.len(),
        design_means: dataset.design_means(),
        config: config.clone(),
        diagnostics,
        warnings,
    })
}
