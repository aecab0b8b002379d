//! Monte Carlo E-step.
//!
//! For the change-point group the proposal draws `(t*, ω)` from their model
//! conditionals and weights each draw by `f(y | ω)`:
//!
//! * event subjects: `t* = t` is observed, `ω ~ N(μ_ω, σ_ω²)` on `(0, e^t)`;
//! * censored subjects: `t* ~ N(wᵀγ, σ_tte²)` on `(t, ∞)`, then `ω` as above.
//!
//! The mean unnormalized weight estimates the change-point evidence (times
//! `S_T(t)` for censored subjects), which feeds the stable-group
//! responsibility. Given `ω`, the posterior of `b` is Gaussian and is kept
//! exactly rather than sampled.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{StudyDataset, SubjectData};
use crate::dist::{log_sum_exp, lognormal_aft_logdensity, lognormal_aft_logsurvival, ConditionalB, TruncatedNormal1D};
use crate::error::{Error, Result};
use crate::model::{stable_b_posterior, stable_marginal_loglik, BPosterior, CpKernel, StablePosterior};
use crate::params::ModelParameters;
use crate::rng::subject_stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedDraw {
    /// Log event time: observed for events, sampled for censored subjects.
    pub t_star: f64,
    pub omega: f64,
    pub weight: f64,
    pub b_post: BPosterior,
}

/// Output of one subject's change-point importance sampler.
#[derive(Debug, Clone)]
pub struct CpSample {
    pub draws: Vec<WeightedDraw>,
    /// Log of the change-point evidence estimate.
    pub log_evidence: f64,
    pub ess: f64,
    /// Estimated variance of `log_evidence` (delta method).
    pub log_evidence_var: f64,
}

#[derive(Debug, Clone)]
pub struct SubjectStats {
    /// `E[Δ_i]`; exactly 0 for event subjects.
    pub responsibility: f64,
    pub draws: Vec<WeightedDraw>,
    pub stable_post: Option<StablePosterior>,
    pub ess: f64,
    /// Observed-data log-likelihood contribution at the E-step parameters.
    pub loglik: f64,
    pub loglik_var: f64,
}

#[derive(Debug, Clone)]
pub struct EStepStats {
    pub subjects: Vec<SubjectStats>,
    pub draws_requested: usize,
    pub min_ess: f64,
    pub median_ess: f64,
    /// Monte Carlo estimate of the observed-data log-likelihood.
    pub loglik: f64,
    pub loglik_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepConfig {
    pub draws: usize,
    /// Redraw a subject at `redraw_factor × draws` when its ESS falls below
    /// `ess_floor × draws`.
    pub ess_floor: f64,
    pub redraw_factor: usize,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            draws: 500,
            ess_floor: 0.1,
            redraw_factor: 4,
        }
    }
}

/// Posterior probability that a censored subject is in the stable group.
pub fn responsibility(subject: &SubjectData, params: &ModelParameters, evidence_cp: f64) -> Result<f64> {
    if subject.event_indicator {
        return Ok(0.0);
    }
    let pi = params.stable_rate;
    if pi == 0.0 {
        return Ok(0.0);
    }
    let stable = stable_marginal_loglik(subject, params)?;
    responsibility_from_evidence(&subject.subject_id, pi, stable, evidence_cp)
}

pub(crate) fn responsibility_from_evidence(id: &str, pi: f64, log_stable: f64, log_cp: f64) -> Result<f64> {
    let a = pi.ln() + log_stable;
    let b = (1.0 - pi).ln() + log_cp;
    let total = log_sum_exp(&[a, b]);
    if total == f64::NEG_INFINITY || total.is_nan() {
        return Err(Error::Degenerate {
            subject: id.to_string(),
            message: "both group evidences are zero".into(),
        });
    }
    Ok((a - total).exp().clamp(0.0, 1.0))
}

fn finish(subject: &SubjectData, mut draws: Vec<WeightedDraw>, log_lik: Vec<f64>, log_offset: f64) -> Result<CpSample> {
    let k = draws.len() as f64;
    let max = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate {
            subject: subject.subject_id.clone(),
            message: "all importance weights underflow; increase the draw count or reset parameters".into(),
        });
    }
    let raw: Vec<f64> = log_lik.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let mut sum_sq = 0.0;
    for (d, r) in draws.iter_mut().zip(&raw) {
        d.weight = r / total;
        sum_sq += d.weight * d.weight;
    }
    let ess = 1.0 / sum_sq;
    Ok(CpSample {
        draws,
        log_evidence: max + (total / k).ln() + log_offset,
        ess,
        log_evidence_var: ((k * sum_sq - 1.0) / k).max(0.0),
    })
}

fn omega_law(cond: &ConditionalB, log_upper: f64) -> Result<TruncatedNormal1D> {
    TruncatedNormal1D::new(cond.mu_omega, cond.sd_omega, 0.0, log_upper.exp())
}

fn event_draws<R: Rng + ?Sized>(
    subject: &SubjectData,
    params: &ModelParameters,
    cond: &ConditionalB,
    k: usize,
    rng: &mut R,
) -> Result<CpSample> {
    let t = subject.log_event_time()?;
    let kernel = CpKernel::new(subject, params, cond);
    let law = omega_law(cond, t)?.sampler();
    let mut draws = Vec::with_capacity(k);
    let mut log_lik = Vec::with_capacity(k);
    for _ in 0..k {
        let omega = law.sample(rng)?;
        let (ll, b_post) = kernel.eval(omega)?;
        draws.push(WeightedDraw {
            t_star: t,
            omega,
            weight: 0.0,
            b_post,
        });
        log_lik.push(ll);
    }
    finish(subject, draws, log_lik, 0.0)
}

fn censored_draws<R: Rng + ?Sized>(
    subject: &SubjectData,
    params: &ModelParameters,
    cond: &ConditionalB,
    k: usize,
    rng: &mut R,
) -> Result<CpSample> {
    let t = subject.log_event_time()?;
    let loc: f64 = subject
        .tte_covariates
        .iter()
        .zip(params.tte_coef.iter())
        .map(|(a, b)| a * b)
        .sum();
    let tail = TruncatedNormal1D::new(loc, params.tte_sd, t, f64::INFINITY)?.sampler();
    let omega_base = omega_law(cond, f64::INFINITY)?.sampler();
    let log_surv = lognormal_aft_logsurvival(subject.event_time, &subject.tte_covariates, params.tte_coef.as_slice(), params.tte_sd)?;
    if log_surv == f64::NEG_INFINITY {
        return Err(Error::Sampling(format!(
            "event-time tail beyond the censoring time underflows for subject {}",
            subject.subject_id
        )));
    }
    let kernel = CpKernel::new(subject, params, cond);
    let mut draws = Vec::with_capacity(k);
    let mut log_lik = Vec::with_capacity(k);
    for _ in 0..k {
        let t_star = tail.sample(rng).map_err(|e| match e {
            Error::Sampling(m) => Error::Sampling(format!("subject {}: {m}", subject.subject_id)),
            other => other,
        })?;
        let omega = omega_base.with_upper(t_star.exp())?.sample(rng)?;
        let (ll, b_post) = kernel.eval(omega)?;
        draws.push(WeightedDraw {
            t_star,
            omega,
            weight: 0.0,
            b_post,
        });
        log_lik.push(ll);
    }
    finish(subject, draws, log_lik, log_surv)
}

/// Importance sample for an event subject. `exp(log_evidence)` estimates
/// `∫ f(y | ω) f(ω | t) dω`.
pub fn event_expectations<R: Rng + ?Sized>(
    subject: &SubjectData,
    params: &ModelParameters,
    k: usize,
    rng: &mut R,
) -> Result<CpSample> {
    check_draws(k)?;
    if !subject.event_indicator {
        return Err(Error::Domain(format!("subject {} is censored", subject.subject_id)));
    }
    let cond = ConditionalB::new(&params.re_mean, &params.re_cov)?;
    event_draws(subject, params, &cond, k, rng)
}

/// Importance sample for a censored subject. `exp(log_evidence)` estimates
/// `P(t* > t, y | Δ = 0)`.
pub fn censored_expectations<R: Rng + ?Sized>(
    subject: &SubjectData,
    params: &ModelParameters,
    k: usize,
    rng: &mut R,
) -> Result<CpSample> {
    check_draws(k)?;
    if subject.event_indicator {
        return Err(Error::Domain(format!("subject {} had an event", subject.subject_id)));
    }
    let cond = ConditionalB::new(&params.re_mean, &params.re_cov)?;
    censored_draws(subject, params, &cond, k, rng)
}

fn check_draws(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::Config("draw count must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn subject_estep(
    subject: &SubjectData,
    params: &ModelParameters,
    cond: &ConditionalB,
    config: &EStepConfig,
    seed: u64,
    iteration: u64,
) -> Result<SubjectStats> {
    let run = |k: usize, pass: u64| {
        let mut rng = subject_stream(seed, iteration, &subject.subject_id, pass);
        if subject.event_indicator {
            event_draws(subject, params, cond, k, &mut rng)
        } else {
            censored_draws(subject, params, cond, k, &mut rng)
        }
    };
    let mut sample = run(config.draws, 0)?;
    if sample.ess < config.ess_floor * config.draws as f64 && config.redraw_factor > 1 {
        sample = run(config.draws * config.redraw_factor, 1)?;
    }

    let pi = params.stable_rate;
    if subject.event_indicator {
        let log_ft = lognormal_aft_logdensity(subject.event_time, &subject.tte_covariates, params.tte_coef.as_slice(), params.tte_sd)?;
        return Ok(SubjectStats {
            responsibility: 0.0,
            loglik: (1.0 - pi).ln() + log_ft + sample.log_evidence,
            loglik_var: sample.log_evidence_var,
            ess: sample.ess,
            draws: sample.draws,
            stable_post: None,
        });
    }

    if pi == 0.0 {
        return Ok(SubjectStats {
            responsibility: 0.0,
            loglik: sample.log_evidence,
            loglik_var: sample.log_evidence_var,
            ess: sample.ess,
            draws: sample.draws,
            stable_post: None,
        });
    }
    let log_stable = stable_marginal_loglik(subject, params)?;
    let resp = responsibility_from_evidence(&subject.subject_id, pi, log_stable, sample.log_evidence)?;
    let loglik = log_sum_exp(&[pi.ln() + log_stable, (1.0 - pi).ln() + sample.log_evidence]);
    Ok(SubjectStats {
        responsibility: resp,
        loglik,
        loglik_var: (1.0 - resp).powi(2) * sample.log_evidence_var,
        ess: sample.ess,
        draws: sample.draws,
        stable_post: Some(stable_b_posterior(subject, params)?),
    })
}

/// Runs the E-step for every subject. Each subject draws from its own
/// stream keyed by `(seed, iteration, subject id)`.
pub fn run_estep(
    dataset: &StudyDataset,
    params: &ModelParameters,
    config: &EStepConfig,
    seed: u64,
    iteration: u64,
) -> Result<EStepStats> {
    check_draws(config.draws)?;
    let cond = ConditionalB::new(&params.re_mean, &params.re_cov)?;
    let subjects: Vec<SubjectStats> = dataset
        .subjects()
        .par_iter()
        .map(|s| subject_estep(s, params, &cond, config, seed, iteration))
        .collect::<Result<Vec<_>>>()?;

    let mut ess: Vec<f64> = subjects.iter().map(|s| s.ess).collect();
    ess.sort_by(f64::total_cmp);
    let loglik = subjects.iter().map(|s| s.loglik).sum();
    let loglik_se = subjects.iter().map(|s| s.loglik_var).sum::<f64>().sqrt();
    Ok(EStepStats {
        min_ess: ess[0],
        median_ess: ess[ess.len() / 2],
        draws_requested: config.draws,
        subjects,
        loglik,
        loglik_se,
    })
}

/// Observed-data log-likelihood at `params` by Monte Carlo.
pub fn observed_loglik(dataset: &StudyDataset, params: &ModelParameters, draws: usize, seed: u64) -> Result<f64> {
    let config = EStepConfig {
        draws,
        ess_floor: 0.0,
        redraw_factor: 1,
    };
    let stats = run_estep(dataset, params, &config, seed, u64::MAX)?;
    let bad: Vec<&str> = dataset
        .subjects()
        .iter()
        .zip(&stats.subjects)
        .filter(|(_, s)| !s.loglik.is_finite())
        .map(|(d, _)| d.subject_id.as_str())
        .collect();
    if !bad.is_empty() {
        return Err(Error::Degenerate {
            subject: bad.join(","),
            message: "non-finite log-likelihood contribution".into(),
        });
    }
    Ok(stats.loglik)
}

/// Writes `subject_id,ess,responsibility` rows for one E-step.
pub fn write_diagnostics<W: Write>(dataset: &StudyDataset, stats: &EStepStats, iteration: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (s, st) in dataset.subjects().iter().zip(&stats.subjects) {
        w.write_record([
            iteration.to_string(),
            s.subject_id.clone(),
            format!("{:?}", st.ess),
            format!("{:?}", st.responsibility),
        ])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<diagnostics>".into(),
        source,
    })
}
