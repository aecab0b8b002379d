//! Per-subject building blocks of the three submodels.
//!
//! The change-point longitudinal model conditions on the change point `ω`;
//! given `ω` the random effects `b = (b0, b1, b2)` are Gaussian, so the
//! marginal of `y` and the posterior of `b` are both closed form.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

use crate::data::SubjectData;
use crate::dist::{mvn_logpdf, ConditionalB, LN_2PI};
use crate::error::{Error, Result};
use crate::params::ModelParameters;

/// Rows `(1, Δ·I(Δ ≤ 0), Δ·I(Δ > 0))` with `Δ = s - ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseDesign {
    pub rows: DMatrix<f64>,
}

#[inline]
pub(crate) fn piecewise_row(s: f64, omega: f64) -> [f64; 3] {
    let delta = s - omega;
    if delta <= 0.0 {
        [1.0, delta, 0.0]
    } else {
        [1.0, 0.0, delta]
    }
}

pub fn piecewise_design(visit_times: &[f64], omega: f64) -> PiecewiseDesign {
    let n = visit_times.len();
    let mut rows = DMatrix::zeros(n, 3);
    for (j, &s) in visit_times.iter().enumerate() {
        let z = piecewise_row(s, omega);
        for c in 0..3 {
            rows[(j, c)] = z[c];
        }
    }
    PiecewiseDesign { rows }
}

/// Rows `(1, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StableDesign {
    pub rows: DMatrix<f64>,
}

pub fn stable_design(visit_times: &[f64]) -> StableDesign {
    let n = visit_times.len();
    StableDesign {
        rows: DMatrix::from_fn(n, 2, |j, c| if c == 0 { 1.0 } else { visit_times[j] }),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y - Xβ` for a baseline covariate row shared by all visits.
pub(crate) fn residual(subject: &SubjectData, covariates: &[f64], coef: &DVector<f64>) -> Vec<f64> {
    let shift = dot(covariates, coef.as_slice());
    subject.outcomes().iter().map(|y| y - shift).collect()
}

/// Gaussian law of the stable-group random effects given `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct StablePosterior {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl StablePosterior {
    /// `E[(b - center)(b - center)ᵀ]`.
    pub fn second_moment(&self, center: &Vector2<f64>) -> Matrix2<f64> {
        let d = self.mean - center;
        self.cov + d * d.transpose()
    }
}

/// Gaussian law of `b | ω, y` in the change-point group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BPosterior {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// `log N(y; X_s β_s + Z_s μ_s, Z_s Σ_s Z_sᵀ + σ_s² I)`.
pub fn stable_marginal_loglik(subject: &SubjectData, params: &ModelParameters) -> Result<f64> {
    let z = stable_design(subject.visit_times()).rows;
    let r = DVector::from_vec(residual(subject, &subject.stable_covariates, &params.stable_long_coef));
    let sigma = DMatrix::from_column_slice(2, 2, params.stable_re_cov.as_slice());
    let mu = DVector::from_column_slice(params.stable_re_mean.as_slice());
    let n = subject.n_visits();
    let cov = &z * sigma * z.transpose() + DMatrix::identity(n, n) * params.stable_long_sd.powi(2);
    mvn_logpdf(&r, &(&z * mu), &cov)
}

/// Conjugate posterior of the stable-group random effects.
pub fn stable_b_posterior(subject: &SubjectData, params: &ModelParameters) -> Result<StablePosterior> {
    let prior_prec = params
        .stable_re_cov
        .try_inverse()
        .ok_or_else(|| Error::Factorization("stable_re_cov".into()))?;
    let r = residual(subject, &subject.stable_covariates, &params.stable_long_coef);
    let s2 = params.stable_long_sd.powi(2);
    let mut ztz = Matrix2::zeros();
    let mut ztr = Vector2::zeros();
    for (&s, &rj) in subject.visit_times().iter().zip(&r) {
        let z = Vector2::new(1.0, s);
        ztz += z * z.transpose();
        ztr += z * rj;
    }
    let prec = prior_prec + ztz / s2;
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::Factorization(format!("stable posterior precision of {}", subject.subject_id)))?;
    let cov = chol.inverse();
    let mean = cov * (prior_prec * params.stable_re_mean + ztr / s2);
    Ok(StablePosterior { mean, cov })
}

/// `log f(y | ω, Δ = 0)` with `b` integrated against `b | ω`, through the
/// full `n × n` marginal covariance.
pub fn cp_y_marginal_given_omega(subject: &SubjectData, omega: f64, params: &ModelParameters) -> Result<f64> {
    if !omega.is_finite() {
        return Err(Error::Domain(format!("change point must be finite, got {omega}")));
    }
    let cond = ConditionalB::new(&params.re_mean, &params.re_cov)?;
    let z = piecewise_design(subject.visit_times(), omega).rows;
    let r = DVector::from_vec(residual(subject, &subject.long_covariates, &params.long_coef));
    let c = DMatrix::from_column_slice(3, 3, cond.cov.as_slice());
    let m = DVector::from_column_slice(cond.mean_at(omega).as_slice());
    let n = subject.n_visits();
    let cov = &z * c * z.transpose() + DMatrix::identity(n, n) * params.long_sd.powi(2);
    mvn_logpdf(&r, &(&z * m), &cov)
}

/// Conjugate posterior of `b` given `(y, ω)`.
pub fn cp_b_posterior(subject: &SubjectData, omega: f64, params: &ModelParameters) -> Result<BPosterior> {
    let cond = ConditionalB::new(&params.re_mean, &params.re_cov)?;
    CpKernel::new(subject, params, &cond).eval(omega).map(|(_, post)| post)
}

/// Change-point likelihood of one subject at fixed parameters, evaluated at
/// many `ω` values. Uses the 3×3 posterior precision instead of the
/// `n × n` marginal covariance (determinant lemma plus Woodbury identity).
/// Visits are sorted, so every sum over the piecewise design splits at `ω`
/// into prefix sums.
pub(crate) struct CpKernel<'a> {
    /// Prefix sums of `1, s, s², r, r s` over the visits; entry `j` covers
    /// the first `j` visits.
    prefix: Vec<[f64; 5]>,
    times: &'a [f64],
    rr: f64,
    var_y: f64,
    cond: &'a ConditionalB,
}

impl<'a> CpKernel<'a> {
    pub(crate) fn new(subject: &'a SubjectData, params: &ModelParameters, cond: &'a ConditionalB) -> Self {
        let times = subject.visit_times();
        let resid = residual(subject, &subject.long_covariates, &params.long_coef);
        let mut prefix = Vec::with_capacity(times.len() + 1);
        let mut acc = [0.0; 5];
        prefix.push(acc);
        for (&s, &r) in times.iter().zip(&resid) {
            for (a, v) in acc.iter_mut().zip([1.0, s, s * s, r, r * s]) {
                *a += v;
            }
            prefix.push(acc);
        }
        Self {
            prefix,
            times,
            rr: resid.iter().map(|r| r * r).sum(),
            var_y: params.long_sd.powi(2),
            cond,
        }
    }

    /// `(log f(y | ω), posterior of b)`.
    pub(crate) fn eval(&self, omega: f64) -> Result<(f64, BPosterior)> {
        let m0 = self.cond.mean_at(omega);
        let k = self.times.partition_point(|&s| s <= omega);
        let pre = self.prefix[k];
        let all = self.prefix[self.times.len()];
        let post: [f64; 5] = std::array::from_fn(|j| all[j] - pre[j]);
        // Σ (s - ω) and Σ (s - ω)² over one side of the split.
        let lin = |p: &[f64; 5]| p[1] - omega * p[0];
        let sq = |p: &[f64; 5]| p[2] - 2.0 * omega * p[1] + omega * omega * p[0];
        let (l1, l2) = (lin(&pre), lin(&post));
        let ztz = Matrix3::new(all[0], l1, l2, l1, sq(&pre), 0.0, l2, 0.0, sq(&post));
        let ztr = Vector3::new(all[3], pre[4] - omega * pre[3], post[4] - omega * post[3]);
        let ztz_m0 = ztz * m0;
        let g = ztr - ztz_m0;
        let rho2 = (self.rr - 2.0 * m0.dot(&ztr) + m0.dot(&ztz_m0)).max(0.0);

        let prec = self.cond.precision + ztz / self.var_y;
        let chol = prec
            .cholesky()
            .ok_or_else(|| Error::Factorization("posterior precision of b".into()))?;
        let g = g / self.var_y;
        let h = chol.solve(&g);
        let log_det_prec = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let n = all[0];
        let log_det = n * self.var_y.ln() + self.cond.log_det + log_det_prec;
        let quad = rho2 / self.var_y - h.dot(&g);
        let loglik = -0.5 * (n * LN_2PI + log_det + quad);
        Ok((
            loglik,
            BPosterior {
                mean: m0 + h,
                cov: chol.inverse(),
            },
        ))
    }
}
