//! M-step: maximizes the Monte Carlo Q-function given one E-step.
//!
//! Everything except the random-effect law of the change-point group has a
//! closed form (weighted complete-data MLEs). `(μ_r, Σ_r)` enter through the
//! partially truncated normal, whose normalizer depends on both; those are
//! found by box-constrained L-BFGS over `μ_r` and the Cholesky-log
//! parameterization of `Σ_r`, started from the exact optimum of the
//! factored problem `p(ω) p(b | ω)` so that it rarely needs more than a step.
//!
//! Subject weights: the change-point group gets `d_i = ν_i + (1 - ν_i)(1 - E[Δ_i])`,
//! the stable group `e_i = (1 - ν_i) E[Δ_i]`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SVector, SymmetricEigen, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::data::{StudyDataset, SubjectData};
use std::f64::consts::FRAC_1_SQRT_2;

use libm::erf;

use crate::dist::{log_norm_interval, norm_logpdf, norm_logsf, norm_pdf, LN_2PI};
use crate::error::{Error, Result};
use crate::estep::{EStepStats, SubjectStats};
use crate::lbfgs::BoxLbfgs;
use crate::model::{piecewise_row, residual};
use crate::params::ModelParameters;

/// Floor applied to every scalar variance and to covariance eigenvalues.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Number of free coordinates in `(μ_r, vech(P_r))`.
pub const RE_DIM: usize = 14;

/// `vech(P_r)` in row order `(0,0), (1,0), (1,1), (2,0), …`, where `P_r`
/// is the Cholesky factor of `Σ_r` with its diagonal on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CholeskyLogParam {
    pub p_vech: [f64; 10],
}

#[inline]
fn vech_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl CholeskyLogParam {
    pub fn from_cov(cov: &Matrix4<f64>) -> Result<Self> {
        let l = cov
            .cholesky()
            .ok_or_else(|| Error::Factorization("re_cov".into()))?
            .unpack();
        let mut p_vech = [0.0; 10];
        for i in 0..4 {
            for j in 0..=i {
                p_vech[vech_index(i, j)] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            }
        }
        Ok(Self { p_vech })
    }

    /// Lower-triangular factor `O_r`.
    pub fn factor(&self) -> Matrix4<f64> {
        let mut o = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..=i {
                let v = self.p_vech[vech_index(i, j)];
                o[(i, j)] = if i == j { v.exp() } else { v };
            }
        }
        o
    }

    pub fn reconstruct(&self) -> Matrix4<f64> {
        let o = self.factor();
        o * o.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Tolerance on the projected gradient of `-Q / Σ d_i`.
    pub grad_tol: f64,
    pub box_lower: [f64; RE_DIM],
    pub box_upper: [f64; RE_DIM],
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        let mut box_lower = [0.0; RE_DIM];
        let mut box_upper = [0.0; RE_DIM];
        box_lower[..4].copy_from_slice(&[-10.0, -100.0, -100.0, -100.0]);
        box_upper[..4].copy_from_slice(&[10.0, 100.0, 100.0, 100.0]);
        for i in 0..4 {
            for j in 0..=i {
                let k = 4 + vech_index(i, j);
                if i == j {
                    box_lower[k] = 1e-4f64.ln();
                    box_upper[k] = 1e2f64.ln();
                } else {
                    box_lower[k] = -50.0;
                    box_upper[k] = 50.0;
                }
            }
        }
        Self {
            memory: 10,
            max_iter: 200,
            grad_tol: 1e-9,
            box_lower,
            box_upper,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Config("lbfgs.memory must be at least 1".into()));
        }
        if let Some(k) = (0..RE_DIM).find(|&k| !(self.box_lower[k] < self.box_upper[k])) {
            return Err(Error::Config(format!("lbfgs box is empty in coordinate {k}")));
        }
        Ok(())
    }
}

/// Weighted sufficient statistics of the change-point random effects.
///
/// `s2` already includes the posterior covariance of `b` so that the
/// Gaussian part of the objective is exact in `b`.
#[derive(Debug, Clone, Default)]
pub struct ReStats {
    pub total_weight: f64,
    pub s1: Vector4<f64>,
    pub s2: Matrix4<f64>,
    /// `(weight, e^{t*})` pairs for the truncation normalizer.
    pub bounds: Vec<(f64, f64)>,
}

impl ReStats {
    pub fn add_draw(&mut self, weight: f64, omega: f64, b_mean: &nalgebra::Vector3<f64>, b_cov: &nalgebra::Matrix3<f64>) {
        let r = Vector4::new(omega, b_mean[0], b_mean[1], b_mean[2]);
        self.total_weight += weight;
        self.s1 += r * weight;
        self.s2 += r * r.transpose() * weight;
        let mut block = self.s2.fixed_view_mut::<3, 3>(1, 1);
        block += b_cov * weight;
    }

    pub fn add_bound(&mut self, weight: f64, upper: f64) {
        if weight > 0.0 {
            self.bounds.push((weight, upper));
        }
    }

    /// Orders bounds by upper limit, which lets the objective pool the
    /// bounds that no longer truncate.
    pub fn sort_bounds(&mut self) {
        self.bounds.sort_by(|a, b| a.1.total_cmp(&b.1));
    }

    pub fn from_estep(dataset: &StudyDataset, stats: &EStepStats) -> Self {
        let mut out = Self::default();
        for (s, st) in dataset.subjects().iter().zip(&stats.subjects) {
            let d = cp_weight(s, st);
            if d <= 0.0 {
                continue;
            }
            for draw in &st.draws {
                out.add_draw(d * draw.weight, draw.omega, &draw.b_post.mean, &draw.b_post.cov);
            }
            if s.event_indicator {
                out.add_bound(d, s.event_time);
            } else {
                for draw in &st.draws {
                    // Draws with vanishing weight cannot move the objective.
                    if draw.weight > 1e-14 {
                        out.add_bound(d * draw.weight, draw.t_star.exp());
                    }
                }
            }
        }
        out.sort_bounds();
        out
    }
}

fn cp_weight(s: &SubjectData, st: &SubjectStats) -> f64 {
    if s.event_indicator {
        1.0
    } else {
        1.0 - st.responsibility
    }
}

fn stable_weight(s: &SubjectData, st: &SubjectStats) -> f64 {
    if s.event_indicator {
        0.0
    } else {
        st.responsibility
    }
}

/// `Q_r(μ_r, Σ_r)` and its gradient with respect to `(μ_r, vech(P_r))`.
pub fn q_r_objective(mu: &Vector4<f64>, p: &CholeskyLogParam, stats: &ReStats) -> Result<(f64, SVector<f64, RE_DIM>)> {
    let o = p.factor();
    let o_inv = o
        .try_inverse()
        .ok_or_else(|| Error::Objective("Cholesky factor is singular".into()))?;
    let prec = o_inv.transpose() * o_inv;
    let log_det: f64 = 2.0 * (0..4).map(|i| p.p_vech[vech_index(i, i)]).sum::<f64>();
    let w = stats.total_weight;
    let scatter = stats.s2 - stats.s1 * mu.transpose() - mu * stats.s1.transpose() + mu * mu.transpose() * w;

    let mut value = -0.5 * (w * (4.0 * LN_2PI + log_det) + (prec * scatter).trace());
    let mut grad = SVector::<f64, RE_DIM>::zeros();
    let g_mu = prec * (stats.s1 - mu * w);
    let g_sigma = (prec * scatter * prec - prec * w) * 0.5;
    let g_o = g_sigma * o * 2.0;
    for i in 0..4 {
        grad[i] = g_mu[i];
        for j in 0..=i {
            grad[4 + vech_index(i, j)] = if i == j { g_o[(i, i)] * o[(i, i)] } else { g_o[(i, j)] };
        }
    }

    let sigma = o[(0, 0)];
    let t = truncation_term(mu[0], sigma, &stats.bounds)?;
    value -= t.value;
    grad[0] -= t.d_mu;
    grad[4] -= t.d_sigma * sigma;
    if !value.is_finite() {
        return Err(Error::Objective(format!("non-finite objective {value}")));
    }
    Ok((value, grad))
}

/// `Σ c log(Φ(β) - Φ(α))` over the bounds with its first and second
/// derivatives in `(μ_ω, σ_ω)`.
#[derive(Debug, Clone, Copy, Default)]
struct Truncation {
    value: f64,
    d_mu: f64,
    d_sigma: f64,
    d_mu_mu: f64,
    d_mu_sigma: f64,
    d_sigma_sigma: f64,
}

fn truncation_term(mu: f64, sigma: f64, bounds: &[(f64, f64)]) -> Result<Truncation> {
    let alpha = -mu / sigma;
    let log_phi_a = norm_logpdf(alpha);
    // Beyond this standardized upper bound Φ(β) - Φ(α) equals 1 - Φ(α) to
    // double precision, so those bounds are pooled into one term.
    let beta_far = if alpha < 0.0 { 9.0 } else { (alpha * alpha + 80.0).sqrt() + 1.0 };
    let (near, far_weight) = split_bounds(bounds, mu + sigma * beta_far);
    let erf_a = (alpha < 0.0).then(|| erf(-alpha * FRAC_1_SQRT_2));
    // Sums of c·lz, c·(ra - rb), c·(α ra - β rb), c·(α² ra - β² rb),
    // c·(α³ ra - β³ rb) and the two squared products the Hessian needs.
    let mut acc = [0.0f64; 8];
    let mut add = |c: f64, lz: f64, ra: f64, beta: f64, rb: f64| -> Result<()> {
        if !lz.is_finite() {
            return Err(Error::Objective(format!(
                "truncation mass underflows for μ_ω = {mu}, σ_ω = {sigma}"
            )));
        }
        let d0 = ra - rb;
        let d1 = alpha * ra - beta * rb;
        let d2 = alpha * alpha * ra - beta * beta * rb;
        let d3 = alpha * alpha * alpha * ra - beta * beta * beta * rb;
        acc[0] += c * lz;
        acc[1] += c * d0;
        acc[2] += c * d1;
        acc[3] += c * d2;
        acc[4] += c * d3;
        acc[5] += c * d0 * d0;
        acc[6] += c * d0 * d1;
        acc[7] += c * d1 * d1;
        Ok(())
    };
    if far_weight > 0.0 {
        let lz = norm_logsf(alpha);
        add(far_weight, lz, (log_phi_a - lz).exp(), 0.0, 0.0)?;
    }
    for &(c, upper) in near {
        let beta = (upper - mu) / sigma;
        match erf_a {
            Some(ea) if beta > 0.0 => {
                let z = 0.5 * (erf(beta * FRAC_1_SQRT_2) + ea);
                add(c, z.ln(), log_phi_a.exp() / z, beta, norm_pdf(beta) / z)?;
            }
            _ => {
                let lz = log_norm_interval(alpha, beta);
                add(c, lz, (log_phi_a - lz).exp(), beta, (norm_logpdf(beta) - lz).exp())?;
            }
        }
    }
    let var = sigma * sigma;
    Ok(Truncation {
        value: acc[0],
        d_mu: acc[1] / sigma,
        d_sigma: acc[2] / sigma,
        d_mu_mu: (acc[2] - acc[5]) / var,
        d_mu_sigma: (acc[3] - acc[6] - acc[1]) / var,
        d_sigma_sigma: (acc[4] - 2.0 * acc[2] - acc[7]) / var,
    })
}

/// `Q_ω(μ_ω, ln σ_ω)` with its gradient and Hessian.
fn q_omega(stats: &ReStats, mu: f64, tau: f64) -> Result<(f64, Vector2<f64>, Matrix2<f64>)> {
    let (w, s1, s2) = (stats.total_weight, stats.s1[0], stats.s2[(0, 0)]);
    let sigma = tau.exp();
    let var = sigma * sigma;
    let ss = s2 - 2.0 * mu * s1 + w * mu * mu;
    let t = truncation_term(mu, sigma, &stats.bounds)?;
    let q = -0.5 * w * (LN_2PI + 2.0 * tau) - 0.5 * ss / var - t.value;
    let q_mu = (s1 - w * mu) / var - t.d_mu;
    let q_sigma = -w / sigma + ss / (var * sigma) - t.d_sigma;
    let q_mu_mu = -w / var - t.d_mu_mu;
    let q_mu_sigma = -2.0 * (s1 - w * mu) / (var * sigma) - t.d_mu_sigma;
    let q_sigma_sigma = w / var - 3.0 * ss / (var * var) - t.d_sigma_sigma;
    let grad = Vector2::new(q_mu, sigma * q_sigma);
    let hess = Matrix2::new(
        q_mu_mu,
        sigma * q_mu_sigma,
        sigma * q_mu_sigma,
        var * q_sigma_sigma + sigma * q_sigma,
    );
    if !q.is_finite() {
        return Err(Error::Objective(format!("non-finite objective {q}")));
    }
    Ok((q, grad, hess))
}

/// Damped projected Newton ascent on `Q_ω` inside the box.
fn maximize_q_omega(stats: &ReStats, x0: Vector2<f64>, lower: [f64; 2], upper: [f64; 2], config: &LbfgsConfig) -> Option<Vector2<f64>> {
    let w = stats.total_weight;
    let clamp = |x: Vector2<f64>| Vector2::new(x[0].clamp(lower[0], upper[0]), x[1].clamp(lower[1], upper[1]));
    let mut x = clamp(x0);
    let (mut q, mut g, mut h) = q_omega(stats, x[0], x[1]).ok()?;
    for _ in 0..config.max_iter {
        // Projected gradient: components pushing against an active bound
        // do not count.
        let mut pg = g;
        for k in 0..2 {
            if (x[k] <= lower[k] && g[k] < 0.0) || (x[k] >= upper[k] && g[k] > 0.0) {
                pg[k] = 0.0;
            }
        }
        if pg.amax() / w < config.grad_tol {
            break;
        }
        let mut step = match (-h).cholesky() {
            Some(c) => c.solve(&pg),
            None => pg / w,
        };
        // Predicted gain below rounding of Q: nothing left to do.
        if pg.dot(&step) < 1e-13 * w {
            break;
        }
        let cap = step[1].abs().max(step[0].abs() / x[1].exp());
        if cap > 1.0 {
            step /= cap;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xn = clamp(x + step * t);
            if let Ok((qn, gn, hn)) = q_omega(stats, xn[0], xn[1]) {
                if qn >= q {
                    let moved = (xn - x).amax();
                    (x, q, g, h) = (xn, qn, gn, hn);
                    accepted = moved > 0.0;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some(x)
}

/// Exact maximizer of `Q_r` away from the box, or `None` when the weighted
/// moments are degenerate. The truncation only involves the marginal of `ω`,
/// so writing the normal as `p(ω) p(b | ω)` leaves a two-parameter problem
/// for `(μ_ω, σ_ω)` and a weighted least-squares regression of `b` on `ω`.
fn factored_optimum(stats: &ReStats, init_mean: &Vector4<f64>, init_cov: &Matrix4<f64>, config: &LbfgsConfig) -> Option<Vec<f64>> {
    let w = stats.total_weight;
    let (s1, s2) = (&stats.s1, &stats.s2);
    let sxx = Matrix2::new(w, s1[0], s1[0], s2[(0, 0)]);
    let mut sxb = nalgebra::Matrix2x3::zeros();
    for j in 0..3 {
        sxb[(0, j)] = s1[j + 1];
        sxb[(1, j)] = s2[(0, j + 1)];
    }
    let coef = sxx.cholesky()?.solve(&sxb);
    let resid = (s2.fixed_view::<3, 3>(1, 1) - sxb.transpose() * coef) / w;

    let lower = [config.box_lower[0], config.box_lower[4]];
    let upper = [config.box_upper[0], config.box_upper[4]];
    let x0 = Vector2::new(init_mean[0], 0.5 * init_cov[(0, 0)].max(VARIANCE_FLOOR).ln());
    let x = maximize_q_omega(stats, x0, lower, upper, config)?;
    let (mu_w, var_w) = (x[0], (2.0 * x[1]).exp());

    let slope = coef.row(1).transpose();
    let mut mean = *init_mean;
    mean[0] = mu_w;
    let mut cov = Matrix4::zeros();
    cov[(0, 0)] = var_w;
    for j in 0..3 {
        mean[j + 1] = coef[(0, j)] + slope[j] * mu_w;
        cov[(0, j + 1)] = slope[j] * var_w;
        cov[(j + 1, 0)] = slope[j] * var_w;
    }
    let bb = resid + slope * slope.transpose() * var_w;
    cov.fixed_view_mut::<3, 3>(1, 1).copy_from(&bb);
    let p = CholeskyLogParam::from_cov(&cov).ok()?;
    Some(pack(&mean, &p))
}

/// Bounds below `u_far` and the pooled weight of the rest. Unsorted input
/// is evaluated term by term.
fn split_bounds(bounds: &[(f64, f64)], u_far: f64) -> (&[(f64, f64)], f64) {
    if !bounds.is_sorted_by(|a, b| a.1 <= b.1) {
        return (bounds, 0.0);
    }
    let k = bounds.partition_point(|b| b.1 < u_far);
    (&bounds[..k], bounds[k..].iter().map(|b| b.0).sum())
}

fn pack(mu: &Vector4<f64>, p: &CholeskyLogParam) -> Vec<f64> {
    mu.iter().chain(p.p_vech.iter()).copied().collect()
}

fn unpack(x: &[f64]) -> (Vector4<f64>, CholeskyLogParam) {
    let mut p_vech = [0.0; 10];
    p_vech.copy_from_slice(&x[4..]);
    (Vector4::from_column_slice(&x[..4]), CholeskyLogParam { p_vech })
}

#[derive(Debug, Clone)]
pub struct ReUpdate {
    pub re_mean: Vector4<f64>,
    pub re_cov: Matrix4<f64>,
    /// Objective at the (box-projected) warm start and at the result.
    pub q_start: f64,
    pub q_end: f64,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

pub fn update_re_params(stats: &ReStats, init_mean: &Vector4<f64>, init_cov: &Matrix4<f64>, config: &LbfgsConfig) -> Result<ReUpdate> {
    config.validate()?;
    let p0 = CholeskyLogParam::from_cov(init_cov)?;
    if !(stats.total_weight > 0.0) {
        let q = if stats.bounds.is_empty() { 0.0 } else { q_r_objective(init_mean, &p0, stats)?.0 };
        return Ok(ReUpdate {
            re_mean: *init_mean,
            re_cov: *init_cov,
            q_start: q,
            q_end: q,
            iterations: 0,
            warnings: vec!["no change-point weight; random-effect law left unchanged".into()],
        });
    }
    let mut sorted;
    let stats = if stats.bounds.is_sorted_by(|a, b| a.1 <= b.1) {
        stats
    } else {
        sorted = stats.clone();
        sorted.sort_bounds();
        &sorted
    };
    let scale = stats.total_weight;
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (mu, p) = unpack(x);
        let (v, g) = q_r_objective(&mu, &p, stats)?;
        Ok((-v / scale, g.iter().map(|gi| -gi / scale).collect()))
    };
    let x0 = pack(init_mean, &p0);
    let optimizer = BoxLbfgs {
        memory: config.memory,
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        ..Default::default()
    };
    let mut start = x0.clone();
    for k in 0..RE_DIM {
        start[k] = start[k].clamp(config.box_lower[k], config.box_upper[k]);
    }
    let q_start = -objective(&start)?.0 * scale;
    // The factored optimum is exact inside the box; L-BFGS then only has
    // to confirm it, or to finish the job when a bound is active.
    let x0 = factored_optimum(stats, init_mean, init_cov, config).unwrap_or(x0);
    let min = optimizer.minimize(objective, &x0, &config.box_lower, &config.box_upper)?;
    let mut warnings = Vec::new();
    if !min.converged {
        warnings.push(format!(
            "random-effect L-BFGS stopped after {} iterations without meeting the gradient tolerance",
            min.iterations
        ));
    }
    let q_end = -min.value * scale;
    let (x, q_end) = if q_end >= q_start { (min.x, q_end) } else { (start, q_start) };
    let (re_mean, p) = unpack(&x);
    let re_cov = p.reconstruct();
    if re_cov.cholesky().is_none() {
        return Err(Error::Factorization("updated re_cov".into()));
    }
    Ok(ReUpdate {
        re_mean,
        re_cov,
        q_start,
        q_end,
        iterations: min.iterations,
        warnings,
    })
}

/// Per-subject moments shared by the closed-form updates.
#[derive(Debug, Clone)]
struct Moments {
    d: f64,
    e: f64,
    /// `E[t*]`, `E[t*²]` on the log scale.
    m1: f64,
    m2: f64,
    /// `E[Z(ω) b]` per visit and `E[bᵀ Z(ω)ᵀ Z(ω) b]`, change-point group.
    ez_b: Vec<f64>,
    e_quad: f64,
    /// Same for the stable group (`None` without a stable posterior).
    stable: Option<(Vec<f64>, f64)>,
}

fn moments(dataset: &StudyDataset, stats: &EStepStats) -> Result<Vec<Moments>> {
    if stats.subjects.len() != dataset.len() {
        return Err(Error::Dataset(format!(
            "E-step covers {} subjects, dataset has {}",
            stats.subjects.len(),
            dataset.len()
        )));
    }
    dataset
        .subjects()
        .iter()
        .zip(&stats.subjects)
        .map(|(s, st)| {
            let times = s.visit_times();
            let n = times.len();
            let mut ez_b = vec![0.0; n];
            let mut e_quad = 0.0;
            let (mut m1, mut m2) = (0.0, 0.0);
            for draw in &st.draws {
                let w = draw.weight;
                m1 += w * draw.t_star;
                m2 += w * draw.t_star * draw.t_star;
                let (m, v) = (&draw.b_post.mean, &draw.b_post.cov);
                for (j, &t) in times.iter().enumerate() {
                    let z = nalgebra::Vector3::from(piecewise_row(t, draw.omega));
                    let zm = z.dot(m);
                    ez_b[j] += w * zm;
                    e_quad += w * (zm * zm + (v * z).dot(&z));
                }
            }
            if s.event_indicator {
                let t = s.log_event_time()?;
                m1 = t;
                m2 = t * t;
            }
            let stable = st.stable_post.as_ref().map(|post| {
                let mut sz = Vec::with_capacity(n);
                let mut quad = 0.0;
                for &t in times {
                    let z = Vector2::new(1.0, t);
                    let zm = z.dot(&post.mean);
                    sz.push(zm);
                    quad += zm * zm + (post.cov * z).dot(&z);
                }
                (sz, quad)
            });
            Ok(Moments {
                d: cp_weight(s, st),
                e: stable_weight(s, st),
                m1,
                m2,
                ez_b,
                e_quad,
                stable,
            })
        })
        .collect()
}

pub fn update_stable_rate(stats: &EStepStats) -> f64 {
    let n = stats.subjects.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = stats.subjects.iter().map(|s| s.responsibility).sum();
    (total / n as f64).clamp(0.0, 1.0)
}

fn solve_normal(xtx: DMatrix<f64>, xty: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if xty.is_empty() {
        return Ok(xty);
    }
    xtx.cholesky()
        .map(|c| c.solve(&xty))
        .ok_or_else(|| Error::Singular(format!("weighted normal equations for {what}")))
}

fn floor_variance(v: f64, what: &str, warnings: &mut Vec<String>) -> f64 {
    if v < VARIANCE_FLOOR || v.is_nan() {
        let msg = format!("{what} variance estimate {v:e} clipped to {VARIANCE_FLOOR:e}");
        log::warn!("{msg}");
        warnings.push(msg);
        VARIANCE_FLOOR
    } else {
        v
    }
}

#[derive(Debug, Clone)]
pub struct RegressionUpdate {
    pub coef: DVector<f64>,
    pub sd: f64,
    pub warnings: Vec<String>,
}

fn aft_from_moments(dataset: &StudyDataset, mom: &[Moments]) -> Result<RegressionUpdate> {
    let p = dataset.p_tte();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut total = 0.0;
    for (s, m) in dataset.subjects().iter().zip(mom) {
        let w = DVector::from_column_slice(&s.tte_covariates);
        xtx += &w * w.transpose() * m.d;
        xty += &w * (m.d * m.m1);
        total += m.d;
    }
    if !(total > 0.0) {
        return Err(Error::Singular("event-time regression: zero total weight".into()));
    }
    let gamma = solve_normal(xtx, xty, "the event-time coefficients")?;
    let mut ss = 0.0;
    for (s, m) in dataset.subjects().iter().zip(mom) {
        let loc: f64 = s.tte_covariates.iter().zip(gamma.iter()).map(|(a, b)| a * b).sum();
        ss += m.d * (m.m2 - 2.0 * loc * m.m1 + loc * loc);
    }
    let mut warnings = Vec::new();
    let var = floor_variance(ss / total, "event-time", &mut warnings);
    Ok(RegressionUpdate {
        coef: gamma,
        sd: var.sqrt(),
        warnings,
    })
}

/// Weighted normal regression of `E[t*]` on `w`.
pub fn update_aft(stats: &EStepStats, dataset: &StudyDataset) -> Result<RegressionUpdate> {
    aft_from_moments(dataset, &moments(dataset, stats)?)
}

/// `β̂, σ̂` for a longitudinal block with subject weights `weights`, design
/// rows `cov(s)` and random-effect moments `(E[Zb], E[bᵀZᵀZb])`.
fn long_regression<'a>(
    dataset: &'a StudyDataset,
    rows: impl Fn(&'a SubjectData) -> &'a [f64],
    items: &[(f64, &[f64], f64)],
    what: &str,
) -> Result<RegressionUpdate> {
    let subjects = dataset.subjects();
    let p = rows(&subjects[0]).len();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut n_total = 0.0;
    for (s, &(w, ez_b, _)) in subjects.iter().zip(items) {
        if w <= 0.0 {
            continue;
        }
        let x = DVector::from_column_slice(rows(s));
        let n = s.n_visits() as f64;
        xtx += &x * x.transpose() * (w * n);
        let centered: f64 = s.outcomes().iter().zip(ez_b).map(|(y, e)| y - e).sum();
        xty += &x * (w * centered);
        n_total += w * n;
    }
    if !(n_total > p as f64 * f64::EPSILON) {
        return Err(Error::Singular(format!("{what}: zero total weight")));
    }
    let coef = solve_normal(xtx, xty, what)?;
    let mut ss = 0.0;
    for (s, &(w, ez_b, e_quad)) in subjects.iter().zip(items) {
        if w <= 0.0 {
            continue;
        }
        let r = residual(s, rows(s), &coef);
        ss += w * expected_sq_resid(&r, ez_b, e_quad);
    }
    let mut warnings = Vec::new();
    let var = floor_variance(ss / n_total, what, &mut warnings);
    Ok(RegressionUpdate {
        coef,
        sd: var.sqrt(),
        warnings,
    })
}

/// `E‖r - Zb‖²` from `E[Zb]` and `E[bᵀZᵀZb]`.
fn expected_sq_resid(r: &[f64], ez_b: &[f64], e_quad: f64) -> f64 {
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let cross: f64 = r.iter().zip(ez_b).map(|(a, b)| a * b).sum();
    rr - 2.0 * cross + e_quad
}

fn long_cp_from_moments(dataset: &StudyDataset, mom: &[Moments]) -> Result<RegressionUpdate> {
    let items: Vec<(f64, &[f64], f64)> = mom.iter().map(|m| (m.d, m.ez_b.as_slice(), m.e_quad)).collect();
    long_regression(dataset, |s| &s.long_covariates, &items, "longitudinal change-point model")
}

/// Weighted least squares of `y - E[Z(ω) b]` on `X`.
pub fn update_long_cp(stats: &EStepStats, dataset: &StudyDataset) -> Result<RegressionUpdate> {
    long_cp_from_moments(dataset, &moments(dataset, stats)?)
}

#[derive(Debug, Clone)]
pub struct StableUpdate {
    pub re_mean: Vector2<f64>,
    pub re_cov: Matrix2<f64>,
    pub coef: DVector<f64>,
    pub sd: f64,
    /// True when no subject carried stable weight and the block was kept.
    pub frozen: bool,
    pub warnings: Vec<String>,
}

fn stable_from_moments(dataset: &StudyDataset, stats: &EStepStats, mom: &[Moments], current: &ModelParameters) -> Result<StableUpdate> {
    let total: f64 = mom.iter().filter(|m| m.stable.is_some()).map(|m| m.e).sum();
    if !(total > 1e-12) {
        let msg = "no stable-group weight; stable block left unchanged".to_string();
        log::warn!("{msg}");
        return Ok(StableUpdate {
            re_mean: current.stable_re_mean,
            re_cov: current.stable_re_cov,
            coef: current.stable_long_coef.clone(),
            sd: current.stable_long_sd,
            frozen: true,
            warnings: vec![msg],
        });
    }
    let posts: Vec<_> = stats.subjects.iter().map(|s| s.stable_post.as_ref()).collect();
    let mut mean = Vector2::zeros();
    for (m, post) in mom.iter().zip(&posts) {
        if let Some(post) = post {
            mean += post.mean * m.e;
        }
    }
    mean /= total;
    let mut cov = Matrix2::zeros();
    for (m, post) in mom.iter().zip(&posts) {
        if let Some(post) = post {
            cov += post.second_moment(&mean) * m.e;
        }
    }
    cov /= total;
    cov = (cov + cov.transpose()) * 0.5;

    let mut warnings = Vec::new();
    let eig = SymmetricEigen::new(cov);
    if eig.eigenvalues.min() < VARIANCE_FLOOR {
        let msg = format!(
            "stable random-effect covariance eigenvalue {:e} floored at {VARIANCE_FLOOR:e}",
            eig.eigenvalues.min()
        );
        log::warn!("{msg}");
        warnings.push(msg);
        let vals = eig.eigenvalues.map(|v| v.max(VARIANCE_FLOOR));
        cov = eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose();
    }

    let empty: Vec<f64> = Vec::new();
    let items: Vec<(f64, &[f64], f64)> = mom
        .iter()
        .map(|m| match &m.stable {
            Some((sz, quad)) => (m.e, sz.as_slice(), *quad),
            None => (0.0, empty.as_slice(), 0.0),
        })
        .collect();
    let reg = long_regression(dataset, |s| &s.stable_covariates, &items, "longitudinal stable model")?;
    warnings.extend(reg.warnings);
    Ok(StableUpdate {
        re_mean: mean,
        re_cov: cov,
        coef: reg.coef,
        sd: reg.sd,
        frozen: false,
        warnings,
    })
}

/// Responsibility-weighted linear mixed model updates for the stable group.
pub fn update_stable_params(stats: &EStepStats, dataset: &StudyDataset, current: &ModelParameters) -> Result<StableUpdate> {
    stable_from_moments(dataset, stats, &moments(dataset, stats)?, current)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MStepConfig {
    pub lbfgs: LbfgsConfig,
    /// Change-point-only model: π stays 0 and the stable block is not touched.
    pub baseline: bool,
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub params: ModelParameters,
    pub warnings: Vec<String>,
}

/// All M-step updates from one E-step.
pub fn m_step(dataset: &StudyDataset, stats: &EStepStats, current: &ModelParameters, config: &MStepConfig) -> Result<MStepOutcome> {
    let mom = moments(dataset, stats)?;
    let mut next = current.clone();
    let mut warnings = Vec::new();

    let aft = aft_from_moments(dataset, &mom)?;
    next.tte_coef = aft.coef;
    next.tte_sd = aft.sd;
    warnings.extend(aft.warnings);

    let long = long_cp_from_moments(dataset, &mom)?;
    next.long_coef = long.coef;
    next.long_sd = long.sd;
    warnings.extend(long.warnings);

    let re = update_re_params(&ReStats::from_estep(dataset, stats), &current.re_mean, &current.re_cov, &config.lbfgs)?;
    next.re_mean = re.re_mean;
    next.re_cov = re.re_cov;
    warnings.extend(re.warnings);

    if config.baseline {
        next.stable_rate = 0.0;
    } else {
        next.stable_rate = update_stable_rate(stats);
        let st = stable_from_moments(dataset, stats, &mom, current)?;
        next.stable_re_mean = st.re_mean;
        next.stable_re_cov = st.re_cov;
        next.stable_long_coef = st.coef;
        next.stable_long_sd = st.sd;
        warnings.extend(st.warnings);
    }
    Ok(MStepOutcome { params: next, warnings })
}

/// The Monte Carlo Q-function split by parameter block. Each update
/// maximizes its own block with the others held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QBlocks {
    pub stable_rate: f64,
    pub aft: f64,
    pub long_cp: f64,
    pub re: f64,
    pub stable_re: f64,
    pub stable_long: f64,
}

impl QBlocks {
    pub fn total(&self) -> f64 {
        self.stable_rate + self.aft + self.long_cp + self.re + self.stable_re + self.stable_long
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

pub fn q_blocks(dataset: &StudyDataset, stats: &EStepStats, params: &ModelParameters) -> Result<QBlocks> {
    let mom = moments(dataset, stats)?;
    let pi = params.stable_rate;
    let mut q = QBlocks {
        stable_rate: 0.0,
        aft: 0.0,
        long_cp: 0.0,
        re: 0.0,
        stable_re: 0.0,
        stable_long: 0.0,
    };
    let var_t = params.tte_sd.powi(2);
    let var_y = params.long_sd.powi(2);
    let var_s = params.stable_long_sd.powi(2);
    let prec_s = params
        .stable_re_cov
        .try_inverse()
        .ok_or_else(|| Error::Factorization("stable_re_cov".into()))?;
    let log_det_s = params.stable_re_cov.determinant().ln();
    for ((s, st), m) in dataset.subjects().iter().zip(&stats.subjects).zip(&mom) {
        q.stable_rate += xlogy(m.e, pi) + xlogy(m.d, 1.0 - pi);
        let loc: f64 = s.tte_covariates.iter().zip(params.tte_coef.iter()).map(|(a, b)| a * b).sum();
        q.aft += m.d * (-0.5 * (LN_2PI + var_t.ln()) - (m.m2 - 2.0 * loc * m.m1 + loc * loc) / (2.0 * var_t));
        let n = s.n_visits() as f64;
        let r = residual(s, &s.long_covariates, &params.long_coef);
        q.long_cp += m.d * (-0.5 * n * (LN_2PI + var_y.ln()) - expected_sq_resid(&r, &m.ez_b, m.e_quad) / (2.0 * var_y));
        if let (Some(post), Some((sz, quad))) = (&st.stable_post, &m.stable) {
            let second = post.second_moment(&params.stable_re_mean);
            q.stable_re += m.e * (-0.5 * (2.0 * LN_2PI + log_det_s + (prec_s * second).trace()));
            let r = residual(s, &s.stable_covariates, &params.stable_long_coef);
            q.stable_long += m.e * (-0.5 * n * (LN_2PI + var_s.ln()) - expected_sq_resid(&r, sz, *quad) / (2.0 * var_s));
        }
    }
    let p = CholeskyLogParam::from_cov(&params.re_cov)?;
    q.re = q_r_objective(&params.re_mean, &p, &ReStats::from_estep(dataset, stats))?.0;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estep::{run_estep, EStepConfig};
    use crate::params::tests::example;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_with(resp: &[f64]) -> EStepStats {
        EStepStats {
            subjects: resp
                .iter()
                .map(|&r| SubjectStats {
                    responsibility: r,
                    draws: vec![],
                    stable_post: None,
                    ess: 1.0,
                    loglik: 0.0,
                    loglik_var: 0.0,
                })
                .collect(),
            draws_requested: 1,
            min_ess: 1.0,
            median_ess: 1.0,
            loglik: 0.0,
            loglik_se: 0.0,
        }
    }

    #[test]
    fn stable_rate_is_mean_responsibility() {
        assert_eq!(update_stable_rate(&stats_with(&[0.0; 4])), 0.0);
        assert!((update_stable_rate(&stats_with(&[0.4; 10])) - 0.4).abs() < 1e-15);
        let mut r = vec![0.0; 5];
        r.extend([0.8; 5]);
        assert!((update_stable_rate(&stats_with(&r)) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn cholesky_log_round_trip() {
        let cov = example().re_cov;
        let p = CholeskyLogParam::from_cov(&cov).unwrap();
        assert!((p.reconstruct() - cov).abs().max() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut q = CholeskyLogParam { p_vech: [0.0; 10] };
            for v in q.p_vech.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
            assert!(q.reconstruct().cholesky().is_some());
        }
    }

    fn random_stats(rng: &mut ChaCha8Rng, n: usize, truncated: bool, omega_lo: f64) -> ReStats {
        let mut st = ReStats::default();
        for _ in 0..n {
            let w = rng.random_range(0.1..1.0);
            let omega = rng.random_range(omega_lo..omega_lo + 0.95);
            let m = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.8..-0.2), rng.random_range(0.2..0.8));
            let a = Matrix3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            st.add_draw(w, omega, &m, &(a * a.transpose() + Matrix3::identity() * 1e-3));
            if truncated {
                st.add_bound(w, omega + rng.random_range(0.05..2.0));
            }
        }
        st
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let st = random_stats(&mut rng, 40, true, 0.05);
        let mu = Vector4::new(0.4, 0.02, -0.45, 0.5);
        let p = CholeskyLogParam::from_cov(&example().re_cov).unwrap();
        let (_, g) = q_r_objective(&mu, &p, &st).unwrap();
        let x = pack(&mu, &p);
        let h = 1e-5;
        for k in 0..RE_DIM {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += h;
            b[k] -= h;
            let (ma, pa) = unpack(&a);
            let (mb, pb) = unpack(&b);
            let fd = (q_r_objective(&ma, &pa, &st).unwrap().0 - q_r_objective(&mb, &pb, &st).unwrap().0) / (2.0 * h);
            let scale = g[k].abs().max(fd.abs()).max(1.0);
            assert!((g[k] - fd).abs() / scale < 1e-6, "coordinate {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn untruncated_limit_is_gaussian_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Draws far above zero so the lower truncation carries no mass either.
        let mut st = random_stats(&mut rng, 60, false, 5.0);
        for _ in 0..3 {
            st.add_bound(1.0, f64::INFINITY);
        }
        let mean = st.s1 / st.total_weight;
        let cov = st.s2 / st.total_weight - mean * mean.transpose();
        let up = update_re_params(&st, &example().re_mean, &example().re_cov, &LbfgsConfig::default()).unwrap();
        assert!(up.q_end >= up.q_start);
        assert!((up.re_mean - mean).abs().max() < 1e-6, "{}", (up.re_mean - mean).abs().max());
        assert!((up.re_cov - cov).abs().max() < 1e-6);
        // Started at the optimum, nothing moves.
        let again = update_re_params(&st, &mean, &cov, &LbfgsConfig::default()).unwrap();
        assert!((again.re_mean - mean).abs().max() < 1e-8);
    }

    #[test]
    fn factored_optimum_matches_cold_lbfgs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let st = random_stats(&mut rng, 80, true, 0.05);
        let cfg = LbfgsConfig::default();
        let fast = factored_optimum(&st, &example().re_mean, &example().re_cov, &cfg).unwrap();
        let scale = st.total_weight;
        let neg_q = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (mu, p) = unpack(x);
            let (v, g) = q_r_objective(&mu, &p, &st)?;
            Ok((-v / scale, g.iter().map(|gi| -gi / scale).collect()))
        };
        let x0 = pack(&example().re_mean, &CholeskyLogParam::from_cov(&example().re_cov).unwrap());
        let opt = BoxLbfgs { max_iter: 2000, grad_tol: 1e-10, ..Default::default() };
        let cold = opt.minimize(neg_q, &x0, &cfg.box_lower, &cfg.box_upper).unwrap();
        assert!(cold.converged);
        let (mf, pf) = unpack(&fast);
        let (mc, pc) = unpack(&cold.x);
        assert!((mf - mc).abs().max() < 1e-6, "{}", (mf - mc).abs().max());
        assert!((pf.reconstruct() - pc.reconstruct()).abs().max() < 1e-6);
        let g = q_r_objective(&mf, &pf, &st).unwrap().1 / scale;
        assert!(g.abs().max() < 1e-7, "{}", g.abs().max());
    }

    #[test]
    fn q_omega_hessian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let st = random_stats(&mut rng, 60, true, 0.05);
        for &(mu, tau) in &[(0.4, -1.0), (-0.2, -0.3), (1.5, -2.0), (0.05, 0.4)] {
            let (_, g, h) = q_omega(&st, mu, tau).unwrap();
            let eps = 1e-6;
            for k in 0..2 {
                let mut xp = [mu, tau];
                let mut xm = [mu, tau];
                xp[k] += eps;
                xm[k] -= eps;
                let (qp, gp, _) = q_omega(&st, xp[0], xp[1]).unwrap();
                let (qm, gm, _) = q_omega(&st, xm[0], xm[1]).unwrap();
                let fd_g = (qp - qm) / (2.0 * eps);
                assert!((fd_g - g[k]).abs() < 1e-5 * (1.0 + g[k].abs()), "grad {k}: {fd_g} vs {}", g[k]);
                for j in 0..2 {
                    let fd_h = (gp[j] - gm[j]) / (2.0 * eps);
                    assert!((fd_h - h[(j, k)]).abs() < 1e-4 * (1.0 + h[(j, k)].abs()), "hess {j}{k}: {fd_h} vs {}", h[(j, k)]);
                }
            }
        }
    }

    #[test]
    fn normalizer_penalizes_mean_above_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let st = random_stats(&mut rng, 30, true, 0.05);
        let p = CholeskyLogParam::from_cov(&example().re_cov).unwrap();
        let base = Vector4::new(0.5, 0.0, -0.5, 0.5);
        let q0 = q_r_objective(&base, &p, &st).unwrap().0;
        let high = Vector4::new(1.0 + 5.0 * 0.15 + 2.0, 0.0, -0.5, 0.5);
        let q1 = q_r_objective(&high, &p, &st).unwrap().0;
        assert!(q1 < q0);
    }

    #[test]
    fn single_draw_pulls_mean_toward_it() {
        let mut st = ReStats::default();
        st.add_draw(1.0, 0.9, &Vector3::new(0.0, -0.5, 0.5), &(Matrix3::identity() * 0.01));
        st.add_bound(1.0, 2.0);
        let p = example();
        let up = update_re_params(&st, &p.re_mean, &p.re_cov, &LbfgsConfig::default()).unwrap();
        assert!(up.re_mean[0] > p.re_mean[0]);
        assert!(up.re_cov.cholesky().is_some());
    }

    fn subj(id: &str, event: bool, t: f64, times: &[f64], y: &[f64], w: f64) -> SubjectData {
        SubjectData::new(id, times.to_vec(), y.to_vec(), t, event, vec![1.0], vec![1.0], vec![w]).unwrap()
    }

    fn small_dataset(seed: u64) -> StudyDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut subjects = Vec::new();
        for i in 0..30 {
            let event = i % 3 != 0;
            let t = rng.random_range(0.6..2.0);
            let n = rng.random_range(2..6usize);
            let times: Vec<f64> = (0..n).map(|j| 0.1 * (j + 1) as f64 * t / (0.1 * (n + 1) as f64)).collect();
            let y: Vec<f64> = times
                .iter()
                .map(|s| {
                    let kink = 0.4 * t;
                    let base = if *s <= kink { -0.5 * (s - kink) } else { 0.5 * (s - kink) };
                    base + rng.random_range(-0.05..0.05)
                })
                .collect();
            subjects.push(subj(&format!("s{i}"), event, t, &times, &y, rng.random_range(-1.0..1.0)));
        }
        StudyDataset::new(subjects).unwrap()
    }

    #[test]
    fn closed_form_updates_raise_their_q_blocks() {
        let data = small_dataset(3);
        let p = example();
        let stats = run_estep(&data, &p, &EStepConfig { draws: 300, ..Default::default() }, 1, 0).unwrap();
        let before = q_blocks(&data, &stats, &p).unwrap();
        let out = m_step(&data, &stats, &p, &MStepConfig::default()).unwrap();
        let after = q_blocks(&data, &stats, &out.params).unwrap();
        for (name, b, a) in [
            ("stable_rate", before.stable_rate, after.stable_rate),
            ("aft", before.aft, after.aft),
            ("long_cp", before.long_cp, after.long_cp),
            ("re", before.re, after.re),
            ("stable_re", before.stable_re, after.stable_re),
            ("stable_long", before.stable_long, after.stable_long),
        ] {
            assert!(a >= b - 1e-10, "{name}: {b} -> {a}");
        }
        // Perturbing any updated closed form lowers its block.
        let mut moved = out.params.clone();
        moved.tte_sd *= 1.01;
        moved.long_coef[0] += 1e-3;
        moved.stable_re_mean[1] += 1e-3;
        let q_moved = q_blocks(&data, &stats, &moved).unwrap();
        assert!(q_moved.aft < after.aft);
        assert!(q_moved.long_cp < after.long_cp);
        assert!(q_moved.stable_re < after.stable_re);
    }

    #[test]
    fn m_step_is_idempotent_at_fixed_stats() {
        let data = small_dataset(4);
        let p = example();
        let stats = run_estep(&data, &p, &EStepConfig { draws: 200, ..Default::default() }, 2, 0).unwrap();
        let once = m_step(&data, &stats, &p, &MStepConfig::default()).unwrap().params;
        let twice = m_step(&data, &stats, &once, &MStepConfig::default()).unwrap().params;
        let diff = once
            .to_vec()
            .iter()
            .zip(twice.to_vec())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        // The random-effects block stops at grad_tol, not at the exact optimum.
        assert!(diff < 1e-7, "{diff}");
    }

    #[test]
    fn baseline_leaves_stable_block_alone() {
        let data = small_dataset(5);
        let mut p = example();
        p.stable_rate = 0.0;
        let stats = run_estep(&data, &p, &EStepConfig { draws: 100, ..Default::default() }, 3, 0).unwrap();
        let out = m_step(&data, &stats, &p, &MStepConfig { baseline: true, ..Default::default() }).unwrap();
        assert_eq!(out.params.stable_rate, 0.0);
        assert_eq!(out.params.stable_re_mean, p.stable_re_mean);
        assert_eq!(out.params.stable_long_sd, p.stable_long_sd);
    }

    #[test]
    fn frozen_stable_block_without_weight() {
        let data = small_dataset(6);
        let mut stats = stats_with(&vec![0.0; data.len()]);
        for s in &mut stats.subjects {
            s.stable_post = None;
        }
        let p = example();
        let up = update_stable_params(&stats, &data, &p).unwrap();
        assert!(up.frozen);
        assert_eq!(up.re_cov, p.stable_re_cov);
        assert!(!up.warnings.is_empty());
    }

    #[test]
    fn aft_perfect_fit_clips_variance() {
        let subjects: Vec<SubjectData> = (0..6)
            .map(|i| {
                let w = if i % 2 == 0 { -1.0 } else { 1.0 };
                subj(&format!("e{i}"), true, f64::exp(w), &[0.0], &[0.0], w)
            })
            .collect();
        let data = StudyDataset::new(subjects).unwrap();
        let up = update_aft(&stats_with(&[0.0; 6]), &data).unwrap();
        assert!((up.coef[0] - 1.0).abs() < 1e-12);
        assert_eq!(up.sd, VARIANCE_FLOOR.sqrt());
        assert_eq!(up.warnings.len(), 1);
    }

    #[test]
    fn aft_rank_deficient_is_singular() {
        let subjects: Vec<SubjectData> = (0..4).map(|i| subj(&format!("e{i}"), true, 1.5, &[0.0], &[0.0], 0.0)).collect();
        let data = StudyDataset::new(subjects).unwrap();
        assert!(matches!(update_aft(&stats_with(&[0.0; 4]), &data), Err(Error::Singular(_))));
    }

    #[test]
    fn long_without_random_effects_is_weighted_ols() {
        // No draws: E[Zb] = 0, so β̂ is the OLS mean of y on the constant.
        let subjects = vec![
            subj("a", true, 1.0, &[0.1, 0.2], &[1.0, 3.0], 0.0),
            subj("b", true, 1.0, &[0.1], &[5.0], 0.0),
        ];
        let data = StudyDataset::new(subjects).unwrap();
        let up = update_long_cp(&stats_with(&[0.0, 0.0]), &data).unwrap();
        assert!((up.coef[0] - 3.0).abs() < 1e-12);
        assert!((up.sd.powi(2) - 8.0 / 3.0).abs() < 1e-12);
    }
}
