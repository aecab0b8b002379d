//! Density and sampling kernels.
//!
//! Everything is evaluated on the log scale. The univariate normal helpers
//! switch to asymptotic expansions in the far tails so that survival terms
//! and truncation normalizers stay finite where `erfc` underflows.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use libm::{erf, erfc};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this the erfc-based CDF is replaced by the asymptotic series.
const TAIL_SWITCH: f64 = -20.0;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn norm_logpdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// `log Φ(x)`, accurate for arbitrarily negative `x`.
pub fn norm_logcdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 0.0;
    }
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x >= TAIL_SWITCH {
        let p = norm_cdf(x);
        if x > 0.0 {
            // Φ close to one: go through the survival function.
            (-norm_sf(x)).ln_1p()
        } else {
            p.ln()
        }
    } else {
        // log Φ(x) = log φ(x) - log(-x) + log(1 - 1/x² + 3/x⁴ - ...)
        let x2 = x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=10 {
            term *= -((2 * k - 1) as f64) / x2;
            sum += term;
        }
        norm_logpdf(x) - (-x).ln() + sum.ln()
    }
}

/// `log(1 - Φ(x))`.
pub fn norm_logsf(x: f64) -> f64 {
    norm_logcdf(-x)
}

/// Standard normal quantile.
pub fn norm_ppf(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// `log(Φ(b) - Φ(a))` for `a < b` (either may be infinite).
pub fn log_norm_interval(a: f64, b: f64) -> f64 {
    if !(a < b) {
        return f64::NEG_INFINITY;
    }
    if a >= 0.0 {
        let la = norm_logsf(a);
        let lb = norm_logsf(b);
        la + log1m_exp(lb - la)
    } else if b <= 0.0 {
        let la = norm_logcdf(a);
        let lb = norm_logcdf(b);
        lb + log1m_exp(la - lb)
    } else {
        // Straddles zero: both erf terms are positive, no cancellation.
        (0.5 * (erf(b * FRAC_1_SQRT_2) + erf(-a * FRAC_1_SQRT_2))).ln()
    }
}

/// `log(1 - e^x)` for `x <= 0`.
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Multivariate normal log density through a Cholesky factorization.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = x.len();
    if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Domain(format!(
            "dimension mismatch: x {d}, mean {}, cov {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::Factorization(format!("{d}x{d} covariance")))?;
    let z = chol.l_dirty().solve_lower_triangular(&(x - mean)).expect("nonsingular factor");
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (d as f64 * LN_2PI + log_det + z.norm_squared()))
}

/// Law of `b` given `ω` under the 4-dimensional normal on `(ω, b)`.
#[derive(Debug, Clone)]
pub struct ConditionalB {
    pub mu_omega: f64,
    pub sd_omega: f64,
    pub mu_b: Vector3<f64>,
    /// Regression of `b` on `ω`: `σ_bω / σ_ω²`.
    pub slope: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub chol: Matrix3<f64>,
    pub precision: Matrix3<f64>,
    pub log_det: f64,
}

impl ConditionalB {
    pub fn new(mean: &Vector4<f64>, cov: &Matrix4<f64>) -> Result<Self> {
        let var_omega = cov[(0, 0)];
        if !(var_omega > 0.0) {
            return Err(Error::Domain(format!(
                "change-point variance must be positive, got {var_omega}"
            )));
        }
        let s_bw: Vector3<f64> = cov.fixed_view::<3, 1>(1, 0).into_owned();
        let s_bb: Matrix3<f64> = cov.fixed_view::<3, 3>(1, 1).into_owned();
        let slope = s_bw / var_omega;
        let cond = s_bb - s_bw * s_bw.transpose() / var_omega;
        let chol = cond
            .cholesky()
            .ok_or_else(|| Error::Factorization("conditional covariance of b given omega".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mu_omega: mean[0],
            sd_omega: var_omega.sqrt(),
            mu_b: mean.fixed_rows::<3>(1).into_owned(),
            slope,
            cov: cond,
            precision: chol.inverse(),
            chol: l,
            log_det,
        })
    }

    pub fn mean_at(&self, omega: f64) -> Vector3<f64> {
        self.mu_b + self.slope * (omega - self.mu_omega)
    }

    pub fn sample_at<R: Rng + ?Sized>(&self, omega: f64, rng: &mut R) -> Vector3<f64> {
        let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        self.mean_at(omega) + self.chol * z
    }
}

/// Conditional moments of `b | ω`.
pub fn mvn_condition(mean: &Vector4<f64>, cov: &Matrix4<f64>, omega: f64) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let c = ConditionalB::new(mean, cov)?;
    Ok((c.mean_at(omega), c.cov))
}

/// Univariate normal restricted to `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal1D {
    pub mu: f64,
    pub sigma: f64,
    pub a: f64,
    pub b: f64,
}

const TAIL_START: f64 = 4.0;
const MAX_REJECTIONS: usize = 10_000;

impl TruncatedNormal1D {
    pub fn new(mu: f64, sigma: f64, a: f64, b: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() {
            return Err(Error::Domain(format!("invalid normal N({mu}, {sigma}²)")));
        }
        if !(a < b) || a.is_nan() || b.is_nan() {
            return Err(Error::Domain(format!("empty truncation interval ({a}, {b})")));
        }
        Ok(Self { mu, sigma, a, b })
    }

    fn standardized(&self) -> (f64, f64) {
        ((self.a - self.mu) / self.sigma, (self.b - self.mu) / self.sigma)
    }

    /// `log(Φ(β) - Φ(α))` with standardized bounds.
    pub fn log_normalizer(&self) -> f64 {
        let (alpha, beta) = self.standardized();
        log_norm_interval(alpha, beta)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if x <= self.a || x >= self.b {
            return f64::NEG_INFINITY;
        }
        norm_logpdf((x - self.mu) / self.sigma) - self.sigma.ln() - self.log_normalizer()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.sampler().sample(rng)
    }

    /// Sampler with the interval's CDF values precomputed, for repeated
    /// draws from the same law.
    pub fn sampler(&self) -> TnSampler {
        let (alpha, beta) = self.standardized();
        let mode = if alpha >= TAIL_START {
            Mode::RightTail
        } else if beta <= -TAIL_START {
            Mode::LeftTail
        } else if alpha > 0.0 {
            Mode::Upper { pa: norm_sf(alpha), pb: norm_sf(beta) }
        } else {
            Mode::Lower { pa: norm_cdf(alpha), pb: norm_cdf(beta) }
        };
        TnSampler { tn: *self, alpha, beta, mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    RightTail,
    LeftTail,
    /// Inverse CDF through the survival function (interval above zero).
    Upper { pa: f64, pb: f64 },
    Lower { pa: f64, pb: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TnSampler {
    tn: TruncatedNormal1D,
    alpha: f64,
    beta: f64,
    mode: Mode,
}

impl TnSampler {
    pub fn law(&self) -> &TruncatedNormal1D {
        &self.tn
    }

    /// Same lower bound, new upper bound `b`; reuses `Φ(α)` when possible.
    pub fn with_upper(&self, b: f64) -> Result<TnSampler> {
        let tn = TruncatedNormal1D::new(self.tn.mu, self.tn.sigma, self.tn.a, b)?;
        let beta = (b - tn.mu) / tn.sigma;
        match self.mode {
            Mode::Lower { pa, .. } if beta > -TAIL_START => Ok(TnSampler {
                tn,
                alpha: self.alpha,
                beta,
                mode: Mode::Lower { pa, pb: norm_cdf(beta) },
            }),
            _ => Ok(tn.sampler()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let (alpha, beta) = (self.alpha, self.beta);
        for _ in 0..MAX_REJECTIONS {
            let z = match self.mode {
                Mode::RightTail => right_tail(alpha, beta, rng)?,
                Mode::LeftTail => -right_tail(-beta, -alpha, rng)?,
                Mode::Upper { pa, pb } => {
                    if !(pa > pb) {
                        return Err(degenerate(alpha, beta));
                    }
                    -norm_ppf(pb + uniform_open(rng) * (pa - pb))
                }
                Mode::Lower { pa, pb } => {
                    if !(pb > pa) {
                        return Err(degenerate(alpha, beta));
                    }
                    norm_ppf(pa + uniform_open(rng) * (pb - pa))
                }
            };
            let x = self.tn.mu + self.tn.sigma * z;
            if x > self.tn.a && x < self.tn.b {
                return Ok(x);
            }
        }
        Err(Error::Sampling(format!(
            "could not place a draw strictly inside ({}, {}) for N({}, {}²); interval too narrow at double precision",
            self.tn.a, self.tn.b, self.tn.mu, self.tn.sigma
        )))
    }
}

fn uniform_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn degenerate(alpha: f64, beta: f64) -> Error {
    Error::Sampling(format!(
        "normalizer underflows on standardized interval ({alpha}, {beta}); use the log-scale tail sampler"
    ))
}

/// Draw from the standard normal restricted to `(alpha, beta)` with
/// `alpha >= 4`: exponential proposal, or a uniform proposal when the
/// interval is narrow compared with the tail scale `1/alpha`.
fn right_tail<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64> {
    let width = beta - alpha;
    if width * alpha < 1.0 {
        for _ in 0..MAX_REJECTIONS {
            let z = alpha + rng.random::<f64>() * width;
            let u = uniform_open(rng);
            if u.ln() <= -0.5 * (z * z - alpha * alpha) {
                return Ok(z);
            }
        }
    } else {
        let lambda = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
        for _ in 0..MAX_REJECTIONS {
            let z = alpha - uniform_open(rng).ln() / lambda;
            if z >= beta {
                continue;
            }
            let u = uniform_open(rng);
            if u.ln() <= -0.5 * (z - lambda) * (z - lambda) {
                return Ok(z);
            }
        }
    }
    Err(degenerate(alpha, beta))
}

/// Four-dimensional normal on `(ω, b0, b1, b2)` truncated to
/// `lower < ω <= upper`; the `b` coordinates are unconstrained.
#[derive(Debug, Clone)]
pub struct Ptmvn {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub lower: f64,
    pub upper: f64,
    cond: ConditionalB,
    omega: TruncatedNormal1D,
}

impl Ptmvn {
    pub fn new(mean: Vector4<f64>, cov: Matrix4<f64>, lower: f64, upper: f64) -> Result<Self> {
        let cond = ConditionalB::new(&mean, &cov)?;
        let omega = TruncatedNormal1D::new(cond.mu_omega, cond.sd_omega, lower, upper)?;
        Ok(Self {
            mean,
            cov,
            lower,
            upper,
            cond,
            omega,
        })
    }

    pub fn omega_marginal(&self) -> &TruncatedNormal1D {
        &self.omega
    }

    /// Exact draw: `ω` from its truncated marginal, then `b | ω`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vector4<f64>> {
        let omega = self.omega.sample(rng)?;
        let b = self.cond.sample_at(omega, rng);
        Ok(Vector4::new(omega, b[0], b[1], b[2]))
    }

    pub fn log_pdf(&self, r: &Vector4<f64>) -> Result<f64> {
        if r[0] <= self.lower || r[0] > self.upper {
            return Ok(f64::NEG_INFINITY);
        }
        let x = DVector::from_column_slice(r.as_slice());
        let m = DVector::from_column_slice(self.mean.as_slice());
        let c = DMatrix::from_column_slice(4, 4, self.cov.as_slice());
        Ok(mvn_logpdf(&x, &m, &c)? - self.omega.log_normalizer())
    }
}

fn aft_location(w: &[f64], gamma: &[f64]) -> f64 {
    w.iter().zip(gamma).map(|(a, b)| a * b).sum()
}

/// Log density of the log-normal AFT law at `t_event` (natural time scale).
pub fn lognormal_aft_logdensity(t_event: f64, w: &[f64], gamma: &[f64], sigma_tte: f64) -> Result<f64> {
    if !(t_event > 0.0) {
        return Err(Error::Domain(format!("event time must be positive, got {t_event}")));
    }
    if !(sigma_tte > 0.0) {
        return Err(Error::Domain(format!("sigma_tte must be positive, got {sigma_tte}")));
    }
    let lt = t_event.ln();
    let z = (lt - aft_location(w, gamma)) / sigma_tte;
    Ok(norm_logpdf(z) - sigma_tte.ln() - lt)
}

/// `log P(T > t_event)` under the log-normal AFT law.
pub fn lognormal_aft_logsurvival(t_event: f64, w: &[f64], gamma: &[f64], sigma_tte: f64) -> Result<f64> {
    if t_event < 0.0 || t_event.is_nan() {
        return Err(Error::Domain(format!("event time must be positive, got {t_event}")));
    }
    if !(sigma_tte > 0.0) {
        return Err(Error::Domain(format!("sigma_tte must be positive, got {sigma_tte}")));
    }
    if t_event == 0.0 {
        return Ok(0.0);
    }
    Ok(norm_logsf((t_event.ln() - aft_location(w, gamma)) / sigma_tte))
}
