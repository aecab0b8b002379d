//! Reference computations written without the library's kernels: dense
//! Gaussian marginals, numerical integration and rejection sampling.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use tbcure::{ModelParameters, SubjectData};

pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn big_phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Gauss-Legendre rule on [-1, 1] (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Law of `b | ω` from the joint normal of `(ω, b)`.
struct BGivenOmega {
    mu_w: f64,
    sd_w: f64,
    mu_b: Vector3<f64>,
    slope: Vector3<f64>,
    cov: Matrix3<f64>,
}

impl BGivenOmega {
    fn new(mean: &Vector4<f64>, cov: &Matrix4<f64>) -> Self {
        let vw = cov[(0, 0)];
        let cross = Vector3::new(cov[(1, 0)], cov[(2, 0)], cov[(3, 0)]);
        let bb = cov.fixed_view::<3, 3>(1, 1).into_owned();
        Self {
            mu_w: mean[0],
            sd_w: vw.sqrt(),
            mu_b: Vector3::new(mean[1], mean[2], mean[3]),
            slope: cross / vw,
            cov: bb - cross * cross.transpose() / vw,
        }
    }

    fn density(&self, omega: f64) -> f64 {
        phi((omega - self.mu_w) / self.sd_w) / self.sd_w
    }
}

pub fn z_row(s: f64, omega: f64) -> Vector3<f64> {
    let d = s - omega;
    if d <= 0.0 {
        Vector3::new(1.0, d, 0.0)
    } else {
        Vector3::new(1.0, 0.0, d)
    }
}

fn gaussian_loglik(r: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let n = r.len() as f64;
    let chol = cov.clone().cholesky().expect("marginal covariance is positive definite");
    let alpha = chol.solve(r);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    (-0.5 * (n * (2.0 * PI).ln() + logdet + r.dot(&alpha)), alpha)
}

/// One subject prepared for the reference integrals.
pub struct OracleSubject {
    visits: Vec<f64>,
    resid: DVector<f64>,
    stable_resid: DVector<f64>,
    log_t: f64,
    event: bool,
    tte_loc: f64,
}

impl OracleSubject {
    pub fn new(s: &SubjectData, p: &ModelParameters) -> Self {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let shift = dot(&s.long_covariates, p.long_coef.as_slice());
        let stable_shift = dot(&s.stable_covariates, p.stable_long_coef.as_slice());
        Self {
            visits: s.visit_times().to_vec(),
            resid: DVector::from_iterator(s.n_visits(), s.outcomes().iter().map(|y| y - shift)),
            stable_resid: DVector::from_iterator(s.n_visits(), s.outcomes().iter().map(|y| y - stable_shift)),
            log_t: s.event_time.ln(),
            event: s.event_indicator,
            tte_loc: dot(&s.tte_covariates, p.tte_coef.as_slice()),
        }
    }

    fn n(&self) -> usize {
        self.visits.len()
    }

    /// `log f(y | ω)` and `E[b | y, ω]` through the dense `n × n` covariance.
    fn cp_terms(&self, law: &BGivenOmega, sd: f64, omega: f64) -> (f64, Vector3<f64>) {
        let n = self.n();
        let z = DMatrix::from_fn(n, 3, |j, c| z_row(self.visits[j], omega)[c]);
        let m = law.mu_b + law.slope * (omega - law.mu_w);
        let c = DMatrix::from_column_slice(3, 3, law.cov.as_slice());
        let v = &z * &c * z.transpose() + DMatrix::identity(n, n) * sd * sd;
        let r = &self.resid - &z * DVector::from_column_slice(m.as_slice());
        let (ll, alpha) = gaussian_loglik(&r, &v);
        let post = DVector::from_column_slice(m.as_slice()) + &c * z.transpose() * alpha;
        (ll, Vector3::new(post[0], post[1], post[2]))
    }

    fn stable_loglik(&self, p: &ModelParameters) -> f64 {
        let n = self.n();
        let z = DMatrix::from_fn(n, 2, |j, c| if c == 0 { 1.0 } else { self.visits[j] });
        let sigma: Matrix2<f64> = p.stable_re_cov;
        let mu: Vector2<f64> = p.stable_re_mean;
        let sig = DMatrix::from_column_slice(2, 2, sigma.as_slice());
        let v = &z * sig * z.transpose() + DMatrix::identity(n, n) * p.stable_long_sd.powi(2);
        let r = &self.stable_resid - &z * DVector::from_column_slice(mu.as_slice());
        gaussian_loglik(&r, &v).0
    }

    /// Integrand components `(1, ω, z_jᵀ E[b | y, ω]…)` scaled by `f(y | ω) e^{-shift}`.
    fn components(&self, law: &BGivenOmega, sd: f64, omega: f64, shift: f64) -> Vec<f64> {
        let (ll, post) = self.cp_terms(law, sd, omega);
        let weight = (ll - shift).exp();
        let mut out = Vec::with_capacity(2 + self.n());
        out.push(weight);
        out.push(weight * omega);
        for &s in &self.visits {
            out.push(weight * z_row(s, omega).dot(&post));
        }
        out
    }

    /// Cut points of `(0, upper)`: visit times and a ±10σ grid around `μ_ω`,
    /// beyond which the prior mass is negligible.
    fn breakpoints(&self, law: &BGivenOmega, upper: f64) -> Vec<f64> {
        let hi = upper.min(law.mu_w + 12.0 * law.sd_w);
        let mut cuts = vec![0.0_f64.max(law.mu_w - 12.0 * law.sd_w), hi];
        cuts.extend(self.visits.iter().copied());
        cuts.extend((-10..=10).map(|k| law.mu_w + k as f64 * law.sd_w));
        cuts.retain(|&c| c >= 0.0 && c <= hi);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        cuts
    }

    fn shift(&self, law: &BGivenOmega, sd: f64) -> f64 {
        (0..=400)
            .map(|k| law.mu_w + (k as f64 / 200.0 - 1.0) * 6.0 * law.sd_w)
            .filter(|&w| w > 0.0)
            .map(|w| self.cp_terms(law, sd, w).0)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Reference conditional expectations for one subject.
#[derive(Debug, Clone)]
pub struct Reference {
    pub omega: f64,
    /// Censored subjects only.
    pub t_star: Option<f64>,
    pub responsibility: Option<f64>,
    pub zb: Vec<f64>,
}

fn adaptive_simpson(f: &dyn Fn(f64) -> Vec<f64>, a: f64, b: f64, tol: f64) -> Vec<f64> {
    #[allow(clippy::too_many_arguments)]
    fn step(f: &dyn Fn(f64) -> Vec<f64>, a: f64, b: f64, fa: &[f64], fm: &[f64], fb: &[f64], whole: &[f64], tol: f64, depth: u32) -> Vec<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let simpson = |x0: f64, x1: f64, f0: &[f64], fmid: &[f64], f1: &[f64]| -> Vec<f64> {
            (0..f0.len()).map(|k| (x1 - x0) / 6.0 * (f0[k] + 4.0 * fmid[k] + f1[k])).collect()
        };
        let left = simpson(a, m, fa, &flm, fm);
        let right = simpson(m, b, fm, &frm, fb);
        let err = (0..whole.len()).map(|k| (left[k] + right[k] - whole[k]).abs()).fold(0.0, f64::max);
        if depth == 0 || err <= 15.0 * tol {
            return (0..whole.len()).map(|k| left[k] + right[k] + (left[k] + right[k] - whole[k]) / 15.0).collect();
        }
        let l = step(f, a, m, fa, &flm, fm, &left, 0.5 * tol, depth - 1);
        let r = step(f, m, b, fm, &frm, fb, &right, 0.5 * tol, depth - 1);
        l.iter().zip(&r).map(|(x, y)| x + y).collect()
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole: Vec<f64> = (0..fa.len()).map(|k| (b - a) / 6.0 * (fa[k] + 4.0 * fm[k] + fb[k])).collect();
    step(f, a, b, &fa, &fm, &fb, &whole, tol, 40)
}

/// Event subject: adaptive quadrature over `ω ∈ (0, e^t)`.
/// Censored subject: tensor Gauss-Legendre over `t* ∈ (t, ∞)` and
/// `ω ∈ (0, e^{t*})`, with the truncated prior of `ω` renormalized at each `t*`.
pub fn reference_expectations(subject: &SubjectData, p: &ModelParameters) -> Reference {
    let s = OracleSubject::new(subject, p);
    let law = BGivenOmega::new(&p.re_mean, &p.re_cov);
    let sd = p.long_sd;
    let shift = s.shift(&law, sd);
    let n = s.n();
    let prior_mass = |upper: f64| big_phi((upper - law.mu_w) / law.sd_w) - big_phi(-law.mu_w / law.sd_w);

    if s.event {
        let upper = s.log_t.exp();
        let f = |w: f64| -> Vec<f64> {
            let d = law.density(w);
            s.components(&law, sd, w, shift).into_iter().map(|v| v * d).collect()
        };
        let cuts = s.breakpoints(&law, upper);
        let mut total = vec![0.0; 2 + n];
        for seg in cuts.windows(2) {
            let part = adaptive_simpson(&f, seg[0], seg[1], 1e-13);
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        return Reference {
            omega: total[1] / total[0],
            t_star: None,
            responsibility: None,
            zb: total[2..].iter().map(|v| v / total[0]).collect(),
        };
    }

    let (gx, gw) = gauss_legendre(20);
    let gl = |a: f64, b: f64, f: &mut dyn FnMut(f64, f64)| {
        let (h, c) = (0.5 * (b - a), 0.5 * (a + b));
        for (x, w) in gx.iter().zip(&gw) {
            f(c + h * x, h * w);
        }
    };
    let tte_sd = p.tte_sd;
    let lo = s.log_t;
    let hi = lo.max(s.tte_loc) + 10.0 * tte_sd;
    let panels = 40;
    // (1, t*, ω, z_j b…) integrated against f(t*) f(ω | t*) f(y | ω).
    let mut total = vec![0.0; 3 + n];
    for k in 0..panels {
        let a = lo + (hi - lo) * k as f64 / panels as f64;
        let b = lo + (hi - lo) * (k + 1) as f64 / panels as f64;
        gl(a, b, &mut |u, wu| {
            let dens_t = phi((u - s.tte_loc) / tte_sd) / tte_sd;
            let upper = u.exp();
            let norm = prior_mass(upper);
            let mut inner = vec![0.0; 2 + n];
            for seg in s.breakpoints(&law, upper).windows(2) {
                gl(seg[0], seg[1], &mut |w, ww| {
                    let d = law.density(w);
                    for (acc, v) in inner.iter_mut().zip(s.components(&law, sd, w, shift)) {
                        *acc += ww * d * v;
                    }
                });
            }
            let scale = wu * dens_t / norm;
            total[0] += scale * inner[0];
            total[1] += scale * inner[0] * u;
            total[2] += scale * inner[1];
            for j in 0..n {
                total[3 + j] += scale * inner[2 + j];
            }
        });
    }
    let pi = p.stable_rate;
    let log_cp = shift + total[0].ln();
    let a = pi.ln() + s.stable_loglik(p);
    let b = (1.0 - pi).ln() + log_cp;
    let resp = if pi == 0.0 { 0.0 } else { 1.0 / (1.0 + (b - a).exp()) };
    Reference {
        omega: total[2] / total[0],
        t_star: Some(total[1] / total[0]),
        responsibility: Some(resp),
        zb: total[3..].iter().map(|v| v / total[0]).collect(),
    }
}

/// Mean outcome on `grid` from `subjects` patients generated at `truth` with
/// zero covariates. The change-point effects come from plain rejection of
/// the untruncated normal given the progression time. Returns means and
/// their standard errors.
pub fn brute_force_trajectory<R: Rng>(truth: &ModelParameters, grid: &[f64], subjects: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let l4 = truth.re_cov.cholesky().expect("re_cov").unpack();
    let l2 = truth.stable_re_cov.cholesky().expect("stable_re_cov").unpack();
    let tte = Normal::new(0.0, truth.tte_sd).unwrap();
    let mut sum = vec![0.0; grid.len()];
    let mut sum_sq = vec![0.0; grid.len()];
    let normal = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
    for _ in 0..subjects {
        let mut values = Vec::with_capacity(grid.len());
        if rng.random::<f64>() < truth.stable_rate {
            let b = truth.stable_re_mean + l2 * Vector2::new(normal(rng), normal(rng));
            for &s in grid {
                values.push(b[0] + b[1] * s + truth.stable_long_sd * normal(rng));
            }
        } else {
            let upper = tte.sample(rng).exp();
            let r = loop {
                let r = truth.re_mean + l4 * Vector4::new(normal(rng), normal(rng), normal(rng), normal(rng));
                if r[0] > 0.0 && r[0] <= upper {
                    break r;
                }
            };
            for &s in grid {
                let z = z_row(s, r[0]);
                values.push(z[0] * r[1] + z[1] * r[2] + z[2] * r[3] + truth.long_sd * normal(rng));
            }
        }
        for (k, v) in values.into_iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let n = subjects as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let se = mean
        .iter()
        .zip(&sum_sq)
        .map(|(m, q)| ((q / n - m * m) * n / (n - 1.0) / n).sqrt())
        .collect();
    (mean, se)
}

/// First two moments of `N(μ, σ²)` restricted to `(0, upper]`, by composite
/// Simpson on 20 000 panels.
pub fn truncated_moments(mu: f64, sd: f64, upper: f64) -> (f64, f64) {
    let panels = 20_000;
    let h = upper / panels as f64;
    let mut m = [0.0; 3];
    for k in 0..=panels {
        let x = k as f64 * h;
        let c = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let d = c * phi((x - mu) / sd);
        m[0] += d;
        m[1] += d * x;
        m[2] += d * x * x;
    }
    (m[1] / m[0], m[2] / m[0])
}
