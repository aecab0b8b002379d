//! Projected limited-memory BFGS for box-constrained minimization.
//!
//! Variables sitting on a bound with the gradient pointing outward are held
//! fixed for the step; the remaining coordinates follow the two-loop L-BFGS
//! direction, and the step is backtracked along the projected path
//! `P(x + α d)` until the Armijo condition holds.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BoxLbfgs {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop once the projected gradient's largest entry is below this.
    pub grad_tol: f64,
    /// Stop once a step reduces the objective by less than `ftol · max(|f|, 1)`.
    pub ftol: f64,
}

impl Default for BoxLbfgs {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 200,
            grad_tol: 1e-9,
            ftol: 1e-15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &l), &u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(l, u);
    }
}

/// Gradient with the components that would push the iterate out of the box
/// zeroed.
fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&l, &u))| {
            if (xi <= l && gi > 0.0) || (xi >= u && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let scale = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

impl BoxLbfgs {
    /// Minimizes `f` over the box `[lower, upper]` starting from `x0`
    /// (projected into the box first). `f` returns the value and gradient.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], lower: &[f64], upper: &[f64]) -> Result<Minimum>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let n = x0.len();
        if lower.len() != n || upper.len() != n {
            return Err(Error::Config("box dimensions do not match the start point".into()));
        }
        if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Config("box lower bounds must be below upper bounds".into()));
        }
        if self.memory == 0 {
            return Err(Error::Config("L-BFGS memory must be at least 1".into()));
        }
        let mut x = x0.to_vec();
        project(&mut x, lower, upper);
        let (mut fx, mut g) = f(&x)?;
        if !fx.is_finite() {
            return Err(Error::Objective(format!("non-finite objective {fx} at the start point")));
        }
        let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(self.memory);

        for iter in 0..self.max_iter {
            let pg = projected_gradient(&x, &g, lower, upper);
            if inf_norm(&pg) <= self.grad_tol {
                return Ok(Minimum { x, value: fx, gradient: g, iterations: iter, converged: true });
            }

            let mut d = two_loop(&pg, &hist);
            for (di, pgi) in d.iter_mut().zip(&pg) {
                if *pgi == 0.0 {
                    *di = 0.0;
                }
            }
            if dot(&d, &pg) >= 0.0 {
                hist.clear();
                d = pg.iter().map(|v| -v).collect();
            }
            let mut alpha = if hist.is_empty() { (1.0 / inf_norm(&d)).min(1.0) } else { 1.0 };

            let mut accepted = None;
            for _ in 0..MAX_BACKTRACK {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                project(&mut xn, lower, upper);
                let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&g, &step);
                if decrease >= 0.0 {
                    alpha *= 0.5;
                    continue;
                }
                if let Ok((fn_, gn)) = f(&xn) {
                    if fn_.is_finite() && fn_ <= fx + ARMIJO * decrease {
                        accepted = Some((xn, fn_, gn, step));
                        break;
                    }
                }
                alpha *= 0.5;
            }

            let Some((xn, fn_, gn, s)) = accepted else {
                if !hist.is_empty() {
                    hist.clear();
                    continue;
                }
                return Ok(Minimum { x, value: fx, gradient: g, iterations: iter + 1, converged: false });
            };

            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if hist.len() == self.memory {
                    hist.pop_front();
                }
                hist.push_back((s, y, 1.0 / sy));
            }
            let reduction = fx - fn_;
            x = xn;
            fx = fn_;
            g = gn;
            if reduction <= self.ftol * fx.abs().max(1.0) {
                let pg = projected_gradient(&x, &g, lower, upper);
                return Ok(Minimum {
                    converged: inf_norm(&pg) <= self.grad_tol.sqrt(),
                    x,
                    value: fx,
                    gradient: g,
                    iterations: iter + 1,
                });
            }
        }
        Ok(Minimum { x, value: fx, gradient: g, iterations: self.max_iter, converged: false })
    }
}
