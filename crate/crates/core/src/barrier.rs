//! Log-barrier interior-point method for separable concave allocation
//! programs of the form
//!
//! ```text
//! max  Σ_i ω_i h_i(β_iᵀ r_i) - cᵀx - λ‖x‖²,   x = Σ_i r_i
//! s.t. r ⪰ 0,  x ⪯ bound,  lo_i ≤ β_iᵀ r_i ≤ hi_i
//! ```
//!
//! where each `h_i` is a (possibly interval-restricted) concave envelope. This
//! is the workhorse behind `eval_U` and every branch-and-bound relaxation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::utility::{Envelope, ServiceClass};

/// One user's contribution to the objective.
#[derive(Debug, Clone)]
pub(crate) struct Term<'a> {
    pub class: &'a ServiceClass,
    pub weight: f64,
    pub beta: &'a [f64],
    pub env: Envelope,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Program<'a> {
    pub k: usize,
    pub terms: Vec<Term<'a>>,
    pub prices: Vec<f64>,
    pub lambda: f64,
    /// Upper bound on `x_k`; a capacity, or a box that never binds at the
    /// optimum for unconstrained profit programs.
    pub bound: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub r: Vec<Vec<f64>>,
    pub value: f64,
    /// Duality-gap bound `m/t` of the final barrier iterate.
    pub gap: f64,
}

struct Row {
    idx: Vec<usize>,
    coef: Vec<f64>,
    rhs: f64,
}

impl Row {
    fn slack(&self, y: &[f64]) -> f64 {
        self.rhs
            - self
                .idx
                .iter()
                .zip(&self.coef)
                .map(|(&j, &a)| a * y[j])
                .sum::<f64>()
    }
}

impl<'a> Program<'a> {
    /// Objective value at a full allocation matrix `r[i][k]`.
    pub fn objective(&self, r: &[Vec<f64>]) -> f64 {
        let mut x = vec![0.0; self.k];
        let mut total = 0.0;
        for (term, ri) in self.terms.iter().zip(r) {
            let z: f64 = term.beta.iter().zip(ri).map(|(b, v)| b * v).sum();
            total += term.weight * term.env.value(term.class, z);
            for (xk, v) in x.iter_mut().zip(ri) {
                *xk += v;
            }
        }
        for (kk, xk) in x.iter().enumerate() {
            total -= self.prices[kk] * xk + self.lambda * xk * xk;
        }
        total
    }

    pub fn solve(&self, gap_tol: f64) -> Result<Solution> {
        let n_users = self.terms.len();
        let mut vars: Vec<(usize, usize)> = Vec::new();
        for i in 0..n_users {
            for kk in 0..self.k {
                if self.bound[kk] > 0.0 {
                    vars.push((i, kk));
                }
            }
        }
        let n = vars.len();
        let mut rows: Vec<Row> = (0..n)
            .map(|v| Row {
                idx: vec![v],
                coef: vec![-1.0],
                rhs: 0.0,
            })
            .collect();
        for kk in 0..self.k {
            let idx: Vec<usize> = (0..n).filter(|&v| vars[v].1 == kk).collect();
            if !idx.is_empty() && self.bound[kk].is_finite() {
                rows.push(Row {
                    coef: vec![1.0; idx.len()],
                    idx,
                    rhs: self.bound[kk],
                });
            }
        }
        for (i, term) in self.terms.iter().enumerate() {
            let idx: Vec<usize> = (0..n).filter(|&v| vars[v].0 == i).collect();
            let coef: Vec<f64> = idx.iter().map(|&v| term.beta[vars[v].1]).collect();
            if term.lo > 0.0 {
                if idx.is_empty() {
                    return Err(Error::Infeasible(format!(
                        "user {i} needs {} resources but has no usable provider",
                        term.lo
                    )));
                }
                rows.push(Row {
                    idx: idx.clone(),
                    coef: coef.iter().map(|c| -c).collect(),
                    rhs: -term.lo,
                });
            }
            if term.hi.is_finite() && !idx.is_empty() {
                rows.push(Row {
                    idx,
                    coef,
                    rhs: term.hi,
                });
            }
        }
        let unpack = |y: &[f64]| -> Vec<Vec<f64>> {
            let mut r = vec![vec![0.0; self.k]; n_users];
            for (v, &(i, kk)) in vars.iter().enumerate() {
                r[i][kk] = y[v].max(0.0);
            }
            r
        };
        if n == 0 {
            let r = vec![vec![0.0; self.k]; n_users];
            return Ok(Solution {
                value: self.objective(&r),
                r,
                gap: 0.0,
            });
        }

        let y0 = self.initial_point(&vars);
        let y0 = if rows.iter().all(|row| row.slack(&y0) > 0.0) {
            y0
        } else {
            phase_one(n, &rows, y0)?
        };

        let objective = |y: &[f64]| -> f64 { self.objective(&unpack(y)) };
        let grad_hess = |y: &[f64], g: &mut DVector<f64>, h: &mut DMatrix<f64>| {
            let mut z = vec![0.0; n_users];
            let mut x = vec![0.0; self.k];
            for (v, &(i, kk)) in vars.iter().enumerate() {
                z[i] += self.terms[i].beta[kk] * y[v];
                x[kk] += y[v];
            }
            let d1: Vec<f64> = self
                .terms
                .iter()
                .zip(&z)
                .map(|(t, &zi)| t.weight * t.env.d1(t.class, zi))
                .collect();
            let d2: Vec<f64> = self
                .terms
                .iter()
                .zip(&z)
                .map(|(t, &zi)| t.weight * t.env.d2(t.class, zi))
                .collect();
            for (v, &(i, kk)) in vars.iter().enumerate() {
                let bk = self.terms[i].beta[kk];
                g[v] = d1[i] * bk - self.prices[kk] - 2.0 * self.lambda * x[kk];
                for (u, &(j, ll)) in vars.iter().enumerate() {
                    let mut hv = 0.0;
                    if i == j {
                        hv += d2[i] * bk * self.terms[j].beta[ll];
                    }
                    if kk == ll {
                        hv -= 2.0 * self.lambda;
                    }
                    h[(v, u)] = hv;
                }
            }
        };
        let (y, gap) = barrier_maximize(n, &rows, y0, &objective, &grad_hess, gap_tol, None)?;
        let r = unpack(&y);
        Ok(Solution {
            value: self.objective(&r),
            r,
            gap,
        })
    }

    /// Equal split of half of each bound, shrunk per user to respect `hi`.
    fn initial_point(&self, vars: &[(usize, usize)]) -> Vec<f64> {
        let n_users = self.terms.len().max(1) as f64;
        let mut y: Vec<f64> = vars
            .iter()
            .map(|&(_, kk)| 0.5 * self.bound[kk] / n_users)
            .collect();
        for (i, term) in self.terms.iter().enumerate() {
            let z: f64 = vars
                .iter()
                .enumerate()
                .filter(|(_, &(j, _))| j == i)
                .map(|(v, &(_, kk))| term.beta[kk] * y[v])
                .sum();
            if term.hi.is_finite() && z >= term.hi {
                let s = 0.5 * (term.lo + term.hi) / z;
                for (v, &(j, _)) in vars.iter().enumerate() {
                    if j == i {
                        y[v] *= s;
                    }
                }
            }
        }
        y
    }
}

/// Find a strictly feasible point by maximizing the common slack `s`.
fn phase_one(n: usize, rows: &[Row], y0: Vec<f64>) -> Result<Vec<f64>> {
    let min_slack = rows
        .iter()
        .map(|r| r.slack(&y0))
        .fold(f64::INFINITY, f64::min);
    let s0 = min_slack.min(0.0) - 1.0;
    let mut ext: Vec<Row> = rows
        .iter()
        .map(|r| {
            let mut idx = r.idx.clone();
            let mut coef = r.coef.clone();
            idx.push(n);
            coef.push(1.0);
            Row {
                idx,
                coef,
                rhs: r.rhs,
            }
        })
        .collect();
    ext.push(Row {
        idx: vec![n],
        coef: vec![1.0],
        rhs: 1.0,
    });
    let mut start = y0;
    start.push(s0);
    let objective = |y: &[f64]| y[n];
    let grad_hess = |_: &[f64], g: &mut DVector<f64>, h: &mut DMatrix<f64>| {
        g.fill(0.0);
        g[n] = 1.0;
        h.fill(0.0);
    };
    let feasible = |y: &[f64]| y[n] > 0.0;
    let (y, _) = barrier_maximize(
        n + 1,
        &ext,
        start,
        &objective,
        &grad_hess,
        1e-10,
        Some(&feasible),
    )?;
    if y[n] > 0.0 {
        Ok(y[..n].to_vec())
    } else {
        Err(Error::Infeasible(format!(
            "no strictly feasible allocation (best common slack {:.3e})",
            y[n]
        )))
    }
}

#[allow(clippy::type_complexity)]
fn barrier_maximize(
    n: usize,
    rows: &[Row],
    mut y: Vec<f64>,
    objective: &dyn Fn(&[f64]) -> f64,
    grad_hess: &dyn Fn(&[f64], &mut DVector<f64>, &mut DMatrix<f64>),
    gap_tol: f64,
    stop: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<(Vec<f64>, f64)> {
    let m = rows.len() as f64;
    let phi = |y: &[f64], t: f64| -> f64 {
        let mut acc = t * objective(y);
        for row in rows {
            let s = row.slack(y);
            if s <= 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += s.ln();
        }
        acc
    };
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    let mut t = (m / (1.0 + objective(&y).abs())).max(1e-3);
    let mu = 12.0;
    loop {
        for _newton in 0..200 {
            if let Some(stop) = stop {
                if stop(&y) {
                    return Ok((y, m / t));
                }
            }
            grad_hess(&y, &mut g, &mut h);
            // gradient and negated Hessian of the barrier objective
            let mut grad = g.scale(t);
            let mut neg_h = h.scale(-t);
            for row in rows {
                let s = row.slack(&y);
                for (a, &j) in row.coef.iter().zip(&row.idx) {
                    grad[j] -= a / s;
                }
                for (a, &j) in row.coef.iter().zip(&row.idx) {
                    for (b, &l) in row.coef.iter().zip(&row.idx) {
                        neg_h[(j, l)] += a * b / (s * s);
                    }
                }
            }
            let step = newton_step(neg_h, &grad)?;
            let decrement = grad.dot(&step);
            if decrement <= 1e-10 {
                break;
            }
            let base = phi(&y, t);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = y
                    .iter()
                    .zip(step.iter())
                    .map(|(a, d)| a + alpha * d)
                    .collect();
                let val = phi(&trial, t);
                if val.is_finite() && val >= base + 0.25 * alpha * decrement {
                    y = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if m / t < gap_tol {
            return Ok((y, m / t));
        }
        t *= mu;
        if !t.is_finite() {
            return Err(Error::Numerical("barrier parameter overflow".into()));
        }
    }
}

fn newton_step(mut neg_h: DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = neg_h.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..8 {
        if let Some(ch) = neg_h.clone().cholesky() {
            return Ok(ch.solve(grad));
        }
        ridge = if ridge == 0.0 { 1e-14 * scale } else { ridge * 100.0 };
        for j in 0..neg_h.nrows() {
            neg_h[(j, j)] += ridge;
        }
    }
    Err(Error::Numerical("barrier Newton system is not positive definite".into()))
}
