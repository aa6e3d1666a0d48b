//! The concavified service-provider demand program.
//!
//! At prices `c`, SP `m` solves
//!
//! ```text
//! max_r  Σ_i ω_i û_i(β_iᵀ r_i) - cᵀx - λ‖x‖²    with x = Σ_i r_i, r ⪰ 0
//! ```
//!
//! where `û_i` is the concave envelope of user `i`'s QoS sigmoid. The coupling
//! constraint `x ⪰ Σ r_i` binds whenever `c ≻ 0`, so `x` is substituted out.
//! The solver is block-coordinate ascent over users; each block is solved
//! exactly through its one-dimensional dual variable.

use serde::{Deserialize, Serialize};

use crate::barrier::{Program, Term};
use crate::error::{Error, Result};
use crate::utility::{pricing_weight, Envelope, ServiceClass, UserSpec};

/// Default KKT tolerance for demand solves.
pub const DEFAULT_TOL: f64 = 1e-7;
/// Sweep cap for block-coordinate ascent.
pub const MAX_SWEEPS: usize = 100_000;

/// Scenario-level description of a service provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpSpec {
    pub id: String,
    /// Regularization weight λ > 0.
    pub lambda: f64,
    pub users: Vec<UserSpec>,
}

/// A user with its class resolved and envelope precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUser {
    pub id: String,
    pub class: ServiceClass,
    pub beta: Vec<f64>,
    pub weight: f64,
    pub env: Envelope,
}

impl ModelUser {
    pub fn new(id: impl Into<String>, class: ServiceClass, beta: Vec<f64>, weight: f64) -> Self {
        let env = Envelope::new(&class);
        ModelUser {
            id: id.into(),
            class,
            beta,
            weight,
            env,
        }
    }

    pub fn z(&self, r: &[f64]) -> f64 {
        self.beta.iter().zip(r).map(|(b, v)| b * v).sum()
    }
}

/// A service provider ready for solving: classes resolved, weights fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpModel {
    pub id: String,
    pub lambda: f64,
    pub k: usize,
    pub users: Vec<ModelUser>,
}

impl SpModel {
    /// Resolve `sp` against `classes`. With `pricing`, each user's weight is
    /// the pricing weight of its class; otherwise the user's configured weight is kept.
    pub fn new(sp: &SpSpec, classes: &[ServiceClass], k: usize, pricing: bool) -> Result<Self> {
        if !(sp.lambda > 0.0 && sp.lambda.is_finite()) {
            return Err(Error::scenario(
                format!("sps.{}.lambda", sp.id),
                format!("lambda must be > 0, got {}", sp.lambda),
            ));
        }
        let mut users = Vec::with_capacity(sp.users.len());
        for u in &sp.users {
            u.validate(k)?;
            let class = classes
                .iter()
                .find(|c| c.id == u.class_id)
                .ok_or_else(|| {
                    Error::scenario(
                        format!("users.{}.class", u.id),
                        format!("unknown class `{}`", u.class_id),
                    )
                })?
                .clone();
            let weight = if pricing {
                pricing_weight(&class)?
            } else {
                u.weight
            };
            users.push(ModelUser::new(u.id.clone(), class, u.beta.clone(), weight));
        }
        Ok(SpModel {
            id: sp.id.clone(),
            lambda: sp.lambda,
            k,
            users,
        })
    }

    pub fn from_users(id: impl Into<String>, lambda: f64, users: Vec<ModelUser>) -> Result<Self> {
        let k = users.first().map_or(0, |u| u.beta.len());
        for u in &users {
            if u.beta.len() != k {
                return Err(Error::Dimension {
                    what: format!("beta of user `{}`", u.id),
                    expected: k,
                    got: u.beta.len(),
                });
            }
        }
        if !(lambda > 0.0) {
            return Err(Error::Domain {
                what: "lambda",
                constraint: "> 0",
                value: lambda,
            });
        }
        Ok(SpModel {
            id: id.into(),
            lambda,
            k,
            users,
        })
    }

    pub fn total_weight(&self) -> f64 {
        self.users.iter().map(|u| u.weight).sum()
    }

    /// `Σ_i ω_i u_i(0)`: the value with no resources at all.
    pub fn baseline(&self) -> f64 {
        self.users.iter().map(|u| u.weight * u.class.qos(0.0)).sum()
    }
}

/// Optimum of the demand program at given prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandResult {
    /// Demand per NP.
    pub x: Vec<f64>,
    /// Per-user allocation `r[i][k]`.
    pub r: Vec<Vec<f64>>,
    /// Aggregated resources per user.
    pub z: Vec<f64>,
    pub value: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub sweeps: usize,
}

fn check_prices(model: &SpModel, c: &[f64]) -> Result<()> {
    if c.len() != model.k {
        return Err(Error::Dimension {
            what: "price vector".into(),
            expected: model.k,
            got: c.len(),
        });
    }
    if let Some(&bad) = c.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain {
            what: "price",
            constraint: "> 0",
            value: bad,
        });
    }
    Ok(())
}

/// Objective of the demand program at `r` (with `x = Σ r`).
pub fn objective(model: &SpModel, c: &[f64], r: &[Vec<f64>]) -> f64 {
    let x = column_sums(model.k, r);
    let mut v: f64 = model
        .users
        .iter()
        .zip(r)
        .map(|(u, ri)| u.weight * u.env.value(&u.class, u.z(ri)))
        .sum();
    for (ck, xk) in c.iter().zip(&x) {
        v -= ck * xk + model.lambda * xk * xk;
    }
    v
}

/// Gradient of [`objective`] with respect to every `r[i][k]`.
pub fn gradient(model: &SpModel, c: &[f64], r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let x = column_sums(model.k, r);
    model
        .users
        .iter()
        .zip(r)
        .map(|(u, ri)| {
            let m = u.weight * u.env.d1(&u.class, u.z(ri));
            (0..model.k)
                .map(|k| m * u.beta[k] - c[k] - 2.0 * model.lambda * x[k])
                .collect()
        })
        .collect()
}

fn column_sums(k: usize, r: &[Vec<f64>]) -> Vec<f64> {
    let mut x = vec![0.0; k];
    for ri in r {
        for (xk, v) in x.iter_mut().zip(ri) {
            *xk += v;
        }
    }
    x
}

/// Solve the demand program from a cold start.
pub fn solve_demand(model: &SpModel, c: &[f64], tol: f64) -> Result<DemandResult> {
    let start = vec![vec![0.0; model.k]; model.users.len()];
    solve_demand_from(model, c, tol, &start)
}

/// Solve the demand program starting from allocation `start`.
///
/// Non-convergence within [`MAX_SWEEPS`] is reported through
/// `converged = false`, not as an error.
pub fn solve_demand_from(
    model: &SpModel,
    c: &[f64],
    tol: f64,
    start: &[Vec<f64>],
) -> Result<DemandResult> {
    check_prices(model, c)?;
    if !(tol > 0.0) {
        return Err(Error::Domain {
            what: "tol",
            constraint: "> 0",
            value: tol,
        });
    }
    let n = model.users.len();
    let mut r: Vec<Vec<f64>> = if start.len() == n && start.iter().all(|s| s.len() == model.k) {
        start
            .iter()
            .map(|s| s.iter().map(|v| v.max(0.0)).collect())
            .collect()
    } else {
        vec![vec![0.0; model.k]; n]
    };
    let mut x = column_sums(model.k, &r);
    let mut a = vec![0.0; model.k];
    let mut converged = false;
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        for (u, ri) in model.users.iter().zip(r.iter_mut()) {
            for k in 0..model.k {
                x[k] -= ri[k];
                a[k] = c[k] + 2.0 * model.lambda * x[k];
            }
            best_response(u, &a, model.lambda, ri);
            for k in 0..model.k {
                x[k] += ri[k];
            }
        }
        // refresh x to avoid drift from incremental updates
        x = column_sums(model.k, &r);
        residual = residual_parts(model, c, &x, &r);
        if residual <= tol {
            converged = true;
            break;
        }
    }
    let z: Vec<f64> = model.users.iter().zip(&r).map(|(u, ri)| u.z(ri)).collect();
    let value = objective(model, c, &r);
    Ok(DemandResult {
        x,
        r,
        z,
        value,
        kkt_residual: residual,
        converged,
        sweeps,
    })
}

/// Exact maximizer of user `u`'s block given `a_k = c_k + 2λ X_{-i,k}`.
///
/// With `ν = ω û'(z)`, stationarity gives `r_k(ν) = max(0, (ν β_k - a_k)/2λ)`
/// and `ν` is the root of the strictly decreasing `ψ(ν) = ω û'(z(ν)) - ν`.
fn best_response(u: &ModelUser, a: &[f64], lambda: f64, r: &mut [f64]) {
    let inv = 0.5 / lambda;
    let nu_hi = u.weight * u.env.max_slope(&u.class);
    if u.weight <= 0.0 || u.beta.iter().zip(a).all(|(b, ak)| nu_hi * b <= *ak) {
        r.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let z_of = |nu: f64| -> (f64, f64) {
        let mut z = 0.0;
        let mut dz = 0.0;
        for (b, ak) in u.beta.iter().zip(a) {
            let t = nu * b - ak;
            if t > 0.0 {
                z += b * t * inv;
                dz += b * b * inv;
            }
        }
        (z, dz)
    };
    let psi = |nu: f64| -> (f64, f64) {
        let (z, dz) = z_of(nu);
        let (d1, d2) = (
            u.weight * u.env.d1(&u.class, z),
            u.weight * u.env.d2(&u.class, z),
        );
        (d1 - nu, d2 * dz - 1.0)
    };
    let (mut lo, mut hi) = (0.0, nu_hi);
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = psi(nu);
        if f == 0.0 {
            lo = nu;
            hi = nu;
            break;
        }
        if f > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let newton = nu - f / df;
        nu = if newton > lo && newton < hi && df < 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let nu = 0.5 * (lo + hi);
    for (k, v) in r.iter_mut().enumerate() {
        *v = ((nu * u.beta[k] - a[k]) * inv).max(0.0);
    }
}

fn residual_parts(model: &SpModel, c: &[f64], x: &[f64], r: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut mu = vec![f64::NEG_INFINITY; model.k];
    for (u, ri) in model.users.iter().zip(r) {
        let m = u.weight * u.env.d1(&u.class, u.z(ri).max(0.0));
        for k in 0..model.k {
            let g = m * u.beta[k] - c[k] - 2.0 * model.lambda * x[k];
            worst = worst.max(ri[k].min(-g).abs());
            mu[k] = mu[k].max(m * u.beta[k]);
        }
    }
    for k in 0..model.k {
        let dx = if mu[k].is_finite() {
            (mu[k] - c[k] - 2.0 * model.lambda * x[k]).abs()
        } else {
            f64::INFINITY
        };
        worst = worst.max(x[k].min(dx));
    }
    worst
}

/// Max over per-NP complementarity, per-user stationarity and feasibility
/// violations of a claimed demand solution.
pub fn kkt_residual(model: &SpModel, c: &[f64], result: &DemandResult) -> f64 {
    let mut worst = residual_parts(model, c, &result.x, &result.r);
    let sums = column_sums(model.k, &result.r);
    for (xk, sk) in result.x.iter().zip(&sums) {
        worst = worst.max((xk - sk).abs()).max((-xk).max(0.0));
    }
    for ((u, ri), zi) in model.users.iter().zip(&result.r).zip(&result.z) {
        worst = worst.max((u.z(ri) - zi).abs());
        for v in ri {
            worst = worst.max((-v).max(0.0));
        }
    }
    worst
}

/// Optimal value of the demand program at prices `c`.
pub fn net_indirect_utility(model: &SpModel, c: &[f64]) -> Result<f64> {
    Ok(solve_demand(model, c, DEFAULT_TOL)?.value)
}

/// Concave aggregate utility: the best envelope utility the SP can reach
/// while staying within `x`.
pub fn eval_u(model: &SpModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.k {
        return Err(Error::Dimension {
            what: "resource vector".into(),
            expected: model.k,
            got: x.len(),
        });
    }
    for &v in x {
        crate::error::check_nonneg("resource amount x", v)?;
    }
    let prog = Program {
        k: model.k,
        terms: model
            .users
            .iter()
            .map(|u| Term {
                class: &u.class,
                weight: u.weight,
                beta: &u.beta,
                env: u.env,
                lo: 0.0,
                hi: f64::INFINITY,
            })
            .collect(),
        prices: vec![0.0; model.k],
        lambda: 0.0,
        bound: x.to_vec(),
    };
    let gap = 1e-10 * (1.0 + model.total_weight());
    Ok(prog.solve(gap)?.value)
}
