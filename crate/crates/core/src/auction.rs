//! Discrete clock auction over NP resources and equilibrium certificates.
//!
//! The auctioneer announces prices `c`, every SP answers with its concavified
//! demand, and prices move with the excess demand:
//! `c ← max(floor, c + κ Z(c))`. Along the way the trace records
//! `V(c) = cᵀC + Σ_m V_m(c)`, which the continuous dynamics decrease.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::sigprog::{default_tol, maximize_sum_sigmoids, solve_in_sl, SigProgInstance};
use crate::solver::{solve_demand_from, DemandResult, SpModel};
use crate::utility::{epsilon_bound, ServiceClass};

/// Window for the oscillation abort.
pub const OSCILLATION_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuctionParams {
    pub kappa: f64,
    pub c_init: Vec<f64>,
    /// Stop once `‖Z‖₂ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default = "default_floor")]
    pub price_floor: f64,
    /// KKT tolerance of the per-SP demand solves.
    #[serde(default = "default_demand_tol")]
    pub demand_tol: f64,
}

fn default_floor() -> f64 {
    1e-6
}

fn default_demand_tol() -> f64 {
    crate::solver::DEFAULT_TOL
}

impl AuctionParams {
    /// Defaults for capacities `capacity`: tolerance `10⁻² ‖C‖₂/√K`.
    pub fn defaults_for(capacity: &[f64], c_init: Vec<f64>) -> Self {
        let norm = capacity.iter().map(|v| v * v).sum::<f64>().sqrt();
        AuctionParams {
            kappa: 1e-4,
            c_init,
            tol: 1e-2 * norm / (capacity.len() as f64).sqrt(),
            max_iter: 100_000,
            price_floor: default_floor(),
            demand_tol: default_demand_tol(),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::scenario(format!("auction.{key}"), format!("must be > 0, got {v}")))
            }
        };
        positive("kappa", self.kappa)?;
        positive("tol", self.tol)?;
        positive("price_floor", self.price_floor)?;
        positive("demand_tol", self.demand_tol)?;
        if self.c_init.len() != k {
            return Err(Error::scenario(
                "auction.c_init",
                format!("expected {k} prices, got {}", self.c_init.len()),
            ));
        }
        if self.c_init.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::scenario("auction.c_init", "prices must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The auction's view of a market: SP demand models and NP capacities.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub models: Vec<SpModel>,
    pub capacity: Vec<f64>,
}

impl Exchange {
    pub fn new(models: Vec<SpModel>, capacity: Vec<f64>) -> Result<Self> {
        for m in &models {
            if m.k != capacity.len() {
                return Err(Error::Dimension {
                    what: format!("NP count of SP `{}`", m.id),
                    expected: capacity.len(),
                    got: m.k,
                });
            }
        }
        Ok(Exchange { models, capacity })
    }

    /// Market of `scenario` under the given (true or believed) classes.
    pub fn from_scenario(scenario: &Scenario, classes: &[ServiceClass]) -> Result<Self> {
        Self::new(scenario.models(classes)?, scenario.capacities())
    }

    pub fn k(&self) -> usize {
        self.capacity.len()
    }

    /// Demand of every SP at `c`, warm-started from `start` when given.
    pub fn demands(
        &self,
        c: &[f64],
        tol: f64,
        start: Option<&[DemandResult]>,
    ) -> Result<Vec<DemandResult>> {
        self.models
            .par_iter()
            .enumerate()
            .map(|(m, model)| {
                let cold;
                let init = match start {
                    Some(prev) => &prev[m].r,
                    None => {
                        cold = vec![vec![0.0; model.k]; model.users.len()];
                        &cold
                    }
                };
                solve_demand_from(model, c, tol, init)
            })
            .collect()
    }

    fn summarize(&self, c: &[f64], demands: &[DemandResult]) -> (Vec<f64>, f64) {
        let mut z: Vec<f64> = self.capacity.iter().map(|v| -v).collect();
        for d in demands {
            for (zk, xk) in z.iter_mut().zip(&d.x) {
                *zk += xk;
            }
        }
        let v = dot(c, &self.capacity) + demands.iter().map(|d| d.value).sum::<f64>();
        (z, v)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Aggregate demand minus supply at `c`.
pub fn excess_demand(ex: &Exchange, c: &[f64], tol: f64) -> Result<Vec<f64>> {
    let d = ex.demands(c, tol, None)?;
    Ok(ex.summarize(c, &d).0)
}

/// `V(c) = cᵀC + Σ_m V_m(c)`.
pub fn lyapunov(ex: &Exchange, c: &[f64], tol: f64) -> Result<f64> {
    let d = ex.demands(c, tol, None)?;
    Ok(ex.summarize(c, &d).1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionRecord {
    pub iter: usize,
    pub c: Vec<f64>,
    pub z: Vec<f64>,
    pub z_norm: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionTrace {
    pub records: Vec<AuctionRecord>,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the run stopped on the oscillation rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    /// Demand solves that hit their sweep cap.
    pub unconverged_demands: usize,
    /// Demands at the final price vector.
    #[serde(skip)]
    pub demands: Vec<DemandResult>,
}

impl AuctionTrace {
    pub fn last(&self) -> &AuctionRecord {
        self.records.last().expect("a trace has at least one record")
    }

    /// Final price vector.
    pub fn prices(&self) -> &[f64] {
        &self.last().c
    }
}

/// Run the clock auction without certifying the result.
pub fn clock_auction(ex: &Exchange, params: &AuctionParams) -> Result<AuctionTrace> {
    params.validate(ex.k())?;
    let mut c: Vec<f64> = params
        .c_init
        .iter()
        .map(|v| v.max(params.price_floor))
        .collect();
    let mut records: Vec<AuctionRecord> = Vec::new();
    let mut demands: Option<Vec<DemandResult>> = None;
    let mut unconverged = 0;
    let mut converged = false;
    let mut aborted = None;
    for t in 0..=params.max_iter {
        let d = ex.demands(&c, params.demand_tol, demands.as_deref())?;
        unconverged += d.iter().filter(|r| !r.converged).count();
        let (z, v) = ex.summarize(&c, &d);
        let z_norm = norm(&z);
        records.push(AuctionRecord {
            iter: t,
            c: c.clone(),
            z: z.clone(),
            z_norm,
            v,
        });
        demands = Some(d);
        if z_norm <= params.tol {
            converged = true;
            break;
        }
        if stalled(&records) {
            aborted = Some(format!(
                "excess-demand norm did not improve over {OSCILLATION_WINDOW} iterations; \
                 step size kappa = {} is likely too large, or no clearing price lies above the floor",
                params.kappa
            ));
            break;
        }
        if t == params.max_iter {
            break;
        }
        for (ck, zk) in c.iter_mut().zip(&z) {
            *ck = (*ck + params.kappa * zk).max(params.price_floor);
        }
    }
    let iterations = records.len() - 1;
    Ok(AuctionTrace {
        records,
        converged,
        iterations,
        aborted,
        unconverged_demands: unconverged,
        demands: demands.unwrap_or_default(),
    })
}

/// No iterate in the last window has a smaller `‖Z‖` than the one just
/// before it.
fn stalled(records: &[AuctionRecord]) -> bool {
    let n = records.len();
    if n <= OSCILLATION_WINDOW {
        return false;
    }
    let base = records[n - OSCILLATION_WINDOW - 1].z_norm;
    records[n - OSCILLATION_WINDOW..].iter().all(|r| r.z_norm >= base)
}

/// Run the auction and certify the final prices.
pub fn run_auction(
    ex: &Exchange,
    params: &AuctionParams,
    bnb_tol: Option<f64>,
) -> Result<(AuctionTrace, EquilibriumCertificate)> {
    let trace = clock_auction(ex, params)?;
    let cert = certify_at(ex, trace.prices(), &trace.demands, params.tol, bnb_tol)?;
    Ok((trace, cert))
}

/// Per-SP part of an equilibrium certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpCertificate {
    pub sp: String,
    pub epsilon: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Best profit found for the exact problem, and its bound gap.
    pub psi_incumbent: f64,
    pub psi_gap: f64,
    /// Profit of the demanded bundle with an exact intra-slice allocation.
    pub psi_realized: f64,
    pub profit_lo: f64,
    pub profit_hi: f64,
    pub within_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCertificate {
    pub c_dagger: Vec<f64>,
    pub excess_norm: f64,
    /// `|C_k - Σ_m x̂_{m,k}|` per NP.
    pub supply_gap: Vec<f64>,
    pub supply_ok: bool,
    pub sps: Vec<SpCertificate>,
    pub valid: bool,
    /// Valid with every ε zero: an exact competitive equilibrium.
    pub exact: bool,
}

/// Certify prices `c` against supply tolerance `tol`.
pub fn verify_equilibrium(
    ex: &Exchange,
    c: &[f64],
    tol: f64,
    demand_tol: f64,
    bnb_tol: Option<f64>,
) -> Result<EquilibriumCertificate> {
    let d = ex.demands(c, demand_tol, None)?;
    certify_at(ex, c, &d, tol, bnb_tol)
}

pub fn certify_at(
    ex: &Exchange,
    c: &[f64],
    demands: &[DemandResult],
    tol: f64,
    bnb_tol: Option<f64>,
) -> Result<EquilibriumCertificate> {
    let (z, _) = ex.summarize(c, demands);
    let supply_gap: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    let supply_ok = supply_gap.iter().all(|&g| g <= tol);
    let sps = ex
        .models
        .par_iter()
        .zip(demands.par_iter())
        .map(|(model, d)| certify_sp(model, c, d, bnb_tol))
        .collect::<Result<Vec<_>>>()?;
    let valid = supply_ok && sps.iter().all(|s| s.within_band);
    let exact = valid && sps.iter().all(|s| s.epsilon == 0.0);
    Ok(EquilibriumCertificate {
        c_dagger: c.to_vec(),
        excess_norm: norm(&z),
        supply_gap,
        supply_ok,
        sps,
        valid,
        exact,
    })
}

fn certify_sp(
    model: &SpModel,
    c: &[f64],
    d: &DemandResult,
    bnb_tol: Option<f64>,
) -> Result<SpCertificate> {
    let epsilon = epsilon_bound(model.users.iter().map(|u| (u.weight, &u.class)), model.k);
    let unbounded = vec![f64::INFINITY; model.k];
    let base = SigProgInstance::from_models(std::slice::from_ref(model), unbounded)?;
    let tol = bnb_tol.unwrap_or_else(|| default_tol(&base));
    let exact = base.clone().with_prices(c.to_vec(), 0.0)?;
    let p = maximize_sum_sigmoids(&exact, tol, crate::sigprog::DEFAULT_NODE_BUDGET)?;
    let regular = base.with_prices(c.to_vec(), model.lambda)?;
    let p_bar = maximize_sum_sigmoids(&regular, tol, crate::sigprog::DEFAULT_NODE_BUDGET)?;
    let sq = |x: &[f64]| dot(x, x);
    let x_hat = sq(&d.x);
    let delta1 = model.lambda * (sq(&p.x()) - x_hat);
    let delta2 = model.lambda * (x_hat - sq(&p_bar.x()));
    let in_sl = solve_in_sl(model, &d.x, Some(tol))?;
    let psi_realized = in_sl.value - dot(c, &d.x);
    let profit_lo = p.value - epsilon - delta1;
    let profit_hi = p.value + p.gap + delta2.max(0.0);
    // the intra-slice solve is itself only accurate to its gap
    let slack = in_sl.gap;
    Ok(SpCertificate {
        sp: model.id.clone(),
        epsilon,
        delta1,
        delta2,
        psi_incumbent: p.value,
        psi_gap: p.gap,
        psi_realized,
        profit_lo,
        profit_hi,
        within_band: psi_realized + slack >= profit_lo && psi_realized <= profit_hi,
    })
}

/// `iter,c_1..c_K,Z_1..Z_K,Znorm,V` with round-trip decimal values.
pub fn write_trace_csv<W: Write>(writer: W, trace: &AuctionTrace) -> Result<()> {
    let k = trace.records.first().map_or(0, |r| r.c.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["iter".to_string()];
    header.extend((1..=k).map(|i| format!("c_{i}")));
    header.extend((1..=k).map(|i| format!("Z_{i}")));
    header.push("Znorm".into());
    header.push("V".into());
    w.write_record(&header)?;
    for r in &trace.records {
        let mut row = vec![r.iter.to_string()];
        row.extend(r.c.iter().map(f64::to_string));
        row.extend(r.z.iter().map(f64::to_string));
        row.push(r.z_norm.to_string());
        row.push(r.v.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
