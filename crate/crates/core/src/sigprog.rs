//! Sigmoidal programming by spatial branch-and-bound.
//!
//! Maximizes `Σ_i ω_i u_i(β_iᵀ r_i) - cᵀx - λ‖x‖²` over `r ⪰ 0`, `x = Σ r_i ⪯ C`
//! where the `u_i` are the raw (non-concave) QoS sigmoids. Each node restricts
//! every `z_i` to an interval and bounds the node by the concave program with
//! each `u_i` replaced by its envelope on that interval.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::barrier::{Program, Term};
use crate::error::{Error, Result};
use crate::solver::SpModel;
use crate::utility::{Envelope, ServiceClass};

/// Node budget used when the caller does not pick one.
pub const DEFAULT_NODE_BUDGET: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SigUser {
    pub id: String,
    pub class: ServiceClass,
    pub weight: f64,
    pub beta: Vec<f64>,
    /// Index of the owning SP; only used to split results.
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigProgInstance {
    pub k: usize,
    pub users: Vec<SigUser>,
    /// Upper bound on the total allocation per NP.
    pub capacity: Vec<f64>,
    /// Linear resource prices; zero for pure allocation problems.
    pub prices: Vec<f64>,
    pub lambda: f64,
}

impl SigProgInstance {
    pub fn new(users: Vec<SigUser>, capacity: Vec<f64>) -> Result<Self> {
        let k = capacity.len();
        for u in &users {
            if u.beta.len() != k {
                return Err(Error::Dimension {
                    what: format!("beta of user `{}`", u.id),
                    expected: k,
                    got: u.beta.len(),
                });
            }
        }
        // Infinite capacity is allowed: priced problems bound themselves.
        if let Some(&c) = capacity.iter().find(|c| !(**c >= 0.0)) {
            return Err(Error::Domain {
                what: "capacity",
                constraint: ">= 0",
                value: c,
            });
        }
        Ok(SigProgInstance {
            k,
            users,
            prices: vec![0.0; k],
            capacity,
            lambda: 0.0,
        })
    }

    /// Instance built from the users of several SPs, tagged by position.
    pub fn from_models(models: &[SpModel], capacity: Vec<f64>) -> Result<Self> {
        let users = models
            .iter()
            .enumerate()
            .flat_map(|(g, m)| {
                m.users.iter().map(move |u| SigUser {
                    id: u.id.clone(),
                    class: u.class.clone(),
                    weight: u.weight,
                    beta: u.beta.clone(),
                    group: g,
                })
            })
            .collect();
        Self::new(users, capacity)
    }

    pub fn with_prices(mut self, prices: Vec<f64>, lambda: f64) -> Result<Self> {
        if prices.len() != self.k {
            return Err(Error::Dimension {
                what: "price vector".into(),
                expected: self.k,
                got: prices.len(),
            });
        }
        self.prices = prices;
        self.lambda = lambda;
        Ok(self)
    }

    pub fn total_weight(&self) -> f64 {
        self.users.iter().map(|u| u.weight).sum()
    }

    /// Exact (sigmoid) objective at `r`.
    pub fn objective(&self, r: &[Vec<f64>]) -> f64 {
        let mut x = vec![0.0; self.k];
        let mut v = 0.0;
        for (u, ri) in self.users.iter().zip(r) {
            let z: f64 = u.beta.iter().zip(ri).map(|(b, q)| b * q).sum();
            v += u.weight * u.class.qos(z);
            for (xk, q) in x.iter_mut().zip(ri) {
                *xk += q;
            }
        }
        for (k, xk) in x.iter().enumerate() {
            v -= self.prices[k] * xk + self.lambda * xk * xk;
        }
        v
    }
}

/// Incumbent and global bound after a number of expanded nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnbProgress {
    pub nodes: usize,
    pub incumbent: f64,
    pub upper_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnbResult {
    pub r: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub value: f64,
    pub upper_bound: f64,
    /// `upper_bound - value`.
    pub gap: f64,
    pub nodes: usize,
    /// False when the node budget ran out before the gap closed.
    pub converged: bool,
    pub history: Vec<BnbProgress>,
}

impl BnbResult {
    pub fn x(&self) -> Vec<f64> {
        let k = self.r.first().map_or(0, |r| r.len());
        let mut x = vec![0.0; k];
        for ri in &self.r {
            for (xk, q) in x.iter_mut().zip(ri) {
                *xk += q;
            }
        }
        x
    }
}

struct Node {
    lo: Vec<f64>,
    hi: Vec<f64>,
    ub: f64,
}

struct Open(Node);

impl PartialEq for Open {
    fn eq(&self, other: &Self) -> bool {
        self.0.ub.total_cmp(&other.0.ub) == Ordering::Equal
    }
}
impl Eq for Open {}
impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.ub.total_cmp(&other.0.ub)
    }
}

struct Relaxed {
    r: Vec<Vec<f64>>,
    z: Vec<f64>,
    ub: f64,
    envs: Vec<Envelope>,
}

fn relax(inst: &SigProgInstance, lo: &[f64], hi: &[f64], root_hi: &[f64], gap: f64) -> Result<Relaxed> {
    let envs: Vec<Envelope> = inst
        .users
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(u, (&l, &h))| Envelope::on_interval(&u.class, l, h))
        .collect();
    let bound = bounds(inst);
    let prog = Program {
        k: inst.k,
        terms: inst
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| Term {
                class: &u.class,
                weight: u.weight,
                beta: &u.beta,
                env: envs[i],
                lo: lo[i],
                hi: if hi[i] < root_hi[i] { hi[i] } else { f64::INFINITY },
            })
            .collect(),
        prices: inst.prices.clone(),
        lambda: inst.lambda,
        bound,
    };
    let mut sol = prog.solve(gap)?;
    let z = purify(inst, &envs, lo, &mut sol.r);
    Ok(Relaxed {
        ub: sol.value + sol.gap,
        r: sol.r,
        z,
        envs,
    })
}

/// Per-NP bound on the total allocation. Without a capacity, buying more
/// than `Σ ω / c_k` can only lose money.
fn bounds(inst: &SigProgInstance) -> Vec<f64> {
    (0..inst.k)
        .map(|k| {
            if inst.prices[k] > 0.0 && inst.capacity[k].is_infinite() {
                inst.total_weight() / inst.prices[k] + 1.0
            } else {
                inst.capacity[k]
            }
        })
        .collect()
}

/// Shift resources between users sitting on the linear part of their
/// envelopes without lowering the relaxed objective.
///
/// Interior-point solutions spread resources evenly over users with equal
/// marginal value, which leaves all of them on their chords. Moving an NP's
/// resources from one chord user to another keeps every `x_k` fixed, so the
/// relaxed objective changes linearly; concentrating them empties the chords
/// and leaves at most a few users with an envelope gap. Returns the new `z`.
#[allow(clippy::needless_range_loop)]
fn purify(inst: &SigProgInstance, envs: &[Envelope], lo: &[f64], r: &mut [Vec<f64>]) -> Vec<f64> {
    let users = &inst.users;
    let mut z: Vec<f64> = users
        .iter()
        .zip(r.iter())
        .map(|(u, ri)| u.beta.iter().zip(ri).map(|(b, q)| b * q).sum())
        .collect();
    let eps = |w: f64| 1e-9 * (1.0 + w.abs());
    let on_chord = |i: usize, z: &[f64]| envs[i].w > envs[i].lo && z[i] < envs[i].w - eps(envs[i].w);
    for _ in 0..4 * (users.len() * inst.k + 1) {
        let mut best: Option<(f64, f64, usize, usize, usize)> = None;
        for k in 0..inst.k {
            for i in (0..users.len()).filter(|&i| on_chord(i, &z)) {
                let gain_i = users[i].weight * envs[i].slope * users[i].beta[k];
                for j in (0..users.len()).filter(|&j| j != i && on_chord(j, &z)) {
                    if r[j][k] <= eps(r[j][k]) || z[j] - lo[j] <= eps(z[j]) {
                        continue;
                    }
                    let gain_j = users[j].weight * envs[j].slope * users[j].beta[k];
                    let d = gain_i - gain_j;
                    if d < -1e-12 * (gain_i.abs() + gain_j.abs()) {
                        continue;
                    }
                    let key = (d, z[i] - z[j]);
                    if best.is_none_or(|b| key.0 > b.0 || (key.0 == b.0 && key.1 > b.1)) {
                        best = Some((key.0, key.1, k, i, j));
                    }
                }
            }
        }
        let Some((_, _, k, i, j)) = best else { break };
        let (bi, bj) = (users[i].beta[k], users[j].beta[k]);
        let delta = ((envs[i].w - z[i]) / bi)
            .min(r[j][k])
            .min((z[j] - lo[j]) / bj);
        r[i][k] += delta;
        r[j][k] -= delta;
        z[i] += bi * delta;
        z[j] -= bj * delta;
    }
    z
}

/// Branch-and-bound for the exact sigmoid program.
///
/// Returns the incumbent once the global gap is at most `tol`, or when
/// `node_budget` nodes have been expanded (then `converged` is false and
/// `gap` carries the residual).
pub fn maximize_sum_sigmoids(
    inst: &SigProgInstance,
    tol: f64,
    node_budget: usize,
) -> Result<BnbResult> {
    if !(tol > 0.0) {
        return Err(Error::Domain {
            what: "tol",
            constraint: "> 0",
            value: tol,
        });
    }
    let n = inst.users.len();
    // Largest reachable z per user (capacity, or the revenue box with prices).
    let bound = bounds(inst);
    let root_hi: Vec<f64> = inst
        .users
        .iter()
        .map(|u| u.beta.iter().zip(&bound).map(|(b, c)| b * c).sum())
        .collect();
    let barrier_gap = (1e-3 * tol).min(1e-9 * (1.0 + inst.total_weight()));
    let lo0 = vec![0.0; n];
    let root = relax(inst, &lo0, &root_hi, &root_hi, barrier_gap)?;

    let mut best_r = root.r.clone();
    let mut best = inst.objective(&root.r);
    let mut heap = BinaryHeap::new();
    let mut history = Vec::new();
    let mut nodes = 1;
    let mut pending = Some((lo0, root_hi.clone(), root));
    // Largest bound among nodes dropped without being fathomed; keeps the
    // reported global bound valid.
    let mut closed_ub = f64::NEG_INFINITY;

    loop {
        if let Some((lo, hi, rel)) = pending.take() {
            let val = inst.objective(&rel.r);
            if val > best {
                best = val;
                best_r = rel.r.clone();
            }
            if rel.ub - best <= tol || !branch(inst, &lo, &hi, &rel, &mut heap) {
                closed_ub = closed_ub.max(rel.ub);
            }
        }
        let ub = heap
            .peek()
            .map_or(f64::NEG_INFINITY, |o: &Open| o.0.ub)
            .max(closed_ub)
            .max(best);
        history.push(BnbProgress {
            nodes,
            incumbent: best,
            upper_bound: ub,
        });
        if ub - best <= tol || nodes >= node_budget {
            let z = inst
                .users
                .iter()
                .zip(&best_r)
                .map(|(u, ri)| u.beta.iter().zip(ri).map(|(b, q)| b * q).sum())
                .collect();
            return Ok(BnbResult {
                r: best_r,
                z,
                value: best,
                upper_bound: ub,
                gap: ub - best,
                nodes,
                converged: ub - best <= tol,
                history,
            });
        }
        let Open(node) = heap.pop().expect("nonempty when gap is open");
        if node.ub - best <= tol {
            closed_ub = closed_ub.max(node.ub);
            continue;
        }
        nodes += 1;
        match relax(inst, &node.lo, &node.hi, &root_hi, barrier_gap) {
            Ok(mut rel) => {
                rel.ub = rel.ub.min(node.ub);
                pending = Some((node.lo, node.hi, rel));
            }
            Err(Error::Infeasible(_)) => {}
            Err(e) => return Err(e),
        }
    }
}

/// Split the node on the user with the largest envelope gap. Returns false
/// when there is nothing left to split.
fn branch(inst: &SigProgInstance, lo: &[f64], hi: &[f64], rel: &Relaxed, heap: &mut BinaryHeap<Open>) -> bool {
    let mut pick = None;
    let mut worst = 0.0;
    for (i, u) in inst.users.iter().enumerate() {
        let z = rel.z[i];
        let g = u.weight * (rel.envs[i].value(&u.class, z) - u.class.qos(z));
        if g > worst {
            worst = g;
            pick = Some(i);
        }
    }
    let Some(i) = pick else { return false };
    let (l, h) = (lo[i], hi[i]);
    let width = h - l;
    if width <= 1e-9 * (1.0 + h.abs()) {
        return false;
    }
    let mut split = rel.z[i];
    if split - l <= 1e-6 * width || h - split <= 1e-6 * width {
        split = 0.5 * (l + h);
    }
    let mut left_hi = hi.to_vec();
    left_hi[i] = split;
    let mut right_lo = lo.to_vec();
    right_lo[i] = split;
    heap.push(Open(Node {
        lo: lo.to_vec(),
        hi: left_hi,
        ub: rel.ub,
    }));
    heap.push(Open(Node {
        lo: right_lo,
        hi: hi.to_vec(),
        ub: rel.ub,
    }));
    true
}

/// Default tolerance `10⁻³ Σ ω_i`.
pub fn default_tol(inst: &SigProgInstance) -> f64 {
    1e-3 * inst.total_weight().max(1e-12)
}

/// Exact intra-slice allocation of one SP's users within `x_m`.
pub fn solve_in_sl(model: &SpModel, x_m: &[f64], tol: Option<f64>) -> Result<BnbResult> {
    if x_m.len() != model.k {
        return Err(Error::Dimension {
            what: "resource vector".into(),
            expected: model.k,
            got: x_m.len(),
        });
    }
    let inst = SigProgInstance::from_models(std::slice::from_ref(model), x_m.to_vec())?;
    let tol = tol.unwrap_or_else(|| default_tol(&inst));
    maximize_sum_sigmoids(&inst, tol, DEFAULT_NODE_BUDGET)
}

/// Social-welfare-maximizing allocation across SPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwmResult {
    /// Per SP, per user allocation.
    pub r: Vec<Vec<Vec<f64>>>,
    /// Per SP, per user aggregated resources.
    pub z: Vec<Vec<f64>>,
    /// Per SP resource totals.
    pub x: Vec<Vec<f64>>,
    /// Per SP utility `Σ_i ω_i u_i(z_i)`.
    pub utility: Vec<f64>,
    pub welfare: f64,
    pub gap: f64,
    pub converged: bool,
    pub nodes: usize,
}

pub fn solve_swm_models(models: &[SpModel], capacity: &[f64], tol: Option<f64>) -> Result<SwmResult> {
    let inst = SigProgInstance::from_models(models, capacity.to_vec())?;
    let tol = tol.unwrap_or_else(|| default_tol(&inst));
    let res = maximize_sum_sigmoids(&inst, tol, DEFAULT_NODE_BUDGET)?;
    let mut out = SwmResult {
        r: vec![Vec::new(); models.len()],
        z: vec![Vec::new(); models.len()],
        x: vec![vec![0.0; inst.k]; models.len()],
        utility: vec![0.0; models.len()],
        welfare: res.value,
        gap: res.gap,
        converged: res.converged,
        nodes: res.nodes,
    };
    for ((u, ri), zi) in inst.users.iter().zip(res.r).zip(res.z) {
        let g = u.group;
        for (xk, q) in out.x[g].iter_mut().zip(&ri) {
            *xk += q;
        }
        out.utility[g] += u.weight * u.class.qos(zi);
        out.r[g].push(ri);
        out.z[g].push(zi);
    }
    Ok(out)
}

/// Centralized welfare maximization over the scenario's true classes.
pub fn solve_swm(scenario: &crate::scenario::Scenario, tol: Option<f64>) -> Result<SwmResult> {
    let models = scenario.models(&scenario.classes)?;
    solve_swm_models(&models, &scenario.capacities(), tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(w: f64, t: f64, k: f64, beta: &[f64]) -> SigUser {
        SigUser {
            id: format!("u{t}-{k}"),
            class: ServiceClass::new("c", t, k, t, k).unwrap(),
            weight: w,
            beta: beta.to_vec(),
            group: 0,
        }
    }

    #[test]
    fn concave_users_close_at_root() {
        let inst = SigProgInstance::new(
            vec![user(1.0, 0.2, 0.0, &[1.0]), user(1.0, 0.5, 0.0, &[1.0])],
            vec![20.0],
        )
        .unwrap();
        let res = maximize_sum_sigmoids(&inst, 1e-6, 100).unwrap();
        assert_eq!(res.nodes, 1);
        assert!(res.gap <= 1e-6);
    }

    #[test]
    fn zero_capacity_gives_baseline() {
        let inst = SigProgInstance::new(
            vec![user(1.0, 2.0, 100.0, &[1.0]), user(2.0, 0.2, 50.0, &[1.0])],
            vec![0.0],
        )
        .unwrap();
        let res = maximize_sum_sigmoids(&inst, 1e-3, 100).unwrap();
        let base = ServiceClass::new("a", 2.0, 100.0, 0.0, 0.0).unwrap().qos(0.0)
            + 2.0 * ServiceClass::new("b", 0.2, 50.0, 0.0, 0.0).unwrap().qos(0.0);
        assert!((res.value - base).abs() < 1e-12);
        assert!(res.r.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn two_steep_users_concentrate() {
        let inst = SigProgInstance::new(
            vec![user(1.0, 2.0, 100.0, &[1.0]), user(1.0, 2.0, 100.0, &[1.0])],
            vec![150.0],
        )
        .unwrap();
        let res = maximize_sum_sigmoids(&inst, 1e-3, 10_000).unwrap();
        assert!(res.converged);
        assert!(res.z.iter().cloned().fold(0.0, f64::max) >= 103.0);
        assert!((res.value - 1.0).abs() <= 1e-3, "{}", res.value);
    }
}
