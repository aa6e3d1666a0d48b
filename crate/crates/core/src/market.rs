//! The iterated market: auction, intra-slice allocation, feedback, learning.
//!
//! One cycle runs
//! 1. user arrivals (identity by default),
//! 2. the clock auction on the SPs' current parameter estimates,
//! 3. exact intra-slice allocation on the (optionally overbooked) demand,
//! 4. Bernoulli satisfaction feedback drawn under the true parameters,
//! 5. Metropolis updates of every learned class.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{certify_at, clock_auction, EquilibriumCertificate, Exchange};
use crate::error::{Error, Result};
use crate::inference::{
    metropolis_sample, update_prior, FeedbackRecord, Posterior, SamplerSettings,
};
use crate::scenario::{LearnSpec, Scenario};
use crate::sigprog::{solve_in_sl, solve_swm_models};
use crate::solver::{DemandResult, SpModel, SpSpec};
use crate::utility::{optimal_price, ServiceClass};

/// `x ∘ (1 + α/100)`.
pub fn overbook(x: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    if x.len() != alpha.len() {
        return Err(Error::Dimension {
            what: "overbooking percentages".into(),
            expected: x.len(),
            got: alpha.len(),
        });
    }
    x.iter()
        .zip(alpha)
        .map(|(&v, &a)| {
            crate::error::check_nonneg("resource amount x", v)?;
            crate::error::check_nonneg("overbooking percentage", a)?;
            Ok(v * (1.0 + a / 100.0))
        })
        .collect()
}

/// Per-NP amount promised beyond what was bought: `max(0, Σ_i r_i - x̂)`.
pub fn oversell_risk(x_hat: &[f64], r: &[Vec<f64>]) -> Vec<f64> {
    let mut used = vec![0.0; x_hat.len()];
    for ri in r {
        for (u, v) in used.iter_mut().zip(ri) {
            *u += v;
        }
    }
    used.iter().zip(x_hat).map(|(u, x)| (u - x).max(0.0)).collect()
}

/// Scale any residual over-demand back to capacity, NP by NP.
///
/// The auction stops at `‖Z‖ ≤ tol`, which may leave a small positive excess;
/// delivered bundles are rationed pro rata so supply is never exceeded.
pub fn ration(demands: &[DemandResult], capacity: &[f64]) -> Vec<Vec<f64>> {
    let k = capacity.len();
    let mut total = vec![0.0; k];
    for d in demands {
        for (t, x) in total.iter_mut().zip(&d.x) {
            *t += x;
        }
    }
    let scale: Vec<f64> = (0..k)
        .map(|j| if total[j] > capacity[j] { capacity[j] / total[j] } else { 1.0 })
        .collect();
    demands
        .iter()
        .map(|d| d.x.iter().zip(&scale).map(|(x, s)| x * s).collect())
        .collect()
}

/// A served user, as seen by the feedback stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Served {
    pub user_id: String,
    pub class_id: String,
    pub z: f64,
    pub p: f64,
}

/// Draw one Bernoulli satisfaction outcome per served user under the true
/// classes.
pub fn sample_feedback<R: Rng>(
    served: &[Served],
    true_classes: &[ServiceClass],
    pricing: bool,
    cycle: usize,
    rng: &mut R,
) -> Result<Vec<FeedbackRecord>> {
    served
        .iter()
        .map(|s| {
            let class = true_classes
                .iter()
                .find(|c| c.id == s.class_id)
                .ok_or_else(|| Error::scenario(format!("users.{}.class", s.user_id), "unknown class"))?;
            let mut prob = crate::utility::qos_satisfaction(s.z, class)?;
            if pricing {
                prob *= crate::utility::price_satisfaction(s.p, class)?;
            }
            let u: f64 = rng.random();
            Ok(FeedbackRecord {
                user_id: s.user_id.clone(),
                class_id: s.class_id.clone(),
                cycle,
                z: s.z,
                p: s.p,
                satisfied: u < prob,
            })
        })
        .collect()
}

/// Source of the users present in a cycle.
pub trait Arrivals {
    fn arrive(&mut self, cycle: usize, sps: &[SpSpec]) -> Vec<SpSpec>;
}

/// The same users every cycle.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedUsers;

impl Arrivals for FixedUsers {
    fn arrive(&mut self, _cycle: usize, sps: &[SpSpec]) -> Vec<SpSpec> {
        sps.to_vec()
    }
}

/// What the SPs currently believe about their users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    /// Index of the next cycle, starting at 1.
    pub cycle: usize,
    pub beliefs: Vec<ServiceClass>,
    pub priors: Vec<LearnSpec>,
}

impl MarketState {
    /// Initial beliefs: true parameters, except that learned parameters start
    /// at their prior means.
    pub fn new(scenario: &Scenario) -> Self {
        let priors = scenario
            .mcmc
            .as_ref()
            .map(|m| m.learn.clone())
            .unwrap_or_default();
        let beliefs = scenario
            .classes
            .iter()
            .map(|c| match priors.iter().find(|l| l.class == c.id) {
                Some(l) => l.prior.point_estimate(c),
                None => c.clone(),
            })
            .collect();
        MarketState {
            cycle: 1,
            beliefs,
            priors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user: String,
    pub class: String,
    pub r: Vec<f64>,
    pub z: f64,
    pub p: f64,
    /// Expected revenue under the true parameters.
    pub expected_revenue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpOutcome {
    pub sp: String,
    /// Resources bought at the clearing prices.
    pub acquired: Vec<f64>,
    /// Resources the intra-slice allocation was computed against.
    pub allotted: Vec<f64>,
    pub oversell_risk: Vec<f64>,
    /// Expected revenue under the SP's estimates.
    pub perceived_revenue: f64,
    /// Expected revenue under the true parameters.
    pub actual_revenue: f64,
    /// `Σ p_i f_i` over the drawn feedback.
    pub realized_revenue: f64,
    pub bnb_gap: f64,
    pub users: Vec<UserOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub class: String,
    pub free: Vec<String>,
    pub samples: usize,
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub acceptance_rate: f64,
    pub ess_hint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl From<&Posterior> for PosteriorSummary {
    fn from(p: &Posterior) -> Self {
        PosteriorSummary {
            class: p.class_id.clone(),
            free: p.free.clone(),
            samples: p.samples.len(),
            mean: p.mean,
            std: p.std,
            acceptance_rate: p.acceptance_rate,
            ess_hint: p.ess_hint,
            warning: p.warning.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub seed: u64,
    /// Class parameters the SPs used in this cycle.
    pub estimates: Vec<ServiceClass>,
    pub auction_converged: bool,
    pub auction_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auction_aborted: Option<String>,
    pub certificate: Option<EquilibriumCertificate>,
    pub sps: Vec<SpOutcome>,
    pub feedback: Vec<FeedbackRecord>,
    pub posteriors: Vec<PosteriorSummary>,
    /// Full posteriors, kept for CSV export.
    #[serde(skip)]
    pub posterior_samples: Vec<Posterior>,
}

impl CycleReport {
    pub fn perceived_revenue(&self) -> f64 {
        self.sps.iter().map(|s| s.perceived_revenue).sum()
    }

    pub fn actual_revenue(&self) -> f64 {
        self.sps.iter().map(|s| s.actual_revenue).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleOptions {
    /// Attach an equilibrium certificate (runs branch-and-bound per SP).
    pub certify: bool,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions { certify: true }
    }
}

fn stream_seed(seed: u64, cycle: usize, lane: u64) -> u64 {
    seed ^ (cycle as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn user_price(class: &ServiceClass, pricing: bool) -> Result<f64> {
    if pricing {
        optimal_price(class)
    } else {
        Ok(0.0)
    }
}

fn revenue(class: &ServiceClass, z: f64, p: f64, pricing: bool) -> f64 {
    if pricing {
        p * class.price_sat(p) * class.qos(z)
    } else {
        0.0
    }
}

/// Run one cycle with the bundled defaults (fixed users, certificate on).
pub fn run_cycle(scenario: &Scenario, state: &mut MarketState) -> Result<CycleReport> {
    run_cycle_with(scenario, state, &mut FixedUsers, CycleOptions::default())
}

pub fn run_cycle_with(
    scenario: &Scenario,
    state: &mut MarketState,
    arrivals: &mut dyn Arrivals,
    opts: CycleOptions,
) -> Result<CycleReport> {
    let cycle = state.cycle;
    let pricing = scenario.pricing.enabled;
    // S1
    let sps = arrivals.arrive(cycle, &scenario.sps);
    let models: Vec<SpModel> = sps
        .iter()
        .map(|sp| SpModel::new(sp, &state.beliefs, scenario.k(), pricing))
        .collect::<Result<_>>()?;
    let ex = Exchange::new(models, scenario.capacities())?;
    // S2
    let trace = clock_auction(&ex, &scenario.auction)?;
    let certificate = if opts.certify {
        Some(certify_at(&ex, trace.prices(), &trace.demands, scenario.auction.tol, scenario.bnb.tol)?)
    } else {
        None
    };
    // S3
    let acquired = ration(&trace.demands, &ex.capacity);
    let alpha = scenario.alpha();
    let allotted: Vec<Vec<f64>> = acquired
        .iter()
        .map(|x| overbook(x, &alpha))
        .collect::<Result<_>>()?;
    let in_sl = ex
        .models
        .par_iter()
        .zip(allotted.par_iter())
        .map(|(m, x)| solve_in_sl(m, x, scenario.bnb.tol))
        .collect::<Result<Vec<_>>>()?;
    // S4
    let mut served = Vec::new();
    let mut outcomes = Vec::new();
    for (((model, sp), alloc), (acq, allot)) in ex
        .models
        .iter()
        .zip(&sps)
        .zip(&in_sl)
        .zip(acquired.iter().zip(&allotted))
    {
        let mut users = Vec::new();
        let (mut perceived, mut actual) = (0.0, 0.0);
        for ((u, spec), (ri, &zi)) in model.users.iter().zip(&sp.users).zip(alloc.r.iter().zip(&alloc.z)) {
            let truth = scenario
                .class(&spec.class_id)
                .expect("validated class reference");
            let p = user_price(&u.class, pricing)?;
            perceived += revenue(&u.class, zi, p, pricing);
            let exp = revenue(truth, zi, p, pricing);
            actual += exp;
            served.push(Served {
                user_id: u.id.clone(),
                class_id: spec.class_id.clone(),
                z: zi,
                p,
            });
            users.push(UserOutcome {
                user: u.id.clone(),
                class: spec.class_id.clone(),
                r: ri.clone(),
                z: zi,
                p,
                expected_revenue: exp,
            });
        }
        outcomes.push(SpOutcome {
            sp: model.id.clone(),
            acquired: acq.clone(),
            allotted: allot.clone(),
            oversell_risk: oversell_risk(acq, &alloc.r),
            perceived_revenue: perceived,
            actual_revenue: actual,
            realized_revenue: 0.0,
            bnb_gap: alloc.gap,
            users,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scenario.seed, cycle, 0));
    let feedback = sample_feedback(&served, &scenario.classes, pricing, cycle, &mut rng)?;
    let mut idx = 0;
    for sp in outcomes.iter_mut() {
        for _ in 0..sp.users.len() {
            let f = &feedback[idx];
            if f.satisfied {
                sp.realized_revenue += f.p;
            }
            idx += 1;
        }
    }
    // S5
    let mut posterior_samples = Vec::new();
    if let Some(mcmc) = &scenario.mcmc {
        let settings = SamplerSettings {
            n_samples: mcmc.n_samples,
            burn_in: mcmc.burn_in(),
            thin: mcmc.thin,
            proposal_scale: mcmc.proposal_scale,
        };
        posterior_samples = state
            .priors
            .par_iter()
            .enumerate()
            .map(|(lane, learn)| {
                let known = state
                    .beliefs
                    .iter()
                    .find(|c| c.id == learn.class)
                    .expect("learned classes are validated");
                let data: Vec<FeedbackRecord> = feedback
                    .iter()
                    .filter(|f| f.class_id == learn.class)
                    .cloned()
                    .collect();
                metropolis_sample(
                    &learn.prior,
                    known,
                    &data,
                    pricing,
                    settings,
                    stream_seed(scenario.seed, cycle, lane as u64 + 1),
                )
            })
            .collect::<Result<Vec<_>>>()?;
    }
    let estimates = state.beliefs.clone();
    for post in &posterior_samples {
        if let Some(b) = state.beliefs.iter_mut().find(|c| c.id == post.class_id) {
            *b = post.estimate();
        }
        if let Some(l) = state.priors.iter_mut().find(|l| l.class == post.class_id) {
            l.prior = update_prior(post, &l.prior)?;
        }
    }
    state.cycle += 1;
    Ok(CycleReport {
        cycle,
        seed: scenario.seed,
        estimates,
        auction_converged: trace.converged,
        auction_iterations: trace.iterations,
        auction_aborted: trace.aborted.clone(),
        certificate,
        sps: outcomes,
        feedback,
        posteriors: posterior_samples.iter().map(PosteriorSummary::from).collect(),
        posterior_samples,
    })
}

/// Run `scenario.cycles` cycles from the initial beliefs.
pub fn run_market(scenario: &Scenario, opts: CycleOptions) -> Result<Vec<CycleReport>> {
    let mut state = MarketState::new(scenario);
    (0..scenario.cycles)
        .map(|_| run_cycle_with(scenario, &mut state, &mut FixedUsers, opts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Auction,
    Spp,
    Ospp,
    Swm,
}

impl Method {
    pub fn label(&self, alpha: &[f64]) -> String {
        match self {
            Method::Auction => "Auction".into(),
            Method::Spp => "SPP".into(),
            Method::Ospp => {
                let a = alpha.iter().cloned().fold(0.0, f64::max);
                format!("oSPP({a}%)")
            }
            Method::Swm => "SWM".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpAllocation {
    pub sp: String,
    pub x: Vec<f64>,
    pub revenue: f64,
    pub users: Vec<UserOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAllocation {
    pub method: Method,
    pub label: String,
    pub sps: Vec<SpAllocation>,
    pub total_revenue: f64,
    /// Branch-and-bound gap summed over the solves behind this method.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub c_dagger: Vec<f64>,
    pub auction_converged: bool,
    pub alpha: Vec<f64>,
    pub methods: Vec<MethodAllocation>,
}

impl MethodAllocation {
    /// Tabulate per-user allocations `r[m][i][k]` with their expected revenue
    /// under the classes carried by `models`.
    pub fn build(
        method: Method,
        label: String,
        models: &[SpModel],
        r: &[Vec<Vec<f64>>],
        pricing: bool,
        gap: f64,
    ) -> Result<Self> {
        let sps = allocation(models, r, pricing)?;
        Ok(MethodAllocation {
            method,
            label,
            total_revenue: sps.iter().map(|s| s.revenue).sum(),
            sps,
            gap,
        })
    }
}

impl Comparison {
    pub fn get(&self, m: Method) -> &MethodAllocation {
        self.methods
            .iter()
            .find(|a| a.method == m)
            .expect("every method is computed")
    }
}

fn allocation(
    models: &[SpModel],
    r: &[Vec<Vec<f64>>],
    pricing: bool,
) -> Result<Vec<SpAllocation>> {
    models
        .iter()
        .zip(r)
        .map(|(m, rm)| {
            let mut x = vec![0.0; m.k];
            let mut users = Vec::new();
            let mut total = 0.0;
            for (u, ri) in m.users.iter().zip(rm) {
                for (xk, v) in x.iter_mut().zip(ri) {
                    *xk += v;
                }
                let z = u.z(ri);
                let p = user_price(&u.class, pricing)?;
                let e = revenue(&u.class, z, p, pricing);
                total += e;
                users.push(UserOutcome {
                    user: u.id.clone(),
                    class: u.class.id.clone(),
                    r: ri.clone(),
                    z,
                    p,
                    expected_revenue: e,
                });
            }
            Ok(SpAllocation {
                sp: m.id.clone(),
                x,
                revenue: total,
                users,
            })
        })
        .collect()
}

/// Auction, SPP, oSPP(α) and SWM allocations under the true classes.
///
/// `alpha` overrides the scenario's overbooking percentages (which default
/// to 5% on every NP when absent).
pub fn compare_methods(scenario: &Scenario, alpha: Option<Vec<f64>>) -> Result<Comparison> {
    let pricing = scenario.pricing.enabled;
    let ex = Exchange::from_scenario(scenario, &scenario.classes)?;
    let trace = clock_auction(&ex, &scenario.auction)?;
    let alpha = alpha.unwrap_or_else(|| match &scenario.overbook {
        Some(o) => o.alpha.clone(),
        None => vec![5.0; scenario.k()],
    });
    let acquired = ration(&trace.demands, &ex.capacity);
    let tol = scenario.bnb.tol;
    let mut methods = Vec::new();

    // Auction: the concavified demand allocation, scaled like x when rationed.
    let r_auction: Vec<Vec<Vec<f64>>> = trace
        .demands
        .iter()
        .zip(&acquired)
        .map(|(d, x)| {
            d.r.iter()
                .map(|ri| {
                    ri.iter()
                        .enumerate()
                        .map(|(k, v)| if d.x[k] > 0.0 { v * x[k] / d.x[k] } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    methods.push((Method::Auction, r_auction, 0.0));

    for (method, bundles) in [
        (Method::Spp, acquired.clone()),
        (
            Method::Ospp,
            acquired
                .iter()
                .map(|x| overbook(x, &alpha))
                .collect::<Result<Vec<_>>>()?,
        ),
    ] {
        let res = ex
            .models
            .par_iter()
            .zip(bundles.par_iter())
            .map(|(m, x)| solve_in_sl(m, x, tol))
            .collect::<Result<Vec<_>>>()?;
        let gap = res.iter().map(|r| r.gap).sum();
        methods.push((method, res.into_iter().map(|r| r.r).collect(), gap));
    }

    let swm = solve_swm_models(&ex.models, &ex.capacity, tol)?;
    methods.push((Method::Swm, swm.r, swm.gap));

    let methods = methods
        .into_iter()
        .map(|(method, r, gap)| MethodAllocation::build(method, method.label(&alpha), &ex.models, &r, pricing, gap))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        c_dagger: trace.prices().to_vec(),
        auction_converged: trace.converged,
        alpha,
        methods,
    })
}

/// `method,sp,np,user,r,z,p,expected_revenue`, one row per user and NP.
pub fn write_allocations_csv<W: Write>(writer: W, methods: &[MethodAllocation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "sp", "np", "user", "r", "z", "p", "expected_revenue"])?;
    for m in methods {
        for sp in &m.sps {
            for u in &sp.users {
                for (k, v) in u.r.iter().enumerate() {
                    w.write_record([
                        m.label.clone(),
                        sp.sp.clone(),
                        (k + 1).to_string(),
                        u.user.clone(),
                        v.to_string(),
                        u.z.to_string(),
                        u.p.to_string(),
                        u.expected_revenue.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Allocation rows of a cycle report, labelled with the cycle's method.
pub fn cycle_allocations(report: &CycleReport, label: &str) -> MethodAllocation {
    let sps: Vec<SpAllocation> = report
        .sps
        .iter()
        .map(|s| SpAllocation {
            sp: s.sp.clone(),
            x: s.allotted.clone(),
            revenue: s.actual_revenue,
            users: s.users.clone(),
        })
        .collect();
    MethodAllocation {
        method: Method::Spp,
        label: label.to_string(),
        total_revenue: sps.iter().map(|s| s.revenue).sum(),
        gap: report.sps.iter().map(|s| s.bnb_gap).sum(),
        sps,
    }
}
