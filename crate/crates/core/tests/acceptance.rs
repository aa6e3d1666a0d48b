//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p netslice-core --test acceptance -- --nocapture`

use std::time::Instant;

use netslice::auction::{clock_auction, AuctionParams, AuctionTrace, Exchange};
use netslice::inference::{metropolis_sample, ParamPrior, PriorSpec, SamplerSettings};
use netslice::market::{compare_methods, run_market, CycleOptions, Method};
use netslice::scenario::{bundled, Scenario};
use netslice::sigprog::{maximize_sum_sigmoids, solve_swm, SigProgInstance, SigUser};
use netslice::solver::{kkt_residual, solve_demand, ModelUser, SpModel, DEFAULT_TOL};
use netslice::utility::{build_envelope, envelope_eval, epsilon_bound, ServiceClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn sec6a() -> (Scenario, Exchange) {
    let sc = bundled("scenario_sec6a").unwrap();
    let ex = Exchange::from_scenario(&sc, &sc.classes).unwrap();
    (sc, ex)
}

fn auction_at(ex: &Exchange, base: &AuctionParams, kappa: f64, c_init: &[f64]) -> AuctionTrace {
    let mut p = base.clone();
    p.kappa = kappa;
    p.c_init = c_init.to_vec();
    clock_auction(ex, &p).unwrap()
}

fn criterion_1() -> Outcome {
    let (sc, ex) = sec6a();
    let trace = auction_at(&ex, &sc.auction, 1e-4, &sc.auction.c_init);
    let target = [0.6116, 0.6273, 0.5811];
    let c = trace.prices();
    let close = c.iter().zip(target).all(|(a, b)| (a - b).abs() <= 0.05);
    let z = trace.last().z_norm;
    outcome(
        trace.converged && close && z <= sc.auction.tol,
        format!("c = {c:.4?}, |Z| = {z:.4} (tol {}), {} iterations", sc.auction.tol, trace.iterations),
    )
}

fn criterion_2() -> Outcome {
    let (sc, ex) = sec6a();
    let inits = [
        [0.62, 0.64, 0.58],
        [0.5, 0.5, 0.5],
        [0.1, 0.1, 0.1],
        [1.0, 0.2, 0.6],
        [0.3, 0.9, 1.2],
    ];
    let traces: Vec<AuctionTrace> = inits.iter().map(|c| auction_at(&ex, &sc.auction, 1e-4, c)).collect();
    let all_conv = traces.iter().all(|t| t.converged);
    let mut spread: f64 = 0.0;
    for k in 0..3 {
        let vals: Vec<f64> = traces.iter().map(|t| t.prices()[k]).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        spread = spread.max(hi - lo);
    }
    outcome(all_conv && spread <= 1e-3, format!("max componentwise spread {spread:.2e} over 5 starts"))
}

fn criterion_3() -> Outcome {
    let (sc, ex) = sec6a();
    let trace = auction_at(&ex, &sc.auction, 1e-4, &sc.auction.c_init);
    let r = &trace.records;
    let steps = r.len() - 1;
    let noninc = r.windows(2).filter(|w| w[1].v <= w[0].v + 1e-9 * w[0].v.abs().max(1.0)).count();
    let fd: f64 = r.windows(2).map(|w| (w[1].v - w[0].v) / 1e-4).sum();
    let model: f64 = r.windows(2).map(|w| -w[0].z_norm.powi(2)).sum();
    let ratio = fd / model;
    let share = noninc as f64 / steps as f64;
    outcome(
        trace.converged && share >= 0.99 && (ratio - 1.0).abs() <= 0.1,
        format!("V nonincreasing on {noninc}/{steps} steps; sum(dV/kappa) / sum(-|Z|^2) = {ratio:.4}"),
    )
}

fn criterion_4() -> Outcome {
    let (sc, ex) = sec6a();
    let runs: Vec<AuctionTrace> =
        [1e-4, 1e-5, 1e-6].iter().map(|&k| auction_at(&ex, &sc.auction, k, &sc.auction.c_init)).collect();
    let iters: Vec<usize> = runs.iter().map(|t| t.iterations).collect();
    let ok = runs.iter().all(|t| t.converged) && iters[0] < iters[1] && iters[1] < iters[2];
    outcome(ok, format!("iterations for kappa 1e-4, 1e-5, 1e-6: {iters:?}"))
}

fn criterion_5_6() -> (Outcome, Outcome) {
    let sc = bundled("scenario_sec6b").unwrap();
    let cmp = compare_methods(&sc, None).unwrap();
    let caps = sc.capacities();
    let mut ok5 = cmp.auction_converged;
    let mut worst: f64 = 0.0;
    let mut shares = Vec::new();
    for m in &cmp.methods {
        let sp1 = &m.sps[0];
        worst = worst.max(sp1.x[1]);
        ok5 &= sp1.x[1] <= 1e-3 * caps[1];
        let np1: f64 = m.sps.iter().map(|s| s.x[0]).sum();
        let share = sp1.x[0] / np1;
        ok5 &= share > 0.5;
        shares.push(format!("{} {:.3}", m.label, share));
    }
    let c5 = outcome(
        ok5,
        format!("max NP2 to SP1 {worst:.2e} (limit {:.2}); SP1 share of NP1: {}", 1e-3 * caps[1], shares.join(", ")),
    );

    let rev = |m: Method| cmp.get(m).total_revenue;
    let gap = |m: Method| cmp.get(m).gap;
    let swm = rev(Method::Swm);
    let ok6 = swm + gap(Method::Swm) + gap(Method::Spp) >= rev(Method::Spp)
        && swm + gap(Method::Swm) + gap(Method::Auction) >= rev(Method::Auction)
        && rev(Method::Ospp) >= rev(Method::Spp);
    let c6 = outcome(
        ok6,
        format!(
            "revenue SWM {:.2}, SPP {:.2}, Auction {:.2}, {} {:.2}",
            swm,
            rev(Method::Spp),
            rev(Method::Auction),
            cmp.get(Method::Ospp).label,
            rev(Method::Ospp)
        ),
    );
    (c5, c6)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_7() -> Outcome {
    let base = bundled("scenario_sec6c").unwrap();
    let learned = base.mcmc.as_ref().unwrap().learn[0].class.clone();
    let truth = base.class(&learned).unwrap().t_z;
    let prior_mean = base.mcmc.as_ref().unwrap().learn[0].prior.t_z.unwrap().mean;
    let mut after = vec![Vec::new(); 3];
    let mut at_truth = 0;
    let mut agree = 0;
    let mut worst_rel: f64 = 0.0;
    for seed in 1..=10 {
        let mut sc = base.clone();
        sc.seed = seed;
        sc.cycles = 3;
        let reports = run_market(&sc, CycleOptions { certify: false }).unwrap();
        for (i, rep) in reports.iter().enumerate() {
            let post = rep.posteriors.iter().find(|p| p.class == learned).unwrap();
            after[i].push(post.mean[2]);
            let used = rep.estimates.iter().find(|c| c.id == learned).unwrap().t_z;
            if (used - truth).abs() <= 0.05 * truth {
                at_truth += 1;
                let (p, a) = (rep.perceived_revenue(), rep.actual_revenue());
                let rel = (p - a).abs() / a;
                worst_rel = worst_rel.max(rel);
                if rel <= 0.01 {
                    agree += 1;
                }
            }
        }
    }
    let med: Vec<f64> = after.into_iter().map(median).collect();
    let toward = (med[0] - truth).abs() < (prior_mean - truth).abs();
    let ok = toward && (1.5..=2.5).contains(&med[2]) && at_truth > 0 && agree == at_truth;
    outcome(
        ok,
        format!(
            "median posterior t_z after cycles 1..3: {:.3?} (prior {prior_mean}); \
             {agree}/{at_truth} near-truth cycles within 1% (worst {:.3}%)",
            med,
            worst_rel * 100.0
        ),
    )
}

fn sig_user(w: f64, t: f64, k: f64, beta: &[f64]) -> SigUser {
    SigUser {
        id: format!("u{t}-{k}"),
        class: ServiceClass::new("c", t, k, t, k).unwrap(),
        weight: w,
        beta: beta.to_vec(),
        group: 0,
    }
}

fn criterion_8() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    // Optima from grid search refined by SLSQP.
    let cases = [
        (vec![sig_user(1.0, 2.0, 100.0, &[1.0]), sig_user(1.0, 2.0, 100.0, &[1.0])], vec![150.0], 1.0),
        (
            vec![sig_user(1.0, 0.2, 100.0, &[1.0]), sig_user(1.5, 2.0, 120.0, &[1.0]), sig_user(0.8, 0.1, 60.0, &[1.0])],
            vec![200.0],
            2.172988023087866,
        ),
        (
            vec![
                sig_user(1.0, 0.2, 100.0, &[1.0, 0.3]),
                sig_user(1.0, 2.0, 100.0, &[0.6, 0.8]),
                sig_user(1.0, 0.1, 50.0, &[0.5, 0.5]),
            ],
            vec![150.0, 100.0],
            1.9254871258429769,
        ),
    ];
    for (users, cap, oracle) in cases {
        let inst = SigProgInstance::new(users, cap).unwrap();
        let res = maximize_sum_sigmoids(&inst, 1e-2, 100_000).unwrap();
        ok &= (res.value - oracle).abs() <= 2e-2;
        notes.push(format!("{:.4}/{:.4}", res.value, oracle));
    }
    for (name, oracle) in [("toy_single", 0.5), ("toy_concave", 2.2069335634903045)] {
        let res = solve_swm(&bundled(name).unwrap(), Some(1e-2)).unwrap();
        ok &= (res.welfare - oracle).abs() <= 2e-2;
        notes.push(format!("{name} {:.4}/{:.4}", res.welfare, oracle));
    }
    let sc = bundled("toy_single").unwrap();
    let model = &sc.models(&sc.classes).unwrap()[0];
    let lo = solve_demand(model, &[0.004], DEFAULT_TOL).unwrap();
    let hi = solve_demand(model, &[0.02], DEFAULT_TOL).unwrap();
    ok &= (lo.x[0] - 119.0).abs() <= 0.5 && hi.x[0] == 0.0;
    notes.push(format!("demand {:.3} at c=0.004, {} at c=0.02", lo.x[0], hi.x[0]));
    outcome(ok, notes.join("; "))
}

/// Maximum of `f` on `[0, hi]` by a grid and a local refinement.
fn scan_max(f: impl Fn(f64) -> f64, hi: f64) -> (f64, f64) {
    let n = 40_000;
    let mut best = (f(0.0), 0.0);
    for i in 1..=n {
        let x = hi * i as f64 / n as f64;
        let v = f(x);
        if v > best.0 {
            best = (v, x);
        }
    }
    let h = hi / n as f64;
    let (a, b) = ((best.1 - h).max(0.0), (best.1 + h).min(hi));
    for i in 0..=2000 {
        let x = a + (b - a) * i as f64 / 2000.0;
        let v = f(x);
        if v > best.0 {
            best = (v, x);
        }
    }
    best
}

fn criterion_9() -> Outcome {
    let a = ServiceClass::new("a", 0.2, 100.0, 0.2, 100.0).unwrap();
    let b = ServiceClass::new("b", 2.0, 120.0, 2.0, 120.0).unwrap();
    let (beta_b, lambda, c) = (0.8, 1e-5, 0.003);
    let users = vec![
        ModelUser::new("a1", a.clone(), vec![1.0], 1.0),
        ModelUser::new("b1", b.clone(), vec![beta_b], 1.0),
    ];
    let model = SpModel::from_users("sp", lambda, users).unwrap();
    let d = solve_demand(&model, &[c], DEFAULT_TOL).unwrap();
    let x_hat = d.x[0];
    let cap = 400.0;

    // Unregularized optimum: separable per user.
    let (pa, ra) = scan_max(|r| a.qos(r) - c * r, cap);
    let (pb, rb) = scan_max(|r| b.qos(beta_b * r) - c * r, cap);
    let psi_star = pa + pb;
    let x_star = ra + rb;
    // Regularized optimum: best split of every total.
    let split = |x: f64| scan_max(|s| a.qos(s) + b.qos(beta_b * (x - s)), x);
    let n = 800;
    let mut x_bar = 0.0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        let x = cap * i as f64 / n as f64;
        let v = split(x).0 - c * x - lambda * x * x;
        if v > best {
            best = v;
            x_bar = x;
        }
    }
    let realized = split(x_hat).0 - c * x_hat;
    let eps = epsilon_bound([(1.0, &a), (1.0, &b)], 1);
    let d1 = lambda * (x_star * x_star - x_hat * x_hat);
    let d2 = lambda * (x_hat * x_hat - x_bar * x_bar);
    let (lo, hi) = (psi_star - eps - d1, psi_star + d2);
    // grid resolution of x_bar
    let slack = 2.0 * lambda * cap * cap / n as f64;
    let ok = realized >= lo - 1e-9 && realized <= hi + slack;
    outcome(
        ok,
        format!("psi* = {psi_star:.5}, realized {realized:.5} in [{lo:.5}, {:.5}] (eps {eps:.4})", hi + slack),
    )
}

fn ks_truncated_normal(samples: &mut [f64], mean: f64, std: f64) -> f64 {
    let n = Normal::new(mean, std).unwrap();
    let z0 = n.cdf(0.0);
    samples.sort_by(f64::total_cmp);
    let m = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (n.cdf(x) - z0) / (1.0 - z0);
            (f - i as f64 / m).abs().max((f - (i + 1) as f64 / m).abs())
        })
        .fold(0.0, f64::max)
}

fn criterion_10() -> Outcome {
    let mut failed = Vec::new();

    // Envelope dominance, tangency and concavity.
    for (t, k) in [(0.2, 100.0), (2.0, 100.0), (20.0, 150.0), (0.02, 120.0), (0.5, 10.0)] {
        let cl = ServiceClass::new("c", t, k, t, k).unwrap();
        let env = build_envelope(&cl);
        let zs: Vec<f64> = (0..=2000).map(|i| 2.0 * env.w * i as f64 / 2000.0).collect();
        let vals: Vec<f64> = zs.iter().map(|&z| envelope_eval(&env, &cl, z).unwrap().0).collect();
        let dom = zs.iter().zip(&vals).all(|(&z, &v)| v >= cl.qos(z) - 1e-12);
        let conc = vals.windows(3).all(|w| w[1] >= 0.5 * (w[0] + w[2]) - 1e-12);
        let tan = (env.slope - cl.qos_d1(env.w)).abs() <= 1e-6;
        if !(dom && conc && tan) {
            failed.push(format!("envelope ({t}, {k})"));
        }
    }

    // KKT residuals and WARP on sec6a.
    let (_, ex) = sec6a();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut kkt_ok = true;
    let mut agg = |c: &[f64]| {
        let mut x = vec![0.0; c.len()];
        for m in &ex.models {
            let d = solve_demand(m, c, DEFAULT_TOL).unwrap();
            kkt_ok &= d.converged && kkt_residual(m, c, &d) <= DEFAULT_TOL;
            for (a, b) in x.iter_mut().zip(&d.x) {
                *a += b;
            }
        }
        x
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut pairs, mut warp_ok) = (0, true);
    while pairs < 100 {
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..0.9)).collect();
        let cb: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..0.9)).collect();
        let (x, xb) = (agg(&c), agg(&cb));
        if x.iter().chain(&xb).any(|v| *v <= 0.0) {
            continue;
        }
        pairs += 1;
        if dot(&c, &xb) <= dot(&c, &x) && dot(&cb, &xb) >= dot(&cb, &x) {
            warp_ok = false;
        }
    }
    if !warp_ok {
        failed.push("WARP".into());
    }
    if !kkt_ok {
        failed.push("KKT".into());
    }

    // Unchanged demand under a price change has a zero component.
    let cl = ServiceClass::new("c", 0.2, 100.0, 0.2, 100.0).unwrap();
    let users = (0..3)
        .map(|i| ModelUser::new(format!("u{i}"), cl.clone(), vec![0.9 - 0.1 * i as f64, 0.1], 80.0))
        .collect();
    let m = SpModel::from_users("sp", 1e-4, users).unwrap();
    let mut zero_ok = true;
    for _ in 0..100 {
        let k = rng.random_range(0..2);
        let mut c = vec![rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)];
        let d1 = solve_demand(&m, &c, DEFAULT_TOL).unwrap();
        c[k] = rng.random_range(0.2..0.6);
        let d2 = solve_demand(&m, &c, DEFAULT_TOL).unwrap();
        if d1.x.iter().zip(&d2.x).all(|(a, b)| (a - b).abs() <= 1e-9) {
            zero_ok &= d1.x[k] <= 1e-9;
        }
    }
    if !zero_ok {
        failed.push("zero component".into());
    }

    // Prior recovery by the sampler.
    let prior = PriorSpec { t_z: Some(ParamPrior { mean: 0.5, std: 1.0 }), ..Default::default() };
    let known = ServiceClass::new("v", 2.0, 100.0, 2.0, 120.0).unwrap();
    let settings = SamplerSettings { n_samples: 402_000, burn_in: 2_000, thin: 200, proposal_scale: 1.5 };
    let post = metropolis_sample(&prior, &known, &[], true, settings, 99).unwrap();
    let mut xs: Vec<f64> = post.samples.iter().map(|s| s[2]).collect();
    let ks = ks_truncated_normal(&mut xs, 0.5, 1.0);
    if ks >= 1.63 / (xs.len() as f64).sqrt() {
        failed.push(format!("KS {ks:.4}"));
    }

    // Seed determinism.
    let again = metropolis_sample(&prior, &known, &[], true, settings, 99).unwrap();
    let mut sc = bundled("scenario_sec6c").unwrap();
    sc.cycles = 1;
    let opts = CycleOptions { certify: false };
    let base = bundled("scenario_sec6a").unwrap();
    let (ta, tb) = (clock_auction(&ex, &base.auction).unwrap(), clock_auction(&ex, &base.auction).unwrap());
    if again != post || run_market(&sc, opts).unwrap() != run_market(&sc, opts).unwrap() || ta.records != tb.records {
        failed.push("determinism".into());
    }

    let detail = if failed.is_empty() {
        format!("envelopes, KKT, WARP ({pairs} pairs), zero component, KS {ks:.4}, determinism")
    } else {
        format!("failed: {}", failed.join(", "))
    };
    outcome(failed.is_empty(), detail)
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let (c5, c6) = criterion_5_6();
    let results = [
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        c5,
        c6,
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
    ];
    for (i, r) in results.iter().enumerate() {
        println!("criterion {:>2}: {} {}", i + 1, if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    println!("acceptance suite took {:.1?}", start.elapsed());
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, r)| !r.pass).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
