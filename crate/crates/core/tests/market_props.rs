use netslice::market::{compare_methods, overbook, run_market, CycleOptions, Method};
use netslice::scenario::bundled;

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &t in &idx[i..=j] {
                r[t] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn cycles_are_deterministic_per_seed() {
    let mut sc = bundled("scenario_sec6c").unwrap();
    sc.cycles = 2;
    let opts = CycleOptions { certify: false };
    let a = run_market(&sc, opts).unwrap();
    let b = run_market(&sc, opts).unwrap();
    assert_eq!(a, b);
    sc.seed += 1;
    let c = run_market(&sc, opts).unwrap();
    assert_ne!(a[0].feedback, c[0].feedback);
}

#[test]
fn cycles_conserve_resources() {
    let sc = bundled("scenario_sec6c").unwrap();
    let reports = run_market(&sc, CycleOptions { certify: true }).unwrap();
    assert_eq!(reports.len(), sc.cycles);
    for rep in &reports {
        assert!(rep.auction_converged);
        for (k, cap) in sc.capacities().iter().enumerate() {
            let bought: f64 = rep.sps.iter().map(|s| s.acquired[k]).sum();
            assert!(bought <= cap * (1.0 + 1e-12), "cycle {}: {bought} > {cap}", rep.cycle);
        }
        for sp in &rep.sps {
            for k in 0..sc.k() {
                let used: f64 = sp.users.iter().map(|u| u.r[k]).sum();
                assert!(used <= sp.allotted[k] + 1e-6);
            }
            assert!(sp.oversell_risk.iter().all(|v| *v >= 0.0));
        }
        assert_eq!(rep.feedback.len(), rep.sps.iter().map(|s| s.users.len()).sum::<usize>());
        assert!(rep.certificate.as_ref().unwrap().valid);
    }
}

#[test]
fn perceived_equals_actual_under_true_parameters() {
    let mut sc = bundled("scenario_sec6c").unwrap();
    sc.cycles = 1;
    let truth = sc.class("inelastic").unwrap().t_z;
    let learn = &mut sc.mcmc.as_mut().unwrap().learn[0];
    learn.prior.t_z.as_mut().unwrap().mean = truth;
    let rep = &run_market(&sc, CycleOptions { certify: false }).unwrap()[0];
    let (p, a) = (rep.perceived_revenue(), rep.actual_revenue());
    assert!((p - a).abs() <= 1e-6 * a, "{p} vs {a}");
    // A wrong belief gives a visible gap.
    let wrong = &run_market(&bundled("scenario_sec6c").unwrap(), CycleOptions { certify: false }).unwrap()[0];
    assert!((wrong.perceived_revenue() - wrong.actual_revenue()).abs() > 1.0);
}

#[test]
fn weaker_links_need_more_resources_under_spp() {
    let sc = bundled("scenario_sec6b").unwrap();
    let cmp = compare_methods(&sc, None).unwrap();
    let spp = cmp.get(Method::Spp);
    let sp1 = &spp.sps[0];
    let users = &sc.sps[0].users;
    let (mut beta, mut r) = (Vec::new(), Vec::new());
    for (spec, out) in users.iter().zip(&sp1.users) {
        if out.z > 1e-6 {
            beta.push(spec.beta[0]);
            r.push(out.r[0]);
        }
    }
    assert!(beta.len() >= 5);
    assert!(spearman(&r, &beta) <= 0.0, "{r:?} vs {beta:?}");
}

#[test]
fn methods_respect_capacity() {
    let sc = bundled("scenario_sec6b").unwrap();
    let cmp = compare_methods(&sc, None).unwrap();
    for m in &cmp.methods {
        let scale = if m.method == Method::Ospp { 1.05 } else { 1.0 };
        for (k, cap) in sc.capacities().iter().enumerate() {
            let used: f64 = m.sps.iter().map(|s| s.x[k]).sum();
            assert!(used <= cap * scale + 1e-6, "{}: {used} > {cap}", m.label);
        }
    }
}

#[test]
fn overbooking_scales_and_validates() {
    assert_eq!(overbook(&[100.0, 0.0], &[5.0, 10.0]).unwrap(), vec![105.0, 0.0]);
    assert!(overbook(&[1.0], &[-1.0]).is_err());
    assert!(overbook(&[1.0], &[1.0, 2.0]).is_err());
}
