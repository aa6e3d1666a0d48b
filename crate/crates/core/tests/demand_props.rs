use netslice::scenario::bundled;
use netslice::solver::{
    gradient, kkt_residual, objective, solve_demand, solve_demand_from, ModelUser, SpModel, DEFAULT_TOL,
};
use netslice::utility::ServiceClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sec6a_models() -> Vec<SpModel> {
    let sc = bundled("scenario_sec6a").unwrap();
    sc.models(&sc.classes).unwrap()
}

fn aggregate(models: &[SpModel], c: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; c.len()];
    for m in models {
        let d = solve_demand(m, c, DEFAULT_TOL).unwrap();
        assert!(d.converged);
        assert!(d.kkt_residual <= DEFAULT_TOL, "kkt {}", d.kkt_residual);
        for (a, b) in x.iter_mut().zip(&d.x) {
            *a += b;
        }
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let models = sec6a_models();
    let h = 1e-5;
    for trial in 0..100 {
        let m = &models[trial % models.len()];
        let c: Vec<f64> = (0..m.k).map(|_| rng.random_range(0.2..1.0)).collect();
        let r: Vec<Vec<f64>> = m
            .users
            .iter()
            .map(|_| (0..m.k).map(|_| rng.random_range(0.0..120.0)).collect())
            .collect();
        let g = gradient(m, &c, &r);
        for i in 0..r.len() {
            for k in 0..m.k {
                let mut rp = r.clone();
                let mut rm = r.clone();
                rp[i][k] += h;
                rm[i][k] -= h;
                let fd = (objective(m, &c, &rp) - objective(m, &c, &rm)) / (2.0 * h);
                let err = (fd - g[i][k]).abs() / g[i][k].abs().max(1e-3);
                assert!(err <= 1e-4, "trial {trial} ({i},{k}): fd {fd} vs {}", g[i][k]);
            }
        }
    }
}

#[test]
fn kkt_residual_small_at_converged_demands() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in sec6a_models() {
        for _ in 0..10 {
            let c: Vec<f64> = (0..m.k).map(|_| rng.random_range(0.1..1.5)).collect();
            let d = solve_demand(&m, &c, DEFAULT_TOL).unwrap();
            assert!(d.converged);
            assert!(kkt_residual(&m, &c, &d) <= DEFAULT_TOL);
            // Supply binds: x is the column sum of r.
            for k in 0..m.k {
                let s: f64 = d.r.iter().map(|ri| ri[k]).sum();
                assert!((s - d.x[k]).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn demand_is_unique_from_random_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tol = DEFAULT_TOL;
    for m in sec6a_models() {
        let c = [0.6, 0.62, 0.58];
        let base = solve_demand(&m, &c, tol).unwrap();
        for _ in 0..3 {
            let start: Vec<Vec<f64>> = m
                .users
                .iter()
                .map(|_| (0..m.k).map(|_| rng.random_range(0.0..200.0)).collect())
                .collect();
            let d = solve_demand_from(&m, &c, tol, &start).unwrap();
            for (a, b) in d.x.iter().zip(&base.x) {
                // tol bounds the KKT residual (gradient units); the x error it
                // permits is about tol / (2 lambda).
                assert!((a - b).abs() <= 10.0 * tol / (2.0 * m.lambda), "{a} vs {b}");
            }
            assert!((d.value - base.value).abs() <= 1e-7 * base.value.abs().max(1.0));
        }
    }
}

#[test]
fn warp_on_random_price_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let models = sec6a_models();
    let mut premises = 0;
    let mut pairs = 0;
    while pairs < 100 {
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..0.9)).collect();
        let cb: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..0.9)).collect();
        let x = aggregate(&models, &c);
        let xb = aggregate(&models, &cb);
        if x.iter().chain(&xb).any(|v| *v <= 0.0) {
            continue;
        }
        pairs += 1;
        if dot(&c, &xb) <= dot(&c, &x) {
            premises += 1;
            assert!(
                dot(&cb, &xb) < dot(&cb, &x),
                "WARP violated at c={c:?} cb={cb:?}"
            );
        }
    }
    assert!(premises > 10, "only {premises} pairs exercised the premise");
}

#[test]
fn equal_demands_under_a_price_change_have_zero_component() {
    // The second NP is a poor substitute, so its demand is zero over a wide
    // range of its price.
    let class = ServiceClass::new("c", 0.2, 100.0, 0.2, 100.0).unwrap();
    let users = (0..3)
        .map(|i| ModelUser::new(format!("u{i}"), class.clone(), vec![0.9 - 0.1 * i as f64, 0.1], 80.0))
        .collect();
    let m = SpModel::from_users("sp", 1e-4, users).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut hits = 0;
    for _ in 0..200 {
        let k = rng.random_range(0..2);
        let mut c = vec![rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)];
        let d1 = solve_demand(&m, &c, DEFAULT_TOL).unwrap();
        c[k] = rng.random_range(0.2..0.6);
        let d2 = solve_demand(&m, &c, DEFAULT_TOL).unwrap();
        let same = d1.x.iter().zip(&d2.x).all(|(a, b)| (a - b).abs() <= 1e-9);
        if same {
            hits += 1;
            assert!(d1.x[k] <= 1e-9 && d2.x[k] <= 1e-9, "x = {:?}", d1.x);
        }
    }
    assert!(hits > 20, "only {hits} unchanged demands");
}
