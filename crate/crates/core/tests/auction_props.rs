use netslice::auction::{clock_auction, run_auction, write_trace_csv, Exchange};
use netslice::scenario::bundled;

fn exchange(name: &str) -> (Exchange, netslice::auction::AuctionParams) {
    let sc = bundled(name).unwrap();
    (Exchange::from_scenario(&sc, &sc.classes).unwrap(), sc.auction)
}

#[test]
fn price_steps_follow_excess_demand() {
    let (ex, params) = exchange("toy_concave");
    let trace = clock_auction(&ex, &params).unwrap();
    assert!(trace.converged);
    for w in trace.records.windows(2) {
        for k in 0..ex.k() {
            let step = w[1].c[k] - w[0].c[k];
            let expect = (w[0].c[k] + params.kappa * w[0].z[k]).max(params.price_floor) - w[0].c[k];
            assert!((step - expect).abs() <= 1e-15);
            assert!(step * w[0].z[k] >= 0.0);
            assert!(w[1].c[k] >= params.price_floor);
        }
    }
    assert!(trace.last().z_norm <= params.tol);
}

#[test]
fn concave_market_has_an_exact_certificate() {
    let (ex, params) = exchange("toy_concave");
    let (trace, cert) = run_auction(&ex, &params, None).unwrap();
    assert!(trace.converged);
    assert!(cert.valid, "{cert:?}");
    assert!(cert.exact);
    assert!(cert.sps.iter().all(|s| s.epsilon == 0.0));
    assert_eq!(cert.c_dagger, trace.prices());
}

#[test]
fn oversized_steps_trigger_the_oscillation_rule() {
    let (ex, mut params) = exchange("toy_concave");
    params.kappa = 10.0;
    params.max_iter = 5000;
    let trace = clock_auction(&ex, &params).unwrap();
    assert!(!trace.converged);
    assert!(trace.aborted.is_some());
    assert!(trace.iterations < 5000);
}

#[test]
fn auction_is_deterministic() {
    let (ex, params) = exchange("scenario_sec6b");
    let a = clock_auction(&ex, &params).unwrap();
    let b = clock_auction(&ex, &params).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn trace_csv_has_one_row_per_iteration() {
    let (ex, params) = exchange("toy_concave");
    let trace = clock_auction(&ex, &params).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &trace).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["iter", "c_1", "c_2", "Z_1", "Z_2", "Znorm", "V"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), trace.records.len());
    let last = rows.last().unwrap();
    // Decimal output round-trips exactly.
    assert_eq!(last[1].parse::<f64>().unwrap(), trace.last().c[0]);
    assert_eq!(last[6].parse::<f64>().unwrap(), trace.last().v);
}

#[test]
fn bad_parameters_are_rejected() {
    let (ex, mut params) = exchange("toy_concave");
    params.c_init = vec![0.1];
    assert!(clock_auction(&ex, &params).is_err());
    let (ex, mut params) = exchange("toy_concave");
    params.kappa = 0.0;
    assert!(clock_auction(&ex, &params).is_err());
}
