//! `netslice`: run the market engine on a scenario file.
//!
//! Every subcommand prints a JSON summary on stdout (including the resolved
//! seed) and writes its CSV/JSON artifacts to `--out`. Failures print
//! `{"error": {"kind": ..., "message": ...}}` on stderr and exit nonzero.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use netslice::auction::{run_auction, write_trace_csv, Exchange};
use netslice::inference::{
    metropolis_sample, read_feedback_csv, write_feedback_csv, write_posterior_csv, SamplerSettings,
};
use netslice::market::{
    compare_methods, cycle_allocations, run_market, write_allocations_csv, CycleOptions, Method, MethodAllocation,
};
use netslice::scenario::{load_scenario, Scenario};
use netslice::sigprog::solve_swm;
use netslice::solver::{kkt_residual, solve_demand};
use netslice::utility::{nonconcavity, optimal_price, pricing_weight, Envelope};

#[derive(Parser)]
#[command(name = "netslice", version, about = "Network-slicing market engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a bundled scenario (e.g. scenario_sec6a).
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AuctionFlags {
    #[arg(long)]
    kappa: Option<f64>,
    /// Stop once the excess-demand norm is at most this.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Initial prices, comma separated.
    #[arg(long, value_delimiter = ',')]
    c_init: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Concave envelope, nonconcavity and pricing weight of every class.
    Envelope {
        #[command(flatten)]
        common: Common,
    },
    /// Demand of every SP at fixed prices.
    Demand {
        #[command(flatten)]
        common: Common,
        /// Price per NP, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        prices: Vec<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Clock auction; writes auction_trace.csv and certificate.json.
    Auction {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: AuctionFlags,
        /// Skip the equilibrium certificate.
        #[arg(long)]
        no_certify: bool,
    },
    /// Market cycles; writes cycle_report.json, allocations.csv, feedback.csv and posteriors.
    Cycle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: AuctionFlags,
        #[arg(long)]
        cycles: Option<usize>,
        /// Overbooking percent, one value or one per NP.
        #[arg(long, value_delimiter = ',')]
        overbook: Option<Vec<f64>>,
        #[arg(long)]
        no_certify: bool,
    },
    /// Centralized welfare-maximizing allocation; writes allocations.csv.
    Swm {
        #[command(flatten)]
        common: Common,
        /// Branch-and-bound gap tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Posterior of a learned class from a feedback CSV.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        feedback: PathBuf,
        /// Class to learn; defaults to the first `mcmc.learn` entry.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Auction, SPP, oSPP and SWM side by side; writes allocations.csv.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: AuctionFlags,
        #[arg(long, value_delimiter = ',')]
        overbook: Option<Vec<f64>>,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<netslice::Error> for Failure {
    fn from(e: netslice::Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            kind: "io",
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage",
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            fail(&usage(msg.trim_end()));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            // A closed pipe (e.g. `| head`) is not a failure of the run.
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            fail(&f);
            ExitCode::FAILURE
        }
    }
}

fn fail(f: &Failure) {
    eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
}

fn load(common: &Common) -> Result<Scenario, Failure> {
    let mut sc = load_scenario(&common.scenario)?;
    if let Some(s) = common.seed {
        sc.seed = s;
    }
    fs::create_dir_all(&common.out)?;
    Ok(sc)
}

fn apply(sc: &mut Scenario, flags: &AuctionFlags) -> Result<(), Failure> {
    if let Some(v) = flags.kappa {
        sc.auction.kappa = v;
    }
    if let Some(v) = flags.tol {
        sc.auction.tol = v;
    }
    if let Some(v) = flags.max_iter {
        sc.auction.max_iter = v;
    }
    if let Some(v) = &flags.c_init {
        sc.auction.c_init = v.clone();
    }
    sc.auction.validate(sc.k())?;
    Ok(())
}

fn per_np(v: &[f64], k: usize, what: &str) -> Result<Vec<f64>, Failure> {
    match v.len() {
        1 => Ok(vec![v[0]; k]),
        n if n == k => Ok(v.to_vec()),
        n => Err(usage(format!("--{what} expects 1 or {k} values, got {n}"))),
    }
}

fn create(dir: &Path, name: &str) -> Result<(BufWriter<File>, PathBuf), Failure> {
    let path = dir.join(name);
    Ok((BufWriter::new(File::create(&path)?), path))
}

fn run(command: Command) -> Result<Value, Failure> {
    match command {
        Command::Envelope { common } => {
            let sc = load(&common)?;
            let mut classes = Vec::new();
            for c in &sc.classes {
                let env = Envelope::new(c);
                let nc = nonconcavity(c);
                let mut row = json!({
                    "class": c.id,
                    "w": env.w,
                    "slope": env.slope,
                    "rho": nc.rho,
                    "rho_at": nc.at,
                    "fallback": env.fallback,
                });
                if sc.pricing.enabled {
                    row["p_hat"] = json!(optimal_price(c)?);
                    row["omega"] = json!(pricing_weight(c)?);
                }
                classes.push(row);
            }
            Ok(json!({ "seed": sc.seed, "classes": classes }))
        }
        Command::Demand { common, prices, tol } => {
            let sc = load(&common)?;
            let prices = per_np(&prices, sc.k(), "prices")?;
            let tol = tol.unwrap_or(sc.auction.demand_tol);
            let mut sps = Vec::new();
            for m in sc.models(&sc.classes)? {
                let d = solve_demand(&m, &prices, tol)?;
                let kkt = kkt_residual(&m, &prices, &d);
                let mut row = serde_json::to_value(&d).expect("demand serializes");
                row["sp"] = json!(m.id);
                row["kkt_residual"] = json!(kkt);
                sps.push(row);
            }
            Ok(json!({ "seed": sc.seed, "prices": prices, "sps": sps }))
        }
        Command::Auction {
            common,
            flags,
            no_certify,
        } => {
            let mut sc = load(&common)?;
            apply(&mut sc, &flags)?;
            let ex = Exchange::from_scenario(&sc, &sc.classes)?;
            let (trace, cert) = if no_certify {
                (netslice::auction::clock_auction(&ex, &sc.auction)?, None)
            } else {
                let (t, c) = run_auction(&ex, &sc.auction, sc.bnb.tol)?;
                (t, Some(c))
            };
            let (w, trace_path) = create(&common.out, "auction_trace.csv")?;
            write_trace_csv(w, &trace)?;
            let mut summary = json!({
                "seed": sc.seed,
                "converged": trace.converged,
                "iterations": trace.iterations,
                "c_dagger": trace.prices(),
                "excess_norm": trace.last().z_norm,
                "aborted": trace.aborted,
                "unconverged_demands": trace.unconverged_demands,
                "trace": trace_path,
            });
            if let Some(cert) = cert {
                let (w, path) = create(&common.out, "certificate.json")?;
                serde_json::to_writer_pretty(w, &cert).map_err(netslice::Error::from)?;
                summary["certificate_valid"] = json!(cert.valid);
                summary["certificate_exact"] = json!(cert.exact);
                summary["certificate"] = json!(path);
            }
            if !trace.converged {
                return Err(Failure {
                    kind: "not_converged",
                    message: trace.aborted.clone().unwrap_or_else(|| {
                        format!("no convergence within {} iterations", sc.auction.max_iter)
                    }) + &format!(" (trace written to {})", trace_path.display()),
                });
            }
            Ok(summary)
        }
        Command::Cycle {
            common,
            flags,
            cycles,
            overbook,
            no_certify,
        } => {
            let mut sc = load(&common)?;
            apply(&mut sc, &flags)?;
            if let Some(n) = cycles {
                sc.cycles = n;
            }
            if let Some(a) = overbook {
                sc.overbook = Some(netslice::scenario::Overbook {
                    alpha: per_np(&a, sc.k(), "overbook")?,
                });
            }
            sc.validate()?;
            let reports = run_market(&sc, CycleOptions { certify: !no_certify })?;
            let (w, report_path) = create(&common.out, "cycle_report.json")?;
            serde_json::to_writer_pretty(w, &reports).map_err(netslice::Error::from)?;
            let allocations: Vec<_> = reports
                .iter()
                .map(|r| cycle_allocations(r, &format!("cycle{}", r.cycle)))
                .collect();
            let (w, alloc_path) = create(&common.out, "allocations.csv")?;
            write_allocations_csv(w, &allocations)?;
            let feedback: Vec<_> = reports.iter().flat_map(|r| r.feedback.iter().cloned()).collect();
            let (w, feedback_path) = create(&common.out, "feedback.csv")?;
            write_feedback_csv(w, &feedback)?;
            let mut posterior_files = Vec::new();
            if let Some(last) = reports.last() {
                for p in &last.posterior_samples {
                    let (w, path) = create(&common.out, &format!("posterior_{}.csv", p.class_id))?;
                    write_posterior_csv(w, p)?;
                    posterior_files.push(path);
                }
            }
            let cycles: Vec<Value> = reports
                .iter()
                .map(|r| {
                    json!({
                        "cycle": r.cycle,
                        "auction_converged": r.auction_converged,
                        "perceived_revenue": r.perceived_revenue(),
                        "actual_revenue": r.actual_revenue(),
                        "estimates": r.estimates,
                        "certificate_valid": r.certificate.as_ref().map(|c| c.valid),
                    })
                })
                .collect();
            Ok(json!({
                "seed": sc.seed,
                "cycles": cycles,
                "report": report_path,
                "allocations": alloc_path,
                "feedback": feedback_path,
                "posteriors": posterior_files,
            }))
        }
        Command::Swm { common, tol } => {
            let sc = load(&common)?;
            let res = solve_swm(&sc, tol.or(sc.bnb.tol))?;
            let models = sc.models(&sc.classes)?;
            let alloc = MethodAllocation::build(
                Method::Swm,
                Method::Swm.label(&[]),
                &models,
                &res.r,
                sc.pricing.enabled,
                res.gap,
            )?;
            let (w, path) = create(&common.out, "allocations.csv")?;
            write_allocations_csv(w, std::slice::from_ref(&alloc))?;
            Ok(json!({
                "seed": sc.seed,
                "welfare": res.welfare,
                "gap": res.gap,
                "converged": res.converged,
                "nodes": res.nodes,
                "x": res.x,
                "expected_revenue": alloc.total_revenue,
                "allocations": path,
            }))
        }
        Command::Infer {
            common,
            feedback,
            class,
            samples,
        } => {
            let sc = load(&common)?;
            let mcmc = sc
                .mcmc
                .as_ref()
                .ok_or_else(|| usage("the scenario has no [mcmc] section"))?;
            let learn = match &class {
                Some(id) => mcmc
                    .learn
                    .iter()
                    .find(|l| &l.class == id)
                    .ok_or_else(|| usage(format!("class `{id}` is not listed in mcmc.learn")))?,
                None => mcmc
                    .learn
                    .first()
                    .ok_or_else(|| usage("mcmc.learn is empty"))?,
            };
            let known = sc.class(&learn.class).expect("validated scenario").clone();
            let data: Vec<_> = read_feedback_csv(File::open(&feedback)?)?
                .into_iter()
                .filter(|r| r.class_id == learn.class)
                .collect();
            let mut settings = SamplerSettings {
                n_samples: mcmc.n_samples,
                burn_in: mcmc.burn_in(),
                thin: mcmc.thin,
                proposal_scale: mcmc.proposal_scale,
            };
            if let Some(n) = samples {
                settings.n_samples = n;
                settings.burn_in = n / 5;
            }
            let post = metropolis_sample(&learn.prior, &known, &data, sc.pricing.enabled, settings, sc.seed)?;
            let (w, path) = create(&common.out, &format!("posterior_{}.csv", post.class_id))?;
            write_posterior_csv(w, &post)?;
            Ok(json!({
                "seed": sc.seed,
                "class": post.class_id,
                "records": data.len(),
                "free": post.free,
                "mean": post.mean,
                "std": post.std,
                "acceptance_rate": post.acceptance_rate,
                "ess_hint": post.ess_hint,
                "warning": post.warning,
                "posterior": path,
            }))
        }
        Command::Compare {
            common,
            flags,
            overbook,
        } => {
            let mut sc = load(&common)?;
            apply(&mut sc, &flags)?;
            let alpha = overbook.map(|a| per_np(&a, sc.k(), "overbook")).transpose()?;
            let cmp = compare_methods(&sc, alpha)?;
            let (w, path) = create(&common.out, "allocations.csv")?;
            write_allocations_csv(w, &cmp.methods)?;
            let methods: Vec<Value> = cmp
                .methods
                .iter()
                .map(|m| {
                    json!({
                        "method": m.label,
                        "total_revenue": m.total_revenue,
                        "gap": m.gap,
                        "x": m.sps.iter().map(|s| json!({ "sp": s.sp, "x": s.x })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            Ok(json!({
                "seed": sc.seed,
                "c_dagger": cmp.c_dagger,
                "auction_converged": cmp.auction_converged,
                "alpha": cmp.alpha,
                "methods": methods,
                "allocations": path,
            }))
        }
    }
}
