//! Bayesian learning of class parameters from binary satisfaction feedback.
//!
//! Each record says whether a user served `z` resources at price `p` was
//! satisfied; the likelihood is Bernoulli with success probability
//! `price_sat(p)·qos(z)`. Unknown parameters get truncated-normal priors and
//! are sampled by random-walk Metropolis.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::utility::ServiceClass;

/// Log-probability floor, `ln(10⁻³⁰⁰)`.
pub const LOG_FLOOR: f64 = -690.7755278982137;
/// Lower bound on moment-matched prior standard deviations.
pub const STD_FLOOR: f64 = 1e-3;

/// Parameter order used by samples and CSV output.
pub const PARAM_NAMES: [&str; 4] = ["t_p", "b", "t_z", "k"];

/// Normal distribution truncated to `[0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamPrior {
    pub mean: f64,
    pub std: f64,
}

impl ParamPrior {
    /// Unnormalized log density.
    pub fn log_density(&self, v: f64) -> f64 {
        if v < 0.0 {
            f64::NEG_INFINITY
        } else {
            let d = (v - self.mean) / self.std;
            -0.5 * d * d
        }
    }
}

/// Priors for the free parameters; absent entries are held at known values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_p: Option<ParamPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<ParamPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_z: Option<ParamPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<ParamPrior>,
}

impl PriorSpec {
    pub fn params(&self) -> [Option<ParamPrior>; 4] {
        [self.t_p, self.b, self.t_z, self.k]
    }

    fn from_params(p: [Option<ParamPrior>; 4]) -> Self {
        PriorSpec {
            t_p: p[0],
            b: p[1],
            t_z: p[2],
            k: p[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in PARAM_NAMES.iter().zip(self.params()) {
            if let Some(p) = p {
                if !(p.std > 0.0 && p.std.is_finite() && p.mean.is_finite()) {
                    return Err(Error::scenario(
                        format!("prior.{name}"),
                        format!("needs finite mean and std > 0, got ({}, {})", p.mean, p.std),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `class` with every free parameter replaced by its prior mean
    /// (clamped at 0).
    pub fn point_estimate(&self, class: &ServiceClass) -> ServiceClass {
        let mut theta = to_theta(class);
        for (t, p) in theta.iter_mut().zip(self.params()) {
            if let Some(p) = p {
                *t = p.mean.max(0.0);
            }
        }
        from_theta(&class.id, theta)
    }

    fn log_density(&self, theta: &[f64; 4]) -> f64 {
        self.params()
            .iter()
            .zip(theta)
            .filter_map(|(p, &v)| p.map(|p| p.log_density(v)))
            .sum()
    }
}

pub fn to_theta(c: &ServiceClass) -> [f64; 4] {
    [c.t_p, c.b, c.t_z, c.k]
}

pub fn from_theta(id: &str, t: [f64; 4]) -> ServiceClass {
    ServiceClass {
        id: id.to_string(),
        t_p: t[0],
        b: t[1],
        t_z: t[2],
        k: t[3],
    }
}

/// One binary satisfaction observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub user_id: String,
    pub class_id: String,
    pub cycle: usize,
    pub z: f64,
    /// Charged price; 0 when pricing is disabled.
    pub p: f64,
    #[serde(serialize_with = "bit_out", deserialize_with = "bit_in")]
    pub satisfied: bool,
}

fn bit_out<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

fn bit_in<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(serde::de::Error::custom(format!("satisfied must be 0 or 1, got {v}"))),
    }
}

pub fn read_feedback_csv<R: Read>(reader: R) -> Result<Vec<FeedbackRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: FeedbackRecord = row?;
        if !(rec.z >= 0.0 && rec.p >= 0.0) {
            return Err(Error::Domain {
                what: "feedback z and p",
                constraint: ">= 0",
                value: rec.z.min(rec.p),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_feedback_csv<W: Write>(writer: W, data: &[FeedbackRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for rec in data {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `ln(1 - e^x)` for `x ≤ 0`.
fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Log-likelihood of `data` under `theta`. Without pricing the price factor
/// is 1.
pub fn log_likelihood(theta: &ServiceClass, data: &[FeedbackRecord], pricing: bool) -> f64 {
    data.iter()
        .map(|rec| {
            let mut lp = theta.log_qos(rec.z);
            if pricing {
                lp += theta.log_price_sat(rec.p);
            }
            let v = if rec.satisfied { lp } else { log1mexp(lp) };
            v.max(LOG_FLOOR)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub class_id: String,
    /// Names of the sampled parameters.
    pub free: Vec<String>,
    /// Draws after burn-in and thinning, each `[t_p, b, t_z, k]`.
    pub samples: Vec<[f64; 4]>,
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub acceptance_rate: f64,
    /// Smallest per-parameter effective sample size.
    pub ess_hint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl Posterior {
    /// Point estimate: the class at the posterior mean.
    pub fn estimate(&self) -> ServiceClass {
        from_theta(&self.class_id, self.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Proposal std per parameter as a fraction of its prior std.
    pub proposal_scale: f64,
}

impl SamplerSettings {
    pub fn new(n_samples: usize) -> Self {
        SamplerSettings {
            n_samples,
            burn_in: n_samples / 5,
            thin: 1,
            proposal_scale: 0.1,
        }
    }
}

/// Random-walk Metropolis over the parameters that have priors. `known`
/// supplies the fixed values of the others and the class id.
pub fn metropolis_sample(
    prior: &PriorSpec,
    known: &ServiceClass,
    data: &[FeedbackRecord],
    pricing: bool,
    settings: SamplerSettings,
    seed: u64,
) -> Result<Posterior> {
    prior.validate()?;
    if settings.n_samples <= settings.burn_in {
        return Err(Error::Domain {
            what: "n_samples - burn_in",
            constraint: "> 0",
            value: settings.n_samples as f64 - settings.burn_in as f64,
        });
    }
    if settings.thin == 0 || !(settings.proposal_scale > 0.0) {
        return Err(Error::Domain {
            what: "thin and proposal_scale",
            constraint: "> 0",
            value: settings.proposal_scale.min(settings.thin as f64),
        });
    }
    let params = prior.params();
    let free: Vec<usize> = (0..4).filter(|&j| params[j].is_some()).collect();
    let step: Vec<f64> = free
        .iter()
        .map(|&j| settings.proposal_scale * params[j].unwrap().std)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = to_theta(&prior.point_estimate(known));
    let log_target =
        |t: &[f64; 4]| prior.log_density(t) + log_likelihood(&from_theta(&known.id, *t), data, pricing);
    let mut current = log_target(&theta);
    let mut accepted = 0usize;
    let mut samples = Vec::with_capacity((settings.n_samples - settings.burn_in) / settings.thin + 1);
    for it in 0..settings.n_samples {
        if !free.is_empty() {
            let mut prop = theta;
            for (&j, s) in free.iter().zip(&step) {
                let e: f64 = rng.sample(StandardNormal);
                prop[j] += s * e;
            }
            // uniform draw is taken unconditionally to keep the stream aligned
            let u: f64 = rng.random();
            if prop.iter().all(|&v| v >= 0.0) {
                let cand = log_target(&prop);
                if u.ln() < cand - current {
                    theta = prop;
                    current = cand;
                    accepted += 1;
                }
            }
        }
        if it >= settings.burn_in && (it - settings.burn_in).is_multiple_of(settings.thin) {
            samples.push(theta);
        }
    }
    let acceptance_rate = if free.is_empty() {
        1.0
    } else {
        accepted as f64 / settings.n_samples as f64
    };
    let (mut mean, mut std) = moments(&samples);
    // Fixed parameters are exact, not averaged.
    let fixed = to_theta(known);
    for j in (0..4).filter(|j| !free.contains(j)) {
        mean[j] = fixed[j];
        std[j] = 0.0;
    }
    let ess_hint = free
        .iter()
        .map(|&j| ess(&samples.iter().map(|s| s[j]).collect::<Vec<_>>()))
        .fold(samples.len() as f64, f64::min);
    let warning = (acceptance_rate < 0.01).then(|| {
        format!(
            "acceptance rate {acceptance_rate:.4} is below 1%; reduce the proposal scale"
        )
    });
    Ok(Posterior {
        class_id: known.id.clone(),
        free: free.iter().map(|&j| PARAM_NAMES[j].to_string()).collect(),
        samples,
        mean,
        std,
        acceptance_rate,
        ess_hint,
        warning,
    })
}

fn moments(samples: &[[f64; 4]]) -> ([f64; 4], [f64; 4]) {
    let n = samples.len().max(1) as f64;
    let mut mean = [0.0; 4];
    for s in samples {
        for j in 0..4 {
            mean[j] += s[j] / n;
        }
    }
    let mut var = [0.0; 4];
    for s in samples {
        for j in 0..4 {
            var[j] += (s[j] - mean[j]).powi(2) / n;
        }
    }
    (mean, var.map(f64::sqrt))
}

/// Effective sample size from autocorrelations summed until they drop
/// below 0.05.
fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c: f64 = (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64;
        let rho = c / c0;
        if rho < 0.05 {
            break;
        }
        tau += 2.0 * rho;
    }
    n as f64 / tau
}

/// Moment-matched truncated-normal prior for the next cycle.
pub fn update_prior(posterior: &Posterior, previous: &PriorSpec) -> Result<PriorSpec> {
    if posterior.samples.is_empty() {
        return Err(Error::Numerical("empty posterior".into()));
    }
    let mut p = previous.params();
    for (j, slot) in p.iter_mut().enumerate() {
        if slot.is_some() {
            *slot = Some(ParamPrior {
                mean: posterior.mean[j],
                std: posterior.std[j].max(STD_FLOOR),
            });
        }
    }
    Ok(PriorSpec::from_params(p))
}

/// `sample_index,t_p,b,t_z,k` rows followed by a `mean` summary row.
pub fn write_posterior_csv<W: Write>(writer: W, posterior: &Posterior) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sample_index", "t_p", "b", "t_z", "k"])?;
    for (i, s) in posterior.samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s[0].to_string(),
            s[1].to_string(),
            s[2].to_string(),
            s[3].to_string(),
        ])?;
    }
    let m = posterior.mean;
    w.write_record([
        "mean".to_string(),
        m[0].to_string(),
        m[1].to_string(),
        m[2].to_string(),
        m[3].to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
