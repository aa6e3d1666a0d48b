//! User satisfaction models and their concave envelopes.
//!
//! A user of service class `θ = (t_z, k, t_p, b)` is satisfied with `z` units
//! of aggregated resources with probability `σ(t_z (z - k))` and with a price
//! `p` with probability `σ(-t_p (p - b))`, where `σ` is the logistic function.
//! The QoS curve is a sigmoid with inflection at `k`; the demand programs work
//! with its tightest concave envelope on `[0, ∞)` (or on a sub-interval, for
//! branch-and-bound relaxations).

use serde::{Deserialize, Serialize};

use crate::error::{check_nonneg, Error, Result};

/// Absolute bisection tolerance on the tangency point.
pub const ENVELOPE_TOL: f64 = 1e-10;

/// Logistic function, evaluated without ever exponentiating a positive number.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)`.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    -softplus(-x)
}

/// `σ(x)·(1 - σ(x))`, the logistic derivative.
#[inline]
fn logistic_slope(x: f64) -> f64 {
    let a = x.abs();
    let e = (-a).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Private parameters of a service class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceClass {
    pub id: String,
    /// QoS sensitivity (per resource unit).
    pub t_z: f64,
    /// QoS prerequisite (resource units).
    pub k: f64,
    /// Price sensitivity (per monetary unit).
    pub t_p: f64,
    /// Budget (monetary units).
    pub b: f64,
}

impl ServiceClass {
    pub fn new(id: impl Into<String>, t_z: f64, k: f64, t_p: f64, b: f64) -> Result<Self> {
        let class = ServiceClass {
            id: id.into(),
            t_z,
            k,
            t_p,
            b,
        };
        class.validate()?;
        Ok(class)
    }

    pub fn validate(&self) -> Result<()> {
        check_nonneg("t_z", self.t_z)?;
        check_nonneg("k", self.k)?;
        check_nonneg("t_p", self.t_p)?;
        check_nonneg("b", self.b)
    }

    /// QoS satisfaction `u(z)` without domain checks.
    #[inline]
    pub fn qos(&self, z: f64) -> f64 {
        logistic(self.t_z * (z - self.k))
    }

    /// `u'(z)`.
    #[inline]
    pub fn qos_d1(&self, z: f64) -> f64 {
        self.t_z * logistic_slope(self.t_z * (z - self.k))
    }

    /// `u''(z)`.
    #[inline]
    pub fn qos_d2(&self, z: f64) -> f64 {
        let x = self.t_z * (z - self.k);
        // 1 - 2σ(x) = σ(-x) - σ(x)
        self.t_z * self.t_z * logistic_slope(x) * (logistic(-x) - logistic(x))
    }

    /// `ln u(z)`.
    #[inline]
    pub fn log_qos(&self, z: f64) -> f64 {
        log_logistic(self.t_z * (z - self.k))
    }

    /// Price satisfaction without domain checks.
    #[inline]
    pub fn price_sat(&self, p: f64) -> f64 {
        logistic(-self.t_p * (p - self.b))
    }

    #[inline]
    pub fn log_price_sat(&self, p: f64) -> f64 {
        log_logistic(-self.t_p * (p - self.b))
    }
}

/// Probability that a user of `class` is satisfied with `z` resource units.
pub fn qos_satisfaction(z: f64, class: &ServiceClass) -> Result<f64> {
    check_nonneg("resource amount z", z)?;
    Ok(class.qos(z))
}

/// Probability that a user of `class` accepts price `p`.
pub fn price_satisfaction(p: f64, class: &ServiceClass) -> Result<f64> {
    check_nonneg("price p", p)?;
    Ok(class.price_sat(p))
}

/// The revenue-maximizing price `argmax_p p·price_satisfaction(p)`.
///
/// The maximizer is the root of `p·t_p·(1 - s(p)) - 1`, which is strictly
/// increasing in `p`; bisection runs to machine precision.
pub fn optimal_price(class: &ServiceClass) -> Result<f64> {
    if class.t_p <= 0.0 {
        return Err(Error::DegenerateClass {
            class: class.id.clone(),
            reason: "t_p = 0 leaves p·price_satisfaction(p) without a finite maximizer".into(),
        });
    }
    let residual = |p: f64| p * class.t_p * logistic(class.t_p * (p - class.b)) - 1.0;
    let mut lo = 0.0;
    let mut hi = class.b.max(0.0) + 1.0 / class.t_p + 1.0;
    while residual(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Utility coefficient `ω = p̂·price_satisfaction(p̂)` that turns the summed
/// satisfaction into expected revenue.
pub fn pricing_weight(class: &ServiceClass) -> Result<f64> {
    let p = optimal_price(class)?;
    Ok(p * class.price_sat(p))
}

/// Expected revenue `Σ_i price_sat(p_i)·qos(z_i)·p_i` over `(z_i, p_i)` pairs.
pub fn expected_revenue(allocations: &[(f64, f64)], classes: &[&ServiceClass]) -> Result<f64> {
    if allocations.len() != classes.len() {
        return Err(Error::Dimension {
            what: "classes per allocation".into(),
            expected: allocations.len(),
            got: classes.len(),
        });
    }
    let mut total = 0.0;
    for (&(z, p), class) in allocations.iter().zip(classes) {
        total += price_satisfaction(p, class)? * qos_satisfaction(z, class)? * p;
    }
    Ok(total)
}

/// An end user attached to a service provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub id: String,
    #[serde(rename = "class")]
    pub class_id: String,
    /// Connectivity factor towards every network provider, each in (0, 1].
    pub beta: Vec<f64>,
    /// Utility coefficient ω; 1 when pricing is disabled.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn is_one(w: &f64) -> bool {
    *w == 1.0
}

impl UserSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.beta.len() != k {
            return Err(Error::scenario(
                format!("users.{}.beta", self.id),
                format!(
                    "user `{}` has {} connectivity factors, expected {k}",
                    self.id,
                    self.beta.len()
                ),
            ));
        }
        if let Some(b) = self.beta.iter().find(|&&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::scenario(
                format!("users.{}.beta", self.id),
                format!("user `{}` has connectivity {b} outside (0, 1]", self.id),
            ));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::scenario(
                format!("users.{}.weight", self.id),
                format!("weight {} must be >= 0", self.weight),
            ));
        }
        Ok(())
    }
}

/// Concave envelope of a sigmoid restricted to `[lo, ∞)` or `[lo, hi]`.
///
/// On `[lo, w]` the envelope is the chord `u0 + slope·(z - lo)`; beyond `w` it
/// coincides with the sigmoid. For the full-domain envelope `lo = 0`, so `u0`
/// is `u(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub lo: f64,
    /// Tangency (or chord end) point.
    pub w: f64,
    /// Envelope value at `lo`, equal to `u(lo)`.
    pub u0: f64,
    pub slope: f64,
    /// Set when the tangency bisection could not bracket a sign change and
    /// the envelope fell back to `w = k`.
    pub fallback: bool,
}

impl Envelope {
    /// Full-domain envelope on `[0, ∞)`.
    pub fn new(class: &ServiceClass) -> Self {
        Self::on_interval(class, 0.0, f64::INFINITY)
    }

    /// Tightest concave overestimator of the class sigmoid on `[lo, hi]`.
    pub fn on_interval(class: &ServiceClass, lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi);
        let u_lo = class.qos(lo);
        let flat = |w: f64| Envelope {
            lo,
            w,
            u0: u_lo,
            slope: 0.0,
            fallback: false,
        };
        if class.t_z == 0.0 || lo >= class.k {
            // Sigmoid is already concave on the interval.
            return flat(lo);
        }
        let chord = |w: f64, fallback: bool| {
            let slope = if w > lo {
                (class.qos(w) - u_lo) / (w - lo)
            } else {
                0.0
            };
            Envelope {
                lo,
                w,
                u0: u_lo,
                slope,
                fallback,
            }
        };
        if hi <= class.k {
            return chord(hi, false);
        }
        // g(w) = u'(w)(w - lo) - (u(w) - u(lo)) is strictly decreasing on
        // (k, ∞), positive just right of k and negative at infinity.
        let g = |w: f64| class.qos_d1(w) * (w - lo) - (class.qos(w) - u_lo);
        if hi.is_finite() && g(hi) >= 0.0 {
            return chord(hi, false);
        }
        let mut a = class.k + 1e-9;
        if g(a) <= 0.0 {
            return chord(class.k, true);
        }
        let mut width = 200.0 / class.t_z;
        let mut b = class.k + width;
        while g(b) > 0.0 {
            a = b;
            width *= 2.0;
            b = class.k + width;
            if !b.is_finite() {
                return chord(class.k, true);
            }
        }
        if hi.is_finite() {
            b = b.min(hi);
        }
        while b - a > ENVELOPE_TOL {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if g(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        chord(0.5 * (a + b), false)
    }

    /// Envelope value and first derivative at `z`.
    #[inline]
    pub fn eval(&self, class: &ServiceClass, z: f64) -> (f64, f64) {
        if z < self.w {
            (self.u0 + self.slope * (z - self.lo), self.slope)
        } else {
            (class.qos(z), class.qos_d1(z))
        }
    }

    #[inline]
    pub fn value(&self, class: &ServiceClass, z: f64) -> f64 {
        self.eval(class, z).0
    }

    #[inline]
    pub fn d1(&self, class: &ServiceClass, z: f64) -> f64 {
        if z < self.w {
            self.slope
        } else {
            class.qos_d1(z)
        }
    }

    #[inline]
    pub fn d2(&self, class: &ServiceClass, z: f64) -> f64 {
        if z < self.w {
            0.0
        } else {
            class.qos_d2(z)
        }
    }

    /// Largest envelope slope, attained on the chord (or at `lo` when the
    /// envelope is the function itself).
    pub fn max_slope(&self, class: &ServiceClass) -> f64 {
        if self.w > self.lo {
            self.slope
        } else {
            class.qos_d1(self.lo)
        }
    }
}

/// Full-domain concave envelope of the class's QoS sigmoid.
pub fn build_envelope(class: &ServiceClass) -> Envelope {
    Envelope::new(class)
}

/// `(value, derivative)` of the envelope at `z >= 0`.
pub fn envelope_eval(env: &Envelope, class: &ServiceClass, z: f64) -> Result<(f64, f64)> {
    check_nonneg("resource amount z", z)?;
    Ok(env.eval(class, z))
}

/// Largest envelope-minus-function gap and where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nonconcavity {
    pub rho: f64,
    pub at: f64,
}

/// Nonconcavity `ρ = max_z (û(z) - u(z))` of the class sigmoid.
///
/// On the convex branch `z < k` the gap is concave, so its maximum sits where
/// `u'(z)` equals the chord slope; on `[k, w]` the gap is convex and vanishes
/// at `w`, so only the endpoints need checking.
pub fn nonconcavity(class: &ServiceClass) -> Nonconcavity {
    let env = Envelope::new(class);
    nonconcavity_of(&env, class)
}

pub(crate) fn nonconcavity_of(env: &Envelope, class: &ServiceClass) -> Nonconcavity {
    if env.w <= env.lo {
        return Nonconcavity { rho: 0.0, at: env.lo };
    }
    let gap = |z: f64| env.value(class, z) - class.qos(z);
    let mut best = Nonconcavity {
        rho: 0.0,
        at: env.lo,
    };
    let mut consider = |z: f64| {
        if z >= env.lo && z <= env.w {
            let g = gap(z);
            if g > best.rho {
                best = Nonconcavity { rho: g, at: z };
            }
        }
    };
    let q = env.slope / class.t_z;
    if q > 0.0 && q < 0.25 {
        // σ(1-σ) = q on the lower branch σ < 1/2.
        let s = 2.0 * q / (1.0 + (1.0 - 4.0 * q).sqrt());
        let z = class.k + (s / (1.0 - s)).ln() / class.t_z;
        consider(z);
    }
    consider(class.k.min(env.w));
    consider(env.lo);
    best
}

/// Sum of the `k` largest weighted nonconcavities `ω_i ρ(u_i)`.
pub fn epsilon_bound<'a, I>(users: I, k: usize) -> f64
where
    I: IntoIterator<Item = (f64, &'a ServiceClass)>,
{
    let mut rhos: Vec<f64> = users
        .into_iter()
        .map(|(w, class)| w * nonconcavity(class).rho)
        .collect();
    rhos.sort_by(|a, b| b.total_cmp(a));
    rhos.iter().take(k).sum()
}
