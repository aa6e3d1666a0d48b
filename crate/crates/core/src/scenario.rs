//! TOML scenario schema.
//!
//! ```toml
//! seed = 7
//! cycles = 3
//!
//! [[nps]]
//! id = "np1"
//! capacity = 1400.0
//!
//! [[classes]]
//! id = "c1"
//! t_z = 0.2
//! k = 100.0
//! t_p = 0.2
//! b = 100.0
//!
//! [[sps]]
//! id = "sp1"
//! lambda = 1e-4
//! [[sps.users]]
//! id = "sp1-u1"
//! class = "c1"
//! beta = [0.9]
//!
//! [auction]
//! kappa = 1e-4
//! c_init = [0.5]
//! tol = 10.0
//! max_iter = 100000
//!
//! [pricing]
//! enabled = true
//! ```
//!
//! Optional sections: `overbook` (`alpha`, percent per NP), `bnb` (`tol`,
//! `node_budget`) and `mcmc` (`n_samples`, `burn_in`, `thin`,
//! `proposal_scale`, and `[[mcmc.learn]]` entries naming a class and the
//! truncated-normal prior of every parameter to learn).

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auction::AuctionParams;
use crate::error::{Error, Result};
use crate::inference::PriorSpec;
use crate::solver::{SpModel, SpSpec};
use crate::utility::ServiceClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpSpec {
    pub id: String,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pricing {
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overbook {
    /// Percent per NP.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnbSettings {
    /// Absolute gap; defaults to `10⁻³ Σ ω`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "default_budget")]
    pub node_budget: usize,
}

fn default_budget() -> usize {
    crate::sigprog::DEFAULT_NODE_BUDGET
}

impl Default for BnbSettings {
    fn default() -> Self {
        BnbSettings {
            tol: None,
            node_budget: default_budget(),
        }
    }
}

/// A class whose parameters are learned from feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnSpec {
    pub class: String,
    pub prior: PriorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSettings {
    pub n_samples: usize,
    /// Defaults to 20% of `n_samples`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default = "default_thin")]
    pub thin: usize,
    /// Proposal std as a fraction of the prior std.
    #[serde(default = "default_proposal_scale")]
    pub proposal_scale: f64,
    #[serde(default)]
    pub learn: Vec<LearnSpec>,
}

fn default_thin() -> usize {
    1
}

fn default_proposal_scale() -> f64 {
    0.1
}

impl McmcSettings {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.n_samples / 5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    pub nps: Vec<NpSpec>,
    pub classes: Vec<ServiceClass>,
    pub sps: Vec<SpSpec>,
    pub auction: AuctionParams,
    pub pricing: Pricing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overbook: Option<Overbook>,
    #[serde(default)]
    pub bnb: BnbSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcSettings>,
}

fn default_cycles() -> usize {
    1
}

const BUNDLED: &[(&str, &str)] = &[
    ("scenario_sec6a", include_str!("../scenarios/scenario_sec6a.toml")),
    ("scenario_sec6b", include_str!("../scenarios/scenario_sec6b.toml")),
    ("scenario_sec6c", include_str!("../scenarios/scenario_sec6c.toml")),
    ("toy_single", include_str!("../scenarios/toy_single.toml")),
    ("toy_concave", include_str!("../scenarios/toy_concave.toml")),
];

/// Names of the scenarios compiled into the crate.
pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Source text of a bundled scenario.
pub fn bundled_source(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".toml").unwrap_or(name);
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parse and validate a bundled scenario.
pub fn bundled(name: &str) -> Result<Scenario> {
    let src = bundled_source(name)
        .ok_or_else(|| Error::scenario("<name>", format!("no bundled scenario `{name}`")))?;
    Scenario::from_toml(src)
}

/// Load a scenario from a file, or by bundled name if no such file exists.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    if !path.exists() {
        if let Some(src) = path.to_str().and_then(bundled_source) {
            return Scenario::from_toml(src);
        }
        return Err(Error::scenario(
            "<path>",
            format!(
                "`{}` is neither a file nor a bundled scenario ({})",
                path.display(),
                bundled_names().collect::<Vec<_>>().join(", ")
            ),
        ));
    }
    let text = std::fs::read_to_string(path)?;
    Scenario::from_toml(&text)
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| format!("<bytes {}..{}>", s.start, s.end))
                .unwrap_or_else(|| "<document>".into());
            Error::scenario(key, e.message().to_string())
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::scenario("<document>", e.to_string()))
    }

    pub fn k(&self) -> usize {
        self.nps.len()
    }

    pub fn capacities(&self) -> Vec<f64> {
        self.nps.iter().map(|n| n.capacity).collect()
    }

    pub fn class(&self, id: &str) -> Option<&ServiceClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Overbooking percentages, zero when the section is absent.
    pub fn alpha(&self) -> Vec<f64> {
        self.overbook
            .as_ref()
            .map_or_else(|| vec![0.0; self.k()], |o| o.alpha.clone())
    }

    /// Resolve every SP against `classes` (true or believed parameters).
    pub fn models(&self, classes: &[ServiceClass]) -> Result<Vec<SpModel>> {
        self.sps
            .iter()
            .map(|sp| SpModel::new(sp, classes, self.k(), self.pricing.enabled))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::scenario("nps", "at least one network provider is required"));
        }
        unique("nps", self.nps.iter().map(|n| n.id.as_str()))?;
        for np in &self.nps {
            if !(np.capacity > 0.0 && np.capacity.is_finite()) {
                return Err(Error::scenario(
                    format!("nps.{}.capacity", np.id),
                    format!("capacity must be > 0, got {}", np.capacity),
                ));
            }
        }
        unique("classes", self.classes.iter().map(|c| c.id.as_str()))?;
        for c in &self.classes {
            c.validate().map_err(|e| Error::scenario(format!("classes.{}", c.id), e.to_string()))?;
            if self.pricing.enabled && c.t_p <= 0.0 {
                return Err(Error::scenario(
                    format!("classes.{}.t_p", c.id),
                    "pricing needs t_p > 0",
                ));
            }
        }
        unique("sps", self.sps.iter().map(|s| s.id.as_str()))?;
        unique(
            "users",
            self.sps.iter().flat_map(|s| s.users.iter().map(|u| u.id.as_str())),
        )?;
        self.models(&self.classes)?;
        self.auction.validate(k)?;
        if let Some(o) = &self.overbook {
            if o.alpha.len() != k {
                return Err(Error::scenario(
                    "overbook.alpha",
                    format!("expected {k} entries, got {}", o.alpha.len()),
                ));
            }
            if o.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                return Err(Error::scenario("overbook.alpha", "entries must be >= 0"));
            }
        }
        if let Some(t) = self.bnb.tol {
            if !(t > 0.0) {
                return Err(Error::scenario("bnb.tol", "must be > 0"));
            }
        }
        if self.bnb.node_budget == 0 {
            return Err(Error::scenario("bnb.node_budget", "must be >= 1"));
        }
        if let Some(m) = &self.mcmc {
            if m.burn_in() >= m.n_samples {
                return Err(Error::scenario("mcmc.burn_in", "must be below n_samples"));
            }
            if m.thin == 0 {
                return Err(Error::scenario("mcmc.thin", "must be >= 1"));
            }
            if !(m.proposal_scale > 0.0) {
                return Err(Error::scenario("mcmc.proposal_scale", "must be > 0"));
            }
            unique("mcmc.learn", m.learn.iter().map(|l| l.class.as_str()))?;
            for l in &m.learn {
                if self.class(&l.class).is_none() {
                    return Err(Error::scenario(
                        format!("mcmc.learn.{}", l.class),
                        "unknown class",
                    ));
                }
                l.prior
                    .validate()
                    .map_err(|e| Error::scenario(format!("mcmc.learn.{}.prior", l.class), e.to_string()))?;
            }
        }
        Ok(())
    }
}

fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::scenario(what, format!("duplicate id `{id}`")));
        }
    }
    Ok(())
}
