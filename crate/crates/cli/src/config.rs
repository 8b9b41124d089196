//! Experiment configuration files.
//!
//! Grammar (TOML):
//!
//! ```toml
//! seed = 7                      # master seed
//! output = "runs/demo"          # optional output directory
//!
//! [model]
//! kind = "bernoulli"            # bernoulli | interlacements | vacant | gff
//! parameter = 0.8
//!
//! [box]
//! corner = [-64, -64]
//! sides = [129, 129]
//!
//! [ladder]                      # optional unless a stage needs scales
//! l0 = 16
//! r0 = 1
//! L0 = 4
//! theta = 1
//! depth = 1
//!
//! [eta]                         # optional; defaults to (3/4, 5/4) * parameter
//! eta1 = 0.5
//! eta2 = 0.9
//!
//! [stages.sample]               # one table per stage to run
//! [stages.classify]
//! [stages.perforate]
//! [stages.cluster]
//! [stages.isop]
//! [stages.regularity]
//! [stages.walk]
//! ```
//!
//! Stage `i` in the fixed order `sample, classify, perforate, cluster, isop,
//! regularity, walk` draws its randomness from `derive_seed(seed, i)`.

use std::path::PathBuf;

use percolab::isoperimetry::Family;
use percolab::lattice::{LatticeBox, Point};
use percolab::regularity::BallParams;
use percolab::renorm::{Compliance, DensityPair, LadderSpec, ScaleLadder};
use percolab::rng::derive_seed;
use percolab::samplers::{Model, DEFAULT_GUARD_FACTOR};
use serde::{Deserialize, Serialize};

pub const STAGES: [&str; 7] = ["sample", "classify", "perforate", "cluster", "isop", "regularity", "walk"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub model: ModelSpec,
    #[serde(rename = "box")]
    pub domain: BoxSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<EtaSpec>,
    #[serde(default)]
    pub stages: Stages,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub parameter: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bernoulli,
    Interlacements,
    Vacant,
    Gff,
}

impl ModelSpec {
    pub fn model(&self) -> Model {
        match self.kind {
            ModelKind::Bernoulli => Model::Bernoulli(self.parameter),
            ModelKind::Interlacements => Model::Interlacements(self.parameter),
            ModelKind::Vacant => Model::Vacant(self.parameter),
            ModelKind::Gff => Model::GffExcursion(self.parameter),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub corner: Vec<i64>,
    pub sides: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaSpec {
    pub eta1: f64,
    pub eta2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classify: Option<ClassifyStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perforate: Option<PerforateStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isop: Option<IsopStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularity: Option<RegularityStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk: Option<WalkStage>,
}

impl Stages {
    pub fn enabled(&self) -> Vec<&'static str> {
        let on = [
            self.sample.is_some(),
            self.classify.is_some(),
            self.perforate.is_some(),
            self.cluster.is_some(),
            self.isop.is_some(),
            self.regularity.is_some(),
            self.walk.is_some(),
        ];
        STAGES.iter().zip(on).filter(|(_, b)| *b).map(|(s, _)| *s).collect()
    }
}

fn default_guard() -> f64 {
    DEFAULT_GUARD_FACTOR
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleStage {
    #[serde(default = "default_guard")]
    pub guard_factor: f64,
}

impl Default for SampleStage {
    fn default() -> Self {
        Self { guard_factor: DEFAULT_GUARD_FACTOR }
    }
}

/// Classifies the box shrunk by one `L_0` collar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyStage {
    /// Highest level; defaults to the ladder depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmax: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerforateStage {
    pub k: u64,
    pub s: usize,
    pub origin: Vec<i64>,
}

fn default_pairs() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterStage {
    pub k: u64,
    pub level: usize,
    pub origin: Vec<i64>,
    /// Diameter threshold of `S_r`.
    pub r: u64,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default)]
    pub radii: Vec<u64>,
    #[serde(default = "default_centres")]
    pub centres: usize,
}

fn default_centres() -> usize {
    16
}

fn default_families() -> Vec<String> {
    ["balls", "halves", "holes", "random"].map(String::from).to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsopStage {
    #[serde(default = "default_families")]
    pub families: Vec<String>,
}

impl Default for IsopStage {
    fn default() -> Self {
        Self { families: default_families() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityStage {
    /// Target centre; the nearest occupied site is used.
    pub centre: Vec<i64>,
    pub radius: u64,
    pub cv: f64,
    pub cp: f64,
    pub cw: f64,
    #[serde(default)]
    pub level: usize,
    #[serde(default = "default_centres")]
    pub max_centres: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkStage {
    /// Target source; the nearest site of the largest component is used.
    pub source: Vec<i64>,
    /// Envelope times; steps `t` and `t + 1` are computed.
    #[serde(default)]
    pub times: Vec<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harnack_radius: Option<u64>,
    #[serde(default = "default_trials")]
    pub harnack_trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qip_steps: Option<usize>,
    #[serde(default = "default_trials")]
    pub qip_trials: usize,
    /// Killing distance for the Green function (`d >= 3`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub green_guard: Option<u64>,
    #[serde(default)]
    pub green_targets: Vec<Vec<i64>>,
}

fn default_eps() -> f64 {
    0.5
}

fn default_trials() -> usize {
    100
}

/// A named configuration problem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn dim(&self) -> usize {
        self.domain.corner.len()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        let i = STAGES.iter().position(|s| *s == stage).expect("known stage");
        derive_seed(self.seed, i as u64)
    }

    pub fn domain(&self) -> Result<LatticeBox, String> {
        let corner = Point::new(&self.domain.corner).map_err(|e| e.to_string())?;
        LatticeBox::new(corner, &self.domain.sides).map_err(|e| e.to_string())
    }

    pub fn ladder(&self) -> Option<Result<ScaleLadder, String>> {
        self.ladder.map(|s| ScaleLadder::new(s.l0, s.r0, s.big_l0, s.theta, s.depth).map_err(|e| e.to_string()))
    }

    pub fn eta(&self) -> Result<DensityPair, String> {
        match self.eta {
            Some(e) => DensityPair::new(e.eta1, e.eta2).map_err(|e| e.to_string()),
            None => DensityPair::from_density(self.model.parameter).map_err(|e| e.to_string()),
        }
    }

    /// Ladder flags, when a ladder is configured and materialises.
    pub fn compliance(&self) -> Option<Compliance> {
        let ladder = self.ladder()?.ok()?;
        let eta = self.eta().ok();
        Some(ladder.compliance(self.dim(), eta.as_ref()))
    }

    /// Every field-level problem, in declaration order.
    pub fn validate(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| out.push(Issue { field: field.into(), message });
        let d = self.dim();
        if self.domain.sides.len() != d {
            push("box.sides", format!("{} sides for a {d}-dimensional corner", self.domain.sides.len()));
        } else if let Err(e) = self.domain() {
            push("box", e);
        }
        if let Err(e) = self.model.model().validate(d) {
            push("model", e.to_string());
        }
        if self.eta.is_some() {
            if let Err(e) = self.eta() {
                push("eta", e);
            }
        }
        let ladder = match self.ladder() {
            Some(Ok(l)) => {
                if let Err(e) = l.check_basic() {
                    push("ladder", e.to_string());
                }
                Some(l)
            }
            Some(Err(e)) => {
                push("ladder", e);
                None
            }
            None => None,
        };
        let st = &self.stages;
        let needs_ladder = st.classify.is_some() || st.perforate.is_some() || st.cluster.is_some() || st.regularity.is_some();
        if needs_ladder && self.ladder.is_none() {
            push("ladder", "required by the classify, perforate, cluster and regularity stages".into());
        }
        if (st.classify.is_some() || st.perforate.is_some()) && self.eta.is_none() {
            if let Err(e) = self.eta() {
                push("eta", format!("default pair from the model parameter is invalid: {e}"));
            }
        }
        if let Some(s) = &st.sample {
            if !(s.guard_factor > 1.0) {
                push("stages.sample.guard_factor", format!("{} must exceed 1", s.guard_factor));
            }
        }
        if let (Some(c), Some(l)) = (&st.classify, &ladder) {
            if c.nmax.is_some_and(|n| n > l.depth()) {
                push("stages.classify.nmax", format!("exceeds ladder depth {}", l.depth()));
            }
        }
        if let Some(p) = &st.perforate {
            if p.k == 0 {
                push("stages.perforate.k", "must be positive".into());
            }
            if p.origin.len() != d {
                push("stages.perforate.origin", format!("expected {d} coordinates"));
            }
            if let Some(l) = &ladder {
                if p.s > l.depth() {
                    push("stages.perforate.s", format!("exceeds ladder depth {}", l.depth()));
                }
            }
        }
        if let Some(c) = &st.cluster {
            if c.k == 0 {
                push("stages.cluster.k", "must be positive".into());
            }
            if c.origin.len() != d {
                push("stages.cluster.origin", format!("expected {d} coordinates"));
            }
            if let Some(l) = &ladder {
                if c.level > l.depth() {
                    push("stages.cluster.level", format!("exceeds ladder depth {}", l.depth()));
                }
            }
        }
        if let Some(i) = &st.isop {
            if let Err(e) = Family::parse_list(&i.families.join(",")) {
                push("stages.isop.families", e.to_string());
            }
        }
        if let Some(r) = &st.regularity {
            if r.centre.len() != d {
                push("stages.regularity.centre", format!("expected {d} coordinates"));
            }
            if r.radius == 0 {
                push("stages.regularity.radius", "must be positive".into());
            }
            if let Err(e) = BallParams::new(r.cv, r.cp, r.cw, d.max(1)) {
                push("stages.regularity", e.to_string());
            }
            if let Some(l) = &ladder {
                if r.level > l.depth() {
                    push("stages.regularity.level", format!("exceeds ladder depth {}", l.depth()));
                }
            }
        }
        if let Some(w) = &st.walk {
            if w.source.len() != d {
                push("stages.walk.source", format!("expected {d} coordinates"));
            }
            if !(w.eps > 0.0 && w.eps <= 0.5) {
                push("stages.walk.eps", format!("{} not in (0, 1/2]", w.eps));
            }
            if w.green_guard.is_some() && d < 3 {
                push("stages.walk.green_guard", "the Green function needs d >= 3".into());
            }
            if w.green_targets.iter().any(|t| t.len() != d) {
                push("stages.walk.green_targets", format!("expected {d} coordinates per target"));
            }
        }
        out
    }
}
