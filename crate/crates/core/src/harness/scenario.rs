//! Scenario files: a JSON description of nodes, functions, services,
//! orchestrators and the simulated network.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingPolicy, PolicyKind, DEFAULT_POLICY_WEIGHT};
use crate::model::{validate_instance, Amount, ProblemInstance};
use crate::protocol::ElectionMode;
use crate::simnet::{ChannelModel, Crash, FailurePlan, SimMode, Topology, TopologyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub capacity: BTreeMap<String, Amount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub id: String,
    pub cost: BTreeMap<String, Amount>,
    pub implements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySpec {
    pub function: String,
    pub node: String,
    pub value: f64,
}

/// A policy given either by name or as `{ "kind": ..., "weight": ... }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Name(String),
    Full(EmbeddingPolicy),
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Name("neutral".into())
    }
}

impl PolicySpec {
    pub fn resolve(&self) -> Option<EmbeddingPolicy> {
        match self {
            PolicySpec::Name(s) => PolicyKind::parse(s).map(EmbeddingPolicy::new),
            PolicySpec::Full(p) => Some(*p),
        }
    }
}

impl From<EmbeddingPolicy> for PolicySpec {
    fn from(p: EmbeddingPolicy) -> Self {
        if p.weight == DEFAULT_POLICY_WEIGHT {
            PolicySpec::Name(p.kind.as_str().into())
        } else {
            PolicySpec::Full(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrchestratorSpec {
    pub id: String,
    pub bundle: Vec<String>,
    #[serde(default)]
    pub utilities: Vec<UtilitySpec>,
    #[serde(default)]
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    /// Edge probability of the random graph.
    #[serde(default = "default_edge_probability")]
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Orchestrator id pairs, for `custom`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<(String, String)>,
}

fn default_edge_probability() -> f64 {
    0.5
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            kind: TopologyKind::Complete,
            p: default_edge_probability(),
            seed: None,
            edges: Vec::new(),
        }
    }
}

/// Recipe for drawing orchestrators when sweeping over their number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Inclusive range of bundle sizes.
    pub bundle_size: (usize, usize),
    /// Inclusive range of per-(function, node) utilities.
    pub utility: (f64, f64),
    /// Orchestrator count used when the file lists none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orchestrators: Option<usize>,
    #[serde(default)]
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub orchestrator: String,
    pub time: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(rename = "_comment", default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub resources: Vec<String>,
    pub nodes: Vec<NodeSpec>,
    pub services: Vec<String>,
    pub functions: Vec<FunctionSpec>,
    #[serde(default)]
    pub orchestrators: Vec<OrchestratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub crashes: Vec<CrashSpec>,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub election: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
}

/// A defect found while validating, located by JSON path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}", render_invalid(.path, .diagnostics))]
    Invalid {
        path: PathBuf,
        diagnostics: Vec<Diagnostic>,
    },
}

fn render_invalid(path: &Path, diagnostics: &[Diagnostic]) -> String {
    let mut out = format!("{}: {} defect(s)", path.display(), diagnostics.len());
    for d in diagnostics {
        out.push_str(&format!("\n  {}: {d}", path.display()));
    }
    out
}

impl ScenarioError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ScenarioError::Invalid { diagnostics, .. } => diagnostics,
            _ => &[],
        }
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text, path)
}

/// Parses and validates scenario text; `path` only labels diagnostics.
pub fn parse_scenario(text: &str, path: &Path) -> Result<Scenario, ScenarioError> {
    let scn: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let diagnostics = scn.validate();
    if diagnostics.is_empty() {
        Ok(scn)
    } else {
        Err(ScenarioError::Invalid {
            path: path.to_path_buf(),
            diagnostics,
        })
    }
}

struct Checker {
    out: Vec<Diagnostic>,
}

impl Checker {
    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.out.push(Diagnostic {
            location: location.into(),
            message: message.into(),
        });
    }

    fn unique<'a>(&mut self, section: &str, ids: impl Iterator<Item = &'a String>) -> BTreeMap<&'a str, usize> {
        let mut index = BTreeMap::new();
        for (k, id) in ids.enumerate() {
            if index.insert(id.as_str(), k).is_some() {
                self.push(format!("{section}[{k}].id"), format!("duplicate id \"{id}\""));
            }
        }
        index
    }

    fn amounts(&mut self, loc: &str, map: &BTreeMap<String, Amount>, resources: &BTreeMap<&str, usize>, what: &str) {
        for (r, &a) in map {
            if !resources.contains_key(r.as_str()) {
                self.push(format!("{loc}.{r}"), format!("unresolved resource \"{r}\""));
            }
            if a < 0 {
                self.push(format!("{loc}.{r}"), format!("negative {what} {a}"));
            }
        }
    }
}

impl Scenario {
    /// Every defect in the scenario; empty when it is usable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut c = Checker { out: Vec::new() };
        let resources = c.unique("resources", self.resources.iter());
        let nodes = c.unique("nodes", self.nodes.iter().map(|n| &n.id));
        let services = c.unique("services", self.services.iter());
        let functions = c.unique("functions", self.functions.iter().map(|f| &f.id));
        let orchs = c.unique("orchestrators", self.orchestrators.iter().map(|o| &o.id));
        if self.resources.is_empty() {
            c.push("resources", "no resource types");
        }
        if self.nodes.is_empty() {
            c.push("nodes", "no nodes");
        }
        for (k, n) in self.nodes.iter().enumerate() {
            c.amounts(&format!("nodes[{k}].capacity"), &n.capacity, &resources, "capacity");
        }
        let mut implemented = BTreeSet::new();
        for (k, f) in self.functions.iter().enumerate() {
            c.amounts(&format!("functions[{k}].cost"), &f.cost, &resources, "cost");
            for (s_idx, s) in f.implements.iter().enumerate() {
                if services.contains_key(s.as_str()) {
                    implemented.insert(s.as_str());
                } else {
                    c.push(
                        format!("functions[{k}].implements[{s_idx}]"),
                        format!("unresolved service \"{s}\""),
                    );
                }
            }
        }
        for (k, o) in self.orchestrators.iter().enumerate() {
            let loc = format!("orchestrators[{k}]");
            if o.bundle.is_empty() {
                c.push(format!("{loc}.bundle"), "empty bundle");
            }
            let mut seen = BTreeSet::new();
            for (b, s) in o.bundle.iter().enumerate() {
                if !services.contains_key(s.as_str()) {
                    c.push(format!("{loc}.bundle[{b}]"), format!("unresolved service \"{s}\""));
                } else if !implemented.contains(s.as_str()) {
                    c.push(
                        format!("{loc}.bundle[{b}]"),
                        format!("service \"{s}\" is implemented by no function"),
                    );
                }
                if !seen.insert(s) {
                    c.push(format!("{loc}.bundle[{b}]"), format!("service \"{s}\" listed twice"));
                }
            }
            let mut keys = BTreeSet::new();
            for (u, spec) in o.utilities.iter().enumerate() {
                let uloc = format!("{loc}.utilities[{u}]");
                if !functions.contains_key(spec.function.as_str()) {
                    c.push(format!("{uloc}.function"), format!("unresolved function \"{}\"", spec.function));
                }
                if !nodes.contains_key(spec.node.as_str()) {
                    c.push(format!("{uloc}.node"), format!("unresolved node \"{}\"", spec.node));
                }
                if !spec.value.is_finite() || spec.value < 0.0 {
                    c.push(format!("{uloc}.value"), format!("utility {} is not a non-negative number", spec.value));
                }
                if !keys.insert((&spec.function, &spec.node)) {
                    c.push(uloc, format!("duplicate utility for ({}, {})", spec.function, spec.node));
                }
            }
            if o.policy.resolve().is_none() {
                c.push(format!("{loc}.policy"), "unknown policy");
            }
        }
        if let Some(w) = &self.workload {
            if w.bundle_size.0 == 0 || w.bundle_size.0 > w.bundle_size.1 {
                c.push("workload.bundle_size", "range must satisfy 1 <= low <= high");
            } else if w.bundle_size.0 > implemented.len() {
                c.push("workload.bundle_size", "more services requested than are implemented");
            }
            let (lo, hi) = w.utility;
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                c.push("workload.utility", "range must satisfy 0 <= low <= high");
            }
            if w.policy.resolve().is_none() {
                c.push("workload.policy", "unknown policy");
            }
            if self.orchestrators.is_empty() && w.orchestrators.is_none() {
                c.push("workload.orchestrators", "no orchestrator count and no orchestrators listed");
            }
        } else if self.orchestrators.is_empty() {
            c.push("orchestrators", "no orchestrators and no workload");
        }
        for (e, (a, b)) in self.topology.edges.iter().enumerate() {
            for end in [a, b] {
                if !orchs.contains_key(end.as_str()) {
                    c.push(format!("topology.edges[{e}]"), format!("unresolved orchestrator \"{end}\""));
                }
            }
            if a == b {
                c.push(format!("topology.edges[{e}]"), "self-loop");
            }
        }
        if self.topology.kind == TopologyKind::Custom {
            if self.orchestrators.is_empty() {
                c.push("topology.kind", "custom topology needs listed orchestrators");
            } else if c.out.is_empty() {
                if let Ok(t) = self.custom_topology() {
                    if !t.is_connected() {
                        c.push("topology.edges", "topology is disconnected");
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.topology.p) {
            c.push("topology.p", "edge probability outside [0, 1]");
        }
        if !(0.0..1.0).contains(&self.channel.drop_probability) {
            c.push("channel.drop_probability", "drop probability outside [0, 1)");
        }
        for (k, crash) in self.crashes.iter().enumerate() {
            if !self.orchestrators.is_empty() && !orchs.contains_key(crash.orchestrator.as_str()) {
                c.push(
                    format!("crashes[{k}].orchestrator"),
                    format!("unresolved orchestrator \"{}\"", crash.orchestrator),
                );
            }
        }
        if let Some(e) = &self.election {
            if ElectionMode::parse(e).is_none() {
                c.push("election", format!("unknown election mode \"{e}\""));
            }
        }
        if c.out.is_empty() && !self.orchestrators.is_empty() {
            for d in validate_instance(&self.instance()) {
                c.push("instance", d.to_string());
            }
        }
        c.out
    }

    fn index_of(names: &[String], name: &str) -> usize {
        names.iter().position(|n| n == name).expect("validated reference")
    }

    fn orchestrator_names(&self) -> Vec<String> {
        self.orchestrators.iter().map(|o| o.id.clone()).collect()
    }

    fn custom_topology(&self) -> Result<Topology, crate::simnet::SimError> {
        let names = self.orchestrator_names();
        let edges: Vec<(usize, usize)> = self
            .topology
            .edges
            .iter()
            .map(|(a, b)| (Self::index_of(&names, a), Self::index_of(&names, b)))
            .collect();
        Topology::custom(names.len(), &edges)
    }

    /// The integer-program view. Missing capacity, cost and utility entries are zero.
    pub fn instance(&self) -> ProblemInstance {
        let n_o = self.orchestrators.len();
        let n_s = self.services.len();
        let n_f = self.functions.len();
        let n_v = self.nodes.len();
        let n_r = self.resources.len();
        let amounts = |map: &BTreeMap<String, Amount>| -> Vec<Amount> {
            self.resources.iter().map(|r| map.get(r).copied().unwrap_or(0)).collect()
        };
        let node_names: Vec<String> = self.nodes.iter().map(|n| n.id.clone()).collect();
        let fn_names: Vec<String> = self.functions.iter().map(|f| f.id.clone()).collect();
        let mut implements = vec![vec![false; n_f]; n_s];
        for (j, f) in self.functions.iter().enumerate() {
            for s in &f.implements {
                implements[Self::index_of(&self.services, s)][j] = true;
            }
        }
        let mut bundle = vec![vec![false; n_s]; n_o];
        let mut base_utility = vec![vec![vec![0.0; n_v]; n_f]; n_o];
        for (i, o) in self.orchestrators.iter().enumerate() {
            for s in &o.bundle {
                bundle[i][Self::index_of(&self.services, s)] = true;
            }
            for u in &o.utilities {
                base_utility[i][Self::index_of(&fn_names, &u.function)][Self::index_of(&node_names, &u.node)] =
                    u.value;
            }
        }
        ProblemInstance {
            n_orchestrators: n_o,
            n_services: n_s,
            n_functions: n_f,
            n_nodes: n_v,
            n_resources: n_r,
            cost: self.functions.iter().map(|f| amounts(&f.cost)).collect(),
            capacity: self.nodes.iter().map(|n| amounts(&n.capacity)).collect(),
            implements,
            bundle,
            base_utility,
        }
    }

    pub fn policies(&self) -> Vec<EmbeddingPolicy> {
        self.orchestrators
            .iter()
            .map(|o| o.policy.resolve().unwrap_or_default())
            .collect()
    }

    /// `neutral`, `single-node-preferred`, ... or `mixed`.
    pub fn policy_label(&self) -> String {
        let kinds: BTreeSet<PolicyKind> = self.policies().iter().map(|p| p.kind).collect();
        match kinds.len() {
            0 => "none".into(),
            1 => kinds.iter().next().unwrap().as_str().into(),
            _ => "mixed".into(),
        }
    }

    /// Election used by the agents; greedy unless the file says otherwise.
    pub fn election_mode(&self) -> ElectionMode {
        self.election
            .as_deref()
            .and_then(ElectionMode::parse)
            .unwrap_or(ElectionMode::Greedy)
    }

    /// Communication graph for the listed orchestrators; `seed` drives a
    /// random graph unless the file pins its own.
    pub fn topology_for(&self, seed: u64) -> Result<Topology, crate::simnet::SimError> {
        let n = self.orchestrators.len();
        match self.topology.kind {
            TopologyKind::Custom => self.custom_topology(),
            kind => Topology::build(kind, n, self.topology.p, self.topology.seed.unwrap_or(seed)),
        }
    }

    pub fn failure_plan(&self) -> FailurePlan {
        let names = self.orchestrator_names();
        FailurePlan {
            crashes: self
                .crashes
                .iter()
                .filter_map(|c| {
                    names.iter().position(|n| *n == c.orchestrator).map(|orchestrator| Crash {
                        orchestrator,
                        time: c.time,
                    })
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "resources": ["cpu"],
        "nodes": [{"id": "n1", "capacity": {"cpu": 10}}],
        "services": ["s1"],
        "functions": [{"id": "f1", "cost": {"cpu": 4}, "implements": ["s1"]}],
        "orchestrators": [{"id": "o1", "bundle": ["s1"],
            "utilities": [{"function": "f1", "node": "n1", "value": 8}]}]
    }"#;

    #[test]
    fn minimal_loads() {
        let scn = parse_scenario(MINIMAL, Path::new("min.json")).unwrap();
        let inst = scn.instance();
        assert_eq!(inst.n_orchestrators, 1);
        assert_eq!(inst.cost, vec![vec![4]]);
        assert_eq!(inst.base_utility[0][0][0], 8.0);
        assert_eq!(scn.policy_label(), "neutral");
    }

    #[test]
    fn dangling_service_rejected() {
        let text = MINIMAL.replace(r#""bundle": ["s1"]"#, r#""bundle": ["s9"]"#);
        let err = parse_scenario(&text, Path::new("bad.json")).unwrap_err();
        let d = err.diagnostics();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].location, "orchestrators[0].bundle[0]");
        assert!(d[0].message.contains("unresolved service"));
        assert!(err.to_string().contains("bad.json"));
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse_scenario("{\n  \"resources\": [,]\n}", Path::new("x.json")).unwrap_err();
        match err {
            ScenarioError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn several_defects_reported() {
        let text = MINIMAL
            .replace(r#""cpu": 4"#, r#""gpu": -1"#)
            .replace(r#""node": "n1""#, r#""node": "n7""#);
        let err = parse_scenario(&text, Path::new("x.json")).unwrap_err();
        let msgs: Vec<String> = err.diagnostics().iter().map(|d| d.message.clone()).collect();
        assert!(msgs.iter().any(|m| m.contains("unresolved resource")));
        assert!(msgs.iter().any(|m| m.contains("negative cost")));
        assert!(msgs.iter().any(|m| m.contains("unresolved node")));
    }

    #[test]
    fn policy_forms() {
        let p: PolicySpec = serde_json::from_str(r#""single-node""#).unwrap();
        assert_eq!(p.resolve().unwrap().kind, PolicyKind::SingleNodePreferred);
        let p: PolicySpec = serde_json::from_str(r#"{"kind": "spread-preferred", "weight": 2.0}"#).unwrap();
        assert_eq!(p.resolve().unwrap().weight, 2.0);
        let p: PolicySpec = serde_json::from_str(r#""clustered""#).unwrap();
        assert!(p.resolve().is_none());
    }
}
