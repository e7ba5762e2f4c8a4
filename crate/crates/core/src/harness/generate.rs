//! Seeded scenario generators.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingPolicy;
use crate::simnet::{ChannelModel, SimMode, TopologyKind};

use super::scenario::{
    FunctionSpec, NodeSpec, OrchestratorSpec, PolicySpec, Scenario, TopologySpec, UtilitySpec,
    WorkloadSpec,
};

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn draw_orchestrators(
    scn: &Scenario,
    w: &WorkloadSpec,
    count: usize,
    policy: &PolicySpec,
    rng: &mut ChaCha8Rng,
) -> Vec<OrchestratorSpec> {
    let implemented: Vec<&String> = scn
        .services
        .iter()
        .filter(|s| scn.functions.iter().any(|f| f.implements.contains(s)))
        .collect();
    let hi = w.bundle_size.1.min(implemented.len());
    let lo = w.bundle_size.0.min(hi);
    (0..count)
        .map(|i| {
            let size = rng.gen_range(lo..=hi);
            let mut bundle: Vec<String> = implemented
                .choose_multiple(rng, size)
                .map(|s| (*s).clone())
                .collect();
            bundle.sort_by_key(|s| scn.services.iter().position(|x| x == s));
            let mut utilities = Vec::new();
            for f in scn.functions.iter().filter(|f| f.implements.iter().any(|s| bundle.contains(s))) {
                for n in &scn.nodes {
                    utilities.push(UtilitySpec {
                        function: f.id.clone(),
                        node: n.id.clone(),
                        value: round2(rng.gen_range(w.utility.0..=w.utility.1)),
                    });
                }
            }
            OrchestratorSpec {
                id: format!("o{}", i + 1),
                bundle,
                utilities,
                policy: policy.clone(),
            }
        })
        .collect()
}

impl Scenario {
    /// Replaces the orchestrators with `count` drawn from the workload
    /// section. Returns `None` without a workload.
    pub fn with_generated(
        &self,
        count: usize,
        policy: Option<EmbeddingPolicy>,
        seed: u64,
    ) -> Option<Scenario> {
        let w = self.workload.as_ref()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = policy.map(PolicySpec::from).unwrap_or_else(|| w.policy.clone());
        let mut out = self.clone();
        out.orchestrators = draw_orchestrators(self, w, count, &policy, &mut rng);
        out.crashes.clear();
        if out.topology.kind == TopologyKind::Custom {
            out.topology = TopologySpec::default();
        }
        Some(out)
    }

    /// The scenario as run: listed orchestrators if any, else the workload default count.
    pub fn materialize(&self, seed: u64) -> Scenario {
        match (&self.workload, self.orchestrators.is_empty()) {
            (Some(w), true) => self
                .with_generated(w.orchestrators.unwrap_or(1), None, seed)
                .expect("workload present"),
            _ => self.clone(),
        }
    }
}

/// Size ranges for [`random_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSpec {
    pub orchestrators: RangeInclusive<usize>,
    pub nodes: RangeInclusive<usize>,
    pub resources: RangeInclusive<usize>,
    pub functions: RangeInclusive<usize>,
    pub services: RangeInclusive<usize>,
    pub bundle_size: RangeInclusive<usize>,
    pub capacity: RangeInclusive<i64>,
    pub cost: RangeInclusive<i64>,
    pub topologies: Vec<TopologyKind>,
    pub policy: EmbeddingPolicy,
    pub mode: SimMode,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            orchestrators: 2..=8,
            nodes: 1..=4,
            resources: 1..=2,
            functions: 2..=6,
            services: 1..=4,
            bundle_size: 1..=3,
            capacity: 6..=20,
            cost: 1..=8,
            topologies: vec![
                TopologyKind::Line,
                TopologyKind::Ring,
                TopologyKind::Complete,
                TopologyKind::RandomConnected,
            ],
            policy: EmbeddingPolicy::neutral(),
            mode: SimMode::Sync,
        }
    }
}

/// A self-contained random scenario; every service has an implementer.
pub fn random_scenario(seed: u64, spec: &RandomSpec) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_o = rng.gen_range(spec.orchestrators.clone());
    let n_v = rng.gen_range(spec.nodes.clone());
    let n_r = rng.gen_range(spec.resources.clone());
    let n_s = rng.gen_range(spec.services.clone());
    let n_f = rng.gen_range(spec.functions.clone()).max(n_s);
    let resources: Vec<String> = ["cpu", "mem", "disk", "net"].iter().take(n_r.max(1)).map(|s| s.to_string()).collect();
    let services: Vec<String> = (1..=n_s).map(|s| format!("s{s}")).collect();
    let amounts = |rng: &mut ChaCha8Rng, range: &RangeInclusive<i64>| -> BTreeMap<String, i64> {
        resources.iter().map(|r| (r.clone(), rng.gen_range(range.clone()))).collect()
    };
    let nodes = (1..=n_v)
        .map(|n| NodeSpec {
            id: format!("n{n}"),
            capacity: amounts(&mut rng, &spec.capacity),
        })
        .collect();
    let functions = (0..n_f)
        .map(|j| {
            let mut implements = vec![services[j % n_s].clone()];
            if n_s > 1 && rng.gen_bool(0.3) {
                let extra = services[rng.gen_range(0..n_s)].clone();
                if !implements.contains(&extra) {
                    implements.push(extra);
                }
            }
            FunctionSpec {
                id: format!("f{}", j + 1),
                cost: amounts(&mut rng, &spec.cost),
                implements,
            }
        })
        .collect();
    let kind = spec.topologies[rng.gen_range(0..spec.topologies.len())];
    let lo = *spec.bundle_size.start();
    let hi = *spec.bundle_size.end();
    let mut scn = Scenario {
        comment: None,
        name: Some(format!("random-{seed}")),
        resources,
        nodes,
        services,
        functions,
        orchestrators: Vec::new(),
        workload: Some(WorkloadSpec {
            bundle_size: (lo.min(n_s).max(1), hi.min(n_s).max(1)),
            utility: (1.0, 10.0),
            orchestrators: Some(n_o),
            policy: PolicySpec::from(spec.policy),
        }),
        topology: TopologySpec {
            kind,
            p: 0.4,
            seed: None,
            edges: Vec::new(),
        },
        channel: ChannelModel::default(),
        crashes: Vec::new(),
        mode: spec.mode,
        election: None,
        max_iterations: None,
    };
    scn.orchestrators = scn
        .with_generated(n_o, Some(spec.policy), rng.gen())
        .expect("workload present")
        .orchestrators;
    scn
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scenarios_validate() {
        for seed in 0..50 {
            let scn = random_scenario(seed, &RandomSpec::default());
            assert!(scn.validate().is_empty(), "seed {seed}: {:?}", scn.validate());
            assert_eq!(scn, random_scenario(seed, &RandomSpec::default()));
        }
    }
}
