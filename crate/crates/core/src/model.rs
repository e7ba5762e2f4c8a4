//! The orchestrator-resources assignment problem: instance data, allocations,
//! feasibility checking and the global objective.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type OrchId = usize;
pub type ServiceId = usize;
pub type FuncId = usize;
pub type NodeId = usize;
pub type ResourceId = usize;

/// Integer amount of one resource type.
pub type Amount = i64;

/// Absolute tolerance used for every utility / vote comparison.
pub const UTILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// A complete problem instance.
///
/// Matrices are stored row-major as nested vectors:
/// `cost[j][k]`, `capacity[n][k]`, `implements[m][j]`, `bundle[i][m]`
/// and `base_utility[i][j][n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub n_orchestrators: usize,
    pub n_services: usize,
    pub n_functions: usize,
    pub n_nodes: usize,
    pub n_resources: usize,
    pub cost: Vec<Vec<Amount>>,
    pub capacity: Vec<Vec<Amount>>,
    pub implements: Vec<Vec<bool>>,
    pub bundle: Vec<Vec<bool>>,
    pub base_utility: Vec<Vec<Vec<f64>>>,
}

/// A structural problem found by [`validate_instance`].
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceDefect {
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    UnimplementableService { service: ServiceId },
    EmptyBundle { orchestrator: OrchId },
    NegativeCost { function: FuncId, resource: ResourceId },
    NegativeCapacity { node: NodeId, resource: ResourceId },
    InvalidUtility { orchestrator: OrchId, function: FuncId, node: NodeId },
}

impl fmt::Display for InstanceDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected dimension {expected}, found {found}"),
            Self::UnimplementableService { service } => {
                write!(f, "service {service} is not implemented by any function")
            }
            Self::EmptyBundle { orchestrator } => {
                write!(f, "orchestrator {orchestrator} has an empty bundle")
            }
            Self::NegativeCost { function, resource } => {
                write!(f, "negative cost at (function {function}, resource {resource})")
            }
            Self::NegativeCapacity { node, resource } => {
                write!(f, "negative capacity at (node {node}, resource {resource})")
            }
            Self::InvalidUtility {
                orchestrator,
                function,
                node,
            } => write!(
                f,
                "utility of orchestrator {orchestrator} for function {function} on node {node} \
                 is negative or not finite"
            ),
        }
    }
}

fn check_len(
    defects: &mut Vec<InstanceDefect>,
    what: &'static str,
    expected: usize,
    found: usize,
) -> bool {
    if expected != found {
        defects.push(InstanceDefect::Dimension {
            what,
            expected,
            found,
        });
        false
    } else {
        true
    }
}

/// Lists every structural defect of `inst`. An empty list means the instance
/// is well formed.
pub fn validate_instance(inst: &ProblemInstance) -> Vec<InstanceDefect> {
    let mut defects = Vec::new();
    let mut dims_ok = check_len(&mut defects, "cost rows", inst.n_functions, inst.cost.len());
    for row in &inst.cost {
        dims_ok &= check_len(&mut defects, "cost columns", inst.n_resources, row.len());
    }
    dims_ok &= check_len(&mut defects, "capacity rows", inst.n_nodes, inst.capacity.len());
    for row in &inst.capacity {
        dims_ok &= check_len(&mut defects, "capacity columns", inst.n_resources, row.len());
    }
    dims_ok &= check_len(
        &mut defects,
        "implements rows",
        inst.n_services,
        inst.implements.len(),
    );
    for row in &inst.implements {
        dims_ok &= check_len(&mut defects, "implements columns", inst.n_functions, row.len());
    }
    dims_ok &= check_len(&mut defects, "bundle rows", inst.n_orchestrators, inst.bundle.len());
    for row in &inst.bundle {
        dims_ok &= check_len(&mut defects, "bundle columns", inst.n_services, row.len());
    }
    dims_ok &= check_len(
        &mut defects,
        "utility rows",
        inst.n_orchestrators,
        inst.base_utility.len(),
    );
    for per_orch in &inst.base_utility {
        dims_ok &= check_len(&mut defects, "utility functions", inst.n_functions, per_orch.len());
        for per_func in per_orch {
            dims_ok &= check_len(&mut defects, "utility nodes", inst.n_nodes, per_func.len());
        }
    }
    if !dims_ok {
        return defects;
    }

    for (j, row) in inst.cost.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            if c < 0 {
                defects.push(InstanceDefect::NegativeCost {
                    function: j,
                    resource: k,
                });
            }
        }
    }
    for (n, row) in inst.capacity.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            if c < 0 {
                defects.push(InstanceDefect::NegativeCapacity { node: n, resource: k });
            }
        }
    }
    for (m, row) in inst.implements.iter().enumerate() {
        if !row.iter().any(|&b| b) {
            defects.push(InstanceDefect::UnimplementableService { service: m });
        }
    }
    for (i, row) in inst.bundle.iter().enumerate() {
        if !row.iter().any(|&b| b) {
            defects.push(InstanceDefect::EmptyBundle { orchestrator: i });
        }
    }
    for (i, per_orch) in inst.base_utility.iter().enumerate() {
        for (j, per_func) in per_orch.iter().enumerate() {
            for (n, &u) in per_func.iter().enumerate() {
                if !u.is_finite() || u < 0.0 {
                    defects.push(InstanceDefect::InvalidUtility {
                        orchestrator: i,
                        function: j,
                        node: n,
                    });
                }
            }
        }
    }
    defects
}

impl ProblemInstance {
    /// Services in the bundle of orchestrator `i`, ascending.
    pub fn bundle_services(&self, i: OrchId) -> Vec<ServiceId> {
        self.bundle[i]
            .iter()
            .enumerate()
            .filter_map(|(m, &b)| b.then_some(m))
            .collect()
    }

    pub fn bundle_size(&self, i: OrchId) -> usize {
        self.bundle[i].iter().filter(|&&b| b).count()
    }

    /// Functions able to implement service `m`, ascending.
    pub fn implementers(&self, m: ServiceId) -> Vec<FuncId> {
        (0..self.n_functions)
            .filter(|&j| self.implements[m][j])
            .collect()
    }
}

/// Decision variables `x_ijn`. The activation flag `y_i` is derived from `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub x: Vec<Vec<Vec<bool>>>,
}

impl Allocation {
    pub fn empty(inst: &ProblemInstance) -> Self {
        Self {
            x: vec![vec![vec![false; inst.n_nodes]; inst.n_functions]; inst.n_orchestrators],
        }
    }

    pub fn assign(&mut self, i: OrchId, j: FuncId, n: NodeId) {
        self.x[i][j][n] = true;
    }

    /// `y_i`: whether orchestrator `i` holds at least one function instance.
    pub fn is_active(&self, i: OrchId) -> bool {
        self.x[i].iter().any(|row| row.iter().any(|&b| b))
    }

    pub fn y(&self) -> Vec<bool> {
        (0..self.x.len()).map(|i| self.is_active(i)).collect()
    }

    /// Assigned `(function, node)` pairs of orchestrator `i`.
    pub fn placements(&self, i: OrchId) -> Vec<(FuncId, NodeId)> {
        let mut out = Vec::new();
        for (j, row) in self.x[i].iter().enumerate() {
            for (n, &b) in row.iter().enumerate() {
                if b {
                    out.push((j, n));
                }
            }
        }
        out
    }

    fn check_dims(&self, inst: &ProblemInstance) -> Result<(), ModelError> {
        if self.x.len() != inst.n_orchestrators {
            return Err(ModelError::DimensionMismatch {
                what: "allocation orchestrators",
                expected: inst.n_orchestrators,
                found: self.x.len(),
            });
        }
        for per_orch in &self.x {
            if per_orch.len() != inst.n_functions {
                return Err(ModelError::DimensionMismatch {
                    what: "allocation functions",
                    expected: inst.n_functions,
                    found: per_orch.len(),
                });
            }
            for per_func in per_orch {
                if per_func.len() != inst.n_nodes {
                    return Err(ModelError::DimensionMismatch {
                        what: "allocation nodes",
                        expected: inst.n_nodes,
                        found: per_func.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether orchestrator `i` holds a complete bundle: an implementing
    /// function for every bundle service and exactly as many functions as
    /// services.
    pub fn bundle_complete(&self, inst: &ProblemInstance, i: OrchId) -> bool {
        let placed = self.placements(i);
        if placed.is_empty() || placed.len() != inst.bundle_size(i) {
            return false;
        }
        inst.bundle_services(i)
            .into_iter()
            .all(|m| placed.iter().any(|&(j, _)| inst.implements[m][j]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Demand on a node exceeds its capacity for one resource type.
    Capacity {
        node: NodeId,
        resource: ResourceId,
        used: Amount,
        capacity: Amount,
    },
    /// An active orchestrator holds a number of functions different from its bundle size.
    BundleSize {
        orchestrator: OrchId,
        assigned: usize,
        required: usize,
    },
    /// An active orchestrator holds no function implementing one of its services.
    BundleCoverage {
        orchestrator: OrchId,
        service: ServiceId,
    },
    /// An orchestrator holds the same function on more than one node.
    SingleInstance {
        orchestrator: OrchId,
        function: FuncId,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_feasibility(
    inst: &ProblemInstance,
    alloc: &Allocation,
) -> Result<FeasibilityReport, ModelError> {
    alloc.check_dims(inst)?;
    let mut violations = Vec::new();

    for n in 0..inst.n_nodes {
        for k in 0..inst.n_resources {
            let used: Amount = (0..inst.n_orchestrators)
                .flat_map(|i| (0..inst.n_functions).map(move |j| (i, j)))
                .filter(|&(i, j)| alloc.x[i][j][n])
                .map(|(_, j)| inst.cost[j][k])
                .sum();
            if used > inst.capacity[n][k] {
                violations.push(Violation::Capacity {
                    node: n,
                    resource: k,
                    used,
                    capacity: inst.capacity[n][k],
                });
            }
        }
    }

    for i in 0..inst.n_orchestrators {
        if alloc.is_active(i) {
            let assigned = alloc.placements(i).len();
            let required = inst.bundle_size(i);
            if assigned != required {
                violations.push(Violation::BundleSize {
                    orchestrator: i,
                    assigned,
                    required,
                });
            }
            for m in inst.bundle_services(i) {
                let covered = (0..inst.n_functions)
                    .any(|j| inst.implements[m][j] && alloc.x[i][j].iter().any(|&b| b));
                if !covered {
                    violations.push(Violation::BundleCoverage {
                        orchestrator: i,
                        service: m,
                    });
                }
            }
        }
        for j in 0..inst.n_functions {
            if alloc.x[i][j].iter().filter(|&&b| b).count() > 1 {
                violations.push(Violation::SingleInstance {
                    orchestrator: i,
                    function: j,
                });
            }
        }
    }
    Ok(FeasibilityReport { violations })
}

/// Hook turning the assignment-independent base utility into `U_ijn(x_i)`.
///
/// `others` holds the `(function, node)` placements of orchestrator `i`
/// other than the one being valued.
pub trait UtilityModifier {
    fn modify(
        &self,
        orchestrator: OrchId,
        others: &[(FuncId, NodeId)],
        candidate: (FuncId, NodeId),
        base: f64,
    ) -> f64;
}

/// Identity modifier: utilities are the base tensor.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neutral;

impl UtilityModifier for Neutral {
    fn modify(&self, _: OrchId, _: &[(FuncId, NodeId)], _: (FuncId, NodeId), base: f64) -> f64 {
        base
    }
}

/// Utility of one orchestrator's full placement list under `modifier`.
pub fn assignment_utility(
    inst: &ProblemInstance,
    i: OrchId,
    placements: &[(FuncId, NodeId)],
    modifier: &dyn UtilityModifier,
) -> f64 {
    let mut total = 0.0;
    for (idx, &(j, n)) in placements.iter().enumerate() {
        let others: Vec<_> = placements
            .iter()
            .enumerate()
            .filter(|&(o, _)| o != idx)
            .map(|(_, &p)| p)
            .collect();
        total += modifier.modify(i, &others, (j, n), inst.base_utility[i][j][n]);
    }
    total
}

/// Global objective under the neutral modifier.
pub fn global_utility(inst: &ProblemInstance, alloc: &Allocation) -> Result<f64, ModelError> {
    global_utility_with(inst, alloc, |_| &Neutral)
}

/// Objective with a per-orchestrator modifier.
pub fn global_utility_with<'a, F>(
    inst: &ProblemInstance,
    alloc: &Allocation,
    modifier_of: F,
) -> Result<f64, ModelError>
where
    F: Fn(OrchId) -> &'a dyn UtilityModifier,
{
    alloc.check_dims(inst)?;
    Ok((0..inst.n_orchestrators)
        .map(|i| assignment_utility(inst, i, &alloc.placements(i), modifier_of(i)))
        .sum())
}
