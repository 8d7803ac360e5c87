use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// External bus number as it appears in case files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    /// Voltage magnitude, p.u.
    pub vm: f64,
    /// Voltage angle, rad.
    pub va: f64,
    /// Shunt susceptance applied at this bus on every branch end, p.u.
    pub shunt_b: f64,
}

/// A π-model branch. `tap` is the off-nominal turns ratio on the `from` side
/// and `shift` the phase shift in radians, following the MATPOWER convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub g: f64,
    pub b: f64,
    #[serde(default = "unit_tap")]
    pub tap: f64,
    #[serde(default)]
    pub shift: f64,
}

fn unit_tap() -> f64 {
    1.0
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("malformed case document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("case has no buses")]
    EmptyBusList,
    #[error("bus {0} is listed more than once")]
    DuplicateBus(BusId),
    #[error("bus {bus} has non-positive voltage magnitude {vm}")]
    NonPositiveMagnitude { bus: BusId, vm: f64 },
    #[error("branch {index} references unknown bus {bus}")]
    DanglingEndpoint { index: usize, bus: BusId },
    #[error("branch {index} is a self loop on bus {bus}")]
    SelfLoop { index: usize, bus: BusId },
    #[error("branch {index} has non-positive tap ratio {tap}")]
    NonPositiveTap { index: usize, tap: f64 },
    #[error("bus graph is disconnected: {reached} of {total} buses reachable from bus {root}")]
    Disconnected {
        root: BusId,
        reached: usize,
        total: usize,
    },
    #[error("PMU bus {0} is not a bus of the case")]
    UnknownPmuBus(BusId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaseDocument {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    #[serde(default)]
    pmu_buses: Vec<BusId>,
}

/// A validated network. Buses are stored in ascending id order and every
/// internal index refers to that order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    pmu: BTreeSet<BusId>,
    index: HashMap<BusId, usize>,
    /// Distinct adjacent bus indices, ascending, excluding the bus itself.
    adjacency: Vec<Vec<usize>>,
    /// Branch indices incident to each bus.
    incident: Vec<Vec<usize>>,
}

impl NetworkCase {
    pub fn new(
        mut buses: Vec<Bus>,
        branches: Vec<Branch>,
        pmu_buses: impl IntoIterator<Item = BusId>,
    ) -> Result<Self, CaseError> {
        if buses.is_empty() {
            return Err(CaseError::EmptyBusList);
        }
        buses.sort_by_key(|b| b.id);
        let mut index = HashMap::with_capacity(buses.len());
        for (k, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, k).is_some() {
                return Err(CaseError::DuplicateBus(bus.id));
            }
            if !(bus.vm > 0.0) {
                return Err(CaseError::NonPositiveMagnitude {
                    bus: bus.id,
                    vm: bus.vm,
                });
            }
        }

        let n = buses.len();
        let mut adjacency = vec![BTreeSet::new(); n];
        let mut incident = vec![Vec::new(); n];
        for (k, br) in branches.iter().enumerate() {
            let f = *index.get(&br.from).ok_or(CaseError::DanglingEndpoint {
                index: k,
                bus: br.from,
            })?;
            let t = *index.get(&br.to).ok_or(CaseError::DanglingEndpoint {
                index: k,
                bus: br.to,
            })?;
            if f == t {
                return Err(CaseError::SelfLoop {
                    index: k,
                    bus: br.from,
                });
            }
            if !(br.tap > 0.0) {
                return Err(CaseError::NonPositiveTap { index: k, tap: br.tap });
            }
            adjacency[f].insert(t);
            adjacency[t].insert(f);
            incident[f].push(k);
            incident[t].push(k);
        }
        let adjacency: Vec<Vec<usize>> = adjacency
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();

        let reached = reachable_count(&adjacency);
        if reached != n {
            return Err(CaseError::Disconnected {
                root: buses[0].id,
                reached,
                total: n,
            });
        }

        let mut pmu = BTreeSet::new();
        for id in pmu_buses {
            if !index.contains_key(&id) {
                return Err(CaseError::UnknownPmuBus(id));
            }
            pmu.insert(id);
        }

        Ok(Self {
            buses,
            branches,
            pmu,
            index,
            adjacency,
            incident,
        })
    }

    pub fn from_json(source: &str) -> Result<Self, CaseError> {
        let doc: CaseDocument = serde_json::from_str(source)?;
        Self::new(doc.buses, doc.branches, doc.pmu_buses)
    }

    pub fn to_json(&self) -> String {
        let doc = CaseDocument {
            buses: self.buses.clone(),
            branches: self.branches.clone(),
            pmu_buses: self.pmu.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("case serializes")
    }

    /// Same network with a different PMU placement.
    pub fn with_pmu_buses(
        &self,
        pmu_buses: impl IntoIterator<Item = BusId>,
    ) -> Result<Self, CaseError> {
        let mut pmu = BTreeSet::new();
        for id in pmu_buses {
            if !self.index.contains_key(&id) {
                return Err(CaseError::UnknownPmuBus(id));
            }
            pmu.insert(id);
        }
        Ok(Self {
            pmu,
            ..self.clone()
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn bus(&self, index: usize) -> &Bus {
        &self.buses[index]
    }

    pub fn index_of(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn pmu_buses(&self) -> &BTreeSet<BusId> {
        &self.pmu
    }

    /// Internal indices of PMU buses, ascending.
    pub fn pmu_indices(&self) -> Vec<usize> {
        self.pmu.iter().map(|id| self.index[id]).collect()
    }

    pub fn is_pmu(&self, index: usize) -> bool {
        self.pmu.contains(&self.buses[index].id)
    }

    /// Adjacent buses of `index`, ascending, excluding `index` itself.
    pub fn adjacent(&self, index: usize) -> &[usize] {
        &self.adjacency[index]
    }

    /// The closed neighbourhood M(i): adjacent buses plus the bus itself, ascending.
    pub fn closed_neighborhood(&self, index: usize) -> Vec<usize> {
        let adj = &self.adjacency[index];
        let mut out = Vec::with_capacity(adj.len() + 1);
        let pos = adj.partition_point(|&j| j < index);
        out.extend_from_slice(&adj[..pos]);
        out.push(index);
        out.extend_from_slice(&adj[pos..]);
        out
    }

    /// Branch indices incident to bus `index`, in case-file order.
    pub fn incident_branches(&self, index: usize) -> &[usize] {
        &self.incident[index]
    }

    /// Internal endpoint indices of branch `k`.
    pub fn endpoints(&self, k: usize) -> (usize, usize) {
        let br = &self.branches[k];
        (self.index[&br.from], self.index[&br.to])
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn reachable_count(adjacency: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; adjacency.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count
}
