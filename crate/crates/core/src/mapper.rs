//! Resource mapping: per-partition core/GPU occupancy, first-fit placement
//! and the backfill scan over the ready queue.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::model::{
    packable_ranks, rank_fit, resolve_partitions, ExecutionPolicy, NodeSpec, ResourceDescription,
    SchedulingPolicy, TaskCategory, TaskDescription, TaskId,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBinding {
    pub rank: u32,
    pub node: String,
    pub cores: Vec<u32>,
    pub gpus: Vec<u32>,
}

/// Concrete binding of every rank of one task to cores and GPU indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub task_id: TaskId,
    pub partition: String,
    pub bindings: Vec<RankBinding>,
}

impl Placement {
    pub fn cores(&self) -> u64 {
        self.bindings.iter().map(|b| b.cores.len() as u64).sum()
    }

    pub fn gpus(&self) -> u64 {
        self.bindings.iter().map(|b| b.gpus.len() as u64).sum()
    }

    pub fn nodes(&self) -> BTreeSet<&str> {
        self.bindings.iter().map(|b| b.node.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapperError {
    #[error("placement for task {0} is not active")]
    UnknownPlacement(TaskId),
}

#[derive(Clone, Debug)]
struct NodeOccupancy {
    spec: NodeSpec,
    cores: Vec<bool>,
    gpus: Vec<bool>,
    free_cores: u64,
    free_gpus: u64,
}

impl NodeOccupancy {
    fn new(spec: NodeSpec) -> Self {
        Self {
            cores: vec![false; spec.cores as usize],
            gpus: vec![false; spec.gpus as usize],
            free_cores: spec.cores as u64,
            free_gpus: spec.gpus as u64,
            spec,
        }
    }

    fn take(bits: &mut [bool], count: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(count as usize);
        for (i, busy) in bits.iter_mut().enumerate() {
            if out.len() == count as usize {
                break;
            }
            if !*busy {
                *busy = true;
                out.push(i as u32);
            }
        }
        out
    }
}

/// A disjoint node subset bound to one backend, with occupancy bitmaps.
#[derive(Clone, Debug)]
pub struct Partition {
    pub name: String,
    pub backend: String,
    pub allowed: BTreeSet<TaskCategory>,
    nodes: Vec<NodeOccupancy>,
    free_cores: u64,
    free_gpus: u64,
    active: HashSet<TaskId>,
}

impl Partition {
    pub fn new(
        name: impl Into<String>,
        backend: impl Into<String>,
        allowed: BTreeSet<TaskCategory>,
        nodes: Vec<NodeSpec>,
    ) -> Self {
        let nodes: Vec<NodeOccupancy> = nodes.into_iter().map(NodeOccupancy::new).collect();
        Self {
            name: name.into(),
            backend: backend.into(),
            allowed,
            free_cores: nodes.iter().map(|n| n.free_cores).sum(),
            free_gpus: nodes.iter().map(|n| n.free_gpus).sum(),
            nodes,
            active: HashSet::new(),
        }
    }

    pub fn node_specs(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().map(|n| &n.spec)
    }

    pub fn total_cores(&self) -> u64 {
        self.nodes.iter().map(|n| n.spec.cores as u64).sum()
    }

    pub fn total_gpus(&self) -> u64 {
        self.nodes.iter().map(|n| n.spec.gpus as u64).sum()
    }

    pub fn free_cores(&self) -> u64 {
        self.free_cores
    }

    pub fn free_gpus(&self) -> u64 {
        self.free_gpus
    }

    pub fn active_placements(&self) -> usize {
        self.active.len()
    }

    pub fn allows(&self, category: TaskCategory) -> bool {
        self.allowed.contains(&category)
    }

    /// Busy flags per node, `(node, cores, gpus)`, for snapshots and tests.
    pub fn occupancy(&self) -> Vec<(String, Vec<bool>, Vec<bool>)> {
        self.nodes
            .iter()
            .map(|n| (n.spec.name.clone(), n.cores.clone(), n.gpus.clone()))
            .collect()
    }

    /// Whether `task` would fit if the partition were empty.
    pub fn can_ever_fit(&self, task: &TaskDescription) -> bool {
        let specs: Vec<NodeSpec> = self.nodes.iter().map(|n| n.spec.clone()).collect();
        self.allows(task.category()) && task.ranks >= 1 && packable_ranks(task, &specs) >= task.ranks as u64
    }

    fn could_fit(&self, task: &TaskDescription) -> bool {
        self.free_cores >= task.total_cores() && self.free_gpus >= task.total_gpus()
    }

    /// First-fit placement. On `None` nothing is mutated.
    pub fn try_place(&mut self, task: &TaskDescription) -> Option<Placement> {
        if task.ranks == 0 || !self.could_fit(task) || self.active.contains(&task.id) {
            return None;
        }
        let needed = task.ranks as u64;
        let mut fits = 0u64;
        for n in &self.nodes {
            fits += rank_fit(n.free_cores, n.free_gpus, task);
            if fits >= needed {
                break;
            }
        }
        if fits < needed {
            return None;
        }
        let mut bindings = Vec::with_capacity(task.ranks as usize);
        let mut rank = 0u32;
        for n in &mut self.nodes {
            while rank < task.ranks && rank_fit(n.free_cores, n.free_gpus, task) > 0 {
                let cores = NodeOccupancy::take(&mut n.cores, task.cores_per_rank);
                let gpus = NodeOccupancy::take(&mut n.gpus, task.gpus_per_rank);
                n.free_cores -= cores.len() as u64;
                n.free_gpus -= gpus.len() as u64;
                bindings.push(RankBinding {
                    rank,
                    node: n.spec.name.clone(),
                    cores,
                    gpus,
                });
                rank += 1;
            }
            if rank == task.ranks {
                break;
            }
        }
        debug_assert_eq!(rank, task.ranks);
        self.free_cores -= task.total_cores();
        self.free_gpus -= task.total_gpus();
        self.active.insert(task.id.clone());
        Some(Placement {
            task_id: task.id.clone(),
            partition: self.name.clone(),
            bindings,
        })
    }

    /// Return every core and GPU of an active placement to the free pool.
    pub fn release(&mut self, placement: &Placement) -> Result<(), MapperError> {
        if !self.active.remove(&placement.task_id) {
            return Err(MapperError::UnknownPlacement(placement.task_id.clone()));
        }
        for b in &placement.bindings {
            let n = self
                .nodes
                .iter_mut()
                .find(|n| n.spec.name == b.node)
                .expect("placement names a node of this partition");
            for &c in &b.cores {
                debug_assert!(n.cores[c as usize]);
                n.cores[c as usize] = false;
            }
            for &g in &b.gpus {
                debug_assert!(n.gpus[g as usize]);
                n.gpus[g as usize] = false;
            }
            n.free_cores += b.cores.len() as u64;
            n.free_gpus += b.gpus.len() as u64;
            self.free_cores += b.cores.len() as u64;
            self.free_gpus += b.gpus.len() as u64;
        }
        Ok(())
    }
}

/// One partition per policy entry, plus the implicit default partition for
/// nodes no entry names. All resources start free.
pub fn build_partitions(resources: &ResourceDescription, policy: &ExecutionPolicy) -> Vec<Partition> {
    resolve_partitions(resources, policy)
        .into_iter()
        .map(|p| Partition::new(p.name, p.backend, p.allowed, p.nodes))
        .collect()
}

/// Partition indices to try for `task`: the hinted one first, then the rest
/// in declaration order, restricted to partitions allowing its category.
pub fn candidate_partitions(task: &TaskDescription, partitions: &[Partition]) -> Vec<usize> {
    let category = task.category();
    let mut out = Vec::with_capacity(partitions.len());
    if let Some(hint) = &task.partition_hint {
        if let Some(i) = partitions.iter().position(|p| &p.name == hint) {
            if partitions[i].allows(category) {
                out.push(i);
            }
        }
    }
    for (i, p) in partitions.iter().enumerate() {
        if p.allows(category) && !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Scan the ready queue in order and place every task that fits. Under
/// [`SchedulingPolicy::FifoExclusive`] the scan stops at the first task that
/// does not fit.
pub fn backfill_tick<'a, I>(
    ready: I,
    partitions: &mut [Partition],
    scheduling: SchedulingPolicy,
) -> Vec<(TaskId, Placement)>
where
    I: IntoIterator<Item = &'a TaskDescription>,
{
    let mut placed = Vec::new();
    for task in ready {
        if partitions.iter().all(|p| p.free_cores == 0) {
            break;
        }
        let placement = candidate_partitions(task, partitions)
            .into_iter()
            .find_map(|i| partitions[i].try_place(task));
        match placement {
            Some(p) => placed.push((task.id.clone(), p)),
            None if scheduling == SchedulingPolicy::FifoExclusive => break,
            None => {}
        }
    }
    placed
}
