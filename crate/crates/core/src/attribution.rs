//! Attribution of resource effects to executables.
//!
//! Every run of an executable starts with execve, so each event can be
//! credited to the executable its thread was running at the time of the
//! call. A successful execve of `b` by a process running `a` adds the call
//! graph edge `a -> b`; the execve's own read of `b`'s binary is credited
//! to `b` (an executable's binary always belongs to its own read set).
//! Children inherit their parent's executable at clone/fork; failed execve
//! changes nothing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bytes::AbsPath;
use crate::effects::{self, EffectDelta, FoldStats, Resource, SystemState};
use crate::trace::{ExecutionLog, SyscallEvent, Tid};

/// Per-executable read/write resource sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExeProfile {
    pub reads: BTreeSet<Resource>,
    pub writes: BTreeSet<Resource>,
}

/// Directed call graph at the executable level, with per-edge call counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallGraph {
    pub nodes: BTreeSet<AbsPath>,
    #[serde(with = "edge_list")]
    pub edges: BTreeMap<(AbsPath, AbsPath), u64>,
}

/// Serialize the edge map as a list of `{from, to, count}` records.
mod edge_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Edge {
        from: AbsPath,
        to: AbsPath,
        count: u64,
    }

    pub fn serialize<S: Serializer>(
        edges: &BTreeMap<(AbsPath, AbsPath), u64>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = ser.serialize_seq(Some(edges.len()))?;
        for ((from, to), count) in edges {
            seq.serialize_element(&Edge {
                from: from.clone(),
                to: to.clone(),
                count: *count,
            })?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<(AbsPath, AbsPath), u64>, D::Error> {
        let list: Vec<Edge> = Vec::deserialize(de)?;
        Ok(list
            .into_iter()
            .map(|e| ((e.from, e.to), e.count))
            .collect())
    }
}

impl CallGraph {
    pub fn add_edge(&mut self, from: AbsPath, to: AbsPath) {
        self.nodes.insert(from.clone());
        self.nodes.insert(to.clone());
        *self.edges.entry((from, to)).or_default() += 1;
    }

    /// Edges excluding self-loops, in deterministic order.
    pub fn cross_edges(&self) -> impl Iterator<Item = (&AbsPath, &AbsPath)> {
        self.edges
            .keys()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a, b))
    }
}

/// One process in the reconstructed tree.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcNode {
    pub parent: Option<Tid>,
    /// Executables this tid ran, in order (execve history).
    pub exes: Vec<AbsPath>,
}

/// Result of attributing an execution log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    #[serde(with = "crate::bytes::path_map")]
    pub profiles: BTreeMap<AbsPath, ExeProfile>,
    pub call_graph: CallGraph,
    pub process_tree: BTreeMap<Tid, ProcNode>,
    /// Paths whose last filesystem event deleted them, across all logs.
    pub tombstones: BTreeSet<AbsPath>,
    pub stats: FoldStats,
}

impl Attribution {
    pub fn executables(&self) -> BTreeSet<AbsPath> {
        self.profiles.keys().cloned().collect()
    }

    /// Union of all profile reads and writes.
    pub fn total_effects(&self) -> EffectDelta {
        let mut d = EffectDelta::default();
        for p in self.profiles.values() {
            d.reads.extend(p.reads.iter().cloned());
            d.writes.extend(p.writes.iter().cloned());
        }
        d
    }
}

/// Incremental attribution fold; feed events in log order.
pub struct Attributor {
    g0: SystemState,
    state: SystemState,
    out: Attribution,
}

impl Attributor {
    pub fn new(g0: SystemState) -> Self {
        let root_exe = g0.root_template().exe.clone();
        let mut out = Attribution::default();
        // the root binary must exist to start the trace
        out.call_graph.nodes.insert(root_exe.clone());
        out.profiles
            .entry(root_exe.clone())
            .or_default()
            .reads
            .insert(Resource::File(root_exe));
        Attributor {
            state: g0.clone(),
            g0,
            out,
        }
    }

    /// Start a new log: state resets to the initial state, accumulated
    /// attribution carries over.
    pub fn next_log(&mut self) {
        self.merge_log_state();
        self.state = self.g0.clone();
    }

    fn merge_log_state(&mut self) {
        self.out.tombstones.extend(self.state.tombstones().iter().cloned());
        self.out.stats.absorb(&self.state.stats);
        for (tid, parent) in self.state.process_parents() {
            self.out.process_tree.entry(tid).or_default().parent = parent;
        }
    }

    pub fn feed(&mut self, e: &SyscallEvent) {
        if e.failed() {
            return;
        }
        let before = self.state.exe_of(e.tid);
        if self.out.process_tree.get(&e.tid).map_or(true, |n| n.exes.is_empty()) {
            self.out
                .process_tree
                .entry(e.tid)
                .or_default()
                .exes
                .push(before.clone());
        }
        let delta = effects::apply_event(&mut self.state, e);
        let after = self.state.exe_of(e.tid);

        let credit = if after != before {
            // successful execve: edge, and the target binary (plus anything
            // else this event read) belongs to the new executable
            self.out.call_graph.add_edge(before, after.clone());
            self.out
                .process_tree
                .entry(e.tid)
                .or_default()
                .exes
                .push(after.clone());
            after
        } else {
            before
        };
        if delta.is_empty() {
            return;
        }
        self.out.call_graph.nodes.insert(credit.clone());
        let profile = self.out.profiles.entry(credit).or_default();
        profile.reads.extend(delta.reads);
        profile.writes.extend(delta.writes);
    }

    pub fn finish(mut self) -> Attribution {
        self.merge_log_state();
        self.out
    }
}

/// Attribute a whole execution log: per-executable profiles, the call
/// graph, and the reconstructed process tree.
pub fn attribute(el: &ExecutionLog, g0: &SystemState) -> Attribution {
    let mut a = Attributor::new(g0.clone());
    let mut first = true;
    for log in &el.logs {
        if !first {
            a.next_log();
        }
        first = false;
        for e in &log.events {
            a.feed(e);
        }
    }
    a.finish()
}

/// The executable set: execve targets plus the root executable.
pub fn executables(el: &ExecutionLog, g0: &SystemState) -> BTreeSet<AbsPath> {
    attribute(el, g0).executables()
}

/// Human-readable analysis listing: executables with resource counts and
/// the call graph. This is the preprocessing report used to author
/// partitioning policies.
pub fn render_report(a: &Attribution) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    writeln!(out, "executables: {}", a.profiles.len()).unwrap();
    for (exe, prof) in &a.profiles {
        writeln!(
            out,
            "  {}  reads={} writes={}",
            exe.display(),
            prof.reads.len(),
            prof.writes.len()
        )
        .unwrap();
    }
    writeln!(out, "call edges: {}", a.call_graph.edges.len()).unwrap();
    for ((from, to), n) in &a.call_graph.edges {
        writeln!(out, "  {} -> {}  ({n} call{})", from.display(), to.display(), if *n == 1 { "" } else { "s" }).unwrap();
    }
    if !a.tombstones.is_empty() {
        writeln!(out, "deleted during run: {}", a.tombstones.len()).unwrap();
        for t in &a.tombstones {
            writeln!(out, "  {}", t.display()).unwrap();
        }
    }
    if !a.stats.unhandled.is_empty() {
        let total: u64 = a.stats.unhandled.values().sum();
        writeln!(out, "unhandled syscalls: {total} across {} names", a.stats.unhandled.len()).unwrap();
    }
    out
}
