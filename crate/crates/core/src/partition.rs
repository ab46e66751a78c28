//! Constrained partitioning of the executable set.
//!
//! The policy compiles into positive pairs (must co-reside) and negative
//! pairs (must not). Partitioning then runs in two phases over a
//! union-find structure, each to a fixpoint:
//!
//! 1. start from singletons and merge every positive pair whose merged
//!    block would contain no negative pair; pairs that can never merge are
//!    reported as unsatisfied;
//! 2. merge along call-graph edges under the same veto; edges that end up
//!    crossing blocks are the blocked edges where remote-execution stubs
//!    go.
//!
//! Merges iterate in lexicographic order of executable paths, so identical
//! inputs always produce identical partitions. With blocking negative
//! constraints the fixpoint is genuinely order-sensitive on adversarial
//! inputs; the fixed order makes builds reproducible.
//!
//! Executables constrained by nothing ("don't-cares") are left out of the
//! edge phase; a post-pass folds each into its most frequent caller's
//! block, which avoids pointless remote-execution hops, and leaves the
//! ones nobody calls as singletons.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attribution::CallGraph;
use crate::bytes::AbsPath;
use crate::policy::{Policy, PolicyError};

/// Unordered executable pair, stored with the lexicographically smaller
/// member first.
pub type Pair = (AbsPath, AbsPath);

fn pair(a: &AbsPath, b: &AbsPath) -> Pair {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Compiled co-residence constraints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraints {
    /// Pairs that should share a container.
    pub together: BTreeSet<Pair>,
    /// Pairs that must not share a container (irreflexive).
    pub apart: BTreeSet<Pair>,
}

impl Constraints {
    /// Executables mentioned by neither constraint set.
    pub fn dont_cares<'a>(&self, exes: &'a BTreeSet<AbsPath>) -> BTreeSet<&'a AbsPath> {
        let mut mentioned = BTreeSet::new();
        for (a, b) in self.together.iter().chain(self.apart.iter()) {
            mentioned.insert(a);
            mentioned.insert(b);
        }
        exes.iter().filter(|e| !mentioned.contains(e)).collect()
    }
}

/// Compile a policy over the executable set into constraint sets.
pub fn compile_policy(policy: &Policy, exes: &BTreeSet<AbsPath>) -> Result<Constraints, PolicyError> {
    let mut c = Constraints::default();
    let all: Vec<&AbsPath> = exes.iter().collect();
    match policy {
        Policy::AllOneContext => {
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    c.together.insert(pair(all[i], all[j]));
                }
            }
        }
        Policy::OneOneContext => {
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    c.apart.insert(pair(all[i], all[j]));
                }
            }
        }
        Policy::DisjointSubsets(subsets) => {
            let mut owner: BTreeMap<&AbsPath, &str> = BTreeMap::new();
            for s in subsets {
                for m in &s.members {
                    if !exes.contains(m) {
                        return Err(PolicyError::UnknownExecutable(m.display()));
                    }
                    if let Some(prev) = owner.insert(m, &s.name) {
                        return Err(PolicyError::OverlappingSubsets {
                            a: prev.to_string(),
                            b: s.name.clone(),
                            exe: m.display(),
                        });
                    }
                }
            }
            for s in subsets {
                for i in 0..s.members.len() {
                    for j in i + 1..s.members.len() {
                        c.together.insert(pair(&s.members[i], &s.members[j]));
                    }
                }
            }
            for (i, s1) in subsets.iter().enumerate() {
                for s2 in &subsets[i + 1..] {
                    for a in &s1.members {
                        for b in &s2.members {
                            c.apart.insert(pair(a, b));
                        }
                    }
                }
            }
        }
    }
    Ok(c)
}

/// The computed partition: executable -> container index, plus phase
/// bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionMap {
    /// Container index per executable; indices are contiguous from 0 and
    /// ordered by each block's minimum member path.
    #[serde(with = "crate::bytes::path_map")]
    pub assign: BTreeMap<AbsPath, usize>,
    /// Positive pairs that could never merge without violating a negative
    /// constraint.
    pub unsatisfied: Vec<Pair>,
    /// Call edges whose endpoints ended up in different blocks: the stub
    /// insertion sites.
    pub blocked_edges: Vec<(AbsPath, AbsPath)>,
}

impl PartitionMap {
    pub fn container_count(&self) -> usize {
        self.assign.values().copied().max().map_or(0, |m| m + 1)
    }

    pub fn block(&self, idx: usize) -> BTreeSet<&AbsPath> {
        self.assign
            .iter()
            .filter(|(_, c)| **c == idx)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn blocks(&self) -> Vec<BTreeSet<&AbsPath>> {
        (0..self.container_count()).map(|i| self.block(i)).collect()
    }
}

/// Union-find over interned executables with a negative-pair veto.
struct Merger {
    exes: Vec<AbsPath>,
    index: BTreeMap<AbsPath, usize>,
    parent: Vec<usize>,
    /// Per root: member set and the union of members' negative partners.
    members: Vec<BTreeSet<usize>>,
    foes: Vec<BTreeSet<usize>>,
}

impl Merger {
    fn new(exes: &BTreeSet<AbsPath>, apart: &BTreeSet<Pair>) -> Self {
        let exes: Vec<AbsPath> = exes.iter().cloned().collect();
        let index: BTreeMap<AbsPath, usize> =
            exes.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let n = exes.len();
        let mut foes = vec![BTreeSet::new(); n];
        for (a, b) in apart {
            if let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) {
                if ia != ib {
                    foes[ia].insert(ib);
                    foes[ib].insert(ia);
                }
            }
        }
        Merger {
            parent: (0..n).collect(),
            members: (0..n).map(|i| BTreeSet::from([i])).collect(),
            foes,
            exes,
            index,
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            self.parent[i] = self.find(self.parent[i]);
        }
        self.parent[i]
    }

    /// Merge the blocks of `a` and `b` unless the union would contain a
    /// negative pair. Returns whether they now share a block.
    fn try_union(&mut self, a: usize, b: usize) -> bool {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return true;
        }
        if self.foes[ra].iter().any(|f| self.members[rb].contains(f)) {
            return false;
        }
        // attach the smaller block under the larger
        let (keep, gone) = if self.members[ra].len() >= self.members[rb].len() {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[gone] = keep;
        let moved_members = std::mem::take(&mut self.members[gone]);
        let moved_foes = std::mem::take(&mut self.foes[gone]);
        self.members[keep].extend(moved_members);
        self.foes[keep].extend(moved_foes);
        true
    }

    fn same(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    /// Extract the partition with canonical container indices: blocks are
    /// ordered by their minimum member path.
    fn extract(&mut self) -> BTreeMap<AbsPath, usize> {
        let n = self.exes.len();
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = self.find(i);
            by_root.entry(r).or_default().push(i);
        }
        let mut blocks: Vec<Vec<usize>> = by_root.into_values().collect();
        // members are interned in path order, so min index = min path
        blocks.sort_by_key(|b| *b.iter().min().unwrap());
        let mut assign = BTreeMap::new();
        for (idx, block) in blocks.iter().enumerate() {
            for &m in block {
                assign.insert(self.exes[m].clone(), idx);
            }
        }
        assign
    }
}

/// Phase 1: singletons, then positive-pair merges to a fixpoint.
pub fn initial_partition(exes: &BTreeSet<AbsPath>, c: &Constraints) -> PartitionMap {
    let mut m = Merger::new(exes, &c.apart);
    let pairs: Vec<&Pair> = c.together.iter().collect();
    let mut satisfied = vec![false; pairs.len()];
    loop {
        let mut changed = false;
        for (k, (a, b)) in pairs.iter().enumerate() {
            if satisfied[k] {
                continue;
            }
            let (Some(&ia), Some(&ib)) = (m.index.get(a), m.index.get(b)) else {
                satisfied[k] = true;
                continue;
            };
            let before = m.same(ia, ib);
            if m.try_union(ia, ib) {
                satisfied[k] = true;
                changed |= !before;
            }
        }
        if !changed {
            break;
        }
    }
    let unsatisfied = pairs
        .iter()
        .zip(&satisfied)
        .filter(|(_, s)| !**s)
        .map(|(p, _)| (*p).clone())
        .collect();
    PartitionMap {
        assign: m.extract(),
        unsatisfied,
        blocked_edges: Vec::new(),
    }
}

/// Phase 2: merge along call edges under the negative veto, to a fixpoint.
/// Cross-block edges at the fixpoint are recorded as blocked.
pub fn refine_with_callgraph(
    pm: &PartitionMap,
    edges: &[(AbsPath, AbsPath)],
    apart: &BTreeSet<Pair>,
) -> PartitionMap {
    let exes: BTreeSet<AbsPath> = pm.assign.keys().cloned().collect();
    let mut m = Merger::new(&exes, apart);
    // seed with the existing blocks
    let mut by_container: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (exe, c) in &pm.assign {
        by_container.entry(*c).or_default().push(m.index[exe]);
    }
    for block in by_container.values() {
        for w in block.windows(2) {
            let merged = m.try_union(w[0], w[1]);
            debug_assert!(merged, "seed blocks must be internally consistent");
        }
    }
    let mut sorted: Vec<&(AbsPath, AbsPath)> = edges.iter().filter(|(a, b)| a != b).collect();
    sorted.sort();
    sorted.dedup();
    loop {
        let mut changed = false;
        for (a, b) in &sorted {
            let (Some(&ia), Some(&ib)) = (m.index.get(a), m.index.get(b)) else {
                continue;
            };
            if !m.same(ia, ib) && m.try_union(ia, ib) {
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let blocked = sorted
        .iter()
        .filter(|(a, b)| {
            match (m.index.get(a), m.index.get(b)) {
                (Some(&ia), Some(&ib)) => !m.same(ia, ib),
                _ => false,
            }
        })
        .map(|e| (*e).clone())
        .collect();
    PartitionMap {
        assign: m.extract(),
        unsatisfied: pm.unsatisfied.clone(),
        blocked_edges: blocked,
    }
}

/// Full pipeline: compile the policy, do both merge phases (don't-care
/// executables held out of the edge phase), fold don't-cares into their
/// most frequent caller, and validate the partition invariants.
pub fn partition(
    exes: &BTreeSet<AbsPath>,
    graph: &CallGraph,
    policy: &Policy,
) -> Result<PartitionMap, PolicyError> {
    let c = compile_policy(policy, exes)?;
    let dont_cares: BTreeSet<AbsPath> = c.dont_cares(exes).into_iter().cloned().collect();
    let pm = initial_partition(exes, &c);

    let constrained_edges: Vec<(AbsPath, AbsPath)> = graph
        .cross_edges()
        .filter(|(a, b)| !dont_cares.contains(*a) && !dont_cares.contains(*b))
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();
    let mut pm = refine_with_callgraph(&pm, &constrained_edges, &c.apart);

    // fold each don't-care into the block of its most frequent caller;
    // uncalled ones stay singletons
    for dc in &dont_cares {
        let mut callers: BTreeMap<usize, u64> = BTreeMap::new();
        for ((from, to), n) in &graph.edges {
            if to == dc && from != dc {
                if let Some(&c) = pm.assign.get(from) {
                    *callers.entry(c).or_default() += n;
                }
            }
        }
        let target = callers
            .iter()
            .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
            .map(|(c, _)| *c);
        if let Some(target) = target {
            let own = pm.assign[dc];
            if own != target && pm.block(own).len() == 1 {
                pm.assign.insert(dc.clone(), target);
            }
        }
    }
    pm = renumber(pm);

    // final blocked edges over the full graph
    pm.blocked_edges = graph
        .cross_edges()
        .filter(|(a, b)| pm.assign.get(*a) != pm.assign.get(*b))
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();
    validate(exes, &c, &pm);
    Ok(pm)
}

/// Re-canonicalize container indices after don't-care folding.
fn renumber(pm: PartitionMap) -> PartitionMap {
    let mut min_member: BTreeMap<usize, &AbsPath> = BTreeMap::new();
    for (exe, c) in &pm.assign {
        let e = min_member.entry(*c).or_insert(exe);
        if exe < *e {
            *e = exe;
        }
    }
    let mut order: Vec<(&AbsPath, usize)> = min_member.iter().map(|(c, e)| (*e, *c)).collect();
    order.sort();
    let remap: BTreeMap<usize, usize> = order
        .iter()
        .enumerate()
        .map(|(new, (_, old))| (*old, new))
        .collect();
    PartitionMap {
        assign: pm
            .assign
            .iter()
            .map(|(e, c)| (e.clone(), remap[c]))
            .collect(),
        unsatisfied: pm.unsatisfied,
        blocked_edges: pm.blocked_edges,
    }
}

/// Hard checks of the partition invariants; a violation is a bug, not an
/// input error.
fn validate(exes: &BTreeSet<AbsPath>, c: &Constraints, pm: &PartitionMap) {
    assert_eq!(
        pm.assign.len(),
        exes.len(),
        "partition must cover the executable set"
    );
    for e in exes {
        assert!(pm.assign.contains_key(e), "unassigned executable {e}");
    }
    for (a, b) in &c.apart {
        if let (Some(ca), Some(cb)) = (pm.assign.get(a), pm.assign.get(b)) {
            assert_ne!(ca, cb, "negative pair ({a}, {b}) co-resides");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> AbsPath {
        AbsPath::new(s).unwrap()
    }

    fn exes(names: &[&str]) -> BTreeSet<AbsPath> {
        names.iter().map(|n| p(&format!("/{n}"))).collect()
    }

    #[test]
    fn compile_all_one() {
        let e = exes(&["a", "b", "c"]);
        let c = compile_policy(&Policy::AllOneContext, &e).unwrap();
        assert_eq!(c.together.len(), 3);
        assert!(c.apart.is_empty());
    }

    #[test]
    fn compile_one_one() {
        let e = exes(&["a", "b"]);
        let c = compile_policy(&Policy::OneOneContext, &e).unwrap();
        assert!(c.together.is_empty());
        assert_eq!(c.apart, BTreeSet::from([(p("/a"), p("/b"))]));
    }

    #[test]
    fn compile_subsets_with_dont_care() {
        let e = exes(&["h1", "h2", "m", "cat"]);
        let policy = Policy::DisjointSubsets(vec![
            crate::policy::Subset {
                name: "web".into(),
                members: vec![p("/h1"), p("/h2")],
            },
            crate::policy::Subset {
                name: "db".into(),
                members: vec![p("/m")],
            },
        ]);
        let c = compile_policy(&policy, &e).unwrap();
        assert_eq!(c.together, BTreeSet::from([(p("/h1"), p("/h2"))]));
        assert_eq!(
            c.apart,
            BTreeSet::from([(p("/h1"), p("/m")), (p("/h2"), p("/m"))])
        );
        let dc = c.dont_cares(&e);
        assert_eq!(dc.len(), 1);
        assert!(dc.contains(&p("/cat")));
    }

    #[test]
    fn compile_rejects_overlap_and_unknown() {
        let e = exes(&["a", "b"]);
        let overlap = Policy::DisjointSubsets(vec![
            crate::policy::Subset {
                name: "s1".into(),
                members: vec![p("/a")],
            },
            crate::policy::Subset {
                name: "s2".into(),
                members: vec![p("/a")],
            },
        ]);
        assert!(matches!(
            compile_policy(&overlap, &e),
            Err(PolicyError::OverlappingSubsets { .. })
        ));
        let unknown = Policy::DisjointSubsets(vec![crate::policy::Subset {
            name: "s1".into(),
            members: vec![p("/zzz")],
        }]);
        assert!(matches!(
            compile_policy(&unknown, &e),
            Err(PolicyError::UnknownExecutable(_))
        ));
    }

    #[test]
    fn initial_merge_simple() {
        let e = exes(&["a", "b", "c"]);
        let c = Constraints {
            together: BTreeSet::from([(p("/a"), p("/b"))]),
            apart: BTreeSet::new(),
        };
        let pm = initial_partition(&e, &c);
        assert_eq!(pm.assign[&p("/a")], pm.assign[&p("/b")]);
        assert_ne!(pm.assign[&p("/a")], pm.assign[&p("/c")]);
        assert!(pm.unsatisfied.is_empty());
    }

    #[test]
    fn initial_merge_reports_blocked_pair() {
        let e = exes(&["a", "b", "c"]);
        let c = Constraints {
            together: BTreeSet::from([(p("/a"), p("/b")), (p("/b"), p("/c"))]),
            apart: BTreeSet::from([(p("/a"), p("/c"))]),
        };
        let pm = initial_partition(&e, &c);
        assert_eq!(pm.assign[&p("/a")], pm.assign[&p("/b")]);
        assert_ne!(pm.assign[&p("/b")], pm.assign[&p("/c")]);
        assert_eq!(pm.unsatisfied, vec![(p("/b"), p("/c"))]);
    }

    #[test]
    fn all_one_is_single_block() {
        let e = exes(&["a", "b", "c", "d"]);
        let c = compile_policy(&Policy::AllOneContext, &e).unwrap();
        let pm = initial_partition(&e, &c);
        assert_eq!(pm.container_count(), 1);
    }

    #[test]
    fn refine_merges_and_blocks() {
        let e = exes(&["a", "b", "c"]);
        let none = Constraints::default();
        let pm = initial_partition(&e, &none);
        let refined = refine_with_callgraph(&pm, &[(p("/a"), p("/b"))], &none.apart);
        assert_eq!(refined.assign[&p("/a")], refined.assign[&p("/b")]);
        assert!(refined.blocked_edges.is_empty());

        let apart = BTreeSet::from([(p("/a"), p("/c"))]);
        let pm = initial_partition(&e, &Constraints { together: BTreeSet::new(), apart: apart.clone() });
        let refined = refine_with_callgraph(
            &pm,
            &[(p("/a"), p("/b")), (p("/b"), p("/c"))],
            &apart,
        );
        assert_eq!(refined.assign[&p("/a")], refined.assign[&p("/b")]);
        assert_ne!(refined.assign[&p("/b")], refined.assign[&p("/c")]);
        assert_eq!(refined.blocked_edges, vec![(p("/b"), p("/c"))]);
    }

    #[test]
    fn four_block_running_example_shape() {
        // init spawns the web server and database; the web server calls the
        // converter; policy separates web, db, and converter
        let init = p("/init");
        let httpd = p("/httpd");
        let mysqld = p("/mysqld");
        let convert = p("/convert");
        let e: BTreeSet<AbsPath> =
            [&init, &httpd, &mysqld, &convert].iter().map(|x| (*x).clone()).collect();
        let mut g = CallGraph::default();
        g.add_edge(init.clone(), httpd.clone());
        g.add_edge(init.clone(), mysqld.clone());
        g.add_edge(httpd.clone(), convert.clone());
        let policy = Policy::DisjointSubsets(vec![
            crate::policy::Subset { name: "init".into(), members: vec![init.clone()] },
            crate::policy::Subset { name: "web".into(), members: vec![httpd.clone()] },
            crate::policy::Subset { name: "db".into(), members: vec![mysqld.clone()] },
            crate::policy::Subset { name: "magick".into(), members: vec![convert.clone()] },
        ]);
        let pm = partition(&e, &g, &policy).unwrap();
        assert_eq!(pm.container_count(), 4);
        assert_eq!(pm.blocked_edges.len(), 3);
    }

    #[test]
    fn one_one_blocks_every_cross_edge() {
        let e = exes(&["a", "b", "c"]);
        let mut g = CallGraph::default();
        g.add_edge(p("/a"), p("/b"));
        g.add_edge(p("/b"), p("/c"));
        let pm = partition(&e, &g, &Policy::OneOneContext).unwrap();
        assert_eq!(pm.container_count(), 3);
        assert_eq!(pm.blocked_edges.len(), 2);
    }

    #[test]
    fn all_one_has_no_blocked_edges() {
        let e = exes(&["a", "b", "c"]);
        let mut g = CallGraph::default();
        g.add_edge(p("/a"), p("/b"));
        let pm = partition(&e, &g, &Policy::AllOneContext).unwrap();
        assert_eq!(pm.container_count(), 1);
        assert!(pm.blocked_edges.is_empty());
    }

    #[test]
    fn dont_care_folds_into_most_frequent_caller() {
        // /cat is unconstrained and called three times by the db side but
        // once by the web side: it lands with the db
        let e = exes(&["web", "db", "cat"]);
        let mut g = CallGraph::default();
        g.add_edge(p("/web"), p("/cat"));
        g.add_edge(p("/db"), p("/cat"));
        g.add_edge(p("/db"), p("/cat"));
        g.add_edge(p("/db"), p("/cat"));
        let policy = Policy::DisjointSubsets(vec![
            crate::policy::Subset { name: "web".into(), members: vec![p("/web")] },
            crate::policy::Subset { name: "db".into(), members: vec![p("/db")] },
        ]);
        let pm = partition(&e, &g, &policy).unwrap();
        assert_eq!(pm.assign[&p("/cat")], pm.assign[&p("/db")]);
        // the web->cat edge now crosses blocks
        assert!(pm.blocked_edges.contains(&(p("/web"), p("/cat"))));
    }

    #[test]
    fn uncalled_dont_care_stays_singleton() {
        let e = exes(&["web", "db", "idle"]);
        let g = CallGraph::default();
        let policy = Policy::DisjointSubsets(vec![
            crate::policy::Subset { name: "web".into(), members: vec![p("/web")] },
            crate::policy::Subset { name: "db".into(), members: vec![p("/db")] },
        ]);
        let pm = partition(&e, &g, &policy).unwrap();
        assert_eq!(pm.container_count(), 3);
    }

    #[test]
    fn determinism() {
        let e = exes(&["a", "b", "c", "d", "e"]);
        let mut g = CallGraph::default();
        g.add_edge(p("/a"), p("/c"));
        g.add_edge(p("/b"), p("/d"));
        g.add_edge(p("/d"), p("/e"));
        let policy = Policy::DisjointSubsets(vec![
            crate::policy::Subset { name: "s1".into(), members: vec![p("/a"), p("/b")] },
            crate::policy::Subset { name: "s2".into(), members: vec![p("/c")] },
        ]);
        let pm1 = partition(&e, &g, &policy).unwrap();
        let pm2 = partition(&e, &g, &policy).unwrap();
        assert_eq!(pm1, pm2);
    }
}
