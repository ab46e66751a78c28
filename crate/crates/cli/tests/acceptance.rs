//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured numbers. Run with:
//!
//! ```text
//! cargo test -p cleave-cli --test acceptance -- --nocapture
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use cleave_core::attribution::{attribute, Attribution, Attributor, CallGraph, ExeProfile};
use cleave_core::bytes::AbsPath;
use cleave_core::effects::{init_state, NetAddr, Proto, Resource, SystemState};
use cleave_core::partition::{
    initial_partition, partition, refine_with_callgraph, Constraints, PartitionMap,
};
use cleave_core::placement::{
    plan_placement, summarize_access, FileKind, FileMeta, FsMetadataSource, MapMetadataSource,
    PlanOptions,
};
use cleave_core::policy::Policy;
use cleave_core::trace::{load_execution_log, open_reader, ExecutionLog, TraceFormat};

/// Criteria run one at a time: the throughput and latency measurements
/// must not compete with each other for the machine.
static GATE: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn p(s: &str) -> AbsPath {
    AbsPath::new(s).unwrap()
}

fn file(s: &str) -> Resource {
    Resource::File(p(s))
}

fn fifo(s: &str) -> Resource {
    Resource::Fifo(p(s))
}

fn lsock(s: &str) -> Resource {
    Resource::LocalSocket(p(s))
}

fn net(proto: Proto, host: &str, port: u16) -> Resource {
    Resource::NetSocket(NetAddr {
        proto,
        host: host.into(),
        port,
    })
}

fn g0(root_exe: &str) -> SystemState {
    init_state(b"/", root_exe.as_bytes(), BTreeMap::new()).unwrap()
}

fn load(fixture_name: &str) -> ExecutionLog {
    let (el, stats) = load_execution_log(
        &[fixture(fixture_name)],
        TraceFormat::StraceText,
        true,
    )
    .unwrap();
    assert_eq!(stats.malformed_lines, 0);
    el
}

// ===========================================================================
// 1. Partition oracle equivalence
// ===========================================================================

/// Brute-force reference: blocks as plain set-of-sets, merges applied to
/// saturation in the same deterministic order, with the same veto.
struct Oracle {
    blocks: Vec<BTreeSet<AbsPath>>,
    apart: BTreeSet<(AbsPath, AbsPath)>,
}

impl Oracle {
    fn new(exes: &BTreeSet<AbsPath>, apart: &BTreeSet<(AbsPath, AbsPath)>) -> Self {
        Oracle {
            blocks: exes.iter().map(|e| BTreeSet::from([e.clone()])).collect(),
            apart: apart.clone(),
        }
    }

    fn block_of(&self, e: &AbsPath) -> usize {
        self.blocks.iter().position(|b| b.contains(e)).unwrap()
    }

    fn union_violates(&self, i: usize, j: usize) -> bool {
        for (a, b) in &self.apart {
            let union_has = |x: &AbsPath| self.blocks[i].contains(x) || self.blocks[j].contains(x);
            if union_has(a) && union_has(b) {
                return true;
            }
        }
        false
    }

    /// Try one merge; true when the pair now co-resides.
    fn merge(&mut self, a: &AbsPath, b: &AbsPath) -> bool {
        let i = self.block_of(a);
        let j = self.block_of(b);
        if i == j {
            return true;
        }
        if self.union_violates(i, j) {
            return false;
        }
        let moved = self.blocks.remove(j.max(i));
        self.blocks[j.min(i)].extend(moved);
        true
    }

    fn saturate(&mut self, pairs: &[(AbsPath, AbsPath)]) -> Vec<(AbsPath, AbsPath)> {
        loop {
            let mut changed = false;
            for (a, b) in pairs {
                let before = self.block_of(a) == self.block_of(b);
                if self.merge(a, b) && !before {
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        pairs
            .iter()
            .filter(|(a, b)| self.block_of(a) != self.block_of(b))
            .cloned()
            .collect()
    }

    fn partition_sets(&self) -> BTreeSet<BTreeSet<AbsPath>> {
        self.blocks.iter().cloned().collect()
    }
}

fn partition_sets(pm: &PartitionMap) -> BTreeSet<BTreeSet<AbsPath>> {
    let mut by: BTreeMap<usize, BTreeSet<AbsPath>> = BTreeMap::new();
    for (e, c) in &pm.assign {
        by.entry(*c).or_default().insert(e.clone());
    }
    by.into_values().collect()
}

#[test]
fn acceptance_1_partition_oracle_equivalence() {
    let _serial = gate();
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xC1EA7E);
    let instances = 1000;
    for case in 0..instances {
        let n = rng.gen_range(1..=6usize);
        let exes: BTreeSet<AbsPath> = (0..n).map(|i| p(&format!("/e{i}"))).collect();
        let list: Vec<AbsPath> = exes.iter().cloned().collect();

        let mut together = BTreeSet::new();
        let mut apart = BTreeSet::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(0.25) {
                    together.insert((list[i].clone(), list[j].clone()));
                }
                if rng.gen_bool(0.25) {
                    apart.insert((list[i].clone(), list[j].clone()));
                }
            }
        }
        let mut edges: Vec<(AbsPath, AbsPath)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen_bool(0.3) {
                    edges.push((list[i].clone(), list[j].clone()));
                }
            }
        }
        edges.sort();
        edges.dedup();

        let c = Constraints {
            together: together.clone(),
            apart: apart.clone(),
        };
        let pm = initial_partition(&exes, &c);
        let refined = refine_with_callgraph(&pm, &edges, &c.apart);

        let mut oracle = Oracle::new(&exes, &apart);
        let pos_pairs: Vec<(AbsPath, AbsPath)> = together.iter().cloned().collect();
        let unsatisfied = oracle.saturate(&pos_pairs);
        let blocked = oracle.saturate(&edges);

        assert_eq!(
            partition_sets(&refined),
            oracle.partition_sets(),
            "case {case}: partition mismatch\n together={together:?}\n apart={apart:?}\n edges={edges:?}"
        );
        let mine_unsat: BTreeSet<_> = refined.unsatisfied.iter().cloned().collect();
        let oracle_unsat: BTreeSet<_> = unsatisfied.into_iter().collect();
        assert_eq!(mine_unsat, oracle_unsat, "case {case}: unsatisfied mismatch");
        let mine_blocked: BTreeSet<_> = refined.blocked_edges.iter().cloned().collect();
        let oracle_blocked: BTreeSet<_> = blocked.into_iter().collect();
        assert_eq!(mine_blocked, oracle_blocked, "case {case}: blocked-edge mismatch");
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(10),
        "oracle comparison took {elapsed:?}, budget is 10s"
    );
    println!(
        "ACCEPTANCE 1 partition-oracle-equivalence: PASS ({instances} instances agree, {:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ===========================================================================
// 2. Resource-semantics golden test
// ===========================================================================

#[test]
fn acceptance_2_resource_semantics_golden() {
    let _serial = gate();
    let el = load("golden.strace");
    let a = attribute(&el, &g0("/init.sh"));

    let mut expected: BTreeMap<AbsPath, ExeProfile> = BTreeMap::new();
    expected.insert(
        p("/init.sh"),
        ExeProfile {
            reads: [
                file("/init.sh"),
                file("/etc/config"),
                file("/srv"),
                file("/srv/data/cache.tmp"),
                file("/srv/current"),
                file("/etc/hosts"),
            ]
            .into(),
            writes: [
                file("/var/log/boot.log"),
                file("/srv/data"),
                file("/srv/data/cache.tmp"),
                file("/srv/data/cache.db"),
                file("/srv/current"),
            ]
            .into(),
        },
    );
    expected.insert(
        p("/bin/tool"),
        ExeProfile {
            reads: [
                file("/bin/tool"),
                file("/srv/input.txt"),
                file("/usr/share"),
                file("/usr/share/tool/data.bin"),
                fifo("/run/tool.fifo"),
                file("/run"),
            ]
            .into(),
            writes: [
                file("/srv/data/cache.db"),
                fifo("/run/tool.fifo"),
                lsock("/run/tool.sock"),
                net(Proto::Udp, "127.0.0.1", 8125),
            ]
            .into(),
        },
    );
    expected.insert(
        p("/srv/app"),
        ExeProfile {
            reads: [file("/srv/app")].into(),
            writes: [
                net(Proto::Tcp, "0.0.0.0", 9000),
                lsock("/run/tool.sock"),
                file("/srv/data/report.out"),
            ]
            .into(),
        },
    );

    assert_eq!(
        a.profiles, expected,
        "per-executable read/write sets must match the hand derivation exactly"
    );

    let mut graph = CallGraph::default();
    graph.add_edge(p("/init.sh"), p("/bin/tool"));
    graph.add_edge(p("/init.sh"), p("/srv/app"));
    assert_eq!(a.call_graph.edges, graph.edges);

    assert_eq!(
        a.tombstones,
        BTreeSet::from([p("/srv/data/cache.tmp"), p("/srv/data/cache.db")])
    );
    println!(
        "ACCEPTANCE 2 resource-semantics-golden: PASS (3 executables, {} resources, exact match)",
        a.total_effects().reads.len() + a.total_effects().writes.len()
    );
}

// ===========================================================================
// 3. Policy identities
// ===========================================================================

#[test]
fn acceptance_3_policy_identities() {
    let _serial = gate();
    let el = load("mediawiki.strace");
    let a = attribute(&el, &g0("/init.sh"));
    let exes = a.executables();
    assert_eq!(exes.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    write_mediawiki_source(&src);
    let meta = FsMetadataSource::new(&src);

    // all-one-context: a single container, no volumes, no stubs
    let pm = partition(&exes, &a.call_graph, &Policy::AllOneContext).unwrap();
    assert_eq!(pm.container_count(), 1);
    assert!(pm.blocked_edges.is_empty());
    let plan = plan_placement(&pm, &a, &meta, &PlanOptions::default()).unwrap();
    assert_eq!(plan.containers.len(), 1);
    assert!(plan.volumes.is_empty(), "pure slimming must create no volumes");
    assert!(plan.containers[0].stubs.is_empty());

    // one-one-context: one container per executable
    let pm = partition(&exes, &a.call_graph, &Policy::OneOneContext).unwrap();
    assert_eq!(pm.container_count(), exes.len());
    // every cross edge is blocked
    assert_eq!(pm.blocked_edges.len(), a.call_graph.cross_edges().count());

    println!(
        "ACCEPTANCE 3 policy-identities: PASS (all-one = 1 container / 0 volumes / 0 stubs, one-one = {} containers)",
        exes.len()
    );
}

// ===========================================================================
// 4. Placement property suite
// ===========================================================================

struct RandomInstance {
    pm: PartitionMap,
    attribution: Attribution,
    meta: MapMetadataSource,
}

fn random_instance(rng: &mut StdRng) -> RandomInstance {
    let path_pool = [
        "/bin/sh", "/lib/a.so", "/lib/b.so", "/etc/one.conf", "/etc/two.conf",
        "/var/data/db1", "/var/data/db2", "/srv/site/page", "/srv/site/img",
        "/run/svc.sock", "/tmp/scratch", "/opt/tooling/bin",
    ];
    let n_exes = rng.gen_range(1..=6usize);
    let n_containers = rng.gen_range(1..=n_exes);
    let mut assign = BTreeMap::new();
    let mut exes = Vec::new();
    for i in 0..n_exes {
        // containers 0..n_containers, container 0 guaranteed non-empty
        let c = if i == 0 { 0 } else { rng.gen_range(0..n_containers) };
        let exe = p(&format!("/bin/exe{i}"));
        assign.insert(exe.clone(), c);
        exes.push(exe);
    }
    // compress container indices
    let used: BTreeSet<usize> = assign.values().copied().collect();
    let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(k, v)| (*v, k)).collect();
    for c in assign.values_mut() {
        *c = remap[c];
    }
    let pm = PartitionMap {
        assign,
        unsatisfied: vec![],
        blocked_edges: vec![],
    };

    let mut attribution = Attribution::default();
    let mut all_paths: BTreeSet<AbsPath> = BTreeSet::new();
    for exe in &exes {
        let profile = attribution.profiles.entry(exe.clone()).or_default();
        profile.reads.insert(Resource::File(exe.clone()));
        all_paths.insert(exe.clone());
    }
    let touches = rng.gen_range(1..=16usize);
    for _ in 0..touches {
        let exe = &exes[rng.gen_range(0..exes.len())];
        let raw = path_pool[rng.gen_range(0..path_pool.len())];
        let path = p(raw);
        let resource = if raw.ends_with(".sock") {
            Resource::LocalSocket(path.clone())
        } else {
            Resource::File(path.clone())
        };
        all_paths.insert(path);
        let profile = attribution.profiles.get_mut(exe).unwrap();
        if rng.gen_bool(0.4) {
            profile.writes.insert(resource);
        } else {
            profile.reads.insert(resource);
        }
    }
    if rng.gen_bool(0.3) {
        attribution.tombstones.insert(p("/tmp/scratch"));
    }
    if rng.gen_bool(0.4) && exes.len() >= 2 {
        let port = rng.gen_range(1024..9999u16);
        attribution
            .profiles
            .get_mut(&exes[0])
            .unwrap()
            .writes
            .insert(net(Proto::Tcp, "0.0.0.0", port));
        let last = exes.last().unwrap().clone();
        attribution
            .profiles
            .get_mut(&last)
            .unwrap()
            .writes
            .insert(net(Proto::Tcp, "127.0.0.1", port));
    }

    let mut meta = MapMetadataSource::default();
    let mut closed: BTreeSet<AbsPath> = BTreeSet::new();
    for pth in &all_paths {
        closed.insert(pth.clone());
        for a in pth.ancestors() {
            closed.insert(a);
        }
    }
    for pth in &closed {
        let is_file = all_paths.contains(pth);
        meta.entries.insert(
            pth.clone(),
            FileMeta {
                kind: if is_file { FileKind::File } else { FileKind::Dir },
                mode: if is_file { 0o644 } else { 0o755 },
                uid: 0,
                gid: 0,
                mtime: (1_700_000_000, 0),
                size: if is_file { 128 } else { 0 },
                symlink_target: None,
            },
        );
    }
    RandomInstance {
        pm,
        attribution,
        meta,
    }
}

/// The four placement invariants.
fn check_instance(inst: &RandomInstance) -> Result<(), String> {
    let plan = plan_placement(
        &inst.pm,
        &inst.attribution,
        &inst.meta,
        &PlanOptions::default(),
    )
    .map_err(|e| format!("plan failed: {e}"))?;
    let acc = summarize_access(&inst.pm, &inst.attribution).map_err(|e| e.to_string())?;

    // path closure inside containers and volumes
    for c in &plan.containers {
        let own: BTreeSet<&AbsPath> = c.files.iter().map(|f| &f.path).collect();
        for f in &c.files {
            for anc in f.path.ancestors() {
                let ok = own.contains(&anc)
                    || c.volumes.iter().any(|v| anc.starts_with(&v.mount_path));
                if !ok {
                    return Err(format!("{}: missing ancestor {anc} of {}", c.name, f.path));
                }
            }
        }
    }
    for v in &plan.volumes {
        let own: BTreeSet<&AbsPath> = v.files.iter().map(|f| &f.path).collect();
        for f in &v.files {
            for anc in f.path.ancestors() {
                if anc.starts_with(&v.mount_path) && anc != v.mount_path && !own.contains(&anc) {
                    return Err(format!("volume {}: missing ancestor {anc}", v.key));
                }
            }
        }
    }

    // exclusive uniqueness, keyed per path
    let mut path_accessors: BTreeMap<&AbsPath, BTreeSet<usize>> = BTreeMap::new();
    for (r, a) in &acc {
        if let Some(path) = r.path() {
            path_accessors.entry(path).or_default().extend(a.accessors());
        }
    }
    for (path, accessors) in &path_accessors {
        if accessors.len() == 1 {
            let owner = *accessors.iter().next().unwrap();
            for (ci, c) in plan.containers.iter().enumerate() {
                if ci != owner && c.files.iter().any(|f| &f.path == *path) {
                    return Err(format!("exclusive {path} leaked into {}", c.name));
                }
            }
        }
    }

    // sharing soundness
    for v in &plan.volumes {
        if v.mount_path.display() == cleave_core::placement::RPE_SOCKET_DIR {
            continue;
        }
        if v.containers.len() < 2 {
            return Err(format!("volume {} not actually shared", v.key));
        }
        let justified = acc.iter().any(|(r, a)| {
            r.path()
                .map_or(false, |pp| pp.parent().as_ref() == Some(&v.mount_path))
                && !a.writers.is_empty()
                && a.accessors().len() >= 2
        });
        if !justified {
            return Err(format!("volume {} lacks a writer-shared resource", v.key));
        }
    }

    // plan completeness: every reader reaches every read resource
    for (r, a) in &acc {
        let Some(path) = r.path() else { continue };
        if a.deleted || matches!(r, Resource::LocalSocket(_)) {
            continue;
        }
        for reader in &a.readers {
            let c = &plan.containers[*reader];
            let reachable = c.files.iter().any(|f| &f.path == path)
                || c.volumes.iter().any(|v| path.starts_with(&v.mount_path))
                || c.runtime_paths.contains(path);
            if !reachable {
                return Err(format!("{} cannot reach {path}", c.name));
            }
        }
    }
    Ok(())
}

#[test]
fn acceptance_4_placement_property_suite() {
    let _serial = gate();
    let mut rng = StdRng::seed_from_u64(0x9ACE);
    let instances = 500;
    for case in 0..instances {
        let inst = random_instance(&mut rng);
        if let Err(msg) = check_instance(&inst) {
            panic!("case {case}: {msg}");
        }
    }
    println!("ACCEPTANCE 4 placement-property-suite: PASS ({instances} random instances, 4 invariants)");
}

// ===========================================================================
// 5. Slimming at desk scale
// ===========================================================================

#[test]
fn acceptance_5_slimming_desk_scale() {
    let _serial = gate();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(src.join("data")).unwrap();
    fs::create_dir_all(src.join("unused")).unwrap();

    let chunk = vec![0x5Au8; 1 << 20];
    let mut touched_bytes: u64 = 0;
    let mut trace = String::new();
    let init = "#!/bin/sh\nrun\n";
    fs::write(src.join("init.sh"), init).unwrap();
    touched_bytes += init.len() as u64;

    // 100 files of 1 MiB; the traced run reads 30 of them
    for i in 0..100 {
        let rel = if i < 30 {
            format!("data/used{i:03}.bin")
        } else {
            format!("unused/cold{i:03}.bin")
        };
        fs::write(src.join(&rel), &chunk).unwrap();
        if i < 30 {
            trace.push_str(&format!("500 open(\"/{rel}\", O_RDONLY) = 3\n500 close(3) = 0\n"));
            touched_bytes += chunk.len() as u64;
        }
    }
    let trace_path = dir.path().join("run.trace");
    fs::write(&trace_path, trace).unwrap();

    let (el, _) = load_execution_log(&[trace_path], TraceFormat::StraceText, true).unwrap();
    let a = attribute(&el, &g0("/init.sh"));
    let pm = partition(&a.executables(), &a.call_graph, &Policy::AllOneContext).unwrap();
    let meta = FsMetadataSource::new(&src);
    let plan = plan_placement(&pm, &a, &meta, &PlanOptions::default()).unwrap();

    let out = dir.path().join("out");
    cleave_core::emit::materialize(&plan, &src, &out, &Default::default()).unwrap();
    let report = cleave_core::emit::size_report(&src, &out).unwrap();

    let tolerance = touched_bytes / 100; // 1%
    let delta = report.output_bytes.abs_diff(touched_bytes);
    assert!(
        delta <= tolerance,
        "output {} vs closure {} differs by {delta} (> {tolerance})",
        report.output_bytes,
        touched_bytes
    );
    assert!(
        (report.reduction_percent - 70.0).abs() < 1.0,
        "expected ~70% reduction, got {:.2}%",
        report.reduction_percent
    );
    println!(
        "ACCEPTANCE 5 slimming-desk-scale: PASS ({} MB -> {} MB, {:.1}% reduction)",
        report.source_bytes >> 20,
        report.output_bytes >> 20,
        report.reduction_percent
    );
}

// ===========================================================================
// 6. Throughput
// ===========================================================================

#[test]
fn acceptance_6_throughput_million_events() {
    let _serial = gate();
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("big.trace");
    let src = dir.path().join("src");

    // synthesize the trace and a matching small source tree
    let paths: Vec<String> = (0..150)
        .map(|i| format!("/usr/lib/app/mod{i}.so"))
        .chain((0..30).map(|i| format!("/etc/app/conf{i}")))
        .chain((0..120).map(|i| format!("/var/data/f{i}")))
        .collect();
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&trace_path).unwrap());
        writeln!(
            w,
            "300 1700000000.000000 execve(\"/bin/worker\", [\"worker\"], 0x7f /* 4 vars */) = 0"
        )
        .unwrap();
        let mut ts = 1_700_000_000.0f64;
        for n in 1..1_000_000u64 {
            ts += 0.000001;
            let pth = &paths[(n as usize) % paths.len()];
            match n % 5 {
                0 => writeln!(w, "300 {ts:.6} open(\"{pth}\", O_RDONLY|O_CLOEXEC) = 3<{pth}>"),
                1 => writeln!(w, "300 {ts:.6} read(3, \"data\", 4) = 4"),
                2 => writeln!(
                    w,
                    "300 {ts:.6} fstat(3, {{st_mode=S_IFREG|0644, st_size=100}}) = 0"
                ),
                3 => writeln!(w, "300 {ts:.6} close(3) = 0"),
                _ => writeln!(
                    w,
                    "300 {ts:.6} open(\"{pth}.out\", O_CREAT|O_WRONLY, 0644) = 4<{pth}.out>"
                ),
            }
            .unwrap();
        }
    }
    for pth in &paths {
        let real = src.join(&pth[1..]);
        fs::create_dir_all(real.parent().unwrap()).unwrap();
        fs::write(&real, b"x").unwrap();
    }
    fs::write(src.join("bin_worker"), b"elf").ok();
    fs::create_dir_all(src.join("bin")).unwrap();
    fs::write(src.join("bin/worker"), b"elf").unwrap();
    fs::write(src.join("init"), b"elf").ok();

    // analyze (streaming), partition, and plan under the clock
    let started = Instant::now();
    let mut attributor = Attributor::new(g0("/init"));
    let mut reader = open_reader(&trace_path, TraceFormat::StraceText, true).unwrap();
    let mut events = 0u64;
    for ev in &mut reader {
        attributor.feed(&ev.unwrap());
        events += 1;
    }
    let a = attributor.finish();
    let analyze_secs = started.elapsed().as_secs_f64();

    let pm = partition(&a.executables(), &a.call_graph, &Policy::AllOneContext).unwrap();
    let meta = FsMetadataSource::new(&src);
    let plan = plan_placement(&pm, &a, &meta, &PlanOptions::default()).unwrap();
    let total = started.elapsed();

    assert_eq!(events, 1_000_000);
    assert!(!plan.containers.is_empty());
    assert!(
        total < Duration::from_secs(60),
        "hard fail: {:.1}s for 10^6 events (limit 60s)",
        total.as_secs_f64()
    );
    if total >= Duration::from_secs(30) {
        eprintln!(
            "warning: throughput {:.1}s exceeds the 30s desktop target",
            total.as_secs_f64()
        );
    }
    println!(
        "ACCEPTANCE 6 throughput: PASS (10^6 events analyzed {analyze_secs:.2}s, total {:.2}s < 60s)",
        total.as_secs_f64()
    );
}

// ===========================================================================
// 7. RPE conformance (Linux fd passing)
// ===========================================================================

fn rpe_bin(name: &str) -> PathBuf {
    // make sure the rpe binaries exist, then locate them next to the test
    // executable's target directory
    static BUILD: std::sync::Once = std::sync::Once::new();
    BUILD.call_once(|| {
        let status = std::process::Command::new(env!("CARGO"))
            .args(["build", "-p", "cleave-rpe", "--bins"])
            .status()
            .expect("cargo build for rpe binaries");
        assert!(status.success(), "building rpe binaries failed");
    });
    let mut dir = std::env::current_exe().unwrap();
    dir.pop();
    if dir.ends_with("deps") {
        dir.pop();
    }
    let candidate = dir.join(name);
    assert!(candidate.exists(), "{} not found at {candidate:?}", name);
    candidate
}

fn start_rpe_server(dir: &Path) -> PathBuf {
    let socket = dir.join("rpe.sock");
    let config = cleave_rpe::server::ServerConfig {
        socket_path: socket.clone(),
    };
    let listener = cleave_rpe::server::bind(&config).unwrap();
    std::thread::spawn(move || {
        let _ = cleave_rpe::server::server_loop(listener, None);
    });
    socket
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// One stub invocation of /bin/true with `extra_fds` open descriptors and
/// `argv_bytes` of argument payload; returns wall-clock seconds.
fn time_stub(socket: &Path, stub: &Path, extra_fds: i32, argv_bytes: usize) -> f64 {
    use std::os::unix::process::CommandExt;
    let mut cmd = std::process::Command::new(stub);
    cmd.env("CLEAVE_RPE_SOCKET", socket);
    cmd.env("CLEAVE_RPE_TARGET", "/bin/true");
    cmd.arg0("true");
    if argv_bytes > 0 {
        // 64 KiB per argument keeps each under the kernel's per-string cap
        let chunk = 64 << 10;
        let mut left = argv_bytes;
        while left > 0 {
            let n = left.min(chunk);
            cmd.arg("x".repeat(n));
            left -= n;
        }
    }
    if extra_fds > 0 {
        unsafe {
            cmd.pre_exec(move || {
                let null = libc::open(b"/dev/null\0".as_ptr() as *const i8, libc::O_RDONLY);
                if null < 0 {
                    return Err(std::io::Error::last_os_error());
                }
                for fd in 10..10 + extra_fds {
                    if libc::dup2(null, fd) < 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                }
                Ok(())
            });
        }
    }
    cmd.stdout(std::process::Stdio::null());
    cmd.stderr(std::process::Stdio::null());
    let t = Instant::now();
    let status = cmd.status().unwrap();
    let dt = t.elapsed().as_secs_f64();
    assert!(status.success(), "stub run failed");
    dt
}

fn measure_medians(socket: &Path, stub: &Path, trials: usize) -> (f64, f64, f64, f64) {
    let run = |fds, argv| -> f64 {
        let mut xs = Vec::with_capacity(trials);
        for _ in 0..trials {
            xs.push(time_stub(socket, stub, fds, argv));
        }
        median(xs)
    };
    // warm-up
    for _ in 0..5 {
        time_stub(socket, stub, 0, 0);
    }
    let base = run(0, 16);
    let many_fds = run(200, 16);
    let small_argv = run(0, 16);
    let big_argv = run(0, 256 << 10);
    (base, many_fds, small_argv, big_argv)
}

#[test]
#[cfg(target_os = "linux")]
fn acceptance_7_rpe_conformance() {
    let _serial = gate();
    use std::os::unix::process::CommandExt;
    use std::os::unix::process::ExitStatusExt;

    let stub = rpe_bin("rpe-stub");
    let probe = rpe_bin("rpe-probe");
    let dir = tempfile::tempdir().unwrap();
    let socket = start_rpe_server(dir.path());

    // -- transparency: byte-identical probe output, remote vs local
    let work = dir.path().join("wd");
    fs::create_dir(&work).unwrap();
    let run_probe = |bin: &Path, out: &Path| {
        let stdout = fs::File::create(out).unwrap();
        let status = std::process::Command::new(bin)
            .arg0("probe")
            .args(["alpha", "beta gamma"])
            .env_clear()
            .env("PATH", "/usr/bin:/bin")
            .env("CLEAVE_RPE_SOCKET", &socket)
            .env("CLEAVE_RPE_TARGET", &probe)
            .current_dir(&work)
            .stdout(stdout)
            .stdin(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
    };
    let local_out = dir.path().join("local.txt");
    let remote_out = dir.path().join("remote.txt");
    run_probe(&probe, &local_out);
    run_probe(&stub, &remote_out);
    assert_eq!(
        fs::read(&local_out).unwrap(),
        fs::read(&remote_out).unwrap(),
        "transparency probe output differs"
    );

    // -- exit codes 0..=255 round-trip (sampled densely at both ends)
    let mut codes: Vec<i32> = (0..=15).collect();
    codes.extend([31, 63, 64, 100, 126, 127, 128, 129, 200, 254, 255]);
    for code in codes {
        let status = std::process::Command::new(&stub)
            .env("CLEAVE_RPE_SOCKET", &socket)
            .env("CLEAVE_RPE_TARGET", &probe)
            .arg0("probe")
            .args(["--exit", &code.to_string()])
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(code), "exit code {code}");
    }

    // -- fatal signals round-trip
    for signo in [libc::SIGTERM, libc::SIGINT, libc::SIGKILL] {
        let status = std::process::Command::new(&stub)
            .env("CLEAVE_RPE_SOCKET", &socket)
            .env("CLEAVE_RPE_TARGET", &probe)
            .arg0("probe")
            .args(["--signal", &signo.to_string()])
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert_eq!(status.signal(), Some(signo), "fatal signal {signo}");
    }

    // -- shell redirect writes through the shipped descriptor
    let redirected = dir.path().join("red.txt");
    let out_file = fs::File::create(&redirected).unwrap();
    let status = std::process::Command::new(&stub)
        .env("CLEAVE_RPE_SOCKET", &socket)
        .env("CLEAVE_RPE_TARGET", "/bin/sh")
        .arg0("sh")
        .args(["-c", "echo through-the-fd"])
        .stdout(out_file)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        fs::read_to_string(&redirected).unwrap(),
        "through-the-fd\n"
    );

    // -- overhead: low-millisecond median, and latency grows with fd count
    //    and argv bytes
    let (mut base, mut many_fds, mut small_argv, mut big_argv) =
        measure_medians(&socket, &stub, 40);
    if many_fds <= base || big_argv <= small_argv {
        // timing noise: one re-measure with more samples before judging
        let again = measure_medians(&socket, &stub, 120);
        (base, many_fds, small_argv, big_argv) = again;
    }
    assert!(
        base < 0.025,
        "median per-invocation latency {:.3}ms exceeds 25ms",
        base * 1e3
    );
    let fd_slope = (many_fds - base) / 200.0;
    let argv_slope = (big_argv - small_argv) / ((256 << 10) as f64 - 16.0);
    assert!(
        fd_slope > 0.0,
        "latency must grow with shipped fd count (0 fds {:.3}ms vs 200 fds {:.3}ms)",
        base * 1e3,
        many_fds * 1e3
    );
    assert!(
        argv_slope > 0.0,
        "latency must grow with argv bytes (16B {:.3}ms vs 256KiB {:.3}ms)",
        small_argv * 1e3,
        big_argv * 1e3
    );
    println!(
        "ACCEPTANCE 7 rpe-conformance: PASS (median {:.2}ms; 200 fds +{:.2}ms; 256KiB argv +{:.2}ms)",
        base * 1e3,
        (many_fds - base) * 1e3,
        (big_argv - small_argv) * 1e3
    );
}

// ===========================================================================
// 8. End-to-end fixture
// ===========================================================================

/// Minimal source tree matching the Mediawiki-shaped trace.
fn write_mediawiki_source(root: &Path) {
    let files: &[(&str, &str)] = &[
        ("init.sh", "#!/bin/sh\nexec services\n"),
        ("etc/app.conf", "app config\n"),
        ("etc/httpd/httpd.conf", "Listen 80\n"),
        ("etc/ImageMagick/policy.xml", "<policy/>\n"),
        ("lib/libc.so.6", "LIBC-BYTES-1234567890"),
        ("usr/sbin/httpd", "ELF-HTTPD"),
        ("usr/sbin/mysqld", "ELF-MYSQLD"),
        ("usr/bin/convert", "ELF-CONVERT"),
        ("var/lib/mysql/ibdata1", "IBDATA000"),
        ("var/www/html/index.php", "<?php wiki(); ?>"),
        ("var/www/html/upload.png", "PNGDATA"),
        ("usr/bin/unused-tool", "ELF-UNUSED"),
        ("var/cache/junk.bin", "JUNKJUNKJUNK"),
    ];
    for (rel, content) in files {
        let full = root.join(rel);
        fs::create_dir_all(full.parent().unwrap()).unwrap();
        fs::write(&full, content).unwrap();
    }
    fs::create_dir_all(root.join("tmp")).unwrap();
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
struct PlanShape {
    shared_network: bool,
    containers: Vec<ContainerShape>,
    volumes: Vec<VolumeShape>,
    net_links: Vec<LinkShape>,
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
struct ContainerShape {
    name: String,
    executables: Vec<String>,
    entry: Option<String>,
    serves_rpe: bool,
    volumes: Vec<String>,
    stubs: Vec<(String, String)>,
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
struct VolumeShape {
    mount: String,
    containers: Vec<String>,
    files: Vec<String>,
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
struct LinkShape {
    bound: String,
    peer: String,
    containers: Vec<String>,
}

fn addr_str(a: &NetAddr) -> String {
    let proto = match a.proto {
        Proto::Tcp => "tcp",
        Proto::Udp => "udp",
    };
    format!("{proto}://{}:{}", a.host, a.port)
}

#[test]
fn acceptance_8_end_to_end_fixture() {
    let _serial = gate();
    let el = load("mediawiki.strace");
    let a = attribute(&el, &g0("/init.sh"));
    let policy = cleave_core::policy::parse_policy(
        &fs::read_to_string(fixture("mediawiki.policy")).unwrap(),
    )
    .unwrap();
    let pm = partition(&a.executables(), &a.call_graph, &policy).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    write_mediawiki_source(&src);
    let meta = FsMetadataSource::new(&src);
    let plan = plan_placement(&pm, &a, &meta, &PlanOptions::default()).unwrap();

    let actual = PlanShape {
        shared_network: plan.shared_network,
        containers: plan
            .containers
            .iter()
            .map(|c| ContainerShape {
                name: c.name.clone(),
                executables: c.executables.iter().map(|e| e.display()).collect(),
                entry: c.entry.as_ref().map(|e| e.display()),
                serves_rpe: c.serves_rpe,
                volumes: {
                    let mut v: Vec<String> =
                        c.volumes.iter().map(|v| v.mount_path.display()).collect();
                    v.sort();
                    v
                },
                stubs: c
                    .stubs
                    .iter()
                    .map(|s| (s.path.display(), s.target_container.clone()))
                    .collect(),
            })
            .collect(),
        volumes: {
            let mut v: Vec<VolumeShape> = plan
                .volumes
                .iter()
                .map(|v| VolumeShape {
                    mount: v.mount_path.display(),
                    containers: v.containers.clone(),
                    files: v.files.iter()
                        .filter(|f| f.meta.kind == FileKind::File)
                        .map(|f| f.path.display())
                        .collect(),
                })
                .collect();
            v.sort_by(|x, y| x.mount.cmp(&y.mount));
            v
        },
        net_links: plan
            .net_links
            .iter()
            .map(|l| LinkShape {
                bound: addr_str(&l.bound),
                peer: addr_str(&l.peer),
                containers: l.containers.clone(),
            })
            .collect(),
    };

    let expected: PlanShape = serde_json::from_str(
        &fs::read_to_string(fixture("mediawiki-expected-plan.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(actual, expected, "plan structure must match the checked-in expectation");

    // libc is duplicated read-only into the three service containers
    for name in ["c1-convert", "c2-httpd", "c3-mysqld"] {
        let c = plan.containers.iter().find(|c| c.name == name).unwrap();
        assert!(
            c.files.iter().any(|f| f.path.display() == "/lib/libc.so.6"),
            "{name} must carry its own libc copy"
        );
    }
    // the session file created and deleted during the run is nowhere
    for c in &plan.containers {
        assert!(c.files.iter().all(|f| f.path.display() != "/tmp/sess_a1"));
    }
    println!(
        "ACCEPTANCE 8 end-to-end-fixture: PASS (4 containers, volumes /tmp + /var/www/html shared by web+convert, /var/lib/mysql by web+db)"
    );
}
