//! Resource placement: turning the partition plus per-executable resource
//! sets into a concrete plan of files, shared volumes, stubs, and network
//! wiring.
//!
//! Classification per resource:
//!
//! * accessed by one container only -> exclusive to it;
//! * read by several containers, written by none -> duplicated read-only
//!   copy in each;
//! * accessed by several with at least one writer -> a shared volume
//!   mounted at the resource's parent directory (created-at-runtime files
//!   cannot be mounted directly, so the parent is shared instead, for
//!   modified and created resources alike);
//! * network addresses -> matched across containers (wildcard and loopback
//!   forms compare equal) to decide the shared-network-namespace flag.
//!
//! Every placed file drags its ancestor directories along, files deleted
//! during the traced runs are excluded (parents kept), and the plan records
//! mode, ownership, and mtime for everything it places.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attribution::Attribution;
use crate::bytes::AbsPath;
use crate::effects::{NetAddr, Resource};
use crate::partition::PartitionMap;

pub const PLAN_FORMAT: &str = "cleave-plan";
pub const PLAN_VERSION: u32 = 1;

/// Directory shared between containers to carry remote-exec server sockets.
pub const RPE_SOCKET_DIR: &str = "/run/cleave";
/// Where the server binary is installed inside serving containers.
pub const RPE_SERVER_PATH: &str = "/.cleave/rpe-server";

/// Who touches a resource, aggregated at container granularity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Access {
    pub readers: BTreeSet<usize>,
    pub writers: BTreeSet<usize>,
    pub deleted: bool,
}

impl Access {
    pub fn accessors(&self) -> BTreeSet<usize> {
        self.readers.union(&self.writers).copied().collect()
    }
}

pub type AccessSummary = BTreeMap<Resource, Access>;

#[derive(Debug, thiserror::Error)]
pub enum PlacementError {
    #[error("executable {0} has a profile but no container assignment")]
    UnassignedExecutable(String),
    #[error("paths in the resource sets are missing from the source tree:\n{}", .0.join("\n"))]
    MissingSourceFiles(Vec<String>),
    #[error("metadata lookup failed for {path}: {source}")]
    MetadataIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Join per-executable profiles over partition blocks.
pub fn summarize_access(
    pm: &PartitionMap,
    attribution: &Attribution,
) -> Result<AccessSummary, PlacementError> {
    let mut acc: AccessSummary = BTreeMap::new();
    for (exe, profile) in &attribution.profiles {
        let Some(&container) = pm.assign.get(exe) else {
            return Err(PlacementError::UnassignedExecutable(exe.display()));
        };
        for r in &profile.reads {
            acc.entry(r.clone()).or_default().readers.insert(container);
        }
        for r in &profile.writes {
            acc.entry(r.clone()).or_default().writers.insert(container);
        }
    }
    for (r, a) in acc.iter_mut() {
        if let Some(p) = r.path() {
            a.deleted = attribution.tombstones.contains(p);
        }
    }
    Ok(acc)
}

/// Placement decision for one resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourcePlacement {
    Exclusive(usize),
    Duplicate(BTreeSet<usize>),
    SharedVolume {
        mount: AbsPath,
        containers: BTreeSet<usize>,
    },
    NetworkLink(BTreeSet<usize>),
}

pub fn classify_resource(r: &Resource, access: &Access) -> ResourcePlacement {
    let accessors = access.accessors();
    if let Resource::NetSocket(_) = r {
        return ResourcePlacement::NetworkLink(accessors);
    }
    if accessors.len() <= 1 {
        return ResourcePlacement::Exclusive(accessors.into_iter().next().unwrap_or(0));
    }
    if access.writers.is_empty() {
        return ResourcePlacement::Duplicate(accessors);
    }
    let path = r.path().expect("filesystem resource has a path");
    ResourcePlacement::SharedVolume {
        mount: path.parent().unwrap_or_else(AbsPath::root),
        containers: accessors,
    }
}

/// Close a path set under parent directories; the root itself is excluded
/// (it always exists).
pub fn path_closure(paths: &BTreeSet<AbsPath>) -> BTreeSet<AbsPath> {
    let mut out = BTreeSet::new();
    for p in paths {
        if p.is_root() {
            continue;
        }
        out.insert(p.clone());
        for a in p.ancestors() {
            out.insert(a);
        }
    }
    out
}

/// Socket-address matching semantics: ports must agree and the hosts must
/// be equal, or the bound side a wildcard, or both loopback-reachable
/// forms.
pub fn match_socket_addrs(bound: &NetAddr, peer: &NetAddr) -> bool {
    if bound.proto != peer.proto || bound.port != peer.port {
        return false;
    }
    bound.host == peer.host
        || is_wildcard(&bound.host)
        || (is_loopback(&bound.host) && is_loopback(&peer.host))
}

fn is_wildcard(host: &str) -> bool {
    matches!(host, "0.0.0.0" | "::" | "::0")
        || host.parse::<std::net::IpAddr>().is_ok_and(|ip| ip.is_unspecified())
}

fn is_loopback(host: &str) -> bool {
    host == "localhost"
        || host
            .parse::<std::net::IpAddr>()
            .is_ok_and(|ip| ip.is_loopback())
}

/// Filesystem metadata needed to replicate a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub kind: FileKind,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
    /// Modification time as (seconds, nanoseconds).
    pub mtime: (i64, u32),
    pub size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symlink_target: Option<crate::bytes::ByteStr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    File,
    Dir,
    Symlink,
    Fifo,
}

/// Answers metadata queries for paths inside the original container tree.
pub trait MetadataSource {
    /// `Ok(None)` when the path does not exist in the source.
    fn lookup(&self, path: &AbsPath) -> Result<Option<FileMeta>, std::io::Error>;
}

/// Metadata source backed by a real directory tree.
pub struct FsMetadataSource {
    root: std::path::PathBuf,
}

impl FsMetadataSource {
    pub fn new(root: impl Into<std::path::PathBuf>) -> Self {
        FsMetadataSource { root: root.into() }
    }

    fn real_path(&self, path: &AbsPath) -> std::path::PathBuf {
        use std::os::unix::ffi::OsStrExt;
        let rel = std::ffi::OsStr::from_bytes(&path.as_bytes()[1..]);
        self.root.join(rel)
    }
}

impl MetadataSource for FsMetadataSource {
    fn lookup(&self, path: &AbsPath) -> Result<Option<FileMeta>, std::io::Error> {
        use std::os::unix::fs::MetadataExt;
        let real = self.real_path(path);
        let meta = match std::fs::symlink_metadata(&real) {
            Ok(m) => m,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let ft = meta.file_type();
        let kind = if ft.is_dir() {
            FileKind::Dir
        } else if ft.is_symlink() {
            FileKind::Symlink
        } else if std::os::unix::fs::FileTypeExt::is_fifo(&ft) {
            FileKind::Fifo
        } else {
            FileKind::File
        };
        let symlink_target = if kind == FileKind::Symlink {
            use std::os::unix::ffi::OsStrExt;
            Some(crate::bytes::ByteStr::new(
                std::fs::read_link(&real)?.as_os_str().as_bytes(),
            ))
        } else {
            None
        };
        Ok(Some(FileMeta {
            kind,
            mode: meta.mode() & 0o7777,
            uid: meta.uid(),
            gid: meta.gid(),
            mtime: (meta.mtime(), meta.mtime_nsec() as u32),
            size: if kind == FileKind::File { meta.size() } else { 0 },
            symlink_target,
        }))
    }
}

/// In-memory metadata source for planning against synthetic trees.
#[derive(Default)]
pub struct MapMetadataSource {
    pub entries: BTreeMap<AbsPath, FileMeta>,
}

impl MetadataSource for MapMetadataSource {
    fn lookup(&self, path: &AbsPath) -> Result<Option<FileMeta>, std::io::Error> {
        Ok(self.entries.get(path).cloned())
    }
}

/// One file (or dir, symlink, fifo) placed into a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedFile {
    pub path: AbsPath,
    #[serde(flatten)]
    pub meta: FileMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMount {
    /// Host-side key: directory name under the shared area.
    pub key: String,
    pub mount_path: AbsPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubSpec {
    /// Path of the remote executable inside this container.
    pub path: AbsPath,
    pub target_container: String,
    /// Server socket the stub connects to.
    pub socket: AbsPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerPlan {
    pub name: String,
    pub executables: Vec<AbsPath>,
    /// Original entry executable, for the container holding the trace root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<AbsPath>,
    /// True when this container serves remote-exec requests (some blocked
    /// edge points at one of its executables).
    pub serves_rpe: bool,
    pub files: Vec<PlacedFile>,
    /// Paths the traced runs create at runtime; not copied, parents placed.
    pub runtime_paths: Vec<AbsPath>,
    pub volumes: Vec<VolumeMount>,
    pub stubs: Vec<StubSpec>,
    pub shared_network: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedVolumePlan {
    pub key: String,
    pub mount_path: AbsPath,
    pub containers: Vec<String>,
    pub files: Vec<PlacedFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetLink {
    pub bound: NetAddr,
    pub peer: NetAddr,
    pub containers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub format: String,
    pub version: u32,
    pub containers: Vec<ContainerPlan>,
    pub volumes: Vec<SharedVolumePlan>,
    pub net_links: Vec<NetLink>,
    pub shared_network: bool,
}

/// Planning knobs.
#[derive(Debug, Clone)]
pub struct PlanOptions {
    /// Error out when a write-only path is absent from the source tree
    /// instead of treating it as created at runtime.
    pub strict_missing: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            strict_missing: false,
        }
    }
}

struct ContainerDraft {
    exes: BTreeSet<AbsPath>,
    copy_paths: BTreeSet<AbsPath>,
    runtime_paths: BTreeSet<AbsPath>,
    volumes: BTreeMap<String, AbsPath>,
    stubs: Vec<StubSpec>,
}

/// Compute the full placement plan.
pub fn plan_placement(
    pm: &PartitionMap,
    attribution: &Attribution,
    meta: &dyn MetadataSource,
    opts: &PlanOptions,
) -> Result<PlacementPlan, PlacementError> {
    let acc = summarize_access(pm, attribution)?;
    let n = pm.container_count().max(1);
    let names = container_names(pm);

    // volume mount points, merged per parent directory
    let mut volume_sets: BTreeMap<AbsPath, BTreeSet<usize>> = BTreeMap::new();
    for (r, a) in &acc {
        if let ResourcePlacement::SharedVolume { mount, containers } = classify_resource(r, a) {
            volume_sets.entry(mount).or_default().extend(containers);
        }
    }

    let mut drafts: Vec<ContainerDraft> = (0..n)
        .map(|i| ContainerDraft {
            exes: pm.block(i).into_iter().cloned().collect(),
            copy_paths: BTreeSet::new(),
            runtime_paths: BTreeSet::new(),
            volumes: BTreeMap::new(),
            stubs: Vec::new(),
        })
        .collect();

    // distribute filesystem resources
    let mut volume_paths: BTreeMap<AbsPath, BTreeSet<AbsPath>> = BTreeMap::new();
    let mut missing_reads: Vec<String> = Vec::new();
    for (r, a) in &acc {
        let Some(path) = r.path() else { continue };
        let placement = classify_resource(r, a);
        let targets: BTreeSet<usize> = match &placement {
            ResourcePlacement::Exclusive(c) => BTreeSet::from([*c]),
            ResourcePlacement::Duplicate(cs) => cs.clone(),
            ResourcePlacement::SharedVolume { .. } => a.accessors(),
            ResourcePlacement::NetworkLink(_) => continue,
        };

        let copyable = !a.deleted && !matches!(r, Resource::LocalSocket(_));
        let exists = meta
            .lookup(path)
            .map_err(|e| PlacementError::MetadataIo {
                path: path.display(),
                source: e,
            })?
            .is_some();
        let runtime_created = copyable && !exists;
        if runtime_created {
            let read_only = !a.readers.is_empty() && a.writers.is_empty();
            if opts.strict_missing || read_only {
                // a successful existence-requiring read of a path the source
                // tree lacks means the inputs are inconsistent
                missing_reads.push(path.display());
                continue;
            }
        }

        for &c in &targets {
            let draft = &mut drafts[c];
            let under_volume = volume_sets.iter().find(|(mount, members)| {
                members.contains(&c) && path.starts_with(mount)
            });
            match under_volume {
                Some((mount, _)) => {
                    draft
                        .volumes
                        .insert(volume_key(mount), mount.clone());
                    if copyable && !runtime_created {
                        volume_paths
                            .entry(mount.clone())
                            .or_default()
                            .insert(path.clone());
                    }
                    // ancestors of the mount point still live in the container
                    for anc in mount.ancestors() {
                        draft.copy_paths.insert(anc);
                    }
                    draft.copy_paths.insert(mount.clone());
                }
                None => {
                    if copyable && !runtime_created {
                        draft.copy_paths.insert(path.clone());
                    } else {
                        draft.runtime_paths.insert(path.clone());
                    }
                    for anc in path.ancestors() {
                        draft.copy_paths.insert(anc);
                    }
                }
            }
        }
    }
    if !missing_reads.is_empty() {
        missing_reads.sort();
        missing_reads.dedup();
        return Err(PlacementError::MissingSourceFiles(missing_reads));
    }

    // stubs for blocked call edges
    let mut serves_rpe = vec![false; n];
    for (from, to) in &pm.blocked_edges {
        let (Some(&cf), Some(&ct)) = (pm.assign.get(from), pm.assign.get(to)) else {
            continue;
        };
        serves_rpe[ct] = true;
        let socket = AbsPath::new(format!("{RPE_SOCKET_DIR}/{}.sock", names[ct]).as_bytes())
            .expect("socket path is absolute");
        let spec = StubSpec {
            path: to.clone(),
            target_container: names[ct].clone(),
            socket,
        };
        if !drafts[cf].stubs.contains(&spec) {
            drafts[cf].stubs.push(spec);
        }
    }
    for draft in &mut drafts {
        draft.stubs.sort_by(|a, b| a.path.cmp(&b.path));
        // a stub shadows any copy of the remote binary at the same path
        for s in &draft.stubs {
            draft.copy_paths.remove(&s.path);
            for anc in s.path.ancestors() {
                draft.copy_paths.insert(anc);
            }
        }
    }

    // network links across containers
    let mut per_container_net: Vec<BTreeSet<&NetAddr>> = vec![BTreeSet::new(); n];
    for (r, a) in &acc {
        if let Resource::NetSocket(addr) = r {
            for c in a.accessors() {
                per_container_net[c].insert(addr);
            }
        }
    }
    let mut net_links: Vec<NetLink> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for x in &per_container_net[i] {
                for y in &per_container_net[j] {
                    let (bound, peer) = if match_socket_addrs(x, y) {
                        ((*x).clone(), (*y).clone())
                    } else if match_socket_addrs(y, x) {
                        ((*y).clone(), (*x).clone())
                    } else {
                        continue;
                    };
                    net_links.push(NetLink {
                        bound,
                        peer,
                        containers: vec![names[i].clone(), names[j].clone()],
                    });
                }
            }
        }
    }
    let shared_network = !net_links.is_empty();

    // remote-exec socket volume when any stub exists
    let any_stubs = drafts.iter().any(|d| !d.stubs.is_empty());
    if any_stubs {
        let rpe_mount = AbsPath::new(RPE_SOCKET_DIR.as_bytes()).unwrap();
        for (c, draft) in drafts.iter_mut().enumerate() {
            if !draft.stubs.is_empty() || serves_rpe[c] {
                draft.volumes.insert(volume_key(&rpe_mount), rpe_mount.clone());
                for anc in rpe_mount.ancestors() {
                    draft.copy_paths.insert(anc);
                }
            }
        }
    }

    // resolve metadata for every placed path
    let root_container = root_entry(pm, attribution);
    let mut containers = Vec::with_capacity(n);
    for (c, draft) in drafts.iter().enumerate() {
        let files = resolve_files(&draft.copy_paths, meta)?;
        containers.push(ContainerPlan {
            name: names[c].clone(),
            executables: draft.exes.iter().cloned().collect(),
            entry: root_container
                .as_ref()
                .filter(|(rc, _)| *rc == c)
                .map(|(_, e)| e.clone()),
            serves_rpe: serves_rpe[c],
            files,
            runtime_paths: draft.runtime_paths.iter().cloned().collect(),
            volumes: draft
                .volumes
                .iter()
                .map(|(key, mount_path)| VolumeMount {
                    key: key.clone(),
                    mount_path: mount_path.clone(),
                })
                .collect(),
            stubs: draft.stubs.clone(),
            shared_network,
        });
    }

    // shared volume content: closure of the routed paths, relative to the tree
    let mut volumes = Vec::new();
    for (mount, members) in &volume_sets {
        let paths = volume_paths.remove(mount).unwrap_or_default();
        let mut all = path_closure(&paths);
        all.retain(|p| p.starts_with(mount) && p != mount);
        let files = resolve_files(&all, meta)?;
        volumes.push(SharedVolumePlan {
            key: volume_key(mount),
            mount_path: mount.clone(),
            containers: members.iter().map(|c| names[*c].clone()).collect(),
            files,
        });
    }
    if any_stubs {
        volumes.push(SharedVolumePlan {
            key: volume_key(&AbsPath::new(RPE_SOCKET_DIR.as_bytes()).unwrap()),
            mount_path: AbsPath::new(RPE_SOCKET_DIR.as_bytes()).unwrap(),
            containers: containers
                .iter()
                .filter(|c| !c.stubs.is_empty() || c.serves_rpe)
                .map(|c| c.name.clone())
                .collect(),
            files: Vec::new(),
        });
    }

    Ok(PlacementPlan {
        format: PLAN_FORMAT.into(),
        version: PLAN_VERSION,
        containers,
        volumes,
        net_links,
        shared_network,
    })
}

/// Resolve metadata for an already parent-closed path set.
fn resolve_files(
    paths: &BTreeSet<AbsPath>,
    meta: &dyn MetadataSource,
) -> Result<Vec<PlacedFile>, PlacementError> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths.iter().cloned() {
        let m = meta.lookup(&p).map_err(|e| PlacementError::MetadataIo {
            path: p.display(),
            source: e,
        })?;
        match m {
            Some(meta) => out.push(PlacedFile { path: p, meta }),
            // intermediate directory the source lacks (runtime-created
            // parents): synthesize a default directory entry
            None => out.push(PlacedFile {
                path: p,
                meta: FileMeta {
                    kind: FileKind::Dir,
                    mode: 0o755,
                    uid: 0,
                    gid: 0,
                    mtime: (0, 0),
                    size: 0,
                    symlink_target: None,
                },
            }),
        }
    }
    Ok(out)
}

/// Container of the trace root executable and the executable itself.
fn root_entry(pm: &PartitionMap, attribution: &Attribution) -> Option<(usize, AbsPath)> {
    // the root is the unique executable that is never an execve target
    let targets: BTreeSet<&AbsPath> = attribution
        .call_graph
        .edges
        .keys()
        .map(|(_, to)| to)
        .collect();
    let mut roots: Vec<&AbsPath> = attribution
        .profiles
        .keys()
        .filter(|e| !targets.contains(e))
        .collect();
    roots.sort();
    let root = roots.into_iter().next()?;
    pm.assign.get(root).map(|c| (*c, root.clone()))
}

/// Stable container name: index plus the basename of the smallest member.
fn container_names(pm: &PartitionMap) -> Vec<String> {
    let n = pm.container_count().max(1);
    (0..n)
        .map(|i| {
            let block = pm.block(i);
            let min = block.iter().next();
            let base = min
                .map(|p| String::from_utf8_lossy(p.basename()).into_owned())
                .unwrap_or_else(|| "empty".into());
            let sanitized: String = base
                .chars()
                .map(|ch| if ch.is_ascii_alphanumeric() || ch == '.' || ch == '-' || ch == '_' {
                    ch
                } else {
                    '_'
                })
                .collect();
            format!("c{i}-{sanitized}")
        })
        .collect()
}

/// Host-side key for a volume mounted at `mount`.
pub fn volume_key(mount: &AbsPath) -> String {
    let s: String = mount
        .as_bytes()
        .iter()
        .skip(1)
        .map(|&b| {
            let ch = b as char;
            if ch.is_ascii_alphanumeric() || ch == '.' || ch == '-' || ch == '_' {
                ch
            } else {
                '-'
            }
        })
        .collect();
    if s.is_empty() {
        "root".into()
    } else {
        s
    }
}
