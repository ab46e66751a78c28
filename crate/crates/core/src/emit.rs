//! Materialize a placement plan: per-container file trees, shared volume
//! trees, container manifests, an orchestration descriptor, and the size
//! report.
//!
//! Output layout under the chosen directory:
//!
//! ```text
//! out/
//!   plan.json
//!   manifests/<container>.json
//!   compose.yaml
//!   size-report.json
//!   containers/<container>/rootfs/...
//!   shared/<volume-key>/...
//! ```
//!
//! File copies replicate mode, ownership, and mtime from the source tree.
//! Ownership changes that fail without privilege degrade to a warning; the
//! intended owner stays recorded in the manifest. Directory mtimes are
//! applied deepest-first after their contents, so re-running over an
//! unchanged plan produces byte-identical trees.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bytes::AbsPath;
use crate::placement::{
    FileKind, PlacedFile, PlacementPlan, StubSpec, VolumeMount, RPE_SERVER_PATH, RPE_SOCKET_DIR,
};

pub const MANIFEST_FORMAT: &str = "cleave-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Where the stub-to-socket routing file lands inside a container.
pub const STUBMAP_PATH: &str = "/etc/cleave/stubmap";

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("source file missing while copying: {0}")]
    MissingSourceFile(String),
    #[error("stub binary required (plan has {0} stub sites) but none was provided")]
    StubBinaryMissing(usize),
    #[error("server binary required (plan has serving containers) but none was provided")]
    ServerBinaryMissing,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> EmitError {
    EmitError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-container output document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub executables: Vec<AbsPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<AbsPath>,
    pub serves_rpe: bool,
    pub files: Vec<PlacedFile>,
    /// Paths the build itself adds: installed stubs, the stub map, the
    /// server binary, and their directories.
    pub support_files: Vec<AbsPath>,
    pub runtime_paths: Vec<AbsPath>,
    pub volumes: Vec<VolumeMount>,
    pub stubs: Vec<StubSpec>,
    pub shared_network: bool,
    /// Paths whose ownership could not be applied (unprivileged run).
    pub ownership_warnings: Vec<AbsPath>,
}

#[derive(Debug, Clone, Default)]
pub struct MaterializeOptions {
    /// Binary installed at every stub site.
    pub stub_binary: Option<PathBuf>,
    /// Server binary installed in containers that serve remote exec.
    pub server_binary: Option<PathBuf>,
}

#[derive(Debug)]
pub struct MaterializeOutcome {
    pub manifests: Vec<ContainerManifest>,
    pub manifest_paths: Vec<PathBuf>,
}

/// Build all output trees and documents for `plan` under `out_root`,
/// copying file content from `source_root`.
pub fn materialize(
    plan: &PlacementPlan,
    source_root: &Path,
    out_root: &Path,
    opts: &MaterializeOptions,
) -> Result<MaterializeOutcome, EmitError> {
    let stub_sites: usize = plan.containers.iter().map(|c| c.stubs.len()).sum();
    if stub_sites > 0 && opts.stub_binary.is_none() {
        return Err(EmitError::StubBinaryMissing(stub_sites));
    }
    if plan.containers.iter().any(|c| c.serves_rpe) && opts.server_binary.is_none() {
        return Err(EmitError::ServerBinaryMissing);
    }

    fs::create_dir_all(out_root).map_err(|e| io_err(out_root, e))?;
    let manifest_dir = out_root.join("manifests");
    fs::create_dir_all(&manifest_dir).map_err(|e| io_err(&manifest_dir, e))?;

    // shared volume trees first (content is independent of containers)
    for vol in &plan.volumes {
        let vol_root = out_root.join("shared").join(&vol.key);
        fs::create_dir_all(&vol_root).map_err(|e| io_err(&vol_root, e))?;
        let mut warn = Vec::new();
        build_tree(&vol.files, Some(&vol.mount_path), source_root, &vol_root, &mut warn)?;
    }

    let mut manifests = Vec::new();
    let mut manifest_paths = Vec::new();
    for c in &plan.containers {
        let rootfs = out_root.join("containers").join(&c.name).join("rootfs");
        fs::create_dir_all(&rootfs).map_err(|e| io_err(&rootfs, e))?;

        // support files first: the tree pass fixes directory mtimes last
        let mut support_files: Vec<AbsPath> = Vec::new();
        if let Some(stub) = &opts.stub_binary {
            for s in &c.stubs {
                install_binary(stub, &rootfs, &s.path)?;
                support_files.push(s.path.clone());
            }
        }
        if !c.stubs.is_empty() {
            // route each stub path to its server socket
            let map_at = AbsPath::new(STUBMAP_PATH.as_bytes()).unwrap();
            let map_path = rootfs.join("etc/cleave/stubmap");
            fs::create_dir_all(map_path.parent().unwrap())
                .map_err(|e| io_err(&map_path, e))?;
            let mut map = Vec::new();
            for s in &c.stubs {
                map.extend_from_slice(s.path.as_bytes());
                map.push(b'\t');
                map.extend_from_slice(s.socket.as_bytes());
                map.push(b'\n');
            }
            fs::write(&map_path, map).map_err(|e| io_err(&map_path, e))?;
            set_mode(&map_path, 0o644)?;
            set_mtime(&map_path, (0, 0), false)?;
            set_mtime(map_path.parent().unwrap(), (0, 0), false)?;
            support_files.push(map_at);
            support_files.push(AbsPath::new(b"/etc/cleave").unwrap());
        }
        if c.serves_rpe {
            if let Some(server) = &opts.server_binary {
                let at = AbsPath::new(RPE_SERVER_PATH.as_bytes()).unwrap();
                install_binary(server, &rootfs, &at)?;
                set_mtime(&rootfs.join(".cleave"), (0, 0), false)?;
                support_files.push(at);
                support_files.push(AbsPath::new(b"/.cleave").unwrap());
            }
        }
        support_files.sort();

        let mut ownership_warnings = Vec::new();
        build_tree(&c.files, None, source_root, &rootfs, &mut ownership_warnings)?;

        let manifest = ContainerManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            name: c.name.clone(),
            executables: c.executables.clone(),
            entry: c.entry.clone(),
            serves_rpe: c.serves_rpe,
            files: c.files.clone(),
            support_files,
            runtime_paths: c.runtime_paths.clone(),
            volumes: c.volumes.clone(),
            stubs: c.stubs.clone(),
            shared_network: c.shared_network,
            ownership_warnings,
        };
        let mpath = manifest_dir.join(format!("{}.json", c.name));
        write_json(&mpath, &manifest)?;
        manifests.push(manifest);
        manifest_paths.push(mpath);
    }

    write_json(&out_root.join("plan.json"), plan)?;
    let compose = emit_compose(plan);
    fs::write(out_root.join("compose.yaml"), compose)
        .map_err(|e| io_err(&out_root.join("compose.yaml"), e))?;

    Ok(MaterializeOutcome {
        manifests,
        manifest_paths,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EmitError> {
    let mut data = serde_json::to_vec_pretty(value).expect("serializable");
    data.push(b'\n');
    fs::write(path, data).map_err(|e| io_err(path, e))
}

/// Copy one file list into `dest_root`. When `strip` is set, paths are
/// placed relative to that prefix (volume trees). Directory timestamps are
/// fixed up after contents, deepest path first.
fn build_tree(
    files: &[PlacedFile],
    strip: Option<&AbsPath>,
    source_root: &Path,
    dest_root: &Path,
    ownership_warnings: &mut Vec<AbsPath>,
) -> Result<(), EmitError> {
    let mut dirs: Vec<(&PlacedFile, PathBuf)> = Vec::new();
    for f in files {
        let Some(dest) = dest_path(dest_root, strip, &f.path) else {
            continue;
        };
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let src = source_path(source_root, &f.path);
        match f.meta.kind {
            FileKind::Dir => {
                if !dest.is_dir() {
                    fs::create_dir_all(&dest).map_err(|e| io_err(&dest, e))?;
                }
                set_mode(&dest, f.meta.mode)?;
                apply_owner(&dest, f, ownership_warnings);
                dirs.push((f, dest));
            }
            FileKind::File => {
                if !src.exists() {
                    return Err(EmitError::MissingSourceFile(f.path.display()));
                }
                fs::copy(&src, &dest).map_err(|e| io_err(&dest, e))?;
                set_mode(&dest, f.meta.mode)?;
                apply_owner(&dest, f, ownership_warnings);
                set_mtime(&dest, f.meta.mtime, false)?;
            }
            FileKind::Symlink => {
                let target = f
                    .meta
                    .symlink_target
                    .as_ref()
                    .map(|t| PathBuf::from(std::ffi::OsStr::from_bytes(t.as_bytes())))
                    .unwrap_or_else(|| PathBuf::from("."));
                if dest.symlink_metadata().is_ok() {
                    fs::remove_file(&dest).map_err(|e| io_err(&dest, e))?;
                }
                std::os::unix::fs::symlink(&target, &dest).map_err(|e| io_err(&dest, e))?;
                apply_owner(&dest, f, ownership_warnings);
                set_mtime(&dest, f.meta.mtime, true)?;
            }
            FileKind::Fifo => {
                make_fifo(&dest, f.meta.mode)?;
                apply_owner(&dest, f, ownership_warnings);
                set_mtime(&dest, f.meta.mtime, false)?;
            }
        }
    }
    // children dirtied parent mtimes; fix directories bottom-up
    dirs.sort_by(|a, b| b.1.cmp(&a.1));
    for (f, dest) in dirs {
        set_mtime(&dest, f.meta.mtime, false)?;
    }
    Ok(())
}

fn dest_path(dest_root: &Path, strip: Option<&AbsPath>, path: &AbsPath) -> Option<PathBuf> {
    let rel: &[u8] = match strip {
        Some(prefix) => {
            if !path.starts_with(prefix) || path == prefix {
                return None;
            }
            &path.as_bytes()[prefix.as_bytes().len() + 1..]
        }
        None => &path.as_bytes()[1..],
    };
    Some(dest_root.join(std::ffi::OsStr::from_bytes(rel)))
}

fn source_path(source_root: &Path, path: &AbsPath) -> PathBuf {
    source_root.join(std::ffi::OsStr::from_bytes(&path.as_bytes()[1..]))
}

fn set_mode(path: &Path, mode: u32) -> Result<(), EmitError> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(mode)).map_err(|e| io_err(path, e))
}

fn apply_owner(path: &Path, f: &PlacedFile, warnings: &mut Vec<AbsPath>) {
    let c = std::ffi::CString::new(path.as_os_str().as_bytes()).expect("no NUL in path");
    let rc = unsafe { lchown_raw(c.as_ptr(), f.meta.uid, f.meta.gid) };
    if rc != 0 {
        log::warn!(
            "cannot set ownership {}:{} on {}; recorded in manifest only",
            f.meta.uid,
            f.meta.gid,
            path.display()
        );
        warnings.push(f.path.clone());
    }
}

extern "C" {
    #[link_name = "lchown"]
    fn lchown_raw(path: *const std::os::raw::c_char, uid: u32, gid: u32) -> i32;
    #[link_name = "mkfifo"]
    fn mkfifo_raw(path: *const std::os::raw::c_char, mode: u32) -> i32;
    #[link_name = "utimensat"]
    fn utimensat_raw(
        dirfd: i32,
        path: *const std::os::raw::c_char,
        times: *const Timespec,
        flags: i32,
    ) -> i32;
}

#[repr(C)]
struct Timespec {
    tv_sec: i64,
    tv_nsec: i64,
}

const AT_FDCWD_RAW: i32 = -100;
const AT_SYMLINK_NOFOLLOW_RAW: i32 = 0x100;

fn set_mtime(path: &Path, mtime: (i64, u32), nofollow: bool) -> Result<(), EmitError> {
    let c = std::ffi::CString::new(path.as_os_str().as_bytes()).expect("no NUL in path");
    let times = [
        Timespec {
            tv_sec: mtime.0,
            tv_nsec: mtime.1 as i64,
        },
        Timespec {
            tv_sec: mtime.0,
            tv_nsec: mtime.1 as i64,
        },
    ];
    let flags = if nofollow { AT_SYMLINK_NOFOLLOW_RAW } else { 0 };
    let rc = unsafe { utimensat_raw(AT_FDCWD_RAW, c.as_ptr(), times.as_ptr(), flags) };
    if rc != 0 {
        return Err(io_err(path, io::Error::last_os_error()));
    }
    Ok(())
}

fn make_fifo(path: &Path, mode: u32) -> Result<(), EmitError> {
    if path.symlink_metadata().is_ok() {
        fs::remove_file(path).map_err(|e| io_err(path, e))?;
    }
    let c = std::ffi::CString::new(path.as_os_str().as_bytes()).expect("no NUL in path");
    let rc = unsafe { mkfifo_raw(c.as_ptr(), mode) };
    if rc != 0 {
        return Err(io_err(path, io::Error::last_os_error()));
    }
    set_mode(path, mode)
}

fn install_binary(binary: &Path, rootfs: &Path, at: &AbsPath) -> Result<(), EmitError> {
    let dest = rootfs.join(std::ffi::OsStr::from_bytes(&at.as_bytes()[1..]));
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    if dest.symlink_metadata().is_ok() {
        fs::remove_file(&dest).map_err(|e| io_err(&dest, e))?;
    }
    fs::copy(binary, &dest).map_err(|e| io_err(&dest, e))?;
    set_mode(&dest, 0o755)?;
    set_mtime(&dest, (0, 0), false)
}

/// Write the orchestration descriptor: one service per container, volume
/// mounts on both sides, shared network namespace via service mode, and
/// the remote-exec server command where needed. The output is
/// docker-compose compatible YAML, emitted deterministically.
pub fn emit_compose(plan: &PlacementPlan) -> String {
    let mut out = String::new();
    out.push_str("services:\n");
    let first = plan.containers.first().map(|c| c.name.clone());
    for c in &plan.containers {
        out.push_str(&format!("  {}:\n", c.name));
        out.push_str(&format!("    build: containers/{}\n", c.name));
        if c.serves_rpe {
            let sock = format!("{RPE_SOCKET_DIR}/{}.sock", c.name);
            out.push_str(&format!(
                "    command: [\"{RPE_SERVER_PATH}\", \"--socket\", \"{sock}\"]\n"
            ));
        } else if let Some(entry) = &c.entry {
            out.push_str(&format!("    command: [\"{}\"]\n", entry.display()));
        }
        if !c.volumes.is_empty() {
            out.push_str("    volumes:\n");
            for v in &c.volumes {
                out.push_str(&format!(
                    "      - ./shared/{}:{}\n",
                    v.key,
                    v.mount_path.display()
                ));
            }
        }
        if plan.shared_network {
            match &first {
                Some(f) if *f != c.name => {
                    out.push_str(&format!("    network_mode: \"service:{f}\"\n"));
                }
                _ => {}
            }
        }
    }
    if !plan.volumes.is_empty() {
        out.push_str("# shared volumes\n");
        for v in &plan.volumes {
            out.push_str(&format!(
                "#   {} -> {} ({})\n",
                v.key,
                v.mount_path.display(),
                v.containers.join(", ")
            ));
        }
    }
    out
}

/// Byte totals computed from the actual output trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub source_bytes: u64,
    pub containers: BTreeMap<String, u64>,
    pub shared_bytes: u64,
    pub output_bytes: u64,
    /// 1 - output/source, as a percentage.
    pub reduction_percent: f64,
}

impl SizeReport {
    pub fn render_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "{:<28} {:>14}", "tree", "bytes").unwrap();
        writeln!(out, "{:<28} {:>14}", "source", self.source_bytes).unwrap();
        for (name, bytes) in &self.containers {
            writeln!(out, "{:<28} {:>14}", name, bytes).unwrap();
        }
        writeln!(out, "{:<28} {:>14}", "shared", self.shared_bytes).unwrap();
        writeln!(out, "{:<28} {:>14}", "total output", self.output_bytes).unwrap();
        writeln!(out, "size reduction: {:.1}%", self.reduction_percent).unwrap();
        out
    }
}

/// Walk source and output trees and compute the reduction.
pub fn size_report(source_root: &Path, out_root: &Path) -> Result<SizeReport, EmitError> {
    let source_bytes = tree_bytes(source_root)?;
    let mut containers = BTreeMap::new();
    let containers_dir = out_root.join("containers");
    if containers_dir.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&containers_dir)
            .map_err(|e| io_err(&containers_dir, e))?
            .collect::<Result<_, _>>()
            .map_err(|e| io_err(&containers_dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().into_owned();
            containers.insert(name, tree_bytes(&entry.path())?);
        }
    }
    let shared_dir = out_root.join("shared");
    let shared_bytes = if shared_dir.is_dir() {
        tree_bytes(&shared_dir)?
    } else {
        0
    };
    let output_bytes: u64 = containers.values().sum::<u64>() + shared_bytes;
    let reduction_percent = if source_bytes == 0 {
        0.0
    } else {
        (1.0 - output_bytes as f64 / source_bytes as f64) * 100.0
    };
    Ok(SizeReport {
        source_bytes,
        containers,
        shared_bytes,
        output_bytes,
        reduction_percent,
    })
}

/// Sum of regular-file sizes under a tree (symlinks counted by target
/// string length, directories as zero).
pub fn tree_bytes(root: &Path) -> Result<u64, EmitError> {
    let mut total = 0u64;
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(io_err(&dir, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&dir, e))?;
            let meta = entry
                .path()
                .symlink_metadata()
                .map_err(|e| io_err(&entry.path(), e))?;
            if meta.is_dir() {
                stack.push(entry.path());
            } else if meta.file_type().is_symlink() {
                total += fs::read_link(entry.path())
                    .map(|t| t.as_os_str().len() as u64)
                    .unwrap_or(0);
            } else {
                total += meta.len();
            }
        }
    }
    Ok(total)
}
