//! Resource-effect semantics: folding a syscall stream into read/write
//! resource sets.
//!
//! Each event, applied to the evolving [`SystemState`] (per-process cwd,
//! fd table, current executable, process tree), yields an [`EffectDelta`].
//! The rules:
//!
//! * calls whose success requires a path to exist (open without `O_CREAT`,
//!   stat, access, readlink, chdir, execve, link source, rename source)
//!   put that path in the read set;
//! * creation and modification (open with `O_CREAT`, `O_APPEND`, or
//!   `O_TRUNC`, rename destination, mkdir, mknod, chmod/chown/utime,
//!   truncate, unlink, FIFO opens) put the path in the write set;
//! * calls that only act on already-open descriptors (read, write, lseek,
//!   mmap, close, ...) contribute nothing: the resource was charged when
//!   the descriptor was created, and descriptors may travel between
//!   processes as capabilities;
//! * anonymous IPC (pipe, socketpair) names no resource;
//! * a local-socket bind reads the parent directory and writes the address
//!   file; connect writes the address file; binds to abstract addresses
//!   touch no file;
//! * network bind/connect/accept and connectionless sendto/recvfrom write
//!   the socket address;
//! * failed calls (ret < 0) have no effect at all, on either the sets or
//!   the state.
//!
//! Unknown syscalls yield empty deltas and are counted in
//! [`FoldStats::unhandled`] rather than failing the run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bytes::{AbsPath, ByteStr};
use crate::trace::{Arg, ExecutionLog, Log, SockAddr, SyscallEvent, Tid};

/// A named kernel-visible object a process acts on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    File(AbsPath),
    Fifo(AbsPath),
    LocalSocket(AbsPath),
    NetSocket(NetAddr),
}

impl Resource {
    /// Filesystem path of the resource, when it has one.
    pub fn path(&self) -> Option<&AbsPath> {
        match self {
            Resource::File(p) | Resource::Fifo(p) | Resource::LocalSocket(p) => Some(p),
            Resource::NetSocket(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NetAddr {
    pub proto: Proto,
    pub host: String,
    pub port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
}

/// What an open descriptor refers to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FdObject {
    /// Pipes, socketpairs, eventfds, inherited stdio: no named resource.
    Anonymous,
    /// Opened by path; used to resolve dirfd-relative calls.
    Path(AbsPath),
    /// Created by socket(); carries the protocol for later bind/connect.
    Socket { family: SockFamily, proto: Proto },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SockFamily {
    Unix,
    Inet,
    Other,
}

/// Per-process slice of the system state.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcState {
    pub cwd: AbsPath,
    pub exe: AbsPath,
    pub fds: BTreeMap<i32, FdObject>,
    pub parent: Option<Tid>,
}

/// Read/write resource deltas; the two sets may overlap.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EffectDelta {
    pub reads: BTreeSet<Resource>,
    pub writes: BTreeSet<Resource>,
}

impl EffectDelta {
    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty()
    }

    pub fn absorb(&mut self, other: EffectDelta) {
        self.reads.extend(other.reads);
        self.writes.extend(other.writes);
    }

    fn read(&mut self, r: Resource) {
        self.reads.insert(r);
    }

    fn write(&mut self, r: Resource) {
        self.writes.insert(r);
    }
}

/// Tolerated-condition counters for one fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    /// Events from tids never introduced by clone/fork: a process with
    /// default state was synthesized.
    pub unknown_tids: u64,
    /// Events skipped because a dirfd-relative path could not be resolved.
    pub unresolvable_dirfd: u64,
    /// Syscalls with no handler, by name.
    pub unhandled: BTreeMap<String, u64>,
}

impl FoldStats {
    pub fn absorb(&mut self, other: &FoldStats) {
        self.unknown_tids += other.unknown_tids;
        self.unresolvable_dirfd += other.unresolvable_dirfd;
        for (k, v) in &other.unhandled {
            *self.unhandled.entry(k.clone()).or_default() += v;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("root cwd must be absolute: {0}")]
    RelativeCwd(String),
    #[error("root exe must be absolute: {0}")]
    RelativeExe(String),
}

/// The evolving state the event fold runs over.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    /// Initial process state; the first tid seen binds to it, and events
    /// for unknown tids synthesize copies of it.
    template: ProcState,
    procs: BTreeMap<Tid, ProcState>,
    /// Paths known to be FIFOs (created by mknod/mkfifo in the trace).
    fifos: BTreeSet<AbsPath>,
    /// Paths known to be local-socket address files.
    local_socks: BTreeSet<AbsPath>,
    /// Paths whose last filesystem event deleted them.
    tombstones: BTreeSet<AbsPath>,
    pub stats: FoldStats,
}

/// Build the initial state: one process entry (bound to the first tid that
/// appears), stdio descriptors defaulting to anonymous unless supplied.
pub fn init_state(
    root_cwd: &[u8],
    root_exe: &[u8],
    inherited_fds: BTreeMap<i32, FdObject>,
) -> Result<SystemState, StateError> {
    let cwd = AbsPath::new(root_cwd)
        .map_err(|e| StateError::RelativeCwd(e.0))?;
    let exe = AbsPath::new(root_exe).map_err(|e| StateError::RelativeExe(e.0))?;
    let mut fds = BTreeMap::new();
    for fd in 0..3 {
        fds.insert(fd, FdObject::Anonymous);
    }
    fds.extend(inherited_fds);
    Ok(SystemState {
        template: ProcState {
            cwd,
            exe,
            fds,
            parent: None,
        },
        procs: BTreeMap::new(),
        fifos: BTreeSet::new(),
        local_socks: BTreeSet::new(),
        tombstones: BTreeSet::new(),
        stats: FoldStats::default(),
    })
}

/// Borrowed view of a path argument: plain, or dirfd-relative.
pub enum PathArg<'a> {
    Plain(&'a ByteStr),
    AtDir(&'a Arg, &'a ByteStr),
}

impl SystemState {
    pub fn root_template(&self) -> &ProcState {
        &self.template
    }

    pub fn proc(&self, tid: Tid) -> Option<&ProcState> {
        self.procs.get(&tid)
    }

    /// Current executable of a tid, materializing the process if needed.
    pub fn exe_of(&mut self, tid: Tid) -> AbsPath {
        self.ensure_proc(tid);
        self.procs[&tid].exe.clone()
    }

    pub fn tombstones(&self) -> &BTreeSet<AbsPath> {
        &self.tombstones
    }

    pub fn process_parents(&self) -> BTreeMap<Tid, Option<Tid>> {
        self.procs.iter().map(|(t, p)| (*t, p.parent)).collect()
    }

    fn ensure_proc(&mut self, tid: Tid) {
        if self.procs.contains_key(&tid) {
            return;
        }
        if !self.procs.is_empty() {
            // never introduced by clone/fork; synthesize with defaults
            self.stats.unknown_tids += 1;
            log::warn!("event for unknown tid {tid}; synthesizing default process state");
        }
        self.procs.insert(tid, self.template.clone());
    }

    /// Resolve a path argument to an absolute normalized path: relative
    /// paths join the tid's cwd, dirfd-relative paths join the descriptor's
    /// annotated (or tracked) path, `.`/`..` collapse lexically.
    pub fn resolve_path(&self, tid: Tid, raw: PathArg<'_>) -> Result<AbsPath, ResolveIssue> {
        let (dirfd, rel) = match raw {
            PathArg::Plain(b) => (None, b),
            PathArg::AtDir(d, b) => (Some(d), b),
        };
        if rel.first() == Some(&b'/') {
            return Ok(AbsPath::root().join(rel.as_bytes()));
        }
        let proc = self.procs.get(&tid).unwrap_or(&self.template);
        let base = match dirfd {
            None => proc.cwd.clone(),
            Some(Arg::Flags(f)) if f == "AT_FDCWD" => proc.cwd.clone(),
            Some(Arg::Fd { path: Some(p), .. }) => {
                AbsPath::new(p.as_bytes()).map_err(|_| ResolveIssue::BadAnnotation)?
            }
            Some(Arg::Fd { fd, path: None }) => match proc.fds.get(fd) {
                Some(FdObject::Path(p)) => p.clone(),
                _ => return Err(ResolveIssue::UnresolvableDirfd(*fd)),
            },
            Some(Arg::Int(v)) => {
                let fd = *v as i32;
                match proc.fds.get(&fd) {
                    Some(FdObject::Path(p)) => p.clone(),
                    _ => return Err(ResolveIssue::UnresolvableDirfd(fd)),
                }
            }
            Some(_) => return Err(ResolveIssue::BadDirfdToken),
        };
        Ok(base.join(rel.as_bytes()))
    }

    /// The resource identity of a filesystem path, honoring what the trace
    /// taught us about its kind.
    fn fs_resource(&self, p: AbsPath) -> Resource {
        if self.fifos.contains(&p) {
            Resource::Fifo(p)
        } else if self.local_socks.contains(&p) {
            Resource::LocalSocket(p)
        } else {
            Resource::File(p)
        }
    }

    fn mark_created(&mut self, p: &AbsPath) {
        self.tombstones.remove(p);
    }

    fn mark_deleted(&mut self, p: &AbsPath) {
        self.tombstones.insert(p.clone());
    }
}

#[derive(Debug)]
pub enum ResolveIssue {
    UnresolvableDirfd(i32),
    BadDirfdToken,
    BadAnnotation,
}

// ---------------------------------------------------------------------------
// the per-event transition function
// ---------------------------------------------------------------------------

/// Apply one event: update the state and return the read/write delta.
pub fn apply_event(state: &mut SystemState, e: &SyscallEvent) -> EffectDelta {
    if e.failed() {
        return EffectDelta::default();
    }
    state.ensure_proc(e.tid);
    let mut d = EffectDelta::default();
    match e.name.as_str() {
        "open" | "creat" => handle_open(state, e, None, &mut d),
        "openat" => handle_open(state, e, Some(0), &mut d),
        "stat" | "lstat" | "stat64" | "statfs" | "getxattr" | "lgetxattr" | "listxattr"
        | "llistxattr" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                d.read(state.fs_resource(p));
            }
        }
        "newfstatat" | "fstatat64" | "statx" | "faccessat" | "faccessat2" | "readlinkat"
        | "utimensat" => {
            let write = matches!(e.name.as_str(), "utimensat");
            if let Some(p) = resolve_at(state, e, 0, 1) {
                let r = state.fs_resource(p);
                if write {
                    d.write(r);
                } else {
                    d.read(r);
                }
            }
        }
        "access" | "readlink" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                d.read(state.fs_resource(p));
            }
        }
        "chdir" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                d.read(state.fs_resource(p.clone()));
                state.procs.get_mut(&e.tid).unwrap().cwd = p;
            }
        }
        "fchdir" => {
            // fd-referred and therefore delta-neutral, but it moves the cwd
            let dir = arg_fd(e.args.first())
                .or_else(|| {
                    if let Some(Arg::Fd { fd, .. }) = e.args.first() {
                        Some(*fd)
                    } else {
                        None
                    }
                })
                .and_then(|fd| state.procs[&e.tid].fds.get(&fd).cloned());
            if let Some(FdObject::Path(p)) = dir {
                state.procs.get_mut(&e.tid).unwrap().cwd = p;
            } else if let Some(Arg::Fd { path: Some(ann), .. }) = e.args.first() {
                if let Ok(p) = AbsPath::new(ann.as_bytes()) {
                    state.procs.get_mut(&e.tid).unwrap().cwd = p;
                }
            }
        }
        "execve" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                d.read(Resource::File(p.clone()));
                state.procs.get_mut(&e.tid).unwrap().exe = p;
            }
        }
        "execveat" => {
            if let Some(p) = resolve_at(state, e, 0, 1) {
                d.read(Resource::File(p.clone()));
                state.procs.get_mut(&e.tid).unwrap().exe = p;
            }
        }
        "chmod" | "chown" | "lchown" | "utime" | "utimes" | "truncate" | "setxattr"
        | "lsetxattr" | "removexattr" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                d.write(state.fs_resource(p));
            }
        }
        "fchmodat" | "fchownat" | "futimesat" => {
            if let Some(p) = resolve_at(state, e, 0, 1) {
                d.write(state.fs_resource(p));
            }
        }
        "mkdir" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                state.mark_created(&p);
                d.write(state.fs_resource(p));
            }
        }
        "mkdirat" => {
            if let Some(p) = resolve_at(state, e, 0, 1) {
                state.mark_created(&p);
                d.write(state.fs_resource(p));
            }
        }
        "mknod" | "mknodat" => handle_mknod(state, e, &mut d),
        "rmdir" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                d.write(state.fs_resource(p.clone()));
                state.mark_deleted(&p);
            }
        }
        "unlink" => {
            if let Some(p) = resolve_plain(state, e, 0) {
                d.write(state.fs_resource(p.clone()));
                state.mark_deleted(&p);
                state.fifos.remove(&p);
                state.local_socks.remove(&p);
            }
        }
        "unlinkat" => {
            if let Some(p) = resolve_at(state, e, 0, 1) {
                d.write(state.fs_resource(p.clone()));
                state.mark_deleted(&p);
                state.fifos.remove(&p);
                state.local_socks.remove(&p);
            }
        }
        "rename" => handle_rename(state, e, 0, 1, &mut d),
        "renameat" | "renameat2" => handle_rename_at(state, e, &mut d),
        "link" => {
            if let Some(src) = resolve_plain(state, e, 0) {
                d.read(state.fs_resource(src));
            }
            if let Some(dst) = resolve_plain(state, e, 1) {
                state.mark_created(&dst);
                d.write(state.fs_resource(dst));
            }
        }
        "linkat" => {
            if let Some(src) = resolve_at(state, e, 0, 1) {
                d.read(state.fs_resource(src));
            }
            if let Some(dst) = resolve_at(state, e, 2, 3) {
                state.mark_created(&dst);
                d.write(state.fs_resource(dst));
            }
        }
        "symlink" => {
            // the target string is not dereferenced by symlink itself
            if let Some(p) = resolve_plain(state, e, 1) {
                state.mark_created(&p);
                d.write(state.fs_resource(p));
            }
        }
        "symlinkat" => {
            if let Some(p) = resolve_at(state, e, 1, 2) {
                state.mark_created(&p);
                d.write(state.fs_resource(p));
            }
        }
        "socket" => handle_socket(state, e),
        "bind" => handle_bind(state, e, &mut d),
        "connect" => handle_sockaddr_write(state, e, 1, &mut d),
        "accept" | "accept4" => {
            handle_sockaddr_write(state, e, 1, &mut d);
            // accepted fd inherits the listener's socket identity
            if e.ret >= 0 {
                let listener = arg_fd(e.args.first())
                    .and_then(|fd| state.procs[&e.tid].fds.get(&fd).cloned());
                let obj = listener.unwrap_or(FdObject::Socket {
                    family: SockFamily::Other,
                    proto: Proto::Tcp,
                });
                set_fd(state, e.tid, e.ret as i32, obj);
            }
        }
        "sendto" | "recvfrom" => handle_sockaddr_write(state, e, 4, &mut d),
        "pipe" | "pipe2" => {
            if let Some(Arg::Array(fds)) = e.args.first() {
                for a in fds {
                    if let Some(fd) = arg_fd(Some(a)) {
                        set_fd(state, e.tid, fd, FdObject::Anonymous);
                    }
                }
            }
        }
        "socketpair" => {
            if let Some(Arg::Array(fds)) = e.args.get(3) {
                for a in fds {
                    if let Some(fd) = arg_fd(Some(a)) {
                        set_fd(state, e.tid, fd, FdObject::Anonymous);
                    }
                }
            }
        }
        "eventfd" | "eventfd2" | "memfd_create" | "timerfd_create" | "signalfd" | "signalfd4"
        | "epoll_create" | "epoll_create1" | "inotify_init" | "inotify_init1" | "userfaultfd" => {
            if e.ret >= 0 {
                set_fd(state, e.tid, e.ret as i32, FdObject::Anonymous);
            }
        }
        "dup" => {
            if let (Some(old), true) = (arg_fd(e.args.first()), e.ret >= 0) {
                copy_fd(state, e.tid, old, e.ret as i32);
            }
        }
        "dup2" | "dup3" => {
            if let (Some(old), true) = (arg_fd(e.args.first()), e.ret >= 0) {
                copy_fd(state, e.tid, old, e.ret as i32);
            }
        }
        "fcntl" | "fcntl64" => {
            let is_dup = e
                .args
                .get(1)
                .map(|a| a.has_flag("F_DUPFD") || a.has_flag("F_DUPFD_CLOEXEC"))
                .unwrap_or(false);
            if is_dup && e.ret >= 0 {
                if let Some(old) = arg_fd(e.args.first()) {
                    copy_fd(state, e.tid, old, e.ret as i32);
                }
            }
        }
        "close" => {
            if let Some(fd) = arg_fd(e.args.first()) {
                state.procs.get_mut(&e.tid).unwrap().fds.remove(&fd);
            }
        }
        "clone" | "clone3" | "fork" | "vfork" => {
            if e.ret > 0 {
                let child = e.ret as Tid;
                let mut ps = state.procs[&e.tid].clone();
                ps.parent = Some(e.tid);
                state.procs.insert(child, ps);
            }
        }
        name if FD_NEUTRAL.contains(&name) => {}
        other => {
            *state.stats.unhandled.entry(other.to_string()).or_default() += 1;
        }
    }
    d
}

/// Calls that only act on open descriptors or process-local state; their
/// resources were charged at descriptor creation.
const FD_NEUTRAL: &[&str] = &[
    "read", "write", "pread64", "pwrite64", "readv", "writev", "preadv", "pwritev", "lseek",
    "_llseek", "mmap", "mmap2", "munmap", "mremap", "msync", "madvise", "mprotect", "fstat",
    "fstat64", "fstatfs", "fchmod", "fchown", "ftruncate", "fallocate", "fsync", "fdatasync",
    "flock", "fadvise64", "readahead", "getdents", "getdents64", "ioctl", "epoll_ctl",
    "epoll_wait", "epoll_pwait", "poll", "ppoll", "select", "pselect6", "sendmsg", "recvmsg",
    "sendmmsg", "recvmmsg", "send", "recv", "shutdown", "listen", "getsockname", "getpeername",
    "getsockopt", "setsockopt", "sendfile", "splice", "tee", "copy_file_range", "brk",
    "rt_sigaction", "rt_sigprocmask", "rt_sigreturn", "rt_sigsuspend", "sigaltstack", "futex",
    "set_robust_list", "set_tid_address", "rseq", "prlimit64", "getrlimit", "setrlimit", "umask",
    "getpid", "gettid", "getppid", "getuid", "geteuid", "getgid", "getegid", "getgroups",
    "setpgid", "getpgrp", "getpgid", "setsid", "getsid", "uname", "sysinfo", "getrandom",
    "clock_gettime", "clock_getres", "gettimeofday", "time", "times", "nanosleep",
    "clock_nanosleep", "alarm", "pause", "wait4", "waitpid", "waitid", "kill", "tgkill", "tkill",
    "exit", "exit_group", "arch_prctl", "prctl", "seccomp", "sched_getaffinity",
    "sched_setaffinity", "sched_yield", "sched_getparam", "sched_getscheduler", "getcwd",
    "capget", "capset", "personality", "setuid", "setgid", "setgroups", "setresuid", "setresgid",
    "getresuid", "getresgid", "setreuid", "setregid", "getpriority", "setpriority", "setitimer",
    "getitimer", "timer_create", "timer_settime", "timer_delete", "timerfd_settime",
    "timerfd_gettime", "inotify_add_watch", "inotify_rm_watch", "dup_unused",
];

fn arg_fd(a: Option<&Arg>) -> Option<i32> {
    match a {
        Some(Arg::Fd { fd, .. }) => Some(*fd),
        Some(Arg::Int(v)) => i32::try_from(*v).ok(),
        _ => None,
    }
}

fn set_fd(state: &mut SystemState, tid: Tid, fd: i32, obj: FdObject) {
    state.procs.get_mut(&tid).unwrap().fds.insert(fd, obj);
}

fn copy_fd(state: &mut SystemState, tid: Tid, old: i32, new: i32) {
    let obj = state.procs[&tid]
        .fds
        .get(&old)
        .cloned()
        .unwrap_or(FdObject::Anonymous);
    set_fd(state, tid, new, obj);
}

fn resolve_plain(state: &mut SystemState, e: &SyscallEvent, idx: usize) -> Option<AbsPath> {
    let bytes = e.args.get(idx)?.as_bytes()?;
    if bytes.is_empty() {
        return None;
    }
    match state.resolve_path(e.tid, PathArg::Plain(bytes)) {
        Ok(p) => Some(p),
        Err(_) => {
            state.stats.unresolvable_dirfd += 1;
            log::warn!("{}: cannot resolve path argument; event skipped", e.name);
            None
        }
    }
}

fn resolve_at(
    state: &mut SystemState,
    e: &SyscallEvent,
    dirfd_idx: usize,
    path_idx: usize,
) -> Option<AbsPath> {
    let dirfd = e.args.get(dirfd_idx)?;
    let bytes = e.args.get(path_idx)?.as_bytes()?;
    if bytes.is_empty() {
        // AT_EMPTY_PATH: operates on the dirfd itself
        return None;
    }
    match state.resolve_path(e.tid, PathArg::AtDir(dirfd, bytes)) {
        Ok(p) => Some(p),
        Err(_) => {
            state.stats.unresolvable_dirfd += 1;
            log::warn!(
                "{}: dirfd has no annotation and is not tracked; event skipped",
                e.name
            );
            None
        }
    }
}

fn handle_open(state: &mut SystemState, e: &SyscallEvent, at: Option<usize>, d: &mut EffectDelta) {
    let (path, flags_idx) = match at {
        Some(_) => (resolve_at(state, e, 0, 1), 2),
        None => (resolve_plain(state, e, 0), 1),
    };
    let Some(p) = path else { return };
    let flags = e.args.get(flags_idx);
    let creat = e.name == "creat"
        || flags.map(|f| f.has_flag("O_CREAT")).unwrap_or(false)
        || flags.map(|f| f.has_flag("O_TMPFILE")).unwrap_or(false);
    let trunc = e.name == "creat" || flags.map(|f| f.has_flag("O_TRUNC")).unwrap_or(false);
    let append = flags.map(|f| f.has_flag("O_APPEND")).unwrap_or(false);
    let is_fifo = state.fifos.contains(&p);
    let r = state.fs_resource(p.clone());
    if creat {
        state.mark_created(&p);
        d.write(r.clone());
    } else {
        // success requires existence
        d.read(r.clone());
        if trunc || append || is_fifo {
            d.write(r.clone());
        }
    }
    if e.ret >= 0 {
        let tracked = match &e.ret_path {
            Some(ann) => AbsPath::new(ann.as_bytes()).unwrap_or(p),
            None => p,
        };
        set_fd(state, e.tid, e.ret as i32, FdObject::Path(tracked));
    }
}

fn handle_mknod(state: &mut SystemState, e: &SyscallEvent, d: &mut EffectDelta) {
    let (path, mode_idx) = if e.name == "mknodat" {
        (resolve_at(state, e, 0, 1), 2)
    } else {
        (resolve_plain(state, e, 0), 1)
    };
    let Some(p) = path else { return };
    if e.args.get(mode_idx).map(|a| a.has_flag("S_IFIFO")).unwrap_or(false) {
        state.fifos.insert(p.clone());
    }
    if e.args.get(mode_idx).map(|a| a.has_flag("S_IFSOCK")).unwrap_or(false) {
        state.local_socks.insert(p.clone());
    }
    state.mark_created(&p);
    d.write(state.fs_resource(p));
}

fn handle_rename(
    state: &mut SystemState,
    e: &SyscallEvent,
    src_idx: usize,
    dst_idx: usize,
    d: &mut EffectDelta,
) {
    let src = resolve_plain(state, e, src_idx);
    let dst = resolve_plain(state, e, dst_idx);
    finish_rename(state, src, dst, d);
}

fn handle_rename_at(state: &mut SystemState, e: &SyscallEvent, d: &mut EffectDelta) {
    let src = resolve_at(state, e, 0, 1);
    let dst = resolve_at(state, e, 2, 3);
    finish_rename(state, src, dst, d);
}

fn finish_rename(
    state: &mut SystemState,
    src: Option<AbsPath>,
    dst: Option<AbsPath>,
    d: &mut EffectDelta,
) {
    if let Some(src) = &src {
        // the source must exist and is removed
        d.read(state.fs_resource(src.clone()));
        d.write(state.fs_resource(src.clone()));
        state.mark_deleted(src);
    }
    if let Some(dst) = &dst {
        if let Some(src) = &src {
            if state.fifos.remove(src) {
                state.fifos.insert(dst.clone());
            }
            if state.local_socks.remove(src) {
                state.local_socks.insert(dst.clone());
            }
        }
        state.mark_created(dst);
        d.write(state.fs_resource(dst.clone()));
    }
}

fn handle_socket(state: &mut SystemState, e: &SyscallEvent) {
    if e.ret < 0 {
        return;
    }
    let family = match e.args.first() {
        Some(a) if a.has_flag("AF_UNIX") || a.has_flag("AF_LOCAL") => SockFamily::Unix,
        Some(a) if a.has_flag("AF_INET") || a.has_flag("AF_INET6") => SockFamily::Inet,
        _ => SockFamily::Other,
    };
    let proto = match e.args.get(1) {
        Some(a) if a.has_flag("SOCK_DGRAM") => Proto::Udp,
        _ => Proto::Tcp,
    };
    set_fd(state, e.tid, e.ret as i32, FdObject::Socket { family, proto });
}

fn fd_proto(state: &SystemState, tid: Tid, fd: Option<i32>, fallback: Proto) -> Proto {
    fd.and_then(|fd| state.procs.get(&tid).and_then(|p| p.fds.get(&fd)))
        .and_then(|obj| match obj {
            FdObject::Socket { proto, .. } => Some(*proto),
            _ => None,
        })
        .unwrap_or(fallback)
}

fn handle_bind(state: &mut SystemState, e: &SyscallEvent, d: &mut EffectDelta) {
    match e.args.get(1) {
        Some(Arg::Sockaddr(SockAddr::Unix { path, abstract_ns })) => {
            // abstract addresses create no filesystem node
            if *abstract_ns || path.is_empty() {
                return;
            }
            let Ok(p) = state.resolve_path(e.tid, PathArg::Plain(path)) else {
                return;
            };
            if let Some(parent) = p.parent() {
                d.read(Resource::File(parent));
            }
            state.local_socks.insert(p.clone());
            state.mark_created(&p);
            d.write(Resource::LocalSocket(p));
        }
        Some(Arg::Sockaddr(SockAddr::Inet { host, port })) => {
            let proto = fd_proto(state, e.tid, arg_fd(e.args.first()), Proto::Tcp);
            d.write(Resource::NetSocket(NetAddr {
                proto,
                host: host.clone(),
                port: *port,
            }));
        }
        _ => {}
    }
}

/// connect / accept / sendto / recvfrom: the named socket address is
/// considered written by the participating process.
fn handle_sockaddr_write(
    state: &mut SystemState,
    e: &SyscallEvent,
    addr_idx: usize,
    d: &mut EffectDelta,
) {
    match e.args.get(addr_idx) {
        Some(Arg::Sockaddr(SockAddr::Unix { path, abstract_ns })) => {
            if *abstract_ns || path.is_empty() {
                return;
            }
            let Ok(p) = state.resolve_path(e.tid, PathArg::Plain(path)) else {
                return;
            };
            state.local_socks.insert(p.clone());
            d.write(Resource::LocalSocket(p));
        }
        Some(Arg::Sockaddr(SockAddr::Inet { host, port })) => {
            let default = if matches!(e.name.as_str(), "sendto" | "recvfrom") {
                Proto::Udp
            } else {
                Proto::Tcp
            };
            let proto = fd_proto(state, e.tid, arg_fd(e.args.first()), default);
            d.write(Resource::NetSocket(NetAddr {
                proto,
                host: host.clone(),
                port: *port,
            }));
        }
        _ => {}
    }
}

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------

/// Fold one log from a fresh copy of the initial state; returns the union
/// of per-event deltas and the final state.
pub fn fold_log(log: &Log, g0: &SystemState) -> (EffectDelta, SystemState) {
    let mut state = g0.clone();
    let mut total = EffectDelta::default();
    for e in &log.events {
        total.absorb(apply_event(&mut state, e));
    }
    (total, state)
}

/// Read/write sets of one log.
pub fn log_effects(log: &Log, g0: &SystemState) -> EffectDelta {
    fold_log(log, g0).0
}

/// Read/write sets of an execution log: union over member logs, each
/// folded from the same initial state.
pub fn execution_log_effects(el: &ExecutionLog, g0: &SystemState) -> EffectDelta {
    let mut total = EffectDelta::default();
    for log in &el.logs {
        total.absorb(log_effects(log, g0));
    }
    total
}
