//! The stub client installed at a remote executable's path.
//!
//! Invoked exactly as the real program would be, the stub gathers its own
//! argv, environment, cwd, umask, ids, and inherited descriptors, ships
//! them to the server in the container that actually holds the program,
//! then stays on the wire: signals delivered to the stub are forwarded to
//! the remote process, and the stub's own termination mirrors the remote
//! one (same exit code, or re-raising the fatal signal).
//!
//! Inherited descriptors are discovered from `/proc/self/fd`, filtering
//! out descriptors the stub opened itself: the directory scan happens
//! before the server connection exists, and the scan descriptor is gone
//! by the time the survivors are validated with `fcntl`.
//!
//! Configuration: the target executable defaults to `/proc/self/exe`
//! (the stub sits at the real program's path) and the server socket comes
//! from the stub map file (`CLEAVE_RPE_STUBMAP`, default
//! `/etc/cleave/stubmap`, lines of `<exe-path>\t<socket-path>`). The
//! `CLEAVE_RPE_TARGET` and `CLEAVE_RPE_SOCKET` variables override both,
//! which test rigs rely on.

use std::io::{self, Read};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::io::{AsRawFd, RawFd};
use std::os::unix::net::UnixStream;
use std::path::PathBuf;

use crate::fdpass;
use crate::wire::{self, Frame, RpeRequest};

pub const ENV_TARGET: &str = "CLEAVE_RPE_TARGET";
pub const ENV_SOCKET: &str = "CLEAVE_RPE_SOCKET";
pub const ENV_STUBMAP: &str = "CLEAVE_RPE_STUBMAP";
pub const DEFAULT_STUBMAP: &str = "/etc/cleave/stubmap";

/// Exit codes for stub-side failures, shell-convention shaped: 127 for
/// "cannot reach/find", 126 for "found but cannot execute".
const EXIT_UNREACHABLE: i32 = 127;
const EXIT_NOT_EXECUTABLE: i32 = 126;

pub fn stub_main() -> i32 {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("rpe-stub: {e}");
            EXIT_UNREACHABLE
        }
    }
}

fn run() -> io::Result<i32> {
    // scan inherited fds before opening anything
    let fd_manifest = inherited_fds()?;

    let target = target_exe()?;
    let socket_path = server_socket(&target)?;

    let request = RpeRequest {
        exe: target.as_os_str().as_bytes().to_vec(),
        argv: raw_argv(),
        env: raw_env(),
        cwd: std::env::current_dir()?.as_os_str().as_bytes().to_vec(),
        umask: read_umask(),
        uid: unsafe { libc::getuid() },
        gid: unsafe { libc::getgid() },
        groups: current_groups(),
        fd_manifest: fd_manifest.clone(),
    };

    let stream = UnixStream::connect(&socket_path).map_err(|e| {
        io::Error::new(
            e.kind(),
            format!("server unreachable at {}: {e}", socket_path.display()),
        )
    })?;
    wire::write_frame(&stream, &wire::encode_request(&request))?;
    if !fd_manifest.is_empty() {
        fdpass::send_with_fds(&stream, &[wire::FD_MARKER], &fd_manifest)?;
    }

    relay(stream)
}

/// Forward signals and wait for the terminal status.
fn relay(stream: UnixStream) -> io::Result<i32> {
    let signal_pipe = install_signal_handlers()?;
    let sock_fd = stream.as_raw_fd();

    loop {
        let mut fds = [
            libc::pollfd {
                fd: sock_fd,
                events: libc::POLLIN,
                revents: 0,
            },
            libc::pollfd {
                fd: signal_pipe,
                events: libc::POLLIN,
                revents: 0,
            },
        ];
        let rc = unsafe { libc::poll(fds.as_mut_ptr(), 2, -1) };
        if rc < 0 {
            if io::Error::last_os_error().raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            return Err(io::Error::last_os_error());
        }
        if fds[1].revents & libc::POLLIN != 0 {
            let mut buf = [0u8; 4];
            let n = unsafe {
                libc::read(signal_pipe, buf.as_mut_ptr() as *mut libc::c_void, 4)
            };
            if n == 4 {
                let signo = i32::from_le_bytes(buf);
                wire::write_frame(&stream, &wire::encode_frame(&Frame::Signal(signo)))?;
            }
        }
        if fds[0].revents & (libc::POLLIN | libc::POLLHUP) != 0 {
            match wire::read_frame(&stream)? {
                Some(payload) => match wire::decode_frame(&payload) {
                    Ok(Frame::Started(_)) => {}
                    Ok(Frame::Exited(code)) => return Ok(code & 0xff),
                    Ok(Frame::Signaled(signo)) => {
                        // die the same way the remote process did
                        unsafe {
                            libc::signal(signo, libc::SIG_DFL);
                            libc::raise(signo);
                        }
                        return Ok(128 + signo);
                    }
                    Ok(Frame::ExecFailed(sym)) => {
                        eprintln!("rpe-stub: remote exec failed: {sym}");
                        return Ok(if sym == "ENOENT" {
                            EXIT_UNREACHABLE
                        } else {
                            EXIT_NOT_EXECUTABLE
                        });
                    }
                    Ok(other) => {
                        eprintln!("rpe-stub: unexpected frame {other:?}");
                    }
                    Err(e) => {
                        eprintln!("rpe-stub: protocol error: {e}");
                        return Ok(EXIT_UNREACHABLE);
                    }
                },
                None => {
                    eprintln!("rpe-stub: server closed the session early");
                    return Ok(EXIT_UNREACHABLE);
                }
            }
        }
    }
}

/// Descriptors inherited from the caller: every entry of /proc/self/fd
/// that still answers `fcntl` after the scan descriptor is gone.
fn inherited_fds() -> io::Result<Vec<RawFd>> {
    let mut candidates: Vec<RawFd> = Vec::new();
    for entry in std::fs::read_dir("/proc/self/fd")? {
        let entry = entry?;
        if let Ok(fd) = entry.file_name().to_string_lossy().parse::<RawFd>() {
            candidates.push(fd);
        }
    }
    // the read_dir descriptor is closed now; it fails the liveness check
    let mut fds: Vec<RawFd> = candidates
        .into_iter()
        .filter(|&fd| unsafe { libc::fcntl(fd, libc::F_GETFD) } >= 0)
        .collect();
    fds.sort_unstable();
    Ok(fds)
}

fn target_exe() -> io::Result<PathBuf> {
    if let Some(t) = std::env::var_os(ENV_TARGET) {
        return Ok(PathBuf::from(t));
    }
    std::fs::read_link("/proc/self/exe")
}

fn server_socket(target: &std::path::Path) -> io::Result<PathBuf> {
    if let Some(s) = std::env::var_os(ENV_SOCKET) {
        return Ok(PathBuf::from(s));
    }
    let map_path = std::env::var_os(ENV_STUBMAP)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STUBMAP));
    let mut content = Vec::new();
    std::fs::File::open(&map_path)
        .map_err(|e| {
            io::Error::new(
                e.kind(),
                format!("no stub map at {} and no {ENV_SOCKET} set", map_path.display()),
            )
        })?
        .read_to_end(&mut content)?;
    let want = target.as_os_str().as_bytes();
    for line in content.split(|&b| b == b'\n') {
        let mut parts = line.splitn(2, |&b| b == b'\t');
        let (Some(exe), Some(sock)) = (parts.next(), parts.next()) else {
            continue;
        };
        if exe == want {
            return Ok(PathBuf::from(std::ffi::OsStr::from_bytes(sock)));
        }
    }
    Err(io::Error::new(
        io::ErrorKind::NotFound,
        format!(
            "{} has no socket entry for {}",
            map_path.display(),
            target.display()
        ),
    ))
}

/// argv exactly as invoked, argv[0] included, raw bytes.
fn raw_argv() -> Vec<Vec<u8>> {
    std::env::args_os()
        .map(|a| a.as_os_str().as_bytes().to_vec())
        .collect()
}

/// Environment entries verbatim and in order, from the libc environ block.
fn raw_env() -> Vec<Vec<u8>> {
    extern "C" {
        static environ: *const *const libc::c_char;
    }
    let mut out = Vec::new();
    unsafe {
        let mut p = environ;
        while !p.is_null() && !(*p).is_null() {
            out.push(std::ffi::CStr::from_ptr(*p).to_bytes().to_vec());
            p = p.add(1);
        }
    }
    out
}

/// The only portable way to read the umask is to set and restore it; the
/// stub is single-threaded here.
fn read_umask() -> u32 {
    unsafe {
        let old = libc::umask(0);
        libc::umask(old);
        old as u32
    }
}

fn current_groups() -> Vec<u32> {
    let n = unsafe { libc::getgroups(0, std::ptr::null_mut()) };
    if n <= 0 {
        return Vec::new();
    }
    let mut groups = vec![0 as libc::gid_t; n as usize];
    let n = unsafe { libc::getgroups(n, groups.as_mut_ptr()) };
    if n < 0 {
        return Vec::new();
    }
    groups.truncate(n as usize);
    groups.into_iter().map(|g| g as u32).collect()
}

static mut SIGNAL_PIPE_W: RawFd = -1;

extern "C" fn forward_signal(signo: libc::c_int) {
    let bytes = (signo as i32).to_le_bytes();
    unsafe {
        let fd = SIGNAL_PIPE_W;
        if fd >= 0 {
            libc::write(fd, bytes.as_ptr() as *const libc::c_void, 4);
        }
    }
}

/// Catchable signals are written into a self-pipe by the handler and
/// forwarded from the main loop.
fn install_signal_handlers() -> io::Result<RawFd> {
    let mut pipefd = [0i32; 2];
    if unsafe { libc::pipe2(pipefd.as_mut_ptr(), libc::O_CLOEXEC | libc::O_NONBLOCK) } != 0 {
        return Err(io::Error::last_os_error());
    }
    unsafe {
        SIGNAL_PIPE_W = pipefd[1];
        for signo in [
            libc::SIGHUP,
            libc::SIGINT,
            libc::SIGQUIT,
            libc::SIGTERM,
            libc::SIGUSR1,
            libc::SIGUSR2,
            libc::SIGALRM,
        ] {
            let mut action: libc::sigaction = std::mem::zeroed();
            action.sa_sigaction = forward_signal as *const () as usize;
            libc::sigemptyset(&mut action.sa_mask);
            action.sa_flags = libc::SA_RESTART;
            libc::sigaction(signo, &action, std::ptr::null_mut());
        }
    }
    Ok(pipefd[0])
}
