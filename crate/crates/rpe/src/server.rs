//! The remote-process-execution server.
//!
//! One server runs inside each container that hosts remotely-executed
//! programs. Per accepted session it receives the request and the shipped
//! descriptors, forks, restores the caller's process attributes in the
//! child (descriptor numbers, cwd, umask, group ids then user id last),
//! executes the target, then relays signals from the stub to the child
//! and ships the child's exit status back.
//!
//! Descriptor renumbering: a shipped fd that was `2` at the caller may
//! arrive as, say, `4`. The child first parks every received fd in a high
//! staging range, closes the inherited stdio, then `dup2`s each staged fd
//! onto its original number and closes the staging copy, so a program
//! expecting an inherited fd 2 finds it at fd 2. Everything the server
//! itself holds open is close-on-exec and vanishes at execve.
//!
//! Setting ids requires privilege; run the server as root inside its
//! container. Without privilege, requests for the server's own ids still
//! work (the set calls are skipped), which keeps unprivileged test rigs
//! usable. Nice values and resource limits are not replicated.

use std::ffi::CString;
use std::io::{self};
use std::os::unix::io::RawFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::errno_symbol;
use crate::fdpass;
use crate::wire::{self, Frame, RpeRequest};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub socket_path: PathBuf,
}

/// Bind the listener socket, replacing a stale socket file.
pub fn bind(config: &ServerConfig) -> io::Result<UnixListener> {
    if config.socket_path.exists() {
        std::fs::remove_file(&config.socket_path)?;
    }
    if let Some(parent) = config.socket_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    UnixListener::bind(&config.socket_path)
}

/// Accept sessions forever (or until `stop` flips), one thread each.
pub fn server_loop(listener: UnixListener, stop: Option<Arc<AtomicBool>>) -> io::Result<()> {
    // reap through waitpid in session threads; nothing global needed
    for conn in listener.incoming() {
        if let Some(stop) = &stop {
            if stop.load(Ordering::Relaxed) {
                return Ok(());
            }
        }
        match conn {
            Ok(stream) => {
                std::thread::spawn(move || {
                    if let Err(e) = run_session(stream) {
                        log::warn!("session error: {e}");
                    }
                });
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
    Ok(())
}

/// Convenience wrapper: bind and serve.
pub fn serve(config: &ServerConfig) -> io::Result<()> {
    let listener = bind(config)?;
    server_loop(listener, None)
}

fn run_session(stream: UnixStream) -> io::Result<()> {
    let Some(payload) = wire::read_frame(&stream)? else {
        return Ok(()); // connected and went away
    };
    let request = match wire::decode_request(&payload) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("malformed request, dropping session: {e}");
            return Ok(());
        }
    };

    let mut shipped: Vec<RawFd> = Vec::new();
    if !request.fd_manifest.is_empty() {
        let (marker, fds) = fdpass::recv_with_fds(&stream, request.fd_manifest.len())?;
        if marker != wire::FD_MARKER || fds.len() != request.fd_manifest.len() {
            log::warn!(
                "fd payload mismatch (marker {marker:#x}, got {} of {}); dropping session",
                fds.len(),
                request.fd_manifest.len()
            );
            for fd in fds {
                unsafe { libc::close(fd) };
            }
            return Ok(());
        }
        shipped = fds;
    }

    let outcome = spawn_child(&request, &shipped);
    for fd in &shipped {
        unsafe { libc::close(*fd) };
    }
    let child = match outcome {
        Ok(pid) => pid,
        Err(errno) => {
            let frame = wire::encode_frame(&Frame::ExecFailed(errno_symbol(errno)));
            wire::write_frame(&stream, &frame)?;
            return Ok(());
        }
    };
    wire::write_frame(&stream, &wire::encode_frame(&Frame::Started(child as u32)))?;

    // forward signal frames while the child runs; SIGKILL it if the stub
    // vanishes (transparency: killing the stub kills the remote process)
    let child_done = Arc::new(AtomicBool::new(false));
    let reader = stream.try_clone()?;
    let done_flag = child_done.clone();
    let forwarder = std::thread::spawn(move || loop {
        match wire::read_frame(&reader) {
            Ok(Some(payload)) => match wire::decode_frame(&payload) {
                Ok(Frame::Signal(signo)) => unsafe {
                    libc::kill(child, signo);
                },
                Ok(other) => log::warn!("unexpected frame from stub: {other:?}"),
                Err(e) => log::warn!("bad frame from stub: {e}"),
            },
            Ok(None) | Err(_) => {
                if !done_flag.load(Ordering::Relaxed) {
                    unsafe { libc::kill(child, libc::SIGKILL) };
                }
                return;
            }
        }
    });

    let status = wait_child(child);
    child_done.store(true, Ordering::Relaxed);
    let frame = match status {
        ChildStatus::Exited(code) => Frame::Exited(code),
        ChildStatus::Signaled(signo) => Frame::Signaled(signo),
    };
    wire::write_frame(&stream, &wire::encode_frame(&frame))?;
    drop(stream); // unblocks the forwarder
    let _ = forwarder.join();
    Ok(())
}

enum ChildStatus {
    Exited(i32),
    Signaled(i32),
}

fn wait_child(pid: libc::pid_t) -> ChildStatus {
    let mut status: libc::c_int = 0;
    loop {
        let rc = unsafe { libc::waitpid(pid, &mut status, 0) };
        if rc == pid {
            break;
        }
        if rc < 0 && io::Error::last_os_error().raw_os_error() != Some(libc::EINTR) {
            return ChildStatus::Exited(125);
        }
    }
    if libc::WIFEXITED(status) {
        ChildStatus::Exited(libc::WEXITSTATUS(status))
    } else if libc::WIFSIGNALED(status) {
        ChildStatus::Signaled(libc::WTERMSIG(status))
    } else {
        ChildStatus::Exited(125)
    }
}

/// Fork and exec the target with the caller's attributes replicated.
/// Returns the child pid, or the errno that stopped the setup/exec.
fn spawn_child(request: &RpeRequest, shipped: &[RawFd]) -> Result<libc::pid_t, i32> {
    // everything allocated before fork: only async-signal-safe calls after
    let exe = CString::new(request.exe.clone()).map_err(|_| libc::EINVAL)?;
    let argv: Vec<CString> = request
        .argv
        .iter()
        .map(|a| CString::new(a.clone()))
        .collect::<Result<_, _>>()
        .map_err(|_| libc::EINVAL)?;
    let env: Vec<CString> = request
        .env
        .iter()
        .map(|e| CString::new(e.clone()))
        .collect::<Result<_, _>>()
        .map_err(|_| libc::EINVAL)?;
    let cwd = CString::new(request.cwd.clone()).map_err(|_| libc::EINVAL)?;

    let mut argv_ptrs: Vec<*const libc::c_char> = argv.iter().map(|a| a.as_ptr()).collect();
    argv_ptrs.push(std::ptr::null());
    let mut env_ptrs: Vec<*const libc::c_char> = env.iter().map(|e| e.as_ptr()).collect();
    env_ptrs.push(std::ptr::null());

    // staging base clear of every target, received fd, and stdio
    let max_seen = request
        .fd_manifest
        .iter()
        .copied()
        .chain(shipped.iter().copied())
        .chain([2])
        .max()
        .unwrap_or(2);
    let staging_base = max_seen + 16;

    let need_ids = unsafe {
        libc::getuid() != request.uid
            || libc::getgid() != request.gid
            || request.groups != current_groups()
    };

    // CLOEXEC pipe reports exec/setup failure; empty read means success
    let mut pipefd = [0i32; 2];
    if unsafe { libc::pipe2(pipefd.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
        return Err(io::Error::last_os_error().raw_os_error().unwrap_or(libc::EIO));
    }
    let (status_r, status_w) = (pipefd[0], pipefd[1]);

    let pid = unsafe { libc::fork() };
    if pid < 0 {
        unsafe {
            libc::close(status_r);
            libc::close(status_w);
        }
        return Err(io::Error::last_os_error().raw_os_error().unwrap_or(libc::EIO));
    }

    if pid == 0 {
        // child: async-signal-safe territory
        unsafe {
            libc::close(status_r);
            // the status pipe itself must dodge the renumbering targets
            let safe_status = staging_base + shipped.len() as i32;
            if libc::dup2(status_w, safe_status) < 0 {
                libc::_exit(127);
            }
            libc::close(status_w);
            let status_w = safe_status;
            set_cloexec(status_w);
            // park shipped fds above everything they could collide with
            for (i, &fd) in shipped.iter().enumerate() {
                if libc::dup2(fd, staging_base + i as i32) < 0 {
                    child_fail(status_w, errno());
                }
                libc::close(fd);
            }
            // the caller's table is authoritative: drop inherited stdio
            libc::close(0);
            libc::close(1);
            libc::close(2);
            for (i, &target) in request.fd_manifest.iter().enumerate() {
                if libc::dup2(staging_base + i as i32, target) < 0 {
                    child_fail(status_w, errno());
                }
                libc::close(staging_base + i as i32);
            }
            if libc::chdir(cwd.as_ptr()) != 0 {
                child_fail(status_w, errno());
            }
            libc::umask(request.umask as libc::mode_t);
            if need_ids {
                if libc::setgroups(
                    request.groups.len(),
                    request.groups.as_ptr() as *const libc::gid_t,
                ) != 0
                {
                    child_fail(status_w, errno());
                }
                if libc::setgid(request.gid) != 0 {
                    child_fail(status_w, errno());
                }
                // uid last: dropping it first would forfeit the right to
                // change the rest
                if libc::setuid(request.uid) != 0 {
                    child_fail(status_w, errno());
                }
            }
            libc::execve(exe.as_ptr(), argv_ptrs.as_ptr(), env_ptrs.as_ptr());
            child_fail(status_w, errno());
        }
    }

    // parent
    unsafe { libc::close(status_w) };
    let mut buf = [0u8; 4];
    let mut got = 0usize;
    loop {
        let rc = unsafe {
            libc::read(
                status_r,
                buf[got..].as_mut_ptr() as *mut libc::c_void,
                4 - got,
            )
        };
        match rc {
            0 => break,
            n if n > 0 => {
                got += n as usize;
                if got == 4 {
                    break;
                }
            }
            _ if io::Error::last_os_error().raw_os_error() == Some(libc::EINTR) => continue,
            _ => break,
        }
    }
    unsafe { libc::close(status_r) };
    if got == 4 {
        // setup or exec failed; reap the child
        let errno = i32::from_le_bytes(buf);
        let mut status = 0;
        unsafe { libc::waitpid(pid, &mut status, 0) };
        return Err(errno);
    }
    Ok(pid)
}

unsafe fn child_fail(status_w: RawFd, errno: i32) -> ! {
    let bytes = errno.to_le_bytes();
    libc::write(status_w, bytes.as_ptr() as *const libc::c_void, 4);
    libc::_exit(127);
}

fn errno() -> i32 {
    unsafe { *libc::__errno_location() }
}

/// dup2 clears close-on-exec; restore it where required.
unsafe fn set_cloexec(fd: RawFd) {
    let flags = libc::fcntl(fd, libc::F_GETFD);
    libc::fcntl(fd, libc::F_SETFD, flags | libc::FD_CLOEXEC);
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

/// Spawn the server on `socket_path` in a background thread; used by the
/// CLI subcommand and by tests.
pub fn spawn_server(socket_path: &Path) -> io::Result<std::thread::JoinHandle<()>> {
    let config = ServerConfig {
        socket_path: socket_path.to_path_buf(),
    };
    let listener = bind(&config)?;
    Ok(std::thread::spawn(move || {
        if let Err(e) = server_loop(listener, None) {
            log::error!("server loop ended: {e}");
        }
    }))
}
