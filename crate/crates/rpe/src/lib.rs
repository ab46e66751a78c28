//! Remote process execution (RPE).
//!
//! Glue for partitioned containers: a process in one container executes a
//! program that lives in another, transparently. A stub installed at the
//! program's original path marshalls argv, environment, and process
//! attributes, ships open file descriptors through the kernel, and relays
//! signals and the exit status; a server in the owning container restores
//! the attributes and executes the real program. Both sides need a shared
//! kernel (descriptor passing is what makes transparency possible), so
//! this crate is Linux-only; the analysis crates are portable.

#[cfg(not(target_os = "linux"))]
compile_error!("remote process execution requires Linux fd passing");

pub mod fdpass;
pub mod server;
pub mod stub;
pub mod wire;

/// Symbolic name for an errno value, e.g. `ENOENT`.
pub fn errno_symbol(errno: i32) -> String {
    let sym = match errno {
        libc::EPERM => "EPERM",
        libc::ENOENT => "ENOENT",
        libc::ESRCH => "ESRCH",
        libc::EINTR => "EINTR",
        libc::EIO => "EIO",
        libc::E2BIG => "E2BIG",
        libc::ENOEXEC => "ENOEXEC",
        libc::EBADF => "EBADF",
        libc::ECHILD => "ECHILD",
        libc::EAGAIN => "EAGAIN",
        libc::ENOMEM => "ENOMEM",
        libc::EACCES => "EACCES",
        libc::EFAULT => "EFAULT",
        libc::EBUSY => "EBUSY",
        libc::EEXIST => "EEXIST",
        libc::ENOTDIR => "ENOTDIR",
        libc::EISDIR => "EISDIR",
        libc::EINVAL => "EINVAL",
        libc::ENFILE => "ENFILE",
        libc::EMFILE => "EMFILE",
        libc::ETXTBSY => "ETXTBSY",
        libc::ENOSPC => "ENOSPC",
        libc::EROFS => "EROFS",
        libc::EMLINK => "EMLINK",
        libc::EPIPE => "EPIPE",
        libc::ENAMETOOLONG => "ENAMETOOLONG",
        libc::ELOOP => "ELOOP",
        _ => return format!("E?{errno}"),
    };
    sym.to_string()
}
