//! File descriptor transfer over Unix domain sockets.
//!
//! Descriptors are ints with kernel-side meaning, so they cross process
//! boundaries only through the ancillary-message (`SCM_RIGHTS`) facility
//! of Unix sockets. One sendmsg ships the request's descriptors alongside
//! a one-byte marker; the receiver gets fresh numbers for the same open
//! file descriptions and renumbers them back with dup2.

use std::io;
use std::mem;
use std::os::unix::io::{AsRawFd, RawFd};
use std::os::unix::net::UnixStream;

/// Kernel cap on descriptors per SCM_RIGHTS message.
pub const SCM_MAX_FD: usize = 253;

/// Send `data` plus `fds` as one message with ancillary payload.
pub fn send_with_fds(sock: &UnixStream, data: &[u8], fds: &[RawFd]) -> io::Result<()> {
    assert!(!data.is_empty(), "ancillary data needs at least one byte");
    assert!(fds.len() <= SCM_MAX_FD, "too many fds for one message");

    let mut iov = libc::iovec {
        iov_base: data.as_ptr() as *mut libc::c_void,
        iov_len: data.len(),
    };
    let space = unsafe { libc::CMSG_SPACE((fds.len() * mem::size_of::<RawFd>()) as u32) } as usize;
    let mut cmsg_buf = vec![0u8; space];

    let mut msg: libc::msghdr = unsafe { mem::zeroed() };
    msg.msg_iov = &mut iov;
    msg.msg_iovlen = 1;
    if !fds.is_empty() {
        msg.msg_control = cmsg_buf.as_mut_ptr() as *mut libc::c_void;
        msg.msg_controllen = space;
        unsafe {
            let cmsg = libc::CMSG_FIRSTHDR(&msg);
            (*cmsg).cmsg_level = libc::SOL_SOCKET;
            (*cmsg).cmsg_type = libc::SCM_RIGHTS;
            (*cmsg).cmsg_len =
                libc::CMSG_LEN((fds.len() * mem::size_of::<RawFd>()) as u32) as usize;
            std::ptr::copy_nonoverlapping(
                fds.as_ptr(),
                libc::CMSG_DATA(cmsg) as *mut RawFd,
                fds.len(),
            );
        }
    }

    let rc = unsafe { libc::sendmsg(sock.as_raw_fd(), &msg, libc::MSG_NOSIGNAL) };
    if rc < 0 {
        return Err(io::Error::last_os_error());
    }
    if rc as usize != data.len() {
        return Err(io::Error::new(
            io::ErrorKind::WriteZero,
            "short sendmsg for fd payload",
        ));
    }
    Ok(())
}

/// Receive up to `max_fds` descriptors plus one data byte. Returns the
/// data byte and the received descriptors (owned by the caller).
pub fn recv_with_fds(sock: &UnixStream, max_fds: usize) -> io::Result<(u8, Vec<RawFd>)> {
    let mut byte = 0u8;
    let mut iov = libc::iovec {
        iov_base: &mut byte as *mut u8 as *mut libc::c_void,
        iov_len: 1,
    };
    let space =
        unsafe { libc::CMSG_SPACE((max_fds.max(1) * mem::size_of::<RawFd>()) as u32) } as usize;
    let mut cmsg_buf = vec![0u8; space];

    let mut msg: libc::msghdr = unsafe { mem::zeroed() };
    msg.msg_iov = &mut iov;
    msg.msg_iovlen = 1;
    msg.msg_control = cmsg_buf.as_mut_ptr() as *mut libc::c_void;
    msg.msg_controllen = space;

    let rc = unsafe { libc::recvmsg(sock.as_raw_fd(), &mut msg, libc::MSG_CMSG_CLOEXEC) };
    if rc < 0 {
        return Err(io::Error::last_os_error());
    }
    if rc == 0 {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "peer closed before fd payload",
        ));
    }

    let mut fds = Vec::new();
    unsafe {
        let mut cmsg = libc::CMSG_FIRSTHDR(&msg);
        while !cmsg.is_null() {
            if (*cmsg).cmsg_level == libc::SOL_SOCKET && (*cmsg).cmsg_type == libc::SCM_RIGHTS {
                let payload = (*cmsg).cmsg_len - libc::CMSG_LEN(0) as usize;
                let count = payload / mem::size_of::<RawFd>();
                let data = libc::CMSG_DATA(cmsg) as *const RawFd;
                for i in 0..count {
                    fds.push(*data.add(i));
                }
            }
            cmsg = libc::CMSG_NXTHDR(&msg, cmsg);
        }
    }
    if (msg.msg_flags & libc::MSG_CTRUNC) != 0 {
        for fd in &fds {
            unsafe { libc::close(*fd) };
        }
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "ancillary data truncated; fd payload dropped",
        ));
    }
    Ok((byte, fds))
}
