//! Framed binary protocol between the stub and the server.
//!
//! Every frame on the stream is a little-endian `u32` payload length
//! followed by the payload. The first frame of a session is the execution
//! request and starts with the magic `CRPE` plus a `u16` protocol version;
//! stub and server ship in different containers and may skew, so the
//! version check is explicit. Subsequent frames are single-purpose and
//! multiplex on a one-byte kind tag:
//!
//! ```text
//! request  (stub -> server): magic, version, 0x01, exe, argv, env, cwd,
//!                            umask, uid, gid, groups, fd manifest
//! signal   (stub -> server): 0x02, signo
//! started  (server -> stub): 0x10, pid
//! exited   (server -> stub): 0x11, code
//! signaled (server -> stub): 0x12, signo
//! exec err (server -> stub): 0x13, errno symbol
//! ```
//!
//! Byte strings are length-counted (`u32` length + bytes), never
//! NUL-terminated, so argv and environment entries survive arbitrary
//! bytes. File descriptors travel out of band as `SCM_RIGHTS` ancillary
//! data on a one-byte `0xFD` marker message, in fd-manifest order.

pub const MAGIC: [u8; 4] = *b"CRPE";
pub const VERSION: u16 = 1;

/// Hard ceiling on frame payloads; anything larger is a protocol error.
pub const MAX_FRAME: u32 = 64 << 20;

/// Marker byte accompanying the SCM_RIGHTS ancillary payload.
pub const FD_MARKER: u8 = 0xFD;

const KIND_REQUEST: u8 = 0x01;
const KIND_SIGNAL: u8 = 0x02;
const KIND_STARTED: u8 = 0x10;
const KIND_EXITED: u8 = 0x11;
const KIND_SIGNALED: u8 = 0x12;
const KIND_EXEC_FAILED: u8 = 0x13;

/// Everything the remote side needs to execute on the caller's behalf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpeRequest {
    pub exe: Vec<u8>,
    pub argv: Vec<Vec<u8>>,
    pub env: Vec<Vec<u8>>,
    pub cwd: Vec<u8>,
    pub umask: u32,
    pub uid: u32,
    pub gid: u32,
    pub groups: Vec<u32>,
    /// Original descriptor numbers, in the order the fds are shipped.
    pub fd_manifest: Vec<i32>,
}

/// Session events after the request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Request(RpeRequest),
    Signal(i32),
    Started(u32),
    Exited(i32),
    Signaled(i32),
    ExecFailed(String),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame too short: needed {needed} more bytes")]
    FrameTooShort { needed: usize },
    #[error("frame exceeds limit: {0} bytes")]
    FrameTooLong(u32),
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: peer speaks {got}, this side speaks {}", VERSION)]
    VersionMismatch { got: u16 },
    #[error("unknown frame kind {0:#x}")]
    UnknownKind(u8),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.data.len() {
            return Err(WireError::FrameTooShort {
                needed: self.pos + n - self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, WireError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bstr(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn bstr_list(&mut self) -> Result<Vec<Vec<u8>>, WireError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            out.push(self.bstr()?);
        }
        Ok(out)
    }

    fn done(&self) -> Result<(), WireError> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(WireError::Malformed("trailing bytes"))
        }
    }
}

fn put_bstr(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_bstr_list(out: &mut Vec<u8>, list: &[Vec<u8>]) {
    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for b in list {
        put_bstr(out, b);
    }
}

/// Encode the request payload (the content of the session's first frame).
pub fn encode_request(r: &RpeRequest) -> Vec<u8> {
    let mut out = Vec::with_capacity(256);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(KIND_REQUEST);
    put_bstr(&mut out, &r.exe);
    put_bstr_list(&mut out, &r.argv);
    put_bstr_list(&mut out, &r.env);
    put_bstr(&mut out, &r.cwd);
    out.extend_from_slice(&r.umask.to_le_bytes());
    out.extend_from_slice(&r.uid.to_le_bytes());
    out.extend_from_slice(&r.gid.to_le_bytes());
    out.extend_from_slice(&(r.groups.len() as u32).to_le_bytes());
    for g in &r.groups {
        out.extend_from_slice(&g.to_le_bytes());
    }
    out.extend_from_slice(&(r.fd_manifest.len() as u32).to_le_bytes());
    for fd in &r.fd_manifest {
        out.extend_from_slice(&fd.to_le_bytes());
    }
    out
}

/// Decode a request payload, rejecting foreign magic and versions.
pub fn decode_request(payload: &[u8]) -> Result<RpeRequest, WireError> {
    let mut c = Cursor::new(payload);
    if c.take(4)? != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(WireError::VersionMismatch { got: version });
    }
    if c.u8()? != KIND_REQUEST {
        return Err(WireError::Malformed("first frame must be a request"));
    }
    let exe = c.bstr()?;
    let argv = c.bstr_list()?;
    let env = c.bstr_list()?;
    let cwd = c.bstr()?;
    let umask = c.u32()?;
    let uid = c.u32()?;
    let gid = c.u32()?;
    let group_count = c.u32()? as usize;
    let mut groups = Vec::with_capacity(group_count.min(256));
    for _ in 0..group_count {
        groups.push(c.u32()?);
    }
    let fd_count = c.u32()? as usize;
    let mut fd_manifest = Vec::with_capacity(fd_count.min(1024));
    for _ in 0..fd_count {
        fd_manifest.push(c.i32()?);
    }
    c.done()?;
    Ok(RpeRequest {
        exe,
        argv,
        env,
        cwd,
        umask,
        uid,
        gid,
        groups,
        fd_manifest,
    })
}

/// Encode a session frame payload.
pub fn encode_frame(f: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    match f {
        Frame::Request(r) => return encode_request(r),
        Frame::Signal(s) => {
            out.push(KIND_SIGNAL);
            out.extend_from_slice(&s.to_le_bytes());
        }
        Frame::Started(pid) => {
            out.push(KIND_STARTED);
            out.extend_from_slice(&pid.to_le_bytes());
        }
        Frame::Exited(code) => {
            out.push(KIND_EXITED);
            out.extend_from_slice(&code.to_le_bytes());
        }
        Frame::Signaled(s) => {
            out.push(KIND_SIGNALED);
            out.extend_from_slice(&s.to_le_bytes());
        }
        Frame::ExecFailed(sym) => {
            out.push(KIND_EXEC_FAILED);
            put_bstr(&mut out, sym.as_bytes());
        }
    }
    out
}

/// Decode a session frame payload.
pub fn decode_frame(payload: &[u8]) -> Result<Frame, WireError> {
    let mut c = Cursor::new(payload);
    let kind = c.u8()?;
    let f = match kind {
        KIND_REQUEST => return decode_request(payload).map(Frame::Request),
        KIND_SIGNAL => Frame::Signal(c.i32()?),
        KIND_STARTED => Frame::Started(c.u32()?),
        KIND_EXITED => Frame::Exited(c.i32()?),
        KIND_SIGNALED => Frame::Signaled(c.i32()?),
        KIND_EXEC_FAILED => {
            let sym = c.bstr()?;
            Frame::ExecFailed(String::from_utf8_lossy(&sym).into_owned())
        }
        other => return Err(WireError::UnknownKind(other)),
    };
    c.done()?;
    Ok(f)
}

/// Write one length-prefixed frame.
pub fn write_frame<W: std::io::Write>(mut w: W, payload: &[u8]) -> std::io::Result<()> {
    let len = payload.len() as u32;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Read one length-prefixed frame. `Ok(None)` on clean EOF at a frame
/// boundary.
pub fn read_frame<R: std::io::Read>(mut r: R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len_buf);
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            WireError::FrameTooLong(len).to_string(),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RpeRequest {
        RpeRequest {
            exe: b"/usr/bin/convert".to_vec(),
            argv: vec![b"convert".to_vec(), b"in with space".to_vec()],
            env: vec![b"PATH=/usr/bin".to_vec(), b"X=\xff\xfe".to_vec()],
            cwd: b"/var/www".to_vec(),
            umask: 0o022,
            uid: 33,
            gid: 33,
            groups: vec![33, 100],
            fd_manifest: vec![0, 1, 2, 7],
        }
    }

    #[test]
    fn request_round_trip() {
        let r = sample();
        assert_eq!(decode_request(&encode_request(&r)).unwrap(), r);
    }

    #[test]
    fn empty_env_stays_present() {
        let mut r = sample();
        r.env.clear();
        let back = decode_request(&encode_request(&r)).unwrap();
        assert_eq!(back.env, Vec::<Vec<u8>>::new());
    }

    #[test]
    fn version_and_magic_guards() {
        let mut enc = encode_request(&sample());
        enc[4] = 0xEE; // version low byte
        assert!(matches!(
            decode_request(&enc),
            Err(WireError::VersionMismatch { .. })
        ));
        let mut enc = encode_request(&sample());
        enc[0] = b'X';
        assert_eq!(decode_request(&enc), Err(WireError::BadMagic));
    }

    #[test]
    fn truncation_is_frame_too_short() {
        let enc = encode_request(&sample());
        for cut in [3, 8, enc.len() - 1] {
            assert!(matches!(
                decode_request(&enc[..cut]),
                Err(WireError::FrameTooShort { .. })
            ));
        }
    }

    #[test]
    fn status_frames_round_trip() {
        for f in [
            Frame::Signal(15),
            Frame::Started(4242),
            Frame::Exited(7),
            Frame::Signaled(9),
            Frame::ExecFailed("ENOENT".into()),
        ] {
            assert_eq!(decode_frame(&encode_frame(&f)).unwrap(), f);
        }
    }

    #[test]
    fn stream_framing() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &encode_frame(&Frame::Exited(3))).unwrap();
        write_frame(&mut buf, &encode_frame(&Frame::Signal(2))).unwrap();
        let mut r = &buf[..];
        let f1 = read_frame(&mut r).unwrap().unwrap();
        let f2 = read_frame(&mut r).unwrap().unwrap();
        assert_eq!(decode_frame(&f1).unwrap(), Frame::Exited(3));
        assert_eq!(decode_frame(&f2).unwrap(), Frame::Signal(2));
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}
