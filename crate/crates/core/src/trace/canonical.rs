//! The tool's own structured trace format.
//!
//! A file is a versioned JSON header line followed by one JSON event per
//! line, so collectors other than strace can feed the analyzer without
//! reproducing strace's text quirks:
//!
//! ```text
//! {"format":"cleave-trace","version":1}
//! {"tid":100,"name":"open","args":[{"bytes":"/etc/hosts"},{"flags":"O_RDONLY"}],"ret":3}
//! ```
//!
//! Byte strings serialize as JSON strings when valid UTF-8 and as
//! `{"b64":...}` otherwise, so a write/read cycle reproduces the exact
//! event stream.

use std::io::Write;

use crate::trace::{Log, SyscallEvent};

pub const FORMAT_NAME: &str = "cleave-trace";
pub const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub(crate) fn check_header(line: &[u8]) -> Result<(), String> {
    let h: Header =
        serde_json::from_slice(line).map_err(|e| format!("bad canonical header: {e}"))?;
    if h.format != FORMAT_NAME {
        return Err(format!("unexpected format {:?}", h.format));
    }
    if h.version != FORMAT_VERSION {
        return Err(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            h.version
        ));
    }
    Ok(())
}

pub(crate) fn parse_event_line(line: &[u8]) -> Result<SyscallEvent, String> {
    serde_json::from_slice(line).map_err(|e| e.to_string())
}

/// Write one log in canonical form.
pub fn write_log<W: Write>(log: &Log, mut out: W) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for ev in &log.events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
