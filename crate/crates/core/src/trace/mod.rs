//! Parsing and normalization of system-call logs.
//!
//! Two input formats are supported: strace text (see [`strace`] for the
//! accepted subset) and the tool's own line-delimited structured format
//! (see [`canonical`]). Either way the result is an [`ExecutionLog`]: a set
//! of per-run, ordered [`SyscallEvent`] sequences with all strace
//! `<unfinished ...>` / `<... resumed>` halves merged back into single
//! events.

pub mod canonical;
pub mod strace;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bytes::ByteStr;

/// Thread id as it appears in the trace.
pub type Tid = i32;

/// One parsed system-call record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyscallEvent {
    pub tid: Tid,
    /// Monotonic timestamp in seconds, when the trace carried one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    pub name: String,
    pub args: Vec<Arg>,
    pub ret: i64,
    /// Path annotation on the return value (strace `-y`), e.g. `= 3</etc/hosts>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ret_path: Option<ByteStr>,
    /// Error symbol, present iff `ret < 0` (e.g. `ENOENT`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<String>,
}

impl SyscallEvent {
    pub fn failed(&self) -> bool {
        self.ret < 0
    }
}

/// One raw argument token, with the type hint the decoder could establish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    /// Quoted byte-string literal (paths, buffers, argv members).
    Bytes(ByteStr),
    /// Integer literal, decimal or hex.
    Int(i64),
    /// File descriptor with its optional strace `-y` path annotation.
    Fd { fd: i32, path: Option<ByteStr> },
    /// Symbolic constant or `|`-joined flag set, e.g. `O_RDONLY|O_CLOEXEC`.
    Flags(String),
    /// Decoded socket address struct.
    Sockaddr(SockAddr),
    /// Bracketed list, e.g. execve argv or the fd pair of pipe().
    Array(Vec<Arg>),
    /// Anything else, kept verbatim.
    Raw(ByteStr),
}

impl Arg {
    pub fn as_bytes(&self) -> Option<&ByteStr> {
        match self {
            Arg::Bytes(b) => Some(b),
            _ => None,
        }
    }

    /// Flag-set membership test, exact on `|`-separated pieces.
    pub fn has_flag(&self, name: &str) -> bool {
        match self {
            Arg::Flags(s) => s.split('|').any(|p| p == name),
            _ => false,
        }
    }
}

/// Decoded `struct sockaddr` argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SockAddr {
    Unix {
        path: ByteStr,
        /// Leading-NUL (abstract namespace) addresses have no filesystem node.
        abstract_ns: bool,
    },
    Inet {
        host: String,
        port: u16,
    },
    Other(ByteStr),
}

/// One ordered sequence of events from a single traced run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Log {
    pub events: Vec<SyscallEvent>,
}

/// A set of logs collected from model runs of one container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionLog {
    pub logs: Vec<Log>,
}

/// Input trace format selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    StraceText,
    Canonical,
}

impl std::str::FromStr for TraceFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strace" | "strace-text" => Ok(TraceFormat::StraceText),
            "canonical" => Ok(TraceFormat::Canonical),
            other => Err(format!("unknown trace format {other:?}")),
        }
    }
}

/// Outcome of classifying one line of strace output.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedLine {
    Event(SyscallEvent),
    /// First half of a call interrupted by another thread.
    Unfinished {
        tid: Tid,
        ts: Option<f64>,
        name: String,
        /// Raw call text up to (excluding) the ` <unfinished ...>` marker.
        prefix: Vec<u8>,
    },
    /// Second half; completes the pending call of the same tid.
    Resumed {
        tid: Tid,
        ts: Option<f64>,
        name: String,
        /// Raw text following `resumed>`.
        rest: Vec<u8>,
    },
    /// Signal delivery, exit status, strace banners: carries no event.
    Noise,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: u64,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    BadHeader {
        path: String,
        line: u64,
        reason: String,
    },
}

/// Counters for conditions that were tolerated rather than fatal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub events: u64,
    pub noise_lines: u64,
    pub malformed_lines: u64,
    /// `<... resumed>` with no pending unfinished call: warned and dropped.
    pub unpaired_resumptions: u64,
    /// Unfinished calls never resumed by end of input: dropped.
    pub dangling_unfinished: u64,
}

impl LoadStats {
    fn absorb(&mut self, other: &LoadStats) {
        self.events += other.events;
        self.noise_lines += other.noise_lines;
        self.malformed_lines += other.malformed_lines;
        self.unpaired_resumptions += other.unpaired_resumptions;
        self.dangling_unfinished += other.dangling_unfinished;
    }
}

/// Streaming event reader over one trace file: parses lines, merges
/// unfinished/resumed pairs, skips noise. Strict mode turns malformed lines
/// into errors; otherwise they are counted and skipped.
pub struct EventReader<R: BufRead> {
    input: R,
    format: TraceFormat,
    source: String,
    strict: bool,
    line_no: u64,
    header_seen: bool,
    pending: HashMap<Tid, (String, Option<f64>, Vec<u8>)>,
    pub stats: LoadStats,
    buf: Vec<u8>,
    done: bool,
}

impl<R: BufRead> EventReader<R> {
    pub fn new(input: R, format: TraceFormat, source: impl Into<String>, strict: bool) -> Self {
        EventReader {
            input,
            format,
            source: source.into(),
            strict,
            line_no: 0,
            header_seen: false,
            pending: HashMap::new(),
            stats: LoadStats::default(),
            buf: Vec::new(),
            done: false,
        }
    }

    fn next_line(&mut self) -> Result<Option<&[u8]>, TraceError> {
        self.buf.clear();
        let n = self
            .input
            .read_until(b'\n', &mut self.buf)
            .map_err(|e| TraceError::Io {
                path: self.source.clone(),
                source: e,
            })?;
        if n == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        if self.buf.last() == Some(&b'\n') {
            self.buf.pop();
        }
        if self.buf.last() == Some(&b'\r') {
            self.buf.pop();
        }
        Ok(Some(&self.buf))
    }

    fn malformed(&mut self, reason: String) -> Option<Result<SyscallEvent, TraceError>> {
        self.stats.malformed_lines += 1;
        if self.strict {
            self.done = true;
            Some(Err(TraceError::MalformedLine {
                path: self.source.clone(),
                line: self.line_no,
                reason,
            }))
        } else {
            log::warn!("{}:{}: malformed line: {}", self.source, self.line_no, reason);
            None
        }
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<SyscallEvent, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let line = match self.next_line() {
                Ok(Some(_)) => std::mem::take(&mut self.buf),
                Ok(None) => {
                    self.done = true;
                    self.stats.dangling_unfinished += self.pending.len() as u64;
                    for (tid, (name, _, _)) in self.pending.drain() {
                        log::warn!("{}: unfinished {name} of tid {tid} never resumed", self.source);
                    }
                    return None;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            };
            if line.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            if self.format == TraceFormat::Canonical {
                if !self.header_seen {
                    self.header_seen = true;
                    match canonical::check_header(&line) {
                        Ok(()) => continue,
                        Err(reason) => {
                            self.done = true;
                            return Some(Err(TraceError::BadHeader {
                                path: self.source.clone(),
                                line: self.line_no,
                                reason,
                            }));
                        }
                    }
                }
                match canonical::parse_event_line(&line) {
                    Ok(ev) => {
                        self.stats.events += 1;
                        return Some(Ok(ev));
                    }
                    Err(reason) => match self.malformed(reason) {
                        Some(err) => return Some(err),
                        None => continue,
                    },
                }
            }
            match strace::parse_strace_line(&line) {
                Ok(ParsedLine::Event(ev)) => {
                    self.stats.events += 1;
                    return Some(Ok(ev));
                }
                Ok(ParsedLine::Noise) => {
                    self.stats.noise_lines += 1;
                    continue;
                }
                Ok(ParsedLine::Unfinished {
                    tid,
                    ts,
                    name,
                    prefix,
                }) => {
                    self.pending.insert(tid, (name, ts, prefix));
                    continue;
                }
                Ok(ParsedLine::Resumed { tid, name, rest, .. }) => {
                    let Some((pname, pts, prefix)) = self.pending.remove(&tid) else {
                        self.stats.unpaired_resumptions += 1;
                        log::warn!(
                            "{}:{}: resumed {name} of tid {tid} with no unfinished call; dropped",
                            self.source,
                            self.line_no
                        );
                        continue;
                    };
                    if pname != name {
                        self.stats.unpaired_resumptions += 1;
                        log::warn!(
                            "{}:{}: resumed {name} does not match pending {pname} of tid {tid}; both dropped",
                            self.source,
                            self.line_no
                        );
                        continue;
                    }
                    let mut body = prefix;
                    body.extend_from_slice(&rest);
                    match strace::parse_call_body(tid, pts, &name, &body) {
                        Ok(ev) => {
                            self.stats.events += 1;
                            return Some(Ok(ev));
                        }
                        Err(reason) => match self.malformed(format!("merged resumption: {reason}")) {
                            Some(err) => return Some(err),
                            None => continue,
                        },
                    }
                }
                Err(reason) => match self.malformed(reason) {
                    Some(err) => return Some(err),
                    None => continue,
                },
            }
        }
    }
}

/// Read one trace file into a [`Log`].
pub fn read_log<R: Read>(
    input: R,
    format: TraceFormat,
    source: &str,
    strict: bool,
) -> Result<(Log, LoadStats), TraceError> {
    let mut reader = EventReader::new(BufReader::new(input), format, source, strict);
    let mut events = Vec::new();
    for ev in &mut reader {
        events.push(ev?);
    }
    Ok((Log { events }, reader.stats))
}

/// Load an execution log: each input file becomes one [`Log`].
pub fn load_execution_log(
    paths: &[PathBuf],
    format: TraceFormat,
    strict: bool,
) -> Result<(ExecutionLog, LoadStats), TraceError> {
    let mut logs = Vec::with_capacity(paths.len());
    let mut stats = LoadStats::default();
    for path in paths {
        let file = File::open(path).map_err(|e| TraceError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let (log, s) = read_log(file, format, &path.display().to_string(), strict)?;
        stats.absorb(&s);
        logs.push(log);
    }
    Ok((ExecutionLog { logs }, stats))
}

/// Open one trace file as a streaming reader.
pub fn open_reader(
    path: &Path,
    format: TraceFormat,
    strict: bool,
) -> Result<EventReader<BufReader<File>>, TraceError> {
    let file = File::open(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(EventReader::new(
        BufReader::new(file),
        format,
        path.display().to_string(),
        strict,
    ))
}
