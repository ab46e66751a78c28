//! Line-level parser for strace text output.
//!
//! The accepted subset is what strace produces when run with child
//! following, absolute timestamps, fd path annotation, and unlimited string
//! length, i.e. flags equivalent to `-f -ttt -y -s <large>`:
//!
//! ```text
//! 1234 1700000000.123456 openat(AT_FDCWD, "/etc/hosts", O_RDONLY) = 3</etc/hosts>
//! 1234 1700000000.123999 open("/nope", O_RDONLY) = -1 ENOENT (No such file or directory)
//! 1234 wait4(-1,  <unfinished ...>
//! 1234 <... wait4 resumed> NULL, 0, NULL) = 99
//! 1234 --- SIGCHLD {si_signo=SIGCHLD, ...} ---
//! 1234 +++ exited with 0 +++
//! ```
//!
//! Timestamps may also be `HH:MM:SS.micro` (`-tt`); both map to fractional
//! seconds. Signal delivery and exit-status lines classify as noise, the
//! `<unfinished ...>` / `<... resumed>` halves as continuations, and
//! anything structurally unrecognizable is a malformed-line error carrying
//! the reason. String arguments are unescaped to raw bytes; non-UTF8
//! content survives verbatim.

use crate::bytes::ByteStr;
use crate::trace::{Arg, ParsedLine, SockAddr, SyscallEvent, Tid};

/// Classify one line. The caller supplies line numbers; errors here are
/// reasons only.
pub fn parse_strace_line(line: &[u8]) -> Result<ParsedLine, String> {
    let mut s = Scanner::new(line);
    s.skip_spaces();
    if s.rest().is_empty() {
        return Ok(ParsedLine::Noise);
    }
    if s.rest().starts_with(b"strace:") {
        return Ok(ParsedLine::Noise);
    }
    let Some(tid) = s.take_int() else {
        return Err("expected thread id".into());
    };
    let tid = tid as Tid;
    s.skip_spaces();
    let ts = s.take_timestamp();
    s.skip_spaces();

    let rest = s.rest();
    if rest.starts_with(b"+++") || rest.starts_with(b"---") {
        return Ok(ParsedLine::Noise);
    }
    if rest.starts_with(b"???") {
        // strace emits ???( ... for syscalls it could not decode
        return Ok(ParsedLine::Noise);
    }
    if let Some(rem) = rest.strip_prefix(b"<... ") {
        let Some(pos) = find(rem, b" resumed>") else {
            return Err("resumption marker without 'resumed>'".into());
        };
        let name = String::from_utf8_lossy(&rem[..pos]).into_owned();
        let rest = rem[pos + b" resumed>".len()..].to_vec();
        return Ok(ParsedLine::Resumed {
            tid,
            ts,
            name,
            rest,
        });
    }

    let Some(paren) = rest.iter().position(|&b| b == b'(') else {
        return Err("no opening parenthesis after syscall name".into());
    };
    let name_bytes = &rest[..paren];
    if name_bytes.is_empty()
        || !name_bytes
            .iter()
            .all(|b| b.is_ascii_alphanumeric() || *b == b'_')
    {
        return Err(format!(
            "bad syscall name {:?}",
            String::from_utf8_lossy(name_bytes)
        ));
    }
    let name = String::from_utf8_lossy(name_bytes).into_owned();
    let body = &rest[paren + 1..];

    if let Some(pos) = find_outside_quotes(body, b" <unfinished ...>") {
        return Ok(ParsedLine::Unfinished {
            tid,
            ts,
            name,
            prefix: body[..pos].to_vec(),
        });
    }
    if find_outside_quotes(body, b" <detached ...>").is_some() {
        return Ok(ParsedLine::Noise);
    }

    parse_call_body(tid, ts, &name, body)
        .map(ParsedLine::Event)
        .map_err(|e| format!("{name}: {e}"))
}

/// Parse the text following `name(`: arguments, `) = `, and the return
/// clause. Shared between complete lines and merged resumptions.
pub fn parse_call_body(
    tid: Tid,
    ts: Option<f64>,
    name: &str,
    body: &[u8],
) -> Result<SyscallEvent, String> {
    let close = find_args_end(body).ok_or("unterminated argument list")?;
    let args = split_args(&body[..close]);
    let args = args.into_iter().map(classify_token).collect();

    let mut s = Scanner::new(&body[close + 1..]);
    s.skip_spaces();
    if !s.eat(b"=") {
        return Err("missing '=' before return value".into());
    }
    s.skip_spaces();
    let (ret, ret_path, err) = parse_ret(&mut s)?;
    Ok(SyscallEvent {
        tid,
        ts,
        name: name.to_string(),
        args,
        ret,
        ret_path,
        err,
    })
}

fn parse_ret(s: &mut Scanner) -> Result<(i64, Option<ByteStr>, Option<String>), String> {
    if s.eat(b"?") {
        // syscalls that do not return (exit_group): treated as success
        return Ok((0, None, None));
    }
    let neg = s.eat(b"-");
    let ret = if s.rest().starts_with(b"0x") {
        s.advance(2);
        let hex = s.take_while(|b| b.is_ascii_hexdigit());
        i64::from_str_radix(&String::from_utf8_lossy(hex), 16)
            .or_else(|_| u64::from_str_radix(&String::from_utf8_lossy(hex), 16).map(|v| v as i64))
            .map_err(|_| "bad hex return value")?
    } else {
        s.take_int().ok_or("missing return value")?
    };
    let ret = if neg { -ret } else { ret };
    let mut ret_path = None;
    if s.rest().first() == Some(&b'<') {
        let ann = s.take_angle_annotation().ok_or("unterminated fd annotation")?;
        // duration suffixes (-T) are all digits and dots; fd paths are not
        if !ann.iter().all(|b| b.is_ascii_digit() || *b == b'.') {
            ret_path = Some(ByteStr::new(ann));
        }
    }
    s.skip_spaces();
    let mut err = None;
    if ret < 0 {
        let sym = s.take_while(|b| b.is_ascii_uppercase() || b.is_ascii_digit());
        if !sym.is_empty() {
            err = Some(String::from_utf8_lossy(sym).into_owned());
        }
    }
    // remaining text: "(No such file or directory)", durations; ignored
    Ok((ret, ret_path, err))
}

/// Find the index of the `)` that closes the argument list, honoring
/// quoting and bracket nesting.
fn find_args_end(body: &[u8]) -> Option<usize> {
    let mut depth = 0usize;
    let mut i = 0;
    while i < body.len() {
        match body[i] {
            b'"' => i = skip_string(body, i),
            b'(' | b'[' | b'{' => {
                depth += 1;
                i += 1;
            }
            b')' | b']' | b'}' if depth > 0 => {
                depth -= 1;
                i += 1;
            }
            b')' => return Some(i),
            _ => i += 1,
        }
    }
    None
}

/// Split an argument region at top-level commas.
fn split_args(region: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    let mut i = 0;
    while i < region.len() {
        match region[i] {
            b'"' => {
                i = skip_string(region, i);
                continue;
            }
            b'(' | b'[' | b'{' => depth += 1,
            b')' | b']' | b'}' => depth = depth.saturating_sub(1),
            b',' if depth == 0 => {
                out.push(trim(&region[start..i]));
                start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    let last = trim(&region[start..]);
    if !(out.is_empty() && last.is_empty()) {
        out.push(last);
    }
    out
}

/// Index just past the closing quote of the string starting at `i`.
fn skip_string(bytes: &[u8], i: usize) -> usize {
    debug_assert_eq!(bytes[i], b'"');
    let mut j = i + 1;
    while j < bytes.len() {
        match bytes[j] {
            b'\\' => j += 2,
            b'"' => return j + 1,
            _ => j += 1,
        }
    }
    bytes.len()
}

fn classify_token(tok: &[u8]) -> Arg {
    if tok.is_empty() {
        return Arg::Raw(ByteStr::default());
    }
    if tok[0] == b'"' {
        let (bytes, _) = unescape_quoted(tok);
        return Arg::Bytes(ByteStr(bytes));
    }
    if tok[0] == b'[' && tok[tok.len() - 1] == b']' {
        let inner = &tok[1..tok.len() - 1];
        return Arg::Array(split_args(inner).into_iter().map(classify_token).collect());
    }
    if tok[0] == b'{' {
        if let Some(sa) = parse_sockaddr(tok) {
            return Arg::Sockaddr(sa);
        }
        return Arg::Raw(ByteStr::new(tok));
    }
    if let Some(arg) = classify_scalar(tok) {
        return arg;
    }
    Arg::Raw(ByteStr::new(tok))
}

fn classify_scalar(tok: &[u8]) -> Option<Arg> {
    // fd with -y annotation: 3</etc/hosts>, 5<socket:[1234]>
    if tok[0].is_ascii_digit() && tok[tok.len() - 1] == b'>' {
        if let Some(lt) = tok.iter().position(|&b| b == b'<') {
            if tok[..lt].iter().all(|b| b.is_ascii_digit()) {
                if let Ok(fd) = String::from_utf8_lossy(&tok[..lt]).parse() {
                    return Some(Arg::Fd {
                        fd,
                        path: Some(ByteStr::new(&tok[lt + 1..tok.len() - 1])),
                    });
                }
            }
        }
    }
    let digits = if tok[0] == b'-' { &tok[1..] } else { tok };
    if !digits.is_empty() && digits.iter().all(|b| b.is_ascii_digit()) {
        if let Ok(v) = String::from_utf8_lossy(tok).parse() {
            return Some(Arg::Int(v));
        }
    }
    if tok.starts_with(b"0x") && tok[2..].iter().all(|b| b.is_ascii_hexdigit()) && tok.len() > 2 {
        if let Ok(v) = u64::from_str_radix(&String::from_utf8_lossy(&tok[2..]), 16) {
            return Some(Arg::Int(v as i64));
        }
    }
    if tok[0].is_ascii_uppercase() && is_flag_set(tok) {
        return Some(Arg::Flags(String::from_utf8_lossy(tok).into_owned()));
    }
    None
}

/// Symbolic constant or OR-ed flag expression, e.g. `O_CREAT|O_WRONLY`,
/// `S_IFIFO|0644`, `AT_FDCWD`.
fn is_flag_set(tok: &[u8]) -> bool {
    tok.split(|&b| b == b'|').all(|piece| {
        !piece.is_empty()
            && (piece.iter().all(|b| b.is_ascii_digit())
                || (piece.starts_with(b"0x") && piece[2..].iter().all(|b| b.is_ascii_hexdigit()))
                || (piece[0].is_ascii_uppercase()
                    && piece
                        .iter()
                        .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || *b == b'_')))
    })
}

fn parse_sockaddr(tok: &[u8]) -> Option<SockAddr> {
    let inner = &tok[1..tok.len().saturating_sub(1)];
    let fam_at = find(inner, b"sa_family=")?;
    let fam_rest = &inner[fam_at + b"sa_family=".len()..];
    let fam_end = fam_rest
        .iter()
        .position(|&b| b == b',' || b == b'}')
        .unwrap_or(fam_rest.len());
    match &fam_rest[..fam_end] {
        b"AF_UNIX" | b"AF_LOCAL" => {
            let path_at = find(inner, b"sun_path=")?;
            let mut p = &inner[path_at + b"sun_path=".len()..];
            let mut abstract_ns = false;
            if p.first() == Some(&b'@') {
                abstract_ns = true;
                p = &p[1..];
            }
            if p.first() != Some(&b'"') {
                return Some(SockAddr::Other(ByteStr::new(tok)));
            }
            let (bytes, _) = unescape_quoted(p);
            Some(SockAddr::Unix {
                path: ByteStr(bytes),
                abstract_ns,
            })
        }
        b"AF_INET" => {
            let port = extract_htons(inner, b"sin_port=htons(")?;
            let host_at = find(inner, b"sin_addr=inet_addr(\"")?;
            let host = &inner[host_at + b"sin_addr=inet_addr(\"".len()..];
            let end = host.iter().position(|&b| b == b'"')?;
            Some(SockAddr::Inet {
                host: String::from_utf8_lossy(&host[..end]).into_owned(),
                port,
            })
        }
        b"AF_INET6" => {
            let port = extract_htons(inner, b"sin6_port=htons(")?;
            let host_at = find(inner, b"inet_pton(AF_INET6, \"")?;
            let host = &inner[host_at + b"inet_pton(AF_INET6, \"".len()..];
            let end = host.iter().position(|&b| b == b'"')?;
            Some(SockAddr::Inet {
                host: String::from_utf8_lossy(&host[..end]).into_owned(),
                port,
            })
        }
        _ => Some(SockAddr::Other(ByteStr::new(tok))),
    }
}

fn extract_htons(inner: &[u8], marker: &[u8]) -> Option<u16> {
    let at = find(inner, marker)?;
    let rest = &inner[at + marker.len()..];
    let end = rest.iter().position(|&b| b == b')')?;
    String::from_utf8_lossy(&rest[..end]).parse().ok()
}

/// Unescape a quoted strace string literal into raw bytes. Returns the
/// bytes and the index just past the closing quote.
fn unescape_quoted(tok: &[u8]) -> (Vec<u8>, usize) {
    debug_assert_eq!(tok.first(), Some(&b'"'));
    let mut out = Vec::with_capacity(tok.len());
    let mut i = 1;
    while i < tok.len() {
        match tok[i] {
            b'"' => return (out, i + 1),
            b'\\' if i + 1 < tok.len() => {
                i += 1;
                match tok[i] {
                    b'n' => out.push(b'\n'),
                    b't' => out.push(b'\t'),
                    b'r' => out.push(b'\r'),
                    b'v' => out.push(0x0b),
                    b'f' => out.push(0x0c),
                    b'a' => out.push(0x07),
                    b'b' => out.push(0x08),
                    b'"' => out.push(b'"'),
                    b'\\' => out.push(b'\\'),
                    b'x' => {
                        let mut v = 0u8;
                        let mut n = 0;
                        while n < 2 && i + 1 < tok.len() && tok[i + 1].is_ascii_hexdigit() {
                            i += 1;
                            n += 1;
                            v = v * 16 + hex_val(tok[i]);
                        }
                        out.push(v);
                    }
                    b'0'..=b'7' => {
                        let mut v = (tok[i] - b'0') as u32;
                        let mut n = 1;
                        while n < 3 && i + 1 < tok.len() && (b'0'..=b'7').contains(&tok[i + 1]) {
                            i += 1;
                            n += 1;
                            v = v * 8 + (tok[i] - b'0') as u32;
                        }
                        out.push(v as u8);
                    }
                    other => out.push(other),
                }
                i += 1;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    (out, tok.len())
}

fn hex_val(b: u8) -> u8 {
    match b {
        b'0'..=b'9' => b - b'0',
        b'a'..=b'f' => b - b'a' + 10,
        b'A'..=b'F' => b - b'A' + 10,
        _ => 0,
    }
}

fn trim(bytes: &[u8]) -> &[u8] {
    let start = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .unwrap_or(bytes.len());
    let end = bytes
        .iter()
        .rposition(|b| !b.is_ascii_whitespace())
        .map_or(start, |e| e + 1);
    &bytes[start..end]
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}

fn find_outside_quotes(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    let mut i = 0;
    while i < haystack.len() {
        if haystack[i] == b'"' {
            i = skip_string(haystack, i);
            continue;
        }
        if haystack[i..].starts_with(needle) {
            return Some(i);
        }
        i += 1;
    }
    None
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Scanner { bytes, pos: 0 }
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    fn advance(&mut self, n: usize) {
        self.pos = (self.pos + n).min(self.bytes.len());
    }

    fn skip_spaces(&mut self) {
        while self.rest().first().is_some_and(|b| *b == b' ' || *b == b'\t') {
            self.pos += 1;
        }
    }

    fn eat(&mut self, tok: &[u8]) -> bool {
        if self.rest().starts_with(tok) {
            self.advance(tok.len());
            true
        } else {
            false
        }
    }

    fn take_while(&mut self, pred: impl Fn(u8) -> bool) -> &'a [u8] {
        let start = self.pos;
        while self.rest().first().is_some_and(|b| pred(*b)) {
            self.pos += 1;
        }
        &self.bytes[start..self.pos]
    }

    fn take_int(&mut self) -> Option<i64> {
        let digits = self.take_while(|b| b.is_ascii_digit());
        if digits.is_empty() {
            None
        } else {
            String::from_utf8_lossy(digits).parse().ok()
        }
    }

    /// Epoch seconds `1700000000.123456` or wall clock `HH:MM:SS.micro`.
    fn take_timestamp(&mut self) -> Option<f64> {
        let save = self.pos;
        let Some(first) = self.take_int() else {
            self.pos = save;
            return None;
        };
        match self.rest().first() {
            Some(b'.') => {
                self.advance(1);
                let frac = self.take_while(|b| b.is_ascii_digit());
                if self.rest().first() != Some(&b' ') {
                    self.pos = save;
                    return None;
                }
                let frac_val = String::from_utf8_lossy(frac).parse::<f64>().unwrap_or(0.0);
                Some(first as f64 + frac_val / 10f64.powi(frac.len() as i32))
            }
            Some(b':') => {
                self.advance(1);
                let min = self.take_int()?;
                if !self.eat(b":") {
                    self.pos = save;
                    return None;
                }
                let sec = self.take_int()?;
                let mut micros = 0.0;
                if self.eat(b".") {
                    let frac = self.take_while(|b| b.is_ascii_digit());
                    micros = String::from_utf8_lossy(frac).parse::<f64>().unwrap_or(0.0)
                        / 10f64.powi(frac.len() as i32);
                }
                Some(((first * 60 + min) * 60 + sec) as f64 + micros)
            }
            _ => {
                self.pos = save;
                None
            }
        }
    }

    /// `<...>` annotation right after a return value.
    fn take_angle_annotation(&mut self) -> Option<&'a [u8]> {
        if self.rest().first() != Some(&b'<') {
            return None;
        }
        let start = self.pos + 1;
        let end = self.rest().iter().rposition(|&b| b == b'>')?;
        let abs_end = self.pos + end;
        self.pos = abs_end + 1;
        Some(&self.bytes[start..abs_end])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(line: &str) -> SyscallEvent {
        match parse_strace_line(line.as_bytes()).unwrap() {
            ParsedLine::Event(e) => e,
            other => panic!("expected event, got {other:?}"),
        }
    }

    #[test]
    fn open_with_timestamp() {
        let e = event("1234 1700000000.1 open(\"/etc/hosts\", O_RDONLY) = 3");
        assert_eq!(e.tid, 1234);
        assert_eq!(e.ts, Some(1700000000.1));
        assert_eq!(e.name, "open");
        assert_eq!(e.args[0], Arg::Bytes(ByteStr::from("/etc/hosts")));
        assert_eq!(e.args[1], Arg::Flags("O_RDONLY".into()));
        assert_eq!(e.ret, 3);
        assert_eq!(e.err, None);
    }

    #[test]
    fn failed_open_carries_errno() {
        let e = event("1234 open(\"/nope\", O_RDONLY) = -1 ENOENT (No such file)");
        assert_eq!(e.ret, -1);
        assert_eq!(e.err.as_deref(), Some("ENOENT"));
    }

    #[test]
    fn unfinished_resumed_halves() {
        let u = parse_strace_line(b"1234 wait4(-1,  <unfinished ...>").unwrap();
        match u {
            ParsedLine::Unfinished { tid, name, prefix, .. } => {
                assert_eq!(tid, 1234);
                assert_eq!(name, "wait4");
                assert_eq!(prefix, b"-1, ");
            }
            other => panic!("{other:?}"),
        }
        let r = parse_strace_line(b"1234 <... wait4 resumed> NULL, 0, NULL) = 99").unwrap();
        match r {
            ParsedLine::Resumed { tid, name, rest, .. } => {
                assert_eq!(tid, 1234);
                assert_eq!(name, "wait4");
                assert_eq!(rest, b" NULL, 0, NULL) = 99");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn merged_body_parses() {
        let e = parse_call_body(1234, None, "wait4", b"-1,  NULL, 0, NULL) = 99").unwrap();
        assert_eq!(e.ret, 99);
        assert_eq!(e.args.len(), 4);
    }

    #[test]
    fn noise_lines() {
        for l in [
            "1234 +++ exited with 0 +++",
            "1234 --- SIGCHLD {si_signo=SIGCHLD, si_code=CLD_EXITED} ---",
            "strace: Process 17 attached",
            "99 1700.0 +++ killed by SIGKILL +++",
        ] {
            assert_eq!(parse_strace_line(l.as_bytes()).unwrap(), ParsedLine::Noise);
        }
    }

    #[test]
    fn malformed_is_reported() {
        assert!(parse_strace_line(b"hello world").is_err());
        assert!(parse_strace_line(b"12 op3n[") .is_err());
    }

    #[test]
    fn fd_annotations() {
        let e = event("7 openat(3</etc>, \"hosts\", O_RDONLY) = 4</etc/hosts>");
        assert_eq!(
            e.args[0],
            Arg::Fd {
                fd: 3,
                path: Some(ByteStr::from("/etc"))
            }
        );
        assert_eq!(e.ret, 4);
        assert_eq!(e.ret_path, Some(ByteStr::from("/etc/hosts")));
    }

    #[test]
    fn execve_argv_array() {
        let e = event(r#"9 execve("/bin/sh", ["sh", "-c", "x y"], 0x7ffd /* 5 vars */) = 0"#);
        match &e.args[1] {
            Arg::Array(items) => {
                assert_eq!(items.len(), 3);
                assert_eq!(items[2], Arg::Bytes(ByteStr::from("x y")));
            }
            other => panic!("{other:?}"),
        }
        matches!(&e.args[2], Arg::Raw(_));
    }

    #[test]
    fn sockaddr_unix_and_inet() {
        let e = event(r#"5 bind(9, {sa_family=AF_UNIX, sun_path="/run/x.sock"}, 110) = 0"#);
        assert_eq!(
            e.args[1],
            Arg::Sockaddr(SockAddr::Unix {
                path: ByteStr::from("/run/x.sock"),
                abstract_ns: false
            })
        );
        let e = event(
            r#"5 connect(3, {sa_family=AF_INET, sin_port=htons(3306), sin_addr=inet_addr("127.0.0.1")}, 16) = 0"#,
        );
        assert_eq!(
            e.args[1],
            Arg::Sockaddr(SockAddr::Inet {
                host: "127.0.0.1".into(),
                port: 3306
            })
        );
        let e = event(r#"5 bind(9, {sa_family=AF_UNIX, sun_path=@"abs"}, 110) = 0"#);
        assert_eq!(
            e.args[1],
            Arg::Sockaddr(SockAddr::Unix {
                path: ByteStr::from("abs"),
                abstract_ns: true
            })
        );
    }

    #[test]
    fn escapes_decode_to_bytes() {
        let e = event(r#"4 open("/tmp/a\tb\n\x7f\303\251", O_RDONLY) = 3"#);
        assert_eq!(
            e.args[0],
            Arg::Bytes(ByteStr(b"/tmp/a\tb\n\x7f\xc3\xa9".to_vec()))
        );
    }

    #[test]
    fn pipe_fd_array() {
        let e = event("3 pipe([5, 6]) = 0");
        assert_eq!(e.args[0], Arg::Array(vec![Arg::Int(5), Arg::Int(6)]));
    }

    #[test]
    fn no_return_syscall() {
        let e = event("3 exit_group(0) = ?");
        assert_eq!(e.ret, 0);
        assert_eq!(e.err, None);
    }

    #[test]
    fn wallclock_timestamp() {
        let e = event("3 20:03:49.406540 brk(NULL) = 0x55");
        let expected = ((20.0 * 60.0) + 3.0) * 60.0 + 49.406540;
        assert!((e.ts.unwrap() - expected).abs() < 1e-9);
    }
}
