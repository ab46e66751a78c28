//! Byte-string and path newtypes.
//!
//! Linux paths, argv entries, and environment strings are byte sequences
//! with no encoding guarantee. Everything that came out of a trace is kept
//! verbatim as bytes; JSON serialization uses a plain string when the bytes
//! are valid UTF-8 and a `{"b64": ...}` wrapper otherwise, so round trips
//! are exact.

use std::fmt;

use base64::Engine as _;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A byte string preserved verbatim from trace input.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ByteStr(pub Vec<u8>);

impl ByteStr {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        ByteStr(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Lossy UTF-8 view for display and diagnostics.
    pub fn display(&self) -> String {
        String::from_utf8_lossy(&self.0).into_owned()
    }
}

impl fmt::Debug for ByteStr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{:?}", self.display())
    }
}

impl fmt::Display for ByteStr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display())
    }
}

impl From<&str> for ByteStr {
    fn from(s: &str) -> Self {
        ByteStr(s.as_bytes().to_vec())
    }
}

impl From<String> for ByteStr {
    fn from(s: String) -> Self {
        ByteStr(s.into_bytes())
    }
}

impl From<Vec<u8>> for ByteStr {
    fn from(v: Vec<u8>) -> Self {
        ByteStr(v)
    }
}

impl From<&[u8]> for ByteStr {
    fn from(v: &[u8]) -> Self {
        ByteStr(v.to_vec())
    }
}

impl std::ops::Deref for ByteStr {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl Serialize for ByteStr {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(s) => ser.serialize_str(s),
            Err(_) => {
                use serde::ser::SerializeMap;
                let mut map = ser.serialize_map(Some(1))?;
                map.serialize_entry("b64", &base64::engine::general_purpose::STANDARD.encode(&self.0))?;
                map.end()
            }
        }
    }
}

struct ByteStrVisitor;

impl<'de> Visitor<'de> for ByteStrVisitor {
    type Value = ByteStr;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a string or {\"b64\": ...} map")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<ByteStr, E> {
        Ok(ByteStr::from(v))
    }

    fn visit_map<A: de::MapAccess<'de>>(self, mut map: A) -> Result<ByteStr, A::Error> {
        let key: String = map
            .next_key()?
            .ok_or_else(|| de::Error::custom("empty byte-string map"))?;
        if key != "b64" {
            return Err(de::Error::custom(format!("unexpected key {key:?}")));
        }
        let val: String = map.next_value()?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(val.as_bytes())
            .map_err(|e| de::Error::custom(format!("bad base64: {e}")))?;
        Ok(ByteStr(bytes))
    }
}

impl<'de> Deserialize<'de> for ByteStr {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        de.deserialize_any(ByteStrVisitor)
    }
}

/// An absolute, lexically normalized path: starts with `/`, contains no
/// `.` or `..` components and no duplicate separators.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AbsPath(ByteStr);

#[derive(Debug, thiserror::Error)]
#[error("path is not absolute: {0:?}")]
pub struct NotAbsolute(pub String);

impl AbsPath {
    /// Root directory.
    pub fn root() -> Self {
        AbsPath(ByteStr::from("/"))
    }

    /// Parse an absolute path, normalizing `.` and `..` lexically.
    pub fn new(raw: impl AsRef<[u8]>) -> Result<Self, NotAbsolute> {
        let raw = raw.as_ref();
        if raw.first() != Some(&b'/') {
            return Err(NotAbsolute(String::from_utf8_lossy(raw).into_owned()));
        }
        Ok(Self::normalize(raw))
    }

    /// Resolve `rel` against `self`; absolute `rel` stands alone.
    pub fn join(&self, rel: &[u8]) -> AbsPath {
        if rel.first() == Some(&b'/') {
            return Self::normalize(rel);
        }
        let mut buf = self.0 .0.clone();
        buf.push(b'/');
        buf.extend_from_slice(rel);
        Self::normalize(&buf)
    }

    fn normalize(raw: &[u8]) -> AbsPath {
        let mut parts: Vec<&[u8]> = Vec::new();
        for comp in raw.split(|&b| b == b'/') {
            match comp {
                b"" | b"." => {}
                b".." => {
                    parts.pop();
                }
                other => parts.push(other),
            }
        }
        let mut out = Vec::with_capacity(raw.len());
        if parts.is_empty() {
            out.push(b'/');
        } else {
            for p in parts {
                out.push(b'/');
                out.extend_from_slice(p);
            }
        }
        AbsPath(ByteStr(out))
    }

    pub fn is_root(&self) -> bool {
        self.0.as_bytes() == b"/"
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn as_byte_str(&self) -> &ByteStr {
        &self.0
    }

    /// Parent directory; `None` for the root.
    pub fn parent(&self) -> Option<AbsPath> {
        if self.is_root() {
            return None;
        }
        let bytes = self.as_bytes();
        let cut = bytes.iter().rposition(|&b| b == b'/').unwrap();
        if cut == 0 {
            Some(AbsPath::root())
        } else {
            Some(AbsPath(ByteStr(bytes[..cut].to_vec())))
        }
    }

    /// All proper ancestors, nearest first, excluding the root.
    pub fn ancestors(&self) -> Vec<AbsPath> {
        let mut out = Vec::new();
        let mut cur = self.parent();
        while let Some(p) = cur {
            if p.is_root() {
                break;
            }
            cur = p.parent();
            out.push(p);
        }
        out
    }

    /// Final component, or `/` itself for the root.
    pub fn basename(&self) -> &[u8] {
        let bytes = self.as_bytes();
        match bytes.iter().rposition(|&b| b == b'/') {
            Some(i) if i + 1 < bytes.len() => &bytes[i + 1..],
            _ => bytes,
        }
    }

    /// True when `self` equals `base` or lies underneath it.
    pub fn starts_with(&self, base: &AbsPath) -> bool {
        if base.is_root() {
            return true;
        }
        let s = self.as_bytes();
        let b = base.as_bytes();
        s == b || (s.len() > b.len() && s.starts_with(b) && s[b.len()] == b'/')
    }

    /// View as a `std::path::Path` (Unix: bytes map directly).
    pub fn to_path_buf(&self) -> std::path::PathBuf {
        use std::os::unix::ffi::OsStrExt;
        std::path::PathBuf::from(std::ffi::OsStr::from_bytes(self.as_bytes()))
    }

    pub fn display(&self) -> String {
        self.0.display()
    }
}

/// Serde adapter: maps keyed by paths serialize as `[key, value]` pair
/// lists, since JSON object keys cannot carry non-UTF8 bytes.
pub mod path_map {
    use super::AbsPath;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<V: Serialize, S: Serializer>(
        map: &BTreeMap<AbsPath, V>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = ser.serialize_seq(Some(map.len()))?;
        for entry in map {
            seq.serialize_element(&entry)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<AbsPath, V>, D::Error> {
        let list: Vec<(AbsPath, V)> = Vec::deserialize(de)?;
        Ok(list.into_iter().collect())
    }
}

impl fmt::Debug for AbsPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{:?}", self.display())
    }
}

impl fmt::Display for AbsPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_dot_components() {
        assert_eq!(AbsPath::new("/x/./y/../z").unwrap().display(), "/x/z");
        assert_eq!(AbsPath::new("//a///b/").unwrap().display(), "/a/b");
        assert_eq!(AbsPath::new("/..").unwrap().display(), "/");
    }

    #[test]
    fn rejects_relative() {
        assert!(AbsPath::new("srv/logs").is_err());
    }

    #[test]
    fn join_resolves_relative_against_base() {
        let cwd = AbsPath::new("/srv").unwrap();
        assert_eq!(cwd.join(b"logs/a").display(), "/srv/logs/a");
        assert_eq!(cwd.join(b"/etc/hosts").display(), "/etc/hosts");
        assert_eq!(cwd.join(b"../tmp").display(), "/tmp");
    }

    #[test]
    fn parent_chain() {
        let p = AbsPath::new("/a/b/c").unwrap();
        let anc: Vec<String> = p.ancestors().iter().map(|a| a.display()).collect();
        assert_eq!(anc, vec!["/a/b", "/a"]);
        assert_eq!(AbsPath::root().parent(), None);
    }

    #[test]
    fn bytestr_json_round_trip() {
        let utf8 = ByteStr::from("hello /etc");
        let non = ByteStr(vec![0x2f, 0xff, 0xfe, 0x01]);
        for b in [utf8, non] {
            let j = serde_json::to_string(&b).unwrap();
            let back: ByteStr = serde_json::from_str(&j).unwrap();
            assert_eq!(back, b);
        }
    }
}
