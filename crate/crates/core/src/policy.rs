//! Partitioning policies and their on-disk grammar.
//!
//! A policy file is plain declarative text:
//!
//! ```text
//! # one of: all-one | one-one | subsets
//! policy: subsets
//! subset web: /usr/sbin/httpd /usr/bin/php-cgi
//! subset db:  /usr/sbin/mysqld
//! ```
//!
//! `all-one` places every executable in a single container (pure
//! slimming); `one-one` gives every executable its own container;
//! `subsets` names disjoint groups, and executables in no group are
//! don't-cares that the partitioner may place anywhere.

use crate::bytes::AbsPath;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Policy {
    AllOneContext,
    OneOneContext,
    DisjointSubsets(Vec<Subset>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subset {
    pub name: String,
    pub members: Vec<AbsPath>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("subsets {a:?} and {b:?} overlap on {exe}")]
    OverlappingSubsets { a: String, b: String, exe: String },
    #[error("policy names unknown executable {0}")]
    UnknownExecutable(String),
}

/// Parse the policy file grammar.
pub fn parse_policy(text: &str) -> Result<Policy, PolicyError> {
    let mut variant: Option<&str> = None;
    let mut subsets: Vec<Subset> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let line_no = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("policy:") {
            if variant.is_some() {
                return Err(PolicyError::Parse {
                    line: line_no,
                    reason: "duplicate policy line".into(),
                });
            }
            variant = Some(match rest.trim() {
                "all-one" => "all-one",
                "one-one" => "one-one",
                "subsets" => "subsets",
                other => {
                    return Err(PolicyError::Parse {
                        line: line_no,
                        reason: format!("unknown policy {other:?}"),
                    })
                }
            });
            continue;
        }
        if let Some(rest) = line.strip_prefix("subset ") {
            let Some((name, members)) = rest.split_once(':') else {
                return Err(PolicyError::Parse {
                    line: line_no,
                    reason: "subset line needs 'subset <name>: <exe> ...'".into(),
                });
            };
            let name = name.trim().to_string();
            if name.is_empty() || subsets.iter().any(|s| s.name == name) {
                return Err(PolicyError::Parse {
                    line: line_no,
                    reason: format!("bad or duplicate subset name {name:?}"),
                });
            }
            let mut parsed = Vec::new();
            for tok in members.split_whitespace() {
                let p = AbsPath::new(tok.as_bytes()).map_err(|_| PolicyError::Parse {
                    line: line_no,
                    reason: format!("executable path must be absolute: {tok:?}"),
                })?;
                parsed.push(p);
            }
            if parsed.is_empty() {
                return Err(PolicyError::Parse {
                    line: line_no,
                    reason: format!("subset {name:?} has no members"),
                });
            }
            subsets.push(Subset {
                name,
                members: parsed,
            });
            continue;
        }
        return Err(PolicyError::Parse {
            line: line_no,
            reason: format!("unrecognized line {line:?}"),
        });
    }
    match variant {
        Some("all-one") => Ok(Policy::AllOneContext),
        Some("one-one") => Ok(Policy::OneOneContext),
        Some("subsets") => Ok(Policy::DisjointSubsets(subsets)),
        _ => Err(PolicyError::Parse {
            line: 0,
            reason: "missing 'policy:' line".into(),
        }),
    }
}
