//! Persisted analysis document: the output of the trace-analysis stage and
//! the input of the partitioning stage, so policies can be iterated without
//! re-parsing large traces.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attribution::Attribution;
use crate::bytes::AbsPath;

pub const ANALYSIS_FORMAT: &str = "cleave-analysis";
pub const ANALYSIS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDoc {
    pub format: String,
    pub version: u32,
    pub root_cwd: AbsPath,
    pub root_exe: AbsPath,
    pub attribution: Attribution,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("analysis document: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AnalysisDoc {
    pub fn new(root_cwd: AbsPath, root_exe: AbsPath, attribution: Attribution) -> Self {
        AnalysisDoc {
            format: ANALYSIS_FORMAT.into(),
            version: ANALYSIS_VERSION,
            root_cwd,
            root_exe,
            attribution,
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), AnalysisError> {
        serde_json::to_writer_pretty(&mut out, self)
            .map_err(|e| AnalysisError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, AnalysisError> {
        let mut buf = String::new();
        input.read_to_string(&mut buf)?;
        let doc: AnalysisDoc =
            serde_json::from_str(&buf).map_err(|e| AnalysisError::Format(e.to_string()))?;
        if doc.format != ANALYSIS_FORMAT {
            return Err(AnalysisError::Format(format!(
                "unexpected format {:?}",
                doc.format
            )));
        }
        if doc.version != ANALYSIS_VERSION {
            return Err(AnalysisError::Format(format!(
                "unsupported version {} (expected {ANALYSIS_VERSION})",
                doc.version
            )));
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::ExeProfile;
    use crate::effects::Resource;

    #[test]
    fn document_round_trip() {
        let mut attribution = Attribution::default();
        attribution.profiles.insert(
            AbsPath::new("/init.sh").unwrap(),
            ExeProfile {
                reads: [Resource::File(AbsPath::new("/etc/config").unwrap())]
                    .into_iter()
                    .collect(),
                writes: Default::default(),
            },
        );
        let doc = AnalysisDoc::new(
            AbsPath::root(),
            AbsPath::new("/init.sh").unwrap(),
            attribution,
        );
        let mut buf = Vec::new();
        doc.write(&mut buf).unwrap();
        let back = AnalysisDoc::read(&buf[..]).unwrap();
        assert_eq!(back, doc);
    }
}
