//! Tab-separated dataset manifests.
//!
//! One record per line: `path<TAB>label<TAB>session<TAB>split`, where `split`
//! is `train` or `test`. Blank lines and lines starting with `#` are skipped.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use fcac_core::protocol::{ClassId, Labeled, SampleRef, SessionManifest};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest has no records for session {0}")]
    MissingSession(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved audio path.
    pub path: PathBuf,
    /// The path as written, used as the sample identity.
    pub sample: SampleRef,
    pub label: ClassId,
    pub session: usize,
    pub split: Split,
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| ManifestError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, label, session, split] = fields[..] else {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        if path.is_empty() || label.is_empty() {
            return Err(err("empty path or label".into()));
        }
        let session = session
            .trim()
            .parse()
            .map_err(|_| err(format!("session {session:?} is not a non-negative integer")))?;
        let split = match split.trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(format!("split must be train or test, found {other:?}"))),
        };
        out.push(ManifestEntry {
            path: base_dir.join(path),
            sample: SampleRef(path.to_string()),
            label: ClassId(label.to_string()),
            session,
            split,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Splits entries into the base session and the incremental sessions.
/// Session indices must run from 0 without gaps.
pub fn group_sessions(entries: &[ManifestEntry]) -> Result<(SessionManifest, Vec<SessionManifest>), ManifestError> {
    let count = entries.iter().map(|e| e.session + 1).max().unwrap_or(0);
    let mut sessions = vec![SessionManifest::default(); count];
    for e in entries {
        let rec = Labeled {
            sample: e.sample.clone(),
            label: e.label.clone(),
        };
        match e.split {
            Split::Train => sessions[e.session].train.push(rec),
            Split::Test => sessions[e.session].test.push(rec),
        }
    }
    if let Some(gap) = sessions.iter().position(|s| s.train.is_empty() && s.test.is_empty()) {
        return Err(ManifestError::MissingSession(gap));
    }
    if sessions.is_empty() {
        return Err(ManifestError::MissingSession(0));
    }
    let base = sessions.remove(0);
    Ok((base, sessions))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "# header\na.wav\tdog\t0\ttrain\nb.wav\tdog\t0\ttest\n\nc.wav\tcat\t1\ttrain\r\n";

    #[test]
    fn parses_and_groups() {
        let entries = parse_manifest(TEXT, Path::new("/data")).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].path, PathBuf::from("/data/a.wav"));
        assert_eq!(entries[2].split, Split::Train);
        let (base, inc) = group_sessions(&entries).unwrap();
        assert_eq!((base.train.len(), base.test.len()), (1, 1));
        assert_eq!(inc.len(), 1);
        assert_eq!(inc[0].train[0].label, ClassId::from("cat"));
    }

    #[test]
    fn reports_the_offending_line() {
        let err = parse_manifest("a.wav\tdog\t0\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ManifestError::Parse { line: 1, .. }));
        let err = parse_manifest("x\ty\t0\ttrain\nx\ty\tone\ttrain\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ManifestError::Parse { line: 2, .. }));
        let err = parse_manifest("x\ty\t0\tvalid\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("valid"));
    }

    #[test]
    fn session_gaps_are_rejected() {
        let entries = parse_manifest("a\tx\t0\ttrain\nb\ty\t2\ttrain\n", Path::new(".")).unwrap();
        assert!(matches!(group_sessions(&entries), Err(ManifestError::MissingSession(1))));
    }
}
