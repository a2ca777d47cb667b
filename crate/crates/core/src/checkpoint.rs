//! Two-line JSON container: a header with format, version and payload digest,
//! followed by the payload itself.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT: &str = "binalign-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes atomically via a temporary sibling file.
pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let body = serde_json::to_string(payload)?;
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        sha256: digest(body.as_bytes()),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        writeln!(f, "{body}")?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let (head, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header =
        serde_json::from_str(head).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} is not supported (expected {VERSION})",
            header.version
        )));
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "file holds a `{}` checkpoint, expected `{kind}`",
            header.kind
        )));
    }
    let body = body.trim_end_matches('\n');
    if digest(body.as_bytes()) != header.sha256 {
        return Err(Error::Checkpoint("payload digest mismatch (file corrupted)".into()));
    }
    serde_json::from_str(body).map_err(|e| Error::Checkpoint(format!("unreadable payload: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let v = vec![0.1f64, 1.0 / 3.0, -2.5e-300, std::f64::consts::PI];
        save(&p, "test", &v).unwrap();
        let back: Vec<f64> = load(&p, "test").unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn corruption_version_and_kind_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save(&p, "test", &vec![1.0f64, 2.0]).unwrap();
        assert!(matches!(load::<Vec<f64>>(&p, "other"), Err(Error::Checkpoint(_))));

        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("2.0", "3.0")).unwrap();
        assert!(matches!(load::<Vec<f64>>(&p, "test"), Err(Error::Checkpoint(_))));

        std::fs::write(&p, text.replace("\"version\":1", "\"version\":99")).unwrap();
        let err = load::<Vec<f64>>(&p, "test").unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }
}
