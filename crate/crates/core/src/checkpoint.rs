//! Per-round snapshots of the global state.
//!
//! A checkpoint is a text file: a magic line, a version line, then the state
//! as one JSON document.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fed::GlobalState;

pub const MAGIC: &str = "FEDVB-CHECKPOINT";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(state: &GlobalState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "version {VERSION}")?;
        serde_json::to_writer(&mut *out, state).map_err(std::io::Error::other)?;
        writeln!(out)?;
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GlobalState> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));

    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    line.clear();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let version: u32 = line
        .trim_end()
        .strip_prefix("version ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("malformed version line `{}`", line.trim_end())))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
    }
    let state: GlobalState = serde_json::from_reader(reader).map_err(|e| bad(e.to_string()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::{FederationConfig, GlobalState};
    use crate::net::NetworkSpec;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let spec = NetworkSpec::mlp(4, &[6]).unwrap();
        for snn_rounds in [0, 3] {
            let config = FederationConfig {
                snn_rounds,
                ..FederationConfig::default()
            };
            let state = GlobalState::initial(spec.clone(), &config, 11).unwrap();
            save_checkpoint(&state, &path).unwrap();
            assert_eq!(load_checkpoint(&path).unwrap(), state);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, "hello\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, format!("{MAGIC}\nversion 99\n{{}}\n")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
