//! Content-addressed record of what each command wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// File name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
    /// SHA-256 of the resolved configuration text the stage ran with.
    pub config_sha256: String,
    /// Stage name to SHA-256 of the checkpoint it consumed.
    pub depends_on: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Record `files` (relative to `dir`) for `stage`, replacing any earlier entry.
    pub fn record(
        &mut self,
        dir: &Path,
        stage: &str,
        files: &[&str],
        config_sha256: &str,
        depends_on: BTreeMap<String, String>,
    ) -> Result<()> {
        let artifacts = files
            .iter()
            .map(|f| Ok((f.to_string(), sha256_file(&dir.join(f))?)))
            .collect::<Result<_>>()?;
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                artifacts,
                config_sha256: config_sha256.to_string(),
                depends_on,
            },
        );
        Ok(())
    }

    /// True when `stage` was recorded with `config_sha256` and every one of
    /// its files still has the recorded contents.
    pub fn is_current(&self, dir: &Path, stage: &str, config_sha256: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.config_sha256 == config_sha256
            && rec
                .artifacts
                .iter()
                .all(|(f, h)| sha256_file(&dir.join(f)).map(|x| &x == h).unwrap_or(false))
    }
}
