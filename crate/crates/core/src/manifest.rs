//! Run manifest: per-stage completion markers, output digests, and the
//! config digest every stage must agree on. Any output file is traceable to
//! exactly one manifest via that digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex16;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub complete: bool,
    pub duration_ms: u64,
    /// Relative output path -> content digest.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub config_digest: String,
    pub format_versions: BTreeMap<String, u32>,
    pub checkpoint_digest: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_digest: &str) -> RunManifest {
        let mut format_versions = BTreeMap::new();
        format_versions.insert("checkpoint".into(), 1);
        format_versions.insert("trace_cache".into(), 1);
        format_versions.insert("prompts_jsonl".into(), 1);
        format_versions.insert("csv".into(), 1);
        RunManifest {
            config_digest: config_digest.to_string(),
            format_versions,
            checkpoint_digest: None,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<RunManifest>> {
        let path = dir.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: invalid manifest: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads the manifest and insists its config digest matches; stages with
    /// mismatched digests abort rather than mixing runs.
    pub fn load_matching(dir: &Path, config_digest: &str) -> Result<RunManifest> {
        match RunManifest::load(dir)? {
            None => Err(Error::MissingPrerequisite(format!(
                "{} (run `sacm generate` first)",
                dir.join(MANIFEST_FILE).display()
            ))),
            Some(m) if m.config_digest != config_digest => Err(Error::DigestMismatch(format!(
                "manifest carries config {}, current config is {config_digest}",
                m.config_digest
            ))),
            Some(m) => Ok(m),
        }
    }

    pub fn record_stage(
        &mut self,
        name: &str,
        duration_ms: u64,
        outputs: BTreeMap<String, String>,
    ) {
        self.stages
            .insert(name.to_string(), StageRecord { complete: true, duration_ms, outputs });
    }

    pub fn require_stage(&self, name: &str) -> Result<&StageRecord> {
        match self.stages.get(name) {
            Some(s) if s.complete => Ok(s),
            _ => Err(Error::MissingPrerequisite(format!(
                "stage `{name}` has not completed for this config"
            ))),
        }
    }

    /// Verifies a previously recorded output still has the recorded digest.
    pub fn verify_output(&self, stage: &str, dir: &Path, rel: &str) -> Result<()> {
        let rec = self.require_stage(stage)?;
        let expected = rec.outputs.get(rel).ok_or_else(|| {
            Error::MissingPrerequisite(format!("stage `{stage}` did not record `{rel}`"))
        })?;
        let actual = file_digest(&dir.join(rel))?;
        if &actual != expected {
            return Err(Error::DigestMismatch(format!(
                "`{rel}`: digest {actual} differs from manifest {expected}"
            )));
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&data);
    Ok(hex16(&h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_digest_gate() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("abc123");
        let mut outs = BTreeMap::new();
        fs::write(dir.path().join("x.csv"), "a,b\n1,2\n").unwrap();
        outs.insert("x.csv".into(), file_digest(&dir.path().join("x.csv")).unwrap());
        m.record_stage("generate", 12, outs);
        m.save(dir.path()).unwrap();

        let loaded = RunManifest::load_matching(dir.path(), "abc123").unwrap();
        assert_eq!(loaded, m);
        loaded.verify_output("generate", dir.path(), "x.csv").unwrap();

        assert!(matches!(
            RunManifest::load_matching(dir.path(), "other"),
            Err(Error::DigestMismatch(_))
        ));

        fs::write(dir.path().join("x.csv"), "tampered").unwrap();
        assert!(matches!(
            loaded.verify_output("generate", dir.path(), "x.csv"),
            Err(Error::DigestMismatch(_))
        ));
        assert!(loaded.require_stage("train").is_err());
    }
}
