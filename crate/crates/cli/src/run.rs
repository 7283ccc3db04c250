//! Run directories: config snapshot, response cache and `run_manifest.json`.
//!
//! A stage is skipped when the manifest already records it with the same
//! input fingerprint and every output it listed is still on disk unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use cycle_reward::jsonl::{file_digest, sha256_hex};
use cycle_reward::PipelineConfig;

pub const MANIFEST: &str = "run_manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub quarantined: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: Option<PipelineConfig>,
    pub backend_fingerprint: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Every file in the run directory except the cache and this manifest.
    pub files: BTreeMap<String, String>,
}

pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mpath = root.join(MANIFEST);
        let manifest = if mpath.exists() {
            let text = fs::read_to_string(&mpath)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", mpath.display()))?
        } else {
            RunManifest::default()
        };
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// True when `stage` already ran with this fingerprint and its outputs
    /// are intact.
    pub fn is_current(&self, stage: &str, fingerprint: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else {
            return false;
        };
        rec.fingerprint == fingerprint
            && rec.outputs.iter().all(|o| {
                let listed = self.manifest.files.get(o);
                listed.is_some() && file_digest(&self.path(o)).ok().as_ref() == listed
            })
    }

    pub fn quarantined(&self, stage: &str) -> usize {
        self.manifest.stages.get(stage).map_or(0, |r| r.quarantined)
    }

    pub fn write_config(&self, config: &PipelineConfig) -> Result<()> {
        let text = toml::to_string_pretty(config).context("serializing config")?;
        fs::write(self.path(CONFIG_SNAPSHOT), text)?;
        Ok(())
    }

    /// Records a finished stage and rewrites the manifest.
    pub fn complete(
        &mut self,
        stage: &str,
        fingerprint: String,
        outputs: Vec<String>,
        quarantined: usize,
        config: &PipelineConfig,
        backend: Option<&str>,
    ) -> Result<()> {
        self.manifest.config = Some(config.clone());
        if let Some(b) = backend {
            self.manifest.backend_fingerprint = Some(b.to_string());
        }
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                fingerprint,
                outputs,
                quarantined,
            },
        );
        self.manifest.files = inventory(&self.root)?;
        let ids: Vec<String> = self.manifest.stages.values().map(|s| s.fingerprint.clone()).collect();
        self.manifest.run_id = sha256_hex(ids.join("\0").as_bytes())[..16].to_string();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(self.path(MANIFEST), text)?;
        Ok(())
    }
}

/// Digest of everything a stage depends on.
pub fn fingerprint(parts: &[&str]) -> String {
    sha256_hex(parts.join("\0").as_bytes())
}

fn inventory(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let rel = path
            .strip_prefix(root)
            .expect("walk stays under root")
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST || rel == ".cache" {
            continue;
        }
        if entry.file_type()?.is_dir() {
            walk(root, &path, out)?;
        } else {
            out.insert(rel, file_digest(&path)?);
        }
    }
    Ok(())
}
