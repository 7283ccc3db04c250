//! Group-relative advantages and trainer-ready batch export.
//!
//! Advantages are `(r - mean) / std` within a rollout group, using the
//! population standard deviation. A group whose rewards are constant carries
//! no preference signal and gets all-zero advantages. The KL coefficient and
//! optimizer settings are passed through for the external trainer; nothing
//! here computes log-probabilities.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ChatMessage;
use crate::cycle::CycleRecord;
use crate::datamodel::{stable_record_id, Modality, PipelineConfig};
use crate::exec::par_map;
use crate::jsonl::{self, file_digest, JsonlError};
use crate::voting::VoteRecord;

pub const ZERO_VARIANCE_STD: f64 = 1e-8;

/// Group-normalized advantages. Returns zeros when the population standard
/// deviation is below [`ZERO_VARIANCE_STD`].
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZERO_VARIANCE_STD {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub sample_id: String,
    pub path_code: String,
    pub modality: Modality,
    pub rollout_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedInstance {
    pub record_id: String,
    pub group_id: String,
    pub prompt: Vec<ChatMessage>,
    pub response: String,
    pub reward: f64,
    pub advantage: f64,
    pub kl_coefficient: f64,
    pub meta: InstanceMeta,
}

/// A rewarded rollout group from either the cycle or the voting pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    pub sample_id: String,
    pub path_code: String,
    pub modality: Modality,
    pub prompt: Vec<ChatMessage>,
    pub responses: Vec<String>,
    pub rewards: Vec<f64>,
}

impl RewardGroup {
    pub fn group_id(&self) -> String {
        format!("{}/{}", self.sample_id, self.path_code)
    }
}

impl From<&CycleRecord> for RewardGroup {
    fn from(r: &CycleRecord) -> Self {
        RewardGroup {
            sample_id: r.sample_id.clone(),
            path_code: r.path.code.to_string(),
            modality: r.path.forward_modality,
            prompt: r.forward_prompt.clone(),
            responses: r.forward_group.answers().map(String::from).collect(),
            rewards: r.rewards.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// One reward group per voted modality.
pub fn vote_groups(r: &VoteRecord) -> Vec<RewardGroup> {
    r.groups
        .iter()
        .map(|g| RewardGroup {
            sample_id: r.sample_id.clone(),
            path_code: format!("vote-{}", g.modality.code()),
            modality: g.modality,
            prompt: g.prompt.clone(),
            responses: g.group.answers().map(String::from).collect(),
            rewards: g.rewards.iter().map(|&x| f64::from(x)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerateGroup {
    pub group_id: String,
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Normalized {
    pub instances: Vec<RewardedInstance>,
    /// Groups with fewer than two rollouts, left out of the export.
    pub degenerate: Vec<DegenerateGroup>,
    /// Groups whose rewards were constant (advantages all zero).
    pub zero_variance_groups: usize,
}

pub fn group_and_normalize(groups: &[RewardGroup], kl_coefficient: f64) -> Normalized {
    let per_group = par_map(groups, |g| {
        let group_id = g.group_id();
        let k = g.responses.len();
        if k < 2 || g.rewards.len() != k {
            return Err(DegenerateGroup { group_id, k });
        }
        let adv = advantages(&g.rewards);
        let zero = adv.iter().all(|&a| a == 0.0);
        let instances: Vec<RewardedInstance> = g
            .responses
            .iter()
            .zip(&g.rewards)
            .zip(adv)
            .enumerate()
            .map(|(i, ((resp, &reward), advantage))| RewardedInstance {
                record_id: stable_record_id(&g.sample_id, &g.path_code, i),
                group_id: group_id.clone(),
                prompt: g.prompt.clone(),
                response: resp.clone(),
                reward,
                advantage,
                kl_coefficient,
                meta: InstanceMeta {
                    sample_id: g.sample_id.clone(),
                    path_code: g.path_code.clone(),
                    modality: g.modality,
                    rollout_index: i,
                },
            })
            .collect();
        Ok((instances, zero))
    });
    let mut out = Normalized::default();
    for r in per_group {
        match r {
            Ok((inst, zero)) => {
                out.zero_variance_groups += usize::from(zero);
                out.instances.extend(inst);
            }
            Err(d) => out.degenerate.push(d),
        }
    }
    out
}

/// Optimizer settings echoed to the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub kl_coefficient: f64,
    pub max_steps: u32,
}

impl From<&PipelineConfig> for ConfigEcho {
    fn from(c: &PipelineConfig) -> Self {
        ConfigEcho {
            learning_rate: c.learning_rate,
            weight_decay: c.weight_decay,
            kl_coefficient: c.kl_coefficient,
            max_steps: c.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub batch_index: usize,
    pub instances: Vec<RewardedInstance>,
    pub config_echo: ConfigEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFile {
    pub file: String,
    pub count: usize,
    pub groups: usize,
    pub sha256: String,
}

/// `manifest.json` next to the batch files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub batch_files: Vec<BatchFile>,
    pub total_instances: usize,
    pub total_groups: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub config_echo: ConfigEcho,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("nothing to export")]
    Empty,
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("{file}: digest mismatch")]
    DigestMismatch { file: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

pub fn batch_file_name(index: usize) -> String {
    format!("batch-{index:05}.jsonl")
}

/// Packs whole groups, in seeded shuffled order, into batches of at most
/// `batch_size` instances. A single group larger than the batch size gets a
/// batch of its own.
pub fn pack_batches(instances: &[RewardedInstance], batch_size: usize, seed: u64) -> Vec<Vec<RewardedInstance>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_group: HashMap<&str, Vec<&RewardedInstance>> = HashMap::new();
    for inst in instances {
        by_group
            .entry(inst.group_id.as_str())
            .or_insert_with(|| {
                order.push(inst.group_id.as_str());
                Vec::new()
            })
            .push(inst);
    }
    order.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    let mut current: Vec<RewardedInstance> = Vec::new();
    for gid in order {
        let members = &by_group[gid];
        if !current.is_empty() && current.len() + members.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(members.iter().map(|&i| i.clone()));
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Writes `batch-NNNNN.jsonl` files plus `manifest.json` into `out_dir`,
/// replacing any earlier batch files there.
pub fn export_batches(
    instances: &[RewardedInstance],
    batch_size: usize,
    seed: u64,
    echo: ConfigEcho,
    out_dir: &Path,
) -> Result<BatchManifest, ExportError> {
    if instances.is_empty() {
        return Err(ExportError::Empty);
    }
    if batch_size == 0 {
        return Err(ExportError::ZeroBatchSize);
    }
    fs::create_dir_all(out_dir).map_err(|e| JsonlError::io(out_dir, e))?;
    for entry in fs::read_dir(out_dir).map_err(|e| JsonlError::io(out_dir, e))? {
        let entry = entry.map_err(|e| JsonlError::io(out_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("batch-") && name.ends_with(".jsonl") {
            fs::remove_file(entry.path()).map_err(|e| JsonlError::io(&entry.path(), e))?;
        }
    }
    let batches = pack_batches(instances, batch_size, seed);
    let mut files = Vec::with_capacity(batches.len());
    let mut total_groups = 0;
    for (i, batch) in batches.iter().enumerate() {
        let name = batch_file_name(i);
        let path = out_dir.join(&name);
        jsonl::write(&path, batch)?;
        let mut gids: Vec<&str> = batch.iter().map(|x| x.group_id.as_str()).collect();
        gids.dedup();
        total_groups += gids.len();
        files.push(BatchFile {
            file: name,
            count: batch.len(),
            groups: gids.len(),
            sha256: file_digest(&path)?,
        });
    }
    let manifest = BatchManifest {
        batch_files: files,
        total_instances: instances.len(),
        total_groups,
        batch_size,
        seed,
        config_echo: echo,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| JsonlError::io(&path, e))?;
    Ok(manifest)
}

/// Reads an export directory back, checking every file digest.
pub fn read_batches(dir: &Path) -> Result<(BatchManifest, Vec<TrainingBatch>), ExportError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| JsonlError::io(&mpath, e))?;
    let manifest: BatchManifest =
        serde_json::from_str(&text).map_err(|e| ExportError::Manifest(e.to_string()))?;
    let mut batches = Vec::new();
    for (i, f) in manifest.batch_files.iter().enumerate() {
        let path = dir.join(&f.file);
        if file_digest(&path)? != f.sha256 {
            return Err(ExportError::DigestMismatch { file: f.file.clone() });
        }
        let instances: Vec<RewardedInstance> = jsonl::read(&path)?;
        if instances.len() != f.count {
            return Err(ExportError::Manifest(format!("{}: expected {} records", f.file, f.count)));
        }
        batches.push(TrainingBatch {
            batch_index: i,
            instances,
            config_echo: manifest.config_echo,
        });
    }
    Ok((manifest, batches))
}
