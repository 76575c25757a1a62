//! Experiment configuration: a sectioned TOML file, hashed in canonical form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackKind};
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::scenegen::{self, SceneParams};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub n_objects: usize,
    pub length: usize,
    pub jitter: f64,
    /// Number of training scenes.
    pub train_scenes: usize,
    /// Seed of the first training scene; scene `i` uses `train_seed + i`.
    pub train_seed: u64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let p = SceneParams::default();
        SceneSection { n_objects: p.n_objects, length: p.length, jitter: p.jitter, train_scenes: 400, train_seed: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_queries: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    /// Memory buffer length `T`.
    pub mem_len: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        ModelSection {
            d_model: c.d_model,
            n_queries: c.n_queries,
            n_layers: c.n_layers,
            ffn_dim: c.ffn_dim,
            patch: c.patch,
            mem_len: c.mem_len,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub kind: AttackKind,
    /// Train a model when no checkpoint is cached.
    pub train: bool,
    /// Evaluation scene seeds; each seed also selects the query.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Checkpoint cache; defaults to `<out>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            kind: AttackKind::Pixel,
            train: true,
            seeds: (0..10).collect(),
            out: PathBuf::from("runs"),
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub delta_attack: Vec<usize>,
    pub buffer: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { delta_attack: (1..=5).collect(), buffer: (2..=8).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub run: RunSection,
    pub sweep: SweepSection,
}

/// Which sweep axis must be non-empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    SweepDelta,
    SweepBuffer,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    /// Canonical text form: every field, fixed order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, first 16 hex digits. Output locations
    /// and the seed list are blanked: rows carry their own seed, and a run
    /// moved to another directory or restricted to one seed keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.seeds.clear();
        c.run.out = Default::default();
        c.run.checkpoint_dir = None;
        short_hash(&c.canonical())
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.run.seeds.is_empty() {
            return bad("run.seeds is empty".into());
        }
        let train = self.scene.train_seed..self.scene.train_seed + self.scene.train_scenes as u64;
        if let Some(s) = self.run.seeds.iter().find(|s| train.contains(s)) {
            return bad(format!("evaluation seed {s} is also a training scene"));
        }
        self.model_config()?.validate()?;
        self.train.validate()?;
        self.attack.validate_bounds()?;
        if self.attack.window().end > self.scene.length {
            return bad(format!(
                "attack window {:?} exceeds scene length {}",
                self.attack.window(),
                self.scene.length
            ));
        }
        if !(2..=self.model.n_queries).contains(&self.scene.n_objects) {
            return bad(format!("scene.n_objects must lie in [2, model.n_queries], got {}", self.scene.n_objects));
        }
        match mode {
            Mode::Single => {}
            Mode::SweepDelta => {
                let d = &self.sweep.delta_attack;
                if d.is_empty() || d.windows(2).any(|w| w[0] >= w[1]) || d[0] == 0 {
                    return bad("sweep.delta_attack must be non-empty, positive and strictly ascending".into());
                }
                let end = self.attack.t_attack + d[d.len() - 1];
                if end > self.scene.length {
                    return bad(format!("largest delta_attack ends at frame {end}, past the scene"));
                }
            }
            Mode::SweepBuffer => {
                let b = &self.sweep.buffer;
                if b.is_empty() || b.iter().any(|t| !(2..=8).contains(t)) {
                    return bad("sweep.buffer must be a non-empty subset of 2..=8".into());
                }
            }
        }
        Ok(())
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            n_objects: self.scene.n_objects,
            length: self.scene.length,
            jitter: self.scene.jitter,
            max_objects: self.model.n_queries,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let c = ModelConfig {
            d_model: m.d_model,
            n_queries: m.n_queries,
            n_layers: m.n_layers,
            ffn_dim: m.ffn_dim,
            patch: m.patch,
            height: scenegen::FRAME_HEIGHT,
            width: scenegen::FRAME_WIDTH,
            mem_len: m.mem_len,
            vocab_size: scenegen::VOCABULARY.len(),
        };
        c.validate()?;
        Ok(c)
    }

    /// Hash of the sections that determine the trained weights.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            scene: &'a SceneSection,
            model: &'a ModelSection,
            train: &'a TrainConfig,
        }
        let key = Key { scene: &self.scene, model: &self.model, train: &self.train };
        short_hash(&toml::to_string(&key).expect("config serializes"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        let dir = self.run.checkpoint_dir.clone().unwrap_or_else(|| self.run.out.join("checkpoints"));
        dir.join(format!("model_{}.ckpt", self.model_hash()))
    }
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}
