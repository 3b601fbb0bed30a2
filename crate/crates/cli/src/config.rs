//! One JSON file holds every knob of a run. Keys can be overridden from
//! the command line as `key=value` with dotted paths for nested keys.

use std::fs;
use std::path::Path;

use mdgd_core::matching::{OverlapTrainConfig, ECDF_THRESHOLDS};
use mdgd_core::nn::AdamWConfig;
use mdgd_core::posegraph::{PlaneConfig, RansacConfig};
use mdgd_core::sync::train::SyncTrainConfig;
use mdgd_core::sync::SyncConfig;
use mdgd_core::synth::SceneSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Scene type; selects the translation threshold of registration recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Indoor,
    Outdoor,
}

impl Profile {
    /// Translation threshold (meters) for a pair to count as registered.
    pub fn te_threshold(self) -> f64 {
        match self {
            Profile::Indoor => 0.2,
            Profile::Outdoor => 0.5,
        }
    }
}

/// Edge set of the pose graph: every pair, or the top-k overlap partners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Full,
    Sparse,
}

/// Sync-net training schedule; the network shape lives in `RunConfig::sync`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncTrainSettings {
    pub optim: AdamWConfig,
    pub scenes: SceneSpec,
    pub pool_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SyncTrainSettings {
    fn default() -> Self {
        let d = SyncTrainConfig::default();
        SyncTrainSettings {
            optim: d.optim,
            scenes: d.scenes,
            pool_size: d.pool_size,
            epochs: d.epochs,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Matching-distance thresholds of the four eCDF statistics.
    pub ecdf_thresholds: [f64; 4],
    /// Partners per node in sparse graphs.
    pub k: usize,
    pub graph: GraphKind,
    pub profile: Profile,
    /// Rotation bound (degrees) of registration recall.
    pub rr_rotation_gate_deg: f64,
    pub ransac: RansacConfig,
    pub plane: PlaneConfig,
    pub sync: SyncConfig,
    pub overlap_train: OverlapTrainConfig,
    /// Size of the synthetic statistics dataset for overlap training.
    pub overlap_samples: usize,
    pub sync_train: SyncTrainSettings,
    /// Seed of per-run randomness (synthetic statistics, RANSAC streams).
    pub seed: u64,
    pub overlap_checkpoint: String,
    pub sync_checkpoint: String,
    pub out: String,
    pub dump_intermediates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ecdf_thresholds: ECDF_THRESHOLDS,
            k: 6,
            graph: GraphKind::Sparse,
            profile: Profile::Indoor,
            rr_rotation_gate_deg: 15.0,
            ransac: RansacConfig::default(),
            plane: PlaneConfig::default(),
            sync: SyncConfig::default(),
            overlap_train: OverlapTrainConfig::default(),
            overlap_samples: 10_000,
            sync_train: SyncTrainSettings::default(),
            seed: 0,
            overlap_checkpoint: "overlap.mdgd".into(),
            sync_checkpoint: "sync.mdgd".into(),
            out: "out".into(),
            dump_intermediates: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.ecdf_thresholds.iter().any(|&e| !(e > 0.0)) {
            return bad("ecdf_thresholds must be positive");
        }
        if self.ransac.tau <= 0.0 || self.plane.kappa <= 0.0 || self.rr_rotation_gate_deg <= 0.0 {
            return bad("ransac.tau, plane.kappa and rr_rotation_gate_deg must be positive");
        }
        if self.sync.iterations < 1 {
            return bad("sync.iterations must be >= 1");
        }
        if !(self.sync.gamma > 0.0 && self.sync.gamma <= 1.0) {
            return bad("sync.gamma must lie in (0, 1]");
        }
        if self.sync.d == 0 || self.k == 0 {
            return bad("sync.d and k must be positive");
        }
        if self.ransac.iterations == 0 {
            return bad("ransac.iterations must be positive");
        }
        Ok(())
    }

    pub fn sync_train_config(&self) -> SyncTrainConfig {
        let s = &self.sync_train;
        SyncTrainConfig {
            net: self.sync,
            optim: s.optim,
            scenes: s.scenes,
            pool_size: s.pool_size,
            epochs: s.epochs,
            seed: s.seed,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Sets the key at dotted path `key` to `value`, parsed as JSON when
    /// possible and as a string otherwise. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let next: RunConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}
