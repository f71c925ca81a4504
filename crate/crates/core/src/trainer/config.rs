//! Training configuration: a flat TOML table with every key optional.
//!
//! Keys left out take the defaults below. Unknown keys, malformed values,
//! and invariant violations are all reported together.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::FeatureLayer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Edge,
    Deblur,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Edge => "edge",
            Stage::Deblur => "deblur",
        }
    }
}

/// Ablation variants: which of the restored-edge input and the combined
/// content loss are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    B,
    BE,
    BC,
    Proposed,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::B, Preset::BE, Preset::BC, Preset::Proposed];

    /// `(use_edge, use_combined_content)`
    pub fn flags(self) -> (bool, bool) {
        match self {
            Preset::B => (false, false),
            Preset::BE => (true, false),
            Preset::BC => (false, true),
            Preset::Proposed => (true, true),
        }
    }

    pub fn from_flags(use_edge: bool, use_combined_content: bool) -> Preset {
        match (use_edge, use_combined_content) {
            (false, false) => Preset::B,
            (true, false) => Preset::BE,
            (false, true) => Preset::BC,
            (true, true) => Preset::Proposed,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b" => Ok(Preset::B),
            "be" => Ok(Preset::BE),
            "bc" => Ok(Preset::BC),
            "proposed" => Ok(Preset::Proposed),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected B, BE, BC or proposed)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::B => "B",
            Preset::BE => "BE",
            Preset::BC => "BC",
            Preset::Proposed => "proposed",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: u64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_decay_start_epoch: u64,
    pub lr_end_epoch: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub critic_steps_per_gen: usize,
    pub lambda_content: f64,
    pub lambda_gp: f64,
    /// `(‖∇D‖−1)²` when true, the literal `‖∇D‖−1` otherwise.
    pub gp_squared: bool,
    pub num_scales: usize,
    pub crop: usize,
    pub dc_window: usize,
    pub use_edge: bool,
    pub use_combined_content: bool,
    pub flip_augment: bool,
    pub seed: u64,
    pub edge_width: usize,
    pub deblur_width: usize,
    pub res_blocks: usize,
    pub critic_width: usize,
    pub critic_layers: usize,
    pub feature_layer: String,
    /// Save every this many epochs; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Stop after this many generator steps; 0 means no cap.
    pub max_steps: u64,
    /// Edge-stage checkpoint providing the frozen edge network.
    pub edge_checkpoint: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Deblur,
            epochs: 600,
            lr_initial: 1e-4,
            lr_final: 1e-6,
            lr_decay_start_epoch: 300,
            lr_end_epoch: 600,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            critic_steps_per_gen: 5,
            lambda_content: 100.0,
            lambda_gp: 10.0,
            gp_squared: true,
            num_scales: 3,
            crop: 256,
            dc_window: 35,
            use_edge: true,
            use_combined_content: true,
            flip_augment: false,
            seed: 0,
            edge_width: 32,
            deblur_width: 64,
            res_blocks: 6,
            critic_width: 64,
            critic_layers: 3,
            feature_layer: "conv3_3".into(),
            checkpoint_every: 0,
            max_steps: 0,
            edge_checkpoint: String::new(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Where a configuration comes from; resolved by [`TrainConfig::resolve`].
#[derive(Clone, Debug, Default)]
pub struct ConfigSources<'a> {
    pub file_text: Option<&'a str>,
    /// `key=value` pairs applied after the file.
    pub overrides: &'a [String],
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub stage: Option<Stage>,
}

impl TrainConfig {
    pub fn known_keys() -> Vec<String> {
        match toml::Value::try_from(TrainConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => unreachable!("config serializes to a table"),
        }
    }

    /// Merges file, overrides, seed, preset and stage, then validates. Every
    /// problem found is listed in one `ConfigError`.
    pub fn resolve(src: &ConfigSources) -> Result<TrainConfig> {
        let mut problems = Vec::new();
        let mut table = match src.file_text {
            Some(text) => toml::from_str::<toml::Table>(text).map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        for ov in src.overrides {
            match ov.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => {
                    table.insert(k.trim().to_string(), parse_value(v.trim()));
                }
                _ => problems.push(format!("override {ov:?} is not key=value")),
            }
        }
        let known = Self::known_keys();
        for k in table.keys() {
            if !known.contains(k) {
                problems.push(format!("unknown key {k:?}"));
            }
        }
        if let Some(seed) = src.seed {
            if let Some(v) = table.get("seed") {
                if v.as_integer() != Some(seed as i64) {
                    problems.push(format!("--seed {seed} conflicts with seed = {v}"));
                }
            }
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        if let Some(stage) = src.stage {
            if let Some(v) = table.get("stage") {
                if v.as_str() != Some(stage.name()) {
                    problems.push(format!("stage {v} conflicts with the requested {} stage", stage.name()));
                }
            }
            table.insert("stage".into(), toml::Value::String(stage.name().into()));
        }
        if let Some(p) = src.preset {
            let (e, c) = p.flags();
            for (key, want) in [("use_edge", e), ("use_combined_content", c)] {
                if let Some(v) = table.get(key) {
                    if v.as_bool() != Some(want) {
                        problems.push(format!("preset {p} sets {key} = {want} but the configuration gives {v}"));
                    }
                }
                table.insert(key.into(), toml::Value::Boolean(want));
            }
        }
        table.retain(|k, _| known.iter().any(|n| n == k));
        // type-check each key on its own so every bad value is reported
        let defaults = match toml::Value::try_from(TrainConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let mut typed = true;
        for (k, v) in &table {
            let mut probe = defaults.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = toml::Value::Table(probe).try_into::<TrainConfig>() {
                problems.push(format!("{k} = {v}: {}", e.message()));
                typed = false;
            }
        }
        if typed {
            let cfg: TrainConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            match cfg.validate() {
                Ok(()) if problems.is_empty() => return Ok(cfg),
                Ok(()) => {}
                Err(Error::Config(msg)) => problems.push(msg),
                Err(e) => return Err(e),
            }
        }
        Err(Error::Config(problems.join("; ")))
    }

    /// Copies the run-length keys (epochs, max_steps, checkpoint_every)
    /// from `other`.
    pub fn extend_from(&mut self, other: &TrainConfig) {
        self.epochs = other.epochs;
        self.max_steps = other.max_steps;
        self.checkpoint_every = other.checkpoint_every;
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        Self::resolve(&ConfigSources {
            file_text: Some(text),
            ..Default::default()
        })
    }

    pub fn preset(&self) -> Preset {
        Preset::from_flags(self.use_edge, self.use_combined_content)
    }

    pub fn feature_layer(&self) -> Result<FeatureLayer> {
        FeatureLayer::parse(&self.feature_layer)
            .ok_or_else(|| Error::Config(format!("unknown feature layer {:?}", self.feature_layer)))
    }

    /// Side lengths the training crop and inference padding must divide by:
    /// the coarsest scale has to pass two stride-2 stages and the critic.
    pub fn size_multiple(&self) -> usize {
        let coarse = 4usize.max(1 << self.critic_layers);
        let levels = if self.stage == Stage::Edge { 1 } else { 1 << (self.num_scales.max(1) - 1) };
        coarse * levels
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            p.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        let non_negative = [
            ("lr_initial", self.lr_initial),
            ("lr_final", self.lr_final),
            ("lambda_content", self.lambda_content),
            ("lambda_gp", self.lambda_gp),
        ];
        for (k, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                p.push(format!("{k} must be non-negative, got {v}"));
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                p.push(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if self.lr_final > self.lr_initial {
            p.push(format!("lr_final {} exceeds lr_initial {}", self.lr_final, self.lr_initial));
        }
        if self.lr_decay_start_epoch > self.lr_end_epoch {
            p.push(format!(
                "lr_decay_start_epoch {} is after lr_end_epoch {}",
                self.lr_decay_start_epoch, self.lr_end_epoch
            ));
        }
        let positive_u = [
            ("batch_size", self.batch_size),
            ("critic_steps_per_gen", self.critic_steps_per_gen),
            ("num_scales", self.num_scales),
            ("crop", self.crop),
            ("dc_window", self.dc_window),
            ("edge_width", self.edge_width),
            ("deblur_width", self.deblur_width),
            ("res_blocks", self.res_blocks),
            ("critic_width", self.critic_width),
            ("critic_layers", self.critic_layers),
        ];
        for (k, v) in positive_u {
            if v == 0 {
                p.push(format!("{k} must be positive"));
            }
        }
        if self.dc_window % 2 == 0 {
            p.push(format!("dc_window must be odd, got {}", self.dc_window));
        }
        if self.num_scales > 6 {
            p.push(format!("num_scales {} is unreasonably large", self.num_scales));
        }
        if self.critic_layers > 6 {
            p.push(format!("critic_layers {} is unreasonably large", self.critic_layers));
        }
        if p.is_empty() && self.crop % self.size_multiple() != 0 {
            p.push(format!(
                "crop {} must be a multiple of {} for {} scales and {} critic layers",
                self.crop,
                self.size_multiple(),
                self.num_scales,
                self.critic_layers
            ));
        }
        if let Err(e) = self.feature_layer() {
            p.push(e.to_string());
        }
        if self.stage == Stage::Deblur && self.use_edge && self.edge_checkpoint.is_empty() {
            p.push("use_edge needs edge_checkpoint pointing at a trained edge stage".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// The effective configuration as TOML; resolving it again gives the same
    /// configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the sha256 of [`Self::to_toml`].
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }
}

/// Constant until `lr_decay_start_epoch`, then linear to `lr_final` at
/// `lr_end_epoch`, constant afterwards.
pub fn lr_schedule(epoch: u64, cfg: &TrainConfig) -> f64 {
    let (start, end) = (cfg.lr_decay_start_epoch, cfg.lr_end_epoch);
    if epoch < start {
        cfg.lr_initial
    } else if epoch >= end {
        cfg.lr_final
    } else {
        let t = (epoch - start) as f64 / (end - start) as f64;
        cfg.lr_initial + (cfg.lr_final - cfg.lr_initial) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deblur_b() -> Vec<String> {
        vec!["use_edge=false".into()]
    }

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(299, &c), 1e-4);
        assert_eq!(lr_schedule(600, &c), 1e-6);
        assert_eq!(lr_schedule(10_000, &c), 1e-6);
        assert!((lr_schedule(450, &c) - 5.05e-5).abs() < 1e-18);
        let mut last = f64::INFINITY;
        for e in 0..700 {
            let lr = lr_schedule(e, &c);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn presets_and_conflicts() {
        for p in Preset::ALL {
            let cfg = TrainConfig::resolve(&ConfigSources {
                preset: Some(p),
                stage: Some(Stage::Edge),
                ..Default::default()
            })
            .unwrap();
            assert_eq!((cfg.use_edge, cfg.use_combined_content), p.flags());
            assert_eq!(cfg.preset(), p);
        }
        assert_eq!(Preset::B.flags(), (false, false));
        assert_eq!(Preset::Proposed.flags(), (true, true));
        let ov = vec!["use_edge=true".to_string()];
        let err = TrainConfig::resolve(&ConfigSources {
            overrides: &ov,
            preset: Some(Preset::B),
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("use_edge"));
    }

    #[test]
    fn validation_lists_everything() {
        let ov: Vec<String> = ["crop=0", "bogus=1", "lr_final=1.0"].iter().map(|s| s.to_string()).collect();
        let err = TrainConfig::resolve(&ConfigSources {
            overrides: &ov,
            ..Default::default()
        })
        .unwrap_err()
        .to_string();
        assert!(err.contains("bogus"), "{err}");
        let ov: Vec<String> = ["crop=0", "lr_final=1.0", "dc_window=4"].iter().map(|s| s.to_string()).collect();
        let mut all = deblur_b();
        all.extend(ov);
        let err = TrainConfig::resolve(&ConfigSources {
            overrides: &all,
            ..Default::default()
        })
        .unwrap_err()
        .to_string();
        for needle in ["crop", "lr_final", "dc_window"] {
            assert!(err.contains(needle), "{needle} missing from {err}");
        }
        assert!(TrainConfig::from_toml("crop = 250\nuse_edge = false").is_err());
        assert!(TrainConfig::from_toml("crop = 256\nuse_edge = false").is_ok());
    }

    #[test]
    fn echo_round_trip() {
        let ov: Vec<String> = ["use_edge=false", "crop=64", "seed=7", "feature_layer=\"conv2_2\""]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cfg = TrainConfig::resolve(&ConfigSources {
            overrides: &ov,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.crop, 64);
        assert_eq!(cfg.feature_layer, "conv2_2");
        let again = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }
}
