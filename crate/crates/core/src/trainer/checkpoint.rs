//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.txt   key=value lines (fingerprints, counters, rng state, hashes)
//! <dir>/tensors.bin    named-tensor store: generator/, critic/, their Adam
//!                      moments under *.adam_m/ and *.adam_v/, and edge/ for
//!                      the frozen edge network of a deblur-stage run
//! <dir>/config.toml    effective configuration
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::{Stage, TrainConfig};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::nets::params::Param;
use crate::nets::{store, ModelParams, ParamSet};

pub const FORMAT: &str = "edgeblur-checkpoint-1";
const MANIFEST: &str = "manifest.txt";
const TENSORS: &str = "tensors.bin";
const CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Position inside the current epoch, in samples.
    pub cursor: u64,
    pub global_step: u64,
    pub critic_steps: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub generator: ModelParams,
    pub generator_opt: Adam,
    pub critic: ModelParams,
    pub critic_opt: Adam,
    pub edge: Option<ModelParams>,
}

impl Checkpoint {
    pub fn stage(&self) -> Stage {
        self.config.stage
    }

    fn tensors(&self) -> Vec<Param<f32>> {
        let mut t = Vec::new();
        t.extend(store::prefixed(&self.generator.params, "generator"));
        t.extend(store::prefixed(&self.generator_opt.m, "generator.adam_m"));
        t.extend(store::prefixed(&self.generator_opt.v, "generator.adam_v"));
        t.extend(store::prefixed(&self.critic.params, "critic"));
        t.extend(store::prefixed(&self.critic_opt.m, "critic.adam_m"));
        t.extend(store::prefixed(&self.critic_opt.v, "critic.adam_v"));
        if let Some(e) = &self.edge {
            t.extend(store::prefixed(&e.params, "edge"));
        }
        t
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = self.tensors();
        let bytes = store::encode(&tensors.iter().collect::<Vec<_>>());
        let config = self.config.to_toml();
        let mut m = vec![
            ("format", FORMAT.to_string()),
            ("stage", self.stage().name().to_string()),
            ("epoch", self.epoch.to_string()),
            ("cursor", self.cursor.to_string()),
            ("global_step", self.global_step.to_string()),
            ("critic_steps", self.critic_steps.to_string()),
            ("config_hash", self.config.hash()),
            ("rng_seed", hex::encode(self.rng_seed)),
            ("rng_word_pos", self.rng_word_pos.to_string()),
            ("generator_fingerprint", self.generator.fingerprint.clone()),
            ("generator_adam_t", self.generator_opt.t.to_string()),
            ("critic_fingerprint", self.critic.fingerprint.clone()),
            ("critic_adam_t", self.critic_opt.t.to_string()),
        ];
        if let Some(e) = &self.edge {
            m.push(("edge_fingerprint", e.fingerprint.clone()));
        }
        m.push(("tensors_sha256", hex::encode(Sha256::digest(&bytes))));
        let manifest: String = m.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let write = |name: &str, data: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, data).map_err(|e| Error::io(&p, e))
        };
        write(TENSORS, &bytes)?;
        write(CONFIG, config.as_bytes())?;
        write(MANIFEST, manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest = String::from_utf8(read(MANIFEST)?)
            .map_err(|_| Error::Integrity(format!("{}: manifest is not UTF-8", dir.display())))?;
        let kv: BTreeMap<&str, &str> = manifest.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Integrity(format!("{}: manifest lacks {k}", dir.display())))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Integrity(format!("{}: bad {k}", dir.display())))
        };
        if get("format")? != FORMAT {
            return Err(Error::Integrity(format!("{}: unsupported checkpoint format", dir.display())));
        }
        let bytes = read(TENSORS)?;
        if hex::encode(Sha256::digest(&bytes)) != get("tensors_sha256")? {
            return Err(Error::Integrity(format!("{}: tensors.bin does not match its hash", dir.display())));
        }
        let config_text = String::from_utf8(read(CONFIG)?)
            .map_err(|_| Error::Integrity(format!("{}: config is not UTF-8", dir.display())))?;
        let config = TrainConfig::from_toml(&config_text)?;
        if config.hash() != get("config_hash")? {
            return Err(Error::Integrity(format!("{}: config.toml does not match config_hash", dir.display())));
        }
        if config.stage.name() != get("stage")? {
            return Err(Error::Integrity(format!("{}: stage disagrees with config", dir.display())));
        }
        let tensors = store::decode(&bytes)?;
        let set = |prefix: &str| store::take_prefixed(&tensors, prefix);
        let model = |prefix: &str, key: &str| -> Result<ModelParams> {
            Ok(ModelParams {
                fingerprint: get(key)?.to_string(),
                params: set(prefix),
            })
        };
        let mut rng_seed = [0u8; 32];
        hex::decode_to_slice(get("rng_seed")?, &mut rng_seed)
            .map_err(|_| Error::Integrity(format!("{}: bad rng_seed", dir.display())))?;
        let rng_word_pos = get("rng_word_pos")?
            .parse()
            .map_err(|_| Error::Integrity(format!("{}: bad rng_word_pos", dir.display())))?;
        let edge = match kv.get("edge_fingerprint") {
            Some(_) => Some(model("edge", "edge_fingerprint")?),
            None => None,
        };
        Ok(Checkpoint {
            epoch: num("epoch")?,
            cursor: num("cursor")?,
            global_step: num("global_step")?,
            critic_steps: num("critic_steps")?,
            rng_seed,
            rng_word_pos,
            generator: model("generator", "generator_fingerprint")?,
            generator_opt: Adam {
                t: num("generator_adam_t")?,
                m: set("generator.adam_m"),
                v: set("generator.adam_v"),
            },
            critic: model("critic", "critic_fingerprint")?,
            critic_opt: Adam {
                t: num("critic_adam_t")?,
                m: set("critic.adam_m"),
                v: set("critic.adam_v"),
            },
            edge,
            config,
        })
    }
}

/// Checks a parameter set loaded from disk against its architecture.
pub(crate) fn check_model(
    what: &str,
    arch: &impl crate::nets::Architecture,
    model: &ModelParams,
) -> Result<()> {
    model
        .check(arch)
        .and_then(|_| model.params.check_against(arch.specs()))
        .map_err(|e| Error::Model(format!("{what}: {e}")))
}

pub(crate) fn check_moments(what: &str, params: &ParamSet<f32>, opt: &Adam) -> Result<()> {
    let specs_match = |s: &ParamSet<f32>| {
        s.len() == params.len()
            && s.params()
                .iter()
                .zip(params.params())
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    };
    if specs_match(&opt.m) && specs_match(&opt.v) {
        Ok(())
    } else {
        Err(Error::Integrity(format!("{what}: optimizer moments do not match parameters")))
    }
}
