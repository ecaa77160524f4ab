//! Run configuration: a TOML tree merged over built-in defaults, with
//! dotted `key=value` overrides and a resolved snapshot written per run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::{HeadsConfig, LossWeights};
use crate::codec::CodecConfig;
use crate::lm::{LmConfig, Sampling};
use crate::system::CodecSystemConfig;
use crate::world::{SplitRatios, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Total utterances across the three splits.
    pub n: usize,
    pub split: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 11_000, split: SplitRatios::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn codec_default() -> Self {
        Self { epochs: 20, batch_size: 32, lr: 1e-4, weight_decay: 0.01, max_steps: 0, log_every: 50 }
    }

    pub fn lm_default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 1e-5, weight_decay: 0.01, max_steps: 0, log_every: 50 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// `greedy`, `top_k` or `temperature`.
    pub kind: String,
    pub k: usize,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { kind: "greedy".into(), k: 10, temperature: 1.0 }
    }
}

impl SamplingConfig {
    pub fn to_sampling(&self) -> Result<Sampling> {
        match self.kind.as_str() {
            "greedy" => Ok(Sampling::Greedy),
            "top_k" => Ok(Sampling::TopK { k: self.k, temperature: self.temperature }),
            "temperature" => Ok(Sampling::Temperature { temperature: self.temperature }),
            other => Err(Error::Config(format!("unknown sampling kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Generation budget in speech tokens.
    pub max_len: usize,
    pub sampling: SamplingConfig,
    /// Evaluate generation on at most this many test utterances; 0 = all.
    pub limit: usize,
    /// Utterances per contrastive retrieval batch.
    pub retrieval_batch: usize,
    /// Training utterances used to fit the style probes.
    pub probe_train: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub bench_texts: usize,
    pub bench_steps: usize,
    pub bench_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_len: 64,
            sampling: SamplingConfig::default(),
            limit: 0,
            retrieval_batch: 8,
            probe_train: 2000,
            probe_epochs: 300,
            probe_lr: 0.05,
            bench_texts: 8,
            bench_steps: 32,
            bench_repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Root seed; every component seed derives from it, including
    /// `world.seed`, which is overwritten on resolution.
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub heads: HeadsConfig,
    pub loss: LossWeights,
    pub lm: LmConfig,
    pub train_codec: TrainConfig,
    pub train_lm: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            heads: HeadsConfig::default(),
            loss: LossWeights::default(),
            lm: LmConfig::default(),
            train_codec: TrainConfig::codec_default(),
            train_lm: TrainConfig::lm_default(),
            eval: EvalConfig::default(),
        }
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    let text = toml::to_string(v).map_err(|e| Error::Config(format!("serializing config: {e}")))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("re-reading config: {e}")))
}

fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in over {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(Error::Config(format!("unknown config key {path}"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c=value` in `table`; the key must already exist.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let slot = cur
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
            *slot = parse_value(raw.trim());
            return Ok(());
        }
        cur = match cur.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        };
    }
    Err(Error::Config(format!("empty override key in {spec:?}")))
}

impl RunConfig {
    /// Defaults, then `file_text`, then `overrides`, then validation.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = to_table(&RunConfig::default())?;
        if let Some(text) = file_text {
            let over: toml::Table =
                toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
            merge(&mut table, over, "")?;
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.world.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.codec.validate()?;
        self.lm.validate()?;
        self.train_codec.validate()?;
        self.train_lm.validate()?;
        self.eval.sampling.to_sampling()?;
        if self.codec.speech_vocab != self.world.vocab_size() {
            return Err(Error::Config(format!(
                "codec.speech_vocab {} differs from the world vocabulary {}",
                self.codec.speech_vocab,
                self.world.vocab_size()
            )));
        }
        if self.lm.speech_vocab != self.codec.speech_vocab {
            return Err(Error::Config("lm.speech_vocab must equal codec.speech_vocab".into()));
        }
        if self.lm.content_levels != self.codec.content_levels || self.lm.prompt_levels != self.codec.prompt_levels {
            return Err(Error::Config("lm and codec FSQ levels differ".into()));
        }
        Ok(())
    }

    pub fn codec_system(&self) -> CodecSystemConfig {
        CodecSystemConfig {
            codec: self.codec.clone(),
            heads: self.heads.clone(),
            weights: self.loss,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short content hash of the resolved config.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..12].to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::DecodingMode;

    #[test]
    fn stage_learning_rates_default_per_stage() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.train_codec.lr, 1e-4);
        assert_eq!(c.train_lm.lr, 1e-5);
        let c = RunConfig::resolve(Some("[train_lm]\nepochs = 2\n"), &[]).unwrap();
        assert_eq!(c.train_lm.lr, 1e-5);
        assert_eq!(c.train_lm.epochs, 2);
    }

    #[test]
    fn overrides_are_typed_and_checked() {
        let o = vec![
            "lm.decoding_mode=parallel".to_string(),
            "train_codec.batch_size=8".to_string(),
            "codec.noise_std=0.0".to_string(),
            "seed=7".to_string(),
        ];
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(c.lm.decoding_mode, DecodingMode::Parallel);
        assert_eq!(c.train_codec.batch_size, 8);
        assert_eq!(c.codec.noise_std, 0.0);
        assert_eq!(c.world.seed, 7);
        assert!(matches!(RunConfig::resolve(None, &["lm.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, &["lm.width".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(Some("[bogus]\nx=1\n"), &[]), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::resolve(None, &["lm.mask_prob_hidden=2.0".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::resolve(None, &["lm.aux_weight=0.25".into()]).unwrap();
        let back = RunConfig::resolve(Some(&c.to_toml().unwrap()), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash().unwrap(), back.hash().unwrap());
    }
}
