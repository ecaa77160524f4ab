//! The codec together with its supervision heads: the unit trained in the
//! first stage and persisted as one checkpoint.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{inject_noise, reconstruction_loss, BranchOutput, CodecConfig, PreferenceCodec};
use crate::error::{Error, Result};
use crate::heads::{clap_loss, total_codec_loss_tensor, AsrHead, ClapHead, HeadsConfig, LossWeights};
use crate::nn::{scalar, ParamStore};
use crate::prompts::PromptTextEncoder;
use crate::rng::CounterRng;
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CodecSystemConfig {
    pub codec: CodecConfig,
    pub heads: HeadsConfig,
    pub weights: LossWeights,
}

/// One codec training example.
#[derive(Debug, Clone)]
pub struct CodecExample<'a> {
    pub speech: &'a [u32],
    pub text: &'a str,
    pub prompt: &'a str,
}

/// Loss tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct CodecLosses {
    pub rec: Tensor,
    pub asr: Tensor,
    pub clap: Option<Tensor>,
    pub total: Tensor,
}

impl CodecLosses {
    /// `(rec, asr, clap, total)` as floats; clap is 0 when absent.
    pub fn values(&self) -> Result<(f64, f64, f64, f64)> {
        let clap = match &self.clap {
            Some(c) => scalar(c)?,
            None => 0.0,
        };
        Ok((scalar(&self.rec)?, scalar(&self.asr)?, clap, scalar(&self.total)?))
    }
}

#[derive(Debug, Clone)]
pub struct CodecSystem {
    cfg: CodecSystemConfig,
    store: ParamStore,
    pub codec: PreferenceCodec,
    pub asr: AsrHead,
    pub clap: ClapHead,
    text_encoder: PromptTextEncoder,
}

impl CodecSystem {
    pub fn new(cfg: &CodecSystemConfig, dtype: DType, seed: u64) -> Result<Self> {
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let codec = PreferenceCodec::new(&root.pp("codec"), &cfg.codec)?;
        let asr = AsrHead::new(
            &root.pp("asr"),
            &cfg.heads,
            cfg.codec.content_levels.dims(),
            cfg.codec.max_frames,
        )?;
        let clap = ClapHead::new(&root.pp("clap"), &cfg.heads, cfg.codec.prompt_levels.dims())?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            codec,
            asr,
            clap,
            text_encoder: PromptTextEncoder::new(cfg.heads.clap_dim),
        })
    }

    pub fn config(&self) -> &CodecSystemConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn text_encoder(&self) -> &PromptTextEncoder {
        &self.text_encoder
    }

    /// Frozen text embeddings `[B, E]` of prompt strings.
    pub fn prompt_text_embeddings(&self, prompts: &[&str]) -> Result<Tensor> {
        let e = self.text_encoder.dim();
        let flat: Vec<f64> = prompts.iter().flat_map(|p| self.text_encoder.embed(p)).collect();
        Ok(Tensor::from_vec(flat, (prompts.len(), e), self.store.device())?.to_dtype(self.store.dtype())?)
    }

    /// Branch outputs of an equal-length batch, with training noise when
    /// `noise` is given.
    pub fn branches(&self, speech: &[&[u32]], noise: Option<&mut CounterRng>) -> Result<BranchOutput> {
        let ids = self.codec.ids_tensor(speech)?;
        let mut z = self.codec.extract(&ids)?;
        if let Some(rng) = noise {
            z = inject_noise(&z, self.cfg.codec.noise_std, rng)?;
        }
        self.codec.encode_preferences(&z)
    }

    /// Reconstruction, ASR and contrastive losses plus their weighted total.
    /// The contrastive term needs at least two examples and is skipped
    /// otherwise.
    pub fn losses(&self, batch: &[CodecExample<'_>], noise: Option<&mut CounterRng>) -> Result<CodecLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty codec batch".into()));
        }
        let speech: Vec<&[u32]> = batch.iter().map(|e| e.speech).collect();
        let br = self.branches(&speech, noise)?;
        let logits = self.codec.combine_features(&br.content_q, &br.prompt_q)?;
        let rec = reconstruction_loss(&logits, &speech)?;
        let texts: Vec<Vec<u32>> = batch.iter().map(|e| text::encode_chars(e.text)).collect();
        let text_refs: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
        let asr = self.asr.loss(&br.content_q, &text_refs)?;
        let clap = if batch.len() >= 2 {
            let audio = self.clap.pool(&br.prompt_q)?;
            let prompts: Vec<&str> = batch.iter().map(|e| e.prompt).collect();
            let text_emb = self.prompt_text_embeddings(&prompts)?;
            Some(clap_loss(&audio, &text_emb, &self.clap.temperature()?)?)
        } else {
            None
        };
        let zero = rec.zeros_like()?;
        let total = total_codec_loss_tensor(&rec, &asr, clap.as_ref().unwrap_or(&zero), &self.cfg.weights)?;
        Ok(CodecLosses { rec, asr, clap, total })
    }

    /// Pooled prompt-branch embeddings `[B, E]` for an equal-length batch.
    pub fn audio_embeddings(&self, speech: &[&[u32]]) -> Result<Tensor> {
        let br = self.branches(speech, None)?;
        self.clap.pool(&br.prompt_q)
    }
}
