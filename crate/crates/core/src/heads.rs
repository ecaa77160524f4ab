//! Auxiliary supervision of the two preference branches: an ASR text decoder
//! reading only content-branch features, and a contrastive prompt head
//! reading only prompt-branch features.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, cross_entropy, scalar, Embedding, Init, LayerNorm, Linear, MultiHeadAttention,
    Positions, Scope, TransformerBlock,
};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_asr: f64,
    pub lambda_clap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_asr: 2.0,
            lambda_clap: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    pub asr_layers: usize,
    pub asr_dim: usize,
    pub asr_heads: usize,
    pub max_text: usize,
    pub clap_dim: usize,
    pub clap_queries: usize,
    pub clap_heads: usize,
    pub clap_width: usize,
    pub init_temperature: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            asr_layers: 2,
            asr_dim: 256,
            asr_heads: 4,
            max_text: 256,
            clap_dim: 128,
            clap_queries: 4,
            clap_heads: 4,
            clap_width: 256,
            init_temperature: 0.07,
        }
    }
}

/// Weighted sum of the three codec objectives (scalar form).
pub fn total_codec_loss(l_rec: f64, l_asr: f64, l_clap: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_rec", l_rec), ("L_asr", l_asr), ("L_clap", l_clap)] {
        if !v.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
    }
    Ok(l_rec + w.lambda_asr * l_asr + w.lambda_clap * l_clap)
}

/// Tensor form of [`total_codec_loss`] for backpropagation.
pub fn total_codec_loss_tensor(l_rec: &Tensor, l_asr: &Tensor, l_clap: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((l_rec + (l_asr * w.lambda_asr)?)? + (l_clap * w.lambda_clap)?)?)
}

/// Small autoregressive character decoder cross-attending to content-branch
/// features.
#[derive(Debug, Clone)]
pub struct AsrHead {
    memory_in: Linear,
    memory_pos: Positions,
    embed: Embedding,
    pos: Positions,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    out: Linear,
}

impl AsrHead {
    pub fn new(s: &Scope, cfg: &HeadsConfig, content_dims: usize, max_frames: usize) -> Result<Self> {
        let d = cfg.asr_dim;
        let blocks = (0..cfg.asr_layers)
            .map(|i| TransformerBlock::new(&s.pp(format!("block.{i}")), d, cfg.asr_heads, Some(d)))
            .collect::<Result<_>>()?;
        Ok(Self {
            memory_in: Linear::new(&s.pp("memory_in"), content_dims, d)?,
            memory_pos: Positions::new(&s.pp("memory_pos"), max_frames, d)?,
            embed: Embedding::new(&s.pp("embed"), text::TEXT_VOCAB, d)?,
            pos: Positions::new(&s.pp("pos"), cfg.max_text + 1, d)?,
            blocks,
            ln: LayerNorm::plain(),
            out: Linear::new(&s.pp("out"), d, text::TEXT_VOCAB)?,
        })
    }

    /// Teacher-forced text logits `[B, L + 1, V_text]` for equal-length texts.
    pub fn logits(&self, content_feats: &Tensor, texts: &[&[u32]]) -> Result<Tensor> {
        let (b, t, _) = content_feats.dims3()?;
        if texts.len() != b {
            return Err(Error::Shape(format!("{} texts for a batch of {b}", texts.len())));
        }
        let l = texts[0].len();
        if texts.iter().any(|x| x.len() != l) {
            return Err(Error::Shape("ASR batch texts differ in length".into()));
        }
        let memory = self
            .memory_in
            .forward(content_feats)?
            .broadcast_add(&self.memory_pos.slice(0, t)?)?;
        let mut input = Vec::with_capacity(b * (l + 1));
        for x in texts {
            input.push(text::BOS);
            input.extend_from_slice(x);
        }
        let ids = Tensor::from_vec(input, (b, l + 1), content_feats.device())?;
        let mut h = self.embed.forward(&ids)?.broadcast_add(&self.pos.slice(0, l + 1)?)?;
        let mask = causal_mask(l + 1, h.dtype(), h.device())?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&mask), Some((&memory, None)))?;
        }
        self.out.forward(&self.ln.forward(&h)?)
    }

    /// Teacher-forced cross-entropy predicting `text` then end-of-text.
    pub fn loss(&self, content_feats: &Tensor, texts: &[&[u32]]) -> Result<Tensor> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidTarget("empty ASR text".into()));
        }
        let logits = self.logits(content_feats, texts)?;
        let (b, l1, v) = logits.dims3()?;
        let targets: Vec<u32> = texts
            .iter()
            .flat_map(|x| x.iter().copied().chain(std::iter::once(text::EOS)))
            .collect();
        cross_entropy(&logits.reshape((b * l1, v))?, &targets, None)
    }

    pub fn out(&self) -> &Linear {
        &self.out
    }
}

/// Learned-query cross-attention pooling of prompt-branch features into a
/// fixed-length unit-norm embedding, with a learnable temperature.
#[derive(Debug, Clone)]
pub struct ClapHead {
    memory_in: Linear,
    queries: Tensor,
    attn: MultiHeadAttention,
    proj: Linear,
    log_temperature: Tensor,
}

impl ClapHead {
    pub fn new(s: &Scope, cfg: &HeadsConfig, prompt_dims: usize) -> Result<Self> {
        let w = cfg.clap_width;
        Ok(Self {
            memory_in: Linear::new(&s.pp("memory_in"), prompt_dims, w)?,
            queries: s.get("queries", &[cfg.clap_queries, w], Init::Normal(1.0))?,
            attn: MultiHeadAttention::new(&s.pp("attn"), w, cfg.clap_heads)?,
            proj: Linear::new(&s.pp("proj"), w, cfg.clap_dim)?,
            log_temperature: s.get("log_temperature", &[1], Init::Constant(cfg.init_temperature.ln()))?,
        })
    }

    /// Embeddings `[B, E]` from prompt features `[B, T, d_p]`, `T >= 1`.
    pub fn pool(&self, prompt_feats: &Tensor) -> Result<Tensor> {
        let (b, t, _) = prompt_feats.dims3()?;
        if t == 0 {
            return Err(Error::InvalidInput("empty prompt-feature sequence".into()));
        }
        let memory = self.memory_in.forward(prompt_feats)?;
        let (nq, w) = self.queries.dims2()?;
        let q = self.queries.unsqueeze(0)?.broadcast_as((b, nq, w))?.contiguous()?;
        let attended = self.attn.forward(&q, &memory, None)?;
        let pooled = attended.mean(1)?;
        let e = self.proj.forward(&pooled)?;
        l2_normalize(&e)
    }

    pub fn temperature(&self) -> Result<Tensor> {
        Ok(self.log_temperature.maximum(0.01f64.ln())?.exp()?)
    }

    pub fn temperature_value(&self) -> Result<f64> {
        scalar(&self.temperature()?.squeeze(0)?)
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Symmetric InfoNCE over the `B x B` cosine-similarity matrix scaled by
/// `1 / temperature`, with matching rows as targets. `temperature` is a
/// one-element tensor.
pub fn clap_loss(audio: &Tensor, text_emb: &Tensor, temperature: &Tensor) -> Result<Tensor> {
    let (b, e) = audio.dims2()?;
    if text_emb.dims2()? != (b, e) {
        return Err(Error::Shape("audio and text embedding batches differ".into()));
    }
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("contrastive batch of {b}")));
    }
    let sims = audio.matmul(&text_emb.t()?)?;
    let logits = sims.broadcast_div(&temperature.reshape((1, 1))?)?;
    let targets: Vec<u32> = (0..b as u32).collect();
    let a2t = cross_entropy(&logits, &targets, None)?;
    let t2a = cross_entropy(&logits.t()?.contiguous()?, &targets, None)?;
    Ok(((a2t + t2a)? * 0.5)?)
}

/// Scalar-temperature convenience wrapper around [`clap_loss`].
pub fn clap_loss_with(audio: &Tensor, text_emb: &Tensor, temperature: f64) -> Result<Tensor> {
    let tau = Tensor::new(&[temperature], audio.device())?.to_dtype(audio.dtype())?;
    clap_loss(audio, text_emb, &tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn composition_examples() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_asr, 2.0);
        assert_eq!(w.lambda_clap, 0.8);
        assert!((total_codec_loss(1.0, 0.5, 0.25, &w).unwrap() - 2.2).abs() < 1e-12);
        assert_eq!(total_codec_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let zero = LossWeights { lambda_asr: 0.0, lambda_clap: 0.0 };
        assert_eq!(total_codec_loss(1.7, 3.0, 9.0, &zero).unwrap(), 1.7);
        assert!(matches!(total_codec_loss(f64::NAN, 0.0, 0.0, &w), Err(Error::Numeric(_))));
    }

    #[test]
    fn identical_embeddings_give_log_two() {
        let v = Tensor::new(&[[0.6f64, 0.8], [0.6, 0.8]], &Device::Cpu).unwrap();
        let l = scalar(&clap_loss_with(&v, &v, 0.07).unwrap()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_matches_vanish_at_low_temperature() {
        let v = Tensor::new(&[[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &Device::Cpu).unwrap();
        let l = scalar(&clap_loss_with(&v, &v, 1e-3).unwrap()).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let v = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        assert!(matches!(clap_loss_with(&v, &v, 0.07), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn temperature_initialised_to_007() {
        let store = crate::nn::ParamStore::new(DType::F64, 0);
        let head = ClapHead::new(&store.root(), &HeadsConfig::default(), 3).unwrap();
        assert!((head.temperature_value().unwrap() - 0.07).abs() < 1e-12);
    }
}
