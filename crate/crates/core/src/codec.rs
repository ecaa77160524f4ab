//! Speech token codec: a non-causal conformer extractor encodes speech tokens
//! into a continuous representation, two independent FSQ branches quantize it
//! into content- and prompt-preference tokens, and a causal transformer
//! combiner reconstructs the speech tokens from those two streams.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsq::{self, FsqLevels};
use crate::nn::{
    causal_mask, cross_entropy, ConformerBlock, Embedding, LayerNorm, Linear, Positions, Scope,
    TransformerBlock,
};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub extractor_layers: usize,
    pub combiner_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub noise_std: f64,
    pub speech_vocab: usize,
    pub max_frames: usize,
    pub content_levels: FsqLevels,
    pub prompt_levels: FsqLevels,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            extractor_layers: 5,
            combiner_layers: 4,
            model_dim: 256,
            heads: 4,
            conv_kernel: 7,
            noise_std: 0.01,
            speech_vocab: 512,
            max_frames: 512,
            content_levels: FsqLevels::content_default(),
            prompt_levels: FsqLevels::prompt_default(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config("model_dim must be a positive multiple of heads".into()));
        }
        if self.speech_vocab == 0 {
            return Err(Error::Config("speech_vocab must be positive".into()));
        }
        Ok(())
    }
}

/// A non-empty sequence of speech tokens below the vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechTokenSeq(pub Vec<u32>);

impl SpeechTokenSeq {
    pub fn new(tokens: Vec<u32>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty speech token sequence".into()));
        }
        check_vocab(&tokens, vocab)?;
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_vocab(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::Vocabulary { token, vocab }),
        None => Ok(()),
    }
}

/// Time-aligned content- and prompt-preference token streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTokenPair {
    pub content: Vec<u32>,
    pub prompt: Vec<u32>,
}

impl PreferenceTokenPair {
    pub fn check_aligned(&self) -> Result<()> {
        if self.content.len() != self.prompt.len() {
            return Err(Error::Alignment(format!(
                "{} content tokens vs {} prompt tokens",
                self.content.len(),
                self.prompt.len()
            )));
        }
        Ok(())
    }
}

/// Output of the two FSQ branches for a batch `[B, T]`.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Pre-quantization branch inputs `[B, T, d_c]`, `[B, T, d_p]`.
    pub content_latent: Tensor,
    pub prompt_latent: Tensor,
    /// Dequantized, straight-through features.
    pub content_q: Tensor,
    pub prompt_q: Tensor,
    /// Flat ids, row-major over `[B, T]`.
    pub content_ids: Vec<u32>,
    pub prompt_ids: Vec<u32>,
}

impl BranchOutput {
    /// Splits flat ids back into per-utterance pairs.
    pub fn pairs(&self, batch: usize) -> Vec<PreferenceTokenPair> {
        let t = self.content_ids.len() / batch.max(1);
        (0..batch)
            .map(|b| PreferenceTokenPair {
                content: self.content_ids[b * t..(b + 1) * t].to_vec(),
                prompt: self.prompt_ids[b * t..(b + 1) * t].to_vec(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PreferenceCodec {
    cfg: CodecConfig,
    embed: Embedding,
    extractor_pos: Positions,
    extractor: Vec<ConformerBlock>,
    content_proj: Linear,
    prompt_proj: Linear,
    content_in: Linear,
    prompt_in: Linear,
    combiner_pos: Positions,
    combiner: Vec<TransformerBlock>,
    combiner_ln: LayerNorm,
    out: Linear,
}

impl PreferenceCodec {
    pub fn new(s: &Scope, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let extractor = (0..cfg.extractor_layers)
            .map(|i| ConformerBlock::new(&s.pp(format!("extractor.{i}")), d, cfg.heads, cfg.conv_kernel))
            .collect::<Result<_>>()?;
        let combiner = (0..cfg.combiner_layers)
            .map(|i| TransformerBlock::new(&s.pp(format!("combiner.{i}")), d, cfg.heads, None))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Embedding::new(&s.pp("embed"), cfg.speech_vocab, d)?,
            extractor_pos: Positions::new(&s.pp("extractor_pos"), cfg.max_frames, d)?,
            extractor,
            content_proj: Linear::new(&s.pp("content_proj"), d, cfg.content_levels.dims())?,
            prompt_proj: Linear::new(&s.pp("prompt_proj"), d, cfg.prompt_levels.dims())?,
            content_in: Linear::new(&s.pp("content_in"), cfg.content_levels.dims(), d)?,
            prompt_in: Linear::new(&s.pp("prompt_in"), cfg.prompt_levels.dims(), d)?,
            combiner_pos: Positions::new(&s.pp("combiner_pos"), cfg.max_frames, d)?,
            combiner,
            combiner_ln: LayerNorm::plain(),
            out: Linear::new(&s.pp("out"), d, cfg.speech_vocab)?,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn content_proj(&self) -> &Linear {
        &self.content_proj
    }

    pub fn prompt_proj(&self) -> &Linear {
        &self.prompt_proj
    }

    /// Batches equal-length token sequences into a `[B, T]` id tensor.
    pub fn ids_tensor(&self, batch: &[&[u32]]) -> Result<Tensor> {
        let t = batch.first().map(|s| s.len()).unwrap_or(0);
        if t == 0 {
            return Err(Error::InvalidInput("empty speech batch".into()));
        }
        let mut flat = Vec::with_capacity(batch.len() * t);
        for s in batch {
            if s.len() != t {
                return Err(Error::Shape("speech batch rows differ in length".into()));
            }
            check_vocab(s, self.cfg.speech_vocab)?;
            flat.extend_from_slice(s);
        }
        Ok(Tensor::from_vec(flat, (batch.len(), t), self.embed.table().device())?)
    }

    /// Continuous representation `Z`, `[B, T, D]`.
    pub fn extract(&self, ids: &Tensor) -> Result<Tensor> {
        let (_, t) = ids.dims2()?;
        let mut x = self.embed.forward(ids)?.broadcast_add(&self.extractor_pos.slice(0, t)?)?;
        for block in &self.extractor {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// Linear projections of `Z` into each branch's FSQ input space.
    pub fn branch_latents(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.content_proj.forward(z)?, self.prompt_proj.forward(z)?))
    }

    pub fn encode_preferences(&self, z: &Tensor) -> Result<BranchOutput> {
        let (content_latent, prompt_latent) = self.branch_latents(z)?;
        let (content_q, content_ids) = fsq::quantize_ste(&content_latent, &self.cfg.content_levels)?;
        let (prompt_q, prompt_ids) = fsq::quantize_ste(&prompt_latent, &self.cfg.prompt_levels)?;
        Ok(BranchOutput {
            content_latent,
            prompt_latent,
            content_q,
            prompt_q,
            content_ids,
            prompt_ids,
        })
    }

    /// Causal reconstruction logits `[B, T, V_s]` from dequantized branch
    /// features `[B, T, d_c]` and `[B, T, d_p]`.
    pub fn combine_features(&self, content_q: &Tensor, prompt_q: &Tensor) -> Result<Tensor> {
        let (_, t, _) = content_q.dims3()?;
        if prompt_q.dims3()?.1 != t {
            return Err(Error::Alignment("branch features differ in length".into()));
        }
        let mut x = (self.content_in.forward(content_q)? + self.prompt_in.forward(prompt_q)?)?
            .broadcast_add(&self.combiner_pos.slice(0, t)?)?;
        let mask = causal_mask(t, x.dtype(), x.device())?;
        for block in &self.combiner {
            x = block.forward(&x, Some(&mask), None)?;
        }
        self.out.forward(&self.combiner_ln.forward(&x)?)
    }

    /// Grid features of token pairs, `[B, T, d]` for each branch.
    pub fn pair_features(&self, pairs: &[PreferenceTokenPair]) -> Result<(Tensor, Tensor)> {
        let t = pairs.first().map(|p| p.content.len()).unwrap_or(0);
        if t == 0 {
            return Err(Error::InvalidInput("empty preference batch".into()));
        }
        let mut content = Vec::new();
        let mut prompt = Vec::new();
        for p in pairs {
            p.check_aligned()?;
            if p.content.len() != t {
                return Err(Error::Shape("preference batch rows differ in length".into()));
            }
            content.extend_from_slice(&p.content);
            prompt.extend_from_slice(&p.prompt);
        }
        let (dtype, dev) = (self.embed.table().dtype(), self.embed.table().device());
        let b = pairs.len();
        let cq = fsq::indices_to_grid_tensor(&content, &self.cfg.content_levels, dtype, dev)?
            .reshape((b, t, self.cfg.content_levels.dims()))?;
        let pq = fsq::indices_to_grid_tensor(&prompt, &self.cfg.prompt_levels, dtype, dev)?
            .reshape((b, t, self.cfg.prompt_levels.dims()))?;
        Ok((cq, pq))
    }

    /// Reconstruction logits from token pairs.
    pub fn combine(&self, pairs: &[PreferenceTokenPair]) -> Result<Tensor> {
        let (cq, pq) = self.pair_features(pairs)?;
        self.combine_features(&cq, &pq)
    }

    /// Deterministic `extract → encode_preferences` for one utterance.
    pub fn encode(&self, speech: &SpeechTokenSeq) -> Result<PreferenceTokenPair> {
        Ok(self.encode_batch(&[&speech.0])?.remove(0))
    }

    pub fn encode_batch(&self, batch: &[&[u32]]) -> Result<Vec<PreferenceTokenPair>> {
        let ids = self.ids_tensor(batch)?;
        let z = self.extract(&ids)?;
        Ok(self.encode_preferences(&z)?.pairs(batch.len()))
    }

    /// Greedy reconstruction `argmax combine(encode(x))`.
    pub fn reconstruct_batch(&self, batch: &[&[u32]]) -> Result<Vec<Vec<u32>>> {
        let pairs = self.encode_batch(batch)?;
        let logits = self.combine(&pairs)?;
        let (b, t, v) = logits.dims3()?;
        let ids = crate::nn::argmax_rows(&logits.reshape((b * t, v))?)?;
        Ok(ids.chunks(t).map(<[u32]>::to_vec).collect())
    }
}

/// `Z + ε`, `ε ~ N(0, std²)` elementwise.
pub fn inject_noise(z: &Tensor, std: f64, rng: &mut CounterRng) -> Result<Tensor> {
    if std < 0.0 || !std.is_finite() {
        return Err(Error::Config(format!("noise std {std} must be >= 0")));
    }
    if std == 0.0 {
        return Ok(z.clone());
    }
    let noise: Vec<f64> = (0..z.elem_count()).map(|_| rng.normal() * std).collect();
    let noise = Tensor::from_vec(noise, z.shape(), z.device())?.to_dtype(z.dtype())?;
    Ok((z + noise)?)
}

/// Mean token cross-entropy of `[B, T, V]` logits against `[B][T]` targets.
pub fn reconstruction_loss(logits: &Tensor, targets: &[&[u32]]) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if targets.len() != b || targets.iter().any(|s| s.len() != t) {
        return Err(Error::Shape(format!(
            "logits [{b}, {t}, {v}] vs {} target rows",
            targets.len()
        )));
    }
    let flat: Vec<u32> = targets.iter().flat_map(|s| s.iter().copied()).collect();
    cross_entropy(&logits.reshape((b * t, v))?, &flat, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, ParamStore};
    use candle_core::DType;

    fn tiny() -> CodecConfig {
        CodecConfig {
            extractor_layers: 2,
            combiner_layers: 2,
            model_dim: 16,
            heads: 2,
            speech_vocab: 32,
            max_frames: 32,
            ..Default::default()
        }
    }

    fn codec(dtype: DType) -> (ParamStore, PreferenceCodec) {
        let store = ParamStore::new(dtype, 11);
        let c = PreferenceCodec::new(&store.root().pp("codec"), &tiny()).unwrap();
        (store, c)
    }

    #[test]
    fn extract_is_frame_aligned_and_deterministic() {
        let (_, c) = codec(DType::F32);
        let x: Vec<u32> = (0..10).collect();
        let ids = c.ids_tensor(&[&x]).unwrap();
        let z1 = c.extract(&ids).unwrap();
        assert_eq!(z1.dims(), &[1, 10, 16]);
        let z2 = c.extract(&ids).unwrap();
        let d = (z1 - z2).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
    }

    #[test]
    fn extractor_is_not_causal() {
        let (_, c) = codec(DType::F64);
        let a: Vec<u32> = (0..8).collect();
        let mut b = a.clone();
        b[7] = 30;
        let za = c.extract(&c.ids_tensor(&[&a]).unwrap()).unwrap();
        let zb = c.extract(&c.ids_tensor(&[&b]).unwrap()).unwrap();
        let first = (za.get(0).unwrap().get(0).unwrap() - zb.get(0).unwrap().get(0).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(scalar(&first).unwrap() > 0.0);
    }

    #[test]
    fn vocabulary_errors() {
        let (_, c) = codec(DType::F32);
        assert!(matches!(c.ids_tensor(&[&[1, 40]]), Err(Error::Vocabulary { token: 40, .. })));
        assert!(SpeechTokenSeq::new(vec![], 32).is_err());
    }

    #[test]
    fn preference_streams_align_and_stay_in_range() {
        let (_, c) = codec(DType::F32);
        let x: Vec<u32> = (0..12).map(|i| (i * 7) % 32).collect();
        let pair = c.encode(&SpeechTokenSeq::new(x.clone(), 32).unwrap()).unwrap();
        assert_eq!(pair.content.len(), 12);
        assert_eq!(pair.prompt.len(), 12);
        assert!(pair.content.iter().all(|&t| t < 1296));
        assert!(pair.prompt.iter().all(|&t| t < 64));
        assert_eq!(pair, c.encode(&SpeechTokenSeq::new(x, 32).unwrap()).unwrap());
    }

    #[test]
    fn noise_contract() {
        let z = Tensor::ones((2, 3), DType::F64, &candle_core::Device::Cpu).unwrap();
        let mut rng = CounterRng::new(0, "n");
        let same = inject_noise(&z, 0.0, &mut rng).unwrap();
        assert_eq!(same.to_vec2::<f64>().unwrap(), z.to_vec2::<f64>().unwrap());
        assert!(matches!(inject_noise(&z, -1.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn combine_rejects_misaligned_pairs() {
        let (_, c) = codec(DType::F32);
        let p = PreferenceTokenPair { content: vec![1, 2, 3], prompt: vec![1, 2] };
        assert!(matches!(c.combine(&[p]), Err(Error::Alignment(_))));
    }

    #[test]
    fn combiner_output_shape() {
        let (_, c) = codec(DType::F32);
        let p = PreferenceTokenPair { content: vec![1, 2, 3, 4], prompt: vec![5, 6, 7, 8] };
        assert_eq!(c.combine(&[p]).unwrap().dims(), &[1, 4, 32]);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros((2, 5, 512), DType::F64, &candle_core::Device::Cpu).unwrap();
        let t: Vec<u32> = vec![3, 1, 4, 1, 5];
        let l = scalar(&reconstruction_loss(&logits, &[&t, &t]).unwrap()).unwrap();
        assert!((l - 512f64.ln()).abs() < 1e-12);
        assert!((512f64.ln() - 6.238).abs() < 1e-3);
    }
}
