//! Text-to-token language model: an autoregressive transformer backbone over
//! instruction text and previously generated speech tokens, followed by a
//! small inner decoder that emits a content token, a prompt token and a
//! speech token at every step, each conditioned on the ones before it.

use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsq::FsqLevels;
use crate::nn::{
    causal_mask, cross_entropy, scalar, Embedding, Init, KvCache, LayerNorm, Linear, Positions,
    Scope, TransformerBlock,
};
use crate::rng::CounterRng;
use crate::text::{self, InstructionText};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    /// content -> prompt -> speech through the inner decoder.
    #[default]
    Hierarchical,
    /// All heads read the decoder's first position; no inner conditioning.
    Parallel,
    /// A single linear speech head on the backbone hidden state.
    SingleStep,
}

impl DecodingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hierarchical => "hierarchical",
            Self::Parallel => "parallel",
            Self::SingleStep => "single_step",
        }
    }
}

impl FromStr for DecodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "parallel" => Ok(Self::Parallel),
            "single_step" | "single-step" => Ok(Self::SingleStep),
            other => Err(Error::Config(format!("unknown decoding mode {other:?}"))),
        }
    }
}

/// One inner-decoder output stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Content,
    Prompt,
    Speech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub backbone_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_context: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoding_mode: DecodingMode,
    pub use_content_tokens: bool,
    pub use_prompt_tokens: bool,
    /// When false the instruction is replaced by an empty string at train
    /// and generation time.
    pub use_instruction: bool,
    pub mask_prob_hidden: f64,
    pub mask_prob_prompt: f64,
    pub content_weight: f64,
    pub prompt_weight: f64,
    pub speech_weight: f64,
    pub aux_weight: f64,
    pub speech_vocab: usize,
    pub content_levels: FsqLevels,
    pub prompt_levels: FsqLevels,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            backbone_layers: 4,
            width: 256,
            heads: 4,
            max_context: 1024,
            decoder_layers: 2,
            decoder_heads: 4,
            decoding_mode: DecodingMode::Hierarchical,
            use_content_tokens: true,
            use_prompt_tokens: true,
            use_instruction: true,
            mask_prob_hidden: 0.15,
            mask_prob_prompt: 0.15,
            content_weight: 0.5,
            prompt_weight: 0.5,
            speech_weight: 1.0,
            aux_weight: 0.5,
            speech_vocab: 512,
            content_levels: FsqLevels::content_default(),
            prompt_levels: FsqLevels::prompt_default(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mask_prob_hidden", self.mask_prob_hidden),
            ("mask_prob_prompt", self.mask_prob_prompt),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        for (name, w) in [
            ("content_weight", self.content_weight),
            ("prompt_weight", self.prompt_weight),
            ("speech_weight", self.speech_weight),
            ("aux_weight", self.aux_weight),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} = {w} must be finite and >= 0")));
            }
        }
        for (name, w, h) in [
            ("backbone", self.width, self.heads),
            ("decoder", self.width, self.decoder_heads),
        ] {
            if h == 0 || w == 0 || w % h != 0 {
                return Err(Error::Config(format!("{name} width {w} not divisible by {h} heads")));
            }
        }
        if self.speech_vocab == 0 || self.max_context < 2 || self.backbone_layers == 0 {
            return Err(Error::Config("speech_vocab, max_context and backbone_layers must be positive".into()));
        }
        Ok(())
    }

    /// End-of-speech id, one past the last speech token.
    pub fn eos(&self) -> u32 {
        self.speech_vocab as u32
    }

    pub fn content_size(&self) -> usize {
        self.content_levels.codebook_size() as usize
    }

    pub fn prompt_size(&self) -> usize {
        self.prompt_levels.codebook_size() as usize
    }

    /// Streams the model predicts, in inner-decoder order.
    pub fn stages(&self) -> Vec<Stage> {
        match self.decoding_mode {
            DecodingMode::SingleStep => vec![Stage::Speech],
            _ => {
                let mut s = Vec::with_capacity(3);
                if self.use_content_tokens {
                    s.push(Stage::Content);
                }
                if self.use_prompt_tokens {
                    s.push(Stage::Prompt);
                }
                s.push(Stage::Speech);
                s
            }
        }
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages().contains(&stage)
    }

    fn has_aux(&self) -> bool {
        self.aux_weight > 0.0 && self.decoding_mode != DecodingMode::SingleStep
    }
}

/// The seven configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmVariant {
    Proposed,
    NoContentPref,
    NoPromptPref,
    NoDualPref,
    NoInstructText,
    Parallel,
    SingleStep,
}

impl LmVariant {
    pub const ALL: [LmVariant; 7] = [
        Self::Proposed,
        Self::NoContentPref,
        Self::NoPromptPref,
        Self::NoDualPref,
        Self::NoInstructText,
        Self::Parallel,
        Self::SingleStep,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::NoContentPref => "w/o content-pref",
            Self::NoPromptPref => "w/o prompt-pref",
            Self::NoDualPref => "w/o dual-pref",
            Self::NoInstructText => "w/o instruct text",
            Self::Parallel => "parallel",
            Self::SingleStep => "single-step",
        }
    }

    pub fn apply(self, base: &LmConfig) -> LmConfig {
        let mut c = base.clone();
        c.decoding_mode = DecodingMode::Hierarchical;
        c.use_content_tokens = true;
        c.use_prompt_tokens = true;
        c.use_instruction = true;
        match self {
            Self::Proposed => {}
            Self::NoContentPref => c.use_content_tokens = false,
            Self::NoPromptPref => c.use_prompt_tokens = false,
            Self::NoDualPref => {
                c.use_content_tokens = false;
                c.use_prompt_tokens = false;
            }
            Self::NoInstructText => c.use_instruction = false,
            Self::Parallel => c.decoding_mode = DecodingMode::Parallel,
            Self::SingleStep => c.decoding_mode = DecodingMode::SingleStep,
        }
        c
    }
}

/// Per-step masking decisions for the inner decoder inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepMasks {
    pub hidden: Vec<bool>,
    pub prompt: Vec<bool>,
}

/// Independent per-step Bernoulli masking decisions.
pub fn sample_masks(steps: usize, cfg: &LmConfig, rng: &mut CounterRng) -> Result<StepMasks> {
    cfg.validate()?;
    let mut hidden = Vec::with_capacity(steps);
    let mut prompt = Vec::with_capacity(steps);
    for _ in 0..steps {
        hidden.push(rng.bernoulli(cfg.mask_prob_hidden));
        prompt.push(rng.bernoulli(cfg.mask_prob_prompt));
    }
    Ok(StepMasks { hidden, prompt })
}

fn mask_column(rows: &[bool], like: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = rows.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (rows.len(), 1), like.device())?.to_dtype(like.dtype())?)
}

/// Rows of `x` `[N, W]` flagged in `rows` are replaced by `replacement` `[W]`.
pub fn replace_rows(x: &Tensor, replacement: &Tensor, rows: &[bool]) -> Result<Tensor> {
    if !rows.iter().any(|&m| m) {
        return Ok(x.clone());
    }
    let m = mask_column(rows, x)?;
    let keep = (m.ones_like()? - &m)?;
    let rep = replacement.unsqueeze(0)?;
    Ok((x.broadcast_mul(&keep)? + m.broadcast_mul(&rep)?)?)
}

/// Embedding of one of the two preference streams fused with a projection of
/// the logits it was drawn from.
#[derive(Debug, Clone)]
struct TokenInput {
    embed: Embedding,
    logit_proj: Linear,
    fuse: Linear,
}

impl TokenInput {
    fn new(s: &Scope, vocab: usize, width: usize) -> Result<Self> {
        Ok(Self {
            embed: Embedding::new(&s.pp("embed"), vocab, width)?,
            logit_proj: Linear::new(&s.pp("logit_proj"), vocab, width)?,
            fuse: Linear::new(&s.pp("fuse"), 2 * width, width)?,
        })
    }

    fn forward(&self, tokens: &[u32], logits: &Tensor, mask: Option<(&Tensor, &[bool])>) -> Result<Tensor> {
        let vocab = self.embed.count();
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Vocabulary { token: t, vocab });
        }
        let ids = Tensor::from_vec(tokens.to_vec(), tokens.len(), logits.device())?;
        let mut emb = self.embed.forward(&ids)?;
        if let Some((vec, rows)) = mask {
            emb = replace_rows(&emb, vec, rows)?;
        }
        let lp = self.logit_proj.forward(logits)?;
        self.fuse.forward(&Tensor::cat(&[&emb, &lp], 1)?)
    }
}

/// Lightweight causal transformer over at most three inner positions.
#[derive(Debug, Clone)]
struct InnerDecoder {
    h_in: Linear,
    hidden_mask: Tensor,
    pos: Positions,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    content_in: Option<TokenInput>,
    prompt_in: Option<TokenInput>,
    prompt_mask: Option<Tensor>,
    content_head: Option<Linear>,
    prompt_head: Option<Linear>,
    speech_head: Linear,
}

/// Incremental state of the inner decoder for a batch of steps.
struct InnerState {
    caches: Vec<KvCache>,
    position: usize,
    out: Tensor,
}

impl InnerDecoder {
    fn new(s: &Scope, cfg: &LmConfig) -> Result<Self> {
        let w = cfg.width;
        let stages = cfg.stages();
        let has = |st| stages.contains(&st);
        let blocks = (0..cfg.decoder_layers)
            .map(|i| TransformerBlock::new(&s.pp(format!("block.{i}")), w, cfg.decoder_heads, None))
            .collect::<Result<_>>()?;
        let hier = cfg.decoding_mode == DecodingMode::Hierarchical;
        Ok(Self {
            h_in: Linear::new(&s.pp("h_in"), w, w)?,
            hidden_mask: s.get("hidden_mask", &[w], Init::Normal(0.02))?,
            pos: Positions::new(&s.pp("pos"), 3, w)?,
            blocks,
            ln: LayerNorm::plain(),
            content_in: if hier && has(Stage::Content) {
                Some(TokenInput::new(&s.pp("content_in"), cfg.content_size(), w)?)
            } else {
                None
            },
            prompt_in: if hier && has(Stage::Prompt) {
                Some(TokenInput::new(&s.pp("prompt_in"), cfg.prompt_size(), w)?)
            } else {
                None
            },
            prompt_mask: if hier && has(Stage::Prompt) {
                Some(s.get("prompt_mask", &[w], Init::Normal(0.02))?)
            } else {
                None
            },
            content_head: if has(Stage::Content) {
                Some(Linear::new(&s.pp("content_head"), w, cfg.content_size())?)
            } else {
                None
            },
            prompt_head: if has(Stage::Prompt) {
                Some(Linear::new(&s.pp("prompt_head"), w, cfg.prompt_size())?)
            } else {
                None
            },
            speech_head: Linear::new(&s.pp("speech_head"), w, cfg.speech_vocab + 1)?,
        })
    }

    fn advance(&self, state: Option<InnerState>, x: &Tensor) -> Result<InnerState> {
        let (mut caches, position) = match state {
            Some(s) => (s.caches, s.position + 1),
            None => (vec![KvCache::default(); self.blocks.len()], 0),
        };
        let pos = self.pos.slice(position, 1)?.squeeze(0)?;
        let mut h = x.broadcast_add(&pos)?.unsqueeze(1)?;
        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            h = block.forward_cached(&h, cache)?;
        }
        let out = self.ln.forward(&h.squeeze(1)?)?;
        Ok(InnerState { caches, position, out })
    }

    /// Position 0 from hidden states `[N, W]`, optionally masked per row.
    fn start(&self, h: &Tensor, hidden_mask: Option<&[bool]>) -> Result<InnerState> {
        let mut x = self.h_in.forward(h)?;
        if let Some(rows) = hidden_mask {
            x = replace_rows(&x, &self.hidden_mask, rows)?;
        }
        self.advance(None, &x)
    }

    fn head(&self, stage: Stage) -> Result<&Linear> {
        match stage {
            Stage::Content => self.content_head.as_ref(),
            Stage::Prompt => self.prompt_head.as_ref(),
            Stage::Speech => Some(&self.speech_head),
        }
        .ok_or_else(|| Error::Config(format!("{stage:?} stream is disabled")))
    }

    fn logits(&self, state: &InnerState, stage: Stage) -> Result<Tensor> {
        self.head(stage)?.forward(&state.out)
    }

    /// Feeds the token just chosen for `stage` as the next inner position.
    fn push(
        &self,
        state: InnerState,
        stage: Stage,
        tokens: &[u32],
        logits: &Tensor,
        prompt_mask: Option<&[bool]>,
    ) -> Result<InnerState> {
        let x = match stage {
            Stage::Content => self
                .content_in
                .as_ref()
                .ok_or_else(|| Error::Config("content stream is disabled".into()))?
                .forward(tokens, logits, None)?,
            Stage::Prompt => {
                let input = self
                    .prompt_in
                    .as_ref()
                    .ok_or_else(|| Error::Config("prompt stream is disabled".into()))?;
                let mask = match (&self.prompt_mask, prompt_mask) {
                    (Some(v), Some(rows)) => Some((v, rows)),
                    _ => None,
                };
                input.forward(tokens, logits, mask)?
            }
            Stage::Speech => return Err(Error::InvalidInput("speech is the final stream".into())),
        };
        self.advance(Some(state), &x)
    }
}

/// Logits of every enabled stream for a batch of steps.
#[derive(Debug, Clone)]
pub struct StepLogits {
    pub content: Option<Tensor>,
    pub prompt: Option<Tensor>,
    pub speech: Tensor,
    pub content_ids: Vec<u32>,
    pub prompt_ids: Vec<u32>,
}

/// One emitted step. Preference tokens are absent in single-step mode and
/// for streams an ablation removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTokens {
    pub content: Option<u32>,
    pub prompt: Option<u32>,
    pub speech: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndOfSpeech,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// Every emitted step, including the terminating one.
    pub steps: Vec<StepTokens>,
    /// Generated speech tokens without the terminator.
    pub speech: Vec<u32>,
    pub stop_reason: StopReason,
}

impl GenerationOutput {
    /// Content stream aligned with `speech` (terminating step dropped).
    pub fn content(&self) -> Vec<u32> {
        self.steps.iter().take(self.speech.len()).filter_map(|s| s.content).collect()
    }

    pub fn prompt(&self) -> Vec<u32> {
        self.steps.iter().take(self.speech.len()).filter_map(|s| s.prompt).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
    Temperature { temperature: f64 },
}

impl Sampling {
    fn validate(&self) -> Result<()> {
        match *self {
            Sampling::Greedy => Ok(()),
            Sampling::TopK { k, temperature } if k > 0 && temperature > 0.0 => Ok(()),
            Sampling::Temperature { temperature } if temperature > 0.0 => Ok(()),
            other => Err(Error::Config(format!("invalid sampling {other:?}"))),
        }
    }

    /// Picks one token per row of `[N, V]` logits.
    pub fn pick(&self, logits: &Tensor, rng: &mut CounterRng) -> Result<Vec<u32>> {
        if matches!(self, Sampling::Greedy) {
            return crate::nn::argmax_rows(logits);
        }
        let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        rows.iter().map(|r| Ok(self.pick_row(r, rng))).collect()
    }

    fn pick_row(&self, row: &[f64], rng: &mut CounterRng) -> u32 {
        let (k, t) = match *self {
            Sampling::Greedy => (1, 1.0),
            Sampling::TopK { k, temperature } => (k.min(row.len()), temperature),
            Sampling::Temperature { temperature } => (row.len(), temperature),
        };
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.truncate(k);
        let top = row[idx[0]];
        let weights: Vec<f64> = idx.iter().map(|&i| ((row[i] - top) / t).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.unit() * total;
        for (&i, w) in idx.iter().zip(&weights) {
            if u < *w {
                return i as u32;
            }
            u -= w;
        }
        idx[idx.len() - 1] as u32
    }
}

/// A teacher-forced training example. All three token streams are
/// frame-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmExample {
    pub instruction: String,
    pub content_text: String,
    pub content: Vec<u32>,
    pub prompt: Vec<u32>,
    pub speech: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct LossComponent {
    pub name: &'static str,
    pub weight: f64,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct LmLoss {
    pub components: Vec<LossComponent>,
    pub total: Tensor,
}

/// Loss values as plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub components: Vec<(String, f64, f64)>,
    pub total: f64,
}

impl LmLoss {
    pub fn record(&self) -> Result<LossRecord> {
        let components = self
            .components
            .iter()
            .map(|c| Ok((c.name.to_string(), c.weight, scalar(&c.value)?)))
            .collect::<Result<_>>()?;
        Ok(LossRecord { components, total: scalar(&self.total)? })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.components.iter().map(|c| c.name).collect()
    }
}

/// Instruction, content and speech segments.
const SEGMENTS: usize = 3;

/// Tracks the segment and offset of successive backbone ids. `SEP` closes
/// the instruction segment and `BOS_SPEECH` the content segment, so speech
/// step `j` always sits at offset `j` of the speech segment regardless of
/// text lengths.
#[derive(Debug, Clone, Copy, Default)]
struct SegmentCursor {
    segment: usize,
    offset: usize,
}

impl SegmentCursor {
    /// Position-table row for `id`. Offsets beyond `max` saturate; the
    /// caller bounds total length separately.
    fn next(&mut self, id: u32, max: usize) -> u32 {
        if id as usize >= text::TEXT_VOCAB && self.segment < 2 {
            self.segment = 2;
            self.offset = 0;
        }
        let row = self.segment * max + self.offset.min(max - 1);
        self.offset += 1;
        if (id == text::SEP && self.segment == 0) || (id == text::BOS_SPEECH && self.segment == 1) {
            self.segment += 1;
            self.offset = 0;
        }
        row as u32
    }
}

/// Cached backbone state of one generation session.
#[derive(Debug, Clone)]
pub struct LmSession {
    caches: Vec<KvCache>,
    len: usize,
    cursor: SegmentCursor,
    hidden: Tensor,
}

impl LmSession {
    /// Last hidden state `[1, W]`.
    pub fn hidden(&self) -> &Tensor {
        &self.hidden
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Which speech head drives a generation loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeechPath {
    /// The configured decoding mode.
    Model,
    /// The auxiliary linear head on `h`; used as the single-step latency
    /// reference for models trained with a decoder.
    Aux,
}

#[derive(Debug, Clone)]
pub struct HierarchicalLm {
    cfg: LmConfig,
    embed: Embedding,
    /// Position embeddings indexed by segment and offset within it.
    pos: Embedding,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    aux: Linear,
    decoder: Option<InnerDecoder>,
    direct: Option<Linear>,
}

impl HierarchicalLm {
    pub fn new(s: &Scope, cfg: &LmConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let b = s.pp("backbone");
        let blocks = (0..cfg.backbone_layers)
            .map(|i| TransformerBlock::new(&b.pp(format!("block.{i}")), w, cfg.heads, None))
            .collect::<Result<_>>()?;
        let single = cfg.decoding_mode == DecodingMode::SingleStep;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Embedding::new(&b.pp("embed"), text::TEXT_VOCAB + cfg.speech_vocab, w)?,
            pos: Embedding::new(&b.pp("pos"), SEGMENTS * cfg.max_context, w)?,
            blocks,
            ln: LayerNorm::plain(),
            aux: Linear::new(&s.pp("aux"), w, cfg.speech_vocab + 1)?,
            decoder: if single { None } else { Some(InnerDecoder::new(&s.pp("decoder"), cfg)?) },
            direct: if single { Some(Linear::new(&s.pp("direct"), w, cfg.speech_vocab + 1)?) } else { None },
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    /// Backbone text tokens for an instruction, honouring `use_instruction`.
    pub fn text_tokens(&self, text: &InstructionText) -> Vec<u32> {
        if self.cfg.use_instruction {
            text.tokens()
        } else {
            InstructionText::new("", text.content_text.clone()).tokens()
        }
    }

    fn speech_ids(&self, speech: &[u32]) -> Result<Vec<u32>> {
        let v = self.cfg.speech_vocab;
        speech
            .iter()
            .map(|&s| {
                if s as usize >= v {
                    Err(Error::Vocabulary { token: s, vocab: v })
                } else {
                    Ok(text::TEXT_VOCAB as u32 + s)
                }
            })
            .collect()
    }

    fn check_context(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_context {
            return Err(Error::ContextOverflow { len, max: self.cfg.max_context });
        }
        Ok(())
    }

    /// Backbone states `[B, T, W]` for right-padded rows of backbone ids.
    fn backbone(&self, rows: &[Vec<u32>]) -> Result<Tensor> {
        let t = rows.iter().map(Vec::len).max().unwrap_or(0);
        if t == 0 {
            return Err(Error::InvalidInput("empty backbone input".into()));
        }
        self.check_context(t)?;
        let flat: Vec<u32> = rows
            .iter()
            .flat_map(|r| r.iter().copied().chain(std::iter::repeat(text::PAD).take(t - r.len())))
            .collect();
        let dev = self.aux.weight().device();
        let positions: Vec<u32> = rows
            .iter()
            .flat_map(|r| {
                let mut cursor = SegmentCursor::default();
                let mut p: Vec<u32> = r.iter().map(|&id| cursor.next(id, self.cfg.max_context)).collect();
                p.resize(t, 0);
                p
            })
            .collect();
        let ids = Tensor::from_vec(flat, (rows.len(), t), dev)?;
        let positions = Tensor::from_vec(positions, (rows.len(), t), dev)?;
        let mut h = (self.embed.forward(&ids)? + self.pos.forward(&positions)?)?;
        let mask = causal_mask(t, h.dtype(), dev)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&mask), None)?;
        }
        self.ln.forward(&h)
    }

    /// Hidden states `[j + 1, W]` for every step up to and including the one
    /// following `speech_prefix` (length `j`).
    pub fn hidden_states(&self, text: &InstructionText, speech_prefix: &[u32]) -> Result<Tensor> {
        let mut row = self.text_tokens(text);
        let start = row.len() - 1;
        row.extend(self.speech_ids(speech_prefix)?);
        let h = self.backbone(&[row])?.squeeze(0)?;
        Ok(h.narrow(0, start, speech_prefix.len() + 1)?)
    }

    /// Hidden state `[1, W]` at the position following `speech_prefix`.
    pub fn lm_hidden_step(&self, text: &InstructionText, speech_prefix: &[u32]) -> Result<Tensor> {
        let h = self.hidden_states(text, speech_prefix)?;
        Ok(h.narrow(0, speech_prefix.len(), 1)?)
    }

    fn decoder(&self) -> Result<&InnerDecoder> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Config("single_step mode has no inner decoder".into()))
    }

    /// Content logits `[N, 1296]` from hidden states `[N, W]`.
    pub fn decode_content(&self, h: &Tensor) -> Result<Tensor> {
        let d = self.decoder()?;
        d.logits(&d.start(h, None)?, Stage::Content)
    }

    /// Prompt logits `[N, 64]`; `content` is ignored when the content stream
    /// is disabled or decoding is parallel.
    pub fn decode_prompt(&self, h: &Tensor, content: Option<(&[u32], &Tensor)>) -> Result<Tensor> {
        let d = self.decoder()?;
        let mut st = d.start(h, None)?;
        if self.cfg.decoding_mode == DecodingMode::Hierarchical && self.cfg.use_content_tokens {
            let (c, cl) = content.ok_or_else(|| Error::InvalidInput("content token required".into()))?;
            st = d.push(st, Stage::Content, c, cl, None)?;
        }
        d.logits(&st, Stage::Prompt)
    }

    /// Speech logits `[N, V_s + 1]`. Token inputs of disabled streams are
    /// ignored; single-step mode reads `h` only.
    pub fn decode_speech(
        &self,
        h: &Tensor,
        content: Option<(&[u32], &Tensor)>,
        prompt: Option<(&[u32], &Tensor)>,
    ) -> Result<Tensor> {
        if let Some(direct) = &self.direct {
            return direct.forward(h);
        }
        let d = self.decoder()?;
        let mut st = d.start(h, None)?;
        if self.cfg.decoding_mode == DecodingMode::Hierarchical {
            if self.cfg.use_content_tokens {
                let (c, cl) = content.ok_or_else(|| Error::InvalidInput("content token required".into()))?;
                st = d.push(st, Stage::Content, c, cl, None)?;
            }
            if self.cfg.use_prompt_tokens {
                let (p, pl) = prompt.ok_or_else(|| Error::InvalidInput("prompt token required".into()))?;
                st = d.push(st, Stage::Prompt, p, pl, None)?;
            }
        }
        d.logits(&st, Stage::Speech)
    }

    /// Affine map from hidden states to speech logits, used only as an
    /// auxiliary training target.
    pub fn aux_speech_logits(&self, h: &Tensor) -> Result<Tensor> {
        self.aux.forward(h)
    }

    /// Runs the configured per-step decoding for hidden states `[N, W]`.
    /// `choose` picks the token of each preference stream from its logits.
    pub fn decode_step(
        &self,
        h: &Tensor,
        masks: Option<&StepMasks>,
        choose: &mut dyn FnMut(Stage, &Tensor) -> Result<Vec<u32>>,
    ) -> Result<StepLogits> {
        if let Some(direct) = &self.direct {
            return Ok(StepLogits {
                content: None,
                prompt: None,
                speech: direct.forward(h)?,
                content_ids: vec![],
                prompt_ids: vec![],
            });
        }
        let d = self.decoder()?;
        let mut st = d.start(h, masks.map(|m| m.hidden.as_slice()))?;
        let mut out = StepLogits {
            content: None,
            prompt: None,
            speech: h.clone(),
            content_ids: vec![],
            prompt_ids: vec![],
        };
        if self.cfg.decoding_mode == DecodingMode::Parallel {
            for stage in self.cfg.stages() {
                let logits = d.logits(&st, stage)?;
                match stage {
                    Stage::Content => {
                        out.content_ids = choose(stage, &logits)?;
                        out.content = Some(logits);
                    }
                    Stage::Prompt => {
                        out.prompt_ids = choose(stage, &logits)?;
                        out.prompt = Some(logits);
                    }
                    Stage::Speech => out.speech = logits,
                }
            }
            return Ok(out);
        }
        for stage in self.cfg.stages() {
            let logits = d.logits(&st, stage)?;
            match stage {
                Stage::Speech => {
                    out.speech = logits;
                    break;
                }
                Stage::Content => {
                    let ids = choose(stage, &logits)?;
                    st = d.push(st, stage, &ids, &logits, None)?;
                    out.content_ids = ids;
                    out.content = Some(logits);
                }
                Stage::Prompt => {
                    let ids = choose(stage, &logits)?;
                    st = d.push(st, stage, &ids, &logits, masks.map(|m| m.prompt.as_slice()))?;
                    out.prompt_ids = ids;
                    out.prompt = Some(logits);
                }
            }
        }
        Ok(out)
    }

    /// Teacher-forced loss over a batch. With `rng`, stochastic masking of
    /// the decoder inputs is applied (training); without it, none is.
    pub fn loss(&self, batch: &[LmExample], rng: Option<&mut CounterRng>) -> Result<LmLoss> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty LM batch".into()));
        }
        let eos = self.cfg.eos();
        let mut rows = Vec::with_capacity(batch.len());
        let mut starts = Vec::with_capacity(batch.len());
        let mut content_t: Vec<Option<u32>> = Vec::new();
        let mut prompt_t: Vec<Option<u32>> = Vec::new();
        let mut speech_t: Vec<u32> = Vec::new();
        for ex in batch {
            let n = ex.speech.len();
            if ex.content.len() != n || ex.prompt.len() != n {
                return Err(Error::Alignment(format!(
                    "speech {n}, content {}, prompt {}",
                    ex.content.len(),
                    ex.prompt.len()
                )));
            }
            let mut row = self.text_tokens(&InstructionText::new(ex.instruction.clone(), ex.content_text.clone()));
            starts.push(row.len() - 1);
            row.extend(self.speech_ids(&ex.speech)?);
            rows.push(row);
            content_t.extend(ex.content.iter().map(|&c| Some(c)).chain(std::iter::once(None)));
            prompt_t.extend(ex.prompt.iter().map(|&p| Some(p)).chain(std::iter::once(None)));
            speech_t.extend(ex.speech.iter().copied().chain(std::iter::once(eos)));
        }
        let hs = self.backbone(&rows)?;
        let (b, t, w) = hs.dims3()?;
        let mut index = Vec::with_capacity(speech_t.len());
        for (i, ex) in batch.iter().enumerate() {
            index.extend((0..=ex.speech.len()).map(|j| (i * t + starts[i] + j) as u32));
        }
        let n_steps = index.len();
        let idx = Tensor::from_vec(index, n_steps, hs.device())?;
        let h = hs.reshape((b * t, w))?.index_select(&idx, 0)?;

        let masks = match rng {
            Some(r) => Some(sample_masks(n_steps, &self.cfg, r)?),
            None => None,
        };
        let mut choose = |stage: Stage, logits: &Tensor| -> Result<Vec<u32>> {
            let teacher = match stage {
                Stage::Content => &content_t,
                Stage::Prompt => &prompt_t,
                Stage::Speech => return Err(Error::InvalidInput("speech is not chosen".into())),
            };
            if teacher.iter().all(Option::is_some) {
                return Ok(teacher.iter().map(|t| t.unwrap_or(0)).collect());
            }
            let greedy = crate::nn::argmax_rows(&logits.detach())?;
            Ok(teacher.iter().zip(greedy).map(|(t, g)| t.unwrap_or(g)).collect())
        };
        let out = self.decode_step(&h, masks.as_ref(), &mut choose)?;

        let pref_weights: Vec<f64> = content_t.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }).collect();
        let mut components = Vec::new();
        if let Some(cl) = &out.content {
            let targets: Vec<u32> = content_t.iter().map(|t| t.unwrap_or(0)).collect();
            components.push(LossComponent {
                name: "content",
                weight: self.cfg.content_weight,
                value: cross_entropy(cl, &targets, Some(&pref_weights))?,
            });
        }
        if let Some(pl) = &out.prompt {
            let targets: Vec<u32> = prompt_t.iter().map(|t| t.unwrap_or(0)).collect();
            components.push(LossComponent {
                name: "prompt",
                weight: self.cfg.prompt_weight,
                value: cross_entropy(pl, &targets, Some(&pref_weights))?,
            });
        }
        components.push(LossComponent {
            name: "speech",
            weight: self.cfg.speech_weight,
            value: cross_entropy(&out.speech, &speech_t, None)?,
        });
        if self.cfg.has_aux() {
            components.push(LossComponent {
                name: "aux",
                weight: self.cfg.aux_weight,
                value: cross_entropy(&self.aux.forward(&h)?, &speech_t, None)?,
            });
        }
        let mut total: Option<Tensor> = None;
        for c in &components {
            let term = (&c.value * c.weight)?;
            total = Some(match total {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        let total = total.ok_or_else(|| Error::InvalidInput("no loss components".into()))?;
        Ok(LmLoss { components, total })
    }

    /// Prefills the backbone with instruction tokens.
    pub fn start_session(&self, text: &InstructionText) -> Result<LmSession> {
        let tokens = self.text_tokens(text);
        self.check_context(tokens.len())?;
        let mut session = LmSession {
            caches: vec![KvCache::default(); self.blocks.len()],
            len: 0,
            cursor: SegmentCursor::default(),
            hidden: Tensor::zeros((1, self.cfg.width), self.aux.weight().dtype(), self.aux.weight().device())?,
        };
        self.feed(&mut session, &tokens)?;
        Ok(session)
    }

    fn feed(&self, session: &mut LmSession, ids: &[u32]) -> Result<()> {
        let n = ids.len();
        self.check_context(session.len + n)?;
        let dev = self.aux.weight().device();
        let positions: Vec<u32> = ids.iter().map(|&id| session.cursor.next(id, self.cfg.max_context)).collect();
        let x = Tensor::from_vec(ids.to_vec(), (1, n), dev)?;
        let positions = Tensor::from_vec(positions, (1, n), dev)?;
        let mut h = (self.embed.forward(&x)? + self.pos.forward(&positions)?)?;
        for (block, cache) in self.blocks.iter().zip(session.caches.iter_mut()) {
            h = block.forward_cached(&h, cache)?;
        }
        session.hidden = self.ln.forward(&h.narrow(1, n - 1, 1)?.squeeze(1)?)?;
        session.len += n;
        Ok(())
    }

    /// Appends one generated speech token to the backbone context.
    pub fn feed_speech(&self, session: &mut LmSession, token: u32) -> Result<()> {
        let ids = self.speech_ids(&[token])?;
        self.feed(session, &ids)
    }

    pub fn generate(
        &self,
        text: &InstructionText,
        max_len: usize,
        sampling: Sampling,
        rng: &mut CounterRng,
    ) -> Result<GenerationOutput> {
        self.generate_with(text, max_len, sampling, rng, SpeechPath::Model, false)
    }

    /// Generation loop. With `ignore_eos` the loop always runs `max_len`
    /// steps, which fixes the work for latency measurement.
    pub fn generate_with(
        &self,
        text: &InstructionText,
        max_len: usize,
        sampling: Sampling,
        rng: &mut CounterRng,
        path: SpeechPath,
        ignore_eos: bool,
    ) -> Result<GenerationOutput> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        sampling.validate()?;
        let eos = self.cfg.eos();
        let mut session = self.start_session(text)?;
        let mut steps = Vec::new();
        let mut speech = Vec::new();
        let mut stop_reason = StopReason::MaxLen;
        for j in 0..max_len {
            let h = session.hidden().clone();
            let (content, prompt, logits) = match path {
                SpeechPath::Aux => (None, None, self.aux.forward(&h)?),
                SpeechPath::Model => {
                    let mut choose = |_: Stage, l: &Tensor| sampling.pick(l, rng);
                    let out = self.decode_step(&h, None, &mut choose)?;
                    (out.content_ids.first().copied(), out.prompt_ids.first().copied(), out.speech)
                }
            };
            let mut s = sampling.pick(&logits, rng)?[0];
            if ignore_eos && s == eos {
                s = crate::nn::argmax_rows(&logits.narrow(1, 0, self.cfg.speech_vocab)?)?[0];
            }
            steps.push(StepTokens { content, prompt, speech: s });
            if s == eos {
                stop_reason = StopReason::EndOfSpeech;
                break;
            }
            speech.push(s);
            if j + 1 < max_len {
                self.feed_speech(&mut session, s)?;
            }
        }
        Ok(GenerationOutput { steps, speech, stop_reason })
    }
}

/// Per-token wall-clock latency of the configured decoding path against the
/// single-step path on the same backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: DecodingMode,
    pub steps_per_text: usize,
    pub mode_median_ms: f64,
    pub mode_mean_ms: f64,
    pub single_step_median_ms: f64,
    pub single_step_mean_ms: f64,
    pub ratio: f64,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_path(
    lm: &HierarchicalLm,
    texts: &[InstructionText],
    steps: usize,
    path: SpeechPath,
    repeats: usize,
) -> Result<Vec<f64>> {
    let mut per_token = Vec::with_capacity(texts.len() * repeats);
    for _ in 0..repeats {
        for t in texts {
            let mut rng = CounterRng::new(0, "latency");
            let start = Instant::now();
            let out = lm.generate_with(t, steps, Sampling::Greedy, &mut rng, path, true)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            per_token.push(ms / out.steps.len() as f64);
        }
    }
    Ok(per_token)
}

/// Measures both paths with interleaved repeats after one warm-up pass.
/// The ratio is the mode's median over the single-step median; a model in
/// single-step mode is compared with itself.
pub fn benchmark_latency(
    lm: &HierarchicalLm,
    texts: &[InstructionText],
    steps: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    if texts.is_empty() {
        return Err(Error::InvalidInput("empty text set".into()));
    }
    let repeats = repeats.max(1);
    let mode = lm.config().decoding_mode;
    time_path(lm, &texts[..1], steps, SpeechPath::Model, 1)?;
    time_path(lm, &texts[..1], steps, SpeechPath::Aux, 1)?;
    let mut model_ms = Vec::new();
    let mut single_ms = Vec::new();
    for _ in 0..repeats {
        model_ms.extend(time_path(lm, texts, steps, SpeechPath::Model, 1)?);
        if mode != DecodingMode::SingleStep {
            single_ms.extend(time_path(lm, texts, steps, SpeechPath::Aux, 1)?);
        }
    }
    if mode == DecodingMode::SingleStep {
        single_ms = model_ms.clone();
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mode_mean_ms = mean(&model_ms);
    let single_step_mean_ms = mean(&single_ms);
    let mode_median_ms = median(&mut model_ms);
    let single_step_median_ms = median(&mut single_ms);
    Ok(LatencyReport {
        mode,
        steps_per_text: steps,
        mode_median_ms,
        mode_mean_ms,
        single_step_median_ms,
        single_step_mean_ms,
        ratio: mode_median_ms / single_step_median_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, ParamStore};
    use candle_core::Var;

    fn tiny(mode: DecodingMode) -> LmConfig {
        LmConfig {
            backbone_layers: 2,
            width: 16,
            heads: 2,
            max_context: 64,
            decoder_layers: 2,
            decoder_heads: 2,
            decoding_mode: mode,
            speech_vocab: 12,
            ..Default::default()
        }
    }

    fn model(cfg: &LmConfig, dtype: DType) -> (ParamStore, HierarchicalLm) {
        let store = ParamStore::new(dtype, 21);
        let lm = HierarchicalLm::new(&store.root().pp("lm"), cfg).unwrap();
        (store, lm)
    }

    fn text() -> InstructionText {
        InstructionText::new("speak calmly", "hello")
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    fn example(seed: u64) -> LmExample {
        let mut r = CounterRng::new(seed, "example");
        let n = 6;
        LmExample {
            instruction: "speak calmly".into(),
            content_text: "hi".into(),
            content: (0..n).map(|_| r.below(1296) as u32).collect(),
            prompt: (0..n).map(|_| r.below(64) as u32).collect(),
            speech: (0..n).map(|_| r.below(12) as u32).collect(),
        }
    }

    #[test]
    fn backbone_is_causal_under_future_perturbation() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let a = vec![1, 2, 3, 4, 5, 6, 7];
        let mut b = a.clone();
        for x in &mut b[4..] {
            *x = 11;
        }
        let ha = lm.hidden_states(&text(), &a).unwrap();
        let hb = lm.hidden_states(&text(), &b).unwrap();
        // step j sees speech tokens < j, so steps 0..=4 must agree exactly.
        assert_eq!(max_abs(&ha.narrow(0, 0, 5).unwrap(), &hb.narrow(0, 0, 5).unwrap()), 0.0);
        assert!(max_abs(&ha.narrow(0, 5, 1).unwrap(), &hb.narrow(0, 5, 1).unwrap()) > 0.0);
    }

    #[test]
    fn backbone_prefix_truncation_is_exact() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let full = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let hf = lm.hidden_states(&text(), &full).unwrap();
        for j in 0..full.len() {
            let hj = lm.lm_hidden_step(&text(), &full[..j]).unwrap();
            assert_eq!(max_abs(&hj, &hf.narrow(0, j, 1).unwrap()), 0.0, "step {j}");
        }
    }

    #[test]
    fn cached_session_matches_full_pass() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F64);
        let prefix = vec![5, 0, 7];
        let mut s = lm.start_session(&text()).unwrap();
        for &t in &prefix {
            lm.feed_speech(&mut s, t).unwrap();
        }
        let full = lm.lm_hidden_step(&text(), &prefix).unwrap();
        assert!(max_abs(s.hidden(), &full) < 1e-10);
    }

    #[test]
    fn hidden_state_is_deterministic_and_reads_instruction() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let a = lm.lm_hidden_step(&text(), &[1, 2]).unwrap();
        let b = lm.lm_hidden_step(&text(), &[1, 2]).unwrap();
        assert_eq!(max_abs(&a, &b), 0.0);
        let c = lm.lm_hidden_step(&InstructionText::new("shout", "hello"), &[1, 2]).unwrap();
        assert!(max_abs(&a, &c) > 0.0);
    }

    #[test]
    fn context_overflow_is_reported() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let long = vec![1u32; 80];
        assert!(matches!(lm.hidden_states(&text(), &long), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn decoder_shapes() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let h = lm.lm_hidden_step(&text(), &[]).unwrap();
        let cl = lm.decode_content(&h).unwrap();
        assert_eq!(cl.dims(), &[1, 1296]);
        let c = crate::nn::argmax_rows(&cl).unwrap();
        assert!(c[0] < 1296);
        let pl = lm.decode_prompt(&h, Some((&c, &cl))).unwrap();
        assert_eq!(pl.dims(), &[1, 64]);
        let p = crate::nn::argmax_rows(&pl).unwrap();
        let sl = lm.decode_speech(&h, Some((&c, &cl)), Some((&p, &pl))).unwrap();
        assert_eq!(sl.dims(), &[1, 13]);
        assert_eq!(lm.aux_speech_logits(&h).unwrap().dims(), &[1, 13]);
        assert!(lm.decode_prompt(&h, Some((&[5000], &cl))).is_err());
    }

    #[test]
    fn factorization_order_is_exact() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let h = lm.hidden_states(&text(), &[1, 2, 3]).unwrap();
        let run = |c: u32, p: u32| {
            let mut choose = |stage: Stage, _: &Tensor| -> Result<Vec<u32>> {
                Ok(vec![if stage == Stage::Content { c } else { p }; 4])
            };
            lm.decode_step(&h, None, &mut choose).unwrap()
        };
        let base = run(10, 20);
        let other_prompt = run(10, 33);
        let other_content = run(700, 20);
        let cl = |o: &StepLogits| o.content.clone().unwrap();
        let pl = |o: &StepLogits| o.prompt.clone().unwrap();
        assert_eq!(max_abs(&cl(&base), &cl(&other_prompt)), 0.0);
        assert_eq!(max_abs(&pl(&base), &pl(&other_prompt)), 0.0);
        assert_eq!(max_abs(&cl(&base), &cl(&other_content)), 0.0);
        // the chain consumes both tokens
        assert!(max_abs(&pl(&base), &pl(&other_content)) > 0.0);
        assert!(max_abs(&base.speech, &other_prompt.speech) > 0.0);
        assert!(max_abs(&base.speech, &other_content.speech) > 0.0);
        assert_eq!(max_abs(&cl(&base), &lm.decode_content(&h).unwrap()), 0.0);
    }

    #[test]
    fn single_step_speech_reads_h_only() {
        let (_, lm) = model(&tiny(DecodingMode::SingleStep), DType::F32);
        let h = lm.lm_hidden_step(&text(), &[4]).unwrap();
        let cl = Tensor::zeros((1, 1296), DType::F32, h.device()).unwrap();
        let pl = Tensor::zeros((1, 64), DType::F32, h.device()).unwrap();
        let a = lm.decode_speech(&h, None, None).unwrap();
        let b = lm.decode_speech(&h, Some((&[3], &cl)), Some((&[9], &pl))).unwrap();
        assert_eq!(max_abs(&a, &b), 0.0);
        assert!(lm.decode_content(&h).is_err());
    }

    #[test]
    fn aux_head_is_affine() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F64);
        let h = lm.lm_hidden_step(&text(), &[1]).unwrap();
        let zero = h.zeros_like().unwrap();
        let a0 = lm.aux_speech_logits(&zero).unwrap();
        for alpha in [0.5, 2.0, -3.0] {
            let lhs = (lm.aux_speech_logits(&(&h * alpha).unwrap()).unwrap() - &a0).unwrap();
            let rhs = ((lm.aux_speech_logits(&h).unwrap() - &a0).unwrap() * alpha).unwrap();
            assert!(max_abs(&lhs, &rhs) < 1e-12);
        }
    }

    #[test]
    fn masking_probabilities() {
        let mut cfg = tiny(DecodingMode::Hierarchical);
        cfg.mask_prob_hidden = 0.0;
        cfg.mask_prob_prompt = 0.0;
        let m = sample_masks(1000, &cfg, &mut CounterRng::new(0, "m")).unwrap();
        assert!(m.hidden.iter().chain(&m.prompt).all(|&x| !x));
        cfg.mask_prob_hidden = 1.0;
        cfg.mask_prob_prompt = 1.0;
        let m = sample_masks(1000, &cfg, &mut CounterRng::new(0, "m")).unwrap();
        assert!(m.hidden.iter().chain(&m.prompt).all(|&x| x));
        cfg.mask_prob_hidden = 0.15;
        cfg.mask_prob_prompt = 0.4;
        let m = sample_masks(100_000, &cfg, &mut CounterRng::new(0, "m")).unwrap();
        let rate = |v: &[bool]| v.iter().filter(|&&x| x).count() as f64 / v.len() as f64;
        assert!((rate(&m.hidden) - 0.15).abs() < 0.02);
        assert!((rate(&m.prompt) - 0.4).abs() < 0.02);
        cfg.mask_prob_prompt = 1.5;
        assert!(matches!(sample_masks(1, &cfg, &mut CounterRng::new(0, "m")), Err(Error::Config(_))));
    }

    #[test]
    fn replacement_is_exact() {
        let x = Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &candle_core::Device::Cpu).unwrap();
        let r = Tensor::new(&[9.0f64, -9.0], &candle_core::Device::Cpu).unwrap();
        let y = replace_rows(&x, &r, &[false, true]).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), vec![vec![1.0, 2.0], vec![9.0, -9.0]]);
        let same = replace_rows(&x, &r, &[false, false]).unwrap();
        assert_eq!(same.to_vec2::<f64>().unwrap(), x.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn zero_masking_matches_unmasked_loss() {
        let mut cfg = tiny(DecodingMode::Hierarchical);
        cfg.mask_prob_hidden = 0.0;
        cfg.mask_prob_prompt = 0.0;
        let (_, lm) = model(&cfg, DType::F32);
        let batch = vec![example(1), example(2)];
        let a = scalar(&lm.loss(&batch, None).unwrap().total).unwrap();
        let b = scalar(&lm.loss(&batch, Some(&mut CounterRng::new(1, "x"))).unwrap().total).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_components_follow_mode() {
        let batch = vec![example(3), example(4)];
        let cases = [
            (LmVariant::Proposed, vec!["content", "prompt", "speech", "aux"]),
            (LmVariant::NoContentPref, vec!["prompt", "speech", "aux"]),
            (LmVariant::NoPromptPref, vec!["content", "speech", "aux"]),
            (LmVariant::NoDualPref, vec!["speech", "aux"]),
            (LmVariant::NoInstructText, vec!["content", "prompt", "speech", "aux"]),
            (LmVariant::Parallel, vec!["content", "prompt", "speech", "aux"]),
            (LmVariant::SingleStep, vec!["speech"]),
        ];
        for (variant, names) in cases {
            let cfg = variant.apply(&tiny(DecodingMode::Hierarchical));
            let (_, lm) = model(&cfg, DType::F64);
            let loss = lm.loss(&batch, Some(&mut CounterRng::new(0, "mask"))).unwrap();
            assert_eq!(loss.names(), names, "{}", variant.label());
            let rec = loss.record().unwrap();
            let sum: f64 = rec.components.iter().map(|(_, w, v)| w * v).sum();
            assert!((sum - rec.total).abs() < 1e-6);
        }
        let mut plain = tiny(DecodingMode::SingleStep);
        plain.aux_weight = 0.0;
        let (_, lm) = model(&plain, DType::F32);
        assert_eq!(lm.loss(&batch, None).unwrap().names(), vec!["speech"]);
    }

    #[test]
    fn misaligned_targets_rejected() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let mut ex = example(5);
        ex.prompt.pop();
        assert!(matches!(lm.loss(&[ex], None), Err(Error::Alignment(_))));
    }

    #[test]
    fn saturated_predictions_give_zero_cross_entropy() {
        let mut data = vec![0.0f64; 3 * 5];
        for (row, t) in [1usize, 4, 0].iter().enumerate() {
            data[row * 5 + t] = 1e4;
        }
        let logits = Tensor::from_vec(data, (3, 5), &candle_core::Device::Cpu).unwrap();
        let ce = scalar(&cross_entropy(&logits, &[1, 4, 0], None).unwrap()).unwrap();
        assert!(ce.abs() < 1e-12);
    }

    #[test]
    fn greedy_generation_is_deterministic_and_aligned() {
        for mode in [DecodingMode::Hierarchical, DecodingMode::Parallel, DecodingMode::SingleStep] {
            let (_, lm) = model(&tiny(mode), DType::F32);
            let a = lm.generate(&text(), 10, Sampling::Greedy, &mut CounterRng::new(0, "g")).unwrap();
            let b = lm.generate(&text(), 10, Sampling::Greedy, &mut CounterRng::new(9, "g")).unwrap();
            assert_eq!(a, b);
            assert!(a.speech.len() <= 10);
            let terminated = a.stop_reason == StopReason::EndOfSpeech;
            assert_eq!(a.steps.len(), a.speech.len() + usize::from(terminated));
            if terminated {
                assert_eq!(a.steps.last().unwrap().speech, lm.config().eos());
            }
            let stream: Vec<u32> = a.steps.iter().map(|s| s.speech).take(a.speech.len()).collect();
            assert_eq!(stream, a.speech);
            if mode == DecodingMode::SingleStep {
                assert!(a.content().is_empty() && a.prompt().is_empty());
            } else {
                assert_eq!(a.content().len(), a.speech.len());
                assert_eq!(a.prompt().len(), a.speech.len());
            }
        }
    }

    #[test]
    fn sampled_generation_respects_limits() {
        let (_, lm) = model(&tiny(DecodingMode::Hierarchical), DType::F32);
        let s = Sampling::TopK { k: 3, temperature: 1.0 };
        let a = lm.generate(&text(), 7, s, &mut CounterRng::new(1, "g")).unwrap();
        let b = lm.generate(&text(), 7, s, &mut CounterRng::new(1, "g")).unwrap();
        assert_eq!(a, b);
        assert!(a.speech.len() <= 7);
        assert!(matches!(lm.generate(&text(), 0, s, &mut CounterRng::new(1, "g")), Err(Error::Config(_))));
        let t = Sampling::Temperature { temperature: 0.0 };
        assert!(lm.generate(&text(), 3, t, &mut CounterRng::new(1, "g")).is_err());
    }

    #[test]
    fn top_one_sampling_is_greedy() {
        let logits = Tensor::new(&[[0.1f32, 2.0, -1.0], [5.0, 0.0, 4.9]], &candle_core::Device::Cpu).unwrap();
        let mut rng = CounterRng::new(0, "s");
        let s = Sampling::TopK { k: 1, temperature: 3.0 };
        assert_eq!(s.pick(&logits, &mut rng).unwrap(), vec![1, 0]);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut cfg = tiny(DecodingMode::Hierarchical);
        cfg.width = 8;
        cfg.mask_prob_hidden = 0.0;
        cfg.mask_prob_prompt = 0.0;
        let (store, lm) = model(&cfg, DType::F64);
        let batch = vec![example(6)];
        let params: Vec<Var> = store.vars_with_prefix("lm.decoder").into_iter().map(|(_, v)| v).collect();
        let err = gradient_check(&params, || Ok(lm.loss(&batch, None)?.total), 20, 1e-5, 3).unwrap();
        assert!(err <= 1e-3, "relative error {err}");
    }

    #[test]
    fn latency_report_single_step_ratio_is_one() {
        let (_, lm) = model(&tiny(DecodingMode::SingleStep), DType::F32);
        let r = benchmark_latency(&lm, &[text()], 4, 1).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(benchmark_latency(&lm, &[], 4, 1).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("parallel".parse::<DecodingMode>().unwrap(), DecodingMode::Parallel);
        assert_eq!("single_step".parse::<DecodingMode>().unwrap(), DecodingMode::SingleStep);
        assert!("other".parse::<DecodingMode>().is_err());
    }
}
