use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::length_buckets;
use crate::checkpoint::{codec_fingerprint, short};
use crate::error::{Error, Result};
use crate::lm::LmExample;
use crate::system::CodecSystem;
use crate::world::{read_jsonl, write_file, write_jsonl, CorpusFiles, ToyUtterance, SPLIT_NAMES};

/// Manifest file marking a directory as a labeled corpus.
pub const LABEL_MANIFEST: &str = "labels.json";

/// A corpus record extended with the frozen codec's aligned streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub utt_id: String,
    pub text: String,
    pub style_id: usize,
    pub prompt: String,
    pub speech: Vec<u32>,
    pub content_tokens: Vec<u32>,
    pub prompt_tokens: Vec<u32>,
}

impl LabeledUtterance {
    pub fn lm_example(&self) -> LmExample {
        LmExample {
            instruction: self.prompt.clone(),
            content_text: self.text.clone(),
            content: self.content_tokens.clone(),
            prompt: self.prompt_tokens.clone(),
            speech: self.speech.clone(),
        }
    }

    pub fn toy(&self) -> ToyUtterance {
        ToyUtterance {
            utt_id: self.utt_id.clone(),
            text: self.text.clone(),
            style_id: self.style_id,
            prompt: self.prompt.clone(),
            speech: self.speech.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub codec_fingerprint: String,
    pub speech_vocab: usize,
    pub sizes: [usize; 3],
    /// Fraction of the prompt codebook used on the training split.
    pub prompt_utilization: f64,
    pub prompt_codes_used: usize,
    pub content_codes_used: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub manifest: LabelManifest,
    pub train: Vec<LabeledUtterance>,
    pub dev: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
}

/// Encodes every utterance with the frozen codec, batching equal lengths.
/// Output order matches input order.
pub fn label_utterances(system: &CodecSystem, utts: &[ToyUtterance], batch: usize) -> Result<Vec<LabeledUtterance>> {
    let vocab = system.config().codec.speech_vocab;
    if let Some(&t) = utts.iter().flat_map(|u| u.speech.iter()).find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocabulary { token: t, vocab });
    }
    let lengths: Vec<usize> = utts.iter().map(|u| u.speech.len()).collect();
    let mut out: Vec<Option<LabeledUtterance>> = vec![None; utts.len()];
    for group in length_buckets(&lengths, batch) {
        let speech: Vec<&[u32]> = group.iter().map(|&i| utts[i].speech.as_slice()).collect();
        let pairs = system.codec.encode_batch(&speech)?;
        for (&i, pair) in group.iter().zip(pairs) {
            let u = &utts[i];
            out[i] = Some(LabeledUtterance {
                utt_id: u.utt_id.clone(),
                text: u.text.clone(),
                style_id: u.style_id,
                prompt: u.prompt.clone(),
                speech: u.speech.clone(),
                content_tokens: pair.content,
                prompt_tokens: pair.prompt,
            });
        }
    }
    Ok(out.into_iter().flatten().collect())
}

fn codes_used(streams: impl Iterator<Item = u32>) -> usize {
    streams.collect::<std::collections::BTreeSet<u32>>().len()
}

/// Fraction of a `codebook`-entry prompt codebook that appears at least once.
pub fn prompt_utilization(labeled: &[LabeledUtterance], codebook: usize) -> f64 {
    codes_used(labeled.iter().flat_map(|u| u.prompt_tokens.iter().copied())) as f64 / codebook as f64
}

fn labeled_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Labels all three splits of `corpus` into `out_dir` and writes the
/// manifest carrying the codec fingerprint.
pub fn label_corpus(system: &CodecSystem, corpus: &CorpusFiles, out_dir: &Path, batch: usize) -> Result<LabelManifest> {
    let world = corpus.load_world()?;
    let vocab = system.config().codec.speech_vocab;
    if world.vocab_size() != vocab {
        return Err(Error::Data(format!(
            "corpus speech vocabulary {} differs from the codec's {vocab}",
            world.vocab_size()
        )));
    }
    let mut sizes = [0; 3];
    let mut train = Vec::new();
    for (k, name) in SPLIT_NAMES.iter().enumerate() {
        let labeled = label_utterances(system, &corpus.load_split(name)?, batch)?;
        sizes[k] = labeled.len();
        write_jsonl(&labeled_path(out_dir, name), &labeled)?;
        if k == 0 {
            train = labeled;
        }
    }
    let codebook = system.config().codec.prompt_levels.codebook_size() as usize;
    let manifest = LabelManifest {
        codec_fingerprint: codec_fingerprint(system)?,
        speech_vocab: vocab,
        sizes,
        prompt_utilization: prompt_utilization(&train, codebook),
        prompt_codes_used: codes_used(train.iter().flat_map(|u| u.prompt_tokens.iter().copied())),
        content_codes_used: codes_used(train.iter().flat_map(|u| u.content_tokens.iter().copied())),
    };
    write_file(&out_dir.join(LABEL_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Loads a labeled corpus; fails with a fingerprint error when `dir` was not
/// produced by [`label_corpus`] or, given `expected`, by a different codec.
pub fn load_labeled(dir: &Path, expected: Option<&str>) -> Result<LabeledCorpus> {
    let mpath = dir.join(LABEL_MANIFEST);
    if !mpath.exists() {
        return Err(Error::Fingerprint(format!(
            "{} is not a labeled corpus (no {LABEL_MANIFEST}); train the codec and run `label` first",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: LabelManifest = serde_json::from_str(&text)?;
    if let Some(fp) = expected {
        if fp != manifest.codec_fingerprint {
            return Err(Error::Fingerprint(format!(
                "corpus was labeled by codec {}, expected {}",
                short(&manifest.codec_fingerprint),
                short(fp)
            )));
        }
    }
    let load = |name: &str| read_jsonl::<LabeledUtterance>(&labeled_path(dir, name));
    Ok(LabeledCorpus {
        train: load("train")?,
        dev: load("dev")?,
        test: load("test")?,
        manifest,
    })
}
