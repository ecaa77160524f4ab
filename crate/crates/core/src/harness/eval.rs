use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::{length_buckets, shuffle, LabeledCorpus, LabeledUtterance};
use crate::checkpoint::{codec_fingerprint, short};
use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::lm::{benchmark_latency, HierarchicalLm, LatencyReport, StopReason};
use crate::nn::{argmax_rows, cross_entropy};
use crate::prompts::PromptTemplates;
use crate::rng::CounterRng;
use crate::system::CodecSystem;
use crate::text::InstructionText;
use crate::world::{edit_distance, oracle_style_of, oracle_text_of, render_clean, ToyUtterance, UnitTable, WorldConfig};

/// One generated utterance with everything needed to score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub utt_id: String,
    pub style_id: usize,
    pub instruction: String,
    pub text: String,
    pub content: Vec<u32>,
    pub prompt: Vec<u32>,
    pub speech: Vec<u32>,
    pub stop_reason: StopReason,
}

fn eval_subset<'a>(test: &'a [LabeledUtterance], eval: &EvalConfig) -> &'a [LabeledUtterance] {
    if eval.limit > 0 && eval.limit < test.len() {
        &test[..eval.limit]
    } else {
        test
    }
}

/// Generates speech for each utterance's instruction and content text.
pub fn generate_records(
    lm: &HierarchicalLm,
    utts: &[LabeledUtterance],
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<GenerationRecord>> {
    let sampling = eval.sampling.to_sampling()?;
    let base = CounterRng::new(seed, "generation");
    utts.iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = base.fork_index(i as u64);
            let out = lm.generate(&InstructionText::new(u.prompt.clone(), u.text.clone()), eval.max_len, sampling, &mut rng)?;
            Ok(GenerationRecord {
                utt_id: u.utt_id.clone(),
                style_id: u.style_id,
                instruction: u.prompt.clone(),
                text: u.text.clone(),
                content: out.content(),
                prompt: out.prompt(),
                speech: out.speech,
                stop_reason: out.stop_reason,
            })
        })
        .collect()
}

/// Records of a perfect generator that replays clean target speech.
pub fn oracle_records(utts: &[ToyUtterance], world: &WorldConfig, table: &UnitTable) -> Result<Vec<GenerationRecord>> {
    utts.iter()
        .map(|u| {
            Ok(GenerationRecord {
                utt_id: u.utt_id.clone(),
                style_id: u.style_id,
                instruction: u.prompt.clone(),
                text: u.text.clone(),
                content: Vec::new(),
                prompt: Vec::new(),
                speech: render_clean(&u.text, u.style_id, world, table)?,
                stop_reason: StopReason::EndOfSpeech,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub n: usize,
    /// Mean per-utterance character edit distance over target length,
    /// capped at 1.
    pub token_error_rate: f64,
    /// Fraction whose oracle style matches the instructed style.
    pub style_accuracy: f64,
    pub mean_length: f64,
    /// Fraction that stopped on the end-of-speech token.
    pub eos_fraction: f64,
}

/// Scores generation records with the world oracles; a pure function of
/// the records. An odd trailing token is ignored for text inversion and an
/// empty generation counts as fully wrong.
pub fn score_generations(records: &[GenerationRecord], world: &WorldConfig, table: &UnitTable) -> Result<GenerationScores> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no generation records".into()));
    }
    let k = table.units_per_char();
    let mut ter = 0.0;
    let mut style_hits = 0usize;
    for r in records {
        let even = &r.speech[..r.speech.len() - r.speech.len() % k];
        let hyp = if even.is_empty() { String::new() } else { oracle_text_of(even, world, table)? };
        let target_len = r.text.chars().count().max(1) as f64;
        ter += (edit_distance(&hyp, &r.text) as f64 / target_len).min(1.0);
        if !r.speech.is_empty() && oracle_style_of(&r.speech, world)? == r.style_id {
            style_hits += 1;
        }
    }
    let n = records.len() as f64;
    Ok(GenerationScores {
        n: records.len(),
        token_error_rate: ter / n,
        style_accuracy: style_hits as f64 / n,
        mean_length: records.iter().map(|r| r.speech.len() as f64).sum::<f64>() / n,
        eos_fraction: records.iter().filter(|r| r.stop_reason == StopReason::EndOfSpeech).count() as f64 / n,
    })
}

/// Fraction of tokens reproduced by `argmax combine(encode(x))`.
pub fn reconstruction_accuracy(system: &CodecSystem, utts: &[ToyUtterance], batch: usize) -> Result<f64> {
    let lengths: Vec<usize> = utts.iter().map(|u| u.speech.len()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for group in length_buckets(&lengths, batch) {
        let speech: Vec<&[u32]> = group.iter().map(|&i| utts[i].speech.as_slice()).collect();
        for (x, y) in speech.iter().zip(system.codec.reconstruct_batch(&speech)?) {
            hits += x.iter().zip(&y).filter(|(a, b)| a == b).count();
            total += x.len();
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("no tokens to reconstruct".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Fraction of utterances whose pooled prompt-branch embedding is closest
/// to the embedding of their own template among all templates.
pub fn retrieval_accuracy(
    system: &CodecSystem,
    utts: &[ToyUtterance],
    templates: &PromptTemplates,
    batch: usize,
) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::InvalidInput("no utterances for retrieval".into()));
    }
    let names: Vec<&str> = templates.iter().collect();
    let text_emb = system.prompt_text_embeddings(&names)?;
    let lengths: Vec<usize> = utts.iter().map(|u| u.speech.len()).collect();
    let mut hits = 0;
    for group in length_buckets(&lengths, batch) {
        let speech: Vec<&[u32]> = group.iter().map(|&i| utts[i].speech.as_slice()).collect();
        let audio = system.audio_embeddings(&speech)?;
        let best = argmax_rows(&audio.matmul(&text_emb.t()?)?)?;
        hits += group.iter().zip(best).filter(|(&i, b)| *b as usize == utts[i].style_id).count();
    }
    Ok(hits as f64 / utts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub prompt_branch: f64,
    pub content_branch: f64,
    /// Same probes fitted to shuffled training labels (chance floor).
    pub prompt_branch_shuffled: f64,
    pub content_branch_shuffled: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Mean-pooled dequantized features of both branches, `[N, d_c]` and `[N, d_p]`.
fn pooled_branch_features(system: &CodecSystem, utts: &[ToyUtterance], batch: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let lengths: Vec<usize> = utts.iter().map(|u| u.speech.len()).collect();
    let mut content = vec![Vec::new(); utts.len()];
    let mut prompt = vec![Vec::new(); utts.len()];
    for group in length_buckets(&lengths, batch) {
        let speech: Vec<&[u32]> = group.iter().map(|&i| utts[i].speech.as_slice()).collect();
        let br = system.branches(&speech, None)?;
        let c = br.content_q.mean(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let p = br.prompt_q.mean(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for ((&i, c), p) in group.iter().zip(c).zip(p) {
            content[i] = c;
            prompt[i] = p;
        }
    }
    Ok((content, prompt))
}

/// Fits a multinomial logistic regression on standardized features and
/// returns its test accuracy.
fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[u32],
    test_x: &[Vec<f64>],
    test_y: &[u32],
    classes: usize,
    eval: &EvalConfig,
) -> Result<f64> {
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    let to_tensor = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j])).collect();
        Ok(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?)
    };
    let (xtr, xte) = (to_tensor(train_x)?, to_tensor(test_x)?);
    let w = Var::zeros((d, classes), DType::F64, &Device::Cpu)?;
    let b = Var::zeros(classes, DType::F64, &Device::Cpu)?;
    let params = ParamsAdamW { lr: eval.probe_lr, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(vec![w.clone(), b.clone()], params)?;
    for _ in 0..eval.probe_epochs {
        let logits = xtr.matmul(w.as_tensor())?.broadcast_add(b.as_tensor())?;
        opt.backward_step(&cross_entropy(&logits, train_y, None)?)?;
    }
    let pred = argmax_rows(&xte.matmul(w.as_tensor())?.broadcast_add(b.as_tensor())?)?;
    Ok(pred.iter().zip(test_y).filter(|(p, y)| p == y).count() as f64 / test_y.len() as f64)
}

/// Style probes on frozen mean-pooled branch features: fitted on `train`,
/// scored on `test`, plus shuffled-label controls.
pub fn probe_disentanglement(
    system: &CodecSystem,
    train: &[ToyUtterance],
    test: &[ToyUtterance],
    n_styles: usize,
    eval: &EvalConfig,
    seed: u64,
) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("probe needs training and test utterances".into()));
    }
    let ytr: Vec<u32> = train.iter().map(|u| u.style_id as u32).collect();
    if ytr.iter().all(|&y| y == ytr[0]) {
        return Err(Error::DegenerateBatch("probe training labels have a single class".into()));
    }
    let yte: Vec<u32> = test.iter().map(|u| u.style_id as u32).collect();
    let mut shuffled = ytr.clone();
    shuffle(&mut shuffled, &mut CounterRng::new(seed, "probe.shuffle"));
    let b = eval.retrieval_batch.max(32);
    let (ctr, ptr) = pooled_branch_features(system, train, b)?;
    let (cte, pte) = pooled_branch_features(system, test, b)?;
    Ok(ProbeReport {
        prompt_branch: linear_probe(&ptr, &ytr, &pte, &yte, n_styles, eval)?,
        content_branch: linear_probe(&ctr, &ytr, &cte, &yte, n_styles, eval)?,
        prompt_branch_shuffled: linear_probe(&ptr, &shuffled, &pte, &yte, n_styles, eval)?,
        content_branch_shuffled: linear_probe(&ctr, &shuffled, &cte, &yte, n_styles, eval)?,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Codec-side metrics shared by every language model evaluated with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecMetrics {
    pub reconstruction_accuracy: f64,
    pub retrieval_acc: f64,
    pub probe: ProbeReport,
}

/// Reconstruction and retrieval on the test split and probes fitted on up
/// to `probe_train` training utterances.
pub fn evaluate_codec(
    system: &CodecSystem,
    corpus: &LabeledCorpus,
    templates: &PromptTemplates,
    n_styles: usize,
    eval: &EvalConfig,
    seed: u64,
) -> Result<CodecMetrics> {
    let test: Vec<ToyUtterance> = corpus.test.iter().map(LabeledUtterance::toy).collect();
    let probe_n = corpus.train.len().min(eval.probe_train.max(1));
    let train: Vec<ToyUtterance> = corpus.train[..probe_n].iter().map(LabeledUtterance::toy).collect();
    let batch = eval.retrieval_batch.max(1);
    Ok(CodecMetrics {
        reconstruction_accuracy: reconstruction_accuracy(system, &test, 64)?,
        retrieval_acc: retrieval_accuracy(system, &test, templates, batch)?,
        probe: probe_disentanglement(system, &train, &test, n_styles, eval, seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decoding_mode: String,
    pub reconstruction_accuracy: f64,
    pub token_error_rate: f64,
    pub style_accuracy: f64,
    pub retrieval_acc: f64,
    pub style_probe_acc_prompt_branch: f64,
    pub style_probe_acc_content_branch: f64,
    pub latency_ratio: f64,
    pub latency: LatencyReport,
    pub generation: GenerationScores,
}

impl EvalReport {
    /// Rates that must lie in `[0, 1]`.
    pub fn rates(&self) -> [(&'static str, f64); 6] {
        [
            ("reconstruction_accuracy", self.reconstruction_accuracy),
            ("token_error_rate", self.token_error_rate),
            ("style_accuracy", self.style_accuracy),
            ("retrieval_acc", self.retrieval_acc),
            ("style_probe_acc_prompt_branch", self.style_probe_acc_prompt_branch),
            ("style_probe_acc_content_branch", self.style_probe_acc_content_branch),
        ]
    }
}

/// Generates on the test split with `lm`, scores the records and measures
/// latency. `lm_codec_fingerprint` must match `system`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    system: &CodecSystem,
    lm: &HierarchicalLm,
    lm_codec_fingerprint: &str,
    codec: &CodecMetrics,
    corpus: &LabeledCorpus,
    world: &WorldConfig,
    table: &UnitTable,
    eval: &EvalConfig,
    seed: u64,
) -> Result<(EvalReport, Vec<GenerationRecord>)> {
    let fp = codec_fingerprint(system)?;
    if fp != lm_codec_fingerprint {
        return Err(Error::Fingerprint(format!(
            "language model was trained on codec {}, evaluating with {}",
            short(lm_codec_fingerprint),
            short(&fp)
        )));
    }
    if lm.config().speech_vocab != system.config().codec.speech_vocab {
        return Err(Error::Fingerprint("speech vocabulary sizes differ".into()));
    }
    let subset = eval_subset(&corpus.test, eval);
    let records = generate_records(lm, subset, eval, seed)?;
    let generation = score_generations(&records, world, table)?;
    let bench_texts: Vec<InstructionText> = corpus
        .test
        .iter()
        .take(eval.bench_texts.max(1))
        .map(|u| InstructionText::new(u.prompt.clone(), u.text.clone()))
        .collect();
    let latency = benchmark_latency(lm, &bench_texts, eval.bench_steps, eval.bench_repeats)?;
    let report = EvalReport {
        decoding_mode: lm.config().decoding_mode.as_str().into(),
        reconstruction_accuracy: codec.reconstruction_accuracy,
        token_error_rate: generation.token_error_rate,
        style_accuracy: generation.style_accuracy,
        retrieval_acc: codec.retrieval_acc,
        style_probe_acc_prompt_branch: codec.probe.prompt_branch,
        style_probe_acc_content_branch: codec.probe.content_branch,
        latency_ratio: latency.ratio,
        latency,
        generation,
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::testkit::{labeled_corpus, tiny_config, utterances};
    use crate::lm::{DecodingMode, LmConfig};
    use crate::nn::ParamStore;

    fn record(text: &str, style: usize, speech: Vec<u32>) -> GenerationRecord {
        GenerationRecord {
            utt_id: "x".into(),
            style_id: style,
            instruction: String::new(),
            text: text.into(),
            content: vec![],
            prompt: vec![],
            speech,
            stop_reason: StopReason::EndOfSpeech,
        }
    }

    #[test]
    fn oracle_replay_scores_perfectly() {
        let cfg = tiny_config();
        let table = UnitTable::generate(&cfg.world).unwrap();
        let utts = utterances(&cfg, 40, "o");
        let s = score_generations(&oracle_records(&utts, &cfg.world, &table).unwrap(), &cfg.world, &table).unwrap();
        assert_eq!(s.token_error_rate, 0.0);
        assert_eq!(s.style_accuracy, 1.0);
        assert_eq!(s.eos_fraction, 1.0);
        assert_eq!(s.n, 40);
    }

    #[test]
    fn scoring_edge_cases() {
        let cfg = tiny_config();
        let w = &cfg.world;
        let table = UnitTable::generate(w).unwrap();
        let clean = render_clean("abcd", 2, w, &table).unwrap();
        // Empty output is fully wrong.
        let s = score_generations(&[record("abcd", 2, vec![])], w, &table).unwrap();
        assert_eq!((s.token_error_rate, s.style_accuracy), (1.0, 0.0));
        // An odd trailing token is ignored.
        let mut odd = clean.clone();
        odd.push(clean[0]);
        let s = score_generations(&[record("abcd", 2, odd)], w, &table).unwrap();
        assert_eq!(s.token_error_rate, 0.0);
        // Half the characters: TER 0.5; wrong style counted.
        let s = score_generations(&[record("abcd", 3, clean[..4].to_vec())], w, &table).unwrap();
        assert_eq!((s.token_error_rate, s.style_accuracy), (0.5, 0.0));
        // Long garbage is capped at 1.
        let long = render_clean("zzzzzzzzzzzz", 2, w, &table).unwrap();
        let s = score_generations(&[record("ab", 2, long)], w, &table).unwrap();
        assert_eq!(s.token_error_rate, 1.0);
        assert!(score_generations(&[], w, &table).is_err());
    }

    fn blobs(n: usize, classes: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = CounterRng::new(seed, "blobs");
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for i in 0..n {
            let c = (i % classes) as u32;
            let angle = c as f64 * std::f64::consts::TAU / classes as f64;
            x.push(vec![
                3.0 * angle.cos() + 0.3 * (rng.unit() - 0.5),
                3.0 * angle.sin() + 0.3 * (rng.unit() - 0.5),
                rng.unit(),
            ]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn linear_probe_separates_blobs_and_shuffled_labels_sit_at_chance() {
        let eval = EvalConfig::default();
        let (xtr, ytr) = blobs(400, 4, 1);
        let (xte, yte) = blobs(200, 4, 2);
        let acc = linear_probe(&xtr, &ytr, &xte, &yte, 4, &eval).unwrap();
        assert!(acc > 0.98, "{acc}");
        let mut shuffled = ytr.clone();
        shuffle(&mut shuffled, &mut CounterRng::new(0, "s"));
        let chance = linear_probe(&xtr, &shuffled, &xte, &yte, 4, &eval).unwrap();
        assert!(chance < 0.45, "{chance}");
    }

    #[test]
    fn untrained_codec_metrics_are_rates() {
        let cfg = tiny_config();
        let system = CodecSystem::new(&cfg.codec_system(), DType::F32, 9).unwrap();
        let corpus = labeled_corpus(&cfg, &system, "fp");
        let m = evaluate_codec(&system, &corpus, &PromptTemplates::builtin(), 8, &cfg.eval, 0).unwrap();
        for v in [m.reconstruction_accuracy, m.retrieval_acc, m.probe.prompt_branch, m.probe.content_branch] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(m.reconstruction_accuracy < 0.2);
    }

    #[test]
    fn evaluation_refuses_a_foreign_codec_and_respects_the_limit() {
        let mut cfg = tiny_config();
        let system = CodecSystem::new(&cfg.codec_system(), DType::F32, 9).unwrap();
        let fp = codec_fingerprint(&system).unwrap();
        let corpus = labeled_corpus(&cfg, &system, &fp);
        let table = UnitTable::generate(&cfg.world).unwrap();
        let metrics = evaluate_codec(&system, &corpus, &PromptTemplates::builtin(), 8, &cfg.eval, 0).unwrap();
        let lm_cfg = LmConfig { decoding_mode: DecodingMode::Parallel, ..cfg.lm.clone() };
        let store = ParamStore::new(DType::F32, 0);
        let lm = HierarchicalLm::new(&store.root(), &lm_cfg).unwrap();
        let r = evaluate(&system, &lm, "beef", &metrics, &corpus, &cfg.world, &table, &cfg.eval, 0);
        assert!(matches!(r, Err(Error::Fingerprint(_))));
        cfg.eval.limit = 2;
        let (report, records) = evaluate(&system, &lm, &fp, &metrics, &corpus, &cfg.world, &table, &cfg.eval, 0).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(report.decoding_mode, "parallel");
        assert!(report.rates().iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        assert!(report.latency_ratio > 0.0);
        let again = generate_records(&lm, &corpus.test[..2], &cfg.eval, 0).unwrap();
        assert_eq!(again, records);
    }
}
