//! Run-directory workflow shared by the command-line tool and tests: each
//! stage reads its prerequisites from the run directory and writes its
//! artifacts back into it.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, load_codec, load_lm, save_codec, save_lm, LoadedLm};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{
    self, evaluate, evaluate_codec, format_ablation_table, label_corpus, load_labeled, oracle_records,
    run_ablation_matrix, score_generations, AblationHooks, AblationRow, CodecMetrics, EvalReport,
    GenerationRecord, GenerationScores, LabelManifest, StepLog,
};
use crate::lm::{benchmark_latency, DecodingMode, GenerationOutput, LatencyReport, LmVariant};
use crate::prompts::PromptTemplates;
use crate::rng::CounterRng;
use crate::system::CodecSystem;
use crate::text::InstructionText;
use crate::world::{make_corpus, oracle_style_of, read_jsonl, write_file, write_jsonl, CorpusFiles, CorpusSummary};

/// Paths of the artifacts inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> CorpusFiles {
        CorpusFiles::new(self.root.join("data"))
    }

    pub fn codec(&self) -> PathBuf {
        self.root.join("codec.safetensors")
    }

    pub fn labeled(&self) -> PathBuf {
        self.root.join("labeled")
    }

    pub fn lm(&self) -> PathBuf {
        self.root.join("lm.safetensors")
    }

    pub fn variant_dir(&self, v: LmVariant) -> PathBuf {
        self.root.join("variants").join(variant_slug(v))
    }

    pub fn variant_lm(&self, v: LmVariant) -> PathBuf {
        self.variant_dir(v).join("lm.safetensors")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }

    /// Writes the resolved config for `command` and returns its path.
    pub fn snapshot(&self, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
        let path = self.root.join("snapshots").join(format!("{command}-{}.toml", cfg.hash()?));
        write_file(&path, cfg.to_toml()?.as_bytes())?;
        Ok(path)
    }
}

pub fn variant_slug(v: LmVariant) -> &'static str {
    match v {
        LmVariant::Proposed => "proposed",
        LmVariant::NoContentPref => "no_content_pref",
        LmVariant::NoPromptPref => "no_prompt_pref",
        LmVariant::NoDualPref => "no_dual_pref",
        LmVariant::NoInstructText => "no_instruct_text",
        LmVariant::Parallel => "parallel",
        LmVariant::SingleStep => "single_step",
    }
}

pub fn parse_variant(s: &str) -> Result<LmVariant> {
    LmVariant::ALL
        .into_iter()
        .find(|v| variant_slug(*v) == s || v.label() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = LmVariant::ALL.iter().map(|v| variant_slug(*v)).collect();
            Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn require(path: &Path, step: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Data(format!("{} is missing; run `{step}` first", path.display())));
    }
    Ok(())
}

/// Appends step logs as JSON lines as they arrive and prints every
/// `every`-th step.
pub struct StepSink {
    file: Option<std::io::BufWriter<std::fs::File>>,
    path: PathBuf,
    every: usize,
    quiet: bool,
}

impl StepSink {
    pub fn new(path: PathBuf, every: usize, quiet: bool) -> Self {
        Self { file: None, path, every: every.max(1), quiet }
    }

    fn writer(&mut self) -> Result<&mut std::io::BufWriter<std::fs::File>> {
        if self.file.is_none() {
            if let Some(dir) = self.path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = std::fs::File::create(&self.path).map_err(|e| Error::io(&self.path, e))?;
            self.file = Some(std::io::BufWriter::new(f));
        }
        Ok(self.file.as_mut().expect("opened above"))
    }

    pub fn push(&mut self, prefix: &str, log: &StepLog) -> Result<()> {
        use std::io::Write;
        let line = serde_json::to_string(log)?;
        let path = self.path.clone();
        let w = self.writer()?;
        writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        if !self.quiet && log.step % self.every == 0 {
            let parts: Vec<String> = log.components.iter().map(|(n, _, v)| format!("{n}={v:.4}")).collect();
            eprintln!(
                "{prefix}step {} epoch {} {} total={:.4} ({:.0}s)",
                log.step,
                log.epoch,
                parts.join(" "),
                log.total,
                log.elapsed_s
            );
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer()?;
        Ok(())
    }
}

pub fn gen_data(cfg: &RunConfig, run: &RunDir, n: Option<usize>) -> Result<CorpusSummary> {
    let n = n.unwrap_or(cfg.data.n);
    make_corpus(n, &cfg.world, &cfg.data.split, &PromptTemplates::builtin(), &run.corpus().dir)
}

fn check_world(cfg: &RunConfig, corpus: &CorpusFiles) -> Result<()> {
    require(&corpus.world_config(), "gen-data")?;
    let stored = corpus.load_world()?;
    if stored.vocab_size() != cfg.codec.speech_vocab {
        return Err(Error::Data(format!(
            "corpus vocabulary {} differs from codec.speech_vocab {}",
            stored.vocab_size(),
            cfg.codec.speech_vocab
        )));
    }
    Ok(())
}

/// Trains the codec on the corpus training split; returns its fingerprint.
pub fn train_codec_stage(cfg: &RunConfig, run: &RunDir, force: bool, quiet: bool) -> Result<String> {
    let corpus = run.corpus();
    check_world(cfg, &corpus)?;
    refuse_overwrite(&run.codec(), force)?;
    let train = corpus.load_split("train")?;
    let mut sink = StepSink::new(run.log("codec"), cfg.train_codec.log_every, quiet);
    let system = harness::train_codec(cfg, &train, &mut |log| sink.push("codec ", log))?;
    sink.finish()?;
    save_codec(&run.codec(), &system)
}

pub fn label_stage(run: &RunDir) -> Result<LabelManifest> {
    require(&run.codec(), "train --stage codec")?;
    let system = load_codec(&run.codec(), DType::F32)?;
    label_corpus(&system, &run.corpus(), &run.labeled(), 64)
}

fn codec_fingerprint_of(run: &RunDir) -> Result<(CodecSystem, String)> {
    require(&run.codec(), "train --stage codec")?;
    let system = load_codec(&run.codec(), DType::F32)?;
    let fp = checkpoint::codec_fingerprint(&system)?;
    Ok((system, fp))
}

/// Trains the language model (optionally an ablation variant) on the
/// labeled corpus; returns the checkpoint path.
pub fn train_lm_stage(cfg: &RunConfig, run: &RunDir, variant: Option<LmVariant>, force: bool, quiet: bool) -> Result<PathBuf> {
    let corpus = load_labeled(&run.labeled(), None)?;
    let (_, fp) = codec_fingerprint_of(run)?;
    if corpus.manifest.codec_fingerprint != fp {
        return Err(Error::Fingerprint(format!(
            "labeled corpus comes from codec {}, but {} is {}; rerun `label`",
            checkpoint::short(&corpus.manifest.codec_fingerprint),
            run.codec().display(),
            checkpoint::short(&fp)
        )));
    }
    let (lm_cfg, path, log) = match variant {
        Some(v) => (v.apply(&cfg.lm), run.variant_lm(v), format!("lm-{}", variant_slug(v))),
        None => (cfg.lm.clone(), run.lm(), "lm".to_string()),
    };
    refuse_overwrite(&path, force)?;
    let mut sink = StepSink::new(run.log(&log), cfg.train_lm.log_every, quiet);
    let trained = harness::train_lm(cfg, &lm_cfg, &corpus.train, &mut |l| sink.push("lm ", l))?;
    sink.finish()?;
    save_lm(&path, &trained.store, &lm_cfg, &fp)?;
    Ok(path)
}

/// Language-model checkpoint for `mode`: a variant trained in that mode if
/// present, else the main checkpoint when its mode matches.
pub fn lm_for_mode(run: &RunDir, mode: Option<DecodingMode>) -> Result<PathBuf> {
    let Some(mode) = mode else {
        require(&run.lm(), "train --stage lm")?;
        return Ok(run.lm());
    };
    let variant = match mode {
        DecodingMode::Hierarchical => LmVariant::Proposed,
        DecodingMode::Parallel => LmVariant::Parallel,
        DecodingMode::SingleStep => LmVariant::SingleStep,
    };
    if run.variant_lm(variant).exists() {
        return Ok(run.variant_lm(variant));
    }
    if run.lm().exists() && load_lm(&run.lm(), DType::F32)?.lm.config().decoding_mode == mode {
        return Ok(run.lm());
    }
    Err(Error::Data(format!(
        "no {} checkpoint in {}; run `train --stage lm --variant {}` or `ablate`",
        mode.as_str(),
        run.root.display(),
        variant_slug(variant)
    )))
}

fn load_paired(run: &RunDir, lm_path: &Path) -> Result<(CodecSystem, LoadedLm)> {
    require(&run.codec(), "train --stage codec")?;
    let system = load_codec(&run.codec(), DType::F32)?;
    let lm = load_lm(lm_path, DType::F32)?;
    checkpoint::check_pairing(&lm, &system)?;
    Ok((system, lm))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub instruction: String,
    pub content_text: String,
    pub decoding_mode: String,
    pub content: Vec<u32>,
    pub prompt: Vec<u32>,
    pub speech: Vec<u32>,
    pub stop_reason: crate::lm::StopReason,
    /// Style whose template equals the instruction, if any.
    pub instructed_style: Option<usize>,
    pub oracle_style: Option<usize>,
    pub style_match: Option<bool>,
}

pub fn synthesize(
    cfg: &RunConfig,
    run: &RunDir,
    lm_path: &Path,
    instruction: &str,
    content_text: &str,
) -> Result<SynthesisReport> {
    let (_, lm) = load_paired(run, lm_path)?;
    let mut rng = CounterRng::new(cfg.seed, "synthesize");
    let out: GenerationOutput = lm.lm.generate(
        &InstructionText::new(instruction, content_text),
        cfg.eval.max_len,
        cfg.eval.sampling.to_sampling()?,
        &mut rng,
    )?;
    let templates = PromptTemplates::builtin();
    let instructed_style = templates.style_of(instruction);
    let oracle_style = if out.speech.is_empty() { None } else { Some(oracle_style_of(&out.speech, &cfg.world)?) };
    let style_match = match (instructed_style, oracle_style) {
        (Some(a), Some(b)) => Some(a == b),
        (Some(_), None) => Some(false),
        _ => None,
    };
    Ok(SynthesisReport {
        instruction: instruction.into(),
        content_text: content_text.into(),
        decoding_mode: lm.lm.config().decoding_mode.as_str().into(),
        content: out.content(),
        prompt: out.prompt(),
        speech: out.speech,
        stop_reason: out.stop_reason,
        instructed_style,
        oracle_style,
        style_match,
    })
}

fn codec_metrics(cfg: &RunConfig, run: &RunDir, system: &CodecSystem, corpus: &harness::LabeledCorpus) -> Result<CodecMetrics> {
    let templates = run.corpus().load_prompts()?;
    let world = run.corpus().load_world()?;
    evaluate_codec(system, corpus, &templates, world.n_styles, &cfg.eval, cfg.seed)
}

/// Evaluates a language model checkpoint; writes `eval.json`, `eval.txt`
/// and `generations.jsonl` into `out_dir`.
pub fn eval_stage(cfg: &RunConfig, run: &RunDir, lm_path: &Path, out_dir: &Path) -> Result<EvalReport> {
    let (system, lm) = load_paired(run, lm_path)?;
    let corpus = load_labeled(&run.labeled(), Some(&lm.codec_fingerprint))?;
    let files = run.corpus();
    let (world, table) = (files.load_world()?, files.load_table()?);
    let metrics = codec_metrics(cfg, run, &system, &corpus)?;
    let (report, records) = evaluate(&system, &lm.lm, &lm.codec_fingerprint, &metrics, &corpus, &world, &table, &cfg.eval, cfg.seed)?;
    write_jsonl(&out_dir.join("generations.jsonl"), &records)?;
    write_file(&out_dir.join("eval.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_file(&out_dir.join("eval.txt"), format_report(&report).as_bytes())?;
    Ok(report)
}

pub fn format_report(r: &EvalReport) -> String {
    let mut out = String::new();
    for (name, v) in r.rates() {
        out.push_str(&format!("{name:<32} {v:.4}\n"));
    }
    out.push_str(&format!("{:<32} {:.4}\n", "latency_ratio", r.latency_ratio));
    out.push_str(&format!("{:<32} {}\n", "decoding_mode", r.decoding_mode));
    out
}

/// Scores the oracle-replay generator on the test split.
pub fn eval_oracle(run: &RunDir, out_dir: &Path) -> Result<GenerationScores> {
    let files = run.corpus();
    require(&files.world_config(), "gen-data")?;
    let (world, table) = (files.load_world()?, files.load_table()?);
    let records = oracle_records(&files.load_split("test")?, &world, &table)?;
    write_jsonl(&out_dir.join("generations-oracle.jsonl"), &records)?;
    let scores = score_generations(&records, &world, &table)?;
    write_file(&out_dir.join("eval-oracle.json"), serde_json::to_string_pretty(&scores)?.as_bytes())?;
    Ok(scores)
}

/// Rescores persisted generation records.
pub fn rescore(run: &RunDir, records: &Path) -> Result<GenerationScores> {
    let files = run.corpus();
    let recs: Vec<GenerationRecord> = read_jsonl(records)?;
    score_generations(&recs, &files.load_world()?, &files.load_table()?)
}

/// Trains and evaluates the ablation variants; writes per-variant
/// checkpoints and records plus `ablation.jsonl` and `ablation.txt`.
pub fn ablate_stage(cfg: &RunConfig, run: &RunDir, variants: &[LmVariant], force: bool, quiet: bool) -> Result<Vec<AblationRow>> {
    let (system, fp) = codec_fingerprint_of(run)?;
    let corpus = load_labeled(&run.labeled(), Some(&fp))?;
    for &v in variants {
        refuse_overwrite(&run.variant_lm(v), force)?;
    }
    let files = run.corpus();
    let (world, table) = (files.load_world()?, files.load_table()?);
    let metrics = codec_metrics(cfg, run, &system, &corpus)?;
    let mut sinks: Vec<(LmVariant, StepSink)> = Vec::new();
    let mut on_step = |v: LmVariant, log: &StepLog| -> Result<()> {
        if sinks.last().map(|(lv, _)| *lv) != Some(v) {
            sinks.push((v, StepSink::new(run.log(&format!("lm-{}", variant_slug(v))), cfg.train_lm.log_every, quiet)));
        }
        let prefix = format!("{} ", variant_slug(v));
        sinks.last_mut().expect("sink pushed above").1.push(&prefix, log)
    };
    let mut on_done = |v: LmVariant, trained: &harness::TrainedLm, records: &[GenerationRecord]| -> Result<()> {
        save_lm(&run.variant_lm(v), &trained.store, trained.lm.config(), &fp)?;
        write_jsonl(&run.variant_dir(v).join("generations.jsonl"), records)
    };
    let rows = run_ablation_matrix(
        cfg,
        &system,
        &fp,
        &metrics,
        &corpus,
        &world,
        &table,
        variants,
        AblationHooks { on_step: &mut on_step, on_done: &mut on_done },
    );
    for (_, sink) in sinks {
        sink.finish()?;
    }
    write_jsonl(&run.root.join("ablation.jsonl"), &rows)?;
    write_file(&run.root.join("ablation.txt"), format_ablation_table(&rows).as_bytes())?;
    Ok(rows)
}

pub fn bench_stage(cfg: &RunConfig, run: &RunDir, lm_path: &Path) -> Result<LatencyReport> {
    let lm = load_lm(lm_path, DType::F32)?;
    let files = run.corpus();
    let texts: Vec<InstructionText> = match files.load_split("test") {
        Ok(test) => test
            .iter()
            .take(cfg.eval.bench_texts.max(1))
            .map(|u| InstructionText::new(u.prompt.clone(), u.text.clone()))
            .collect(),
        Err(_) => PromptTemplates::builtin()
            .iter()
            .take(cfg.eval.bench_texts.max(1))
            .map(|p| InstructionText::new(p, "hello world"))
            .collect(),
    };
    let report = benchmark_latency(&lm.lm, &texts, cfg.eval.bench_steps, cfg.eval.bench_repeats)?;
    write_file(&run.root.join("bench.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}
