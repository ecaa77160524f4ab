//! Tiny world, corpus and model configuration shared by harness tests.

use super::{label_utterances, LabelManifest, LabeledCorpus, LabeledUtterance};
use crate::config::RunConfig;
use crate::prompts::PromptTemplates;
use crate::rng::CounterRng;
use crate::system::CodecSystem;
use crate::world::{sample_utterance, ToyUtterance, UnitTable};

pub fn tiny_config() -> RunConfig {
    let text = r#"
seed = 3
[world]
min_chars = 2
max_chars = 4
[codec]
extractor_layers = 1
combiner_layers = 1
model_dim = 16
heads = 2
max_frames = 16
[heads]
asr_layers = 1
asr_dim = 16
asr_heads = 2
max_text = 8
clap_width = 16
clap_heads = 2
clap_dim = 8
[lm]
backbone_layers = 1
width = 16
heads = 2
max_context = 64
decoder_layers = 1
decoder_heads = 2
[train_codec]
batch_size = 8
lr = 1e-3
max_steps = 3
[train_lm]
batch_size = 8
lr = 1e-3
max_steps = 3
[eval]
max_len = 8
probe_epochs = 20
bench_texts = 2
bench_steps = 4
bench_repeats = 1
"#;
    RunConfig::resolve(Some(text), &[]).unwrap()
}

pub fn utterances(cfg: &RunConfig, n: usize, label: &str) -> Vec<ToyUtterance> {
    let table = UnitTable::generate(&cfg.world).unwrap();
    let templates = PromptTemplates::builtin();
    let base = CounterRng::new(cfg.seed, label);
    (0..n)
        .map(|i| {
            let mut rng = base.fork_index(i as u64);
            sample_utterance(&mut rng, &cfg.world, &table, &templates, format!("{label}{i}")).unwrap()
        })
        .collect()
}

pub fn labeled_corpus(cfg: &RunConfig, system: &CodecSystem, fingerprint: &str) -> LabeledCorpus {
    let label = |n, name| -> Vec<LabeledUtterance> { label_utterances(system, &utterances(cfg, n, name), 8).unwrap() };
    let train = label(24, "train");
    LabeledCorpus {
        manifest: LabelManifest {
            codec_fingerprint: fingerprint.into(),
            speech_vocab: cfg.codec.speech_vocab,
            sizes: [24, 4, 6],
            prompt_utilization: 0.0,
            prompt_codes_used: 0,
            content_codes_used: 0,
        },
        train,
        dev: label(4, "dev"),
        test: label(6, "test"),
    }
}
