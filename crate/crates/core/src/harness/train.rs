use std::time::Instant;

use candle_core::DType;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::{shuffled_batches, LabeledUtterance};
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::lm::{HierarchicalLm, LmConfig, LmExample};
use crate::nn::ParamStore;
use crate::rng::{derive_key, label_hash, CounterRng};
use crate::system::{CodecExample, CodecSystem};
use crate::world::ToyUtterance;

/// One optimizer step: `(name, weight, value)` per loss component and the
/// weighted total that was backpropagated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub epoch: usize,
    pub components: Vec<(String, f64, f64)>,
    pub total: f64,
    pub elapsed_s: f64,
}

impl StepLog {
    /// `|total - Σ weight·value|`.
    pub fn composition_error(&self) -> f64 {
        let sum: f64 = self.components.iter().map(|(_, w, v)| w * v).sum();
        (self.total - sum).abs()
    }
}

pub fn component_seed(seed: u64, component: &str) -> u64 {
    derive_key(seed, label_hash(component))
}

fn optimizer(store: &ParamStore, t: &TrainConfig) -> Result<AdamW> {
    let params = ParamsAdamW { lr: t.lr, weight_decay: t.weight_decay, ..Default::default() };
    Ok(AdamW::new(store.vars(), params)?)
}

fn check_finite(log: &StepLog) -> Result<()> {
    if log.total.is_finite() {
        return Ok(());
    }
    let parts: Vec<String> = log.components.iter().map(|(n, _, v)| format!("{n}={v}")).collect();
    Err(Error::Diverged {
        step: log.step,
        what: format!("{} loss is {} ({})", log.stage, log.total, parts.join(", ")),
    })
}

/// Trains the codec with its two supervision heads on `train`. `on_step`
/// sees every step's log; returning an error aborts training.
pub fn train_codec(
    cfg: &RunConfig,
    train: &[ToyUtterance],
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<CodecSystem> {
    if train.is_empty() {
        return Err(Error::Data("empty codec training set".into()));
    }
    let t = &cfg.train_codec;
    t.validate()?;
    let system = CodecSystem::new(&cfg.codec_system(), DType::F32, component_seed(cfg.seed, "codec.init"))?;
    let mut opt = optimizer(system.store(), t)?;
    let mut batch_rng = CounterRng::new(cfg.seed, "codec.batches");
    let mut noise_rng = CounterRng::new(cfg.seed, "codec.noise");
    let lengths: Vec<usize> = train.iter().map(|u| u.speech.len()).collect();
    let w = cfg.loss;
    let start = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..t.epochs {
        for batch in shuffled_batches(&lengths, t.batch_size, &mut batch_rng) {
            if t.max_steps > 0 && step >= t.max_steps {
                break 'epochs;
            }
            let examples: Vec<CodecExample> = batch
                .iter()
                .map(|&i| CodecExample { speech: &train[i].speech, text: &train[i].text, prompt: &train[i].prompt })
                .collect();
            let losses = system.losses(&examples, Some(&mut noise_rng))?;
            let (rec, asr, clap, total) = losses.values()?;
            let log = StepLog {
                stage: "codec".into(),
                step,
                epoch,
                components: vec![
                    ("rec".into(), 1.0, rec),
                    ("asr".into(), w.lambda_asr, asr),
                    ("clap".into(), w.lambda_clap, clap),
                ],
                total,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            check_finite(&log)?;
            opt.backward_step(&losses.total)?;
            on_step(&log)?;
            step += 1;
        }
    }
    Ok(system)
}

/// A trained language model and its parameters.
#[derive(Debug, Clone)]
pub struct TrainedLm {
    pub store: ParamStore,
    pub lm: HierarchicalLm,
}

/// Trains a language model configured by `lm_cfg` on labeled utterances.
/// Initialization and batch order depend only on `cfg.seed`, so ablation
/// variants share them.
pub fn train_lm(
    cfg: &RunConfig,
    lm_cfg: &LmConfig,
    train: &[LabeledUtterance],
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<TrainedLm> {
    if train.is_empty() {
        return Err(Error::Data("empty LM training set".into()));
    }
    let t = &cfg.train_lm;
    t.validate()?;
    let store = ParamStore::new(DType::F32, component_seed(cfg.seed, "lm.init"));
    let lm = HierarchicalLm::new(&store.root().pp("lm"), lm_cfg)?;
    let mut opt = optimizer(&store, t)?;
    let mut batch_rng = CounterRng::new(cfg.seed, "lm.batches");
    let mut mask_rng = CounterRng::new(cfg.seed, "lm.masks");
    let examples: Vec<LmExample> = train.iter().map(LabeledUtterance::lm_example).collect();
    let lengths: Vec<usize> = examples.iter().map(|e| e.speech.len()).collect();
    let start = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..t.epochs {
        for batch in shuffled_batches(&lengths, t.batch_size, &mut batch_rng) {
            if t.max_steps > 0 && step >= t.max_steps {
                break 'epochs;
            }
            let items: Vec<LmExample> = batch.iter().map(|&i| examples[i].clone()).collect();
            let loss = lm.loss(&items, Some(&mut mask_rng))?;
            let record = loss.record()?;
            let log = StepLog {
                stage: "lm".into(),
                step,
                epoch,
                components: record.components,
                total: record.total,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            check_finite(&log)?;
            opt.backward_step(&loss.total)?;
            on_step(&log)?;
            step += 1;
        }
    }
    Ok(TrainedLm { store, lm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::testkit::{labeled_corpus, tiny_config, utterances};

    #[test]
    fn codec_logs_compose_and_stop_at_max_steps() {
        let cfg = tiny_config();
        let data = utterances(&cfg, 24, "u");
        let mut logs = Vec::new();
        train_codec(&cfg, &data, &mut |l| {
            logs.push(l.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(logs.len(), 3);
        for l in &logs {
            assert!(l.composition_error() <= 1e-5 * l.total.abs().max(1.0), "{l:?}");
            let w: Vec<f64> = l.components.iter().map(|c| c.1).collect();
            assert_eq!(w, vec![1.0, 2.0, 0.8]);
        }
    }

    #[test]
    fn lm_training_is_reproducible_and_logs_compose() {
        let cfg = tiny_config();
        let system = CodecSystem::new(&cfg.codec_system(), DType::F32, 1).unwrap();
        let corpus = labeled_corpus(&cfg, &system, "fp");
        let run = || {
            let mut totals = Vec::new();
            let t = train_lm(&cfg, &cfg.lm, &corpus.train, &mut |l| {
                assert!(l.composition_error() <= 1e-5 * l.total.abs().max(1.0), "{l:?}");
                totals.push(l.total);
                Ok(())
            })
            .unwrap();
            (t.store.fingerprint().unwrap(), totals)
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 3);
    }

    #[test]
    fn callback_errors_abort_and_empty_sets_are_rejected() {
        let cfg = tiny_config();
        let data = utterances(&cfg, 8, "u");
        let mut n = 0;
        let r = train_codec(&cfg, &data, &mut |_| {
            n += 1;
            Err(Error::Data("stop".into()))
        });
        assert!(matches!(r, Err(Error::Data(_))));
        assert_eq!(n, 1);
        assert!(matches!(train_codec(&cfg, &[], &mut |_| Ok(())), Err(Error::Data(_))));
        assert!(matches!(train_lm(&cfg, &cfg.lm, &[], &mut |_| Ok(())), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_totals_are_reported_as_divergence() {
        let log = StepLog {
            stage: "lm".into(),
            step: 7,
            epoch: 0,
            components: vec![("speech".into(), 1.0, f64::NAN)],
            total: f64::NAN,
            elapsed_s: 0.0,
        };
        match check_finite(&log) {
            Err(Error::Diverged { step, what }) => {
                assert_eq!(step, 7);
                assert!(what.contains("speech"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn component_seeds_differ_by_label() {
        assert_ne!(component_seed(0, "codec.init"), component_seed(0, "lm.init"));
        assert_ne!(component_seed(0, "lm.init"), component_seed(1, "lm.init"));
        assert_eq!(component_seed(5, "lm.init"), component_seed(5, "lm.init"));
    }
}
