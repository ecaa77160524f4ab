use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_lm, CodecMetrics, EvalReport, GenerationRecord, LabeledCorpus, StepLog, TrainedLm};
use crate::config::RunConfig;
use crate::error::Result;
use crate::lm::LmVariant;
use crate::system::CodecSystem;
use crate::world::{UnitTable, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: LmVariant,
    pub label: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    pub train_steps: usize,
    pub final_loss: Option<f64>,
    pub train_seconds: f64,
}

/// Callbacks observing an ablation run.
pub struct AblationHooks<'a> {
    pub on_step: &'a mut dyn FnMut(LmVariant, &StepLog) -> Result<()>,
    pub on_done: &'a mut dyn FnMut(LmVariant, &TrainedLm, &[GenerationRecord]) -> Result<()>,
}

/// Trains and evaluates every variant with shared seeds. A failing variant
/// is recorded in its row and the matrix continues.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_matrix(
    cfg: &RunConfig,
    system: &CodecSystem,
    codec_fingerprint: &str,
    codec: &CodecMetrics,
    corpus: &LabeledCorpus,
    world: &WorldConfig,
    table: &UnitTable,
    variants: &[LmVariant],
    hooks: AblationHooks<'_>,
) -> Vec<AblationRow> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let start = Instant::now();
        let mut steps = 0;
        let mut last = None;
        let outcome = (|| -> Result<EvalReport> {
            let lm_cfg = variant.apply(&cfg.lm);
            let mut on_step = |log: &StepLog| {
                steps = log.step + 1;
                last = Some(log.total);
                (hooks.on_step)(variant, log)
            };
            let trained = train_lm(cfg, &lm_cfg, &corpus.train, &mut on_step)?;
            let (report, records) = evaluate(
                system,
                &trained.lm,
                codec_fingerprint,
                codec,
                corpus,
                world,
                table,
                &cfg.eval,
                cfg.seed,
            )?;
            (hooks.on_done)(variant, &trained, &records)?;
            Ok(report)
        })();
        let (report, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(AblationRow {
            variant,
            label: variant.label().into(),
            report,
            error,
            train_steps: steps,
            final_loss: last,
            train_seconds: start.elapsed().as_secs_f64(),
        });
    }
    rows
}

/// Human-readable table of ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "variant", "TER", "style", "recon", "latency", "loss"
    );
    for r in rows {
        match &r.report {
            Some(rep) => {
                let _ = writeln!(
                    out,
                    "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>9.4}",
                    r.label,
                    rep.token_error_rate,
                    rep.style_accuracy,
                    rep.reconstruction_accuracy,
                    rep.latency_ratio,
                    r.final_loss.unwrap_or(f64::NAN)
                );
            }
            None => {
                let _ = writeln!(out, "{:<20} failed: {}", r.label, r.error.as_deref().unwrap_or("unknown"));
            }
        }
    }
    out
}
