//! Two-stage training, corpus labeling, evaluation and the ablation matrix.

mod ablation;
mod eval;
mod label;
mod train;

pub use ablation::{format_ablation_table, run_ablation_matrix, AblationHooks, AblationRow};
pub use eval::{
    evaluate, evaluate_codec, generate_records, oracle_records, probe_disentanglement, reconstruction_accuracy,
    retrieval_accuracy, score_generations, CodecMetrics, EvalReport, GenerationRecord, GenerationScores, ProbeReport,
};
pub use label::{
    label_corpus, label_utterances, load_labeled, prompt_utilization, LabelManifest, LabeledCorpus,
    LabeledUtterance, LABEL_MANIFEST,
};
pub use train::{component_seed, train_codec, train_lm, StepLog, TrainedLm};

use crate::rng::CounterRng;

#[cfg(test)]
pub(crate) mod testkit;

/// Groups item indices by length and cuts each group into batches of at
/// most `batch` items. Groups are visited in ascending length order and
/// indices keep their relative order.
pub fn length_buckets(lengths: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let batch = batch.max(1);
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in lengths.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_values()
        .flat_map(|g| g.chunks(batch).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Fisher-Yates shuffle driven by `rng`.
pub fn shuffle<T>(items: &mut [T], rng: &mut CounterRng) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Length buckets with per-epoch shuffling inside each length group and of
/// the resulting batch order.
pub fn shuffled_batches(lengths: &[usize], batch: usize, rng: &mut CounterRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    shuffle(&mut order, rng);
    let permuted: Vec<usize> = order.iter().map(|&i| lengths[i]).collect();
    let mut batches: Vec<Vec<usize>> = length_buckets(&permuted, batch)
        .into_iter()
        .map(|b| b.into_iter().map(|k| order[k]).collect())
        .collect();
    shuffle(&mut batches, rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn buckets_partition_indices(lengths in proptest::collection::vec(1usize..6, 0..60), batch in 1usize..9, seed in 0u64..100) {
            let mut rng = CounterRng::new(seed, "t");
            for batches in [length_buckets(&lengths, batch), shuffled_batches(&lengths, batch, &mut rng)] {
                let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
                for b in &batches {
                    prop_assert!(!b.is_empty() && b.len() <= batch);
                    prop_assert!(b.iter().all(|&i| lengths[i] == lengths[b[0]]));
                }
            }
        }
    }
}
