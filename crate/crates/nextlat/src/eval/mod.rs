//! Measurement machinery: world-model metrics over grid traversals,
//! solve-rate checks for the planning and reasoning benchmarks, effective
//! latent rank, offset-k linear probes, and the belief-oracle comparison.
//!
//! Everything evaluates through [`SequenceModel`], so the same metrics run
//! against trained transformers, the generators' oracle policies, and
//! random baselines. Evaluations are read-only: the transformer
//! implementation pauses its tape for the duration of each call.

mod belief;
mod driver;
mod probes;
mod rank;
mod solve;
mod worldmodel;

pub use belief::{belief_oracle_eval, tv_distance, BeliefComparison, ExactFilterModel};
pub use driver::{evaluate, hidden_matrix, write_metric_csvs, EvalConfig};
pub use probes::{params_checksum, train_probes, ProbeConfig, ProbeResult};
pub use rank::{effective_rank, EffectiveRankReport};
pub use solve::{countdown_accuracy, path_star_solve_rate, CountdownReport};
pub use worldmodel::{
    detour_robustness, next_token_test, sequence_compression, valid_trajectories,
    OracleGridPolicy, RandomPolicy,
};

use crate::model::argmax;
use crate::tensor::{Element, TokenBatch};

/// Anything that scores next tokens for a teacher-forced batch: per
/// position, a vector of `vocab` scores whose argmax (lowest index on ties)
/// is the greedy choice and whose softmax is the model distribution.
pub trait SequenceModel {
    fn vocab_size(&self) -> usize;
    /// Flattened `[batch * time * vocab]` next-token scores.
    fn scores(&self, batch: &TokenBatch) -> Vec<f64>;
}

impl<E: Element> SequenceModel for crate::model::Transformer<E> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn scores(&self, batch: &TokenBatch) -> Vec<f64> {
        let _guard = self.tape().pause();
        let out = self.forward(batch).expect("evaluation forward");
        out.logits.data().iter().map(|&v| v.to_f64()).collect()
    }
}

/// Batched greedy decoding over ragged prompts: each row is extended from
/// its own last real position (rows are padded to a common length with
/// `pad`), stopping at `eos` or after `max_new` tokens.
pub fn greedy_generate(
    model: &dyn SequenceModel,
    prompts: &[Vec<u32>],
    max_new: usize,
    eos: u32,
    pad: u32,
) -> Vec<Vec<u32>> {
    let v = model.vocab_size();
    let mut rows: Vec<Vec<u32>> = prompts.to_vec();
    let mut done: Vec<bool> = rows.iter().map(|r| r.is_empty()).collect();
    for _ in 0..max_new {
        if done.iter().all(|&d| d) {
            break;
        }
        let t = rows.iter().map(Vec::len).max().expect("nonempty prompt set");
        let mut ids = vec![pad; rows.len() * t];
        for (bi, row) in rows.iter().enumerate() {
            ids[bi * t..bi * t + row.len()].copy_from_slice(row);
        }
        let scores = model.scores(&TokenBatch::new(rows.len(), t, ids));
        for (bi, row) in rows.iter_mut().enumerate() {
            if done[bi] {
                continue;
            }
            let pos = row.len() - 1;
            let s = &scores[(bi * t + pos) * v..(bi * t + pos) * v + v];
            let next = argmax(s) as u32;
            row.push(next);
            if next == eos {
                done[bi] = true;
            }
        }
    }
    rows
}

/// Same decoding loop but in bounded sub-batches (memory control for large
/// evaluation sets).
pub fn greedy_generate_chunked(
    model: &dyn SequenceModel,
    prompts: &[Vec<u32>],
    max_new: usize,
    eos: u32,
    pad: u32,
    chunk: usize,
) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(prompts.len());
    for group in prompts.chunks(chunk.max(1)) {
        out.extend(greedy_generate(model, group, max_new, eos, pad));
    }
    out
}

/// One row of the metric summary CSV.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub metric: String,
    pub model_id: String,
    pub seed: u64,
    pub value: f64,
    pub n: usize,
    pub config_hash: String,
}

pub const METRIC_HEADER: &str = "metric,model_id,seed,value,n,config_hash";

impl MetricRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{}",
            self.metric, self.model_id, self.seed, self.value, self.n, self.config_hash
        )
    }
}

#[cfg(test)]
mod tests;
