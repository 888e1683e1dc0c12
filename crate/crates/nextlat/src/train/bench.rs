//! Training-throughput measurement: iterations/second per objective and
//! horizon on one fixed configuration, written as CSV rows.

use super::{ObjectiveKind, RunConfig, Trainer};
use crate::error::Result;
use crate::tasks::{Record, TaskDataset, TaskKind, TaskMeta, Tokenizer};
use crate::tensor::Element;
use rand::Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub objective: ObjectiveKind,
    pub horizon: usize,
    pub iterations_per_sec: f64,
}

pub const BENCH_HEADER: &str = "objective,horizon,iterations_per_sec";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.4}", self.objective.as_str(), self.horizon, self.iterations_per_sec)
    }
}

/// Synthetic token dataset for timing only.
fn synthetic_dataset(vocab: usize, seq_len: usize, count: usize, seed: u64) -> TaskDataset {
    let tokenizer = Tokenizer::new((0..vocab).map(|v| v.to_string()));
    let mut rng = crate::rng::stream(seed, "bench/data");
    let base = 5u32;
    let records = (0..count)
        .map(|_| Record {
            tokens: (0..seq_len)
                .map(|_| base + rng.gen_range(0..vocab as u32))
                .collect(),
            prompt_len: (seq_len / 4) as u32,
        })
        .collect();
    TaskDataset {
        kind: TaskKind::Hmm,
        seed,
        split: "bench".into(),
        tokenizer,
        meta: TaskMeta::Hmm { states: 1, obs: vocab, a: vec![1.0], o: vec![], initial: vec![1.0] },
        records,
    }
}

/// Time `steps` optimizer steps for each (objective, horizon) pair on an
/// identical model configuration and batch stream.
pub fn bench_throughput<E: Element>(
    pairs: &[(ObjectiveKind, usize)],
    base: &RunConfig,
    steps: u64,
    warmup: u64,
) -> Result<Vec<BenchRow>> {
    let data = synthetic_dataset(64, 65, 256, base.seed);
    let mut rows = Vec::with_capacity(pairs.len());
    for &(objective, horizon) in pairs {
        let mut run = base.clone();
        run.objective = objective;
        run.horizon = horizon;
        run.steps = warmup + steps;
        let mut trainer = Trainer::<E>::new(run.clone(), &data)?;
        for _ in 0..warmup {
            trainer.train_step(&data)?;
        }
        let t0 = Instant::now();
        for _ in 0..steps {
            trainer.train_step(&data)?;
        }
        let dt = t0.elapsed().as_secs_f64();
        rows.push(BenchRow { objective, horizon, iterations_per_sec: steps as f64 / dt.max(1e-9) });
    }
    Ok(rows)
}
