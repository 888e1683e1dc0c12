//! Task-aware evaluation driver: given a trained model and a held-out
//! dataset, run every metric that applies to the task and emit one CSV per
//! metric plus a combined summary.

use super::{
    belief_oracle_eval, countdown_accuracy, detour_robustness, effective_rank, next_token_test,
    path_star_solve_rate, sequence_compression, valid_trajectories, MetricRow, METRIC_HEADER,
};
use crate::error::Result;
use crate::model::Transformer;
use crate::tasks::{GridWorld, HmmOracleTask, Record, TaskDataset, TaskKind, TaskMeta};
use crate::tensor::{Element, TokenBatch};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Knobs for the driver; defaults follow the desk-scale protocol.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub seed: u64,
    /// Detour substitution probability for the robustness metric.
    pub detour_prob: f64,
    /// Prefix pairs for sequence compression.
    pub compression_pairs: usize,
    /// Generation cap multiplier over the walk length.
    pub cap_factor: f64,
    /// Sequences drawn for the hidden-state matrix of the rank metric.
    pub rank_sequences: usize,
    /// Positions sampled for the belief pair analysis.
    pub belief_positions: usize,
    pub belief_pair_tolerance: f64,
    pub model_id: String,
    pub config_hash: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            detour_prob: 0.75,
            compression_pairs: 200,
            cap_factor: 2.0,
            rank_sequences: 128,
            belief_positions: 1500,
            belief_pair_tolerance: 0.01,
            model_id: "model".into(),
            config_hash: String::new(),
        }
    }
}

/// Hidden-state matrix for the rank metric: one row per real position of
/// the sampled sequences. All objectives here read the final-layer
/// pre-logit states (the shared trunk; the Fetch combiner sits after it).
pub fn hidden_matrix<E: Element>(
    model: &Transformer<E>,
    records: &[Record],
    max_sequences: usize,
) -> (usize, usize, Vec<f64>) {
    let d = model.cfg.d_model;
    let _guard = model.tape().pause();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for chunk in records.iter().take(max_sequences).collect::<Vec<_>>().chunks(64) {
        let t_len = chunk.iter().map(|r| r.tokens.len() - 1).max().expect("records");
        let mut ids = vec![crate::tasks::PAD; chunk.len() * t_len];
        for (bi, rec) in chunk.iter().enumerate() {
            ids[bi * t_len..bi * t_len + rec.tokens.len() - 1]
                .copy_from_slice(&rec.tokens[..rec.tokens.len() - 1]);
        }
        let out = model.forward(&TokenBatch::new(chunk.len(), t_len, ids)).expect("rank forward");
        let h = out.hidden.0.data();
        for (bi, rec) in chunk.iter().enumerate() {
            for t in 0..rec.tokens.len() - 1 {
                let base = (bi * t_len + t) * d;
                data.extend(h[base..base + d].iter().map(|&v| v.to_f64()));
                rows += 1;
            }
        }
    }
    (rows, d, data)
}

/// Run every metric that applies to the dataset's task.
pub fn evaluate<E: Element>(
    model: &Transformer<E>,
    data: &TaskDataset,
    cfg: &EvalConfig,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, value: f64, n: usize| {
        rows.push(MetricRow {
            metric: metric.to_string(),
            model_id: cfg.model_id.clone(),
            seed: cfg.seed,
            value,
            n,
            config_hash: cfg.config_hash.clone(),
        });
    };

    match (&data.kind, &data.meta) {
        (TaskKind::PathStar, _) => {
            let rate = path_star_solve_rate(model, &data.records);
            push("path_star_solve_rate", rate, data.records.len());
        }
        (TaskKind::Countdown, _) => {
            let report = countdown_accuracy(model, &data.tokenizer, &data.records, 24);
            push("countdown_solve_rate", report.solve_rate, report.n);
            for (i, v) in report.eq_validity.iter().enumerate() {
                push(&format!("countdown_eq{}_validity", i + 1), *v, report.n);
            }
        }
        (TaskKind::GridWorld, TaskMeta::GridWorld { width, height, walk_len, edges, ood_pairs, .. }) => {
            let world = GridWorld::from_edges(*width, *height, edges);
            let cap = ((*walk_len as f64) * cfg.cap_factor) as usize;
            push("next_token_test", next_token_test(model, &world, &data.records), data.records.len());
            push("valid_trajectories", valid_trajectories(model, &world, ood_pairs, cap), ood_pairs.len());
            push(
                "sequence_compression",
                sequence_compression(model, &world, &data.records, cfg.compression_pairs, cfg.seed, cap),
                cfg.compression_pairs,
            );
            push(
                "detour_robustness",
                detour_robustness(model, &world, ood_pairs, cfg.detour_prob, cfg.seed, cap * 3),
                ood_pairs.len(),
            );
            let (m, d, h) = hidden_matrix(model, &data.records, cfg.rank_sequences);
            let rep = effective_rank(m, d, &h, 1e-12)?;
            push("effective_rank", rep.effective_rank, m);
        }
        (TaskKind::Hmm, meta @ TaskMeta::Hmm { .. }) => {
            let hmm = HmmOracleTask::from_meta(meta)?;
            let cmp = belief_oracle_eval(
                model,
                &hmm,
                &data.records,
                cfg.belief_positions,
                cfg.belief_pair_tolerance,
                cfg.seed,
            );
            push("belief_predictive_tv", cmp.mean_predictive_tv, cmp.positions);
            push("belief_pair_median_tv", cmp.median_pair_tv(), cmp.pair_tvs.len());
            let (m, d, h) = hidden_matrix(model, &data.records, cfg.rank_sequences);
            let rep = effective_rank(m, d, &h, 1e-12)?;
            push("effective_rank", rep.effective_rank, m);
        }
        _ => {
            return Err(crate::error::Error::Dataset(
                "dataset metadata does not match its task kind".into(),
            ))
        }
    }
    Ok(rows)
}

/// One CSV per metric plus `summary.csv`.
pub fn write_metric_csvs(out_dir: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut by_metric: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for row in rows {
        by_metric.entry(&row.metric).or_default().push(row);
    }
    for (metric, group) in &by_metric {
        let mut text = String::new();
        let _ = writeln!(text, "{METRIC_HEADER}");
        for row in group {
            let _ = writeln!(text, "{}", row.csv_row());
        }
        std::fs::write(out_dir.join(format!("{metric}.csv")), text)?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "{METRIC_HEADER}");
    for row in rows {
        let _ = writeln!(text, "{}", row.csv_row());
    }
    std::fs::write(out_dir.join("summary.csv"), text)?;
    Ok(())
}
