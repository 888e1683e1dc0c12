//! Belief-oracle comparison: score a model's next-token distributions
//! against the exact HMM filter, two ways. (a) Predictive agreement: mean
//! total-variation distance between the model distribution at each position
//! and the filter's one-step predictive. (b) Sufficiency: over pairs of
//! histories whose exact beliefs nearly coincide, the distribution of TV
//! distances between the model's two predictions — a model that has
//! converged to a belief state cannot tell such histories apart.

use super::SequenceModel;
use crate::rng;
use crate::tasks::hmm::{obs_token, token_obs};
use crate::tasks::{exact_belief_filter, HmmOracleTask, Record, PAD};
use crate::tensor::TokenBatch;
use std::cell::RefCell;

/// Total variation distance between two distributions given as slices
/// (padded with zeros to the longer length).
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    let mut s = 0.0;
    for i in 0..n {
        let a = p.get(i).copied().unwrap_or(0.0);
        let b = q.get(i).copied().unwrap_or(0.0);
        s += (a - b).abs();
    }
    0.5 * s
}

#[derive(Debug, Clone)]
pub struct BeliefComparison {
    /// Mean TV between model predictive and exact-filter predictive over
    /// all sampled positions.
    pub mean_predictive_tv: f64,
    /// TV between the model's predictions for history pairs whose exact
    /// beliefs differ by at most the pair tolerance.
    pub pair_tvs: Vec<f64>,
    pub positions: usize,
    pub pair_tolerance: f64,
}

impl BeliefComparison {
    pub fn median_pair_tv(&self) -> f64 {
        if self.pair_tvs.is_empty() {
            return f64::NAN;
        }
        let mut v = self.pair_tvs.clone();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v[v.len() / 2]
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&x| x / z).collect()
}

/// Run the comparison over held-out sequences. `sample_positions` bounds
/// how many (sequence, position) samples enter the pair analysis.
pub fn belief_oracle_eval(
    model: &dyn SequenceModel,
    hmm: &HmmOracleTask,
    heldout: &[Record],
    sample_positions: usize,
    pair_tolerance: f64,
    seed: u64,
) -> BeliefComparison {
    let v = model.vocab_size();
    let mut rng = rng::stream(seed, "belief-pairs");
    let mut tv_sum = 0.0;
    let mut tv_count = 0usize;
    // (exact belief, model distribution) candidates for the pair analysis.
    let mut candidates: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();

    for chunk in heldout.chunks(128) {
        let t_len = chunk.iter().map(|r| r.tokens.len() - 1).max().expect("records");
        let mut ids = vec![PAD; chunk.len() * t_len];
        for (bi, rec) in chunk.iter().enumerate() {
            ids[bi * t_len..bi * t_len + rec.tokens.len() - 1]
                .copy_from_slice(&rec.tokens[..rec.tokens.len() - 1]);
        }
        let scores = model.scores(&TokenBatch::new(chunk.len(), t_len, ids));
        for (bi, rec) in chunk.iter().enumerate() {
            let obs: Vec<usize> = rec.tokens[1..]
                .iter()
                .filter_map(|&t| token_obs(hmm.obs, t))
                .collect();
            let beliefs = exact_belief_filter(hmm, &obs);
            // Position t in the input predicts observation t+1 (inputs are
            // BOS, x1, ..., x_{T-1}); the filter predictive after t
            // observations is the reference.
            for t in 0..rec.tokens.len() - 1 {
                let model_dist = softmax(&scores[(bi * t_len + t) * v..(bi * t_len + t) * v + v]);
                let pred = hmm.predictive(&beliefs[t]);
                // Filter distribution mapped onto token ids.
                let mut full = vec![0.0; v];
                for (x, &p) in pred.iter().enumerate() {
                    full[obs_token(x) as usize] = p;
                }
                tv_sum += tv_distance(&model_dist, &full);
                tv_count += 1;
                if t >= 2 {
                    candidates.push((beliefs[t].clone(), model_dist.clone()));
                }
            }
        }
    }

    // Random subset of positions, then an all-pairs scan keeping
    // near-coincident beliefs.
    let samples: Vec<&(Vec<f64>, Vec<f64>)> = if candidates.len() <= sample_positions {
        candidates.iter().collect()
    } else {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(sample_positions);
        idx.into_iter().map(|i| &candidates[i]).collect()
    };
    let mut pair_tvs = Vec::new();
    let n = samples.len();
    for i in 0..n {
        for j in i + 1..n {
            if tv_distance(&samples[i].0, &samples[j].0) <= pair_tolerance {
                pair_tvs.push(tv_distance(&samples[i].1, &samples[j].1));
            }
        }
    }
    BeliefComparison {
        mean_predictive_tv: tv_sum / tv_count.max(1) as f64,
        pair_tvs,
        positions: tv_count,
        pair_tolerance,
    }
}

/// Test double: a model that emits the exact filter's predictive
/// distribution (as log-probabilities over observation tokens).
pub struct ExactFilterModel {
    pub hmm: HmmOracleTask,
    pub vocab: usize,
    calls: RefCell<usize>,
}

impl ExactFilterModel {
    pub fn new(hmm: HmmOracleTask, vocab: usize) -> Self {
        ExactFilterModel { hmm, vocab, calls: RefCell::new(0) }
    }
}

impl SequenceModel for ExactFilterModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn scores(&self, batch: &TokenBatch) -> Vec<f64> {
        *self.calls.borrow_mut() += 1;
        let v = self.vocab;
        let mut out = vec![-1e30; batch.batch * batch.time * v];
        for bi in 0..batch.batch {
            let row = batch.row(bi);
            let obs: Vec<usize> =
                row[1..].iter().filter_map(|&t| token_obs(self.hmm.obs, t)).collect();
            let beliefs = exact_belief_filter(&self.hmm, &obs);
            for t in 0..batch.time {
                let filtered = beliefs.get(t.min(obs.len())).expect("belief per prefix");
                let pred = self.hmm.predictive(filtered);
                let base = (bi * batch.time + t) * v;
                for (x, &p) in pred.iter().enumerate() {
                    out[base + obs_token(x) as usize] = p.max(1e-300).ln();
                }
            }
        }
        out
    }
}
