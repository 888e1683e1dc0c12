//! Hidden Markov model streams and the exact belief filter they are scored
//! against. Row-stochastic matrices are drawn with every entry at least
//! 0.05 so beliefs stay identifiable and well-conditioned.
//!
//! Generative convention: `s_0 ~ initial` emits nothing; for t >= 1,
//! `s_t ~ A[s_{t-1}]` then `x_t ~ O[s_t]`. The matching filter is
//! `b_0 = initial`, `b_{t+1} ∝ O[:, x_{t+1}] ⊙ (Aᵀ b_t)`.

use super::{Record, TaskDataset, TaskKind, TaskMeta, Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

const ENTRY_FLOOR: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct HmmParams {
    pub states: usize,
    pub obs: usize,
    pub count: usize,
    /// Observations per sequence.
    pub seq_len: usize,
}

/// Ground-truth HMM: transition rows `a[s*states..]`, emission rows
/// `o[s*obs..]`, and the initial state distribution.
#[derive(Debug, Clone)]
pub struct HmmOracleTask {
    pub states: usize,
    pub obs: usize,
    pub a: Vec<f64>,
    pub o: Vec<f64>,
    pub initial: Vec<f64>,
}

impl HmmOracleTask {
    pub fn from_meta(meta: &TaskMeta) -> Result<Self> {
        match meta {
            TaskMeta::Hmm { states, obs, a, o, initial } => Ok(HmmOracleTask {
                states: *states,
                obs: *obs,
                a: a.clone(),
                o: o.clone(),
                initial: initial.clone(),
            }),
            _ => Err(Error::Dataset("dataset metadata is not an HMM".into())),
        }
    }

    /// Predicted state distribution one transition ahead of `belief`.
    pub fn predict_state(&self, belief: &[f64]) -> Vec<f64> {
        let s = self.states;
        let mut out = vec![0.0; s];
        for i in 0..s {
            for j in 0..s {
                out[j] += belief[i] * self.a[i * s + j];
            }
        }
        out
    }

    /// Next-observation distribution given the current belief:
    /// `(Aᵀ b)ᵀ O`.
    pub fn predictive(&self, belief: &[f64]) -> Vec<f64> {
        let prior = self.predict_state(belief);
        let mut out = vec![0.0; self.obs];
        for s in 0..self.states {
            for v in 0..self.obs {
                out[v] += prior[s] * self.o[s * self.obs + v];
            }
        }
        out
    }

    /// Stationary distribution of A by power iteration (the oracle for the
    /// unigram test).
    pub fn stationary(&self) -> Vec<f64> {
        let s = self.states;
        let mut pi = vec![1.0 / s as f64; s];
        for _ in 0..10_000 {
            let next = self.predict_state(&pi);
            let diff: f64 = next.iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-14 {
                break;
            }
        }
        pi
    }
}

fn stochastic_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    assert!(ENTRY_FLOOR * (n as f64) < 1.0, "entry floor infeasible for row of {n}");
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().max(1e-9)).collect();
    let z: f64 = raw.iter().sum();
    let free = 1.0 - ENTRY_FLOOR * n as f64;
    raw.into_iter().map(|r| ENTRY_FLOOR + free * r / z).collect()
}

pub fn hmm_tokenizer(obs: usize) -> Tokenizer {
    Tokenizer::new((0..obs).map(|v| v.to_string()))
}

pub fn obs_token(v: usize) -> u32 {
    super::RESERVED.len() as u32 + v as u32
}

pub fn token_obs(obs: usize, token: u32) -> Option<usize> {
    let base = super::RESERVED.len() as u32;
    (token >= base && token < base + obs as u32).then(|| (token - base) as usize)
}

pub fn gen_hmm(seed: u64, params: &HmmParams, split: &str) -> Result<(HmmOracleTask, TaskDataset)> {
    if params.states < 1 || params.obs < 2 {
        return Err(Error::Infeasible("need S >= 1 and V >= 2".into()));
    }
    // The chain itself is a function of the seed only, shared across splits.
    let mut chain_rng = rng::stream(seed, "hmm/chain");
    let mut a = Vec::with_capacity(params.states * params.states);
    let mut o = Vec::with_capacity(params.states * params.obs);
    for _ in 0..params.states {
        a.extend(stochastic_row(&mut chain_rng, params.states));
    }
    for _ in 0..params.states {
        o.extend(stochastic_row(&mut chain_rng, params.obs));
    }
    let initial = stochastic_row(&mut chain_rng, params.states);
    let hmm = HmmOracleTask { states: params.states, obs: params.obs, a, o, initial };

    let tokenizer = hmm_tokenizer(params.obs);
    let mut rng = rng::stream(seed, &format!("hmm/{split}"));
    let mut records = Vec::with_capacity(params.count);
    for _ in 0..params.count {
        let mut tokens = Vec::with_capacity(params.seq_len + 1);
        tokens.push(BOS);
        let mut state = sample_categorical(&hmm.initial, &mut rng);
        for _ in 0..params.seq_len {
            state = sample_categorical(&hmm.a[state * params.states..(state + 1) * params.states], &mut rng);
            let x = sample_categorical(&hmm.o[state * params.obs..(state + 1) * params.obs], &mut rng);
            tokens.push(obs_token(x));
        }
        records.push(Record { tokens, prompt_len: 1 });
    }
    let meta = TaskMeta::Hmm {
        states: hmm.states,
        obs: hmm.obs,
        a: hmm.a.clone(),
        o: hmm.o.clone(),
        initial: hmm.initial.clone(),
    };
    Ok((
        hmm,
        TaskDataset {
            kind: TaskKind::Hmm,
            seed,
            split: split.to_string(),
            tokenizer,
            meta,
            records,
        },
    ))
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.gen::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact forward filter: returns `[b_0, b_1, ..., b_T]` where `b_t` is the
/// posterior over states after observing the first t symbols, starting from
/// the initial distribution.
pub fn exact_belief_filter(hmm: &HmmOracleTask, observations: &[usize]) -> Vec<Vec<f64>> {
    let s = hmm.states;
    let mut beliefs = Vec::with_capacity(observations.len() + 1);
    beliefs.push(hmm.initial.clone());
    let mut b = hmm.initial.clone();
    for &x in observations {
        assert!(x < hmm.obs, "observation {x} outside alphabet {}", hmm.obs);
        let prior = hmm.predict_state(&b);
        let mut next: Vec<f64> = (0..s).map(|j| prior[j] * hmm.o[j * hmm.obs + x]).collect();
        let z: f64 = next.iter().sum();
        assert!(z > 0.0, "zero normalizer is impossible with the 0.05 entry floor");
        for v in next.iter_mut() {
            *v /= z;
        }
        beliefs.push(next.clone());
        b = next;
    }
    beliefs
}
