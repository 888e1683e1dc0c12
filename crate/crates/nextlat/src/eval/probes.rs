//! Offset-k linear probes: one `D -> V` affine map per token offset,
//! trained on the frozen transformer's hidden states and scored by held-out
//! cross-entropy. Probe training never touches a transformer parameter;
//! the caller can verify with `params_checksum`.

use crate::error::Result;
use crate::model::{Param, Transformer};
use crate::rng;
use crate::tasks::Record;
use crate::tensor::{Element, Tape, Tensor, TokenBatch};
use crate::train::{AdamWConfig, OptimizerState};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
    /// Initialize the offset-1 probe from the model's own output head
    /// (which is one valid linear probe).
    pub init_from_head: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            batch_size: 256,
            optim: AdamWConfig { lr: 1e-2, warmup_steps: 20, ..Default::default() },
            seed: 0,
            init_from_head: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub offset: usize,
    pub heldout_ce: f64,
    pub train_examples: usize,
    pub heldout_examples: usize,
}

/// FNV-1a over the exact parameter bytes; probing must not change it.
pub fn params_checksum<E: Element>(model: &Transformer<E>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in model.params() {
        for &v in p.tensor.data() {
            for b in v.to_f64().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h
}

/// Hidden states and offset labels extracted once per record set.
struct ProbeData {
    states: Vec<f64>, // flattened [n, d]
    tokens: Vec<Vec<u32>>,
    row_of: Vec<(usize, usize)>, // (record idx, position) per state row
    d: usize,
}

fn collect_states<E: Element>(model: &Transformer<E>, records: &[Record]) -> ProbeData {
    let d = model.cfg.d_model;
    let mut states = Vec::new();
    let mut row_of = Vec::new();
    let _guard = model.tape().pause();
    for (chunk_idx, chunk) in records.chunks(128).enumerate() {
        let t_len = chunk.iter().map(|r| r.tokens.len() - 1).max().expect("records");
        let mut ids = vec![crate::tasks::PAD; chunk.len() * t_len];
        for (bi, rec) in chunk.iter().enumerate() {
            ids[bi * t_len..bi * t_len + rec.tokens.len() - 1]
                .copy_from_slice(&rec.tokens[..rec.tokens.len() - 1]);
        }
        let out = model.forward(&TokenBatch::new(chunk.len(), t_len, ids)).expect("probe forward");
        let h = out.hidden.0.data();
        for (bi, rec) in chunk.iter().enumerate() {
            for t in 0..rec.tokens.len() - 1 {
                let base = (bi * t_len + t) * d;
                states.extend(h[base..base + d].iter().map(|&v| v.to_f64()));
                row_of.push((chunk_idx * 128 + bi, t));
            }
        }
    }
    ProbeData { states, tokens: records.iter().map(|r| r.tokens.clone()).collect(), row_of, d }
}

/// Rows whose position admits a token `offset` steps ahead, with labels.
fn offset_rows(data: &ProbeData, offset: usize) -> (Vec<usize>, Vec<u32>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (row, &(rec, t)) in data.row_of.iter().enumerate() {
        let toks = &data.tokens[rec];
        if t + offset < toks.len() {
            rows.push(row);
            labels.push(toks[t + offset]);
        }
    }
    (rows, labels)
}

/// Train one probe per offset in `1..=max_offset` on frozen hidden states;
/// report held-out cross-entropy. Errors when an offset exceeds every
/// sequence.
pub fn train_probes<E: Element>(
    model: &Transformer<E>,
    train_records: &[Record],
    heldout_records: &[Record],
    max_offset: usize,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    let v = model.cfg.vocab_size;
    let train = collect_states(model, train_records);
    let held = collect_states(model, heldout_records);
    let mut results = Vec::with_capacity(max_offset);
    for offset in 1..=max_offset {
        let (rows, labels) = offset_rows(&train, offset);
        let (hrows, hlabels) = offset_rows(&held, offset);
        if rows.is_empty() || hrows.is_empty() {
            return Err(crate::error::Error::Config(format!(
                "offset {offset} exceeds every sequence length"
            )));
        }
        let tape = Tape::<f64>::new();
        let mut init_rng = rng::stream(cfg.seed, &format!("probe/{offset}"));
        let (w0, b0) = if cfg.init_from_head && offset == 1 {
            let head = model.snapshot_frozen_head();
            let w = head.weight_snapshot();
            assert_eq!(w.shape(), &[train.d, v], "untied head expected for head-init probes");
            (w.data().iter().map(|&x| x.to_f64()).collect(), vec![0.0; v])
        } else {
            (
                crate::model::normal_init::<f64, _>(&mut init_rng, train.d * v, 0.02),
                vec![0.0; v],
            )
        };
        let mut weight = Param::new(&tape, format!("probe{offset}.w"), &[train.d, v], w0);
        let mut bias = Param::new(&tape, format!("probe{offset}.b"), &[v], b0);
        let mut opt = OptimizerState::new(&[train.d * v, v]);
        let mut data_rng = rng::stream(cfg.seed, &format!("probe-data/{offset}"));
        for _ in 0..cfg.steps {
            let picks: Vec<usize> =
                (0..cfg.batch_size).map(|_| data_rng.gen_range(0..rows.len())).collect();
            let mut x = Vec::with_capacity(picks.len() * train.d);
            let mut y = Vec::with_capacity(picks.len());
            for &k in &picks {
                let r = rows[k];
                x.extend_from_slice(&train.states[r * train.d..(r + 1) * train.d]);
                y.push(labels[k]);
            }
            let xs = Tensor::<f64>::constant(&[picks.len(), train.d], x);
            tape.zero_grads();
            let logits = xs.linear(&weight.tensor, Some(&bias.tensor));
            let loss = logits.cross_entropy(&y, &vec![true; y.len()])?;
            tape.backward(&loss)?;
            drop((loss, logits));
            tape.reset();
            opt.adamw_step(&mut [&mut weight, &mut bias], &cfg.optim)?;
        }
        // Held-out cross-entropy.
        let _guard = tape.pause();
        let mut x = Vec::with_capacity(hrows.len() * train.d);
        for &r in &hrows {
            x.extend_from_slice(&held.states[r * held.d..(r + 1) * held.d]);
        }
        let xs = Tensor::<f64>::constant(&[hrows.len(), held.d], x);
        let logits = xs.linear(&weight.tensor, Some(&bias.tensor));
        let ce = logits.cross_entropy(&hlabels, &vec![true; hlabels.len()])?.item();
        results.push(ProbeResult {
            offset,
            heldout_ce: ce,
            train_examples: rows.len(),
            heldout_examples: hrows.len(),
        });
    }
    Ok(results)
}
