//! Decoder-only causal transformer in the nanoGPT mold: learned absolute
//! positions, pre-norm residual blocks, GELU MLPs, untied output head by
//! default. `forward` returns both the final-layer pre-logit activations
//! h_t (what the latent-dynamics objectives supervise) and the logits.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Moments, RngState};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tape, Tensor, TokenBatch};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Learned,
    None,
}

#[derive(Debug, Clone)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub positional: Positional,
    pub tie_embeddings: bool,
}

impl TransformerConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        TransformerConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len,
            dropout: 0.0,
            positional: Positional::Learned,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.max_seq_len < 2 {
            return Err(Error::Config("vocab_size and max_seq_len must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count; asserted against the live model so the
    /// throughput reports stay honest.
    ///
    /// wte V·D + wpe T·D (if learned)
    ///   + L · (4D [ln] + 3D²+3D [qkv] + D²+D [proj] + 2·D·Dff + Dff + D [mlp])
    ///   + 2D [final ln] + D·V (head; 0 if tied)
    pub fn param_count(&self) -> usize {
        let (d, v, l, f) = (self.d_model, self.vocab_size, self.n_layers, self.d_ff);
        let mut n = v * d;
        if self.positional == Positional::Learned {
            n += self.max_seq_len * d;
        }
        n += l * (4 * d + 3 * d * d + 3 * d + d * d + d + 2 * d * f + f + d);
        n += 2 * d;
        if !self.tie_embeddings {
            n += d * v;
        }
        n
    }
}

/// A named trainable tensor. `decay` marks it for decoupled weight decay
/// (matrices yes, gains/biases no — the nanoGPT grouping).
pub struct Param<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub decay: bool,
}

impl<E: Element> Param<E> {
    pub fn new(tape: &Rc<Tape<E>>, name: impl Into<String>, shape: &[usize], data: Vec<E>) -> Self {
        let name = name.into();
        let decay = shape.len() >= 2;
        Param { name, tensor: Tensor::param(tape, shape, data), decay }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

pub fn normal_init<E: Element, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<E> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| E::from_f64(dist.sample(rng))).collect()
}

pub(crate) struct LayerNormParams<E: Element> {
    pub gain: Param<E>,
    pub bias: Param<E>,
}

impl<E: Element> LayerNormParams<E> {
    pub(crate) fn new(tape: &Rc<Tape<E>>, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: Param::new(tape, format!("{name}.gain"), &[d], vec![E::ONE; d]),
            bias: Param::new(tape, format!("{name}.bias"), &[d], vec![E::ZERO; d]),
        }
    }

    pub(crate) fn apply(&self, x: &Tensor<E>) -> Tensor<E> {
        x.layer_norm(&self.gain.tensor, &self.bias.tensor, E::from_f64(1e-5))
    }
}

/// One pre-norm residual block (attention + MLP). Also used standalone as
/// the per-branch trunk extension of the multi-token prediction baseline.
pub(crate) struct TransformerBlock<E: Element> {
    n_heads: usize,
    ln1: LayerNormParams<E>,
    w_qkv: Param<E>,
    b_qkv: Param<E>,
    w_proj: Param<E>,
    b_proj: Param<E>,
    ln2: LayerNormParams<E>,
    w_fc: Param<E>,
    b_fc: Param<E>,
    w_out: Param<E>,
    b_out: Param<E>,
}

impl<E: Element> TransformerBlock<E> {
    pub(crate) fn new(
        tape: &Rc<Tape<E>>,
        prefix: &str,
        d: usize,
        f: usize,
        n_heads: usize,
        resid_scale_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 0.02;
        let resid_std = std / (2.0 * resid_scale_layers as f64).sqrt();
        TransformerBlock {
            n_heads,
            ln1: LayerNormParams::new(tape, &format!("{prefix}.ln1"), d),
            w_qkv: Param::new(tape, format!("{prefix}.attn.w_qkv"), &[d, 3 * d], normal_init(rng, 3 * d * d, std)),
            b_qkv: Param::new(tape, format!("{prefix}.attn.b_qkv"), &[3 * d], vec![E::ZERO; 3 * d]),
            w_proj: Param::new(tape, format!("{prefix}.attn.w_proj"), &[d, d], normal_init(rng, d * d, resid_std)),
            b_proj: Param::new(tape, format!("{prefix}.attn.b_proj"), &[d], vec![E::ZERO; d]),
            ln2: LayerNormParams::new(tape, &format!("{prefix}.ln2"), d),
            w_fc: Param::new(tape, format!("{prefix}.mlp.w_fc"), &[d, f], normal_init(rng, d * f, std)),
            b_fc: Param::new(tape, format!("{prefix}.mlp.b_fc"), &[f], vec![E::ZERO; f]),
            w_out: Param::new(tape, format!("{prefix}.mlp.w_out"), &[f, d], normal_init(rng, f * d, resid_std)),
            b_out: Param::new(tape, format!("{prefix}.mlp.b_out"), &[d], vec![E::ZERO; d]),
        }
    }

    pub(crate) fn forward(
        &self,
        x: &Tensor<E>,
        dropout: f64,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<E> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.n_heads;
        let dh = d / h;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let a = self.ln1.apply(x);
        let qkv = a.linear(&self.w_qkv.tensor, Some(&self.b_qkv.tensor));
        let split = |s: usize| {
            qkv.slice_last(s * d, d)
                .reshape(&[b, t, h, dh])
                .permute_0213()
                .reshape(&[b * h, t, dh])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let att = q.bmm_nt(&k).scale(scale).causal_softmax();
        let y = att.bmm(&v).reshape(&[b, h, t, dh]).permute_0213().reshape(&[b, t, d]);
        let mut proj = y.linear(&self.w_proj.tensor, Some(&self.b_proj.tensor));
        if let Some(rng) = dropout_rng.as_deref_mut() {
            proj = proj.dropout(dropout, rng);
        }
        let x = x.add(&proj);

        let m = self.ln2.apply(&x);
        let mut mlp = m
            .linear(&self.w_fc.tensor, Some(&self.b_fc.tensor))
            .gelu()
            .linear(&self.w_out.tensor, Some(&self.b_out.tensor));
        if let Some(rng) = dropout_rng.as_deref_mut() {
            mlp = mlp.dropout(dropout, rng);
        }
        x.add(&mlp)
    }

    pub(crate) fn params(&self) -> Vec<&Param<E>> {
        vec![
            &self.ln1.gain, &self.ln1.bias, &self.w_qkv, &self.b_qkv, &self.w_proj, &self.b_proj,
            &self.ln2.gain, &self.ln2.bias, &self.w_fc, &self.b_fc, &self.w_out, &self.b_out,
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![
            &mut self.ln1.gain, &mut self.ln1.bias, &mut self.w_qkv, &mut self.b_qkv,
            &mut self.w_proj, &mut self.b_proj, &mut self.ln2.gain, &mut self.ln2.bias,
            &mut self.w_fc, &mut self.b_fc, &mut self.w_out, &mut self.b_out,
        ]
    }
}

/// Token head: a `[D, V]` projection. A `FrozenCopy` shares values with the
/// live head at snapshot time but is detached, so it never receives
/// gradient.
pub struct OutputHead<E: Element> {
    weight: Tensor<E>,
    /// Tied heads project through the embedding table rows (`[V, D]`).
    tied: bool,
    pub mode: HeadMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Live,
    FrozenCopy,
}

impl<E: Element> OutputHead<E> {
    pub fn logits(&self, hidden: &Tensor<E>) -> Tensor<E> {
        if self.tied {
            hidden.linear_nt(&self.weight)
        } else {
            hidden.linear(&self.weight, None)
        }
    }

    /// Detached copy of the projection values.
    pub fn weight_snapshot(&self) -> Tensor<E> {
        self.weight.detach()
    }
}

pub struct Transformer<E: Element> {
    pub cfg: TransformerConfig,
    tape: Rc<Tape<E>>,
    wte: Param<E>,
    wpe: Option<Param<E>>,
    blocks: Vec<TransformerBlock<E>>,
    ln_f: LayerNormParams<E>,
    /// Untied output head; `None` when `cfg.tie_embeddings`.
    head: Option<Param<E>>,
}

/// Final-layer pre-logit activations `[B,T,D]`; h_t is a function of
/// tokens 1..=t only (enforced by the causal mask and asserted in tests).
pub struct HiddenStates<E: Element>(pub Tensor<E>);

pub struct ForwardOutput<E: Element> {
    pub hidden: HiddenStates<E>,
    pub logits: Tensor<E>,
}

/// Decoding mode for `generate`.
#[derive(Debug, Clone, Copy)]
pub enum DecodeMode {
    /// Argmax with lowest-index tie break.
    Greedy,
    /// Temperature sampling from a seeded stream; temperature 0 reduces to
    /// greedy.
    Sample { temperature: f64, seed: u64 },
}

impl<E: Element> Transformer<E> {
    /// Fresh model with nanoGPT init: normal(0, 0.02) everywhere, residual
    /// projections scaled by 1/sqrt(2·n_layers), zero biases.
    pub fn new(cfg: TransformerConfig, tape: &Rc<Tape<E>>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
        let std = 0.02;

        let wte = Param::new(tape, "wte", &[v, d], normal_init(rng, v * d, std));
        let wpe = match cfg.positional {
            Positional::Learned => Some(Param::new(
                tape,
                "wpe",
                &[cfg.max_seq_len, d],
                normal_init(rng, cfg.max_seq_len * d, std),
            )),
            Positional::None => None,
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            blocks.push(TransformerBlock::new(
                tape,
                &format!("block{l}"),
                d,
                f,
                cfg.n_heads,
                cfg.n_layers,
                rng,
            ));
        }
        let ln_f = LayerNormParams::new(tape, "ln_f", d);
        let head = if cfg.tie_embeddings {
            None
        } else {
            Some(Param::new(tape, "head", &[d, v], normal_init(rng, d * v, std)))
        };
        Ok(Transformer { cfg, tape: Rc::clone(tape), wte, wpe, blocks, ln_f, head })
    }

    pub fn tape(&self) -> &Rc<Tape<E>> {
        &self.tape
    }

    /// The token embedding table `[V, D]` (shared with the latent-dynamics
    /// model's next-token inputs).
    pub fn embedding_table(&self) -> &Tensor<E> {
        &self.wte.tensor
    }

    /// Live output head: gradients flow into its parameters.
    pub fn output_head(&self) -> OutputHead<E> {
        match &self.head {
            Some(p) => OutputHead { weight: p.tensor.clone(), tied: false, mode: HeadMode::Live },
            None => OutputHead { weight: self.wte.tensor.clone(), tied: true, mode: HeadMode::Live },
        }
    }

    /// Value-equal copy of the head whose parameters are detached. Taken
    /// fresh at every loss evaluation.
    pub fn snapshot_frozen_head(&self) -> OutputHead<E> {
        let live = self.output_head();
        OutputHead { weight: live.weight.detach(), tied: live.tied, mode: HeadMode::FrozenCopy }
    }

    pub fn forward(&self, tokens: &TokenBatch) -> Result<ForwardOutput<E>> {
        self.forward_inner(tokens, None)
    }

    /// Training-mode forward: applies dropout on the residual branches when
    /// `cfg.dropout > 0`. The plain `forward` is the pure evaluation path.
    pub fn forward_train(&self, tokens: &TokenBatch, rng: &mut ChaCha8Rng) -> Result<ForwardOutput<E>> {
        self.forward_inner(tokens, if self.cfg.dropout > 0.0 { Some(rng) } else { None })
    }

    fn forward_inner(
        &self,
        tokens: &TokenBatch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<E>> {
        let t = tokens.time;
        if t > self.cfg.max_seq_len {
            return Err(Error::ContextOverflow { need: t, max: self.cfg.max_seq_len });
        }
        let d = self.cfg.d_model;

        let mut x = self.wte.tensor.embedding_lookup(tokens)?;
        if let Some(wpe) = &self.wpe {
            let pos = TokenBatch::new(1, t, (0..t as u32).collect());
            let pe = wpe.tensor.embedding_lookup(&pos)?.reshape(&[t, d]);
            x = x.add(&pe);
        }
        for blk in &self.blocks {
            x = blk.forward(&x, self.cfg.dropout, dropout_rng.as_deref_mut());
        }
        let hidden = self.ln_f.apply(&x);
        let logits = self.output_head().logits(&hidden);
        Ok(ForwardOutput { hidden: HiddenStates(hidden), logits })
    }

    /// Autoregressive decoding: appends tokens one at a time, recomputing
    /// the full prefix (no KV cache at desk scale). Errors rather than
    /// sliding the window when the context would overflow.
    pub fn generate(&self, prompt: &[u32], max_new: usize, mode: DecodeMode) -> Result<Vec<u32>> {
        assert!(!prompt.is_empty(), "generate requires a nonempty prompt");
        if prompt.len() + max_new > self.cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                need: prompt.len() + max_new,
                max: self.cfg.max_seq_len,
            });
        }
        let mut sample_rng = match mode {
            DecodeMode::Sample { seed, .. } => Some(rng::stream(seed, "generate")),
            DecodeMode::Greedy => None,
        };
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let batch = TokenBatch::new(1, seq.len(), seq.clone());
            let out = self.forward(&batch)?;
            let v = self.cfg.vocab_size;
            let last = &out.logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let next = match (&mode, sample_rng.as_mut()) {
                (DecodeMode::Greedy, _) => argmax(last),
                (DecodeMode::Sample { temperature, .. }, Some(rng)) => {
                    if *temperature <= 0.0 {
                        argmax(last)
                    } else {
                        sample_logits(last, *temperature, rng)
                    }
                }
                _ => unreachable!(),
            };
            seq.push(next as u32);
        }
        Ok(seq)
    }

    /// All trainable parameters in a fixed order (checkpoint field order).
    pub fn params(&self) -> Vec<&Param<E>> {
        let mut out: Vec<&Param<E>> = vec![&self.wte];
        if let Some(wpe) = &self.wpe {
            out.push(wpe);
        }
        for blk in &self.blocks {
            out.extend(blk.params());
        }
        out.push(&self.ln_f.gain);
        out.push(&self.ln_f.bias);
        if let Some(head) = &self.head {
            out.push(head);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut out: Vec<&mut Param<E>> = vec![&mut self.wte];
        if let Some(wpe) = &mut self.wpe {
            out.push(wpe);
        }
        for blk in &mut self.blocks {
            out.extend(blk.params_mut());
        }
        out.push(&mut self.ln_f.gain);
        out.push(&mut self.ln_f.bias);
        if let Some(head) = &mut self.head {
            out.push(head);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Argmax with lowest-index tie break (the deterministic greedy contract).
pub fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_logits<E: Element>(row: &[E], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = row.iter().map(|&v| v.to_f64() / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut u = rng.gen::<f64>() * z;
    for (i, &e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}
