//! Next-latent prediction: a residual-delta MLP models the transition of
//! the transformer's hidden states given the next token, trained by a
//! teacher-forced multi-step rollout with stop-gradient targets plus a
//! frozen-head KL alignment term.
//!
//! The rollout follows the shift-and-compare scheme: predictions start from
//! the hidden states shifted one step back in time (a zero dummy state at
//! t=0), every iteration applies one latent transition with the full token
//! batch as the "actions", compares all positions against the detached true
//! hidden states, and feeds its predictions into the next iteration.

use super::{Batch, LossBreakdown};
use crate::error::{Error, Result};
use crate::model::{HiddenStates, LayerNormParams, OutputHead, Param, Transformer};
use crate::tensor::{kl_div, Element, Tape, Tensor, TokenBatch};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

#[derive(Debug, Clone)]
pub struct NextLatConfig {
    /// Rollout horizon d >= 1.
    pub horizon: usize,
    pub lambda_next_h: f64,
    pub lambda_kl: f64,
}

impl Default for NextLatConfig {
    fn default() -> Self {
        NextLatConfig { horizon: 1, lambda_next_h: 1.0, lambda_kl: 1.0 }
    }
}

/// The latent dynamics model p_psi: a three-layer GELU MLP over the
/// layer-normalized concatenation of the current hidden state and the next
/// token's embedding, emitting a delta applied through a residual
/// connection. The final layer is zero-initialized so training starts at
/// the identity transition.
pub struct LatentDynamicsModel<E: Element> {
    pub d_model: usize,
    pub hidden: usize,
    input_norm: LayerNormParams<E>,
    w1: Param<E>,
    b1: Param<E>,
    w2: Param<E>,
    b2: Param<E>,
    w3: Param<E>,
    b3: Param<E>,
}

impl<E: Element> LatentDynamicsModel<E> {
    pub fn new(tape: &Rc<Tape<E>>, d_model: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let two_d = 2 * d_model;
        let std = 0.02;
        LatentDynamicsModel {
            d_model,
            hidden,
            input_norm: LayerNormParams::new(tape, "psi.input_norm", two_d),
            w1: Param::new(tape, "psi.w1", &[two_d, hidden], crate::model::normal_init(rng, two_d * hidden, std)),
            b1: Param::new(tape, "psi.b1", &[hidden], vec![E::ZERO; hidden]),
            w2: Param::new(tape, "psi.w2", &[hidden, hidden], crate::model::normal_init(rng, hidden * hidden, std)),
            b2: Param::new(tape, "psi.b2", &[hidden], vec![E::ZERO; hidden]),
            w3: Param::new(tape, "psi.w3", &[hidden, d_model], vec![E::ZERO; hidden * d_model]),
            b3: Param::new(tape, "psi.b3", &[d_model], vec![E::ZERO; d_model]),
        }
    }

    /// One transition: `h_next = f(norm(concat(h, emb(next_tokens)))) + h`,
    /// vectorized over all positions. `emb_table` is the transformer's own
    /// token embedding table.
    pub fn step_latent(
        &self,
        h: &Tensor<E>,
        next_tokens: &TokenBatch,
        emb_table: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        assert_eq!(
            *h.shape().last().expect("hidden states"),
            self.d_model,
            "step_latent: hidden dim {:?} vs model D={}",
            h.shape(),
            self.d_model
        );
        let emb = emb_table.embedding_lookup(next_tokens)?;
        let x = h.concat_last(&emb);
        let x = self.input_norm.apply(&x);
        let delta = x
            .linear(&self.w1.tensor, Some(&self.b1.tensor))
            .gelu()
            .linear(&self.w2.tensor, Some(&self.b2.tensor))
            .gelu()
            .linear(&self.w3.tensor, Some(&self.b3.tensor));
        Ok(delta.add(h))
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![
            &self.input_norm.gain, &self.input_norm.bias,
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![
            &mut self.input_norm.gain, &mut self.input_norm.bias,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// The d prediction layers of one rollout, plus the detached targets they
/// are scored against.
pub struct RolloutTrace<E: Element> {
    /// Step-i predictions `[B,T,D]`; entry `i` predicts the true hidden
    /// state at each position from the state i steps back.
    pub preds: Vec<Tensor<E>>,
    /// Detached true hidden states (the stop-gradient branch).
    pub targets: Tensor<E>,
}

/// Teacher-forced recursive rollout: shift the current states one step back
/// in time (zero dummy initial state), apply the latent transition with the
/// full token batch, compare against the detached true states, and feed the
/// predictions into the next iteration.
pub fn rollout<E: Element>(
    psi: &LatentDynamicsModel<E>,
    hidden: &HiddenStates<E>,
    tokens: &TokenBatch,
    emb_table: &Tensor<E>,
    d: usize,
) -> Result<RolloutTrace<E>> {
    assert!(d >= 1, "rollout horizon must be >= 1");
    if d >= tokens.time {
        return Err(Error::Config(format!(
            "rollout horizon {d} must be smaller than sequence length {}",
            tokens.time
        )));
    }
    let targets = hidden.0.detach();
    let mut current = hidden.0.clone();
    let mut preds = Vec::with_capacity(d);
    for _ in 0..d {
        current = current.shift_right_time();
        let pred = psi.step_latent(&current, tokens, emb_table)?;
        preds.push(pred.clone());
        current = pred;
    }
    Ok(RolloutTrace { preds, targets })
}

/// Mean over the d rollout steps of smooth-L1 against the detached true
/// states. No prompt masking: belief-state supervision covers context
/// positions too.
pub fn loss_next_h<E: Element>(trace: &RolloutTrace<E>) -> Tensor<E> {
    let d = trace.preds.len();
    let mut acc: Option<Tensor<E>> = None;
    for pred in &trace.preds {
        let term = pred.smooth_l1(&trace.targets, E::ONE);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.expect("rollout has >= 1 step").scale(E::ONE / E::from_usize(d))
}

/// Per-step smooth-L1 values (diagnostics; the rollout-consistency checks
/// compare step orderings).
pub fn per_step_next_h<E: Element>(trace: &RolloutTrace<E>) -> Vec<f64> {
    trace
        .preds
        .iter()
        .map(|p| p.smooth_l1(&trace.targets, E::ONE).item().to_f64())
        .collect()
}

/// Mean over the d rollout steps of forward KL between the (detached) true
/// next-token distribution and the distribution the frozen head assigns to
/// the predicted states, masked to completion positions.
pub fn loss_kl<E: Element>(
    trace: &RolloutTrace<E>,
    frozen_head: &OutputHead<E>,
    live_logits: &Tensor<E>,
    mask: &[bool],
) -> Tensor<E> {
    let d = trace.preds.len();
    let v = *live_logits.shape().last().expect("logits");
    let rows = live_logits.numel() / v;
    assert_eq!(mask.len(), rows, "loss_kl: mask length {} vs {} positions", mask.len(), rows);
    let keep: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if keep.is_empty() {
        return Tensor::scalar(E::ZERO);
    }
    let p_rows = live_logits.detach().reshape(&[rows, v]).gather_rows(&keep);
    let mut acc: Option<Tensor<E>> = None;
    for pred in &trace.preds {
        let q = frozen_head.logits(pred).reshape(&[rows, v]).gather_rows(&keep);
        let term = kl_div(&p_rows, &q);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.expect("rollout has >= 1 step").scale(E::ONE / E::from_usize(d))
}

/// The full objective: masked next-token cross-entropy, plus
/// `lambda_next_h` times the latent regression term, plus `lambda_kl`
/// times the frozen-head KL term. With both lambdas zero the rollout is
/// skipped entirely, making the reduction to plain next-token training
/// exact.
pub fn nextlat_loss<E: Element>(
    model: &Transformer<E>,
    psi: &LatentDynamicsModel<E>,
    batch: &Batch,
    cfg: &NextLatConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<E>, LossBreakdown)> {
    batch.validate();
    let out = match dropout_rng {
        Some(rng) => model.forward_train(&batch.tokens, rng)?,
        None => model.forward(&batch.tokens)?,
    };
    let ce = out.logits.cross_entropy(&batch.targets, &batch.mask)?;
    let mut breakdown = LossBreakdown { next_token: ce.item().to_f64(), ..Default::default() };

    let mut total = ce;
    if cfg.lambda_next_h > 0.0 || cfg.lambda_kl > 0.0 {
        let trace = rollout(psi, &out.hidden, &batch.tokens, model.embedding_table(), cfg.horizon)?;
        if cfg.lambda_next_h > 0.0 {
            let lnh = loss_next_h(&trace);
            breakdown.next_h = lnh.item().to_f64();
            total = total.add(&lnh.scale(E::from_f64(cfg.lambda_next_h)));
        }
        if cfg.lambda_kl > 0.0 {
            let frozen = model.snapshot_frozen_head();
            let lkl = loss_kl(&trace, &frozen, &out.logits, &batch.mask);
            breakdown.kl = lkl.item().to_f64();
            total = total.add(&lkl.scale(E::from_f64(cfg.lambda_kl)));
        }
    }
    breakdown.total = total.item().to_f64();
    Ok((total, breakdown))
}
