//! Baseline objectives: plain next-token (GPT), multi-token prediction with
//! per-horizon branch blocks (MTP), and joint multi-token prediction with a
//! Fetch combiner over teacher-forced tokens (JTP).

use super::{Batch, LossBreakdown};
use crate::error::{Error, Result};
use crate::model::{normal_init, Param, Transformer, TransformerBlock};
use crate::tensor::{Element, Tape, Tensor, TokenBatch};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Masked next-token cross-entropy.
pub fn gpt_loss<E: Element>(
    model: &Transformer<E>,
    batch: &Batch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<E>, LossBreakdown)> {
    batch.validate();
    let out = match dropout_rng {
        Some(rng) => model.forward_train(&batch.tokens, rng)?,
        None => model.forward(&batch.tokens)?,
    };
    let ce = out.logits.cross_entropy(&batch.targets, &batch.mask)?;
    let val = ce.item().to_f64();
    Ok((ce, LossBreakdown { total: val, next_token: val, ..Default::default() }))
}

/// d parallel output branches; branch i is one extra transformer block plus
/// an untied projection, supervised by the token i+1 steps ahead.
pub struct MtpHeads<E: Element> {
    d_model: usize,
    vocab: usize,
    branches: Vec<(TransformerBlock<E>, Param<E>)>,
}

impl<E: Element> MtpHeads<E> {
    pub fn new(
        tape: &Rc<Tape<E>>,
        d: usize,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d >= 1, "MTP horizon must be >= 1");
        let branches = (0..d)
            .map(|i| {
                let block = TransformerBlock::new(
                    tape,
                    &format!("mtp.branch{i}"),
                    d_model,
                    d_ff,
                    n_heads,
                    1,
                    rng,
                );
                let proj = Param::new(
                    tape,
                    format!("mtp.branch{i}.proj"),
                    &[d_model, vocab],
                    normal_init(rng, d_model * vocab, 0.02),
                );
                (block, proj)
            })
            .collect();
        MtpHeads { d_model, vocab, branches }
    }

    pub fn horizon(&self) -> usize {
        self.branches.len()
    }

    /// Branch-i logits over the shared trunk output.
    pub fn branch_logits(
        &self,
        i: usize,
        trunk: &Tensor<E>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<E> {
        let (block, proj) = &self.branches[i];
        block.forward(trunk, 0.0, dropout_rng).linear(&proj.tensor, None)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut out = Vec::new();
        for (block, proj) in &self.branches {
            out.extend(block.params());
            out.push(proj);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut out = Vec::new();
        for (block, proj) in &mut self.branches {
            out.extend(block.params_mut());
            out.push(proj);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_model, self.vocab)
    }
}

/// Mean of the per-branch masked cross-entropies, equally weighted. Branch
/// i at position t is supervised by the token at t+1+i; positions whose
/// target falls past the end are dropped, so the last position contributes
/// only to branch 0.
pub fn mtp_loss<E: Element>(
    model: &Transformer<E>,
    heads: &MtpHeads<E>,
    batch: &Batch,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<E>, LossBreakdown)> {
    batch.validate();
    let d = heads.horizon();
    let t = batch.tokens.time;
    if d >= t {
        return Err(Error::Config(format!("MTP horizon {d} must be smaller than sequence length {t}")));
    }
    let out = match dropout_rng.as_deref_mut() {
        Some(rng) => model.forward_train(&batch.tokens, rng)?,
        None => model.forward(&batch.tokens)?,
    };
    let trunk = &out.hidden.0;
    let mut acc: Option<Tensor<E>> = None;
    let mut first_branch = 0.0;
    for i in 0..d {
        let logits = heads.branch_logits(i, trunk, dropout_rng.as_deref_mut());
        let sliced = logits.slice_time(0, t - i);
        let (targets, mask) = batch.shifted(i);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let term = sliced.cross_entropy(&targets, &mask)?;
        if i == 0 {
            first_branch = term.item().to_f64();
        }
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    let total = acc.ok_or(Error::EmptyLoss)?.scale(E::ONE / E::from_usize(d));
    let val = total.item().to_f64();
    Ok((total, LossBreakdown { total: val, next_token: first_branch, ..Default::default() }))
}

/// The Fetch combiner: teacher-forced token embeddings summed with learned
/// offset-position embeddings, concatenated with h_t, then one affine +
/// GELU back to model width. Conditioning vectors feed the shared live
/// output head.
pub struct FetchModule<E: Element> {
    max_offset: usize,
    offset_emb: Param<E>,
    w: Param<E>,
    b: Param<E>,
}

impl<E: Element> FetchModule<E> {
    pub fn new(tape: &Rc<Tape<E>>, d: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d >= 1, "JTP horizon must be >= 1");
        FetchModule {
            max_offset: d,
            offset_emb: Param::new(
                tape,
                "jtp.offset_emb",
                &[d, d_model],
                normal_init(rng, d * d_model, 0.02),
            ),
            w: Param::new(
                tape,
                "jtp.fetch_w",
                &[2 * d_model, d_model],
                normal_init(rng, 2 * d_model * d_model, 0.02),
            ),
            b: Param::new(tape, "jtp.fetch_b", &[d_model], vec![E::ZERO; d_model]),
        }
    }

    pub fn horizon(&self) -> usize {
        self.max_offset
    }

    /// Conditioning vectors for offset i: `gelu(W [h_t ; sum_emb] + b)`.
    pub fn combine(&self, h: &Tensor<E>, summed_emb: &Tensor<E>) -> Tensor<E> {
        h.concat_last(summed_emb).linear(&self.w.tensor, Some(&self.b.tensor)).gelu()
    }

    /// Row i (0-based offset i+1) of the offset embedding table.
    fn offset_row(&self, i: usize) -> Tensor<E> {
        let d_model = self.offset_emb.tensor.shape()[1];
        self.offset_emb
            .tensor
            .embedding_lookup(&TokenBatch::new(1, 1, vec![i as u32]))
            .expect("offset id in range")
            .reshape(&[d_model])
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.offset_emb, &self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.offset_emb, &mut self.w, &mut self.b]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Next-token term plus (1/d)-weighted Fetch-conditioned terms: term i
/// predicts the token i+1 steps ahead from `Fetch(h_t, X_{t+1:t+i})`,
/// prompt-masked at the predicted position.
pub fn jtp_loss<E: Element>(
    model: &Transformer<E>,
    fetch: &FetchModule<E>,
    batch: &Batch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<E>, LossBreakdown)> {
    batch.validate();
    let d = fetch.horizon();
    let t = batch.tokens.time;
    if d >= t {
        return Err(Error::Config(format!("JTP horizon {d} must be smaller than sequence length {t}")));
    }
    let out = match dropout_rng {
        Some(rng) => model.forward_train(&batch.tokens, rng)?,
        None => model.forward(&batch.tokens)?,
    };
    let ce = out.logits.cross_entropy(&batch.targets, &batch.mask)?;
    let next_token = ce.item().to_f64();

    let head = model.output_head();
    let h = &out.hidden.0;
    let emb = model.embedding_table().embedding_lookup(&batch.tokens)?;
    // summed[t] = sum_{j=1..i} emb(x_{t+j}) + offset_j, built incrementally.
    let mut summed: Option<Tensor<E>> = None;
    let mut joint: Option<Tensor<E>> = None;
    for i in 1..=d {
        let fresh = emb.slice_time(i, t - i).add(&fetch.offset_row(i - 1));
        summed = Some(match summed {
            None => fresh,
            Some(prev) => prev.slice_time(0, t - i).add(&fresh),
        });
        let cond = fetch.combine(&h.slice_time(0, t - i), summed.as_ref().unwrap());
        let logits = head.logits(&cond);
        let (targets, mask) = batch.shifted(i);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let term = logits.cross_entropy(&targets, &mask)?;
        joint = Some(match joint {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    let mut total = ce;
    if let Some(j) = joint {
        total = total.add(&j.scale(E::ONE / E::from_usize(d)));
    }
    let val = total.item().to_f64();
    Ok((total, LossBreakdown { total: val, next_token, ..Default::default() }))
}
