//! Training objectives: plain next-token (GPT), multi-token prediction
//! (MTP), joint multi-token prediction (JTP) with its Fetch combiner, and
//! next-latent prediction (NextLat).

mod baselines;
mod nextlat;

pub use baselines::{gpt_loss, jtp_loss, mtp_loss, FetchModule, MtpHeads};
pub use nextlat::{
    loss_kl, loss_next_h, nextlat_loss, per_step_next_h, rollout, LatentDynamicsModel,
    NextLatConfig, RolloutTrace,
};

use crate::error::Result;
use crate::model::{Param, Transformer};
use crate::tensor::{Element, Tensor, TokenBatch};
use rand_chacha::ChaCha8Rng;

/// One training batch: input tokens, next-token targets (inputs shifted by
/// one, so `targets[b][t] = x_{t+1}`), and the supervision mask (false on
/// prompt and padding positions).
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn validate(&self) {
        let n = self.tokens.batch * self.tokens.time;
        assert_eq!(self.targets.len(), n, "targets not aligned with tokens");
        assert_eq!(self.mask.len(), n, "mask not aligned with tokens");
    }

    /// Targets and mask advanced by `i` positions within each row (branch-i
    /// supervision of the multi-token baselines); positions whose target
    /// would fall past the end are dropped.
    pub fn shifted(&self, i: usize) -> (Vec<u32>, Vec<bool>) {
        let (b, t) = (self.tokens.batch, self.tokens.time);
        assert!(i < t);
        let keep = t - i;
        let mut targets = Vec::with_capacity(b * keep);
        let mut mask = Vec::with_capacity(b * keep);
        for bi in 0..b {
            targets.extend_from_slice(&self.targets[bi * t + i..(bi + 1) * t]);
            mask.extend_from_slice(&self.mask[bi * t + i..(bi + 1) * t]);
        }
        (targets, mask)
    }
}

/// Raw (unweighted) term values of one loss evaluation, for the training
/// CSV log.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub next_token: f64,
    pub next_h: f64,
    pub kl: f64,
}

/// The objective a run trains with, carrying any auxiliary parameters.
pub enum Objective<E: Element> {
    Gpt,
    Mtp(MtpHeads<E>),
    Jtp(FetchModule<E>),
    NextLat { psi: LatentDynamicsModel<E>, cfg: NextLatConfig },
}

impl<E: Element> Objective<E> {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Gpt => "gpt",
            Objective::Mtp(_) => "mtp",
            Objective::Jtp(_) => "jtp",
            Objective::NextLat { .. } => "nextlat",
        }
    }

    /// Prediction horizon `d` (1 for plain next-token).
    pub fn horizon(&self) -> usize {
        match self {
            Objective::Gpt => 1,
            Objective::Mtp(h) => h.horizon(),
            Objective::Jtp(f) => f.horizon(),
            Objective::NextLat { cfg, .. } => cfg.horizon,
        }
    }

    pub fn loss(
        &self,
        model: &Transformer<E>,
        batch: &Batch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<E>, LossBreakdown)> {
        match self {
            Objective::Gpt => gpt_loss(model, batch, dropout_rng),
            Objective::Mtp(heads) => mtp_loss(model, heads, batch, dropout_rng),
            Objective::Jtp(fetch) => jtp_loss(model, fetch, batch, dropout_rng),
            Objective::NextLat { psi, cfg } => nextlat_loss(model, psi, batch, cfg, dropout_rng),
        }
    }

    /// Auxiliary trainable parameters owned by the objective (empty for GPT).
    pub fn params(&self) -> Vec<&Param<E>> {
        match self {
            Objective::Gpt => Vec::new(),
            Objective::Mtp(h) => h.params(),
            Objective::Jtp(f) => f.params(),
            Objective::NextLat { psi, .. } => psi.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        match self {
            Objective::Gpt => Vec::new(),
            Objective::Mtp(h) => h.params_mut(),
            Objective::Jtp(f) => f.params_mut(),
            Objective::NextLat { psi, .. } => psi.params_mut(),
        }
    }
}

/// Finite-difference check of a full assembled loss against the analytic
/// gradients of every model and objective parameter. f64 only; iterates
/// all coordinates. The tape is reset between evaluations.
pub fn check_objective_gradients(
    name: &str,
    model: &mut Transformer<f64>,
    objective: &mut Objective<f64>,
    batch: &Batch,
    eps: f64,
    tol: f64,
) -> crate::tensor::CheckReport {
    let tape = std::rc::Rc::clone(model.tape());
    tape.reset();
    tape.zero_grads();
    let (loss, _) = objective.loss(model, batch, None).expect("loss");
    tape.backward(&loss).expect("backward");
    drop(loss);
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .chain(objective.params().iter())
        .map(|p| p.tensor.grad().expect("leaf grad"))
        .collect();
    tape.reset();
    tape.zero_grads();

    let n_model = model.params().len();
    let total: usize = analytic.len();
    let mut max_rel = 0.0f64;
    for pi in 0..total {
        for ci in 0..analytic[pi].len() {
            let eval = |delta: f64, model: &mut Transformer<f64>, obj: &mut Objective<f64>| {
                {
                    let mut ps = model.params_mut();
                    let mut os = obj.params_mut();
                    let t = if pi < n_model {
                        &mut ps[pi].tensor
                    } else {
                        &mut os[pi - n_model].tensor
                    };
                    t.data_make_mut()[ci] += delta;
                }
                let l = obj.loss(model, batch, None).expect("loss").0.item();
                tape.reset();
                l
            };
            let lp = eval(eps, model, objective);
            let lm = eval(-2.0 * eps, model, objective);
            eval(eps, model, objective); // restore
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    crate::tensor::CheckReport { name: name.to_string(), max_rel_err: max_rel, tol, pass: max_rel <= tol }
}

#[cfg(test)]
mod tests;
