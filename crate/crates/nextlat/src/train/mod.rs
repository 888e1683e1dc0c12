//! Experiment configuration, the training loop, and throughput measurement.
//!
//! Runs are deterministic: every random choice draws from a named stream
//! derived from the run seed (`init/model`, `init/objective`, `data`, ...),
//! batches are sampled i.i.d. per step from the `data` stream, and
//! checkpoints capture parameters, optimizer moments, and stream positions
//! so a resumed run reproduces the uninterrupted one bit-for-bit in f64.

mod adamw;
mod bench;

pub use adamw::{AdamWConfig, OptimizerState};
pub use bench::{bench_throughput, BenchRow, BENCH_HEADER};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::model::{
    read_checkpoint, write_checkpoint, Checkpoint, Moments, Param, Positional, RngState,
    Transformer, TransformerConfig,
};
use crate::objective::{Batch, FetchModule, LatentDynamicsModel, LossBreakdown, MtpHeads, NextLatConfig, Objective};
use crate::rng;
use crate::tasks::{Record, TaskDataset, PAD};
use crate::tensor::{Element, Tape, TokenBatch};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Gpt,
    Mtp,
    Jtp,
    NextLat,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::Gpt => "gpt",
            ObjectiveKind::Mtp => "mtp",
            ObjectiveKind::Jtp => "jtp",
            ObjectiveKind::NextLat => "nextlat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gpt" => Ok(ObjectiveKind::Gpt),
            "mtp" => Ok(ObjectiveKind::Mtp),
            "jtp" => Ok(ObjectiveKind::Jtp),
            "nextlat" => Ok(ObjectiveKind::NextLat),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// Everything one training run needs. Serializes to a flat manifest before
/// step 0; the manifest parser rejects unknown keys.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub objective: ObjectiveKind,
    /// Rollout/branch horizon d (ignored by gpt).
    pub horizon: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub lambda_next_h: f64,
    pub lambda_kl: f64,
    /// Hidden width of the latent dynamics MLP; 0 means the 2·D fallback.
    pub psi_hidden: usize,
    pub optim: AdamWConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub dropout: f64,
    /// Element type used for training ("f32" or "f64").
    pub precision: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            objective: ObjectiveKind::NextLat,
            horizon: 1,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            lambda_next_h: 1.0,
            lambda_kl: 1.0,
            psi_hidden: 0,
            optim: AdamWConfig::default(),
            steps: 1000,
            batch_size: 32,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 0,
            dropout: 0.0,
            precision: "f32".into(),
        }
    }
}

const MANIFEST_KEYS: [&str; 25] = [
    "objective", "horizon", "n_layers", "n_heads", "d_model", "d_ff", "lambda_next_h",
    "lambda_kl", "psi_hidden", "lr", "beta1", "beta2", "eps", "weight_decay", "warmup_steps",
    "decay_steps", "steps", "batch_size", "seed", "eval_every", "checkpoint_every", "dropout",
    "precision", "vocab_size", "max_seq_len",
];

impl RunConfig {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("objective", self.objective.as_str());
        kv.set("horizon", self.horizon);
        kv.set("n_layers", self.n_layers);
        kv.set("n_heads", self.n_heads);
        kv.set("d_model", self.d_model);
        kv.set("d_ff", self.d_ff);
        kv.set("lambda_next_h", self.lambda_next_h);
        kv.set("lambda_kl", self.lambda_kl);
        kv.set("psi_hidden", self.psi_hidden);
        kv.set("lr", self.optim.lr);
        kv.set("beta1", self.optim.beta1);
        kv.set("beta2", self.optim.beta2);
        kv.set("eps", self.optim.eps);
        kv.set("weight_decay", self.optim.weight_decay);
        kv.set("warmup_steps", self.optim.warmup_steps);
        kv.set("decay_steps", self.optim.decay_steps);
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("dropout", self.dropout);
        kv.set("precision", &self.precision);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(&MANIFEST_KEYS)?;
        let d = RunConfig::default();
        Ok(RunConfig {
            objective: ObjectiveKind::parse(kv.require("objective")?)?,
            horizon: kv.parse_or("horizon", d.horizon)?,
            n_layers: kv.parse_or("n_layers", d.n_layers)?,
            n_heads: kv.parse_or("n_heads", d.n_heads)?,
            d_model: kv.parse_or("d_model", d.d_model)?,
            d_ff: kv.parse_or("d_ff", d.d_ff)?,
            lambda_next_h: kv.parse_or("lambda_next_h", d.lambda_next_h)?,
            lambda_kl: kv.parse_or("lambda_kl", d.lambda_kl)?,
            psi_hidden: kv.parse_or("psi_hidden", d.psi_hidden)?,
            optim: AdamWConfig {
                lr: kv.parse_or("lr", d.optim.lr)?,
                beta1: kv.parse_or("beta1", d.optim.beta1)?,
                beta2: kv.parse_or("beta2", d.optim.beta2)?,
                eps: kv.parse_or("eps", d.optim.eps)?,
                weight_decay: kv.parse_or("weight_decay", d.optim.weight_decay)?,
                warmup_steps: kv.parse_or("warmup_steps", d.optim.warmup_steps)?,
                decay_steps: kv.parse_or("decay_steps", d.optim.decay_steps)?,
            },
            steps: kv.parse_or("steps", d.steps)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            seed: kv.parse_or("seed", d.seed)?,
            eval_every: kv.parse_or("eval_every", d.eval_every)?,
            checkpoint_every: kv.parse_or("checkpoint_every", d.checkpoint_every)?,
            dropout: kv.parse_or("dropout", d.dropout)?,
            precision: kv.parse_or("precision", d.precision.clone())?,
        })
    }

    pub fn psi_hidden_or_default(&self) -> usize {
        if self.psi_hidden == 0 {
            2 * self.d_model
        } else {
            self.psi_hidden
        }
    }
}

/// Model sized for a dataset: vocab from the tokenizer, context from the
/// longest record.
pub fn model_config_for(run: &RunConfig, data: &TaskDataset) -> TransformerConfig {
    TransformerConfig {
        n_layers: run.n_layers,
        n_heads: run.n_heads,
        d_model: run.d_model,
        d_ff: run.d_ff,
        vocab_size: data.tokenizer.vocab_size(),
        max_seq_len: data.max_record_len().max(3) - 1,
        dropout: run.dropout,
        positional: Positional::Learned,
        tie_embeddings: false,
    }
}

/// Pad records to a common length and split them into inputs, shifted
/// targets, and the supervision mask (false on prompt and pad positions).
pub fn batch_from_records(records: &[&Record], t_len: usize) -> Batch {
    let b = records.len();
    let mut ids = vec![PAD; b * t_len];
    let mut targets = vec![PAD; b * t_len];
    let mut mask = vec![false; b * t_len];
    for (bi, rec) in records.iter().enumerate() {
        let l = rec.tokens.len();
        assert!(l >= 2, "records need at least two tokens");
        assert!(l - 1 <= t_len, "record of length {l} does not fit t_len {t_len}");
        for t in 0..l - 1 {
            ids[bi * t_len + t] = rec.tokens[t];
            targets[bi * t_len + t] = rec.tokens[t + 1];
            mask[bi * t_len + t] = (t + 1) >= rec.prompt_len as usize;
        }
    }
    Batch { tokens: TokenBatch::new(b, t_len, ids), targets, mask }
}

pub fn build_objective<E: Element>(
    run: &RunConfig,
    model_cfg: &TransformerConfig,
    tape: &Rc<Tape<E>>,
) -> Objective<E> {
    let mut rng = rng::stream(run.seed, "init/objective");
    match run.objective {
        ObjectiveKind::Gpt => Objective::Gpt,
        ObjectiveKind::Mtp => Objective::Mtp(MtpHeads::new(
            tape,
            run.horizon,
            model_cfg.d_model,
            model_cfg.d_ff,
            model_cfg.n_heads,
            model_cfg.vocab_size,
            &mut rng,
        )),
        ObjectiveKind::Jtp => Objective::Jtp(FetchModule::new(tape, run.horizon, model_cfg.d_model, &mut rng)),
        ObjectiveKind::NextLat => Objective::NextLat {
            psi: LatentDynamicsModel::new(tape, model_cfg.d_model, run.psi_hidden_or_default(), &mut rng),
            cfg: NextLatConfig {
                horizon: run.horizon,
                lambda_next_h: run.lambda_next_h,
                lambda_kl: run.lambda_kl,
            },
        },
    }
}

/// A live training session: model, objective, optimizer, and the data
/// stream, ready to step.
pub struct Trainer<E: Element> {
    pub run: RunConfig,
    pub tape: Rc<Tape<E>>,
    pub model: Transformer<E>,
    pub objective: Objective<E>,
    pub optimizer: OptimizerState,
    pub data_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub step: u64,
    t_len: usize,
}

/// One CSV row per training step.
pub struct StepLog {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub wall_ms: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss_total,loss_next_token,loss_next_h,loss_kl,wall_ms";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.step,
            self.breakdown.total,
            self.breakdown.next_token,
            self.breakdown.next_h,
            self.breakdown.kl,
            self.wall_ms
        )
    }
}

impl<E: Element> Trainer<E> {
    pub fn new(run: RunConfig, data: &TaskDataset) -> Result<Self> {
        if data.records.is_empty() {
            return Err(Error::Dataset("empty training dataset".into()));
        }
        let model_cfg = model_config_for(&run, data);
        let tape = Tape::<E>::new();
        let mut model_rng = rng::stream(run.seed, "init/model");
        let model = Transformer::new(model_cfg.clone(), &tape, &mut model_rng)?;
        let objective = build_objective(&run, &model_cfg, &tape);
        let sizes: Vec<usize> = model
            .params()
            .iter()
            .chain(objective.params().iter())
            .map(|p| p.numel())
            .collect();
        let optimizer = OptimizerState::new(&sizes);
        let data_rng = rng::stream(run.seed, "data");
        let dropout_rng = rng::stream(run.seed, "dropout");
        let t_len = data.max_record_len() - 1;
        Ok(Trainer { run, tape, model, objective, optimizer, data_rng, dropout_rng, step: 0, t_len })
    }

    /// Draw one i.i.d. batch from the data stream.
    pub fn sample_batch(&mut self, data: &TaskDataset) -> Batch {
        let n = data.records.len();
        let recs: Vec<&Record> = (0..self.run.batch_size)
            .map(|_| &data.records[self.data_rng.gen_range(0..n)])
            .collect();
        batch_from_records(&recs, self.t_len)
    }

    /// One optimization step. Aborts on a non-finite loss before touching
    /// the parameters.
    pub fn train_step(&mut self, data: &TaskDataset) -> Result<StepLog> {
        let t0 = Instant::now();
        let batch = self.sample_batch(data);
        self.tape.zero_grads();
        let dropout = if self.run.dropout > 0.0 { Some(&mut self.dropout_rng) } else { None };
        let (loss, breakdown) = self.objective.loss(&self.model, &batch, dropout)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }
        self.tape.backward(&loss)?;
        drop(loss);
        self.tape.reset();
        {
            let optim = self.run.optim.clone();
            let mut params = self.model.params_mut();
            params.extend(self.objective.params_mut());
            self.optimizer.adamw_step(&mut params, &optim)?;
        }
        self.step += 1;
        Ok(StepLog { step: self.step, breakdown, wall_ms: t0.elapsed().as_secs_f64() * 1e3 })
    }

    /// Mean next-token loss over a fixed evaluation set (teacher-forced, no
    /// update).
    pub fn eval_loss(&self, data: &TaskDataset, max_records: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in data.records.chunks(self.run.batch_size.max(1)) {
            let recs: Vec<&Record> = chunk.iter().collect();
            let batch = batch_from_records(&recs, self.t_len);
            let (_, breakdown) = self.objective.loss(&self.model, &batch, None)?;
            self.tape.reset();
            total += breakdown.next_token * recs.len() as f64;
            count += recs.len();
            if count >= max_records {
                break;
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// Snapshot everything needed to resume bit-for-bit. The config text
    /// additionally records the model's vocab and context so evaluation can
    /// rebuild the model without the training dataset.
    pub fn checkpoint(&self) -> Checkpoint {
        let params: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .model
            .params()
            .iter()
            .chain(self.objective.params().iter())
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.shape().to_vec(),
                    p.tensor.data().iter().map(|&v| v.to_f64()).collect(),
                )
            })
            .collect();
        let mut kv = self.run.to_kv();
        kv.set("vocab_size", self.model.cfg.vocab_size);
        kv.set("max_seq_len", self.model.cfg.max_seq_len);
        Checkpoint {
            dtype: E::DTYPE.to_string(),
            config_text: kv.to_text(),
            step: self.step,
            rng_states: vec![
                ("data".into(), RngState::capture(&self.data_rng)),
                ("dropout".into(), RngState::capture(&self.dropout_rng)),
            ],
            params,
            moments: Some(Moments {
                adam_step: self.optimizer.step,
                m: self.optimizer.m.clone(),
                v: self.optimizer.v.clone(),
            }),
        }
    }

    /// Restore parameters, moments, and stream positions from a snapshot.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut params = self.model.params_mut();
        params.extend(self.objective.params_mut());
        restore_params(&mut params, ck)?;
        if let Some(mo) = &ck.moments {
            self.optimizer.step = mo.adam_step;
            self.optimizer.m = mo.m.clone();
            self.optimizer.v = mo.v.clone();
        }
        for (name, st) in &ck.rng_states {
            match name.as_str() {
                "data" => self.data_rng = st.restore(),
                "dropout" => self.dropout_rng = st.restore(),
                _ => {}
            }
        }
        self.step = ck.step;
        Ok(())
    }
}

/// Copy checkpointed values into an aligned parameter list.
pub fn restore_params<E: Element>(params: &mut [&mut Param<E>], ck: &Checkpoint) -> Result<()> {
    if ck.params.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} params, model+objective have {}",
            ck.params.len(),
            params.len()
        )));
    }
    for (param, (name, shape, data)) in params.iter_mut().zip(ck.params.iter()) {
        if &param.name != name || param.tensor.shape() != &shape[..] {
            return Err(Error::Format(format!(
                "checkpoint param `{name}` {shape:?} does not match `{}` {:?}",
                param.name,
                param.tensor.shape()
            )));
        }
        *param.tensor.data_make_mut() = data.iter().map(|&v| E::from_f64(v)).collect();
    }
    Ok(())
}

/// Rebuild a trained model (and its objective) from a checkpoint alone, for
/// evaluation and probing.
pub fn load_from_checkpoint<E: Element>(
    ck: &Checkpoint,
) -> Result<(Rc<Tape<E>>, Transformer<E>, Objective<E>, RunConfig)> {
    let kv = KvConfig::parse(&ck.config_text)?;
    let run = RunConfig::from_kv(&kv)?;
    let vocab_size: usize = kv.parse_value("vocab_size")?;
    let max_seq_len: usize = kv.parse_value("max_seq_len")?;
    let cfg = TransformerConfig {
        n_layers: run.n_layers,
        n_heads: run.n_heads,
        d_model: run.d_model,
        d_ff: run.d_ff,
        vocab_size,
        max_seq_len,
        dropout: run.dropout,
        positional: Positional::Learned,
        tie_embeddings: false,
    };
    let tape = Tape::<E>::new();
    let mut mrng = rng::stream(run.seed, "init/model");
    let mut model = Transformer::new(cfg.clone(), &tape, &mut mrng)?;
    let mut objective = build_objective(&run, &cfg, &tape);
    {
        let mut params = model.params_mut();
        params.extend(objective.params_mut());
        restore_params(&mut params, ck)?;
    }
    Ok((tape, model, objective, run))
}

/// Outcome of a full `train` call.
pub struct TrainOutcome {
    pub steps: u64,
    pub iterations_per_sec: f64,
    pub final_breakdown: LossBreakdown,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Full training loop: manifest before step 0, CSV log per step, periodic
/// held-out evaluation and checkpointing, final checkpoint at the end.
pub fn train<E: Element>(
    run: RunConfig,
    data: &TaskDataset,
    eval_data: Option<&TaskDataset>,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join("manifest.txt");
    let mut manifest = run.to_kv();
    manifest.set("task", data.kind.as_str());
    manifest.set("tokenizer_hash", data.tokenizer.hash_hex());
    manifest.set("gelu", "tanh");
    std::fs::write(&manifest_path, manifest.to_text())?;

    let mut trainer = Trainer::<E>::new(run.clone(), data)?;
    if let Some(ck_path) = resume_from {
        let ck = read_checkpoint(ck_path)?;
        trainer.restore(&ck)?;
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = String::new();
    let _ = writeln!(log, "{TRAIN_LOG_HEADER}");
    let mut final_breakdown = LossBreakdown::default();
    let t0 = Instant::now();
    let start_step = trainer.step;
    while trainer.step < run.steps {
        let entry = trainer.train_step(data)?;
        final_breakdown = entry.breakdown.clone();
        let _ = writeln!(log, "{}", entry.csv_row());
        let at = trainer.step;
        if run.eval_every > 0 && at % run.eval_every == 0 {
            if let Some(ev) = eval_data {
                let held = trainer.eval_loss(ev, 512)?;
                let _ = writeln!(log, "# eval step {at} heldout_next_token {held:.6}");
            }
        }
        if run.checkpoint_every > 0 && at % run.checkpoint_every == 0 && at < run.steps {
            write_checkpoint(&out_dir.join(format!("ck_{at}.bin")), &trainer.checkpoint())?;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let steps_done = trainer.step - start_step;
    let checkpoint_path = out_dir.join("ck_final.bin");
    write_checkpoint(&checkpoint_path, &trainer.checkpoint())?;
    std::fs::write(&log_path, log)?;
    Ok(TrainOutcome {
        steps: trainer.step,
        iterations_per_sec: steps_done as f64 / elapsed.max(1e-9),
        final_breakdown,
        checkpoint_path,
        log_path,
        manifest_path,
    })
}
