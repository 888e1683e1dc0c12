//! Deterministic, seeded benchmark generators and their tokenizers. Every
//! generator is a pure function of its seed: rerunning one produces
//! byte-identical datasets.

pub mod countdown;
mod dataset_io;
pub mod gridworld;
pub mod hmm;
pub mod pathstar;

pub use countdown::{check_equations, gen_countdown, parse_problem, CountdownParams, EqVerdict, EquationVerdicts};
pub use dataset_io::{read_dataset, write_dataset};
pub use gridworld::{gen_gridworld, GridWorld, GridWorldParams, DIRS};
pub use hmm::{exact_belief_filter, gen_hmm, HmmOracleTask, HmmParams};
pub use pathstar::{gen_path_star, PathStarParams};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Reserved token ids shared by every task tokenizer.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
/// The pause/filler symbol; renders as the pipe glyph.
pub const PAUSE: u32 = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "|"];

/// Bijective symbol <-> id table with a fixed reserved block in front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn new<I: IntoIterator<Item = String>>(task_symbols: I) -> Self {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(task_symbols);
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            let prev = index.insert(s.clone(), i as u32);
            assert!(prev.is_none(), "duplicate tokenizer symbol `{s}`");
        }
        Tokenizer { symbols, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable content hash of the symbol table.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update((s.len() as u32).to_le_bytes());
            h.update(s.as_bytes());
        }
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PathStar,
    Countdown,
    GridWorld,
    Hmm,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::PathStar => "path_star",
            TaskKind::Countdown => "countdown",
            TaskKind::GridWorld => "grid_world",
            TaskKind::Hmm => "hmm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "path_star" | "pathstar" => Ok(TaskKind::PathStar),
            "countdown" => Ok(TaskKind::Countdown),
            "grid_world" | "gridworld" => Ok(TaskKind::GridWorld),
            "hmm" => Ok(TaskKind::Hmm),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Task-specific generation facts the evaluators need (graph topology, HMM
/// matrices, held-out pairs). Serialized as JSON inside the dataset header.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskMeta {
    PathStar {
        arms: usize,
        arm_len: usize,
        node_values: usize,
    },
    Countdown {
        target_min: u32,
        target_max: u32,
        input_max: u32,
        value_max: u32,
        holdout_targets: Vec<u32>,
    },
    GridWorld {
        width: usize,
        height: usize,
        one_way_fraction: f64,
        walk_len: usize,
        edges: Vec<(u16, u16)>,
        ood_pairs: Vec<(u16, u16)>,
    },
    Hmm {
        states: usize,
        obs: usize,
        a: Vec<f64>,
        o: Vec<f64>,
        initial: Vec<f64>,
    },
}

/// One tokenized sequence; the prompt mask boundary is the index of the
/// first completion token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub tokens: Vec<u32>,
    pub prompt_len: u32,
}

impl Record {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len as usize]
    }

    pub fn completion(&self) -> &[u32] {
        &self.tokens[self.prompt_len as usize..]
    }
}

/// Tokenized sequences plus prompt boundaries and the task metadata that
/// produced them.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub seed: u64,
    pub split: String,
    pub tokenizer: Tokenizer,
    pub meta: TaskMeta,
    pub records: Vec<Record>,
}

impl TaskDataset {
    pub fn max_record_len(&self) -> usize {
        self.records.iter().map(|r| r.tokens.len()).max().unwrap_or(0)
    }

    /// Refuse to pair this dataset with a tokenizer it was not built with.
    pub fn check_tokenizer(&self, other: &Tokenizer) -> Result<()> {
        let (a, b) = (self.tokenizer.hash_hex(), other.hash_hex());
        if a != b {
            return Err(Error::TokenizerHash { expected: a, actual: b });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
