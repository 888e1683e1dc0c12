//! Path-star graphs: a center node with d disjoint arms of ℓ−1 nodes each.
//! A sequence lists the (shuffled) directed edge list, the query pair
//! (start = center, goal = one arm's terminal), and the unique correct
//! path. Only the path is supervised; everything through the query is
//! prompt. The shuffled edge list keeps the first path decision locally
//! non-inferable, which is the point of the benchmark.

use super::{Record, TaskDataset, TaskKind, TaskMeta, Tokenizer, BOS, EOS, PAUSE, SEP};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct PathStarParams {
    /// Number of arms d.
    pub arms: usize,
    /// Arm length ℓ: each arm has ℓ−1 nodes beyond the center, and the
    /// correct path (center included) has ℓ nodes.
    pub arm_len: usize,
    /// Node values are drawn from 1..=node_values.
    pub node_values: usize,
    pub count: usize,
}

pub fn pathstar_tokenizer(node_values: usize) -> Tokenizer {
    Tokenizer::new((1..=node_values).map(|v| v.to_string()))
}

/// Token id of node value `v` (values are 1-based).
fn node_token(v: usize) -> u32 {
    super::RESERVED.len() as u32 + (v as u32 - 1)
}

pub fn gen_path_star(seed: u64, params: &PathStarParams, split: &str) -> Result<TaskDataset> {
    let nodes_needed = 1 + params.arms * (params.arm_len - 1);
    if nodes_needed > params.node_values {
        return Err(Error::Infeasible(format!(
            "{} nodes needed but only {} node values available",
            nodes_needed, params.node_values
        )));
    }
    if params.arms < 1 || params.arm_len < 2 {
        return Err(Error::Infeasible("need at least one arm of length 2".into()));
    }
    let tokenizer = pathstar_tokenizer(params.node_values);
    let mut rng = rng::stream(seed, &format!("pathstar/{split}"));
    let mut records = Vec::with_capacity(params.count);
    for _ in 0..params.count {
        // Distinct node values for this instance.
        let mut values: Vec<usize> = (1..=params.node_values).collect();
        values.shuffle(&mut rng);
        let values = &values[..nodes_needed];
        let center = values[0];
        let arms: Vec<&[usize]> =
            values[1..].chunks(params.arm_len - 1).collect();
        let goal_arm = rng.gen_range(0..params.arms);
        let goal = *arms[goal_arm].last().expect("arm nonempty");

        // Directed edges outward from the center, shuffled per instance.
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for arm in &arms {
            let mut prev = center;
            for &n in arm.iter() {
                edges.push((prev, n));
                prev = n;
            }
        }
        edges.shuffle(&mut rng);

        let mut tokens = vec![BOS];
        for (u, v) in &edges {
            tokens.push(node_token(*u));
            tokens.push(node_token(*v));
            tokens.push(SEP);
        }
        tokens.push(PAUSE);
        tokens.push(node_token(center));
        tokens.push(node_token(goal));
        tokens.push(PAUSE);
        let prompt_len = tokens.len() as u32;
        tokens.push(node_token(center));
        for &n in arms[goal_arm].iter() {
            tokens.push(node_token(n));
        }
        tokens.push(EOS);
        records.push(Record { tokens, prompt_len });
    }
    Ok(TaskDataset {
        kind: TaskKind::PathStar,
        seed,
        split: split.to_string(),
        tokenizer,
        meta: TaskMeta::PathStar {
            arms: params.arms,
            arm_len: params.arm_len,
            node_values: params.node_values,
        },
        records,
    })
}
