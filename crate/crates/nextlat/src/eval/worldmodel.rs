//! The five world-model metrics over grid traversals, plus the oracle and
//! random policies they are calibrated against. The BFS here is written
//! against the raw edge list, independently of the generator's own search.

use super::{greedy_generate_chunked, SequenceModel};
use crate::rng;
use crate::tasks::gridworld::{dir_token, node_token, token_dir, token_node};
use crate::tasks::{GridWorld, Record, BOS, EOS, PAD, SEP};
use crate::tensor::TokenBatch;
use rand::Rng;
use std::cell::RefCell;
use std::collections::VecDeque;

/// Shortest-path distances from every node to `target`, computed from the
/// edge list alone (the evaluation module's own BFS).
pub fn dist_to_target(world: &GridWorld, target: u16) -> Vec<usize> {
    let n = world.nodes();
    let mut rev: Vec<Vec<u16>> = vec![Vec::new(); n];
    for &(a, b) in world.edge_list().iter() {
        rev[b as usize].push(a);
    }
    let mut dist = vec![usize::MAX; n];
    dist[target as usize] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(x) = queue.pop_front() {
        for &p in &rev[x as usize] {
            if dist[p as usize] == usize::MAX {
                dist[p as usize] = dist[x as usize] + 1;
                queue.push_back(p);
            }
        }
    }
    dist
}

/// Walk a traversal prefix and return the current node, or `None` if any
/// move is illegal.
fn replay(world: &GridWorld, pickup: u16, moves: &[u32]) -> Option<u16> {
    let nodes = world.nodes();
    let mut cur = pickup;
    for &t in moves {
        let dir = token_dir(nodes, t)?;
        cur = world.step(cur, dir)?;
    }
    Some(cur)
}

fn parse_prompt(world: &GridWorld, rec: &Record) -> (u16, u16) {
    let nodes = world.nodes();
    let pickup = token_node(nodes, rec.tokens[1]).expect("pickup token");
    let dropoff = token_node(nodes, rec.tokens[2]).expect("dropoff token");
    (pickup, dropoff)
}

/// The generator-side oracle: replan a shortest path to the dropoff at
/// every step and emit EOS on arrival. Scores are one-hot.
pub struct OracleGridPolicy {
    world: GridWorld,
    vocab: usize,
}

impl OracleGridPolicy {
    pub fn new(world: GridWorld, vocab: usize) -> Self {
        OracleGridPolicy { world, vocab }
    }
}

impl SequenceModel for OracleGridPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn scores(&self, batch: &TokenBatch) -> Vec<f64> {
        let nodes = self.world.nodes();
        let v = self.vocab;
        let mut out = vec![0.0; batch.batch * batch.time * v];
        for bi in 0..batch.batch {
            let row = batch.row(bi);
            // Decode the prompt; rows that are not traversal-shaped keep
            // zero scores (argmax PAD) and count as failures downstream.
            let Some(pickup) = row.get(1).and_then(|&t| token_node(nodes, t)) else { continue };
            let Some(dropoff) = row.get(2).and_then(|&t| token_node(nodes, t)) else { continue };
            let dist = dist_to_target(&self.world, dropoff);
            // Predictions start at the SEP position (index 3), conditioning
            // on the moves seen so far; the replay advances with the
            // teacher-forced token at p+1.
            let mut cur = Some(pickup);
            for p in 3..batch.time {
                if let Some(c) = cur {
                    let s = &mut out[(bi * batch.time + p) * v..(bi * batch.time + p) * v + v];
                    if c == dropoff {
                        s[EOS as usize] = 1.0;
                    } else {
                        let mut best: Option<(usize, usize)> = None;
                        for d in self.world.legal_dirs(c) {
                            let to = self.world.step(c, d).expect("legal");
                            let dd = dist[to as usize];
                            if best.map_or(true, |(bd, _)| dd < bd) {
                                best = Some((dd, d));
                            }
                        }
                        if let Some((_, d)) = best {
                            s[dir_token(nodes, d) as usize] = 1.0;
                        }
                    }
                }
                if p + 1 < batch.time {
                    let tok = row[p + 1];
                    if tok == EOS || tok == PAD {
                        cur = None;
                    } else {
                        cur = cur
                            .and_then(|c| token_dir(nodes, tok).map(|d| (c, d)))
                            .and_then(|(c, d)| self.world.step(c, d));
                    }
                }
            }
        }
        out
    }
}

/// Uniform random scores from a seeded stream.
pub struct RandomPolicy {
    vocab: usize,
    rng: RefCell<rand_chacha::ChaCha8Rng>,
}

impl RandomPolicy {
    pub fn new(vocab: usize, seed: u64) -> Self {
        RandomPolicy { vocab, rng: RefCell::new(rng::stream(seed, "random-policy")) }
    }
}

impl SequenceModel for RandomPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn scores(&self, batch: &TokenBatch) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        (0..batch.batch * batch.time * self.vocab).map(|_| rng.gen::<f64>()).collect()
    }
}

/// Metric 1: fraction of teacher-forced top-1 predictions that are legal
/// moves in the world state implied by the prefix (EOS counts as legal
/// exactly at the dropoff).
pub fn next_token_test(model: &dyn SequenceModel, world: &GridWorld, heldout: &[Record]) -> f64 {
    let nodes = world.nodes();
    let v = model.vocab_size();
    let mut legal_hits = 0usize;
    let mut total = 0usize;
    for chunk in heldout.chunks(256) {
        let t_len = chunk.iter().map(|r| r.tokens.len() - 1).max().expect("records");
        let mut ids = vec![PAD; chunk.len() * t_len];
        for (bi, rec) in chunk.iter().enumerate() {
            ids[bi * t_len..bi * t_len + rec.tokens.len() - 1]
                .copy_from_slice(&rec.tokens[..rec.tokens.len() - 1]);
        }
        let scores = model.scores(&TokenBatch::new(chunk.len(), t_len, ids));
        for (bi, rec) in chunk.iter().enumerate() {
            let (pickup, dropoff) = parse_prompt(world, rec);
            let mut cur = pickup;
            for t in (rec.prompt_len as usize - 1)..rec.tokens.len() - 1 {
                let s = &scores[(bi * t_len + t) * v..(bi * t_len + t) * v + v];
                let top = crate::model::argmax(s) as u32;
                let legal = if let Some(d) = token_dir(nodes, top) {
                    world.step(cur, d).is_some()
                } else {
                    top == EOS && cur == dropoff
                };
                legal_hits += legal as usize;
                total += 1;
                // Advance along the teacher-forced target.
                let target = rec.tokens[t + 1];
                if target == EOS {
                    break;
                }
                if let Some(d) = token_dir(nodes, target) {
                    cur = world.step(cur, d).expect("dataset traversals are legal");
                }
            }
        }
    }
    legal_hits as f64 / total.max(1) as f64
}

fn prompt_for(pickup: u16, dropoff: u16) -> Vec<u32> {
    vec![BOS, node_token(pickup), node_token(dropoff), SEP]
}

/// Metric 5 (and metric 2 at `detour_prob = 0`): greedy navigation on OOD
/// pairs, substituting the model's choice with a uniformly random legal
/// turn with probability `detour_prob` whenever the walker is not yet at
/// the dropoff. A trajectory is valid iff every move is a legal street and
/// it ends with EOS at the dropoff within the cap.
pub fn detour_robustness(
    model: &dyn SequenceModel,
    world: &GridWorld,
    ood_pairs: &[(u16, u16)],
    detour_prob: f64,
    seed: u64,
    cap: usize,
) -> f64 {
    assert!((0.0..=1.0).contains(&detour_prob));
    let nodes = world.nodes();
    let v = model.vocab_size();
    let mut rng = rng::stream(seed, "detour");
    let mut valid = 0usize;
    for group in ood_pairs.chunks(128) {
        let mut rows: Vec<Vec<u32>> = group.iter().map(|&(p, d)| prompt_for(p, d)).collect();
        let mut state: Vec<Option<u16>> = group.iter().map(|&(p, _)| Some(p)).collect();
        let mut finished: Vec<Option<bool>> = vec![None; group.len()];
        for _ in 0..cap {
            if finished.iter().all(Option::is_some) {
                break;
            }
            let t = rows.iter().map(Vec::len).max().expect("rows");
            let mut ids = vec![PAD; rows.len() * t];
            for (bi, row) in rows.iter().enumerate() {
                ids[bi * t..bi * t + row.len()].copy_from_slice(row);
            }
            let scores = model.scores(&TokenBatch::new(rows.len(), t, ids));
            for bi in 0..rows.len() {
                if finished[bi].is_some() {
                    continue;
                }
                let (_, dropoff) = group[bi];
                let pos = rows[bi].len() - 1;
                let s = &scores[(bi * t + pos) * v..(bi * t + pos) * v + v];
                let mut tok = crate::model::argmax(s) as u32;
                let cur = state[bi].expect("unfinished rows have a position");
                if cur != dropoff && detour_prob > 0.0 && rng.gen::<f64>() < detour_prob {
                    let legal = world.legal_dirs(cur);
                    tok = dir_token(nodes, legal[rng.gen_range(0..legal.len())]);
                }
                rows[bi].push(tok);
                if tok == EOS {
                    finished[bi] = Some(cur == dropoff);
                } else if let Some(d) = token_dir(nodes, tok) {
                    match world.step(cur, d) {
                        Some(next) => state[bi] = Some(next),
                        None => finished[bi] = Some(false),
                    }
                } else {
                    finished[bi] = Some(false);
                }
            }
        }
        valid += finished.iter().filter(|f| **f == Some(true)).count();
    }
    valid as f64 / ood_pairs.len().max(1) as f64
}

/// Metric 2: valid trajectories on OOD pairs (no detours).
pub fn valid_trajectories(
    model: &dyn SequenceModel,
    world: &GridWorld,
    ood_pairs: &[(u16, u16)],
    cap: usize,
) -> f64 {
    detour_robustness(model, world, ood_pairs, 0.0, 0, cap)
}

/// Metric 3: fraction of state-equivalent prefix pairs (same current
/// intersection, same destination) whose greedy continuations are
/// token-identical until EOS or the cap.
pub fn sequence_compression(
    model: &dyn SequenceModel,
    world: &GridWorld,
    heldout: &[Record],
    pair_count: usize,
    seed: u64,
    cap: usize,
) -> f64 {
    let mut rng = rng::stream(seed, "compression");
    // Bucket prefixes by (current node, dropoff).
    let mut buckets: std::collections::HashMap<(u16, u16), Vec<Vec<u32>>> =
        std::collections::HashMap::new();
    for rec in heldout {
        let (pickup, dropoff) = parse_prompt(world, rec);
        let completion = rec.completion();
        let n_moves = completion.iter().take_while(|&&t| t != EOS).count();
        if n_moves < 2 {
            continue;
        }
        let cut = 1 + rng.gen_range(0..n_moves - 1);
        if let Some(node) = replay(world, pickup, &completion[..cut]) {
            if node != dropoff {
                let prefix = rec.tokens[..rec.prompt_len as usize + cut].to_vec();
                buckets.entry((node, dropoff)).or_default().push(prefix);
            }
        }
    }
    let mut eligible: Vec<&(u16, u16)> = buckets
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(k, _)| k)
        .collect();
    eligible.sort_unstable();
    if eligible.is_empty() {
        return 0.0;
    }
    let mut pairs: Vec<(Vec<u32>, Vec<u32>)> = Vec::with_capacity(pair_count);
    for _ in 0..pair_count {
        let key = eligible[rng.gen_range(0..eligible.len())];
        let bucket = &buckets[key];
        let i = rng.gen_range(0..bucket.len());
        let mut j = rng.gen_range(0..bucket.len() - 1);
        if j >= i {
            j += 1;
        }
        pairs.push((bucket[i].clone(), bucket[j].clone()));
    }
    let mut identical = 0usize;
    for (a, b) in &pairs {
        let outs = greedy_generate_chunked(model, &[a.clone(), b.clone()], cap, EOS, PAD, 2);
        let cont_a = &outs[0][a.len()..];
        let cont_b = &outs[1][b.len()..];
        identical += (cont_a == cont_b) as usize;
    }
    identical as f64 / pairs.len().max(1) as f64
}
