//! Directed grid world: W×H intersections, a seeded fraction of one-way
//! streets, and traversals between pickup and dropoff points tokenized as
//! direction symbols. The desk-scale analog of city-scale taxi rides; the
//! generator also reserves out-of-distribution pickup/dropoff pairs for
//! the world-model metrics.

use super::{Record, TaskDataset, TaskKind, TaskMeta, Tokenizer, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{HashSet, VecDeque};

/// Direction symbols in token order: +y, +x, −y, −x.
pub const DIRS: [(&str, i32, i32); 4] = [("N", 0, 1), ("E", 1, 0), ("S", 0, -1), ("W", -1, 0)];

#[derive(Debug, Clone)]
pub struct GridWorldParams {
    pub width: usize,
    pub height: usize,
    pub one_way_fraction: f64,
    /// Traversal length cap (number of moves).
    pub walk_len: usize,
    pub count: usize,
    /// How many pickup/dropoff pairs to reserve for OOD evaluation.
    pub ood_pairs: usize,
}

impl Default for GridWorldParams {
    fn default() -> Self {
        GridWorldParams {
            width: 8,
            height: 8,
            one_way_fraction: 0.25,
            walk_len: 28,
            count: 1000,
            ood_pairs: 200,
        }
    }
}

/// The directed street graph. Nodes are `y * width + x`.
#[derive(Debug, Clone)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    edges: HashSet<(u16, u16)>,
}

impl GridWorld {
    pub fn from_edges(width: usize, height: usize, edges: &[(u16, u16)]) -> Self {
        GridWorld { width, height, edges: edges.iter().copied().collect() }
    }

    pub fn nodes(&self) -> usize {
        self.width * self.height
    }

    pub fn has_edge(&self, from: u16, to: u16) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn edge_list(&self) -> Vec<(u16, u16)> {
        let mut v: Vec<(u16, u16)> = self.edges.iter().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn coords(&self, node: u16) -> (i32, i32) {
        ((node as usize % self.width) as i32, (node as usize / self.width) as i32)
    }

    pub fn node_at(&self, x: i32, y: i32) -> Option<u16> {
        if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 {
            return None;
        }
        Some((y as usize * self.width + x as usize) as u16)
    }

    /// Destination of moving in direction `dir` (0..4) from `node`, if that
    /// street exists.
    pub fn step(&self, node: u16, dir: usize) -> Option<u16> {
        let (x, y) = self.coords(node);
        let (_, dx, dy) = DIRS[dir];
        let to = self.node_at(x + dx, y + dy)?;
        self.has_edge(node, to).then_some(to)
    }

    /// Directions with a legal street out of `node`.
    pub fn legal_dirs(&self, node: u16) -> Vec<usize> {
        (0..4).filter(|&d| self.step(node, d).is_some()).collect()
    }

    /// Breadth-first shortest path lengths from `from` to every node
    /// (`usize::MAX` where unreachable).
    pub fn bfs_dist(&self, from: u16) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.nodes()];
        let mut queue = VecDeque::new();
        dist[from as usize] = 0;
        queue.push_back(from);
        while let Some(n) = queue.pop_front() {
            for d in 0..4 {
                if let Some(to) = self.step(n, d) {
                    if dist[to as usize] == usize::MAX {
                        dist[to as usize] = dist[n as usize] + 1;
                        queue.push_back(to);
                    }
                }
            }
        }
        dist
    }

    pub fn strongly_connected(&self) -> bool {
        let n = self.nodes();
        if self.bfs_dist(0).iter().any(|&d| d == usize::MAX) {
            return false;
        }
        // Reverse reachability into node 0.
        let mut rev: Vec<Vec<u16>> = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            rev[b as usize].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0u16]);
        seen[0] = true;
        while let Some(x) = queue.pop_front() {
            for &p in &rev[x as usize] {
                if !seen[p as usize] {
                    seen[p as usize] = true;
                    queue.push_back(p);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn gridworld_tokenizer(nodes: usize) -> Tokenizer {
    let mut symbols: Vec<String> = (0..nodes).map(|n| format!("n{n}")).collect();
    symbols.extend(DIRS.iter().map(|(s, _, _)| s.to_string()));
    Tokenizer::new(symbols)
}

pub fn node_token(node: u16) -> u32 {
    super::RESERVED.len() as u32 + node as u32
}

pub fn dir_token(nodes: usize, dir: usize) -> u32 {
    super::RESERVED.len() as u32 + nodes as u32 + dir as u32
}

/// Inverse of `dir_token`; `None` for ids outside the direction block.
pub fn token_dir(nodes: usize, token: u32) -> Option<usize> {
    let base = super::RESERVED.len() as u32 + nodes as u32;
    (token >= base && token < base + 4).then(|| (token - base) as usize)
}

pub fn token_node(nodes: usize, token: u32) -> Option<u16> {
    let base = super::RESERVED.len() as u32;
    (token >= base && token < base + nodes as u32).then(|| (token - base) as u16)
}

fn build_world(seed: u64, params: &GridWorldParams) -> Result<GridWorld> {
    let mut rng = rng::stream(seed, "gridworld/world");
    for _attempt in 0..200 {
        let mut edges = HashSet::new();
        let proto = GridWorld { width: params.width, height: params.height, edges: HashSet::new() };
        for y in 0..params.height as i32 {
            for x in 0..params.width as i32 {
                let from = proto.node_at(x, y).expect("in range");
                for (to_x, to_y) in [(x + 1, y), (x, y + 1)] {
                    if let Some(to) = proto.node_at(to_x, to_y) {
                        if rng.gen::<f64>() < params.one_way_fraction {
                            if rng.gen::<bool>() {
                                edges.insert((from, to));
                            } else {
                                edges.insert((to, from));
                            }
                        } else {
                            edges.insert((from, to));
                            edges.insert((to, from));
                        }
                    }
                }
            }
        }
        let world = GridWorld { width: params.width, height: params.height, edges };
        if world.strongly_connected() {
            return Ok(world);
        }
    }
    Err(Error::Infeasible(
        "could not draw a strongly connected grid within the retry budget".into(),
    ))
}

/// A legal traversal from pickup to dropoff: at each step, walk a shortest
/// path with probability 1/2, otherwise take a random legal turn, capped at
/// `walk_len` moves (resampled when the cap is hit).
fn sample_walk<R: Rng>(
    world: &GridWorld,
    pickup: u16,
    dropoff: u16,
    walk_len: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let rev_dist = reverse_bfs(world, dropoff);
    let mut current = pickup;
    let mut moves = Vec::new();
    for _ in 0..walk_len {
        if current == dropoff {
            return Some(moves);
        }
        let legal = world.legal_dirs(current);
        let wander = rng.gen::<f64>() < 0.5;
        let dir = if wander {
            legal[rng.gen_range(0..legal.len())]
        } else {
            // Any move that strictly decreases distance to the dropoff.
            let mut best = legal[0];
            let mut best_d = usize::MAX;
            for &d in &legal {
                let to = world.step(current, d).expect("legal");
                if rev_dist[to as usize] < best_d {
                    best_d = rev_dist[to as usize];
                    best = d;
                }
            }
            best
        };
        moves.push(dir);
        current = world.step(current, dir).expect("legal move");
    }
    (current == dropoff).then_some(moves)
}

/// Distance from every node TO `target` (BFS over reversed edges).
pub fn reverse_bfs(world: &GridWorld, target: u16) -> Vec<usize> {
    let n = world.nodes();
    let mut rev: Vec<Vec<u16>> = vec![Vec::new(); n];
    for &(a, b) in world.edges.iter() {
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

pub fn gen_gridworld(seed: u64, params: &GridWorldParams, split: &str) -> Result<TaskDataset> {
    let world = build_world(seed, params)?;
    let nodes = world.nodes();
    let tokenizer = gridworld_tokenizer(nodes);

    // Reserved OOD pairs, a pure function of the seed.
    let mut ood_rng = rng::stream(seed, "gridworld/ood");
    let mut all_pairs: Vec<(u16, u16)> = (0..nodes as u16)
        .flat_map(|a| (0..nodes as u16).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    all_pairs.shuffle(&mut ood_rng);
    let ood: Vec<(u16, u16)> = all_pairs.into_iter().take(params.ood_pairs).collect();
    let ood_set: HashSet<(u16, u16)> = ood.iter().copied().collect();

    let mut rng = rng::stream(seed, &format!("gridworld/{split}"));
    let mut records = Vec::with_capacity(params.count);
    while records.len() < params.count {
        let pickup = rng.gen_range(0..nodes) as u16;
        let dropoff = rng.gen_range(0..nodes) as u16;
        if pickup == dropoff || ood_set.contains(&(pickup, dropoff)) {
            continue;
        }
        let Some(moves) = sample_walk(&world, pickup, dropoff, params.walk_len, &mut rng) else {
            continue;
        };
        let mut tokens = vec![BOS, node_token(pickup), node_token(dropoff), SEP];
        let prompt_len = tokens.len() as u32;
        for d in moves {
            tokens.push(dir_token(nodes, d));
        }
        tokens.push(EOS);
        records.push(Record { tokens, prompt_len });
    }

    Ok(TaskDataset {
        kind: TaskKind::GridWorld,
        seed,
        split: split.to_string(),
        tokenizer,
        meta: TaskMeta::GridWorld {
            width: params.width,
            height: params.height,
            one_way_fraction: params.one_way_fraction,
            walk_len: params.walk_len,
            edges: world.edge_list(),
            ood_pairs: ood,
        },
        records,
    })
}
