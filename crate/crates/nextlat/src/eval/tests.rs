use super::*;
use crate::model::{Transformer, TransformerConfig};
use crate::rng::stream;
use crate::tasks::countdown::countdown_tokenizer;
use crate::tasks::{
    check_equations, gen_countdown, gen_gridworld, gen_hmm, gen_path_star, parse_problem,
    CountdownParams, GridWorld, GridWorldParams, HmmParams, PathStarParams, Record, TaskMeta,
    Tokenizer, BOS, EOS, PAD, PAUSE, SEP,
};
use crate::tensor::{Tape, TokenBatch};
use rand::Rng;

fn grid_fixture() -> (GridWorld, Vec<(u16, u16)>, Vec<Record>, usize) {
    let params = GridWorldParams { count: 300, ..Default::default() };
    let ds = gen_gridworld(31, &params, "test").unwrap();
    let TaskMeta::GridWorld { edges, ood_pairs, .. } = &ds.meta else { panic!() };
    let world = GridWorld::from_edges(8, 8, edges);
    let vocab = ds.tokenizer.vocab_size();
    (world, ood_pairs.clone(), ds.records, vocab)
}

#[test]
fn oracle_policy_aces_all_grid_metrics() {
    let (world, ood, records, vocab) = grid_fixture();
    let oracle = OracleGridPolicy::new(world.clone(), vocab);

    let ntt = next_token_test(&oracle, &world, &records[..100]);
    assert_eq!(ntt, 1.0, "oracle is always legal");

    let valid = valid_trajectories(&oracle, &world, &ood[..50], 60);
    assert_eq!(valid, 1.0, "oracle reaches every dropoff");

    let comp = sequence_compression(&oracle, &world, &records, 100, 7, 60);
    assert_eq!(comp, 1.0, "a true world model gives identical continuations");

    // Replanning每 step survives random detours given an enlarged cap.
    let det = detour_robustness(&oracle, &world, &ood[..50], 0.75, 3, 400);
    assert_eq!(det, 1.0, "oracle replans around detours");
}

#[test]
fn detour_zero_probability_reduces_to_valid_trajectories() {
    let (world, ood, _records, vocab) = grid_fixture();
    let model = RandomPolicy::new(vocab, 5);
    let a = valid_trajectories(&model, &world, &ood[..40], 40);
    let model2 = RandomPolicy::new(vocab, 5);
    let b = detour_robustness(&model2, &world, &ood[..40], 0.0, 99, 40);
    assert_eq!(a, b, "detour_prob = 0 is exactly valid_trajectories");
}

#[test]
fn random_policy_scores_near_zero_compression_and_chance_legality() {
    let (world, _ood, records, vocab) = grid_fixture();
    let model = RandomPolicy::new(vocab, 11);
    let comp = sequence_compression(&model, &world, &records, 200, 13, 40);
    assert!(comp < 0.1, "random continuations rarely coincide: {comp}");

    // Top-1 legality of random scores matches the legal-move frequency of
    // random guessing within 3 sigma.
    let model = RandomPolicy::new(vocab, 17);
    let got = next_token_test(&model, &world, &records[..150]);
    let mut expect_sum = 0.0;
    let mut var_sum = 0.0;
    let mut n = 0.0;
    for rec in &records[..150] {
        let nodes = world.nodes();
        let pickup = crate::tasks::gridworld::token_node(nodes, rec.tokens[1]).unwrap();
        let dropoff = crate::tasks::gridworld::token_node(nodes, rec.tokens[2]).unwrap();
        let mut cur = pickup;
        for t in (rec.prompt_len as usize - 1)..rec.tokens.len() - 1 {
            let mut legal = world.legal_dirs(cur).len();
            if cur == dropoff {
                legal += 1; // EOS is legal at the dropoff
            }
            let p = legal as f64 / vocab as f64;
            expect_sum += p;
            var_sum += p * (1.0 - p);
            n += 1.0;
            let target = rec.tokens[t + 1];
            if target == EOS {
                break;
            }
            if let Some(d) = crate::tasks::gridworld::token_dir(nodes, target) {
                cur = world.step(cur, d).unwrap();
            }
        }
    }
    let expect = expect_sum / n;
    let sigma = (var_sum / (n * n)).sqrt();
    assert!(
        (got - expect).abs() <= 3.0 * sigma + 1e-9,
        "random legality {got} vs expectation {expect} (3 sigma {})",
        3.0 * sigma
    );
}

#[test]
fn legality_checker_agrees_with_edge_set() {
    let (world, _, _, _) = grid_fixture();
    let edges: std::collections::HashSet<(u16, u16)> = world.edge_list().into_iter().collect();
    let mut rng = stream(3, "legality-probes");
    for _ in 0..10_000 {
        let node = rng.gen_range(0..world.nodes()) as u16;
        let dir = rng.gen_range(0..4);
        let stepped = world.step(node, dir);
        let (x, y) = world.coords(node);
        let (_, dx, dy) = crate::tasks::DIRS[dir];
        let expect = world
            .node_at(x + dx, y + dy)
            .filter(|to| edges.contains(&(node, *to)));
        assert_eq!(stepped, expect);
    }
}

#[test]
fn eval_bfs_agrees_with_generator_bfs() {
    let (world, _, _, _) = grid_fixture();
    let mut rng = stream(9, "bfs-pairs");
    let mut mean_a = 0.0;
    let mut mean_b = 0.0;
    for _ in 0..200 {
        let a = rng.gen_range(0..world.nodes()) as u16;
        let b = rng.gen_range(0..world.nodes()) as u16;
        let via_forward = world.bfs_dist(a)[b as usize];
        let via_reverse = worldmodel::dist_to_target(&world, b)[a as usize];
        assert_eq!(via_forward, via_reverse, "the two BFS implementations agree on d({a}->{b})");
        mean_a += via_forward as f64;
        mean_b += via_reverse as f64;
    }
    assert_eq!(mean_a, mean_b);
}

/// Oracle for path-star prompts: parse the edge list, walk from the center
/// toward the goal, emit each path token one-hot.
struct PathStarOracle {
    vocab: usize,
    /// When set, ignore the goal and always walk the arm through this
    /// choice rule: lowest-token first edge out of the center.
    fixed_arm: bool,
}

impl PathStarOracle {
    fn continuation(&self, row: &[u32]) -> Vec<u32> {
        // prompt: BOS (u v SEP)* PAUSE start goal PAUSE ...
        let mut edges = Vec::new();
        let mut i = 1;
        while row[i] != PAUSE {
            edges.push((row[i], row[i + 1]));
            i += 3;
        }
        let (start, goal) = (row[i + 1], row[i + 2]);
        let next_of = |n: u32| -> Vec<u32> {
            edges.iter().filter(|e| e.0 == n).map(|e| e.1).collect()
        };
        // Identify the goal arm by walking each center edge outward.
        let mut path = vec![start];
        let mut firsts: Vec<u32> = next_of(start);
        firsts.sort_unstable();
        let mut chosen = None;
        for &first in &firsts {
            let mut arm = vec![first];
            let mut cur = first;
            while let Some(&n) = next_of(cur).first() {
                arm.push(n);
                cur = n;
            }
            if self.fixed_arm || arm.last() == Some(&goal) {
                chosen = Some(arm);
                break;
            }
        }
        path.extend(chosen.expect("one arm bears the goal"));
        path.push(EOS);
        path
    }
}

impl SequenceModel for PathStarOracle {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn scores(&self, batch: &TokenBatch) -> Vec<f64> {
        let v = self.vocab;
        let mut out = vec![0.0; batch.batch * batch.time * v];
        for bi in 0..batch.batch {
            let row = batch.row(bi);
            let second_pause = row
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == PAUSE)
                .nth(1)
                .map(|(i, _)| i)
                .expect("prompt shape");
            let cont = self.continuation(row);
            // Position p >= second_pause predicts cont[p - second_pause].
            for p in second_pause..batch.time {
                let want = cont.get(p - second_pause).copied().unwrap_or(EOS);
                out[(bi * batch.time + p) * v + want as usize] = 1.0;
            }
        }
        out
    }
}

#[test]
fn path_star_oracle_and_fixed_arm_rates() {
    let params = PathStarParams { arms: 3, arm_len: 4, node_values: 40, count: 400 };
    let ds = gen_path_star(17, &params, "test").unwrap();
    let oracle = PathStarOracle { vocab: ds.tokenizer.vocab_size(), fixed_arm: false };
    let rate = path_star_solve_rate(&oracle, &ds.records);
    assert_eq!(rate, 1.0, "ground-truth continuation scores 1.0");

    let fixed = PathStarOracle { vocab: ds.tokenizer.vocab_size(), fixed_arm: true };
    let rate = path_star_solve_rate(&fixed, &ds.records);
    let expect = 1.0 / 3.0;
    let sigma = (expect * (1.0 - expect) / 400.0).sqrt();
    assert!(
        (rate - expect).abs() < 4.0 * sigma,
        "fixed-arm rate {rate} should sit near 1/3 (4 sigma {})",
        4.0 * sigma
    );
}

/// Exhaustive countdown solver used as a generation oracle.
struct CountdownOracle {
    tokenizer: Tokenizer,
    vocab: usize,
}

fn solve_countdown(inputs: &[u32], target: u32) -> Option<Vec<(u32, char, u32, u32)>> {
    // Intermediates stay within the tokenizer's number range.
    const VALUE_MAX: u32 = 1000;
    fn rec(pool: &mut Vec<u32>, target: u32, eqs: &mut Vec<(u32, char, u32, u32)>) -> bool {
        if pool.len() == 1 {
            return pool[0] == target && eqs.len() == 3;
        }
        for i in 0..pool.len() {
            for j in 0..pool.len() {
                if i == j {
                    continue;
                }
                let (x, y) = (pool[i], pool[j]);
                for op in ['+', '-', '*', '/'] {
                    let r = match op {
                        '+' => x.checked_add(y).filter(|&r| r <= VALUE_MAX),
                        '-' => (x > y).then(|| x - y),
                        '*' => x.checked_mul(y).filter(|&r| r <= VALUE_MAX),
                        '/' => (y != 0 && x % y == 0).then(|| x / y),
                        _ => None,
                    };
                    let Some(r) = r else { continue };
                    let mut next: Vec<u32> = pool
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| *k != i && *k != j)
                        .map(|(_, &v)| v)
                        .collect();
                    next.push(r);
                    eqs.push((x, op, y, r));
                    if rec(&mut next, target, eqs) {
                        return true;
                    }
                    eqs.pop();
                }
            }
        }
        false
    }
    let mut eqs = Vec::new();
    rec(&mut inputs.to_vec(), target, &mut eqs).then_some(eqs)
}

impl SequenceModel for CountdownOracle {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn scores(&self, batch: &TokenBatch) -> Vec<f64> {
        let v = self.vocab;
        let mut out = vec![0.0; batch.batch * batch.time * v];
        for bi in 0..batch.batch {
            let row = batch.row(bi);
            let prompt_end = row
                .iter()
                .position(|&t| t == PAUSE)
                .map(|p| p + crate::tasks::countdown::PAUSE_COUNT)
                .expect("pause block");
            let (inputs, target) =
                parse_problem(&self.tokenizer, &row[..prompt_end]).expect("prompt");
            let eqs = solve_countdown(&inputs, target).expect("generated problems are solvable");
            let mut cont: Vec<u32> = Vec::new();
            let id = |s: String| self.tokenizer.id(&s).expect("symbol");
            for (i, (x, op, y, r)) in eqs.iter().enumerate() {
                if i > 0 {
                    cont.push(id(",".into()));
                }
                cont.push(id(x.to_string()));
                cont.push(id(op.to_string()));
                cont.push(id(y.to_string()));
                cont.push(id("=".to_string()));
                cont.push(id(r.to_string()));
            }
            cont.push(EOS);
            for p in prompt_end - 1..batch.time {
                let want = cont.get(p + 1 - prompt_end).copied().unwrap_or(EOS);
                out[(bi * batch.time + p) * v + want as usize] = 1.0;
            }
        }
        out
    }
}

#[test]
fn countdown_oracle_solves_everything() {
    let params = CountdownParams { count: 60, ..Default::default() };
    let ds = gen_countdown(23, &params, "test").unwrap();
    let oracle = CountdownOracle { tokenizer: ds.tokenizer.clone(), vocab: ds.tokenizer.vocab_size() };
    let report = countdown_accuracy(&oracle, &ds.tokenizer, &ds.records, 20);
    assert_eq!(report.solve_rate, 1.0, "{report:?}");
    assert_eq!(report.eq_validity, [1.0; 3]);

    // Malformed generations count as unsolved, never crash: a policy that
    // emits only separators.
    struct Degenerate(usize);
    impl SequenceModel for Degenerate {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn scores(&self, batch: &TokenBatch) -> Vec<f64> {
            let mut out = vec![0.0; batch.batch * batch.time * self.0];
            for chunk in out.chunks_mut(self.0) {
                chunk[SEP as usize] = 1.0;
            }
            out
        }
    }
    let report = countdown_accuracy(&Degenerate(ds.tokenizer.vocab_size()), &ds.tokenizer, &ds.records, 10);
    assert_eq!(report.solve_rate, 0.0);
}

#[test]
fn checker_accepts_recorded_solutions() {
    let params = CountdownParams { count: 40, ..Default::default() };
    let ds = gen_countdown(29, &params, "train").unwrap();
    for rec in &ds.records {
        let (inputs, target) = parse_problem(&ds.tokenizer, rec.prompt()).unwrap();
        let verdicts = check_equations(&ds.tokenizer, &inputs, target, rec.completion());
        assert!(verdicts.solved());
    }
}

#[test]
fn belief_eval_exact_filter_has_zero_tv() {
    let params = HmmParams { states: 3, obs: 4, count: 40, seq_len: 24 };
    let (hmm, ds) = gen_hmm(41, &params, "test").unwrap();
    let model = ExactFilterModel::new(hmm.clone(), ds.tokenizer.vocab_size());
    let cmp = belief_oracle_eval(&model, &hmm, &ds.records, 400, 0.01, 5);
    assert!(
        cmp.mean_predictive_tv < 1e-9,
        "exact filter wrapper agrees with itself: {}",
        cmp.mean_predictive_tv
    );
    assert!(!cmp.pair_tvs.is_empty(), "nearby-belief pairs exist");
    // The belief -> predictive map is a TV contraction, so pairs of
    // near-coincident beliefs give near-coincident filter predictions.
    assert!(cmp.median_pair_tv() <= cmp.pair_tolerance + 1e-12);
    for &tv in &cmp.pair_tvs {
        assert!((0.0..=1.0).contains(&tv));
    }
}

#[test]
fn probes_on_untrained_states_sit_near_uniform_and_leave_params_alone() {
    // Uniform i.i.d. tokens: the best any predictor can do is the uniform
    // baseline over the active alphabet, ln(n_symbols).
    let n_obs = 5usize;
    let tokenizer = Tokenizer::new((0..n_obs).map(|v| v.to_string()));
    let mut rng = stream(43, "probe-data");
    let make = |rng: &mut rand_chacha::ChaCha8Rng, count: usize| -> Vec<Record> {
        (0..count)
            .map(|_| Record {
                tokens: std::iter::once(BOS)
                    .chain((0..20).map(|_| 5 + rng.gen_range(0..n_obs as u32)))
                    .collect(),
                prompt_len: 1,
            })
            .collect()
    };
    let train_recs = make(&mut rng, 60);
    let held_recs = make(&mut rng, 30);
    let tape = Tape::<f64>::new();
    let mut mrng = stream(43, "init/model");
    let mut cfg = TransformerConfig::new(1, 2, 16, tokenizer.vocab_size(), 24);
    cfg.d_ff = 32;
    let model = Transformer::new(cfg, &tape, &mut mrng).unwrap();

    let before = params_checksum(&model);
    let probe_cfg = ProbeConfig { steps: 150, batch_size: 128, ..Default::default() };
    let results = train_probes(&model, &train_recs, &held_recs, 2, &probe_cfg).unwrap();
    assert_eq!(params_checksum(&model), before, "probe training never touches the transformer");

    let baseline = (n_obs as f64).ln();
    for r in &results {
        assert!(
            (r.heldout_ce - baseline).abs() / baseline < 0.05,
            "offset {} ce {} vs uniform baseline {}",
            r.offset,
            r.heldout_ce,
            baseline
        );
    }

    // Offset beyond every sequence errors.
    assert!(train_probes(&model, &train_recs, &held_recs, 25, &probe_cfg).is_err());
}

#[test]
fn head_initialized_probe_beats_model_loss_bound() {
    // The output head is itself a valid offset-1 probe, so training from it
    // can only stay within a hair of the model's own next-token loss.
    let params = HmmParams { states: 2, obs: 4, count: 80, seq_len: 16 };
    let (_hmm, ds) = gen_hmm(47, &params, "train").unwrap();
    let (_h, held) = gen_hmm(47, &params, "test").unwrap();
    let tape = Tape::<f64>::new();
    let mut rng = stream(47, "init/model");
    let mut cfg = TransformerConfig::new(1, 2, 16, ds.tokenizer.vocab_size(), 24);
    cfg.d_ff = 32;
    let model = Transformer::new(cfg, &tape, &mut rng).unwrap();

    // Model's own next-token CE on the held-out set (all real positions).
    let recs: Vec<&Record> = held.records.iter().collect();
    let t_len = held.max_record_len() - 1;
    let batch = crate::train::batch_from_records(&recs, t_len);
    let _guard = tape.pause();
    let out = model.forward(&batch.tokens).unwrap();
    let model_ce = out.logits.cross_entropy(&batch.targets, &batch.mask).unwrap().item();
    drop(_guard);

    let probe_cfg = ProbeConfig { init_from_head: true, steps: 200, batch_size: 128, ..Default::default() };
    let results = train_probes(&model, &ds.records, &held.records, 1, &probe_cfg).unwrap();
    assert!(
        results[0].heldout_ce <= model_ce + 0.01,
        "head-initialized probe {} vs model loss {}",
        results[0].heldout_ce,
        model_ce
    );
}

#[test]
fn greedy_generation_respects_eos_and_padding() {
    let (world, _, _, vocab) = grid_fixture();
    let oracle = OracleGridPolicy::new(world.clone(), vocab);
    // Two prompts of different lengths via the ragged pathway.
    let a = vec![BOS, crate::tasks::gridworld::node_token(0), crate::tasks::gridworld::node_token(9), SEP];
    let mut b = a.clone();
    b[1] = crate::tasks::gridworld::node_token(3);
    let outs = greedy_generate(&oracle, &[a.clone(), b], 64, EOS, PAD);
    for out in &outs {
        assert_eq!(*out.last().unwrap(), EOS, "oracle terminates every trajectory");
    }
    let _ = a;
}
