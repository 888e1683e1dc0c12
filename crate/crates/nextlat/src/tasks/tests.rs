use super::*;
use crate::tasks::countdown::countdown_tokenizer;
use crate::tasks::gridworld::{token_dir, token_node};
use crate::tasks::hmm::token_obs;

#[test]
fn tokenizer_round_trip_and_reserved_block() {
    let tok = Tokenizer::new(["a", "bb", "ccc"].map(str::to_string));
    assert_eq!(tok.vocab_size(), 8);
    for id in 0..tok.vocab_size() as u32 {
        let sym = tok.symbol(id).unwrap();
        assert_eq!(tok.id(sym), Some(id), "encode . decode = identity");
    }
    assert_eq!(tok.id("<bos>"), Some(BOS));
    assert_eq!(tok.id("|"), Some(PAUSE));
    assert!(tok.id("a").unwrap() >= 5, "task symbols sit after the reserved block");
}

#[test]
fn pathstar_node_count_and_topology() {
    let params = PathStarParams { arms: 5, arm_len: 5, node_values: 100, count: 20 };
    let ds = gen_path_star(7, &params, "train").unwrap();
    for rec in &ds.records {
        // Recover structure from the tokens: 20 edges, a query pair, a path.
        let toks = &rec.tokens;
        assert_eq!(toks[0], BOS);
        let mut edges = Vec::new();
        let mut i = 1;
        while toks[i] != PAUSE {
            edges.push((toks[i], toks[i + 1]));
            assert_eq!(toks[i + 2], SEP);
            i += 3;
        }
        // 1 + 5*(5-1) = 21 nodes, 20 directed edges in a star of 5 arms of
        // 4 non-center nodes.
        assert_eq!(edges.len(), 20);
        let mut nodes: std::collections::HashSet<u32> = edges.iter().map(|e| e.0).collect();
        nodes.extend(edges.iter().map(|e| e.1));
        assert_eq!(nodes.len(), 21, "21 distinct nodes per instance");
        let (start, goal) = (toks[i + 1], toks[i + 2]);
        assert_eq!(toks[i + 3], PAUSE);
        let path = rec.completion();
        assert_eq!(path.len(), 5 + 1, "path of length l plus EOS");
        assert_eq!(path[0], start, "path starts at the center");
        assert_eq!(path[4], goal, "path ends at the goal");
        assert_eq!(*path.last().unwrap(), EOS);
        // Exactly one arm bears the goal: the goal has out-degree 0 and
        // appears as a destination exactly once.
        assert_eq!(edges.iter().filter(|e| e.1 == goal).count(), 1);
        assert_eq!(edges.iter().filter(|e| e.0 == goal).count(), 0);
        // Out-degree of the center is the arm count.
        assert_eq!(edges.iter().filter(|e| e.0 == start).count(), 5);
        // Every path step is an edge.
        for w in path[..5].windows(2) {
            assert!(edges.contains(&(w[0], w[1])), "path follows edges");
        }
    }
}

#[test]
fn pathstar_same_seed_identical_bytes() {
    let params = PathStarParams { arms: 2, arm_len: 5, node_values: 30, count: 50 };
    let a = gen_path_star(11, &params, "train").unwrap();
    let b = gen_path_star(11, &params, "train").unwrap();
    assert_eq!(a.records, b.records, "generators are pure functions of the seed");
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.nlds"), dir.path().join("b.nlds"));
    write_dataset(&pa, &a).unwrap();
    write_dataset(&pb, &b).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "identical bytes");

    let c = gen_path_star(12, &params, "train").unwrap();
    assert_ne!(a.records, c.records, "different seeds differ");
}

#[test]
fn pathstar_infeasible_when_values_scarce() {
    let params = PathStarParams { arms: 5, arm_len: 5, node_values: 20, count: 1 };
    assert!(matches!(gen_path_star(1, &params, "train"), Err(crate::error::Error::Infeasible(_))));
}

#[test]
fn countdown_paper_example_is_accepted_by_checker() {
    // {90, 8, 20, 50} -> 24 via 90*8=720, 50-20=30, 720/30=24.
    let tok = countdown_tokenizer(1000);
    let encode = |s: &str| -> Vec<u32> {
        s.split(' ').map(|w| tok.id(w).unwrap_or_else(|| panic!("symbol {w}"))).collect()
    };
    let completion = encode("90 * 8 = 720 , 50 - 20 = 30 , 720 / 30 = 24");
    let verdicts = check_equations(&tok, &[90, 8, 20, 50], 24, &completion);
    assert!(verdicts.solved(), "{verdicts:?}");
    assert!(verdicts.eqs.iter().all(|&e| e == EqVerdict::Valid));

    // 69/3=23 is valid standalone arithmetic.
    let completion = encode("83 - 14 = 69 , 91 - 88 = 3 , 69 / 3 = 23");
    let verdicts = check_equations(&tok, &[14, 83, 88, 91], 23, &completion);
    assert!(verdicts.solved(), "{verdicts:?}");

    // 90*8=721: invalid (LHS 720 != 721).
    let completion = encode("90 * 8 = 721 , 50 - 20 = 30 , 720 / 30 = 24");
    let verdicts = check_equations(&tok, &[90, 8, 20, 50], 24, &completion);
    assert_eq!(verdicts.eqs[0], EqVerdict::Invalid);

    // Division patterns that do not produce integers are malformed.
    let completion = encode("90 / 8 = 11 , 50 - 20 = 30 , 720 / 30 = 24");
    let verdicts = check_equations(&tok, &[90, 8, 20, 50], 24, &completion);
    assert_eq!(verdicts.eqs[0], EqVerdict::Malformed);
}

#[test]
fn countdown_generator_invariants() {
    let params = CountdownParams { target_min: 10, target_max: 50, input_max: 60, value_max: 1000, count: 80, holdout_targets: 0.1 };
    let train = gen_countdown(5, &params, "train").unwrap();
    let test = gen_countdown(5, &params, "test").unwrap();
    let TaskMeta::Countdown { holdout_targets, .. } = &train.meta else { panic!() };
    let holdout: std::collections::HashSet<u32> = holdout_targets.iter().copied().collect();

    for (ds, is_test) in [(&train, false), (&test, true)] {
        for rec in &ds.records {
            // Eight pause symbols directly before the solution.
            let p = rec.prompt_len as usize;
            assert!(rec.tokens[p - 8..p].iter().all(|&t| t == PAUSE), "eight pause tokens after target");
            let (inputs, target) = parse_problem(&ds.tokenizer, rec.prompt()).unwrap();
            assert_eq!(inputs.len(), 4);
            assert_eq!(holdout.contains(&target), is_test, "OOD split is by target value");
            // Validity by construction.
            let verdicts = check_equations(&ds.tokenizer, &inputs, target, rec.completion());
            assert!(verdicts.solved(), "generated solution must check out: {verdicts:?}");
        }
    }
}

#[test]
fn gridworld_zero_one_way_fraction_is_bidirectional() {
    let params = GridWorldParams { width: 4, height: 4, one_way_fraction: 0.0, walk_len: 20, count: 10, ood_pairs: 5 };
    let ds = gen_gridworld(3, &params, "train").unwrap();
    let TaskMeta::GridWorld { edges, .. } = &ds.meta else { panic!() };
    let world = GridWorld::from_edges(4, 4, edges);
    for &(a, b) in edges {
        assert!(world.has_edge(b, a), "every edge is bidirectional at fraction 0");
    }
}

#[test]
fn gridworld_traversals_are_legal_and_end_at_dropoff() {
    let params = GridWorldParams::default();
    let ds = gen_gridworld(9, &params, "train").unwrap();
    let TaskMeta::GridWorld { edges, ood_pairs, .. } = &ds.meta else { panic!() };
    let world = GridWorld::from_edges(8, 8, edges);
    let nodes = world.nodes();
    let ood: std::collections::HashSet<(u16, u16)> = ood_pairs.iter().copied().collect();
    assert!(world.strongly_connected());
    for rec in ds.records.iter().take(200) {
        let pickup = token_node(nodes, rec.tokens[1]).unwrap();
        let dropoff = token_node(nodes, rec.tokens[2]).unwrap();
        assert!(!ood.contains(&(pickup, dropoff)), "training never uses reserved OOD pairs");
        let mut cur = pickup;
        for &t in rec.completion() {
            if t == EOS {
                break;
            }
            let dir = token_dir(nodes, t).expect("move token");
            cur = world.step(cur, dir).expect("legal street");
        }
        assert_eq!(cur, dropoff, "traversal ends at the dropoff");
    }
}

#[test]
fn hmm_rows_are_stochastic_with_floor() {
    let params = HmmParams { states: 3, obs: 4, count: 2, seq_len: 10 };
    let (hmm, _) = gen_hmm(4, &params, "train").unwrap();
    for row in hmm.a.chunks(3).chain(std::iter::once(&hmm.initial[..])) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row sums to 1, got {s}");
        assert!(row.iter().all(|&p| p >= 0.05), "entry floor");
    }
    for row in hmm.o.chunks(4) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.05));
    }
}

#[test]
fn hmm_single_state_emits_iid() {
    let params = HmmParams { states: 1, obs: 3, count: 300, seq_len: 50 };
    let (hmm, ds) = gen_hmm(8, &params, "train").unwrap();
    let mut counts = [0usize; 3];
    let mut n = 0usize;
    for rec in &ds.records {
        for &t in &rec.tokens[1..] {
            counts[crate::tasks::hmm::token_obs(3, t).unwrap()] += 1;
            n += 1;
        }
    }
    for v in 0..3 {
        let freq = counts[v] as f64 / n as f64;
        let p = hmm.o[v];
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * sigma + 1e-3, "iid emission: {freq} vs {p}");
    }
}

#[test]
fn hmm_unigram_matches_stationary_emission() {
    let params = HmmParams { states: 2, obs: 3, count: 1000, seq_len: 100 };
    let (hmm, ds) = gen_hmm(21, &params, "train").unwrap();
    let pi = hmm.stationary();
    let mut marginal = vec![0.0; 3];
    for s in 0..2 {
        for v in 0..3 {
            marginal[v] += pi[s] * hmm.o[s * 3 + v];
        }
    }
    let burn = 20usize;
    let mut counts = vec![0usize; 3];
    let mut n = 0usize;
    for rec in &ds.records {
        for &t in &rec.tokens[1 + burn..] {
            counts[token_obs(3, t).unwrap()] += 1;
            n += 1;
        }
    }
    assert!(n >= 50_000);
    for v in 0..3 {
        let freq = counts[v] as f64 / n as f64;
        // Conservative effective-sample discount for the Markov
        // autocorrelation (mixing is fast at the 0.05 floor).
        let sigma = (marginal[v] * (1.0 - marginal[v]) / (n as f64 / 20.0)).sqrt();
        assert!(
            (freq - marginal[v]).abs() <= 3.0 * sigma,
            "unigram {v}: {freq} vs stationary {} (3 sigma = {})",
            marginal[v],
            3.0 * sigma
        );
    }
}

#[test]
fn belief_filter_hand_cases() {
    // Uniform transition: the predicted prior is uniform every step.
    let uniform = HmmOracleTask {
        states: 2,
        obs: 2,
        a: vec![0.5; 4],
        o: vec![0.8, 0.2, 0.2, 0.8],
        initial: vec![0.3, 0.7],
    };
    for b in [vec![0.3, 0.7], vec![0.9, 0.1]] {
        let prior = uniform.predict_state(&b);
        assert!((prior[0] - 0.5).abs() < 1e-15 && (prior[1] - 0.5).abs() < 1e-15);
    }

    // Deterministic HMM: permutation transition, identity emission; the
    // belief is a one-hot tracking the state.
    let det = HmmOracleTask {
        states: 2,
        obs: 2,
        a: vec![0.0, 1.0, 1.0, 0.0],
        o: vec![1.0, 0.0, 0.0, 1.0],
        initial: vec![1.0, 0.0],
    };
    let beliefs = exact_belief_filter(&det, &[1, 0, 1]);
    assert_eq!(beliefs[1], vec![0.0, 1.0]);
    assert_eq!(beliefs[2], vec![1.0, 0.0]);
    assert_eq!(beliefs[3], vec![0.0, 1.0]);

    // Two-state hand case from a uniform prior.
    let hand = HmmOracleTask {
        states: 2,
        obs: 2,
        a: vec![0.9, 0.1, 0.1, 0.9],
        o: vec![0.8, 0.2, 0.2, 0.8],
        initial: vec![0.5, 0.5],
    };
    let beliefs = exact_belief_filter(&hand, &[0]);
    assert!((beliefs[1][0] - 0.8).abs() < 1e-12, "b1 = (0.8, 0.2), got {:?}", beliefs[1]);
    assert!((beliefs[1][1] - 0.2).abs() < 1e-12);
    // The one-step predictive after observing [0]: bᵀ A O.
    let pred = hand.predictive(&beliefs[1]);
    let prior = [0.8 * 0.9 + 0.2 * 0.1, 0.8 * 0.1 + 0.2 * 0.9];
    let expect = [prior[0] * 0.8 + prior[1] * 0.2, prior[0] * 0.2 + prior[1] * 0.8];
    assert!((pred[0] - expect[0]).abs() < 1e-12 && (pred[1] - expect[1]).abs() < 1e-12);
}

#[test]
fn dataset_io_round_trip_and_hash_guard() {
    let params = PathStarParams { arms: 2, arm_len: 4, node_values: 20, count: 25 };
    let ds = gen_path_star(2, &params, "test").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ps.nlds");
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.records, ds.records);
    assert_eq!(back.split, "test");
    assert_eq!(back.tokenizer.hash_hex(), ds.tokenizer.hash_hex());

    // Pairing with a different tokenizer is refused, reporting both hashes.
    let other = Tokenizer::new(["x"].map(str::to_string));
    match back.check_tokenizer(&other) {
        Err(crate::error::Error::TokenizerHash { expected, actual }) => {
            assert_ne!(expected, actual);
        }
        other => panic!("expected hash mismatch, got {other:?}"),
    }
}

#[test]
fn dataset_io_large_round_trip_is_fast() {
    let params = PathStarParams { arms: 2, arm_len: 5, node_values: 30, count: 10_000 };
    let ds = gen_path_star(6, &params, "train").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.nlds");
    let t0 = std::time::Instant::now();
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert!(t0.elapsed().as_secs_f64() < 1.0, "10k instances round-trip under a second");
    assert_eq!(back.records.len(), 10_000);
}
