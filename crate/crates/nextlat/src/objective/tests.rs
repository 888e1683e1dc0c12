use super::*;
use crate::model::{Transformer, TransformerConfig};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use std::rc::Rc;

fn toy_model(
    seed: u64,
    layers: usize,
    d: usize,
    v: usize,
    t_max: usize,
) -> (Rc<Tape<f64>>, Transformer<f64>) {
    let tape = Tape::<f64>::new();
    let mut rng = stream(seed, "init/model");
    let mut cfg = TransformerConfig::new(layers, 2, d, v, t_max);
    cfg.d_ff = 2 * d;
    let model = Transformer::new(cfg, &tape, &mut rng).unwrap();
    (tape, model)
}

fn toy_batch(seed: u64, b: usize, t: usize, v: usize, prompt: usize) -> Batch {
    let mut rng = stream(seed, "data");
    let rows: Vec<Vec<u32>> = (0..b).map(|_| (0..=t).map(|_| rng.gen_range(0..v as u32)).collect()).collect();
    let tokens = TokenBatch::from_rows(&rows.iter().map(|r| r[..t].to_vec()).collect::<Vec<_>>());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for r in &rows {
        targets.extend_from_slice(&r[1..=t]);
        for pos in 0..t {
            mask.push(pos + 1 >= prompt);
        }
    }
    Batch { tokens, targets, mask }
}

#[test]
fn step_latent_is_identity_at_init() {
    let (tape, model) = toy_model(1, 1, 8, 7, 16);
    let mut rng = stream(1, "init/psi");
    let psi = LatentDynamicsModel::new(&tape, 8, 16, &mut rng);
    let batch = toy_batch(1, 2, 5, 7, 1);
    let out = model.forward(&batch.tokens).unwrap();
    let pred = psi.step_latent(&out.hidden.0, &batch.tokens, model.embedding_table()).unwrap();
    assert_eq!(pred.shape(), out.hidden.0.shape(), "output shape equals input shape");
    assert_eq!(pred.data(), out.hidden.0.data(), "zero-initialized final layer gives the identity");
}

#[test]
fn step_latent_gradient_matches_finite_differences() {
    let (tape, model) = toy_model(2, 1, 6, 5, 8);
    let mut rng = stream(2, "init/psi");
    let mut psi = LatentDynamicsModel::new(&tape, 6, 8, &mut rng);
    // Move w3 off exact zero so its gradient paths are generic.
    {
        let w3 = &mut psi.params_mut()[6];
        assert_eq!(w3.name, "psi.w3");
        let data = w3.tensor.data_make_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i as f64) * 0.17).sin() * 0.1;
        }
    }
    let batch = toy_batch(2, 1, 4, 5, 1);
    let h = model.forward(&batch.tokens).unwrap().hidden.0.detach();

    let names: Vec<String> = psi.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        tape.zero_grads();
        tape.reset();
        let loss = psi
            .step_latent(&h, &batch.tokens, model.embedding_table())
            .unwrap()
            .mul(&Tensor::constant(h.shape(), (0..h.numel()).map(|i| ((i * 31 % 17) as f64) / 8.0 - 1.0).collect()))
            .sum();
        tape.backward(&loss).unwrap();
        let analytic = psi.params()[pi].tensor.grad().unwrap();
        tape.reset();

        let eps = 1e-5;
        let n = analytic.len();
        for ci in (0..n).step_by((n / 7).max(1)) {
            let eval = |delta: f64, psi: &mut LatentDynamicsModel<f64>| {
                psi.params_mut()[pi].tensor.data_make_mut()[ci] += delta;
                let l = psi
                    .step_latent(&h, &batch.tokens, model.embedding_table())
                    .unwrap()
                    .mul(&Tensor::constant(h.shape(), (0..h.numel()).map(|i| ((i * 31 % 17) as f64) / 8.0 - 1.0).collect()))
                    .sum()
                    .item();
                tape.reset();
                l
            };
            let lp = eval(eps, &mut psi);
            let lm = eval(-2.0 * eps, &mut psi);
            eval(eps, &mut psi); // restore
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (analytic[ci] - numeric).abs() / analytic[ci].abs().max(numeric.abs()).max(1.0);
            assert!(rel <= 1e-4, "{name}[{ci}]: analytic {} vs numeric {numeric}", analytic[ci]);
        }
    }
}

#[test]
fn rollout_trace_has_d_layers_and_perfect_psi_gives_zero() {
    let (tape, mut model) = toy_model(3, 1, 8, 7, 16);
    // Zero the final layer norm so every hidden state is exactly zero; the
    // identity-initialized psi then reproduces h everywhere.
    for p in model.params_mut() {
        if p.name == "ln_f.gain" || p.name == "ln_f.bias" {
            p.tensor.data_make_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = stream(3, "init/psi");
    let psi = LatentDynamicsModel::new(&tape, 8, 16, &mut rng);
    let batch = toy_batch(3, 2, 6, 7, 1);
    let out = model.forward(&batch.tokens).unwrap();
    assert!(out.hidden.0.data().iter().all(|&v| v == 0.0));

    for d in [1usize, 3] {
        let trace = rollout(&psi, &out.hidden, &batch.tokens, model.embedding_table(), d).unwrap();
        assert_eq!(trace.preds.len(), d, "trace contains exactly d prediction layers");
        assert_eq!(loss_next_h(&trace).item(), 0.0, "perfect psi gives zero smooth-L1");
    }

    let err = rollout(&psi, &out.hidden, &batch.tokens, model.embedding_table(), 6);
    assert!(err.is_err(), "d >= T is rejected");
}

#[test]
fn rollout_matches_hand_unrolled_bits() {
    // d=2, B=1, T=3, D=2: explicit shift and two MLP applications written
    // out in plain f64, compared bit-for-bit.
    let (tape, model) = toy_model(4, 1, 2, 5, 8);
    let mut rng = stream(4, "init/psi");
    let mut psi = LatentDynamicsModel::new(&tape, 2, 4, &mut rng);
    // Non-degenerate weights everywhere, including the final layer.
    for p in psi.params_mut() {
        let data = p.tensor.data_make_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i as f64 + 1.0) * 0.37).sin() * 0.5;
        }
    }
    let batch = toy_batch(4, 1, 3, 5, 1);
    let out = model.forward(&batch.tokens).unwrap();
    let trace = rollout(&psi, &out.hidden, &batch.tokens, model.embedding_table(), 2).unwrap();

    // Hand-unrolled recomputation.
    let d = 2usize;
    let h = out.hidden.0.data();
    let wte = model.embedding_table().data();
    let p: Vec<&[f64]> = psi.params().iter().map(|p| p.tensor.data()).collect();
    let (ng, nb, w1, b1, w2, b2, w3, b3) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]);
    let hdim = 4usize;

    let step = |cur: &[f64]| -> Vec<f64> {
        let mut pred = vec![0.0; 6];
        for t in 0..3 {
            let tok = batch.tokens.ids[t] as usize;
            // concat(h, emb)
            let mut x = [cur[t * 2], cur[t * 2 + 1], wte[tok * 2], wte[tok * 2 + 1]];
            // layer norm over 4
            let mean = x.iter().sum::<f64>() / 4.0;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for i in 0..4 {
                x[i] = (x[i] - mean) * inv * ng[i] + nb[i];
            }
            // affine + gelu, twice, then the output affine
            let gelu = |v: f64| {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            };
            let mut h1 = [0.0; 4];
            for o in 0..hdim {
                let mut s = 0.0;
                for i in 0..4 {
                    s += x[i] * w1[i * hdim + o];
                }
                h1[o] = gelu(s + b1[o]);
            }
            let mut h2 = [0.0; 4];
            for o in 0..hdim {
                let mut s = 0.0;
                for i in 0..hdim {
                    s += h1[i] * w2[i * hdim + o];
                }
                h2[o] = gelu(s + b2[o]);
            }
            for o in 0..2 {
                let mut s = 0.0;
                for i in 0..hdim {
                    s += h2[i] * w3[i * 2 + o];
                }
                pred[t * 2 + o] = (s + b3[o]) + cur[t * 2 + o];
            }
        }
        pred
    };

    let mut cur: Vec<f64> = h.to_vec();
    for i in 0..d {
        // shift right with zero dummy initial state
        let mut shifted = vec![0.0; 6];
        shifted[2..6].copy_from_slice(&cur[0..4]);
        let pred = step(&shifted);
        assert_eq!(
            trace.preds[i].data(),
            &pred[..],
            "step {i} of the hand-unrolled rollout must match bit-for-bit"
        );
        cur = pred;
    }
}

#[test]
fn loss_next_h_linear_branch_scaling() {
    // Per-element smooth-L1 in the linear branch is |d| - beta/2, so
    // doubling every error obeys L(2d) = 2 L(d) + beta/2 exactly.
    let targets = Tensor::<f64>::zeros(&[2, 3, 2]);
    let delta: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 2.0 } else { -3.0 }).collect();
    let pred1 = Tensor::constant(&[2, 3, 2], delta.clone());
    let pred2 = Tensor::constant(&[2, 3, 2], delta.iter().map(|v| 2.0 * v).collect());
    let t1 = RolloutTrace { preds: vec![pred1], targets: targets.clone() };
    let t2 = RolloutTrace { preds: vec![pred2], targets };
    let (l1, l2) = (loss_next_h(&t1).item(), loss_next_h(&t2).item());
    assert!((l2 - (2.0 * l1 + 0.5)).abs() < 1e-12, "L(2d) = 2L(d) + beta/2, got {l1} -> {l2}");
}

#[test]
fn loss_next_h_matches_direct_recomputation() {
    // Independent straight-line evaluation of the d=3 mean on a random
    // instance.
    let (tape, model) = toy_model(6, 1, 4, 7, 16);
    let mut rng = stream(6, "init/psi");
    let mut psi = LatentDynamicsModel::new(&tape, 4, 8, &mut rng);
    for p in psi.params_mut() {
        let data = p.tensor.data_make_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v += ((i as f64) * 0.29).cos() * 0.2;
        }
    }
    let batch = toy_batch(6, 2, 5, 7, 1);
    let out = model.forward(&batch.tokens).unwrap();
    let trace = rollout(&psi, &out.hidden, &batch.tokens, model.embedding_table(), 3).unwrap();
    let l = loss_next_h(&trace).item();

    let h = out.hidden.0.data();
    let mut direct = 0.0;
    for pred in &trace.preds {
        let mut step_sum = 0.0;
        for (i, &pv) in pred.data().iter().enumerate() {
            let d = pv - h[i];
            step_sum += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        direct += step_sum / pred.numel() as f64;
    }
    direct /= 3.0;
    assert!((l - direct).abs() < 1e-12, "engine {l} vs direct {direct}");
}

#[test]
fn loss_kl_zero_when_exact_and_matches_recomputation() {
    let (tape, model) = toy_model(7, 1, 4, 5, 16);
    let batch = toy_batch(7, 1, 6, 5, 2);
    let out = model.forward(&batch.tokens).unwrap();
    let frozen = model.snapshot_frozen_head();

    // Exact predictions: KL must be exactly zero.
    let exact = RolloutTrace {
        preds: vec![out.hidden.0.detach(), out.hidden.0.detach()],
        targets: out.hidden.0.detach(),
    };
    let lkl = loss_kl(&exact, &frozen, &out.logits, &batch.mask);
    assert_eq!(lkl.item(), 0.0);

    // Random predictions on a V=5, d=2 instance vs straight-line math.
    let mut rng = stream(7, "init/psi");
    let psi = {
        let mut psi = LatentDynamicsModel::new(&tape, 4, 8, &mut rng);
        for p in psi.params_mut() {
            let data = p.tensor.data_make_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v += ((i as f64) * 0.41).sin() * 0.3;
            }
        }
        psi
    };
    let trace = rollout(&psi, &out.hidden, &batch.tokens, model.embedding_table(), 2).unwrap();
    let val = loss_kl(&trace, &frozen, &out.logits, &batch.mask).item();

    let v = 5usize;
    let softmax = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|&x| x / z).collect()
    };
    let head_w = frozen.weight_snapshot();
    let mut direct = 0.0;
    for pred in &trace.preds {
        let mut step = 0.0;
        let mut rows = 0usize;
        for pos in 0..6 {
            if !batch.mask[pos] {
                continue;
            }
            rows += 1;
            let p_row = softmax(&out.logits.data()[pos * v..(pos + 1) * v]);
            let mut q_logits = vec![0.0; v];
            for o in 0..v {
                let mut s = 0.0;
                for i in 0..4 {
                    s += pred.data()[pos * 4 + i] * head_w.data()[i * v + o];
                }
                q_logits[o] = s;
            }
            let q_row = softmax(&q_logits);
            for c in 0..v {
                step += p_row[c] * (p_row[c].ln() - q_row[c].ln());
            }
        }
        direct += step / rows as f64;
    }
    direct /= 2.0;
    assert!((val - direct).abs() < 1e-10, "engine {val} vs direct {direct}");
}

#[test]
fn kl_gradient_frozen_head_is_zero_and_psi_nonzero() {
    let (tape, model) = toy_model(8, 1, 6, 9, 16);
    let mut rng = stream(8, "init/psi");
    let psi = LatentDynamicsModel::new(&tape, 6, 8, &mut rng);
    let cfg = NextLatConfig { horizon: 2, lambda_next_h: 0.0, lambda_kl: 1.0 };
    let batch = toy_batch(8, 2, 5, 9, 2);

    tape.zero_grads();
    let (loss, _) = nextlat_loss(&model, &psi, &batch, &cfg, None).unwrap();
    tape.backward(&loss).unwrap();

    // psi received nonzero gradient through the frozen head.
    let psi_grad_norm: f64 = psi
        .params()
        .iter()
        .flat_map(|p| p.tensor.grad().unwrap())
        .map(|g| g * g)
        .sum();
    assert!(psi_grad_norm > 0.0, "psi must receive gradient through the frozen head");

    // The CE term moves the head, so isolate the KL path: recompute with
    // the CE contribution subtracted by comparing against a pure-CE run.
    let head_grad_with_kl: Vec<f64> = model
        .params()
        .iter()
        .find(|p| p.name == "head")
        .unwrap()
        .tensor
        .grad()
        .unwrap();
    tape.reset();
    tape.zero_grads();
    let (ce_only, _) = gpt_loss(&model, &batch, None).unwrap();
    tape.backward(&ce_only).unwrap();
    let head_grad_ce: Vec<f64> = model
        .params()
        .iter()
        .find(|p| p.name == "head")
        .unwrap()
        .tensor
        .grad()
        .unwrap();
    for (a, b) in head_grad_with_kl.iter().zip(head_grad_ce.iter()) {
        assert_eq!(a, b, "KL contributes exactly zero gradient to the live head");
    }
}

#[test]
fn stop_gradient_target_branch_contributes_nothing() {
    // Cut the prediction branch by detaching the rollout outputs: the only
    // remaining path to the transformer runs through the smooth-L1 targets,
    // which are stop-gradients, so every transformer gradient is exactly 0.
    let (tape, model) = toy_model(9, 1, 4, 7, 16);
    let mut rng = stream(9, "init/psi");
    let psi = LatentDynamicsModel::new(&tape, 4, 8, &mut rng);
    let batch = toy_batch(9, 1, 5, 7, 1);
    let out = model.forward(&batch.tokens).unwrap();
    let trace = rollout(&psi, &out.hidden, &batch.tokens, model.embedding_table(), 1).unwrap();
    let detached = RolloutTrace {
        preds: trace.preds.iter().map(|p| p.detach()).collect(),
        targets: trace.targets.clone(),
    };
    tape.zero_grads();
    // Constant loss (all inputs detached): backward is a no-op.
    let l = loss_next_h(&detached);
    assert!(!l.requires_grad());
    for p in model.params() {
        assert!(p.tensor.grad().unwrap().iter().all(|&g| g == 0.0), "{} leaked gradient", p.name);
    }
}

#[test]
fn mask_audit_next_h_covers_prompt_but_token_losses_do_not() {
    let (tape, model) = toy_model(10, 1, 4, 7, 16);
    let mut rng = stream(10, "init/psi");
    let mut psi = LatentDynamicsModel::new(&tape, 4, 8, &mut rng);
    for p in psi.params_mut() {
        let data = p.tensor.data_make_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v += ((i as f64) * 0.53).sin() * 0.2;
        }
    }
    let prompt = 3usize;
    let batch = toy_batch(10, 1, 6, 7, prompt);
    let out = model.forward(&batch.tokens).unwrap();
    let trace = rollout(&psi, &out.hidden, &batch.tokens, model.embedding_table(), 1).unwrap();

    // Per-position smooth-L1 map: prompt positions contribute.
    let h = out.hidden.0.data();
    let pred = trace.preds[0].data();
    let mut l1_map = vec![0.0; 6];
    for t in 0..6 {
        for i in 0..4 {
            let d = pred[t * 4 + i] - h[t * 4 + i];
            l1_map[t] += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
    }
    assert!(
        (0..prompt - 1).any(|t| l1_map[t] > 0.0),
        "latent supervision must cover prompt positions: {l1_map:?}"
    );

    // Per-position CE/KL maps: masked positions contribute exactly zero.
    // (The loss only sees gathered unmasked rows, which is what the mask
    // audit asserts: its per-position map is zero wherever mask is false.)
    let unmasked: Vec<usize> = (0..6).filter(|&t| batch.mask[t]).collect();
    assert_eq!(unmasked, vec![2, 3, 4, 5], "prompt boundary places loss on completion only");
}

#[test]
fn nextlat_reduces_to_gpt_with_zero_lambdas() {
    let (tape, model) = toy_model(11, 2, 8, 11, 16);
    let mut rng = stream(11, "init/psi");
    let psi = LatentDynamicsModel::new(&tape, 8, 16, &mut rng);
    let batch = toy_batch(11, 2, 7, 11, 2);
    let cfg = NextLatConfig { horizon: 2, lambda_next_h: 0.0, lambda_kl: 0.0 };

    tape.zero_grads();
    let (l_gpt, _) = gpt_loss(&model, &batch, None).unwrap();
    tape.backward(&l_gpt).unwrap();
    let grads_gpt: Vec<Vec<f64>> = model.params().iter().map(|p| p.tensor.grad().unwrap()).collect();
    tape.reset();
    tape.zero_grads();

    let (l_nl, breakdown) = nextlat_loss(&model, &psi, &batch, &cfg, None).unwrap();
    tape.backward(&l_nl).unwrap();
    let grads_nl: Vec<Vec<f64>> = model.params().iter().map(|p| p.tensor.grad().unwrap()).collect();

    assert_eq!(l_gpt.item(), l_nl.item(), "loss value is bit-identical");
    assert_eq!(breakdown.next_h, 0.0);
    assert_eq!(breakdown.kl, 0.0);
    for (a, b) in grads_gpt.iter().zip(grads_nl.iter()) {
        assert_eq!(a, b, "transformer gradients are bit-identical");
    }
}

#[test]
fn nextlat_terms_are_nonnegative() {
    let (_tape, model) = toy_model(12, 1, 6, 9, 16);
    let mut rng = stream(12, "init/psi");
    let psi = LatentDynamicsModel::new(&_tape, 6, 8, &mut rng);
    let batch = toy_batch(12, 2, 6, 9, 2);
    let cfg = NextLatConfig { horizon: 2, lambda_next_h: 1.0, lambda_kl: 1.0 };
    let (_, b) = nextlat_loss(&model, &psi, &batch, &cfg, None).unwrap();
    assert!(b.next_token >= 0.0 && b.next_h >= 0.0 && b.kl >= -1e-15, "{b:?}");
}

#[test]
fn mtp_branch_masks_and_recomputation() {
    let (tape, model) = toy_model(13, 1, 4, 6, 16);
    let mut rng = stream(13, "init/mtp");
    let heads = MtpHeads::new(&tape, 2, 4, 8, 2, 6, &mut rng);
    let batch = toy_batch(13, 1, 4, 6, 1);

    // Position T-1 contributes only to branch 0.
    let (t0, m0) = batch.shifted(0);
    let (t1, m1) = batch.shifted(1);
    assert_eq!(t0.len(), 4);
    assert_eq!(t1.len(), 3, "branch 1 drops the final position");
    assert!(m0[3]);
    assert_eq!(m1.len(), 3);

    // Straight-line per-branch recomputation from the branch logits.
    let (total, _) = mtp_loss(&model, &heads, &batch, None).unwrap();
    let out = model.forward(&batch.tokens).unwrap();
    let mut direct = 0.0;
    for i in 0..2 {
        let logits = heads.branch_logits(i, &out.hidden.0, None);
        let keep = 4 - i;
        let (targets, mask) = batch.shifted(i);
        let mut ce = 0.0;
        let mut count = 0usize;
        for pos in 0..keep {
            if !mask[pos] {
                continue;
            }
            count += 1;
            let row = &logits.data()[pos * 6..(pos + 1) * 6];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            ce += m + z.ln() - row[targets[pos] as usize];
        }
        direct += ce / count as f64;
    }
    direct /= 2.0;
    assert!((total.item() - direct).abs() < 1e-10, "mtp {} vs direct {direct}", total.item());
}

#[test]
#[should_panic(expected = "horizon must be >= 1")]
fn jtp_zero_horizon_is_rejected() {
    let tape = Tape::<f64>::new();
    let mut rng = stream(14, "init/jtp");
    let _ = FetchModule::<f64>::new(&tape, 0, 4, &mut rng);
}

#[test]
fn jtp_first_term_matches_recomputation_and_terms_nonneg() {
    let (tape, model) = toy_model(15, 1, 4, 6, 16);
    let mut rng = stream(15, "init/jtp");
    let fetch = FetchModule::new(&tape, 1, 4, &mut rng);
    let batch = toy_batch(15, 1, 4, 6, 1);
    let (total, breakdown) = jtp_loss(&model, &fetch, &batch, None).unwrap();
    assert!(breakdown.next_token >= 0.0);
    assert!(total.item() >= 0.0);

    // Straight-line recomputation of the i=1 term: CE of X_{t+2} given
    // Fetch(h_t, X_{t+1}).
    let out = model.forward(&batch.tokens).unwrap();
    let d_model = 4usize;
    let v = 6usize;
    let t = 4usize;
    let p: std::collections::HashMap<&str, &[f64]> =
        fetch.params().iter().map(|p| (p.name.as_str(), p.tensor.data())).collect();
    let head = model.output_head();
    let head_w = head.weight_snapshot();
    let wte = model.embedding_table().data();
    let gelu = |v: f64| {
        let u = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v);
        0.5 * v * (1.0 + u.tanh())
    };
    let mut ce = 0.0;
    let mut count = 0;
    for pos in 0..t - 1 {
        if !batch.mask[pos + 1] {
            continue;
        }
        count += 1;
        let tok = batch.tokens.ids[pos + 1] as usize;
        let mut x = vec![0.0; 2 * d_model];
        x[..d_model].copy_from_slice(&out.hidden.0.data()[pos * d_model..(pos + 1) * d_model]);
        for i in 0..d_model {
            x[d_model + i] = wte[tok * d_model + i] + p["jtp.offset_emb"][i];
        }
        let mut cond = vec![0.0; d_model];
        for o in 0..d_model {
            let mut s = 0.0;
            for i in 0..2 * d_model {
                s += x[i] * p["jtp.fetch_w"][i * d_model + o];
            }
            cond[o] = gelu(s + p["jtp.fetch_b"][o]);
        }
        let mut logits = vec![0.0; v];
        for o in 0..v {
            let mut s = 0.0;
            for i in 0..d_model {
                s += cond[i] * head_w.data()[i * v + o];
            }
            logits[o] = s;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&lv| (lv - m).exp()).sum();
        ce += m + z.ln() - logits[batch.targets[pos + 1] as usize];
    }
    let direct = ce / count as f64;
    let expected = total.item() - breakdown.next_token;
    assert!(
        (expected - direct).abs() < 1e-10,
        "jtp i=1 term {expected} vs straight-line {direct}"
    );
}

#[test]
fn baseline_next_token_terms_match_gpt() {
    let (tape, model) = toy_model(16, 1, 4, 6, 16);
    let mut rng = stream(16, "init/obj");
    let fetch = FetchModule::new(&tape, 2, 4, &mut rng);
    let batch = toy_batch(16, 2, 5, 6, 2);
    let (g, _) = gpt_loss(&model, &batch, None).unwrap();
    let (_, jb) = jtp_loss(&model, &fetch, &batch, None).unwrap();
    assert_eq!(jb.next_token, g.item(), "the JTP next-token term is the GPT loss");
}
