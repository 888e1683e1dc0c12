//! The gradient-check suite behind the `gradcheck` subcommand: central
//! finite differences against every exported op's backward rule, plus the
//! fully assembled training losses on a small two-layer model. All checks
//! run in f64.

use crate::model::{Transformer, TransformerConfig};
use crate::objective::{check_objective_gradients, Batch, NextLatConfig, Objective};
use crate::rng::stream;
use crate::tensor::{grad_check_named, kl_div, CheckReport, Tape, Tensor, TokenBatch};
use crate::train::{build_objective, ObjectiveKind, RunConfig};
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::constant(shape, (0..n).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale).collect())
}

/// Finite-difference checks for every exported tensor op.
pub fn op_checks() -> Vec<CheckReport> {
    let mut rng = stream(2024, "gradcheck/ops");
    let mut reports = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>, point: &Tensor<f64>| {
        reports.push(grad_check_named(name, f, point, EPS, TOL));
    };

    let w = rand_tensor(&mut rng, &[6, 4], 0.8);
    let x23 = rand_tensor(&mut rng, &[2, 3, 4], 0.8);
    let probe = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let probe2 = probe.clone();
    let m = rand_tensor(&mut rng, &[3, 6], 0.8);

    check("matmul_lhs", &|a| a.matmul(&w).sum(), &m);
    let mt = rand_tensor(&mut rng, &[3, 6], 0.8);
    check("matmul_rhs", &|b| mt.matmul(b).sum(), &rand_tensor(&mut rng, &[6, 5], 0.8));

    let bias = rand_tensor(&mut rng, &[4], 0.5);
    let xin = rand_tensor(&mut rng, &[2, 3, 6], 0.8);
    let w64 = rand_tensor(&mut rng, &[6, 4], 0.8);
    check("linear_x", &|x| x.linear(&w64, Some(&bias)).mul(&probe).sum(), &xin);
    check("linear_w", &|wv| xin.linear(wv, Some(&bias)).mul(&probe).sum(), &w64);
    check("linear_bias", &|b| xin.linear(&w64, Some(b)).mul(&probe2).sum(), &bias);

    let rows = rand_tensor(&mut rng, &[4, 6], 0.8);
    check("linear_nt_x", &|x| x.linear_nt(&rows).sum(), &xin);
    check("linear_nt_w", &|r| xin.linear_nt(r).sum(), &rows);

    let g3 = rand_tensor(&mut rng, &[2, 3, 3], 0.8);
    let g3b = rand_tensor(&mut rng, &[2, 3, 3], 0.8);
    check("bmm_lhs", &|a| a.bmm(&g3b).sum(), &g3);
    check("bmm_rhs", &|b| g3.bmm(b).sum(), &g3b);
    check("bmm_nt_lhs", &|a| a.bmm_nt(&g3b).sum(), &g3);
    check("bmm_nt_rhs", &|b| g3.bmm_nt(b).sum(), &g3b);

    check("permute_0213", &|x| x.reshape(&[2, 3, 2, 2]).permute_0213().mul(&probe.reshape(&[2, 2, 3, 2])).sum(), &x23);
    check("softmax_last", &|x| x.softmax_last().mul(&probe).sum(), &x23);
    check("causal_softmax", &|x| x.causal_softmax().mul(&g3b).sum(), &g3);

    let gain = rand_tensor(&mut rng, &[4], 0.5);
    let lnb = rand_tensor(&mut rng, &[4], 0.5);
    check("layer_norm_x", &|x| x.layer_norm(&gain, &lnb, 1e-5).mul(&probe).sum(), &x23);
    check("layer_norm_gain", &|g| x23.layer_norm(g, &lnb, 1e-5).mul(&probe).sum(), &gain);
    check("layer_norm_bias", &|b| x23.layer_norm(&gain, b, 1e-5).mul(&probe).sum(), &lnb);

    check("gelu", &|x| x.gelu().mul(&probe).sum(), &x23);

    let ids = TokenBatch::new(2, 3, vec![0, 2, 2, 1, 0, 3]);
    check("embedding_lookup", &|t| t.embedding_lookup(&ids).unwrap().mul(&probe).sum(), &rand_tensor(&mut rng, &[4, 4], 0.8));

    check(
        "cross_entropy",
        &|x| x.reshape(&[6, 4]).cross_entropy(&[1, 0, 3, 2, 2, 1], &[true, true, false, true, true, false]).unwrap(),
        &x23,
    );

    let target = rand_tensor(&mut rng, &[2, 3, 4], 0.5);
    check("smooth_l1", &|p| p.smooth_l1(&target, 1.0), &x23);

    let p_logits = rand_tensor(&mut rng, &[3, 5], 1.0);
    check("kl_div_q", &|q| kl_div(&p_logits, q), &rand_tensor(&mut rng, &[3, 5], 1.0));

    check("add_broadcast", &|x| x.add(&bias).mul(&probe).sum(), &x23);
    check("sub", &|x| x.sub(&target).mul(&probe).sum(), &x23);
    check("mul", &|x| x.mul(&target).sum(), &x23);
    check("scale", &|x| x.scale(-1.7).sum(), &x23);
    check("sum", &|x| x.sum(), &x23);
    check("mean", &|x| x.mean(), &x23);
    check("shift_right_time", &|x| x.shift_right_time().mul(&probe).sum(), &x23);
    check("concat_last", &|x| x.concat_last(&target).mul(&rand_tensor(&mut stream(7, "w"), &[2, 3, 8], 1.0)).sum(), &x23);
    check("slice_time", &|x| x.slice_time(1, 2).sum(), &x23);
    check("slice_last", &|x| x.slice_last(1, 2).sum(), &x23);
    check("gather_rows", &|x| x.reshape(&[6, 4]).gather_rows(&[0, 5, 5, 2]).sum(), &x23);

    // Dropout with a fixed stream: the same mask must be applied at every
    // finite-difference evaluation.
    check(
        "dropout",
        &|x| {
            let mut drng = stream(99, "gradcheck/dropout");
            x.dropout(0.3, &mut drng).mul(&probe).sum()
        },
        &x23,
    );

    reports
}

/// Finite-difference checks of the assembled losses (every objective, the
/// multi-step ones at d in {1, 2, 4}) on a 2-layer, D=8, V=11 model.
pub fn loss_checks() -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let mut data_rng = stream(555, "gradcheck/batch");
    let b = 2usize;
    let t = 8usize;
    let v = 11usize;
    let rows: Vec<Vec<u32>> =
        (0..b).map(|_| (0..=t).map(|_| data_rng.gen_range(0..v as u32)).collect()).collect();
    let tokens = TokenBatch::from_rows(&rows.iter().map(|r| r[..t].to_vec()).collect::<Vec<_>>());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for r in &rows {
        targets.extend_from_slice(&r[1..=t]);
        for pos in 0..t {
            mask.push(pos + 1 >= 3);
        }
    }
    let batch = Batch { tokens, targets, mask };

    let mut run_check = |name: String, kind: ObjectiveKind, d: usize| {
        let run = RunConfig {
            objective: kind,
            horizon: d,
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            psi_hidden: 12,
            seed: 2025,
            ..Default::default()
        };
        let tape = Tape::<f64>::new();
        let mut mrng = stream(run.seed, "init/model");
        let mut cfg = TransformerConfig::new(run.n_layers, run.n_heads, run.d_model, v, t);
        cfg.d_ff = run.d_ff;
        let mut model = Transformer::new(cfg.clone(), &tape, &mut mrng).unwrap();
        let mut objective = build_objective::<f64>(&run, &cfg, &tape);
        if let Objective::NextLat { psi, cfg } = &mut objective {
            // Perturb the zero-initialized final layer so its gradient paths
            // are generic, and exercise both auxiliary terms.
            let mut prng = stream(77, "gradcheck/psi");
            for p in psi.params_mut() {
                if p.name == "psi.w3" {
                    let data = p.tensor.data_make_mut();
                    for v in data.iter_mut() {
                        *v = (prng.gen::<f64>() - 0.5) * 0.2;
                    }
                }
            }
            *cfg = NextLatConfig { horizon: d, lambda_next_h: 0.7, lambda_kl: 0.9 };
        }
        reports.push(check_objective_gradients(&name, &mut model, &mut objective, &batch, EPS, TOL));
    };

    run_check("loss_gpt".into(), ObjectiveKind::Gpt, 1);
    for d in [1usize, 2, 4] {
        run_check(format!("loss_mtp_d{d}"), ObjectiveKind::Mtp, d);
        run_check(format!("loss_jtp_d{d}"), ObjectiveKind::Jtp, d);
        run_check(format!("loss_nextlat_d{d}"), ObjectiveKind::NextLat, d);
    }
    reports
}

/// Everything the `gradcheck` subcommand runs; passes iff every report
/// passes.
pub fn run_all_checks() -> (Vec<CheckReport>, bool) {
    let mut reports = op_checks();
    reports.extend(loss_checks());
    let pass = reports.iter().all(|r| r.pass);
    (reports, pass)
}
