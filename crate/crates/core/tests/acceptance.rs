//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them).

use llm_mde_core::adaptation_head::{self, BnMode, HeadConfig, HeadWeights};
use llm_mde_core::apg::PromptMode;
use llm_mde_core::backbone::RunMode;
use llm_mde_core::dataset::{generate_synthetic_scene, DepthMap, Split};
use llm_mde_core::experiment::{
    run_experiment, DataSource, ExperimentConfig, ExperimentKind, HPARAM_GRID,
};
use llm_mde_core::gradcheck::rel_err;
use llm_mde_core::lora;
use llm_mde_core::metrics::compute_metrics;
use llm_mde_core::model::{DepthModel, ModelConfig};
use llm_mde_core::reprogramming::{self, ReprogrammingWeights};
use llm_mde_core::tape::{ParamRegistry, Tape};
use llm_mde_core::tensor::{self, Tensor};
use llm_mde_core::training::{
    cosine_lr, fit, ssi_loss, ssi_loss_grad, ssi_loss_op, EarlyStopper, StopDecision, TrainConfig,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (rng.next_u64() as f64 / u64::MAX as f64)
}

fn map(vals: &[f64]) -> DepthMap {
    DepthMap::dense(1, vals.len(), vals.to_vec()).unwrap()
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.backbone.vision_width = 16;
    cfg.backbone.text_width = 16;
    cfg.backbone.vocab = 256;
    cfg.backbone.heads = 2;
    cfg.backbone.resolution = 32;
    cfg.backbone.vision_layers = 1;
    cfg.backbone.text_layers = 1;
    cfg.backbone.dropout = 0.0;
    cfg.v_prime = 8;
    cfg.head_channels = [4, 4, 4, 2];
    cfg.lora_rank_vision = 2;
    cfg.lora_alpha_vision = 4.0;
    cfg.lora_rank_text = 2;
    cfg.lora_alpha_text = 2.0;
    cfg
}

fn tiny_experiment(kind: ExperimentKind, dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(kind, dir);
    cfg.source = DataSource::Synthetic { count: 15, seed: 3 };
    cfg.model = tiny_model_config();
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg.render_count = 2;
    cfg
}

#[test]
fn criterion_01_ssi_scale_invariance() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let pred: Vec<f64> = (0..32).map(|_| uniform(&mut rng, 0.05, 9.0)).collect();
        let gt: Vec<f64> = (0..32).map(|_| uniform(&mut rng, 0.05, 9.0)).collect();
        let c = uniform(&mut rng, 0.1, 10.0);
        let base = ssi_loss(&map(&pred), &map(&gt)).unwrap();
        let scaled: Vec<f64> = pred.iter().map(|v| v * c).collect();
        let shifted = ssi_loss(&map(&scaled), &map(&gt)).unwrap();
        assert!(
            (base - shifted).abs() < 1e-9,
            "invariance violated: {base} vs {shifted} at c={c}"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("ACCEPTANCE 01 PASS: ssi scale invariance < 1e-9 over 100 pairs ({elapsed:?})");
}

#[test]
fn criterion_02_ssi_hand_value() {
    let loss = ssi_loss(&map(&[1.0, 1.0]), &map(&[1.0, 2.0])).unwrap();
    assert!((loss - 0.12011).abs() < 1e-4, "loss {loss}");
    println!("ACCEPTANCE 02 PASS: ssi hand value {loss:.6} = 0.12011 +/- 1e-4");
}

#[test]
fn criterion_03_gradient_correctness() {
    let started = Instant::now();

    // loss gradient against central differences, < 1e-6
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let pred: Vec<f64> = (0..10).map(|_| uniform(&mut rng, 0.3, 6.0)).collect();
    let gt: Vec<f64> = (0..10).map(|_| uniform(&mut rng, 0.3, 6.0)).collect();
    let analytic = ssi_loss_grad(&map(&pred), &map(&gt)).unwrap();
    let mut worst_loss = 0.0f64;
    for i in 0..10 {
        let h = 1e-6;
        let mut up = pred.clone();
        up[i] += h;
        let mut down = pred.clone();
        down[i] -= h;
        let fd = (ssi_loss(&map(&up), &map(&gt)).unwrap()
            - ssi_loss(&map(&down), &map(&gt)).unwrap())
            / (2.0 * h);
        worst_loss = worst_loss.max(rel_err(analytic[i], fd));
    }
    assert!(worst_loss < 1e-6, "ssi grad rel err {worst_loss}");

    // reprogramming parameter gradients, < 1e-3 (checked to 1e-4 here)
    let weights = ReprogrammingWeights::init(8, 8, 2, 13).unwrap();
    let xp = rand_tensor(&mut rng, &[4, 8]);
    let e_frozen = rand_tensor(&mut rng, &[12, 8]);
    let p0 = rand_tensor(&mut rng, &[3, 12]);
    let probe = rand_tensor(&mut rng, &[4, 8]);
    let eval_reprog = |p: &Tensor, w: &ReprogrammingWeights| -> f64 {
        let mut tape = Tape::no_grad();
        let mut reg = ParamRegistry::new();
        let vars = w.bind(&mut tape, &mut reg, false);
        let pv = tape.leaf(p.clone());
        let ev = tape.leaf(e_frozen.clone());
        let ep = reprogramming::derive_prototypes(&mut tape, pv, ev).unwrap();
        let x = tape.leaf(xp.clone());
        let out = reprogramming::reprogram(&mut tape, x, ep, &vars).unwrap();
        tape.value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    // analytic gradients
    let mut tape = Tape::new();
    let mut reg = ParamRegistry::new();
    let vars = weights.bind(&mut tape, &mut reg, true);
    let pv = tape.leaf(p0.clone());
    let ev = tape.leaf(e_frozen.clone());
    let ep = reprogramming::derive_prototypes(&mut tape, pv, ev).unwrap();
    let x = tape.leaf(xp.clone());
    let out = reprogramming::reprogram(&mut tape, x, ep, &vars).unwrap();
    let probe_v = tape.leaf(probe.clone());
    let prod = tape.mul(out, probe_v);
    let root = tape.sum_all(prod);
    let grads = tape.backward(root);

    let mut worst_reprog = 0.0f64;
    let mut checked_reprog = 0usize;
    {
        // dP by finite differences
        let g_p = grads.wrt(pv).unwrap().clone();
        for idx in [0usize, 5, 17, 35] {
            let h = 1e-5;
            let mut up = p0.clone();
            up.data_mut()[idx] += h;
            let mut down = p0.clone();
            down.data_mut()[idx] -= h;
            let fd = (eval_reprog(&up, &weights) - eval_reprog(&down, &weights)) / (2.0 * h);
            let an = g_p.data()[idx];
            if an.abs().max(fd.abs()) > 1e-9 {
                checked_reprog += 1;
                worst_reprog = worst_reprog.max(rel_err(an, fd));
            }
        }
        // per-head projections by finite differences
        for (hk, &(wq, wk, wv)) in vars.heads.iter().enumerate() {
            for (slot, var) in [("q", wq), ("k", wk), ("v", wv)] {
                let g = grads.wrt(var).unwrap().clone();
                for idx in [0usize, 9, 23] {
                    let h = 1e-5;
                    let mut up = weights.clone();
                    let mut down = weights.clone();
                    {
                        let t = match slot {
                            "q" => &mut up.heads[hk].wq,
                            "k" => &mut up.heads[hk].wk,
                            _ => &mut up.heads[hk].wv,
                        };
                        t.data_mut()[idx] += h;
                    }
                    {
                        let t = match slot {
                            "q" => &mut down.heads[hk].wq,
                            "k" => &mut down.heads[hk].wk,
                            _ => &mut down.heads[hk].wv,
                        };
                        t.data_mut()[idx] -= h;
                    }
                    let fd = (eval_reprog(&p0, &up) - eval_reprog(&p0, &down)) / (2.0 * h);
                    let an = g.data()[idx];
                    if an.abs().max(fd.abs()) > 1e-9 {
                        checked_reprog += 1;
                        worst_reprog = worst_reprog.max(rel_err(an, fd));
                    }
                }
            }
        }
    }
    assert!(checked_reprog >= 10, "only {checked_reprog} live reprogram probes");
    assert!(worst_reprog < 1e-3, "reprogram grad rel err {worst_reprog}");

    // head conv gradients with frozen batch-norm statistics, < 1e-3
    let cfg = HeadConfig::new(6, 4, [4, 3, 3, 2], 16).unwrap();
    let head = HeadWeights::init(&cfg, 77).unwrap();
    let hidden = rand_tensor(&mut rng, &[6, 6]);
    let probe_img = rand_tensor(&mut rng, &[16, 16]);
    let eval_head = |w: &HeadWeights| -> f64 {
        let mut tape = Tape::no_grad();
        let mut reg = ParamRegistry::new();
        let vars = w.bind(&mut tape, &mut reg, false);
        let h = tape.leaf(hidden.clone());
        let (unit, _) =
            adaptation_head::head_forward(&mut tape, h, &vars, w, &cfg, &BnMode::Frozen).unwrap();
        tape.value(unit)
            .data()
            .iter()
            .zip(probe_img.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut tape = Tape::new();
    let mut reg = ParamRegistry::new();
    let hvars = head.bind(&mut tape, &mut reg, true);
    let hv = tape.leaf(hidden.clone());
    let (unit, _) =
        adaptation_head::head_forward(&mut tape, hv, &hvars, &head, &cfg, &BnMode::Frozen).unwrap();
    let pv2 = tape.leaf(probe_img.clone());
    let prod2 = tape.mul(unit, pv2);
    let root2 = tape.sum_all(prod2);
    let hgrads = tape.backward(root2);
    let g_conv = hgrads.wrt(hvars.blocks[0].conv_w).unwrap().clone();
    let mut worst_head = 0.0f64;
    let mut checked_head = 0usize;
    for idx in [0usize, 13, 41, 77, 101] {
        let idx = idx % head.blocks[0].conv_w.numel();
        let h = 1e-5;
        let mut up = head.clone();
        up.blocks[0].conv_w.data_mut()[idx] += h;
        let mut down = head.clone();
        down.blocks[0].conv_w.data_mut()[idx] -= h;
        let fd = (eval_head(&up) - eval_head(&down)) / (2.0 * h);
        let an = g_conv.data()[idx];
        if an.abs().max(fd.abs()) > 1e-9 {
            checked_head += 1;
            worst_head = worst_head.max(rel_err(an, fd));
        }
    }
    assert!(checked_head >= 3, "only {checked_head} live head probes");
    assert!(worst_head < 1e-3, "head grad rel err {worst_head}");

    // end-to-end: five unfrozen scalars of the assembled model
    let model = DepthModel::new(tiny_model_config(), 5).unwrap();
    let sample = generate_synthetic_scene(8, 32, "bedroom");
    let loss_of = |m: &DepthModel| -> f64 {
        let pred = m.predict(&sample).unwrap();
        ssi_loss(&pred, &sample.depth).unwrap()
    };
    let mut tape = Tape::new();
    let mut reg = ParamRegistry::new();
    let bound = model.bind(&mut tape, &mut reg).unwrap();
    let out = model
        .forward(&mut tape, &bound, &sample, &mut RunMode::Eval, &BnMode::Frozen)
        .unwrap();
    let loss_var = ssi_loss_op(&mut tape, out.depth, &sample.depth).unwrap();
    let grads = tape.backward(loss_var);
    // B factors carry gradient from step one; A factors only once B moves
    let probes = [
        ("proto.P", 3usize),
        ("reprog.head0.q", 7),
        ("head.block0.conv_w", 11),
        ("lora.vision.block0.wq.B", 1),
        ("reprog.fuse", 19),
    ];
    let mut worst_e2e = 0.0f64;
    let mut checked_e2e = 0usize;
    for (name, idx) in probes {
        let var = reg
            .trainable()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("missing trainable {name}"));
        let an = grads.wrt(var).map(|t| t.data()[idx]).unwrap_or(0.0);
        let h = 1e-5;
        let mut up = model.clone();
        up.param_mut(name).unwrap().data_mut()[idx] += h;
        let mut down = model.clone();
        down.param_mut(name).unwrap().data_mut()[idx] -= h;
        let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
        if an.abs().max(fd.abs()) > 1e-8 {
            checked_e2e += 1;
            worst_e2e = worst_e2e.max(rel_err(an, fd));
        }
    }
    assert!(checked_e2e >= 3, "only {checked_e2e} live end-to-end probes");
    assert!(worst_e2e < 1e-3, "end-to-end grad rel err {worst_e2e}");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 03 PASS: gradients match finite differences \
         (loss {worst_loss:.2e}, reprogram {worst_reprog:.2e}/{checked_reprog} probes, \
         head {worst_head:.2e}/{checked_head}, end-to-end {worst_e2e:.2e}/{checked_e2e}) \
         ({elapsed:?})"
    );
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect(),
    )
}

#[test]
fn criterion_04_lora_equivalence_and_freezing() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // adapter forward vs merged forward on 50 random inputs
    let w = rand_tensor(&mut rng, &[6, 6]);
    let mut adapter = lora::init_adapter("t", 6, 6, 3, 6.0, 9).unwrap();
    adapter.b = rand_tensor(&mut rng, &[3, 6]);
    let effective = adapter.effective_weight(&w).unwrap();
    let merged = adapter.merge(&w).unwrap();
    for _ in 0..50 {
        let x = rand_tensor(&mut rng, &[2, 6]);
        let ya = tensor::matmul(&x, &effective);
        let ym = tensor::matmul(&x, &merged);
        assert!(ya.max_abs_diff(&ym) < 1e-6);
    }
    // fresh adapter leaves the weight untouched, exactly
    let fresh = lora::init_adapter("t", 6, 6, 3, 6.0, 10).unwrap();
    assert_eq!(fresh.effective_weight(&w).unwrap(), w);

    // backbone tensors bit-identical through a 50-step run
    let mut model = DepthModel::new(tiny_model_config(), 42).unwrap();
    let pool: Vec<_> = (0..2)
        .map(|i| generate_synthetic_scene(60 + i, 32, "bedroom"))
        .collect();
    let split = Split {
        train: vec![0],
        val: vec![1],
        test: vec![],
    };
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 1;
    cfg.epochs = 50;
    cfg.patience = 100;
    let before = model.frozen_backbone_bytes();
    let history = fit(&mut model, &pool, &split, &cfg, 7).unwrap();
    assert_eq!(history.rows.len(), 50, "expected 50 steps");
    assert_eq!(model.frozen_backbone_bytes(), before);
    println!("ACCEPTANCE 04 PASS: lora merge equivalence < 1e-6, fresh identity exact, frozen backbone bit-identical over 50 steps");
}

#[test]
#[allow(clippy::needless_range_loop)] // the oracle is spelled out index by index
fn criterion_05_reprogramming_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    // attention rows sum to one
    let w = ReprogrammingWeights::init(8, 8, 2, 1).unwrap();
    let mut tape = Tape::no_grad();
    let mut reg = ParamRegistry::new();
    let vars = w.bind(&mut tape, &mut reg, false);
    let xp = tape.leaf(rand_tensor(&mut rng, &[5, 8]));
    let ep = tape.leaf(rand_tensor(&mut rng, &[4, 8]));
    let detail = reprogramming::reprogram_detailed(&mut tape, xp, ep, &vars).unwrap();
    for attn in &detail.attention {
        let a = tape.value(*attn);
        for i in 0..a.rows() {
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            assert!(a.row(i).iter().all(|p| *p >= 0.0));
        }
    }

    // single-prototype collapse, exact
    let w1 = ReprogrammingWeights::init(4, 4, 1, 2).unwrap();
    let mut tape = Tape::no_grad();
    let mut reg = ParamRegistry::new();
    let vars1 = w1.bind(&mut tape, &mut reg, false);
    let xp1 = tape.leaf(rand_tensor(&mut rng, &[3, 4]));
    let proto_row = rand_tensor(&mut rng, &[1, 4]);
    let ep1 = tape.leaf(proto_row.clone());
    let detail1 = reprogramming::reprogram_detailed(&mut tape, xp1, ep1, &vars1).unwrap();
    let pre = tape.value(detail1.pre_projection).clone();
    let value_row = tensor::matmul(&proto_row, &w1.heads[0].wv);
    for i in 0..3 {
        for j in 0..4 {
            assert_eq!(pre.at2(i, j), value_row.at2(0, j), "collapse not exact");
        }
    }

    // N=2, V'=3, d_m=D=4, K=1 against the scalar-loop oracle
    let w2 = ReprogrammingWeights::init(4, 4, 1, 3).unwrap();
    let xp2 = rand_tensor(&mut rng, &[2, 4]);
    let ep2 = rand_tensor(&mut rng, &[3, 4]);
    let mut tape = Tape::no_grad();
    let mut reg = ParamRegistry::new();
    let vars2 = w2.bind(&mut tape, &mut reg, false);
    let xv = tape.leaf(xp2.clone());
    let ev = tape.leaf(ep2.clone());
    let got = {
        let out = reprogramming::reprogram(&mut tape, xv, ev, &vars2).unwrap();
        tape.value(out).clone()
    };
    let h = &w2.heads[0];
    for i in 0..2 {
        // oracle: scalar loops through q, k, v, softmax, mix, projection
        let mut q = [0.0f64; 4];
        for c in 0..4 {
            for t in 0..4 {
                q[c] += xp2.at2(i, t) * h.wq.at2(t, c);
            }
        }
        let mut logits = [0.0f64; 3];
        for (p, logit) in logits.iter_mut().enumerate() {
            let mut key = [0.0f64; 4];
            for c in 0..4 {
                for t in 0..4 {
                    key[c] += ep2.at2(p, t) * h.wk.at2(t, c);
                }
            }
            *logit = q.iter().zip(key.iter()).map(|(a, b)| a * b).sum::<f64>() / 2.0;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut pre = [0.0f64; 4];
        for (p, e) in exps.iter().enumerate() {
            let mut val = [0.0f64; 4];
            for c in 0..4 {
                for t in 0..4 {
                    val[c] += ep2.at2(p, t) * h.wv.at2(t, c);
                }
            }
            for c in 0..4 {
                pre[c] += e / z * val[c];
            }
        }
        for c in 0..4 {
            let mut want = 0.0;
            for t in 0..4 {
                want += pre[t] * w2.out_proj.at2(t, c);
            }
            assert!(
                (got.at2(i, c) - want).abs() < 1e-6,
                "oracle mismatch at ({i},{c})"
            );
        }
    }
    println!("ACCEPTANCE 05 PASS: attention stochastic rows, single-prototype collapse, 2x3x4 oracle < 1e-6");
}

#[test]
fn criterion_06_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..100 {
        let pred: Vec<f64> = (0..100).map(|_| uniform(&mut rng, 0.1, 9.5)).collect();
        let gt: Vec<f64> = (0..100).map(|_| uniform(&mut rng, 0.1, 9.5)).collect();
        let fast = compute_metrics(
            &DepthMap::dense(10, 10, pred.clone()).unwrap(),
            &DepthMap::dense(10, 10, gt.clone()).unwrap(),
        )
        .unwrap();
        // independent per-pixel accumulation
        let n = 100.0;
        let (mut se, mut ar, mut sr, mut sle) = (0.0, 0.0, 0.0, 0.0);
        let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            se += (g - p) * (g - p);
            ar += (g - p).abs() / g;
            sr += (g - p) * (g - p) / g;
            sle += (g.ln() - p.ln()).powi(2);
            let ratio = (g / p).max(p / g);
            if ratio < 1.25 {
                d1 += 1.0;
            }
            if ratio < 1.25 * 1.25 {
                d2 += 1.0;
            }
            if ratio < 1.25 * 1.25 * 1.25 {
                d3 += 1.0;
            }
        }
        assert!((fast.rmse - (se / n).sqrt()).abs() < 1e-9);
        assert!((fast.abs_rel - ar / n).abs() < 1e-9);
        assert!((fast.sq_rel - sr / n).abs() < 1e-9);
        assert!((fast.log_rmse - (sle / n).sqrt()).abs() < 1e-9);
        assert!((fast.delta1 - d1 / n).abs() < 1e-9);
        assert!((fast.delta2 - d2 / n).abs() < 1e-9);
        assert!((fast.delta3 - d3 / n).abs() < 1e-9);
        assert!(fast.delta1 <= fast.delta2 && fast.delta2 <= fast.delta3);
    }
    let single = compute_metrics(&map(&[1.0]), &map(&[2.0])).unwrap();
    assert!((single.rmse - 1.0).abs() < 1e-4);
    assert!((single.abs_rel - 0.5).abs() < 1e-4);
    assert!((single.sq_rel - 0.5).abs() < 1e-4);
    assert!((single.log_rmse - std::f64::consts::LN_2).abs() < 1e-4);
    assert!(single.delta1 == 0.0 && single.delta2 == 0.0 && single.delta3 == 0.0);
    println!("ACCEPTANCE 06 PASS: metrics match brute-force oracle < 1e-9; single-pixel hand values hold");
}

#[test]
fn criterion_07_end_to_end_overfit() {
    let started = Instant::now();
    // the desk configuration: widths 64, vocabulary 512, 32 prototypes,
    // two vision and two text layers
    let model_cfg = ModelConfig::desk();
    assert_eq!(model_cfg.backbone.vision_width, 64);
    assert_eq!(model_cfg.backbone.text_width, 64);
    assert_eq!(model_cfg.backbone.vocab, 512);
    assert_eq!(model_cfg.v_prime, 32);
    assert_eq!(model_cfg.backbone.vision_layers, 2);
    assert_eq!(model_cfg.backbone.text_layers, 2);

    let mut model = DepthModel::new(model_cfg, 7).unwrap();
    let pool: Vec<_> = (0..4)
        .map(|i| generate_synthetic_scene(100 + i, 64, "bedroom"))
        .collect();
    let split = Split {
        train: vec![0, 1, 2, 3],
        val: vec![0],
        test: vec![],
    };
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 4;
    cfg.epochs = 200; // one step per epoch: at most 200 steps
    cfg.patience = 400;
    let history = fit(&mut model, &pool, &split, &cfg, 11).unwrap();
    assert!(history.rows.len() <= 200);
    let initial = history.rows.first().unwrap().train_loss;
    let final_loss = history.rows.last().unwrap().train_loss;
    assert!(
        final_loss <= 0.5 * initial,
        "final {final_loss} vs initial {initial}"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 07 PASS: overfit smoke {initial:.4} -> {final_loss:.4} \
         in {} steps ({elapsed:?})",
        history.rows.len()
    );
}

#[test]
fn criterion_08_prompt_ablation_contract() {
    let tok = llm_mde_core::apg::Tokenizer::default();
    let a = generate_synthetic_scene(1, 32, "bedroom");
    let b = generate_synthetic_scene(2, 32, "kitchen");

    let none_a = llm_mde_core::apg::build_prompt_bundle(&a, "synthetic", &tok, PromptMode::None);
    assert!(none_a.token_ids.is_empty());
    let fixed_a = llm_mde_core::apg::build_prompt_bundle(&a, "synthetic", &tok, PromptMode::Fixed);
    let fixed_b = llm_mde_core::apg::build_prompt_bundle(&b, "synthetic", &tok, PromptMode::Fixed);
    assert_eq!(fixed_a.token_ids, fixed_b.token_ids);
    let apg_a = llm_mde_core::apg::build_prompt_bundle(&a, "synthetic", &tok, PromptMode::Apg);
    let apg_b = llm_mde_core::apg::build_prompt_bundle(&b, "synthetic", &tok, PromptMode::Apg);
    assert_ne!(apg_a.token_ids, apg_b.token_ids);

    // none-mode forward exposes a zero-length prompt
    let mut cfg = tiny_model_config();
    cfg.prompt_mode = PromptMode::None;
    let model = DepthModel::new(cfg, 3).unwrap();
    let mut tape = Tape::no_grad();
    let mut reg = ParamRegistry::new();
    let bound = model.bind(&mut tape, &mut reg).unwrap();
    let out = model
        .forward(&mut tape, &bound, &a, &mut RunMode::Eval, &BnMode::Frozen)
        .unwrap();
    assert_eq!(out.prompt_len, 0);

    // all three modes train without error inside the smoke budget
    let pool: Vec<_> = (0..4)
        .map(|i| generate_synthetic_scene(200 + i, 32, "bedroom"))
        .collect();
    let split = Split {
        train: vec![0, 1, 2],
        val: vec![3],
        test: vec![],
    };
    for mode in [PromptMode::Apg, PromptMode::Fixed, PromptMode::None] {
        let mut cfg = tiny_model_config();
        cfg.prompt_mode = mode;
        let mut model = DepthModel::new(cfg, 4).unwrap();
        let mut tc = TrainConfig::desk();
        tc.epochs = 3;
        tc.batch_size = 3;
        fit(&mut model, &pool, &split, &tc, 5).unwrap();
    }
    println!("ACCEPTANCE 08 PASS: prompt modes obey the structural contract and all train");
}

#[test]
fn criterion_09_protocol_shapes() {
    // staged few-shot: five runs
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(ExperimentKind::FewShot, dir.path());
    cfg.source = DataSource::Synthetic { count: 20, seed: 2 };
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), 5, "few_shot must emit 5 runs");
    let names: Vec<&str> = records.iter().map(|r| r.run.as_str()).collect();
    assert_eq!(names, ["1shot", "2shot", "3shot", "4shot", "few_shot"]);

    // zero-shot: one report per held-out scene, four scenes
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(ExperimentKind::ZeroShot, dir.path());
    cfg.source = DataSource::Synthetic { count: 20, seed: 2 };
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), 4, "zero_shot must emit 4 per-scene reports");
    let mut scenes: Vec<String> = records.iter().filter_map(|r| r.scene.clone()).collect();
    scenes.sort();
    assert_eq!(scenes, ["bathroom", "diningroom", "kitchen", "livingroom"]);

    // hyperparameter grid: eight runs carrying the published values
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(ExperimentKind::HparamGrid, dir.path());
    cfg.source = DataSource::Synthetic { count: 20, seed: 2 };
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), 8, "hparam_grid must emit 8 runs");
    for (i, r) in records.iter().enumerate() {
        let (alpha, rank_v, rank_t, batch, lr) = HPARAM_GRID[i];
        assert_eq!(r.config["alpha_vit"], format!("{alpha}"));
        assert_eq!(r.config["rank_vit"], rank_v.to_string());
        assert_eq!(r.config["rank_llm"], rank_t.to_string());
        assert_eq!(r.config["batch_size_printed"], batch.to_string());
        assert_eq!(r.config["lr_printed"], format!("{lr:e}"));
    }
    println!("ACCEPTANCE 09 PASS: protocol shapes 5/4/8 with published grid values in metadata");
}

#[test]
fn criterion_10_schedule_and_stopping() {
    let (lr0, lr_min) = (1e-2, 1e-4);
    assert_eq!(cosine_lr(0, 1000, lr0, lr_min), lr0);
    assert_eq!(cosine_lr(1000, 1000, lr0, lr_min), lr_min);
    let mid = cosine_lr(500, 1000, lr0, lr_min);
    assert!((mid - (lr0 + lr_min) / 2.0).abs() < 1e-12);

    let mut stopper = EarlyStopper::new(5);
    assert_eq!(stopper.step(1.0), StopDecision::Continue);
    for strike in 1..5 {
        assert_eq!(
            stopper.step(1.0),
            StopDecision::Continue,
            "stopped early at strike {strike}"
        );
    }
    assert_eq!(stopper.step(1.0), StopDecision::Stop);
    println!("ACCEPTANCE 10 PASS: cosine endpoints exact, midpoint < 1e-12, stop on 5th non-improving epoch");
}

#[test]
fn criterion_11_determinism() {
    let run = |dir: &std::path::Path| {
        let mut cfg = tiny_experiment(ExperimentKind::AblationPrompts, dir);
        cfg.seed = 7;
        run_experiment(&cfg).unwrap();
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run(d1.path());
    run(d2.path());
    let mut compared = 0;
    for name in [
        "metrics_prompts_apg.json",
        "metrics_prompts_fixed.json",
        "metrics_prompts_none.json",
        "summary.csv",
    ] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        compared += 1;
    }
    for run_name in ["prompts_apg", "prompts_fixed", "prompts_none"] {
        for i in 0..2 {
            let rel = format!("{run_name}/depth_{i}.png");
            let a = std::fs::read(d1.path().join(&rel)).unwrap();
            let b = std::fs::read(d2.path().join(&rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical runs");
            compared += 1;
        }
    }
    println!("ACCEPTANCE 11 PASS: {compared} artifacts byte-identical across identical config+seed");
}
