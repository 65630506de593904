//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixformer::ablation::{interaction_grid, knob_grid, run_case, AblationCase, Interactions};
use mixformer::attention::{WindowAttention, WmsaConfig};
use mixformer::autodiff::{ParamBuilder, ParamStore, Session};
use mixformer::block::{BlockMode, MixingBlock, MixingBlockConfig};
use mixformer::checks::{block_suite, model_suite, op_suite, perturb, random_tensor, SuiteOptions};
use mixformer::complexity::{model_report, op_flops, ComplexityQuery, OpKind};
use mixformer::data::{DatasetConfig, SyntheticDataset};
use mixformer::io;
use mixformer::train::{train_toy, TrainConfig};
use mixformer::window::{window_partition, window_reverse};
use mixformer::{Model, ModelConfig, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < budget, format!("took {took:.1?}, budget {budget:?}"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1 ---------------------------------------------------------------------

fn flops_formulas() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for n in [1u64, 2] {
        for c in [4u64, 8] {
            for h in [8u64, 14] {
                for w in [8u64, 14] {
                    for k in [1u64, 3, 7] {
                        let q = |kind| op_flops(&ComplexityQuery::new(kind, n, c, h, w, k)).map_err(err);
                        let hw = h * w;
                        let expected = [
                            (OpKind::Attention, 2 * n * c * hw * hw),
                            (OpKind::WAttention, 2 * n * c * hw * k * k),
                            (OpKind::Conv, n * c * c * hw * k * k),
                            (OpKind::DwConv, n * c * hw * k * k),
                        ];
                        for (kind, value) in expected {
                            let got = q(kind)?;
                            ensure(got == value, format!("{kind} {n},{c},{h},{w},{k}: {got} != {value}"))?;
                            checked += 1;
                        }
                        let doubled = |kind| op_flops(&ComplexityQuery::new(kind, n, c, 2 * h, w, k)).map_err(err);
                        ensure(doubled(OpKind::WAttention)? == 2 * q(OpKind::WAttention)?, "w-attention not linear in HW")?;
                        ensure(doubled(OpKind::Attention)? == 4 * q(OpKind::Attention)?, "attention not quadratic in HW")?;
                    }
                }
            }
        }
    }
    within_budget(start, Duration::from_secs(1))?;
    Ok(format!("{checked} formula values exact, HW scaling ratios exact"))
}

// 2 ---------------------------------------------------------------------

fn variant_counts() -> Outcome {
    let start = Instant::now();
    let targets = [("b1", 8e6, 0.7e9), ("b2", 10e6, 0.9e9), ("b3", 17e6, 1.9e9), ("b4", 35e6, 3.6e9)];
    let mut parts = Vec::new();
    for (name, params, flops) in targets {
        let cfg = ModelConfig::variant(name).map_err(err)?;
        let r = model_report(&cfg, 1, 224, 224).map_err(err)?;
        let (p, f) = (r.total_params as f64 / params - 1.0, r.total_flops as f64 / flops - 1.0);
        ensure(p.abs() <= 0.15 && f.abs() <= 0.15, format!("{name}: params {:+.1}%, FLOPs {:+.1}%", 100.0 * p, 100.0 * f))?;
        parts.push(format!("{name} {:.2}M/{:.2}G", r.total_params as f64 / 1e6, r.total_flops as f64 / 1e9));
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok(parts.join(", "))
}

// 3 ---------------------------------------------------------------------

fn gradients() -> Outcome {
    let start = Instant::now();
    let opts = SuiteOptions::default();
    let mut reports = op_suite(&opts).map_err(err)?;
    reports.extend(block_suite(&opts).map_err(err)?);
    reports.extend(model_suite(&opts).map_err(err)?);
    if let Some(bad) = reports.iter().find(|r| !r.report.pass) {
        return Err(format!("{bad}"));
    }
    within_budget(start, Duration::from_secs(120))?;
    let worst = reports.iter().map(|r| r.report.max_error()).fold(0.0, f64::max);
    Ok(format!("{} checks, worst relative error {worst:.2e}, {:.1?}", reports.len(), start.elapsed()))
}

// 4 ---------------------------------------------------------------------

/// Dense loop over one window: qkv projection, per-head softmax attention
/// with the relative-position table, output projection.
fn dense_window_attention(x: &[f64], t_side: usize, dim: usize, heads: usize, store: &ParamStore) -> Vec<f64> {
    let get = |n: &str| store.by_name(&format!("attn.{n}")).unwrap().value.data().to_vec();
    let (wqkv, qb, vb, wp, bp, table) = (
        get("qkv.weight"),
        get("q_bias"),
        get("v_bias"),
        get("proj.weight"),
        get("proj.bias"),
        get("relative_position_bias_table"),
    );
    let t = t_side * t_side;
    let hd = dim / heads;
    let mut qkv = vec![vec![0.0; 3 * dim]; t];
    for i in 0..t {
        for o in 0..3 * dim {
            let mut acc = match o / dim {
                0 => qb[o],
                2 => vb[o - 2 * dim],
                _ => 0.0,
            };
            for c in 0..dim {
                acc += x[i * dim + c] * wqkv[c * 3 * dim + o];
            }
            qkv[i][o] = acc;
        }
    }
    let mut heads_out = vec![vec![0.0; dim]; t];
    for h in 0..heads {
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for e in 0..hd {
                    dot += qkv[i][h * hd + e] * qkv[j][dim + h * hd + e];
                }
                let dy = (i / t_side) as isize - (j / t_side) as isize + t_side as isize - 1;
                let dx = (i % t_side) as isize - (j % t_side) as isize + t_side as isize - 1;
                let row = dy as usize * (2 * t_side - 1) + dx as usize;
                *s = dot / (hd as f64).sqrt() + table[row * heads + h];
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for e in 0..hd {
                heads_out[i][h * hd + e] = (0..t).map(|j| exp[j] / z * qkv[j][2 * dim + h * hd + e]).sum();
            }
        }
    }
    let mut out = vec![0.0; t * dim];
    for i in 0..t {
        for o in 0..dim {
            out[i * dim + o] = bp[o] + (0..dim).map(|c| heads_out[i][c] * wp[c * dim + o]).sum::<f64>();
        }
    }
    out
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let k = [1, 2, 7][trial % 3];
        let heads = [1, 2, 4][(trial / 3) % 3];
        let dim = heads * rng.random_range(1..=4);
        let mut store = ParamStore::new();
        let attn = {
            let mut b = ParamBuilder::new(&mut store, trial as u64);
            WindowAttention::new(&mut b, "attn", WmsaConfig::new(dim, heads, k)).map_err(err)?
        };
        perturb(&mut store, 0.5, trial as u64);
        let x = random_tensor(&[1, k * k, dim], &mut rng);
        let expected = dense_window_attention(x.data(), k, dim, heads, &store);
        let mut s = Session::inference(&mut store, false);
        let xv = s.input(x);
        let y = attn.forward_windows(&mut s, xv, None, None).map_err(err)?;
        for (a, b) in s.value(y).data().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-10, format!("max abs error {worst:e}"))?;
    Ok(format!("100 trials, max abs error {worst:.1e}"))
}

// 5 ---------------------------------------------------------------------

fn window_round_trip() -> Outcome {
    let mut cases = 0;
    for h in 1..=21 {
        for w in 1..=21 {
            for shift in [0, 3] {
                let (n, c) = (2, 3);
                let x = Tensor::from_fn(vec![n, c, h, w], |i| i as f64 + 1.0).map_err(err)?;
                let (win, layout, _) = window_partition(&x, 7, shift).map_err(err)?;
                let back = window_reverse(&win, &layout).map_err(err)?;
                ensure(back.data() == x.data(), format!("round trip failed at {h}x{w}, shift {shift}"))?;
                // Every input value appears exactly once; the rest is padding.
                let mut values: Vec<f64> = win.data().iter().copied().filter(|&v| v != 0.0).collect();
                values.sort_by(f64::total_cmp);
                let expected: Vec<f64> = (1..=x.numel()).map(|v| v as f64).collect();
                ensure(values == expected, format!("not a permutation at {h}x{w}, shift {shift}"))?;
                let pad = n * c * (layout.padded_height * layout.padded_width - h * w);
                ensure(win.numel() - x.numel() == pad, format!("padding count wrong at {h}x{w}"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} maps round-trip, ramp values permuted exactly"))
}

// 6 ---------------------------------------------------------------------

/// Largest |∂y_p/∂x_q| over channels, for output position `p` and input `q`.
fn cross_gradient(cfg: &MixingBlockConfig, seed: u64, p: (usize, usize), qs: &[(usize, usize)]) -> Result<Vec<f64>, String> {
    let (h, w) = (14, 14);
    let mut store = ParamStore::new();
    let block = {
        let mut b = ParamBuilder::new(&mut store, seed);
        MixingBlock::new(&mut b, "block", cfg.clone()).map_err(err)?
    };
    perturb(&mut store, 0.3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[1, h * w, cfg.dim], &mut rng);
    let r = random_tensor(&[1, 1, cfg.dim], &mut rng);
    let mut s = Session::new(&mut store, false);
    let xv = s.input(x);
    let y = block.forward(&mut s, xv, h, w).map_err(err)?;
    let row = s.narrow(y, 1, p.0 * w + p.1, 1).map_err(err)?;
    let rv = s.constant(r);
    let prod = s.mul(row, rv).map_err(err)?;
    let root = s.sum(prod);
    let grads = s.backward(root).map_err(err)?;
    let g = grads.get(xv).ok_or("no input gradient")?;
    Ok(qs
        .iter()
        .map(|&(qy, qx)| {
            let base = (qy * w + qx) * cfg.dim;
            g.data()[base..base + cfg.dim].iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .collect())
}

fn receptive_field() -> Outcome {
    // Positions on either side of the window corner at (7, 7) for K = 7.
    let probes = [((6, 6), vec![(6, 7), (7, 6), (7, 7)]), ((7, 7), vec![(6, 6), (6, 7), (7, 6)])];
    let mut runs = 0;
    for mode in [BlockMode::Parallel, BlockMode::Successive] {
        for kernel in [1, 3, 5] {
            for shift in [false, true] {
                let cfg = MixingBlockConfig {
                    mode,
                    conv_kernel: kernel,
                    shifted_window: shift,
                    channel_interaction: false,
                    spatial_interaction: false,
                    dwconv_in_ffn: false,
                    ..MixingBlockConfig::new(8, 2)
                };
                let expect_cross = kernel >= 3 || shift;
                for seed in 0..10 {
                    for (p, qs) in &probes {
                        let grads = cross_gradient(&cfg, seed, *p, qs)?;
                        let inside = cross_gradient(&cfg, seed, *p, &[*p])?[0];
                        ensure(inside > 0.0, "zero gradient inside the window")?;
                        for (q, g) in qs.iter().zip(grads) {
                            let ok = if expect_cross { g > 0.0 } else { g == 0.0 };
                            ensure(
                                ok,
                                format!("{mode:?} K_c={kernel} shift={shift} seed {seed}: |dy{p:?}/dx{q:?}| = {g:e}"),
                            )?;
                        }
                        runs += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{runs} probes: cross-window gradient is exactly zero only for K_c=1 without shift"))
}

// 7 ---------------------------------------------------------------------

fn zero_init_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for mode in [BlockMode::Parallel, BlockMode::Successive] {
        for flags in 0..16u32 {
            let cfg = MixingBlockConfig {
                mode,
                channel_interaction: flags & 1 != 0,
                spatial_interaction: flags & 2 != 0,
                shifted_window: flags & 4 != 0,
                dwconv_in_ffn: flags & 8 != 0,
                ..MixingBlockConfig::new(16, 2)
            };
            let mut store = ParamStore::new();
            let block = {
                let mut b = ParamBuilder::new(&mut store, flags as u64);
                MixingBlock::new(&mut b, "block", cfg).map_err(err)?
            };
            store.zero_init();
            let x = random_tensor(&[2, 9 * 10, 16], &mut rng);
            let mut s = Session::inference(&mut store, false);
            let xv = s.input(x.clone());
            let y = block.forward(&mut s, xv, 9, 10).map_err(err)?;
            let same = s.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, format!("{mode:?} flags {flags:04b} is not an identity"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} block configurations return their input bit for bit"))
}

// 8 ---------------------------------------------------------------------

fn toy_training() -> Outcome {
    let start = Instant::now();
    let data = SyntheticDataset::generate(DatasetConfig::default()).map_err(err)?;
    ensure(data.len() == 64, "dataset size")?;
    let cfg = TrainConfig {
        steps: 500,
        target_accuracy: Some(0.99),
        ..TrainConfig::default()
    };
    let run = || -> Result<_, String> {
        let mut model = Model::build(ModelConfig::micro(), cfg.seed).map_err(err)?;
        train_toy(&mut model, &cfg, &data, |_| {}).map_err(err)
    };
    let first = run()?;
    let second = run()?;
    ensure(first == second, "two runs with the same seed differ")?;
    let ln4 = 4f64.ln();
    ensure(
        (first.initial_loss / ln4 - 1.0).abs() <= 0.1,
        format!("initial loss {:.4} vs ln 4 = {ln4:.4}", first.initial_loss),
    )?;
    ensure(
        first.train_accuracy >= 0.99 && first.steps_run <= 500,
        format!("accuracy {:.3} after {} steps", first.train_accuracy, first.steps_run),
    )?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!(
        "accuracy {:.3} after {} steps, initial loss {:.4}, deterministic, {:.1?}",
        first.train_accuracy,
        first.steps_run,
        first.initial_loss,
        start.elapsed()
    ))
}

// 9 ---------------------------------------------------------------------

fn ablation_grid() -> Outcome {
    let opts = SuiteOptions::default();
    let base = ModelConfig::variant("b1").map_err(err)?;
    let cases: Vec<AblationCase> = interaction_grid().into_iter().chain(knob_grid()).collect();
    for case in &cases {
        let row = run_case(case, &base, (224, 224), Some(&opts)).map_err(err)?;
        ensure(row.ok(), format!("{row}"))?;
    }
    let mut worst = 0.0f64;
    for variant in ["b0", "b1", "b2", "b3", "b4"] {
        let base = ModelConfig::variant(variant).map_err(err)?;
        for inter in Interactions::ALL {
            let params = |mode| -> Result<f64, String> {
                let case = AblationCase::interactions(mode, inter);
                let cfg = ModelConfig {
                    block: case.template,
                    ..base.clone()
                };
                Ok(model_report(&cfg, 1, 224, 224).map_err(err)?.total_params as f64)
            };
            let (par, suc) = (params(BlockMode::Parallel)?, params(BlockMode::Successive)?);
            let gap = (suc / par - 1.0).abs();
            ensure(gap <= 0.02, format!("{variant} {inter}: parallel {par} vs successive {suc}"))?;
            worst = worst.max(gap);
        }
    }
    Ok(format!(
        "{} cases build, forward and gradcheck; parallel vs successive params within {:.2}%",
        cases.len(),
        100.0 * worst
    ))
}

// 10 --------------------------------------------------------------------

fn serialization() -> Outcome {
    let dir = std::env::temp_dir().join(format!("mixformer-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(err)?;
    let first = dir.join("a.mixf");
    let second = dir.join("b.mixf");
    let model = Model::build(ModelConfig::micro(), 10).map_err(err)?;
    model.save(&first).map_err(err)?;
    let mut loaded = Model::load(&first, None).map_err(err)?;
    loaded.save(&second).map_err(err)?;
    let (a, b) = (std::fs::read(&first).map_err(err)?, std::fs::read(&second).map_err(err)?);
    ensure(a == b, "save -> load -> save changed the file")?;

    let x = random_tensor(&[2, 3, 40, 40], &mut ChaCha8Rng::seed_from_u64(10));
    let run = |m: &mut Model| -> Result<Vec<u8>, String> {
        let y = m.predict(&x).map_err(err)?;
        io::encode([("logits", &y)]).map_err(err)
    };
    let out1 = run(&mut loaded)?;
    let out2 = run(&mut loaded)?;
    let mut reloaded = Model::load(&second, None).map_err(err)?;
    let out3 = run(&mut reloaded)?;
    std::fs::remove_dir_all(&dir).ok();
    ensure(out1 == out2 && out1 == out3, "forward output bytes differ")?;
    Ok(format!("{} byte weight file round-trips, forward output identical across runs", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("complexity formulas", flops_formulas),
        ("variant parameter and FLOP counts", variant_counts),
        ("gradient checks", gradients),
        ("window attention oracle", attention_oracle),
        ("window round trip", window_round_trip),
        ("receptive field", receptive_field),
        ("zero-init identity", zero_init_identity),
        ("toy training", toy_training),
        ("ablation grid", ablation_grid),
        ("serialization", serialization),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| f == &id || name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
