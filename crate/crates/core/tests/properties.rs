use mixformer::autodiff::softmax;
use mixformer::complexity::{op_flops, ComplexityQuery, OpKind};
use mixformer::io::{decode, encode};
use mixformer::window::{window_partition, window_reverse, WindowLayout};
use mixformer::{model_report, Model, ModelConfig, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as u64 * 2654435761 + seed * 97) % 1009) as f64 / 504.5 - 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_round_trip(h in 1usize..20, w in 1usize..20, k in 1usize..9, shifted: bool, c in 1usize..4, seed: u64) {
        let shift = if shifted { k / 2 } else { 0 };
        let x = tensor(vec![2, c, h, w], seed % 1000);
        let (windows, layout, mask) = window_partition(&x, k, shift).unwrap();
        prop_assert_eq!(windows.shape()[0], 2 * layout.num_windows());
        prop_assert_eq!(mask.shape(), &[layout.num_windows(), k * k, k * k][..]);
        let back = window_reverse(&windows, &layout).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn window_slots_are_a_bijection(h in 1usize..25, w in 1usize..25, k in 1usize..10, shifted: bool) {
        let shift = if shifted { k / 2 } else { 0 };
        let layout = WindowLayout::new(h, w, k, shift).unwrap();
        let mut seen = vec![false; h * w];
        let mut padding = 0;
        for win in 0..layout.num_windows() {
            for slot in 0..layout.tokens_per_window() {
                match layout.source(win, slot) {
                    Some(p) => {
                        prop_assert!(!seen[p]);
                        seen[p] = true;
                    }
                    None => padding += 1,
                }
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(padding, layout.padded_height * layout.padded_width - h * w);
        for y in 0..h {
            for x in 0..w {
                let (win, slot) = layout.slot_of(y, x);
                prop_assert_eq!(layout.source(win, slot), Some(y * w + x));
            }
        }
    }

    #[test]
    fn flop_scaling(n in 1u64..5, c in 1u64..128, h in 1u64..64, w in 1u64..64, k in 1u64..8) {
        let f = |kind, n, c, h, w| op_flops(&ComplexityQuery::new(kind, n, c, h, w, k)).unwrap();
        for kind in [OpKind::Attention, OpKind::WAttention, OpKind::Conv, OpKind::DwConv] {
            prop_assert_eq!(f(kind, 2 * n, c, h, w), 2 * f(kind, n, c, h, w));
        }
        prop_assert_eq!(f(OpKind::Attention, n, c, 2 * h, w), 4 * f(OpKind::Attention, n, c, h, w));
        prop_assert_eq!(f(OpKind::WAttention, n, c, 2 * h, w), 2 * f(OpKind::WAttention, n, c, h, w));
        prop_assert_eq!(f(OpKind::Conv, n, 2 * c, h, w), 4 * f(OpKind::Conv, n, c, h, w));
        prop_assert_eq!(f(OpKind::DwConv, n, 2 * c, h, w), 2 * f(OpKind::DwConv, n, c, h, w));
        // Windowed attention is never dearer than global once K² ≤ HW.
        if k * k <= h * w {
            prop_assert!(f(OpKind::WAttention, n, c, h, w) <= f(OpKind::Attention, n, c, h, w));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed: u64) {
        let x = tensor(vec![rows, cols], seed % 1000).scale(20.0);
        let y = softmax(&x);
        let shifted = softmax(&x.map(|v| v + shift));
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(y.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn weight_file_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed: u64) {
        let t = tensor(dims.clone(), seed % 1000);
        let u = tensor(vec![3], seed % 7);
        let bytes = encode([("a.weight", &t), ("b", &u)]).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert_eq!(&back[0].0, "a.weight");
        prop_assert_eq!(back[0].1.shape(), &dims[..]);
        let rounded = t.to_f32_precision();
        prop_assert_eq!(back[0].1.data(), rounded.data());
        prop_assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn report_is_consistent_and_matches_built_model(size in 32u64..120, base in 1usize..4, successive: bool) {
        let mut cfg = ModelConfig::micro();
        cfg.base_channels = 8 * base;
        if successive {
            cfg.block.mode = mixformer::block::BlockMode::Successive;
        }
        let report = model_report(&cfg, 1, size, size).unwrap();
        prop_assert!(report.root.is_consistent());
        prop_assert_eq!(report.total_params, report.root.params);
        prop_assert_eq!(report.total_flops, report.root.flops);
        let model = Model::build(cfg, 0).unwrap();
        prop_assert_eq!(report.total_params, model.num_params() as u64);
    }
}
