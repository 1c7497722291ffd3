use candle_core::{Device, Tensor};
use proptest::prelude::*;

use csinet::cdad::make_dilation_spec;
use csinet::config::{Config, ModelConfig, TrainConfig, KEYS};
use csinet::cvwin::{merge_windows, partition_windows, WindowGrid};
use csinet::data::Mask;
use csinet::metrics::{emit_report, iou, miou, oiou, precision_at};
use csinet::nn::{assemble_grid, patchify, regroup, softmax_last, split_grid, to_f64_vec};
use csinet::train::poly_lr;

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_and_patch_round_trips(b in 1usize..3, n in 1usize..4, h in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let side = n * h;
        let len = b * side * side * c;
        let v: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let x = tensor(&v, &[b, side, side, c]);
        let g = assemble_grid(&split_grid(&x, n).unwrap(), n).unwrap();
        prop_assert_eq!(to_f64_vec(&g).unwrap(), v.clone());
        let p = regroup(&patchify(&x, n).unwrap(), n).unwrap();
        prop_assert_eq!(to_f64_vec(&p).unwrap(), v);
    }

    #[test]
    fn window_merge_inverts_partition(n_win in 1usize..4, window in 1usize..4, c in 1usize..3, v in values(2 * 9 * 9 * 2)) {
        let side = n_win * window;
        let len = 2 * side * side * c;
        let x = tensor(&v[..len], &[2, side, side, c]);
        let w = partition_windows(&x, n_win, window).unwrap();
        prop_assert_eq!(w.dims(), &[2 * n_win * n_win, window * window, c]);
        let back = merge_windows(&w, n_win, window).unwrap();
        prop_assert_eq!(to_f64_vec(&back).unwrap(), v[..len].to_vec());
    }

    #[test]
    fn window_grids_pair_up(h in 1usize..40, s in 1usize..8, n in 1usize..4) {
        let g = WindowGrid::new(h, s, n);
        prop_assert_eq!(g.n_win, h.div_ceil(s));
        prop_assert_eq!(g.remote_side, g.n_win * s);
        prop_assert_eq!(g.close_side, n * g.remote_side);
        prop_assert_eq!(g.close_window * g.close_window, n * n * g.remote_window * g.remote_window);
    }

    #[test]
    fn dilation_offsets_follow_the_halving_rule(h4 in 1usize..200, s in 1usize..9, j in 1usize..5) {
        let d = make_dilation_spec(h4, s, j);
        prop_assert!(d.h_adjust >= h4 && d.h_adjust < h4 + s && d.h_adjust % s == 0);
        prop_assert_eq!(d.offsets.len(), j);
        for (i, &o) in d.offsets.iter().enumerate() {
            prop_assert_eq!(o, d.h_adjust >> (j - i));
        }
        prop_assert!(d.offsets.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(d.bank_width(), (2 * j + 1) * s);
        prop_assert_eq!(d.shifts().len(), 2 * j + 1);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, v in values(35)) {
        let x = tensor(&v[..rows * cols], &[rows, cols]);
        let y = to_f64_vec(&softmax_last(&x).unwrap()).unwrap();
        for r in y.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn metric_bounds_and_symmetry(pairs in prop::collection::vec(prop::collection::vec((any::<bool>(), any::<bool>()), 1..40), 1..8)) {
        let mut recs = Vec::new();
        for (i, px) in pairs.iter().enumerate() {
            let p = Mask::from_vec(1, px.len(), 1, px.iter().map(|x| u8::from(x.0)).collect()).unwrap();
            let g = Mask::from_vec(1, px.len(), 1, px.iter().map(|x| u8::from(x.1)).collect()).unwrap();
            let a = iou(&i.to_string(), &p, &g).unwrap();
            let b = iou(&i.to_string(), &g, &p).unwrap();
            prop_assert_eq!(a.iou, b.iou);
            prop_assert!(a.intersection <= a.union);
            prop_assert!((0.0..=1.0).contains(&a.iou));
            let self_iou = iou("s", &g, &g).unwrap();
            prop_assert_eq!(self_iou.iou, 1.0);
            recs.push(a);
        }
        let m = miou(&recs).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((0.0..=1.0).contains(&oiou(&recs).unwrap()));
        let pr: Vec<f64> = [0.5, 0.6, 0.7, 0.8, 0.9].iter().map(|&x| precision_at(&recs, x).unwrap()).collect();
        prop_assert!(pr.windows(2).all(|w| w[0] >= w[1]));
        let rep = emit_report(&recs, &[]).unwrap();
        prop_assert_eq!(rep.overall.miou, m);
    }

    #[test]
    fn poly_schedule_is_monotone(lr in 1e-6f64..1.0, total in 1usize..500, t in 0usize..500) {
        let t = t % (total + 1);
        let a = poly_lr(lr, t, total, 0.9);
        prop_assert!(a >= 0.0 && a <= lr);
        if t < total {
            prop_assert!(poly_lr(lr, t + 1, total, 0.9) <= a);
        }
    }

    #[test]
    fn config_text_round_trips(side in 1usize..5, n in 1usize..4, lr in 1e-6f64..1e-1, steps in prop::option::of(1usize..1000), raw in any::<bool>()) {
        let cfg = Config {
            model: ModelConfig { input_side: 32 * side, n_view: n, raw_qkv: raw, ..ModelConfig::small() },
            train: TrainConfig { lr, steps, ..TrainConfig::default() },
        };
        let mut back = Config::default();
        back.apply_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected(key in "[a-z_]{1,12}") {
        let mut cfg = Config::default();
        if !KEYS.contains(&key.as_str()) {
            prop_assert!(cfg.set(&key, "1").is_err());
        }
    }
}
