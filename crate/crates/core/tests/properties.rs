use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use topdown_slots::autodiff::{Graph, ParamStore, Tensor};
use topdown_slots::config::{Ablation, TrainConfig};
use topdown_slots::data::{generate_indexed, SceneSpec, Split, World};
use topdown_slots::decoder::{masks_from_maps, Decoder, DecoderConfig};
use topdown_slots::metrics::{fg_ari, masks_from_labels, mbo, miou_hungarian, MboMode};
use topdown_slots::model::{ForwardOptions, Model};
use topdown_slots::pathway::{nearest_codes, perplexity};
use topdown_slots::slot_attention::SlotAttention;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn tiny_cfg(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        slots: 3,
        codebook_size: 6,
        slot_dim: 8,
        decoder_blocks: 1,
        decoder_heads: 2,
        ablation,
        data: SceneSpec {
            grid_h: 4,
            grid_w: 4,
            feat_dim: 6,
            min_objects: 1,
            max_objects: 2,
            ..SceneSpec::default()
        },
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(x in matrix(4, 5), axis in 0usize..2) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, axis).unwrap();
        let t = g.value(s);
        if axis == 1 {
            for r in 0..4 {
                prop_assert!((t.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        } else {
            for c in 0..5 {
                prop_assert!(((0..4).map(|r| t.get(r, c)).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_replay_is_deterministic(x in matrix(3, 4), w in matrix(4, 2)) {
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let h = g.matmul(xv, wv).unwrap();
            let h = g.tanh(h);
            let l = g.mean_all(h);
            g.backward(l).unwrap();
            (g.grad(xv), g.grad(wv))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn constants_receive_no_gradient(x in matrix(3, 3)) {
        let mut g = Graph::new();
        let c = g.constant(x.clone());
        let l = g.leaf(x);
        let p = g.mul(c, l).unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        prop_assert!(g.grad(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ste_forward_is_code_and_backward_is_identity(s in matrix(3, 4), codes in matrix(5, 4), up in matrix(3, 4)) {
        let idx = nearest_codes(&s, codes.data(), 4).unwrap();
        let selected: Vec<f64> = idx.iter().flat_map(|&i| codes.row_slice(i).to_vec()).collect();
        let code = Tensor::matrix(3, 4, selected).unwrap();
        let mut g = Graph::new();
        let sv = g.leaf(s.clone());
        let q = g.straight_through(sv, &code, &s).unwrap();
        prop_assert_eq!(g.value(q), &code);
        let w = g.constant(up.clone());
        let prod = g.mul(q, w).unwrap();
        let l = g.sum_all(prod);
        g.backward(l).unwrap();
        prop_assert_eq!(g.grad(sv), up);
    }

    #[test]
    fn quantisation_is_idempotent(s in matrix(4, 3), codes in matrix(6, 3)) {
        let idx = nearest_codes(&s, codes.data(), 3).unwrap();
        let sel: Vec<f64> = idx.iter().flat_map(|&i| codes.row_slice(i).to_vec()).collect();
        let again = nearest_codes(&Tensor::matrix(4, 3, sel).unwrap(), codes.data(), 3).unwrap();
        for (a, b) in idx.iter().zip(&again) {
            // Duplicate code rows may resolve to a lower index with the same value.
            prop_assert_eq!(codes.row_slice(*a), codes.row_slice(*b));
        }
    }

    #[test]
    fn perplexity_within_one_and_e(counts in prop::collection::vec(0u64..50, 2..20)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let p = perplexity(&counts).unwrap();
        prop_assert!(p >= 1.0 - 1e-12 && p <= counts.len() as f64 + 1e-9);
    }

    #[test]
    fn slot_order_equivariance(seed in 0u64..1000, perm_kind in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sa = SlotAttention::new(&mut store, 5, 6, 7, 1.0, &mut rng);
        let x = Tensor::matrix(7, 5, (0..35).map(|i| ((i * 13 % 17) as f64) / 8.0 - 1.0).collect()).unwrap();
        let noise = sa.sample_noise(3, &mut rng).unwrap();
        let perms = [[1, 2, 0], [2, 1, 0], [0, 2, 1]];
        let perm = perms[perm_kind];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| noise.row_slice(r).to_vec()).collect();
        let run = |n: Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.constant(x.clone());
            let input = sa.prepare_input(&mut g, &p, xv).unwrap();
            let init = sa.init_slots_with_noise(&mut g, &p, n).unwrap();
            let (s, a) = sa.run_bottom_up(&mut g, &p, &input, &init, 3).unwrap();
            (g.value(s.slots).clone(), g.value(a.attn).clone())
        };
        let (s0, a0) = run(noise.clone());
        let (s1, a1) = run(Tensor::matrix(3, 6, permuted).unwrap());
        for (new_row, &old_row) in perm.iter().enumerate() {
            for (a, b) in s1.row_slice(new_row).iter().zip(s0.row_slice(old_row)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in a1.row_slice(new_row).iter().zip(a0.row_slice(old_row)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn decoder_is_causal(seed in 0u64..500, j in 0usize..6) {
        let cfg = DecoderConfig { width: 4, slot_dim: 3, positions: 6, blocks: 2, heads: 2, ffn_mult: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, cfg, &mut rng).unwrap();
        let x = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let slots = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.8, 0.3, 0.2, -0.9]).unwrap();
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.constant(x);
            let sv = g.constant(slots.clone());
            let out = dec.decode(&mut g, &p, xv, sv).unwrap();
            g.value(out.recon).clone()
        };
        let base = run(x.clone());
        let mut y = x.clone();
        y.data_mut()[j * 4] += 5.0;
        let moved = run(y);
        for i in 0..=j {
            prop_assert_eq!(base.row_slice(i), moved.row_slice(i));
        }
    }

    #[test]
    fn soft_masks_sum_to_one(maps in prop::collection::vec(matrix(5, 3), 1..5)) {
        let normalised: Vec<Tensor> = maps
            .iter()
            .map(|m| {
                let mut g = Graph::new();
                let v = g.constant(m.clone());
                let s = g.softmax(v, 1).unwrap();
                g.value(s).clone()
            })
            .collect();
        let refs: Vec<&Tensor> = normalised.iter().collect();
        let (soft, labels) = masks_from_maps(&refs).unwrap();
        for pos in 0..5 {
            let col: f64 = (0..3).map(|k| soft.get(k, pos)).sum();
            prop_assert!((col - 1.0).abs() < 1e-6);
            prop_assert!(labels[pos] < 3);
        }
    }

    #[test]
    fn metrics_invariant_to_relabelling(
        gt in prop::collection::vec(0usize..4, 6..20),
        pred in prop::collection::vec(0usize..4, 20),
        shift in 1usize..4,
    ) {
        let n = gt.len();
        let pred = &pred[..n];
        let fg: Vec<bool> = gt.iter().map(|&l| l > 0).collect();
        prop_assume!(fg.iter().any(|&b| b));
        let relabelled: Vec<usize> = pred.iter().map(|&l| (l + shift) % 4).collect();
        let a = fg_ari(&gt, pred, &fg).unwrap();
        let b = fg_ari(&gt, &relabelled, &fg).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
        let gm = masks_from_labels(&gt, 4);
        let (pm, rm) = (masks_from_labels(pred, 4), masks_from_labels(&relabelled, 4));
        for mode in [MboMode::PerGt, MboMode::PerPred] {
            let (x, y) = (mbo(&gm[1..], &pm, mode), mbo(&gm[1..], &rm, mode));
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
        let (x, y) = (miou_hungarian(&gm, &pm), miou_hungarian(&gm, &rm));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn ari_is_one_iff_foreground_partitions_agree(gt in prop::collection::vec(1usize..4, 4..12)) {
        let fg = vec![true; gt.len()];
        prop_assert_eq!(fg_ari(&gt, &gt, &fg).unwrap(), 1.0);
        let mut other = gt.clone();
        other[0] = 9;
        if gt.iter().skip(1).any(|&l| l == gt[0]) {
            prop_assert!(fg_ari(&gt, &other, &fg).unwrap() < 1.0);
        }
    }

    #[test]
    fn scenes_are_self_consistent(index in 0u64..10_000, modes in 1usize..4) {
        let spec = SceneSpec { modes, ..SceneSpec::default() };
        let s = generate_indexed(&spec, &World::new(&spec), Split::Train, index).unwrap();
        let mut cover = vec![0usize; s.positions()];
        for m in &s.gt_masks {
            prop_assert!(m.iter().filter(|&&b| b).count() >= 4);
            for (c, &b) in cover.iter_mut().zip(m) {
                *c += b as usize;
            }
        }
        prop_assert!(cover.iter().all(|&c| c <= 1));
        for (pos, &l) in s.gt_labels.iter().enumerate() {
            prop_assert_eq!(l == 0, cover[pos] == 0);
            if l > 0 {
                prop_assert!(s.gt_masks[l - 1][pos]);
            }
        }
        prop_assert!((2..=4).contains(&s.num_objects()));
    }

    #[test]
    fn modulation_maps_are_rank_one_and_mean_one(seed in 0u64..200) {
        let cfg = tiny_cfg(Ablation::FULL);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(&cfg, &mut rng).unwrap();
        let x = Tensor::matrix(16, 6, (0..96).map(|i| ((i * 5 + seed as usize) % 9) as f64 / 4.0 - 1.0).collect()).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let noise = model.sample_noise(&mut rng).unwrap();
        let out = model.forward(&mut g, &p, &x, noise, &ForwardOptions::default()).unwrap();
        let ms = g.value(out.modulation.spatial).clone();
        let mc = g.value(out.modulation.channel).clone();
        for k in 0..cfg.slots {
            let mean = ms.row_slice(k).iter().sum::<f64>() / 16.0;
            prop_assert!((mean - 1.0).abs() < 1e-10);
            let m = g.value(out.modulation.maps[k]);
            for n in 0..16 {
                for d in 0..cfg.slot_dim {
                    prop_assert_eq!(m.get(n, d), ms.get(k, n) * mc.get(k, d));
                }
            }
        }
        let q = out.quantized.as_ref().unwrap();
        let codes = &model.store.get(model.codebook.codes).tensor;
        for (k, &i) in q.indices.iter().enumerate() {
            prop_assert_eq!(g.value(q.codes).row_slice(k), codes.row_slice(i));
        }
    }
}
