use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use echocss::css::{css_loss, CssConfig, EmbeddingSequence, RegionPartition};
use echocss::data::{temporal_mirror, EpochSampler};
use echocss::evaluation::{dice, frame_similarity_matrix, mae, r_squared, top_fraction_mask};
use echocss::tensor::Tensor;

fn binary(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, len)
}

fn embedding() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 40 * 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in (1usize..200).prop_flat_map(|n| (binary(n), binary(n)))) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn mae_is_a_mean_distance(
        pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..50),
        shift in -50.0f64..50.0,
    ) {
        let (p, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = mae(&p, &l).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(mae(&l, &l).unwrap(), 0.0);
        prop_assert!((m - mae(&l, &p).unwrap()).abs() < 1e-12);
        let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
        let ls: Vec<f64> = l.iter().map(|v| v + shift).collect();
        prop_assert!((m - mae(&ps, &ls).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn r_squared_ignores_affine_rescaling(
        pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..40),
        scale in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        offset in -100.0f64..100.0,
    ) {
        let (p, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let spread = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - l.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let r = r_squared(&p, &l).unwrap();
        prop_assert!(r <= 1.0);
        prop_assert_eq!(r_squared(&l, &l).unwrap(), 1.0);
        let f = |v: &f64| scale * v + offset;
        let r2 = r_squared(&p.iter().map(f).collect::<Vec<_>>(), &l.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((r - r2).abs() < 1e-9 * (1.0 + r.abs()));
    }

    #[test]
    fn top_fraction_depends_only_on_rank(
        sal in prop::collection::vec(0.0f64..5.0, 16..400),
        k in 0.01f64..0.99,
    ) {
        let mask = top_fraction_mask(&sal, k).unwrap();
        let kept = mask.iter().filter(|&&v| v == 1).count();
        prop_assert!(kept >= 1 && kept as f64 >= k * sal.len() as f64 - 1e-6);
        prop_assert!((kept as f64) < k * sal.len() as f64 + 1.0);
        // strictly increasing map, so the ranking and the mask are unchanged
        let warped: Vec<f64> = sal.iter().map(|v| (2.0 * v).exp() + 3.0).collect();
        prop_assert_eq!(&mask, &top_fraction_mask(&warped, k).unwrap());
        let lowest_kept = sal.iter().zip(&mask).filter(|(_, &m)| m == 1).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let highest_dropped = sal.iter().zip(&mask).filter(|(_, &m)| m == 0).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lowest_kept >= highest_dropped);
    }

    #[test]
    fn mirror_walks_neighbouring_frames(t in 1usize..200) {
        let src: Vec<usize> = (0..t).collect();
        let out = temporal_mirror(&src).unwrap();
        prop_assert_eq!(out.len(), 2 * t - 1);
        if t >= 2 {
            prop_assert!(out.windows(2).all(|w| w[0].abs_diff(w[1]) == 1));
            for v in &src {
                prop_assert!(out.contains(v));
            }
        }
    }

    #[test]
    fn similarity_matrix_is_a_normalized_distance(rows in 2usize..12, dim in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = frame_similarity_matrix(&Tensor::from_vec(&[rows, dim], data)).unwrap();
        let v = m.data();
        for a in 0..rows {
            prop_assert_eq!(v[a * rows + a], 0.0);
            for b in 0..rows {
                prop_assert_eq!(v[a * rows + b], v[b * rows + a]);
                prop_assert!((0.0..=1.0).contains(&v[a * rows + b]));
            }
        }
        prop_assert!(v.contains(&1.0));
    }

    #[test]
    fn css_loss_ignores_a_common_translation(
        values in embedding(),
        shift in prop::collection::vec(-5.0f64..5.0, 4),
        pstar in 0usize..13,
    ) {
        let part = RegionPartition::default();
        let cfg = CssConfig::default();
        let seq = EmbeddingSequence::new(values.clone(), 40, 4).unwrap();
        let moved: Vec<f64> = values.iter().enumerate().map(|(i, v)| v + shift[i % 4]).collect();
        let moved = EmbeddingSequence::new(moved, 40, 4).unwrap();
        let a = css_loss(&[seq], &part, &cfg, &[pstar]).unwrap();
        let b = css_loss(&[moved], &part, &cfg, &[pstar]).unwrap();
        prop_assert!(a.loss >= 0.0 && a.loss.is_finite());
        prop_assert!((a.loss - b.loss).abs() < 1e-9 * (1.0 + a.loss));
        // translation invariance means the gradient sums to zero over frames
        for j in 0..4 {
            let total: f64 = a.grads[0].iter().skip(j).step_by(4).sum();
            prop_assert!(total.abs() < 1e-9);
        }
    }

    #[test]
    fn each_epoch_is_a_permutation(pool_len in 1usize..30, batch in 1usize..8, seed in any::<u64>()) {
        let pool: Vec<usize> = (100..100 + pool_len).collect();
        let mut sampler = EpochSampler::new(pool.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drawn = Vec::new();
        while drawn.len() < 3 * pool_len {
            drawn.extend(sampler.next_batch(batch, &mut rng));
        }
        for epoch in drawn.chunks(pool_len).take(3) {
            if epoch.len() == pool_len && batch <= pool_len && pool_len % batch == 0 {
                let mut sorted = epoch.to_vec();
                sorted.sort_unstable();
                prop_assert_eq!(&sorted, &pool);
            }
            prop_assert!(epoch.iter().all(|i| pool.contains(i)));
        }
    }
}
