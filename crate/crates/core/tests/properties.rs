use madd_core::attention::AttentionMaps;
use madd_core::backbone::{Backbone, StageSpec, TinyBackbone};
use madd_core::losses::{ril_loss, update_centers, FeatureCenters, LossConfig};
use madd_core::metrics::{attention_overlap_metrics, auc};
use madd_core::pooling::bap;
use madd_core::texture::{local_average_pool, texture_residual};
use madd_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
}

/// `(p, features)` with spatial sizes that are multiples of `p`.
fn patched_features() -> impl Strategy<Value = (usize, Tensor)> {
    (1usize..5, 1usize..4, 1usize..4, 1usize..3).prop_flat_map(|(p, hp, wp, c)| {
        (Just(p), tensor(vec![2, c, hp * p, wp * p], -100.0, 100.0))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backbone_returns_declared_stage_shapes(
        steps in prop::collection::vec(0u32..2, 1..5),
        channels in prop::collection::vec(1usize..5, 4),
        h in 3usize..20,
        w in 3usize..20,
        seed in any::<u64>(),
    ) {
        let mut f = 1;
        let names: Vec<String> = (0..steps.len()).map(|i| format!("t{i}")).collect();
        let triples: Vec<(&str, usize, usize)> = steps
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                f <<= s;
                (names[i].as_str(), channels[i], f)
            })
            .collect();
        let spec = StageSpec::from_triples(&triples).unwrap();
        let net = TinyBackbone::new(spec.clone(), (h, w), true, seed).unwrap();
        let taps: Vec<&str> = names.iter().map(String::as_str).collect();
        let x = Tensor::from_fn(&[2, 3, h, w], |i| (i % 7) as f64 / 7.0);
        let (feats, _) = net.forward_stages(&x, &taps).unwrap();
        prop_assert_eq!(feats.len(), taps.len());
        for &(name, c, ds) in &triples {
            let got = feats.get(name).unwrap().shape().to_vec();
            prop_assert_eq!(got, vec![2, c, h.div_ceil(ds), w.div_ceil(ds)]);
        }
    }
}

proptest! {
    #[test]
    fn residual_patches_have_zero_mean((p, f) in patched_features()) {
        let pooled = local_average_pool(&f, p).unwrap();
        let t = texture_residual(&f, &pooled.up).unwrap();
        let back = local_average_pool(&t, p).unwrap();
        prop_assert!(back.down.data().iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn residual_ignores_per_patch_constants((p, f) in patched_features(), offsets in prop::collection::vec(-50.0f64..50.0, 64)) {
        let (_, _, h, w) = f.dims4().unwrap();
        let wp = w / p;
        let mut shifted = f.clone();
        for (plane_i, plane) in shifted.data_mut().chunks_mut(h * w).enumerate() {
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] += offsets[(plane_i * 7 + (y / p) * wp + x / p) % offsets.len()];
                }
            }
        }
        let t = texture_residual(&f, &local_average_pool(&f, p).unwrap().up).unwrap();
        let ts = texture_residual(&shifted, &local_average_pool(&shifted, p).unwrap().up).unwrap();
        prop_assert!(t.max_abs_diff(&ts).unwrap() < 1e-12);
    }

    #[test]
    fn bap_ignores_attention_intensity(
        a in tensor(vec![2, 3, 4, 5], 0.0, 1.0),
        x in tensor(vec![2, 6, 4, 5], -1.0, 1.0),
        lambda in 0.01f64..100.0,
    ) {
        let (base, _) = bap(&a, &x).unwrap();
        let (scaled, _) = bap(&a.scale(lambda), &x).unwrap();
        prop_assert!(base.max_abs_diff(&scaled).unwrap() < 1e-12);
    }

    #[test]
    fn ril_is_nonnegative(
        v in tensor(vec![3, 2, 4], -1.0, 1.0),
        c in tensor(vec![2, 4], -1.0, 1.0),
        labels in prop::collection::vec(0u8..2, 3),
    ) {
        let out = ril_loss(&v, &c, &labels, &LossConfig::default()).unwrap();
        prop_assert!(out.intra >= 0.0 && out.inter >= 0.0 && out.loss >= 0.0);
    }

    #[test]
    fn center_update_contracts_toward_batch_mean(
        v in tensor(vec![4, 2, 3], -1.0, 1.0),
        c in tensor(vec![2, 3], -1.0, 1.0),
        alpha in 0.0f64..=1.0,
    ) {
        let mut centers = FeatureCenters::new(2, 3, alpha, 1.0).unwrap();
        centers.centers = c.clone();
        let next = update_centers(&centers, &v).unwrap();
        for j in 0..6 {
            let mean = (0..4).map(|i| v.outer(i)[j]).sum::<f64>() / 4.0;
            let before = (c.data()[j] - mean).abs();
            let after = (next.centers.data()[j] - mean).abs();
            prop_assert!(after <= (1.0 - alpha) * before + 1e-12);
        }
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        pairs in prop::collection::vec((0u8..10, 0u8..2), 2..60),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 9.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (si, yi) in scores.iter().zip(&labels) {
            for (sj, yj) in scores.iter().zip(&labels) {
                if *yi == 1 && *yj == 0 {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        let want = if den > 0.0 { Some(num / den) } else { None };
        prop_assert_eq!(auc(&scores, &labels), want);
    }

    #[test]
    fn overlap_cosine_and_mass_share_are_bounded(maps in tensor(vec![3, 4, 3, 3], 0.0, 1.0)) {
        let m = attention_overlap_metrics(&AttentionMaps::new(maps).unwrap()).unwrap();
        for (cos, share) in m.mean_cosine.iter().zip(&m.mass_share) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(cos));
            prop_assert!((share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
