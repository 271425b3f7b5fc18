mod common;

use common::tensor;
use matsei::cvnet::{complex_conv1d, ModelConfig, ModelParams, Variant};
use matsei::evalkit::{accuracy_of, confusion_of, pseudo_quality_of, silhouette};
use matsei::gradcore::{batchnorm1d, complex_maxpool1d, log_softmax, maxpool1d, softmax, BnMode, Tensor};
use matsei::losses::{
    ce_loss, center_loss, compute_pseudo_labels, kl_divergence, lds, proxy_anchor_loss, ss_ce_loss, ss_center_loss,
    ss_proxy_anchor_loss, SoftTarget,
};
use matsei::sigkit::make_profile;
use proptest::prelude::*;

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// `(rows, cols, data)`.
fn matrix(max_rows: usize, max_cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| values(r * c, lo, hi).prop_map(move |v| (r, c, v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one((r, c, v) in matrix(6, 7, -40.0, 40.0)) {
        let x = tensor(&[r, c], v);
        let s = softmax(&x).unwrap();
        let ls = log_softmax(&x).unwrap();
        for (row, lrow) in s.data().chunks(c).zip(ls.data().chunks(c)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (p, lp) in row.iter().zip(lrow) {
                // compare where ln of the probability is representable
                if *p > 1e-300 {
                    prop_assert!((p.ln() - lp).abs() <= 1e-9, "{} vs {}", p.ln(), lp);
                }
            }
        }
    }

    #[test]
    fn maxpool_routes_the_whole_gradient(
        b in 1..3usize, c in 1..4usize, l in 1..10usize, window in 1..4usize, seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        for complex in [false, true] {
            let ch = if complex { 2 * c } else { c };
            let x = Tensor::param(&[b, ch, l], common::uniform(&mut rng, b * ch * l, -1.0, 1.0)).unwrap();
            let y = if complex { complex_maxpool1d(&x, window) } else { maxpool1d(&x, window) }.unwrap();
            let w = common::uniform(&mut rng, y.numel(), -1.0, 1.0);
            y.weighted_sum(&w).unwrap().backward().unwrap();
            let routed: f64 = x.grad().unwrap().iter().sum();
            prop_assert!((routed - w.iter().sum::<f64>()).abs() <= 1e-12);
        }
    }

    #[test]
    fn batchnorm_standardizes_each_channel(
        b in 2..5usize, c in 1..4usize, l in 1..5usize, scale in 10.0..1000.0f64, seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let mut v = common::uniform(&mut rng, b * c * l, -scale, scale);
        // keep every channel's variance well above the stabilizing epsilon
        for ch in 0..c {
            v[ch * l] = scale;
            v[(c + ch) * l] = -scale;
        }
        let x = tensor(&[b, c, l], v);
        let (y, stats) = batchnorm1d(&x, &tensor(&[c], vec![1.0; c]), &tensor(&[c], vec![0.0; c]), BnMode::Train).unwrap();
        prop_assert!(stats.is_some());
        let yd = y.data();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|n| (0..l).map(move |t| (n * c + ch) * l + t)).map(|i| yd[i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-9, "mean {m}");
            prop_assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn complex_convolution_commutes_with_multiplication_by_i(
        ci in 1..3usize, co in 1..3usize, half_k in 0..3usize, l in 5..12usize, seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let k = 2 * half_k + 1;
        let b = 2;
        let x = common::uniform(&mut rng, b * 2 * ci * l, -1.0, 1.0);
        let wr = tensor(&[co, ci, k], common::uniform(&mut rng, co * ci * k, -1.0, 1.0));
        let wi = tensor(&[co, ci, k], common::uniform(&mut rng, co * ci * k, -1.0, 1.0));
        // i·(a + bi) = −b + ai
        let mut ix = x.clone();
        for n in 0..b {
            for c in 0..ci {
                for t in 0..l {
                    let re = (n * 2 * ci + c) * l + t;
                    let im = (n * 2 * ci + ci + c) * l + t;
                    ix[re] = -x[im];
                    ix[im] = x[re];
                }
            }
        }
        let y = complex_conv1d(&tensor(&[b, 2 * ci, l], x), &wr, &wi, None, half_k).unwrap();
        let iy = complex_conv1d(&tensor(&[b, 2 * ci, l], ix), &wr, &wi, None, half_k).unwrap();
        let (yd, iyd) = (y.data(), iy.data());
        for n in 0..b {
            for c in 0..co {
                for t in 0..l {
                    let re = (n * 2 * co + c) * l + t;
                    let im = (n * 2 * co + co + c) * l + t;
                    prop_assert!((iyd[re] + yd[im]).abs() <= 1e-12);
                    prop_assert!((iyd[im] - yd[re]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn losses_are_nonnegative(
        n in 1..6usize, u in 0..6usize, k in 2..5usize, d in 1..5usize, tau in 0.0..1.0f64, seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        use rand::Rng;
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ll = tensor(&[n, k], common::uniform(&mut rng, n * k, -8.0, 8.0));
        let lu = tensor(&[u, k], common::uniform(&mut rng, u * k, -8.0, 8.0));
        let zl = tensor(&[n, d], common::uniform(&mut rng, n * d, -3.0, 3.0));
        let zu = tensor(&[u, d], common::uniform(&mut rng, u * d, -3.0, 3.0));
        let c = tensor(&[k, d], common::uniform(&mut rng, k * d, -3.0, 3.0));
        let pseudo = compute_pseudo_labels(&lu, tau).unwrap();
        let target = SoftTarget::from_logits(&ll).unwrap();
        let r = tensor(&[n, k], common::uniform(&mut rng, n * k, -2.0, 2.0));
        let values = [
            ce_loss(&ll, &y).unwrap().item(),
            ss_ce_loss(&ll, &y, &lu, &pseudo).unwrap().item(),
            center_loss(&zl, &y, &c).unwrap().item(),
            ss_center_loss(&zl, &y, &zu, &pseudo, &c).unwrap().item(),
            proxy_anchor_loss(&zl, &y, &c, 32.0, 0.1).unwrap().item(),
            ss_proxy_anchor_loss(&zl, &y, &zu, &pseudo, &c, 32.0, 0.1).unwrap().item(),
            kl_divergence(&softmax(&ll).unwrap(), &softmax(&r).unwrap()).unwrap().item(),
            lds(|x: &Tensor| Ok(x.clone()), &ll, &target, &r).unwrap().item(),
            lds(|x: &Tensor| Ok(x.clone()), &ll, &target, &Tensor::zeros(&[n, k])).unwrap().item(),
        ];
        for v in values {
            prop_assert!(v >= 0.0 && v.is_finite(), "{values:?}");
        }
    }

    #[test]
    fn gating_is_monotone_in_tau((r, c, v) in matrix(12, 5, -6.0, 6.0), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        prop_assume!(c >= 2);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let x = tensor(&[r, c], v.clone());
        let a = compute_pseudo_labels(&x, lo).unwrap();
        let b = compute_pseudo_labels(&x, hi).unwrap();
        prop_assert!(b.accepted_count() <= a.accepted_count());
        for i in 0..r {
            prop_assert!(!b.accepted[i] || b.confidence[i] > hi);
            let row = &v[i * c..(i + 1) * c];
            let first_max = row.iter().position(|x| *x == row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).unwrap();
            prop_assert_eq!(a.labels[i], first_max);
        }
        let truth = vec![0; r];
        let qa = pseudo_quality_of(&v, c, &truth, lo);
        let qb = pseudo_quality_of(&v, c, &truth, hi);
        prop_assert!(qb.coverage <= qa.coverage);
    }

    #[test]
    fn silhouette_ignores_translation_and_scale(
        n in 3..12usize, d in 1..4usize, shift in -5.0..5.0f64, scale in 0.01..100.0f64, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = common::rng(seed);
        let x = common::uniform(&mut rng, n * d, -1.0, 1.0);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let moved: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let a = silhouette(&x, d, &labels).unwrap();
        let b = silhouette(&moved, d, &labels).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn accuracy_is_the_confusion_trace(
        pairs in prop::collection::vec((0..4usize, 0..4usize), 1..40),
    ) {
        let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = confusion_of(&p, &y, 4).unwrap();
        let trace: usize = (0..4).map(|i| m[i][i]).sum();
        let total: usize = m.iter().flatten().sum();
        prop_assert_eq!(total, y.len());
        for (c, row) in m.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), y.iter().filter(|&&v| v == c).count());
        }
        prop_assert_eq!(accuracy_of(&p, &y).unwrap(), trace as f64 / total as f64);
    }

    #[test]
    fn profiles_respect_their_invariants(id in 0..64usize, seed in any::<u64>(), scale in 0.0..20.0f64) {
        let p = make_profile(id, seed, scale);
        prop_assert!(p.iq_gain_imbalance > 0.0);
        prop_assert!(p.pa_coeff3 <= 0.0);
        prop_assert_eq!(p.clone(), make_profile(id, seed, scale));
        if scale > 0.0 {
            let q = make_profile(id + 1, seed, scale);
            prop_assert_ne!(p.impairment_vector(), q.impairment_vector());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn eval_mode_rows_do_not_depend_on_the_batch(blocks in 1..4usize, seed in any::<u64>(), extra in 1..4usize) {
        let n = 64;
        let cfg = ModelConfig {
            num_blocks: blocks,
            channels: 2,
            variant: Variant::Short,
            num_classes: 3,
            input_length: n,
            ..ModelConfig::default()
        };
        prop_assert_eq!(cfg.final_length(), n >> blocks);
        let mut params = ModelParams::new(cfg, seed).unwrap();
        params.bind_lazy().unwrap();
        prop_assert_eq!(params.dense_in(), Some(2 * 2 * (n >> blocks)));
        let mut rng = common::rng(seed);
        let rows = 1 + extra;
        let x = common::uniform(&mut rng, rows * 2 * n, 0.0, 1.0);
        let alone = params.eval_features(&tensor(&[1, 2, n], x[..2 * n].to_vec())).unwrap();
        let batch = params.eval_features(&tensor(&[rows, 2, n], x)).unwrap();
        let d = alone.shape()[1];
        for (a, b) in alone.data().iter().zip(&batch.data()[..d]) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn epoch_batches_respect_the_batch_size(bs in 2..12usize, t in 1..5usize, unlabeled in any::<bool>()) {
        use matsei::trainer::{make_epoch_batches, TrainConfig};
        let ds = common::tiny_dataset();
        let cfg = TrainConfig { batch_size: bs, unlabeled_enabled: unlabeled, ..Default::default() };
        let batches = make_epoch_batches(&ds, &cfg, t).unwrap();
        let mut seen_l = vec![false; ds.labeled.len()];
        let mut seen_u = vec![false; ds.unlabeled.len()];
        for b in &batches {
            prop_assert!(!b.labeled.is_empty() && b.labeled.len() <= bs);
            prop_assert!(b.unlabeled.len() <= bs);
            prop_assert_eq!(b.unlabeled.is_empty(), !unlabeled);
            b.labeled.iter().for_each(|&i| seen_l[i] = true);
            b.unlabeled.iter().for_each(|&i| seen_u[i] = true);
        }
        prop_assert!(seen_l.iter().all(|s| *s));
        prop_assert!(!unlabeled || seen_u.iter().all(|s| *s));
        prop_assert_eq!(&batches, &make_epoch_batches(&ds, &cfg, t).unwrap());
    }
}

#[test]
fn fingerprints_are_separable_by_nearest_centroid() {
    use matsei::sigkit::synthesize_sample;
    // 6 emitters, 50 records each: DC offsets and a gain estimate per record
    let stats = |id: usize, rec: u64| -> [f64; 3] {
        let p = make_profile(id, 42, 1.0);
        let s = synthesize_sample(&p, 1000 * id as u64 + rec, 20.0, 512).unwrap();
        let m = s.samples.len() as f64;
        let mi = s.samples.iter().map(|v| v[0] as f64).sum::<f64>() / m;
        let mq = s.samples.iter().map(|v| v[1] as f64).sum::<f64>() / m;
        let vi = s.samples.iter().map(|v| (v[0] as f64 - mi).powi(2)).sum::<f64>() / m;
        let vq = s.samples.iter().map(|v| (v[1] as f64 - mq).powi(2)).sum::<f64>() / m;
        [mi, mq, (vq / vi).sqrt().ln()]
    };
    let feats: Vec<Vec<[f64; 3]>> = (0..6).map(|id| (0..50).map(|r| stats(id, r)).collect()).collect();
    let centroids: Vec<[f64; 3]> = feats
        .iter()
        .map(|f| {
            let mut c = [0.0; 3];
            for v in &f[..25] {
                (0..3).for_each(|j| c[j] += v[j] / 25.0);
            }
            c
        })
        .collect();
    let mut correct = 0;
    for (id, f) in feats.iter().enumerate() {
        for v in &f[25..] {
            let dist = |c: &[f64; 3]| (0..3).map(|j| (v[j] - c[j]).powi(2)).sum::<f64>();
            let best = (0..6).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            correct += usize::from(best == id);
        }
    }
    let acc = correct as f64 / 150.0;
    assert!(acc > 1.0 / 6.0, "nearest-centroid accuracy {acc}");
}
