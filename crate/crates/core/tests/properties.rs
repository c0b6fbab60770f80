mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gdistill::coreset::update_coreset;
use gdistill::data::LabeledSet;
use gdistill::ensemble::q_predict;
use gdistill::losses::{cls_loss, data_weights, dst_loss};
use gdistill::metrics::{acc, fgt, AccuracyMatrix};
use gdistill::nnet::{softmax_temperature, Matrix, Model};
use gdistill::sampler::{sample_external, SamplerConfig, VecStream};

use common::{identity_model, oracle_acc_fgt, oracle_prev_bucket};

fn simplex(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, len).prop_map(|z| common::softmax(&z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..12), gamma in 0.1f64..10.0) {
        let p = softmax_temperature(&z, gamma);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
        // Shift invariance.
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        for (a, b) in p.iter().zip(softmax_temperature(&shifted, gamma)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_invariants(prev in simplex(1..=6), cur in simplex(1..=6)) {
        let q = q_predict(&prev, &cur).unwrap();
        prop_assert!((q.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(q.probs.iter().all(|v| *v >= 0.0));
        prop_assert_eq!(q.probs[q.y_max], q.p_max);
        // The top previous class stays the top previous class.
        prop_assert!(q.probs[..prev.len()].iter().all(|v| *v <= q.p_max));
        prop_assert!(q.epsilon <= 1.0 - q.p_max + 1e-15);
    }

    #[test]
    fn dst_with_one_hot_teacher_is_cls_at_unit_temperature(
        z in prop::collection::vec(-5.0f64..5.0, 12), labels in prop::collection::vec(0usize..4, 3)
    ) {
        let logits = Matrix::from_vec(3, 4, z).unwrap();
        let mut teacher = Matrix::zeros(3, 4);
        for (i, &y) in labels.iter().enumerate() {
            teacher.set(i, y, 1.0);
        }
        let a = dst_loss(&logits, &teacher, 1.0, None).unwrap();
        let b = cls_loss(&logits, &labels, None).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn data_weights_balance_classes(counts in prop::collection::vec(1usize..30, 1..6)) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let classes: Vec<usize> = (0..counts.len()).collect();
        let w = data_weights(&labels, &classes).unwrap();
        // Every class carries the same total weight, and the weights sum to |D|.
        let totals: Vec<f64> = classes.iter().map(|&c| w.get(c).unwrap() * counts[c] as f64).collect();
        for t in &totals {
            prop_assert!((t - totals[0]).abs() < 1e-9);
        }
        prop_assert!((totals.iter().sum::<f64>() - labels.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn metrics_match_oracle(t in 2usize..7, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = (0..t).map(|_| rng.gen_range(1..10)).collect();
        let rows: Vec<Vec<f64>> = (0..t).map(|s| (0..=s).map(|_| rng.gen_range(0.0..=1.0)).collect()).collect();
        let m = AccuracyMatrix::from_rows(sizes, rows).unwrap();
        let (oa, of) = oracle_acc_fgt(&m);
        prop_assert!((acc(&m).unwrap() - oa).abs() <= 1e-12);
        prop_assert!((fgt(&m).unwrap() - of).abs() <= 1e-12);
    }

    #[test]
    fn sampler_matches_oracle(
        k in 1usize..5,
        logits in prop::collection::vec(prop::collection::vec(-3i32..3, 4), 1..300),
        n_d in 1usize..60,
        extra in 0usize..300,
        ratio_idx in 0usize..4,
    ) {
        let logits: Vec<Vec<f64>> = logits.into_iter().map(|z| z[..k].iter().map(|&v| v as f64 / 2.0).collect()).collect();
        let cfg = SamplerConfig { n_d, n_max: n_d + extra, ood_ratio: [0.0, 0.25, 0.7, 1.0][ratio_idx] };
        let ext = sample_external(Some(&identity_model(k)), &mut VecStream::new(logits.clone()), cfg).unwrap();
        prop_assert!(ext.retrieved <= cfg.n_max);
        prop_assert!(ext.len() <= n_d);
        prop_assert!(ext.prev_bucket.values().all(|v| v.len() <= ext.cap));
        let got: std::collections::BTreeMap<usize, Vec<usize>> =
            ext.prev_bucket.iter().map(|(c, v)| (*c, v.iter().map(|e| e.arrival).collect())).collect();
        if ext.ood_bucket.len() == cfg.n_ood() && cfg.n_prev() > 0 {
            prop_assert_eq!(got, oracle_prev_bucket(&logits, cfg.n_ood(), cfg.n_max, cfg.n_prev() / k));
        }
    }

    /// Once a class bucket is full, its weakest member never gets weaker as the stream grows.
    #[test]
    fn full_bucket_quality_is_monotone(logits in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 20..200)) {
        let n_d = 8;
        let mut last_floor: Vec<Option<f64>> = vec![None; 2];
        for n in n_d..=logits.len() {
            let cfg = SamplerConfig { n_d, n_max: n, ood_ratio: 0.0 };
            let ext = sample_external(Some(&identity_model(2)), &mut VecStream::new(logits.clone()), cfg).unwrap();
            for (c, members) in &ext.prev_bucket {
                if members.len() == ext.cap {
                    let floor = members.iter().map(|e| e.p_hat).fold(f64::INFINITY, f64::min);
                    if let Some(prev) = last_floor[*c] {
                        prop_assert!(floor >= prev);
                    }
                    last_floor[*c] = Some(floor);
                }
            }
        }
    }

    #[test]
    fn coreset_is_a_balanced_subset(counts in prop::collection::vec(0usize..25, 1..6), n_c in 0usize..60, seed in any::<u64>()) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64]).collect();
        let d = LabeledSet::new(Matrix::from_rows(&rows).unwrap_or(Matrix::zeros(0, 1)), labels.clone()).unwrap();
        let classes: Vec<usize> = (0..counts.len()).collect();
        let c = update_coreset(&d, n_c, &classes, &mut ChaCha8Rng::seed_from_u64(seed));
        let quota = n_c / classes.len();
        prop_assert!(c.len() <= n_c);
        for (class, &n) in counts.iter().enumerate() {
            let got = c.set.labels.iter().filter(|&&y| y == class).count();
            prop_assert_eq!(got, quota.min(n));
        }
        for (row, y) in c.set.inputs.iter_rows().zip(&c.set.labels) {
            prop_assert_eq!(labels[row[0] as usize], *y);
        }
    }

    #[test]
    fn checkpoint_round_trip(d in 1usize..5, h in prop::collection::vec(1usize..6, 0..3), heads in prop::collection::vec(1usize..4, 1..3), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::new(d, &h, &mut rng);
        for &k in &heads {
            m.add_head(k, &mut rng).unwrap();
        }
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        let back = Model::read_checkpoint(&bytes[..]).unwrap();
        prop_assert_eq!(back.to_flat(), m.to_flat());
        prop_assert_eq!(back.head_sizes(), m.head_sizes());
    }
}
