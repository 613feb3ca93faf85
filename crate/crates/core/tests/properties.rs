use hallux::evaluation::{accuracy, ConfigResult};
use hallux::kernels::softmax_rows;
use hallux::models::{argmax, fuse_late, BackboneSpec, HallucinationModel, HallucinationTarget, Modality, StreamModel};
use hallux::training::{regression_loss, triplet_loss, triplet_loss_node};
use hallux::{finite_diff_check, Bindings, GraphBuilder, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probs(k: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(1e-3f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| (x / s) as f32).collect()
    })
}

fn streams() -> impl Strategy<Value = Vec<Vec<f32>>> {
    (2usize..8, 1usize..4).prop_flat_map(|(k, n)| prop::collection::vec(probs(k), n))
}

/// Index of the largest value and its lead over the runner-up.
fn top(values: &[f64]) -> (usize, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let lead = if values.len() > 1 { values[idx[0]] - values[idx[1]] } else { f64::INFINITY };
    (idx[0], lead / values[idx[0]].abs().max(1e-300))
}

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 1..12), 1..5),
        shift in -50.0f64..50.0,
    ) {
        for row in &rows {
            let k = row.len();
            let y = softmax_rows(row, k);
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let ys = softmax_rows(&shifted, k);
            for (a, b) in y.iter().zip(&ys) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let y32 = softmax_rows(&row.iter().map(|&v| v as f32).collect::<Vec<_>>(), k);
            prop_assert!(y32.iter().all(|&v| v >= 0.0));
            prop_assert!((y32.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn late_fusion_argmax_ignores_scale(scores in streams(), which in any::<prop::sample::Index>(), c in 0.01f64..100.0) {
        let k = scores[0].len();
        let tensors: Vec<Tensor> = scores.iter().map(|s| Tensor::from_vec(s.clone()).unwrap()).collect();
        let fused = fuse_late(&tensors).unwrap();
        prop_assert!((fused.data().iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);

        // Oracle: raw product with one stream scaled by `c`, never renormalized.
        let i = which.index(scores.len());
        let raw: Vec<f64> = (0..k)
            .map(|j| scores.iter().enumerate().map(|(s, v)| v[j] as f64 * if s == i { c } else { 1.0 }).product())
            .collect();
        let (best, lead) = top(&raw);
        prop_assume!(lead > 1e-4);
        prop_assert_eq!(argmax(fused.data()), best);

        // Scaling then renormalizing one input leaves the decision alone.
        let total: f64 = scores[i].iter().map(|&v| v as f64 * c).sum();
        let mut rescaled = tensors.clone();
        rescaled[i] = Tensor::from_vec(scores[i].iter().map(|&v| (v as f64 * c / total) as f32).collect()).unwrap();
        prop_assert_eq!(argmax(fuse_late(&rescaled).unwrap().data()), best);
    }

    #[test]
    fn triplet_hinge_is_nonnegative_and_zero_past_margin(
        d in 1usize..16,
        seed in any::<u64>(),
        margin in 0.0f64..2.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..d).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect::<Vec<_>>();
        let (a, p, n) = (v(), v(), v());
        let l = triplet_loss(&a, &p, &n, margin).unwrap();
        let gap = sq(&a, &n) - sq(&a, &p) - margin;
        prop_assert!(l >= 0.0);
        prop_assume!(gap.abs() > 1e-5);
        prop_assert_eq!(l == 0.0, gap > 0.0);
        if gap < 0.0 {
            prop_assert!((l + gap).abs() < 1e-5);
        }
        prop_assert!((regression_loss(&a, &p).unwrap() - sq(&a, &p)).abs() < 1e-5);
    }

    #[test]
    fn triplet_anchor_gradient_matches_closed_form(
        rows in 1usize..5,
        d in 1usize..8,
        seed in any::<u64>(),
        margin in 0.0f64..1.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || {
            let data = (0..rows * d).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect();
            Tensor::new(vec![rows, d], data).unwrap()
        };
        let (h0, p, n) = (t(), t(), t());
        let slack: Vec<f64> = (0..rows)
            .map(|i| {
                let row = |x: &Tensor| x.data()[i * d..(i + 1) * d].to_vec();
                sq(&row(&h0), &row(&p)) - sq(&row(&h0), &row(&n)) + margin
            })
            .collect();
        prop_assume!(slack.iter().all(|s| s.abs() > 0.05));

        let mut b = GraphBuilder::new();
        let h = b.param("h", h0.clone());
        let pi = b.input("p");
        let ni = b.input("n");
        let loss = triplet_loss_node(&mut b, h, pi, ni, margin);
        let g = b.finish().unwrap();
        let mut bind = Bindings::new();
        bind.insert("p".into(), p.clone());
        bind.insert("n".into(), n.clone());
        let (value, grads) = g.backward(loss, &bind).unwrap();

        let expect: f64 = slack.iter().map(|s| s.max(0.0)).sum::<f64>() / rows as f64;
        prop_assert!((value as f64 - expect).abs() < 1e-4);
        // d/dh of the mean hinge: 2 (n - p) / B on active rows.
        for i in 0..rows {
            for j in 0..d {
                let k = i * d + j;
                let want = if slack[i] > 0.0 { 2.0 * (n.data()[k] - p.data()[k]) as f64 / rows as f64 } else { 0.0 };
                prop_assert!((grads["h"].data()[k] as f64 - want).abs() < 1e-5);
            }
        }
        prop_assert!(finite_diff_check(&g, loss, &bind, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn reported_accuracy_is_percent_correct(
        pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let ids = (0..preds.len()).map(|i| format!("c{i}")).collect();
        let hits = preds.iter().zip(&labels).filter(|(a, b)| a == b).count();
        let res = ConfigResult::new("x", ids, preds.clone(), labels.clone(), 6).unwrap();
        let want = 100.0 * accuracy(&preds, &labels).unwrap();
        prop_assert!((res.accuracy_pct() - want).abs() < 1e-9);
        prop_assert!((want - 100.0 * hits as f64 / preds.len() as f64).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn integrated_net_mirrors_inertial_backbone(
        h in 8usize..40,
        w in 8usize..40,
        c in 1usize..4,
        depth in 1usize..4,
        seed in any::<u64>(),
    ) {
        let spec = BackboneSpec { height: h, width: w, in_channels: c, widths: (0..depth).map(|i| 4 << i).collect(), kernel: 3 };
        prop_assume!(spec.validate().is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream = StreamModel::new(Modality::Inertial, spec.clone(), 3, &mut rng).unwrap();
        let shapes = |p: &hallux::graph::ParamMap| p.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect::<Vec<_>>();
        let fresh = HallucinationModel::new(HallucinationTarget::Fused, spec, &mut rng).unwrap();
        let warm = HallucinationModel::from_backbone(HallucinationTarget::Fused, &stream).unwrap();
        prop_assert_eq!(shapes(&fresh.params), shapes(&stream.backbone));
        prop_assert_eq!(shapes(&warm.params), shapes(&stream.backbone));
        prop_assert_eq!(fresh.feature_dim(), stream.feature_dim());
    }
}
