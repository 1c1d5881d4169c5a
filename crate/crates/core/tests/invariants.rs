use noisylab::annotators::{staple, StapleConfig};
use noisylab::data::{gen_blobs, save_csv, split_indices, TrainingView};
use noisylab::noise::{estimate_transition, simulate_annotators, symmetric_transition, NoiseSpec, TransitionMatrix};
use noisylab::numerics::Rng;
use noisylab::procedures::mixup_pair;
use proptest::prelude::*;

fn assert_stochastic(t: &TransitionMatrix) {
    for i in 0..t.k() {
        let row = t.row(i);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)), "row {i}: {row:?}");
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "row {i}: {row:?}");
    }
}

#[test]
fn training_view_hides_truth() {
    let ds = gen_blobs(3, 20, 2, 5.0, 1).unwrap();
    let noisy = NoiseSpec::Symmetric { rho: 0.4 }.apply(&ds, &mut Rng::new(2)).unwrap();
    assert!(noisy.true_labels().is_some());

    let view = TrainingView::new(&noisy);
    assert!(view.true_labels().is_none());
    assert_eq!(view.labels(), noisy.labels());
    assert!(view.subset(&[0, 5, 9]).true_labels().is_none());
    assert!(TrainingView::from(noisy.clone()).true_labels().is_none());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("view.csv");
    save_csv(&view.into_inner(), &path).unwrap();
    let header = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(!header.split(',').any(|c| c == "true"), "{header}");
}

#[test]
fn staple_is_equivariant_to_annotator_and_sample_order() {
    let ds = gen_blobs(3, 200, 2, 6.0, 4).unwrap();
    let confusions: Vec<_> = [0.1, 0.3, 0.2]
        .iter()
        .map(|&r| symmetric_transition(3, r).unwrap())
        .collect();
    let multi = simulate_annotators(&ds, &confusions, &mut Rng::new(5)).unwrap();
    let ann = multi.annotator_labels().unwrap().to_vec();
    let config = StapleConfig::default();
    let base = staple(&ann, 3, config).unwrap();

    let order = [2, 0, 1];
    let swapped: Vec<Vec<usize>> = ann.iter().map(|r| order.iter().map(|&a| r[a]).collect()).collect();
    let res = staple(&swapped, 3, config).unwrap();
    assert_eq!(res.fused, base.fused);
    for (slot, &a) in order.iter().enumerate() {
        for i in 0..3 {
            for (x, y) in res.model.confusions[slot]
                .row(i)
                .iter()
                .zip(base.model.confusions[a].row(i))
            {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    let perm = Rng::new(6).permutation(ann.len());
    let shuffled: Vec<Vec<usize>> = perm.iter().map(|&i| ann[i].clone()).collect();
    let res = staple(&shuffled, 3, config).unwrap();
    let expected: Vec<usize> = perm.iter().map(|&i| base.fused[i]).collect();
    assert_eq!(res.fused, expected);
}

proptest! {
    #[test]
    fn symmetric_transitions_are_row_stochastic(k in 2usize..9, rho in 0.0f64..1.0) {
        assert_stochastic(&symmetric_transition(k, rho).unwrap());
    }

    #[test]
    fn estimated_transitions_are_row_stochastic(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200),
        laplace in 0.1f64..5.0,
    ) {
        assert_stochastic(&estimate_transition(&pairs, 4, laplace).unwrap());
    }

    #[test]
    fn mixup_stays_in_convex_hull(
        xi in prop::collection::vec(-10.0f64..10.0, 3),
        xj in prop::collection::vec(-10.0f64..10.0, 3),
        ci in 0usize..3,
        cj in 0usize..3,
        lambda in 0.0f64..=1.0,
    ) {
        let onehot = |c: usize| (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let (x, y) = mixup_pair(&xi, &onehot(ci), &xj, &onehot(cj), lambda);
        for ((v, a), b) in x.iter().zip(&xi).zip(&xj) {
            prop_assert!(*v >= a.min(*b) - 1e-12 && *v <= a.max(*b) + 1e-12);
        }
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn split_partitions_samples(n in 2usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = gen_blobs(2, n, 2, 3.0, 1).unwrap();
        let (train, test) = split_indices(&ds, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        let again = split_indices(&ds, frac, seed).unwrap();
        prop_assert_eq!((train, test), again);
    }
}
