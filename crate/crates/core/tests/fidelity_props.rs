mod common;

use proptest::prelude::*;
use trajbench::cohort::{generate_synthetic_cohort, DatasetId, GeneratorSpec, WindowColumns};
use trajbench::fidelity::{
    association, association_matrix, correlation_gap, correlation_ratio, cramers_v, ks_statistic, pearson,
    tv_distance, Association, Column,
};

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-5.0f64..5.0, (0i32..4).prop_map(f64::from)], 1..40)
}

fn labels(k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, 2..40)
}

/// Two equally long label columns with `kx` and `ky` levels.
fn label_pairs(kx: usize, ky: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..kx, 0..ky), 2..40)
}

fn count_pairs() -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
    prop::collection::vec((1u64..20, 0u64..20), 1..6).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ks_is_a_symmetric_bounded_distance(a in sample(), b in sample()) {
        let d = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_statistic(&b, &a).unwrap());
        prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ks_ignores_sample_order(a in sample(), b in sample(), rot in 0usize..40) {
        let mut r = a.clone();
        r.reverse();
        let k = rot % r.len();
        r.rotate_left(k);
        prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&r, &b).unwrap());
    }

    #[test]
    fn tv_is_a_symmetric_bounded_distance((p, q) in count_pairs()) {
        prop_assume!(q.iter().sum::<u64>() > 0);
        let d = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-15).contains(&d));
        prop_assert_eq!(d, tv_distance(&q, &p).unwrap());
        prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        // Scaling counts leaves frequencies, and so the distance, unchanged.
        let doubled: Vec<u64> = p.iter().map(|c| c * 2).collect();
        prop_assert!((tv_distance(&doubled, &q).unwrap() - d).abs() < 1e-15);
    }

    #[test]
    fn cramers_v_is_symmetric_and_label_free(pairs in label_pairs(4, 3)) {
        let (x, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let v = cramers_v(&x, &y);
        let relabelled: Vec<usize> = x.iter().map(|l| 10 - l).collect();
        for other in [cramers_v(&y, &x), cramers_v(&relabelled, &y)] {
            match (v, other) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
        if let Some(v) = v {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pearson_and_eta_are_bounded(x in prop::collection::vec(-5.0f64..5.0, 3..30), g in labels(3)) {
        let n = x.len().min(g.len());
        let (x, g) = (&x[..n], &g[..n]);
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        if let Some(r) = pearson(x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - pearson(&y, x).unwrap()).abs() < 1e-12);
        }
        if let Some(eta) = correlation_ratio(x, g) {
            prop_assert!((0.0..=1.0).contains(&eta));
        }
    }

    #[test]
    fn association_matrix_is_symmetric_and_row_order_free(seed in any::<u64>(), art in any::<bool>()) {
        let d = if art { DatasetId::ArtHiv } else { DatasetId::Hypotension };
        let c = generate_synthetic_cohort(&GeneratorSpec::calibrated(d, 12).unwrap(), seed).unwrap();
        let fwd: Vec<usize> = (0..12).collect();
        let rev: Vec<usize> = (0..12).rev().collect();
        let len = c.schema.sequence_length;
        let a = association_matrix(&WindowColumns::from_cohort(&c, &fwd, 1, len), &c.schema).unwrap();
        let b = association_matrix(&WindowColumns::from_cohort(&c, &rev, 1, len), &c.schema).unwrap();
        for i in 0..a.len() {
            for j in 0..a.len() {
                prop_assert_eq!(a.value(i, j).is_some(), a.value(j, i).is_some());
                if let (Some(x), Some(y), Some(z)) = (a.value(i, j), a.value(j, i), b.value(i, j)) {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!((x - z).abs() < 1e-9);
                }
            }
        }
        let gap = correlation_gap(&a, &a).unwrap();
        prop_assert_eq!(gap.gap, Some(0.0));
    }
}

#[test]
fn constant_columns_are_undefined_not_zero() {
    let x = [1.0, 2.0, 3.0];
    let constant = [4.0, 4.0, 4.0];
    let a = association(&Column::Numeric(&x), &Column::Numeric(&constant)).unwrap();
    assert!(matches!(a, Association::Undefined { .. }));
    assert_eq!(a.value(), None);
    assert_eq!(cramers_v(&[0, 0, 0], &[0, 1, 0]), None);
    assert_eq!(correlation_ratio(&x, &[2, 2, 2]), None);
}

#[test]
fn gap_skips_undefined_tiles() {
    let schema = common::custom_schema(
        vec![common::numeric("a", false), common::numeric("b", false)],
        vec![common::categorical("single", &["x"])],
        3,
    );
    let mut real = WindowColumns::with_features(2, 1);
    let mut synth = WindowColumns::with_features(2, 1);
    for (i, (a, b)) in [(1.0, 2.0), (2.0, 4.5), (3.0, 5.0), (4.0, 9.0)].into_iter().enumerate() {
        real.push_step(&[a, b], &[0]);
        synth.push_step(&[a, if i % 2 == 0 { -b } else { b }], &[0]);
    }
    let r = association_matrix(&real, &schema).unwrap();
    let s = association_matrix(&synth, &schema).unwrap();
    let gap = correlation_gap(&r, &s).unwrap();
    assert_eq!((gap.tiles_compared, gap.tiles_excluded), (1, 2));
    let expected = (r.value(0, 1).unwrap() - s.value(0, 1).unwrap()).abs();
    assert_eq!(gap.gap, Some(expected));
}
