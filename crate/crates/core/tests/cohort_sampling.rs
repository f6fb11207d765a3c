mod common;

use proptest::prelude::*;
use trajbench::cohort::{
    fit_normalizer, generate_synthetic_cohort, read_cohort_csv, write_cohort_csv_to, Cohort, DatasetId,
    GeneratorSpec,
};
use trajbench::sampling::{
    compute_delta_t, decode_step, dual_split, encode_step, encode_visits, sample_gaps, IrregularitySpec, SplitSpec,
    VisitIndexSet,
};

fn cohort(dataset: DatasetId, n: usize, seed: u64) -> Cohort {
    generate_synthetic_cohort(&GeneratorSpec::calibrated(dataset, n).unwrap(), seed).unwrap()
}

fn dataset(art: bool) -> DatasetId {
    if art {
        DatasetId::ArtHiv
    } else {
        DatasetId::Hypotension
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip_is_lossless(n in 1usize..12, seed in any::<u64>(), art in any::<bool>()) {
        let c = cohort(dataset(art), n, seed);
        let mut bytes = Vec::new();
        write_cohort_csv_to(&c, &mut bytes).unwrap();
        let back = read_cohort_csv(bytes.as_slice(), &c.schema).unwrap();
        prop_assert_eq!(&back, &c);
        let mut again = Vec::new();
        write_cohort_csv_to(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn generator_output_lies_in_the_schema(n in 1usize..20, seed in any::<u64>(), art in any::<bool>()) {
        let c = cohort(dataset(art), n, seed);
        prop_assert_eq!(c.len(), n);
        let levels = c.schema.level_counts();
        for p in &c.patients {
            prop_assert_eq!(p.len(), c.schema.sequence_length);
            for step in 1..=p.len() {
                for (f, feat) in c.schema.numeric_features.iter().enumerate() {
                    let v = p.numeric(step, f);
                    prop_assert!(v.is_finite());
                    if feat.log_scale {
                        prop_assert!(v > 0.0);
                    }
                }
                for (f, &k) in levels.iter().enumerate() {
                    prop_assert!(p.categorical(step, f) < k);
                }
            }
        }
    }

    #[test]
    fn split_partitions_every_cohort(n in 2usize..200, seed in any::<u64>(), art in any::<bool>()) {
        let c = cohort(dataset(art), n, 1);
        let s = dual_split(&c, &SplitSpec::preset(dataset(art), seed).unwrap()).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.train.len(), n * 4 / 5);
        prop_assert_eq!(s.observation_length + s.prediction_length, c.schema.sequence_length);
    }

    #[test]
    fn gaps_respect_the_window(len in 1usize..60, g_max in 1u32..20, seed in any::<u64>(), patient in 0usize..1000) {
        let spec = IrregularitySpec { g_max, resample_per_epoch: false, seed };
        let v = sample_gaps(len, &spec, &mut spec.patient_stream(patient, 0)).unwrap();
        prop_assert_eq!(v.retained[0], 1);
        prop_assert!(v.retained.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*v.retained.last().unwrap() <= len);
        prop_assert!(v.delta_t[1..].iter().all(|&g| (1..=g_max as usize).contains(&g)));
        prop_assert_eq!(compute_delta_t(&v.retained).unwrap(), v.delta_t.clone());
        if g_max == 1 {
            prop_assert_eq!(v, VisitIndexSet::complete(len));
        }
    }

    #[test]
    fn gap_streams_are_reproducible(seed in any::<u64>(), patient in 0usize..100, epoch in 0usize..5) {
        let spec = IrregularitySpec { g_max: 7, resample_per_epoch: true, seed };
        let a = sample_gaps(40, &spec, &mut spec.patient_stream(patient, epoch)).unwrap();
        let b = sample_gaps(40, &spec, &mut spec.patient_stream(patient, epoch)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn encoding_inverts(seed in any::<u64>(), art in any::<bool>(), g_max in 1u32..12) {
        let c = cohort(dataset(art), 8, seed);
        let all: Vec<usize> = (0..c.len()).collect();
        let norm = fit_normalizer(&c, &all, 1, c.schema.sequence_length).unwrap();
        let spec = IrregularitySpec { g_max, resample_per_epoch: false, seed };
        let p = &c.patients[0];
        let visits = sample_gaps(30, &spec, &mut spec.patient_stream(0, 0)).unwrap();
        let enc = encode_visits(p, &visits, &c.schema, &norm, &spec).unwrap();
        for (r, (&step, &dt)) in visits.retained.iter().zip(&visits.delta_t).enumerate() {
            let row = enc.row(r);
            prop_assert_eq!(row[row.len() - 1], dt as f64 / g_max as f64);
            let (num, cat) = decode_step(row, &c.schema, &norm).unwrap();
            for (f, v) in num.iter().enumerate() {
                let truth = p.numeric(step, f);
                prop_assert!((v - truth).abs() <= 1e-9 * truth.abs().max(1.0));
            }
            prop_assert_eq!(cat.as_slice(), p.categorical_row(step));
        }
    }
}

#[test]
fn calibrated_marginals_match_their_targets() {
    let spec = GeneratorSpec::calibrated(DatasetId::ArtHiv, 3000).unwrap();
    let c = generate_synthetic_cohort(&spec, 17).unwrap();
    for (f, target) in spec.numeric_params.iter().enumerate() {
        let logs: Vec<f64> = c.patients.iter().map(|p| p.numeric(1, f).ln()).collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - target.mu).abs() < 4.0 * target.sigma / n.sqrt(), "feature {f} mean {mean}");
        assert!((sd / target.sigma - 1.0).abs() < 0.06, "feature {f} sd {sd}");
    }
    for (f, probs) in spec.categorical_cutpoints.iter().enumerate() {
        let mut counts = vec![0usize; probs.len()];
        for p in &c.patients {
            counts[p.categorical(1, f)] += 1;
        }
        for (k, (&count, &prob)) in counts.iter().zip(probs).enumerate() {
            let freq = count as f64 / c.len() as f64;
            let se = (prob * (1.0 - prob) / c.len() as f64).sqrt();
            assert!((freq - prob).abs() < 4.0 * se + 1e-9, "feature {f} level {k}: {freq} vs {prob}");
        }
    }
}

#[test]
fn encode_step_layout() {
    let c = cohort(DatasetId::Hypotension, 3, 2);
    let all: Vec<usize> = (0..3).collect();
    let norm = fit_normalizer(&c, &all, 1, 32).unwrap();
    let p = &c.patients[1];
    let row = encode_step(p.numeric_row(4), p.categorical_row(4), 3, &c.schema, &norm, 6).unwrap();
    assert_eq!(row.len(), c.schema.encoded_dim());
    assert_eq!(row.last(), Some(&0.5));
    let one_hot = &row[c.schema.n_numeric()..row.len() - 1];
    assert_eq!(one_hot.iter().filter(|&&v| v == 1.0).count(), c.schema.n_categorical());
    assert!(one_hot.iter().all(|&v| v == 0.0 || v == 1.0));
}
