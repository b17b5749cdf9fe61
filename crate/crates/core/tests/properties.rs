use proptest::prelude::*;
use sst_core::cst::{cosine_similarity, generate_cross_pseudo, ExemplarMemory};
use sst_core::datagen::{drop_labels, known_count, PartialLabelVector};
use sst_core::ist::{generate_intra_pseudo, CooccurrenceMatrix};
use sst_core::numerics::Matrix;

fn full_labels() -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1i8 } else { -1 }), 2..30)
}

fn partial(c: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop_oneof![Just(-1i8), Just(0i8), Just(1i8)], c)
}

fn thresholds() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..3.0, 0.0f64..3.0).prop_map(|(a, b)| if a <= b { (a, b) } else { (b, a) })
}

/// Positives at the higher threshold must also be positive at the lower.
fn nested(lo: &PartialLabelVector, hi: &PartialLabelVector) -> bool {
    (0..hi.len()).all(|c| hi.get(c) != 1 || lo.get(c) == 1)
}

fn keeps_known(y: &PartialLabelVector, out: &PartialLabelVector) -> bool {
    (0..y.len()).all(|c| !y.is_known(c) || y.get(c) == out.get(c))
}

proptest! {
    #[test]
    fn drop_labels_keeps_exact_count(full in full_labels(), q in 0.01f64..=1.0, seed in any::<u64>()) {
        let y = drop_labels(&full, q, seed).unwrap();
        prop_assert_eq!(y.len(), full.len());
        prop_assert_eq!(y.known_count(), known_count(q, full.len()));
        for c in 0..full.len() {
            prop_assert!(y.get(c) == 0 || y.get(c) == full[c]);
        }
        prop_assert_eq!(&y, &drop_labels(&full, q, seed).unwrap());
    }

    #[test]
    fn intra_pseudo_sets_are_nested(
        (y, p) in (3usize..8).prop_flat_map(|c| (partial(c), prop::collection::vec(0.0f64..1.0, c * c))),
        (lo, hi) in thresholds(),
    ) {
        let c = y.len();
        let mut m = Matrix::from_vec(c, c, p).unwrap();
        for i in 0..c {
            m.set(i, i, 0.0);
        }
        let m = CooccurrenceMatrix::from_matrix(m).unwrap();
        let y = PartialLabelVector::new(y).unwrap();
        let a = generate_intra_pseudo(&m, &y, lo);
        let b = generate_intra_pseudo(&m, &y, hi);
        prop_assert!(nested(&a, &b));
        prop_assert!(keeps_known(&y, &a));
    }

    #[test]
    fn cross_pseudo_sets_are_nested(
        (y, bank, feats) in (2usize..6).prop_flat_map(|c| (
            partial(c),
            prop::collection::vec((prop::collection::vec(-1.0f64..1.0, c * 3), partial(c)), 1..6),
            prop::collection::vec(-1.0f64..1.0, c * 3),
        )),
        (lo, hi) in thresholds(),
    ) {
        let c = y.len();
        let mut memory = ExemplarMemory::new(c, 4);
        for (k, (f, l)) in bank.into_iter().enumerate() {
            memory.update(&Matrix::from_vec(c, 3, f).unwrap(), &PartialLabelVector::new(l).unwrap(), k as u64);
        }
        let f = Matrix::from_vec(c, 3, feats).unwrap();
        let y = PartialLabelVector::new(y).unwrap();
        let (lo, hi) = (lo - 1.5, hi - 1.5);
        let a = generate_cross_pseudo(&f, &y, &memory, lo);
        let b = generate_cross_pseudo(&f, &y, &memory, hi);
        prop_assert!(nested(&a, &b));
        prop_assert!(keeps_known(&y, &a));
    }

    #[test]
    fn cosine_ignores_positive_scale(
        (f, g) in (1usize..8).prop_flat_map(|d| (prop::collection::vec(-2.0f64..2.0, d), prop::collection::vec(-2.0f64..2.0, d))),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let s = cosine_similarity(&f, &g);
        let fa: Vec<f64> = f.iter().map(|x| a * x).collect();
        let gb: Vec<f64> = g.iter().map(|x| b * x).collect();
        let t = cosine_similarity(&fa, &gb);
        prop_assert!((-1.0..=1.0).contains(&s.value));
        prop_assert_eq!(s.degenerate, t.degenerate);
        prop_assert!((s.value - t.value).abs() < 1e-9);
        prop_assert!((s.value - cosine_similarity(&g, &f).value).abs() < 1e-15);
    }
}
