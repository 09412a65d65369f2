use std::collections::BTreeMap;

use fungi_core::evalkit::{few_shot_subset, hungarian, linear_cka, to_matrix, KnnIndex};
use fungi_core::features::{fuse, ProjectionKind, ProjectionMatrix};
use fungi_core::store::TensorStore;
use proptest::prelude::*;

fn oracle_classify(train: &[Vec<f32>], labels: &[i32], q: &[f32], k: usize) -> i32 {
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let s: f64 = t.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            (s, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<i32, (usize, f64)> = BTreeMap::new();
    for &(d2, i) in &d[..k] {
        let e = votes.entry(labels[i]).or_default();
        e.0 += 1;
        e.1 += 1.0 / d2.sqrt();
    }
    let mut best = None::<(i32, (usize, f64))>;
    for (l, v) in votes {
        best = match best {
            Some((bl, bv)) if bv.0 > v.0 || (bv.0 == v.0 && bv.1 >= v.1) => Some((bl, bv)),
            _ => Some((l, v)),
        };
    }
    best.unwrap().0
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-4i8..4, d), n)
        .prop_map(|r| r.into_iter().map(|v| v.into_iter().map(f32::from).collect()).collect())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_all_pairs_oracle(
        train in rows(30, 3),
        queries in rows(10, 3),
        label_seed in prop::collection::vec(0i32..3, 30),
        k in 1usize..8,
    ) {
        let idx = KnnIndex::new(train.clone(), label_seed.clone(), k).unwrap();
        for q in &queries {
            prop_assert_eq!(idx.classify(q).unwrap(), oracle_classify(&train, &label_seed, q, k));
        }
    }

    #[test]
    fn hungarian_is_optimal(cost in prop::collection::vec(prop::collection::vec(0u8..50, 5), 5)) {
        let c: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        let a = hungarian(&c).unwrap();
        let got: f64 = a.iter().enumerate().map(|(i, j)| c[i][j.unwrap()]).sum();
        let best = permutations(5)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| c[i][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(got, best);
    }

    #[test]
    fn fused_segments_are_unit_norm(
        a in prop::collection::vec(-5.0f32..5.0, 1..10),
        b in prop::collection::vec(-5.0f32..5.0, 1..10),
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let f = fuse(&[&a, &b]).unwrap();
        prop_assert_eq!(f.len(), a.len() + b.len());
        for part in [&f[..a.len()], &f[a.len()..]] {
            let n: f64 = part.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn projection_is_a_pure_function_of_its_seed(seed in any::<u64>(), g in prop::collection::vec(-1.0f32..1.0, 40)) {
        for kind in [ProjectionKind::Binary, ProjectionKind::Gaussian, ProjectionKind::Sparse] {
            let p = ProjectionMatrix::new(kind, 8, 40, seed).unwrap();
            let q = ProjectionMatrix::new(kind, 8, 40, seed).unwrap().materialize();
            prop_assert_eq!(p.project(&g).unwrap(), q.project(&g).unwrap());
        }
    }

    #[test]
    fn store_round_trip_is_byte_identical(
        f in prop::collection::vec(any::<f32>(), 0..20),
        b in prop::collection::vec(any::<u8>(), 0..20),
        text in "[a-z =\n]{0,40}",
    ) {
        let mut s = TensorStore::new();
        s.put_f32("f", vec![f.len()], f).unwrap();
        s.put_u8("b", vec![b.len()], b).unwrap();
        s.put_text("t", &text).unwrap();
        let bytes = s.to_bytes();
        let back = TensorStore::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn few_shot_takes_exactly_shots_per_class(labels in prop::collection::vec(0i32..4, 1..60), shots in 1usize..6, seed in any::<u64>()) {
        let counts: Vec<usize> = (0..4).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        let result = few_shot_subset(&labels, shots, seed);
        if counts.iter().any(|&n| n > 0 && n < shots) {
            prop_assert!(result.is_err());
        } else {
            let idx = result.unwrap();
            for c in 0..4 {
                let took = idx.iter().filter(|&&i| labels[i] == c).count();
                prop_assert_eq!(took, counts[c as usize].min(shots));
            }
            prop_assert_eq!(idx, few_shot_subset(&labels, shots, seed).unwrap());
        }
    }

    #[test]
    fn cka_is_scale_invariant(x in rows(12, 4), s in 0.1f64..10.0) {
        let xm = to_matrix(&x).unwrap();
        prop_assume!(xm.column_variance().iter().all(|&v| v > 1e-3));
        let y = &xm * s;
        let c = linear_cka(&xm, &y).unwrap();
        prop_assert!((c - 1.0).abs() < 1e-8);
    }
}
