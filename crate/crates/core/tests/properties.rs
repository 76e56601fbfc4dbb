use nalgebra::DMatrix;
use proptest::prelude::*;

use mllc_core::clg::{build_clg_affinity, normalize_clg, ClgOptions};
use mllc_core::losses::{slg_contrastive_loss, LossConfig, PairSampling, PrototypeBank, Prototypes};
use mllc_core::metrics::{confusion, miou};
use mllc_core::refine::{dynamic_thresholds, refine, RefineConfig, RefineLayers, StageOrder};
use mllc_core::slg::{build_slg_affinity, normalize_symmetric, Neighbors, SlgParams};
use mllc_core::sparse::SparseAffinity;
use mllc_core::{FeatureMatrix, LabelMap, Matrix, ProbMatrix};

fn features(n: usize, m: usize) -> impl Strategy<Value = FeatureMatrix> {
    prop::collection::vec(-3.0f64..3.0, n * m).prop_filter_map("zero row", move |v| {
        FeatureMatrix::new(Matrix::new(n, m, v).unwrap()).ok()
    })
}

fn probs(n: usize, c: usize) -> impl Strategy<Value = ProbMatrix> {
    prop::collection::vec(0.001f64..1.0, n * c).prop_map(move |v| {
        let mut m = Matrix::new(n, c, v).unwrap();
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        ProbMatrix::new(m).unwrap()
    })
}

fn sized<T: std::fmt::Debug, S: Strategy<Value = T>>(
    f: impl Fn(usize, usize) -> S + Clone + 'static,
) -> impl Strategy<Value = (usize, T)> {
    (3usize..=24, 2usize..=6).prop_flat_map(move |(n, d)| f(n, d).prop_map(move |x| (n, x)))
}

fn spectral_checks(a: &SparseAffinity) -> Result<(), TestCaseError> {
    let dense = a.to_dense();
    let n = dense.rows();
    prop_assert!(a.asymmetry() <= 1e-12);
    let m = DMatrix::from_fn(n, n, |i, j| dense[(i, j)]);
    let eig = m.clone().symmetric_eigen();
    let rho = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    prop_assert!(rho <= 1.0 + 1e-9, "spectral radius {rho}");
    Ok(())
}

/// `A d^{1/2} = d^{1/2}` with `d` the degrees of the unnormalized matrix.
fn eigenvector_check(norm: &SparseAffinity, unnorm: &SparseAffinity) -> Result<(), TestCaseError> {
    let d: Vec<f64> = unnorm.row_sums().iter().map(|v| v.sqrt()).collect();
    let dm = Matrix::new(d.len(), 1, d.clone()).unwrap();
    let ad = norm.matmul_dense(&dm).unwrap();
    for i in 0..d.len() {
        prop_assert!((ad[(i, 0)] - d[i]).abs() <= 1e-9);
    }
    Ok(())
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(perm[i], j)])
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slg_normalized_is_symmetric_and_bounded(
        (n, f) in sized(|n, m| features(n, m)),
        k in 1usize..8,
        gamma in 0.3f64..3.0,
    ) {
        let raw = build_slg_affinity(&f, &SlgParams { neighbors: Neighbors::K(k.min(n - 1)), gamma }).unwrap();
        for i in 0..n {
            prop_assert!(raw.row_nnz(i) <= k);
        }
        let a = normalize_symmetric(&raw).affinity;
        spectral_checks(&a)?;
        eigenvector_check(&a, &raw.add(&raw.transpose()))?;
    }

    #[test]
    fn clg_normalized_is_symmetric_and_bounded((_, p) in sized(|n, c| probs(n, c))) {
        let raw = build_clg_affinity(&p, &ClgOptions { class_cap: None, seed: 0, exclude: None });
        let w = normalize_clg(&raw);
        spectral_checks(&w)?;
        eigenvector_check(&w, &raw)?;
        let labels = p.argmax_rows();
        for (i, j, v) in w.iter() {
            prop_assert!(labels[i] == labels[j] || v == 0.0);
        }
    }

    #[test]
    fn slg_scale_invariant((n, f) in sized(|n, m| features(n, m)), s in prop::collection::vec(0.1f64..10.0, 24)) {
        let params = SlgParams { neighbors: Neighbors::K(3.min(n - 1)), gamma: 1.0 };
        let a = build_slg_affinity(&f, &params).unwrap();
        let scaled = Matrix::from_fn(n, f.dim(), |i, j| f.matrix()[(i, j)] * s[i]);
        let b = build_slg_affinity(&FeatureMatrix::new(scaled).unwrap(), &params).unwrap();
        prop_assert!(a.to_dense().max_abs_diff(&b.to_dense()) <= 1e-12);
    }

    #[test]
    fn gamma_keeps_pattern((n, f) in sized(|n, m| features(n, m)), g1 in 0.1f64..0.9, g2 in 0.1f64..0.9) {
        let k = Neighbors::K(4.min(n - 1));
        let a = build_slg_affinity(&f, &SlgParams { neighbors: k, gamma: g1 }).unwrap();
        let b = build_slg_affinity(&f, &SlgParams { neighbors: k, gamma: g2 }).unwrap();
        for i in 0..n {
            let ra: Vec<usize> = a.row(i).filter(|e| e.1 > 0.0).map(|e| e.0).collect();
            let rb: Vec<usize> = b.row(i).filter(|e| e.1 > 0.0).map(|e| e.0).collect();
            prop_assert_eq!(ra, rb);
        }
    }

    #[test]
    fn clg_permutation_equivariant((n, p) in sized(|n, c| probs(n, c)), seed in any::<u64>()) {
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut mllc_core::tensor::seeded_rng(seed));
            v
        };
        let opts = ClgOptions { class_cap: None, seed: 0, exclude: None };
        let w = normalize_clg(&build_clg_affinity(&p, &opts)).to_dense();
        let pp = ProbMatrix::new(permute_rows(p.matrix(), &perm)).unwrap();
        let wp = normalize_clg(&build_clg_affinity(&pp, &opts)).to_dense();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((wp[(i, j)] - w[(perm[i], perm[j])]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn thresholds_within_bounds((_, p) in sized(|n, c| probs(n, c)), sigma in 0.05f64..1.0) {
        let t = dynamic_thresholds(&p, sigma);
        prop_assert!(t.eta.iter().all(|&e| (0.0..=sigma).contains(&e)));
        let max = *t.counts.iter().max().unwrap();
        if max > 0 && t.counts.iter().filter(|&&c| c == max).count() == 1 {
            let top = t.counts.iter().position(|&c| c == max).unwrap();
            prop_assert_eq!(t.eta[top], sigma);
            prop_assert_eq!(t.eta.iter().filter(|&&e| e == sigma).count(), 1);
        }
    }

    #[test]
    fn miou_invariant_under_class_relabeling(
        gt in prop::collection::vec(0i64..4, 40),
        pred in prop::collection::vec(0i64..4, 40),
        perm in perm_strategy(4),
    ) {
        let a = miou(&confusion(&LabelMap::new(pred.clone(), 4).unwrap(), &LabelMap::new(gt.clone(), 4).unwrap()).unwrap()).unwrap();
        let relabel = |v: &[i64]| LabelMap::new(v.iter().map(|&x| perm[x as usize] as i64).collect(), 4).unwrap();
        let b = miou(&confusion(&relabel(&pred), &relabel(&gt)).unwrap()).unwrap();
        prop_assert!((a.miou - b.miou).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.miou));
    }

    #[test]
    fn contrastive_permutation_invariant(
        f in features(12, 4),
        labels in prop::collection::vec(0usize..3, 12),
        perm in perm_strategy(12),
        protos in features(3, 4),
    ) {
        let mut bank = PrototypeBank::new(3, 4, 0.9);
        bank.ema_update(&Prototypes { means: protos.into_matrix(), present: vec![true, true, false] }).unwrap();
        let cfg = LossConfig::default();
        let y = LabelMap::from_classes(&labels, 3).unwrap();
        let a = slg_contrastive_loss(f.matrix(), &y, &bank, &cfg, PairSampling::Exhaustive).unwrap();
        let fp = permute_rows(f.matrix(), &perm);
        let yp = LabelMap::from_classes(&perm.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 3).unwrap();
        let b = slg_contrastive_loss(&fp, &yp, &bank, &cfg, PairSampling::Exhaustive).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12);
        prop_assert!(a.loss >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refine_keeps_simplex_and_is_equivariant(
        f in features(16, 3),
        p in probs(16, 3),
        perm in perm_strategy(16),
        order in prop_oneof![Just(StageOrder::ClgFirst), Just(StageOrder::SlgFirst), Just(StageOrder::Simultaneous)],
        alpha in 0.0f64..1.0,
    ) {
        let cfg = RefineConfig { rounds: 3, k: Neighbors::K(4), alpha, sigma: 0.6, class_cap: None, order, ..RefineConfig::default() };
        let layers = RefineLayers::identity_averaging(3, 3, 3);
        let out = refine(&f, &p, &p, &cfg, &layers).unwrap();
        for r in &out.per_round_probs {
            for row in r.matrix().row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        let fp = FeatureMatrix::new(permute_rows(f.matrix(), &perm)).unwrap();
        let pp = ProbMatrix::new(permute_rows(p.matrix(), &perm)).unwrap();
        let outp = refine(&fp, &pp, &pp, &cfg, &layers).unwrap();
        // Exact cosine ties can reorder neighbours; random inputs avoid them.
        for (a, b) in out.per_round_probs.iter().zip(&outp.per_round_probs) {
            prop_assert!(permute_rows(a.matrix(), &perm).max_abs_diff(b.matrix()) <= 1e-9);
        }
        for (a, b) in out.per_round_features.iter().zip(&outp.per_round_features) {
            prop_assert!(permute_rows(a.matrix(), &perm).max_abs_diff(b.matrix()) <= 1e-9);
        }
    }
}
