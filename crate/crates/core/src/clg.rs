//! Class-level graph: probability dot products between nodes that share a
//! predicted class, with unit self-weights.
//!
//! Nodes are grouped by argmax class, so each class contributes one dense
//! block and building costs `O(Σ n_c²)`.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::slg::scale_by_degree;
use crate::sparse::SparseAffinity;
use crate::tensor::{child_rng, dot, ProbMatrix};

#[derive(Clone, Debug, Default)]
pub struct ClgOptions<'a> {
    /// Largest dense block per class. Bigger classes are split into seeded
    /// random groups of at most this many nodes. `None` keeps whole classes.
    pub class_cap: Option<usize>,
    pub seed: u64,
    /// Nodes left out of every block (they keep only their self-weight).
    pub exclude: Option<&'a [bool]>,
}

/// Node indices of each predicted class, optionally split under the cap.
pub fn class_blocks(probs: &ProbMatrix, opts: &ClgOptions) -> Vec<Vec<usize>> {
    let classes = probs.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, c) in probs.argmax_rows().into_iter().enumerate() {
        if opts.exclude.is_some_and(|ex| ex[i]) {
            continue;
        }
        by_class[c].push(i);
    }
    let mut blocks = Vec::new();
    for (c, mut nodes) in by_class.into_iter().enumerate() {
        match opts.class_cap {
            Some(cap) if cap > 0 && nodes.len() > cap => {
                let mut rng = child_rng(opts.seed, c as u64);
                nodes.shuffle(&mut rng);
                let parts = nodes.len().div_ceil(cap);
                let base = nodes.len() / parts;
                let extra = nodes.len() % parts;
                let mut start = 0;
                for p in 0..parts {
                    let len = base + usize::from(p < extra);
                    let mut part = nodes[start..start + len].to_vec();
                    part.sort_unstable();
                    blocks.push(part);
                    start += len;
                }
            }
            _ if !nodes.is_empty() => blocks.push(nodes),
            _ => {}
        }
    }
    blocks
}

/// Raw consistency matrix: 1 on the diagonal, `x_i · x_j` between distinct
/// nodes of the same block, absent otherwise.
pub fn build_clg_affinity(probs: &ProbMatrix, opts: &ClgOptions) -> SparseAffinity {
    let n = probs.n();
    let blocks = class_blocks(probs, opts);
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let filled: Vec<Vec<(usize, Vec<(usize, f64)>)>> = blocks
        .par_iter()
        .map(|block| {
            block
                .iter()
                .map(|&i| {
                    let xi = probs.row(i);
                    let row = block
                        .iter()
                        .map(|&j| (j, if i == j { 1.0 } else { dot(xi, probs.row(j)) }))
                        .collect();
                    (i, row)
                })
                .collect()
        })
        .collect();
    for (i, row) in filled.into_iter().flatten() {
        rows[i] = row;
    }
    for (i, row) in rows.iter_mut().enumerate() {
        if row.is_empty() {
            row.push((i, 1.0));
        }
    }
    SparseAffinity::from_rows(n, rows).expect("probability dot products are finite and nonnegative")
}

/// `D̂^{-1/2} Ŵ D̂^{-1/2}`. `Ŵ` is already symmetric, so no transpose sum.
pub fn normalize_clg(raw: &SparseAffinity) -> SparseAffinity {
    scale_by_degree(raw).affinity
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn probs(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn identical_one_hot_rows() {
        let p = probs(&[vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]);
        let w = build_clg_affinity(&p, &ClgOptions::default());
        assert_eq!(w.get(0, 1), 1.0);
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(w.get(1, 1), 1.0);
    }

    #[test]
    fn different_argmax_disconnected() {
        let p = probs(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let w = build_clg_affinity(&p, &ClgOptions::default());
        assert_eq!(w.get(0, 1), 0.0);
        assert_eq!(w.nnz(), 2);
    }

    #[test]
    fn singleton_normalizes_to_one() {
        let p = probs(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let w = normalize_clg(&build_clg_affinity(&p, &ClgOptions::default()));
        assert_eq!(w.get(0, 0), 1.0);
    }

    #[test]
    fn two_clique() {
        let raw = SparseAffinity::from_rows(2, vec![vec![(0, 1.0), (1, 1.0)], vec![(0, 1.0), (1, 1.0)]])
            .unwrap();
        let w = normalize_clg(&raw);
        for (_, _, v) in w.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn excluded_nodes_keep_self_loop_only() {
        let p = probs(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.7, 0.3]]);
        let ex = [false, true, false];
        let w = build_clg_affinity(&p, &ClgOptions { exclude: Some(&ex), ..Default::default() });
        assert_eq!(w.row_nnz(1), 1);
        assert_eq!(w.get(1, 1), 1.0);
        assert!(w.get(0, 2) > 0.0);
    }

    #[test]
    fn cap_splits_large_class_into_balanced_blocks() {
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![0.6, 0.4]).collect();
        let p = probs(&rows);
        let opts = ClgOptions { class_cap: Some(4), seed: 3, exclude: None };
        let blocks = class_blocks(&p, &opts);
        let mut sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![3, 3, 4]);
        let w = build_clg_affinity(&p, &opts);
        assert_eq!(w.asymmetry(), 0.0);
        assert!((0..10).all(|i| w.row_nnz(i) <= 4));
        assert_eq!(blocks, class_blocks(&p, &opts));
    }
}
