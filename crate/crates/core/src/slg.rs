//! Semantic-level graph: k-nearest-neighbour cosine affinities over embedding
//! features, followed by symmetric degree normalization.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::sparse::SparseAffinity;
use crate::tensor::{norm, FeatureMatrix, Matrix};

/// Neighbour count of the affinity graph. `All` connects every pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighbors {
    K(usize),
    All,
}

impl Serialize for Neighbors {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Neighbors::K(k) => s.serialize_u64(*k as u64),
            Neighbors::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Neighbors {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Neighbors;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive neighbour count or \"all\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Neighbors, E> {
                Ok(Neighbors::K(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Neighbors, E> {
                if v < 0 {
                    return Err(E::custom("negative neighbour count"));
                }
                Ok(Neighbors::K(v as usize))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Neighbors, E> {
                match v {
                    "all" => Ok(Neighbors::All),
                    _ => v
                        .parse()
                        .map(Neighbors::K)
                        .map_err(|_| E::custom(format!("bad neighbour count {v:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlgParams {
    pub neighbors: Neighbors,
    pub gamma: f64,
}

impl Default for SlgParams {
    fn default() -> Self {
        SlgParams {
            neighbors: Neighbors::K(20),
            gamma: 1.0,
        }
    }
}

impl SlgParams {
    /// Effective neighbour count for `n` nodes.
    pub fn resolve(&self, n: usize) -> Result<usize> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Param(format!("gamma must be positive, got {}", self.gamma)));
        }
        match self.neighbors {
            Neighbors::All => Ok(n.saturating_sub(1)),
            Neighbors::K(0) => Err(Error::Param("k must be at least 1".into())),
            Neighbors::K(k) if k >= n => Err(Error::Param(format!(
                "k = {k} must be smaller than the node count {n}"
            ))),
            Neighbors::K(k) => Ok(k),
        }
    }
}

/// Search seam for the neighbour lists behind the affinity graph.
pub trait NeighborSearch: Sync {
    /// Up to `k` `(node, cosine)` pairs for node `i`, excluding `i`, ordered
    /// by decreasing cosine with ties going to the lower index. `unit` holds
    /// L2-normalized rows.
    fn neighbors(&self, unit: &Matrix, i: usize, k: usize) -> Vec<(usize, f64)>;
}

/// Brute-force scan over all rows.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExhaustiveCosine;

fn rank(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl NeighborSearch for ExhaustiveCosine {
    fn neighbors(&self, unit: &Matrix, i: usize, k: usize) -> Vec<(usize, f64)> {
        let xi = unit.row(i);
        let mut cand: Vec<(usize, f64)> = (0..unit.rows())
            .filter(|&j| j != i)
            .map(|j| (j, crate::tensor::dot(xi, unit.row(j))))
            .collect();
        if k < cand.len() {
            cand.select_nth_unstable_by(k, rank);
            cand.truncate(k);
        }
        cand.sort_unstable_by(rank);
        cand
    }
}

pub(crate) fn unit_rows(features: &Matrix) -> Result<Matrix> {
    let mut unit = features.clone();
    for i in 0..unit.rows() {
        let r = unit.row_mut(i);
        let nrm = norm(r);
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::DegenerateFeature { row: i });
        }
        r.iter_mut().for_each(|v| *v /= nrm);
    }
    Ok(unit)
}

/// Raw affinity: for each node, its `k` most cosine-similar nodes, stored with
/// weight `max(0, cos)^γ`. Membership is decided on the unclamped cosine.
pub fn build_slg_affinity(features: &FeatureMatrix, params: &SlgParams) -> Result<SparseAffinity> {
    build_slg_affinity_with(features, params, &ExhaustiveCosine)
}

pub fn build_slg_affinity_with(
    features: &FeatureMatrix,
    params: &SlgParams,
    search: &dyn NeighborSearch,
) -> Result<SparseAffinity> {
    let n = features.n();
    let k = params.resolve(n)?;
    let unit = unit_rows(features.matrix())?;
    let gamma = params.gamma;
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            search
                .neighbors(&unit, i, k)
                .into_iter()
                .map(|(j, c)| (j, if c > 0.0 { c.powf(gamma) } else { 0.0 }))
                .collect()
        })
        .collect();
    SparseAffinity::from_rows(n, rows)
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub affinity: SparseAffinity,
    /// Nodes whose symmetrized degree was zero; their rows stay empty of weight.
    pub isolated: usize,
}

/// `D^{-1/2} (Â + Âᵀ) D^{-1/2}` with `D` the row sums of `Â + Âᵀ`.
pub fn normalize_symmetric(raw: &SparseAffinity) -> Normalized {
    let sym = raw.add(&raw.transpose());
    scale_by_degree(&sym)
}

pub(crate) fn scale_by_degree(m: &SparseAffinity) -> Normalized {
    let deg = m.row_sums();
    let mut isolated = 0;
    let inv: Vec<f64> = deg
        .iter()
        .map(|&d| {
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                isolated += 1;
                0.0
            }
        })
        .collect();
    Normalized {
        affinity: m.scale_rows_cols(&inv, &inv),
        isolated,
    }
}
