use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Square nonnegative sparse matrix in compressed-row form.
///
/// Column indices within a row are strictly increasing, so no `(row, col)`
/// pair is stored twice.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAffinity {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseAffinity {
    /// Builds from per-row `(col, value)` lists. Rows are sorted here;
    /// duplicate columns, negative or non-finite values are rejected.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::Dimension(format!("{} rows for n = {n}", rows.len())));
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Validation {
                        row: i,
                        reason: format!("duplicate column {}", w[0].0),
                    });
                }
            }
            for (j, v) in row {
                if j >= n {
                    return Err(Error::Validation {
                        row: i,
                        reason: format!("column {j} out of range"),
                    });
                }
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Validation {
                        row: i,
                        reason: format!("weight {v} is not a finite nonnegative value"),
                    });
                }
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(SparseAffinity {
            n,
            indptr,
            indices,
            values,
        })
    }

    pub fn empty(n: usize) -> Self {
        SparseAffinity {
            n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn transpose(&self) -> SparseAffinity {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for (i, j, v) in self.iter() {
            rows[j].push((i, v));
        }
        // Entries arrive in increasing i per column, already sorted.
        Self::from_rows(self.n, rows).expect("transpose of a valid matrix is valid")
    }

    /// `self + otherᵀ`-style elementwise sum.
    pub fn add(&self, other: &SparseAffinity) -> SparseAffinity {
        assert_eq!(self.n, other.n);
        let rows = (0..self.n)
            .map(|i| {
                let mut merged: Vec<(usize, f64)> = Vec::new();
                let (mut a, mut b) = (self.row(i).peekable(), other.row(i).peekable());
                loop {
                    match (a.peek().copied(), b.peek().copied()) {
                        (Some((ja, va)), Some((jb, vb))) if ja == jb => {
                            merged.push((ja, va + vb));
                            a.next();
                            b.next();
                        }
                        (Some((ja, va)), Some((jb, _))) if ja < jb => {
                            merged.push((ja, va));
                            a.next();
                        }
                        (_, Some((jb, vb))) => {
                            merged.push((jb, vb));
                            b.next();
                        }
                        (Some((ja, va)), None) => {
                            merged.push((ja, va));
                            a.next();
                        }
                        (None, None) => break,
                    }
                }
                merged
            })
            .collect();
        Self::from_rows(self.n, rows).expect("sum of valid matrices is valid")
    }

    /// Returns `diag(left) · self · diag(right)`.
    pub fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> SparseAffinity {
        let mut out = self.clone();
        for i in 0..self.n {
            for p in self.indptr[i]..self.indptr[i + 1] {
                out.values[p] = self.values[p] * left[i] * right[self.indices[p]];
            }
        }
        out
    }

    /// Dense product `self · x` for an `n × d` matrix.
    pub fn matmul_dense(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::Dimension(format!(
                "affinity over {} nodes applied to {} rows",
                self.n,
                x.rows()
            )));
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for i in 0..self.n {
            let dst = out.row_mut(i);
            for (j, w) in self.row(i) {
                for (d, &v) in dst.iter_mut().zip(x.row(j)) {
                    *d += w * v;
                }
            }
        }
        Ok(out)
    }

    /// Dense product `selfᵀ · x`.
    pub fn t_matmul_dense(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::Dimension(format!(
                "affinity over {} nodes applied to {} rows",
                self.n,
                x.rows()
            )));
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for i in 0..self.n {
            let src = x.row(i);
            for (j, w) in self.row(i) {
                for (d, &v) in out.row_mut(j).iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
        }
        m
    }

    /// Largest `|A_ij − A_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        self.iter()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_negatives() {
        assert!(SparseAffinity::from_rows(2, vec![vec![(1, 1.0), (1, 2.0)], vec![]]).is_err());
        assert!(SparseAffinity::from_rows(2, vec![vec![(1, -1.0)], vec![]]).is_err());
        assert!(SparseAffinity::from_rows(2, vec![vec![(2, 1.0)], vec![]]).is_err());
    }

    #[test]
    fn add_transpose_matches_dense() {
        let a = SparseAffinity::from_rows(
            3,
            vec![vec![(1, 0.5), (2, 0.25)], vec![(0, 1.0)], vec![(1, 2.0)]],
        )
        .unwrap();
        let sum = a.add(&a.transpose()).to_dense();
        let d = a.to_dense();
        let expect = d.add(&d.transpose());
        assert_eq!(sum, expect);
        assert_eq!(a.add(&a.transpose()).asymmetry(), 0.0);
    }

    #[test]
    fn matmul_matches_dense() {
        let a = SparseAffinity::from_rows(3, vec![vec![(2, 0.5)], vec![(0, 1.0), (1, 3.0)], vec![]])
            .unwrap();
        let x = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 + 1.0);
        assert_eq!(a.matmul_dense(&x).unwrap(), a.to_dense().matmul(&x).unwrap());
        assert_eq!(
            a.t_matmul_dense(&x).unwrap(),
            a.to_dense().transpose().matmul(&x).unwrap()
        );
    }
}
