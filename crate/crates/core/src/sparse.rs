//! Canonical compressed-row sparse matrix.

use crate::error::{Error, Result};

/// Compressed sparse rows with `u32` column indices and `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != nrows + 1 || row_ptr[0] != 0 {
            return Err(Error::ShapeMismatch(format!(
                "row_ptr has {} entries for {nrows} rows",
                row_ptr.len()
            )));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::ShapeMismatch("row_ptr is not monotone".into()));
        }
        let nnz = row_ptr[nrows];
        if col_idx.len() != nnz || values.len() != nnz {
            return Err(Error::ShapeMismatch(format!(
                "nnz {nnz} but {} indices and {} values",
                col_idx.len(),
                values.len()
            )));
        }
        if let Some(&c) = col_idx.iter().find(|&&c| c as usize >= ncols) {
            return Err(Error::OutOfRange {
                what: "column index",
                index: c as usize,
                limit: ncols,
            });
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Assemble from per-row `(column, value)` lists, keeping row order.
    pub fn from_rows<I, R>(ncols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = (usize, f64)>,
    {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (c, v) in row {
                col_idx.push(u32::try_from(c).map_err(|_| Error::OutOfRange {
                    what: "column index",
                    index: c,
                    limit: u32::MAX as usize,
                })?);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        let nrows = row_ptr.len() - 1;
        Self::new(nrows, ncols, row_ptr, col_idx, values)
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .zip(&self.values[range])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    /// Exact structural transpose. Within each output row, entries are in
    /// increasing order of the original row index.
    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.ncols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k] as usize;
                let dst = next[c];
                next[c] += 1;
                col_idx[dst] = r as u32;
                values[dst] = self.values[k];
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// y = A x in double precision, row by row.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(Error::ShapeMismatch(format!(
                "vector of length {} for {} columns",
                x.len(),
                self.ncols
            )));
        }
        Ok((0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in dense.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        dense
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows)
            .map(|r| self.row(r).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.ncols];
        for (&c, &v) in self.col_idx.iter().zip(&self.values) {
            sums[c as usize] += v;
        }
        sums
    }

    /// Multiply all stored values by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(nrows: usize, ncols: usize, density: f64, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<(usize, f64)>> = (0..nrows)
            .map(|_| {
                let mut row = Vec::new();
                for c in 0..ncols {
                    if rng.random::<f64>() < density {
                        row.push((c, rng.random_range(0.1..2.0)));
                    }
                }
                row
            })
            .collect();
        CsrMatrix::from_rows(ncols, rows).unwrap()
    }

    #[test]
    fn transpose_single_entry_is_involution() {
        let m = CsrMatrix::from_rows(1, vec![vec![(0, 2.5)]]).unwrap();
        assert_eq!(m.transpose(), m);
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn transpose_roundtrip_random_100x80() {
        let b = random_matrix(100, 80, 0.07, 11);
        let bt = b.transpose();
        assert_eq!(bt.nrows(), 80);
        assert_eq!(bt.ncols(), 100);
        assert_eq!(bt.transpose(), b);
        assert_eq!(b.row_sums(), bt.col_sums());
        assert_eq!(b.to_dense()[3][7], bt.to_dense()[7][3]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(CsrMatrix::new(2, 2, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 1], vec![5], vec![1.0]).is_err());
        let m = CsrMatrix::zeros(2, 3);
        assert!(m.mul_vec(&[1.0, 2.0]).is_err());
        assert_eq!(m.mul_vec(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn transpose_is_an_involution(nrows in 1usize..40, ncols in 1usize..40, seed in 0u64..1000) {
            let b = random_matrix(nrows, ncols, 0.2, seed);
            prop_assert_eq!(b.transpose().transpose(), b);
        }
    }
}
