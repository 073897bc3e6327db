use crate::error::{Error, Result};

/// Constant weighted sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(
        n_cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&indices.len())
            && indices.len() == values.len()
            && offsets.windows(2).all(|w| w[0] <= w[1])
            && indices.iter().all(|&j| j < n_cols);
        if !ok {
            return Err(Error::dim("sparse_rows", "inconsistent compressed-row arrays"));
        }
        Ok(SparseRows {
            n_rows: offsets.len() - 1,
            n_cols,
            offsets,
            indices,
            values,
        })
    }

    /// Row-normalises a 0/1 adjacency given as neighbour lists. Rows with no
    /// neighbours stay empty.
    pub fn row_normalized(neighbors: &[Vec<usize>], n_cols: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(neighbors.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for row in neighbors {
            let w = 1.0 / row.len().max(1) as f64;
            indices.extend_from_slice(row);
            values.extend(std::iter::repeat(w).take(row.len()));
            offsets.push(indices.len());
        }
        Self::new(n_cols, offsets, indices, values)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn transpose(&self) -> SparseRows {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_cols];
        for i in 0..self.n_rows {
            for (j, w) in self.row(i) {
                cols[j].push((i, w));
            }
        }
        let mut offsets = vec![0];
        let mut indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        for col in cols {
            for (i, w) in col {
                indices.push(i);
                values.push(w);
            }
            offsets.push(indices.len());
        }
        SparseRows {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            offsets,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            for (j, w) in self.row(i) {
                out[i * self.n_cols + j] += w;
            }
        }
        out
    }
}
