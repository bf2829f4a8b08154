//! Sparse symmetric LDL^T factorization.
//!
//! Up-looking factorization with an elimination-tree symbolic phase, in
//! the style of Davis' LDL. The matrix is stored as the upper triangle in
//! compressed sparse column form. The symbolic analysis is done once per
//! sparsity pattern; numeric refactorization reuses it, which is what the
//! penalized iteratively reweighted solves in the mixed models need.
//!
//! Orderings are the caller's responsibility: mixed-model assemblers
//! eliminate the largest random factors first, which keeps fill trivial
//! for crossed intercept designs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot {pivot:e} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("pattern entry ({row}, {col}) is not in the upper triangle of a {n}x{n} matrix")]
    BadPattern { row: usize, col: usize, n: usize },
}

/// Upper-triangular sparsity pattern in CSC form (row indices sorted
/// within each column, diagonal entries required).
#[derive(Debug, Clone)]
pub struct SymmetricPattern {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
}

impl SymmetricPattern {
    /// Builds a pattern from (row, col) upper-triangle coordinates.
    /// Duplicates are merged; missing diagonal entries are added.
    /// Returns the pattern and, for each input coordinate, the index of
    /// its value slot (so assemblers can scatter numbers cheaply).
    pub fn from_coordinates(
        n: usize,
        coords: &[(usize, usize)],
    ) -> Result<(Self, Vec<usize>), SparseError> {
        for &(r, c) in coords {
            if r > c || c >= n {
                return Err(SparseError::BadPattern { row: r, col: c, n });
            }
        }
        // unique sorted entries, column-major, diagonal always present
        let mut entries: Vec<(usize, usize)> = coords.iter().map(|&(r, c)| (c, r)).collect();
        entries.extend((0..n).map(|j| (j, j)));
        entries.sort_unstable();
        entries.dedup();

        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        for &(c, r) in &entries {
            col_ptr[c + 1] += 1;
            row_idx.push(r);
        }
        for j in 0..n {
            col_ptr[j + 1] += col_ptr[j];
        }
        let pattern = SymmetricPattern { n, col_ptr, row_idx };

        let slots = coords
            .iter()
            .map(|&(r, c)| pattern.slot_of(r, c))
            .collect();
        Ok((pattern, slots))
    }

    /// Value-array index of upper-triangle entry (row, col).
    pub fn slot_of(&self, row: usize, col: usize) -> usize {
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        lo + self.row_idx[lo..hi]
            .binary_search(&row)
            .expect("entry must exist in pattern")
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }
}

/// Reusable LDL^T factorization workspace bound to one pattern.
#[derive(Debug)]
pub struct LdlFactorization {
    n: usize,
    // A's pattern
    a_col_ptr: Vec<usize>,
    a_row_idx: Vec<usize>,
    // elimination tree and symbolic column counts of L
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
    // numeric results
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    // workspaces
    l_next: Vec<usize>,
    y: Vec<f64>,
    pattern_stack: Vec<usize>,
    flag: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl LdlFactorization {
    /// Symbolic analysis: elimination tree and exact L column counts.
    pub fn analyze(pattern: &SymmetricPattern) -> Self {
        let n = pattern.n;
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut l_nz = vec![0usize; n];

        // A is stored by upper columns: column k holds rows i <= k,
        // exactly what the etree construction wants.
        for k in 0..n {
            flag[k] = k;
            for p in pattern.col_ptr[k]..pattern.col_ptr[k + 1] {
                let mut i = pattern.row_idx[p];
                while i < k && flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    l_nz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }

        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + l_nz[j];
        }
        let nnz_l = l_col_ptr[n];
        LdlFactorization {
            n,
            a_col_ptr: pattern.col_ptr.clone(),
            a_row_idx: pattern.row_idx.clone(),
            parent,
            l_col_ptr,
            l_row_idx: vec![0; nnz_l],
            l_values: vec![0.0; nnz_l],
            d: vec![0.0; n],
            l_next: vec![0; n],
            y: vec![0.0; n],
            pattern_stack: vec![0; n],
            flag: vec![NONE; n],
        }
    }

    /// Numeric factorization of the values attached to the analyzed
    /// pattern. Fails if a pivot is not strictly positive.
    pub fn refactor(&mut self, values: &[f64]) -> Result<(), SparseError> {
        debug_assert_eq!(values.len(), self.a_row_idx.len());
        let n = self.n;
        for j in 0..n {
            self.l_next[j] = self.l_col_ptr[j];
            self.flag[j] = NONE;
            self.y[j] = 0.0;
        }
        for k in 0..n {
            // pattern of row k of L, topologically ordered along the etree
            let mut top = n;
            self.flag[k] = k;
            for p in self.a_col_ptr[k]..self.a_col_ptr[k + 1] {
                let mut i = self.a_row_idx[p];
                self.y[i] += values[p];
                let mut len = 0;
                while self.flag[i] != k {
                    self.pattern_stack[len] = i;
                    len += 1;
                    self.flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    self.pattern_stack[top] = self.pattern_stack[len];
                }
            }
            // sparse triangular solve against the computed part of L
            let mut dk = self.y[k];
            self.y[k] = 0.0;
            for t in top..n {
                let i = self.pattern_stack[t];
                let yi = self.y[i];
                self.y[i] = 0.0;
                let pend = self.l_next[i];
                for p in self.l_col_ptr[i]..pend {
                    self.y[self.l_row_idx[p]] -= self.l_values[p] * yi;
                }
                let lki = yi / self.d[i];
                dk -= lki * yi;
                self.l_row_idx[pend] = k;
                self.l_values[pend] = lki;
                self.l_next[i] = pend + 1;
            }
            if !(dk > 0.0) || !dk.is_finite() {
                return Err(SparseError::NotPositiveDefinite {
                    column: k,
                    pivot: dk,
                });
            }
            self.d[k] = dk;
        }
        Ok(())
    }

    /// Solves A x = b in place using the current factorization.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        // L y = b
        for j in 0..self.n {
            let bj = b[j];
            if bj != 0.0 {
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    b[self.l_row_idx[p]] -= self.l_values[p] * bj;
                }
            }
        }
        // D z = y
        for j in 0..self.n {
            b[j] /= self.d[j];
        }
        // L^T x = z
        for j in (0..self.n).rev() {
            let mut acc = b[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * b[self.l_row_idx[p]];
            }
            b[j] = acc;
        }
    }

    /// ln det A = sum of ln of the pivots.
    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|&d| d.ln()).sum()
    }

    /// Diagonal of A^-1, one sparse forward solve per column:
    /// (A^-1)_cc = || D^-1/2 L^-1 e_c ||^2.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        let mut w = vec![0.0f64; n];
        let mut touched = Vec::new();
        for c in 0..n {
            w[c] = 1.0;
            touched.push(c);
            let mut acc = 0.0;
            for j in c..n {
                let wj = w[j];
                if wj == 0.0 {
                    continue;
                }
                acc += wj * wj / self.d[j];
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    let r = self.l_row_idx[p];
                    if w[r] == 0.0 {
                        touched.push(r);
                    }
                    w[r] -= self.l_values[p] * wj;
                }
            }
            out[c] = acc;
            for &t in &touched {
                w[t] = 0.0;
            }
            touched.clear();
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Fill-in diagnostic: nonzeros in L (strictly below the diagonal).
    pub fn l_nnz(&self) -> usize {
        self.l_row_idx.len()
    }
}
