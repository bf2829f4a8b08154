//! Penalized weighted least-squares core shared by the mixed models.
//!
//! Both the REML criterion and the Laplace objective reduce to repeated
//! solves of the bordered system
//!
//! ```text
//! [ L'Z'WZL + I   L'Z'WX ] [u*]   [ L'Z'Wz ]
//! [ X'WZL         X'WX   ] [b ] = [ X'Wz   ]
//! ```
//!
//! where `L` (Lambda) is the block-diagonal relative-standard-deviation
//! scaling of the random effects. The q x q block is factorized sparsely
//! (the fixed-effect block is a handful of columns and stays dense via a
//! Schur complement). Random-effect columns are ordered largest factor
//! first, which for crossed intercept designs keeps the factor fill
//! negligible.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::design::{DesignMatrices, GroupSpec};
use crate::sparse::{LdlFactorization, SparseError, SymmetricPattern};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("{what} has {got} rows, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("too few rows: n = {n} but the model has {needed} parameters")]
    TooFewRows { n: usize, needed: usize },
    #[error("fixed-effects matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("{what} did not converge after {n_iter} iterations (last change {last_change:e})")]
    NotConverged {
        what: &'static str,
        n_iter: usize,
        last_change: f64,
    },
    #[error("numerical failure: {message}")]
    Numerical { message: String },
    #[error("perfect separation detected on column `{column}` (|coefficient| > {limit})")]
    Separation { column: String, limit: f64 },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Fixed-effects input: named columns, no intercept (the fitters add it).
#[derive(Debug, Clone)]
pub struct FixedEffects {
    pub names: Vec<String>,
    pub n_rows: usize,
    /// Row-major n_rows x names.len().
    pub values: Vec<f64>,
}

impl FixedEffects {
    pub fn new(names: Vec<String>, n_rows: usize, values: Vec<f64>) -> Result<Self, FitError> {
        if values.len() != n_rows * names.len() {
            return Err(FitError::DimensionMismatch {
                what: "fixed-effects matrix",
                expected: n_rows * names.len(),
                got: values.len(),
            });
        }
        Ok(FixedEffects {
            names,
            n_rows,
            values,
        })
    }

    /// Intercept-only input.
    pub fn intercept_only(n_rows: usize) -> Self {
        FixedEffects {
            names: Vec::new(),
            n_rows,
            values: Vec::new(),
        }
    }

    pub fn from_design(design: &DesignMatrices) -> Self {
        FixedEffects {
            names: design.x_names.clone(),
            n_rows: design.n_rows(),
            values: design.x_f64(),
        }
    }

    pub fn p(&self) -> usize {
        self.names.len()
    }
}

/// Detects collinear columns of [1 | X] by pivoted Gram elimination and
/// names them.
pub fn check_full_rank(x: &FixedEffects) -> Result<(), FitError> {
    let n = x.n_rows;
    let p1 = x.p() + 1;
    let mut gram = vec![0.0f64; p1 * p1];
    for i in 0..n {
        let row = &x.values[i * x.p()..(i + 1) * x.p()];
        for a in 0..p1 {
            let xa = if a == 0 { 1.0 } else { row[a - 1] };
            if xa == 0.0 {
                continue;
            }
            for b in a..p1 {
                let xb = if b == 0 { 1.0 } else { row[b - 1] };
                gram[a * p1 + b] += xa * xb;
            }
        }
    }
    for a in 0..p1 {
        for b in 0..a {
            gram[a * p1 + b] = gram[b * p1 + a];
        }
    }
    // pivoted Cholesky; columns whose pivot collapses are dependent
    let mut dependent = Vec::new();
    let scale: Vec<f64> = (0..p1).map(|j| gram[j * p1 + j].max(1e-300)).collect();
    for k in 0..p1 {
        let pivot = gram[k * p1 + k];
        if pivot <= 1e-10 * scale[k] {
            dependent.push(if k == 0 {
                "intercept".to_string()
            } else {
                x.names[k - 1].clone()
            });
            continue;
        }
        for i in (k + 1)..p1 {
            let f = gram[i * p1 + k] / pivot;
            for j in k..p1 {
                gram[i * p1 + j] -= f * gram[k * p1 + j];
            }
        }
    }
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(FitError::RankDeficient {
            columns: dependent,
        })
    }
}

/// One factor's slice of the stacked random-effect vector.
#[derive(Debug, Clone)]
pub struct FactorLayout {
    pub name: String,
    pub n_groups: usize,
    /// Offset of this factor's block in the (permuted) u vector.
    pub offset: usize,
}

/// Solution of one bordered solve.
pub struct SystemSolution {
    /// Fixed effects, intercept first (length p + 1).
    pub coef: Vec<f64>,
    /// Spherical random effects u*, permuted factor layout.
    pub ustar: Vec<f64>,
    pub log_det_h: f64,
    pub log_det_s: f64,
    s_chol: Cholesky<f64, Dyn>,
}

impl SystemSolution {
    /// Covariance factor of the fixed effects: (X' V*^-1 X)^-1.
    pub fn s_inverse(&self) -> DMatrix<f64> {
        self.s_chol.inverse()
    }
}

/// Assembler for the penalized system, built once per fit and reused
/// across reweighted iterations.
pub struct PenalizedSystem {
    pub n: usize,
    /// Fixed columns including the intercept.
    pub p1: usize,
    pub q: usize,
    pub factors: Vec<FactorLayout>,
    x_names: Vec<String>,
    /// Row-major n x p1 with the intercept in column 0.
    x: Vec<f64>,
    /// n x n_factors permuted u-column of each row.
    row_cols: Vec<u32>,
    /// Factor index pairs (public order) for the H scatter, (a, b) a <= b.
    pairs: Vec<(usize, usize)>,
    /// n x pairs.len() slots into the H value array.
    slot_map: Vec<u32>,
    diag_slots: Vec<usize>,
    ldl: LdlFactorization,
    /// permuted position -> public factor index
    perm: Vec<usize>,
    // assembly buffers
    h_values: Vec<f64>,
    a_ux: Vec<f64>,
    a_xx: Vec<f64>,
    rhs_u: Vec<f64>,
    rhs_x: Vec<f64>,
    hinv_aux: Vec<f64>,
}

impl PenalizedSystem {
    pub fn new(x: &FixedEffects, groups: &[GroupSpec]) -> Result<Self, FitError> {
        let n = x.n_rows;
        for g in groups {
            if g.indices.len() != n {
                return Err(FitError::DimensionMismatch {
                    what: "group index vector",
                    expected: n,
                    got: g.indices.len(),
                });
            }
        }
        let n_factors = groups.len();
        let p1 = x.p() + 1;

        // eliminate the largest factors first
        let mut perm: Vec<usize> = (0..n_factors).collect();
        perm.sort_by(|&a, &b| groups[b].n_groups.cmp(&groups[a].n_groups).then(a.cmp(&b)));

        let mut factors = Vec::with_capacity(n_factors);
        let mut offset = 0usize;
        let mut offsets_by_public = vec![0usize; n_factors];
        for &f in &perm {
            offsets_by_public[f] = offset;
            factors.push(FactorLayout {
                name: groups[f].name.clone(),
                n_groups: groups[f].n_groups,
                offset,
            });
            offset += groups[f].n_groups;
        }
        let q = offset;
        // keep `factors` in public order for reporting
        factors.sort_by_key(|f| {
            groups
                .iter()
                .position(|g| g.name == f.name)
                .expect("factor names are unique")
        });

        let mut row_cols = vec![0u32; n * n_factors];
        for (f, g) in groups.iter().enumerate() {
            let base = offsets_by_public[f] as u32;
            for i in 0..n {
                row_cols[i * n_factors + f] = base + g.indices[i];
            }
        }

        let mut pairs = Vec::new();
        for a in 0..n_factors {
            for b in a..n_factors {
                pairs.push((a, b));
            }
        }

        // H pattern: all (col_a, col_b) pairs that co-occur on a row
        let mut coords = Vec::with_capacity(n * pairs.len());
        for i in 0..n {
            for &(a, b) in &pairs {
                let ca = row_cols[i * n_factors + a] as usize;
                let cb = row_cols[i * n_factors + b] as usize;
                coords.push((ca.min(cb), ca.max(cb)));
            }
        }
        let (pattern, slots) = SymmetricPattern::from_coordinates(q, &coords)?;
        let slot_map: Vec<u32> = slots.into_iter().map(|s| s as u32).collect();
        let diag_slots: Vec<usize> = (0..q).map(|c| pattern.slot_of(c, c)).collect();
        let nnz = pattern.nnz();
        let ldl = LdlFactorization::analyze(&pattern);

        // X with intercept, row-major
        let mut xm = vec![0.0f64; n * p1];
        for i in 0..n {
            xm[i * p1] = 1.0;
            for j in 0..x.p() {
                xm[i * p1 + 1 + j] = x.values[i * x.p() + j];
            }
        }

        Ok(PenalizedSystem {
            n,
            p1,
            q,
            factors,
            x_names: x.names.clone(),
            x: xm,
            row_cols,
            pairs,
            slot_map,
            diag_slots,
            ldl,
            perm,
            h_values: vec![0.0; nnz],
            a_ux: vec![0.0; q * p1],
            a_xx: vec![0.0; p1 * p1],
            rhs_u: vec![0.0; q],
            rhs_x: vec![0.0; p1],
            hinv_aux: vec![0.0; q * p1],
        })
    }

    pub fn n_factors(&self) -> usize {
        self.perm.len()
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    /// Linear predictor eta = X b + Z Lambda u*.
    pub fn linear_predictor(&self, coef: &[f64], ustar: &[f64], lambda: &[f64], eta: &mut [f64]) {
        let nf = self.n_factors();
        for i in 0..self.n {
            let mut acc = 0.0;
            for j in 0..self.p1 {
                acc += self.x[i * self.p1 + j] * coef[j];
            }
            for f in 0..nf {
                acc += lambda[f] * ustar[self.row_cols[i * nf + f] as usize];
            }
            eta[i] = acc;
        }
    }

    /// Assembles and solves the bordered system for the given relative
    /// standard deviations, row weights (`None` = unweighted) and
    /// working response `z`.
    pub fn solve(
        &mut self,
        lambda: &[f64],
        weights: Option<&[f64]>,
        z: &[f64],
    ) -> Result<SystemSolution, FitError> {
        let nf = self.n_factors();
        debug_assert_eq!(lambda.len(), nf);
        debug_assert_eq!(z.len(), self.n);

        let lam_prod: Vec<f64> = self
            .pairs
            .iter()
            .map(|&(a, b)| lambda[a] * lambda[b])
            .collect();

        self.h_values.iter_mut().for_each(|v| *v = 0.0);
        self.a_ux.iter_mut().for_each(|v| *v = 0.0);
        self.a_xx.iter_mut().for_each(|v| *v = 0.0);
        self.rhs_u.iter_mut().for_each(|v| *v = 0.0);
        self.rhs_x.iter_mut().for_each(|v| *v = 0.0);

        let np = self.pairs.len();
        for i in 0..self.n {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let wz = w * z[i];
            for (k, lp) in lam_prod.iter().enumerate() {
                self.h_values[self.slot_map[i * np + k] as usize] += w * lp;
            }
            let xrow = &self.x[i * self.p1..(i + 1) * self.p1];
            for f in 0..nf {
                let c = self.row_cols[i * nf + f] as usize;
                let lw = lambda[f] * w;
                for (j, &xj) in xrow.iter().enumerate() {
                    if xj != 0.0 {
                        self.a_ux[j * self.q + c] += lw * xj;
                    }
                }
                self.rhs_u[c] += lambda[f] * wz;
            }
            for (a, &xa) in xrow.iter().enumerate() {
                if xa == 0.0 {
                    continue;
                }
                self.rhs_x[a] += xa * wz;
                for (b, &xb) in xrow.iter().enumerate().skip(a) {
                    if xb != 0.0 {
                        self.a_xx[a * self.p1 + b] += w * xa * xb;
                    }
                }
            }
        }
        for a in 0..self.p1 {
            for b in 0..a {
                self.a_xx[a * self.p1 + b] = self.a_xx[b * self.p1 + a];
            }
        }
        // + I on the random block
        for &s in &self.diag_slots {
            self.h_values[s] += 1.0;
        }

        self.ldl.refactor(&self.h_values)?;
        let log_det_h = self.ldl.log_det();

        // hinv_aux = H^{-1} A_ux, column by column
        for j in 0..self.p1 {
            let col = &mut self.hinv_aux[j * self.q..(j + 1) * self.q];
            col.copy_from_slice(&self.a_ux[j * self.q..(j + 1) * self.q]);
            self.ldl.solve_in_place(col);
        }

        // Schur complement S = A_xx - A_ux' H^{-1} A_ux
        let mut s = DMatrix::<f64>::zeros(self.p1, self.p1);
        for a in 0..self.p1 {
            for b in a..self.p1 {
                let mut dot = 0.0;
                let ca = &self.a_ux[a * self.q..(a + 1) * self.q];
                let cb = &self.hinv_aux[b * self.q..(b + 1) * self.q];
                for k in 0..self.q {
                    dot += ca[k] * cb[k];
                }
                let v = self.a_xx[a * self.p1 + b] - dot;
                s[(a, b)] = v;
                s[(b, a)] = v;
            }
        }
        let s_chol = Cholesky::new(s).ok_or_else(|| FitError::Numerical {
            message: "fixed-effects Schur complement is not positive definite".to_string(),
        })?;
        let log_det_s = 2.0 * s_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        // c1 = H^{-1} rhs_u
        let mut c1 = self.rhs_u.clone();
        self.ldl.solve_in_place(&mut c1);

        // beta = S^{-1} (rhs_x - A_ux' c1)
        let mut rhs_beta = DVector::<f64>::zeros(self.p1);
        for j in 0..self.p1 {
            let mut dot = 0.0;
            let cj = &self.a_ux[j * self.q..(j + 1) * self.q];
            for k in 0..self.q {
                dot += cj[k] * c1[k];
            }
            rhs_beta[j] = self.rhs_x[j] - dot;
        }
        let beta = s_chol.solve(&rhs_beta);

        // u* = c1 - H^{-1} A_ux beta
        let mut ustar = c1;
        for j in 0..self.p1 {
            let bj = beta[j];
            if bj != 0.0 {
                let cj = &self.hinv_aux[j * self.q..(j + 1) * self.q];
                for k in 0..self.q {
                    ustar[k] -= bj * cj[k];
                }
            }
        }

        Ok(SystemSolution {
            coef: beta.iter().copied().collect(),
            ustar,
            log_det_h,
            log_det_s,
            s_chol,
        })
    }

    /// Per-factor traces of the u-block of the inverse bordered system,
    /// in public factor order. Valid right after [`Self::solve`], whose
    /// factorization and H^-1 A_ux buffer it reuses:
    /// (A^-1)_uu = H^-1 + (H^-1 A_ux) S^-1 (H^-1 A_ux)'.
    pub fn u_inverse_block_traces(&self, solution: &SystemSolution) -> Vec<f64> {
        let h_diag = self.ldl.inverse_diagonal();
        let s_inv = solution.s_inverse();
        self.factors
            .iter()
            .map(|layout| {
                let mut acc = 0.0;
                for c in layout.offset..layout.offset + layout.n_groups {
                    acc += h_diag[c];
                    for a in 0..self.p1 {
                        let ra = self.hinv_aux[a * self.q + c];
                        if ra == 0.0 {
                            continue;
                        }
                        for b in 0..self.p1 {
                            acc += ra * s_inv[(a, b)] * self.hinv_aux[b * self.q + c];
                        }
                    }
                }
                acc
            })
            .collect()
    }

    /// Spherical-mode squared norms per factor, public order.
    pub fn ustar_block_norms(&self, ustar: &[f64]) -> Vec<f64> {
        self.factors
            .iter()
            .map(|layout| {
                ustar[layout.offset..layout.offset + layout.n_groups]
                    .iter()
                    .map(|u| u * u)
                    .sum()
            })
            .collect()
    }

    /// Maps the permuted spherical vector to per-factor natural-scale
    /// conditional modes (u = lambda * u*), in public factor order.
    pub fn conditional_modes(&self, ustar: &[f64], lambda: &[f64]) -> Vec<Vec<f64>> {
        self.factors
            .iter()
            .enumerate()
            .map(|(f, layout)| {
                (0..layout.n_groups)
                    .map(|g| lambda[f] * ustar[layout.offset + g])
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_way_groups(n_groups: usize, per_group: usize) -> GroupSpec {
        let indices: Vec<u32> = (0..n_groups as u32)
            .flat_map(|g| std::iter::repeat_n(g, per_group))
            .collect();
        GroupSpec {
            name: "group".into(),
            n_groups,
            levels: (0..n_groups).map(|g| format!("g{g}")).collect(),
            indices,
        }
    }

    #[test]
    fn unpenalized_solve_is_ols() {
        // lambda = 0 shrinks u* to zero and the coefficients to OLS
        let n = 12;
        let mut rng = crate::rng::CounterRng::from_stream(4, &[1]);
        let xcol: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = xcol.iter().map(|x| 1.5 + 2.0 * x).collect();
        let x = FixedEffects::new(vec!["x".into()], n, xcol.clone()).unwrap();
        let groups = vec![one_way_groups(3, 4)];
        let mut sys = PenalizedSystem::new(&x, &groups).unwrap();
        let sol = sys.solve(&[0.0], None, &y).unwrap();
        assert_relative_eq!(sol.coef[0], 1.5, epsilon = 1e-10);
        assert_relative_eq!(sol.coef[1], 2.0, epsilon = 1e-10);
        assert!(sol.ustar.iter().all(|&u| u.abs() < 1e-12));
        assert_relative_eq!(sol.log_det_h, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_matches_dense_bordered_system() {
        let n = 30;
        let mut rng = crate::rng::CounterRng::from_stream(8, &[3]);
        let xcol: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0 + 1.0).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.5).collect();
        let g1 = one_way_groups(5, 6);
        let g2 = GroupSpec {
            name: "crossed".into(),
            n_groups: 3,
            levels: vec!["a".into(), "b".into(), "c".into()],
            indices: (0..n as u32).map(|i| i % 3).collect(),
        };
        let lambda = [0.7, 1.3];

        let x = FixedEffects::new(vec!["x".into()], n, xcol.clone()).unwrap();
        let mut sys = PenalizedSystem::new(&x, &[g1.clone(), g2.clone()]).unwrap();
        let sol = sys.solve(&lambda, Some(&w), &y).unwrap();

        // dense oracle: build [ZL X] and solve the full normal equations
        let q = 8;
        let p1 = 2;
        let dim = q + p1;
        let mut zl = vec![vec![0.0f64; q]; n];
        for i in 0..n {
            // permuted layout: largest factor (g1, 5 groups) first
            zl[i][g1.indices[i] as usize] = lambda[0];
            zl[i][5 + g2.indices[i] as usize] = lambda[1];
        }
        let mut full = vec![vec![0.0f64; dim]; dim];
        let mut rhs = vec![0.0f64; dim];
        for i in 0..n {
            let mut row = zl[i].clone();
            row.push(1.0);
            row.push(xcol[i]);
            for a in 0..dim {
                rhs[a] += w[i] * row[a] * y[i];
                for b in 0..dim {
                    full[a][b] += w[i] * row[a] * row[b];
                }
            }
        }
        for k in 0..q {
            full[k][k] += 1.0;
        }
        // gaussian elimination
        let mut m = full.clone();
        let mut sol_dense = rhs.clone();
        for i in 0..dim {
            let piv = m[i][i];
            for j in i..dim {
                m[i][j] /= piv;
            }
            sol_dense[i] /= piv;
            for r in 0..dim {
                if r != i && m[r][i] != 0.0 {
                    let f = m[r][i];
                    for j in i..dim {
                        m[r][j] -= f * m[i][j];
                    }
                    sol_dense[r] -= f * sol_dense[i];
                }
            }
        }
        for k in 0..q {
            assert_relative_eq!(sol.ustar[k], sol_dense[k], epsilon = 1e-8);
        }
        assert_relative_eq!(sol.coef[0], sol_dense[q], epsilon = 1e-8);
        assert_relative_eq!(sol.coef[1], sol_dense[q + 1], epsilon = 1e-8);
    }

    #[test]
    fn rank_check_names_duplicate_column() {
        let n = 10;
        let mut rng = crate::rng::CounterRng::from_stream(2, &[6]);
        let base: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut values = Vec::new();
        for &v in &base {
            values.push(v);
            values.push(2.0 * v);
        }
        let x = FixedEffects::new(vec!["a".into(), "a_scaled".into()], n, values).unwrap();
        let err = check_full_rank(&x).unwrap_err();
        match err {
            FitError::RankDeficient { columns } => {
                assert_eq!(columns, vec!["a_scaled".to_string()]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rank_check_accepts_independent_columns() {
        let n = 20;
        let mut rng = crate::rng::CounterRng::from_stream(2, &[7]);
        let values: Vec<f64> = (0..2 * n).map(|_| rng.normal()).collect();
        let x = FixedEffects::new(vec!["a".into(), "b".into()], n, values).unwrap();
        check_full_rank(&x).unwrap();
    }

    #[test]
    fn no_factors_reduces_to_weighted_ls() {
        let n = 8;
        let xcol: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = xcol.iter().map(|x| 3.0 - 0.5 * x).collect();
        let x = FixedEffects::new(vec!["x".into()], n, xcol).unwrap();
        let mut sys = PenalizedSystem::new(&x, &[]).unwrap();
        let sol = sys.solve(&[], None, &y).unwrap();
        assert_relative_eq!(sol.coef[0], 3.0, epsilon = 1e-10);
        assert_relative_eq!(sol.coef[1], -0.5, epsilon = 1e-10);
        assert!(sol.ustar.is_empty());
    }
}
