use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric block-tridiagonal matrix with square blocks of equal size.
///
/// `lower[k]` is the block below the diagonal in block row `k + 1`, i.e. `H[k+1][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    pub lower: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn zeros(blocks: usize, size: usize) -> Self {
        BlockTridiagonal {
            diag: vec![DMatrix::zeros(size, size); blocks],
            lower: vec![DMatrix::zeros(size, size); blocks.saturating_sub(1)],
        }
    }

    pub fn block_count(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |d| d.nrows())
    }

    pub fn dim(&self) -> usize {
        self.block_count() * self.block_size()
    }

    fn check(&self) -> Result<()> {
        let s = self.block_size();
        if self.lower.len() + 1 != self.diag.len() && !self.diag.is_empty() {
            return Err(Error::dimension(
                "block-tridiagonal off-diagonal count",
                self.diag.len() - 1,
                self.lower.len(),
            ));
        }
        for b in self.diag.iter().chain(self.lower.iter()) {
            if b.shape() != (s, s) {
                return Err(Error::dimension("block-tridiagonal block", s, b.nrows()));
            }
        }
        Ok(())
    }

    /// Adds `mu * max(H_ii, floor)` to every diagonal entry.
    pub fn add_scaled_diagonal(&mut self, mu: f64, floor: f64) {
        for d in &mut self.diag {
            for i in 0..d.nrows() {
                d[(i, i)] += mu * d[(i, i)].max(floor);
            }
        }
    }

    pub fn max_diagonal(&self) -> f64 {
        self.diag
            .iter()
            .flat_map(|d| (0..d.nrows()).map(move |i| d[(i, i)]))
            .fold(0.0, f64::max)
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = self.block_size();
        let mut out = DVector::zeros(x.len());
        for k in 0..self.block_count() {
            let xk = x.rows(k * s, s);
            let mut acc = &self.diag[k] * xk;
            if k > 0 {
                acc += &self.lower[k - 1] * x.rows((k - 1) * s, s);
            }
            if k + 1 < self.block_count() {
                acc += self.lower[k].tr_mul(&x.rows((k + 1) * s, s).into_owned());
            }
            out.rows_mut(k * s, s).copy_from(&acc);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let s = self.block_size();
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (k, d) in self.diag.iter().enumerate() {
            out.view_mut((k * s, k * s), (s, s)).copy_from(d);
        }
        for (k, l) in self.lower.iter().enumerate() {
            out.view_mut(((k + 1) * s, k * s), (s, s)).copy_from(l);
            out.view_mut((k * s, (k + 1) * s), (s, s)).copy_from(&l.transpose());
        }
        out
    }

    /// Block Cholesky factorization `H = L L^T` in `O(K s^3)` for `K` blocks of size `s`.
    pub fn factor(&self) -> Result<BlockCholesky> {
        self.check()?;
        let mut diag: Vec<DMatrix<f64>> = Vec::with_capacity(self.block_count());
        let mut coupling: Vec<DMatrix<f64>> = Vec::with_capacity(self.lower.len());
        for k in 0..self.block_count() {
            let mut schur = self.diag[k].clone();
            if k > 0 {
                // C = H[k][k-1] L[k-1]^{-T}, computed as (L[k-1]^{-1} H[k][k-1]^T)^T.
                let mut ct = self.lower[k - 1].transpose();
                diag[k - 1].solve_lower_triangular_mut(&mut ct);
                schur -= ct.tr_mul(&ct);
                coupling.push(ct.transpose());
            }
            let chol = schur.cholesky().ok_or_else(|| {
                Error::Factorization(format!("block {k} of the normal equations is not positive definite"))
            })?;
            diag.push(chol.unpack());
        }
        Ok(BlockCholesky { diag, coupling })
    }
}

/// Factor of a [`BlockTridiagonal`] matrix: lower block-bidiagonal with Cholesky
/// factors on the diagonal and coupling blocks below it.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    diag: Vec<DMatrix<f64>>,
    coupling: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |d| d.nrows())
    }

    /// Solves `H X = B` in place for a matrix of right-hand sides.
    pub fn solve_mut(&self, b: &mut DMatrix<f64>) {
        let s = self.block_size();
        let blocks = self.diag.len();
        // Forward substitution with L.
        for k in 0..blocks {
            if k > 0 {
                let prev = b.rows((k - 1) * s, s).into_owned();
                let update = &self.coupling[k - 1] * prev;
                let mut rows = b.rows_mut(k * s, s);
                rows -= update;
            }
            let mut rows = b.rows(k * s, s).into_owned();
            self.diag[k].solve_lower_triangular_mut(&mut rows);
            b.rows_mut(k * s, s).copy_from(&rows);
        }
        // Back substitution with L^T.
        for k in (0..blocks).rev() {
            if k + 1 < blocks {
                let next = b.rows((k + 1) * s, s).into_owned();
                let update = self.coupling[k].tr_mul(&next);
                let mut rows = b.rows_mut(k * s, s);
                rows -= update;
            }
            let mut rows = b.rows(k * s, s).into_owned();
            self.diag[k].tr_solve_lower_triangular_mut(&mut rows);
            b.rows_mut(k * s, s).copy_from(&rows);
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut b = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        self.solve_mut(&mut b);
        b.column(0).into_owned()
    }
}

/// Solves the symmetric positive definite block-tridiagonal system defined by its
/// diagonal blocks and the blocks below the diagonal.
pub fn block_tridiag_solve(
    diag_blocks: &[DMatrix<f64>],
    offdiag_blocks: &[DMatrix<f64>],
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let system = BlockTridiagonal {
        diag: diag_blocks.to_vec(),
        lower: offdiag_blocks.to_vec(),
    };
    if rhs.len() != system.dim() {
        return Err(Error::dimension("block-tridiagonal right-hand side", system.dim(), rhs.len()));
    }
    Ok(system.factor()?.solve(rhs))
}
