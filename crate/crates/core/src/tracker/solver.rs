use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::error::{Error, Result};

/// Gauss-Newton normal equations over 6×6 blocks: `(H + μI) δ = rhs`.
///
/// Diagonal blocks are stored without damping; off-diagonal blocks are stored
/// once per unordered pair as the `(i, j)` block with `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSparseSystem {
    diag: Vec<Matrix6<f64>>,
    off: Vec<((usize, usize), Matrix6<f64>)>,
    rhs: Vec<Vector6<f64>>,
    pub damping: f64,
}

/// Accumulates block contributions before freezing them into a [`BlockSparseSystem`].
#[derive(Clone, Debug)]
pub struct SystemBuilder {
    diag: Vec<Matrix6<f64>>,
    off: HashMap<(usize, usize), Matrix6<f64>>,
    rhs: Vec<Vector6<f64>>,
}

impl SystemBuilder {
    pub fn new(blocks: usize) -> Self {
        Self {
            diag: vec![Matrix6::zeros(); blocks],
            off: HashMap::new(),
            rhs: vec![Vector6::zeros(); blocks],
        }
    }

    /// Adds `Jᵀ J` and `−Jᵀ r` for a residual of any dimension whose Jacobian is split into
    /// per-block column groups `(block, J_block)`.
    pub fn add_residual<const R: usize>(
        &mut self,
        r: &nalgebra::SVector<f64, R>,
        jacobians: &[(usize, nalgebra::SMatrix<f64, R, 6>)],
    ) {
        for (a, (bi, ji)) in jacobians.iter().enumerate() {
            self.rhs[*bi] -= ji.transpose() * r;
            self.diag[*bi] += ji.transpose() * ji;
            for (bj, jj) in &jacobians[a + 1..] {
                self.add_pair(*bi, *bj, &(ji.transpose() * jj));
            }
        }
    }

    /// Adds block `(i, j)` of the Hessian (and implicitly its transpose at `(j, i)`).
    pub fn add_pair(&mut self, i: usize, j: usize, m: &Matrix6<f64>) {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => *self.off.entry((i, j)).or_insert_with(Matrix6::zeros) += m,
            std::cmp::Ordering::Greater => {
                *self.off.entry((j, i)).or_insert_with(Matrix6::zeros) += m.transpose()
            }
            std::cmp::Ordering::Equal => self.diag[i] += m + m.transpose(),
        }
    }

    pub fn add_diag(&mut self, i: usize, m: &Matrix6<f64>) {
        self.diag[i] += m;
    }

    pub fn add_rhs(&mut self, i: usize, v: &Vector6<f64>) {
        self.rhs[i] += v;
    }

    pub fn build(self, damping: f64) -> BlockSparseSystem {
        let mut off: Vec<_> = self.off.into_iter().collect();
        off.sort_by_key(|(k, _)| *k);
        BlockSparseSystem {
            diag: self.diag,
            off,
            rhs: self.rhs,
            damping,
        }
    }
}

impl BlockSparseSystem {
    pub fn block_count(&self) -> usize {
        self.diag.len()
    }

    pub fn rhs(&self) -> &[Vector6<f64>] {
        &self.rhs
    }

    pub fn diagonal(&self, i: usize) -> &Matrix6<f64> {
        &self.diag[i]
    }

    pub fn off_diagonal(&self) -> &[((usize, usize), Matrix6<f64>)] {
        &self.off
    }

    /// Damped diagonal block `H_ii + μI`.
    pub fn damped_diagonal(&self, i: usize) -> Matrix6<f64> {
        self.diag[i] + Matrix6::identity() * self.damping
    }

    /// `(H + μI) x`.
    pub fn apply(&self, x: &[Vector6<f64>]) -> Vec<Vector6<f64>> {
        let mut y: Vec<Vector6<f64>> = self
            .diag
            .iter()
            .zip(x)
            .map(|(d, xi)| d * xi + xi * self.damping)
            .collect();
        for ((i, j), m) in &self.off {
            y[*i] += m * x[*j];
            y[*j] += m.tr_mul(&x[*i]);
        }
        y
    }

    /// Dense `H + μI`, for tests and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.block_count() * 6;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..self.block_count() {
            h.fixed_view_mut::<6, 6>(6 * i, 6 * i).copy_from(&self.damped_diagonal(i));
        }
        for ((i, j), m) in &self.off {
            let mut upper = h.fixed_view_mut::<6, 6>(6 * i, 6 * j);
            upper += m;
            let mut lower = h.fixed_view_mut::<6, 6>(6 * j, 6 * i);
            lower += m.transpose();
        }
        h
    }

    pub fn rhs_dense(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rhs.len() * 6,
            self.rhs.iter().flat_map(|v| v.iter().copied()),
        )
    }

    /// From a dense symmetric matrix, keeping nonzero 6×6 blocks.
    pub fn from_dense(h: &DMatrix<f64>, rhs: &DVector<f64>, damping: f64) -> Self {
        let blocks = h.nrows() / 6;
        let mut b = SystemBuilder::new(blocks);
        for i in 0..blocks {
            b.add_diag(i, &h.fixed_view::<6, 6>(6 * i, 6 * i).into_owned());
            b.add_rhs(i, &rhs.fixed_rows::<6>(6 * i).into_owned());
            for j in i + 1..blocks {
                let m = h.fixed_view::<6, 6>(6 * i, 6 * j).into_owned();
                if m.iter().any(|&v| v != 0.0) {
                    b.add_pair(i, j, &m);
                }
            }
        }
        b.build(damping)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcgSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcgResult {
    pub solution: Vec<Vector6<f64>>,
    pub iterations: usize,
    /// Final relative preconditioned residual `sqrt(rᵀ M⁻¹ r / r₀ᵀ M⁻¹ r₀)`.
    pub residual: f64,
}

fn dot(a: &[Vector6<f64>], b: &[Vector6<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub fn pcg_solve(system: &BlockSparseSystem, settings: &PcgSettings) -> Result<PcgResult> {
    pcg_solve_observed(system, settings, |_, _| {})
}

/// PCG with a block-Jacobi preconditioner; `observe` sees each iterate.
pub fn pcg_solve_observed(
    system: &BlockSparseSystem,
    settings: &PcgSettings,
    mut observe: impl FnMut(usize, &[Vector6<f64>]),
) -> Result<PcgResult> {
    let n = system.block_count();
    let precond = (0..n)
        .map(|i| {
            system
                .damped_diagonal(i)
                .cholesky()
                .ok_or(Error::SingularBlock { block: i })
        })
        .collect::<Result<Vec<_>>>()?;
    let precondition = |r: &[Vector6<f64>]| -> Vec<Vector6<f64>> {
        precond.iter().zip(r).map(|(c, ri)| c.solve(ri)).collect()
    };

    let mut x = vec![Vector6::zeros(); n];
    let mut r = system.rhs.clone();
    let mut z = precondition(&r);
    let mut rz = dot(&r, &z);
    let rz0 = rz;
    if !(rz0 > 0.0) {
        return Ok(PcgResult {
            solution: x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut p = z.clone();
    let mut iterations = 0;
    let mut residual = 1.0;
    while iterations < settings.max_iterations && residual > settings.tolerance {
        let ap = system.apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        iterations += 1;
        observe(iterations, &x);
        z = precondition(&r);
        let rz_next = dot(&r, &z);
        residual = (rz_next.max(0.0) / rz0).sqrt();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
    }
    Ok(PcgResult {
        solution: x,
        iterations,
        residual,
    })
}
