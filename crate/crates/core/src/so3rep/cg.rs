use nalgebra::{DMatrix, Matrix3};

use super::wigner::IrrepTable;
use super::{So3Error, L_MAX};
use crate::geom3d::euler_zyx_matrix;

/// The null vector is accepted when the smallest eigenvalue of the stacked
/// system is below `NULL_TOL` and the next one is above `GAP_MIN`.
const NULL_TOL: f64 = 1e-9;
const GAP_MIN: f64 = 1e-3;

/// Change of basis for the tensor product `D_j ⊗ D_l`.
///
/// Vectorization is row-major: a `(2j+1) × (2l+1)` matrix `X` maps to
/// `vec(X)[a (2l+1) + b] = X[a, b]`, so `vec(D_j X D_lᵀ) = (D_j ⊗ D_l) vec(X)`.
/// `Q` stacks one block of rows per output order `J = |j−l| ..= j+l`, in
/// ascending `J`, and satisfies `Q (D_j ⊗ D_l) Qᵀ = ⊕_J D_J`.
#[derive(Debug, Clone)]
pub struct CgBasis {
    pub l: usize,
    pub j: usize,
    q: DMatrix<f64>,
    blocks: Vec<DMatrix<f64>>,
}

impl CgBasis {
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn orders(&self) -> std::ops::RangeInclusive<usize> {
        self.l.abs_diff(self.j)..=self.l + self.j
    }

    /// Rows of `Q` belonging to order `J`, shape `(2J+1) × (2j+1)(2l+1)`.
    pub fn block(&self, order: usize) -> &DMatrix<f64> {
        let lo = self.l.abs_diff(self.j);
        assert!(
            self.orders().contains(&order),
            "order {order} not in tensor product"
        );
        &self.blocks[order - lo]
    }

    /// `D_j(r) ⊗ D_l(r)`.
    pub fn product_rep(&self, table: &IrrepTable, r: &Matrix3<f64>) -> DMatrix<f64> {
        table
            .wigner_d(self.j, r)
            .kronecker(&table.wigner_d(self.l, r))
    }

    /// Largest absolute deviation of `Q (D_j ⊗ D_l) Qᵀ` from `⊕ D_J`.
    pub fn residual(&self, table: &IrrepTable, r: &Matrix3<f64>) -> f64 {
        let conj = &self.q * self.product_rep(table, r) * self.q.transpose();
        let d = conj.nrows();
        let mut target = DMatrix::zeros(d, d);
        let mut off = 0;
        for order in self.orders() {
            let k = 2 * order + 1;
            target
                .view_mut((off, off), (k, k))
                .copy_from(&table.wigner_d(order, r));
            off += k;
        }
        (conj - target).abs().max()
    }
}

fn probe_rotations() -> [Matrix3<f64>; 3] {
    [
        euler_zyx_matrix(23.0, -41.0, 67.0),
        euler_zyx_matrix(-113.0, 17.0, 151.0),
        euler_zyx_matrix(71.0, 58.0, -29.0),
    ]
}

/// Solves `B A(r) = D_J(r) B` for the `(2J+1) × d` intertwiner `B`, normalized
/// so `B Bᵀ = I` and with its first significant entry positive.
fn intertwiner(
    table: &IrrepTable,
    l: usize,
    j: usize,
    order: usize,
) -> Result<DMatrix<f64>, So3Error> {
    let d = (2 * j + 1) * (2 * l + 1);
    let k = 2 * order + 1;
    let n = k * d;
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for r in probe_rotations() {
        let a = table.wigner_d(j, &r).kronecker(&table.wigner_d(l, &r));
        let dj = table.wigner_d(order, &r);
        // Row-major vec(B A) = (I ⊗ Aᵀ) vec(B), vec(D B) = (D ⊗ I) vec(B).
        let m = DMatrix::<f64>::identity(k, k).kronecker(&a.transpose())
            - dj.kronecker(&DMatrix::<f64>::identity(d, d));
        gram += m.transpose() * &m;
    }
    let eig = gram.symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let smallest = eig.eigenvalues[idx[0]].abs();
    let next = idx.get(1).map_or(f64::INFINITY, |&i| eig.eigenvalues[i]);
    if smallest > NULL_TOL || next < GAP_MIN {
        return Err(So3Error::NoIntertwiner { l, j, order });
    }
    let v = eig.eigenvectors.column(idx[0]);
    let mut b = DMatrix::from_row_slice(k, d, v.as_slice());
    // Schur: B Bᵀ is a multiple of the identity.
    let scale = (k as f64 / b.norm_squared()).sqrt();
    b *= scale;
    if let Some(first) = b.transpose().iter().find(|x| x.abs() > 1e-8) {
        if *first < 0.0 {
            b = -b;
        }
    }
    Ok(b)
}

/// Builds the change of basis for `D_j ⊗ D_l` (output order `j`, input order `l`).
pub fn cg_change_of_basis(l: usize, j: usize) -> Result<CgBasis, So3Error> {
    if l > L_MAX || j > L_MAX {
        return Err(So3Error::OrderTooHigh(l.max(j)));
    }
    if l + j > L_MAX {
        return Err(So3Error::OrderTooHigh(l + j));
    }
    let table = IrrepTable::global();
    let d = (2 * j + 1) * (2 * l + 1);
    let mut q = DMatrix::zeros(d, d);
    let mut blocks = Vec::new();
    let mut off = 0;
    for order in l.abs_diff(j)..=l + j {
        let b = intertwiner(table, l, j, order)?;
        q.view_mut((off, 0), (b.nrows(), d)).copy_from(&b);
        off += b.nrows();
        blocks.push(b);
    }
    debug_assert_eq!(off, d);
    Ok(CgBasis { l, j, q, blocks })
}
