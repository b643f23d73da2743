//! Small dense helpers shared by the model, the filters and the MPCs.

use nalgebra::{DMatrix, SMatrix};

/// Zero-order-hold discretization of `dx/dt = a x + m w` with `w` held over
/// `ts`, via the exponential of the block matrix `[[a, m], [0, 0]] * ts`.
/// Returns `(exp(a ts), ∫₀^ts exp(a s) ds · m)`.
pub fn zoh(a: &DMatrix<f64>, m: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let k = m.ncols();
    let mut block = DMatrix::zeros(n + k, n + k);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, k)).copy_from(m);
    let e = (block * ts).exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, k)).into_owned(),
    )
}

/// Van Loan's method: transition matrix and discrete process-noise covariance
/// `∫₀^ts exp(a s) q exp(a s)' ds` for `dx = a x dt + dω`, `E[dω dω'] = q dt`.
pub fn van_loan(a: &DMatrix<f64>, q: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a));
    block.view_mut((0, n), (n, n)).copy_from(q);
    block.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = (block * ts).exp();
    let phi = e.view((n, n), (n, n)).transpose();
    let qd = &phi * e.view((0, n), (n, n));
    let qd = (&qd + qd.transpose()) * 0.5;
    (phi, qd)
}

pub fn symmetrize<const N: usize>(m: &mut SMatrix<f64, N, N>) {
    for i in 0..N {
        for j in (i + 1)..N {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

pub fn to_smatrix<const R: usize, const C: usize>(m: &DMatrix<f64>) -> SMatrix<f64, R, C> {
    assert_eq!((m.nrows(), m.ncols()), (R, C), "dimension mismatch");
    SMatrix::from_column_slice(m.as_slice())
}
