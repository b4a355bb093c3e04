//! Small dense helpers shared by the structured-matrix code.
//!
//! Everything in here operates on matrices whose size is a component width
//! (N×N) or an explicitly dense fallback; none of it is meant for D×D work on
//! the hot path.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::evd::{self, SelfAdjointEvdParams};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter used for the single Cholesky retry.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Cholesky factorisation with one jittered retry.
///
/// On failure the diagonal is inflated by `1e-10 * trace / n` and the
/// factorisation is attempted once more before giving up.
pub fn cholesky_jittered(m: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(Cholesky::new(m).expect("empty Cholesky"));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let trace = m.trace();
    let eps = CHOLESKY_JITTER * trace.abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut jittered = m;
    for i in 0..n {
        jittered[(i, i)] += eps;
    }
    Cholesky::new(jittered).ok_or_else(|| Error::not_pd(context.to_string()))
}

/// Cholesky factorisation without any retry.
pub fn cholesky_strict(m: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() == 0 {
        return Ok(Cholesky::new(m).expect("empty Cholesky"));
    }
    Cholesky::new(m).ok_or_else(|| Error::not_pd(context.to_string()))
}

/// Solve `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if l.nrows() == 0 {
        return DMatrix::zeros(0, b.ncols());
    }
    l.solve_lower_triangular(b)
        .expect("triangular factor from a successful Cholesky is invertible")
}

/// `L⁻¹` for a lower-triangular `L` with nonzero diagonal. Column `j` of
/// the inverse is zero above row `j`, so each solve starts there.
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut x = out.column_mut(j);
        x[j] = 1.0;
        for k in j..n {
            let xk = x[k] / l[(k, k)];
            x[k] = xk;
            if xk != 0.0 {
                let col = l.column(k);
                for i in k + 1..n {
                    x[i] -= col[i] * xk;
                }
            }
        }
    }
    out
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Ties keep the order returned by the decomposition.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let s = symmetrize(m);
    let mut vals = faer::Col::<f64>::zeros(n);
    let mut u = faer::Mat::<f64>::zeros(n, n);
    // QR iteration on the tridiagonal form: its workspace stays at one n×n
    // temporary, where divide and conquer needs several
    let params: faer::Spec<SelfAdjointEvdParams, f64> = SelfAdjointEvdParams {
        recursion_threshold: usize::MAX,
        ..<SelfAdjointEvdParams as faer::Auto<f64>>::auto()
    }
    .into();
    let mut buf = MemBuffer::new(evd::self_adjoint_evd_scratch::<f64>(
        n,
        evd::ComputeEigenvectors::Yes,
        faer::Par::Seq,
        params,
    ));
    let solved = evd::self_adjoint_evd(
        to_faer(&s).as_ref(),
        vals.as_diagonal_mut(),
        Some(u.as_mut()),
        faer::Par::Seq,
        MemStack::new(&mut buf),
        params,
    );
    if solved.is_err() {
        // nalgebra's solver is slower but does not give up
        let eig = s.symmetric_eigen();
        return sorted_desc(eig.eigenvalues.as_slice(), |i| {
            eig.eigenvectors.column(i).into_owned()
        });
    }
    let vals: Vec<f64> = vals.iter().copied().collect();
    sorted_desc(&vals, |i| DVector::from_fn(n, |r, _| u[(r, i)]))
}

fn sorted_desc(
    vals: &[f64],
    column: impl Fn(usize) -> DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| vals[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &column(src));
    }
    (values, vectors)
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Thin QR: returns `(Q, R)` with `Q` of size `rows × k`, `R` of size
/// `k × cols`, `k = min(rows, cols)`.
pub fn thin_qr(z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = z.shape();
    if rows == 0 || cols == 0 {
        let k = rows.min(cols);
        return (DMatrix::zeros(rows, k), DMatrix::zeros(k, cols));
    }
    let qr = to_faer(z).qr();
    let r = qr.thin_R();
    // keep the upper trapezoid only
    let r = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| if i <= j { r[(i, j)] } else { 0.0 });
    (from_faer(qr.compute_thin_Q().as_ref()), r)
}

/// Nonzero part of a thin SVD, `m ≈ U·diag(s)·Vᵀ`, singular values in
/// descending order; values at or below `rel_tol·s_max` are dropped.
/// Returns `(U, s, V)`.
///
/// Computed from a thin QR and the symmetric eigenproblem of
/// `[[0, R], [Rᵀ, 0]]`, whose positive eigenvalues are the singular values
/// of `R`. nalgebra's bidiagonal SVD loses accuracy on rank-deficient
/// inputs, which ensemble deviations always are.
pub fn thin_svd(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    if rows.min(cols) == 0 {
        return (
            DMatrix::zeros(rows, 0),
            DVector::zeros(0),
            DMatrix::zeros(cols, 0),
        );
    }
    if rows < cols {
        let (u, s, v) = thin_svd(&m.transpose(), rel_tol);
        return (v, s, u);
    }
    let (q, r) = thin_qr(m);
    let k = r.nrows();
    let mut jw = DMatrix::zeros(2 * k, 2 * k);
    jw.view_mut((0, k), (k, k)).copy_from(&r);
    jw.view_mut((k, 0), (k, k)).copy_from(&r.transpose());
    let (vals, vecs) = sym_eigen_desc(&jw);
    let smax = vals[0].max(0.0);
    let keep: Vec<usize> = (0..k)
        .filter(|&i| vals[i] > rel_tol * smax && vals[i] > 0.0)
        .collect();
    let mut us = DMatrix::zeros(k, keep.len());
    let mut vs = DMatrix::zeros(k, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        let col = vecs.column(src);
        let u = col.rows(0, k);
        let v = col.rows(k, k);
        us.set_column(dst, &(u / u.norm()));
        vs.set_column(dst, &(v / v.norm()));
    }
    let s = DVector::from_iterator(keep.len(), keep.iter().map(|&i| vals[i]));
    (q * us, s, vs)
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(1e-300);
    (a - b).norm() / denom
}

/// Column-concatenate a list of matrices sharing a row count.
pub fn hstack(rows: usize, parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let width: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, width);
    let mut col = 0;
    for p in parts {
        debug_assert_eq!(p.nrows(), rows);
        out.columns_mut(col, p.ncols()).copy_from(p);
        col += p.ncols();
    }
    out
}

/// Gather the listed rows of `m`.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (dst, &src) in rows.iter().enumerate() {
        out.set_row(dst, &m.row(src));
    }
    out
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}
