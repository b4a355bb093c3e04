//! Diagonal plus low-rank matrices whose low-rank columns carry individual
//! signs, `K = diag(v) + Z·S·Zᵀ` with `S = diag(±1)`.
//!
//! Factor potentials and messages are differences of same-sign DLR
//! matrices (a joint precision minus a marginal precision), so they need a
//! mixed signature. Inversion stays in the small `W×W` capacitance space.

use nalgebra::{DMatrix, DVector};

use super::{check_finite, scale_rows, DlrMatrix, Sign, RANK_DROP_TOL};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct SignedDlr {
    nugget: DVector<f64>,
    component: DMatrix<f64>,
    signs: Vec<f64>,
}

impl SignedDlr {
    pub fn new(nugget: DVector<f64>, component: DMatrix<f64>, signs: Vec<f64>) -> Result<Self> {
        if component.nrows() != nugget.len() {
            return Err(Error::DimensionMismatch {
                op: "SignedDlr::new",
                expected: nugget.len(),
                got: component.nrows(),
            });
        }
        if signs.len() != component.ncols() {
            return Err(Error::DimensionMismatch {
                op: "SignedDlr::new (signs)",
                expected: component.ncols(),
                got: signs.len(),
            });
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::InvalidArgument(
                "column signs must be +1 or -1".into(),
            ));
        }
        Ok(SignedDlr {
            nugget,
            component,
            signs,
        })
    }

    pub fn diagonal(nugget: DVector<f64>) -> Self {
        let d = nugget.len();
        SignedDlr {
            nugget,
            component: DMatrix::zeros(d, 0),
            signs: Vec::new(),
        }
    }

    pub fn scaled_identity(d: usize, scale: f64) -> Self {
        Self::diagonal(DVector::from_element(d, scale))
    }

    /// Columns of `z` all carrying the same sign.
    pub fn uniform(nugget: DVector<f64>, z: DMatrix<f64>, sign: f64) -> Result<Self> {
        let w = z.ncols();
        Self::new(nugget, z, vec![sign; w])
    }

    pub fn dim(&self) -> usize {
        self.nugget.len()
    }

    pub fn width(&self) -> usize {
        self.component.ncols()
    }

    pub fn nugget(&self) -> &DVector<f64> {
        &self.nugget
    }

    pub fn nugget_mut(&mut self) -> &mut DVector<f64> {
        &mut self.nugget
    }

    pub fn component(&self) -> &DMatrix<f64> {
        &self.component
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn densify(&self) -> DMatrix<f64> {
        let scaled = scale_cols(&self.component, &self.signs);
        let mut out = scaled * self.component.transpose();
        for i in 0..self.dim() {
            out[(i, i)] += self.nugget[i];
        }
        linalg::symmetrize(&out)
    }

    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "SignedDlr::matvec",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut out = self.nugget.component_mul(x);
        if self.width() > 0 {
            let mut inner = self.component.transpose() * x;
            for (v, s) in inner.iter_mut().zip(&self.signs) {
                *v *= s;
            }
            out.gemv(1.0, &self.component, &inner, 1.0);
        }
        Ok(out)
    }

    pub fn add(&self, other: &SignedDlr) -> Result<SignedDlr> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                op: "SignedDlr::add",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let mut signs = self.signs.clone();
        signs.extend_from_slice(&other.signs);
        Ok(SignedDlr {
            nugget: &self.nugget + &other.nugget,
            component: linalg::hstack(self.dim(), &[&self.component, &other.component]),
            signs,
        })
    }

    pub fn negate(&self) -> SignedDlr {
        SignedDlr {
            nugget: -&self.nugget,
            component: self.component.clone(),
            signs: self.signs.iter().map(|s| -s).collect(),
        }
    }

    pub fn sub(&self, other: &SignedDlr) -> Result<SignedDlr> {
        self.add(&other.negate())
    }

    /// Sub-block on the listed indices.
    pub fn select(&self, idx: &[usize]) -> SignedDlr {
        SignedDlr {
            nugget: linalg::select_entries(&self.nugget, idx),
            component: linalg::select_rows(&self.component, idx),
            signs: self.signs.clone(),
        }
    }

    /// Zero-pad into `total` dimensions; row `i` lands on `idx[i]`.
    pub fn embed(&self, idx: &[usize], total: usize) -> Result<SignedDlr> {
        if idx.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "SignedDlr::embed",
                expected: self.dim(),
                got: idx.len(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= total) {
            return Err(Error::BlockOutOfRange {
                start: bad,
                end: bad + 1,
                dim: total,
            });
        }
        let mut nugget = DVector::zeros(total);
        let mut component = DMatrix::zeros(total, self.width());
        for (src, &dst) in idx.iter().enumerate() {
            nugget[dst] = self.nugget[src];
            component.set_row(dst, &self.component.row(src));
        }
        Ok(SignedDlr {
            nugget,
            component,
            signs: self.signs.clone(),
        })
    }

    /// Best approximation of the low-rank part by at most `max_rank`
    /// signed columns (largest eigenvalues in magnitude), computed from a
    /// thin QR of the component (skipped when it is at least as wide as it
    /// is tall) and a small eigenproblem.
    pub fn compress(&self, max_rank: usize) -> SignedDlr {
        let d = self.dim();
        if self.width() == 0 || max_rank == 0 {
            return SignedDlr::diagonal(self.nugget.clone());
        }
        if self.width() <= max_rank.min(self.dim()) {
            return self.clone();
        }
        // a wide component is cheaper to square up directly
        let (q, core) = if self.width() >= d {
            (
                None,
                scale_cols(&self.component, &self.signs) * self.component.transpose(),
            )
        } else {
            let (q, r) = linalg::thin_qr(&self.component);
            (Some(q), scale_cols(&r, &self.signs) * r.transpose())
        };
        let (vals, vecs) = linalg::sym_eigen_desc(&core);
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
        let max_abs = order.first().map(|&i| vals[i].abs()).unwrap_or(0.0);
        let keep: Vec<usize> = order
            .into_iter()
            .filter(|&i| vals[i].abs() > RANK_DROP_TOL * max_abs && vals[i] != 0.0)
            .take(max_rank)
            .collect();
        let mut small = DMatrix::zeros(vecs.nrows(), keep.len());
        let mut signs = Vec::with_capacity(keep.len());
        for (dst, &src) in keep.iter().enumerate() {
            small.set_column(dst, &(vecs.column(src) * vals[src].abs().sqrt()));
            signs.push(vals[src].signum());
        }
        let component = match q {
            _ if keep.is_empty() => DMatrix::zeros(d, 0),
            Some(q) => q * small,
            None => small,
        };
        SignedDlr {
            nugget: self.nugget.clone(),
            component,
            signs,
        }
    }

    /// Woodbury factorisation in capacitance space. Requires a strictly
    /// positive nugget.
    pub fn factor(&self, context: &str) -> Result<CapacitanceFactor> {
        CapacitanceFactor::new(self, context)
    }

    pub fn inverse(&self) -> Result<SignedDlr> {
        self.factor("SignedDlr::inverse")?.inverse()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.factor("pd check").is_ok()
    }

    pub fn log_det(&self) -> Result<f64> {
        Ok(self.factor("log_det")?.log_det())
    }

    /// Convert to a single-sign DLR matrix when every column agrees with
    /// `sign` (an empty component always converts).
    pub fn to_dlr(&self, sign: Sign) -> Option<DlrMatrix> {
        if self.signs.iter().any(|&s| s != sign.value()) {
            return None;
        }
        DlrMatrix::new(self.nugget.clone(), self.component.clone(), sign).ok()
    }
}

impl From<&DlrMatrix> for SignedDlr {
    fn from(m: &DlrMatrix) -> Self {
        SignedDlr {
            nugget: m.nugget().clone(),
            component: m.component().clone(),
            signs: vec![m.sign().value(); m.width()],
        }
    }
}

pub(crate) fn scale_cols(m: &DMatrix<f64>, scale: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= scale[j];
    }
    out
}

/// Factorisation of `V + Z·S·Zᵀ` through its capacitance
/// `C = S + ZᵀV⁻¹Z`, split into positive and negative column blocks.
///
/// The positive block `I + G₊₊` is always positive definite for `V > 0`;
/// the matrix is positive definite exactly when the negated Schur
/// complement of the negative block is too. Both blocks are Cholesky
/// factored, which gives `C⁻¹ = Y₊Y₊ᵀ − Y₋Y₋ᵀ`.
#[derive(Clone, Debug)]
pub struct CapacitanceFactor {
    vinv: DVector<f64>,
    vinv_z: DMatrix<f64>,
    y_plus: DMatrix<f64>,
    y_minus: DMatrix<f64>,
    log_det: f64,
}

impl CapacitanceFactor {
    fn new(k: &SignedDlr, context: &str) -> Result<Self> {
        let d = k.dim();
        let mut vinv = DVector::zeros(d);
        for (i, &v) in k.nugget.iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::not_pd(format!(
                    "{context}: nugget entry {i} is {v}, not positive"
                )));
            }
            vinv[i] = 1.0 / v;
        }
        let base_logdet: f64 = k.nugget.iter().map(|v| v.ln()).sum();
        let w = k.width();
        let vinv_z = scale_rows(&k.component, &vinv);
        if w == 0 {
            return Ok(CapacitanceFactor {
                vinv,
                vinv_z,
                y_plus: DMatrix::zeros(0, 0),
                y_minus: DMatrix::zeros(0, 0),
                log_det: base_logdet,
            });
        }
        let g = linalg::symmetrize(&(k.component.transpose() * &vinv_z));
        let plus: Vec<usize> = (0..w).filter(|&j| k.signs[j] > 0.0).collect();
        let minus: Vec<usize> = (0..w).filter(|&j| k.signs[j] < 0.0).collect();
        let sub = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| g[(rows[i], cols[j])])
        };

        let mut a = sub(&plus, &plus);
        for i in 0..plus.len() {
            a[(i, i)] += 1.0;
        }
        let chol_a = linalg::cholesky_jittered(a, context)?;
        let l1 = chol_a.l();
        let b = sub(&plus, &minus);
        let ainv_b = if plus.is_empty() {
            DMatrix::zeros(0, minus.len())
        } else {
            chol_a.solve(&b)
        };
        let mut neg_t = -sub(&minus, &minus) + (b.transpose() * &ainv_b);
        for i in 0..minus.len() {
            neg_t[(i, i)] += 1.0;
        }
        let chol_t = linalg::cholesky_jittered(linalg::symmetrize(&neg_t), context)?;
        let l2 = chol_t.l();

        // Y₊ = E₊ L₁⁻ᵀ, Y₋ = (E₋ − E₊ A⁻¹B) L₂⁻ᵀ
        let l1_inv_t = linalg::lower_inverse(&l1).transpose();
        let l2_inv_t = linalg::lower_inverse(&l2).transpose();
        let mut y_plus = DMatrix::zeros(w, plus.len());
        for (src, &dst) in plus.iter().enumerate() {
            y_plus.set_row(dst, &l1_inv_t.row(src));
        }
        let mut y_minus = DMatrix::zeros(w, minus.len());
        let shifted = -&ainv_b * &l2_inv_t;
        for (src, &dst) in plus.iter().enumerate() {
            y_minus.set_row(dst, &shifted.row(src));
        }
        for (src, &dst) in minus.iter().enumerate() {
            y_minus.set_row(dst, &l2_inv_t.row(src));
        }
        let ld1: f64 = l1.diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        let ld2: f64 = l2.diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        let f = CapacitanceFactor {
            vinv,
            vinv_z,
            y_plus,
            y_minus,
            log_det: base_logdet + ld1 + ld2,
        };
        check_finite(&f.y_plus, context)?;
        check_finite(&f.y_minus, context)?;
        Ok(f)
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `C⁻¹·h` for a vector in capacitance space.
    pub fn apply_cinv(&self, h: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.y_plus * (self.y_plus.transpose() * h);
        if self.y_minus.ncols() > 0 {
            out -= &self.y_minus * (self.y_minus.transpose() * h);
        }
        out
    }

    /// Signed factors of `C⁻¹`: `(Y₊, Y₋)`.
    pub fn cinv_factors(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.y_plus, &self.y_minus)
    }

    pub fn vinv(&self) -> &DVector<f64> {
        &self.vinv
    }

    /// `K⁻¹·b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = self.vinv.component_mul(b);
        if self.vinv_z.ncols() > 0 {
            let h = self.vinv_z.transpose() * b;
            let c = self.apply_cinv(&h);
            out.gemv(-1.0, &self.vinv_z, &c, 1.0);
        }
        out
    }

    /// `K⁻¹ = V⁻¹ − (V⁻¹Z)C⁻¹(V⁻¹Z)ᵀ` as a signed DLR matrix of the same
    /// width with flipped signature.
    pub fn inverse(&self) -> Result<SignedDlr> {
        let d = self.vinv.len();
        if self.vinv_z.ncols() == 0 {
            return Ok(SignedDlr::diagonal(self.vinv.clone()));
        }
        let zp = &self.vinv_z * &self.y_plus;
        let zm = &self.vinv_z * &self.y_minus;
        let mut signs = vec![-1.0; zp.ncols()];
        signs.extend(std::iter::repeat_n(1.0, zm.ncols()));
        let component = linalg::hstack(d, &[&zp, &zm]);
        check_finite(&component, "SignedDlr::inverse")?;
        SignedDlr::new(self.vinv.clone(), component, signs)
    }
}
