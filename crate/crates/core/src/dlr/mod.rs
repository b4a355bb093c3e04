//! Symmetric matrices stored as a diagonal plus a signed low-rank update,
//! `K = diag(v) + s·L·Lᵀ`.

mod signed;

pub(crate) use signed::scale_cols as signed_scale_cols;
pub use signed::{CapacitanceFactor, SignedDlr};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative singular-value cut below which a direction counts as zero.
pub const RANK_DROP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// `diag(nugget) + sign · component · componentᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DlrJson", into = "DlrJson")]
pub struct DlrMatrix {
    nugget: DVector<f64>,
    component: DMatrix<f64>,
    sign: Sign,
}

impl DlrMatrix {
    pub fn new(nugget: DVector<f64>, component: DMatrix<f64>, sign: Sign) -> Result<Self> {
        if component.nrows() != nugget.len() {
            return Err(Error::DimensionMismatch {
                op: "DlrMatrix::new",
                expected: nugget.len(),
                got: component.nrows(),
            });
        }
        Ok(DlrMatrix {
            nugget,
            component,
            sign,
        })
    }

    pub fn diagonal(nugget: DVector<f64>, sign: Sign) -> Self {
        let d = nugget.len();
        DlrMatrix {
            nugget,
            component: DMatrix::zeros(d, 0),
            sign,
        }
    }

    pub fn scaled_identity(d: usize, scale: f64, sign: Sign) -> Self {
        Self::diagonal(DVector::from_element(d, scale), sign)
    }

    pub fn identity(d: usize) -> Self {
        Self::scaled_identity(d, 1.0, Sign::Plus)
    }

    pub fn dim(&self) -> usize {
        self.nugget.len()
    }

    /// Number of columns in the low-rank component.
    pub fn width(&self) -> usize {
        self.component.ncols()
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn nugget(&self) -> &DVector<f64> {
        &self.nugget
    }

    pub fn component(&self) -> &DMatrix<f64> {
        &self.component
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>, Sign) {
        (self.nugget, self.component, self.sign)
    }

    /// Dense `D×D` expansion. Test oracles and the high-rank fallback only.
    ///
    /// Column contributions are accumulated in a canonical (sorted) order so
    /// the result does not depend on the column order of the component.
    pub fn densify(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut cols: Vec<usize> = (0..self.width()).collect();
        cols.sort_by(|&a, &b| {
            let ca = self.component.column(a);
            let cb = self.component.column(b);
            ca.iter()
                .zip(cb.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let s = self.sign.value();
        let mut out = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                let mut acc = 0.0;
                for &c in &cols {
                    acc += self.component[(i, c)] * self.component[(j, c)];
                }
                out[(i, j)] = s * acc;
            }
            out[(j, j)] += self.nugget[j];
        }
        out
    }

    /// `K·X` without forming `K`.
    pub fn matmul_dense(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "matmul_dense",
                expected: self.dim(),
                got: x.nrows(),
            });
        }
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.nugget[i];
        }
        if self.width() > 0 {
            let inner = self.component.transpose() * x;
            out.gemm(self.sign.value(), &self.component, &inner, 1.0);
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut out = self.nugget.component_mul(x);
        if self.width() > 0 {
            let inner = self.component.transpose() * x;
            out.gemv(self.sign.value(), &self.component, &inner, 1.0);
        }
        Ok(out)
    }

    /// Same-sign sum: nuggets add, components concatenate.
    pub fn add(&self, other: &DlrMatrix) -> Result<DlrMatrix> {
        if self.sign != other.sign {
            return Err(Error::SignMismatch {
                op: "add",
                left: self.sign.as_i8(),
                right: other.sign.as_i8(),
            });
        }
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                op: "add",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(DlrMatrix {
            nugget: &self.nugget + &other.nugget,
            component: linalg::hstack(self.dim(), &[&self.component, &other.component]),
            sign: self.sign,
        })
    }

    fn inverse_nugget(&self, op: &'static str) -> Result<DVector<f64>> {
        let mut inv = DVector::zeros(self.dim());
        for (i, &v) in self.nugget.iter().enumerate() {
            if v == 0.0 {
                return Err(Error::ZeroNugget { op, index: i });
            }
            inv[i] = 1.0 / v;
        }
        Ok(inv)
    }

    /// `s·I + LᵀV⁻¹L`.
    pub fn capacitance(&self) -> Result<DMatrix<f64>> {
        let vinv = self.inverse_nugget("capacitance")?;
        let scaled = scale_rows(&self.component, &vinv);
        let mut cap = self.component.transpose() * &scaled;
        for i in 0..self.width() {
            cap[(i, i)] += self.sign.value();
        }
        Ok(linalg::symmetrize(&cap))
    }

    /// Woodbury inverse in DLR form; the result has the opposite sign and
    /// the same component width.
    pub fn invert(&self) -> Result<DlrMatrix> {
        let vinv = self.inverse_nugget("invert")?;
        let sign = self.sign.flip();
        if self.width() == 0 {
            return Ok(DlrMatrix::diagonal(vinv, sign));
        }
        // inner = I + s·LᵀV⁻¹L, which is s·capacitance
        let vinv_l = scale_rows(&self.component, &vinv);
        let mut inner = (self.component.transpose() * &vinv_l) * self.sign.value();
        for i in 0..self.width() {
            inner[(i, i)] += 1.0;
        }
        let chol = linalg::cholesky_jittered(linalg::symmetrize(&inner), "DLR capacitance")?;
        // R = V⁻¹L·F with F·Fᵀ = inner⁻¹, F = chol(inner)⁻ᵀ
        let rt = linalg::solve_lower(&chol.l(), &vinv_l.transpose());
        let component = rt.transpose();
        check_finite(&component, "invert")?;
        Ok(DlrMatrix {
            nugget: vinv,
            component,
            sign,
        })
    }

    /// Dense inverse followed by spectral recovery of the low-rank part.
    /// Meant for components wider than the dimension.
    pub fn invert_dense_fallback(&self) -> Result<DlrMatrix> {
        let vinv = self.inverse_nugget("invert_dense_fallback")?;
        let sign = self.sign.flip();
        if self.width() == 0 {
            return Ok(DlrMatrix::diagonal(vinv, sign));
        }
        let dense = self.densify();
        let inv = dense.clone().try_inverse().ok_or_else(|| Error::Singular {
            context: "invert_dense_fallback".into(),
        })?;
        // inverse − diag(v⁻¹) = (−s)·Q Λ Qᵀ with Λ ≥ 0
        let mut diff = linalg::symmetrize(&inv) * sign.value();
        for i in 0..self.dim() {
            diff[(i, i)] -= vinv[i] * sign.value();
        }
        let (vals, vecs) = linalg::sym_eigen_desc(&diff);
        let max_abs = vals.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
        let tol = RANK_DROP_TOL * max_abs;
        if vals.iter().any(|&l| l < -tol) {
            return Err(Error::not_pd(
                "dense fallback: inverse minus inverted nugget has the wrong sign",
            ));
        }
        let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > tol).collect();
        let mut component = DMatrix::zeros(self.dim(), keep.len());
        for (dst, &src) in keep.iter().enumerate() {
            component.set_column(dst, &(vecs.column(src) * vals[src].sqrt()));
        }
        Ok(DlrMatrix {
            nugget: vinv,
            component,
            sign,
        })
    }

    /// Frobenius-optimal reduction of the component to at most `r` columns.
    pub fn rank_reduce(&self, r: usize) -> DlrMatrix {
        let component = truncate_component(&self.component, r);
        DlrMatrix {
            nugget: self.nugget.clone(),
            component,
            sign: self.sign,
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        if self.nugget.iter().any(|&v| !(v > 0.0)) {
            return false;
        }
        match self.sign {
            Sign::Plus => true,
            Sign::Minus => {
                if self.width() == 0 {
                    return true;
                }
                // −capacitance = I − RᵀU⁻¹R must be PD
                match self.capacitance() {
                    Ok(cap) => linalg::cholesky_strict(-cap, "pd check").is_ok(),
                    Err(_) => false,
                }
            }
        }
    }

    /// `log|K|` via the matrix-determinant lemma.
    pub fn log_det(&self) -> Result<f64> {
        if self.nugget.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::not_pd("log_det: nonpositive nugget"));
        }
        let base: f64 = self.nugget.iter().map(|v| v.ln()).sum();
        if self.width() == 0 {
            return Ok(base);
        }
        let inner = self.capacitance()? * self.sign.value();
        let chol = linalg::cholesky_strict(inner, "log_det capacitance")?;
        let ld: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        Ok(base + ld)
    }

    /// Principal sub-block over `start..end`.
    pub fn restrict(&self, start: usize, end: usize) -> Result<DlrMatrix> {
        if start > end || end > self.dim() {
            return Err(Error::BlockOutOfRange {
                start,
                end,
                dim: self.dim(),
            });
        }
        Ok(DlrMatrix {
            nugget: self.nugget.rows(start, end - start).into_owned(),
            component: self.component.rows(start, end - start).into_owned(),
            sign: self.sign,
        })
    }

    /// Zero-pad into a `total`-dimensional matrix at `offset`.
    pub fn embed(&self, offset: usize, total: usize) -> Result<DlrMatrix> {
        if offset + self.dim() > total {
            return Err(Error::BlockOutOfRange {
                start: offset,
                end: offset + self.dim(),
                dim: total,
            });
        }
        let mut nugget = DVector::zeros(total);
        nugget.rows_mut(offset, self.dim()).copy_from(&self.nugget);
        let mut component = DMatrix::zeros(total, self.width());
        component
            .rows_mut(offset, self.dim())
            .copy_from(&self.component);
        Ok(DlrMatrix {
            nugget,
            component,
            sign: self.sign,
        })
    }
}

pub(crate) fn scale_rows(m: &DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= scale[i];
    }
    out
}

pub(crate) fn check_finite(m: &DMatrix<f64>, context: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Thin SVD truncation of `L` keeping the top `r` singular directions,
/// returned as `U_r·diag(s_r)` so that `L_r L_rᵀ` is the best rank-`r`
/// approximation of `LLᵀ`.
pub(crate) fn truncate_component(l: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let d = l.nrows();
    if l.ncols() == 0 || d == 0 || r == 0 {
        return DMatrix::zeros(d, 0);
    }
    let (u, s, _) = linalg::thin_svd(l, RANK_DROP_TOL);
    // descending order; ties keep the decomposition's order
    let keep: Vec<usize> = (0..s.len().min(r)).collect();
    let mut out = DMatrix::zeros(d, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        out.set_column(dst, &(u.column(src) * s[src]));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct DlrJson {
    dim: usize,
    width: usize,
    sign: i8,
    nugget: Vec<f64>,
    /// Row-major component.
    component: Vec<Vec<f64>>,
}

impl From<DlrMatrix> for DlrJson {
    fn from(m: DlrMatrix) -> Self {
        DlrJson {
            dim: m.dim(),
            width: m.width(),
            sign: m.sign.as_i8(),
            nugget: m.nugget.iter().copied().collect(),
            component: m
                .component
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

impl TryFrom<DlrJson> for DlrMatrix {
    type Error = String;

    fn try_from(j: DlrJson) -> std::result::Result<Self, String> {
        let sign = match j.sign {
            1 => Sign::Plus,
            -1 => Sign::Minus,
            s => return Err(format!("sign must be +1 or -1, got {s}")),
        };
        if j.nugget.len() != j.dim || j.component.len() != j.dim {
            return Err(format!(
                "expected {} nugget entries and component rows",
                j.dim
            ));
        }
        if j.component.iter().any(|r| r.len() != j.width) {
            return Err(format!("every component row must have {} entries", j.width));
        }
        let flat: Vec<f64> = j.component.into_iter().flatten().collect();
        Ok(DlrMatrix {
            nugget: DVector::from_vec(j.nugget),
            component: DMatrix::from_row_slice(j.dim, j.width, &flat),
            sign,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dlr(rng: &mut ChaCha8Rng, d: usize, n: usize, sign: Sign) -> DlrMatrix {
        let nugget = DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0));
        let scale = if sign == Sign::Minus { 0.3 } else { 1.0 };
        let component = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0) * scale);
        DlrMatrix::new(nugget, component, sign).unwrap()
    }

    /// Elementwise oracle, independent of the nalgebra products used above.
    fn naive_dense(k: &DlrMatrix) -> DMatrix<f64> {
        let d = k.dim();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for c in 0..k.width() {
                    acc += k.component()[(i, c)] * k.component()[(j, c)];
                }
                out[(i, j)] = k.sign().value() * acc + if i == j { k.nugget()[i] } else { 0.0 };
            }
        }
        out
    }

    #[test]
    fn densify_examples() {
        let k = DlrMatrix::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::zeros(2, 0),
            Sign::Plus,
        )
        .unwrap();
        assert_eq!(k.densify(), DMatrix::identity(2, 2));
        let k = DlrMatrix::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            Sign::Plus,
        )
        .unwrap();
        assert_eq!(
            k.densify(),
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0])
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_dlr(&mut rng, 2, 1, Sign::Minus);
        assert!(linalg::rel_frobenius(&k.densify(), &naive_dense(&k)) < 1e-15);
    }

    #[test]
    fn matmul_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(DlrMatrix::identity(3).matmul_dense(&x).unwrap(), x);
        let k = random_dlr(&mut rng, 3, 1, Sign::Plus);
        let got = k.matmul_dense(&x).unwrap();
        assert!(linalg::rel_frobenius(&got, &(naive_dense(&k) * &x)) < 1e-12);
        let mut e1 = DMatrix::zeros(3, 1);
        e1[(1, 0)] = 1.0;
        let col = k.matmul_dense(&e1).unwrap();
        assert!((col - naive_dense(&k).columns(1, 1)).norm() < 1e-14);
        assert!(k.matmul_dense(&DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn add_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_dlr(&mut rng, 4, 2, Sign::Plus);
        let zero = DlrMatrix::scaled_identity(4, 0.0, Sign::Plus);
        assert_eq!(a.add(&zero).unwrap().densify(), a.densify());
        let b = random_dlr(&mut rng, 4, 3, Sign::Plus);
        let s = a.add(&b).unwrap();
        assert_eq!(s.width(), 5);
        assert!(linalg::rel_frobenius(&s.densify(), &(a.densify() + b.densify())) < 1e-12);
        assert_eq!(s.densify(), b.add(&a).unwrap().densify());
        let c = random_dlr(&mut rng, 4, 1, Sign::Minus);
        assert!(matches!(a.add(&c), Err(Error::SignMismatch { .. })));
    }

    #[test]
    fn invert_examples() {
        let k = DlrMatrix::scaled_identity(3, 2.0, Sign::Plus);
        let inv = k.invert().unwrap();
        assert_eq!(inv.width(), 0);
        assert_eq!(inv.sign(), Sign::Minus);
        assert!(inv.nugget().iter().all(|&v| v == 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = random_dlr(&mut rng, 4, 2, Sign::Plus);
        let inv = k.invert().unwrap();
        assert_eq!(inv.width(), 2);
        let oracle = k.densify().try_inverse().unwrap();
        assert!(linalg::rel_frobenius(&inv.densify(), &oracle) < 1e-10);
        let back = inv.invert().unwrap();
        assert_eq!(back.sign(), Sign::Plus);
        assert!(linalg::rel_frobenius(&back.densify(), &k.densify()) < 1e-9);

        let zero = DlrMatrix::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::zeros(2, 0),
            Sign::Plus,
        )
        .unwrap();
        assert!(matches!(
            zero.invert(),
            Err(Error::ZeroNugget { index: 1, .. })
        ));
        let bad = DlrMatrix::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
            Sign::Minus,
        )
        .unwrap();
        assert!(matches!(
            bad.invert(),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn dense_fallback_examples() {
        let k = DlrMatrix::scaled_identity(2, 4.0, Sign::Plus);
        assert_eq!(k.invert_dense_fallback().unwrap(), k.invert().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = random_dlr(&mut rng, 3, 5, Sign::Plus);
        let inv = k.invert_dense_fallback().unwrap();
        assert!(inv.width() <= 3);
        let oracle = k.densify().try_inverse().unwrap();
        assert!(linalg::rel_frobenius(&inv.densify(), &oracle) < 1e-9);
    }

    #[test]
    fn rank_reduce_examples() {
        let col = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let l = linalg::hstack(3, &[&col, &col]);
        let k = DlrMatrix::new(DVector::from_element(3, 1.0), l, Sign::Plus).unwrap();
        let r = k.rank_reduce(1);
        assert_eq!(r.width(), 1);
        assert!((r.densify() - k.densify()).norm() < 1e-12);
        assert_eq!(k.rank_reduce(0).width(), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = random_dlr(&mut rng, 5, 3, Sign::Plus);
        let r = k.rank_reduce(2);
        let err = (r.densify() - k.densify()).norm();
        // oracle: best rank-2 approximation of LLᵀ via its eigendecomposition
        let llt = k.component() * k.component().transpose();
        let (vals, _) = linalg::sym_eigen_desc(&llt);
        let optimal = vals.iter().skip(2).map(|l| l * l).sum::<f64>().sqrt();
        assert!((err - optimal).abs() < 1e-9);
    }

    #[test]
    fn capacitance_examples() {
        assert_eq!(
            DlrMatrix::identity(3).capacitance().unwrap().shape(),
            (0, 0)
        );
        let q = linalg::thin_qr(&DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 + 0.5)).0;
        let k = DlrMatrix::new(DVector::from_element(4, 1.0), q, Sign::Plus).unwrap();
        let cap = k.capacitance().unwrap();
        assert!((cap - DMatrix::identity(2, 2) * 2.0).norm() < 1e-12);
    }

    #[test]
    fn pd_examples() {
        assert!(DlrMatrix::identity(2).is_positive_definite());
        let mut r = DMatrix::zeros(2, 1);
        r[(0, 0)] = 2.0;
        let k = DlrMatrix::new(DVector::from_element(2, 1.0), r, Sign::Minus).unwrap();
        assert!(!k.is_positive_definite());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = random_dlr(&mut rng, 3, 2, Sign::Minus);
        let s = serde_json::to_string(&k).unwrap();
        assert!(s.contains("\"sign\":-1"));
        let back: DlrMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, k);
    }

    proptest! {
        #[test]
        fn prop_oracle_equivalence(seed in any::<u64>(), d in 1usize..=8, n in 0usize..=6, neg in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sign = if neg { Sign::Minus } else { Sign::Plus };
            let k = random_dlr(&mut rng, d, n, sign);
            let dense = naive_dense(&k);
            prop_assert!(linalg::rel_frobenius(&k.densify(), &dense) < 1e-12);
            if k.is_positive_definite() {
                let oracle = dense.clone().try_inverse().unwrap();
                let inv = k.invert().unwrap();
                prop_assert!(linalg::rel_frobenius(&inv.densify(), &oracle) < 1e-9);
                let back = inv.invert().unwrap();
                prop_assert!(linalg::rel_frobenius(&back.densify(), &dense) < 1e-9);
            }
            let r = k.rank_reduce(n / 2);
            prop_assert!(r.width() <= n / 2);
        }

        #[test]
        fn prop_dense_pd_agrees(seed in any::<u64>(), d in 1usize..=6, n in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut k = random_dlr(&mut rng, d, n, Sign::Minus);
            k.component *= 3.0;
            let (vals, _) = linalg::sym_eigen_desc(&k.densify());
            let min = vals[vals.len() - 1];
            if min.abs() > 1e-8 {
                prop_assert_eq!(k.is_positive_definite(), min > 0.0);
            }
        }
    }
}
