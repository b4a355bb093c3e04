//! Sample ensembles, their implied Gaussians, Matheron conditioning and
//! conformation to a target belief.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::dlr::{DlrMatrix, Sign, SignedDlr};
use crate::error::{Error, Result};
use crate::gaussian::MomentsGaussian;
use crate::linalg;

/// A `D×N` matrix whose columns are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    samples: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.ncols() < 2 {
            return Err(Error::TooFewMembers {
                needed: 2,
                got: samples.ncols(),
            });
        }
        if !samples.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: "ensemble samples".into(),
            });
        }
        Ok(Ensemble { samples })
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn size(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> DMatrix<f64> {
        self.samples
    }

    pub fn mean(&self) -> DVector<f64> {
        ens_mean(&self.samples)
    }

    pub fn deviations(&self) -> DMatrix<f64> {
        ens_dev(&self.samples)
    }

    /// `N(X̄, X̃X̃ᵀ/(N−1) + V)`.
    pub fn implied_gaussian(&self, nugget: &NuggetSpec) -> Result<MomentsGaussian> {
        let v = nugget.to_vector(self.dim())?;
        let scale = 1.0 / ((self.size() - 1) as f64).sqrt();
        let cov = DlrMatrix::new(v, self.deviations() * scale, Sign::Plus)?;
        MomentsGaussian::new(self.mean(), cov)
    }

    /// Stack ensembles row-wise (all must share `N`).
    pub fn stack(parts: &[&Ensemble]) -> Result<Ensemble> {
        let n = parts.first().map(|e| e.size()).unwrap_or(0);
        if let Some(bad) = parts.iter().find(|e| e.size() != n) {
            return Err(Error::DimensionMismatch {
                op: "Ensemble::stack",
                expected: n,
                got: bad.size(),
            });
        }
        let d: usize = parts.iter().map(|e| e.dim()).sum();
        let mut out = DMatrix::zeros(d, n);
        let mut row = 0;
        for e in parts {
            out.rows_mut(row, e.dim()).copy_from(&e.samples);
            row += e.dim();
        }
        Ensemble::new(out)
    }

    pub fn rows(&self, start: usize, len: usize) -> Result<Ensemble> {
        if start + len > self.dim() {
            return Err(Error::BlockOutOfRange {
                start,
                end: start + len,
                dim: self.dim(),
            });
        }
        Ensemble::new(self.samples.rows(start, len).into_owned())
    }

    /// Writes `D,N` followed by one CSV row per dimension.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(w);
        let io = |e: csv::Error| Error::Io(e.to_string());
        wr.write_record([self.dim().to_string(), self.size().to_string()])
            .map_err(io)?;
        for row in self.samples.row_iter() {
            wr.write_record(row.iter().map(|v| format!("{v:?}")))
                .map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Ensemble> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut records = rd.records();
        let parse_err =
            |line: usize, msg: String| Error::Io(format!("ensemble csv line {line}: {msg}"));
        let header = records
            .next()
            .ok_or_else(|| parse_err(1, "missing D,N header".into()))?
            .map_err(|e| parse_err(1, e.to_string()))?;
        if header.len() != 2 {
            return Err(parse_err(1, "header must be D,N".into()));
        }
        let d: usize = header[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(1, "bad D".into()))?;
        let n: usize = header[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(1, "bad N".into()))?;
        let mut data = Vec::with_capacity(d * n);
        for i in 0..d {
            let line = i + 2;
            let rec = records
                .next()
                .ok_or_else(|| parse_err(line, "missing row".into()))?
                .map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != n {
                return Err(parse_err(
                    line,
                    format!("expected {n} values, got {}", rec.len()),
                ));
            }
            for f in rec.iter() {
                data.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(line, e.to_string()))?,
                );
            }
        }
        Ensemble::new(DMatrix::from_row_slice(d, n, &data))
    }
}

/// Column average `X·A`.
pub fn ens_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols().max(1) as f64;
    x.column_sum() / n
}

/// `X − X̄·B`.
pub fn ens_dev(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = ens_mean(x);
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// Diagonal inflation added to an empirical covariance.
#[derive(Clone, Debug, PartialEq)]
pub enum NuggetSpec {
    Scalar(f64),
    Diagonal(DVector<f64>),
}

impl NuggetSpec {
    pub fn to_vector(&self, d: usize) -> Result<DVector<f64>> {
        let v = match self {
            NuggetSpec::Scalar(s) => DVector::from_element(d, *s),
            NuggetSpec::Diagonal(v) => {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        op: "NuggetSpec",
                        expected: d,
                        got: v.len(),
                    });
                }
                v.clone()
            }
        };
        if v.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::InvalidArgument(
                "nugget entries must be positive".into(),
            ));
        }
        Ok(v)
    }

    pub fn select(&self, idx: &[usize]) -> NuggetSpec {
        match self {
            NuggetSpec::Scalar(s) => NuggetSpec::Scalar(*s),
            NuggetSpec::Diagonal(v) => NuggetSpec::Diagonal(linalg::select_entries(v, idx)),
        }
    }
}

/// Condition the rows `k` of a joint ensemble on `x_k = x_star` and return
/// the remaining rows (in increasing order), updated member by member:
/// `X_ℓ + Cov(X_ℓ, X_k)·Var_V(X_k)⁻¹·(x*·B − X_k)`.
pub fn matheron_condition(
    joint: &Ensemble,
    k: &[usize],
    x_star: &DVector<f64>,
    nugget: &NuggetSpec,
) -> Result<Ensemble> {
    if x_star.len() != k.len() {
        return Err(Error::DimensionMismatch {
            op: "matheron_condition",
            expected: k.len(),
            got: x_star.len(),
        });
    }
    let rest = crate::gaussian::complement(k, joint.dim())?;
    let xk = linalg::select_rows(joint.samples(), k);
    let xl = linalg::select_rows(joint.samples(), &rest);
    let n = joint.size();
    let dev_k = ens_dev(&xk);
    let dev_l = ens_dev(&xl);
    let nf = (n - 1) as f64;
    let nug = nugget.to_vector(k.len())?;
    let mut innov = -xk;
    for mut col in innov.column_iter_mut() {
        col += x_star;
    }
    // Woodbury pays off only when the observed block is wider than the ensemble
    let solved = if k.len() < n {
        let mut var_k = &dev_k * dev_k.transpose() / nf;
        for i in 0..k.len() {
            var_k[(i, i)] += nug[i];
        }
        linalg::cholesky_strict(linalg::symmetrize(&var_k), "matheron_condition")?.solve(&innov)
    } else {
        let var_k = DlrMatrix::new(nug, &dev_k / nf.sqrt(), Sign::Plus)?;
        var_k.invert()?.matmul_dense(&innov)?
    };
    let coeff = (dev_k.transpose() * &solved) / nf;
    Ensemble::new(xl + dev_l * coeff)
}

/// Result of [`conform`].
#[derive(Clone, Debug)]
pub struct Conformed {
    pub ensemble: Ensemble,
    /// The transform applied to the deviations, `X' = m·B + X̃·T`.
    pub transform: DMatrix<f64>,
    /// Set when the input ensemble had no spread.
    pub degenerate: bool,
}

/// Affine map of `x` whose mean is `target_mean` and whose empirical
/// covariance plus `eta2·I` is Frobenius-closest to `target_cov`.
pub fn conform(
    x: &Ensemble,
    target_mean: &DVector<f64>,
    target_cov: &DlrMatrix,
    eta2: f64,
) -> Result<Conformed> {
    if target_cov.sign() != Sign::Plus {
        return Err(Error::SignMismatch {
            op: "conform",
            left: 1,
            right: target_cov.sign().as_i8(),
        });
    }
    conform_signed(x, target_mean, &SignedDlr::from(target_cov), eta2)
}

/// As [`conform`] with a mixed-signature target covariance.
///
/// With `X̃ = U Σ Wᵀ` (thin SVD, nonzero part), the loss depends on the
/// `N×N` PSD matrix `M = TTᵀ` only through `H = Σ Wᵀ M W Σ/(N−1)`, and the
/// optimum over the PSD cone is `H* = proj_PSD(Uᵀ(K − η²I)U)`. `T` is the
/// symmetric square root of the minimum-norm `M`, which annihilates the
/// ones vector and so keeps the mean exact.
pub fn conform_signed(
    x: &Ensemble,
    target_mean: &DVector<f64>,
    target_cov: &SignedDlr,
    eta2: f64,
) -> Result<Conformed> {
    let d = x.dim();
    let n = x.size();
    if target_mean.len() != d || target_cov.dim() != d {
        return Err(Error::DimensionMismatch {
            op: "conform",
            expected: d,
            got: target_cov.dim().min(target_mean.len()),
        });
    }
    let dev = x.deviations();
    let (ur, sr, wr) = linalg::thin_svd(&dev, 1e-12);
    let mut out = DMatrix::zeros(d, n);
    for mut col in out.column_iter_mut() {
        col.copy_from(target_mean);
    }
    if sr.is_empty() {
        return Ok(Conformed {
            ensemble: Ensemble::new(out)?,
            transform: DMatrix::zeros(n, n),
            degenerate: true,
        });
    }
    let r = sr.len();

    // B = Uᵀ(V − η²I)U + (UᵀZ)S(UᵀZ)ᵀ
    let shifted = target_cov.nugget().map(|v| v - eta2);
    let scaled_u = crate::dlr::scale_rows(&ur, &shifted);
    let mut b = ur.transpose() * &scaled_u;
    if target_cov.width() > 0 {
        let uz = ur.transpose() * target_cov.component();
        let uzs = crate::dlr::signed_scale_cols(&uz, target_cov.signs());
        b += uzs * uz.transpose();
    }
    let (vals, vecs) = linalg::sym_eigen_desc(&b);
    let clipped = vals.map(|v| v.max(0.0));
    let h = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();

    // M = (N−1) W Σ⁻¹ H Σ⁻¹ Wᵀ; its square root through the r×r core
    let sinv = sr.map(|v| 1.0 / v);
    let mut a = h;
    for i in 0..r {
        for j in 0..r {
            a[(i, j)] *= sinv[i] * sinv[j];
        }
    }
    let (avals, avecs) = linalg::sym_eigen_desc(&a);
    let roots = avals.map(|v| v.max(0.0).sqrt() * ((n - 1) as f64).sqrt());
    let basis = &wr * &avecs;
    let t = &basis * DMatrix::from_diagonal(&roots) * basis.transpose();
    out += &dev * &t;
    Ok(Conformed {
        ensemble: Ensemble::new(out)?,
        transform: t,
        degenerate: false,
    })
}

/// `‖X̃MX̃ᵀ/(N−1) − (K − η²I)‖²_F`, evaluated without `D×D` matrices.
///
/// The low-rank parts are differenced in an orthonormal basis of `[X̃, Z]`
/// before squaring. Expanding the square instead cancels terms of order
/// `‖M‖²`, which is large when the deviations are nearly rank deficient.
pub fn conform_loss(
    m: &DMatrix<f64>,
    dev: &DMatrix<f64>,
    target_cov: &SignedDlr,
    eta2: f64,
) -> f64 {
    let (d, n) = dev.shape();
    let c = (n - 1) as f64;
    let vt = target_cov.nugget().map(|v| v - eta2);
    let z = target_cov.component();
    let k = z.ncols();
    let (q, r) = linalg::thin_qr(&linalg::hstack(d, &[dev, z]));
    let rx = r.columns(0, n).into_owned();
    let rz = r.columns(n, k).into_owned();
    let rzs = crate::dlr::signed_scale_cols(&rz, target_cov.signs());
    // X̃MX̃ᵀ/(N−1) − ZSZᵀ = Q·core·Qᵀ
    let core = &rx * m * rx.transpose() / c - rzs * rz.transpose();
    let qc = &q * &core;
    let cross: f64 = (0..d).map(|i| vt[i] * qc.row(i).dot(&q.row(i))).sum();
    core.norm_squared() - 2.0 * cross + vt.dot(&vt)
}

/// Gradient of [`conform_loss`] with respect to `M` (all entries free):
/// `2/(N−1)·X̃ᵀ(X̃MX̃ᵀ/(N−1) − (K − η²I))X̃`.
pub fn conform_loss_grad(
    m: &DMatrix<f64>,
    dev: &DMatrix<f64>,
    target_cov: &SignedDlr,
    eta2: f64,
) -> DMatrix<f64> {
    let c = (dev.ncols() - 1) as f64;
    let g = dev.transpose() * dev;
    let vt = target_cov.nugget().map(|v| v - eta2);
    let xz = dev.transpose() * target_cov.component();
    let xzs = crate::dlr::signed_scale_cols(&xz, target_cov.signs());
    let xvx = dev.transpose() * &crate::dlr::scale_rows(dev, &vt);
    let resid = &g * m * &g / c - xvx - xzs * xz.transpose();
    resid * (2.0 / c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn mean_and_dev_examples() {
        let c = DMatrix::from_fn(3, 4, |i, _| i as f64 + 0.5);
        assert_eq!(ens_mean(&c), c.column(0));
        assert_eq!(ens_dev(&c), DMatrix::zeros(3, 4));
        let x = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        assert_eq!(ens_mean(&x)[0], 1.0);
        assert_eq!(ens_dev(&x).as_slice(), &[-1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 4, 7);
        let m = ens_mean(&x);
        for i in 0..4 {
            let avg: f64 = (0..7).map(|j| x[(i, j)]).sum::<f64>() / 7.0;
            assert!((m[i] - avg).abs() < 1e-14);
        }
        let dev = ens_dev(&x);
        for i in 0..4 {
            assert!(dev.row(i).sum().abs() < 1e-12 * x.amax());
        }
        assert!(Ensemble::new(DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn implied_gaussian_examples() {
        let c = Ensemble::new(DMatrix::from_element(2, 3, 1.5)).unwrap();
        let g = c.implied_gaussian(&NuggetSpec::Scalar(1.0)).unwrap();
        assert_eq!(g.mean, DVector::from_element(2, 1.5));
        assert_eq!(g.cov.densify(), DMatrix::identity(2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Ensemble::new(randn(&mut rng, 2, 3)).unwrap();
        let g = x.implied_gaussian(&NuggetSpec::Scalar(0.001)).unwrap();
        assert_eq!(g.cov.width(), 3);
        let dev = x.deviations();
        let oracle = &dev * dev.transpose() / 2.0 + DMatrix::identity(2, 2) * 0.001;
        assert!(linalg::rel_frobenius(&g.cov.densify(), &oracle) < 1e-12);
        assert!(x.implied_gaussian(&NuggetSpec::Scalar(0.0)).is_err());
    }

    #[test]
    fn matheron_independent_block_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = randn(&mut rng, 2, 16);
        for j in 0..16 {
            s[(1, j)] = 4.0;
        }
        let joint = Ensemble::new(s).unwrap();
        let out = matheron_condition(
            &joint,
            &[0],
            &DVector::from_element(1, 1.0),
            &NuggetSpec::Scalar(0.1),
        )
        .unwrap();
        assert!(out.samples().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn matheron_realized_column_fixed_point() {
        // x₂ = 2·x₁ exactly; conditioning on the realized x₁ of member j
        // leaves member j's x₂ in place as the nugget vanishes
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = randn(&mut rng, 1, 8);
        let mut s = DMatrix::zeros(2, 8);
        s.set_row(0, &x1.row(0));
        s.set_row(1, &(x1.row(0) * 2.0));
        let joint = Ensemble::new(s).unwrap();
        let j = 3;
        let star = DVector::from_element(1, joint.samples()[(0, j)]);
        let out = matheron_condition(&joint, &[0], &star, &NuggetSpec::Scalar(1e-10)).unwrap();
        assert!((out.samples()[(0, j)] - joint.samples()[(1, j)]).abs() < 1e-6);
    }

    #[test]
    fn matheron_closed_form_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4096;
        // x₁ ~ N(1, 1), x₂ = 0.8 x₁ + N(0, 0.36)
        let mut s = DMatrix::zeros(2, n);
        for j in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            s[(0, j)] = 1.0 + a;
            s[(1, j)] = 0.8 * s[(0, j)] + 0.6 * b;
        }
        let joint = Ensemble::new(s).unwrap();
        let out = matheron_condition(
            &joint,
            &[1],
            &DVector::from_element(1, 2.0),
            &NuggetSpec::Scalar(1e-6),
        )
        .unwrap();
        // var x₂ = 1.0, cov = 0.8 → mean 1 + 0.8(2 − 0.8) = 1.96, var 1 − 0.64 = 0.36
        let m = out.mean()[0];
        let v = out.deviations().norm_squared() / (n - 1) as f64;
        assert!((m - 1.96).abs() / 1.96 < 0.05);
        assert!((v - 0.36).abs() / 0.36 < 0.05);
    }

    #[test]
    fn conform_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Ensemble::new(randn(&mut rng, 4, 6)).unwrap();
        let g = x.implied_gaussian(&NuggetSpec::Scalar(0.1)).unwrap();
        let out = conform(&x, &g.mean, &g.cov, 0.1).unwrap();
        let before = x.deviations() * x.deviations().transpose();
        let after = out.ensemble.deviations() * out.ensemble.deviations().transpose();
        assert!(linalg::rel_frobenius(&after, &before) < 1e-8);
    }

    #[test]
    fn conform_scalar_case() {
        let x = Ensemble::new(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 5.0])).unwrap();
        let target = DlrMatrix::scaled_identity(1, 2.5, Sign::Plus);
        let out = conform(&x, &DVector::from_element(1, -1.0), &target, 0.1).unwrap();
        let dev = out.ensemble.deviations();
        let var = dev.norm_squared() / 2.0;
        assert!((var + 0.1 - 2.5).abs() < 1e-12);
        assert!((out.ensemble.mean()[0] + 1.0).abs() < 1e-12);
        // target below the nugget collapses the spread
        let tiny = DlrMatrix::scaled_identity(1, 0.05, Sign::Plus);
        let out = conform(&x, &DVector::from_element(1, 0.0), &tiny, 0.1).unwrap();
        assert!(out.ensemble.deviations().amax() < 1e-12);
    }

    #[test]
    fn conform_reachable_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Ensemble::new(randn(&mut rng, 3, 5)).unwrap();
        let a = randn(&mut rng, 5, 5);
        let y = &x.deviations() * &a;
        let yg = Ensemble::new(y.clone()).unwrap();
        let eta2 = 0.1;
        let g = yg.implied_gaussian(&NuggetSpec::Scalar(eta2)).unwrap();
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let out = conform(&x, &mu, &g.cov, eta2).unwrap();
        let t = &out.transform;
        let m = t * t.transpose();
        let loss = conform_loss(&m, &x.deviations(), &SignedDlr::from(&g.cov), eta2);
        assert!(loss < 1e-8, "loss {loss}");
        assert!((out.ensemble.mean() - mu).amax() < 1e-10);
    }

    #[test]
    fn conform_degenerate() {
        let x = Ensemble::new(DMatrix::from_element(2, 4, 3.0)).unwrap();
        let out = conform(&x, &DVector::zeros(2), &DlrMatrix::identity(2), 0.1).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.ensemble.samples(), &DMatrix::zeros(2, 4));
    }

    #[test]
    fn conform_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Ensemble::new(randn(&mut rng, 4, 3)).unwrap();
        let dev = x.deviations();
        // residual zero: target is exactly X̃MX̃ᵀ/(N−1) + η²I
        let m = DMatrix::identity(3, 3) * 0.7;
        let target = SignedDlr::uniform(
            DVector::from_element(4, 0.2),
            &dev * (0.7_f64 / 2.0).sqrt(),
            1.0,
        )
        .unwrap();
        let scale = target.densify().norm_squared();
        assert!(conform_loss(&m, &dev, &target, 0.2).abs() < 1e-12 * scale);
        assert!(conform_loss_grad(&m, &dev, &target, 0.2).amax() < 1e-12);
        // dense oracle for the loss value
        let target = SignedDlr::new(
            DVector::from_fn(4, |_, _| rng.random_range(0.5..1.5)),
            randn(&mut rng, 4, 2),
            vec![1.0, -1.0],
        )
        .unwrap();
        let m = randn(&mut rng, 3, 3);
        let a = &dev * &m * dev.transpose() / 2.0;
        let b = target.densify() - DMatrix::identity(4, 4) * 0.1;
        let oracle = (a - b).norm_squared();
        assert!((conform_loss(&m, &dev, &target, 0.1) - oracle).abs() < 1e-10 * oracle.max(1.0));
    }

    /// Central finite differences of the loss.
    fn fd_grad(m: &DMatrix<f64>, dev: &DMatrix<f64>, t: &SignedDlr, eta2: f64) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let h = 1e-6 * m[(i, j)].abs().max(1.0);
                let mut p = m.clone();
                p[(i, j)] += h;
                let mut q = m.clone();
                q[(i, j)] -= h;
                g[(i, j)] =
                    (conform_loss(&p, dev, t, eta2) - conform_loss(&q, dev, t, eta2)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn conform_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dev = ens_dev(&randn(&mut rng, 4, 3));
        let t =
            SignedDlr::uniform(DVector::from_element(4, 0.5), randn(&mut rng, 4, 2), 1.0).unwrap();
        let m = randn(&mut rng, 3, 3);
        let g = conform_loss_grad(&m, &dev, &t, 0.1);
        let fd = fd_grad(&m, &dev, &t, 0.1);
        assert!(linalg::rel_frobenius(&g, &fd) < 1e-5);
    }

    #[test]
    fn symbolic_gradient_form_agrees() {
        // for symmetric M and diagonal D the gradient of ‖D + XMXᵀ − RRᵀ‖²
        // is 2Xᵀ(D + XMXᵀ − RRᵀ)X
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xd = randn(&mut rng, 5, 3);
        let r = randn(&mut rng, 5, 2);
        let dvals = DVector::from_fn(5, |_, _| rng.random_range(-0.5..0.5));
        let m0 = randn(&mut rng, 3, 3);
        let m = &m0 + m0.transpose();
        let inner = DMatrix::from_diagonal(&dvals) + &xd * &m * xd.transpose() - &r * r.transpose();
        let symbolic = xd.transpose() * &inner * &xd * 2.0;
        // with N − 1 = 2 the loss at 2M has the same residual when the
        // target is RRᵀ − D + η²I
        let eta2 = 1.0;
        let target = SignedDlr::uniform(dvals.map(|v| eta2 - v), r, 1.0).unwrap();
        let ours = conform_loss_grad(&(&m * 2.0), &xd, &target, eta2) * 2.0;
        assert!(linalg::rel_frobenius(&ours, &symbolic) < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Ensemble::new(randn(&mut rng, 3, 4)).unwrap();
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("3,4\n"));
        assert_eq!(Ensemble::read_csv(buf.as_slice()).unwrap(), x);
        assert!(Ensemble::read_csv("2,2\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn prop_conform_mean_exact(seed in any::<u64>(), d in 1usize..=6, n in 2usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Ensemble::new(randn(&mut rng, d, n)).unwrap();
            let mu = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let cov = DlrMatrix::new(
                DVector::from_fn(d, |_, _| rng.random_range(0.05..1.0)),
                randn(&mut rng, d, 2),
                Sign::Plus,
            ).unwrap();
            let out = conform(&x, &mu, &cov, 0.1).unwrap();
            prop_assert!((out.ensemble.mean() - &mu).amax() < 1e-10);
            // no PSD perturbation of the chosen M lowers the loss
            let t = &out.transform;
            let m = t * t.transpose();
            let dev = x.deviations();
            let sc = SignedDlr::from(&cov);
            let base = conform_loss(&m, &dev, &sc, 0.1);
            for _ in 0..10 {
                let v = randn(&mut rng, n, 1);
                let p = &v * v.transpose();
                let p = &p * (1e-3 / p.norm());
                let moved = conform_loss(&(&m + &p), &dev, &sc, 0.1);
                prop_assert!(moved >= base - 1e-9, "base {} moved {}", base, moved);
            }
        }

        #[test]
        fn prop_dev_rows_sum_to_zero(seed in any::<u64>(), d in 1usize..=6, n in 2usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, d, n) * 10.0;
            let dev = ens_dev(&x);
            for i in 0..d {
                prop_assert!(dev.row(i).sum().abs() <= 1e-12 * x.amax().max(1.0));
            }
        }
    }
}
