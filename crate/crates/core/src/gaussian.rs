//! Gaussians with diagonal-plus-low-rank parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dlr::{DlrMatrix, Sign, SignedDlr};
use crate::error::{Error, Result};
use crate::linalg;

/// Precision scale of the uninformative message.
pub const UNINFORMATIVE_PRECISION: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `N(mean, cov)` with `cov = V + LLᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentsGaussian {
    pub mean: DVector<f64>,
    pub cov: DlrMatrix,
}

/// Canonical parameters `(n, P)` with `P = U − RRᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalGaussian {
    pub info: DVector<f64>,
    pub precision: DlrMatrix,
}

impl MomentsGaussian {
    pub fn new(mean: DVector<f64>, cov: DlrMatrix) -> Result<Self> {
        if cov.sign() != Sign::Plus {
            return Err(Error::SignMismatch {
                op: "MomentsGaussian::new",
                left: 1,
                right: cov.sign().as_i8(),
            });
        }
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                op: "MomentsGaussian::new",
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        Ok(MomentsGaussian { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_canonical(&self) -> Result<CanonicalGaussian> {
        let precision = self.cov.invert()?;
        let info = precision.matvec(&self.mean)?;
        Ok(CanonicalGaussian { info, precision })
    }

    /// Marginal over `start..end`: truncate mean, nugget and component rows.
    pub fn marginalize(&self, start: usize, end: usize) -> Result<MomentsGaussian> {
        let cov = self.cov.restrict(start, end)?;
        Ok(MomentsGaussian {
            mean: self.mean.rows(start, end - start).into_owned(),
            cov,
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "log_density",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let log_det = self.cov.log_det()?;
        let prec = self.cov.invert()?;
        let r = x - &self.mean;
        let quad = r.dot(&prec.matvec(&r)?);
        Ok(-0.5 * quad - 0.5 * (log_det + self.dim() as f64 * LN_2PI))
    }
}

/// Free-function spelling of [`MomentsGaussian::marginalize`].
pub fn marginalize_moments(
    g: &MomentsGaussian,
    start: usize,
    end: usize,
) -> Result<MomentsGaussian> {
    g.marginalize(start, end)
}

pub fn log_density(g: &MomentsGaussian, x: &DVector<f64>) -> Result<f64> {
    g.log_density(x)
}

impl CanonicalGaussian {
    pub fn new(info: DVector<f64>, precision: DlrMatrix) -> Result<Self> {
        if precision.sign() != Sign::Minus {
            return Err(Error::SignMismatch {
                op: "CanonicalGaussian::new",
                left: -1,
                right: precision.sign().as_i8(),
            });
        }
        if info.len() != precision.dim() {
            return Err(Error::DimensionMismatch {
                op: "CanonicalGaussian::new",
                expected: precision.dim(),
                got: info.len(),
            });
        }
        Ok(CanonicalGaussian { info, precision })
    }

    /// `n = 0`, `P = 1e-8·I`.
    pub fn uninformative(d: usize) -> Self {
        CanonicalGaussian {
            info: DVector::zeros(d),
            precision: DlrMatrix::scaled_identity(d, UNINFORMATIVE_PRECISION, Sign::Minus),
        }
    }

    pub fn dim(&self) -> usize {
        self.info.len()
    }

    pub fn to_moments(&self) -> Result<MomentsGaussian> {
        if !self.precision.is_positive_definite() {
            return Err(Error::not_pd("to_moments: precision"));
        }
        let cov = self.precision.invert()?;
        let mean = cov.matvec(&self.info)?;
        Ok(MomentsGaussian { mean, cov })
    }

    /// Density product: informations and precisions add.
    pub fn multiply(&self, other: &CanonicalGaussian) -> Result<CanonicalGaussian> {
        let precision = self.precision.add(&other.precision)?;
        Ok(CanonicalGaussian {
            info: &self.info + &other.info,
            precision,
        })
    }

    /// Multiply by a density over the block starting at `offset`.
    pub fn multiply_partial(
        &self,
        block: &CanonicalGaussian,
        offset: usize,
    ) -> Result<CanonicalGaussian> {
        let total = self.dim();
        let precision = block.precision.embed(offset, total)?;
        let mut info = DVector::zeros(total);
        info.rows_mut(offset, block.dim()).copy_from(&block.info);
        self.multiply(&CanonicalGaussian { info, precision })
    }
}

pub fn multiply_canonical(
    a: &CanonicalGaussian,
    b: &CanonicalGaussian,
) -> Result<CanonicalGaussian> {
    a.multiply(b)
}

pub fn multiply_partial(
    a: &CanonicalGaussian,
    b: &CanonicalGaussian,
    offset: usize,
) -> Result<CanonicalGaussian> {
    a.multiply_partial(b, offset)
}

/// Squared MMD under `k(x, y) = (xᵀy + 1)²`, unbiased U-statistic.
/// Samples are columns.
pub fn mmd_poly2(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            op: "mmd_poly2",
            expected: x.nrows(),
            got: y.nrows(),
        });
    }
    let (n, m) = (x.ncols(), y.ncols());
    if n < 2 || m < 2 {
        return Err(Error::TooFewMembers {
            needed: 2,
            got: n.min(m),
        });
    }
    let kern = |g: DMatrix<f64>| g.map(|v| (v + 1.0) * (v + 1.0));
    let kxx = kern(x.transpose() * x);
    let kyy = kern(y.transpose() * y);
    let kxy = kern(x.transpose() * y);
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    let nf = n as f64;
    let mf = m as f64;
    Ok(
        off_diag(&kxx) / (nf * (nf - 1.0)) + off_diag(&kyy) / (mf * (mf - 1.0))
            - 2.0 * kxy.sum() / (nf * mf),
    )
}

/// Squared MMD between a Gaussian (expectations in closed form) and a
/// sample set, under the same kernel. Cost is linear in the dimension.
pub fn mmd_poly2_gaussian(g: &MomentsGaussian, y: &DMatrix<f64>) -> Result<f64> {
    let d = g.dim();
    if y.nrows() != d {
        return Err(Error::DimensionMismatch {
            op: "mmd_poly2_gaussian",
            expected: d,
            got: y.nrows(),
        });
    }
    let m = y.ncols();
    if m < 2 {
        return Err(Error::TooFewMembers { needed: 2, got: m });
    }
    // second moment S = V + WWᵀ with W = [L, mean]
    let mean_col = DMatrix::from_column_slice(d, 1, g.mean.as_slice());
    let w = linalg::hstack(d, &[g.cov.component(), &mean_col]);
    let v = g.cov.nugget();
    let wtw = w.transpose() * &w;
    let row_norms = DVector::from_fn(d, |i, _| w.row(i).norm_squared());
    let tr_s2 = v.dot(v) + 2.0 * v.dot(&row_norms) + wtw.norm_squared();
    let e_xx = tr_s2 + 2.0 * g.mean.norm_squared() + 1.0;
    let mut e_xy = 0.0;
    let wty = w.transpose() * y;
    for j in 0..m {
        let col = y.column(j);
        let ysy: f64 = col
            .iter()
            .zip(v.iter())
            .map(|(a, b)| a * a * b)
            .sum::<f64>()
            + wty.column(j).norm_squared();
        e_xy += ysy + 2.0 * g.mean.dot(&col) + 1.0;
    }
    let kyy = (y.transpose() * y).map(|v| (v + 1.0) * (v + 1.0));
    let mf = m as f64;
    Ok(e_xx - 2.0 * e_xy / mf + (kyy.sum() - kyy.trace()) / (mf * (mf - 1.0)))
}

/// Canonical Gaussian (possibly improper) whose precision has a mixed
/// signature. Factor potentials and messages live in this form.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPotential {
    pub info: DVector<f64>,
    pub precision: SignedDlr,
}

impl From<&CanonicalGaussian> for GaussianPotential {
    fn from(g: &CanonicalGaussian) -> Self {
        GaussianPotential {
            info: g.info.clone(),
            precision: SignedDlr::from(&g.precision),
        }
    }
}

impl GaussianPotential {
    pub fn new(info: DVector<f64>, precision: SignedDlr) -> Result<Self> {
        if info.len() != precision.dim() {
            return Err(Error::DimensionMismatch {
                op: "GaussianPotential::new",
                expected: precision.dim(),
                got: info.len(),
            });
        }
        Ok(GaussianPotential { info, precision })
    }

    pub fn uninformative(d: usize) -> Self {
        GaussianPotential {
            info: DVector::zeros(d),
            precision: SignedDlr::scaled_identity(d, UNINFORMATIVE_PRECISION),
        }
    }

    /// Potential with zero information and zero precision.
    pub fn zero(d: usize) -> Self {
        GaussianPotential {
            info: DVector::zeros(d),
            precision: SignedDlr::scaled_identity(d, 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.info.len()
    }

    pub fn width(&self) -> usize {
        self.precision.width()
    }

    pub fn multiply(&self, other: &GaussianPotential) -> Result<GaussianPotential> {
        Ok(GaussianPotential {
            info: &self.info + &other.info,
            precision: self.precision.add(&other.precision)?,
        })
    }

    pub fn divide(&self, other: &GaussianPotential) -> Result<GaussianPotential> {
        Ok(GaussianPotential {
            info: &self.info - &other.info,
            precision: self.precision.sub(&other.precision)?,
        })
    }

    /// Zero-pad into `total` dimensions; entry `i` lands on `idx[i]`.
    pub fn embed(&self, idx: &[usize], total: usize) -> Result<GaussianPotential> {
        let precision = self.precision.embed(idx, total)?;
        let mut info = DVector::zeros(total);
        for (src, &dst) in idx.iter().enumerate() {
            info[dst] = self.info[src];
        }
        Ok(GaussianPotential { info, precision })
    }

    pub fn compress(&self, max_rank: usize) -> GaussianPotential {
        GaussianPotential {
            info: self.info.clone(),
            precision: self.precision.compress(max_rank),
        }
    }

    /// Condition on `x[evidence] = values`; the result lives on the
    /// remaining coordinates, in increasing order.
    pub fn condition(
        &self,
        evidence: &[usize],
        values: &DVector<f64>,
    ) -> Result<GaussianPotential> {
        if evidence.len() != values.len() {
            return Err(Error::DimensionMismatch {
                op: "GaussianPotential::condition",
                expected: evidence.len(),
                got: values.len(),
            });
        }
        let rest = complement(evidence, self.dim())?;
        let p = &self.precision;
        let z_r = linalg::select_rows(p.component(), &rest);
        let z_e = linalg::select_rows(p.component(), evidence);
        let mut coef = z_e.transpose() * values;
        for (c, s) in coef.iter_mut().zip(p.signs()) {
            *c *= s;
        }
        let info = linalg::select_entries(&self.info, &rest) - z_r * coef;
        Ok(GaussianPotential {
            info,
            precision: p.select(&rest),
        })
    }

    /// Integrate out every coordinate not in `keep` (Schur complement in
    /// capacitance space). Nugget entries of the eliminated block are
    /// floored at `nugget_floor` so the elimination stays well posed.
    pub fn marginalize(&self, keep: &[usize], nugget_floor: f64) -> Result<GaussianPotential> {
        let drop = complement(keep, self.dim())?;
        let p = &self.precision;
        let eta_l = linalg::select_entries(&self.info, keep);
        let nug_l = linalg::select_entries(p.nugget(), keep);
        if drop.is_empty() || p.width() == 0 {
            // block-diagonal: the kept marginal is the kept block
            return Ok(GaussianPotential {
                info: eta_l,
                precision: p.select(keep),
            });
        }
        let mut rr = p.select(&drop);
        for v in rr.nugget_mut().iter_mut() {
            if *v < nugget_floor {
                *v = nugget_floor;
            }
        }
        let f = rr.factor("marginalize")?;
        let eta_r = linalg::select_entries(&self.info, &drop);
        let h = rr.component().transpose() * &f.vinv().component_mul(&eta_r);
        let z_l = linalg::select_rows(p.component(), keep);
        let info = eta_l - &z_l * f.apply_cinv(&h);
        let (yp, ym) = f.cinv_factors();
        let cp = &z_l * yp;
        let cm = &z_l * ym;
        let mut signs = vec![1.0; cp.ncols()];
        signs.extend(std::iter::repeat_n(-1.0, cm.ncols()));
        let component = linalg::hstack(keep.len(), &[&cp, &cm]);
        Ok(GaussianPotential {
            info,
            precision: SignedDlr::new(nug_l, component, signs)?,
        })
    }

    /// Mean `P⁻¹n` (requires a positive definite precision).
    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(self
            .precision
            .factor("potential mean")?
            .solve_vec(&self.info))
    }

    /// Mean and signed-DLR covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, SignedDlr)> {
        let f = self.precision.factor("potential moments")?;
        Ok((f.solve_vec(&self.info), f.inverse()?))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let f = self.precision.factor("potential log density")?;
        let m = f.solve_vec(&self.info);
        let r = x - m;
        let quad = r.dot(&self.precision.matvec(&r)?);
        Ok(-0.5 * quad + 0.5 * f.log_det() - 0.5 * self.dim() as f64 * LN_2PI)
    }

    /// Convert to a single-sign canonical Gaussian when the signature allows.
    pub fn to_canonical(&self) -> Option<CanonicalGaussian> {
        let precision = self.precision.to_dlr(Sign::Minus)?;
        Some(CanonicalGaussian {
            info: self.info.clone(),
            precision,
        })
    }
}

/// Sorted indices in `0..n` not listed in `idx`.
pub fn complement(idx: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut mark = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::BlockOutOfRange {
                start: i,
                end: i + 1,
                dim: n,
            });
        }
        mark[i] = true;
    }
    Ok((0..n).filter(|&i| !mark[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_moments(rng: &mut ChaCha8Rng, d: usize, n: usize) -> MomentsGaussian {
        let nugget = DVector::from_fn(d, |_, _| rng.random_range(0.2..2.0));
        let l = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        MomentsGaussian::new(mean, DlrMatrix::new(nugget, l, Sign::Plus).unwrap()).unwrap()
    }

    #[test]
    fn canonical_examples() {
        let g = MomentsGaussian::new(DVector::zeros(2), DlrMatrix::identity(2)).unwrap();
        let c = g.to_canonical().unwrap();
        assert_eq!(c.info, DVector::zeros(2));
        assert_eq!(c.precision.densify(), DMatrix::identity(2, 2));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_moments(&mut rng, 3, 1);
        let c = g.to_canonical().unwrap();
        let oracle = g.cov.densify().try_inverse().unwrap() * &g.mean;
        assert!((&c.info - oracle).norm() / c.info.norm() < 1e-10);
        let back = c.to_moments().unwrap();
        assert!((&back.mean - &g.mean).norm() < 1e-9);
        assert!(linalg::rel_frobenius(&back.cov.densify(), &g.cov.densify()) < 1e-9);
    }

    #[test]
    fn multiply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_moments(&mut rng, 3, 2).to_canonical().unwrap();
        let u = CanonicalGaussian::uninformative(3);
        let p = a.multiply(&u).unwrap();
        assert_eq!(p.info, a.info);
        assert!((p.precision.densify() - a.precision.densify()).amax() <= 1e-8 + 1e-15);

        let one = CanonicalGaussian::new(
            DVector::zeros(1),
            DlrMatrix::scaled_identity(1, 1.0, Sign::Minus),
        )
        .unwrap();
        let two = one.multiply(&one).unwrap();
        assert_eq!(two.precision.densify()[(0, 0)], 2.0);
        assert_eq!(two.info[0], 0.0);

        let b = random_moments(&mut rng, 3, 1).to_canonical().unwrap();
        let s = a.multiply(&b).unwrap();
        assert!(
            linalg::rel_frobenius(
                &s.precision.densify(),
                &(a.precision.densify() + b.precision.densify())
            ) < 1e-12
        );
    }

    #[test]
    fn multiply_partial_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_moments(&mut rng, 2, 1).to_canonical().unwrap();
        let b = CanonicalGaussian::new(
            DVector::from_element(1, 0.7),
            DlrMatrix::scaled_identity(1, 3.0, Sign::Minus),
        )
        .unwrap();
        let p = a.multiply_partial(&b, 1).unwrap();
        let diff = p.precision.densify() - a.precision.densify();
        assert!((diff[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(diff[(0, 0)].abs() < 1e-12 && diff[(0, 1)].abs() < 1e-12);
        assert!((p.info[1] - a.info[1] - 0.7).abs() < 1e-12);
        assert_eq!(p.info[0], a.info[0]);
        assert!(a.multiply_partial(&b, 2).is_err());
    }

    #[test]
    fn marginalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_moments(&mut rng, 4, 2);
        let m = g.marginalize(1, 3).unwrap();
        let dense = g.cov.densify();
        assert!((m.cov.densify() - dense.view((1, 1), (2, 2))).norm() < 1e-12);
        assert_eq!(m.mean[0], g.mean[1]);
        assert!(g.marginalize(3, 5).is_err());
    }

    #[test]
    fn log_density_examples() {
        let g = MomentsGaussian::new(DVector::zeros(1), DlrMatrix::identity(1)).unwrap();
        let v = g.log_density(&DVector::zeros(1)).unwrap();
        assert!((v + 0.918_938_533_204_672_8).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_moments(&mut rng, 3, 2);
        let x = DVector::from_vec(vec![0.3, -1.0, 0.5]);
        let k = g.cov.densify();
        let r = &x - &g.mean;
        let oracle = -0.5 * (r.dot(&(k.clone().try_inverse().unwrap() * &r)))
            - 0.5 * (k.determinant().ln() + 3.0 * LN_2PI);
        assert!((g.log_density(&x).unwrap() - oracle).abs() < 1e-9);
        let c = GaussianPotential::from(&g.to_canonical().unwrap());
        assert!((c.log_density(&x).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn log_density_integrates_to_one() {
        let g = MomentsGaussian::new(
            DVector::from_vec(vec![0.2, -0.1]),
            DlrMatrix::new(
                DVector::from_vec(vec![0.3, 0.2]),
                DMatrix::from_row_slice(2, 1, &[0.4, 0.3]),
                Sign::Plus,
            )
            .unwrap(),
        )
        .unwrap();
        let h = 0.04;
        let mut mass = 0.0;
        for i in -125..=125 {
            for j in -125..=125 {
                let x = DVector::from_vec(vec![i as f64 * h, j as f64 * h]);
                mass += g.log_density(&x).unwrap().exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-4);
        let g1 = g.marginalize(0, 1).unwrap();
        let mass1: f64 = (-4000..=4000)
            .map(|i| {
                g1.log_density(&DVector::from_element(1, i as f64 * 1e-3))
                    .unwrap()
                    .exp()
                    * 1e-3
            })
            .sum();
        assert!((mass1 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn mmd_examples() {
        let x = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let y = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        // k(0,0)=1, k(1,1)=4, k(0,1)=1 → 1 + 4 − 2 = 3
        assert!((mmd_poly2(&x, &y).unwrap() - 3.0).abs() < 1e-12);
        assert!(mmd_poly2(&x, &DMatrix::zeros(1, 1)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = DMatrix::from_fn(2, 50, |_, _| rng.random_range(-1.0..1.0));
        assert!(mmd_poly2(&s, &s).unwrap().abs() < 0.1);
    }

    #[test]
    fn mmd_gaussian_matches_sample_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_moments(&mut rng, 2, 1);
        let k = g.cov.densify();
        let chol = k.cholesky().unwrap().l();
        let draw = |rng: &mut ChaCha8Rng, n: usize| {
            let z = DMatrix::from_fn(2, n, |_, _| {
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
            });
            let mut s: DMatrix<f64> = &chol * z;
            for mut c in s.column_iter_mut() {
                c += &g.mean;
            }
            s
        };
        let y = draw(&mut rng, 40);
        let big = draw(&mut rng, 4000);
        let exact = mmd_poly2_gaussian(&g, &y).unwrap();
        let approx = mmd_poly2(&big, &y).unwrap();
        assert!((exact - approx).abs() < 0.05 * exact.abs().max(1.0));
    }

    #[test]
    fn potential_marginal_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_moments(&mut rng, 5, 3);
        let c = GaussianPotential::from(&g.to_canonical().unwrap());
        let keep = [1usize, 3];
        let m = c.marginalize(&keep, 0.0).unwrap();
        let (mean, cov) = m.moments().unwrap();
        assert!((mean[0] - g.mean[1]).abs() < 1e-9 && (mean[1] - g.mean[3]).abs() < 1e-9);
        let dense = g.cov.densify();
        assert!((cov.densify()[(0, 1)] - dense[(1, 3)]).abs() < 1e-9);
        assert!((cov.densify()[(1, 1)] - dense[(3, 3)]).abs() < 1e-9);
    }

    #[test]
    fn potential_condition_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_moments(&mut rng, 4, 2);
        let c = GaussianPotential::from(&g.to_canonical().unwrap());
        let xe = DVector::from_vec(vec![0.5, -0.4]);
        let cond = c.condition(&[0, 2], &xe).unwrap();
        let (mean, cov) = cond.moments().unwrap();
        let k = g.cov.densify();
        let sel = |r: &[usize], cc: &[usize]| {
            DMatrix::from_fn(r.len(), cc.len(), |i, j| k[(r[i], cc[j])])
        };
        let (ri, ei) = ([1usize, 3], [0usize, 2]);
        let kee_inv = sel(&ei, &ei).try_inverse().unwrap();
        let gain = sel(&ri, &ei) * &kee_inv;
        let mr = DVector::from_vec(vec![g.mean[1], g.mean[3]]);
        let me = DVector::from_vec(vec![g.mean[0], g.mean[2]]);
        let cm = mr + &gain * (xe - me);
        let cc = sel(&ri, &ri) - &gain * sel(&ei, &ri);
        assert!((mean - cm).norm() < 1e-9);
        assert!(linalg::rel_frobenius(&cov.densify(), &cc) < 1e-9);
    }

    proptest! {
        #[test]
        fn prop_round_trip(seed in any::<u64>(), d in 1usize..=8, n in 0usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_moments(&mut rng, d, n);
            let back = g.to_canonical().unwrap().to_moments().unwrap();
            prop_assert!((&back.mean - &g.mean).amax() < 1e-9);
            prop_assert!(linalg::rel_frobenius(&back.cov.densify(), &g.cov.densify()) < 1e-9);
        }

        #[test]
        fn prop_multiply_commutes(seed in any::<u64>(), d in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_moments(&mut rng, d, 2).to_canonical().unwrap();
            let b = random_moments(&mut rng, d, 1).to_canonical().unwrap();
            let c = random_moments(&mut rng, d, 3).to_canonical().unwrap();
            let ab = a.multiply(&b).unwrap();
            let ba = b.multiply(&a).unwrap();
            prop_assert_eq!(&ab.info, &ba.info);
            prop_assert_eq!(ab.precision.densify(), ba.precision.densify());
            let l = ab.multiply(&c).unwrap();
            let r = a.multiply(&b.multiply(&c).unwrap()).unwrap();
            prop_assert!((l.info - r.info).amax() < 1e-12);
            prop_assert!(linalg::rel_frobenius(&l.precision.densify(), &r.precision.densify()) < 1e-12);
        }
    }
}
