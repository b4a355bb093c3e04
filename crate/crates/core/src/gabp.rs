//! Dense Gaussian belief propagation with finite-difference linearisation
//! of the processes, used as the baseline.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{
    condition_graph_exact, run_bp, BpOptions, Evidence, FactorGraph, FactorNode, GraphSummary,
    OuterDiagnostics, Potential,
};
use crate::gaussian::UNINFORMATIVE_PRECISION;
use crate::linalg;
use crate::rng::SeedStream;
use crate::sem::{MapFn, ProcessKind, Sem, VarId};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dense moments `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl DenseGaussian {
    pub fn to_canonical(&self) -> Result<DenseCanonical> {
        let chol = linalg::cholesky_strict(self.cov.clone(), "DenseGaussian::to_canonical")?;
        Ok(DenseCanonical {
            info: chol.solve(&self.mean),
            precision: linalg::symmetrize(&chol.inverse()),
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = linalg::cholesky_strict(self.cov.clone(), "DenseGaussian::log_density")?;
        let r = x - &self.mean;
        let quad = r.dot(&chol.solve(&r));
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        Ok(-0.5 * (quad + logdet + self.mean.len() as f64 * LN_2PI))
    }
}

/// Dense canonical parameters `(n, P)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCanonical {
    pub info: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl DenseCanonical {
    pub fn to_moments(&self) -> Result<DenseGaussian> {
        let chol = linalg::cholesky_strict(self.precision.clone(), "DenseCanonical::to_moments")?;
        Ok(DenseGaussian {
            mean: chol.solve(&self.info),
            cov: linalg::symmetrize(&chol.inverse()),
        })
    }

    pub fn multiply(&self, other: &DenseCanonical) -> DenseCanonical {
        DenseCanonical {
            info: &self.info + &other.info,
            precision: &self.precision + &other.precision,
        }
    }

    /// Zero-pad into `total` dimensions; entry `i` lands on `idx[i]`.
    pub fn embed(&self, idx: &[usize], total: usize) -> DenseCanonical {
        let mut info = DVector::zeros(total);
        let mut precision = DMatrix::zeros(total, total);
        for (a, &i) in idx.iter().enumerate() {
            info[i] = self.info[a];
            for (b, &j) in idx.iter().enumerate() {
                precision[(i, j)] = self.precision[(a, b)];
            }
        }
        DenseCanonical { info, precision }
    }

    /// Integrate out every coordinate not in `keep`.
    pub fn marginalize(&self, keep: &[usize]) -> Result<DenseCanonical> {
        let drop = crate::gaussian::complement(keep, self.info.len())?;
        if drop.is_empty() {
            return Ok(self.clone());
        }
        let p = &self.precision;
        let sub =
            |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| p[(r[i], c[j])]);
        let p_lr = sub(keep, &drop);
        let chol = linalg::cholesky_jittered(sub(&drop, &drop), "dense marginalize")?;
        let info = linalg::select_entries(&self.info, keep)
            - &p_lr * chol.solve(&linalg::select_entries(&self.info, &drop));
        let precision =
            linalg::symmetrize(&(sub(keep, keep) - &p_lr * chol.solve(&p_lr.transpose())));
        Ok(DenseCanonical { info, precision })
    }
}

impl Potential for DenseCanonical {
    fn uninformative(d: usize) -> Self {
        DenseCanonical {
            info: DVector::zeros(d),
            precision: DMatrix::identity(d, d) * UNINFORMATIVE_PRECISION,
        }
    }

    fn dim(&self) -> usize {
        self.info.len()
    }

    fn width(&self) -> usize {
        0
    }

    fn factor_message(
        factor: &FactorNode<Self>,
        incoming: &[Self],
        target: usize,
        _opts: &BpOptions,
    ) -> Result<Self> {
        if factor.slots.len() == 1 {
            return Ok(factor.potential.clone());
        }
        let total = factor.dim();
        let mut joint = factor.potential.clone();
        for (s, msg) in incoming.iter().enumerate() {
            if s != target {
                let idx = factor.indices(s);
                for (a, &i) in idx.iter().enumerate() {
                    joint.info[i] += msg.info[a];
                    for (b, &j) in idx.iter().enumerate() {
                        joint.precision[(i, j)] += msg.precision[(a, b)];
                    }
                }
            }
        }
        debug_assert_eq!(joint.info.len(), total);
        joint.marginalize(&factor.indices(target))
    }

    fn product(parts: &[&Self], d: usize, _cap: usize) -> Result<Self> {
        let mut out = DenseCanonical {
            info: DVector::zeros(d),
            precision: DMatrix::zeros(d, d),
        };
        if parts.is_empty() {
            return Ok(<Self as Potential>::uninformative(d));
        }
        for p in parts {
            if p.info.len() != d {
                return Err(Error::DimensionMismatch {
                    op: "dense message product",
                    expected: d,
                    got: p.info.len(),
                });
            }
            out.info += &p.info;
            out.precision += &p.precision;
        }
        Ok(out)
    }

    fn mean(&self) -> Result<DVector<f64>> {
        let chol = linalg::cholesky_strict(self.precision.clone(), "dense belief mean")?;
        Ok(chol.solve(&self.info))
    }

    fn condition(&self, evidence: &[usize], values: &DVector<f64>) -> Result<Self> {
        let rest = crate::gaussian::complement(evidence, self.info.len())?;
        let p = &self.precision;
        let p_re = DMatrix::from_fn(rest.len(), evidence.len(), |i, j| p[(rest[i], evidence[j])]);
        Ok(DenseCanonical {
            info: linalg::select_entries(&self.info, &rest) - p_re * values,
            precision: DMatrix::from_fn(rest.len(), rest.len(), |i, j| p[(rest[i], rest[j])]),
        })
    }
}

/// Central differences with step `step·max(1, |x_j|)` per coordinate.
pub fn jacobian_fd(f: &MapFn, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut cols = Vec::with_capacity(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let down = f(&xp);
        xp[j] = x[j];
        let col = (up - down) / (2.0 * h);
        if !col.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("jacobian column {j}"),
            });
        }
        cols.push(col);
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(f(x).len(), 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// First-order linearisation of a process about `m`: `out ≈ J·in + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedFactor {
    pub point: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// `f(point)`.
    pub value: DVector<f64>,
}

impl LinearizedFactor {
    pub fn new(f: &MapFn, point: &DVector<f64>, step: f64) -> Result<Self> {
        Ok(LinearizedFactor {
            point: point.clone(),
            jacobian: jacobian_fd(f, point, step)?,
            value: f(point),
        })
    }

    /// Joint over `(in, out)`: mean `[m; f(m)]`, covariance
    /// `[[K, KJᵀ], [JK, JKJᵀ + noise + γ²I]]`.
    pub fn joint(
        &self,
        input_cov: &DMatrix<f64>,
        noise: &DVector<f64>,
        gamma2: f64,
    ) -> DenseGaussian {
        let (dout, din) = self.jacobian.shape();
        let total = din + dout;
        let mut mean = DVector::zeros(total);
        mean.rows_mut(0, din).copy_from(&self.point);
        mean.rows_mut(din, dout).copy_from(&self.value);
        let jk = &self.jacobian * input_cov;
        let mut cov = DMatrix::zeros(total, total);
        cov.view_mut((0, 0), (din, din)).copy_from(input_cov);
        cov.view_mut((din, 0), (dout, din)).copy_from(&jk);
        cov.view_mut((0, din), (din, dout))
            .copy_from(&jk.transpose());
        let mut out = &jk * self.jacobian.transpose();
        for k in 0..dout {
            out[(k, k)] += noise[k] + gamma2;
        }
        cov.view_mut((din, din), (dout, dout)).copy_from(&out);
        DenseGaussian {
            mean,
            cov: linalg::symmetrize(&cov),
        }
    }

    /// Canonical conditional `p(out | in)` of the linearised process; equal
    /// to the joint divided by its input marginal.
    pub fn conditional(&self, noise: &DVector<f64>, gamma2: f64) -> Result<DenseCanonical> {
        let (dout, din) = self.jacobian.shape();
        let sinv = DVector::from_fn(dout, |k, _| 1.0 / (noise[k] + gamma2));
        if let Some(k) = sinv.iter().position(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::ZeroNugget {
                op: "LinearizedFactor::conditional",
                index: k,
            });
        }
        let offset = &self.value - &self.jacobian * &self.point;
        let sj = crate::dlr::scale_rows(&self.jacobian, &sinv);
        let total = din + dout;
        let mut p = DMatrix::zeros(total, total);
        p.view_mut((0, 0), (din, din))
            .copy_from(&(self.jacobian.transpose() * &sj));
        p.view_mut((din, 0), (dout, din)).copy_from(&(-&sj));
        p.view_mut((0, din), (din, dout))
            .copy_from(&(-sj.transpose()));
        for k in 0..dout {
            p[(din + k, din + k)] = sinv[k];
        }
        let so = sinv.component_mul(&offset);
        let mut info = DVector::zeros(total);
        info.rows_mut(0, din)
            .copy_from(&(-(self.jacobian.transpose() * &so)));
        info.rows_mut(din, dout).copy_from(&so);
        Ok(DenseCanonical {
            info,
            precision: linalg::symmetrize(&p),
        })
    }
}

/// Convenience wrapper for [`LinearizedFactor::joint`].
pub fn linearize_factor(
    f: &MapFn,
    input: &DenseGaussian,
    noise: &DVector<f64>,
    gamma2: f64,
    step: f64,
) -> Result<DenseGaussian> {
    let lin = LinearizedFactor::new(f, &input.mean, step)?;
    let joint = lin.joint(&input.cov, noise, gamma2);
    linalg::cholesky_strict(joint.cov.clone(), "linearized joint")?;
    Ok(joint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GabpParams {
    /// Samples used to moment-match ancestral laws without a Gaussian form.
    pub n: usize,
    /// Jitter on every process noise and on moment-matched priors.
    pub gamma2: f64,
    pub relin_every: usize,
    pub max_sweeps: usize,
    pub tol: f64,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for GabpParams {
    fn default() -> Self {
        GabpParams {
            n: 64,
            gamma2: 0.01,
            relin_every: 10,
            max_sweeps: 150,
            tol: 1e-6,
            fd_step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GabpTimings {
    pub prior: f64,
    pub jacobian: f64,
    pub messages: f64,
    pub beliefs: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GabpDiagnostics {
    pub method: String,
    pub params: GabpParams,
    pub graph: GraphSummary,
    /// One entry per relinearisation round.
    pub outer: Vec<OuterDiagnostics>,
    pub stop_reason: String,
    pub sweeps: usize,
    pub messages: usize,
    pub timings: GabpTimings,
}

impl GabpDiagnostics {
    pub fn without_timings(&self) -> Self {
        GabpDiagnostics {
            timings: GabpTimings::default(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GabpResult {
    pub beliefs: BTreeMap<VarId, DenseCanonical>,
    pub diagnostics: GabpDiagnostics,
}

/// Gaussian laws of the ancestral variables: stated laws where present,
/// otherwise moments of `n` prior samples plus `gamma2·I`. The samples come
/// from the same seed stream as the first GEnBP ensemble.
pub fn ancestral_laws(
    sem: &Sem,
    evidence: &Evidence,
    n: usize,
    gamma2: f64,
    seed: u64,
) -> Result<HashMap<VarId, DenseGaussian>> {
    let mut laws = HashMap::new();
    let mut need_samples = false;
    for p in sem.processes() {
        if let ProcessKind::Ancestral { gaussian, .. } = &p.kind {
            let v = p.outputs[0];
            match gaussian {
                Some((m, c)) => {
                    laws.insert(
                        v,
                        DenseGaussian {
                            mean: m.clone(),
                            cov: c.clone(),
                        },
                    );
                }
                None if !evidence.contains_key(&v) => need_samples = true,
                None => {}
            }
        }
    }
    if need_samples {
        let mut overrides = HashMap::new();
        for (&v, val) in evidence {
            if sem.is_ancestral(v) {
                overrides.insert(v, DMatrix::from_fn(val.len(), n, |i, _| val[i]));
            }
        }
        let ens = sem.ancestral_sample(n, SeedStream::new(seed).split("outer", 0), &overrides)?;
        for p in sem.processes() {
            if let ProcessKind::Ancestral { gaussian: None, .. } = &p.kind {
                let v = p.outputs[0];
                if evidence.contains_key(&v) {
                    continue;
                }
                let dev = ens[v].deviations();
                let mut cov = &dev * dev.transpose() / (n - 1) as f64;
                for i in 0..cov.nrows() {
                    cov[(i, i)] += gamma2;
                }
                laws.insert(
                    v,
                    DenseGaussian {
                        mean: ens[v].mean(),
                        cov,
                    },
                );
            }
        }
    }
    Ok(laws)
}

fn stacked(ids: &[VarId], points: &[DVector<f64>]) -> DVector<f64> {
    let parts: Vec<f64> = ids
        .iter()
        .flat_map(|&v| points[v].iter().copied())
        .collect();
    DVector::from_vec(parts)
}

/// Dense GaBP with relinearisation at the current belief means every
/// `relin_every` sweeps. Messages are kept across relinearisations.
pub fn run_gabp(sem: &Sem, evidence: &Evidence, params: &GabpParams) -> Result<GabpResult> {
    if params.relin_every == 0 || !(params.tol > 0.0) || params.gamma2 < 0.0 {
        return Err(Error::InvalidArgument(
            "relin_every and tol must be positive and gamma2 non-negative".into(),
        ));
    }
    let started = Instant::now();
    let mut timings = GabpTimings::default();
    let t = Instant::now();
    let laws = ancestral_laws(sem, evidence, params.n, params.gamma2, params.seed)?;
    timings.prior += t.elapsed().as_secs_f64();

    // initial linearisation points: prior means pushed through the processes
    let mut points: Vec<DVector<f64>> = sem
        .variables()
        .iter()
        .map(|v| DVector::zeros(v.dim))
        .collect();
    for p in sem.processes() {
        match &p.kind {
            ProcessKind::Ancestral { .. } => {
                let v = p.outputs[0];
                points[v] = match (evidence.get(&v), laws.get(&v)) {
                    (Some(val), _) => val.clone(),
                    (None, Some(law)) => law.mean.clone(),
                    (None, None) => unreachable!("every free ancestral variable has a law"),
                };
            }
            ProcessKind::Map { f, .. } => {
                let out = f(&stacked(&p.inputs, &points));
                let mut row = 0;
                for &o in &p.outputs {
                    let d = sem.variable(o).dim;
                    points[o] = evidence
                        .get(&o)
                        .cloned()
                        .unwrap_or_else(|| out.rows(row, d).into_owned());
                    row += d;
                }
            }
        }
    }

    let opts = BpOptions {
        max_iters: params.relin_every,
        tol: params.tol,
        ..BpOptions::default()
    };
    let mut messages: Option<Vec<Vec<DenseCanonical>>> = None;
    let mut outer = Vec::new();
    let mut sweeps = 0;
    let mut n_messages = 0;
    let mut stop_reason = "max-sweeps".to_string();
    let mut summary = None;
    let mut beliefs = BTreeMap::new();
    let mut round = 0;
    while sweeps < params.max_sweeps {
        let t = Instant::now();
        let mut g: FactorGraph<DenseCanonical> = FactorGraph::build(sem);
        for f in g.factors.iter_mut() {
            let p = &sem.processes()[f.process];
            f.potential = match &p.kind {
                ProcessKind::Ancestral { .. } => match laws.get(&p.outputs[0]) {
                    Some(law) => law.to_canonical()?,
                    None => <DenseCanonical as Potential>::uninformative(f.dim()),
                },
                ProcessKind::Map { f: map, noise, .. } => {
                    let lin =
                        LinearizedFactor::new(map, &stacked(&p.inputs, &points), params.fd_step)?;
                    lin.conditional(noise, params.gamma2)?
                }
            };
        }
        timings.jacobian += t.elapsed().as_secs_f64();
        condition_graph_exact(&mut g, evidence)?;
        if summary.is_none() {
            summary = Some(g.summary());
        }
        if let Some(m) = messages.take() {
            g.messages = m;
        }
        let budget = BpOptions {
            max_iters: opts.max_iters.min(params.max_sweeps - sweeps),
            ..opts.clone()
        };
        let t = Instant::now();
        let report = run_bp(&mut g, &budget)?;
        let elapsed = t.elapsed().as_secs_f64();
        timings.messages += report.message_seconds;
        timings.beliefs += elapsed - report.message_seconds;
        sweeps += report.iterations;
        n_messages += report.messages;

        let mut shift: f64 = 0.0;
        for (v, b) in g.beliefs.iter().enumerate() {
            if let Some(b) = b {
                let m = b.mean()?;
                let scale = m.amax().max(1.0);
                shift = shift.max((&m - &points[v]).amax() / scale);
                points[v] = m;
            }
        }
        beliefs = g
            .beliefs
            .iter()
            .enumerate()
            .filter_map(|(v, b)| b.clone().map(|b| (v, b)))
            .collect();
        outer.push(OuterDiagnostics {
            index: round,
            sweeps: report.iterations,
            converged: report.converged,
            residuals: report.residuals,
            query_shift: shift,
            degenerate: Vec::new(),
        });
        messages = Some(g.messages);
        round += 1;
        if report.converged && shift < params.tol {
            stop_reason = "linearization-stable".into();
            break;
        }
        if report.iterations == 0 {
            break;
        }
    }
    timings.total = started.elapsed().as_secs_f64();
    Ok(GabpResult {
        beliefs,
        diagnostics: GabpDiagnostics {
            method: "gabp".into(),
            params: params.clone(),
            graph: summary.unwrap_or(GraphSummary {
                variables: Vec::new(),
                factors: Vec::new(),
                edges: Vec::new(),
            }),
            outer,
            stop_reason,
            sweeps,
            messages: n_messages,
            timings,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::DenseJoint;
    use crate::sem::{running_example, Role, SemBuilder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let a2 = a.clone();
        let f: MapFn = Arc::new(move |x: &DVector<f64>| &a2 * x);
        let j = jacobian_fd(&f, &DVector::from_vec(vec![0.3, -4.0, 10.0]), 1e-5).unwrap();
        assert!((j - a).amax() < 1e-10);
    }

    #[test]
    fn jacobian_of_square() {
        let f: MapFn = Arc::new(|x: &DVector<f64>| x.map(|v| v * v));
        let j = jacobian_fd(&f, &DVector::from_element(1, 3.0), 1e-5).unwrap();
        assert!((j[(0, 0)] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn jacobian_of_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let q2 = q.clone();
        let f: MapFn =
            Arc::new(move |x: &DVector<f64>| DVector::from_element(1, x.dot(&(&q2 * x))));
        let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let j = jacobian_fd(&f, &x, 1e-5).unwrap();
        let grad = (&q + q.transpose()) * &x;
        assert!((j.row(0).transpose() - grad).amax() < 1e-6);
    }

    #[test]
    fn identity_and_scalar_linearisation() {
        let id: MapFn = Arc::new(|x: &DVector<f64>| x.clone());
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let input = DenseGaussian {
            mean: DVector::from_vec(vec![0.1, 0.2]),
            cov: k.clone(),
        };
        let noise = DVector::from_vec(vec![0.1, 0.1]);
        let j = linearize_factor(&id, &input, &noise, 0.0, 1e-5).unwrap();
        assert!((j.cov.view((0, 2), (2, 2)) - &k).amax() < 1e-9);
        assert!((j.cov.view((2, 2), (2, 2)) - (&k + DMatrix::identity(2, 2) * 0.1)).amax() < 1e-9);

        let ax: MapFn = Arc::new(|x: &DVector<f64>| x * 3.0);
        let input = DenseGaussian {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 2.0),
        };
        let j = linearize_factor(&ax, &input, &DVector::from_element(1, 0.5), 0.0, 1e-5).unwrap();
        assert!((j.cov[(1, 1)] - 18.5).abs() < 1e-8);
    }

    #[test]
    fn linearised_joint_matches_monte_carlo() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 1.5, 0.3]);
        let a2 = a.clone();
        let f: MapFn = Arc::new(move |x: &DVector<f64>| &a2 * x);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]);
        let input = DenseGaussian {
            mean: DVector::from_vec(vec![1.0, -1.0]),
            cov: k.clone(),
        };
        let noise = DVector::from_vec(vec![0.2, 0.1]);
        let joint = linearize_factor(&f, &input, &noise, 0.0, 1e-5).unwrap();
        let l = k.cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40_000;
        let mut samples = DMatrix::zeros(4, n);
        for c in 0..n {
            let z: DVector<f64> =
                DVector::from_fn(2, |_, _| rng.sample(rand_distr::StandardNormal));
            let e: DVector<f64> = DVector::from_fn(2, |i, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * noise[i].sqrt()
            });
            let x = &input.mean + &l * z;
            let y = &a * &x + e;
            samples.view_mut((0, c), (2, 1)).copy_from(&x);
            samples.view_mut((2, c), (2, 1)).copy_from(&y);
        }
        let dev = crate::ensemble::ens_dev(&samples);
        let mc = &dev * dev.transpose() / (n - 1) as f64;
        assert!((mc - &joint.cov).amax() < 0.06);
    }

    #[test]
    fn conditional_is_joint_over_marginal() {
        let f: MapFn =
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[1], x[0].sin()]));
        let input = DenseGaussian {
            mean: DVector::from_vec(vec![0.4, 1.2]),
            cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        };
        let noise = DVector::from_vec(vec![0.05, 0.02]);
        let lin = LinearizedFactor::new(&f, &input.mean, 1e-5).unwrap();
        let joint = lin.joint(&input.cov, &noise, 0.01).to_canonical().unwrap();
        let marg = input.to_canonical().unwrap().embed(&[0, 1], 4);
        let cond = lin.conditional(&noise, 0.01).unwrap();
        let back = cond.multiply(&marg);
        assert!((back.precision - joint.precision).amax() < 1e-8);
        assert!((back.info - joint.info).amax() < 1e-8);
    }

    #[test]
    fn conditioning_two_dimensional_by_hand() {
        // N([1, 2], [[2, 1], [1, 2]]) given x2 = 3: mean 1.5, var 1.5
        let g = DenseGaussian {
            mean: DVector::from_vec(vec![1.0, 2.0]),
            cov: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
        };
        let c = <DenseCanonical as Potential>::condition(
            &g.to_canonical().unwrap(),
            &[1],
            &DVector::from_element(1, 3.0),
        )
        .unwrap();
        let m = c.to_moments().unwrap();
        assert!((m.mean[0] - 1.5).abs() < 1e-12);
        assert!((m.cov[(0, 0)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn uninformative_product_is_neutral() {
        let g = DenseGaussian {
            mean: DVector::from_vec(vec![1.0, 2.0]),
            cov: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
        }
        .to_canonical()
        .unwrap();
        let u = DenseCanonical {
            info: DVector::zeros(2),
            precision: DMatrix::zeros(2, 2),
        };
        assert_eq!(g.multiply(&u), g);
    }

    #[test]
    fn running_example_matches_oracle() {
        let sem = running_example();
        let mut ev = Evidence::new();
        ev.insert(4, DVector::from_element(1, 0.7));
        ev.insert(5, DVector::from_element(1, -0.3));
        let params = GabpParams {
            gamma2: 0.0,
            ..Default::default()
        };
        let r = run_gabp(&sem, &ev, &params).unwrap();
        let oracle = DenseJoint::from_sem(&sem, &HashMap::new(), 0.0)
            .unwrap()
            .condition(&ev)
            .unwrap();
        // loopy (x1-x2-x4-x3-x1), so only the means are exact
        for v in 0..4 {
            let m = r.beliefs[&v].to_moments().unwrap();
            let (om, _) = oracle.marginal(v);
            assert!((m.mean - om).amax() < 1e-6, "variable {v}");
        }
    }

    #[test]
    fn scalar_tree_is_exact() {
        let mut b = SemBuilder::new();
        let x = b.variable("x", 1, Role::Query);
        let y = b.variable("y", 1, Role::Evidence);
        let z = b.variable("z", 1, Role::Evidence);
        b.gaussian_prior(
            "px",
            x,
            DVector::from_element(1, 0.5),
            DMatrix::from_element(1, 1, 1.5),
        );
        b.linear(
            "py",
            &[x],
            &[y],
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            DVector::from_element(1, 0.3),
        );
        b.linear(
            "pz",
            &[x],
            &[z],
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, 0.2),
            DVector::from_element(1, 0.1),
        );
        let sem = b.build().unwrap();
        let mut ev = Evidence::new();
        ev.insert(y, DVector::from_element(1, 1.2));
        ev.insert(z, DVector::from_element(1, 0.4));
        let params = GabpParams {
            gamma2: 0.0,
            ..Default::default()
        };
        let r = run_gabp(&sem, &ev, &params).unwrap();
        let oracle = DenseJoint::from_sem(&sem, &HashMap::new(), 0.0)
            .unwrap()
            .condition(&ev)
            .unwrap();
        let m = r.beliefs[&x].to_moments().unwrap();
        let (om, oc) = oracle.marginal(x);
        assert!((m.mean - om).amax() < 1e-8);
        assert!((m.cov - oc).amax() < 1e-8);
    }
}
