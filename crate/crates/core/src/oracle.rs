//! Exact dense joint Gaussian of a linear-Gaussian model, used as the
//! reference posterior for small problems.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor_graph::Evidence;
use crate::linalg;
use crate::sem::{ProcessKind, Sem, VarId};

#[derive(Clone, Debug)]
pub struct DenseJoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    offsets: Vec<usize>,
    dims: Vec<usize>,
}

impl DenseJoint {
    /// Propagate means and covariances through the processes in order.
    /// `priors` replaces the law of ancestral variables (needed when the
    /// sampler has no stated Gaussian form); `jitter` is added to every
    /// process noise variance.
    pub fn from_sem(
        sem: &Sem,
        priors: &HashMap<VarId, (DVector<f64>, DMatrix<f64>)>,
        jitter: f64,
    ) -> Result<Self> {
        let dims: Vec<usize> = sem.variables().iter().map(|v| v.dim).collect();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for d in &dims {
            offsets.push(total);
            total += d;
        }
        let mut mean = DVector::zeros(total);
        let mut cov = DMatrix::zeros(total, total);
        let mut done: Vec<usize> = Vec::new();
        for p in sem.processes() {
            let out_idx: Vec<usize> = p
                .outputs
                .iter()
                .flat_map(|&v| offsets[v]..offsets[v] + dims[v])
                .collect();
            match &p.kind {
                ProcessKind::Ancestral { gaussian, .. } => {
                    let v = p.outputs[0];
                    let (m, c) = priors.get(&v).or(gaussian.as_ref()).ok_or_else(|| {
                        Error::InvalidModel(format!("no Gaussian law for {}", p.name))
                    })?;
                    for (i, &r) in out_idx.iter().enumerate() {
                        mean[r] = m[i];
                        for (j, &s) in out_idx.iter().enumerate() {
                            cov[(r, s)] = c[(i, j)];
                        }
                    }
                }
                ProcessKind::Map { noise, linear, .. } => {
                    let lin = linear.as_ref().ok_or_else(|| {
                        Error::InvalidModel(format!("process {} is not linear", p.name))
                    })?();
                    let in_idx: Vec<usize> = p
                        .inputs
                        .iter()
                        .flat_map(|&v| offsets[v]..offsets[v] + dims[v])
                        .collect();
                    let m_in = linalg::select_entries(&mean, &in_idx);
                    let m_out = &lin.a * m_in + &lin.b;
                    // Cov(out, prev) = A Cov(in, prev)
                    let c_in_prev = DMatrix::from_fn(in_idx.len(), done.len(), |i, j| {
                        cov[(in_idx[i], done[j])]
                    });
                    let c_out_prev = &lin.a * c_in_prev;
                    let c_in = DMatrix::from_fn(in_idx.len(), in_idx.len(), |i, j| {
                        cov[(in_idx[i], in_idx[j])]
                    });
                    let mut c_out = &lin.a * c_in * lin.a.transpose();
                    for k in 0..out_idx.len() {
                        c_out[(k, k)] += noise[k] + jitter;
                    }
                    for (i, &r) in out_idx.iter().enumerate() {
                        mean[r] = m_out[i];
                        for (j, &s) in done.iter().enumerate() {
                            cov[(r, s)] = c_out_prev[(i, j)];
                            cov[(s, r)] = c_out_prev[(i, j)];
                        }
                        for (j, &s) in out_idx.iter().enumerate() {
                            cov[(r, s)] = c_out[(i, j)];
                        }
                    }
                }
            }
            done.extend(out_idx);
        }
        Ok(DenseJoint {
            mean,
            cov,
            offsets,
            dims,
        })
    }

    /// Gaussian conditioning on the evidence; observed blocks become
    /// point masses at their values.
    pub fn condition(&self, evidence: &Evidence) -> Result<DenseJoint> {
        let e_idx: Vec<usize> = evidence
            .keys()
            .flat_map(|&v| self.offsets[v]..self.offsets[v] + self.dims[v])
            .collect();
        if e_idx.is_empty() {
            return Ok(self.clone());
        }
        let values: Vec<f64> = evidence.values().flat_map(|v| v.iter().copied()).collect();
        let x_e = DVector::from_vec(values);
        let n = self.mean.len();
        let all: Vec<usize> = (0..n).collect();
        let c_ee = DMatrix::from_fn(e_idx.len(), e_idx.len(), |i, j| {
            self.cov[(e_idx[i], e_idx[j])]
        });
        let c_ae = DMatrix::from_fn(n, e_idx.len(), |i, j| self.cov[(all[i], e_idx[j])]);
        let chol = linalg::cholesky_strict(c_ee, "evidence covariance")?;
        let innov = x_e - linalg::select_entries(&self.mean, &e_idx);
        let mean = &self.mean + &c_ae * chol.solve(&innov);
        let cov = linalg::symmetrize(&(&self.cov - &c_ae * chol.solve(&c_ae.transpose())));
        Ok(DenseJoint {
            mean,
            cov,
            offsets: self.offsets.clone(),
            dims: self.dims.clone(),
        })
    }

    pub fn marginal(&self, v: VarId) -> (DVector<f64>, DMatrix<f64>) {
        let (o, d) = (self.offsets[v], self.dims[v]);
        (
            self.mean.rows(o, d).into_owned(),
            self.cov.view((o, o), (d, d)).into_owned(),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}
