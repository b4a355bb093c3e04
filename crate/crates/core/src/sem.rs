//! Structural equation models: named variables produced by an ordered list
//! of black-box generative processes.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub type VarId = usize;

/// Deterministic part of a process, applied to the stacked inputs of one
/// member.
pub type MapFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Draws one ancestral sample.
pub type SamplerFn = Arc<dyn Fn(&mut dyn RngCore) -> DVector<f64> + Send + Sync>;
/// Lazily materialised affine form of a linear process.
pub type LinearFn = Arc<dyn Fn() -> LinearMap + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Role {
    Query,
    Latent,
    Evidence,
}

#[derive(Clone, Debug)]
pub struct Variable {
    pub name: String,
    pub dim: usize,
    pub role: Role,
}

/// `out = a·in + b` on stacked inputs and outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone)]
pub enum ProcessKind {
    /// No inputs; samples come from `sampler`. `gaussian` optionally states
    /// the exact law `N(mean, cov)` for exact-inference paths.
    Ancestral {
        sampler: SamplerFn,
        gaussian: Option<(DVector<f64>, DMatrix<f64>)>,
    },
    /// `out = f(in) + N(0, diag(noise))`.
    Map {
        f: MapFn,
        noise: DVector<f64>,
        linear: Option<LinearFn>,
    },
}

#[derive(Clone)]
pub struct Process {
    pub name: String,
    pub inputs: Vec<VarId>,
    pub outputs: Vec<VarId>,
    pub kind: ProcessKind,
}

impl fmt::Debug for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ProcessKind::Ancestral { .. } => "ancestral",
            ProcessKind::Map { .. } => "map",
        };
        f.debug_struct("Process")
            .field("name", &self.name)
            .field("inputs", &self.inputs)
            .field("outputs", &self.outputs)
            .field("kind", &kind)
            .finish()
    }
}

impl Process {
    pub fn is_ancestral(&self) -> bool {
        matches!(self.kind, ProcessKind::Ancestral { .. })
    }
}

/// A validated model. Processes are stored in a topological order.
#[derive(Clone, Debug)]
pub struct Sem {
    variables: Vec<Variable>,
    processes: Vec<Process>,
    producer: Vec<usize>,
}

#[derive(Default)]
pub struct SemBuilder {
    variables: Vec<Variable>,
    processes: Vec<Process>,
}

impl SemBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn variable(&mut self, name: &str, dim: usize, role: Role) -> VarId {
        self.variables.push(Variable {
            name: name.to_string(),
            dim,
            role,
        });
        self.variables.len() - 1
    }

    pub fn ancestral(&mut self, name: &str, output: VarId, sampler: SamplerFn) -> &mut Self {
        self.processes.push(Process {
            name: name.to_string(),
            inputs: Vec::new(),
            outputs: vec![output],
            kind: ProcessKind::Ancestral {
                sampler,
                gaussian: None,
            },
        });
        self
    }

    /// Ancestral variable with a Gaussian law, usable by the exact paths.
    pub fn gaussian_prior(
        &mut self,
        name: &str,
        output: VarId,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> &mut Self {
        let chol = cov.clone().cholesky().map(|c| c.l());
        let m = mean.clone();
        let sampler: SamplerFn = Arc::new(move |rng: &mut dyn RngCore| {
            let z = DVector::from_fn(m.len(), |_, _| StandardNormal.sample(&mut *rng));
            match &chol {
                Some(l) => &m + l * z,
                None => m.clone(),
            }
        });
        self.processes.push(Process {
            name: name.to_string(),
            inputs: Vec::new(),
            outputs: vec![output],
            kind: ProcessKind::Ancestral {
                sampler,
                gaussian: Some((mean, cov)),
            },
        });
        self
    }

    pub fn map(
        &mut self,
        name: &str,
        inputs: &[VarId],
        outputs: &[VarId],
        f: MapFn,
        noise: DVector<f64>,
    ) -> &mut Self {
        self.processes.push(Process {
            name: name.to_string(),
            inputs: inputs.to_vec(),
            outputs: outputs.to_vec(),
            kind: ProcessKind::Map {
                f,
                noise,
                linear: None,
            },
        });
        self
    }

    /// Affine process `out = a·in + b + N(0, diag(noise))`.
    pub fn linear(
        &mut self,
        name: &str,
        inputs: &[VarId],
        outputs: &[VarId],
        a: DMatrix<f64>,
        b: DVector<f64>,
        noise: DVector<f64>,
    ) -> &mut Self {
        let (a2, b2) = (a.clone(), b.clone());
        let f: MapFn = Arc::new(move |x: &DVector<f64>| &a2 * x + &b2);
        let lin = LinearMap { a, b };
        let linear: LinearFn = Arc::new(move || lin.clone());
        self.map_with_linear(name, inputs, outputs, f, noise, linear)
    }

    /// Map process that also exposes its affine form.
    pub fn map_with_linear(
        &mut self,
        name: &str,
        inputs: &[VarId],
        outputs: &[VarId],
        f: MapFn,
        noise: DVector<f64>,
        linear: LinearFn,
    ) -> &mut Self {
        self.processes.push(Process {
            name: name.to_string(),
            inputs: inputs.to_vec(),
            outputs: outputs.to_vec(),
            kind: ProcessKind::Map {
                f,
                noise,
                linear: Some(linear),
            },
        });
        self
    }

    pub fn build(self) -> Result<Sem> {
        Sem::new(self.variables, self.processes)
    }
}

impl Sem {
    pub fn new(variables: Vec<Variable>, processes: Vec<Process>) -> Result<Self> {
        let nv = variables.len();
        let mut producer = vec![usize::MAX; nv];
        for v in &variables {
            if v.dim == 0 {
                return Err(Error::InvalidModel(format!(
                    "variable {} has dimension 0",
                    v.name
                )));
            }
        }
        for (j, p) in processes.iter().enumerate() {
            if p.outputs.is_empty() {
                return Err(Error::InvalidModel(format!(
                    "process {} has no outputs",
                    p.name
                )));
            }
            for &o in p.outputs.iter().chain(&p.inputs) {
                if o >= nv {
                    return Err(Error::InvalidModel(format!(
                        "process {} references unknown variable {o}",
                        p.name
                    )));
                }
            }
            if let Some(&o) = p.outputs.iter().find(|o| p.inputs.contains(o)) {
                return Err(Error::InvalidModel(format!(
                    "process {} has variable {} as both input and output",
                    p.name, variables[o].name
                )));
            }
            if p.is_ancestral() != p.inputs.is_empty() {
                return Err(Error::InvalidModel(format!(
                    "process {}: ancestral processes take no inputs and maps take at least one",
                    p.name
                )));
            }
            for &i in &p.inputs {
                if producer[i] == usize::MAX {
                    return Err(Error::InvalidModel(format!(
                        "process {} reads {} before it is produced (cycle or bad order)",
                        p.name, variables[i].name
                    )));
                }
            }
            for &o in &p.outputs {
                if producer[o] != usize::MAX {
                    return Err(Error::InvalidModel(format!(
                        "variable {} produced by both {} and {}",
                        variables[o].name, processes[producer[o]].name, p.name
                    )));
                }
                producer[o] = j;
            }
            if let ProcessKind::Map { noise, .. } = &p.kind {
                let out_dim: usize = p.outputs.iter().map(|&o| variables[o].dim).sum();
                if noise.len() != out_dim {
                    return Err(Error::InvalidModel(format!(
                        "process {}: noise has {} entries for output dimension {out_dim}",
                        p.name,
                        noise.len()
                    )));
                }
            }
        }
        if let Some(v) = (0..nv).find(|&v| producer[v] == usize::MAX) {
            return Err(Error::InvalidModel(format!(
                "variable {} is never produced",
                variables[v].name
            )));
        }
        Ok(Sem {
            variables,
            processes,
            producer,
        })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, id: VarId) -> &Variable {
        &self.variables[id]
    }

    pub fn processes(&self) -> &[Process] {
        &self.processes
    }

    pub fn producer(&self, id: VarId) -> usize {
        self.producer[id]
    }

    pub fn find(&self, name: &str) -> Option<VarId> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn stacked_dim(&self, ids: &[VarId]) -> usize {
        ids.iter().map(|&v| self.variables[v].dim).sum()
    }

    /// True when the variable is the output of an ancestral process.
    pub fn is_ancestral(&self, id: VarId) -> bool {
        self.processes[self.producer[id]].is_ancestral()
    }

    /// Run every process member by member in order. Variables present in
    /// `overrides` (a `D×N` matrix) are not simulated; their process is
    /// skipped and the given samples are used downstream.
    pub fn ancestral_sample(
        &self,
        n: usize,
        seed: SeedStream,
        overrides: &HashMap<VarId, DMatrix<f64>>,
    ) -> Result<Vec<Ensemble>> {
        let mut out: Vec<Option<DMatrix<f64>>> = vec![None; self.variables.len()];
        for (&v, m) in overrides {
            if m.nrows() != self.variables[v].dim || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    op: "ancestral_sample override",
                    expected: self.variables[v].dim,
                    got: m.nrows(),
                });
            }
            out[v] = Some(m.clone());
        }
        for (j, p) in self.processes.iter().enumerate() {
            if p.outputs.iter().all(|o| out[*o].is_some()) {
                continue;
            }
            let mut rng = seed.rng("process", j as u64);
            let out_dim = self.stacked_dim(&p.outputs);
            let mut block = DMatrix::zeros(out_dim, n);
            match &p.kind {
                ProcessKind::Ancestral { sampler, .. } => {
                    for c in 0..n {
                        let s = sampler(&mut rng);
                        self.check_len(p, s.len(), out_dim)?;
                        block.set_column(c, &s);
                    }
                }
                ProcessKind::Map { f, noise, .. } => {
                    let in_dim = self.stacked_dim(&p.inputs);
                    let sd = noise.map(|v| v.max(0.0).sqrt());
                    for c in 0..n {
                        let mut x = DVector::zeros(in_dim);
                        let mut row = 0;
                        for &i in &p.inputs {
                            let d = self.variables[i].dim;
                            let src = out[i].as_ref().expect("inputs precede outputs");
                            x.rows_mut(row, d).copy_from(&src.column(c));
                            row += d;
                        }
                        let mut y = f(&x);
                        self.check_len(p, y.len(), out_dim)?;
                        for (k, v) in y.iter_mut().enumerate() {
                            if sd[k] > 0.0 {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                *v += sd[k] * z;
                            }
                        }
                        if !y.iter().all(|v| v.is_finite()) {
                            return Err(Error::NonFinite {
                                context: format!("process {}", p.name),
                            });
                        }
                        block.set_column(c, &y);
                    }
                }
            }
            let mut row = 0;
            for &o in &p.outputs {
                let d = self.variables[o].dim;
                if out[o].is_none() {
                    out[o] = Some(block.rows(row, d).into_owned());
                }
                row += d;
            }
        }
        out.into_iter()
            .map(|m| Ensemble::new(m.expect("every variable is produced")))
            .collect()
    }

    fn check_len(&self, p: &Process, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::DimensionMismatch {
                op: "process output",
                expected,
                got,
            });
        }
        let _ = p;
        Ok(())
    }
}

/// The six-variable running example: `x1 → x2, x1 → x3, (x2, x3) → x4,
/// x2 → x5, (x4, x5) → x6`, with `x1` queried and `x5, x6` observed.
/// Scalar linear-Gaussian processes.
pub fn running_example() -> Sem {
    let mut b = SemBuilder::new();
    let x1 = b.variable("x1", 1, Role::Query);
    let x2 = b.variable("x2", 1, Role::Latent);
    let x3 = b.variable("x3", 1, Role::Latent);
    let x4 = b.variable("x4", 1, Role::Latent);
    let x5 = b.variable("x5", 1, Role::Evidence);
    let x6 = b.variable("x6", 1, Role::Evidence);
    let one = |v: f64| DVector::from_element(1, v);
    b.gaussian_prior("p1", x1, one(0.0), DMatrix::from_element(1, 1, 1.0));
    b.linear(
        "p12",
        &[x1],
        &[x2],
        DMatrix::from_element(1, 1, 0.9),
        one(0.1),
        one(0.2),
    );
    b.linear(
        "p13",
        &[x1],
        &[x3],
        DMatrix::from_element(1, 1, -0.5),
        one(0.0),
        one(0.3),
    );
    b.linear(
        "p234",
        &[x2, x3],
        &[x4],
        DMatrix::from_row_slice(1, 2, &[0.6, 0.4]),
        one(0.0),
        one(0.1),
    );
    b.linear(
        "p25",
        &[x2],
        &[x5],
        DMatrix::from_element(1, 1, 1.2),
        one(0.0),
        one(0.25),
    );
    b.linear(
        "p456",
        &[x4, x5],
        &[x6],
        DMatrix::from_row_slice(1, 2, &[1.0, -0.7]),
        one(0.2),
        one(0.15),
    );
    b.build().expect("running example is valid")
}
