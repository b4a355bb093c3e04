//! Factor graphs induced by a [`Sem`], and a synchronous loopy BP engine
//! generic over the message representation.

mod genbp;
mod potentials;

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sem::{Role, Sem, VarId};

pub use genbp::{run_genbp, GenbpDiagnostics, GenbpParams, GenbpResult, OuterDiagnostics, Timings};
pub use potentials::{
    condition_graph, condition_graph_exact, init_factors_exact, init_factors_from_ensembles,
    linear_conditional, Evidence, FactorForm,
};

/// A block of a factor's stacked variable vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub var: VarId,
    pub offset: usize,
    pub dim: usize,
    /// True for process outputs, false for inputs.
    pub output: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarNode {
    pub name: String,
    pub dim: usize,
    pub role: Role,
    pub observed: bool,
}

#[derive(Clone, Debug)]
pub struct FactorNode<P> {
    pub name: String,
    /// Index of the generating process in the model.
    pub process: usize,
    pub slots: Vec<Slot>,
    pub potential: P,
    /// Joint samples over the stacked slots (ensemble-initialised factors).
    pub ensemble: Option<crate::ensemble::Ensemble>,
}

impl<P> FactorNode<P> {
    pub fn dim(&self) -> usize {
        self.slots.iter().map(|s| s.dim).sum()
    }

    pub fn slot_of(&self, var: VarId) -> Option<usize> {
        self.slots.iter().position(|s| s.var == var)
    }

    pub fn indices(&self, slot: usize) -> Vec<usize> {
        let s = &self.slots[slot];
        (s.offset..s.offset + s.dim).collect()
    }
}

/// Message algebra used by [`run_bp`].
pub trait Potential: Clone + std::fmt::Debug {
    fn uninformative(d: usize) -> Self;
    fn dim(&self) -> usize;
    /// Width of any low-rank part (0 for dense representations).
    fn width(&self) -> usize;
    /// Sum-product message from a factor to slot `target`. `incoming[s]` is
    /// the variable-to-factor message for slot `s`; the target's entry is
    /// ignored.
    fn factor_message(
        factor: &FactorNode<Self>,
        incoming: &[Self],
        target: usize,
        opts: &BpOptions,
    ) -> Result<Self>;
    /// Product of messages over one variable, reduced to at most `cap`
    /// columns where applicable.
    fn product(parts: &[&Self], d: usize, cap: usize) -> Result<Self>;
    fn mean(&self) -> Result<DVector<f64>>;
    /// Fix the listed coordinates; the result lives on the rest, in order.
    fn condition(&self, evidence: &[usize], values: &DVector<f64>) -> Result<Self>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BpOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Rank cap for factor-to-variable and variable-to-factor messages.
    pub msg_rank: usize,
    /// Rank cap for beliefs; `None` means degree × `msg_rank`.
    pub belief_rank: Option<usize>,
    /// Use the dense route when the joint width exceeds its dimension.
    pub dense_fallback: bool,
    /// Floor applied to the nugget of eliminated blocks.
    pub nugget_floor: f64,
}

impl Default for BpOptions {
    fn default() -> Self {
        BpOptions {
            max_iters: 150,
            tol: 1e-6,
            msg_rank: 64,
            belief_rank: None,
            dense_fallback: true,
            nugget_floor: crate::gaussian::UNINFORMATIVE_PRECISION,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BpReport {
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Vec<f64>,
    /// Largest component width seen on any message or belief.
    pub peak_width: usize,
    #[serde(skip)]
    pub message_seconds: f64,
    #[serde(skip)]
    pub messages: usize,
}

#[derive(Clone, Debug)]
pub struct FactorGraph<P> {
    pub vars: Vec<VarNode>,
    pub factors: Vec<FactorNode<P>>,
    /// Factor-to-variable messages, aligned with each factor's slots.
    pub messages: Vec<Vec<P>>,
    pub beliefs: Vec<Option<P>>,
}

/// Node and edge listing for diagnostics output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub variables: Vec<String>,
    pub factors: Vec<String>,
    /// `(factor, variable)` name pairs.
    pub edges: Vec<(String, String)>,
}

impl<P: Potential> FactorGraph<P> {
    /// One factor per process over its inputs then outputs, with
    /// uninformative placeholder potentials.
    pub fn build(sem: &Sem) -> FactorGraph<P> {
        let vars = sem
            .variables()
            .iter()
            .map(|v| VarNode {
                name: v.name.clone(),
                dim: v.dim,
                role: v.role,
                observed: false,
            })
            .collect();
        let mut factors = Vec::with_capacity(sem.processes().len());
        for (j, p) in sem.processes().iter().enumerate() {
            let mut slots = Vec::new();
            let mut offset = 0;
            for (&v, output) in p
                .inputs
                .iter()
                .map(|v| (v, false))
                .chain(p.outputs.iter().map(|v| (v, true)))
            {
                let dim = sem.variable(v).dim;
                slots.push(Slot {
                    var: v,
                    offset,
                    dim,
                    output,
                });
                offset += dim;
            }
            factors.push(FactorNode {
                name: p.name.clone(),
                process: j,
                slots,
                potential: P::uninformative(offset),
                ensemble: None,
            });
        }
        let mut g = FactorGraph {
            vars,
            factors,
            messages: Vec::new(),
            beliefs: Vec::new(),
        };
        g.reset_messages();
        g
    }

    /// Cold start: every message uninformative, no beliefs.
    pub fn reset_messages(&mut self) {
        self.messages = self
            .factors
            .iter()
            .map(|f| f.slots.iter().map(|s| P::uninformative(s.dim)).collect())
            .collect();
        self.beliefs = vec![None; self.vars.len()];
    }

    /// `(factor, slot)` pairs attached to each variable.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.vars.len()];
        for (fi, f) in self.factors.iter().enumerate() {
            for (si, s) in f.slots.iter().enumerate() {
                adj[s.var].push((fi, si));
            }
        }
        adj
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            variables: self
                .vars
                .iter()
                .filter(|v| !v.observed)
                .map(|v| v.name.clone())
                .collect(),
            factors: self.factors.iter().map(|f| f.name.clone()).collect(),
            edges: self
                .factors
                .iter()
                .flat_map(|f| {
                    f.slots
                        .iter()
                        .map(move |s| (f.name.clone(), self.vars[s.var].name.clone()))
                })
                .collect(),
        }
    }

    /// Variable-to-factor message: product of the other factors' messages.
    pub fn variable_to_factor_message(
        &self,
        adj: &[Vec<(usize, usize)>],
        var: VarId,
        factor: usize,
        cap: usize,
    ) -> Result<P> {
        let parts: Vec<&P> = adj[var]
            .iter()
            .filter(|(f, _)| *f != factor)
            .map(|&(f, s)| &self.messages[f][s])
            .collect();
        P::product(&parts, self.vars[var].dim, cap)
    }

    pub fn factor_to_variable_message(
        &self,
        adj: &[Vec<(usize, usize)>],
        factor: usize,
        target: usize,
        opts: &BpOptions,
    ) -> Result<P> {
        let incoming = self.incoming(adj, factor, opts)?;
        P::factor_message(&self.factors[factor], &incoming, target, opts)
    }

    fn incoming(
        &self,
        adj: &[Vec<(usize, usize)>],
        factor: usize,
        opts: &BpOptions,
    ) -> Result<Vec<P>> {
        self.factors[factor]
            .slots
            .iter()
            .map(|s| self.variable_to_factor_message(adj, s.var, factor, opts.msg_rank))
            .collect()
    }

    pub fn update_belief(
        &self,
        adj: &[Vec<(usize, usize)>],
        var: VarId,
        opts: &BpOptions,
    ) -> Result<P> {
        let parts: Vec<&P> = adj[var]
            .iter()
            .map(|&(f, s)| &self.messages[f][s])
            .collect();
        let cap = opts
            .belief_rank
            .unwrap_or(adj[var].len().max(1) * opts.msg_rank);
        P::product(&parts, self.vars[var].dim, cap)
    }

    /// Belief means of all unobserved variables that have neighbours.
    pub fn belief_means(&self) -> Result<Vec<Option<DVector<f64>>>> {
        self.beliefs
            .iter()
            .enumerate()
            .map(|(v, b)| match b {
                Some(b) => b
                    .mean()
                    .map(Some)
                    .map_err(|e| belief_error(&self.vars[v].name, e)),
                None => Ok(None),
            })
            .collect()
    }
}

fn belief_error(name: &str, e: Error) -> Error {
    Error::Divergence {
        factor: format!("belief of {name}"),
        iteration: 0,
        source: Box::new(e),
    }
}

/// Synchronous loopy BP: every factor-to-variable message is computed from
/// the previous sweep's messages, then all beliefs are refreshed. Stops when
/// the largest relative change of a belief mean drops below `tol`.
pub fn run_bp<P: Potential>(g: &mut FactorGraph<P>, opts: &BpOptions) -> Result<BpReport> {
    let adj = g.adjacency();
    let mut report = BpReport::default();
    let mut prev: Vec<Option<DVector<f64>>> = vec![None; g.vars.len()];
    for it in 0..opts.max_iters {
        let started = Instant::now();
        let mut next = Vec::with_capacity(g.factors.len());
        for fi in 0..g.factors.len() {
            let incoming = g
                .incoming(&adj, fi, opts)
                .map_err(|e| diverged(g, fi, it, e))?;
            let mut out = Vec::with_capacity(incoming.len());
            for (si, slot) in g.factors[fi].slots.iter().enumerate() {
                let m = P::factor_message(&g.factors[fi], &incoming, si, opts)
                    .map_err(|e| diverged(g, fi, it, e))?;
                if m.dim() != slot.dim {
                    return Err(Error::DimensionMismatch {
                        op: "factor_to_variable_message",
                        expected: slot.dim,
                        got: m.dim(),
                    });
                }
                report.peak_width = report.peak_width.max(m.width());
                report.messages += 1;
                out.push(m);
            }
            next.push(out);
        }
        report.message_seconds += started.elapsed().as_secs_f64();
        g.messages = next;

        let mut residual: f64 = 0.0;
        for v in 0..g.vars.len() {
            if adj[v].is_empty() {
                continue;
            }
            let b = g.update_belief(&adj, v, opts)?;
            report.peak_width = report.peak_width.max(b.width());
            let m = b.mean().map_err(|e| Error::Divergence {
                factor: format!("belief of {}", g.vars[v].name),
                iteration: it,
                source: Box::new(e),
            })?;
            let scale = m.amax().max(1.0);
            let change = match &prev[v] {
                Some(p) => (&m - p).amax() / scale,
                None => f64::INFINITY,
            };
            residual = residual.max(change);
            prev[v] = Some(m);
            g.beliefs[v] = Some(b);
        }
        report.iterations = it + 1;
        report.residuals.push(residual);
        if residual < opts.tol {
            report.converged = true;
            break;
        }
    }
    if report.iterations == 0 {
        // beliefs from whatever messages are stored
        for v in 0..g.vars.len() {
            if !adj[v].is_empty() {
                g.beliefs[v] = Some(g.update_belief(&adj, v, opts)?);
            }
        }
    }
    Ok(report)
}

fn diverged<P>(g: &FactorGraph<P>, factor: usize, iteration: usize, e: Error) -> Error {
    if matches!(e, Error::Divergence { .. }) {
        return e;
    }
    Error::Divergence {
        factor: g.factors[factor].name.clone(),
        iteration,
        source: Box::new(e),
    }
}
