//! The outer GEnBP loop: simulate, build and condition ensemble factors,
//! propagate, conform ancestral ensembles to their beliefs, repeat.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::potentials::{condition_graph, init_factors_from_ensembles};
use super::{run_bp, BpOptions, FactorGraph, GraphSummary};
use crate::ensemble::{conform_signed, Ensemble};
use crate::error::{Error, Result};
use crate::gaussian::GaussianPotential;
use crate::rng::SeedStream;
use crate::sem::{Role, Sem, VarId};

use super::potentials::{Evidence, FactorForm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenbpParams {
    /// Ensemble size.
    pub n: usize,
    /// Factor nugget.
    pub gamma2: f64,
    /// Nugget of the Matheron update on evidence.
    pub sigma2: f64,
    /// Conformation nugget.
    pub eta2: f64,
    pub outer_iters: usize,
    /// BP sweeps between re-simulations.
    pub resim_every: usize,
    pub tol: f64,
    pub form: FactorForm,
    pub dense_fallback: bool,
    /// Message rank cap; defaults to `n`.
    pub msg_rank: Option<usize>,
    pub seed: u64,
}

impl Default for GenbpParams {
    fn default() -> Self {
        GenbpParams {
            n: 64,
            gamma2: 0.01,
            sigma2: 0.001,
            eta2: 0.1,
            outer_iters: 15,
            resim_every: 10,
            tol: 1e-6,
            form: FactorForm::Joint,
            dense_fallback: true,
            msg_rank: None,
            seed: 0,
        }
    }
}

impl GenbpParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n < 2 {
            return bad("ensemble size must be at least 2");
        }
        if !(self.gamma2 > 0.0 && self.sigma2 > 0.0 && self.eta2 >= 0.0) {
            return bad("gamma2 and sigma2 must be positive and eta2 non-negative");
        }
        if self.outer_iters == 0 || self.resim_every == 0 {
            return bad("outer_iters and resim_every must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        Ok(())
    }

    pub fn bp_options(&self) -> BpOptions {
        BpOptions {
            max_iters: self.resim_every,
            tol: self.tol,
            msg_rank: self.msg_rank.unwrap_or(self.n),
            belief_rank: None,
            dense_fallback: self.dense_fallback,
            ..BpOptions::default()
        }
    }
}

/// Wall time per operation class, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub sample: f64,
    pub factor_init: f64,
    pub condition: f64,
    pub messages: f64,
    pub beliefs: f64,
    pub conform: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterDiagnostics {
    pub index: usize,
    pub sweeps: usize,
    pub converged: bool,
    pub residuals: Vec<f64>,
    /// Largest relative change of a query belief mean since the previous
    /// outer iteration.
    pub query_shift: f64,
    /// Variables whose ensemble had no spread to conform.
    pub degenerate: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenbpDiagnostics {
    pub method: String,
    pub params: GenbpParams,
    pub graph: GraphSummary,
    pub outer: Vec<OuterDiagnostics>,
    /// `"belief-stabilized"` or `"outer-iters"`.
    pub stop_reason: String,
    pub peak_width: usize,
    pub sweeps: usize,
    pub messages: usize,
    pub timings: Timings,
}

impl GenbpDiagnostics {
    /// Copy with timing fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        GenbpDiagnostics {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenbpResult {
    /// Conformed ensembles of the query variables.
    pub query_ensembles: BTreeMap<VarId, Ensemble>,
    /// Final beliefs of the unobserved variables.
    pub beliefs: BTreeMap<VarId, GaussianPotential>,
    pub diagnostics: GenbpDiagnostics,
}

fn at_outer(outer: usize, e: Error) -> Error {
    Error::OuterIteration {
        outer,
        source: Box::new(e),
    }
}

pub fn run_genbp(sem: &Sem, evidence: &Evidence, params: &GenbpParams) -> Result<GenbpResult> {
    params.validate()?;
    let started = Instant::now();
    let seed = SeedStream::new(params.seed);
    let n = params.n;
    let opts = params.bp_options();
    let mut timings = Timings::default();

    let mut overrides: HashMap<VarId, DMatrix<f64>> = HashMap::new();
    for (&v, val) in evidence {
        if sem.is_ancestral(v) && val.len() == sem.variable(v).dim {
            overrides.insert(v, DMatrix::from_fn(val.len(), n, |i, _| val[i]));
        }
    }
    let ancestors: Vec<VarId> = (0..sem.variables().len())
        .filter(|&v| sem.is_ancestral(v) && !evidence.contains_key(&v))
        .collect();
    let queries: Vec<VarId> = (0..sem.variables().len())
        .filter(|&v| sem.variable(v).role == Role::Query)
        .collect();

    let mut prior_potentials: HashMap<usize, GaussianPotential> = HashMap::new();
    let mut outer_diag = Vec::new();
    let mut prev_means: HashMap<VarId, DVector<f64>> = HashMap::new();
    let mut peak_width = 0;
    let mut sweeps = 0;
    let mut messages = 0;
    let mut stop_reason = "outer-iters".to_string();
    let mut summary = None;
    let mut beliefs = BTreeMap::new();
    let mut query_ensembles = BTreeMap::new();

    for k in 0..params.outer_iters {
        let t = Instant::now();
        let ens = sem
            .ancestral_sample(n, seed.split("outer", k as u64), &overrides)
            .map_err(|e| at_outer(k, e))?;
        timings.sample += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut g: FactorGraph<GaussianPotential> = FactorGraph::build(sem);
        init_factors_from_ensembles(&mut g, &ens, params.gamma2, params.form)
            .map_err(|e| at_outer(k, e))?;
        // ancestral priors stay those of the first, unconformed ensemble
        for f in g.factors.iter_mut() {
            if sem.processes()[f.process].is_ancestral() {
                let p = prior_potentials
                    .entry(f.process)
                    .or_insert_with(|| f.potential.clone());
                f.potential = p.clone();
            }
        }
        timings.factor_init += t.elapsed().as_secs_f64();

        let t = Instant::now();
        condition_graph(&mut g, evidence, params.sigma2, params.gamma2, params.form)
            .map_err(|e| at_outer(k, e))?;
        timings.condition += t.elapsed().as_secs_f64();
        if summary.is_none() {
            summary = Some(g.summary());
        }

        let t = Instant::now();
        let report = run_bp(&mut g, &opts).map_err(|e| at_outer(k, e))?;
        let bp_time = t.elapsed().as_secs_f64();
        timings.messages += report.message_seconds;
        timings.beliefs += bp_time - report.message_seconds;
        peak_width = peak_width.max(report.peak_width);
        sweeps += report.iterations;
        messages += report.messages;

        let t = Instant::now();
        let mut degenerate = Vec::new();
        let mut shift: f64 = 0.0;
        let mut targets: Vec<VarId> = ancestors.clone();
        for &q in &queries {
            if !targets.contains(&q) {
                targets.push(q);
            }
        }
        for &v in &targets {
            let Some(b) = g.beliefs[v].clone() else {
                continue;
            };
            let (mean, cov) = b.moments().map_err(|e| {
                at_outer(
                    k,
                    Error::Divergence {
                        factor: format!("belief of {}", sem.variable(v).name),
                        iteration: report.iterations,
                        source: Box::new(e),
                    },
                )
            })?;
            let c =
                conform_signed(&ens[v], &mean, &cov, params.eta2).map_err(|e| at_outer(k, e))?;
            if c.degenerate {
                degenerate.push(sem.variable(v).name.clone());
            }
            if sem.variable(v).role == Role::Query {
                let scale = mean.amax().max(1.0);
                let change = prev_means
                    .get(&v)
                    .map(|p| (&mean - p).amax() / scale)
                    .unwrap_or(f64::INFINITY);
                shift = shift.max(change);
                prev_means.insert(v, mean);
                query_ensembles.insert(v, c.ensemble.clone());
            }
            if ancestors.contains(&v) {
                overrides.insert(v, c.ensemble.into_samples());
            }
        }
        timings.conform += t.elapsed().as_secs_f64();

        beliefs = g
            .beliefs
            .iter()
            .enumerate()
            .filter_map(|(v, b)| b.clone().map(|b| (v, b)))
            .collect();
        outer_diag.push(OuterDiagnostics {
            index: k,
            sweeps: report.iterations,
            converged: report.converged,
            residuals: report.residuals,
            query_shift: shift,
            degenerate,
        });
        if shift < params.tol {
            stop_reason = "belief-stabilized".to_string();
            break;
        }
    }
    timings.total = started.elapsed().as_secs_f64();
    Ok(GenbpResult {
        query_ensembles,
        beliefs,
        diagnostics: GenbpDiagnostics {
            method: "genbp".into(),
            params: params.clone(),
            graph: summary.unwrap_or(GraphSummary {
                variables: Vec::new(),
                factors: Vec::new(),
                edges: Vec::new(),
            }),
            outer: outer_diag,
            stop_reason,
            peak_width,
            sweeps,
            messages,
            timings,
        },
    })
}
