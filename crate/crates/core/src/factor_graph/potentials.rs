//! Signed-DLR potentials: message rules, factor initialisation from
//! ensembles or exact linear forms, and evidence conditioning.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{BpOptions, FactorGraph, FactorNode, Potential, Slot};
use crate::dlr::SignedDlr;
use crate::ensemble::{matheron_condition, Ensemble, NuggetSpec};
use crate::error::{Error, Result};
use crate::gaussian::{complement, GaussianPotential};
use crate::linalg;
use crate::sem::{LinearMap, ProcessKind, Role, Sem, VarId};

/// Observed values keyed by variable.
pub type Evidence = BTreeMap<VarId, DVector<f64>>;

/// How ensemble factors are turned into potentials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorForm {
    /// Implied Gaussian of the joint ensemble divided by that of the
    /// process inputs, i.e. the conditional `p(outputs | inputs)`. Its
    /// input block is rank deficient, so it needs informative messages on
    /// the inputs before a marginal through it is well posed.
    Conditional,
    /// Implied Gaussian of the joint ensemble.
    #[default]
    Joint,
}

impl Potential for GaussianPotential {
    fn uninformative(d: usize) -> Self {
        GaussianPotential::uninformative(d)
    }

    fn dim(&self) -> usize {
        GaussianPotential::dim(self)
    }

    fn width(&self) -> usize {
        GaussianPotential::width(self)
    }

    fn factor_message(
        factor: &FactorNode<Self>,
        incoming: &[Self],
        target: usize,
        opts: &BpOptions,
    ) -> Result<Self> {
        let cap = opts.msg_rank.min(factor.slots[target].dim);
        if factor.slots.len() == 1 {
            return Ok(factor.potential.compress(cap));
        }
        let total = factor.dim();
        let mut joint = factor.potential.clone();
        for (s, msg) in incoming.iter().enumerate() {
            if s != target {
                joint = joint.multiply(&msg.embed(&factor.indices(s), total)?)?;
            }
        }
        let keep = factor.indices(target);
        let msg = if opts.dense_fallback && joint.width() > total {
            dense_marginal(&joint, &keep, opts.nugget_floor, cap)?
        } else {
            joint.marginalize(&keep, opts.nugget_floor)?
        };
        Ok(msg.compress(cap))
    }

    fn product(parts: &[&Self], d: usize, cap: usize) -> Result<Self> {
        let Some((first, rest)) = parts.split_first() else {
            return Ok(GaussianPotential::uninformative(d));
        };
        let mut info = first.info.clone();
        let mut nugget = first.precision.nugget().clone();
        let width: usize = parts.iter().map(|p| p.width()).sum();
        let mut component = DMatrix::zeros(d, width);
        let mut signs = Vec::with_capacity(width);
        let mut col = 0;
        for p in parts {
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    op: "message product",
                    expected: d,
                    got: p.dim(),
                });
            }
            let w = p.width();
            component
                .columns_mut(col, w)
                .copy_from(p.precision.component());
            signs.extend_from_slice(p.precision.signs());
            col += w;
        }
        for p in rest {
            info += &p.info;
            nugget += p.precision.nugget();
        }
        let precision = SignedDlr::new(nugget, component, signs)?;
        Ok(GaussianPotential { info, precision }.compress(cap.min(d)))
    }

    fn mean(&self) -> Result<DVector<f64>> {
        GaussianPotential::mean(self)
    }

    fn condition(&self, evidence: &[usize], values: &DVector<f64>) -> Result<Self> {
        GaussianPotential::condition(self, evidence, values)
    }
}

/// Schur complement through a dense joint precision, returned in signed
/// DLR form with the kept block's nugget.
fn dense_marginal(
    joint: &GaussianPotential,
    keep: &[usize],
    floor: f64,
    cap: usize,
) -> Result<GaussianPotential> {
    let drop = complement(keep, joint.dim())?;
    let p = joint.precision.densify();
    let sub = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| p[(r[i], c[j])]);
    let mut p_rr = sub(&drop, &drop);
    for (i, &r) in drop.iter().enumerate() {
        let nug = joint.precision.nugget()[r];
        if nug < floor {
            p_rr[(i, i)] += floor - nug;
        }
    }
    let p_lr = sub(keep, &drop);
    let chol = linalg::cholesky_jittered(p_rr, "dense marginal")?;
    let eta_r = linalg::select_entries(&joint.info, &drop);
    let info = linalg::select_entries(&joint.info, keep) - &p_lr * chol.solve(&eta_r);
    let schur = linalg::symmetrize(&(sub(keep, keep) - &p_lr * chol.solve(&p_lr.transpose())));
    let nug = linalg::select_entries(joint.precision.nugget(), keep);
    let precision = signed_from_dense(&schur, nug, cap)?;
    Ok(GaussianPotential { info, precision })
}

/// `diag(nugget) + Z·S·Zᵀ` closest to a dense symmetric matrix with at most
/// `cap` columns.
pub(crate) fn signed_from_dense(
    m: &DMatrix<f64>,
    nugget: DVector<f64>,
    cap: usize,
) -> Result<SignedDlr> {
    let mut rest = m.clone();
    for i in 0..nugget.len() {
        rest[(i, i)] -= nugget[i];
    }
    let (vals, vecs) = linalg::sym_eigen_desc(&rest);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
    let max_abs = order.first().map(|&i| vals[i].abs()).unwrap_or(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| vals[i].abs() > crate::dlr::RANK_DROP_TOL * max_abs && vals[i] != 0.0)
        .take(cap)
        .collect();
    let mut z = DMatrix::zeros(m.nrows(), keep.len());
    let mut signs = Vec::with_capacity(keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        z.set_column(dst, &(vecs.column(src) * vals[src].abs().sqrt()));
        signs.push(vals[src].signum());
    }
    SignedDlr::new(nugget, z, signs)
}

fn implied_potential(x: &Ensemble, gamma2: f64) -> Result<GaussianPotential> {
    let g = x.implied_gaussian(&NuggetSpec::Scalar(gamma2))?;
    Ok(GaussianPotential::from(&g.to_canonical()?))
}

/// Potential over the stacked `slots` from a joint ensemble. `inputs` holds
/// the ensemble of the input slots (in order) whose implied Gaussian is
/// divided out in the conditional form.
fn ensemble_potential(
    joint: &Ensemble,
    slots: &[Slot],
    inputs: Option<&Ensemble>,
    gamma2: f64,
    form: FactorForm,
) -> Result<GaussianPotential> {
    let pot = implied_potential(joint, gamma2)?;
    match (form, inputs) {
        (FactorForm::Conditional, Some(xi)) => {
            let idx: Vec<usize> = slots
                .iter()
                .filter(|s| !s.output)
                .flat_map(|s| s.offset..s.offset + s.dim)
                .collect();
            let marginal = implied_potential(xi, gamma2)?.embed(&idx, joint.dim())?;
            let mut out = pot.divide(&marginal)?;
            // the input nuggets cancel exactly
            for &i in &idx {
                out.precision.nugget_mut()[i] = 0.0;
            }
            Ok(out)
        }
        _ => Ok(pot),
    }
}

fn stack_rows(
    x: &Ensemble,
    slots: &[Slot],
    pick: impl Fn(&Slot) -> bool,
) -> Result<Option<Ensemble>> {
    let rows: Vec<usize> = slots
        .iter()
        .filter(|s| pick(s))
        .flat_map(|s| s.offset..s.offset + s.dim)
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    Ensemble::new(linalg::select_rows(x.samples(), &rows)).map(Some)
}

/// Set every factor's potential from the implied Gaussian of its stacked
/// ensemble (`ensembles` is indexed by variable) and store that ensemble.
pub fn init_factors_from_ensembles(
    g: &mut FactorGraph<GaussianPotential>,
    ensembles: &[Ensemble],
    gamma2: f64,
    form: FactorForm,
) -> Result<()> {
    for f in g.factors.iter_mut() {
        let parts: Vec<&Ensemble> = f
            .slots
            .iter()
            .map(|s| {
                ensembles.get(s.var).ok_or_else(|| {
                    Error::InvalidArgument(format!("no ensemble for variable {}", s.var))
                })
            })
            .collect::<Result<_>>()?;
        let joint = Ensemble::stack(&parts)?;
        let inputs = stack_rows(&joint, &f.slots, |s| !s.output)?;
        f.potential = ensemble_potential(&joint, &f.slots, inputs.as_ref(), gamma2, form)?;
        f.ensemble = Some(joint);
    }
    g.reset_messages();
    Ok(())
}

fn check_evidence<P>(g: &FactorGraph<P>, evidence: &Evidence) -> Result<()> {
    for (&v, val) in evidence {
        let node = g
            .vars
            .get(v)
            .ok_or_else(|| Error::InvalidArgument(format!("evidence on unknown variable {v}")))?;
        if node.role != Role::Evidence {
            return Err(Error::InvalidArgument(format!(
                "evidence on {} which is tagged {:?}, not Evidence",
                node.name, node.role
            )));
        }
        if val.len() != node.dim {
            return Err(Error::DimensionMismatch {
                op: "evidence",
                expected: node.dim,
                got: val.len(),
            });
        }
    }
    Ok(())
}

/// Shared restructuring: factors touching evidence get a new potential from
/// `cond(factor, evidence_indices, values, remaining_slots)`; evidence slots
/// are removed and factors left without slots are dropped.
fn restructure<P: Potential>(
    g: &mut FactorGraph<P>,
    evidence: &Evidence,
    mut cond: impl FnMut(
        &FactorNode<P>,
        &[usize],
        &DVector<f64>,
        &[Slot],
    ) -> Result<(P, Option<Ensemble>)>,
) -> Result<()> {
    check_evidence(g, evidence)?;
    if evidence.is_empty() {
        return Ok(());
    }
    let mut kept = Vec::with_capacity(g.factors.len());
    for f in g.factors.drain(..) {
        if !f.slots.iter().any(|s| evidence.contains_key(&s.var)) {
            kept.push(f);
            continue;
        }
        let mut ev_idx = Vec::new();
        let mut ev_val = Vec::new();
        let mut rest = Vec::new();
        let mut offset = 0;
        for s in &f.slots {
            match evidence.get(&s.var) {
                Some(v) => {
                    ev_idx.extend(s.offset..s.offset + s.dim);
                    ev_val.extend(v.iter().copied());
                }
                None => {
                    rest.push(Slot {
                        offset,
                        ..s.clone()
                    });
                    offset += s.dim;
                }
            }
        }
        if rest.is_empty() {
            continue;
        }
        let (potential, ensemble) = cond(&f, &ev_idx, &DVector::from_vec(ev_val), &rest)?;
        kept.push(FactorNode {
            name: f.name,
            process: f.process,
            slots: rest,
            potential,
            ensemble,
        });
    }
    g.factors = kept;
    for &v in evidence.keys() {
        g.vars[v].observed = true;
    }
    g.reset_messages();
    Ok(())
}

/// Condition ensemble factors on evidence by Matheron updates of their
/// stored joint ensembles (nugget `sigma2`), then rebuild their potentials.
///
/// In the conditional form the potential is
/// `p(rest | E) / p(rest inputs | input evidence)`, which as a function of
/// the remaining variables is the conditional density with observed blocks
/// fixed.
pub fn condition_graph(
    g: &mut FactorGraph<GaussianPotential>,
    evidence: &Evidence,
    sigma2: f64,
    gamma2: f64,
    form: FactorForm,
) -> Result<()> {
    let nugget = NuggetSpec::Scalar(sigma2);
    restructure(g, evidence, |f, ev_idx, values, rest| {
        let joint = f
            .ensemble
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("factor {} has no ensemble", f.name)))?;
        let post = matheron_condition(joint, ev_idx, values, &nugget)?;
        let inputs = if rest.iter().any(|s| !s.output) && form == FactorForm::Conditional {
            let ev_inputs: Vec<&Slot> = f
                .slots
                .iter()
                .filter(|s| !s.output && ev_idx.contains(&s.offset))
                .collect();
            let mut rows = Vec::new();
            let mut vals = Vec::new();
            for s in &ev_inputs {
                let start = rows.len();
                rows.extend(s.offset..s.offset + s.dim);
                let pos = ev_idx
                    .iter()
                    .position(|&i| i == s.offset)
                    .expect("evidence slot");
                vals.extend(values.rows(pos, s.dim).iter().copied());
                debug_assert_eq!(rows.len() - start, s.dim);
            }
            let n_ev = rows.len();
            for s in f
                .slots
                .iter()
                .filter(|s| !s.output && !ev_idx.contains(&s.offset))
            {
                rows.extend(s.offset..s.offset + s.dim);
            }
            let sub = Ensemble::new(linalg::select_rows(joint.samples(), &rows))?;
            if n_ev == 0 {
                Some(sub)
            } else {
                let k: Vec<usize> = (0..n_ev).collect();
                Some(matheron_condition(
                    &sub,
                    &k,
                    &DVector::from_vec(vals),
                    &nugget,
                )?)
            }
        } else {
            None
        };
        let pot = ensemble_potential(&post, rest, inputs.as_ref(), gamma2, form)?;
        Ok((pot, Some(post)))
    })
}

/// Condition exact potentials in canonical form.
pub fn condition_graph_exact<P: Potential>(
    g: &mut FactorGraph<P>,
    evidence: &Evidence,
) -> Result<()> {
    restructure(g, evidence, |f, ev_idx, values, _| {
        Ok((f.potential.condition(ev_idx, values)?, None))
    })
}

/// Conditional potential of `out = a·in + b + N(0, diag(noise))` over the
/// stacked `(in, out)`. Precision `[[AᵀΣ⁻¹A, −AᵀΣ⁻¹], [−Σ⁻¹A, Σ⁻¹]]` written
/// as `diag(0, Σ⁻¹) + WWᵀ − YYᵀ` with `W = [AᵀΣ^{-1/2}; −Σ^{-1/2}]` and
/// `Y = [0; Σ^{-1/2}]`.
pub fn linear_conditional(map: &LinearMap, noise: &DVector<f64>) -> Result<GaussianPotential> {
    let (dout, din) = map.a.shape();
    if map.b.len() != dout || noise.len() != dout {
        return Err(Error::DimensionMismatch {
            op: "linear_conditional",
            expected: dout,
            got: noise.len(),
        });
    }
    if let Some(i) = noise.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroNugget {
            op: "linear_conditional",
            index: i,
        });
    }
    let total = din + dout;
    let sinv_half = noise.map(|v| 1.0 / v.sqrt());
    let mut w = DMatrix::zeros(total, dout);
    let mut y = DMatrix::zeros(total, dout);
    let mut nugget = DVector::zeros(total);
    let mut info = DVector::zeros(total);
    for k in 0..dout {
        let s = sinv_half[k];
        for i in 0..din {
            w[(i, k)] = map.a[(k, i)] * s;
        }
        w[(din + k, k)] = -s;
        y[(din + k, k)] = s;
        nugget[din + k] = s * s;
        info[din + k] = s * s * map.b[k];
    }
    // input block of the info vector: −AᵀΣ⁻¹b
    let sb = DVector::from_fn(dout, |k, _| map.b[k] * sinv_half[k] * sinv_half[k]);
    info.rows_mut(0, din)
        .copy_from(&(-(map.a.transpose() * &sb)));
    let component = linalg::hstack(total, &[&w, &y]);
    let mut signs = vec![1.0; dout];
    signs.extend(std::iter::repeat_n(-1.0, dout));
    GaussianPotential::new(info, SignedDlr::new(nugget, component, signs)?)
}

/// Canonical potential of `N(mean, cov)` with a dense covariance, stored as
/// half the smallest precision eigenvalue on the diagonal plus a positive
/// low-rank remainder.
pub(crate) fn gaussian_prior_potential(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<GaussianPotential> {
    let chol = linalg::cholesky_strict(cov.clone(), "gaussian prior")?;
    let prec = linalg::symmetrize(&chol.inverse());
    let (vals, _) = linalg::sym_eigen_desc(&prec);
    let floor = 0.5 * vals[vals.len() - 1];
    let nugget = DVector::from_element(mean.len(), floor);
    let precision = signed_from_dense(&prec, nugget, mean.len())?;
    GaussianPotential::new(&prec * mean, precision)
}

/// Exact potentials for linear-Gaussian models: Gaussian ancestral laws and
/// affine processes, with `jitter` added to every process noise variance.
pub fn init_factors_exact(
    g: &mut FactorGraph<GaussianPotential>,
    sem: &Sem,
    jitter: f64,
) -> Result<()> {
    for f in g.factors.iter_mut() {
        let p = &sem.processes()[f.process];
        f.potential = match &p.kind {
            ProcessKind::Ancestral {
                gaussian: Some((m, c)),
                ..
            } => gaussian_prior_potential(m, c)?,
            ProcessKind::Map {
                noise,
                linear: Some(lin),
                ..
            } => linear_conditional(&lin(), &noise.map(|v| v + jitter))?,
            _ => {
                return Err(Error::InvalidModel(format!(
                    "process {} has no exact Gaussian form",
                    p.name
                )))
            }
        };
        f.ensemble = None;
    }
    g.reset_messages();
    Ok(())
}
