//! Benchmark problems (1-D transport system identification and a linear
//! toy), run configuration, metrics and sweeps.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dlr::{DlrMatrix, Sign};
use crate::error::{Error, Result};
use crate::factor_graph::{run_genbp, Evidence, FactorForm, GenbpParams};
use crate::gabp::{ancestral_laws, run_gabp, DenseCanonical, DenseGaussian, GabpParams};
use crate::gaussian::{mmd_poly2_gaussian, GaussianPotential, MomentsGaussian};
use crate::linalg;
use crate::oracle::DenseJoint;
use crate::rng::SeedStream;
use crate::sem::{LinearMap, MapFn, Role, SamplerFn, Sem, SemBuilder, VarId};

/// Largest joint dimension for which the dense reference posterior is
/// computed.
pub const REFERENCE_MAX_DIM: usize = 1500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub d: usize,
    pub t: usize,
    /// Weight of the state in `γ·x + (1−γ)·q`.
    pub gamma: f64,
    /// Circular convolution weights, centred.
    pub kernel: Vec<f64>,
    pub shift: i64,
    pub downsample: usize,
    pub tau2: f64,
    pub sigma_obs2: f64,
    pub amplitude: f64,
    pub smoothness: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            d: 64,
            t: 10,
            gamma: 0.9,
            kernel: vec![0.25, 0.5, 0.25],
            shift: 1,
            downsample: 4,
            tau2: 1e-4,
            sigma_obs2: 1e-2,
            amplitude: 1.0,
            smoothness: 10.0,
        }
    }
}

impl TransportConfig {
    /// Field names in messages are backticked so callers can locate them.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("`d` must be positive".into());
        }
        if self.t == 0 {
            return bad("`t` must be positive".into());
        }
        if self.downsample == 0 || self.d % self.downsample != 0 {
            return bad(format!(
                "`downsample` = {} does not divide `d` = {}",
                self.downsample, self.d
            ));
        }
        if self.kernel.is_empty() || (self.kernel.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("`kernel` weights must sum to 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("`gamma` must lie in [0, 1]".into());
        }
        if !(self.tau2 > 0.0) {
            return bad("`tau2` must be positive".into());
        }
        if !(self.sigma_obs2 > 0.0) {
            return bad("`sigma_obs2` must be positive".into());
        }
        if !(self.amplitude > 0.0) {
            return bad("`amplitude` must be positive".into());
        }
        if !(self.smoothness > 0.0) {
            return bad("`smoothness` must be positive".into());
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.d / self.downsample
    }
}

/// `q_k = A·exp(κ·cos(2πk/d − μ))` with `μ ~ U[0, 2π)` and
/// `κ ~ χ²(smoothness/√d)`; `kappa` overrides the draw.
pub fn sample_q_prior(
    d: usize,
    amplitude: f64,
    smoothness: f64,
    rng: &mut dyn RngCore,
    kappa: Option<f64>,
) -> DVector<f64> {
    let mu: f64 = rng.random_range(0.0..2.0 * PI);
    let kappa = kappa.unwrap_or_else(|| {
        let df = smoothness / (d as f64).sqrt();
        ChiSquared::new(df)
            .expect("positive degrees of freedom")
            .sample(rng)
    });
    DVector::from_fn(d, |k, _| {
        amplitude * (kappa * (2.0 * PI * k as f64 / d as f64 - mu).cos()).exp()
    })
}

/// `(C ∗ z)_i = Σ_m c_m z_{i+m−h}` with `h = len/2`, indices mod `d`.
pub fn circular_convolve(z: &DVector<f64>, kernel: &[f64]) -> DVector<f64> {
    let d = z.len() as i64;
    let h = (kernel.len() / 2) as i64;
    DVector::from_fn(z.len(), |i, _| {
        kernel
            .iter()
            .enumerate()
            .map(|(m, c)| c * z[(i as i64 + m as i64 - h).rem_euclid(d) as usize])
            .sum()
    })
}

/// `(S_k z)_i = z_{i−k}`, indices mod `d`.
pub fn circular_shift(z: &DVector<f64>, k: i64) -> DVector<f64> {
    let d = z.len() as i64;
    DVector::from_fn(z.len(), |i, _| z[(i as i64 - k).rem_euclid(d) as usize])
}

/// `x' = S_k(C ∗ (γx + (1−γ)q)) + ε`, `ε ~ N(0, τ²I)` when an RNG is given.
pub fn transport_step(
    x: &DVector<f64>,
    q: &DVector<f64>,
    cfg: &TransportConfig,
    noise: Option<&mut dyn RngCore>,
) -> DVector<f64> {
    let mixed = x * cfg.gamma + q * (1.0 - cfg.gamma);
    let mut out = circular_shift(&circular_convolve(&mixed, &cfg.kernel), cfg.shift);
    if let Some(rng) = noise {
        add_noise(&mut out, cfg.tau2, rng);
    }
    out
}

/// Every `ℓ`-th entry of `x`, plus `N(0, σ²_obs)` noise when an RNG is given.
pub fn observe(
    x: &DVector<f64>,
    cfg: &TransportConfig,
    noise: Option<&mut dyn RngCore>,
) -> DVector<f64> {
    let mut y = DVector::from_fn(x.len() / cfg.downsample, |i, _| x[i * cfg.downsample]);
    if let Some(rng) = noise {
        add_noise(&mut y, cfg.sigma_obs2, rng);
    }
    y
}

fn add_noise(v: &mut DVector<f64>, var: f64, rng: &mut dyn RngCore) {
    let sd = var.sqrt();
    for x in v.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += sd * z;
    }
}

/// Dense `S_k·C`.
fn transport_matrix(cfg: &TransportConfig) -> DMatrix<f64> {
    let d = cfg.d;
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        m.set_column(
            j,
            &circular_shift(&circular_convolve(&e, &cfg.kernel), cfg.shift),
        );
    }
    m
}

/// Variable ids of a system-identification model.
#[derive(Clone, Debug, PartialEq)]
pub struct SysidVars {
    pub q: VarId,
    pub x: Vec<VarId>,
    pub y: Vec<VarId>,
}

/// Generic system-identification graph: `q` and `x₀` ancestral,
/// `x_t = step(q, x_{t−1}) + noise`, `y_t = obs(x_t) + noise`.
pub struct SysidSpec {
    pub dq: usize,
    pub dx: usize,
    pub dy: usize,
    pub t: usize,
    pub q_prior: SysidPrior,
    pub x0_prior: SysidPrior,
    /// Map of the stacked `[q; x_{t−1}]`.
    pub step: MapFn,
    pub step_noise: DVector<f64>,
    pub step_linear: Option<LinearMap>,
    pub obs: MapFn,
    pub obs_noise: DVector<f64>,
    pub obs_linear: Option<LinearMap>,
}

pub enum SysidPrior {
    Sampler(SamplerFn),
    Gaussian(DVector<f64>, DMatrix<f64>),
}

pub fn build_sysid_sem_generic(spec: SysidSpec) -> Result<(Sem, SysidVars)> {
    let mut b = SemBuilder::new();
    let q = b.variable("q", spec.dq, Role::Query);
    let mut x = vec![b.variable("x0", spec.dx, Role::Evidence)];
    let mut y = Vec::new();
    for t in 1..=spec.t {
        x.push(b.variable(&format!("x{t}"), spec.dx, Role::Latent));
        y.push(b.variable(&format!("y{t}"), spec.dy, Role::Evidence));
    }
    for (name, var, prior) in [
        ("prior_q", q, spec.q_prior),
        ("prior_x0", x[0], spec.x0_prior),
    ] {
        match prior {
            SysidPrior::Sampler(s) => b.ancestral(name, var, s),
            SysidPrior::Gaussian(m, c) => b.gaussian_prior(name, var, m, c),
        };
    }
    let lazy = |l: &Option<LinearMap>| {
        l.clone()
            .map(|l| -> crate::sem::LinearFn { Arc::new(move || l.clone()) })
    };
    for t in 1..=spec.t {
        let step_inputs = [q, x[t - 1]];
        match lazy(&spec.step_linear) {
            Some(lf) => b.map_with_linear(
                &format!("step{t}"),
                &step_inputs,
                &[x[t]],
                spec.step.clone(),
                spec.step_noise.clone(),
                lf,
            ),
            None => b.map(
                &format!("step{t}"),
                &step_inputs,
                &[x[t]],
                spec.step.clone(),
                spec.step_noise.clone(),
            ),
        };
        match lazy(&spec.obs_linear) {
            Some(lf) => b.map_with_linear(
                &format!("obs{t}"),
                &[x[t]],
                &[y[t - 1]],
                spec.obs.clone(),
                spec.obs_noise.clone(),
                lf,
            ),
            None => b.map(
                &format!("obs{t}"),
                &[x[t]],
                &[y[t - 1]],
                spec.obs.clone(),
                spec.obs_noise.clone(),
            ),
        };
    }
    Ok((b.build()?, SysidVars { q, x, y }))
}

/// The transport problem as a model. Its affine forms are materialised
/// lazily, so building it never allocates a `d×d` matrix.
pub fn build_sysid_sem(cfg: &TransportConfig) -> Result<(Sem, SysidVars)> {
    cfg.validate()?;
    let d = cfg.d;
    let prior = |cfg: &TransportConfig| -> SamplerFn {
        let (a, s) = (cfg.amplitude, cfg.smoothness);
        Arc::new(move |rng: &mut dyn RngCore| sample_q_prior(d, a, s, rng, None))
    };
    let c = cfg.clone();
    let step: MapFn = Arc::new(move |z: &DVector<f64>| {
        let q = z.rows(0, d).into_owned();
        let x = z.rows(d, d).into_owned();
        transport_step(&x, &q, &c, None)
    });
    let c = cfg.clone();
    let obs: MapFn = Arc::new(move |x: &DVector<f64>| observe(x, &c, None));
    let mut b = SemBuilder::new();
    let q = b.variable("q", d, Role::Query);
    let mut x = vec![b.variable("x0", d, Role::Evidence)];
    let mut y = Vec::new();
    for t in 1..=cfg.t {
        x.push(b.variable(&format!("x{t}"), d, Role::Latent));
        y.push(b.variable(&format!("y{t}"), cfg.obs_dim(), Role::Evidence));
    }
    b.ancestral("prior_q", q, prior(cfg));
    b.ancestral("prior_x0", x[0], prior(cfg));
    let c1 = cfg.clone();
    let step_lin: crate::sem::LinearFn = Arc::new(move || {
        let m = transport_matrix(&c1);
        LinearMap {
            a: linalg::hstack(c1.d, &[&(&m * (1.0 - c1.gamma)), &(&m * c1.gamma)]),
            b: DVector::zeros(c1.d),
        }
    });
    let c2 = cfg.clone();
    let obs_lin: crate::sem::LinearFn = Arc::new(move || {
        let mut a = DMatrix::zeros(c2.obs_dim(), c2.d);
        for i in 0..c2.obs_dim() {
            a[(i, i * c2.downsample)] = 1.0;
        }
        LinearMap {
            a,
            b: DVector::zeros(c2.obs_dim()),
        }
    });
    for t in 1..=cfg.t {
        b.map_with_linear(
            &format!("step{t}"),
            &[q, x[t - 1]],
            &[x[t]],
            step.clone(),
            DVector::from_element(d, cfg.tau2),
            step_lin.clone(),
        );
        b.map_with_linear(
            &format!("obs{t}"),
            &[x[t]],
            &[y[t - 1]],
            obs.clone(),
            DVector::from_element(cfg.obs_dim(), cfg.sigma_obs2),
            obs_lin.clone(),
        );
    }
    Ok((b.build()?, SysidVars { q, x, y }))
}

/// Linear-Gaussian toy: `q, x₀ ~ N(0, I)`, `x_t = A x_{t−1} + B q + ε`,
/// `y_t = C x_t + η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidToyConfig {
    pub d: usize,
    pub t: usize,
    pub a: f64,
    pub b: f64,
    pub process_noise: f64,
    pub obs_noise: f64,
}

impl Default for SysidToyConfig {
    fn default() -> Self {
        SysidToyConfig {
            d: 2,
            t: 2,
            a: 0.8,
            b: 0.5,
            process_noise: 0.01,
            obs_noise: 0.05,
        }
    }
}

pub fn build_sysid_toy(cfg: &SysidToyConfig) -> Result<(Sem, SysidVars)> {
    let d = cfg.d;
    if d == 0 || cfg.t == 0 || !(cfg.process_noise > 0.0 && cfg.obs_noise > 0.0) {
        return Err(Error::Config(
            "sysid-toy needs positive `d`, `t` and noise variances".into(),
        ));
    }
    // A rotates slightly so the coordinates mix
    let mut a = DMatrix::identity(d, d) * cfg.a;
    for i in 0..d {
        a[(i, (i + 1) % d)] += 0.1;
    }
    let bq = DMatrix::from_fn(d, d, |i, j| if i == j { cfg.b } else { 0.05 });
    let step = LinearMap {
        a: linalg::hstack(d, &[&bq, &a]),
        b: DVector::zeros(d),
    };
    let obs = LinearMap {
        a: DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.2 }),
        b: DVector::from_element(d, 0.1),
    };
    let (sa, oa) = (step.clone(), obs.clone());
    build_sysid_sem_generic(SysidSpec {
        dq: d,
        dx: d,
        dy: d,
        t: cfg.t,
        q_prior: SysidPrior::Gaussian(DVector::zeros(d), DMatrix::identity(d, d)),
        x0_prior: SysidPrior::Gaussian(DVector::zeros(d), DMatrix::identity(d, d)),
        step: Arc::new(move |z: &DVector<f64>| &sa.a * z + &sa.b),
        step_noise: DVector::from_element(d, cfg.process_noise),
        step_linear: Some(step),
        obs: Arc::new(move |z: &DVector<f64>| &oa.a * z + &oa.b),
        obs_noise: DVector::from_element(d, cfg.obs_noise),
        obs_linear: Some(obs),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemConfig {
    Transport(TransportConfig),
    SysidToy(SysidToyConfig),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Transport(TransportConfig::default())
    }
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::Transport(_) => "transport",
            ProblemConfig::SysidToy(_) => "sysid-toy",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProblemConfig::Transport(c) => c.d,
            ProblemConfig::SysidToy(c) => c.d,
        }
    }

    pub fn with_dim(&self, d: usize) -> ProblemConfig {
        match self {
            ProblemConfig::Transport(c) => {
                ProblemConfig::Transport(TransportConfig { d, ..c.clone() })
            }
            ProblemConfig::SysidToy(c) => {
                ProblemConfig::SysidToy(SysidToyConfig { d, ..c.clone() })
            }
        }
    }
}

/// A model with a synthetic ground truth and its observations.
pub struct Problem {
    pub name: String,
    pub sem: Sem,
    pub vars: SysidVars,
    pub evidence: Evidence,
    pub q_truth: DVector<f64>,
}

impl Problem {
    /// Draw the truth by one ancestral pass on the `truth` stream of `seed`.
    pub fn generate(cfg: &ProblemConfig, seed: u64) -> Result<Problem> {
        let (sem, vars) = match cfg {
            ProblemConfig::Transport(c) => build_sysid_sem(c)?,
            ProblemConfig::SysidToy(c) => build_sysid_toy(c)?,
        };
        let draw =
            sem.ancestral_sample(2, SeedStream::new(seed).split("truth", 0), &HashMap::new())?;
        let col = |v: VarId| draw[v].samples().column(0).into_owned();
        let mut evidence = Evidence::new();
        evidence.insert(vars.x[0], col(vars.x[0]));
        for &y in &vars.y {
            evidence.insert(y, col(y));
        }
        Ok(Problem {
            name: cfg.name().to_string(),
            q_truth: col(vars.q),
            sem,
            vars,
            evidence,
        })
    }

    /// Exact Gaussian posterior of `q` when every ancestral law is Gaussian
    /// or moment-matched from `n` prior samples on `seed` (the same samples
    /// the engines see). `None` when the joint is too large.
    pub fn reference(
        &self,
        n: usize,
        gamma2: f64,
        seed: u64,
    ) -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
        let total: usize = self.sem.variables().iter().map(|v| v.dim).sum();
        if total > REFERENCE_MAX_DIM {
            return Ok(None);
        }
        let laws = ancestral_laws(&self.sem, &self.evidence, n, gamma2, seed)?;
        let mut priors: HashMap<VarId, (DVector<f64>, DMatrix<f64>)> = laws
            .into_iter()
            .map(|(v, g)| (v, (g.mean, g.cov)))
            .collect();
        // observed ancestors are conditioned away; any proper law will do
        for (&v, val) in &self.evidence {
            if self.sem.is_ancestral(v) {
                priors
                    .entry(v)
                    .or_insert_with(|| (val.clone(), DMatrix::identity(val.len(), val.len())));
            }
        }
        let post = DenseJoint::from_sem(&self.sem, &priors, 0.0)?.condition(&self.evidence)?;
        Ok(Some(post.marginal(self.vars.q)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Genbp,
    Gabp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Genbp => "genbp",
            Method::Gabp => "gabp",
        }
    }
}

/// Hyperparameters shared by both engines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub gamma2: f64,
    pub sigma2: f64,
    pub eta2: f64,
    pub tol: f64,
    pub outer_iters: usize,
    /// Sweeps between re-simulations (GEnBP) or relinearisations (GaBP).
    pub inner_iters: usize,
    pub max_sweeps: usize,
    pub form: FactorForm,
    pub dense_fallback: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        let g = GenbpParams::default();
        Hyper {
            gamma2: g.gamma2,
            sigma2: g.sigma2,
            eta2: g.eta2,
            tol: g.tol,
            outer_iters: g.outer_iters,
            inner_iters: g.resim_every,
            max_sweeps: 150,
            form: g.form,
            dense_fallback: g.dense_fallback,
        }
    }
}

/// When to compute the dense reference posterior used for MMD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    #[default]
    Auto,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub method: Method,
    pub n: usize,
    pub seed: u64,
    pub hyper: Hyper,
    pub reference: ReferenceMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: ProblemConfig::default(),
            method: Method::Genbp,
            n: 64,
            seed: 0,
            hyper: Hyper::default(),
            reference: ReferenceMode::Auto,
        }
    }
}

impl RunConfig {
    /// Field names in messages are backticked so callers can locate them.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match &self.problem {
            ProblemConfig::Transport(c) => c.validate()?,
            ProblemConfig::SysidToy(c) => {
                if c.d == 0 {
                    return bad("`d` must be positive");
                }
                if c.t == 0 {
                    return bad("`t` must be positive");
                }
                if !(c.process_noise > 0.0 && c.obs_noise > 0.0) {
                    return bad("`process_noise` and `obs_noise` must be positive");
                }
            }
        }
        let h = &self.hyper;
        if self.n < 2 {
            return bad("`n` must be at least 2");
        }
        if !(h.gamma2 > 0.0) {
            return bad("`gamma2` must be positive");
        }
        if !(h.sigma2 > 0.0) {
            return bad("`sigma2` must be positive");
        }
        if !(h.eta2 >= 0.0) {
            return bad("`eta2` must be non-negative");
        }
        if !(h.tol > 0.0) {
            return bad("`tol` must be positive");
        }
        if h.outer_iters == 0 {
            return bad("`outer_iters` must be positive");
        }
        if h.inner_iters == 0 {
            return bad("`inner_iters` must be positive");
        }
        if h.max_sweeps == 0 {
            return bad("`max_sweeps` must be positive");
        }
        Ok(())
    }

    pub fn genbp_params(&self) -> GenbpParams {
        GenbpParams {
            n: self.n,
            gamma2: self.hyper.gamma2,
            sigma2: self.hyper.sigma2,
            eta2: self.hyper.eta2,
            outer_iters: self.hyper.outer_iters,
            resim_every: self.hyper.inner_iters,
            tol: self.hyper.tol,
            form: self.hyper.form,
            dense_fallback: self.hyper.dense_fallback,
            msg_rank: None,
            seed: self.seed,
        }
    }

    pub fn gabp_params(&self) -> GabpParams {
        GabpParams {
            n: self.n,
            gamma2: self.hyper.gamma2,
            relin_every: self.hyper.inner_iters,
            max_sweeps: self.hyper.max_sweeps,
            tol: self.hyper.tol,
            fd_step: 1e-5,
            seed: self.seed,
        }
    }
}

/// Wall time per phase, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub total: f64,
    /// Sampling, factor construction and conditioning, or linearisation.
    pub setup: f64,
    pub messages: f64,
    pub beliefs: f64,
    pub conform: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub problem: String,
    pub method: String,
    pub d_query: usize,
    pub n: usize,
    pub seed: u64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub mse: Option<f64>,
    pub log_lik: Option<f64>,
    pub mmd: Option<f64>,
    pub sweeps: usize,
    pub peak_width: usize,
    pub times: PhaseTimes,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "problem",
    "method",
    "d_query",
    "n",
    "seed",
    "status",
    "mse",
    "log_lik",
    "mmd",
    "sweeps",
    "peak_width",
];
pub const TIMING_COLUMNS: [&str; 5] =
    ["t_total", "t_setup", "t_messages", "t_beliefs", "t_conform"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Write rows as CSV; timing columns only when `timings` is set.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W, timings: bool) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if timings {
        header.extend(TIMING_COLUMNS);
    }
    wr.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.problem.clone(),
            r.method.clone(),
            r.d_query.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            fmt_opt(r.mse),
            fmt_opt(r.log_lik),
            fmt_opt(r.mmd),
            r.sweeps.to_string(),
            r.peak_width.to_string(),
        ];
        if timings {
            let t = &r.times;
            rec.extend(
                [t.total, t.setup, t.messages, t.beliefs, t.conform].map(|v| format!("{v:?}")),
            );
        }
        wr.write_record(&rec).map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

/// A posterior belief over the query from either engine.
#[derive(Clone, Debug)]
pub enum Belief {
    Dlr(GaussianPotential),
    Dense(DenseCanonical),
}

impl Belief {
    pub fn mean(&self) -> Result<DVector<f64>> {
        match self {
            Belief::Dlr(p) => p.mean(),
            Belief::Dense(p) => Ok(p.to_moments()?.mean),
        }
    }

    /// `None` when the precision is not positive definite.
    pub fn log_density(&self, x: &DVector<f64>) -> Option<f64> {
        match self {
            Belief::Dlr(p) => p.log_density(x).ok(),
            Belief::Dense(p) => p.to_moments().ok()?.log_density(x).ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub log_lik: Option<f64>,
    pub mmd: Option<f64>,
}

/// MSE of the belief mean against the truth, log density of the belief at
/// the truth, and squared polynomial-kernel MMD between posterior samples
/// and the reference Gaussian when both exist.
pub fn evaluate(
    belief: &Belief,
    samples: Option<&DMatrix<f64>>,
    q_truth: &DVector<f64>,
    reference: Option<&(DVector<f64>, DMatrix<f64>)>,
) -> Result<Metrics> {
    let mean = belief.mean()?;
    let mse = (&mean - q_truth).norm_squared() / q_truth.len() as f64;
    let mmd = match (samples, reference) {
        (Some(s), Some((m, c))) => Some(mmd_poly2_gaussian(&moments_from_dense(m, c)?, s)?),
        _ => None,
    };
    Ok(Metrics {
        mse,
        log_lik: belief.log_density(q_truth),
        mmd,
    })
}

fn moments_from_dense(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<MomentsGaussian> {
    let (vals, vecs) = linalg::sym_eigen_desc(cov);
    let mut comp = vecs;
    for (j, mut col) in comp.column_iter_mut().enumerate() {
        col *= vals[j].max(0.0).sqrt();
    }
    MomentsGaussian::new(
        mean.clone(),
        DlrMatrix::new(DVector::zeros(mean.len()), comp, Sign::Plus)?,
    )
}

fn gaussian_samples(g: &DenseGaussian, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
    let l = linalg::cholesky_jittered(g.cov.clone(), "posterior samples")?.l();
    let z = DMatrix::from_fn(g.mean.len(), n, |_, _| StandardNormal.sample(rng));
    let mut out = l * z;
    for mut c in out.column_iter_mut() {
        c += &g.mean;
    }
    Ok(out)
}

/// Result of one run: the metrics row and the diagnostics document.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub row: MetricsRow,
    pub diagnostics: serde_json::Value,
    /// Posterior mean of the query, when the run succeeded.
    pub posterior_mean: Option<DVector<f64>>,
    /// Engine failure behind a `failed` status.
    pub error: Option<Error>,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.row.status != "ok"
    }
}

/// Run one configuration end to end. Engine failures are recorded in the
/// row; configuration errors are returned.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let problem = Problem::generate(&cfg.problem, cfg.seed)?;
    let reference = match cfg.reference {
        ReferenceMode::Auto => problem.reference(cfg.n, cfg.hyper.gamma2, cfg.seed)?,
        ReferenceMode::Never => None,
    };
    let mut row = MetricsRow {
        problem: problem.name.clone(),
        method: cfg.method.name().to_string(),
        d_query: problem.q_truth.len(),
        n: cfg.n,
        seed: cfg.seed,
        status: "ok".into(),
        mse: None,
        log_lik: None,
        mmd: None,
        sweeps: 0,
        peak_width: 0,
        times: PhaseTimes::default(),
    };
    let q = problem.vars.q;
    let engine: Result<(Belief, Option<DMatrix<f64>>, serde_json::Value)> = match cfg.method {
        Method::Genbp => {
            run_genbp(&problem.sem, &problem.evidence, &cfg.genbp_params()).and_then(|r| {
                let d = &r.diagnostics;
                row.sweeps = d.sweeps;
                row.peak_width = d.peak_width;
                let t = &d.timings;
                row.times = PhaseTimes {
                    total: t.total,
                    setup: t.sample + t.factor_init + t.condition,
                    messages: t.messages,
                    beliefs: t.beliefs,
                    conform: t.conform,
                };
                let belief = r
                    .beliefs
                    .get(&q)
                    .cloned()
                    .ok_or_else(|| Error::InvalidModel("query has no belief".into()))?;
                let samples = r.query_ensembles.get(&q).map(|e| e.samples().clone());
                let json = serde_json::to_value(d).map_err(|e| Error::Io(e.to_string()))?;
                Ok((Belief::Dlr(belief), samples, json))
            })
        }
        Method::Gabp => {
            run_gabp(&problem.sem, &problem.evidence, &cfg.gabp_params()).and_then(|r| {
                let d = &r.diagnostics;
                row.sweeps = d.sweeps;
                let t = &d.timings;
                row.times = PhaseTimes {
                    total: t.total,
                    setup: t.prior + t.jacobian,
                    messages: t.messages,
                    beliefs: t.beliefs,
                    conform: 0.0,
                };
                let belief = r
                    .beliefs
                    .get(&q)
                    .cloned()
                    .ok_or_else(|| Error::InvalidModel("query has no belief".into()))?;
                let mut rng = SeedStream::new(cfg.seed).rng("gabp-samples", 0);
                let samples = belief
                    .to_moments()
                    .ok()
                    .and_then(|m| gaussian_samples(&m, cfg.n.max(2), &mut rng).ok());
                let json = serde_json::to_value(d).map_err(|e| Error::Io(e.to_string()))?;
                Ok((Belief::Dense(belief), samples, json))
            })
        }
    };
    match engine.and_then(|(b, s, json)| {
        Ok((
            evaluate(&b, s.as_ref(), &problem.q_truth, reference.as_ref())?,
            b,
            json,
        ))
    }) {
        Ok((m, b, json)) => {
            row.mse = Some(m.mse);
            row.log_lik = m.log_lik;
            row.mmd = m.mmd;
            Ok(RunOutcome {
                row,
                diagnostics: json,
                posterior_mean: b.mean().ok(),
                error: None,
            })
        }
        Err(e) => {
            row.status = format!("failed: {e}");
            Ok(RunOutcome {
                row,
                diagnostics: serde_json::json!({ "method": cfg.method.name(), "error": e.to_string() }),
                posterior_mean: None,
                error: Some(e),
            })
        }
    }
}

/// Full-factorial grid over dimensions, ensemble sizes, methods and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub dims: Vec<usize>,
    pub ns: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base: RunConfig::default(),
            dims: vec![64],
            ns: vec![64],
            methods: vec![Method::Genbp, Method::Gabp],
            seeds: (0..5).collect(),
        }
    }
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &d in &self.dims {
            for &n in &self.ns {
                for &method in &self.methods {
                    for &seed in &self.seeds {
                        out.push(RunConfig {
                            problem: self.base.problem.with_dim(d),
                            method,
                            n,
                            seed,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Run every cell in order; failures are recorded, not fatal.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<RunOutcome>> {
    let cells = cfg.cells();
    for c in &cells {
        c.validate()?;
    }
    cells.iter().map(run).collect()
}
