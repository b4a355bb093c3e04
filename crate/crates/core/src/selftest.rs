//! Randomised oracle-equivalence suites: structured algebra against dense
//! linear algebra, conformation against finite differences and its own
//! optimum, and ensemble conditioning against closed-form moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dlr::{DlrMatrix, Sign, SignedDlr};
use crate::ensemble::{
    conform_loss, conform_loss_grad, conform_signed, matheron_condition, Ensemble, NuggetSpec,
};
use crate::gaussian::MomentsGaussian;
use crate::linalg::{self, rel_frobenius};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest error seen, in the suite's own metric.
    pub worst: f64,
    pub tol: f64,
    pub seconds: f64,
    /// First failing case, if any.
    pub note: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

struct Tally {
    name: &'static str,
    tol: f64,
    cases: usize,
    failures: usize,
    worst: f64,
    note: Option<String>,
    start: std::time::Instant,
}

impl Tally {
    fn new(name: &'static str, tol: f64) -> Self {
        Tally {
            name,
            tol,
            cases: 0,
            failures: 0,
            worst: 0.0,
            note: None,
            start: std::time::Instant::now(),
        }
    }

    fn check(&mut self, what: &str, err: f64) {
        self.worst = self
            .worst
            .max(if err.is_nan() { f64::INFINITY } else { err });
        if !(err <= self.tol) {
            self.failures += 1;
            if self.note.is_none() {
                self.note = Some(format!("case {}: {what} error {err:.3e}", self.cases));
            }
        }
    }

    fn fail(&mut self, what: String) {
        self.failures += 1;
        if self.note.is_none() {
            self.note = Some(format!("case {}: {what}", self.cases));
        }
    }

    fn done(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
            tol: self.tol,
            seconds: self.start.elapsed().as_secs_f64(),
            note: self.note,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn random_dlr(rng: &mut ChaCha8Rng, d: usize, n: usize, sign: Sign) -> DlrMatrix {
    let nugget = DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0));
    // keep negative-sign instances positive definite: ‖L‖² < min nugget
    let scale = match sign {
        Sign::Plus => 1.0,
        Sign::Minus => 0.2 / ((d * n.max(1)) as f64).sqrt(),
    };
    DlrMatrix::new(nugget, randn(rng, d, n) * scale, sign).expect("valid shapes")
}

fn random_sign(rng: &mut ChaCha8Rng) -> Sign {
    if rng.random_bool(0.5) {
        Sign::Plus
    } else {
        Sign::Minus
    }
}

/// Best rank-`r` approximation of a symmetric matrix by eigenvalue
/// magnitude.
fn dense_truncate(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let (vals, vecs) = linalg::sym_eigen_desc(m);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for &i in order.iter().take(r) {
        out += vecs.column(i) * vecs.column(i).transpose() * vals[i];
    }
    out
}

/// Structured add / matmul / invert / dense-fallback invert / rank
/// reduction / capacitance against dense oracles, plus the invert round
/// trip. Sizes `D ≤ 8`, `N ≤ 6`, both signs.
pub fn dlr_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut t = Tally::new("dlr-vs-dense", 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(0..=6);
        let sign = random_sign(&mut rng);
        let a = random_dlr(&mut rng, d, n, sign);
        let nb = rng.random_range(0..=6);
        let b = random_dlr(&mut rng, d, nb, sign);
        let (ad, bd) = (a.densify(), b.densify());

        match a.add(&b) {
            Ok(s) => t.check("add", rel_frobenius(&s.densify(), &(&ad + &bd))),
            Err(e) => t.fail(format!("add: {e}")),
        }
        let x = randn(&mut rng, d, 3);
        match a.matmul_dense(&x) {
            Ok(p) => t.check("matmul", rel_frobenius(&p, &(&ad * &x))),
            Err(e) => t.fail(format!("matmul: {e}")),
        }
        let dense_inv = ad
            .clone()
            .try_inverse()
            .expect("positive definite by construction");
        match a.invert() {
            Ok(inv) => {
                t.check("invert", rel_frobenius(&inv.densify(), &dense_inv));
                match inv.invert() {
                    Ok(back) => t.check("round trip", rel_frobenius(&back.densify(), &ad)),
                    Err(e) => t.fail(format!("round trip: {e}")),
                }
            }
            Err(e) => t.fail(format!("invert: {e}")),
        }
        match a.invert_dense_fallback() {
            Ok(inv) => t.check("dense fallback", rel_frobenius(&inv.densify(), &dense_inv)),
            Err(e) => t.fail(format!("dense fallback: {e}")),
        }
        let r = rng.random_range(0..=n);
        let low = &ad - DMatrix::from_diagonal(a.nugget());
        let mut want = dense_truncate(&low, r);
        for i in 0..d {
            want[(i, i)] += a.nugget()[i];
        }
        let reduced = a.rank_reduce(r);
        if reduced.width() > r {
            t.fail(format!(
                "rank_reduce kept {} > {r} columns",
                reduced.width()
            ));
        }
        t.check("rank_reduce", rel_frobenius(&reduced.densify(), &want));
        match a.capacitance() {
            Ok(c) => {
                let l = a.component();
                let vinv = DMatrix::from_diagonal(&a.nugget().map(|v| 1.0 / v));
                let oracle = DMatrix::identity(n, n) * sign.value() + l.transpose() * vinv * l;
                t.check("capacitance", rel_frobenius(&c, &oracle));
            }
            Err(e) => t.fail(format!("capacitance: {e}")),
        }
        t.cases += 1;
    }
    t.done()
}

/// Moments → canonical → moments round trip: mean absolute error and
/// relative covariance error.
pub fn canonical_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut t = Tally::new("canonical-round-trip", 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let d = rng.random_range(1..=10);
        let n = rng.random_range(0..=8);
        let cov = random_dlr(&mut rng, d, n, Sign::Plus);
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
        let g = MomentsGaussian::new(mean.clone(), cov.clone()).expect("valid shapes");
        match g.to_canonical().and_then(|c| c.to_moments()) {
            Ok(back) => {
                t.check("mean", (&back.mean - &mean).amax());
                t.check(
                    "covariance",
                    rel_frobenius(&back.cov.densify(), &cov.densify()),
                );
            }
            Err(e) => t.fail(format!("round trip: {e}")),
        }
        t.cases += 1;
    }
    t.done()
}

fn random_target(rng: &mut ChaCha8Rng, d: usize) -> SignedDlr {
    let k = rng.random_range(0..=3);
    let nugget = DVector::from_fn(d, |_, _| rng.random_range(0.2..1.5));
    let signs: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.7) { 1.0 } else { -1.0 })
        .collect();
    SignedDlr::new(nugget, randn(rng, d, k) * 0.3, signs).expect("valid shapes")
}

/// Analytic gradient of the conformation loss against central finite
/// differences, relative to the gradient's max-abs entry.
pub fn conform_gradient_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut t = Tally::new("conform-gradient", 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let d = rng.random_range(2..=6);
        let n = rng.random_range(3..=6);
        let x = randn(&mut rng, d, n);
        let dev = crate::ensemble::ens_dev(&x);
        let target = random_target(&mut rng, d);
        let eta2 = rng.random_range(0.0..0.2);
        let m = randn(&mut rng, n, n);
        let g = conform_loss_grad(&m, &dev, &target, eta2);
        let h = 1e-5;
        let mut fd = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut up = m.clone();
                up[(i, j)] += h;
                let mut down = m.clone();
                down[(i, j)] -= h;
                fd[(i, j)] = (conform_loss(&up, &dev, &target, eta2)
                    - conform_loss(&down, &dev, &target, eta2))
                    / (2.0 * h);
            }
        }
        t.check("gradient", (&g - &fd).amax() / g.amax().max(1.0));
        t.cases += 1;
    }
    t.done()
}

/// Targets of the form `X̃MX̃ᵀ/(N−1) + η²I` with `M ⪰ 0` are reachable;
/// conformation must hit them (loss) and the target mean (exactly).
pub fn conform_reachable_suite(cases: usize, seed: u64) -> (SuiteReport, SuiteReport) {
    let mut loss = Tally::new("conform-reachable", 1e-8);
    let mut mean_t = Tally::new("conform-mean", 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let d = rng.random_range(2..=8);
        let n = rng.random_range(2..=6);
        let x = Ensemble::new(randn(&mut rng, d, n)).expect("n ≥ 2");
        let dev = x.deviations();
        let a = randn(&mut rng, n, n);
        let m = &a * a.transpose();
        let eta2: f64 = rng.random_range(0.0..0.3);
        let low = &dev
            * m.clone()
                .cholesky()
                .map(|c| c.l())
                .unwrap_or_else(|| a.clone())
            / ((n - 1) as f64).sqrt();
        let target = SignedDlr::new(DVector::from_element(d, eta2.max(1e-3)), low, vec![1.0; n])
            .expect("valid shapes");
        let target_mean = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let eta = eta2.max(1e-3);
        match conform_signed(&x, &target_mean, &target, eta) {
            Ok(c) => {
                let got = c.ensemble;
                let cov = linalg::symmetrize(&(got.deviations() * got.deviations().transpose()))
                    / ((n - 1) as f64);
                let mut want = target.densify();
                for i in 0..d {
                    want[(i, i)] -= eta;
                }
                loss.check("loss", (cov - want).norm_squared());
                mean_t.check("mean", (got.mean() - &target_mean).amax());
            }
            Err(e) => loss.fail(format!("conform: {e}")),
        }
        loss.cases += 1;
        mean_t.cases += 1;
    }
    (loss.done(), mean_t.done())
}

/// Outcome of the ensemble-conditioning check against closed-form moments.
#[derive(Clone, Debug, Serialize)]
pub struct MatheronCheck {
    pub n: usize,
    pub mean: f64,
    pub exact_mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub exact_var: f64,
    pub mean_ok: bool,
    pub var_ok: bool,
}

/// `x ~ N(1, 2)`, `y = 0.8x − 0.5 + N(0, 0.3)`; condition the joint
/// ensemble on `y = 1.7` with nugget `σ²` and compare the conditioned
/// sample moments to `p(x | y)` under observation variance `0.3 + σ²`.
pub fn matheron_check(n: usize, sigma2: f64, seed: u64) -> MatheronCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mx, vx, a, b, vn, y_star): (f64, f64, f64, f64, f64, f64) =
        (1.0, 2.0, 0.8, -0.5, 0.3, 1.7);
    let mut joint = DMatrix::zeros(2, n);
    for j in 0..n {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let x = mx + vx.sqrt() * z1;
        joint[(0, j)] = x;
        joint[(1, j)] = a * x + b + vn.sqrt() * z2;
    }
    let ens = Ensemble::new(joint).expect("n ≥ 2");
    let post = matheron_condition(
        &ens,
        &[1],
        &DVector::from_element(1, y_star),
        &NuggetSpec::Scalar(sigma2),
    )
    .expect("well posed");
    let s = post.samples().row(0);
    let mean = s.mean();
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let vy = a * a * vx + vn + sigma2;
    let exact_mean = mx + a * vx / vy * (y_star - (a * mx + b));
    let exact_var = vx - (a * vx).powi(2) / vy;
    let mean_se = (exact_var / n as f64).sqrt();
    MatheronCheck {
        n,
        mean,
        exact_mean,
        mean_se,
        var,
        exact_var,
        mean_ok: (mean - exact_mean).abs() <= 3.0 * mean_se,
        var_ok: (var / exact_var - 1.0).abs() <= 0.05,
    }
}

pub fn matheron_suite(n: usize, seed: u64) -> SuiteReport {
    let start = std::time::Instant::now();
    let c = matheron_check(n, 1e-3, seed);
    let failures = usize::from(!c.mean_ok) + usize::from(!c.var_ok);
    SuiteReport {
        name: "matheron-moments".into(),
        cases: 1,
        failures,
        worst: ((c.mean - c.exact_mean).abs() / c.mean_se).max((c.var / c.exact_var - 1.0).abs()),
        tol: 3.0,
        seconds: start.elapsed().as_secs_f64(),
        note: (failures > 0).then(|| {
            format!(
                "mean {:.5} vs {:.5} (se {:.2e}), var {:.5} vs {:.5}",
                c.mean, c.exact_mean, c.mean_se, c.var, c.exact_var
            )
        }),
    }
}

/// Every suite at the sizes used by the command-line self test.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    let (reach, mean) = conform_reachable_suite(100, seed + 3);
    vec![
        dlr_suite(1000, seed),
        canonical_suite(500, seed + 1),
        conform_gradient_suite(100, seed + 2),
        reach,
        mean,
        matheron_suite(1 << 14, seed + 4),
    ]
}
