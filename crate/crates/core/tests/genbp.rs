use genbp::benchmarks::{Problem, ProblemConfig, SysidToyConfig, TransportConfig};
use genbp::factor_graph::{run_genbp, Evidence, FactorForm, GenbpParams, GenbpResult};
use genbp::gabp::{run_gabp, GabpParams};
use nalgebra::DVector;

fn toy(seed: u64) -> Problem {
    Problem::generate(&ProblemConfig::SysidToy(SysidToyConfig::default()), seed).unwrap()
}

fn belief_mean(r: &GenbpResult, v: usize) -> DVector<f64> {
    r.beliefs[&v].moments().unwrap().0
}

/// Conditional factors with negligible nuggets: the configuration whose
/// fixed point is the exact posterior on linear-Gaussian models.
fn consistent_params(n: usize, seed: u64) -> GenbpParams {
    GenbpParams {
        n,
        seed,
        form: FactorForm::Conditional,
        gamma2: 1e-6,
        sigma2: 1e-6,
        eta2: 1e-6,
        outer_iters: 3,
        resim_every: 150,
        ..Default::default()
    }
}

#[test]
fn linear_toy_three_way_consistency() {
    let p = toy(0);
    let q = p.vars.q;
    let (exact, _) = p.reference(64, 0.0, 0).unwrap().unwrap();

    let gabp = run_gabp(
        &p.sem,
        &p.evidence,
        &GabpParams {
            gamma2: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    let gm = gabp.beliefs[&q].to_moments().unwrap().mean;
    assert!((&gm - &exact).amax() < 1e-6, "gabp {gm} vs exact {exact}");

    // Monte-Carlo error measured from independent ensembles on the same data
    let reps: Vec<DVector<f64>> = (0..8)
        .map(|s| {
            let r = run_genbp(&p.sem, &p.evidence, &consistent_params(1024, 100 + s)).unwrap();
            belief_mean(&r, q)
        })
        .collect();
    let k = reps.len() as f64;
    let avg = reps.iter().fold(DVector::zeros(exact.len()), |a, m| a + m) / k;
    for i in 0..exact.len() {
        let sd = (reps.iter().map(|m| (m[i] - avg[i]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        let se = sd / k.sqrt();
        assert!(
            (avg[i] - exact[i]).abs() < 3.0 * se,
            "coordinate {i}: genbp {} vs exact {}, se {se:.2e}",
            avg[i],
            exact[i]
        );
        assert!((avg[i] - gm[i]).abs() < 3.0 * se);
    }
}

#[test]
fn no_evidence_leaves_prior_mean() {
    let p = toy(1);
    let n = 1024;
    let r = run_genbp(
        &p.sem,
        &Evidence::new(),
        &GenbpParams {
            n,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    // prior N(0, I)
    let m = r.query_ensembles[&p.vars.q].mean();
    let se = 1.0 / (n as f64).sqrt();
    assert!(m.amax() < 3.0 * se, "mean shift {m}");
}

#[test]
fn conformed_ensemble_mean_equals_belief_mean() {
    let transport = Problem::generate(
        &ProblemConfig::Transport(TransportConfig {
            d: 16,
            ..Default::default()
        }),
        2,
    )
    .unwrap();
    let runs = [
        (
            &transport,
            GenbpParams {
                n: 32,
                seed: 2,
                outer_iters: 2,
                ..Default::default()
            },
        ),
        (&toy(3), consistent_params(128, 3)),
    ];
    for (p, params) in runs {
        let r = run_genbp(&p.sem, &p.evidence, &params).unwrap();
        for (v, ens) in &r.query_ensembles {
            let gap = (ens.mean() - belief_mean(&r, *v)).amax();
            assert!(gap < 1e-8, "{}: gap {gap:e}", p.name);
        }
    }
}

#[test]
fn same_seed_same_result() {
    let p = toy(4);
    let params = GenbpParams {
        n: 64,
        seed: 11,
        ..Default::default()
    };
    let a = run_genbp(&p.sem, &p.evidence, &params).unwrap();
    let b = run_genbp(&p.sem, &p.evidence, &params).unwrap();
    assert_eq!(
        a.diagnostics.without_timings(),
        b.diagnostics.without_timings()
    );
    for (v, ens) in &a.query_ensembles {
        assert_eq!(ens.samples(), b.query_ensembles[v].samples());
    }
    for v in a.beliefs.keys() {
        assert_eq!(belief_mean(&a, *v), belief_mean(&b, *v));
    }

    let other = run_genbp(&p.sem, &p.evidence, &GenbpParams { seed: 12, ..params }).unwrap();
    assert_ne!(
        other.query_ensembles[&p.vars.q].samples(),
        a.query_ensembles[&p.vars.q].samples()
    );
}
