use equipoise::dgp::{
    generate, generate_population, true_estimands, Dgp, Effect, Misspec, Overlap, Prevalence, ScenarioConfig,
};
use equipoise::error::Error;
use equipoise::harness::{default_methods, run_scenario, HarnessOptions};
use equipoise::{Method, TiltSpec};

fn cell(dgp: Dgp, overlap: Overlap, effect: Effect) -> ScenarioConfig {
    ScenarioConfig {
        dgp,
        overlap,
        prevalence: Prevalence::Medium,
        effect,
        misspec: Misspec::None,
        n: 500,
        replicates: 20,
        seed: 99,
    }
}

#[test]
fn replicates_are_reproducible_and_distinct() {
    for dgp in [Dgp::Omission, Dgp::Transformation] {
        let c = cell(dgp, Overlap::Moderate, Effect::Heterogeneous);
        let a = generate(&c, 3).unwrap();
        assert_eq!(a.dataset, generate(&c, 3).unwrap().dataset);
        assert_ne!(a.dataset.y(), generate(&c, 4).unwrap().dataset.y());
        let mut other = c;
        other.seed += 1;
        assert_ne!(a.dataset.y(), generate(&other, 3).unwrap().dataset.y());
    }
}

#[test]
fn observed_outcome_is_the_assigned_potential_outcome() {
    for dgp in [Dgp::Omission, Dgp::Transformation] {
        let sim = generate(&cell(dgp, Overlap::Poor, Effect::Heterogeneous), 0).unwrap();
        for i in 0..sim.dataset.n() {
            let expect = if sim.dataset.z()[i] { sim.y1[i] } else { sim.y0[i] };
            assert_eq!(sim.dataset.y()[i], expect);
        }
    }
}

#[test]
fn overlap_settings_push_scores_outward() {
    for dgp in [Dgp::Omission, Dgp::Transformation] {
        let share: Vec<f64> = Overlap::ALL
            .iter()
            .map(|&o| {
                let pop = generate_population(&cell(dgp, o, Effect::Homogeneous), 100_000, 1).unwrap();
                pop.e_true.iter().filter(|&&e| (0.1..=0.9).contains(&e)).count() as f64 / 1e5
            })
            .collect();
        assert!(share[0] > share[1] && share[1] > share[2], "{dgp:?}: {share:?}");
    }
}

#[test]
fn estimands_order_by_emphasis_on_equipoise() {
    let c = cell(Dgp::Omission, Overlap::Poor, Effect::Heterogeneous);
    let specs = [TiltSpec::Ipw, TiltSpec::Overlap, TiltSpec::TrimmedIpw(0.15)];
    let t = true_estimands(&c, &specs, 1_000_000).unwrap();
    assert!(t[0].value < t[1].value && t[1].value < t[2].value, "{t:?}");
}

#[test]
fn scenario_results_do_not_depend_on_worker_count() {
    let c = cell(Dgp::Omission, Overlap::Moderate, Effect::Heterogeneous);
    let mut methods = default_methods();
    methods.push(Method::StabilizedIpw);
    let opts = |workers| HarnessOptions { workers, superpop_n: 200_000, ..HarnessOptions::default() };
    let one = run_scenario(&c, &methods, &opts(1)).unwrap();
    let three = run_scenario(&c, &methods, &opts(3)).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.metrics.len(), methods.len());
    assert!(one.metrics.iter().all(|m| m.n_ok == 20 && m.n_failed == 0));
}

#[test]
fn homogeneous_effect_has_small_bias_everywhere() {
    let mut c = cell(Dgp::Transformation, Overlap::Good, Effect::Homogeneous);
    c.n = 2000;
    c.replicates = 100;
    let run = run_scenario(&c, &default_methods(), &HarnessOptions { superpop_n: 200_000, ..Default::default() })
        .unwrap();
    for m in &run.metrics {
        assert!((m.true_value - 1.0).abs() < 1e-12);
        assert!(m.rel_bias_pct.abs() <= 3.0 * m.bias_mc_se_pct() + 0.5, "{}: {}", m.method, m.rel_bias_pct);
    }
}

#[test]
fn widespread_trimming_failure_aborts_the_scenario() {
    let mut c = cell(Dgp::Omission, Overlap::Poor, Effect::Heterogeneous);
    c.n = 50;
    let methods = [Method::Balancing(TiltSpec::TrimmedIpw(0.49))];
    let r = run_scenario(&c, &methods, &HarnessOptions { superpop_n: 100_000, ..Default::default() });
    assert!(matches!(r, Err(Error::ExcessiveFailures { .. })), "{r:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cell(Dgp::Transformation, Overlap::Good, Effect::Homogeneous);
    c.misspec = Misspec::OmitX2;
    assert!(run_scenario(&c, &default_methods(), &HarnessOptions::default()).is_err());
    let mut c = cell(Dgp::Omission, Overlap::Good, Effect::Homogeneous);
    c.replicates = 0;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
}
