mod common;

use mixer::cli::random_instance;
use mixer::corpus::{ExamplePair, BOS};
use mixer::decoding::sequence_logp;
use mixer::gradcheck::{
    check_e2e, check_xent, enumerated_estimator_mean, exact_policy_gradient, finite_diff, flatten_grads, flatten_named,
    within_tolerance, BaselineSource, TensorReport, FD_EPSILON,
};
use mixer::model::{backward, rollout, CellKind, FeedMode, GradAccumulator};
use mixer::numkern::{derive_seed, seeded_rng, Mat};
use mixer::training::{reinforce_grads, BaselineRegressor};
use proptest::prelude::*;

fn assert_reports(reports: &[TensorReport]) {
    for r in reports {
        assert!(
            r.passed(),
            "{}: rel {:.3e} abs {:.3e}",
            r.name,
            r.max_rel_error,
            r.max_abs_error
        );
    }
}

#[test]
fn xent_matches_finite_differences_for_both_cells() {
    for i in 0..12u64 {
        let cell = if i % 2 == 0 { CellKind::Lstm } else { CellKind::Elman };
        let (params, ex) = random_instance(cell, &mut seeded_rng(derive_seed(77, &[i]))).unwrap();
        assert_reports(&check_xent(&params, &ex).unwrap());
    }
}

#[test]
fn e2e_mixed_inputs_match_finite_differences() {
    let ex = ExamplePair::new(vec![4, 5, 6], &[5, 6, 7]);
    for cell in [CellKind::Elman, CellKind::Lstm] {
        let params = common::model(cell, 8, 4, 0.6, 3);
        for (k, mixed) in [(2, 1), (3, 2), (8, 3), (1, 3)] {
            assert_reports(&check_e2e(&params, &ex, k, mixed).unwrap());
        }
    }
}

#[test]
fn single_sample_reinforce_is_reward_weighted_log_likelihood_gradient() {
    let src = [4, 5];
    let t = 4;
    for cell in [CellKind::Elman, CellKind::Lstm] {
        let params = common::model(cell, 7, 3, 0.8, 21);
        let ex = ExamplePair {
            source: src.to_vec(),
            target: vec![BOS],
        };
        let trace = rollout(&params, &ex, &vec![FeedMode::Sample; t], false, &mut seeded_rng(5)).unwrap();
        let seq = trace.chosen.clone();
        let r = 0.37;
        let dl = reinforce_grads(&trace, r, &vec![0.0; t], 0).unwrap();
        let mut g = GradAccumulator::zeros_like(&params);
        backward(&params, &trace, &dl, &mut g).unwrap();
        let numeric = finite_diff(&params, FD_EPSILON, |p| Ok(-r * sequence_logp(p, &src, &seq)?)).unwrap();
        for (a, n) in flatten_grads(&g).iter().zip(flatten_named(&numeric)) {
            assert!(within_tolerance(*a, n), "{a} vs {n}");
        }
    }
}

fn rewards() -> impl Fn(&[usize]) -> f64 + Sync {
    let table = [0.2, 0.7, 0.1, 0.9, 0.4, 0.0, 0.55, 0.3, 0.8];
    move |s: &[usize]| table[s[0] * 3 + s[1]]
}

#[test]
fn any_state_dependent_baseline_leaves_the_expectation_unchanged() {
    let params = common::model(CellKind::Lstm, 3, 2, 0.9, 8);
    let src = [1, 2];
    let reward = rewards();
    let exact = flatten_named(&exact_policy_gradient(&params, &src, 2, &reward).unwrap());
    let reg = BaselineRegressor {
        weights: vec![0.8, -1.3],
        bias: 0.25,
    };
    for baseline in [
        BaselineSource::Zero,
        BaselineSource::Constant(0.6),
        BaselineSource::Regressor(&reg),
    ] {
        let est = flatten_grads(&enumerated_estimator_mean(&params, &src, 2, &reward, baseline).unwrap());
        for (a, e) in est.iter().zip(&exact) {
            assert!(within_tolerance(-a, *e), "{baseline:?}: {a} vs {e}");
        }
    }
}

#[test]
fn shifting_reward_and_baseline_together_changes_nothing() {
    let params = common::model(CellKind::Elman, 3, 2, 0.9, 9);
    let src = [2];
    let reward = rewards();
    let shifted = |s: &[usize]| reward(s) + 5.0;
    let a = enumerated_estimator_mean(&params, &src, 2, &reward, BaselineSource::Zero).unwrap();
    let b = enumerated_estimator_mean(&params, &src, 2, &shifted, BaselineSource::Constant(5.0)).unwrap();
    let (a, b) = (flatten_grads(&a), flatten_grads(&b));
    assert!(common::max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn finite_differences_of_a_known_function() {
    // f(A) = Σ a_ij², so ∇f = 2A
    let m = Mat::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
    let g = finite_diff(&m, FD_EPSILON, |x: &Mat| Ok(x.sum_sq())).unwrap();
    for (n, a) in flatten_named(&g).iter().zip(m.data()) {
        assert!((n - 2.0 * a).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_instances_pass_the_gradient_check(seed in any::<u64>(), lstm in any::<bool>()) {
        let cell = if lstm { CellKind::Lstm } else { CellKind::Elman };
        let (params, ex) = random_instance(cell, &mut seeded_rng(seed)).unwrap();
        for r in check_xent(&params, &ex).unwrap() {
            prop_assert!(r.passed(), "{}: rel {:.3e}", r.name, r.max_rel_error);
        }
    }
}
