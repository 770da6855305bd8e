mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::*;
use stmpc::controller::{bucket_after, interval_words};
use stmpc::lifted::{applied_input, lift, ncs_step, ncs_step_lifted, OverallState};
use stmpc::network::{enumerate_admissible, split_by_first_bit, update_counter, LossHistory, LossSequence, TokenBucketSpec};

#[test]
fn admissible_sets_equal_brute_force() {
    let cases = admissible_matches_brute_force().unwrap();
    assert_eq!(cases, 5 * (1 + 2 + 3 + 4));
}

#[test]
fn lifted_interval_cost_equals_step_sum() {
    let gap = interval_cost_gap(1000, 1);
    assert!(gap <= 1e-9, "largest relative gap {gap:e}");
}

#[test]
fn lmi_and_qmi_agree() {
    let (agree, disagree, feasible) = schur_agreement(100, 2);
    assert_eq!(disagree, 0);
    assert_eq!(agree, 100);
    // both outcomes are exercised
    assert!(feasible > 5 && feasible < 95, "feasible={feasible}");
}

#[test]
fn unit_interval_controller_is_finite_horizon_lqr() {
    for (plant, p_f, x0, horizon) in lqr_cases() {
        let gap = lqr_gap(&plant, &p_f, &x0, horizon);
        assert!(gap <= 1e-5, "gap {gap:e} for A={}", plant.a());
    }
}

#[test]
fn pruned_words_match_bucket_simulation() {
    for (g, c, b) in [(1, 3, 14), (1, 2, 5), (2, 3, 6), (1, 1, 3)] {
        let spec = TokenBucketSpec::new(g, c, b).unwrap();
        for beta0 in 0..=b {
            for horizon in 1..=4 {
                let pruned = interval_words(beta0, horizon, 4, &spec);
                let oracle = bucket_words_by_simulation(beta0, horizon, 4, &spec);
                assert_eq!(pruned, oracle, "g={g} c={c} b={b} beta0={beta0} N={horizon}");
            }
        }
    }
}

#[test]
fn counter_at_bound_forces_success() {
    for n in 1..=6 {
        let set = enumerate_admissible(n, 2, 2).unwrap();
        assert!(set.words.iter().all(|w| w.get(0)));
        assert!(split_by_first_bit(&set.words, false).is_empty());
    }
    assert!(update_counter(LossHistory { r: 2, last_ack: false }, false, 2).is_err());
}

proptest! {
    #[test]
    fn bucket_level_stays_in_range(g in 1i64..4, extra in 0i64..4, room in 0i64..10, beta0 in 0i64..20, word in prop::collection::vec(1usize..6, 1..6)) {
        let spec = TokenBucketSpec::new(g, g + extra, g + extra + room).unwrap();
        let beta0 = beta0.min(spec.b);
        if let Some(end) = bucket_after(beta0, &word, word.len(), &spec) {
            prop_assert!(spec.contains(end));
            prop_assert!(end >= spec.c - spec.g);
        }
    }

    #[test]
    fn base_period_spacing_is_always_admissible(g in 1i64..4, extra in 0i64..6, room in 0i64..10, horizon in 1usize..8) {
        let spec = TokenBucketSpec::new(g, g + extra, g + extra + room).unwrap();
        let word = vec![spec.base_period(); horizon];
        for beta0 in (spec.c - spec.g)..=spec.b {
            prop_assert!(bucket_after(beta0, &word, horizon, &spec).is_some());
        }
    }

    #[test]
    fn admissible_words_respect_the_counter(n in 1usize..7, p in 0usize..4, r_frac in 0.0f64..1.0) {
        let r = ((p as f64) * r_frac).floor() as usize;
        let set = enumerate_admissible(n, p, r).unwrap();
        prop_assert!(!set.is_empty());
        for w in &set.words {
            prop_assert_eq!(w.len(), n + p);
            prop_assert!(admissible_by_counter(w.bits(), p, r));
        }
        prop_assert!(set.words.windows(2).all(|pair| pair[0] < pair[1]));
    }

    #[test]
    fn tau_lists_successes(bits in prop::collection::vec(any::<bool>(), 1..12)) {
        let tau = LossSequence::new(bits.clone()).tau();
        prop_assert!(tau.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(tau.len(), bits.iter().filter(|&&b| b).count());
        prop_assert!(tau.iter().all(|&i| bits[i]));
    }

    #[test]
    fn lifted_step_equals_repeated_step(seed in 0u64..500, j in 1usize..7, sigma in any::<bool>()) {
        let mut rng = rng(seed);
        let plant = random_plant(&mut rng, 3, 2);
        let bucket = TokenBucketSpec::new(1, 3, 14).unwrap();
        let xi = OverallState::new(DVector::from_vec(vec![1.0, -0.3, 0.2]), DVector::from_vec(vec![0.5, -1.0]), 9);
        let v = DVector::from_vec(vec![-0.2, 0.7]);
        let a = ncs_step(&xi, &v, j, sigma, &plant, &bucket);
        let b = ncs_step_lifted(&xi, &v, sigma, &lift(&plant, j).unwrap(), &bucket);
        prop_assert!((&a.x - &b.x).amax() <= 1e-10 * (1.0 + a.x.amax()));
        prop_assert_eq!(a.beta, b.beta);
        prop_assert_eq!(&a.w, &applied_input(&xi.w, &v, sigma));
    }

    #[test]
    fn matrix_text_round_trips(rows in 1usize..4, cols in 1usize..4, seed in 0u64..1000) {
        let m = random_matrix(&mut rng(seed), rows, cols, 1e3);
        let back = stmpc::config::parse_matrix(&stmpc::config::format_matrix(&m)).unwrap();
        prop_assert_eq!(back, m);
    }
}

#[test]
fn lqr_reference_is_consistent() {
    // scalar a=1, b=1, q=r=1, one step from P_f=1: k=-1/2, p0=3/2
    let (k, p0) = lqr_dp(&scalar_plant(1.0, 1.0, 1.0, 1.0), &DMatrix::from_element(1, 1, 1.0), 1);
    assert!((k[(0, 0)] + 0.5).abs() < 1e-15 && (p0[(0, 0)] - 1.5).abs() < 1e-15);
}
