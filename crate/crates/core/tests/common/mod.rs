#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stmpc::controller::{Controller, MpcConfig};
use stmpc::lifted::{interval_cost, interval_cost_lifted, lift, ControlPacket, OverallState, PlantModel};
use stmpc::linalg::{max_eigenvalue, min_eigenvalue, spd_inverse};
use stmpc::network::{bucket_step, enumerate_admissible, TokenBucketSpec};
use stmpc::terminal::{lmi_matrix, qmi_residual, TerminalIngredients, TerminalSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let l = random_matrix(rng, n, n, 1.0);
    &l * l.transpose() + DMatrix::identity(n, n) * 0.5
}

pub fn random_plant(rng: &mut impl Rng, n: usize, m: usize) -> PlantModel {
    PlantModel::new(random_matrix(rng, n, n, 0.8), random_matrix(rng, n, m, 1.0), random_spd(rng, n), random_spd(rng, m))
        .unwrap()
}

pub fn scalar_plant(a: f64, b: f64, q: f64, r: f64) -> PlantModel {
    PlantModel::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, b),
        DMatrix::from_element(1, 1, q),
        DMatrix::from_element(1, 1, r),
    )
    .unwrap()
}

/// Admissible iff the loss counter, started at `r`, never exceeds `p` and at
/// least one packet gets through.
pub fn admissible_by_counter(bits: &[bool], p: usize, r: usize) -> bool {
    let mut counter = r;
    for &b in bits {
        counter = if b { 0 } else { counter + 1 };
        if counter > p {
            return false;
        }
    }
    bits.iter().any(|&b| b)
}

/// Exhaustive comparison for `N <= 5`, `P <= 3`; returns the number of
/// `(N, P, r)` cases checked.
pub fn admissible_matches_brute_force() -> Result<usize, String> {
    let mut cases = 0;
    for n in 1..=5 {
        for p in 0..=3 {
            for r in 0..=p {
                let len = n + p;
                let expected: Vec<Vec<bool>> = (0..1u32 << len)
                    .map(|code| (0..len).map(|i| code >> (len - 1 - i) & 1 == 1).collect::<Vec<bool>>())
                    .filter(|bits| admissible_by_counter(bits, p, r))
                    .collect();
                let got: Vec<Vec<bool>> =
                    enumerate_admissible(n, p, r).unwrap().words.iter().map(|w| w.bits().to_vec()).collect();
                if got != expected {
                    return Err(format!("N={n} P={p} r={r}: {} words, brute force {}", got.len(), expected.len()));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

/// Step-sum versus lifted interval cost on random instances; returns the
/// largest relative gap.
pub fn interval_cost_gap(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let bucket = TokenBucketSpec::new(1, 2, 10).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let plant = random_plant(&mut rng, n, m);
        let delta = rng.random_range(1..=6);
        let state = OverallState::new(
            DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
            DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)),
            rng.random_range(0..=10),
        );
        let packet = ControlPacket { v: DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)), delta };
        let sigma = rng.random_bool(0.5);
        let sum = interval_cost(&state, &packet, sigma, &plant, &bucket);
        let closed = interval_cost_lifted(&state, &packet, sigma, &lift(&plant, delta).unwrap());
        worst = worst.max((sum - closed).abs() / sum.abs().max(1.0));
    }
    worst
}

/// Sign agreement of the LMI block (positive semidefinite) and the QMI
/// residual (negative semidefinite) on random instances, with `X = P_f^-1`
/// and `Y = K_f X`. Returns `(agreements, disagreements, feasible_count)`.
pub fn schur_agreement(instances: usize, seed: u64) -> (usize, usize, usize) {
    let mut rng = rng(seed);
    let (mut agree, mut disagree, mut feasible) = (0, 0, 0);
    let mut done = 0;
    while done < instances {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=2);
        let plant = PlantModel::new(
            random_matrix(&mut rng, n, n, 0.6),
            random_matrix(&mut rng, n, m, 1.0),
            random_spd(&mut rng, n),
            random_spd(&mut rng, m),
        )
        .unwrap();
        let lifted = lift(&plant, rng.random_range(1..=4)).unwrap();
        let k = random_matrix(&mut rng, m, n, 0.5);
        let p_f = random_spd(&mut rng, n) * rng.random_range(0.5..40.0);
        let qmi = max_eigenvalue(&qmi_residual(&lifted, &k, &p_f));
        // skip instances too close to the boundary to classify
        if qmi.abs() < 1e-6 {
            continue;
        }
        let x = spd_inverse(&p_f, "P_f").unwrap();
        let y = &k * &x;
        let lmi = min_eigenvalue(&lmi_matrix(&lifted, &x, &y));
        if (qmi <= 0.0) == (lmi >= -1e-10) {
            agree += 1;
        } else {
            disagree += 1;
        }
        if qmi <= 0.0 {
            feasible += 1;
        }
        done += 1;
    }
    (agree, disagree, feasible)
}

/// Finite-horizon LQR by dynamic programming: the first gain and `P_0`.
pub fn lqr_dp(plant: &PlantModel, p_f: &DMatrix<f64>, horizon: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (a, b, q, r) = (plant.a(), plant.b(), plant.q(), plant.r());
    let mut p = p_f.clone();
    let mut k = DMatrix::zeros(plant.m(), plant.n());
    for _ in 0..horizon {
        let h = r + b.transpose() * &p * b;
        let g = b.transpose() * &p * a;
        k = -h.clone().try_inverse().unwrap() * &g;
        p = q + a.transpose() * &p * a + g.transpose() * &k;
        p = (&p + p.transpose()) * 0.5;
    }
    (k, p)
}

/// Controller with `P = 0`, `M = 1`, intervals fixed at 1 against the LQR
/// recursion. Returns the largest relative error of value and first input.
pub fn lqr_gap(plant: &PlantModel, p_f: &DMatrix<f64>, x0: &DVector<f64>, horizon: usize) -> f64 {
    let bucket = TokenBucketSpec::new(1, 1, 4).unwrap();
    let terminal = TerminalIngredients {
        k_f: DMatrix::zeros(plant.m(), plant.n()),
        p_f: p_f.clone(),
        period: 1,
        loss_bound: 0,
        terminal_set: TerminalSet::Unconstrained,
    };
    let mut ctrl = Controller::new(plant.clone(), bucket, MpcConfig::new(horizon, 0, 1), terminal).unwrap();
    let xi = OverallState::new(x0.clone(), DVector::zeros(plant.m()), 4);
    let step = ctrl.control_step(&xi, true).unwrap();
    let (k, p0) = lqr_dp(plant, p_f, horizon);
    let value = x0.dot(&(&p0 * x0));
    let u = &k * x0;
    let value_gap = (step.solution.worst_value - value).abs() / value.abs().max(1e-12);
    let input_gap = (&step.packet.v - &u).amax() / u.amax().max(1e-12);
    value_gap.max(input_gap)
}

pub fn lqr_cases() -> Vec<(PlantModel, DMatrix<f64>, DVector<f64>, usize)> {
    let mut rng = rng(11);
    let mut cases = vec![
        (scalar_plant(1.2, 1.0, 1.0, 1.0), DMatrix::from_element(1, 1, 3.0), DVector::from_element(1, 1.0), 4),
        (scalar_plant(0.7, 0.5, 2.0, 0.3), DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -2.0), 6),
    ];
    for _ in 0..3 {
        let plant = random_plant(&mut rng, 2, 1);
        let p_f = random_spd(&mut rng, 2);
        cases.push((plant, p_f, DVector::from_vec(vec![1.0, -0.5]), 5));
    }
    cases
}

/// Interval words kept by the bucket-pruned search must be exactly the ones
/// a per-step bucket simulation accepts.
pub fn bucket_words_by_simulation(beta0: i64, horizon: usize, delta_max: usize, spec: &TokenBucketSpec) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let total = delta_max.pow(horizon as u32);
    for code in 0..total {
        let mut word = Vec::with_capacity(horizon);
        let mut c = code;
        for _ in 0..horizon {
            word.push(c % delta_max + 1);
            c /= delta_max;
        }
        word.reverse();
        let mut beta = beta0;
        let mut ok = true;
        for &d in &word {
            for j in 0..d {
                beta = bucket_step(beta, j == 0, spec);
                ok &= beta >= 0;
            }
        }
        if ok && beta >= spec.c - spec.g {
            out.push(word);
        }
    }
    out
}
