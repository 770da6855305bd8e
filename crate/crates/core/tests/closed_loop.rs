mod common;

use nalgebra::{DMatrix, DVector};

use common::scalar_plant;
use stmpc::constraints::ConstraintSet;
use stmpc::controller::MpcConfig;
use stmpc::lifted::PlantModel;
use stmpc::network::TokenBucketSpec;
use stmpc::sim::*;
use stmpc::terminal::certify;
use stmpc::Error;

fn small_config(loss: LossSpec, steps: usize) -> SimConfig {
    let plant = PlantModel::new(
        DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.95]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
    )
    .unwrap();
    let bucket = TokenBucketSpec::new(1, 2, 8).unwrap();
    let unc = ConstraintSet::Unconstrained;
    let terminal = certify(&plant, &bucket, 1, &unc, &unc, 200).unwrap().ingredients;
    SimConfig {
        plant,
        bucket,
        mpc: MpcConfig::new(3, 1, 3),
        terminal,
        loss,
        x0: DVector::from_vec(vec![1.0, -1.0]),
        w0: DVector::zeros(1),
        beta0: 5,
        steps,
        seed: 3,
        nominal: false,
    }
}

#[test]
fn robust_run_passes_every_check() {
    let cfg = small_config(LossSpec::Script(vec![true, false]), 40);
    let res = run(&cfg).unwrap();
    let report = assert_runtime_invariants(&res, &cfg);
    assert!(report.pass(), "{report}");
    assert_eq!(res.records.len(), 40);
    assert!(res.max_norm_from(30) < 0.05, "{}", res.max_norm_from(30));
}

#[test]
fn corrupted_bucket_level_is_reported_with_its_time() {
    let cfg = small_config(LossSpec::Script(vec![true]), 15);
    let mut res = run(&cfg).unwrap();
    res.records[7].beta = -1;
    let report = assert_runtime_invariants(&res, &cfg);
    let failed: Vec<_> = report.failed().iter().map(|c| (c.name, c.detail.clone())).collect();
    assert!(failed.iter().any(|(n, d)| *n == "bucket_range" && d.contains("t=7")), "{report}");
    assert!(failed.iter().any(|(n, d)| *n == "bucket_recursion" && d.contains("t=7")), "{report}");
}

#[test]
fn too_many_consecutive_drops_fail_the_loss_bound() {
    let cfg = small_config(LossSpec::Script(vec![true, false]), 20);
    let mut res = run(&cfg).unwrap();
    let idx: Vec<usize> = res.records.iter().enumerate().filter(|(_, r)| r.event.is_some()).map(|(i, _)| i).collect();
    for &i in &idx[1..3] {
        res.records[i].event.as_mut().unwrap().sigma = false;
    }
    let report = assert_runtime_invariants(&res, &cfg);
    assert!(report.failed().iter().any(|c| c.name == "loss_bound"), "{report}");

    let cfg = small_config(LossSpec::Script(vec![true, false, false]), 20);
    assert!(matches!(run(&cfg), Err(Error::LossBoundViolated { bound: 1, counter: 2 })));
}

#[test]
fn traces_are_deterministic_across_runs_and_workers() {
    let cfg = small_config(LossSpec::Random { prob: 0.5 }, 25);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run(&cfg).unwrap());
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| run(&cfg).unwrap());
    let again = run(&cfg).unwrap();
    assert_eq!(one.records, three.records);
    assert_eq!(one.records, again.records);
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_trace_csv(&one, &mut a).unwrap();
    write_trace_csv(&again, &mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn adversarial_and_random_losses_keep_the_guarantees() {
    for loss in [LossSpec::Adversarial, LossSpec::Random { prob: 0.7 }] {
        let cfg = small_config(loss, 30);
        let res = run(&cfg).unwrap();
        let report = assert_runtime_invariants(&res, &cfg);
        assert!(report.pass(), "{}: {report}", cfg.loss);
        assert!(res.min_decrease_margin().unwrap() >= -DECREASE_SLACK);
    }
}

#[test]
fn nominal_and_robust_coincide_without_losses_at_p0() {
    let mut cfg = small_config(LossSpec::Script(vec![true]), 20);
    let unc = ConstraintSet::Unconstrained;
    cfg.mpc.loss_bound = 0;
    cfg.terminal = certify(&cfg.plant, &cfg.bucket, 0, &unc, &unc, 200).unwrap().ingredients;
    let robust = run(&cfg).unwrap();
    let nominal = run(&SimConfig { nominal: true, ..cfg }).unwrap();
    assert_eq!(robust.records, nominal.records);
}

#[test]
fn nominal_mode_ignores_losses_in_its_plan() {
    let cfg = SimConfig { nominal: true, ..small_config(LossSpec::Script(vec![true, false, false]), 20) };
    let res = run(&cfg).unwrap();
    assert!(res.diagnostics.iter().all(|d| d.r == 0 && d.admissible_size == 1));
    assert_eq!(res.summary().longest_loss_run, 2);
}

#[test]
fn scalar_lossless_run_settles_on_a_constant_interval() {
    let plant = scalar_plant(1.05, 1.0, 1.0, 1.0);
    let bucket = TokenBucketSpec::new(1, 2, 6).unwrap();
    let unc = ConstraintSet::Unconstrained;
    let terminal = certify(&plant, &bucket, 0, &unc, &unc, 100).unwrap().ingredients;
    let cfg = SimConfig {
        plant,
        bucket,
        mpc: MpcConfig::new(3, 0, 4),
        terminal,
        loss: LossSpec::Script(vec![true]),
        x0: DVector::from_element(1, 0.01),
        w0: DVector::zeros(1),
        beta0: 6,
        steps: 60,
        seed: 0,
        nominal: false,
    };
    let res = run(&cfg).unwrap();
    let tail = sampling_interval_summary(&res.records).tail;
    assert_eq!(tail.len(), 5);
    assert!(tail.iter().all(|&d| d == tail[0]), "{tail:?}");
}

#[test]
fn interval_summary_of_an_empty_trace_is_empty() {
    let s = sampling_interval_summary(&[]);
    assert!(s.instants.is_empty() && s.histogram.is_empty() && s.tail.is_empty());
}

#[test]
fn trace_csv_layout_and_plot_script() {
    let cfg = small_config(LossSpec::Script(vec![true, false]), 12);
    let res = run(&cfg).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&res, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,k,x_1,x_2,u_1,beta,delta,sigma,ack,r,worst_value,provenance");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.len() == 12));
    assert_eq!(rows[0][1], "0");
    let between = rows.iter().find(|r| r[1].is_empty()).unwrap();
    assert!(between[6..].iter().all(|c| c.is_empty()));
    let covered: usize = rows.iter().filter(|r| !r[1].is_empty()).map(|r| r[6].parse::<usize>().unwrap()).sum();
    assert!(covered >= 12);

    let script = plot_script("robust.csv", 2, "robust");
    assert!(script.contains("'robust.csv'") && script.contains("impulses"));
    assert!(!script.contains("system("));
}

#[test]
fn zero_steps_is_a_config_error() {
    let cfg = small_config(LossSpec::Script(vec![true]), 0);
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
}
