//! Scripted, bounded-random and adversarial channels on a small unstable
//! plant, each checked against the closed-loop invariants.

use nalgebra::{DMatrix, DVector};
use stmpc::constraints::ConstraintSet;
use stmpc::controller::MpcConfig;
use stmpc::lifted::PlantModel;
use stmpc::network::TokenBucketSpec;
use stmpc::sim::{assert_runtime_invariants, run, LossSpec, SimConfig};
use stmpc::terminal::certify;

fn main() {
    let plant = PlantModel::new(
        DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.0, 0.9]),
        DMatrix::from_row_slice(2, 1, &[0.2, 1.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
    )
    .unwrap();
    let bucket = TokenBucketSpec::new(1, 2, 8).unwrap();
    let input = ConstraintSet::symmetric_box(&[3.0]).unwrap();
    let c = certify(&plant, &bucket, 2, &ConstraintSet::Unconstrained, &input, 500).unwrap();
    let mut mpc = MpcConfig::new(4, 2, 4);
    mpc.input_set = input;

    let losses = [
        LossSpec::Script(vec![true, false, false]),
        LossSpec::Random { prob: 0.5 },
        LossSpec::Adversarial,
    ];
    for loss in losses {
        let cfg = SimConfig {
            plant: plant.clone(),
            bucket,
            mpc: mpc.clone(),
            terminal: c.ingredients.clone(),
            loss,
            x0: DVector::from_vec(vec![2.0, -1.0]),
            w0: DVector::zeros(1),
            beta0: 8,
            steps: 50,
            seed: 7,
            nominal: false,
        };
        let res = run(&cfg).unwrap();
        let report = assert_runtime_invariants(&res, &cfg);
        let s = res.summary();
        println!(
            "{:12} successes={} losses={} longest_run={} fallbacks={} final |x|={:.2e} invariants={}",
            cfg.loss.to_string(),
            s.successes,
            s.losses,
            s.longest_loss_run,
            s.fallback_adoptions,
            s.final_norm,
            if report.pass() { "PASS" } else { "FAIL" }
        );
    }
}
