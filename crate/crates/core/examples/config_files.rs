//! Reading an experiment file and writing ingredients in the same format.

use stmpc::config::{format_ingredients, parse_ingredients, Experiment, BATCH_REACTOR};
use stmpc::terminal::certify;

fn main() {
    let path = std::env::args().nth(1);
    let exp = match &path {
        Some(p) => Experiment::load(std::path::Path::new(p)),
        None => Experiment::parse(BATCH_REACTOR),
    }
    .unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(1)
    });
    println!("plant n={} m={}", exp.plant.n(), exp.plant.m());
    println!("bucket {:?}, M={}", exp.bucket, exp.bucket.base_period());
    println!("N={} P={} delta_max={}", exp.mpc.horizon, exp.mpc.loss_bound, exp.mpc.delta_max);
    println!("x0={:?} beta0={} T={} loss={}", exp.sim.x0.as_slice(), exp.sim.beta0, exp.sim.steps, exp.sim.loss);

    let c = certify(&exp.plant, &exp.bucket, exp.mpc.loss_bound, &exp.mpc.state_set, &exp.mpc.input_set, 100).unwrap();
    let text = format_ingredients(&c.ingredients);
    print!("\n{text}");
    assert_eq!(parse_ingredients(&text).unwrap(), c.ingredients);
}
