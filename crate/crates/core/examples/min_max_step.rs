//! A single min-max solve at the batch reactor's initial state.

use nalgebra::DVector;
use stmpc::controller::Controller;
use stmpc::lifted::OverallState;
use stmpc::reproduce::bundled_experiment;
use stmpc::terminal::certify;

fn main() {
    let exp = bundled_experiment();
    let c = certify(&exp.plant, &exp.bucket, exp.mpc.loss_bound, &exp.mpc.state_set, &exp.mpc.input_set, 200).unwrap();
    let mut ctrl = Controller::new(exp.plant.clone(), exp.bucket, exp.mpc.clone(), c.ingredients).unwrap();
    let xi = OverallState::new(exp.sim.x0.clone(), DVector::zeros(2), exp.sim.beta0);

    let clock = std::time::Instant::now();
    let step = ctrl.control_step(&xi, true).unwrap();
    let sol = &step.solution;
    println!("solved in {:?}, {} interval words explored", clock.elapsed(), sol.words_explored);
    println!("intervals {:?}", sol.policy.intervals);
    println!("first packet v={:?} delta={}", step.packet.v.as_slice(), step.packet.delta);
    println!("worst value {:.4} on {} (scenario {} of {})", sol.worst_value, sol.worst_sequence, sol.worst_index, sol.scenarios.len());
    let best = sol.scenarios.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
    println!("best-case value {best:.4}");
}
