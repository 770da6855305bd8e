//! Lifted dynamics and interval costs of the batch reactor.

use nalgebra::DVector;
use stmpc::lifted::{interval_cost, interval_cost_lifted, lift, ncs_step, ControlPacket, OverallState};
use stmpc::reproduce::bundled_experiment;

fn main() {
    let exp = bundled_experiment();
    let plant = &exp.plant;
    let xi = OverallState::new(exp.sim.x0.clone(), DVector::zeros(2), exp.sim.beta0);
    let v = DVector::from_vec(vec![0.3, -0.2]);

    for delta in 1..=exp.mpc.delta_max {
        let l = lift(plant, delta).unwrap();
        let packet = ControlPacket { v: v.clone(), delta };
        let sum = interval_cost(&xi, &packet, true, plant, &exp.bucket);
        let closed = interval_cost_lifted(&xi, &packet, true, &l);
        let next = ncs_step(&xi, &v, delta, true, plant, &exp.bucket);
        println!(
            "delta={delta} cost step-sum={sum:.6} lifted={closed:.6} |A^j|={:.3} next beta={} x={:.4}",
            l.a.norm(),
            next.beta,
            next.x.transpose()
        );
    }
    // a lost packet keeps the held input
    let lost = ncs_step(&xi, &v, 3, false, plant, &exp.bucket);
    println!("lost packet: held input {:?}", lost.w.as_slice());
}
