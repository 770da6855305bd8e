//! Terminal gain, cost and set for the batch reactor, with both checks.
//!
//! cargo run --release --example terminal_synthesis [P]

use stmpc::config::format_certified;
use stmpc::reproduce::bundled_experiment;
use stmpc::terminal::certify;

fn main() {
    let exp = bundled_experiment();
    let p = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(exp.mpc.loss_bound);
    let clock = std::time::Instant::now();
    match certify(&exp.plant, &exp.bucket, p, &exp.mpc.state_set, &exp.mpc.input_set, 1000) {
        Ok(c) => {
            println!("{}\n{}", c.qmi, c.decrease);
            println!("took {:?}\n", clock.elapsed());
            print!("{}", format_certified(&c));
        }
        Err(e) => println!("P={p}: {e}"),
    }
}
