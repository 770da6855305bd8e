//! Robust versus nominal self-triggered MPC on the batch reactor with the
//! scripted channel 1,0,0,1,0,0,... Writes CSVs and gnuplot scripts.
//!
//! cargo run --release --example batch_reactor [out-dir]

use std::fs::File;

use stmpc::reproduce::bundled_experiment;
use stmpc::sim::{assert_runtime_invariants, plot_script, run, sampling_interval_summary, write_trace_csv, SimConfig};
use stmpc::terminal::certify;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "batch_reactor_out".into()));
    std::fs::create_dir_all(&out)?;
    let exp = bundled_experiment();
    let c = certify(&exp.plant, &exp.bucket, exp.mpc.loss_bound, &exp.mpc.state_set, &exp.mpc.input_set, 1000)?;
    let robust = exp.sim_config(c.ingredients);
    let nominal = SimConfig { nominal: true, ..robust.clone() };

    for (name, cfg) in [("nominal", &nominal), ("robust", &robust)] {
        let clock = std::time::Instant::now();
        let res = run(cfg)?;
        let csv = format!("{name}.csv");
        write_trace_csv(&res, File::create(out.join(&csv))?)?;
        std::fs::write(out.join(format!("{name}.gp")), plot_script(&csv, cfg.plant.n(), name))?;
        println!("== {name} ({:?})", clock.elapsed());
        println!("{}", res.summary());
        println!("interval tail {:?}", sampling_interval_summary(&res.records).tail);
        if let Some(r) = res.records.iter().find(|r| r.t == 30) {
            println!("x1(30) = {:.3e}", r.x[0]);
        }
        if !cfg.nominal {
            print!("{}", assert_runtime_invariants(&res, cfg));
        }
    }
    println!("traces in {}", out.display());
    Ok(())
}
