//! Command-line front end: `synth`, `verify`, `simulate`, `reproduce`.
//!
//! Exit codes: 0 success; 1 I/O or configuration error; 2 terminal LMI
//! infeasible or verification failed; 3 controller infeasible at the first
//! instant; 4 loss realization exceeds the loss bound; 5 reproduction
//! criteria failed.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{format_certified, load_ingredients, parse_loss, pass_fail, Experiment};
use crate::reproduce::{reproduce, summary_text, write_artifacts, ReproduceOptions, DECREASE_SAMPLES};
use crate::sim::{
    assert_runtime_invariants, plot_script, run, sampling_interval_summary, write_diagnostics_csv, write_trace_csv,
};
use crate::terminal::{certify, verify_decrease, verify_qmi, TerminalIngredients, AUDIT_SEED};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_TERMINAL: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_LOSS_BOUND: i32 = 4;
pub const EXIT_CRITERIA: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "stmpc", version, about = "Self-triggered min-max MPC over a token-bucket, lossy network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize and verify terminal ingredients.
    Synth(SynthArgs),
    /// Re-verify an ingredients file against a configuration.
    Verify(VerifyArgs),
    /// Run the closed loop and write trace, summary and plot script.
    Simulate(SimulateArgs),
    /// Run the bundled batch-reactor experiments and check the criteria.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: `[paths] out`, else the current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the loss bound P.
    #[arg(long)]
    pub p: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub ingredients: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// script:<bits> | random:<p>[,<seed>] | adversarial | file:<path>
    #[arg(long)]
    pub loss: Option<String>,
    /// Plan for a loss-free channel (P = 0) while the channel still drops.
    #[arg(long)]
    pub nominal: bool,
    /// Ingredients file; otherwise `[paths] ingredients`, an inline
    /// `[ingredients]` section, or fresh synthesis.
    #[arg(long)]
    pub ingredients: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Override the simulation horizon T.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(long, default_value = "reproduce_out")]
    pub out: PathBuf,
    /// Add this many bounded-random loss runs.
    #[arg(long, default_value_t = 0)]
    pub seed_sweep: usize,
    #[arg(long)]
    pub p: Option<usize>,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::LmiInfeasible { .. } => EXIT_TERMINAL,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::LossBoundViolated { .. } => EXIT_LOSS_BOUND,
        Error::Dimension(_) | Error::InvalidParameter(_) | Error::Numerical(_) | Error::Config(_) | Error::Io(_) => {
            EXIT_CONFIG
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> crate::Result<i32> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Verify(a) => verify(a),
        Command::Simulate(a) => simulate(a),
        Command::Reproduce(a) => reproduce_cmd(a),
    }
}

fn out_dir(flag: &Option<PathBuf>, exp: &Experiment) -> crate::Result<PathBuf> {
    let dir = flag.clone().or_else(|| exp.paths.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load(path: &Path, p: Option<usize>) -> crate::Result<Experiment> {
    let mut exp = Experiment::load(path)?;
    if let Some(p) = p {
        exp.mpc.loss_bound = p;
    }
    Ok(exp)
}

fn synth(a: &SynthArgs) -> crate::Result<i32> {
    let exp = load(&a.config, a.p)?;
    let c = certify(&exp.plant, &exp.bucket, exp.mpc.loss_bound, &exp.mpc.state_set, &exp.mpc.input_set, DECREASE_SAMPLES)?;
    let dir = out_dir(&a.out, &exp)?;
    let path = dir.join("ingredients.cfg");
    fs::write(&path, format_certified(&c))?;
    println!("{}", c.qmi);
    println!("{}", c.decrease);
    if let Some(w) = &c.set_warning {
        println!("warning: {w}");
    }
    println!("ingredients written to {}", path.display());
    println!("synth {}", pass_fail(c.pass()));
    Ok(if c.pass() { EXIT_OK } else { EXIT_TERMINAL })
}

fn verify(a: &VerifyArgs) -> crate::Result<i32> {
    let exp = Experiment::load(&a.config)?;
    let ing = load_ingredients(&a.ingredients)?;
    exp.check_ingredients(&ing)?;
    let qmi = verify_qmi(&ing.k_f, &ing.p_f, &exp.plant, ing.period, ing.loss_bound)?;
    let dec = verify_decrease(&ing, &exp.plant, &exp.bucket, &exp.mpc.state_set, &exp.mpc.input_set, DECREASE_SAMPLES, AUDIT_SEED);
    println!("{qmi}");
    println!("{dec}");
    let pass = qmi.pass && dec.pass;
    if !pass {
        let (p, ev) = qmi.worst();
        println!("worst qmi residual {ev:+.6e} at p={p}; worst decrease margin {:+.6e}", dec.worst_margin);
    }
    println!("verify {}", pass_fail(pass));
    Ok(if pass { EXIT_OK } else { EXIT_TERMINAL })
}

fn ingredients_for(a: &SimulateArgs, exp: &Experiment) -> crate::Result<TerminalIngredients> {
    if let Some(path) = a.ingredients.as_ref().or(exp.paths.ingredients.as_ref()) {
        let ing = load_ingredients(path)?;
        exp.check_ingredients(&ing)?;
        return Ok(ing);
    }
    if let Some(ing) = &exp.ingredients {
        return Ok(ing.clone());
    }
    let c = certify(&exp.plant, &exp.bucket, exp.mpc.loss_bound, &exp.mpc.state_set, &exp.mpc.input_set, DECREASE_SAMPLES)?;
    if !c.pass() {
        eprintln!("{}\n{}", c.qmi, c.decrease);
        return Err(Error::LmiInfeasible { p: c.qmi.worst().0, min_eig: -c.qmi.worst().1 });
    }
    Ok(c.ingredients)
}

fn simulate(a: &SimulateArgs) -> crate::Result<i32> {
    let mut exp = load(&a.config, a.p)?;
    if let Some(spec) = &a.loss {
        let (loss, seed) = parse_loss(spec)?;
        exp.sim.loss = loss;
        if let Some(seed) = seed {
            exp.sim.seed = seed;
        }
    }
    if let Some(t) = a.steps {
        if t == 0 {
            return Err(Error::Config("simulation horizon T must be at least 1".into()));
        }
        exp.sim.steps = t;
    }
    let terminal = ingredients_for(a, &exp)?;
    let mut cfg = exp.sim_config(terminal);
    cfg.nominal = a.nominal;
    let result = run(&cfg)?;
    let dir = out_dir(&a.out, &exp)?;
    let stem = if a.nominal { "nominal" } else { "robust" };
    let csv = format!("{stem}.csv");
    write_trace_csv(&result, BufWriter::new(File::create(dir.join(&csv))?))?;
    write_diagnostics_csv(&result, BufWriter::new(File::create(dir.join(format!("{stem}_diagnostics.csv")))?))?;
    fs::write(dir.join(format!("{stem}.gp")), plot_script(&csv, cfg.plant.n(), &format!("{stem} ({})", cfg.loss)))?;
    let iv = sampling_interval_summary(&result.records);
    let mut summary = format!("loss={}\nseed={}\n{}\n", cfg.loss, cfg.seed, result.summary());
    summary.push_str(&format!("interval_histogram={:?}\ninterval_tail={:?}\n", iv.histogram, iv.tail));
    if !a.nominal {
        let inv = assert_runtime_invariants(&result, &cfg);
        summary.push_str(&format!("invariants={}\n", pass_fail(inv.pass())));
        for f in inv.failed() {
            summary.push_str(&format!("invariant_failed={} {}\n", f.name, f.detail));
        }
    }
    fs::write(dir.join(format!("{stem}_summary.txt")), &summary)?;
    print!("{summary}");
    if result.diverged {
        println!("note: state left the blow-up bound, run stopped early");
    }
    Ok(EXIT_OK)
}

fn reproduce_cmd(a: &ReproduceArgs) -> crate::Result<i32> {
    let opts = ReproduceOptions { seed_sweep: a.seed_sweep, loss_bound: a.p, ..ReproduceOptions::default() };
    let rep = reproduce(&opts)?;
    write_artifacts(&rep, &a.out)?;
    print!("{}", summary_text(&rep).split("\n\n").next().unwrap_or_default());
    println!("artifacts written to {}", a.out.display());
    if rep.pass() {
        Ok(EXIT_OK)
    } else {
        let ids: Vec<&str> = rep.failed().iter().map(|c| c.id).collect();
        eprintln!("failed criteria: {}", ids.join(", "));
        Ok(EXIT_CRITERIA)
    }
}
