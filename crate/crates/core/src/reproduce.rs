//! The batch-reactor experiment end to end: certification, robust and nominal
//! runs on the scripted channel, an optional bounded-random seed sweep, and
//! the pass/fail criteria over the results.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::config::{format_certified, pass_fail, Experiment, BATCH_REACTOR};
use crate::controller::SolverOptions;
use crate::network::longest_loss_run;
use crate::sim::{
    assert_runtime_invariants, plot_script, run, sampling_interval_summary, write_diagnostics_csv, write_trace_csv,
    InvariantReport, LossSpec, SimConfig, SimResult, DECREASE_SLACK,
};
use crate::terminal::{certify, CertifiedTerminal};
use crate::Result;

pub const DECREASE_SAMPLES: usize = 1000;

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    /// Number of bounded-random loss runs.
    pub seed_sweep: usize,
    /// Overrides the loss bound `P` of the bundled experiment.
    pub loss_bound: Option<usize>,
    pub sweep_steps: usize,
    pub sweep_loss_prob: f64,
    /// Solver settings of the sweep runs.
    pub sweep_solver: SolverOptions,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        Self {
            seed_sweep: 0,
            loss_bound: None,
            sweep_steps: 60,
            sweep_loss_prob: 0.4,
            sweep_solver: SolverOptions {
                screen: 0,
                shortlist: 2,
                temperatures: vec![10.0, 1e3],
                max_iterations: 20,
                word_budget: 0,
                beam_width: 12,
                ..SolverOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Run {
    pub name: String,
    pub config: SimConfig,
    pub result: SimResult,
    pub invariants: InvariantReport,
    pub elapsed: Duration,
}

impl Run {
    fn execute(name: String, config: SimConfig) -> Result<Self> {
        let clock = Instant::now();
        let result = run(&config)?;
        let elapsed = clock.elapsed();
        let invariants = assert_runtime_invariants(&result, &config);
        Ok(Self { name, config, result, invariants, elapsed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: &'static str,
    /// `None` when the criterion does not apply to this invocation.
    pub pass: Option<bool>,
    pub detail: String,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = match self.pass {
            Some(ok) => pass_fail(ok),
            None => "SKIP",
        };
        write!(f, "{verdict} {} {}", self.id, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct Reproduction {
    pub experiment: Experiment,
    pub certified: CertifiedTerminal,
    pub synth_time: Duration,
    /// Robust and nominal runs on the scripted channel (absent if the script
    /// violates the loss bound in use).
    pub robust: Option<Run>,
    pub nominal: Option<Run>,
    /// Robust and nominal runs on a loss-free channel, made when `P = 0`.
    pub lossless: Option<(Run, Run)>,
    pub sweep: Vec<Run>,
    pub criteria: Vec<Criterion>,
}

impl Reproduction {
    pub fn pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass != Some(false))
    }

    pub fn failed(&self) -> Vec<&Criterion> {
        self.criteria.iter().filter(|c| c.pass == Some(false)).collect()
    }
}

pub fn bundled_experiment() -> Experiment {
    Experiment::parse(BATCH_REACTOR).expect("bundled configuration is valid")
}

pub fn reproduce(opts: &ReproduceOptions) -> Result<Reproduction> {
    reproduce_with(bundled_experiment(), opts)
}

pub fn reproduce_with(mut experiment: Experiment, opts: &ReproduceOptions) -> Result<Reproduction> {
    if let Some(p) = opts.loss_bound {
        experiment.mpc.loss_bound = p;
    }
    let bound = experiment.mpc.loss_bound;
    let clock = Instant::now();
    let certified = certify(
        &experiment.plant,
        &experiment.bucket,
        bound,
        &experiment.mpc.state_set,
        &experiment.mpc.input_set,
        DECREASE_SAMPLES,
    )?;
    let synth_time = clock.elapsed();
    let base = experiment.sim_config(certified.ingredients.clone());

    let script_ok = match &base.loss {
        LossSpec::Script(bits) => longest_loss_run(&bits.repeat(2)) <= bound,
        _ => true,
    };
    let (robust, nominal) = if script_ok {
        let robust = Run::execute("robust".into(), base.clone())?;
        let nominal = Run::execute("nominal".into(), SimConfig { nominal: true, ..base.clone() })?;
        (Some(robust), Some(nominal))
    } else {
        (None, None)
    };
    let lossless = if bound == 0 {
        let cfg = SimConfig { loss: LossSpec::Script(vec![true]), ..base.clone() };
        let r = Run::execute("robust_lossless".into(), cfg.clone())?;
        let n = Run::execute("nominal_lossless".into(), SimConfig { nominal: true, ..cfg })?;
        Some((r, n))
    } else {
        None
    };
    let sweep = (0..opts.seed_sweep as u64)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = SimConfig {
                loss: LossSpec::Random { prob: opts.sweep_loss_prob },
                seed,
                steps: opts.sweep_steps,
                ..base.clone()
            };
            cfg.mpc.solver = opts.sweep_solver.clone();
            Run::execute(format!("sweep_seed{seed}"), cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rep = Reproduction { experiment, certified, synth_time, robust, nominal, lossless, sweep, criteria: Vec::new() };
    rep.criteria = evaluate(&rep);
    Ok(rep)
}

fn criterion(id: &'static str, pass: Option<bool>, detail: String) -> Criterion {
    Criterion { id, pass, detail }
}

fn evaluate(rep: &Reproduction) -> Vec<Criterion> {
    let mut out = Vec::new();
    let c = &rep.certified;
    let (worst_p, worst_eig) = c.qmi.worst();
    out.push(criterion(
        "certification",
        Some(c.pass() && c.qmi.per_p.len() == rep.experiment.mpc.loss_bound + 1 && rep.synth_time.as_secs_f64() < 30.0),
        format!(
            "qmi worst max_eig={worst_eig:.3e} (p={worst_p}), decrease worst_margin={:.3e} on {} samples, {:.2}s",
            c.decrease.worst_margin,
            c.decrease.samples,
            rep.synth_time.as_secs_f64()
        ),
    ));

    let skipped = || format!("scripted channel exceeds P={}", rep.experiment.mpc.loss_bound);
    match &rep.robust {
        Some(r) => {
            let tail = r.result.max_norm_from(60);
            let beta_ok = r.invariants.checks.iter().any(|c| c.name == "bucket_range" && c.pass);
            let secs = r.elapsed.as_secs_f64();
            out.push(criterion(
                "robust_convergence",
                Some(tail <= 1e-2 && beta_ok && !r.result.diverged && secs < 600.0),
                format!("max |x|_inf for t>=60 = {tail:.3e}, beta in [0,b]: {beta_ok}, {secs:.1}s"),
            ));
        }
        None => out.push(criterion("robust_convergence", None, skipped())),
    }
    match &rep.nominal {
        Some(n) => {
            let at30 = n.result.records.iter().find(|r| r.t == 30).map(|r| r.x[0].abs());
            let pass = match at30 {
                Some(v) => v > 1e2,
                None => n.result.diverged,
            };
            let shown = at30.map_or_else(|| "beyond the blow-up bound".to_string(), |v| format!("{v:.3e}"));
            out.push(criterion("nominal_divergence", Some(pass), format!("|x_1(30)| = {shown}")));
        }
        None => out.push(criterion("nominal_divergence", None, skipped())),
    }
    match &rep.robust {
        Some(r) => {
            let tail = sampling_interval_summary(&r.result.records).tail;
            let m = rep.experiment.bucket.base_period();
            out.push(criterion(
                "periodic_tail",
                Some(tail.len() == 5 && tail.iter().all(|&d| d == m)),
                format!("last intervals {tail:?}, M={m}"),
            ));
        }
        None => out.push(criterion("periodic_tail", None, skipped())),
    }
    if rep.sweep.is_empty() {
        out.push(criterion("feasibility_sweep", None, "no seed sweep requested".into()));
    } else {
        let bad: Vec<String> = rep
            .sweep
            .iter()
            .filter(|s| s.result.infeasible_count() > 0 || !s.invariants.pass())
            .map(|s| {
                let failed: Vec<&str> = s.invariants.failed().iter().map(|c| c.name).collect();
                format!("{}: {}", s.name, failed.join("+"))
            })
            .collect();
        let instants: usize = rep.sweep.iter().map(|s| s.result.diagnostics.len()).sum();
        let fallbacks: usize = rep.sweep.iter().map(|s| s.result.fallback_count()).sum();
        out.push(criterion(
            "feasibility_sweep",
            Some(bad.is_empty()),
            if bad.is_empty() {
                format!("{} runs, {instants} instants feasible ({fallbacks} via the shifted candidate)", rep.sweep.len())
            } else {
                format!("failing runs: {}", bad.join(", "))
            },
        ));
    }
    let certified_runs: Vec<&Run> = rep.robust.iter().chain(rep.sweep.iter()).collect();
    if certified_runs.is_empty() {
        out.push(criterion("certified_decrease", None, skipped()));
    } else {
        let worst = certified_runs
            .iter()
            .filter_map(|r| r.result.min_decrease_margin().map(|m| (m, r.name.as_str())))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let pass = worst.is_none_or(|(m, _)| m >= -DECREASE_SLACK);
        let detail = match worst {
            Some((m, name)) => format!("min margin {m:.3e} ({name}) over {} runs", certified_runs.len()),
            None => "no consecutive instants".into(),
        };
        out.push(criterion("certified_decrease", Some(pass), detail));
    }
    if let Some((r, n)) = &rep.lossless {
        let same = r.result.records == n.result.records;
        out.push(criterion(
            "p0_nominal_identity",
            Some(same),
            format!("robust and nominal traces on a loss-free channel identical: {same}"),
        ));
    }
    out
}

fn write_run(dir: &Path, run: &Run) -> Result<()> {
    let csv = format!("{}.csv", run.name);
    write_trace_csv(&run.result, BufWriter::new(File::create(dir.join(&csv))?))?;
    write_diagnostics_csv(&run.result, BufWriter::new(File::create(dir.join(format!("{}_diagnostics.csv", run.name)))?))?;
    let title = format!("{} ({})", run.name, run.config.loss);
    fs::write(dir.join(format!("{}.gp", run.name)), plot_script(&csv, run.config.plant.n(), &title))?;
    Ok(())
}

/// Writes traces, diagnostics, plot scripts, the ingredients and
/// `summary.txt` into `dir`.
pub fn write_artifacts(rep: &Reproduction, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ingredients.cfg"), format_certified(&rep.certified))?;
    let mut runs: Vec<&Run> = rep.robust.iter().chain(rep.nominal.iter()).collect();
    if let Some((r, n)) = &rep.lossless {
        runs.push(r);
        runs.push(n);
    }
    for run in &runs {
        write_run(dir, run)?;
    }
    if !rep.sweep.is_empty() {
        let sub = dir.join("sweep");
        fs::create_dir_all(&sub)?;
        for run in &rep.sweep {
            write_run(&sub, run)?;
        }
    }
    fs::write(dir.join("summary.txt"), summary_text(rep))?;
    Ok(())
}

pub fn summary_text(rep: &Reproduction) -> String {
    let mut s = String::new();
    for c in &rep.criteria {
        s.push_str(&format!("{c}\n"));
    }
    s.push_str(&format!("overall={}\n", pass_fail(rep.pass())));
    let mut section = |run: &Run| {
        s.push_str(&format!("\n[{}]\nloss={}\nruntime_s={:.3}\n", run.name, run.config.loss, run.elapsed.as_secs_f64()));
        s.push_str(&run.result.summary().to_string());
        let iv = sampling_interval_summary(&run.result.records);
        s.push_str(&format!("\ninterval_histogram={:?}\ninterval_tail={:?}\n", iv.histogram, iv.tail));
        s.push_str(&format!("invariants={}\n", pass_fail(run.invariants.pass())));
        for f in run.invariants.failed() {
            s.push_str(&format!("invariant_failed={} {}\n", f.name, f.detail));
        }
    };
    for run in rep.robust.iter().chain(rep.nominal.iter()) {
        section(run);
    }
    if let Some((r, n)) = &rep.lossless {
        section(r);
        section(n);
    }
    for run in &rep.sweep {
        section(run);
    }
    s
}
