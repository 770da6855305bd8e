//! Closed-loop simulation of plant, zero-order-hold actuator, token bucket,
//! lossy channel and controller, with trace logging and runtime checks.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{self, Write};

use nalgebra::DVector;

use crate::controller::{CandidateCheck, Controller, MpcConfig, Provenance};
use crate::error::{Error, Result};
use crate::lifted::{OverallState, PlantModel};
use crate::linalg::{inf_norm, quad_form};
use crate::network::{bucket_step, longest_loss_run, LossContext, LossModel, TokenBucketSpec};
use crate::terminal::TerminalIngredients;

/// Divergence threshold on `|x|_inf`.
pub const BLOW_UP: f64 = 1e6;
/// Slack allowed on the certified decrease.
pub const DECREASE_SLACK: f64 = 1e-6;

/// Loss process description; cloneable so a configuration can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Replayed cyclically.
    Script(Vec<bool>),
    /// Independent losses with probability `prob`, at most `P` in a row.
    Random { prob: f64 },
    /// Follows the first bit of the controller's worst-case sequence.
    Adversarial,
}

impl LossSpec {
    pub fn build(&self, bound: usize, seed: u64) -> Result<LossModel> {
        match self {
            Self::Script(bits) => LossModel::scripted(bits.clone()),
            Self::Random { prob } => LossModel::bounded_random(seed, bound, *prob),
            Self::Adversarial => Ok(LossModel::adversarial(bound)),
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Script(bits) => {
                f.write_str("script:")?;
                for &b in bits {
                    f.write_str(if b { "1" } else { "0" })?;
                }
                Ok(())
            }
            Self::Random { prob } => write!(f, "random:{prob}"),
            Self::Adversarial => f.write_str("adversarial"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub plant: PlantModel,
    pub bucket: TokenBucketSpec,
    pub mpc: MpcConfig,
    pub terminal: TerminalIngredients,
    pub loss: LossSpec,
    pub x0: DVector<f64>,
    pub w0: DVector<f64>,
    pub beta0: i64,
    /// Number of simulated time steps `T`.
    pub steps: usize,
    pub seed: u64,
    /// Plan for a loss-free channel while the channel still drops packets.
    pub nominal: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("simulation horizon T must be at least 1".into()));
        }
        if !self.bucket.contains(self.beta0) {
            return Err(Error::Config(format!("beta0={} outside [0, {}]", self.beta0, self.bucket.b)));
        }
        if self.x0.len() != self.plant.n() || self.w0.len() != self.plant.m() {
            return Err(Error::Dimension(format!(
                "initial state has sizes ({}, {}), plant needs ({}, {})",
                self.x0.len(),
                self.w0.len(),
                self.plant.n(),
                self.plant.m()
            )));
        }
        self.mpc.validate(&self.plant, &self.bucket)
    }
}

/// Fields logged at sampling instants.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub k: usize,
    pub delta: usize,
    pub v: DVector<f64>,
    pub sigma: bool,
    pub ack: bool,
    pub r: usize,
    pub worst_value: f64,
    /// `None` when the nominal controller had no feasible solution and the
    /// actuator kept its input.
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub beta: i64,
    pub event: Option<Event>,
}

/// Solver record per sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub k: usize,
    pub t_k: usize,
    pub r: usize,
    pub admissible_size: usize,
    pub words_explored: usize,
    pub provenance: Option<Provenance>,
    pub worst_value: f64,
    /// `x(t_k)' Q x(t_k)`.
    pub stage: f64,
    pub candidate: Option<CandidateCheck>,
    /// `V*(t_k) - V*(t_{k+1}) - x(t_k)'Qx(t_k)`, known once the next instant is solved.
    pub decrease_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub records: Vec<TraceRecord>,
    pub diagnostics: Vec<Diagnostics>,
    pub diverged: bool,
    pub nominal: bool,
    pub loss_bound: usize,
}

impl SimResult {
    pub fn events(&self) -> impl Iterator<Item = (&TraceRecord, &Event)> {
        self.records.iter().filter_map(|r| r.event.as_ref().map(|e| (r, e)))
    }

    /// `max |x(t)|_inf` over recorded `t >= from`.
    pub fn max_norm_from(&self, from: usize) -> f64 {
        self.records.iter().filter(|r| r.t >= from).map(|r| inf_norm(&r.x)).fold(0.0, f64::max)
    }

    /// First time after which `|x|_inf` stays at or below `threshold`.
    pub fn time_to_threshold(&self, threshold: f64) -> Option<usize> {
        let last_above = self.records.iter().rposition(|r| inf_norm(&r.x) > threshold);
        match last_above {
            None => self.records.first().map(|r| r.t),
            Some(i) => self.records.get(i + 1).map(|r| r.t),
        }
    }

    pub fn decrease_margins(&self) -> Vec<f64> {
        self.diagnostics.iter().filter_map(|d| d.decrease_margin).collect()
    }

    pub fn min_decrease_margin(&self) -> Option<f64> {
        self.diagnostics.iter().filter_map(|d| d.decrease_margin).reduce(f64::min)
    }

    pub fn fallback_count(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.provenance == Some(Provenance::FallbackCandidate)).count()
    }

    pub fn infeasible_count(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.provenance.is_none()).count()
    }

    pub fn sigma_word(&self) -> Vec<bool> {
        self.events().map(|(_, e)| e.sigma).collect()
    }

    pub fn summary(&self) -> Summary {
        let candidates: Vec<&CandidateCheck> = self.diagnostics.iter().filter_map(|d| d.candidate.as_ref()).collect();
        let sigma = self.sigma_word();
        Summary {
            mode: if self.nominal { "nominal" } else { "robust" },
            steps: self.records.len(),
            instants: self.diagnostics.len(),
            successes: sigma.iter().filter(|&&s| s).count(),
            losses: sigma.iter().filter(|&&s| !s).count(),
            longest_loss_run: longest_loss_run(&sigma),
            fallback_adoptions: self.fallback_count(),
            infeasible_instants: self.infeasible_count(),
            candidate_infeasible: candidates.iter().filter(|c| !c.feasible).count(),
            tree_mismatches: candidates.iter().filter(|c| c.tree_match == Some(false)).count(),
            min_decrease_margin: self.min_decrease_margin(),
            max_norm_tail: self.max_norm_from(60),
            final_norm: self.records.last().map_or(0.0, |r| inf_norm(&r.x)),
            time_to_1e_2: self.time_to_threshold(1e-2),
            beta_min: self.records.iter().map(|r| r.beta).min().unwrap_or(0),
            beta_max: self.records.iter().map(|r| r.beta).max().unwrap_or(0),
            diverged: self.diverged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mode: &'static str,
    pub steps: usize,
    pub instants: usize,
    pub successes: usize,
    pub losses: usize,
    pub longest_loss_run: usize,
    pub fallback_adoptions: usize,
    pub infeasible_instants: usize,
    pub candidate_infeasible: usize,
    pub tree_mismatches: usize,
    pub min_decrease_margin: Option<f64>,
    /// `max |x(t)|_inf` for `t >= 60`.
    pub max_norm_tail: f64,
    pub final_norm: f64,
    pub time_to_1e_2: Option<usize>,
    pub beta_min: i64,
    pub beta_max: i64,
    pub diverged: bool,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        writeln!(f, "mode={}", self.mode)?;
        writeln!(f, "steps={}", self.steps)?;
        writeln!(f, "instants={}", self.instants)?;
        writeln!(f, "successes={}", self.successes)?;
        writeln!(f, "losses={}", self.losses)?;
        writeln!(f, "longest_loss_run={}", self.longest_loss_run)?;
        writeln!(f, "fallback_adoptions={}", self.fallback_adoptions)?;
        writeln!(f, "infeasible_instants={}", self.infeasible_instants)?;
        writeln!(f, "candidate_infeasible={}", self.candidate_infeasible)?;
        writeln!(f, "tree_mismatches={}", self.tree_mismatches)?;
        writeln!(f, "min_decrease_margin={}", opt(self.min_decrease_margin.map(|v| format!("{v:e}"))))?;
        writeln!(f, "max_norm_t_ge_60={:e}", self.max_norm_tail)?;
        writeln!(f, "final_norm={:e}", self.final_norm)?;
        writeln!(f, "time_to_1e-2={}", opt(self.time_to_1e_2.map(|v| v.to_string())))?;
        writeln!(f, "beta_min={}", self.beta_min)?;
        writeln!(f, "beta_max={}", self.beta_max)?;
        write!(f, "diverged={}", self.diverged)
    }
}

/// Runs the closed loop with the loss process described in `config`.
pub fn run(config: &SimConfig) -> Result<SimResult> {
    let model = config.loss.build(config.mpc.loss_bound, config.seed)?;
    run_with(config, model)
}

/// Runs the closed loop with an explicit loss process.
///
/// Each sampling instant: take the acknowledgement of the previous packet,
/// solve, transmit through the channel, then hold the applied input until
/// the next instant.
pub fn run_with(config: &SimConfig, mut loss: LossModel) -> Result<SimResult> {
    config.validate()?;
    let plant = &config.plant;
    let mut controller = if config.nominal {
        Controller::nominal(plant.clone(), config.bucket, config.mpc.clone(), config.terminal.clone())?
    } else {
        Controller::new(plant.clone(), config.bucket, config.mpc.clone(), config.terminal.clone())?
    };
    let mut records = Vec::with_capacity(config.steps);
    let mut diagnostics: Vec<Diagnostics> = Vec::new();
    let mut xi = OverallState::new(config.x0.clone(), config.w0.clone(), config.beta0);
    let mut t = 0;
    let mut k = 0;
    let mut last_sigma: Option<bool> = None;
    let mut diverged = false;

    while t < config.steps {
        let ack = last_sigma.unwrap_or(true);
        let stage = quad_form(plant.q(), &xi.x);
        let (v, delta, report) = match controller.control_step(&xi, ack) {
            Ok(rep) => (rep.packet.v.clone(), rep.packet.delta, Some(rep)),
            Err(Error::Infeasible(msg)) if config.nominal => {
                log::warn!("nominal controller infeasible at t={t}: {msg}; holding the input");
                (xi.w.clone(), 1, None)
            }
            Err(Error::Infeasible(msg)) if k == 0 => {
                return Err(Error::Infeasible(format!("at the initial state: {msg}")));
            }
            Err(e) => return Err(e),
        };
        let transmitting = report.is_some();
        let sigma = match &report {
            Some(rep) => loss.next(&LossContext {
                k,
                t,
                state: &xi,
                counter: controller.counter(),
                worst_sequence: Some(&rep.solution.worst_sequence),
            }),
            None => false,
        };
        let worst_value = report.as_ref().map_or(f64::NAN, |r| r.solution.worst_value);
        if let (Some(prev), Some(rep)) = (diagnostics.last_mut(), &report) {
            if prev.provenance.is_some() {
                prev.decrease_margin = Some(prev.worst_value - rep.solution.worst_value - prev.stage);
            }
        }
        diagnostics.push(Diagnostics {
            k,
            t_k: t,
            r: controller.counter(),
            admissible_size: report.as_ref().map_or(0, |r| r.admissible_size),
            words_explored: report.as_ref().map_or(0, |r| r.solution.words_explored),
            provenance: report.as_ref().map(|r| r.solution.provenance),
            worst_value,
            stage,
            candidate: report.as_ref().and_then(|r| r.candidate.clone()),
            decrease_margin: None,
        });
        let event = Event {
            k,
            delta,
            v: v.clone(),
            sigma,
            ack,
            r: controller.counter(),
            worst_value,
            provenance: report.as_ref().map(|r| r.solution.provenance),
        };
        let u = if sigma { v } else { xi.w.clone() };
        let mut x = xi.x.clone();
        let mut beta = xi.beta;
        let mut event = Some(event);
        for j in 0..delta {
            if t + j >= config.steps {
                break;
            }
            records.push(TraceRecord { t: t + j, x: x.clone(), u: u.clone(), beta, event: event.take() });
            x = plant.step(&x, &u);
            beta = bucket_step(beta, transmitting && j == 0, &config.bucket);
        }
        t += delta;
        k += 1;
        if transmitting {
            last_sigma = Some(sigma);
        }
        xi = OverallState::new(x, u, beta);
        if !xi.x.iter().all(|v| v.is_finite()) || inf_norm(&xi.x) > BLOW_UP {
            diverged = true;
            break;
        }
    }
    Ok(SimResult { records, diagnostics, diverged, nominal: config.nominal, loss_bound: config.mpc.loss_bound })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    pub checks: Vec<Check>,
}

impl InvariantReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}{}", if c.pass { "PASS" } else { "FAIL" }, c.name, if c.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", c.detail)
            })?;
        }
        Ok(())
    }
}

fn first_failure<I: Iterator<Item = (usize, bool)>>(items: I) -> Option<usize> {
    items.filter(|(_, ok)| !ok).map(|(t, _)| t).next()
}

/// Checks a robust-mode trace against the closed-loop guarantees.
pub fn assert_runtime_invariants(result: &SimResult, config: &SimConfig) -> InvariantReport {
    let recs = &result.records;
    let mpc = &config.mpc;
    let spec = &config.bucket;
    let mut checks = Vec::new();
    let mut push = |name: &'static str, failure: Option<String>| {
        checks.push(Check { name, pass: failure.is_none(), detail: failure.unwrap_or_default() });
    };

    push(
        "state",
        first_failure(recs.iter().map(|r| (r.t, mpc.state_set.contains(&r.x)))).map(|t| format!("x(t) outside X at t={t}")),
    );
    push(
        "input",
        first_failure(recs.iter().map(|r| (r.t, mpc.input_set.contains(&r.u)))).map(|t| format!("u(t) outside U at t={t}")),
    );
    push(
        "bucket_range",
        first_failure(recs.iter().map(|r| (r.t, spec.contains(r.beta)))).map(|t| format!("beta outside [0, {}] at t={t}", spec.b)),
    );
    push(
        "bucket_recursion",
        first_failure(recs.windows(2).map(|w| {
            let transmitting = w[0].event.as_ref().is_some_and(|e| e.provenance.is_some());
            (w[1].t, w[1].beta == bucket_step(w[0].beta, transmitting, spec))
        }))
        .map(|t| format!("beta does not follow the bucket recursion at t={t}")),
    );
    push(
        "zero_order_hold",
        first_failure(recs.windows(2).map(|w| (w[1].t, w[1].event.is_some() || w[1].u == w[0].u)))
            .map(|t| format!("input changed between sampling instants at t={t}")),
    );
    push(
        "packet",
        first_failure(result.events().map(|(r, e)| {
            (r.t, (1..=mpc.delta_max).contains(&e.delta) && mpc.input_set.contains(&e.v))
        }))
        .map(|t| format!("packet outside U x [1, delta_max] at t={t}")),
    );
    let events: Vec<(&TraceRecord, &Event)> = result.events().collect();
    push(
        "ack",
        first_failure(events.windows(2).map(|w| (w[1].0.t, w[1].1.ack == w[0].1.sigma)))
            .map(|t| format!("ACK does not echo the previous outcome at t={t}")),
    );
    let sigma: Vec<bool> = events.iter().map(|(_, e)| e.sigma).collect();
    let run = longest_loss_run(&sigma);
    push(
        "loss_bound",
        (run > result.loss_bound).then(|| format!("{run} consecutive losses exceed P={}", result.loss_bound)),
    );
    let mut covered = 0;
    for (_, e) in &events {
        covered += e.delta;
    }
    let spans = events.first().is_none_or(|(r, _)| r.t == 0)
        && events.windows(2).all(|w| w[1].0.t == w[0].0.t + w[0].1.delta)
        && (result.diverged || covered >= recs.len());
    push("interval_cover", (!spans).then(|| format!("intervals cover {covered} of {} steps", recs.len())));
    push(
        "feasible",
        result
            .diagnostics
            .iter()
            .find(|d| d.provenance.is_none())
            .map(|d| format!("no feasible solution at k={}", d.k)),
    );
    push(
        "decrease",
        result
            .diagnostics
            .iter()
            .find(|d| d.decrease_margin.is_some_and(|m| m < -DECREASE_SLACK))
            .map(|d| format!("decrease margin {:e} at k={}", d.decrease_margin.unwrap_or(0.0), d.k)),
    );
    push(
        "candidate",
        result
            .diagnostics
            .iter()
            .find(|d| d.candidate.as_ref().is_some_and(|c| !c.feasible))
            .map(|d| format!("shifted candidate infeasible at k={}", d.k)),
    );
    push(
        "scenario_tree",
        result
            .diagnostics
            .iter()
            .find(|d| d.candidate.as_ref().is_some_and(|c| c.tree_match == Some(false)))
            .map(|d| format!("candidate scenarios do not continue the previous tree at k={}", d.k)),
    );
    push("bounded", result.diverged.then(|| "state exceeded the blow-up bound".to_string()));
    InvariantReport { checks }
}

/// Sampling pattern of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntervalSummary {
    /// `(t_k, delta, sigma)` per sampling instant.
    pub instants: Vec<(usize, usize, bool)>,
    pub histogram: BTreeMap<usize, usize>,
    /// Last (up to) five chosen intervals.
    pub tail: Vec<usize>,
}

pub fn sampling_interval_summary(records: &[TraceRecord]) -> IntervalSummary {
    let instants: Vec<(usize, usize, bool)> =
        records.iter().filter_map(|r| r.event.as_ref().map(|e| (r.t, e.delta, e.sigma))).collect();
    let mut histogram = BTreeMap::new();
    for &(_, d, _) in &instants {
        *histogram.entry(d).or_insert(0) += 1;
    }
    let tail = instants.iter().rev().take(5).rev().map(|&(_, d, _)| d).collect();
    IntervalSummary { instants, histogram, tail }
}

fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

/// Trace CSV: `t,k,x_1..x_n,u_1..u_m,beta,delta,sigma,ack,r,worst_value,provenance`;
/// event columns are empty between sampling instants.
pub fn write_trace_csv<W: Write>(result: &SimResult, mut out: W) -> io::Result<()> {
    let (n, m) = result.records.first().map_or((0, 0), |r| (r.x.len(), r.u.len()));
    let mut header = String::from("t,k");
    for i in 1..=n {
        write!(header, ",x_{i}").unwrap();
    }
    for i in 1..=m {
        write!(header, ",u_{i}").unwrap();
    }
    header.push_str(",beta,delta,sigma,ack,r,worst_value,provenance");
    writeln!(out, "{header}")?;
    for rec in &result.records {
        let mut line = rec.t.to_string();
        line.push(',');
        if let Some(e) = &rec.event {
            line.push_str(&e.k.to_string());
        }
        for v in rec.x.iter().chain(rec.u.iter()) {
            line.push(',');
            line.push_str(&fmt_num(*v));
        }
        write!(line, ",{}", rec.beta).unwrap();
        match &rec.event {
            Some(e) => write!(
                line,
                ",{},{},{},{},{},{}",
                e.delta,
                e.sigma as u8,
                e.ack as u8,
                e.r,
                fmt_num(e.worst_value),
                e.provenance.map_or_else(|| "infeasible".to_string(), |p| p.to_string())
            )
            .unwrap(),
            None => line.push_str(",,,,,,"),
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Diagnostics CSV: `k,t_k,r,admissible,words_explored,provenance,worst_value,decrease_margin`.
pub fn write_diagnostics_csv<W: Write>(result: &SimResult, mut out: W) -> io::Result<()> {
    writeln!(out, "k,t_k,r,admissible,words_explored,provenance,worst_value,decrease_margin")?;
    for d in &result.diagnostics {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            d.k,
            d.t_k,
            d.r,
            d.admissible_size,
            d.words_explored,
            d.provenance.map_or_else(|| "infeasible".to_string(), |p| p.to_string()),
            fmt_num(d.worst_value),
            d.decrease_margin.map(fmt_num).unwrap_or_default()
        )?;
    }
    Ok(())
}

/// Gnuplot script drawing the state components against time and a stem plot
/// of the chosen intervals (filled: delivered, open: lost) from a trace CSV.
pub fn plot_script(csv_name: &str, n: usize, title: &str) -> String {
    let mut s = String::new();
    writeln!(s, "# gnuplot -p <this file>").unwrap();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set key autotitle columnhead").unwrap();
    writeln!(s, "set multiplot layout 2,1 title '{title}'").unwrap();
    writeln!(s, "set xlabel 't'").unwrap();
    writeln!(s, "set ylabel 'x'").unwrap();
    let curves: Vec<String> =
        (1..=n).map(|i| format!("'{csv_name}' using 1:{} with lines title 'x_{i}'", 2 + i)).collect();
    writeln!(s, "plot {}", curves.join(", \\\n     ")).unwrap();
    writeln!(s, "set ylabel 'interval'").unwrap();
    writeln!(s, "set yrange [0:*]").unwrap();
    writeln!(s, "plot '{csv_name}' using 1:(column('sigma') == 1 ? column('delta') : 1/0) with impulses lc rgb 'black' title 'delivered', \\").unwrap();
    writeln!(s, "     '' using 1:(column('sigma') == 1 ? column('delta') : 1/0) with points pt 7 lc rgb 'black' notitle, \\").unwrap();
    writeln!(s, "     '' using 1:(column('sigma') == 0 ? column('delta') : 1/0) with impulses lc rgb 'red' title 'lost', \\").unwrap();
    writeln!(s, "     '' using 1:(column('sigma') == 0 ? column('delta') : 1/0) with points pt 6 lc rgb 'red' notitle").unwrap();
    writeln!(s, "unset multiplot").unwrap();
    s
}
