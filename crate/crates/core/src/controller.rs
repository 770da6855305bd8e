//! Self-triggered min-max MPC: the worst-case objective of a feedback policy
//! over an admissible loss set, the search over interval words and gains, the
//! shifted candidate policy, and the receding-horizon controller.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::lifted::{interval_cost, ncs_step, ControlPacket, LiftTable, OverallState, PlantModel};
use crate::network::{update_counter, AdmissibleCache, AdmissibleSet, LossHistory, LossSequence, TokenBucketSpec};
use crate::optimize::{descend, riccati_gains};
use crate::scenario::{forward, worst_unconstrained, ScenarioTree, Scratch};
use crate::terminal::TerminalIngredients;

/// Knobs of the outer search.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Interval words given a short screening descent after proxy scoring.
    pub screen: usize,
    /// BFGS iterations of the screening descent.
    pub screen_iterations: usize,
    /// Screened words refined by the full gain descent.
    pub shortlist: usize,
    /// Relative log-sum-exp temperatures, one descent stage each.
    pub temperatures: Vec<f64>,
    /// BFGS iterations per stage.
    pub max_iterations: usize,
    pub penalty_weight: f64,
    pub penalty_growth: f64,
    /// Enumerate all interval words while `delta_max^N` stays below this.
    pub word_budget: usize,
    pub beam_width: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            screen: 64,
            screen_iterations: 15,
            shortlist: 8,
            temperatures: vec![10.0, 100.0, 1e3, 1e4],
            max_iterations: 60,
            penalty_weight: 1e3,
            penalty_growth: 10.0,
            word_budget: 20_000,
            beam_width: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Free-control horizon `N`.
    pub horizon: usize,
    /// Consecutive-loss bound `P`.
    pub loss_bound: usize,
    /// Longest sampling interval.
    pub delta_max: usize,
    pub state_set: ConstraintSet,
    pub input_set: ConstraintSet,
    pub solver: SolverOptions,
}

impl MpcConfig {
    pub fn new(horizon: usize, loss_bound: usize, delta_max: usize) -> Self {
        Self {
            horizon,
            loss_bound,
            delta_max,
            state_set: ConstraintSet::Unconstrained,
            input_set: ConstraintSet::Unconstrained,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self, plant: &PlantModel, spec: &TokenBucketSpec) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon N must be at least 1".into()));
        }
        if self.delta_max < spec.base_period() {
            return Err(Error::InvalidParameter(format!(
                "delta_max={} is below the base period M={}",
                self.delta_max,
                spec.base_period()
            )));
        }
        for (name, set, dim) in [("state", &self.state_set, plant.n()), ("input", &self.input_set, plant.m())] {
            if let Some(d) = set.dim() {
                if d != dim {
                    return Err(Error::Dimension(format!("{name} constraints act on {d} components, expected {dim}")));
                }
            }
        }
        Ok(())
    }
}

/// `N` gains and sampling intervals; element `i` sends `K(i) x(i)` and waits `Δ(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub gains: Vec<DMatrix<f64>>,
    pub intervals: Vec<usize>,
}

impl FeedbackPolicy {
    pub fn new(gains: Vec<DMatrix<f64>>, intervals: Vec<usize>) -> Result<Self> {
        if gains.len() != intervals.len() || gains.is_empty() {
            return Err(Error::Dimension(format!(
                "policy has {} gains and {} intervals",
                gains.len(),
                intervals.len()
            )));
        }
        if intervals.contains(&0) {
            return Err(Error::InvalidParameter("sampling intervals must be at least 1".into()));
        }
        Ok(Self { gains, intervals })
    }

    pub fn horizon(&self) -> usize {
        self.intervals.len()
    }

    pub fn first_packet(&self, x: &DVector<f64>) -> ControlPacket {
        ControlPacket { v: &self.gains[0] * x, delta: self.intervals[0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Optimized,
    FallbackCandidate,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Optimized => "optimized",
            Self::FallbackCandidate => "fallback-candidate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    State,
    Input,
    /// Control update `K(i) x(i)` outside `U`.
    Update,
    Bucket,
    Interval,
    TerminalState,
    TerminalBucket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub instant: usize,
    /// Steps after the instant (inter-sample checks), `0` at the instant itself.
    pub step: usize,
    pub kind: ViolationKind,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub value: f64,
    /// Predicted overall states at instants `0..=N+P`.
    pub trajectory: Vec<OverallState>,
    pub violations: Vec<Violation>,
}

impl PolicyEvaluation {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub sequence: LossSequence,
    pub value: f64,
    pub trajectory: Vec<OverallState>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub policy: FeedbackPolicy,
    pub worst_value: f64,
    pub worst_sequence: LossSequence,
    pub worst_index: usize,
    /// One entry per admissible sequence, in set order.
    pub scenarios: Vec<ScenarioOutcome>,
    pub feasible: bool,
    pub provenance: Provenance,
    pub counter: usize,
    pub words_explored: usize,
}

/// Everything a policy evaluation needs besides the policy and the state.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub plant: &'a PlantModel,
    pub bucket: &'a TokenBucketSpec,
    pub terminal: &'a TerminalIngredients,
    pub config: &'a MpcConfig,
    pub lifts: &'a LiftTable,
}

/// Lift table covering every interval the controller can use.
pub fn lift_table(plant: &PlantModel, config: &MpcConfig, terminal: &TerminalIngredients) -> Result<LiftTable> {
    LiftTable::new(plant, config.delta_max.max(terminal.period))
}

fn check_state(
    xi: &OverallState,
    instant: usize,
    step: usize,
    p: &Problem<'_>,
    out: &mut Vec<Violation>,
) {
    let res = p.config.state_set.residual(&xi.x);
    if !p.config.state_set.contains(&xi.x) {
        out.push(Violation { instant, step, kind: ViolationKind::State, residual: res });
    }
    if !p.config.input_set.contains(&xi.w) {
        out.push(Violation { instant, step, kind: ViolationKind::Input, residual: p.config.input_set.residual(&xi.w) });
    }
    if !p.bucket.contains(xi.beta) {
        out.push(Violation { instant, step, kind: ViolationKind::Bucket, residual: -xi.beta as f64 });
    }
}

fn check_terminal(xi: &OverallState, instant: usize, p: &Problem<'_>, out: &mut Vec<Violation>) {
    if !p.terminal.terminal_set.contains(&xi.x) {
        out.push(Violation {
            instant,
            step: 0,
            kind: ViolationKind::TerminalState,
            residual: p.terminal.terminal_set.residual(&xi.x),
        });
    }
    if !p.config.input_set.contains(&xi.w) {
        out.push(Violation {
            instant,
            step: 0,
            kind: ViolationKind::Input,
            residual: p.config.input_set.residual(&xi.w),
        });
    }
    if !(p.bucket.c - p.bucket.g..=p.bucket.b).contains(&xi.beta) {
        out.push(Violation {
            instant,
            step: 0,
            kind: ViolationKind::TerminalBucket,
            residual: (p.bucket.c - p.bucket.g - xi.beta) as f64,
        });
    }
}

/// Rolls the policy along one loss sequence by explicit step sums: the
/// policy for the first `N` instants, the terminal law for the next `P`,
/// then the terminal cost. Constraint violations are reported, not raised.
pub fn evaluate_policy(
    policy: &FeedbackPolicy,
    xi0: &OverallState,
    sequence: &LossSequence,
    p: &Problem<'_>,
) -> PolicyEvaluation {
    let horizon = policy.horizon();
    let total = sequence.len();
    let mut violations = Vec::new();
    let mut trajectory = Vec::with_capacity(total + 1);
    let mut value = 0.0;
    let mut xi = xi0.clone();
    trajectory.push(xi.clone());
    for i in 0..total {
        let sigma = sequence.get(i);
        let packet = if i < horizon {
            let packet = ControlPacket { v: &policy.gains[i] * &xi.x, delta: policy.intervals[i] };
            check_state(&xi, i, 0, p, &mut violations);
            if !p.config.input_set.contains(&packet.v) {
                violations.push(Violation {
                    instant: i,
                    step: 0,
                    kind: ViolationKind::Update,
                    residual: p.config.input_set.residual(&packet.v),
                });
            }
            if !(1..=p.config.delta_max).contains(&packet.delta) {
                violations.push(Violation { instant: i, step: 0, kind: ViolationKind::Interval, residual: packet.delta as f64 });
            }
            for j in 1..packet.delta {
                check_state(&ncs_step(&xi, &packet.v, j, sigma, p.plant, p.bucket), i, j, p, &mut violations);
            }
            packet
        } else {
            check_terminal(&xi, i, p, &mut violations);
            p.terminal.law(&xi)
        };
        value += interval_cost(&xi, &packet, sigma, p.plant, p.bucket);
        xi = ncs_step(&xi, &packet.v, packet.delta, sigma, p.plant, p.bucket);
        trajectory.push(xi.clone());
    }
    if total >= horizon {
        check_terminal(&xi, total, p, &mut violations);
    }
    value += p.terminal.cost(&xi.x);
    PolicyEvaluation { value, trajectory, violations }
}

/// `a` beats `b` by more than a relative `1e-12`.
fn exceeds(a: f64, b: f64) -> bool {
    a > b + 1e-12 * a.abs().max(b.abs())
}

fn ties(a: f64, b: f64) -> bool {
    !exceeds(a, b) && !exceeds(b, a)
}

/// Worst objective over `set` and the index of the first sequence attaining it.
pub fn inner_max(policy: &FeedbackPolicy, xi0: &OverallState, set: &[LossSequence], p: &Problem<'_>) -> Result<(f64, usize)> {
    let sol = evaluate_all(policy, xi0, set, p, 0)?;
    Ok((sol.worst_value, sol.worst_index))
}

/// Evaluates the policy on every sequence of `set`.
pub fn evaluate_all(
    policy: &FeedbackPolicy,
    xi0: &OverallState,
    set: &[LossSequence],
    p: &Problem<'_>,
    counter: usize,
) -> Result<Solution> {
    if set.is_empty() {
        return Err(Error::InvalidParameter("admissible loss set is empty".into()));
    }
    let scenarios: Vec<ScenarioOutcome> = set
        .par_iter()
        .map(|seq| {
            let eval = evaluate_policy(policy, xi0, seq, p);
            ScenarioOutcome {
                sequence: seq.clone(),
                value: eval.value,
                feasible: eval.feasible(),
                trajectory: eval.trajectory,
            }
        })
        .collect();
    let mut worst_index = 0;
    for (i, s) in scenarios.iter().enumerate().skip(1) {
        if exceeds(s.value, scenarios[worst_index].value) {
            worst_index = i;
        }
    }
    Ok(Solution {
        policy: policy.clone(),
        worst_value: scenarios[worst_index].value,
        worst_sequence: scenarios[worst_index].sequence.clone(),
        worst_index,
        feasible: scenarios.iter().all(|s| s.feasible),
        scenarios,
        provenance: Provenance::Optimized,
        counter,
        words_explored: 0,
    })
}

/// Final bucket level after a (possibly partial) interval word, or `None` if
/// the level leaves `[0, b]` at an instant or between instants. A complete
/// word must also end in `[c - g, b]`.
pub fn bucket_after(beta0: i64, word: &[usize], horizon: usize, spec: &TokenBucketSpec) -> Option<i64> {
    if !spec.contains(beta0) {
        return None;
    }
    let mut beta = beta0;
    for &delta in word {
        if delta == 0 {
            return None;
        }
        // the level is lowest one step after the transmission
        if spec.level_after(beta, 1) < 0 {
            return None;
        }
        beta = spec.level_after(beta, delta);
        if beta < 0 {
            return None;
        }
    }
    if word.len() == horizon && beta < spec.c - spec.g {
        return None;
    }
    Some(beta)
}

/// All bucket-admissible interval words in lexicographic order, with
/// infeasible prefixes cut.
pub fn interval_words(beta0: i64, horizon: usize, delta_max: usize, spec: &TokenBucketSpec) -> Vec<Vec<usize>> {
    fn grow(
        prefix: &mut Vec<usize>,
        beta: i64,
        horizon: usize,
        delta_max: usize,
        spec: &TokenBucketSpec,
        out: &mut Vec<Vec<usize>>,
    ) {
        if prefix.len() == horizon {
            if beta >= spec.c - spec.g {
                out.push(prefix.clone());
            }
            return;
        }
        if spec.level_after(beta, 1) < 0 {
            return;
        }
        for delta in 1..=delta_max {
            let next = spec.level_after(beta, delta);
            if next < 0 {
                continue;
            }
            prefix.push(delta);
            grow(prefix, next, horizon, delta_max, spec, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if spec.contains(beta0) {
        grow(&mut Vec::with_capacity(horizon), beta0, horizon, delta_max, spec, &mut out);
    }
    out
}

/// Appendix policy for the next instant: the tail of the previous policy
/// followed by the terminal gain with the base period.
pub fn shifted_candidate(previous: &FeedbackPolicy, terminal: &TerminalIngredients) -> FeedbackPolicy {
    let mut gains: Vec<DMatrix<f64>> = previous.gains[1..].to_vec();
    let mut intervals: Vec<usize> = previous.intervals[1..].to_vec();
    gains.push(terminal.k_f.clone());
    intervals.push(terminal.period);
    FeedbackPolicy { gains, intervals }
}

#[derive(Debug, Clone)]
struct Scored {
    word: Vec<usize>,
    gains: Vec<DMatrix<f64>>,
    score: f64,
    residual: f64,
}

fn rank(a: &Scored, b: &Scored) -> Ordering {
    let tol = crate::constraints::MEMBERSHIP_TOL;
    let fa = a.residual <= tol;
    let fb = b.residual <= tol;
    fb.cmp(&fa)
        .then_with(|| {
            if ties(a.score, b.score) {
                Ordering::Equal
            } else {
                a.score.total_cmp(&b.score)
            }
        })
        .then_with(|| a.word[0].cmp(&b.word[0]))
        .then_with(|| a.word.cmp(&b.word))
}

/// Scores the word with the Riccati proxy gains and, if given, the hint
/// gains; keeps whichever is better.
fn score_word(tree: &ScenarioTree, p: &Problem<'_>, xi0: &OverallState, word: &[usize], hint: Option<&FeedbackPolicy>) -> Scored {
    let rho = p.config.solver.penalty_weight;
    let fast = !crate::scenario::is_constrained(p);
    let eval = |gains: &[DMatrix<f64>]| {
        if fast {
            SCRATCH.with(|s| (worst_unconstrained(tree, p, xi0, word, gains, &mut s.borrow_mut()), 0.0))
        } else {
            let pass = forward(tree, p, xi0, word, gains, rho);
            (pass.worst_penalized(), pass.max_residual)
        }
    };
    let proxy = riccati_gains(p, word);
    let (score, residual) = eval(&proxy);
    let mut best = Scored { word: word.to_vec(), score, residual, gains: proxy };
    if let Some(h) = hint {
        if h.horizon() == word.len() {
            let (score, residual) = eval(&h.gains);
            let cand = Scored { word: word.to_vec(), score, residual, gains: h.gains.clone() };
            if rank(&cand, &best) == Ordering::Less {
                best = cand;
            }
        }
    }
    best
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Scratch> = std::cell::RefCell::new(Scratch::default());
}

/// Beam search over interval words; each prefix is scored by completing it
/// with the base period.
fn beam_words(tree: &ScenarioTree, p: &Problem<'_>, xi0: &OverallState, hint: Option<&FeedbackPolicy>) -> (Vec<Scored>, usize) {
    let horizon = p.config.horizon;
    let period = p.terminal.period;
    let mut beam: Vec<Vec<usize>> = vec![Vec::new()];
    let mut explored = 0;
    let mut last = Vec::new();
    for depth in 0..horizon {
        let expanded: Vec<Vec<usize>> = beam
            .iter()
            .flat_map(|prefix| {
                (1..=p.config.delta_max).filter_map(move |delta| {
                    let mut word = prefix.clone();
                    word.push(delta);
                    let mut full = word.clone();
                    full.resize(horizon, period);
                    bucket_after(xi0.beta, &full, horizon, p.bucket).map(|_| word)
                })
            })
            .collect();
        explored += expanded.len();
        let mut scored: Vec<(Vec<usize>, Scored)> = expanded
            .par_iter()
            .map(|prefix| {
                let mut full = prefix.clone();
                full.resize(horizon, period);
                (prefix.clone(), score_word(tree, p, xi0, &full, hint))
            })
            .collect();
        scored.sort_by(|a, b| rank(&a.1, &b.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(p.config.solver.beam_width.max(1));
        beam = scored.iter().map(|(w, _)| w.clone()).collect();
        if depth + 1 == horizon {
            last = scored.into_iter().map(|(_, s)| s).collect();
        }
    }
    (last, explored)
}

/// Optimizes the gains for one fixed interval word and evaluates the result
/// exactly. Starts from the better of the Riccati proxy and `hint`.
pub fn solve_word(
    xi0: &OverallState,
    set: &AdmissibleSet,
    tree: &ScenarioTree,
    p: &Problem<'_>,
    word: &[usize],
    hint: Option<&FeedbackPolicy>,
) -> Result<Solution> {
    if word.len() != p.config.horizon {
        return Err(Error::Dimension(format!("interval word has length {}, horizon is {}", word.len(), p.config.horizon)));
    }
    let start = score_word(tree, p, xi0, word, hint);
    let d = descend(tree, p, xi0, word, start.gains, &p.config.solver);
    let policy = FeedbackPolicy { gains: d.gains, intervals: word.to_vec() };
    evaluate_all(&policy, xi0, &set.words, p, set.counter)
}

/// Solves the min-max problem at `xi0` with counter `r`.
///
/// Interval words are enumerated with bucket pruning (or beam-searched when
/// there are too many), scored with proxy gains, and the best few are refined
/// by smoothed worst-case gain descent. The winner is adjudicated by exact
/// evaluation over the whole admissible set.
pub fn outer_min(
    xi0: &OverallState,
    set: &AdmissibleSet,
    tree: &ScenarioTree,
    p: &Problem<'_>,
    hint: Option<&FeedbackPolicy>,
) -> Result<Solution> {
    let cfg = p.config;
    if set.is_empty() {
        return Err(Error::InvalidParameter("admissible loss set is empty".into()));
    }
    let horizon = cfg.horizon;
    let clock = std::time::Instant::now();
    let exhaustive = (cfg.delta_max as f64).powi(horizon as i32) <= cfg.solver.word_budget as f64;
    let (mut scored, explored) = if exhaustive {
        let words = interval_words(xi0.beta, horizon, cfg.delta_max, p.bucket);
        let n = words.len();
        (words.par_iter().map(|w| score_word(tree, p, xi0, w, hint)).collect::<Vec<_>>(), n)
    } else {
        beam_words(tree, p, xi0, hint)
    };
    if scored.is_empty() {
        return Err(Error::Infeasible(format!(
            "no interval word keeps the token bucket admissible from beta={}",
            xi0.beta
        )));
    }
    scored.sort_by(rank);
    log::debug!("scored {} words in {:?}", scored.len(), clock.elapsed());
    let screen_opts = SolverOptions {
        temperatures: vec![cfg.solver.temperatures.first().copied().unwrap_or(100.0)],
        max_iterations: cfg.solver.screen_iterations,
        ..cfg.solver.clone()
    };
    let screened = cfg.solver.screen.max(cfg.solver.shortlist).min(scored.len());
    let mut pool: Vec<Scored> = scored[..screened].to_vec();
    if let Some(h) = hint {
        if !pool.iter().any(|s| s.word == h.intervals) {
            if let Some(s) = scored.iter().find(|s| s.word == h.intervals) {
                pool.push(s.clone());
            }
        }
    }
    if screened > cfg.solver.shortlist && cfg.solver.screen_iterations > 0 {
        pool = pool
            .par_iter()
            .map(|s| {
                let d = descend(tree, p, xi0, &s.word, s.gains.clone(), &screen_opts);
                Scored { word: s.word.clone(), gains: d.gains, score: d.worst, residual: d.max_residual }
            })
            .collect();
        pool.sort_by(rank);
        log::debug!("screened {} words after {:?}", pool.len(), clock.elapsed());
    }
    let keep = cfg.solver.shortlist.max(1).min(pool.len());
    let mut shortlist: Vec<Scored> = pool[..keep].to_vec();
    if let Some(h) = hint {
        if !shortlist.iter().any(|s| s.word == h.intervals) {
            if let Some(s) = pool.iter().find(|s| s.word == h.intervals) {
                shortlist.push(s.clone());
            }
        }
    }
    let refined: Vec<Result<Solution>> = shortlist
        .par_iter()
        .map(|s| {
            let d = descend(tree, p, xi0, &s.word, s.gains.clone(), &cfg.solver);
            let policy = FeedbackPolicy { gains: d.gains, intervals: s.word.clone() };
            evaluate_all(&policy, xi0, &set.words, p, set.counter)
        })
        .collect();
    log::debug!("refined {} words after {:?}", shortlist.len(), clock.elapsed());
    let mut best: Option<Solution> = None;
    let mut least_bad: Option<(f64, Solution)> = None;
    for sol in refined {
        let sol = sol?;
        if !sol.feasible {
            let worst_residual = sol.scenarios.iter().filter(|s| !s.feasible).count() as f64;
            if least_bad.as_ref().map_or(true, |(r, _)| worst_residual < *r) {
                least_bad = Some((worst_residual, sol));
            }
            continue;
        }
        let take = match &best {
            None => true,
            Some(b) => {
                if ties(sol.worst_value, b.worst_value) {
                    let (wa, wb) = (&sol.policy.intervals, &b.policy.intervals);
                    wa[0] < wb[0] || (wa[0] == wb[0] && wa < wb)
                } else {
                    sol.worst_value < b.worst_value
                }
            }
        };
        if take {
            best = Some(sol);
        }
    }
    match best {
        Some(mut sol) => {
            sol.words_explored = explored;
            Ok(sol)
        }
        None => {
            let detail = least_bad
                .map(|(_, s)| {
                    let bad = s.scenarios.iter().find(|x| !x.feasible).map(|x| x.sequence.to_string()).unwrap_or_default();
                    format!(
                        "best refined word {:?} violates constraints in {} of {} scenarios (first: {bad})",
                        s.policy.intervals,
                        s.scenarios.iter().filter(|x| !x.feasible).count(),
                        s.scenarios.len()
                    )
                })
                .unwrap_or_default();
            Err(Error::Infeasible(detail))
        }
    }
}

/// Result of checking the shifted candidate at a new instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCheck {
    pub feasible: bool,
    pub worst_value: f64,
    /// Every candidate scenario continues a scenario of the previous solution
    /// (`None` when not checked).
    pub tree_match: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub packet: ControlPacket,
    pub solution: Solution,
    pub counter: usize,
    pub admissible_size: usize,
    pub candidate: Option<CandidateCheck>,
}

fn states_close(a: &OverallState, b: &OverallState) -> bool {
    let scale = 1.0 + a.x.amax().max(b.x.amax()).max(a.w.amax()).max(b.w.amax());
    a.beta == b.beta && (&a.x - &b.x).amax() <= 1e-9 * scale && (&a.w - &b.w).amax() <= 1e-9 * scale
}

/// Each candidate scenario `m` must reproduce, shifted by one instant, the
/// previous scenario that starts with the realized outcome and continues with `m`.
pub fn scenario_tree_match(previous: &Solution, candidate: &Solution, realized: bool) -> bool {
    candidate.scenarios.iter().all(|m| {
        let len = m.sequence.len();
        let mut bits = Vec::with_capacity(len);
        bits.push(realized);
        bits.extend_from_slice(&m.sequence.bits()[..len - 1]);
        let parent = LossSequence::new(bits);
        match previous.scenarios.binary_search_by(|s| s.sequence.cmp(&parent)) {
            Ok(idx) => {
                let prev = &previous.scenarios[idx].trajectory;
                (0..len).all(|i| states_close(&m.trajectory[i], &prev[i + 1]))
            }
            Err(_) => false,
        }
    })
}

/// Receding-horizon controller keeping the loss counter, the previous
/// solution and the sampling clock.
#[derive(Debug)]
pub struct Controller {
    plant: PlantModel,
    bucket: TokenBucketSpec,
    config: MpcConfig,
    terminal: TerminalIngredients,
    lifts: LiftTable,
    sets: AdmissibleCache,
    trees: HashMap<usize, Arc<ScenarioTree>>,
    nominal: bool,
    history: LossHistory,
    previous: Option<Solution>,
    k: usize,
    t: usize,
}

impl Controller {
    pub fn new(plant: PlantModel, bucket: TokenBucketSpec, config: MpcConfig, terminal: TerminalIngredients) -> Result<Self> {
        config.validate(&plant, &bucket)?;
        if terminal.period != bucket.base_period() {
            return Err(Error::InvalidParameter(format!(
                "terminal period {} differs from the base period {}",
                terminal.period,
                bucket.base_period()
            )));
        }
        if terminal.loss_bound < config.loss_bound {
            return Err(Error::InvalidParameter(format!(
                "terminal ingredients certified for P={} but controller uses P={}",
                terminal.loss_bound, config.loss_bound
            )));
        }
        if terminal.k_f.shape() != (plant.m(), plant.n()) || terminal.p_f.shape() != (plant.n(), plant.n()) {
            return Err(Error::Dimension("terminal ingredients do not match the plant".into()));
        }
        let lifts = lift_table(&plant, &config, &terminal)?;
        Ok(Self {
            plant,
            bucket,
            config,
            terminal,
            lifts,
            sets: AdmissibleCache::default(),
            trees: HashMap::new(),
            nominal: false,
            history: LossHistory::default(),
            previous: None,
            k: 0,
            t: 0,
        })
    }

    /// Same controller planning for a loss-free channel: a single all-success
    /// scenario, counter pinned at zero, acknowledgements ignored.
    pub fn nominal(plant: PlantModel, bucket: TokenBucketSpec, mut config: MpcConfig, terminal: TerminalIngredients) -> Result<Self> {
        config.loss_bound = 0;
        let mut c = Self::new(plant, bucket, config, terminal)?;
        c.nominal = true;
        Ok(c)
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn terminal(&self) -> &TerminalIngredients {
        &self.terminal
    }

    pub fn is_nominal(&self) -> bool {
        self.nominal
    }

    pub fn counter(&self) -> usize {
        self.history.r
    }

    /// Index of the next sampling instant.
    pub fn instant(&self) -> usize {
        self.k
    }

    /// Time of the next sampling instant.
    pub fn time(&self) -> usize {
        self.t
    }

    pub fn previous(&self) -> Option<&Solution> {
        self.previous.as_ref()
    }

    fn problem(&self) -> Problem<'_> {
        Problem { plant: &self.plant, bucket: &self.bucket, terminal: &self.terminal, config: &self.config, lifts: &self.lifts }
    }

    fn admissible(&mut self, r: usize) -> Result<(Arc<AdmissibleSet>, Arc<ScenarioTree>)> {
        let set = self.sets.get(self.config.horizon, self.config.loss_bound, r)?;
        let tree = self.trees.entry(r).or_insert_with(|| Arc::new(ScenarioTree::new(&set.words))).clone();
        Ok((set, tree))
    }

    /// Solves the problem at `xi` after acknowledgement `ack` of the previous
    /// packet and returns the packet to send. The acknowledgement is ignored
    /// at the first instant.
    pub fn control_step(&mut self, xi: &OverallState, ack: bool) -> Result<StepReport> {
        if self.k > 0 && !self.nominal {
            self.history = update_counter(self.history, ack, self.config.loss_bound)?;
        }
        let r = self.history.r;
        let (set, tree) = self.admissible(r)?;
        let p = self.problem();

        let candidate = match &self.previous {
            Some(prev) => {
                let policy = shifted_candidate(&prev.policy, &self.terminal);
                let mut sol = evaluate_all(&policy, xi, &set.words, &p, r)?;
                sol.provenance = Provenance::FallbackCandidate;
                let tree_match = (!self.nominal).then(|| scenario_tree_match(prev, &sol, ack));
                Some((sol, tree_match))
            }
            None => None,
        };
        let hint = candidate.as_ref().map(|(s, _)| &s.policy);
        let optimized = outer_min(xi, &set, &tree, &p, hint);

        let check = candidate
            .as_ref()
            .map(|(s, m)| CandidateCheck { feasible: s.feasible, worst_value: s.worst_value, tree_match: *m });
        let adopted = match (optimized, candidate) {
            (Ok(o), Some((c, _))) if c.feasible && c.worst_value <= o.worst_value => {
                Solution { words_explored: o.words_explored, ..c }
            }
            (Ok(o), _) => o,
            (Err(_), Some((c, _))) if c.feasible => c,
            (Err(e), _) => return Err(e),
        };
        let packet = adopted.policy.first_packet(&xi.x);
        self.t += packet.delta;
        self.k += 1;
        let report = StepReport { packet, counter: r, admissible_size: set.len(), candidate: check, solution: adopted.clone() };
        self.previous = Some(adopted);
        Ok(report)
    }
}
