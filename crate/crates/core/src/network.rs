//! Token-bucket traffic specification, packet-loss processes with a bound on
//! consecutive losses, acknowledgement bookkeeping, and the admissible
//! predicted loss-sequence sets.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lifted::OverallState;

/// Token bucket with fill rate `g`, transmission cost `c` and size `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBucketSpec {
    pub g: i64,
    pub c: i64,
    pub b: i64,
}

impl TokenBucketSpec {
    pub fn new(g: i64, c: i64, b: i64) -> Result<Self> {
        if !(1 <= g && g <= c && c <= b) {
            return Err(Error::InvalidParameter(format!(
                "token bucket needs 1 <= g <= c <= b, got g={g}, c={c}, b={b}"
            )));
        }
        Ok(Self { g, c, b })
    }

    /// Base period `ceil(c / g)`: the spacing at which transmissions are
    /// always admissible once the level is at least `c - g`.
    pub fn base_period(&self) -> usize {
        ((self.c + self.g - 1) / self.g) as usize
    }

    /// Level after holding for `j >= 1` steps with a transmission at the first.
    pub fn level_after(&self, beta: i64, j: usize) -> i64 {
        (beta + j as i64 * self.g - self.c).min(self.b)
    }

    pub fn contains(&self, beta: i64) -> bool {
        (0..=self.b).contains(&beta)
    }
}

/// One step of the bucket recursion. A negative result is returned unchanged
/// and marks an inadmissible schedule.
pub fn bucket_step(beta: i64, transmitting: bool, spec: &TokenBucketSpec) -> i64 {
    if transmitting {
        (beta + spec.g - spec.c).min(spec.b)
    } else {
        (beta + spec.g).min(spec.b)
    }
}

/// A binary loss word; `true` is a successful transmission.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LossSequence {
    bits: Vec<bool>,
}

impl LossSequence {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_str_bits(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidParameter(format!("invalid loss bit '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Indices of successful transmissions, strictly increasing.
    pub fn tau(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

impl fmt::Display for LossSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// All admissible predicted loss words of length `N + P` for a counter `r`,
/// in lexicographic order. The position of a word in `words` is its index in
/// the scenario index set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissibleSet {
    pub horizon: usize,
    pub loss_bound: usize,
    pub counter: usize,
    pub words: Vec<LossSequence>,
}

impl AdmissibleSet {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        0..self.words.len()
    }
}

fn admissible(bits: &[bool], n: usize, p: usize, r: usize) -> bool {
    let mut last: Option<usize> = None;
    for (i, &b) in bits.iter().enumerate() {
        if !b {
            continue;
        }
        match last {
            None if i > p - r => return false,
            Some(prev) if i - prev > p + 1 => return false,
            _ => {}
        }
        last = Some(i);
    }
    match last {
        None => false,
        Some(l) => n + p - l <= p + 1,
    }
}

/// Enumerates the admissible set for horizon `N + P`, loss bound `P` and
/// consecutive-loss counter `r`.
///
/// Words are generated depth-first with `0` before `1`, which yields
/// lexicographic order; branches that already violate the gap or first-success
/// conditions are cut.
pub fn enumerate_admissible(n: usize, p: usize, r: usize) -> Result<AdmissibleSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("horizon N must be at least 1".into()));
    }
    if r > p {
        return Err(Error::InvalidParameter(format!("counter r={r} exceeds loss bound P={p}")));
    }
    let len = n + p;
    let mut words = Vec::new();
    let mut prefix = Vec::with_capacity(len);
    grow(&mut prefix, None, len, n, p, r, &mut words);
    Ok(AdmissibleSet { horizon: n, loss_bound: p, counter: r, words })
}

fn grow(
    prefix: &mut Vec<bool>,
    last: Option<usize>,
    len: usize,
    n: usize,
    p: usize,
    r: usize,
    out: &mut Vec<LossSequence>,
) {
    let i = prefix.len();
    if i == len {
        if admissible(prefix, n, p, r) {
            out.push(LossSequence::new(prefix.clone()));
        }
        return;
    }
    // A zero at `i` is only viable while the next success can still come in time.
    let zero_ok = match last {
        None => i < p - r,
        Some(l) => i - l < p + 1,
    };
    if zero_ok {
        prefix.push(false);
        grow(prefix, last, len, n, p, r, out);
        prefix.pop();
    }
    prefix.push(true);
    grow(prefix, Some(i), len, n, p, r, out);
    prefix.pop();
}

/// Keeps the words whose first bit equals `first`.
pub fn split_by_first_bit(set: &[LossSequence], first: bool) -> Vec<LossSequence> {
    set.iter().filter(|w| !w.is_empty() && w.get(0) == first).cloned().collect()
}

/// Memoizes admissible sets per `(N, P, r)`.
#[derive(Debug, Default, Clone)]
pub struct AdmissibleCache {
    sets: HashMap<(usize, usize, usize), Arc<AdmissibleSet>>,
}

impl AdmissibleCache {
    pub fn get(&mut self, n: usize, p: usize, r: usize) -> Result<Arc<AdmissibleSet>> {
        if let Some(set) = self.sets.get(&(n, p, r)) {
            return Ok(set.clone());
        }
        let set = Arc::new(enumerate_admissible(n, p, r)?);
        self.sets.insert((n, p, r), set.clone());
        Ok(set)
    }
}

/// Consecutive-loss counter and the last acknowledgement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossHistory {
    pub r: usize,
    pub last_ack: bool,
}

pub fn update_counter(history: LossHistory, ack: bool, p: usize) -> Result<LossHistory> {
    if ack {
        return Ok(LossHistory { r: 0, last_ack: true });
    }
    let r = history.r + 1;
    if r > p {
        return Err(Error::LossBoundViolated { bound: p, counter: r });
    }
    Ok(LossHistory { r, last_ack: false })
}

/// What a loss process may look at when deciding the fate of a packet.
pub struct LossContext<'a> {
    pub k: usize,
    pub t: usize,
    pub state: &'a OverallState,
    pub counter: usize,
    /// Worst-case predicted loss word found by the controller's inner maximizer.
    pub worst_sequence: Option<&'a LossSequence>,
}

pub type AdversaryFn = Box<dyn FnMut(&LossContext<'_>) -> bool + Send>;

/// Packet-loss process.
///
/// `BoundedRandom` and `Adversarial` never produce more than `bound`
/// consecutive losses; `Scripted` replays its word verbatim (cyclically) and
/// may therefore violate the bound, which the simulator reports.
pub enum LossModel {
    Scripted { bits: Vec<bool>, cursor: usize },
    BoundedRandom { rng: ChaCha8Rng, seed: u64, bound: usize, loss_prob: f64, run: usize },
    Adversarial { bound: usize, run: usize, chooser: Option<AdversaryFn> },
}

impl fmt::Debug for LossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Scripted { bits, .. } => {
                write!(f, "Scripted({})", LossSequence::new(bits.clone()))
            }
            Self::BoundedRandom { seed, bound, loss_prob, .. } => {
                write!(f, "BoundedRandom(seed={seed}, P={bound}, p={loss_prob})")
            }
            Self::Adversarial { bound, chooser, .. } => {
                write!(f, "Adversarial(P={bound}, custom={})", chooser.is_some())
            }
        }
    }
}

impl LossModel {
    pub fn scripted(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidParameter("scripted loss trace is empty".into()));
        }
        Ok(Self::Scripted { bits, cursor: 0 })
    }

    pub fn bounded_random(seed: u64, bound: usize, loss_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&loss_prob) {
            return Err(Error::InvalidParameter(format!("loss probability {loss_prob} not in [0, 1]")));
        }
        Ok(Self::BoundedRandom { rng: ChaCha8Rng::seed_from_u64(seed), seed, bound, loss_prob, run: 0 })
    }

    pub fn adversarial(bound: usize) -> Self {
        Self::Adversarial { bound, run: 0, chooser: None }
    }

    pub fn adversarial_with(bound: usize, chooser: AdversaryFn) -> Self {
        Self::Adversarial { bound, run: 0, chooser: Some(chooser) }
    }

    /// Fate of the packet sent at the current sampling instant.
    pub fn next(&mut self, ctx: &LossContext<'_>) -> bool {
        match self {
            Self::Scripted { bits, cursor } => {
                let b = bits[*cursor % bits.len()];
                *cursor += 1;
                b
            }
            Self::BoundedRandom { rng, bound, loss_prob, run, .. } => {
                let success = *run >= *bound || !rng.random_bool(*loss_prob);
                *run = if success { 0 } else { *run + 1 };
                success
            }
            Self::Adversarial { bound, run, chooser } => {
                let wanted = match chooser {
                    Some(choose) => choose(ctx),
                    None => ctx.worst_sequence.map(|w| w.get(0)).unwrap_or(false),
                };
                let success = wanted || *run >= *bound;
                *run = if success { 0 } else { *run + 1 };
                success
            }
        }
    }
}

/// Parses a loss trace: one bit per sampling instant, whitespace separated,
/// `#` starts a comment.
pub fn parse_loss_trace(text: &str) -> Result<Vec<bool>> {
    let mut bits = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("");
        for tok in content.split_whitespace() {
            match tok {
                "0" => bits.push(false),
                "1" => bits.push(true),
                other => {
                    return Err(Error::Config(format!(
                        "loss trace line {}: expected 0 or 1, got '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
    }
    if bits.is_empty() {
        return Err(Error::Config("loss trace contains no bits".into()));
    }
    Ok(bits)
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<bool>> {
    parse_loss_trace(&std::fs::read_to_string(path)?)
}

/// Longest run of consecutive losses in a realization.
pub fn longest_loss_run(bits: &[bool]) -> usize {
    let (mut best, mut cur) = (0, 0);
    for &b in bits {
        cur = if b { 0 } else { cur + 1 };
        best = best.max(cur);
    }
    best
}
