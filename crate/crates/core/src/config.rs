//! Sectioned `key = value` configuration files.
//!
//! ```text
//! # comment
//! [plant]
//! A = [1.1 0.2;
//!      0   0.9]
//! ```
//!
//! Matrices are row-major in brackets, entries separated by spaces or commas
//! and rows by `;`; a bracketed value may span several lines. A bare number is
//! a 1x1 matrix. Vectors may be written as a row or a column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConstraintSet;
use crate::controller::{MpcConfig, SolverOptions};
use crate::lifted::PlantModel;
use crate::network::{read_loss_trace, TokenBucketSpec};
use crate::sim::{LossSpec, SimConfig};
use crate::terminal::{CertifiedTerminal, TerminalIngredients, TerminalSet};
use crate::{Error, Result};

/// Raw parse: section -> key -> (value text, line number).
#[derive(Debug, Clone, Default)]
pub struct Document {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::default();
        let mut section: Option<String> = None;
        let mut pending: Option<(String, String, usize)> = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if let Some((key, mut value, start)) = pending.take() {
                value.push(' ');
                value.push_str(line);
                if depth(&value) > 0 {
                    pending = Some((key, value, start));
                } else {
                    doc.insert(section.as_deref().unwrap_or(""), key, value, start)?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !name.is_empty() && !name.contains(['[', ']', '=']) {
                    let name = name.trim().to_string();
                    doc.sections.entry(name.clone()).or_default();
                    section = Some(name);
                    continue;
                }
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {lineno}: expected 'key = value' or '[section]'")));
            };
            let Some(sec) = section.as_deref() else {
                return Err(Error::Config(format!("line {lineno}: key outside of any section")));
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            if depth(&value) > 0 {
                pending = Some((key, value, lineno));
            } else {
                doc.insert(sec, key, value, lineno)?;
            }
        }
        if let Some((key, _, start)) = pending {
            return Err(Error::Config(format!("line {start}: unterminated bracket in '{key}'")));
        }
        Ok(doc)
    }

    fn insert(&mut self, section: &str, key: String, value: String, lineno: usize) -> Result<()> {
        if depth(&value) < 0 {
            return Err(Error::Config(format!("line {lineno}: unbalanced ']' in '{key}'")));
        }
        let sec = self.sections.entry(section.to_string()).or_default();
        if sec.contains_key(&key) {
            return Err(Error::Config(format!("line {lineno}: duplicate key '{key}' in [{section}]")));
        }
        sec.insert(key, (value, lineno));
        Ok(())
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    /// Rejects sections and keys outside `allowed`.
    fn check_keys(&self, allowed: &[(&str, &[&str])]) -> Result<()> {
        for (sec, keys) in &self.sections {
            let Some((_, ok)) = allowed.iter().find(|(s, _)| s == sec) else {
                return Err(Error::Config(format!("unknown section [{sec}]")));
            };
            for (key, (_, line)) in keys {
                if !ok.contains(&key.as_str()) {
                    return Err(Error::Config(format!("line {line}: unknown key '{key}' in [{sec}]")));
                }
            }
        }
        Ok(())
    }

    fn raw(&self, sec: &str, key: &str) -> Option<(&str, usize)> {
        self.sections.get(sec)?.get(key).map(|(v, l)| (v.as_str(), *l))
    }

    fn required(&self, sec: &str, key: &str) -> Result<(&str, usize)> {
        self.raw(sec, key).ok_or_else(|| Error::Config(format!("missing key '{key}' in [{sec}]")))
    }

    fn matrix(&self, sec: &str, key: &str) -> Result<DMatrix<f64>> {
        let (v, line) = self.required(sec, key)?;
        parse_matrix(v).map_err(|e| Error::Config(format!("line {line}: {key}: {e}")))
    }

    fn opt_matrix(&self, sec: &str, key: &str) -> Result<Option<DMatrix<f64>>> {
        match self.raw(sec, key) {
            None => Ok(None),
            Some(_) => self.matrix(sec, key).map(Some),
        }
    }

    fn vector(&self, sec: &str, key: &str) -> Result<DVector<f64>> {
        let (_, line) = self.required(sec, key)?;
        as_vector(self.matrix(sec, key)?).map_err(|e| Error::Config(format!("line {line}: {key}: {e}")))
    }

    fn opt_vector(&self, sec: &str, key: &str) -> Result<Option<DVector<f64>>> {
        match self.raw(sec, key) {
            None => Ok(None),
            Some(_) => self.vector(sec, key).map(Some),
        }
    }

    fn scalar<T: std::str::FromStr>(&self, sec: &str, key: &str) -> Result<Option<T>> {
        match self.raw(sec, key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: {key}: cannot parse '{v}'"))),
        }
    }

    fn required_scalar<T: std::str::FromStr>(&self, sec: &str, key: &str) -> Result<T> {
        self.scalar(sec, key)?.ok_or_else(|| Error::Config(format!("missing key '{key}' in [{sec}]")))
    }
}

fn depth(s: &str) -> i64 {
    s.chars().map(|c| i64::from(c == '[') - i64::from(c == ']')).sum()
}

/// Parses `[a b; c d]` (row-major) or a bare number.
pub fn parse_matrix(text: &str) -> std::result::Result<DMatrix<f64>, String> {
    let t = text.trim();
    let body = match t.strip_prefix('[') {
        Some(rest) => rest.strip_suffix(']').ok_or("missing closing ']'")?,
        None => t,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row in body.split(';') {
        let entries = row
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| format!("bad number '{s}'")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if entries.is_empty() {
            if row.trim().is_empty() && !rows.is_empty() {
                continue;
            }
            return Err("empty row".into());
        }
        rows.push(entries);
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err("rows have different lengths".into());
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

fn as_vector(m: DMatrix<f64>) -> std::result::Result<DVector<f64>, String> {
    if m.ncols() == 1 {
        Ok(m.column(0).into_owned())
    } else if m.nrows() == 1 {
        Ok(m.row(0).transpose())
    } else {
        Err(format!("expected a vector, got a {}x{} matrix", m.nrows(), m.ncols()))
    }
}

/// Writes a matrix in the bracketed row-major form, round-trip exact.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect::<Vec<_>>().join(" "))
        .collect();
    format!("[{}]", rows.join("; "))
}

/// Parses `script:<bits>`, `random:<p>[,<seed>]`, `adversarial` or
/// `file:<path>`. Returns the spec and a seed override.
pub fn parse_loss(text: &str) -> Result<(LossSpec, Option<u64>)> {
    let t = text.trim();
    if t == "adversarial" {
        return Ok((LossSpec::Adversarial, None));
    }
    if let Some(bits) = t.strip_prefix("script:") {
        let bits: Vec<bool> = bits
            .chars()
            .filter(|c| !c.is_whitespace() && *c != ',' && *c != '.' && *c != '…')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Config(format!("loss script: expected 0 or 1, got '{other}'"))),
            })
            .collect::<Result<_>>()?;
        if bits.is_empty() {
            return Err(Error::Config("loss script is empty".into()));
        }
        return Ok((LossSpec::Script(bits), None));
    }
    if let Some(rest) = t.strip_prefix("random:") {
        let (p, seed) = match rest.split_once(',') {
            Some((p, s)) => (p, Some(s.trim())),
            None => (rest, None),
        };
        let prob: f64 = p.trim().parse().map_err(|_| Error::Config(format!("loss: bad probability '{p}'")))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Config(format!("loss: probability {prob} outside [0, 1]")));
        }
        let seed = seed
            .map(|s| s.parse::<u64>().map_err(|_| Error::Config(format!("loss: bad seed '{s}'"))))
            .transpose()?;
        return Ok((LossSpec::Random { prob }, seed));
    }
    if let Some(path) = t.strip_prefix("file:") {
        return Ok((LossSpec::Script(read_loss_trace(Path::new(path.trim()))?), None));
    }
    Err(Error::Config(format!("unknown loss model '{t}' (script:, random:, adversarial, file:)")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub x0: DVector<f64>,
    pub w0: DVector<f64>,
    pub beta0: i64,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossSpec,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub ingredients: Option<PathBuf>,
}

/// A complete experiment description.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub plant: PlantModel,
    pub bucket: TokenBucketSpec,
    pub mpc: MpcConfig,
    pub sim: SimSection,
    pub paths: Paths,
    /// Inline terminal ingredients, if the file carries an `[ingredients]` section.
    pub ingredients: Option<TerminalIngredients>,
}

const PLANT: &[&str] = &["A", "B"];
const COST: &[&str] = &["Q", "R"];
const NETWORK: &[&str] = &["g", "c", "b"];
const MPC: &[&str] = &[
    "N",
    "P",
    "delta_max",
    "X_H",
    "X_h",
    "U_H",
    "U_h",
    "screen",
    "screen_iterations",
    "shortlist",
    "temperatures",
    "max_iterations",
    "penalty_weight",
    "penalty_growth",
    "word_budget",
    "beam_width",
];
const SIM: &[&str] = &["x0", "w0", "beta0", "T", "seed", "loss"];
const PATHS: &[&str] = &["out", "ingredients"];
const INGREDIENTS: &[&str] = &["K_f", "P_f", "period", "loss_bound", "terminal_set", "alpha", "H", "h"];

impl Experiment {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = Document::parse(text)?;
        doc.check_keys(&[
            ("plant", PLANT),
            ("cost", COST),
            ("network", NETWORK),
            ("mpc", MPC),
            ("sim", SIM),
            ("paths", PATHS),
            ("ingredients", INGREDIENTS),
        ])?;
        let plant = PlantModel::new(
            doc.matrix("plant", "A")?,
            doc.matrix("plant", "B")?,
            doc.matrix("cost", "Q")?,
            doc.matrix("cost", "R")?,
        )?;
        let bucket = TokenBucketSpec::new(
            doc.required_scalar("network", "g")?,
            doc.required_scalar("network", "c")?,
            doc.required_scalar("network", "b")?,
        )?;
        let mut mpc = MpcConfig::new(
            doc.required_scalar("mpc", "N")?,
            doc.required_scalar("mpc", "P")?,
            doc.required_scalar("mpc", "delta_max")?,
        );
        mpc.state_set = halfspaces(&doc, "X_H", "X_h")?;
        mpc.input_set = halfspaces(&doc, "U_H", "U_h")?;
        mpc.solver = solver_options(&doc)?;
        mpc.validate(&plant, &bucket)?;

        let (loss, seed_override) = match doc.raw("sim", "loss") {
            Some((v, _)) => parse_loss(v)?,
            None => (LossSpec::Script(vec![true]), None),
        };
        let x0 = doc.vector("sim", "x0")?;
        let w0 = doc.opt_vector("sim", "w0")?.unwrap_or_else(|| DVector::zeros(plant.m()));
        let sim = SimSection {
            beta0: doc.scalar("sim", "beta0")?.unwrap_or(bucket.b),
            steps: doc.required_scalar("sim", "T")?,
            seed: seed_override.unwrap_or(doc.scalar("sim", "seed")?.unwrap_or(0)),
            x0,
            w0,
            loss,
        };
        if sim.steps == 0 {
            return Err(Error::Config("simulation horizon T must be at least 1".into()));
        }
        let paths = Paths {
            out: doc.raw("paths", "out").map(|(v, _)| PathBuf::from(v)),
            ingredients: doc.raw("paths", "ingredients").map(|(v, _)| PathBuf::from(v)),
        };
        let ingredients = if doc.has_section("ingredients") { Some(ingredients_from(&doc)?) } else { None };
        let exp = Self { plant, bucket, mpc, sim, paths, ingredients };
        if let Some(ing) = &exp.ingredients {
            exp.check_ingredients(ing)?;
        }
        exp.sim_config(TerminalIngredients {
            k_f: DMatrix::zeros(exp.plant.m(), exp.plant.n()),
            p_f: DMatrix::zeros(exp.plant.n(), exp.plant.n()),
            period: exp.bucket.base_period(),
            loss_bound: exp.mpc.loss_bound,
            terminal_set: TerminalSet::Unconstrained,
        })
        .validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Dimension and period agreement between ingredients and this experiment.
    pub fn check_ingredients(&self, ing: &TerminalIngredients) -> Result<()> {
        let (n, m) = (self.plant.n(), self.plant.m());
        if ing.k_f.shape() != (m, n) || ing.p_f.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "ingredients K_f {:?} / P_f {:?} do not match plant (n={n}, m={m})",
                ing.k_f.shape(),
                ing.p_f.shape()
            )));
        }
        if ing.period != self.bucket.base_period() {
            return Err(Error::Config(format!(
                "ingredients use period {}, the bucket's base period is {}",
                ing.period,
                self.bucket.base_period()
            )));
        }
        Ok(())
    }

    pub fn sim_config(&self, terminal: TerminalIngredients) -> SimConfig {
        SimConfig {
            plant: self.plant.clone(),
            bucket: self.bucket,
            mpc: self.mpc.clone(),
            terminal,
            loss: self.sim.loss.clone(),
            x0: self.sim.x0.clone(),
            w0: self.sim.w0.clone(),
            beta0: self.sim.beta0,
            steps: self.sim.steps,
            seed: self.sim.seed,
            nominal: false,
        }
    }
}

fn halfspaces(doc: &Document, hk: &str, vk: &str) -> Result<ConstraintSet> {
    match (doc.opt_matrix("mpc", hk)?, doc.opt_vector("mpc", vk)?) {
        (None, None) => Ok(ConstraintSet::Unconstrained),
        (Some(h), Some(v)) => ConstraintSet::polytope(h, v),
        _ => Err(Error::Config(format!("[mpc] needs both {hk} and {vk} or neither"))),
    }
}

fn solver_options(doc: &Document) -> Result<SolverOptions> {
    let mut s = SolverOptions::default();
    if let Some(v) = doc.scalar("mpc", "screen")? {
        s.screen = v;
    }
    if let Some(v) = doc.scalar("mpc", "screen_iterations")? {
        s.screen_iterations = v;
    }
    if let Some(v) = doc.scalar("mpc", "shortlist")? {
        s.shortlist = v;
    }
    if let Some(v) = doc.opt_vector("mpc", "temperatures")? {
        s.temperatures = v.iter().copied().collect();
    }
    if let Some(v) = doc.scalar("mpc", "max_iterations")? {
        s.max_iterations = v;
    }
    if let Some(v) = doc.scalar("mpc", "penalty_weight")? {
        s.penalty_weight = v;
    }
    if let Some(v) = doc.scalar("mpc", "penalty_growth")? {
        s.penalty_growth = v;
    }
    if let Some(v) = doc.scalar("mpc", "word_budget")? {
        s.word_budget = v;
    }
    if let Some(v) = doc.scalar("mpc", "beam_width")? {
        s.beam_width = v;
    }
    Ok(s)
}

fn ingredients_from(doc: &Document) -> Result<TerminalIngredients> {
    let sec = "ingredients";
    let terminal_set = match doc.raw(sec, "terminal_set").map(|(v, _)| v).unwrap_or("unconstrained") {
        "unconstrained" => TerminalSet::Unconstrained,
        "ellipsoid" => TerminalSet::Ellipsoid { p: doc.matrix(sec, "P_f")?, alpha: doc.required_scalar(sec, "alpha")? },
        "polytope" => TerminalSet::Polytope { h_mat: doc.matrix(sec, "H")?, h_vec: doc.vector(sec, "h")? },
        other => return Err(Error::Config(format!("unknown terminal_set '{other}'"))),
    };
    let k_f = doc.matrix(sec, "K_f")?;
    let p_f = doc.matrix(sec, "P_f")?;
    if !p_f.is_square() || k_f.ncols() != p_f.nrows() {
        return Err(Error::Dimension(format!("K_f {:?} and P_f {:?} are inconsistent", k_f.shape(), p_f.shape())));
    }
    Ok(TerminalIngredients {
        k_f,
        p_f,
        period: doc.required_scalar(sec, "period")?,
        loss_bound: doc.required_scalar(sec, "loss_bound")?,
        terminal_set,
    })
}

/// Reads an ingredients file (an `[ingredients]` section plus an optional
/// free-form `[report]`).
pub fn parse_ingredients(text: &str) -> Result<TerminalIngredients> {
    let doc = Document::parse(text)?;
    if !doc.has_section("ingredients") {
        return Err(Error::Config("missing [ingredients] section".into()));
    }
    let report: Vec<&str> = doc.sections.get("report").map(|s| s.keys().map(String::as_str).collect()).unwrap_or_default();
    doc.check_keys(&[("ingredients", INGREDIENTS), ("report", &report)])?;
    ingredients_from(&doc)
}

pub fn load_ingredients(path: &Path) -> Result<TerminalIngredients> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_ingredients(&text)
}

pub fn format_ingredients(ing: &TerminalIngredients) -> String {
    let mut s = String::from("[ingredients]\n");
    let _ = writeln!(s, "K_f = {}", format_matrix(&ing.k_f));
    let _ = writeln!(s, "P_f = {}", format_matrix(&ing.p_f));
    let _ = writeln!(s, "period = {}", ing.period);
    let _ = writeln!(s, "loss_bound = {}", ing.loss_bound);
    match &ing.terminal_set {
        TerminalSet::Unconstrained => s.push_str("terminal_set = unconstrained\n"),
        TerminalSet::Ellipsoid { p, alpha } => {
            // the ellipsoid shape is P_f itself
            debug_assert_eq!(p, &ing.p_f);
            let _ = writeln!(s, "terminal_set = ellipsoid\nalpha = {alpha:e}");
        }
        TerminalSet::Polytope { h_mat, h_vec } => {
            let _ = writeln!(s, "terminal_set = polytope");
            let _ = writeln!(s, "H = {}", format_matrix(h_mat));
            let _ = writeln!(s, "h = {}", format_matrix(&DMatrix::from_column_slice(h_vec.len(), 1, h_vec.as_slice())));
        }
    }
    s
}

/// Ingredients plus a `[report]` section with the verification results.
pub fn format_certified(c: &CertifiedTerminal) -> String {
    let mut s = format_ingredients(&c.ingredients);
    s.push_str("\n[report]\n");
    for (p, ev) in &c.qmi.per_p {
        let _ = writeln!(s, "qmi_max_eig_p{p} = {ev:e}");
    }
    for (p, ev) in &c.qmi.extension {
        let _ = writeln!(s, "extension_max_eig_p{p} = {ev:e}");
    }
    let _ = writeln!(s, "qmi = {}", pass_fail(c.qmi.pass));
    let _ = writeln!(s, "decrease_samples = {}", c.decrease.samples);
    let _ = writeln!(s, "decrease_worst_margin = {:e}", c.decrease.worst_margin);
    let _ = writeln!(s, "decrease = {}", pass_fail(c.decrease.pass));
    if let Some(w) = &c.set_warning {
        let _ = writeln!(s, "terminal_set_warning = {}", w.replace('\n', " "));
    }
    s
}

pub fn pass_fail(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// The batch-reactor experiment shipped with the crate.
pub const BATCH_REACTOR: &str = include_str!("../data/batch_reactor.cfg");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_forms() {
        assert_eq!(parse_matrix("[1 2; 3 4]").unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(parse_matrix("[1, 2,\n 3]").unwrap().shape(), (1, 3));
        assert_eq!(parse_matrix("2.5").unwrap()[(0, 0)], 2.5);
        assert_eq!(parse_matrix("[1; 2; 3;]").unwrap().shape(), (3, 1));
        assert!(parse_matrix("[1 2; 3]").is_err());
        assert!(parse_matrix("[1 x]").is_err());
        let m = DMatrix::from_row_slice(2, 2, &[0.1, -1.0 / 3.0, 1e-300, 7.0]);
        assert_eq!(parse_matrix(&format_matrix(&m)).unwrap(), m);
    }

    #[test]
    fn multiline_values_and_errors() {
        let doc = Document::parse("[plant]\nA = [1 0;\n  0 1]  # id\nB = [1; 1]\n").unwrap();
        assert_eq!(doc.matrix("plant", "A").unwrap(), DMatrix::identity(2, 2));
        assert!(Document::parse("A = 1\n").is_err());
        assert!(Document::parse("[s]\nA = [1 2\n").is_err());
        assert!(Document::parse("[s]\nA = 1\nA = 2\n").is_err());
        assert!(Document::parse("[s]\njunk\n").is_err());
    }

    #[test]
    fn loss_specs() {
        assert_eq!(parse_loss("script:100").unwrap().0, LossSpec::Script(vec![true, false, false]));
        assert_eq!(parse_loss("random:0.3,7").unwrap(), (LossSpec::Random { prob: 0.3 }, Some(7)));
        assert_eq!(parse_loss("adversarial").unwrap().0, LossSpec::Adversarial);
        assert!(parse_loss("script:12").is_err());
        assert!(parse_loss("random:1.5").is_err());
        assert!(parse_loss("bursty").is_err());
    }

    #[test]
    fn bundled_config_parses() {
        let e = Experiment::parse(BATCH_REACTOR).unwrap();
        assert_eq!((e.plant.n(), e.plant.m()), (4, 2));
        assert_eq!(e.bucket.base_period(), 3);
        assert_eq!((e.mpc.horizon, e.mpc.loss_bound, e.mpc.delta_max), (6, 2, 5));
        assert_eq!(e.sim.beta0, 8);
        assert_eq!(e.sim.steps, 100);
        assert_eq!(e.sim.loss, LossSpec::Script(vec![true, false, false]));
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = BATCH_REACTOR.replace("[network]", "[network]\nburst = 3");
        assert!(matches!(Experiment::parse(&bad), Err(Error::Config(m)) if m.contains("burst")));
        let bad = format!("{BATCH_REACTOR}\n[extra]\nx = 1\n");
        assert!(Experiment::parse(&bad).is_err());
        let bad = BATCH_REACTOR.replace("T = 100", "T = 0");
        assert!(Experiment::parse(&bad).is_err());
    }

    #[test]
    fn ingredients_round_trip() {
        let ing = TerminalIngredients {
            k_f: DMatrix::from_row_slice(1, 2, &[-0.25, 0.1]),
            p_f: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]),
            period: 3,
            loss_bound: 2,
            terminal_set: TerminalSet::Ellipsoid { p: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]), alpha: 4.5 },
        };
        assert_eq!(parse_ingredients(&format_ingredients(&ing)).unwrap(), ing);
        assert!(parse_ingredients("[report]\nqmi = PASS\n").is_err());
    }
}
