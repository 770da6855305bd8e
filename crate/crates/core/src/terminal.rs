//! Terminal ingredients: synthesis of the gain `K_f` and cost matrix `P_f`
//! from the `(P+1)`-block LMI family and the block-extension conditions, their
//! independent verification, and construction of an ellipsoidal terminal set.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::constraints::{ConstraintSet, MEMBERSHIP_TOL};
use crate::error::{Error, Result};
use crate::lifted::{self, lift, ncs_step, terminal_rollout, ControlPacket, LiftedMatrices, OverallState, PlantModel};
use crate::linalg::{self, quad_form};
use crate::network::TokenBucketSpec;
use crate::sdp::{self, AffineLmi, BarrierOptions};

/// QMI residual eigenvalues above this fail verification.
pub const QMI_TOL: f64 = 1e-8;
/// Slack allowed on the sampled decrease inequality, relative to `max(1, V_f)`.
pub const DECREASE_TOL: f64 = 1e-7;
/// Seed of the sampling audits unless one is given explicitly.
pub const AUDIT_SEED: u64 = 0x5eed_7e41;
/// Cap on convex-concave rounds for the block-extension conditions.
const EXTENSION_ROUNDS: usize = 40;

/// Plant part of the terminal set.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSet {
    Unconstrained,
    /// `{x : x' P x <= alpha}`.
    Ellipsoid { p: DMatrix<f64>, alpha: f64 },
    Polytope { h_mat: DMatrix<f64>, h_vec: DVector<f64> },
}

impl TerminalSet {
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::Unconstrained => f64::NEG_INFINITY,
            Self::Ellipsoid { p, alpha } => quad_form(p, x) - alpha,
            Self::Polytope { h_mat, h_vec } => {
                (h_mat * x - h_vec).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.residual(x) <= MEMBERSHIP_TOL
    }

    /// Quadratic exterior penalty; accumulates `scale * grad` into `grad`.
    pub fn penalty(&self, x: &DVector<f64>, scale: f64, grad: Option<&mut DVector<f64>>) -> f64 {
        match self {
            Self::Unconstrained => 0.0,
            Self::Ellipsoid { p, alpha } => {
                let px = p * x;
                let viol = (x.dot(&px) - alpha).max(0.0);
                if viol > 0.0 {
                    if let Some(g) = grad {
                        g.axpy(4.0 * scale * viol, &px, 1.0);
                    }
                }
                viol * viol
            }
            Self::Polytope { h_mat, h_vec } => ConstraintSet::Polytope { h_mat: h_mat.clone(), h_vec: h_vec.clone() }
                .penalty(x, scale, grad),
        }
    }
}

/// Terminal law `kappa_f(xi) = (K_f x, M)`, cost `x' P_f x`, and set.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub k_f: DMatrix<f64>,
    pub p_f: DMatrix<f64>,
    /// Base period `M` of the token bucket.
    pub period: usize,
    /// Loss bound `P` the ingredients were certified for.
    pub loss_bound: usize,
    pub terminal_set: TerminalSet,
}

impl TerminalIngredients {
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.p_f, x)
    }

    pub fn law(&self, state: &OverallState) -> ControlPacket {
        ControlPacket { v: &self.k_f * &state.x, delta: self.period }
    }

    /// Membership in `X_f x U x [c-g, b]`.
    pub fn contains(&self, state: &OverallState, input_set: &ConstraintSet, bucket: &TokenBucketSpec) -> bool {
        self.terminal_set.contains(&state.x)
            && input_set.contains(&state.w)
            && (bucket.c - bucket.g..=bucket.b).contains(&state.beta)
    }
}

/// The LMI block for one `p`, assembled from lifted matrices at horizon `pM`.
pub fn lmi_matrix(lifted: &LiftedMatrices, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    let d = 3 * n + m;
    let (i1, i2, i3, i4) = (0, n, 2 * n, 2 * n + m);
    let mut f = DMatrix::zeros(d, d);
    let top_right = &lifted.a * x + &lifted.b * y;
    f.view_mut((i1, i1), (n, n)).copy_from(x);
    f.view_mut((i1, i4), (n, n)).copy_from(&top_right);
    f.view_mut((i2, i2), (n, n)).copy_from(&lifted.q_inv);
    f.view_mut((i2, i3), (n, m)).copy_from(&lifted.s_inv);
    f.view_mut((i2, i4), (n, n)).copy_from(x);
    f.view_mut((i3, i3), (m, m)).copy_from(&lifted.r_inv);
    f.view_mut((i3, i4), (m, n)).copy_from(y);
    f.view_mut((i4, i4), (n, n)).copy_from(x);
    // mirror the upper triangle
    for r in 0..d {
        for c in 0..r {
            f[(r, c)] = f[(c, r)];
        }
    }
    f
}

/// `(A+BK)' P (A+BK) - P + [I; K]' [Q S; S' R] [I; K]` at horizon `pM`.
pub fn qmi_residual(lifted: &LiftedMatrices, k_f: &DMatrix<f64>, p_f: &DMatrix<f64>) -> DMatrix<f64> {
    let closed = &lifted.a + &lifted.b * k_f;
    let cross = &lifted.s * k_f;
    let stage = &lifted.q + &cross + cross.transpose() + k_f.transpose() * &lifted.r * k_f;
    linalg::symmetrize(&(closed.transpose() * p_f * &closed - p_f + stage))
}

/// One more held block after `p` blocks of the terminal law:
/// `F_{p+1}' P F_{p+1} - F_p' P F_p + [F_p; K]' [Q S; S' R] [F_p; K]` with
/// `F_p = A_{pM} + B_{pM} K` and the weights of a single `M`-step block.
///
/// The QMI bounds the whole run from the last successful packet; when a
/// prediction ends inside such a run, shifting it by one interval appends one
/// more lost block, and this residual is what that costs.
pub fn extension_residual(
    lifted_p: &LiftedMatrices,
    lifted_next: &LiftedMatrices,
    block: &LiftedMatrices,
    k_f: &DMatrix<f64>,
    p_f: &DMatrix<f64>,
) -> DMatrix<f64> {
    let f_p = &lifted_p.a + &lifted_p.b * k_f;
    let f_next = &lifted_next.a + &lifted_next.b * k_f;
    let cross = f_p.transpose() * &block.s * k_f;
    let stage = f_p.transpose() * &block.q * &f_p + &cross + cross.transpose() + k_f.transpose() * &block.r * k_f;
    linalg::symmetrize(&(f_next.transpose() * p_f * &f_next - f_p.transpose() * p_f * &f_p + stage))
}

/// Convex restriction of the extension condition in `X = P^-1`, `Y = K X`,
/// with the concave term `-Z' X^-1 Z` (`Z = A_{pM} X + B_{pM} Y`) replaced by
/// its tangent at `(xb, yb)`.
fn extension_lmi_matrix(
    lifted_p: &LiftedMatrices,
    lifted_next: &LiftedMatrices,
    block: &LiftedMatrices,
    (xb_inv, zb): (&DMatrix<f64>, &DMatrix<f64>),
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    let z = &lifted_p.a * x + &lifted_p.b * y;
    let z_next = &lifted_next.a * x + &lifted_next.b * y;
    let g = xb_inv * zb;
    let tangent = zb.transpose() * xb_inv * &z + z.transpose() * &g - g.transpose() * x * &g;
    let d = 3 * n + m;
    let mut f = DMatrix::zeros(d, d);
    f.view_mut((0, 0), (n, n)).copy_from(&linalg::symmetrize(&tangent));
    f.view_mut((n, 0), (n, n)).copy_from(&z_next);
    f.view_mut((n, n), (n, n)).copy_from(x);
    f.view_mut((2 * n, 0), (n, n)).copy_from(&z);
    f.view_mut((3 * n, 0), (m, n)).copy_from(y);
    f.view_mut((2 * n, 2 * n), (n, n)).copy_from(&block.q_inv);
    f.view_mut((2 * n, 3 * n), (n, m)).copy_from(&block.s_inv);
    f.view_mut((3 * n, 3 * n), (m, m)).copy_from(&block.r_inv);
    for r in 0..d {
        for c in r + 1..d {
            f[(r, c)] = f[(c, r)];
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmiReport {
    /// `(p, max eigenvalue)` for `p = 1..=P+1`.
    pub per_p: Vec<(usize, f64)>,
    /// `(p, max eigenvalue)` of the block-extension residual, `p = 1..=P`.
    pub extension: Vec<(usize, f64)>,
    pub pass: bool,
}

impl QmiReport {
    pub fn worst(&self) -> (usize, f64) {
        self.per_p
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, f64::NEG_INFINITY))
    }
}

impl fmt::Display for QmiReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (p, ev) in &self.per_p {
            writeln!(f, "qmi p={p} max_eig={ev:.6e} {}", if *ev <= QMI_TOL { "PASS" } else { "FAIL" })?;
        }
        for (p, ev) in &self.extension {
            writeln!(f, "extension p={p} max_eig={ev:.6e} {}", if *ev <= QMI_TOL { "PASS" } else { "FAIL" })?;
        }
        write!(f, "qmi {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

pub fn verify_qmi(k_f: &DMatrix<f64>, p_f: &DMatrix<f64>, plant: &PlantModel, period: usize, loss_bound: usize) -> Result<QmiReport> {
    if k_f.shape() != (plant.m(), plant.n()) || p_f.shape() != (plant.n(), plant.n()) {
        return Err(Error::Dimension(format!(
            "K_f {:?} / P_f {:?} do not match plant (n={}, m={})",
            k_f.shape(),
            p_f.shape(),
            plant.n(),
            plant.m()
        )));
    }
    let lifts = lifted_blocks(plant, period, loss_bound)?;
    let per_p: Vec<(usize, f64)> =
        (1..=loss_bound + 1).map(|p| (p, linalg::max_eigenvalue(&qmi_residual(&lifts[p], k_f, p_f)))).collect();
    let extension: Vec<(usize, f64)> = (1..=loss_bound)
        .map(|p| (p, linalg::max_eigenvalue(&extension_residual(&lifts[p], &lifts[p + 1], &lifts[1], k_f, p_f))))
        .collect();
    let pass = per_p.iter().chain(&extension).all(|&(_, ev)| ev <= QMI_TOL);
    Ok(QmiReport { per_p, extension, pass })
}

/// Infinite-horizon LQR for a lifted system with cross weight, by Riccati
/// iteration. Returns `(K, P)` with `u = K x`, or `None` if it does not converge.
pub fn dlqr(lifted: &LiftedMatrices) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (a, b) = (&lifted.a, &lifted.b);
    let mut p = lifted.q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let h = &lifted.r + &btp * b;
        let rhs = &btp * a + lifted.s.transpose();
        let k = -h.clone().cholesky()?.solve(&rhs);
        let next = linalg::symmetrize(&(&lifted.q + a.transpose() * &p * a + (a.transpose() * &p * b + &lifted.s) * &k));
        if !next.iter().all(|v| v.is_finite()) || next.amax() > 1e15 {
            return None;
        }
        let diff = (&next - &p).amax();
        p = next;
        if diff <= 1e-13 * p.amax().max(1.0) {
            let btp = b.transpose() * &p;
            let h = &lifted.r + &btp * b;
            let k = -h.cholesky()?.solve(&(&btp * a + lifted.s.transpose()));
            return Some((k, p));
        }
    }
    None
}

#[derive(Debug, Clone, Copy)]
pub struct SynthesisOptions {
    /// Required smallest eigenvalue of every LMI block.
    pub margin: f64,
    pub barrier: BarrierOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { margin: 1e-9, barrier: BarrierOptions::default() }
    }
}

/// Builds the affine LMI family in the variables `(svec(X), vec(Y))`.
fn lmi_family(plant: &PlantModel, period: usize, loss_bound: usize) -> Result<Vec<AffineLmi>> {
    let (n, m) = (plant.n(), plant.m());
    let mut out = Vec::with_capacity(loss_bound + 1);
    for p in 1..=loss_bound + 1 {
        let lifted = lift(plant, p * period)?;
        out.push(affine(n, m, |x, y| lmi_matrix(&lifted, x, y)));
    }
    Ok(out)
}

fn unit(len: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[i] = 1.0;
    v
}

fn unpack(v: &[f64], n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut x = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            x[(i, j)] = v[k];
            x[(j, i)] = v[k];
            k += 1;
        }
    }
    let y = DMatrix::from_row_slice(m, n, &v[k..k + m * n]);
    (x, y)
}

fn pack(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2 + y.len());
    for i in 0..n {
        for j in i..n {
            v.push(x[(i, j)]);
        }
    }
    for i in 0..y.nrows() {
        for j in 0..y.ncols() {
            v.push(y[(i, j)]);
        }
    }
    v
}

/// Finds `(K_f, P_f)` satisfying the LMI family for `p = 1..=P+1`.
pub fn synthesize(plant: &PlantModel, spec: &TokenBucketSpec, loss_bound: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    synthesize_with(plant, spec, loss_bound, &SynthesisOptions::default())
}

pub fn synthesize_with(
    plant: &PlantModel,
    spec: &TokenBucketSpec,
    loss_bound: usize,
    opts: &SynthesisOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = (plant.n(), plant.m());
    let period = spec.base_period();
    let family = lmi_family(plant, period, loss_bound)?;

    // warm start from the LQR of the M-step lifted system
    let (x0, y0) = match dlqr(&lift(plant, period)?) {
        Some((k, p)) => match linalg::spd_inverse(&p, "LQR cost matrix") {
            Ok(x) => {
                let y = &k * &x;
                (x, y)
            }
            Err(_) => (DMatrix::identity(n, n), DMatrix::zeros(m, n)),
        },
        None => (DMatrix::identity(n, n), DMatrix::zeros(m, n)),
    };
    let sol = sdp::maximize_margin(&family, &pack(&x0, &y0), &opts.barrier)?;
    log::debug!("terminal LMI: margin {:.3e} after {} Newton steps", sol.margin, sol.newton_steps);
    if !(sol.margin >= opts.margin) {
        let (worst, min_eig) = sol
            .block_margins
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, e)| (i + 1, e))
            .unwrap_or((1, sol.margin));
        return Err(Error::LmiInfeasible { p: worst, min_eig });
    }
    let v = if loss_bound > 0 { extend(plant, period, loss_bound, &family, sol.v, opts)? } else { sol.v };
    let (x, y) = unpack(&v, n, m);
    let p_f = linalg::spd_inverse(&x, "LMI variable X")?;
    let k_f = &y * &p_f;
    let report = verify_qmi(&k_f, &p_f, plant, period, loss_bound)?;
    if !report.pass {
        let (p, ev) = report.worst();
        return Err(Error::Numerical(format!("synthesized pair fails the QMI check at p={p} (max eigenvalue {ev:.3e})")));
    }
    Ok((k_f, p_f))
}

/// Convex-concave iterations adding the block-extension conditions to the
/// LMI family. Each round linearizes at the current point; the restriction is
/// conservative, so any point it accepts satisfies the exact condition.
fn extend(
    plant: &PlantModel,
    period: usize,
    loss_bound: usize,
    family: &[AffineLmi],
    mut v: Vec<f64>,
    opts: &SynthesisOptions,
) -> Result<Vec<f64>> {
    let (n, m) = (plant.n(), plant.m());
    let lifts = lifted_blocks(plant, period, loss_bound)?;
    let worst = |v: &[f64]| -> Result<(usize, f64)> {
        let (x, y) = unpack(v, n, m);
        let p_f = linalg::spd_inverse(&x, "LMI variable X")?;
        let k_f = &y * &p_f;
        Ok((1..=loss_bound)
            .map(|p| (p, linalg::max_eigenvalue(&extension_residual(&lifts[p], &lifts[p + 1], &lifts[1], &k_f, &p_f))))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((1, f64::NEG_INFINITY)))
    };
    let mut prev = f64::NEG_INFINITY;
    for round in 0..EXTENSION_ROUNDS {
        let (p, ev) = worst(&v)?;
        log::debug!("extension round {round}: worst residual {ev:.3e} at p={p}, margin {prev:.3e}");
        if ev < 0.0 && prev > 0.0 {
            break;
        }
        let (xb, yb) = unpack(&v, n, m);
        let xb_inv = linalg::spd_inverse(&xb, "LMI variable X")?;
        let mut lmis = family.to_vec();
        for p in 1..=loss_bound {
            let zb = &lifts[p].a * &xb + &lifts[p].b * &yb;
            let at = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
                extension_lmi_matrix(&lifts[p], &lifts[p + 1], &lifts[1], (&xb_inv, &zb), x, y)
            };
            lmis.push(affine(n, m, at));
        }
        let sol = sdp::maximize_margin(&lmis, &v, &opts.barrier)?;
        v = sol.v;
        prev = sol.margin;
    }
    let (p, ev) = worst(&v)?;
    if ev > QMI_TOL {
        return Err(Error::LmiInfeasible { p, min_eig: -ev });
    }
    Ok(v)
}

/// `lifts[p]` is the lifting over `p` blocks, `p = 1..=P+1`; slot 0 repeats
/// slot 1 and is never read as a zero-length hold.
fn lifted_blocks(plant: &PlantModel, period: usize, loss_bound: usize) -> Result<Vec<LiftedMatrices>> {
    let mut lifts = (1..=loss_bound + 1).map(|p| lift(plant, p * period)).collect::<Result<Vec<_>>>()?;
    lifts.insert(0, lifts[0].clone());
    Ok(lifts)
}

/// Affine matrix function of `(svec(X), vec(Y))` from its evaluation.
fn affine(n: usize, m: usize, at: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>) -> AffineLmi {
    let nv = n * (n + 1) / 2 + m * n;
    let constant = at(&DMatrix::zeros(n, n), &DMatrix::zeros(m, n));
    let basis = (0..nv)
        .map(|i| {
            let (x, y) = unpack(&unit(nv, i), n, m);
            at(&x, &y) - &constant
        })
        .collect();
    AffineLmi { constant, basis }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = z.norm();
        if norm > 1e-12 {
            return z / norm;
        }
    }
}

/// Ray from the origin along `dir` to the boundary of `set`, scaled by `frac`.
/// Unbounded rays fall back to the unit vector itself.
fn ray_point(set: &ConstraintSet, dir: &DVector<f64>, frac: f64) -> DVector<f64> {
    match set {
        ConstraintSet::Unconstrained => dir * frac,
        ConstraintSet::Polytope { h_mat, h_vec } => {
            let hd = h_mat * dir;
            let reach = hd
                .iter()
                .zip(h_vec.iter())
                .filter(|(a, _)| **a > 1e-14)
                .map(|(a, h)| h / a)
                .fold(f64::INFINITY, f64::min);
            if reach.is_finite() {
                dir * (reach * frac)
            } else {
                dir * frac
            }
        }
    }
}

fn terminal_set_point(set: &TerminalSet, dir: &DVector<f64>, frac: f64) -> DVector<f64> {
    match set {
        TerminalSet::Unconstrained => dir * frac,
        TerminalSet::Ellipsoid { p, alpha } => {
            let q = quad_form(p, dir);
            if q <= 0.0 {
                dir * 0.0
            } else {
                dir * ((alpha / q).sqrt() * frac)
            }
        }
        TerminalSet::Polytope { h_mat, h_vec } => {
            ray_point(&ConstraintSet::Polytope { h_mat: h_mat.clone(), h_vec: h_vec.clone() }, dir, frac)
        }
    }
}

/// A sampled state that failed a check.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub check: &'static str,
    pub p: usize,
    pub x: DVector<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecreaseReport {
    pub samples: usize,
    pub seed: u64,
    /// Smallest `rhs - lhs` of the decrease inequality over all samples and `p`.
    pub worst_margin: f64,
    pub decrease_failures: usize,
    pub containment_failures: usize,
    pub witnesses: Vec<Witness>,
    pub pass: bool,
}

impl fmt::Display for DecreaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "decrease samples={} seed={} worst_margin={:.6e}", self.samples, self.seed, self.worst_margin)?;
        writeln!(
            f,
            "decrease failures={} containment_failures={}",
            self.decrease_failures, self.containment_failures
        )?;
        for w in self.witnesses.iter().take(5) {
            writeln!(f, "witness check={} p={} value={:.6e} x={:?}", w.check, w.p, w.value, w.x.as_slice())?;
        }
        write!(f, "decrease {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Samples terminal-set states and checks the terminal-cost decrease for every
/// `p = 1..=P+1` together with the set and inter-sample containments.
pub fn verify_decrease(
    terminal: &TerminalIngredients,
    plant: &PlantModel,
    spec: &TokenBucketSpec,
    state_set: &ConstraintSet,
    input_set: &ConstraintSet,
    samples: usize,
    seed: u64,
) -> DecreaseReport {
    let (n, m) = (plant.n(), plant.m());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = terminal.period;
    let mut report = DecreaseReport {
        samples,
        seed,
        worst_margin: f64::INFINITY,
        decrease_failures: 0,
        containment_failures: 0,
        witnesses: Vec::new(),
        pass: true,
    };
    let in_big_xi = |s: &OverallState| state_set.contains(&s.x) && input_set.contains(&s.w) && spec.contains(s.beta);

    for i in 0..samples {
        // alternate boundary and interior samples
        let frac = if i % 2 == 0 { 1.0 } else { rng.random::<f64>() };
        let x = terminal_set_point(&terminal.terminal_set, &random_unit(&mut rng, n), frac);
        let w = ray_point(input_set, &random_unit(&mut rng, m), rng.random::<f64>());
        let beta = rng.random_range(spec.c - spec.g..=spec.b);
        let xi = OverallState::new(x.clone(), w, beta);
        let packet = terminal.law(&xi);
        let vf0 = terminal.cost(&x);

        if !input_set.contains(&packet.v) {
            report.containment_failures += 1;
            report.witnesses.push(Witness { check: "gain", p: 0, x: x.clone(), value: input_set.residual(&packet.v) });
        }
        for j in 1..period {
            let inter = ncs_step(&xi, &packet.v, j, true, plant, spec);
            if !in_big_xi(&inter) {
                report.containment_failures += 1;
                report.witnesses.push(Witness { check: "inter-sample", p: 0, x: x.clone(), value: j as f64 });
            }
        }

        let mut rhs = -lifted::interval_cost(&xi, &packet, true, plant, spec);
        for p in 1..=terminal.loss_bound + 1 {
            let rolled = terminal_rollout(&xi, p, terminal, plant, spec);
            let lhs = terminal.cost(&rolled.x) - vf0;
            let margin = rhs - lhs;
            report.worst_margin = report.worst_margin.min(margin / vf0.max(1.0));
            if margin < -DECREASE_TOL * vf0.max(1.0) {
                report.decrease_failures += 1;
                report.witnesses.push(Witness { check: "decrease", p, x: x.clone(), value: margin });
            }
            if !terminal.contains(&rolled, input_set, spec) {
                report.containment_failures += 1;
                report.witnesses.push(Witness { check: "invariance", p, x: x.clone(), value: terminal.terminal_set.residual(&rolled.x) });
            }
            if p <= terminal.loss_bound {
                for j in 1..period {
                    let inter = ncs_step(&rolled, &packet.v, j, false, plant, spec);
                    if !in_big_xi(&inter) {
                        report.containment_failures += 1;
                        report.witnesses.push(Witness { check: "inter-sample", p, x: x.clone(), value: j as f64 });
                    }
                }
            }
            // next p adds the interval spent with the held input after this instant
            rhs -= lifted::interval_cost(&rolled, &packet, false, plant, spec);
        }
    }
    report.pass = report.decrease_failures == 0 && report.containment_failures == 0;
    report
}

/// Outcome of the terminal-set construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSetConstruction {
    pub set: TerminalSet,
    /// Level of the base ellipsoid before scaling, if one was used.
    pub base_level: Option<f64>,
    pub gamma: Option<f64>,
    pub warning: Option<String>,
}

/// Ellipsoidal terminal set `{x : x' P_f x <= alpha}` sized so that the gain
/// respects `U`, and the set and every inter-sample image under the held
/// terminal input stay inside `X`.
pub fn construct_terminal_set(
    k_f: &DMatrix<f64>,
    p_f: &DMatrix<f64>,
    plant: &PlantModel,
    state_set: &ConstraintSet,
    input_set: &ConstraintSet,
    period: usize,
    loss_bound: usize,
) -> Result<TerminalSetConstruction> {
    if state_set.is_unconstrained() && input_set.is_unconstrained() {
        return Ok(TerminalSetConstruction { set: TerminalSet::Unconstrained, base_level: None, gamma: None, warning: None });
    }
    let p_inv = linalg::spd_inverse(p_f, "terminal cost matrix")?;
    // support of {x'Px <= a} along direction d is sqrt(a d' P^-1 d)
    let spread = |d: &DVector<f64>| quad_form(&p_inv, d).max(0.0);

    let level_u = match input_set {
        ConstraintSet::Unconstrained => f64::INFINITY,
        ConstraintSet::Polytope { h_mat, h_vec } => (0..h_mat.nrows())
            .map(|i| {
                let dir = k_f.transpose() * h_mat.row(i).transpose();
                let q = spread(&dir);
                if q <= 1e-300 {
                    f64::INFINITY
                } else {
                    h_vec[i] * h_vec[i] / q
                }
            })
            .fold(f64::INFINITY, f64::min),
    };
    let base = if level_u.is_finite() { level_u } else { 1.0 };
    if base <= 0.0 {
        let warning = "input constraints only admit the origin under K_f; terminal set is {0}".to_string();
        log::warn!("{warning}");
        return Ok(TerminalSetConstruction {
            set: TerminalSet::Ellipsoid { p: p_f.clone(), alpha: 0.0 },
            base_level: Some(0.0),
            gamma: Some(0.0),
            warning: Some(warning),
        });
    }

    let mut gamma = f64::INFINITY;
    if let ConstraintSet::Polytope { h_mat, h_vec } = state_set {
        let mut maps = vec![DMatrix::identity(plant.n(), plant.n())];
        for p in 0..=loss_bound {
            for j in 1..period {
                let l = lift(plant, p * period + j)?;
                maps.push(&l.a + &l.b * k_f);
            }
        }
        for t in &maps {
            for i in 0..h_mat.nrows() {
                let dir = t.transpose() * h_mat.row(i).transpose();
                let support = (base * spread(&dir)).sqrt();
                if support > 1e-300 {
                    gamma = gamma.min(h_vec[i] / support);
                }
            }
        }
    }
    if level_u.is_finite() {
        gamma = gamma.min(1.0);
    }
    if !gamma.is_finite() {
        gamma = 1.0;
    }
    let alpha = gamma * gamma * base;
    let warning = if alpha <= 0.0 {
        let w = "state constraints only admit the origin; terminal set is {0}".to_string();
        log::warn!("{w}");
        Some(w)
    } else {
        None
    };
    let set = TerminalSet::Ellipsoid { p: p_f.clone(), alpha };
    let audit = audit_terminal_set(&set, k_f, plant, state_set, input_set, period, loss_bound, 500, AUDIT_SEED)?;
    if !audit.pass() {
        return Err(Error::Numerical(format!("constructed terminal set fails its audit: {audit:?}")));
    }
    Ok(TerminalSetConstruction { set, base_level: Some(base), gamma: Some(gamma), warning })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SetAudit {
    pub samples: usize,
    pub gain_failures: usize,
    pub inclusion_failures: usize,
    pub invariance_failures: usize,
    pub inter_sample_failures: usize,
}

impl SetAudit {
    pub fn pass(&self) -> bool {
        self.gain_failures + self.inclusion_failures + self.invariance_failures + self.inter_sample_failures == 0
    }
}

/// Sampled boundary check of the terminal-set conditions: `K_f X_f ⊆ U`,
/// `X_f ⊆ X`, invariance under the `pM`-step maps and inter-sample
/// containment in `X`.
#[allow(clippy::too_many_arguments)]
pub fn audit_terminal_set(
    set: &TerminalSet,
    k_f: &DMatrix<f64>,
    plant: &PlantModel,
    state_set: &ConstraintSet,
    input_set: &ConstraintSet,
    period: usize,
    loss_bound: usize,
    samples: usize,
    seed: u64,
) -> Result<SetAudit> {
    let n = plant.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let invariance: Vec<DMatrix<f64>> = (1..=loss_bound + 1)
        .map(|p| lift(plant, p * period).map(|l| &l.a + &l.b * k_f))
        .collect::<Result<_>>()?;
    let mut inter = Vec::new();
    for p in 0..=loss_bound {
        for j in 1..period {
            let l = lift(plant, p * period + j)?;
            inter.push(&l.a + &l.b * k_f);
        }
    }
    let mut audit = SetAudit { samples, ..Default::default() };
    for _ in 0..samples {
        let x = terminal_set_point(set, &random_unit(&mut rng, n), 1.0);
        if !input_set.contains(&(k_f * &x)) {
            audit.gain_failures += 1;
        }
        if !state_set.contains(&x) {
            audit.inclusion_failures += 1;
        }
        if invariance.iter().any(|t| !set.contains(&(t * &x))) {
            audit.invariance_failures += 1;
        }
        if inter.iter().any(|t| !state_set.contains(&(t * &x))) {
            audit.inter_sample_failures += 1;
        }
    }
    Ok(audit)
}

/// Synthesis, terminal-set construction and both verifications in one go.
#[derive(Debug, Clone)]
pub struct CertifiedTerminal {
    pub ingredients: TerminalIngredients,
    pub qmi: QmiReport,
    pub decrease: DecreaseReport,
    pub set_warning: Option<String>,
}

impl CertifiedTerminal {
    pub fn pass(&self) -> bool {
        self.qmi.pass && self.decrease.pass
    }
}

pub fn certify(
    plant: &PlantModel,
    spec: &TokenBucketSpec,
    loss_bound: usize,
    state_set: &ConstraintSet,
    input_set: &ConstraintSet,
    samples: usize,
) -> Result<CertifiedTerminal> {
    let period = spec.base_period();
    let (k_f, p_f) = synthesize(plant, spec, loss_bound)?;
    let construction = construct_terminal_set(&k_f, &p_f, plant, state_set, input_set, period, loss_bound)?;
    let ingredients = TerminalIngredients { k_f, p_f, period, loss_bound, terminal_set: construction.set };
    let qmi = verify_qmi(&ingredients.k_f, &ingredients.p_f, plant, period, loss_bound)?;
    let decrease = verify_decrease(&ingredients, plant, spec, state_set, input_set, samples, AUDIT_SEED);
    Ok(CertifiedTerminal { ingredients, qmi, decrease, set_warning: construction.warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64) -> PlantModel {
        PlantModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn scalar_terminal(p_f: f64) -> TerminalIngredients {
        TerminalIngredients {
            k_f: DMatrix::zeros(1, 1),
            p_f: DMatrix::from_element(1, 1, p_f),
            period: 1,
            loss_bound: 0,
            terminal_set: TerminalSet::Unconstrained,
        }
    }

    #[test]
    fn qmi_closed_form() {
        let plant = scalar(0.5, 1.0);
        let k = DMatrix::zeros(1, 1);
        let pass = verify_qmi(&k, &DMatrix::from_element(1, 1, 2.0), &plant, 1, 0).unwrap();
        assert!(pass.pass);
        assert!((pass.per_p[0].1 + 0.5).abs() < 1e-14);
        let fail = verify_qmi(&k, &DMatrix::from_element(1, 1, 1.0), &plant, 1, 0).unwrap();
        assert!(!fail.pass);
        assert!((fail.per_p[0].1 - 0.25).abs() < 1e-14);
    }

    #[test]
    fn synthesize_stable_scalar() {
        let plant = scalar(0.5, 1.0);
        let spec = TokenBucketSpec::new(1, 1, 4).unwrap();
        let (k, p) = synthesize(&plant, &spec, 0).unwrap();
        let report = verify_qmi(&k, &p, &plant, 1, 0).unwrap();
        assert!(report.pass && report.per_p[0].1 <= 0.0, "{report}");
    }

    #[test]
    fn synthesized_pair_covers_block_extension() {
        // unstable, so holding a stale input for another block costs something
        let plant = scalar(1.3, 1.0);
        let spec = TokenBucketSpec::new(1, 2, 6).unwrap();
        let (k, p) = synthesize(&plant, &spec, 2).unwrap();
        let report = verify_qmi(&k, &p, &plant, 2, 2).unwrap();
        assert_eq!(report.extension.len(), 2);
        assert!(report.pass, "{report}");
        // telescoping: (13) at p=1 plus extensions give (13) at p=3
        let lifts = lifted_blocks(&plant, 2, 2).unwrap();
        let mut sum = qmi_residual(&lifts[1], &k, &p);
        for q in 1..=2 {
            sum += extension_residual(&lifts[q], &lifts[q + 1], &lifts[1], &k, &p);
        }
        assert!((sum - qmi_residual(&lifts[3], &k, &p)).amax() < 1e-9 * p.amax());
    }

    #[test]
    fn synthesize_uncontrollable_unstable_is_infeasible() {
        let plant = scalar(2.0, 0.0);
        let spec = TokenBucketSpec::new(1, 2, 4).unwrap();
        for bound in [0, 2] {
            assert!(matches!(synthesize(&plant, &spec, bound), Err(Error::LmiInfeasible { .. })));
        }
    }

    #[test]
    fn decrease_hand_rollout() {
        let plant = scalar(0.5, 1.0);
        let spec = TokenBucketSpec::new(1, 1, 4).unwrap();
        let term = scalar_terminal(2.0);
        let xi = OverallState::new(DVector::from_element(1, 1.0), DVector::zeros(1), 2);
        let rolled = terminal_rollout(&xi, 1, &term, &plant, &spec);
        let lhs = term.cost(&rolled.x) - term.cost(&xi.x);
        let rhs = -lifted::interval_cost(&xi, &term.law(&xi), true, &plant, &spec);
        assert!((lhs + 1.5).abs() < 1e-14 && (rhs + 1.0).abs() < 1e-14);
        let report =
            verify_decrease(&term, &plant, &spec, &ConstraintSet::Unconstrained, &ConstraintSet::Unconstrained, 200, 1);
        assert!(report.pass, "{report}");
        let bad = verify_decrease(
            &scalar_terminal(1.0),
            &plant,
            &spec,
            &ConstraintSet::Unconstrained,
            &ConstraintSet::Unconstrained,
            50,
            1,
        );
        assert!(!bad.pass);
    }

    #[test]
    fn decrease_at_origin_is_tight() {
        let plant = scalar(0.5, 1.0);
        let spec = TokenBucketSpec::new(1, 1, 4).unwrap();
        let term = scalar_terminal(2.0);
        let xi = OverallState::zeros(1, 1, 3);
        let rolled = terminal_rollout(&xi, 1, &term, &plant, &spec);
        assert_eq!(term.cost(&rolled.x) - term.cost(&xi.x), 0.0);
        assert_eq!(lifted::interval_cost(&xi, &term.law(&xi), true, &plant, &spec), 0.0);
    }

    #[test]
    fn rollout_two_steps() {
        let plant = scalar(0.5, 1.0);
        let spec = TokenBucketSpec::new(1, 1, 4).unwrap();
        let term = scalar_terminal(2.0);
        let xi = OverallState::new(DVector::from_element(1, 8.0), DVector::from_element(1, 1.0), 3);
        let once = ncs_step(&xi, &DVector::zeros(1), 1, true, &plant, &spec);
        let twice = ncs_step(&once, &DVector::zeros(1), 1, false, &plant, &spec);
        let rolled = terminal_rollout(&xi, 2, &term, &plant, &spec);
        assert_eq!(rolled, twice);
        assert_eq!((rolled.x[0], rolled.w[0], rolled.beta), (2.0, 0.0, 3));
        assert_eq!(terminal_rollout(&xi, 1, &term, &plant, &spec), ncs_step(&xi, &DVector::zeros(1), 1, true, &plant, &spec));
    }

    #[test]
    fn terminal_set_examples() {
        let plant = scalar(0.5, 1.0);
        let k = DMatrix::zeros(1, 1);
        let p = DMatrix::from_element(1, 1, 2.0);
        let free = construct_terminal_set(&k, &p, &plant, &ConstraintSet::Unconstrained, &ConstraintSet::Unconstrained, 1, 0)
            .unwrap();
        assert_eq!(free.set, TerminalSet::Unconstrained);

        let xbox = ConstraintSet::symmetric_box(&[1.0]).unwrap();
        let built = construct_terminal_set(&k, &p, &plant, &xbox, &ConstraintSet::Unconstrained, 1, 0).unwrap();
        match built.set {
            TerminalSet::Ellipsoid { alpha, .. } => assert!((alpha - 2.0).abs() < 1e-12, "alpha {alpha}"),
            other => panic!("unexpected {other:?}"),
        }

        let origin_only = ConstraintSet::polytope(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let k1 = DMatrix::from_element(1, 1, -0.2);
        let built = construct_terminal_set(&k1, &p, &plant, &ConstraintSet::Unconstrained, &origin_only, 1, 0).unwrap();
        assert!(built.warning.is_some());
        assert_eq!(built.set, TerminalSet::Ellipsoid { p: p.clone(), alpha: 0.0 });
    }

    #[test]
    fn lqr_scalar_matches_riccati() {
        // a=1, b=1, q=r=1: p = (1 + sqrt 5) / 2, k = -p / (1 + p)
        let plant = PlantModel::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let (k, p) = dlqr(&lift(&plant, 1).unwrap()).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - golden).abs() < 1e-10);
        assert!((k[(0, 0)] + golden / (1.0 + golden)).abs() < 1e-10);
    }
}
