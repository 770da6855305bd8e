//! Plant model, lifted dynamics under held inputs, stage and interval costs,
//! and the combined NCS transition map.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, quad_form};
use crate::network::TokenBucketSpec;
use crate::terminal::TerminalIngredients;

/// Absolute/relative tolerances for internal cross-checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { abs: 1e-9, rel: 1e-9 }
    }
}

impl Tolerances {
    pub fn close(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.abs + self.rel * a.abs().max(b.abs())
    }
}

/// Discrete-time LTI plant `x+ = A x + B u` with stage cost `x'Qx + u'Ru`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square and nonempty, got {:?}", a.shape())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!("B must be {n}xm with m >= 1, got {:?}", b.shape())));
        }
        let m = b.ncols();
        if q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q must be {n}x{n}, got {:?}", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension(format!("R must be {m}x{m}, got {:?}", r.shape())));
        }
        for (name, w) in [("Q", &q), ("R", &r)] {
            if (w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0) {
                return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
            }
            let lo = linalg::min_eigenvalue(w);
            if !(lo > 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive definite (min eigenvalue {lo:.3e})"
                )));
            }
        }
        Ok(Self { a, b, q, r })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// NCS state: plant state, input held by the actuator, bucket level.
#[derive(Debug, Clone, PartialEq)]
pub struct OverallState {
    pub x: DVector<f64>,
    pub w: DVector<f64>,
    pub beta: i64,
}

impl OverallState {
    pub fn new(x: DVector<f64>, w: DVector<f64>, beta: i64) -> Self {
        Self { x, w, beta }
    }

    pub fn zeros(n: usize, m: usize, beta: i64) -> Self {
        Self { x: DVector::zeros(n), w: DVector::zeros(m), beta }
    }
}

/// Transmitted control update and the chosen sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPacket {
    pub v: DVector<f64>,
    pub delta: usize,
}

/// Input the actuator applies after the packet's fate is known.
pub fn applied_input(w: &DVector<f64>, v: &DVector<f64>, sigma: bool) -> DVector<f64> {
    if sigma {
        v.clone()
    } else {
        w.clone()
    }
}

/// Lifted matrices for an input held over `horizon` steps, together with
/// the interval cost blocks and the blocks of their joint inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedMatrices {
    pub horizon: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
}

impl LiftedMatrices {
    /// `[Q_j S_j; S_j' R_j]`.
    pub fn cost_block(&self) -> DMatrix<f64> {
        assemble_blocks(&self.q, &self.s, &self.r)
    }

    /// Interval cost `z' [Q_j S_j; S_j' R_j] z` with `z = (x, u)`.
    pub fn quadratic_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        quad_form(&self.q, x) + 2.0 * x.dot(&(&self.s * u)) + quad_form(&self.r, u)
    }
}

pub(crate) fn assemble_blocks(q: &DMatrix<f64>, s: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (q.nrows(), r.nrows());
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(q);
    out.view_mut((0, n), (n, m)).copy_from(s);
    out.view_mut((n, 0), (m, n)).copy_from(&s.transpose());
    out.view_mut((n, n), (m, m)).copy_from(r);
    out
}

/// Lifts the plant to a hold length `j >= 1`.
///
/// `A_j = A^j`, `B_j = sum_{i<j} A^i B`, and with `A_0 = I`, `B_0 = 0`:
/// `Q_j = sum_{i<j} A_i' Q A_i`, `S_j = sum_{i<j} A_i' Q B_i`,
/// `R_j = j R + sum_{i<j} B_i' Q B_i`.
pub fn lift(plant: &PlantModel, j: usize) -> Result<LiftedMatrices> {
    if j == 0 {
        return Err(Error::InvalidParameter("hold length must be at least 1".into()));
    }
    let (n, m) = (plant.n(), plant.m());
    let mut a_i = DMatrix::identity(n, n);
    let mut b_i = DMatrix::zeros(n, m);
    let mut q = DMatrix::zeros(n, n);
    let mut s = DMatrix::zeros(n, m);
    let mut r = plant.r() * (j as f64);
    for _ in 0..j {
        let qa = plant.q() * &a_i;
        q += a_i.transpose() * &qa;
        s += qa.transpose() * &b_i;
        r += b_i.transpose() * plant.q() * &b_i;
        b_i = &a_i * plant.b() + &b_i;
        a_i = plant.a() * &a_i;
    }
    let q = linalg::symmetrize(&q);
    let r = linalg::symmetrize(&r);
    let inv = linalg::spd_inverse(&assemble_blocks(&q, &s, &r), "lifted cost block")?;
    Ok(LiftedMatrices {
        horizon: j,
        a: a_i,
        b: b_i,
        q_inv: inv.view((0, 0), (n, n)).into_owned(),
        s_inv: inv.view((0, n), (n, m)).into_owned(),
        r_inv: inv.view((n, n), (m, m)).into_owned(),
        q,
        s,
        r,
    })
}

/// Lifted matrices for hold lengths `1..=max`, computed once.
#[derive(Debug, Clone)]
pub struct LiftTable {
    table: Vec<LiftedMatrices>,
}

impl LiftTable {
    pub fn new(plant: &PlantModel, max: usize) -> Result<Self> {
        let table = (1..=max.max(1)).map(|j| lift(plant, j)).collect::<Result<Vec<_>>>()?;
        Ok(Self { table })
    }

    pub fn get(&self, j: usize) -> &LiftedMatrices {
        &self.table[j - 1]
    }

    pub fn max_horizon(&self) -> usize {
        self.table.len()
    }
}

/// `x'Qx + (1-σ) w'Rw + σ v'Rv`.
pub fn stage_cost(state: &OverallState, packet: &ControlPacket, sigma: bool, plant: &PlantModel) -> f64 {
    let input_cost = if sigma { quad_form(plant.r(), &packet.v) } else { quad_form(plant.r(), &state.w) };
    quad_form(plant.q(), &state.x) + input_cost
}

/// State after holding the applied input for `j` steps following a
/// transmission of `v` with outcome `sigma`.
pub fn ncs_step(
    state: &OverallState,
    v: &DVector<f64>,
    j: usize,
    sigma: bool,
    plant: &PlantModel,
    bucket: &TokenBucketSpec,
) -> OverallState {
    let u = applied_input(&state.w, v, sigma);
    let mut x = state.x.clone();
    for _ in 0..j {
        x = plant.step(&x, &u);
    }
    OverallState { x, w: u, beta: bucket.level_after(state.beta, j) }
}

/// Same transition using precomputed lifted matrices.
pub fn ncs_step_lifted(
    state: &OverallState,
    v: &DVector<f64>,
    sigma: bool,
    lifted: &LiftedMatrices,
    bucket: &TokenBucketSpec,
) -> OverallState {
    let u = applied_input(&state.w, v, sigma);
    OverallState {
        x: &lifted.a * &state.x + &lifted.b * &u,
        beta: bucket.level_after(state.beta, lifted.horizon),
        w: u,
    }
}

/// Cost accumulated over one sampling interval, as an explicit step sum.
///
/// Debug builds cross-check against the lifted closed form.
pub fn interval_cost(
    state: &OverallState,
    packet: &ControlPacket,
    sigma: bool,
    plant: &PlantModel,
    bucket: &TokenBucketSpec,
) -> f64 {
    let mut total = stage_cost(state, packet, sigma, plant);
    for j in 1..packet.delta {
        let next = ncs_step(state, &packet.v, j, sigma, plant, bucket);
        total += stage_cost(&next, packet, sigma, plant);
    }
    #[cfg(debug_assertions)]
    if let Ok(lifted) = lift(plant, packet.delta.max(1)) {
        let closed = interval_cost_lifted(state, packet, sigma, &lifted);
        debug_assert!(
            Tolerances { abs: 1e-9, rel: 1e-7 }.close(total, closed),
            "interval cost mismatch: step sum {total}, lifted {closed}"
        );
    }
    total
}

/// Interval cost through the lifted quadratic form.
pub fn interval_cost_lifted(state: &OverallState, packet: &ControlPacket, sigma: bool, lifted: &LiftedMatrices) -> f64 {
    let u = applied_input(&state.w, &packet.v, sigma);
    lifted.quadratic_cost(&state.x, &u)
}

/// State after `p >= 1` sampling instants under the terminal law with loss
/// word `1, 0, ..., 0`.
pub fn terminal_rollout(
    state: &OverallState,
    p: usize,
    terminal: &TerminalIngredients,
    plant: &PlantModel,
    bucket: &TokenBucketSpec,
) -> OverallState {
    assert!(p >= 1, "terminal rollout needs p >= 1");
    let v = &terminal.k_f * &state.x;
    let mut xi = ncs_step(state, &v, terminal.period, true, plant, bucket);
    for _ in 1..p {
        xi = ncs_step(&xi, &v, terminal.period, false, plant, bucket);
    }
    xi
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(a: f64, b: f64, q: f64, r: f64) -> PlantModel {
        PlantModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn lift_scalar_examples() {
        let plant = scalar(2.0, 1.0, 1.0, 1.0);
        let l3 = lift(&plant, 3).unwrap();
        assert_eq!(l3.a[(0, 0)], 8.0);
        assert_eq!(l3.b[(0, 0)], 7.0);
        let l2 = lift(&plant, 2).unwrap();
        assert_eq!((l2.q[(0, 0)], l2.s[(0, 0)], l2.r[(0, 0)]), (5.0, 2.0, 3.0));
        // inverse of [[5,2],[2,3]] is [[3,-2],[-2,5]] / 11
        assert_relative_eq!(l2.q_inv[(0, 0)], 3.0 / 11.0, epsilon = 1e-14);
        assert_relative_eq!(l2.s_inv[(0, 0)], -2.0 / 11.0, epsilon = 1e-14);
        assert_relative_eq!(l2.r_inv[(0, 0)], 5.0 / 11.0, epsilon = 1e-14);
    }

    #[test]
    fn lift_one_is_plant() {
        let plant = PlantModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();
        let l1 = lift(&plant, 1).unwrap();
        assert_eq!(&l1.a, plant.a());
        assert_eq!(&l1.b, plant.b());
        assert_eq!(&l1.q, plant.q());
        assert_eq!(l1.s, DMatrix::zeros(2, 1));
        assert_eq!(&l1.r, plant.r());
        assert!(lift(&plant, 0).is_err());
    }

    #[test]
    fn plant_validation() {
        let bad_q = PlantModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DMatrix::identity(1, 1),
        );
        assert!(matches!(bad_q, Err(Error::InvalidParameter(_))));
        let bad_dims = PlantModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
        );
        assert!(matches!(bad_dims, Err(Error::Dimension(_))));
    }

    #[test]
    fn stage_cost_examples() {
        let plant = scalar(2.0, 1.0, 1.0, 1.0);
        let xi = OverallState::new(v1(1.0), v1(2.0), 0);
        let pk = ControlPacket { v: v1(3.0), delta: 1 };
        assert_eq!(stage_cost(&xi, &pk, true, &plant), 10.0);
        assert_eq!(stage_cost(&xi, &pk, false, &plant), 5.0);
        let zero = OverallState::zeros(1, 1, 3);
        let pk0 = ControlPacket { v: v1(0.0), delta: 1 };
        assert_eq!(stage_cost(&zero, &pk0, true, &plant), 0.0);
        assert_eq!(stage_cost(&zero, &pk0, false, &plant), 0.0);
    }

    #[test]
    fn ncs_step_examples() {
        let plant = scalar(2.0, 1.0, 1.0, 1.0);
        let bucket = TokenBucketSpec::new(1, 3, 14).unwrap();
        let xi = OverallState::new(v1(1.0), v1(2.0), 5);
        let next = ncs_step(&xi, &v1(3.0), 2, true, &plant, &bucket);
        assert_eq!((next.x[0], next.w[0], next.beta), (13.0, 3.0, 4));
        let next = ncs_step(&xi, &v1(3.0), 2, false, &plant, &bucket);
        assert_eq!((next.x[0], next.w[0], next.beta), (10.0, 2.0, 4));
        let origin = OverallState::zeros(1, 1, 5);
        let next = ncs_step(&origin, &v1(0.0), 3, true, &plant, &bucket);
        assert_eq!((next.x[0], next.w[0]), (0.0, 0.0));
    }

    #[test]
    fn interval_cost_examples() {
        let plant = scalar(2.0, 1.0, 1.0, 1.0);
        let bucket = TokenBucketSpec::new(1, 3, 14).unwrap();
        let xi = OverallState::new(v1(1.0), v1(2.0), 5);
        let pk = ControlPacket { v: v1(3.0), delta: 2 };
        assert_eq!(interval_cost(&xi, &pk, true, &plant, &bucket), 44.0);
        let l2 = lift(&plant, 2).unwrap();
        assert_eq!(interval_cost_lifted(&xi, &pk, true, &l2), 44.0);
        let pk1 = ControlPacket { v: v1(3.0), delta: 1 };
        for sigma in [true, false] {
            assert_eq!(interval_cost(&xi, &pk1, sigma, &plant, &bucket), stage_cost(&xi, &pk1, sigma, &plant));
        }
        let zero = OverallState::zeros(1, 1, 5);
        let pk0 = ControlPacket { v: v1(0.0), delta: 4 };
        assert_eq!(interval_cost(&zero, &pk0, true, &plant, &bucket), 0.0);
    }

    #[test]
    fn lift_table_matches_lift() {
        let plant = scalar(0.7, 1.0, 2.0, 1.0);
        let table = LiftTable::new(&plant, 5).unwrap();
        assert_eq!(table.max_horizon(), 5);
        assert_eq!(table.get(4), &lift(&plant, 4).unwrap());
    }
}
