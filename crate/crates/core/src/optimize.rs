//! Gain search for a fixed interval word: Riccati proxy gains, a BFGS
//! minimizer, and smoothed worst-case descent over the scenario tree.

use nalgebra::{DMatrix, DVector};

use crate::controller::{Problem, SolverOptions};
use crate::lifted::OverallState;
use crate::linalg::symmetrize;
use crate::scenario::{adjoint, forward, ScenarioTree};

/// Time-varying Riccati gains for the all-success lifted system along `word`,
/// with terminal cost-to-go `P_f` pushed back through `loss_bound`
/// terminal-law intervals.
pub fn riccati_gains(p: &Problem<'_>, word: &[usize]) -> Vec<DMatrix<f64>> {
    let term = p.lifts.get(p.terminal.period);
    let k_f = &p.terminal.k_f;
    let closed = &term.a + &term.b * k_f;
    let cross = &term.s * k_f;
    let stage = &term.q + &cross + cross.transpose() + k_f.transpose() * &term.r * k_f;
    let mut cost = p.terminal.p_f.clone();
    for _ in 0..p.config.loss_bound {
        cost = symmetrize(&(closed.transpose() * &cost * &closed + &stage));
    }
    let mut gains = vec![DMatrix::zeros(p.plant.m(), p.plant.n()); word.len()];
    for i in (0..word.len()).rev() {
        let l = p.lifts.get(word[i]);
        let btp = l.b.transpose() * &cost;
        let h = &l.r + &btp * &l.b;
        let g = &btp * &l.a + l.s.transpose();
        let k = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => DMatrix::zeros(p.plant.m(), p.plant.n()),
        };
        cost = symmetrize(&(&l.q + l.a.transpose() * &cost * &l.a + g.transpose() * &k));
        gains[i] = k;
    }
    gains
}

fn pack(gains: &[DMatrix<f64>]) -> DVector<f64> {
    DVector::from_iterator(gains.iter().map(|k| k.len()).sum(), gains.iter().flat_map(|k| k.iter().copied()))
}

fn unpack(theta: &DVector<f64>, m: usize, n: usize) -> Vec<DMatrix<f64>> {
    theta.as_slice().chunks(m * n).map(|c| DMatrix::from_column_slice(m, n, c)).collect()
}

/// Minimizes a smooth function with BFGS and Armijo backtracking.
/// `f` returns the value and writes the gradient.
pub fn bfgs<F>(mut f: F, x0: DVector<f64>, max_iter: usize) -> DVector<f64>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let dim = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(dim);
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return x;
    }
    let mut h: Option<DMatrix<f64>> = None;
    let mut stalls = 0;
    for _ in 0..max_iter {
        let mut d = match &h {
            Some(h) => -(h * &g),
            None => {
                let gmax = g.amax();
                if gmax == 0.0 {
                    break;
                }
                -&g * (0.1 * x.amax().max(1.0) / gmax)
            }
        };
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            h = None;
            let gmax = g.amax();
            if gmax == 0.0 {
                break;
            }
            d = -&g * (0.1 * x.amax().max(1.0) / gmax);
            slope = g.dot(&d);
        }
        if slope.abs() <= 1e-15 * fx.abs() {
            break;
        }
        let mut step = 1.0;
        let mut gn = DVector::zeros(dim);
        let (xn, fnew) = loop {
            let xn = &x + &d * step;
            let fnew = f(&xn, &mut gn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                break (xn, fnew);
            }
            step *= 0.5;
            if step < 1e-12 {
                return x;
            }
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let mut hm = h.take().unwrap_or_else(|| DMatrix::identity(dim, dim) * (sy / y.dot(&y)));
            let hy = &hm * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s (Hy)' + Hy s') + (rho^2 y'Hy + rho) s s'
            hm.ger(-rho, &s, &hy, 1.0);
            hm.ger(-rho, &hy, &s, 1.0);
            hm.ger(rho * rho * yhy + rho, &s, &s, 1.0);
            h = Some(hm);
        }
        let improvement = fx - fnew;
        x = xn;
        g = gn;
        fx = fnew;
        if improvement <= 1e-13 * fx.abs() {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    x
}

/// Feasible beats infeasible; then lower worst case, or lower residual
/// among infeasible points.
fn better((worst, residual): (f64, f64), (b_worst, b_residual): (f64, f64)) -> bool {
    let tol = crate::constraints::MEMBERSHIP_TOL;
    match (residual <= tol, b_residual <= tol) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => worst < b_worst,
        (false, false) => residual < b_residual,
    }
}

/// Outcome of gain descent for one interval word.
#[derive(Debug, Clone)]
pub struct Descent {
    pub gains: Vec<DMatrix<f64>>,
    /// Worst-case objective of `gains` (no penalties).
    pub worst: f64,
    pub max_residual: f64,
    pub evaluations: usize,
}

/// Smoothed worst-case descent. The worst case is replaced by
/// `(1/tau) log sum exp(tau J_l)` with `tau` raised stage by stage; the best
/// iterate by exact worst case (feasible first) is returned.
pub fn descend(
    tree: &ScenarioTree,
    p: &Problem<'_>,
    xi0: &OverallState,
    word: &[usize],
    start: Vec<DMatrix<f64>>,
    opts: &SolverOptions,
) -> Descent {
    let (m, n) = (p.plant.m(), p.plant.n());
    let first = forward(tree, p, xi0, word, &start, 0.0);
    let mut best = Descent { worst: first.worst(), max_residual: first.max_residual, gains: start, evaluations: 1 };
    if !(best.worst > f64::MIN_POSITIVE) || opts.max_iterations == 0 {
        return best;
    }
    let mut theta = pack(&best.gains);
    let mut rho = opts.penalty_weight;
    for &temp in &opts.temperatures {
        let scale = best.worst.max(1e-300);
        let tau = temp / scale;
        let mut evaluations = 0;
        let mut record: Option<(f64, f64, DVector<f64>)> = None;
        theta = bfgs(
            |th, grad| {
                evaluations += 1;
                let gains = unpack(th, m, n);
                let pass = forward(tree, p, xi0, word, &gains, rho);
                let top = pass.worst_penalized();
                if !top.is_finite() {
                    return f64::INFINITY;
                }
                let expo: Vec<f64> = pass.penalized.iter().map(|v| (tau * (v - top)).exp()).collect();
                let sum: f64 = expo.iter().sum();
                let weights: Vec<f64> = expo.iter().map(|e| e / sum).collect();
                let grads = adjoint(tree, &pass, p, word, &gains, rho, &weights);
                grad.copy_from(&pack(&grads));
                let (worst, residual) = (pass.worst(), pass.max_residual);
                let improves = match &record {
                    None => true,
                    Some((w, r, _)) => better((worst, residual), (*w, *r)),
                };
                if improves {
                    record = Some((worst, residual, th.clone()));
                }
                top + sum.ln() / tau
            },
            theta,
            opts.max_iterations,
        );
        best.evaluations += evaluations;
        if let Some((worst, residual, th)) = record {
            if better((worst, residual), (best.worst, best.max_residual)) {
                best.gains = unpack(&th, m, n);
                best.worst = worst;
                best.max_residual = residual;
            }
        }
        rho *= opts.penalty_growth;
    }
    best
}
