//! Dense log-det barrier solver for `max s  s.t.  F_k(v) - s I >= 0` over a
//! family of affine symmetric matrix functions `F_k(v) = C_k + sum_i v_i G_ki`.
//!
//! Sizes here are tiny (a handful of blocks of dimension below ~20 and a few
//! dozen variables), so every Newton step forms the full Hessian.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct AffineLmi {
    pub constant: DMatrix<f64>,
    pub basis: Vec<DMatrix<f64>>,
}

impl AffineLmi {
    pub fn eval(&self, v: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (g, &vi) in self.basis.iter().zip(v) {
            if vi != 0.0 {
                out += g * vi;
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    /// Stop once the barrier gap `total_dim / t` is below `rel_gap * |s| + abs_gap`.
    pub rel_gap: f64,
    pub abs_gap: f64,
    pub t_growth: f64,
    pub max_newton: usize,
    /// Stop early once `s` exceeds this value.
    pub target: Option<f64>,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self { rel_gap: 1e-6, abs_gap: 1e-14, t_growth: 8.0, max_newton: 200, target: None }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub v: Vec<f64>,
    /// Smallest eigenvalue over all blocks at `v`.
    pub margin: f64,
    /// Per-block smallest eigenvalue.
    pub block_margins: Vec<f64>,
    pub newton_steps: usize,
}

fn shifted_inverse(f: &DMatrix<f64>, s: f64) -> Option<(DMatrix<f64>, f64)> {
    let mut m = linalg::symmetrize(f);
    for i in 0..m.nrows() {
        m[(i, i)] -= s;
    }
    let chol = m.cholesky()?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((chol.inverse(), logdet))
}

/// Barrier value `-t s - sum log det(F_k(v) - s I)`, or `None` outside the domain.
fn barrier(lmis: &[AffineLmi], v: &[f64], s: f64, t: f64) -> Option<f64> {
    let mut val = -t * s;
    for lmi in lmis {
        let (_, logdet) = shifted_inverse(&lmi.eval(v), s)?;
        val -= logdet;
    }
    Some(val)
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(A B) for square matrices
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

/// Maximizes the common eigenvalue margin `s` starting from a point `v0`.
pub fn maximize_margin(lmis: &[AffineLmi], v0: &[f64], opts: &BarrierOptions) -> Result<BarrierSolution> {
    let nv = v0.len();
    if lmis.iter().any(|l| l.basis.len() != nv) {
        return Err(Error::Dimension("LMI basis size does not match variable count".into()));
    }
    let total_dim: usize = lmis.iter().map(AffineLmi::dim).sum();
    let mut v = v0.to_vec();
    let lowest = lmis
        .iter()
        .map(|l| linalg::min_eigenvalue(&l.eval(&v)))
        .fold(f64::INFINITY, f64::min);
    let mut s = lowest - 1.0;
    let mut t = 1.0;
    let mut steps = 0;

    'outer: loop {
        // centering
        for _ in 0..opts.max_newton {
            let d = nv + 1;
            let mut grad = DVector::zeros(d);
            let mut hess = DMatrix::zeros(d, d);
            grad[nv] = -t;
            for lmi in lmis {
                let (w, _) = shifted_inverse(&lmi.eval(&v), s)
                    .ok_or_else(|| Error::Numerical("barrier iterate left the domain".into()))?;
                let wg: Vec<DMatrix<f64>> = lmi.basis.iter().map(|g| &w * g).collect();
                let ww = &w * &w;
                for i in 0..nv {
                    grad[i] -= wg[i].trace();
                    for j in i..nv {
                        let h = trace_product(&wg[i], &wg[j]);
                        hess[(i, j)] += h;
                        if i != j {
                            hess[(j, i)] += h;
                        }
                    }
                    let his = -trace_product(&wg[i], &w);
                    hess[(i, nv)] += his;
                    hess[(nv, i)] += his;
                }
                grad[nv] += w.trace();
                hess[(nv, nv)] += ww.trace();
            }
            let step = match hess.clone().cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => {
                    let reg = 1e-12 * hess.diagonal().amax().max(1e-300);
                    let mut h = hess.clone();
                    for i in 0..d {
                        h[(i, i)] += reg;
                    }
                    match h.lu().solve(&grad) {
                        Some(x) => -x,
                        None => return Err(Error::Numerical("singular barrier Hessian".into())),
                    }
                }
            };
            let decrement = -grad.dot(&step);
            steps += 1;
            if decrement / 2.0 < 1e-10 {
                break;
            }
            let f0 = barrier(lmis, &v, s, t).unwrap_or(f64::INFINITY);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let vn: Vec<f64> = v.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
                let sn = s + alpha * step[nv];
                if let Some(f1) = barrier(lmis, &vn, sn, t) {
                    if f1 <= f0 - 0.25 * alpha * decrement {
                        v = vn;
                        s = sn;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            if let Some(target) = opts.target {
                if s >= target {
                    break 'outer;
                }
            }
        }
        if total_dim as f64 / t <= opts.rel_gap * s.abs() + opts.abs_gap {
            break;
        }
        t *= opts.t_growth;
        if t > 1e18 {
            break;
        }
    }

    let block_margins: Vec<f64> = lmis.iter().map(|l| linalg::min_eigenvalue(&l.eval(&v))).collect();
    let margin = block_margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(BarrierSolution { v, margin, block_margins, newton_steps: steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_interval_margin() {
        // blocks [v] and [2 - v]: best margin is 1 at v = 1
        let lmis = vec![
            AffineLmi { constant: DMatrix::zeros(1, 1), basis: vec![DMatrix::identity(1, 1)] },
            AffineLmi { constant: DMatrix::from_element(1, 1, 2.0), basis: vec![-DMatrix::identity(1, 1)] },
        ];
        let sol = maximize_margin(&lmis, &[5.0], &BarrierOptions::default()).unwrap();
        assert!((sol.v[0] - 1.0).abs() < 1e-6, "{:?}", sol.v);
        assert!((sol.margin - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matrix_margin() {
        // [[1, v], [v, 1]] has eigenvalues 1 +- v; optimum v = 0, margin 1
        let lmis = vec![AffineLmi {
            constant: DMatrix::identity(2, 2),
            basis: vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])],
        }];
        let sol = maximize_margin(&lmis, &[0.7], &BarrierOptions::default()).unwrap();
        assert!(sol.v[0].abs() < 1e-6);
        assert!((sol.margin - 1.0).abs() < 1e-6);
    }
}
