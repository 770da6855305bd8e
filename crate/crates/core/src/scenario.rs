//! Prefix tree over an admissible loss set. A forward pass rolls a feedback
//! policy along every scenario at once (scenarios sharing a loss prefix share
//! the predicted state), and an adjoint pass returns the gradient of a
//! weighted sum of scenario costs with respect to the gains.

use nalgebra::{DMatrix, DVector};

use crate::controller::Problem;
use crate::lifted::OverallState;
use crate::network::LossSequence;

#[derive(Debug, Clone, Copy)]
struct Node {
    parent: usize,
    bit: bool,
    depth: usize,
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    /// Node index of the leaf of each word, in the order of the input set.
    leaves: Vec<usize>,
    depth: usize,
}

impl ScenarioTree {
    /// Builds the tree; all words must have the same length. Parents always
    /// precede their children in node order.
    pub fn new(words: &[LossSequence]) -> Self {
        let depth = words.first().map_or(0, LossSequence::len);
        let mut nodes = vec![Node { parent: usize::MAX, bit: true, depth: 0 }];
        let mut children: Vec<[Option<usize>; 2]> = vec![[None, None]];
        let mut leaves = Vec::with_capacity(words.len());
        for word in words {
            assert_eq!(word.len(), depth, "scenario words must share one length");
            let mut at = 0;
            for (d, &bit) in word.bits().iter().enumerate() {
                let slot = bit as usize;
                at = match children[at][slot] {
                    Some(next) => next,
                    None => {
                        nodes.push(Node { parent: at, bit, depth: d + 1 });
                        children.push([None, None]);
                        let id = nodes.len() - 1;
                        children[at][slot] = Some(id);
                        id
                    }
                };
            }
            leaves.push(at);
        }
        Self { nodes, leaves, depth }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn scenario_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    x: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
    /// Per scenario: objective without penalties.
    pub values: Vec<f64>,
    /// Per scenario: objective plus `rho` times the constraint penalties.
    pub penalized: Vec<f64>,
    /// Largest constraint residual met anywhere in the tree.
    pub max_residual: f64,
}

impl Pass {
    pub fn worst(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn worst_penalized(&self) -> f64 {
        self.penalized.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Interval and gain used at depth `d`.
fn stage<'a>(p: &'a Problem<'_>, word: &[usize], gains: &'a [DMatrix<f64>], d: usize) -> (usize, &'a DMatrix<f64>) {
    if d < word.len() {
        (word[d], &gains[d])
    } else {
        (p.terminal.period, &p.terminal.k_f)
    }
}

/// Node penalties: returns `(penalty, residual)` and accumulates gradients
/// with respect to `(x, w, v)` scaled by `scale` when buffers are given.
fn node_penalty(
    p: &Problem<'_>,
    horizon: usize,
    depth: usize,
    x: &DVector<f64>,
    w: &DVector<f64>,
    v: Option<&DVector<f64>>,
    scale: f64,
    grads: Option<(&mut DVector<f64>, &mut DVector<f64>, &mut DVector<f64>)>,
) -> (f64, f64) {
    let input = &p.config.input_set;
    let (mut gx, mut gw, mut gv) = match grads {
        Some((a, b, c)) => (Some(a), Some(b), Some(c)),
        None => (None, None, None),
    };
    let mut pen = input.penalty(w, scale, gw.as_deref_mut());
    let mut res = input.residual(w);
    if depth < horizon {
        pen += p.config.state_set.penalty(x, scale, gx.as_deref_mut());
        res = res.max(p.config.state_set.residual(x));
        if let Some(v) = v {
            pen += input.penalty(v, scale, gv.as_deref_mut());
            res = res.max(input.residual(v));
        }
    } else {
        pen += p.terminal.terminal_set.penalty(x, scale, gx.as_deref_mut());
        res = res.max(p.terminal.terminal_set.residual(x));
    }
    (pen, res)
}

fn constrained(p: &Problem<'_>) -> bool {
    !(p.config.state_set.is_unconstrained()
        && p.config.input_set.is_unconstrained()
        && matches!(p.terminal.terminal_set, crate::terminal::TerminalSet::Unconstrained))
}

/// Rolls the policy `(word, gains)` from `xi0` along every scenario.
pub fn forward(
    tree: &ScenarioTree,
    p: &Problem<'_>,
    xi0: &OverallState,
    word: &[usize],
    gains: &[DMatrix<f64>],
    rho: f64,
) -> Pass {
    let horizon = word.len();
    let checks = constrained(p);
    let count = tree.nodes.len();
    let mut x = Vec::with_capacity(count);
    let mut w = Vec::with_capacity(count);
    let mut raw = vec![0.0; count];
    let mut pen = vec![0.0; count];
    let mut max_residual = f64::NEG_INFINITY;
    x.push(xi0.x.clone());
    w.push(xi0.w.clone());
    if checks {
        let v = &gains[0] * &xi0.x;
        let (pn, res) = node_penalty(p, horizon, 0, &xi0.x, &xi0.w, Some(&v), 1.0, None);
        pen[0] = rho * pn;
        max_residual = max_residual.max(res);
    }
    for i in 1..count {
        let node = tree.nodes[i];
        let q = node.parent;
        let d = node.depth - 1;
        let (delta, k) = stage(p, word, gains, d);
        let lifted = p.lifts.get(delta);
        let u = if node.bit { k * &x[q] } else { w[q].clone() };
        let xn = &lifted.a * &x[q] + &lifted.b * &u;
        raw[i] = raw[q] + lifted.quadratic_cost(&x[q], &u);
        pen[i] = pen[q];
        if checks {
            if d < horizon {
                for j in 1..delta {
                    let l = p.lifts.get(j);
                    let z = &l.a * &x[q] + &l.b * &u;
                    pen[i] += rho * p.config.state_set.penalty(&z, 1.0, None);
                    max_residual = max_residual.max(p.config.state_set.residual(&z));
                }
            }
            let v = if node.depth < horizon { Some(&gains[node.depth] * &xn) } else { None };
            let (pn, res) = node_penalty(p, horizon, node.depth, &xn, &u, v.as_ref(), 1.0, None);
            pen[i] += rho * pn;
            max_residual = max_residual.max(res);
        }
        x.push(xn);
        w.push(u);
    }
    let mut values = Vec::with_capacity(tree.leaves.len());
    let mut penalized = Vec::with_capacity(tree.leaves.len());
    for &leaf in &tree.leaves {
        let vf = p.terminal.cost(&x[leaf]);
        values.push(raw[leaf] + vf);
        penalized.push(raw[leaf] + pen[leaf] + vf);
    }
    Pass { x, w, values, penalized, max_residual }
}

/// Worst scenario objective without constraint checks, using flat buffers.
/// Only meaningful for problems without state, input or terminal-set constraints.
pub fn worst_unconstrained(
    tree: &ScenarioTree,
    p: &Problem<'_>,
    xi0: &OverallState,
    word: &[usize],
    gains: &[DMatrix<f64>],
    scratch: &mut Scratch,
) -> f64 {
    let (n, m) = (p.plant.n(), p.plant.m());
    let count = tree.nodes.len();
    scratch.x.resize(count * n, 0.0);
    scratch.w.resize(count * m, 0.0);
    scratch.acc.resize(count, 0.0);
    scratch.u.resize(m, 0.0);
    scratch.y.resize(n, 0.0);
    scratch.x[..n].copy_from_slice(xi0.x.as_slice());
    scratch.w[..m].copy_from_slice(xi0.w.as_slice());
    scratch.acc[0] = 0.0;
    let Scratch { x, w, acc, u, y } = scratch;
    for i in 1..count {
        let node = tree.nodes[i];
        let q = node.parent;
        let (delta, k) = stage(p, word, gains, node.depth - 1);
        let l = p.lifts.get(delta);
        let (xq, rest) = x.split_at_mut(i * n);
        let xq = &xq[q * n..q * n + n];
        if node.bit {
            matvec(k.as_slice(), m, n, xq, u);
        } else {
            u.copy_from_slice(&w[q * m..q * m + m]);
        }
        // cost x'Qx + 2x'Su + u'Ru
        matvec(l.q.as_slice(), n, n, xq, y);
        let mut cost = dot(xq, y);
        matvec(l.s.as_slice(), n, m, u, y);
        cost += 2.0 * dot(xq, y);
        let mut ru = [0.0; 16];
        let ru = if m <= 16 { &mut ru[..m] } else { unreachable!("input dimension above 16") };
        matvec(l.r.as_slice(), m, m, u, ru);
        cost += dot(u, ru);
        acc[i] = acc[q] + cost;
        let xn = &mut rest[..n];
        matvec(l.a.as_slice(), n, n, xq, xn);
        matvec_add(l.b.as_slice(), n, m, u, xn);
        w[i * m..i * m + m].copy_from_slice(u);
    }
    let mut worst = f64::NEG_INFINITY;
    for &leaf in &tree.leaves {
        let xl = &x[leaf * n..leaf * n + n];
        matvec(p.terminal.p_f.as_slice(), n, n, xl, y);
        worst = worst.max(acc[leaf] + dot(xl, y));
    }
    worst
}

/// Reusable buffers for [`worst_unconstrained`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    x: Vec<f64>,
    w: Vec<f64>,
    acc: Vec<f64>,
    u: Vec<f64>,
    y: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = M v` for a column-major `rows x cols` matrix.
fn matvec(mat: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    out[..rows].fill(0.0);
    matvec_add(mat, rows, cols, v, out);
}

fn matvec_add(mat: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for (c, &vc) in v.iter().enumerate().take(cols) {
        let col = &mat[c * rows..c * rows + rows];
        for (o, &a) in out.iter_mut().zip(col) {
            *o += a * vc;
        }
    }
}

pub(crate) fn is_constrained(p: &Problem<'_>) -> bool {
    constrained(p)
}

/// Gradient of `sum_l weights[l] * penalized[l]` with respect to each gain.
#[allow(clippy::too_many_arguments)]
pub fn adjoint(
    tree: &ScenarioTree,
    pass: &Pass,
    p: &Problem<'_>,
    word: &[usize],
    gains: &[DMatrix<f64>],
    rho: f64,
    weights: &[f64],
) -> Vec<DMatrix<f64>> {
    let horizon = word.len();
    let checks = constrained(p) && rho > 0.0;
    let (n, m) = (p.plant.n(), p.plant.m());
    let count = tree.nodes.len();
    let mut mass = vec![0.0; count];
    for (&leaf, &wt) in tree.leaves.iter().zip(weights) {
        mass[leaf] += wt;
    }
    for i in (1..count).rev() {
        let q = tree.nodes[i].parent;
        mass[q] += mass[i];
    }
    let mut lx: Vec<DVector<f64>> = vec![DVector::zeros(n); count];
    let mut lw: Vec<DVector<f64>> = vec![DVector::zeros(m); count];
    let mut grad: Vec<DMatrix<f64>> = vec![DMatrix::zeros(m, n); horizon];
    for &leaf in &tree.leaves {
        // duplicated leaves cannot occur, words are distinct
        lx[leaf] += (&p.terminal.p_f * &pass.x[leaf]) * (2.0 * mass[leaf]);
    }
    for i in (0..count).rev() {
        let node = tree.nodes[i];
        if mass[i] == 0.0 {
            continue;
        }
        if checks {
            let scale = rho * mass[i];
            let mut gx = DVector::zeros(n);
            let mut gw = DVector::zeros(m);
            let mut gv = DVector::zeros(m);
            let v = if node.depth < horizon { Some(&gains[node.depth] * &pass.x[i]) } else { None };
            node_penalty(p, horizon, node.depth, &pass.x[i], &pass.w[i], v.as_ref(), scale, Some((&mut gx, &mut gw, &mut gv)));
            lx[i] += gx;
            lw[i] += gw;
            if node.depth < horizon {
                lx[i] += gains[node.depth].transpose() * &gv;
                grad[node.depth] += &gv * pass.x[i].transpose();
            }
        }
        if i == 0 {
            break;
        }
        let q = node.parent;
        let d = node.depth - 1;
        let (delta, k) = stage(p, word, gains, d);
        let lifted = p.lifts.get(delta);
        let xq = &pass.x[q];
        let u = &pass.w[i];
        // interval cost x'Qx + 2x'Su + u'Ru
        let mut ex = (&lifted.q * xq + &lifted.s * u) * 2.0;
        let mut eu = (lifted.s.transpose() * xq + &lifted.r * u) * 2.0;
        if checks && d < horizon {
            for j in 1..delta {
                let l = p.lifts.get(j);
                let z = &l.a * xq + &l.b * u;
                let mut gz = DVector::zeros(n);
                p.config.state_set.penalty(&z, rho, Some(&mut gz));
                ex += l.a.transpose() * &gz;
                eu += l.b.transpose() * &gz;
            }
        }
        let g_u = eu * mass[i] + lifted.b.transpose() * &lx[i] + &lw[i];
        let mut up = ex * mass[i] + lifted.a.transpose() * &lx[i];
        if node.bit {
            up += k.transpose() * &g_u;
            if d < horizon {
                grad[d] += &g_u * xq.transpose();
            }
        } else {
            lw[q] += &g_u;
        }
        lx[q] += up;
    }
    grad
}
