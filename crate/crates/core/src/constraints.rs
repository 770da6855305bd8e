//! Polytopic state/input constraint sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Membership tolerance on halfspace residuals.
pub const MEMBERSHIP_TOL: f64 = 1e-8;

/// Either the whole space or `{z : H z <= h}`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    Unconstrained,
    Polytope { h_mat: DMatrix<f64>, h_vec: DVector<f64> },
}

impl ConstraintSet {
    pub fn polytope(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::Dimension(format!(
                "halfspace matrix has {} rows but offset vector has {} entries",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        if h_vec.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("constraint set must contain the origin (h >= 0)".into()));
        }
        Ok(Self::Polytope { h_mat, h_vec })
    }

    /// Symmetric box `|z_i| <= bound_i`.
    pub fn symmetric_box(bounds: &[f64]) -> Result<Self> {
        let d = bounds.len();
        let mut h_mat = DMatrix::zeros(2 * d, d);
        let mut h_vec = DVector::zeros(2 * d);
        for (i, &bnd) in bounds.iter().enumerate() {
            h_mat[(2 * i, i)] = 1.0;
            h_mat[(2 * i + 1, i)] = -1.0;
            h_vec[2 * i] = bnd;
            h_vec[2 * i + 1] = bnd;
        }
        Self::polytope(h_mat, h_vec)
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, Self::Unconstrained)
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Unconstrained => None,
            Self::Polytope { h_mat, .. } => Some(h_mat.ncols()),
        }
    }

    /// Largest halfspace violation `max_i (H z - h)_i`, or `-inf` if unconstrained.
    pub fn residual(&self, z: &DVector<f64>) -> f64 {
        match self {
            Self::Unconstrained => f64::NEG_INFINITY,
            Self::Polytope { h_mat, h_vec } => {
                (h_mat * z - h_vec).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    pub fn contains(&self, z: &DVector<f64>) -> bool {
        self.residual(z) <= MEMBERSHIP_TOL
    }

    /// Quadratic exterior penalty `sum max(0, Hz - h)^2`; adds `scale * grad` to `grad`.
    pub fn penalty(&self, z: &DVector<f64>, scale: f64, grad: Option<&mut DVector<f64>>) -> f64 {
        match self {
            Self::Unconstrained => 0.0,
            Self::Polytope { h_mat, h_vec } => {
                let viol = (h_mat * z - h_vec).map(|v| v.max(0.0));
                if let Some(g) = grad {
                    if viol.iter().any(|&v| v > 0.0) {
                        g.gemv_tr(2.0 * scale, h_mat, &viol, 1.0);
                    }
                }
                viol.norm_squared()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_membership_and_penalty() {
        let set = ConstraintSet::symmetric_box(&[1.0, 2.0]).unwrap();
        assert!(set.contains(&DVector::from_vec(vec![1.0, -2.0])));
        assert!(!set.contains(&DVector::from_vec(vec![1.1, 0.0])));
        let z = DVector::from_vec(vec![1.5, 0.0]);
        let mut g = DVector::zeros(2);
        let pen = set.penalty(&z, 1.0, Some(&mut g));
        assert!((pen - 0.25).abs() < 1e-15);
        assert!((g[0] - 1.0).abs() < 1e-15 && g[1] == 0.0);
        assert_eq!(ConstraintSet::Unconstrained.penalty(&z, 1.0, None), 0.0);
    }

    #[test]
    fn polytope_must_contain_origin() {
        let bad = ConstraintSet::polytope(DMatrix::identity(1, 1), DVector::from_element(1, -1.0));
        assert!(bad.is_err());
    }
}
