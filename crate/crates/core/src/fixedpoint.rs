//! The single-smoother transductive fixed point `Y_U = S_UL Y_L + S_UU Y_U`,
//! solved in closed form, by self-training iteration and by Newton steps,
//! plus the semi-parametric linear-plus-graph fit.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, identity_minus, inf_norm_diff};
use crate::smoother::TransductiveSmoother;
use crate::views::FeatureView;

pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Closed,
    SelfTrain,
    Newton,
}

#[derive(Debug, Clone)]
pub struct FixedPointFit {
    pub yhat_l: DVector<f64>,
    pub yhat_u: DVector<f64>,
    /// Populated by the closed form only.
    pub m_ll: Option<DMatrix<f64>>,
    pub m_ul: Option<DMatrix<f64>>,
    pub method: Method,
    pub iterations: usize,
    pub converged: bool,
}

impl FixedPointFit {
    /// `max |y_U - S_UL Y_L - S_UU y_U|`.
    pub fn residual(&self, s: &TransductiveSmoother, y_l: &DVector<f64>) -> f64 {
        if self.yhat_u.is_empty() {
            return 0.0;
        }
        let rhs = s.ul() * y_l + s.uu() * &self.yhat_u;
        inf_norm_diff(&self.yhat_u, &rhs)
    }
}

/// Labeled-data operators `M_UL = (I - S_UU)^{-1} S_UL` and
/// `M_LL = S_LL + S_LU M_UL`.
#[derive(Debug, Clone)]
pub struct LabeledOperators {
    pub m_ll: DMatrix<f64>,
    pub m_ul: DMatrix<f64>,
}

impl LabeledOperators {
    pub fn trace_ll(&self) -> f64 {
        self.m_ll.trace()
    }
}

pub fn labeled_operators(s: &TransductiveSmoother) -> Result<LabeledOperators> {
    let s_ul = s.ul();
    let m_ul = if s.partition().unlabeled().is_empty() {
        s_ul
    } else {
        linalg::solve(&identity_minus(&s.uu()), &s_ul, "I - S_UU")?
    };
    let m_ll = s.ll() + s.lu() * &m_ul;
    Ok(LabeledOperators { m_ll, m_ul })
}

fn check_y(s: &TransductiveSmoother, y_l: &DVector<f64>) -> Result<()> {
    if y_l.len() != s.partition().m() {
        return Err(Error::Dimension(format!(
            "Y_L has length {} but there are {} labeled observations",
            y_l.len(),
            s.partition().m()
        )));
    }
    Ok(())
}

pub fn closed_form_fit(s: &TransductiveSmoother, y_l: &DVector<f64>) -> Result<FixedPointFit> {
    check_y(s, y_l)?;
    let ops = labeled_operators(s)?;
    Ok(FixedPointFit {
        yhat_l: &ops.m_ll * y_l,
        yhat_u: &ops.m_ul * y_l,
        m_ll: Some(ops.m_ll),
        m_ul: Some(ops.m_ul),
        method: Method::Closed,
        iterations: 0,
        converged: true,
    })
}

/// Default starting point: `mean(Y_L)` for every unlabeled entry.
pub fn default_start(s: &TransductiveSmoother, y_l: &DVector<f64>) -> DVector<f64> {
    DVector::from_element(s.partition().unlabeled().len(), linalg::mean(y_l))
}

fn labeled_from_unlabeled(
    s: &TransductiveSmoother,
    y_l: &DVector<f64>,
    y_u: &DVector<f64>,
) -> DVector<f64> {
    s.ll() * y_l + s.lu() * y_u
}

/// Iterates `y_U <- S_UL Y_L + S_UU y_U` until successive iterates differ by
/// less than `delta` in the max norm.
pub fn self_train_fit(
    s: &TransductiveSmoother,
    y_l: &DVector<f64>,
    y_u0: &DVector<f64>,
    delta: f64,
    max_iter: usize,
) -> Result<FixedPointFit> {
    check_y(s, y_l)?;
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("delta must be positive".into()));
    }
    let s_uu = s.uu();
    let drive = s.ul() * y_l;
    let mut y_u = y_u0.clone();
    let mut converged = y_u.is_empty();
    let mut iterations = 0;
    while !converged && iterations < max_iter {
        iterations += 1;
        let next = &drive + &s_uu * &y_u;
        let change = inf_norm_diff(&next, &y_u);
        y_u = next;
        converged = change < delta;
    }
    Ok(FixedPointFit {
        yhat_l: labeled_from_unlabeled(s, y_l, &y_u),
        yhat_u: y_u,
        m_ll: None,
        m_ul: None,
        method: Method::SelfTrain,
        iterations,
        converged,
    })
}

/// Newton's method on `F(y) = y - (S_UL Y_L + S_UU y)`. The Jacobian is the
/// constant `I - S_UU`, so for this affine map the first step lands on the
/// fixed point and the second confirms it.
pub fn newton_fit(
    s: &TransductiveSmoother,
    y_l: &DVector<f64>,
    y_u0: &DVector<f64>,
    delta: f64,
    max_iter: usize,
) -> Result<FixedPointFit> {
    check_y(s, y_l)?;
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("delta must be positive".into()));
    }
    let s_uu = s.uu();
    let drive = s.ul() * y_l;
    let jac = identity_minus(&s_uu).lu();
    linalg::check_lu_conditioning(&jac, "I - S_UU")?;
    let mut y_u = y_u0.clone();
    let mut converged = y_u.is_empty();
    let mut iterations = 0;
    while !converged && iterations < max_iter {
        iterations += 1;
        let resid = &y_u - (&drive + &s_uu * &y_u);
        let step = jac
            .solve(&resid)
            .ok_or_else(|| Error::Singular("I - S_UU".into()))?;
        y_u -= &step;
        converged = linalg::inf_norm(&step) < delta;
    }
    Ok(FixedPointFit {
        yhat_l: labeled_from_unlabeled(s, y_l, &y_u),
        yhat_u: y_u,
        m_ll: None,
        m_ul: None,
        method: Method::Newton,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct SemiparametricFit {
    pub beta: DVector<f64>,
    pub f2_l: DVector<f64>,
    pub f2_u: DVector<f64>,
    /// Fitted values over all `n` observations, in observation order.
    pub yhat: DVector<f64>,
    pub m_ll: DMatrix<f64>,
    pub m_ul: DMatrix<f64>,
}

/// Linear term on `X` plus a graph term through `S`:
/// `beta = (X_L'(I - M_LL)X_L)^{-1} X_L'(I - M_LL) Y_L`,
/// `f2_L = M_LL (Y_L - X_L beta)`, `f2_U = M_UL (Y_L - X_L beta)`.
pub fn semiparametric_fit(
    x: &FeatureView,
    s: &TransductiveSmoother,
    y_l: &DVector<f64>,
) -> Result<SemiparametricFit> {
    check_y(s, y_l)?;
    let part = s.partition();
    if x.data.nrows() != part.n() {
        return Err(Error::Dimension(format!(
            "feature view has {} rows, expected {}",
            x.data.nrows(),
            part.n()
        )));
    }
    let all: Vec<usize> = (0..x.data.ncols()).collect();
    let x_l = linalg::submatrix(&x.data, part.labeled(), &all);
    let x_u = linalg::submatrix(&x.data, part.unlabeled(), &all);
    let ops = labeled_operators(s)?;
    let resid_op = identity_minus(&ops.m_ll);
    let xt_r = x_l.transpose() * &resid_op;
    let normal = &xt_r * &x_l;
    let beta = linalg::solve_vec(&normal, &(&xt_r * y_l), "normal matrix")
        .map_err(|_| Error::Collinear)?;
    let r = y_l - &x_l * &beta;
    let f2_l = &ops.m_ll * &r;
    let f2_u = &ops.m_ul * &r;
    let eta_l = &x_l * &beta + &f2_l;
    let eta_u = &x_u * &beta + &f2_u;
    let yhat = part.assemble(&eta_l, &eta_u);
    Ok(SemiparametricFit {
        beta,
        f2_l,
        f2_u,
        yhat,
        m_ll: ops.m_ll,
        m_ul: ops.m_ul,
    })
}
