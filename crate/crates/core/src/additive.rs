//! Multi-view additive model fitting.
//!
//! Regression uses Gauss–Seidel backfitting with centered smoothers inside a
//! self-training loop over the unlabeled responses. Classification uses
//! transductive local scoring: an outer self-training loop around penalized
//! IRLS, where each inner step smooths the working response with
//! `C (V + lambda P)^{-1} V`.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixedpoint::labeled_operators;
use crate::linalg::{self, inf_norm_diff, subvector};
use crate::smoother::{self, SmootherTag, TransductiveSmoother};
use crate::views::{Link, Partition, SmootherForm};

/// Lower bound on the IRLS variance weights `p (1 - p)`.
pub const VARIANCE_FLOOR: f64 = 1e-5;
/// Linear predictors are clamped to `[-ETA_CAP, ETA_CAP]` before the inverse
/// link; exceeding it flags separation.
pub const ETA_CAP: f64 = 30.0;

/// One additive component: a penalty `P` with its weight `lambda`, and the
/// identity-link smoother derived from them.
#[derive(Debug, Clone)]
pub struct AdditiveTerm {
    pub name: String,
    pub penalty: DMatrix<f64>,
    pub lambda: f64,
    pub form: SmootherForm,
    /// Uncentered smoother used by the identity link.
    pub smoother: DMatrix<f64>,
}

impl AdditiveTerm {
    /// Builds the term from a symmetric nonnegative weight matrix.
    pub fn from_weights(
        name: &str,
        weights: &DMatrix<f64>,
        form: SmootherForm,
        lambda: f64,
    ) -> Result<Self> {
        let penalty = smoother::combinatorial_laplacian(weights, name)?.p;
        let s = match form {
            SmootherForm::Symmetric => smoother::symmetric_smoother_matrix(&penalty, lambda)?,
            SmootherForm::Regularized => {
                if !(lambda > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "lambda must be positive, got {lambda}"
                    )));
                }
                if lambda == 1.0 {
                    // A + P = D
                    row_normalized(weights)?
                } else {
                    linalg::solve(&(weights + &penalty * lambda), weights, "A + lambda P")?
                }
            }
            SmootherForm::Stochastic => row_normalized(weights)?,
        };
        Ok(AdditiveTerm {
            name: name.to_string(),
            penalty,
            lambda,
            form,
            smoother: s,
        })
    }

    /// Symmetric-form term `(I + lambda P)^{-1}` from a penalty matrix.
    pub fn symmetric(name: &str, penalty: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let s = smoother::symmetric_smoother_matrix(&penalty, lambda)?;
        Ok(AdditiveTerm {
            name: name.to_string(),
            penalty,
            lambda,
            form: SmootherForm::Symmetric,
            smoother: s,
        })
    }

    pub fn n(&self) -> usize {
        self.penalty.nrows()
    }
}

fn row_normalized(weights: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut s = weights.clone();
    for (i, mut row) in s.row_iter_mut().enumerate() {
        let deg: f64 = weights.row(i).sum();
        if !(deg > 0.0) {
            return Err(Error::ZeroDegree(i));
        }
        row.scale_mut(1.0 / deg);
    }
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct TermFit {
    pub name: String,
    #[serde(skip)]
    pub f: DVector<f64>,
    /// `tr(M_LL)` of the term's uncentered smoother at the final fit; NaN
    /// when not computed.
    pub trace_m: f64,
}

#[derive(Debug, Clone)]
pub struct AdditiveFit {
    pub link: Link,
    pub alpha: f64,
    pub term_fits: Vec<TermFit>,
    pub eta: DVector<f64>,
    pub yhat: DVector<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub converged: bool,
    pub separation: bool,
    /// Final IRLS variance weights (logit link only).
    pub variance: Option<DVector<f64>>,
}

impl AdditiveFit {
    pub fn traces(&self) -> Vec<f64> {
        self.term_fits.iter().map(|t| t.trace_m).collect()
    }

    pub fn eta_l(&self, partition: &Partition) -> DVector<f64> {
        subvector(&self.eta, partition.labeled())
    }

    pub fn yhat_l(&self, partition: &Partition) -> DVector<f64> {
        subvector(&self.yhat, partition.labeled())
    }

    pub fn yhat_u(&self, partition: &Partition) -> DVector<f64> {
        subvector(&self.yhat, partition.unlabeled())
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub delta_outer: f64,
    pub delta_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub warm_start: bool,
    /// Explicit starting values for the unlabeled responses (overrides the
    /// warm/cold start).
    pub y_u0: Option<DVector<f64>>,
    pub compute_traces: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            delta_outer: 1e-6,
            delta_inner: 1e-8,
            max_outer: 200,
            max_inner: 1000,
            warm_start: true,
            y_u0: None,
            compute_traces: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Regression

#[derive(Debug, Clone)]
pub struct BackfitResult {
    pub alpha: f64,
    pub f: Vec<DVector<f64>>,
    pub sweeps: usize,
    pub converged: bool,
}

impl BackfitResult {
    pub fn eta(&self) -> DVector<f64> {
        let n = self.f.first().map_or(0, |f| f.len());
        let mut eta = DVector::from_element(n, self.alpha);
        for f in &self.f {
            eta += f;
        }
        eta
    }
}

/// Gauss–Seidel backfitting of `y` on already-centered smoothers, starting
/// from `init` (zeros when `None`). `alpha = mean(y)`.
pub fn backfit_centered(
    centered: &[DMatrix<f64>],
    y: &DVector<f64>,
    init: Option<&[DVector<f64>]>,
    delta: f64,
    max_iter: usize,
) -> BackfitResult {
    let n = y.len();
    let alpha = linalg::mean(y);
    let q = centered.len();
    let mut f: Vec<DVector<f64>> = match init {
        Some(v) => v.to_vec(),
        None => vec![DVector::zeros(n); q],
    };
    let mut total = f.iter().fold(DVector::zeros(n), |acc, x| acc + x);
    let y_c = y.add_scalar(-alpha);
    let mut sweeps = 0;
    let mut converged = q == 0;
    while !converged && sweeps < max_iter {
        sweeps += 1;
        let mut change = 0.0_f64;
        for l in 0..q {
            let partial = &y_c - (&total - &f[l]);
            let new = &centered[l] * partial;
            change = change.max(inf_norm_diff(&new, &f[l]));
            total += &new - &f[l];
            f[l] = new;
        }
        // a lone term is solved exactly by its first sweep
        converged = change < delta || (q == 1 && init.is_none());
    }
    BackfitResult {
        alpha,
        f,
        sweeps,
        converged,
    }
}

/// Supervised-form backfit of a fully specified response through the
/// centered smoothers `C S_l`.
pub fn backfit_regression(
    smoothers: &[DMatrix<f64>],
    y: &DVector<f64>,
    delta: f64,
    max_iter: usize,
) -> Result<AdditiveFit> {
    let n = y.len();
    for s in smoothers {
        if s.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "smoother {:?} does not match response length {n}",
                s.shape()
            )));
        }
    }
    let centered: Vec<DMatrix<f64>> = smoothers.iter().map(linalg::center_rows).collect();
    let bf = backfit_centered(&centered, y, None, delta, max_iter);
    let eta = bf.eta();
    Ok(AdditiveFit {
        link: Link::Identity,
        alpha: bf.alpha,
        term_fits: bf
            .f
            .into_iter()
            .zip(smoothers)
            .enumerate()
            .map(|(i, (f, s))| TermFit {
                name: format!("term{i}"),
                f,
                trace_m: s.trace(),
            })
            .collect(),
        yhat: eta.clone(),
        eta,
        outer_iterations: 1,
        inner_iterations: bf.sweeps,
        converged: bf.converged,
        separation: false,
        variance: None,
    })
}

/// Per-term labeled operators of the centered smoother, used by the warm
/// start.
pub fn centered_operators(
    term: &AdditiveTerm,
    partition: &Partition,
) -> Result<crate::fixedpoint::LabeledOperators> {
    let ts = TransductiveSmoother::new(
        linalg::center_rows(&term.smoother),
        partition,
        SmootherTag::Centered,
    )?;
    labeled_operators(&ts)
}

/// `tr(M_LL)` of an uncentered smoother over the partition.
pub fn labeled_trace(s: &DMatrix<f64>, partition: &Partition) -> Result<f64> {
    let ts = TransductiveSmoother::new(s.clone(), partition, SmootherTag::Custom)?;
    Ok(labeled_operators(&ts)?.trace_ll())
}

/// Warm start for regression: backfit on the labeled data with the per-term
/// operators `M_LL_l`, then predict the unlabeled responses with `M_UL_l`.
pub fn regression_warm_start(
    ops: &[crate::fixedpoint::LabeledOperators],
    y_l: &DVector<f64>,
    delta: f64,
    max_iter: usize,
) -> DVector<f64> {
    let m = y_l.len();
    let q = ops.len();
    let mut f: Vec<DVector<f64>> = vec![DVector::zeros(m); q];
    let mut total = DVector::zeros(m);
    let mut alpha = linalg::mean(y_l);
    for _ in 0..max_iter {
        let mut change = 0.0_f64;
        alpha = linalg::mean(&(y_l - &total));
        for l in 0..q {
            let partial = y_l.add_scalar(-alpha) - (&total - &f[l]);
            let new = &ops[l].m_ll * partial;
            change = change.max(inf_norm_diff(&new, &f[l]));
            total += &new - &f[l];
            f[l] = new;
        }
        let new_alpha = linalg::mean(&(y_l - &total));
        change = change.max((new_alpha - alpha).abs());
        if change < delta {
            alpha = new_alpha;
            break;
        }
    }
    let u = ops.first().map_or(0, |o| o.m_ul.nrows());
    let mut y_u = DVector::from_element(u, alpha);
    for l in 0..q {
        let partial = y_l.add_scalar(-alpha) - (&total - &f[l]);
        y_u += &ops[l].m_ul * partial;
    }
    y_u
}

fn check_terms(terms: &[AdditiveTerm], partition: &Partition, y_l: &DVector<f64>) -> Result<()> {
    if terms.is_empty() {
        return Err(Error::InvalidSpec("no terms to fit".into()));
    }
    for t in terms {
        if t.n() != partition.n() || t.smoother.shape() != (partition.n(), partition.n()) {
            return Err(Error::Dimension(format!(
                "term {} is {}x{} but n = {}",
                t.name,
                t.n(),
                t.n(),
                partition.n()
            )));
        }
    }
    if y_l.len() != partition.m() {
        return Err(Error::Dimension(format!(
            "Y_L has length {} but there are {} labeled observations",
            y_l.len(),
            partition.m()
        )));
    }
    Ok(())
}

/// Identity-link transductive backfitting: alternate a backfit on the
/// completed response `[Y_L, Y_U]` with `Y_U <- eta_U` until `eta_U` moves
/// less than `delta_outer`.
pub fn transductive_backfit(
    terms: &[AdditiveTerm],
    partition: &Partition,
    y_l: &DVector<f64>,
    opts: &FitOptions,
) -> Result<AdditiveFit> {
    check_terms(terms, partition, y_l)?;
    let warm_ops = if opts.warm_start && opts.y_u0.is_none() && !partition.unlabeled().is_empty() {
        terms
            .iter()
            .map(|t| centered_operators(t, partition))
            .collect::<Result<Vec<_>>>()
            .ok()
    } else {
        None
    };
    transductive_backfit_with(terms, partition, y_l, opts, warm_ops.as_deref())
}

/// As [`transductive_backfit`], with precomputed centered operators for the
/// warm start.
pub fn transductive_backfit_with(
    terms: &[AdditiveTerm],
    partition: &Partition,
    y_l: &DVector<f64>,
    opts: &FitOptions,
    warm_ops: Option<&[crate::fixedpoint::LabeledOperators]>,
) -> Result<AdditiveFit> {
    check_terms(terms, partition, y_l)?;
    let centered: Vec<DMatrix<f64>> = terms.iter().map(|t| linalg::center_rows(&t.smoother)).collect();
    let u = partition.unlabeled().len();

    let mut y_u = if let Some(y0) = &opts.y_u0 {
        if y0.len() != u {
            return Err(Error::Dimension("initial Y_U has the wrong length".into()));
        }
        y0.clone()
    } else if let Some(ops) = warm_ops {
        regression_warm_start(ops, y_l, opts.delta_inner, opts.max_inner)
    } else {
        DVector::from_element(u, linalg::mean(y_l))
    };

    let mut f: Option<Vec<DVector<f64>>> = None;
    let mut outer = 0;
    let mut inner = 0;
    let mut converged = false;
    let mut last = None;
    while outer < opts.max_outer.max(1) {
        outer += 1;
        let y = partition.assemble(y_l, &y_u);
        let bf = backfit_centered(&centered, &y, f.as_deref(), opts.delta_inner, opts.max_inner);
        inner += bf.sweeps;
        let inner_ok = bf.converged;
        let eta = bf.eta();
        let eta_u = subvector(&eta, partition.unlabeled());
        let change = inf_norm_diff(&eta_u, &y_u);
        y_u = eta_u;
        f = Some(bf.f.clone());
        last = Some(bf);
        if u == 0 || (change < opts.delta_outer && inner_ok) {
            converged = inner_ok;
            break;
        }
    }
    let bf = last.expect("at least one outer iteration");
    let eta = bf.eta();
    let traces = if opts.compute_traces {
        terms
            .iter()
            .map(|t| labeled_trace(&t.smoother, partition))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![f64::NAN; terms.len()]
    };
    Ok(AdditiveFit {
        link: Link::Identity,
        alpha: bf.alpha,
        term_fits: terms
            .iter()
            .zip(bf.f)
            .zip(traces)
            .map(|((t, f), trace_m)| TermFit {
                name: t.name.clone(),
                f,
                trace_m,
            })
            .collect(),
        yhat: eta.clone(),
        eta,
        outer_iterations: outer,
        inner_iterations: inner,
        converged,
        separation: false,
        variance: None,
    })
}

// ---------------------------------------------------------------------------
// Classification

pub fn logistic(eta: f64) -> f64 {
    let e = eta.clamp(-ETA_CAP, ETA_CAP);
    1.0 / (1.0 + (-e).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct ScoringState {
    alpha: f64,
    f: Vec<DVector<f64>>,
    eta: DVector<f64>,
}

impl ScoringState {
    fn constant(n: usize, q: usize, alpha: f64) -> Self {
        ScoringState {
            alpha,
            f: vec![DVector::zeros(n); q],
            eta: DVector::from_element(n, alpha),
        }
    }
}

struct ScoringOutcome {
    steps: usize,
    converged: bool,
    variance: DVector<f64>,
}

/// Penalized IRLS (local scoring) for a fixed training response.
///
/// `weight_mask[i] = false` drops observation `i` from the likelihood; the
/// warm start uses this to fit on the labeled data alone.
fn local_scoring_inner(
    terms: &[AdditiveTerm],
    y: &DVector<f64>,
    weight_mask: Option<&[bool]>,
    state: &mut ScoringState,
    delta: f64,
    max_iter: usize,
) -> Result<ScoringOutcome> {
    let n = y.len();
    let q = terms.len();
    let mut steps = 0;
    let mut converged = false;
    let mut variance = DVector::zeros(n);
    while steps < max_iter {
        steps += 1;
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let p = logistic(state.eta[i]);
            let active = weight_mask.map_or(true, |m| m[i]);
            let v = (p * (1.0 - p)).max(VARIANCE_FLOOR);
            variance[i] = if active { v } else { 0.0 };
            z[i] = if active {
                state.eta[i] + (y[i] - p) / v
            } else {
                state.eta[i]
            };
        }
        let wsum = variance.sum();
        if !(wsum > 0.0) {
            return Err(Error::InvalidParameter("no observations carry weight".into()));
        }
        let lus: Vec<LU<f64, Dyn, Dyn>> = terms
            .iter()
            .map(|t| {
                let mut a = &t.penalty * t.lambda;
                for i in 0..n {
                    a[(i, i)] += variance[i];
                }
                let lu = a.lu();
                linalg::check_lu_conditioning(&lu, &format!("V + lambda P for {}", t.name))?;
                Ok(lu)
            })
            .collect::<Result<_>>()?;

        // weighted Gauss–Seidel on the working response
        let mut total = state.f.iter().fold(DVector::zeros(n), |acc, x| acc + x);
        let mut sweeps = 0;
        loop {
            sweeps += 1;
            let resid = &z - &total;
            let alpha = variance.dot(&resid) / wsum;
            let mut change = (alpha - state.alpha).abs();
            state.alpha = alpha;
            for l in 0..q {
                let partial = (&z - (&total - &state.f[l])).add_scalar(-alpha);
                let rhs = variance.component_mul(&partial);
                let mut new = lus[l]
                    .solve(&rhs)
                    .ok_or_else(|| Error::Singular(format!("V + lambda P for {}", terms[l].name)))?;
                linalg::center_in_place(&mut new);
                change = change.max(inf_norm_diff(&new, &state.f[l]));
                total += &new - &state.f[l];
                state.f[l] = new;
            }
            if change < delta || sweeps >= max_iter {
                break;
            }
        }
        let eta_new = total.add_scalar(state.alpha);
        let change = inf_norm_diff(&eta_new, &state.eta);
        state.eta = eta_new;
        if state.eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear predictor diverged".into()));
        }
        if change < delta {
            converged = true;
            break;
        }
    }
    // weights at the returned state
    for i in 0..n {
        let p = logistic(state.eta[i]);
        let active = weight_mask.map_or(true, |m| m[i]);
        variance[i] = if active { (p * (1.0 - p)).max(VARIANCE_FLOOR) } else { 0.0 };
    }
    Ok(ScoringOutcome {
        steps,
        converged,
        variance,
    })
}

/// Transductive local scoring for the logit link.
pub fn local_scoring(
    terms: &[AdditiveTerm],
    partition: &Partition,
    y_l: &DVector<f64>,
    opts: &FitOptions,
) -> Result<AdditiveFit> {
    check_terms(terms, partition, y_l)?;
    if y_l.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidLabel {
            id: String::new(),
            value: "non-binary".into(),
            reason: "logit link requires labels in {0, 1}".into(),
        });
    }
    let n = partition.n();
    let q = terms.len();
    let u = partition.unlabeled().len();
    let prop = linalg::mean(y_l).clamp(0.01, 0.99);

    let mut inner_total = 0;
    let mut state = ScoringState::constant(n, q, logit(prop));
    let mut y_u = DVector::from_element(u, prop);

    if let Some(y0) = &opts.y_u0 {
        if y0.len() != u {
            return Err(Error::Dimension("initial Y_U has the wrong length".into()));
        }
        y_u = y0.map(|p| p.clamp(1e-12, 1.0 - 1e-12));
    } else if opts.warm_start && u > 0 {
        // Labeled-only penalized fit: at the self-training fixed point the
        // unlabeled rows carry zero score, so this lands on (or next to) it.
        let mask = partition.is_labeled_mask();
        let y0 = partition.assemble(y_l, &y_u);
        let mut warm = ScoringState::constant(n, q, logit(prop));
        if let Ok(out) = local_scoring_inner(
            terms,
            &y0,
            Some(&mask),
            &mut warm,
            opts.delta_inner,
            opts.max_inner,
        ) {
            inner_total += out.steps;
            y_u = subvector(&warm.eta, partition.unlabeled()).map(logistic);
            state = warm;
        }
    }

    let mut eta_u_prev = y_u.map(|p| logit(p.clamp(1e-12, 1.0 - 1e-12)));
    let mut outer = 0;
    let mut converged = false;
    let mut variance = DVector::zeros(n);
    while outer < opts.max_outer.max(1) {
        outer += 1;
        let y = partition.assemble(y_l, &y_u);
        let out = local_scoring_inner(terms, &y, None, &mut state, opts.delta_inner, opts.max_inner)?;
        inner_total += out.steps;
        variance = out.variance;
        let eta_u = subvector(&state.eta, partition.unlabeled());
        let change = inf_norm_diff(&eta_u, &eta_u_prev);
        y_u = eta_u.map(logistic);
        eta_u_prev = eta_u;
        if u == 0 || (change < opts.delta_outer && out.converged) {
            converged = out.converged;
            break;
        }
    }

    let separation = linalg::inf_norm(&state.eta) > ETA_CAP;
    let traces = if opts.compute_traces {
        terms
            .iter()
            .map(|t| weighted_smoother(&t.penalty, t.lambda, &variance).and_then(|s| labeled_trace(&s, partition)))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![f64::NAN; q]
    };
    let yhat = state.eta.map(logistic);
    Ok(AdditiveFit {
        link: Link::Logit,
        alpha: state.alpha,
        term_fits: terms
            .iter()
            .zip(state.f)
            .zip(traces)
            .map(|((t, f), trace_m)| TermFit {
                name: t.name.clone(),
                f,
                trace_m,
            })
            .collect(),
        eta: state.eta,
        yhat,
        outer_iterations: outer,
        inner_iterations: inner_total,
        converged,
        separation,
        variance: Some(variance),
    })
}

/// `(V + lambda P)^{-1} V` for diagonal weights `V`.
pub fn weighted_smoother(
    penalty: &DMatrix<f64>,
    lambda: f64,
    variance: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = penalty.nrows();
    let mut a = penalty * lambda;
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] += variance[i];
        v[(i, i)] = variance[i];
    }
    linalg::solve(&a, &v, "V + lambda P")
}

/// Fits with the link's algorithm: backfitting for identity, local scoring
/// for logit.
pub fn fit(
    link: Link,
    terms: &[AdditiveTerm],
    partition: &Partition,
    y_l: &DVector<f64>,
    opts: &FitOptions,
) -> Result<AdditiveFit> {
    match link {
        Link::Identity => transductive_backfit(terms, partition, y_l, opts),
        Link::Logit => local_scoring(terms, partition, y_l, opts),
    }
}

/// Class 1 iff the fitted probability is at least `threshold`, over the
/// unlabeled observations.
pub fn predict_assignments(fit: &AdditiveFit, partition: &Partition, threshold: f64) -> Result<Vec<u8>> {
    if fit.link != Link::Logit {
        return Err(Error::NotApplicable("class assignments need the logit link".into()));
    }
    Ok(assign(&fit.yhat_u(partition), threshold))
}

pub fn assign(probs: &DVector<f64>, threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}
