//! Tuning-parameter estimation and model selection: transductive GCV and
//! AIC, learner matching, coordinate search over smoothing weights, the
//! hierarchical term search and the local-scoring convergence radius.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::additive::{self, AdditiveFit, AdditiveTerm, FitOptions};
use crate::error::{Error, Result};
use crate::fixedpoint::{closed_form_fit, labeled_operators, LabeledOperators};
use crate::linalg::{self, submatrix};
use crate::smoother::{self, Distance, KernelSpec, SmootherTag, TransductiveSmoother};
use crate::views::{
    self, FeatureView, GraphView, InteractionOp, LearnerPredictions, Link, Param, Partition,
    SmootherForm, TermKind, TermSpec,
};

// ---------------------------------------------------------------------------
// Criteria

/// `||Y_L - M_LL Y_L||^2 / (1 - tr(M_LL)/m)^2`.
pub fn tgcv(m_ll: &DMatrix<f64>, y_l: &DVector<f64>) -> Result<f64> {
    let m = y_l.len();
    if m_ll.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "M_LL is {:?} but Y_L has length {m}",
            m_ll.shape()
        )));
    }
    let resid = y_l - m_ll * y_l;
    let denom = 1.0 - m_ll.trace() / m as f64;
    if !(denom > 1e-12) {
        return Err(Error::Saturated(format!(
            "tr(M_LL) = {} reaches the labeled count {m}",
            m_ll.trace()
        )));
    }
    Ok(resid.norm_squared() / (denom * denom))
}

/// Approximate degrees of freedom of a backfitted fit: the intercept plus
/// `tr - 1` per term.
pub fn df_aggregate(traces: &[f64]) -> f64 {
    1.0 + traces.iter().map(|t| t - 1.0).sum::<f64>()
}

/// `(1 - [1 + sum(tr_l - 1)] / m)^2`. Degrees of freedom at or beyond `m`
/// count as saturated: past `m` the square would turn positive again.
pub fn df_denominator(traces: &[f64], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::NoLabeled);
    }
    let df = df_aggregate(traces);
    let base = 1.0 - df / m as f64;
    if !(base > 1e-12) {
        return Err(Error::Saturated(format!(
            "degrees of freedom {df} reach the labeled count {m}"
        )));
    }
    Ok(base * base)
}

/// Residual sum of squares over the Remark-style denominator.
pub fn tgcv_backfit(y_l: &DVector<f64>, fitted_l: &DVector<f64>, traces: &[f64]) -> Result<f64> {
    let denom = df_denominator(traces, y_l.len())?;
    Ok((y_l - fitted_l).norm_squared() / denom)
}

/// Summed loss over the labeled observations: squared error for the
/// identity link, negative Bernoulli log-likelihood for the logit link.
/// A probability of exactly 0 or 1 against the label gives `+inf`.
pub fn loss(fitted: &DVector<f64>, y_l: &DVector<f64>, link: Link) -> Result<f64> {
    if fitted.len() != y_l.len() {
        return Err(Error::Dimension(format!(
            "{} fitted values for {} labels",
            fitted.len(),
            y_l.len()
        )));
    }
    Ok(match link {
        Link::Identity => (y_l - fitted).norm_squared(),
        Link::Logit => fitted
            .iter()
            .zip(y_l.iter())
            .map(|(&p, &y)| {
                let a = if y > 0.5 { p } else { 1.0 - p };
                if a <= 0.0 {
                    f64::INFINITY
                } else {
                    -a.ln()
                }
            })
            .sum(),
    })
}

/// `(2/m) loss + 2 df / m`.
pub fn taic(fitted: &DVector<f64>, y_l: &DVector<f64>, link: Link, df: f64) -> Result<f64> {
    let m = y_l.len();
    if m == 0 {
        return Err(Error::NoLabeled);
    }
    let l = loss(fitted, y_l, link)?;
    Ok(2.0 * l / m as f64 + 2.0 * df / m as f64)
}

/// tAIC of a linear smoother on the labeled block: squared-error loss of
/// `M_LL Y_L` with `df = tr(M_LL)`.
pub fn taic_linear(m_ll: &DMatrix<f64>, y_l: &DVector<f64>) -> Result<f64> {
    taic(&(m_ll * y_l), y_l, Link::Identity, m_ll.trace())
}

// ---------------------------------------------------------------------------
// Grids

fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect()
}

/// 13 log-spaced points from 1e-3 to 1e3.
pub fn default_lambda_grid() -> Vec<f64> {
    logspace(1e-3, 1e3, 13)
}

/// 8 log-spaced points spanning `[0.1, 10]` times the median distance.
pub fn default_gamma_grid(median_distance: f64) -> Vec<f64> {
    logspace(0.1 * median_distance, 10.0 * median_distance, 8)
}

/// `{3, 5, 10, ceil(sqrt n)}` restricted to `k <= n - 1`.
pub fn default_k_grid(n: usize) -> Vec<usize> {
    let mut ks = vec![3, 5, 10, (n as f64).sqrt().ceil() as usize];
    ks.retain(|&k| k >= 1 && k < n);
    ks.sort_unstable();
    ks.dedup();
    ks
}

// ---------------------------------------------------------------------------
// Views and terms

/// Within-view parameters: kernel bandwidth and nearest-neighbour count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tau {
    pub gamma: Option<f64>,
    pub k: Option<usize>,
}

impl Tau {
    pub fn new(gamma: Option<f64>, k: Option<usize>) -> Self {
        Tau { gamma, k }
    }

    fn order(&self, other: &Tau) -> std::cmp::Ordering {
        let g = |t: &Tau| t.gamma.unwrap_or(0.0);
        g(self)
            .total_cmp(&g(other))
            .then(self.k.cmp(&other.k))
    }
}

/// Grid of `(gamma, k)` pairs, every gamma crossed with every k.
pub fn tau_grid(gammas: &[f64], ks: &[Option<usize>]) -> Vec<Tau> {
    gammas
        .iter()
        .flat_map(|&g| ks.iter().map(move |&k| Tau::new(Some(g), k)))
        .collect()
}

#[derive(Debug)]
enum Source {
    Feature,
    Graph(DMatrix<f64>),
    Distances,
}

/// A view ready to produce weight matrices for any `tau`. Distances are
/// computed once: pairwise for feature views, shortest-path for graphs.
#[derive(Debug)]
pub struct PreparedView {
    pub name: String,
    source: Source,
    distances: OnceLock<DMatrix<f64>>,
}

impl PreparedView {
    pub fn feature(view: &FeatureView, distance: Distance) -> Result<Self> {
        let d = smoother::pairwise_distances(view, distance)?;
        Ok(PreparedView {
            name: view.name.clone(),
            source: Source::Feature,
            distances: OnceLock::from(d),
        })
    }

    pub fn graph(view: &GraphView) -> Result<Self> {
        smoother::check_weights(&view.adjacency, &view.name)?;
        Ok(PreparedView {
            name: view.name.clone(),
            source: Source::Graph(view.adjacency.clone()),
            distances: OnceLock::new(),
        })
    }

    /// A view given directly by a distance matrix (infinite entries mark
    /// unreachable pairs).
    pub fn from_distances(name: &str, d: DMatrix<f64>) -> Result<Self> {
        linalg::require_square(&d, "distance matrix")?;
        Ok(PreparedView {
            name: name.to_string(),
            source: Source::Distances,
            distances: OnceLock::from(d),
        })
    }

    pub fn n(&self) -> usize {
        match &self.source {
            Source::Graph(a) => a.nrows(),
            _ => self.distances.get().map_or(0, |d| d.nrows()),
        }
    }

    pub fn is_graph(&self) -> bool {
        matches!(self.source, Source::Graph(_))
    }

    pub fn distances(&self) -> Result<&DMatrix<f64>> {
        if let Some(d) = self.distances.get() {
            return Ok(d);
        }
        let Source::Graph(a) = &self.source else {
            unreachable!("non-graph views are built with distances")
        };
        let d = smoother::shortest_path_distances(a)?;
        Ok(self.distances.get_or_init(|| d))
    }

    /// Median of the finite, positive off-diagonal distances.
    pub fn median_distance(&self) -> Result<f64> {
        let d = self.distances()?;
        let n = d.nrows();
        let mut v: Vec<f64> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| d[(i, j)])
            .filter(|x| x.is_finite() && *x > 0.0)
            .collect();
        if v.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "view {} has no positive finite distances",
                self.name
            )));
        }
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        Ok(if v.len() % 2 == 1 {
            v[mid]
        } else {
            0.5 * (v[mid - 1] + v[mid])
        })
    }

    /// Weight matrix for `tau`. With a bandwidth, the exponential kernel of
    /// the view's distances (graphs: shortest-path completion); without
    /// one, a graph's raw adjacency. `k` thins to the K-NN graph.
    pub fn weights(&self, tau: &Tau) -> Result<DMatrix<f64>> {
        let w = match (tau.gamma, &self.source) {
            (Some(g), Source::Graph(_)) => {
                let kernel = KernelSpec::new(g, Distance::ShortestPath)?;
                let mut w = smoother::kernel_from_distances(self.distances()?, &kernel)?;
                w.fill_diagonal(0.0);
                w
            }
            (Some(g), _) => {
                let kernel = KernelSpec::new(g, Distance::Euclidean)?;
                smoother::kernel_from_distances(self.distances()?, &kernel)?
            }
            (None, Source::Graph(a)) => a.clone(),
            (None, _) => {
                return Err(Error::InvalidParameter(format!(
                    "view {} needs a kernel bandwidth",
                    self.name
                )))
            }
        };
        match tau.k {
            Some(k) => smoother::knn_graph(&w, k),
            None => Ok(w),
        }
    }

    /// Default `(gamma, k)` grid: the gamma grid around the median distance
    /// crossed with the given `k` (or the default k grid when `k` is to be
    /// estimated).
    pub fn default_tau_grid(&self, k: KChoice) -> Result<Vec<Tau>> {
        let gammas = default_gamma_grid(self.median_distance()?);
        let ks: Vec<Option<usize>> = match k {
            KChoice::None => vec![None],
            KChoice::Fixed(k) => vec![Some(k)],
            KChoice::Estimate => default_k_grid(self.n()).into_iter().map(Some).collect(),
        };
        Ok(tau_grid(&gammas, &ks))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KChoice {
    None,
    Fixed(usize),
    Estimate,
}

/// A term with its weight matrix resolved; only `lambda` remains.
#[derive(Debug, Clone)]
pub struct PreparedTerm {
    pub spec: TermSpec,
    pub weights: Arc<DMatrix<f64>>,
    pub taus: Vec<Tau>,
}

impl PreparedTerm {
    pub fn new(spec: TermSpec, weights: DMatrix<f64>, taus: Vec<Tau>) -> Self {
        PreparedTerm {
            spec,
            weights: Arc::new(weights),
            taus,
        }
    }

    pub fn name(&self) -> String {
        self.spec.name()
    }

    pub fn build(&self, lambda: f64) -> Result<AdditiveTerm> {
        AdditiveTerm::from_weights(&self.name(), &self.weights, self.spec.smoother, lambda)
    }
}

/// `(gamma, k)` minimizing `||phi_U - (I - S_UU)^{-1} S_UL Y_L||^2` with the
/// stochastic smoother of each candidate's weights. Candidates that do not
/// yield a transductive smoother are skipped; ties go to the smaller gamma,
/// then the smaller k.
pub fn learner_match(
    view: &PreparedView,
    partition: &Partition,
    y_l: &DVector<f64>,
    predictions: &LearnerPredictions,
    grid: &[Tau],
) -> Result<(Tau, f64)> {
    if predictions.phi_u.len() != partition.unlabeled().len() {
        return Err(Error::Dimension(format!(
            "{} learner predictions for {} unlabeled observations",
            predictions.phi_u.len(),
            partition.unlabeled().len()
        )));
    }
    best_over_grid(grid, |tau| {
        let w = view.weights(tau)?;
        let s = smoother::stochastic_smoother(&w, partition)?;
        let fit = closed_form_fit(&s, y_l)?;
        Ok((&predictions.phi_u - &fit.yhat_u).norm_squared())
    })
    .map_err(|e| Error::NoValidCandidate(format!("learner matching for {}: {e}", view.name)))
}

/// Smoother matrix of a weight matrix under `form`.
pub fn smoother_for(w: &DMatrix<f64>, form: SmootherForm, lambda: f64) -> Result<DMatrix<f64>> {
    Ok(AdditiveTerm::from_weights("", w, form, lambda)?.smoother)
}

/// `(gamma, k)` minimizing the exact single-view tGCV of the smoother built
/// with `form` and `lambda`. Ties as in [`learner_match`].
pub fn tgcv_within_view(
    view: &PreparedView,
    form: SmootherForm,
    lambda: f64,
    partition: &Partition,
    y_l: &DVector<f64>,
    grid: &[Tau],
) -> Result<(Tau, f64)> {
    best_over_grid(grid, |tau| {
        let w = view.weights(tau)?;
        let s = smoother_for(&w, form, lambda)?;
        let ts = TransductiveSmoother::new(s, partition, SmootherTag::Custom)?;
        let ops = labeled_operators(&ts)?;
        tgcv(&ops.m_ll, y_l)
    })
    .map_err(|e| Error::NoValidCandidate(format!("tGCV for view {}: {e}", view.name)))
}

fn best_over_grid(grid: &[Tau], mut score: impl FnMut(&Tau) -> Result<f64>) -> Result<(Tau, f64)> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty parameter grid".into()));
    }
    let mut order: Vec<&Tau> = grid.iter().collect();
    order.sort_by(|a, b| a.order(b));
    let mut best: Option<(Tau, f64)> = None;
    let mut last_err = None;
    for tau in order {
        match score(tau) {
            Ok(v) if v.is_finite() => {
                if best.map_or(true, |(_, b)| v < b) {
                    best = Some((*tau, v));
                }
            }
            Ok(v) => last_err = Some(Error::NonFinite(format!("criterion {v}"))),
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::NoValidCandidate("empty grid".into())))
}

/// How the within-view parameters of a view are chosen.
#[derive(Debug, Clone, Default)]
pub struct TauOptions {
    /// Learner predictions per view name; views listed here are calibrated
    /// by learner matching, the rest by within-view tGCV.
    pub learners: HashMap<String, LearnerPredictions>,
    /// Explicit gamma grids per view name (default: around the median
    /// distance).
    pub gamma_grids: HashMap<String, Vec<f64>>,
}

/// Resolves every term's weight matrix: per-view `(gamma, k)` come from the
/// view's main-effect term, falling back to the interaction's own settings.
/// Bandwidths marked for estimation (and feature views without one) are
/// estimated by learner matching or within-view tGCV.
pub fn prepare_terms(
    terms: &[TermSpec],
    views: &HashMap<String, PreparedView>,
    partition: &Partition,
    y_l: &DVector<f64>,
    opts: &TauOptions,
) -> Result<Vec<PreparedTerm>> {
    let mut resolved: HashMap<String, Tau> = HashMap::new();
    let mains = terms.iter().filter(|t| t.kind == TermKind::Main);
    let inters = terms.iter().filter(|t| t.kind == TermKind::Interaction);
    for t in mains.chain(inters) {
        for v in &t.views {
            if resolved.contains_key(v) {
                continue;
            }
            let view = views
                .get(v)
                .ok_or_else(|| Error::InvalidSpec(format!("unknown view \"{v}\"")))?;
            let tau = resolve_tau(t, view, partition, y_l, opts)?;
            resolved.insert(v.clone(), tau);
        }
    }
    let mut weights_of: HashMap<&str, DMatrix<f64>> = HashMap::new();
    for (v, tau) in &resolved {
        weights_of.insert(v.as_str(), views[v].weights(tau)?);
    }
    terms
        .iter()
        .map(|t| {
            let taus: Vec<Tau> = t.views.iter().map(|v| resolved[v]).collect();
            let w = match t.kind {
                TermKind::Main => weights_of[t.views[0].as_str()].clone(),
                TermKind::Interaction => smoother::interaction_graph(
                    &weights_of[t.views[0].as_str()],
                    &weights_of[t.views[1].as_str()],
                    t.interaction_op,
                )?,
            };
            Ok(PreparedTerm::new(t.clone(), w, taus))
        })
        .collect()
}

fn resolve_tau(
    term: &TermSpec,
    view: &PreparedView,
    partition: &Partition,
    y_l: &DVector<f64>,
    opts: &TauOptions,
) -> Result<Tau> {
    let estimate = match term.gamma {
        Some(Param::Fixed(g)) => return Ok(Tau::new(Some(g), term.k)),
        Some(Param::Estimate) => true,
        None => !view.is_graph(),
    };
    if !estimate {
        return Ok(Tau::new(None, term.k));
    }
    let k = match term.k {
        Some(k) => KChoice::Fixed(k),
        None => KChoice::None,
    };
    let grid = match opts.gamma_grids.get(&view.name) {
        Some(gs) => tau_grid(gs, &[term.k]),
        None => view.default_tau_grid(k)?,
    };
    let (tau, _) = match opts.learners.get(&view.name) {
        Some(pred) => learner_match(view, partition, y_l, pred, &grid)?,
        None => {
            let lambda = term.lambda.fixed().unwrap_or(1.0);
            tgcv_within_view(view, term.smoother, lambda, partition, y_l, &grid)?
        }
    };
    Ok(tau)
}

// ---------------------------------------------------------------------------
// Smoothing weights

struct CachedTerm {
    term: AdditiveTerm,
    trace: f64,
    warm: Option<LabeledOperators>,
}

/// Smoothers, labeled traces and warm-start operators per `(term, lambda)`,
/// shared by every model of a search.
#[derive(Default)]
pub struct TermCache {
    entries: Mutex<HashMap<(String, u64), Arc<CachedTerm>>>,
}

impl TermCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&self, term: &PreparedTerm, lambda: f64, partition: &Partition) -> Result<Arc<CachedTerm>> {
        let key = (term.name(), lambda.to_bits());
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let built = term.build(lambda)?;
        let trace = additive::labeled_trace(&built.smoother, partition)?;
        let warm = if partition.unlabeled().is_empty() {
            None
        } else {
            additive::centered_operators(&built, partition).ok()
        };
        let entry = Arc::new(CachedTerm {
            term: built,
            trace,
            warm,
        });
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key, entry.clone());
        Ok(entry)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaEstimate {
    pub lambdas: Vec<f64>,
    pub tgcv: f64,
    pub cycles: usize,
}

const MAX_CYCLES: usize = 50;

/// Coordinate descent over per-term grids on the tGCV of the identity-link
/// transductive backfit (binary responses are treated as continuous here).
/// Each term in turn moves to the grid point minimizing tGCV with the other
/// terms held fixed; a full cycle without moves ends the search. Ties go to
/// the smaller lambda.
pub fn estimate_lambdas(
    terms: &[PreparedTerm],
    partition: &Partition,
    y_l: &DVector<f64>,
    grids: &[Vec<f64>],
    cache: &TermCache,
    opts: &FitOptions,
) -> Result<LambdaEstimate> {
    if terms.len() != grids.len() {
        return Err(Error::Dimension(format!(
            "{} terms but {} lambda grids",
            terms.len(),
            grids.len()
        )));
    }
    if terms.is_empty() {
        return Err(Error::InvalidSpec("no terms".into()));
    }
    let mut grids: Vec<Vec<f64>> = grids.to_vec();
    for (t, g) in terms.iter().zip(grids.iter_mut()) {
        if g.is_empty() || g.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda grid for {} must be nonempty and positive",
                t.name()
            )));
        }
        g.sort_by(f64::total_cmp);
        g.dedup();
    }
    let mut scores: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut evaluate = |idx: &[usize]| -> f64 {
        if let Some(v) = scores.get(idx) {
            return *v;
        }
        let r = lambda_tgcv(terms, idx, &grids, partition, y_l, cache, opts);
        let v = r.unwrap_or(f64::INFINITY);
        scores.insert(idx.to_vec(), v);
        v
    };

    // heaviest smoothing first: the lowest-df corner is the last to saturate
    let mut idx: Vec<usize> = grids.iter().map(|g| g.len() - 1).collect();
    let mut current = evaluate(&idx);
    let mut cycles = 0;
    loop {
        cycles += 1;
        let mut moved = false;
        for l in 0..terms.len() {
            let mut best = (idx[l], current);
            for j in 0..grids[l].len() {
                if j == idx[l] {
                    continue;
                }
                let mut trial = idx.clone();
                trial[l] = j;
                let v = evaluate(&trial);
                if v < best.1 || (v.is_finite() && v == best.1 && j < best.0) {
                    best = (j, v);
                }
            }
            if best.0 != idx[l] {
                idx[l] = best.0;
                current = best.1;
                moved = true;
            }
        }
        if !moved || cycles >= MAX_CYCLES {
            break;
        }
    }
    if !current.is_finite() {
        return Err(Error::Saturated(
            "tGCV is undefined at every grid point visited".into(),
        ));
    }
    Ok(LambdaEstimate {
        lambdas: idx.iter().zip(&grids).map(|(&i, g)| g[i]).collect(),
        tgcv: current,
        cycles,
    })
}

fn lambda_tgcv(
    terms: &[PreparedTerm],
    idx: &[usize],
    grids: &[Vec<f64>],
    partition: &Partition,
    y_l: &DVector<f64>,
    cache: &TermCache,
    opts: &FitOptions,
) -> Result<f64> {
    let entries = terms
        .iter()
        .zip(idx.iter().zip(grids))
        .map(|(t, (&i, g))| cache.get(t, g[i], partition))
        .collect::<Result<Vec<_>>>()?;
    let traces: Vec<f64> = entries.iter().map(|e| e.trace).collect();
    df_denominator(&traces, y_l.len())?;
    let built: Vec<AdditiveTerm> = entries.iter().map(|e| e.term.clone()).collect();
    let warm: Option<Vec<LabeledOperators>> = if opts.warm_start {
        entries.iter().map(|e| e.warm.clone()).collect()
    } else {
        None
    };
    let fit_opts = FitOptions {
        compute_traces: false,
        ..opts.clone()
    };
    let fit = additive::transductive_backfit_with(&built, partition, y_l, &fit_opts, warm.as_deref())?;
    tgcv_backfit(y_l, &fit.eta_l(partition), &traces)
}

// ---------------------------------------------------------------------------
// Convergence radius

/// Spectral radius of `sum_j sum_{i != j} [(I - S_j S_i)^{-1} S_j (I - S_i)]_UU`
/// with the centered local-scoring smoothers `S_i = C (lambda_i P_i + V)^{-1} V`.
/// Only two-term models are evaluated; other sizes give `None`.
pub fn prop1_radius(
    penalties: &[&DMatrix<f64>],
    lambdas: &[f64],
    variance: &DVector<f64>,
    partition: &Partition,
) -> Result<Option<f64>> {
    if penalties.len() != lambdas.len() {
        return Err(Error::Dimension("one lambda per penalty".into()));
    }
    if penalties.len() != 2 {
        return Ok(None);
    }
    let mat = prop1_matrix(penalties, lambdas, variance, partition)?;
    Ok(Some(linalg::spectral_radius(&mat)))
}

/// The `UU` block whose spectral radius [`prop1_radius`] reports.
pub fn prop1_matrix(
    penalties: &[&DMatrix<f64>],
    lambdas: &[f64],
    variance: &DVector<f64>,
    partition: &Partition,
) -> Result<DMatrix<f64>> {
    let n = partition.n();
    if variance.len() != n || penalties.iter().any(|p| p.shape() != (n, n)) {
        return Err(Error::Dimension("penalties and weights must match n".into()));
    }
    let s: Vec<DMatrix<f64>> = penalties
        .iter()
        .zip(lambdas)
        .map(|(p, &l)| additive::weighted_smoother(p, l, variance).map(|m| linalg::center_rows(&m)))
        .collect::<Result<_>>()?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut total = DMatrix::zeros(n, n);
    for j in 0..s.len() {
        for i in 0..s.len() {
            if i == j {
                continue;
            }
            let a = &eye - &s[j] * &s[i];
            let b = &s[j] * (&eye - &s[i]);
            total += linalg::solve(&a, &b, "I - S_j S_i")?;
        }
    }
    let u = partition.unlabeled();
    Ok(submatrix(&total, u, u))
}

// ---------------------------------------------------------------------------
// Model search

#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub model_terms: Vec<String>,
    pub lambda: Vec<f64>,
    pub tau: Vec<Vec<Tau>>,
    pub traces: Vec<f64>,
    pub tgcv: f64,
    pub taic: f64,
    pub df: f64,
    pub loss: f64,
    pub prop1_radius: Option<f64>,
    pub converged: bool,
    pub separation: bool,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub link: Link,
    pub hierarchy: bool,
    pub lambda_grid: Vec<f64>,
    pub fit: FitOptions,
    pub prop1: bool,
}

impl SearchConfig {
    pub fn new(link: Link) -> Self {
        SearchConfig {
            link,
            hierarchy: true,
            lambda_grid: default_lambda_grid(),
            fit: FitOptions::default(),
            prop1: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FailedModel {
    pub model_terms: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Reports sorted by tAIC (ties: fewer terms, then declaration order).
    pub reports: Vec<SelectionReport>,
    pub failed: Vec<FailedModel>,
}

impl SearchOutcome {
    pub fn best(&self) -> Option<&SelectionReport> {
        self.reports.first()
    }
}

/// Nonempty index subsets ordered by size, then lexicographically; with
/// `hierarchy`, subsets holding an interaction without both main effects are
/// dropped.
pub fn admissible_models(terms: &[TermSpec], hierarchy: bool) -> Vec<Vec<usize>> {
    let q = terms.len();
    let mut out = Vec::new();
    for size in 1..=q {
        let mut comb: Vec<usize> = (0..size).collect();
        loop {
            let subset: Vec<TermSpec> = comb.iter().map(|&i| terms[i].clone()).collect();
            if !hierarchy || views::check_hierarchy(&subset).is_ok() {
                out.push(comb.clone());
            }
            // next combination
            let mut i = size;
            while i > 0 && comb[i - 1] == q - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            comb[i - 1] += 1;
            for j in i..size {
                comb[j] = comb[j - 1] + 1;
            }
        }
    }
    out
}

/// Fits one model: lambda estimation by tGCV, then the link's fit, scored by
/// tAIC with the aggregate degrees of freedom.
pub fn evaluate_model(
    terms: &[PreparedTerm],
    partition: &Partition,
    y_l: &DVector<f64>,
    config: &SearchConfig,
    cache: &TermCache,
) -> Result<(SelectionReport, AdditiveFit)> {
    let grids: Vec<Vec<f64>> = terms
        .iter()
        .map(|t| match t.spec.lambda {
            Param::Fixed(l) => vec![l],
            Param::Estimate => config.lambda_grid.clone(),
        })
        .collect();
    let est = estimate_lambdas(terms, partition, y_l, &grids, cache, &config.fit)?;
    let built = terms
        .iter()
        .zip(&est.lambdas)
        .map(|(t, &l)| cache.get(t, l, partition).map(|e| e.term.clone()))
        .collect::<Result<Vec<_>>>()?;
    let fit = additive::fit(config.link, &built, partition, y_l, &config.fit)?;
    let traces = fit.traces();
    let df = df_aggregate(&traces);
    let fitted = fit.yhat_l(partition);
    let l = loss(&fitted, y_l, config.link)?;
    let score = taic(&fitted, y_l, config.link, df)?;
    let prop1 = if config.prop1 && built.len() == 2 && !partition.unlabeled().is_empty() {
        let v = fit
            .variance
            .clone()
            .unwrap_or_else(|| DVector::from_element(partition.n(), 1.0));
        let penalties: Vec<&DMatrix<f64>> = built.iter().map(|t| &t.penalty).collect();
        prop1_radius(&penalties, &est.lambdas, &v, partition).ok().flatten()
    } else {
        None
    };
    let report = SelectionReport {
        model_terms: terms.iter().map(|t| t.name()).collect(),
        lambda: est.lambdas,
        tau: terms.iter().map(|t| t.taus.clone()).collect(),
        traces,
        tgcv: est.tgcv,
        taic: score,
        df,
        loss: l,
        prop1_radius: prop1,
        converged: fit.converged,
        separation: fit.separation,
    };
    Ok((report, fit))
}

/// Fits every admissible model and ranks them by tAIC.
pub fn hierarchical_search(
    candidates: &[PreparedTerm],
    partition: &Partition,
    y_l: &DVector<f64>,
    config: &SearchConfig,
    cache: &TermCache,
) -> Result<SearchOutcome> {
    let specs: Vec<TermSpec> = candidates.iter().map(|t| t.spec.clone()).collect();
    let models = admissible_models(&specs, config.hierarchy);
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for subset in models {
        let terms: Vec<PreparedTerm> = subset.iter().map(|&i| candidates[i].clone()).collect();
        match evaluate_model(&terms, partition, y_l, config, cache) {
            Ok((r, _)) if r.taic.is_finite() => reports.push(r),
            Ok((r, _)) => failed.push(FailedModel {
                model_terms: r.model_terms,
                reason: format!("tAIC is {}", r.taic),
            }),
            Err(e) => failed.push(FailedModel {
                model_terms: terms.iter().map(|t| t.name()).collect(),
                reason: e.to_string(),
            }),
        }
    }
    // stable: ties keep enumeration order (fewer terms, declaration order)
    reports.sort_by(|a, b| a.taic.total_cmp(&b.taic));
    Ok(SearchOutcome { reports, failed })
}

/// Main-effect spec on a single view.
pub fn main_effect_spec(view: &str, form: SmootherForm, lambda: Param, tau: Tau) -> TermSpec {
    TermSpec {
        views: vec![view.to_string()],
        kind: TermKind::Main,
        interaction_op: InteractionOp::default(),
        smoother: form,
        gamma: tau.gamma.map(Param::Fixed),
        k: tau.k,
        lambda,
    }
}

/// Main-effect term with an already resolved weight matrix.
pub fn main_effect_term(
    view: &str,
    weights: DMatrix<f64>,
    form: SmootherForm,
    lambda: Param,
    tau: Tau,
) -> PreparedTerm {
    PreparedTerm::new(main_effect_spec(view, form, lambda, tau), weights, vec![tau])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn term(views: &[&str], kind: TermKind) -> TermSpec {
        TermSpec {
            views: views.iter().map(|s| s.to_string()).collect(),
            kind,
            interaction_op: InteractionOp::Intersection,
            smoother: SmootherForm::Symmetric,
            gamma: None,
            k: None,
            lambda: Param::Estimate,
        }
    }

    #[test]
    fn tgcv_hand_values() {
        let y = DVector::from_vec(vec![1.0, -1.0]);
        assert_abs_diff_eq!(tgcv(&DMatrix::zeros(2, 2), &y).unwrap(), 2.0, epsilon = 1e-12);
        let half = DMatrix::identity(2, 2) * 0.5;
        let y = DVector::from_vec(vec![2.0, 0.0]);
        assert_abs_diff_eq!(tgcv(&half, &y).unwrap(), 4.0, epsilon = 1e-12);
        assert!(matches!(
            tgcv(&DMatrix::identity(2, 2), &y),
            Err(Error::Saturated(_))
        ));
    }

    #[test]
    fn df_denominator_hand_values() {
        assert_abs_diff_eq!(df_denominator(&[1.0, 1.0], 10).unwrap(), 0.81, epsilon = 1e-12);
        assert_abs_diff_eq!(df_denominator(&[], 4).unwrap(), 0.5625, epsilon = 1e-12);
        assert!(df_denominator(&[5.0], 5).is_err());
    }

    #[test]
    fn taic_logistic_half() {
        let p = DVector::from_vec(vec![0.5, 0.5]);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let v = taic(&p, &y, Link::Logit, 0.0).unwrap();
        assert_abs_diff_eq!(v, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
        let p = DVector::from_vec(vec![0.0, 0.5]);
        assert_eq!(loss(&p, &y, Link::Logit).unwrap(), f64::INFINITY);
    }

    #[test]
    fn model_menus() {
        let t = vec![
            term(&["B"], TermKind::Main),
            term(&["C"], TermKind::Main),
            term(&["B", "C"], TermKind::Interaction),
        ];
        assert_eq!(
            admissible_models(&t, true),
            vec![vec![0], vec![1], vec![0, 1], vec![0, 1, 2]]
        );
        let t = vec![term(&["S"], TermKind::Main), term(&["D"], TermKind::Main)];
        assert_eq!(admissible_models(&t, true), vec![vec![0], vec![1], vec![0, 1]]);
        assert_eq!(admissible_models(&t[..1], true), vec![vec![0]]);
    }

    #[test]
    fn grids() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 13);
        assert_abs_diff_eq!(g[0], 1e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(g[6], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[12], 1e3, epsilon = 1e-9);
        assert_eq!(default_k_grid(50), vec![3, 5, 8, 10]);
        assert_eq!(default_k_grid(4), vec![2, 3]);
    }
}
