//! Penalty matrices and transductive smoothers built from feature and graph
//! views.
//!
//! Every [`TransductiveSmoother`] that leaves a constructor satisfies
//! `rho(S_UU) < 1`; constructors reject anything else.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, submatrix};
use crate::views::{FeatureView, InteractionOp, Partition};

const SYMMETRY_TOL: f64 = 1e-10;
/// Radii within this distance of 1 count as 1 (round-off on stochastic
/// blocks with an unlabeled closed class lands on either side of 1).
pub const RHO_MARGIN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    CosineDissimilarity,
    ShortestPath,
}

/// Exponential kernel `K(d) = exp(-d / gamma)` over a chosen distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub gamma: f64,
    pub distance: Distance,
}

impl KernelSpec {
    pub fn new(gamma: f64, distance: Distance) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        Ok(KernelSpec { gamma, distance })
    }

    pub fn eval(&self, d: f64) -> f64 {
        (-d / self.gamma).exp()
    }
}

#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    pub p: DMatrix<f64>,
    pub source_view: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmootherTag {
    Stochastic,
    Regularized,
    Symmetric,
    Centered,
    Custom,
}

#[derive(Debug, Clone)]
pub struct TransductiveSmoother {
    s: DMatrix<f64>,
    partition: Partition,
    rho_uu: f64,
    form: SmootherTag,
}

impl TransductiveSmoother {
    /// Wraps an arbitrary linear smoother after checking `rho(S_UU) < 1`.
    pub fn new(s: DMatrix<f64>, partition: &Partition, form: SmootherTag) -> Result<Self> {
        let n = linalg::require_square(&s, "smoother")?;
        if n != partition.n() {
            return Err(Error::Dimension(format!(
                "smoother is {n}x{n} but partition has n = {}",
                partition.n()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("smoother entries".into()));
        }
        let rho_uu = spectral_radius_uu(&s, partition);
        if !(rho_uu < 1.0 - RHO_MARGIN) {
            return Err(Error::NotTransductive { rho: rho_uu });
        }
        Ok(TransductiveSmoother {
            s,
            partition: partition.clone(),
            rho_uu,
            form,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn rho_uu(&self) -> f64 {
        self.rho_uu
    }

    pub fn form(&self) -> SmootherTag {
        self.form
    }

    pub fn ll(&self) -> DMatrix<f64> {
        submatrix(&self.s, self.partition.labeled(), self.partition.labeled())
    }

    pub fn lu(&self) -> DMatrix<f64> {
        submatrix(&self.s, self.partition.labeled(), self.partition.unlabeled())
    }

    pub fn ul(&self) -> DMatrix<f64> {
        submatrix(&self.s, self.partition.unlabeled(), self.partition.labeled())
    }

    pub fn uu(&self) -> DMatrix<f64> {
        submatrix(&self.s, self.partition.unlabeled(), self.partition.unlabeled())
    }

    /// `C S` with `C = I - 11'/n`.
    pub fn centered(&self) -> Result<Self> {
        TransductiveSmoother::new(linalg::center_rows(&self.s), &self.partition, SmootherTag::Centered)
    }
}

/// Pairwise distances between the rows of a feature view.
pub fn pairwise_distances(view: &FeatureView, distance: Distance) -> Result<DMatrix<f64>> {
    let x = &view.data;
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    match distance {
        Distance::Euclidean => {
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = (x.row(i) - x.row(j)).norm();
                    d[(i, j)] = v;
                    d[(j, i)] = v;
                }
            }
        }
        Distance::CosineDissimilarity => {
            let norms: Vec<f64> = (0..n).map(|i| x.row(i).norm()).collect();
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                        if x.row(i) == x.row(j) {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        (1.0 - x.row(i).dot(&x.row(j)) / (norms[i] * norms[j])).max(0.0)
                    };
                    d[(i, j)] = v;
                    d[(j, i)] = v;
                }
            }
        }
        Distance::ShortestPath => {
            return Err(Error::InvalidParameter(
                "shortest-path distance needs a graph view".into(),
            ))
        }
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("distance in view {}", view.name)));
    }
    Ok(d)
}

/// Applies the exponential kernel elementwise to a distance matrix.
/// Infinite distances (different components) map to weight 0.
pub fn kernel_from_distances(d: &DMatrix<f64>, kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    if d.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::NonFinite("distance matrix has NaN or negative entries".into()));
    }
    Ok(d.map(|v| if v.is_infinite() { 0.0 } else { kernel.eval(v) }))
}

/// `W_ij = exp(-d(x_i, x_j) / gamma)`.
pub fn kernel_weights(view: &FeatureView, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let d = pairwise_distances(view, spec.distance)?;
    kernel_from_distances(&d, spec)
}

/// Keeps each node's `k` largest off-diagonal weights (ties to the lower
/// index) and symmetrizes by union: `A_ij = max` of the retained directed
/// weights.
pub fn knn_graph(w: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let n = linalg::require_square(w, "weight matrix")?;
    if k < 1 || k + 1 > n {
        return Err(Error::InvalidParameter(format!(
            "k = {k} out of range 1..={}",
            n.saturating_sub(1)
        )));
    }
    let mut a = DMatrix::zeros(n, n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        // stable sort keeps lower index first among equal weights
        order.sort_by(|&a_, &b_| w[(i, b_)].total_cmp(&w[(i, a_)]));
        for &j in order.iter().take(k) {
            let v = w[(i, j)];
            if v > a[(i, j)] {
                a[(i, j)] = v;
            }
            if v > a[(j, i)] {
                a[(j, i)] = v;
            }
        }
    }
    Ok(a)
}

pub fn check_weights(w: &DMatrix<f64>, what: &str) -> Result<usize> {
    let n = linalg::require_square(w, what)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    if let Some(v) = w.iter().find(|v| **v < 0.0) {
        return Err(Error::InvalidParameter(format!("{what} has negative entry {v}")));
    }
    let scale = w.amax().max(1.0);
    let asym = linalg::max_asymmetry(w);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Asymmetric(asym));
    }
    Ok(n)
}

/// `P = D - W`, `D` the row-sum diagonal. Self-loops cancel out of `P`.
pub fn combinatorial_laplacian(w: &DMatrix<f64>, source_view: &str) -> Result<PenaltyMatrix> {
    let n = check_weights(w, "weight matrix")?;
    let mut p = -w.clone();
    for i in 0..n {
        let deg: f64 = w.row(i).sum();
        p[(i, i)] += deg;
    }
    Ok(PenaltyMatrix {
        p,
        source_view: source_view.to_string(),
    })
}

/// `S = D^{-1} A`.
pub fn stochastic_smoother(a: &DMatrix<f64>, partition: &Partition) -> Result<TransductiveSmoother> {
    let n = check_weights(a, "adjacency")?;
    let mut s = a.clone();
    for i in 0..n {
        let deg: f64 = a.row(i).sum();
        if !(deg > 0.0) {
            return Err(Error::ZeroDegree(i));
        }
        s.row_mut(i).scale_mut(1.0 / deg);
    }
    TransductiveSmoother::new(s, partition, SmootherTag::Stochastic)
}

/// `S = (A + lambda P)^{-1} A`, `P` the Laplacian of `A`.
pub fn regularized_smoother(
    a: &DMatrix<f64>,
    lambda: f64,
    partition: &Partition,
) -> Result<TransductiveSmoother> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let p = combinatorial_laplacian(a, "")?;
    let lhs = a + &p.p * lambda;
    let s = linalg::solve(&lhs, a, "A + lambda P")?;
    TransductiveSmoother::new(s, partition, SmootherTag::Regularized)
}

/// `S = (I + lambda P)^{-1}`.
pub fn symmetric_smoother(
    p: &PenaltyMatrix,
    lambda: f64,
    partition: &Partition,
) -> Result<TransductiveSmoother> {
    let s = symmetric_smoother_matrix(&p.p, lambda)?;
    TransductiveSmoother::new(s, partition, SmootherTag::Symmetric)
}

pub fn symmetric_smoother_matrix(p: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let n = linalg::require_square(p, "penalty")?;
    let lhs = DMatrix::identity(n, n) + p * lambda;
    let mut s = linalg::solve(&lhs, &DMatrix::identity(n, n), "I + lambda P")?;
    // restore exact symmetry lost to round-off
    s = (&s + s.transpose()) * 0.5;
    Ok(s)
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All-pairs shortest-path distances with edge length `1 / weight`
/// (unit weights give hop counts). Self-loops are ignored; unreachable pairs
/// get `+inf`.
pub fn shortest_path_distances(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = check_weights(a, "adjacency")?;
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && a[(i, j)] > 0.0)
                .map(|j| (j, 1.0 / a[(i, j)]))
                .collect()
        })
        .collect();
    let mut out = DMatrix::from_element(n, n, f64::INFINITY);
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for src in 0..n {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        dist[src] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: src });
        while let Some(HeapItem { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &(nb, len) in &neighbors[node] {
                let nd = d + len;
                if nd < dist[nb] {
                    dist[nb] = nd;
                    heap.push(HeapItem { dist: nd, node: nb });
                }
            }
        }
        for j in 0..n {
            out[(src, j)] = dist[j];
        }
    }
    // exact symmetry regardless of summation order along paths
    for i in 0..n {
        for j in (i + 1)..n {
            let v = out[(i, j)].min(out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Replaces each connected component by a complete graph weighted with
/// `K(d_sp)`; cross-component weights stay 0 and the diagonal is 0. With
/// `thin_k`, the completed graph is thinned to its K-NN graph.
pub fn shortest_path_complete(
    a: &DMatrix<f64>,
    kernel: &KernelSpec,
    thin_k: Option<usize>,
) -> Result<DMatrix<f64>> {
    let d = shortest_path_distances(a)?;
    let mut w = kernel_from_distances(&d, kernel)?;
    w.fill_diagonal(0.0);
    match thin_k {
        Some(k) => knn_graph(&w, k),
        None => Ok(w),
    }
}

/// Intersection `sqrt(W1 * W2)` or union `(W1 + W2) / 2`, elementwise.
pub fn interaction_graph(
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    op: InteractionOp,
) -> Result<DMatrix<f64>> {
    if w1.shape() != w2.shape() {
        return Err(Error::Dimension(format!(
            "interaction of {:?} and {:?} weight matrices",
            w1.shape(),
            w2.shape()
        )));
    }
    Ok(match op {
        InteractionOp::Intersection => w1.zip_map(w2, |a, b| (a * b).sqrt()),
        InteractionOp::Union => w1.zip_map(w2, |a, b| 0.5 * (a + b)),
    })
}

/// `rho(S_UU)`; 0 when every observation is labeled.
pub fn spectral_radius_uu(s: &DMatrix<f64>, partition: &Partition) -> f64 {
    let u = partition.unlabeled();
    if u.is_empty() {
        return 0.0;
    }
    linalg::spectral_radius(&submatrix(s, u, u))
}

/// Connected-component index per node, treating any positive weight in
/// either direction as an edge.
pub fn components(a: &DMatrix<f64>) -> Vec<usize> {
    let n = a.nrows();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = next;
        while let Some(v) = stack.pop() {
            for j in 0..n {
                if j != v && comp[j] == usize::MAX && (a[(v, j)] > 0.0 || a[(j, v)] > 0.0) {
                    comp[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Unlabeled nodes whose component holds no labeled node; shortest-path
/// completion cannot reach them.
pub fn unreached_unlabeled(a: &DMatrix<f64>, partition: &Partition) -> Vec<usize> {
    let comp = components(a);
    let ncomp = comp.iter().copied().max().map_or(0, |m| m + 1);
    let mut has_label = vec![false; ncomp];
    for &i in partition.labeled() {
        has_label[comp[i]] = true;
    }
    partition
        .unlabeled()
        .iter()
        .copied()
        .filter(|&i| !has_label[comp[i]])
        .collect()
}

pub fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()))
}
