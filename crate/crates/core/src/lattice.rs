//! Simulated lattice benchmark: two graph views over a grid (rook and bishop
//! neighbourhoods), block-patterned binary responses, labeled-fraction
//! sweeps with seeded replications, scored by accuracy and kappa on the
//! unlabeled nodes.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::additive::{assign, FitOptions};
use crate::error::{Error, Result};
use crate::modelsel::{self, PreparedTerm, PreparedView, SearchConfig, TermCache, Tau};
use crate::smoother::KernelSpec;
use crate::views::{GraphView, Link, Param, Partition, SmootherForm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// Rook moves: N, S, E, W.
    Square,
    /// Bishop steps: the four diagonal neighbours.
    Diagonal,
}

impl Neighborhood {
    pub fn label(self) -> &'static str {
        match self {
            Neighborhood::Square => "S",
            Neighborhood::Diagonal => "D",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Checkerboard,
    /// Checkerboard on the left half of the columns, horizontal stripes of
    /// height `block` on the right half.
    Mixed,
}

/// Unit-weight lattice graph; node `(i, j)` has index `i * cols + j`.
pub fn make_lattice(rows: usize, cols: usize, nb: Neighborhood) -> Result<GraphView> {
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidParameter(format!(
            "lattice must be at least 2x2, got {rows}x{cols}"
        )));
    }
    let n = rows * cols;
    let mut a = DMatrix::zeros(n, n);
    let steps: &[(isize, isize)] = match nb {
        Neighborhood::Square => &[(0, 1), (1, 0)],
        Neighborhood::Diagonal => &[(1, 1), (1, -1)],
    };
    for i in 0..rows {
        for j in 0..cols {
            for &(di, dj) in steps {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= rows as isize || nj >= cols as isize {
                    continue;
                }
                let (u, v) = (i * cols + j, ni as usize * cols + nj as usize);
                a[(u, v)] = 1.0;
                a[(v, u)] = 1.0;
            }
        }
    }
    Ok(GraphView {
        name: nb.label().to_string(),
        adjacency: a,
    })
}

pub fn make_response(rows: usize, cols: usize, pattern: Pattern, block: usize) -> Result<Vec<u8>> {
    if block == 0 {
        return Err(Error::InvalidParameter("block size must be positive".into()));
    }
    if pattern == Pattern::Checkerboard && rows.min(cols) % block != 0 {
        return Err(Error::InvalidParameter(format!(
            "block size {block} does not divide {}",
            rows.min(cols)
        )));
    }
    let checker = |i: usize, j: usize| ((i / block + j / block) % 2) as u8;
    Ok((0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| match pattern {
            Pattern::Checkerboard => checker(i, j),
            Pattern::Mixed if j < cols / 2 => checker(i, j),
            Pattern::Mixed => ((i / block) % 2) as u8,
        })
        .collect())
}

/// Hop-count distances from every node by breadth-first search;
/// unreachable pairs are infinite.
pub fn hop_distances(g: &GraphView) -> DMatrix<f64> {
    let a = &g.adjacency;
    let n = a.nrows();
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && a[(i, j)] > 0.0).collect())
        .collect();
    let mut d = DMatrix::from_element(n, n, f64::INFINITY);
    let mut queue = VecDeque::new();
    for s in 0..n {
        d[(s, s)] = 0.0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            let dv = d[(s, v)];
            for &w in &nbrs[v] {
                if d[(s, w)].is_infinite() {
                    d[(s, w)] = dv + 1.0;
                    queue.push_back(w);
                }
            }
        }
    }
    d
}

/// `W_ij = exp(-d_sp(i, j) / gamma)` with hop-count distances; the diagonal
/// is 1 and different components get 0.
pub fn shortest_path_kernel_weights(g: &GraphView, gamma: f64) -> Result<DMatrix<f64>> {
    let kernel = KernelSpec::new(gamma, crate::smoother::Distance::ShortestPath)?;
    crate::smoother::kernel_from_distances(&hop_distances(g), &kernel)
}

/// 2x2 counts indexed `[truth][prediction]`.
pub type Confusion = [[usize; 2]; 2];

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = [[0; 2]; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        c[usize::from(t != 0)][usize::from(p != 0)] += 1;
    }
    Ok(c)
}

/// Cohen's kappa `(O - E) / (1 - E)`; not applicable when `E = 1`.
pub fn kappa(c: &Confusion) -> Result<f64> {
    let total = (c[0][0] + c[0][1] + c[1][0] + c[1][1]) as f64;
    if total == 0.0 {
        return Err(Error::NotApplicable("kappa of an empty table".into()));
    }
    let observed = (c[0][0] + c[1][1]) as f64 / total;
    let rows = [(c[0][0] + c[0][1]) as f64, (c[1][0] + c[1][1]) as f64];
    let cols = [(c[0][0] + c[1][0]) as f64, (c[0][1] + c[1][1]) as f64];
    let expected = (rows[0] * cols[0] + rows[1] * cols[1]) / (total * total);
    if expected == 1.0 {
        return Err(Error::NotApplicable(
            "expected agreement is 1 (single class on both margins)".into(),
        ));
    }
    Ok((observed - expected) / (1.0 - expected))
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::NotApplicable("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LatticeConfig {
    pub rows: usize,
    pub cols: usize,
    pub neighborhoods: Vec<Neighborhood>,
    pub pattern: Pattern,
    pub block_size: usize,
    pub labeled_fracs: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    /// Bandwidth grid; default spans the median hop distance.
    pub gamma_grid: Option<Vec<f64>>,
    pub lambda_grid: Vec<f64>,
    pub fit: FitOptions,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            rows: 25,
            cols: 25,
            neighborhoods: vec![Neighborhood::Square, Neighborhood::Diagonal],
            pattern: Pattern::Checkerboard,
            block_size: 5,
            labeled_fracs: vec![0.1],
            reps: 50,
            seed: 0,
            gamma_grid: None,
            lambda_grid: modelsel::default_lambda_grid(),
            fit: FitOptions::default(),
        }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::InvalidParameter("lattice must be at least 2x2".into()));
        }
        if self.neighborhoods.is_empty() {
            return Err(Error::InvalidParameter("no neighbourhoods selected".into()));
        }
        if self.reps == 0 {
            return Err(Error::InvalidParameter("reps must be positive".into()));
        }
        if self.labeled_fracs.is_empty() {
            return Err(Error::InvalidParameter("no labeled fractions".into()));
        }
        for &f in &self.labeled_fracs {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "labeled fraction {f} is outside (0, 1]"
                )));
            }
        }
        make_response(self.rows, self.cols, self.pattern, self.block_size)?;
        Ok(())
    }
}

/// One model in one replication. `None` marks a not-applicable value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub model: String,
    pub labeled_frac: f64,
    pub rep: usize,
    pub accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub taic: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub labeled_frac: f64,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_kappa: Option<f64>,
    pub mean_taic: Option<f64>,
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub records: Vec<RepRecord>,
    pub summary: Vec<SummaryRow>,
}

impl BenchResult {
    pub fn summary_for(&self, model: &str, frac: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.model == model && s.labeled_frac == frac)
    }
}

/// Random stream for replication `rep` of fraction index `frac_index`:
/// ChaCha8 seeded with `seed`, stream `(frac_index << 32) | rep`.
pub fn replication_rng(seed: u64, frac_index: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frac_index as u64) << 32) | rep as u64);
    rng
}

/// Uniform labeled set of size `round(frac * n)` (at least 1), sorted.
pub fn sample_labeled(n: usize, frac: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = ((frac * n as f64).round() as usize).clamp(1, n);
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

struct LatticeViews {
    views: Vec<(Neighborhood, PreparedView)>,
    truth: Vec<u8>,
}

fn model_name(terms: &[String]) -> String {
    terms.join("+")
}

pub fn run_benchmark(config: &LatticeConfig) -> Result<BenchResult> {
    config.validate()?;
    let truth = make_response(config.rows, config.cols, config.pattern, config.block_size)?;
    let views = config
        .neighborhoods
        .iter()
        .map(|&nb| {
            let g = make_lattice(config.rows, config.cols, nb)?;
            Ok((nb, PreparedView::from_distances(nb.label(), hop_distances(&g))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let lv = LatticeViews { views, truth };

    let jobs: Vec<(usize, usize)> = (0..config.labeled_fracs.len())
        .flat_map(|f| (0..config.reps).map(move |r| (f, r)))
        .collect();
    let per_job: Vec<Vec<RepRecord>> = jobs
        .par_iter()
        .map(|&(f, r)| run_replication(config, &lv, f, r))
        .collect();
    let records: Vec<RepRecord> = per_job.into_iter().flatten().collect();
    let summary = summarize(&records, config);
    Ok(BenchResult { records, summary })
}

fn menu(config: &LatticeConfig) -> Vec<String> {
    let names: Vec<String> = config
        .neighborhoods
        .iter()
        .map(|nb| nb.label().to_string())
        .collect();
    let specs: Vec<_> = names
        .iter()
        .map(|n| modelsel::main_effect_spec(n, SmootherForm::Regularized, Param::Estimate, Tau::new(None, None)))
        .collect();
    modelsel::admissible_models(&specs, true)
        .into_iter()
        .map(|s| model_name(&s.iter().map(|&i| names[i].clone()).collect::<Vec<_>>()))
        .collect()
}

fn run_replication(config: &LatticeConfig, lv: &LatticeViews, frac_index: usize, rep: usize) -> Vec<RepRecord> {
    let frac = config.labeled_fracs[frac_index];
    let failed = |model: String, e: &Error| RepRecord {
        model,
        labeled_frac: frac,
        rep,
        accuracy: None,
        kappa: None,
        taic: None,
        error: Some(e.to_string()),
    };
    match replication(config, lv, frac_index, rep) {
        Ok(records) => records,
        Err(e) => menu(config).into_iter().map(|m| failed(m, &e)).collect(),
    }
}

fn replication(
    config: &LatticeConfig,
    lv: &LatticeViews,
    frac_index: usize,
    rep: usize,
) -> Result<Vec<RepRecord>> {
    let frac = config.labeled_fracs[frac_index];
    let n = lv.truth.len();
    let mut rng = replication_rng(config.seed, frac_index, rep);
    let labeled = sample_labeled(n, frac, &mut rng);
    let partition = Partition::new(labeled, n)?;
    let y_l = DVector::from_iterator(
        partition.m(),
        partition.labeled().iter().map(|&i| f64::from(lv.truth[i])),
    );
    let truth_u: Vec<u8> = partition.unlabeled().iter().map(|&i| lv.truth[i]).collect();

    // bandwidth per view by single-view tGCV on (W + P)^{-1} W
    let mut terms: Vec<PreparedTerm> = Vec::new();
    for (nb, view) in &lv.views {
        let gammas = match &config.gamma_grid {
            Some(g) => g.clone(),
            None => modelsel::default_gamma_grid(view.median_distance()?),
        };
        let grid = modelsel::tau_grid(&gammas, &[None]);
        let tau = if partition.unlabeled().is_empty() {
            grid[0]
        } else {
            modelsel::tgcv_within_view(view, SmootherForm::Regularized, 1.0, &partition, &y_l, &grid)?.0
        };
        let w = view.weights(&tau)?;
        terms.push(modelsel::main_effect_term(
            nb.label(),
            w,
            SmootherForm::Regularized,
            Param::Estimate,
            tau,
        ));
    }

    let search = SearchConfig {
        link: Link::Logit,
        hierarchy: true,
        lambda_grid: config.lambda_grid.clone(),
        fit: config.fit.clone(),
        prop1: false,
    };
    let cache = TermCache::new();
    let specs: Vec<_> = terms.iter().map(|t| t.spec.clone()).collect();
    let mut records = Vec::new();
    for subset in modelsel::admissible_models(&specs, true) {
        let model_terms: Vec<PreparedTerm> = subset.iter().map(|&i| terms[i].clone()).collect();
        let name = model_name(&model_terms.iter().map(|t| t.name()).collect::<Vec<_>>());
        let rec = match modelsel::evaluate_model(&model_terms, &partition, &y_l, &search, &cache) {
            Ok((report, fit)) => {
                let pred = assign(&fit.yhat_u(&partition), 0.5);
                let (acc, kap) = if truth_u.is_empty() {
                    (None, None)
                } else {
                    let c = confusion(&pred, &truth_u)?;
                    (Some(accuracy(&pred, &truth_u)?), kappa(&c).ok())
                };
                RepRecord {
                    model: name,
                    labeled_frac: frac,
                    rep,
                    accuracy: acc,
                    kappa: kap,
                    taic: Some(report.taic),
                    error: None,
                }
            }
            Err(e) => RepRecord {
                model: name,
                labeled_frac: frac,
                rep,
                accuracy: None,
                kappa: None,
                taic: None,
                error: Some(e.to_string()),
            },
        };
        records.push(rec);
    }
    Ok(records)
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    (Some(mean), std)
}

fn summarize(records: &[RepRecord], config: &LatticeConfig) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &frac in &config.labeled_fracs {
        for model in menu(config) {
            let rows: Vec<&RepRecord> = records
                .iter()
                .filter(|r| r.labeled_frac == frac && r.model == model)
                .collect();
            let ok: Vec<&&RepRecord> = rows.iter().filter(|r| r.error.is_none()).collect();
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
            let kap: Vec<f64> = ok.iter().filter_map(|r| r.kappa).collect();
            let taic: Vec<f64> = ok.iter().filter_map(|r| r.taic).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            out.push(SummaryRow {
                model,
                labeled_frac: frac,
                mean_accuracy,
                std_accuracy,
                mean_kappa: mean_std(&kap).0,
                mean_taic: mean_std(&taic).0,
                reps: ok.len(),
                failures: rows.len() - ok.len(),
            });
        }
    }
    out
}

/// Shortest round-trip decimal form, `NA` for missing values.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

pub fn write_records_csv(records: &[RepRecord], out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "labeled_frac", "rep", "accuracy", "kappa", "taic"])?;
    for r in records {
        w.write_record([
            r.model.clone(),
            format!("{}", r.labeled_frac),
            r.rep.to_string(),
            fmt_opt(r.accuracy),
            fmt_opt(r.kappa),
            fmt_opt(r.taic),
        ])?;
    }
    w.flush().map_err(|e| Error::io("records csv", e))?;
    Ok(())
}

pub fn write_summary_csv(summary: &[SummaryRow], out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "labeled_frac",
        "mean_accuracy",
        "std_accuracy",
        "mean_kappa",
        "mean_taic",
        "reps",
        "failures",
    ])?;
    for s in summary {
        w.write_record([
            s.model.clone(),
            format!("{}", s.labeled_frac),
            fmt_opt(s.mean_accuracy),
            fmt_opt(s.std_accuracy),
            fmt_opt(s.mean_kappa),
            fmt_opt(s.mean_taic),
            s.reps.to_string(),
            s.failures.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("summary csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_lattices() {
        let sq = make_lattice(2, 2, Neighborhood::Square).unwrap();
        assert_eq!(sq.adjacency.sum(), 8.0);
        assert!(sq.adjacency.row_iter().all(|r| r.sum() == 2.0));
        let dg = make_lattice(2, 2, Neighborhood::Diagonal).unwrap();
        assert_eq!(dg.adjacency.sum(), 4.0);
        assert_eq!(dg.adjacency[(0, 3)], 1.0);
        assert_eq!(dg.adjacency[(1, 2)], 1.0);
    }

    #[test]
    fn checkerboard_quadrants() {
        let r = make_response(4, 4, Pattern::Checkerboard, 2).unwrap();
        let expect = [0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0];
        assert_eq!(r, expect);
        assert!(make_response(4, 4, Pattern::Checkerboard, 4).unwrap().iter().all(|&c| c == 0));
        assert!(make_response(4, 4, Pattern::Checkerboard, 3).is_err());
    }

    #[test]
    fn kappa_hand_values() {
        assert_eq!(kappa(&[[5, 0], [0, 5]]).unwrap(), 1.0);
        assert!((kappa(&[[40, 10], [20, 30]]).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(kappa(&[[7, 0], [0, 0]]), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn corner_to_corner_distance() {
        let g = make_lattice(3, 3, Neighborhood::Square).unwrap();
        let w = shortest_path_kernel_weights(&g, 2.0).unwrap();
        assert!((w[(0, 8)] - (-2.0_f64).exp()).abs() < 1e-15);
        assert_eq!(w[(4, 4)], 1.0);
    }
}
