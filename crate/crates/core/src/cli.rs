//! Command-line frontend. Exit codes: 0 ok, 1 error, 2 fit did not
//! converge, 3 smoother not transductive.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::additive::{self, AdditiveFit, FitOptions};
use crate::error::{Error, Result};
use crate::lattice::{self, LatticeConfig, Neighborhood, Pattern};
use crate::modelsel::{
    self, PreparedTerm, PreparedView, SearchConfig, SelectionReport, TauOptions, TermCache,
};
use crate::smoother::{self, Distance, KernelSpec};
use crate::views::{
    self, AdditiveModelSpec, GraphView, LabelVector, Link, Param, Partition, SmootherForm, Task,
    TermKind,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_NOT_TRANSDUCTIVE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mvgam", version, about = "Multi-view transductive additive models")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one configured model.
    Fit(FitArgs),
    /// Fit every admissible submodel of a candidate set and rank by tAIC.
    Select(SelectArgs),
    /// Run the simulated lattice benchmark.
    Lattice(LatticeArgs),
    /// Check whether a graph yields a transductive smoother.
    CheckSmoother(CheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Feature view as NAME=PATH (CSV with header, first column id).
    #[arg(long = "views", value_name = "NAME=PATH", num_args = 1..)]
    pub views: Vec<String>,
    /// Graph view as NAME=PATH (lines `src dst weight`).
    #[arg(long = "graphs", value_name = "NAME=PATH", num_args = 1..)]
    pub graphs: Vec<String>,
    /// Feature views that use cosine dissimilarity instead of Euclidean distance.
    #[arg(long = "cosine", value_name = "NAME", num_args = 1..)]
    pub cosine: Vec<String>,
    /// Learner predictions as NAME=PATH (`id,phi`) for calibrating a view.
    #[arg(long = "learner", value_name = "NAME=PATH", num_args = 1..)]
    pub learners: Vec<String>,
    /// Labels CSV `id,label` with NA for unlabeled.
    #[arg(long)]
    pub labels: PathBuf,
    /// Label type; defaults to the model's link (logit: classification).
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_inner: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub delta_outer: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub delta_inner: f64,
    /// Start the unlabeled responses at the labeled mean instead of the warm start.
    #[arg(long)]
    pub cold_start: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Model spec JSON.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Candidate terms as a model spec JSON.
    #[arg(long)]
    pub candidates: PathBuf,
}

#[derive(Debug, Args)]
pub struct LatticeArgs {
    #[arg(long, default_value_t = 25)]
    pub rows: usize,
    #[arg(long, default_value_t = 25)]
    pub cols: usize,
    #[arg(long, value_enum, default_value_t = Pattern::Checkerboard)]
    pub pattern: Pattern,
    #[arg(long, default_value_t = 5)]
    pub block: usize,
    /// Labeled fractions in (0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    pub fracs: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "square,diagonal")]
    pub neighborhoods: Vec<NeighborhoodArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NeighborhoodArg {
    Square,
    Diagonal,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Graph edge list; ids follow the labels file.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value_t = FormArg::Stochastic)]
    pub form: FormArg,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Bandwidth used when testing the shortest-path completion repair.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormArg {
    Stochastic,
    Regularized,
    Symmetric,
}

impl From<FormArg> for SmootherForm {
    fn from(f: FormArg) -> SmootherForm {
        match f {
            FormArg::Stochastic => SmootherForm::Stochastic,
            FormArg::Regularized => SmootherForm::Regularized,
            FormArg::Symmetric => SmootherForm::Symmetric,
        }
    }
}

/// Parses arguments (including the program name) and runs the command,
/// returning the exit code. Errors are reported on standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    if let Some(t) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Lattice(a) => cmd_lattice(a),
        Command::CheckSmoother(a) => cmd_check_smoother(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NotTransductive { .. } => EXIT_NOT_TRANSDUCTIVE,
                _ => EXIT_ERROR,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared loading

fn split_pair(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(Error::InvalidParameter(format!(
            "expected NAME=PATH, found \"{s}\""
        ))),
    }
}

struct Loaded {
    ids: Vec<String>,
    labels: LabelVector,
    partition: Partition,
    y_l: DVector<f64>,
    views: HashMap<String, PreparedView>,
    tau_opts: TauOptions,
}

fn load_inputs(input: &InputArgs, link: Link) -> Result<Loaded> {
    let task = input.task.map(Task::from).unwrap_or(match link {
        Link::Identity => Task::Regression,
        Link::Logit => Task::Classification,
    });
    let (ids, labels, partition) = views::load_labels(&input.labels, task)?;
    let mut prepared = HashMap::new();
    for spec in &input.views {
        let (name, path) = split_pair(spec)?;
        let fv = views::load_feature_view(&path, &name)?.aligned(&ids)?;
        let distance = if input.cosine.contains(&name) {
            Distance::CosineDissimilarity
        } else {
            Distance::Euclidean
        };
        insert_view(&mut prepared, name, PreparedView::feature(&fv, distance)?)?;
    }
    for spec in &input.graphs {
        let (name, path) = split_pair(spec)?;
        let g = views::load_graph_view(&path, &name, &ids)?;
        insert_view(&mut prepared, name, PreparedView::graph(&g)?)?;
    }
    for c in &input.cosine {
        if !input.views.iter().any(|v| v.split('=').next() == Some(c.as_str())) {
            return Err(Error::InvalidParameter(format!("--cosine names unknown feature view {c}")));
        }
    }
    let mut tau_opts = TauOptions::default();
    for spec in &input.learners {
        let (name, path) = split_pair(spec)?;
        if !prepared.contains_key(&name) {
            return Err(Error::InvalidParameter(format!("learner for unknown view {name}")));
        }
        let p = views::load_learner_predictions(&path, &name, &ids, &partition)?;
        tau_opts.learners.insert(name, p);
    }
    let y_l = labels.labeled_values(&partition);
    Ok(Loaded {
        ids,
        labels,
        partition,
        y_l,
        views: prepared,
        tau_opts,
    })
}

fn insert_view(map: &mut HashMap<String, PreparedView>, name: String, v: PreparedView) -> Result<()> {
    if map.insert(name.clone(), v).is_some() {
        return Err(Error::InvalidParameter(format!("view {name} given twice")));
    }
    Ok(())
}

fn fit_options(input: &InputArgs) -> FitOptions {
    FitOptions {
        delta_outer: input.delta_outer,
        delta_inner: input.delta_inner,
        max_outer: input.max_outer,
        max_inner: input.max_inner,
        warm_start: !input.cold_start,
        y_u0: None,
        compute_traces: true,
    }
}

fn checked_spec(spec: &AdditiveModelSpec, loaded: &Loaded) -> Result<()> {
    let names: Vec<&str> = loaded.views.keys().map(String::as_str).collect();
    spec.validate(&names, loaded.labels.task)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Serialize)]
struct TermReport {
    name: String,
    lambda: f64,
    /// Per constituent view: `(view, gamma, k)`.
    views: Vec<ViewTau>,
    trace: f64,
}

#[derive(Debug, Serialize)]
struct ViewTau {
    view: String,
    gamma: Option<f64>,
    k: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Convergence {
    outer_iterations: usize,
    inner_iterations: usize,
    converged: bool,
    separation: bool,
}

#[derive(Debug, Serialize)]
struct RunReport {
    /// The model with every estimated parameter frozen at its value.
    model: AdditiveModelSpec,
    terms: Vec<TermReport>,
    alpha: f64,
    n: usize,
    labeled: usize,
    tgcv: f64,
    taic: f64,
    df: f64,
    loss: f64,
    prop1_radius: Option<f64>,
    convergence: Convergence,
    predictions: String,
}

/// The spec with lambdas and per-view bandwidths fixed.
fn frozen_spec(spec: &AdditiveModelSpec, terms: &[PreparedTerm], lambdas: &[f64]) -> AdditiveModelSpec {
    let mut out = spec.clone();
    for ((t, prepared), &l) in out.terms.iter_mut().zip(terms).zip(lambdas) {
        t.lambda = Param::Fixed(l);
        let tau = prepared.taus[0];
        if t.kind == TermKind::Main || prepared.taus.iter().all(|x| *x == tau) {
            t.gamma = tau.gamma.map(Param::Fixed);
            t.k = tau.k;
        }
    }
    out
}

struct ModelRun {
    report: SelectionReport,
    fit: AdditiveFit,
    terms: Vec<PreparedTerm>,
}

fn run_model(
    spec: &AdditiveModelSpec,
    loaded: &Loaded,
    opts: &FitOptions,
) -> Result<ModelRun> {
    let terms = modelsel::prepare_terms(
        &spec.terms,
        &loaded.views,
        &loaded.partition,
        &loaded.y_l,
        &loaded.tau_opts,
    )?;
    let config = SearchConfig {
        link: spec.link,
        hierarchy: spec.hierarchy,
        lambda_grid: modelsel::default_lambda_grid(),
        fit: opts.clone(),
        prop1: true,
    };
    let cache = TermCache::new();
    let (report, fit) =
        modelsel::evaluate_model(&terms, &loaded.partition, &loaded.y_l, &config, &cache)?;
    Ok(ModelRun { report, fit, terms })
}

fn run_report(spec: &AdditiveModelSpec, run: &ModelRun, loaded: &Loaded, predictions: &str) -> RunReport {
    let r = &run.report;
    RunReport {
        model: frozen_spec(spec, &run.terms, &r.lambda),
        terms: run
            .terms
            .iter()
            .zip(&r.lambda)
            .zip(&r.traces)
            .map(|((t, &lambda), &trace)| TermReport {
                name: t.name(),
                lambda,
                views: t
                    .spec
                    .views
                    .iter()
                    .zip(&t.taus)
                    .map(|(v, tau)| ViewTau {
                        view: v.clone(),
                        gamma: tau.gamma,
                        k: tau.k,
                    })
                    .collect(),
                trace,
            })
            .collect(),
        alpha: run.fit.alpha,
        n: loaded.partition.n(),
        labeled: loaded.partition.m(),
        tgcv: r.tgcv,
        taic: r.taic,
        df: r.df,
        loss: r.loss,
        prop1_radius: r.prop1_radius,
        convergence: Convergence {
            outer_iterations: run.fit.outer_iterations,
            inner_iterations: run.fit.inner_iterations,
            converged: run.fit.converged,
            separation: run.fit.separation,
        },
        predictions: predictions.to_string(),
    }
}

fn predictions_csv(ids: &[String], fit: &AdditiveFit, threshold: f64) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let logit = fit.link == Link::Logit;
    if logit {
        w.write_record(["id", "yhat", "assignment"])?;
    } else {
        w.write_record(["id", "yhat"])?;
    }
    for (id, &y) in ids.iter().zip(fit.yhat.iter()) {
        if logit {
            let a = u8::from(y >= threshold);
            w.write_record([id.clone(), format!("{y}"), a.to_string()])?;
        } else {
            w.write_record([id.clone(), format!("{y}")])?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::io("predictions", std::io::Error::other(e.to_string())))
}

fn cmd_fit(a: &FitArgs) -> Result<i32> {
    let spec = views::load_model_spec(&a.model)?;
    let loaded = load_inputs(&a.input, spec.link)?;
    checked_spec(&spec, &loaded)?;
    let opts = fit_options(&a.input);
    let run = run_model(&spec, &loaded, &opts)?;
    ensure_dir(&a.input.out)?;
    let pred_path = a.input.out.join("predictions.csv");
    write_atomic(&pred_path, &predictions_csv(&loaded.ids, &run.fit, a.input.threshold)?)?;
    let report = run_report(&spec, &run, &loaded, "predictions.csv");
    let json = serde_json::to_vec_pretty(&report)?;
    write_atomic(&a.input.out.join("report.json"), &json)?;
    if run.fit.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("warning: fit did not converge");
        Ok(EXIT_NOT_CONVERGED)
    }
}

// ---------------------------------------------------------------------------
// select

fn cmd_select(a: &SelectArgs) -> Result<i32> {
    let spec = views::load_model_spec(&a.candidates)?;
    let loaded = load_inputs(&a.input, spec.link)?;
    checked_spec(&spec, &loaded)?;
    let opts = fit_options(&a.input);
    let terms = modelsel::prepare_terms(
        &spec.terms,
        &loaded.views,
        &loaded.partition,
        &loaded.y_l,
        &loaded.tau_opts,
    )?;
    let config = SearchConfig {
        link: spec.link,
        hierarchy: spec.hierarchy,
        lambda_grid: modelsel::default_lambda_grid(),
        fit: opts.clone(),
        prop1: true,
    };
    let cache = TermCache::new();
    let outcome = modelsel::hierarchical_search(&terms, &loaded.partition, &loaded.y_l, &config, &cache)?;
    for f in &outcome.failed {
        eprintln!("model {} failed: {}", f.model_terms.join("+"), f.reason);
    }
    let Some(best) = outcome.best() else {
        return Err(Error::NoValidCandidate("every candidate model failed".into()));
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["terms", "taic", "tgcv", "df", "loss", "converged"])?;
    for r in &outcome.reports {
        w.write_record([
            r.model_terms.join("+"),
            format!("{}", r.taic),
            format!("{}", r.tgcv),
            format!("{}", r.df),
            format!("{}", r.loss),
            r.converged.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("selection", std::io::Error::other(e.to_string())))?;

    // refit the winner to report it like `fit`
    let best_spec = AdditiveModelSpec {
        link: spec.link,
        hierarchy: spec.hierarchy,
        terms: spec
            .terms
            .iter()
            .filter(|t| best.model_terms.contains(&t.name()))
            .cloned()
            .collect(),
    };
    let best_terms: Vec<PreparedTerm> = terms
        .iter()
        .filter(|t| best.model_terms.contains(&t.name()))
        .cloned()
        .collect();
    let best_built = best_terms
        .iter()
        .zip(&best.lambda)
        .map(|(t, &l)| t.build(l))
        .collect::<Result<Vec<_>>>()?;
    let fit = additive::fit(spec.link, &best_built, &loaded.partition, &loaded.y_l, &opts)?;
    let run = ModelRun {
        report: best.clone(),
        fit,
        terms: best_terms,
    };
    let report = run_report(&best_spec, &run, &loaded, "");

    ensure_dir(&a.input.out)?;
    write_atomic(&a.input.out.join("selection.csv"), &bytes)?;
    write_atomic(&a.input.out.join("best.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// lattice

fn cmd_lattice(a: &LatticeArgs) -> Result<i32> {
    let config = LatticeConfig {
        rows: a.rows,
        cols: a.cols,
        neighborhoods: a
            .neighborhoods
            .iter()
            .map(|n| match n {
                NeighborhoodArg::Square => Neighborhood::Square,
                NeighborhoodArg::Diagonal => Neighborhood::Diagonal,
            })
            .collect(),
        pattern: a.pattern,
        block_size: a.block,
        labeled_fracs: a.fracs.clone(),
        reps: a.reps,
        seed: a.seed,
        ..LatticeConfig::default()
    };
    config.validate()?;
    let result = lattice::run_benchmark(&config)?;
    let mut reps = Vec::new();
    lattice::write_records_csv(&result.records, &mut reps)?;
    let mut summary = Vec::new();
    lattice::write_summary_csv(&result.summary, &mut summary)?;
    ensure_dir(&a.out)?;
    write_atomic(&a.out.join("lattice_reps.csv"), &reps)?;
    write_atomic(&a.out.join("lattice_summary.csv"), &summary)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// check-smoother

fn smoother_matrix(a: &DMatrix<f64>, form: SmootherForm, lambda: f64) -> Result<DMatrix<f64>> {
    modelsel::smoother_for(a, form, lambda)
}

fn cmd_check_smoother(a: &CheckArgs) -> Result<i32> {
    let (ids, _, partition) = views::load_labels(&a.labels, Task::Regression)?;
    let g: GraphView = views::load_graph_view(&a.graph, "graph", &ids)?;
    let form = SmootherForm::from(a.form);
    let s = smoother_matrix(&g.adjacency, form, a.lambda)?;
    let rho = smoother::spectral_radius_uu(&s, &partition);
    let sums = smoother::row_sums(&s);
    let unreached = smoother::unreached_unlabeled(&g.adjacency, &partition);
    println!("n = {}, labeled = {}, unlabeled = {}", partition.n(), partition.m(), partition.unlabeled().len());
    println!("rho_uu = {rho}");
    println!("row sums: min {} max {}", sums.min(), sums.max());
    if unreached.is_empty() {
        println!("every unlabeled node shares a component with a labeled node");
    } else {
        let names: Vec<&str> = unreached.iter().map(|&i| ids[i].as_str()).collect();
        println!(
            "unlabeled nodes in components without labels ({}): {}",
            unreached.len(),
            names.join(" ")
        );
    }
    if rho < 1.0 - smoother::RHO_MARGIN {
        println!("transductive: yes");
        return Ok(EXIT_OK);
    }
    println!("transductive: no");
    let kernel = KernelSpec::new(a.gamma, Distance::ShortestPath)?;
    let repaired = smoother::shortest_path_complete(&g.adjacency, &kernel, None)
        .and_then(|w| smoother_matrix(&w, form, a.lambda))
        .map(|s2| smoother::spectral_radius_uu(&s2, &partition));
    match repaired {
        Ok(r) if r < 1.0 - smoother::RHO_MARGIN => println!(
            "hint: shortest_path_complete (gamma {}) repairs it, rho_uu = {r}",
            a.gamma
        ),
        Ok(r) => println!(
            "hint: shortest_path_complete alone does not repair it (rho_uu = {r}); \
             every component needs at least one labeled node"
        ),
        Err(e) => println!("hint: shortest_path_complete failed: {e}"),
    }
    Ok(EXIT_NOT_TRANSDUCTIVE)
}
