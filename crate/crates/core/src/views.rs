//! Loading of feature views, graph views, labels, learner predictions and the
//! model configuration, plus the labeled/unlabeled partition they induce.
//!
//! Observation ids are opaque strings. The labels file fixes the canonical
//! observation order; every other input is aligned to it.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token marking an unlabeled observation in the labels file.
pub const MISSING: &str = "NA";

/// Index sets of labeled and unlabeled observations over `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    n: usize,
}

impl Partition {
    /// Builds a partition from the labeled indices; everything else is
    /// unlabeled. Both lists come out sorted.
    pub fn new(labeled: impl IntoIterator<Item = usize>, n: usize) -> Result<Self> {
        let mut mask = vec![false; n];
        for i in labeled {
            if i >= n {
                return Err(Error::InvalidParameter(format!(
                    "labeled index {i} out of range for n = {n}"
                )));
            }
            if mask[i] {
                return Err(Error::InvalidParameter(format!(
                    "labeled index {i} listed twice"
                )));
            }
            mask[i] = true;
        }
        Self::from_mask(&mask)
    }

    pub fn from_mask(is_labeled: &[bool]) -> Result<Self> {
        let n = is_labeled.len();
        let labeled: Vec<usize> = (0..n).filter(|&i| is_labeled[i]).collect();
        let unlabeled: Vec<usize> = (0..n).filter(|&i| !is_labeled[i]).collect();
        if labeled.is_empty() {
            return Err(Error::NoLabeled);
        }
        Ok(Partition {
            labeled,
            unlabeled,
            n,
        })
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of labeled observations (`m`).
    pub fn m(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_labeled_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n];
        for &i in &self.labeled {
            mask[i] = true;
        }
        mask
    }

    /// Assembles a full-length vector from its labeled and unlabeled parts.
    pub fn assemble(&self, y_l: &DVector<f64>, y_u: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for (k, &i) in self.labeled.iter().enumerate() {
            y[i] = y_l[k];
        }
        for (k, &i) in self.unlabeled.iter().enumerate() {
            y[i] = y_u[k];
        }
        y
    }

    /// Relabels observations: new index `perm[i]` holds old observation `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(self.labeled.iter().map(|&i| perm[i]), self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::InvalidParameter(format!("unknown task \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureView {
    pub name: String,
    pub ids: Vec<String>,
    pub data: DMatrix<f64>,
    pub column_names: Vec<String>,
}

impl FeatureView {
    /// Reorders rows to follow `id_order`. Every id must be present.
    pub fn aligned(&self, id_order: &[String]) -> Result<FeatureView> {
        let index: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let rows = id_order
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownId(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = self.data.ncols();
        Ok(FeatureView {
            name: self.name.clone(),
            ids: id_order.to_vec(),
            data: DMatrix::from_fn(rows.len(), p, |i, j| self.data[(rows[i], j)]),
            column_names: self.column_names.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GraphView {
    pub name: String,
    pub adjacency: DMatrix<f64>,
}

impl GraphView {
    /// Writes the adjacency as `src dst weight` lines, one per unordered pair
    /// with nonzero weight (diagonal included).
    pub fn to_edge_list(&self, ids: &[String]) -> String {
        let n = self.adjacency.nrows();
        let mut out = String::new();
        for i in 0..n {
            for j in i..n {
                let w = self.adjacency[(i, j)];
                if w != 0.0 {
                    out.push_str(&format!("{}\t{}\t{}\n", ids[i], ids[j], w));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    pub values: Vec<Option<f64>>,
    pub task: Task,
}

impl LabelVector {
    pub fn labeled_values(&self, partition: &Partition) -> DVector<f64> {
        DVector::from_iterator(
            partition.m(),
            partition
                .labeled()
                .iter()
                .map(|&i| self.values[i].expect("labeled entry present")),
        )
    }
}

#[derive(Debug, Clone)]
pub struct LearnerPredictions {
    pub view_name: String,
    pub phi_l: DVector<f64>,
    pub phi_u: DVector<f64>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Loads a feature view: CSV with a header row whose first column is the
/// observation id and remaining columns are numeric.
pub fn load_feature_view(path: impl AsRef<Path>, name: &str) -> Result<FeatureView> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    parse_feature_view(&text, name, &path.display().to_string())
}

pub fn parse_feature_view(text: &str, name: &str, source: &str) -> Result<FeatureView> {
    if text.trim().is_empty() {
        return Err(Error::NoObservations(source.to_string()));
    }
    let mut rdr = csv_reader(text);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(Error::NoObservations(source.to_string()));
    }
    let column_names: Vec<String> = header[1..].to_vec();
    let p = column_names.len();
    let mut ids = Vec::new();
    let mut seen = HashMap::new();
    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // data rows are numbered from 1, after the header
        let row = r + 1;
        if rec.len() != p + 1 {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", p + 1, rec.len()),
            });
        }
        let id = rec[0].to_string();
        if seen.insert(id.clone(), row).is_some() {
            return Err(Error::DuplicateId(id));
        }
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: column_names[c].clone(),
                message: format!("\"{cell}\" is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: column_names[c].clone(),
                    message: format!("non-finite value \"{cell}\""),
                });
            }
            values.push(v);
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(Error::NoObservations(source.to_string()));
    }
    Ok(FeatureView {
        name: name.to_string(),
        data: DMatrix::from_row_slice(ids.len(), p, &values),
        ids,
        column_names,
    })
}

/// Loads a graph view from whitespace-separated `src dst weight` lines.
/// Each line adds its weight to both `(src, dst)` and `(dst, src)` (once for
/// self-loops), so duplicate and reversed edges accumulate.
pub fn load_graph_view(
    path: impl AsRef<Path>,
    name: &str,
    id_order: &[String],
) -> Result<GraphView> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    parse_graph_view(&text, name, id_order)
}

pub fn parse_graph_view(text: &str, name: &str, id_order: &[String]) -> Result<GraphView> {
    let index = id_index(id_order)?;
    let n = id_order.len();
    let mut a = DMatrix::zeros(n, n);
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                row: line_no + 1,
                column: String::new(),
                message: format!("expected `src dst weight`, found \"{line}\""),
            });
        }
        let (src, dst) = (fields[0], fields[1]);
        let w: f64 = fields[2].parse().map_err(|_| Error::Parse {
            row: line_no + 1,
            column: "weight".into(),
            message: format!("\"{}\" is not a number", fields[2]),
        })?;
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("edge weight on line {}", line_no + 1)));
        }
        if w < 0.0 {
            return Err(Error::NegativeWeight {
                src: src.into(),
                dst: dst.into(),
                weight: w,
            });
        }
        let i = *index.get(src).ok_or_else(|| Error::UnknownId(src.into()))?;
        let j = *index.get(dst).ok_or_else(|| Error::UnknownId(dst.into()))?;
        a[(i, j)] += w;
        if i != j {
            a[(j, i)] += w;
        }
    }
    Ok(GraphView {
        name: name.to_string(),
        adjacency: a,
    })
}

fn id_index(id_order: &[String]) -> Result<HashMap<&str, usize>> {
    let mut index = HashMap::with_capacity(id_order.len());
    for (i, id) in id_order.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(index)
}

/// Loads `id,label` rows; `NA` marks an unlabeled observation. The file
/// order defines the canonical observation order, returned as the id list.
pub fn load_labels(
    path: impl AsRef<Path>,
    task: Task,
) -> Result<(Vec<String>, LabelVector, Partition)> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    parse_labels(&text, task, &path.display().to_string())
}

pub fn parse_labels(
    text: &str,
    task: Task,
    source: &str,
) -> Result<(Vec<String>, LabelVector, Partition)> {
    let mut rdr = csv_reader(text);
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                row: r + 1,
                column: String::new(),
                message: format!("expected `id,label`, found {} fields", rec.len()),
            });
        }
        let id = rec[0].to_string();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(id));
        }
        let raw = &rec[1];
        let value = if raw == MISSING {
            None
        } else {
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: "label".into(),
                message: format!("\"{raw}\" is not a number or {MISSING}"),
            })?;
            if !v.is_finite() {
                return Err(Error::InvalidLabel {
                    id,
                    value: raw.into(),
                    reason: "non-finite".into(),
                });
            }
            if task == Task::Classification && v != 0.0 && v != 1.0 {
                return Err(Error::InvalidLabel {
                    id,
                    value: raw.into(),
                    reason: "classification labels must be 0 or 1".into(),
                });
            }
            Some(v)
        };
        ids.push(id);
        values.push(value);
    }
    if ids.is_empty() {
        return Err(Error::NoObservations(source.to_string()));
    }
    let mask: Vec<bool> = values.iter().map(Option::is_some).collect();
    let partition = Partition::from_mask(&mask)?;
    Ok((ids, LabelVector { values, task }, partition))
}

/// Loads `id,phi` learner predictions covering every observation.
pub fn load_learner_predictions(
    path: impl AsRef<Path>,
    view_name: &str,
    id_order: &[String],
    partition: &Partition,
) -> Result<LearnerPredictions> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    parse_learner_predictions(&text, view_name, id_order, partition)
}

pub fn parse_learner_predictions(
    text: &str,
    view_name: &str,
    id_order: &[String],
    partition: &Partition,
) -> Result<LearnerPredictions> {
    let index = id_index(id_order)?;
    let mut phi: Vec<Option<f64>> = vec![None; id_order.len()];
    let mut rdr = csv_reader(text);
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                row: r + 1,
                column: String::new(),
                message: "expected `id,phi`".into(),
            });
        }
        let i = *index
            .get(&rec[0])
            .ok_or_else(|| Error::UnknownId(rec[0].to_string()))?;
        let v: f64 = rec[1].parse().map_err(|_| Error::Parse {
            row: r + 1,
            column: "phi".into(),
            message: format!("\"{}\" is not a number", &rec[1]),
        })?;
        if phi[i].replace(v).is_some() {
            return Err(Error::DuplicateId(rec[0].to_string()));
        }
    }
    let get = |i: usize| phi[i].ok_or_else(|| Error::UnknownId(format!("missing prediction for {}", id_order[i])));
    let phi_l = partition
        .labeled()
        .iter()
        .map(|&i| get(i))
        .collect::<Result<Vec<_>>>()?;
    let phi_u = partition
        .unlabeled()
        .iter()
        .map(|&i| get(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(LearnerPredictions {
        view_name: view_name.to_string(),
        phi_l: DVector::from_vec(phi_l),
        phi_u: DVector::from_vec(phi_u),
    })
}

// ---------------------------------------------------------------------------
// Model configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Main,
    Interaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionOp {
    #[default]
    Intersection,
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmootherForm {
    Stochastic,
    Regularized,
    #[default]
    Symmetric,
}

/// A tuning parameter that is either fixed or left for estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Fixed(f64),
    Estimate,
}

impl Param {
    pub fn fixed(&self) -> Option<f64> {
        match self {
            Param::Fixed(v) => Some(*v),
            Param::Estimate => None,
        }
    }
}

impl Serialize for Param {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Param::Fixed(v) => s.serialize_f64(*v),
            Param::Estimate => s.serialize_str("estimate"),
        }
    }
}

impl<'de> Deserialize<'de> for Param {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Param::Fixed(v)),
            Raw::Str(s) if s == "estimate" => Ok(Param::Estimate),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"estimate\", found \"{s}\""
            ))),
        }
    }
}

fn default_lambda() -> Param {
    Param::Estimate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub views: Vec<String>,
    pub kind: TermKind,
    #[serde(default)]
    pub interaction_op: InteractionOp,
    #[serde(default)]
    pub smoother: SmootherForm,
    #[serde(default)]
    pub gamma: Option<Param>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: Param,
}

impl TermSpec {
    pub fn name(&self) -> String {
        self.views.join("*")
    }
}

impl fmt::Display for TermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdditiveModelSpec {
    pub link: Link,
    #[serde(default)]
    pub hierarchy: bool,
    pub terms: Vec<TermSpec>,
}

impl AdditiveModelSpec {
    /// Structural checks that need no data: arity, parameter ranges and the
    /// hierarchical constraint.
    pub fn check_structure(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidSpec("model has no terms".into()));
        }
        for t in &self.terms {
            match (t.kind, t.views.len()) {
                (TermKind::Main, 1) | (TermKind::Interaction, 2) => {}
                (TermKind::Main, k) => {
                    return Err(Error::InvalidSpec(format!(
                        "main term {} references {k} views, expected 1",
                        t.name()
                    )))
                }
                (TermKind::Interaction, k) => {
                    return Err(Error::InvalidSpec(format!(
                        "interaction term {} references {k} views, expected 2",
                        t.name()
                    )))
                }
            }
            if t.kind == TermKind::Interaction && t.views[0] == t.views[1] {
                return Err(Error::InvalidSpec(format!(
                    "interaction {} repeats a view",
                    t.name()
                )));
            }
            if let Some(Param::Fixed(g)) = t.gamma {
                if !(g > 0.0) || !g.is_finite() {
                    return Err(Error::InvalidSpec(format!("gamma must be positive in {}", t.name())));
                }
            }
            if let Param::Fixed(l) = t.lambda {
                if !(l > 0.0) || !l.is_finite() {
                    return Err(Error::InvalidSpec(format!("lambda must be positive in {}", t.name())));
                }
            }
            if t.k == Some(0) {
                return Err(Error::InvalidSpec(format!("k must be positive in {}", t.name())));
            }
        }
        if self.hierarchy {
            self.check_hierarchy()?;
        }
        Ok(())
    }

    pub fn check_hierarchy(&self) -> Result<()> {
        check_hierarchy(&self.terms)
    }

    /// Checks every referenced view exists and the link matches the task.
    pub fn validate(&self, view_names: &[&str], task: Task) -> Result<()> {
        self.check_structure()?;
        for t in &self.terms {
            for v in &t.views {
                if !view_names.contains(&v.as_str()) {
                    return Err(Error::InvalidSpec(format!(
                        "term {} references unknown view \"{v}\"",
                        t.name()
                    )));
                }
            }
        }
        match (self.link, task) {
            (Link::Identity, Task::Regression) | (Link::Logit, Task::Classification) => Ok(()),
            (link, task) => Err(Error::LinkTaskMismatch(format!(
                "link {link:?} cannot be used with {task:?} labels"
            ))),
        }
    }
}

pub fn check_hierarchy(terms: &[TermSpec]) -> Result<()> {
    for t in terms.iter().filter(|t| t.kind == TermKind::Interaction) {
        for v in &t.views {
            let present = terms
                .iter()
                .any(|m| m.kind == TermKind::Main && &m.views[0] == v);
            if !present {
                return Err(Error::Hierarchy {
                    interaction: t.name(),
                    missing: v.clone(),
                });
            }
        }
    }
    Ok(())
}

pub fn load_model_spec(path: impl AsRef<Path>) -> Result<AdditiveModelSpec> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    parse_model_spec(&text)
}

pub fn parse_model_spec(text: &str) -> Result<AdditiveModelSpec> {
    let spec: AdditiveModelSpec = serde_json::from_str(text)?;
    spec.check_structure()?;
    Ok(spec)
}
