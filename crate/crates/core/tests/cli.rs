use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mvgam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvgam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Two loosely joined groups of six nodes; group a is class 1.
struct Fixture {
    dir: TempDir,
    graph: String,
    features: String,
    labels: String,
    reg_labels: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let mut edges = String::new();
        for g in ["a", "b"] {
            for i in 0..6 {
                edges.push_str(&format!("{g}{i} {g}{} 1\n", (i + 1) % 6));
                edges.push_str(&format!("{g}{i} {g}{} 0.5\n", (i + 2) % 6));
            }
        }
        edges.push_str("a0 b0 0.2\n");
        let graph = write(dir.path(), "graph.txt", &edges);

        let mut feats = String::from("id,x1,x2\n");
        let mut labels = String::from("id,label\n");
        let mut reg = String::from("id,label\n");
        for (g, (cx, class)) in [("a", (1.0, 1)), ("b", (-1.0, 0))] {
            for i in 0..6 {
                let jitter = 0.1 * i as f64;
                feats.push_str(&format!("{g}{i},{},{}\n", cx + jitter, cx - jitter));
                if i % 2 == 0 {
                    labels.push_str(&format!("{g}{i},{class}\n"));
                    reg.push_str(&format!("{g}{i},{}\n", 2.0 * class as f64 + jitter));
                } else {
                    labels.push_str(&format!("{g}{i},NA\n"));
                    reg.push_str(&format!("{g}{i},NA\n"));
                }
            }
        }
        let features = write(dir.path(), "features.csv", &feats);
        let labels = write(dir.path(), "labels.csv", &labels);
        let reg_labels = write(dir.path(), "reg_labels.csv", &reg);
        Fixture {
            dir,
            graph,
            features,
            labels,
            reg_labels,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn spec(&self, name: &str, json: &str) -> String {
        write(self.dir.path(), name, json)
    }

    fn out(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

const GRAPH_LOGIT: &str = r#"{"link": "logit", "hierarchy": true,
  "terms": [{"views": ["C"], "kind": "main", "smoother": "regularized", "lambda": "estimate"}]}"#;

fn read_predictions(path: &Path) -> Vec<(String, f64)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn fit_graph_logit_model() {
    let fx = Fixture::new();
    let model = fx.spec("model.json", GRAPH_LOGIT);
    let out = fx.out("fit");
    let res = mvgam(&["fit", "--graphs", &format!("C={}", fx.graph), "--labels", &fx.labels, "--model", &model, "--out", &out]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let preds = read_predictions(&fx.path("fit/predictions.csv"));
    assert_eq!(preds.len(), 12);
    let mut rdr = csv::Reader::from_path(fx.path("fit/predictions.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["id", "yhat", "assignment"]);
    for r in rdr.records() {
        let r = r.unwrap();
        let truth = if r[0].starts_with('a') { "1" } else { "0" };
        assert_eq!(&r[2], truth, "node {}", &r[0]);
    }

    let report: Value = serde_json::from_str(&fs::read_to_string(fx.path("fit/report.json")).unwrap()).unwrap();
    assert_eq!(report["convergence"]["converged"], Value::Bool(true));
    assert_eq!(report["n"], 12);
    assert_eq!(report["labeled"], 6);
    assert!(report["model"]["terms"][0]["lambda"].is_number());
}

#[test]
fn fit_rejects_unknown_view() {
    let fx = Fixture::new();
    let model = fx.spec(
        "model.json",
        r#"{"link": "logit", "terms": [{"views": ["nope"], "kind": "main", "lambda": 1.0}]}"#,
    );
    let res = mvgam(&["fit", "--graphs", &format!("C={}", fx.graph), "--labels", &fx.labels, "--model", &model, "--out", &fx.out("x")]);
    assert_eq!(code(&res), 1);
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());
}

#[test]
fn fit_missing_file_is_an_error() {
    let fx = Fixture::new();
    let model = fx.spec("model.json", GRAPH_LOGIT);
    let res = mvgam(&["fit", "--graphs", "C=/no/such/file", "--labels", &fx.labels, "--model", &model, "--out", &fx.out("x")]);
    assert_eq!(code(&res), 1);
}

#[test]
fn fit_flags_non_convergence() {
    let fx = Fixture::new();
    let model = fx.spec("model.json", GRAPH_LOGIT);
    let res = mvgam(&[
        "fit", "--graphs", &format!("C={}", fx.graph), "--labels", &fx.labels, "--model", &model,
        "--out", &fx.out("fit"), "--max-outer", "1", "--max-inner", "1", "--cold-start",
    ]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(fx.path("fit/report.json")).unwrap()).unwrap();
    assert_eq!(report["convergence"]["converged"], Value::Bool(false));
}

#[test]
fn report_round_trip_reproduces_predictions() {
    let fx = Fixture::new();
    let model = fx.spec(
        "model.json",
        r#"{"link": "identity", "hierarchy": true, "terms": [
            {"views": ["B"], "kind": "main", "smoother": "symmetric", "gamma": "estimate", "lambda": "estimate"},
            {"views": ["C"], "kind": "main", "smoother": "symmetric", "lambda": "estimate"}]}"#,
    );
    let inputs = [
        "--views".to_string(), format!("B={}", fx.features),
        "--graphs".to_string(), format!("C={}", fx.graph),
        "--labels".to_string(), fx.reg_labels.clone(),
    ];
    let mut args: Vec<String> = vec!["fit".into()];
    args.extend(inputs.iter().cloned());
    args.extend(["--model".into(), model, "--out".into(), fx.out("first")]);
    let res = mvgam(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let report: Value = serde_json::from_str(&fs::read_to_string(fx.path("first/report.json")).unwrap()).unwrap();
    let frozen = fx.spec("frozen.json", &report["model"].to_string());
    let mut args: Vec<String> = vec!["fit".into()];
    args.extend(inputs.iter().cloned());
    args.extend(["--model".into(), frozen, "--out".into(), fx.out("second")]);
    let res = mvgam(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let a = read_predictions(&fx.path("first/predictions.csv"));
    let b = read_predictions(&fx.path("second/predictions.csv"));
    assert_eq!(a.len(), b.len());
    for ((ia, ya), (ib, yb)) in a.iter().zip(&b) {
        assert_eq!(ia, ib);
        assert!((ya - yb).abs() <= 1e-10, "{ia}: {ya} vs {yb}");
    }
}

fn selection_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn select_lists_every_admissible_model() {
    let fx = Fixture::new();
    let cands = fx.spec(
        "cands.json",
        r#"{"link": "logit", "hierarchy": true, "terms": [
            {"views": ["B"], "kind": "main", "smoother": "regularized", "gamma": 1.0, "lambda": "estimate"},
            {"views": ["C"], "kind": "main", "smoother": "regularized", "lambda": "estimate"},
            {"views": ["B", "C"], "kind": "interaction", "interaction_op": "union", "smoother": "regularized", "lambda": "estimate"}]}"#,
    );
    let res = mvgam(&[
        "select", "--views", &format!("B={}", fx.features), "--graphs", &format!("C={}", fx.graph),
        "--labels", &fx.labels, "--candidates", &cands, "--out", &fx.out("sel"),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows = selection_rows(&fx.path("sel/selection.csv"));
    assert_eq!(rows.len(), 4);
    let mut models: Vec<String> = rows.iter().map(|r| r[0].to_string()).collect();
    models.sort();
    assert_eq!(models, vec!["B", "B+C", "B+C+B*C", "C"]);
    let taics: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(taics.windows(2).all(|w| w[0] <= w[1]));
    let best: Value = serde_json::from_str(&fs::read_to_string(fx.path("sel/best.json")).unwrap()).unwrap();
    assert!(best.is_object());
}

#[test]
fn select_single_candidate() {
    let fx = Fixture::new();
    let cands = fx.spec("cands.json", GRAPH_LOGIT);
    let res = mvgam(&["select", "--graphs", &format!("C={}", fx.graph), "--labels", &fx.labels, "--candidates", &cands, "--out", &fx.out("sel")]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows = selection_rows(&fx.path("sel/selection.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "C");
}

#[test]
fn select_fails_when_every_model_fails() {
    let fx = Fixture::new();
    // an unlabeled pair cut off from every label
    let graph = write(fx.dir.path(), "cut.txt", "a0 a1 1\nb0 b1 1\n");
    let labels = write(fx.dir.path(), "cut_labels.csv", "id,label\na0,1\na1,0\nb0,NA\nb1,NA\n");
    let cands = fx.spec(
        "cands.json",
        r#"{"link": "logit", "terms": [{"views": ["C"], "kind": "main", "smoother": "stochastic", "lambda": 1.0}]}"#,
    );
    let res = mvgam(&["select", "--graphs", &format!("C={graph}"), "--labels", &labels, "--candidates", &cands, "--out", &fx.out("sel")]);
    assert_eq!(code(&res), 1);
}

#[test]
fn lattice_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = mvgam(&[
            "lattice", "--rows", "25", "--cols", "25", "--fracs", "0.1", "--reps", "2", "--seed", "7",
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        (
            fs::read(out.join("lattice_reps.csv")).unwrap(),
            fs::read(out.join("lattice_summary.csv")).unwrap(),
        )
    };
    let first = run("one");
    assert_eq!(first, run("two"));
    let text = String::from_utf8(first.0).unwrap();
    assert!(text.starts_with("model,labeled_frac,rep,accuracy,kappa,taic\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn lattice_rejects_bad_fraction() {
    let dir = TempDir::new().unwrap();
    let res = mvgam(&["lattice", "--fracs", "1.5", "--reps", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 1);
}

#[test]
fn lattice_full_labels_report_not_applicable() {
    let dir = TempDir::new().unwrap();
    let res = mvgam(&[
        "lattice", "--rows", "4", "--cols", "4", "--block", "2", "--fracs", "1.0", "--reps", "1",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(dir.path().join("lattice_reps.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "NA", "{line}");
    }
}

fn check(graph: &str, labels: &str) -> (i32, String) {
    let dir = TempDir::new().unwrap();
    let g = write(dir.path(), "g.txt", graph);
    let l = write(dir.path(), "l.csv", labels);
    let res = mvgam(&["check-smoother", "--graph", &g, "--labels", &l]);
    (code(&res), String::from_utf8_lossy(&res.stdout).into_owned())
}

fn rho_line(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("rho_uu = "))
        .expect("rho line")
        .parse()
        .unwrap()
}

#[test]
fn check_smoother_path_graph() {
    let (c, out) = check("n1 n2 1\nn2 n3 1\n", "id,label\nn1,1\nn2,NA\nn3,NA\n");
    assert_eq!(c, 0, "{out}");
    assert!((rho_line(&out) - 0.5_f64.sqrt()).abs() < 1e-9);
}

#[test]
fn check_smoother_unlabeled_component() {
    let (c, out) = check("n1 n2 1\nn3 n4 1\n", "id,label\nn1,1\nn2,0\nn3,NA\nn4,NA\n");
    assert_eq!(c, 3, "{out}");
    assert!(out.contains("hint"), "{out}");
    assert!(out.contains("n3") && out.contains("n4"), "{out}");
}

#[test]
fn check_smoother_fully_labeled() {
    let (c, out) = check("n1 n2 1\nn2 n3 1\n", "id,label\nn1,1\nn2,0\nn3,1\n");
    assert_eq!(c, 0, "{out}");
    assert_eq!(rho_line(&out), 0.0);
}
