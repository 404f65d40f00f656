mod common;

use common::*;
use multiview_gam::additive::{self, AdditiveTerm, FitOptions};
use multiview_gam::fixedpoint::{closed_form_fit, self_train_fit};
use multiview_gam::lattice::{self, Neighborhood};
use multiview_gam::modelsel::{self, TermCache};
use multiview_gam::smoother::{self, SmootherTag, TransductiveSmoother};
use multiview_gam::views::{self, GraphView, InteractionOp, Link, Param, SmootherForm, TermKind, TermSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn tight() -> FitOptions {
    FitOptions {
        delta_outer: 1e-11,
        delta_inner: 1e-12,
        max_outer: 100_000,
        max_inner: 100_000,
        ..FitOptions::default()
    }
}

fn spec(views: &[&str]) -> TermSpec {
    TermSpec {
        views: views.iter().map(|s| s.to_string()).collect(),
        kind: if views.len() == 1 { TermKind::Main } else { TermKind::Interaction },
        interaction_op: InteractionOp::Intersection,
        smoother: SmootherForm::Symmetric,
        gamma: None,
        k: None,
        lambda: Param::Estimate,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn edge_list_round_trip(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = rng(seed);
        let mut a = connected_weights(n, 0.3, &mut rng);
        if rng.gen_bool(0.5) {
            a[(0, 0)] = rng.gen_range(0.5..3.0);
        }
        let ids: Vec<String> = (0..n).map(|i| format!("node{i}")).collect();
        let g = GraphView { name: "g".into(), adjacency: a.clone() };
        let back = views::parse_graph_view(&g.to_edge_list(&ids), "g", &ids).unwrap();
        prop_assert_eq!(back.adjacency, a);
    }

    #[test]
    fn fixed_point_residual_is_small(seed in any::<u64>(), kind in 0usize..3) {
        let mut rng = rng(seed);
        let (s, _) = random_smoother(&mut rng, 30, 0.99, kind);
        let y_l = random_vector(s.partition().m(), &mut rng);
        let fit = closed_form_fit(&s, &y_l).unwrap();
        prop_assert!(fit.residual(&s, &y_l) <= 1e-8);
    }

    #[test]
    fn self_training_contracts_at_the_spectral_rate(seed in any::<u64>(), steps in 1usize..20) {
        // symmetric smoothers have a symmetric S_UU, so the 2-norm contracts by rho
        let mut rng = rng(seed);
        let (s, _) = random_smoother(&mut rng, 25, 0.99, 2);
        let y_l = random_vector(s.partition().m(), &mut rng);
        let exact = closed_form_fit(&s, &y_l).unwrap().yhat_u;
        let y0 = random_vector(exact.len(), &mut rng);
        let after = self_train_fit(&s, &y_l, &y0, 1e-300, steps).unwrap().yhat_u;
        let bound = s.rho_uu().powi(steps as i32) * (&y0 - &exact).norm();
        prop_assert!((&after - &exact).norm() <= bound * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn smoothers_are_transductive_when_built(seed in any::<u64>(), n in 3usize..20) {
        let mut rng = rng(seed);
        let w = connected_weights(n, 0.1, &mut rng);
        let part = random_partition(n, 1 + (seed as usize) % (n - 1), &mut rng);
        if let Ok(s) = smoother::stochastic_smoother(&w, &part) {
            prop_assert!(s.rho_uu() < 1.0);
        }
        // the identity on U is never accepted
        let mut eye = DMatrix::zeros(n, n);
        for &i in part.unlabeled() {
            eye[(i, i)] = 1.0;
        }
        prop_assert!(TransductiveSmoother::new(eye, &part, SmootherTag::Custom).is_err());
    }

    #[test]
    fn single_term_fit_matches_closed_form(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n = rng.gen_range(4..=40);
        let w = connected_weights(n, 0.2, &mut rng);
        let part = random_partition(n, rng.gen_range(1..n), &mut rng);
        let y_l = random_vector(part.m(), &mut rng);
        let lambda = rng.gen_range(0.1..10.0);
        let term = AdditiveTerm::from_weights("G", &w, SmootherForm::Symmetric, lambda).unwrap();
        let fit = additive::transductive_backfit(std::slice::from_ref(&term), &part, &y_l, &tight()).unwrap();

        // the centered smoother applied to the centered response, plus the mean
        let c = centered_symmetric(&laplacian(&w), lambda);
        let cs = TransductiveSmoother::new(c, &part, SmootherTag::Centered).unwrap();
        let alpha = fit.alpha;
        let oracle = closed_form_fit(&cs, &y_l.add_scalar(-alpha)).unwrap();
        prop_assert!(max_abs_v(&(fit.yhat_u(&part) - oracle.yhat_u.add_scalar(alpha))) <= 1e-7);
    }

    #[test]
    fn additive_fit_invariants(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n = rng.gen_range(5..=25);
        let part = random_partition(n, rng.gen_range(2..n), &mut rng);
        let terms: Vec<AdditiveTerm> = (0..2)
            .map(|i| {
                let w = connected_weights(n, 0.2, &mut rng);
                AdditiveTerm::from_weights(&format!("g{i}"), &w, SmootherForm::Symmetric, rng.gen_range(0.2..5.0)).unwrap()
            })
            .collect();
        let y_l = random_vector(part.m(), &mut rng);
        let opts = tight();
        let fit = additive::transductive_backfit(&terms, &part, &y_l, &opts).unwrap();
        prop_assert!(fit.converged);
        let mut eta = DVector::from_element(n, fit.alpha);
        for t in &fit.term_fits {
            prop_assert!(t.f.sum().abs() <= 1e-8);
            eta += &t.f;
        }
        prop_assert!(max_abs_v(&(&eta - &fit.eta)) <= 1e-10);
        // each term satisfies its backfitting equation on the completed response
        let y = part.assemble(&y_l, &fit.yhat_u(&part));
        for (l, t) in terms.iter().enumerate() {
            let others = fit.term_fits.iter().enumerate().filter(|(j, _)| *j != l)
                .fold(DVector::zeros(n), |acc, (_, tf)| acc + &tf.f);
            let c = centered_symmetric(&t.penalty, t.lambda);
            let want = c * (&y - others);
            prop_assert!(max_abs_v(&(&want - &fit.term_fits[l].f)) <= 10.0 * opts.delta_inner.max(1e-9));
        }
        // self-consistency of the unlabeled responses
        let resid = fit.yhat_u(&part) - multiview_gam::linalg::subvector(&fit.eta, part.unlabeled());
        prop_assert!(max_abs_v(&resid) <= 10.0 * opts.delta_outer);
    }

    #[test]
    fn logit_probabilities_stay_inside(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n = rng.gen_range(5..=25);
        let w = connected_weights(n, 0.3, &mut rng);
        let part = random_partition(n, rng.gen_range(2..n), &mut rng);
        let y_l = DVector::from_fn(part.m(), |_, _| f64::from(u8::from(rng.gen_bool(0.5))));
        let term = AdditiveTerm::from_weights("G", &w, SmootherForm::Regularized, rng.gen_range(0.01..10.0)).unwrap();
        let fit = additive::local_scoring(&[term], &part, &y_l, &FitOptions::default()).unwrap();
        prop_assert!(fit.yhat.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn criteria_are_permutation_invariant(seed in any::<u64>(), m in 2usize..15) {
        let mut rng = rng(seed);
        let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(0.0..0.3));
        let y = random_vector(m, &mut rng);
        let perm = rand::seq::index::sample(&mut rng, m, m).into_vec();
        let ap = DMatrix::from_fn(m, m, |i, j| a[(perm[i], perm[j])]);
        let yp = DVector::from_fn(m, |i, _| y[perm[i]]);
        let g = modelsel::tgcv(&a, &y).unwrap();
        let gp = modelsel::tgcv(&ap, &yp).unwrap();
        prop_assert!((g - gp).abs() <= 1e-10 * g.abs().max(1.0));
        let t = modelsel::taic_linear(&a, &y).unwrap();
        let tp = modelsel::taic_linear(&ap, &yp).unwrap();
        prop_assert!((t - tp).abs() <= 1e-10 * t.abs().max(1.0));
    }

    #[test]
    fn kappa_is_at_most_one(c in prop::array::uniform2(prop::array::uniform2(0usize..50))) {
        if let Ok(k) = lattice::kappa(&c) {
            prop_assert!(k <= 1.0 + 1e-12);
            prop_assert!(k >= -1.0 - 1e-12);
            let perfect = c[0][1] == 0 && c[1][0] == 0;
            prop_assert_eq!((k - 1.0).abs() < 1e-12, perfect);
        }
    }

    #[test]
    fn hierarchy_is_respected(mask in prop::collection::vec(any::<bool>(), 6)) {
        let all = [spec(&["A"]), spec(&["B"]), spec(&["C"]), spec(&["A", "B"]), spec(&["B", "C"]), spec(&["A", "C"])];
        let candidates: Vec<TermSpec> = all.iter().zip(&mask).filter(|(_, k)| **k).map(|(t, _)| t.clone()).collect();
        for model in modelsel::admissible_models(&candidates, true) {
            let terms: Vec<&TermSpec> = model.iter().map(|&i| &candidates[i]).collect();
            for t in terms.iter().filter(|t| t.kind == TermKind::Interaction) {
                for v in &t.views {
                    prop_assert!(terms.iter().any(|m| m.kind == TermKind::Main && &m.views[0] == v));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn lambda_search_ends_in_a_grid_local_minimum(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n = rng.gen_range(10..=20);
        let part = random_partition(n, rng.gen_range(n / 2..n - 1), &mut rng);
        let y_l = random_vector(part.m(), &mut rng);
        let terms: Vec<modelsel::PreparedTerm> = (0..2)
            .map(|i| {
                let name = format!("g{i}");
                let w = connected_weights(n, 0.3, &mut rng);
                modelsel::PreparedTerm::new(
                    TermSpec { views: vec![name], ..spec(&["x"]) },
                    w,
                    vec![modelsel::Tau::new(None, None)],
                )
            })
            .collect();
        let grid = vec![0.1, 1.0, 10.0, 100.0];
        let grids = vec![grid.clone(), grid.clone()];
        let opts = tight();
        let est = modelsel::estimate_lambdas(&terms, &part, &y_l, &grids, &TermCache::new(), &opts).unwrap();

        // tGCV of any lambda pair from a plain fit
        let score = |l: [f64; 2]| -> f64 {
            let built: Vec<AdditiveTerm> = terms.iter().zip(l).map(|(t, l)| t.build(l).unwrap()).collect();
            let traces: Vec<f64> = built.iter().map(|t| additive::labeled_trace(&t.smoother, &part).unwrap()).collect();
            let fit = additive::transductive_backfit(&built, &part, &y_l, &opts).unwrap();
            modelsel::tgcv_backfit(&y_l, &fit.eta_l(&part), &traces).unwrap_or(f64::INFINITY)
        };
        let at = score([est.lambdas[0], est.lambdas[1]]);
        prop_assert!((at - est.tgcv).abs() <= 1e-6 * at.max(1.0));
        for &alt in &grid {
            prop_assert!(at <= score([alt, est.lambdas[1]]) + 1e-6 * at.max(1.0));
            prop_assert!(at <= score([est.lambdas[0], alt]) + 1e-6 * at.max(1.0));
        }
    }

    #[test]
    fn lattice_is_rotation_invariant(rows in 2usize..7, cols in 2usize..7, diag in any::<bool>()) {
        let nb = if diag { Neighborhood::Diagonal } else { Neighborhood::Square };
        let g = lattice::make_lattice(rows, cols, nb).unwrap();
        let r = lattice::make_lattice(cols, rows, nb).unwrap();
        // cell (i, j) of the rows x cols grid lands on (j, rows - 1 - i)
        let map = |k: usize| {
            let (i, j) = (k / cols, k % cols);
            j * rows + (rows - 1 - i)
        };
        let n = rows * cols;
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(g.adjacency[(a, b)], r.adjacency[(map(a), map(b))]);
            }
        }
    }
}

#[test]
fn square_lattice_degrees() {
    let g = lattice::make_lattice(25, 25, Neighborhood::Square).unwrap();
    let degrees: Vec<usize> = g.adjacency.row_iter().map(|r| r.sum() as usize).collect();
    let count = |d: usize| degrees.iter().filter(|&&x| x == d).count();
    assert_eq!(degrees.len(), 625);
    assert_eq!((count(2), count(3), count(4)), (4, 92, 529));
}

#[test]
fn identity_link_loss_is_squared_error() {
    let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let f = DVector::from_vec(vec![1.5, 2.0, 2.0]);
    assert_eq!(modelsel::loss(&f, &y, Link::Identity).unwrap(), 0.25 + 1.0);
}
