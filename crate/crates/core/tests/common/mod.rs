#![allow(dead_code)]

use multiview_gam::smoother::{self, TransductiveSmoother};
use multiview_gam::views::Partition;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense symmetric weights with entries in (0.05, 1] and a zero diagonal.
pub fn dense_weights(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.gen_range(0.05..1.0);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    w
}

/// Sparse symmetric weights on a random spanning path plus extra edges.
pub fn connected_weights(n: usize, extra: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    let order: Vec<usize> = sample(rng, n, n).into_vec();
    for pair in order.windows(2) {
        let v = rng.gen_range(0.2..1.0);
        w[(pair[0], pair[1])] = v;
        w[(pair[1], pair[0])] = v;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if w[(i, j)] == 0.0 && rng.gen_bool(extra) {
                let v = rng.gen_range(0.2..1.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
    }
    w
}

pub fn random_partition(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Partition {
    let mut l = sample(rng, n, m).into_vec();
    l.sort_unstable();
    Partition::new(l, n).unwrap()
}

pub fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0))
}

pub fn laplacian(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut p = -w.clone();
    for i in 0..n {
        p[(i, i)] += w.row(i).sum();
    }
    p
}

/// A random transductive smoother, rejected until `rho(S_UU) < rho_max`.
/// `kind` picks stochastic (0), regularized (1) or symmetric (2).
pub fn random_smoother(
    rng: &mut ChaCha8Rng,
    n_max: usize,
    rho_max: f64,
    kind: usize,
) -> (TransductiveSmoother, DMatrix<f64>) {
    loop {
        let n = rng.gen_range(4..=n_max);
        let m = rng.gen_range(1..n);
        let part = random_partition(n, m, rng);
        let w = if rng.gen_bool(0.5) {
            dense_weights(n, rng)
        } else {
            connected_weights(n, 0.2, rng)
        };
        let s = match kind {
            0 => smoother::stochastic_smoother(&w, &part),
            1 => smoother::regularized_smoother(&w, rng.gen_range(0.1..10.0), &part),
            _ => {
                let p = smoother::combinatorial_laplacian(&w, "w").unwrap();
                smoother::symmetric_smoother(&p, rng.gen_range(0.1..10.0), &part)
            }
        };
        if let Ok(s) = s {
            if s.rho_uu() < rho_max {
                return (s, w);
            }
        }
    }
}

/// Centered symmetric smoother `C (I + lambda P)^{-1}` computed by a
/// Cholesky solve, independently of the library.
pub fn centered_symmetric(p: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = p.nrows();
    let a = DMatrix::identity(n, n) + p * lambda;
    let inv = a.cholesky().expect("SPD").inverse();
    let c = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    c * inv
}

pub fn spectral_radius_dense(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

pub fn max_abs_v(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// Two disjoint 4-cycles joined to nothing; nodes 0..4 and 4..8.
pub fn two_component_graph() -> DMatrix<f64> {
    let mut a = DMatrix::zeros(8, 8);
    for base in [0, 4] {
        for k in 0..4 {
            let i = base + k;
            let j = base + (k + 1) % 4;
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    a
}
