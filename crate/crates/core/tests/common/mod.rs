#![allow(dead_code)]

use arxtrack::matpoly;
use arxtrack::ArxModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn diag(entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(entries))
}

/// `A = diag(2, 0)`, `B = diag(3/4, −1/2)`, `Γ = Δ = I₂`.
pub fn diag_model() -> ArxModel {
    ArxModel::new(
        vec![diag(&[2.0, 0.0])],
        vec![diag(&[0.75, -0.5])],
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
    )
    .unwrap()
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(d, d) * 0.5
}

/// Random model with every companion eigenvalue of modulus at most
/// `max_radius`: `B_j → c^j B_j` scales those eigenvalues by `c`.
pub fn random_causal_model(rng: &mut ChaCha8Rng, d: usize, p: usize, q: usize, max_radius: f64) -> ArxModel {
    let a: Vec<_> = (0..p)
        .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let mut b: Vec<_> = (0..q)
        .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.8..0.8)))
        .collect();
    let gamma = random_spd(rng, d);
    let delta = random_spd(rng, d);
    let probe = ArxModel::new(a.clone(), b.clone(), gamma.clone(), delta.clone()).unwrap();
    let rho = matpoly::spectral_radius(&matpoly::companion_of_b(&probe)).unwrap();
    if rho > max_radius {
        let c = max_radius / rho;
        for (j, bj) in b.iter_mut().enumerate() {
            *bj *= c.powi(j as i32 + 1);
        }
    }
    ArxModel::new(a, b, gamma, delta).unwrap()
}

/// Models over every `(p, q)` in `{1,2,3}²`, cycling `d` through `1..=3`.
pub fn random_suite(seed: u64, rounds: usize) -> Vec<ArxModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for round in 0..rounds {
        for p in 1..=3 {
            for q in 1..=3 {
                let d = 1 + (round + p + q) % 3;
                out.push(random_causal_model(&mut rng, d, p, q, 0.9));
            }
        }
    }
    out
}
