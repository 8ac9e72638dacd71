#![allow(dead_code)]

pub mod gradcheck;

use lsiquant::model::{make_synthetic_data, make_synthetic_model, DataSpec, LayerGraph, ModelSpec};
use lsiquant::tensor::{seeded_rng, Matrix};

pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        vocab: 32,
        width: 16,
        heads: 2,
        layers: 2,
        mlp_mult: 2,
        ..ModelSpec::default()
    }
}

pub fn tokens(vocab: usize, samples: usize, seq_len: usize, seed: u64) -> Vec<Vec<usize>> {
    let spec = DataSpec {
        vocab,
        samples,
        seq_len,
        branching: 4,
        source_seed: 0,
    };
    make_synthetic_data(&spec, seed).unwrap().tokens().unwrap().to_vec()
}

/// Model plus its full-precision hidden states on a few short sequences.
pub fn tiny_fixture(seed: u64, samples: usize, seq_len: usize) -> (LayerGraph, Vec<Vec<usize>>, Vec<Matrix>) {
    let spec = tiny_spec();
    let model = make_synthetic_model(&spec, seed).unwrap();
    let toks = tokens(spec.vocab, samples, seq_len, seed + 100);
    let hidden = model
        .hidden_states(&toks, &lsiquant::model::ForwardMode::Fp)
        .unwrap();
    (model, toks, hidden)
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    seeded_rng(seed).normal_matrix(rows, cols, 1.0)
}

/// Triple-loop product.
pub fn plain_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
pub fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}
