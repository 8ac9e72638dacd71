mod common;

use common::{jacobi_eigenvalues, plain_matmul};
use lsiquant::tensor::{seeded_rng, svd, Matrix};
use lsiquant::LsiError;

#[test]
fn identity_and_diagonal() {
    let f = svd(&Matrix::identity(4)).unwrap();
    assert_eq!(f.s, vec![1.0; 4]);
    assert!(plain_matmul(&f.u, &f.v_h).max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-12);
    let f = svd(&Matrix::diag(&[1.0, 3.0])).unwrap();
    assert!((f.s[0] - 3.0).abs() < 1e-12 && (f.s[1] - 1.0).abs() < 1e-12);
}

#[test]
fn six_by_four_matches_gram_eigenvalues() {
    let w = seeded_rng(64).normal_matrix(6, 4, 1.0);
    let f = svd(&w).unwrap();
    let ev = jacobi_eigenvalues(&plain_matmul(&w.transpose(), &w));
    for (s, l) in f.s.iter().zip(&ev) {
        assert!((s - l.sqrt()).abs() < 1e-8, "{s} vs {}", l.sqrt());
    }
}

#[test]
fn tall_wide_and_deficient_shapes() {
    let mut rng = seeded_rng(9);
    let low_rank = plain_matmul(&rng.normal_matrix(20, 3, 1.0), &rng.normal_matrix(3, 11, 1.0));
    let repeated = Matrix::from_fn(8, 8, |r, c| if c < 4 { (r + c) as f64 } else { (r + c - 4) as f64 });
    for w in [rng.normal_matrix(30, 7, 1.0), rng.normal_matrix(7, 30, 1.0), low_rank, repeated, Matrix::zeros(3, 5)] {
        let f = svd(&w).unwrap();
        let r = w.rows().min(w.cols());
        assert_eq!((f.u.shape(), f.s.len(), f.v_h.shape()), ((w.rows(), r), r, (r, w.cols())));
        assert!(f.s.windows(2).all(|p| p[0] >= p[1]) && f.s.iter().all(|&s| s >= 0.0));
        let norm = w.frobenius_norm().max(1e-300);
        assert!(f.reconstruct().sub(&w).unwrap().frobenius_norm() / norm < 1e-6);
        assert!(plain_matmul(&f.u.transpose(), &f.u).max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-8);
        assert!(plain_matmul(&f.v_h, &f.v_h.transpose()).max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-8);
    }
}

#[test]
fn deterministic_with_sign_convention() {
    let w = seeded_rng(3).normal_matrix(12, 9, 1.0);
    let (a, b) = (svd(&w).unwrap(), svd(&w).unwrap());
    assert_eq!(a, b);
    for c in 0..a.u.cols() {
        let col = a.u.column(c);
        let big = col.iter().cloned().max_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap();
        assert!(big >= 0.0);
    }
}

#[test]
fn non_finite_input_is_a_domain_error() {
    let mut w = Matrix::identity(3);
    w.set(1, 2, f64::NAN);
    assert!(matches!(svd(&w), Err(LsiError::Domain(_))));
}
