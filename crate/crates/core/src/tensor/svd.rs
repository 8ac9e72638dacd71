//! Thin singular value decomposition by one-sided (Hestenes) Jacobi.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{LsiError, Result};

/// Rotation threshold on the normalized column inner product.
const ROTATION_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Thin SVD `w = u · diag(s) · v_h` with `r = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// `a × r`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `r × b`, orthonormal rows.
    pub v_h: Matrix,
}

impl SvdFactors {
    pub fn rank_dim(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        // Shapes are consistent by construction.
        self.u
            .scale_cols(&self.s)
            .and_then(|us| us.matmul(&self.v_h))
            .expect("svd factor shapes")
    }
}

pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    let (a, b) = w.shape();
    if a.min(b) == 0 {
        return Err(LsiError::Domain(format!("svd of empty {a}x{b} matrix")));
    }
    if !w.is_finite() {
        return Err(LsiError::Domain("svd input contains non-finite entries".into()));
    }
    if a >= b {
        Ok(svd_tall(w))
    } else {
        let t = svd_tall(&w.transpose());
        Ok(SvdFactors {
            u: t.v_h.transpose(),
            s: t.s,
            v_h: t.u.transpose(),
        })
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| p * q).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (p, q) in x.iter_mut().zip(y.iter_mut()) {
        let (xp, yq) = (*p, *q);
        *p = c * xp - s * yq;
        *q = s * xp + c * yq;
    }
}

/// Requires `rows >= cols`.
fn svd_tall(w: &Matrix) -> SvdFactors {
    let (a, b) = w.shape();
    let mut cols: Vec<Vec<f64>> = (0..b).map(|j| w.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..b)
        .map(|j| {
            let mut e = vec![0.0; b];
            e[j] = 1.0;
            e
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..b {
            for j in i + 1..b {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
                let (vlo, vhi) = vcols.split_at_mut(j);
                rotate(&mut vlo[i], &mut vhi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));

    let smax = order.first().map_or(0.0, |&k| sigma[k]);
    let null_tol = smax * (a as f64) * f64::EPSILON;

    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(b);
    let mut vrows: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut s_sorted = Vec::with_capacity(b);
    for &k in &order {
        let sk = sigma[k];
        if sk > null_tol && sk > 0.0 {
            ucols.push(Some(cols[k].iter().map(|x| x / sk).collect()));
        } else {
            ucols.push(None);
        }
        s_sorted.push(sk);
        vrows.push(vcols[k].clone());
    }

    complete_basis(&mut ucols, a);
    let mut ucols: Vec<Vec<f64>> = ucols.into_iter().map(|c| c.expect("completed")).collect();

    // Sign convention: the largest-magnitude entry of each U column is non-negative.
    for (ucol, vrow) in ucols.iter_mut().zip(vrows.iter_mut()) {
        let mut best = 0;
        for (idx, x) in ucol.iter().enumerate() {
            if x.abs() > ucol[best].abs() {
                best = idx;
            }
        }
        if ucol[best] < 0.0 {
            ucol.iter_mut().for_each(|x| *x = -*x);
            vrow.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = Matrix::from_fn(a, b, |r, c| ucols[c][r]);
    let v_h = Matrix::from_fn(b, b, |r, c| vrows[r][c]);
    SvdFactors { u, s: s_sorted, v_h }
}

/// Orthonormalize the given columns in order, dropping any that lose most of
/// their norm, then fill `None` slots with the unit vectors that keep the most
/// norm after projection.
fn complete_basis(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let project_out = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for _ in 0..2 {
            for other in basis {
                let p = dot(v, other);
                v.iter_mut().zip(other).for_each(|(x, o)| *x -= p * o);
            }
        }
        dot(v, v).sqrt()
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    for slot in cols.iter_mut() {
        if let Some(v) = slot {
            let n = project_out(v, &basis);
            if n > 0.5 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v.clone());
            } else {
                *slot = None;
            }
        }
    }
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..dim {
            let mut v = vec![0.0; dim];
            v[candidate] = 1.0;
            let n = project_out(&mut v, &basis);
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, v));
            }
        }
        let (n, mut v) = best.expect("dimension is positive");
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v.clone());
        cols[slot] = Some(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, matmul_nt, matmul_tn, seeded_rng};

    fn check_contract(w: &Matrix, f: &SvdFactors) {
        let r = w.rows().min(w.cols());
        assert_eq!(f.u.shape(), (w.rows(), r));
        assert_eq!(f.v_h.shape(), (r, w.cols()));
        assert!(f.s.windows(2).all(|p| p[0] >= p[1]));
        assert!(f.s.iter().all(|&x| x >= 0.0));
        let utu = matmul_tn(&f.u, &f.u).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-8);
        let vvt = matmul_nt(&f.v_h, &f.v_h).unwrap();
        assert!(vvt.max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-8);
        let norm = w.frobenius_norm();
        let err = f.reconstruct().sub(w).unwrap().frobenius_norm();
        if norm > 0.0 {
            assert!(err / norm < 1e-6, "relative error {}", err / norm);
        } else {
            assert_eq!(err, 0.0);
        }
    }

    #[test]
    fn identity() {
        let f = svd(&Matrix::identity(4)).unwrap();
        assert_eq!(f.s, vec![1.0; 4]);
        let uv = matmul(&f.u, &f.v_h).unwrap();
        assert!(uv.max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-15);
    }

    #[test]
    fn diagonal() {
        let f = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(f.s, vec![3.0, 1.0]);
        let f = svd(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(f.s, vec![3.0, 1.0]);
    }

    #[test]
    fn shapes_tall_wide_and_deficient() {
        let mut rng = seeded_rng(1);
        for &(a, b) in &[(6, 4), (4, 6), (1, 5), (5, 1), (16, 16), (33, 20)] {
            let w = rng.uniform_matrix(a, b, -1.0, 1.0);
            check_contract(&w, &svd(&w).unwrap());
        }
        // Product-form rank 3.
        let left = rng.normal_matrix(12, 3, 1.0);
        let right = rng.normal_matrix(3, 9, 1.0);
        let w = matmul(&left, &right).unwrap();
        let f = svd(&w).unwrap();
        check_contract(&w, &f);
        assert!(f.s[3] < 1e-12 * f.s[0]);
        // All zeros.
        let z = Matrix::zeros(5, 3);
        check_contract(&z, &svd(&z).unwrap());
    }

    #[test]
    fn deterministic_and_sign_fixed() {
        let w = seeded_rng(4).normal_matrix(10, 7, 1.0);
        let f1 = svd(&w).unwrap();
        let f2 = svd(&w).unwrap();
        assert_eq!(f1, f2);
        for c in 0..f1.u.cols() {
            let col = f1.u.column(c);
            let big = col.iter().cloned().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big >= 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut w = Matrix::identity(3);
        w.set(1, 1, f64::NAN);
        assert!(matches!(svd(&w), Err(LsiError::Domain(_))));
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(LsiError::Domain(_))));
    }
}
