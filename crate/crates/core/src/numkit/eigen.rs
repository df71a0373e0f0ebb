use super::matrix::Matrix;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Matrix,
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            op: "symmetric eigensolve",
            left: m.shape(),
            right: (m.cols(), m.rows()),
        });
    }
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

/// Cyclic Jacobi eigensolver. Intended for the small covariances here (N ≤ 64
/// or so); cost is O(N³) per sweep.
pub fn sym_eigen(m: &Matrix) -> Result<SymEigen> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut a = m.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return Ok(SymEigen {
            values: vec![0.0; n],
            vectors: v,
        });
    }

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = v.select_cols(&order);
    Ok(SymEigen { values, vectors })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue_sym(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 {
        return Err(Error::Domain("empty matrix has no eigenvalues".into()));
    }
    Ok(sym_eigen(m)?.values[0])
}

/// `log det` of a symmetric matrix; `-inf` when any eigenvalue is ≤ 0.
pub fn log_det_sym(m: &Matrix) -> Result<f64> {
    let eig = sym_eigen(m)?;
    Ok(eig
        .values
        .iter()
        .map(|&l| if l > 0.0 { l.ln() } else { f64::NEG_INFINITY })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::matrix::{matmul, matmul_tn};
    use proptest::prelude::*;

    #[test]
    fn diagonal() {
        let m = Matrix::from_diag(&[1.0, 4.0]);
        assert!((min_eigenvalue_sym(&m).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn known_pair() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let eig = sym_eigen(&m).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-12);
        assert!((eig.values[1] - 3.0).abs() < 1e-12);
        let v = eig.vectors;
        assert!((v[(0, 0)] + v[(1, 0)]).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        match min_eigenvalue_sym(&m) {
            Err(Error::NotSymmetric { max_asymmetry }) => assert_eq!(max_asymmetry, 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reconstructs() {
        let a = Matrix::from_fn(5, 5, |i, j| ((3 * i + 2 * j) as f64).sin());
        let m = matmul_tn(&a, &a).unwrap();
        let eig = sym_eigen(&m).unwrap();
        let d = Matrix::from_diag(&eig.values);
        let back = matmul(&matmul(&eig.vectors, &d).unwrap(), &eig.vectors.transpose()).unwrap();
        assert!(back.sub(&m).unwrap().max_abs() < 1e-10 * m.frobenius_norm());
    }

    proptest! {
        #[test]
        fn gram_is_psd(data in proptest::collection::vec(-3.0f64..3.0, 25)) {
            let a = Matrix::from_vec(5, 5, data).unwrap();
            let g = matmul_tn(&a, &a).unwrap();
            prop_assert!(min_eigenvalue_sym(&g).unwrap() >= -1e-10);
        }
    }
}
