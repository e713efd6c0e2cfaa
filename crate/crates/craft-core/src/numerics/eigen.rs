use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Result of a symmetric eigendecomposition: C = vectors * diag(values) * vectorsᵀ.
///
/// Eigenvalues are sorted descending; `vectors` holds the matching
/// eigenvectors as columns. Tiny negative eigenvalues produced by round-off
/// are clamped to 0 and counted in `clamped` so callers can see it happened.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub vectors: Matrix,
    pub values: Vec<f64>,
    pub clamped: usize,
}

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_DIM: usize = 1024;
const MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// O(d³) per sweep with a handful of sweeps to converge, which is fine at the
/// dimensions used here (d ≤ 1024, usually ≤ 512). Input must be square and
/// symmetric within 1e-10.
pub fn sym_eigen(c: &Matrix) -> Result<SymEigen> {
    let d = c.rows();
    if c.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "sym_eigen needs a square matrix, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }
    if d > MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "sym_eigen supports d <= {MAX_DIM}, got {d}"
        )));
    }
    let mut max_asym: f64 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            max_asym = max_asym.max((c[(i, j)] - c[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            max_asym,
            tol: SYMMETRY_TOL,
        });
    }

    // Work on an exactly-symmetric copy so the rotations stay consistent.
    let mut a = c.clone();
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(d);

    let scale = c.frobenius_norm().max(1.0);
    let stop = 1e-14 * scale;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if (2.0 * off).sqrt() <= stop {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle chosen to zero a[p][q]: the stable
                // tan-based form avoids cancellation when the diagonal
                // entries are nearly equal.
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..d {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cos * akp - sin * akq;
                    a[(p, k)] = a[(k, p)];
                    a[(k, q)] = sin * akp + cos * akq;
                    a[(q, k)] = a[(k, q)];
                }
                for k in 0..d {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cos * vkp - sin * vkq;
                    v[(k, q)] = sin * vkp + cos * vkq;
                }
            }
        }
    }

    // Sort eigenpairs by descending eigenvalue for a stable output order.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());

    let mut values = Vec::with_capacity(d);
    let mut vectors = Matrix::zeros(d, d);
    let mut clamped = 0;
    for (dst, &src) in order.iter().enumerate() {
        let mut val = a[(src, src)];
        if val < 0.0 {
            val = 0.0;
            clamped += 1;
        }
        values.push(val);
        for k in 0..d {
            vectors[(k, dst)] = v[(k, src)];
        }
    }

    Ok(SymEigen {
        vectors,
        values,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;

    fn reconstruction_error(c: &Matrix, eig: &SymEigen) -> f64 {
        let d = c.rows();
        let mut rebuilt = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut sum = 0.0;
                for k in 0..d {
                    sum += eig.vectors[(i, k)] * eig.values[k] * eig.vectors[(j, k)];
                }
                rebuilt[(i, j)] = sum;
            }
        }
        let mut frob = 0.0;
        for i in 0..d {
            for j in 0..d {
                let diff = c[(i, j)] - rebuilt[(i, j)];
                frob += diff * diff;
            }
        }
        frob.sqrt()
    }

    fn orthonormality_error(eig: &SymEigen) -> f64 {
        let d = eig.vectors.rows();
        let mut frob = 0.0;
        for i in 0..d {
            for j in 0..d {
                let mut sum = 0.0;
                for k in 0..d {
                    sum += eig.vectors[(k, i)] * eig.vectors[(k, j)];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                frob += (sum - target) * (sum - target);
            }
        }
        frob.sqrt()
    }

    fn random_psd(rng: &mut SeededRng, d: usize) -> Matrix {
        // G·Gᵀ is PSD by construction; symmetrize away the last bits of
        // floating-point asymmetry.
        let g = Matrix::from_vec(d, d, rng.normal_vec(d * d, 1.0)).unwrap();
        let gt = g.transpose();
        let mut c = g.matmul(&gt).unwrap();
        for i in 0..d {
            for j in (i + 1)..d {
                let avg = 0.5 * (c[(i, j)] + c[(j, i)]);
                c[(i, j)] = avg;
                c[(j, i)] = avg;
            }
        }
        c
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let eig = sym_eigen(&Matrix::identity(5)).unwrap();
        for &v in &eig.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
        assert_eq!(eig.clamped, 0);
        assert!(orthonormality_error(&eig) < 1e-12);
    }

    #[test]
    fn diagonal_matrix_sorted_descending() {
        let c = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let eig = sym_eigen(&c).unwrap();
        assert!((eig.values[0] - 4.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
        // Leading eigenvector is ±e₂.
        assert!((eig.vectors[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(eig.vectors[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn known_2x2_eigenvalues() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1.
        let c = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let eig = sym_eigen(&c).unwrap();
        assert!((eig.values[0] - 3.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
        // Eigenvector for 3 is (1,1)/√2 up to sign.
        let ratio = eig.vectors[(0, 0)] / eig.vectors[(1, 0)];
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_psd_reconstruction_and_orthonormality() {
        // 100 random PSD matrices across the sizes the optimizer actually
        // uses: lots of small ones, a batch of mid-size, some large.
        let mut rng = SeededRng::new(99);
        let mut checked = 0;
        for &(d, count) in &[(2usize, 40usize), (8, 40), (64, 20)] {
            for _ in 0..count {
                let c = random_psd(&mut rng, d);
                let eig = sym_eigen(&c).unwrap();
                let tol = 1e-8 * c.frobenius_norm().max(1.0);
                let rec = reconstruction_error(&c, &eig);
                assert!(rec <= tol, "d={d}: reconstruction {rec:e} > {tol:e}");
                let orth = orthonormality_error(&eig);
                assert!(orth <= 1e-8, "d={d}: orthonormality {orth:e}");
                assert!(eig.values.iter().all(|&v| v >= 0.0));
                checked += 1;
            }
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let c = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.3, 1.0]).unwrap();
        let err = sym_eigen(&c).unwrap_err();
        assert!(err.to_string().contains("not symmetric"), "{err}");
    }

    #[test]
    fn accepts_asymmetry_below_tolerance() {
        let c = Matrix::from_vec(2, 2, vec![1.0, 0.5 + 1e-12, 0.5, 1.0]).unwrap();
        assert!(sym_eigen(&c).is_ok());
    }

    #[test]
    fn rejects_oversized_input() {
        let c = Matrix::zeros(1025, 1025);
        assert!(sym_eigen(&c).is_err());
    }

    #[test]
    fn clamps_tiny_negative_eigenvalue() {
        // Build C = 2·uuᵀ − 1e-12·wwᵀ with orthonormal u, w: one eigenvalue
        // is genuinely negative by round-off scale and must come back as 0.
        let (cos, sin) = (0.8, 0.6);
        let u = [cos, sin];
        let w = [-sin, cos];
        let mut c = Matrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                c[(i, j)] = 2.0 * u[i] * u[j] - 1e-12 * w[i] * w[j];
            }
        }
        let eig = sym_eigen(&c).unwrap();
        assert_eq!(eig.clamped, 1);
        assert_eq!(eig.values[1], 0.0);
        assert!((eig.values[0] - 2.0).abs() < 1e-12);
    }
}
