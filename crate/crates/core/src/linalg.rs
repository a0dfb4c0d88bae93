//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub(crate) const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn determinant(m: &CMatrix) -> Complex64 {
    if m.nrows() == 0 {
        return ONE;
    }
    m.clone().lu().determinant()
}

/// Singular value decomposition with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: CMatrix,
    pub sigma: Vec<f64>,
    pub v: CMatrix,
}

/// One-sided Jacobi SVD of a square matrix.
///
/// nalgebra's complex SVD returns inconsistent factors for nearly rank
/// deficient 2x2 and 3x3 inputs, which are exactly the matrices whose null
/// vectors we need. Right vectors come from the accumulated rotations; left
/// vectors from the rotated columns, except the trailing ones, which are
/// completed orthogonally so the left null vector stays accurate.
pub fn svd_sorted(m: &CMatrix) -> SortedSvd {
    let n = m.ncols();
    let mut w = m.clone();
    let mut v = CMatrix::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dotc(&w.column(q));
                let g = gamma.norm();
                if g <= 1e-15 * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let e = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for r in 0..mat.nrows() {
                        let (a, b) = (mat[(r, p)], mat[(r, q)] * e.conj());
                        mat[(r, p)] = a * c - b * s;
                        mat[(r, q)] = a * s + b * c;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let v = CMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    let top = sigma.first().copied().unwrap_or(0.0);
    let mut u = CMatrix::zeros(n, n);
    for (c, &j) in order.iter().enumerate() {
        if c + 1 < n && sigma[c] > 1e-8 * top {
            u.set_column(c, &(w.column(j) / Complex64::new(sigma[c], 0.0)));
            continue;
        }
        // orthogonal completion, phased to match the rotated column
        let mut best = nalgebra::DVector::<Complex64>::zeros(n);
        for e in 0..n {
            let mut cand = nalgebra::DVector::<Complex64>::zeros(n);
            cand[e] = ONE;
            for _ in 0..2 {
                for k in 0..c {
                    let proj = u.column(k).dotc(&cand);
                    cand -= u.column(k) * proj;
                }
            }
            if cand.norm() > best.norm() {
                best = cand;
            }
        }
        best /= Complex64::new(best.norm(), 0.0);
        let overlap = best.dotc(&w.column(j));
        if overlap.norm() > 0.0 {
            best *= overlap / overlap.norm();
        }
        u.set_column(c, &best);
    }
    SortedSvd { u, sigma, v }
}

/// Right null vector of a square matrix: the right singular vector of the
/// smallest singular value, plus the two smallest singular values.
pub fn null_vector(m: &CMatrix) -> (Vec<Complex64>, f64, f64) {
    let svd = svd_sorted(m);
    let k = svd.sigma.len();
    let v = svd.v.column(k - 1).iter().copied().collect();
    let next = if k >= 2 { svd.sigma[k - 2] } else { f64::INFINITY };
    (v, svd.sigma[k - 1], next)
}

/// Vector `u` with `u^H m = 0` (numerically), with the two smallest singular values.
pub fn left_null_vector(m: &CMatrix) -> (Vec<Complex64>, f64, f64) {
    let svd = svd_sorted(m);
    let k = svd.sigma.len();
    let u = svd.u.column(k - 1).iter().copied().collect();
    let next = if k >= 2 { svd.sigma[k - 2] } else { f64::INFINITY };
    (u, svd.sigma[k - 1], next)
}

/// Adjugate (classical adjoint) computed from the SVD, valid for singular matrices.
///
/// `adj(A) = det(U) det(V^H) V adj(Σ) U^H` with `adj(Σ)_ii = prod_{j != i} σ_j`.
pub fn adjugate(m: &CMatrix) -> CMatrix {
    let n = m.nrows();
    if n == 1 {
        return CMatrix::from_element(1, 1, ONE);
    }
    let svd = svd_sorted(m);
    let phase = determinant(&svd.u) * determinant(&svd.v.adjoint());
    let mut scaled_v = svd.v.clone();
    for i in 0..n {
        let mut prod = 1.0;
        for (j, s) in svd.sigma.iter().enumerate() {
            if j != i {
                prod *= s;
            }
        }
        for r in 0..n {
            scaled_v[(r, i)] *= prod;
        }
    }
    scaled_v * svd.u.adjoint() * phase
}

/// Eigenvalues of a complex square matrix.
pub fn eigenvalues(m: &CMatrix) -> Vec<Complex64> {
    let n = m.nrows();
    match n {
        0 => Vec::new(),
        1 => vec![m[(0, 0)]],
        2 => {
            let tr = m[(0, 0)] + m[(1, 1)];
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let disc = (tr * tr - 4.0 * det).sqrt();
            vec![(tr + disc) * 0.5, (tr - disc) * 0.5]
        }
        _ => {
            let schur = nalgebra::linalg::Schur::new(m.clone());
            let (_, t) = schur.unpack();
            (0..n).map(|i| t[(i, i)]).collect()
        }
    }
}

/// Roots of `sum_s coeffs[s] z^s` (ascending coefficients) via the companion
/// matrix, each polished by Newton steps.
pub fn polynomial_roots(coeffs: &[Complex64]) -> Vec<Complex64> {
    let deg = coeffs.len() - 1;
    let lead = coeffs[deg];
    let mut comp = CMatrix::zeros(deg, deg);
    for i in 1..deg {
        comp[(i, i - 1)] = ONE;
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let mut roots = eigenvalues(&comp);
    for r in roots.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = poly_eval_with_derivative(coeffs, *r);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            let cand = *r - step;
            if poly_eval(coeffs, cand).norm() < p.norm() {
                *r = cand;
            } else {
                break;
            }
        }
    }
    roots
}

pub fn poly_eval(coeffs: &[Complex64], z: Complex64) -> Complex64 {
    coeffs.iter().rev().fold(ZERO, |acc, &c| acc * z + c)
}

pub fn poly_eval_with_derivative(coeffs: &[Complex64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = ZERO;
    let mut dp = ZERO;
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// Sylvester-matrix resultant of two polynomials given by ascending coefficients.
pub fn sylvester_resultant(p: &[Complex64], q: &[Complex64]) -> Complex64 {
    let dp = p.len() - 1;
    let dq = q.len() - 1;
    let size = dp + dq;
    if size == 0 {
        return ONE;
    }
    let mut s = CMatrix::zeros(size, size);
    for row in 0..dq {
        for (i, &c) in p.iter().rev().enumerate() {
            s[(row, row + i)] = c;
        }
    }
    for row in 0..dp {
        for (i, &c) in q.iter().rev().enumerate() {
            s[(dq + row, row + i)] = c;
        }
    }
    determinant(&s)
}

pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn vec_norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn eigenvalues_of_triangular_complex_matrix() {
        let m = CMatrix::from_row_slice(
            3,
            3,
            &[c(1.0, 1.0), c(2.0, 0.0), c(0.5, -1.0), ZERO, c(-2.0, 0.5), c(3.0, 0.0), ZERO, ZERO, c(0.25, 0.0)],
        );
        let mut ev = eigenvalues(&m);
        ev.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        assert!((ev[0] - c(-2.0, 0.5)).norm() < 1e-12);
        assert!((ev[1] - c(0.25, 0.0)).norm() < 1e-12);
        assert!((ev[2] - c(1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn adjugate_matches_inverse_times_determinant() {
        let m = CMatrix::from_row_slice(3, 3, &[c(1.0, 0.2), c(2.0, 0.0), c(0.0, 1.0), c(0.3, 0.0), c(1.0, -1.0), c(2.0, 0.0), c(1.0, 1.0), c(0.0, 0.5), c(3.0, 0.0)]);
        let adj = adjugate(&m);
        let expected = m.clone().try_inverse().unwrap() * determinant(&m);
        assert!((adj - expected).norm() < 1e-12);
    }

    #[test]
    fn adjugate_of_rank_deficient_matrix() {
        // rank one: adj = 0 for n = 3
        let m = CMatrix::from_fn(3, 3, |i, j| c((i + 1) as f64 * (j + 2) as f64, 0.0));
        assert!(adjugate(&m).norm() < 1e-10);
        // 2x2 rank one: adj([[a,b],[c,d]]) = [[d,-b],[-c,a]]
        let m = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]);
        let adj = adjugate(&m);
        let expected = CMatrix::from_row_slice(2, 2, &[c(4.0, 0.0), c(-2.0, 0.0), c(-2.0, 0.0), c(1.0, 0.0)]);
        assert!((adj - expected).norm() < 1e-12);
    }

    #[test]
    fn roots_of_quadratic() {
        // z^2 - 3z + 2
        let mut r = polynomial_roots(&[c(2.0, 0.0), c(-3.0, 0.0), ONE]);
        r.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        assert!((r[0] - ONE).norm() < 1e-13 && (r[1] - c(2.0, 0.0)).norm() < 1e-13);
    }

    #[test]
    fn resultant_detects_common_root() {
        // (z-1)(z-2) and (z-2)(z+5)
        let p = [c(2.0, 0.0), c(-3.0, 0.0), ONE];
        let q = [c(-10.0, 0.0), c(3.0, 0.0), ONE];
        assert!(sylvester_resultant(&p, &q).norm() < 1e-12);
        // Res(z - a, z - b) = b - a up to sign convention
        let r = sylvester_resultant(&[c(-1.0, 0.0), ONE], &[c(-4.0, 0.0), ONE]);
        assert!((r.norm() - 3.0).abs() < 1e-12);
    }

    fn reconstruction_error(m: &CMatrix) -> f64 {
        let svd = svd_sorted(m);
        let sigma = CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if i == j { c(svd.sigma[i], 0.0) } else { ZERO });
        let unitary = (svd.u.adjoint() * &svd.u - CMatrix::identity(m.nrows(), m.nrows())).norm()
            + (svd.v.adjoint() * &svd.v - CMatrix::identity(m.nrows(), m.nrows())).norm();
        (&svd.u * sigma * svd.v.adjoint() - m).norm() + unitary
    }

    #[test]
    fn svd_of_nearly_singular_complex_matrix() {
        // a transfer matrix minus zI at an eigenvalue; nalgebra's SVD gets this one wrong
        let m = CMatrix::from_row_slice(
            2,
            2,
            &[c(0.15399026856095654, -0.6571450461299966), c(-0.6200971426522239, -0.16611852310067082), c(0.6956746126020057, 0.1400158767022313), c(0.15399026855942954, -0.6571450461297257)],
        );
        assert!(reconstruction_error(&m) < 1e-13);
        let expected = CMatrix::from_row_slice(2, 2, &[m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]]);
        assert!((adjugate(&m) - expected).norm() < 1e-13);
        let (v, smin, _) = null_vector(&m);
        let (w, _, _) = left_null_vector(&m);
        let mv = &m * nalgebra::DVector::from_vec(v);
        let wm = nalgebra::DVector::from_vec(w).adjoint() * &m;
        assert!(smin < 1e-10 && mv.norm() < 1e-10 && wm.norm() < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn svd_reconstructs_rank_deficient_products(
            n in 2usize..6,
            rank in 1usize..4,
            entries in proptest::collection::vec(-1.0f64..1.0, 96),
        ) {
            let rank = rank.min(n - 1);
            let a = CMatrix::from_fn(n, rank, |i, j| c(entries[2 * (i * 4 + j)], entries[2 * (i * 4 + j) + 1]));
            let b = CMatrix::from_fn(rank, n, |i, j| c(entries[48 + 2 * (i * 6 + j) % 48], entries[49 + 2 * (i * 6 + j) % 47]));
            let m = a * b;
            proptest::prop_assert!(reconstruction_error(&m) < 1e-12 * (1.0 + m.norm()));
            let (v, _, _) = null_vector(&m);
            let (w, _, _) = left_null_vector(&m);
            proptest::prop_assert!((&m * nalgebra::DVector::from_vec(v)).norm() < 1e-12 * (1.0 + m.norm()));
            proptest::prop_assert!((nalgebra::DVector::from_vec(w).adjoint() * &m).norm() < 1e-12 * (1.0 + m.norm()));
        }
    }
}
