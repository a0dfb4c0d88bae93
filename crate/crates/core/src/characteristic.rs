//! The characteristic determinant `Δ(λ,t) = det(M(λ) − e^{it} I)`, its
//! polynomial structure in `z = e^{it}`, derivatives, and the resultant of
//! `Δ` and `∂Δ/∂λ` whose zeros are the multiple eigenvalues.
//!
//! `M(λ)` is the boundary jet of the fundamental solutions. To keep the
//! determinant well conditioned when solutions grow exponentially, it is
//! evaluated as the determinant of a cyclic block matrix built from the
//! transfer matrices of sub-intervals of `[0,1]`, which is algebraically
//! identical to `det(T_N ⋯ T_1 − zI)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectralError};
use crate::linalg::{self, CMatrix, I, ONE, ZERO};
use crate::ode::{self, OdeTolerances, SegmentedFlow};
use crate::operator::OperatorSpec;

/// Default strip offset: quasimomenta are reported with `Re t ∈ [−a, 2π − a)`.
pub const DEFAULT_STRIP_OFFSET: f64 = 0.4;

/// Rotation of the sampling nodes on the unit circle, keeping them away from `z = ±1`.
const NODE_ROTATION: f64 = 0.1234;

/// Block matrix `B(z)` with `det B(z) = det(T_N⋯T_1 − zI)`:
/// row 0 holds `−zI` in column 0 and `T_N` in column `N−1`; row `i ≥ 1` holds
/// `−T_i` in column `i−1` and `I` in column `i`.
pub(crate) fn cyclic_matrix(flow: &SegmentedFlow, z: Complex64) -> CMatrix {
    let nm = flow.transfers[0].nrows();
    let segs = flow.segments();
    if segs == 1 {
        return &flow.transfers[0] - CMatrix::identity(nm, nm) * z;
    }
    let mut b = CMatrix::zeros(nm * segs, nm * segs);
    for d in 0..nm {
        b[(d, d)] = -z;
    }
    b.view_mut((0, nm * (segs - 1)), (nm, nm)).copy_from(&flow.transfers[segs - 1]);
    for i in 1..segs {
        b.view_mut((nm * i, nm * (i - 1)), (nm, nm)).copy_from(&(-&flow.transfers[i - 1]));
        for d in 0..nm {
            b[(nm * i + d, nm * i + d)] = ONE;
        }
    }
    b
}

/// `∂B/∂λ`, same block pattern as [`cyclic_matrix`] with derivative blocks.
pub(crate) fn cyclic_lambda_derivative(flow: &SegmentedFlow) -> CMatrix {
    let ders = flow.derivatives.as_ref().expect("flow carries derivatives");
    let nm = ders[0].nrows();
    let segs = ders.len();
    if segs == 1 {
        return ders[0].clone();
    }
    let mut b = CMatrix::zeros(nm * segs, nm * segs);
    b.view_mut((0, nm * (segs - 1)), (nm, nm)).copy_from(&ders[segs - 1]);
    for i in 1..segs {
        b.view_mut((nm * i, nm * (i - 1)), (nm, nm)).copy_from(&(-&ders[i - 1]));
    }
    b
}

fn trace_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let mut acc = ZERO;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Δ and its derivatives at one `(λ, z)` from a precomputed flow.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DeltaValue {
    pub value: Complex64,
    pub d_lambda: Option<Complex64>,
    /// `∂Δ/∂z`.
    pub d_z: Complex64,
}

pub(crate) fn evaluate_flow(flow: &SegmentedFlow, z: Complex64) -> DeltaValue {
    let b = cyclic_matrix(flow, z);
    let value = linalg::determinant(&b);
    let adj = linalg::adjugate(&b);
    let nm = flow.transfers[0].nrows();
    let mut tr00 = ZERO;
    for d in 0..nm {
        tr00 += adj[(d, d)];
    }
    let d_lambda = flow.derivatives.as_ref().map(|_| trace_product(&adj, &cyclic_lambda_derivative(flow)));
    DeltaValue { value, d_lambda, d_z: -tr00 }
}

fn sampling_nodes(count: usize) -> Vec<Complex64> {
    (0..count)
        .map(|p| Complex64::from_polar(1.0, NODE_ROTATION + 2.0 * PI * p as f64 / count as f64))
        .collect()
}

/// Coefficients of `Σ_s c_s z^s` from its values at the rotated nodes.
fn coefficients_from_samples(values: &[Complex64]) -> Vec<Complex64> {
    let count = values.len();
    (0..count)
        .map(|s| {
            let mut acc = ZERO;
            for (p, v) in values.iter().enumerate() {
                acc += v * Complex64::from_polar(1.0, -2.0 * PI * (p * s) as f64 / count as f64);
            }
            acc / count as f64 * Complex64::from_polar(1.0, -(s as f64) * NODE_ROTATION)
        })
        .collect()
}

/// `Δ(λ,·)` as a polynomial of degree `nm` in `z = e^{it}`.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaPolynomial {
    pub lambda: Complex64,
    /// Raw determinant coefficients `c_0..c_nm`.
    pub coeffs: Vec<Complex64>,
    /// Raw leading coefficient; dividing by it makes the polynomial monic.
    pub normalization: Complex64,
}

impl DeltaPolynomial {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn normalized(&self) -> Vec<Complex64> {
        self.coeffs.iter().map(|c| c / self.normalization).collect()
    }

    pub fn max_coeff(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn eval_z(&self, z: Complex64) -> Complex64 {
        linalg::poly_eval(&self.coeffs, z)
    }

    pub fn eval(&self, t: Complex64) -> Complex64 {
        self.eval_z((I * t).exp())
    }

    /// `∂Δ/∂t = Σ_s i s c_s e^{ist}`.
    pub fn d_t(&self, t: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(s, c)| I * s as f64 * c * (I * t * s as f64).exp())
            .sum()
    }

    /// Deviation of the end-coefficient ratio from its exact value.
    ///
    /// The determinant has `c_0 = det M = 1` (the companion system is trace
    /// free) and `c_nm = (−1)^{nm}`, so after normalization `c_0 / c_nm` equals
    /// `(−1)^{nm}`; this returns `|c_0/c_nm − (−1)^{nm}|`.
    pub fn end_ratio_defect(&self) -> f64 {
        let sign = if self.degree().is_multiple_of(2) { 1.0 } else { -1.0 };
        (self.coeffs[0] / self.coeffs[self.degree()] - sign).norm()
    }
}

pub(crate) fn delta_poly_from_flow(flow: &SegmentedFlow) -> DeltaPolynomial {
    let nm = flow.transfers[0].nrows();
    let nodes = sampling_nodes(nm + 1);
    let values: Vec<Complex64> = nodes.iter().map(|&z| linalg::determinant(&cyclic_matrix(flow, z))).collect();
    let coeffs = coefficients_from_samples(&values);
    DeltaPolynomial { lambda: flow.lambda, normalization: coeffs[nm], coeffs }
}

/// `∂Δ/∂λ(λ,·)` as a polynomial in `z` (degree `nm − 1`: the leading
/// coefficient of `Δ` does not depend on λ).
pub(crate) fn delta_lambda_poly_from_flow(flow: &SegmentedFlow) -> Vec<Complex64> {
    let nm = flow.transfers[0].nrows();
    let nodes = sampling_nodes(nm + 1);
    let values: Vec<Complex64> = nodes.iter().map(|&z| evaluate_flow(flow, z).d_lambda.expect("derivative flow")).collect();
    let mut coeffs = coefficients_from_samples(&values);
    coeffs.truncate(nm);
    coeffs
}

pub fn delta(spec: &OperatorSpec, lambda: Complex64, t: Complex64, tol: &OdeTolerances) -> Result<Complex64> {
    let flow = ode::segmented_flow(spec, lambda, false, tol)?;
    Ok(linalg::determinant(&cyclic_matrix(&flow, (I * t).exp())))
}

pub fn delta_poly(spec: &OperatorSpec, lambda: Complex64, tol: &OdeTolerances) -> Result<DeltaPolynomial> {
    let flow = ode::segmented_flow(spec, lambda, false, tol)?;
    Ok(delta_poly_from_flow(&flow))
}

/// `(∂Δ/∂λ, ∂Δ/∂t)` at `(λ, t)`.
pub fn delta_derivatives(
    spec: &OperatorSpec,
    lambda: Complex64,
    t: Complex64,
    tol: &OdeTolerances,
) -> Result<(Complex64, Complex64)> {
    let flow = ode::segmented_flow(spec, lambda, true, tol)?;
    let z = (I * t).exp();
    let d_lambda = evaluate_flow(&flow, z).d_lambda.expect("derivative flow");
    let d_t = delta_poly_from_flow(&flow).d_t(t);
    Ok((d_lambda, d_t))
}

/// Sylvester resultant of `Δ(λ,·)` and `∂Δ/∂λ(λ,·)` as polynomials in `z`.
pub fn resultant_r(spec: &OperatorSpec, lambda: Complex64, tol: &OdeTolerances) -> Result<Complex64> {
    let flow = ode::segmented_flow(spec, lambda, true, tol)?;
    let p = delta_poly_from_flow(&flow).normalized();
    let lead = delta_poly_from_flow(&flow).normalization;
    let q: Vec<Complex64> = delta_lambda_poly_from_flow(&flow).iter().map(|c| c / lead).collect();
    Ok(linalg::sylvester_resultant(&p, &q))
}

/// A root `t` of `Δ(λ,·)` in the strip, with its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TFiber {
    pub t: Complex64,
    pub multiplicity: usize,
}

/// Map `z = e^{it}` to `t` with `Re t ∈ [−a, 2π − a)`.
pub fn t_from_z(z: Complex64, strip_offset: f64) -> Complex64 {
    let mut re = z.arg();
    let lo = -strip_offset;
    while re < lo {
        re += 2.0 * PI;
    }
    while re >= lo + 2.0 * PI {
        re -= 2.0 * PI;
    }
    Complex64::new(re, -z.norm().ln())
}

/// Relative distance below which polynomial roots are merged into one fiber.
pub const FIBER_CLUSTER_TOL: f64 = 1e-4;

pub fn t_values_for_lambda(
    spec: &OperatorSpec,
    lambda: Complex64,
    strip_offset: f64,
    tol: &OdeTolerances,
) -> Result<Vec<TFiber>> {
    let poly = delta_poly(spec, lambda, tol)?;
    fibers_from_poly(&poly, strip_offset, FIBER_CLUSTER_TOL)
}

pub(crate) fn fibers_from_poly(poly: &DeltaPolynomial, strip_offset: f64, cluster_tol: f64) -> Result<Vec<TFiber>> {
    let lead = poly.coeffs[poly.degree()].norm();
    if lead <= 1e-12 * poly.max_coeff() {
        return Err(SpectralError::DegenerateLeadingCoefficient(lead));
    }
    let roots = linalg::polynomial_roots(&poly.normalized());
    // greedy clustering in z
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for r in roots {
        match clusters.iter_mut().find(|(c, k)| ((*c / *k as f64) - r).norm() <= cluster_tol * (1.0 + r.norm())) {
            Some((sum, k)) => {
                *sum += r;
                *k += 1;
            }
            None => clusters.push((r, 1)),
        }
    }
    let mut fibers: Vec<TFiber> = clusters
        .into_iter()
        .map(|(sum, k)| TFiber { t: t_from_z(sum / k as f64, strip_offset), multiplicity: k })
        .collect();
    fibers.sort_by(|a, b| a.t.re.total_cmp(&b.t.re).then(a.t.im.total_cmp(&b.t.im)));
    Ok(fibers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::poly_eval;
    use crate::operator::FourierMatrixPotential;
    use std::collections::BTreeMap;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn tol() -> OdeTolerances {
        OdeTolerances::default()
    }

    fn free(n: usize, m: usize) -> OperatorSpec {
        OperatorSpec::free(n, m).unwrap()
    }

    fn free_scalar_delta(lambda: Complex64, t: Complex64) -> Complex64 {
        let z = (I * t).exp();
        z * z - 2.0 * z * (-lambda).sqrt().cos() + 1.0
    }

    fn coupled() -> OperatorSpec {
        let mut h = BTreeMap::new();
        h.insert(0, CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.5, 0.0), ZERO, c(2.0, 0.0)]));
        h.insert(1, CMatrix::from_row_slice(2, 2, &[c(0.5, 0.0), c(0.25, 0.0), c(0.1, 0.0), c(0.3, 0.0)]));
        h.insert(-1, CMatrix::from_row_slice(2, 2, &[c(0.5, 0.0), c(0.1, 0.0), c(0.25, 0.0), c(0.3, 0.0)]));
        let mut p = BTreeMap::new();
        p.insert(2, FourierMatrixPotential::new(2, h).unwrap());
        OperatorSpec::new(2, 2, p).unwrap()
    }

    #[test]
    fn free_eigenvalue_is_root() {
        let t = c(0.7, 0.0);
        assert!(delta(&free(2, 1), -t * t, t, &tol()).unwrap().norm() < 1e-9);
    }

    #[test]
    fn double_root_at_pi() {
        assert!(delta(&free(2, 1), c(-PI * PI, 0.0), c(PI, 0.0), &tol()).unwrap().norm() < 1e-9);
    }

    #[test]
    fn free_value_at_zero_lambda() {
        let d = delta(&free(2, 1), ZERO, c(PI / 2.0, 0.0), &tol()).unwrap();
        assert!((d - c(0.0, -2.0)).norm() < 1e-10);
    }

    #[test]
    fn free_polynomial_coefficients() {
        let poly = delta_poly(&free(2, 1), c(-1.0, 0.0), &tol()).unwrap();
        let n = poly.normalized();
        assert!((n[0] - ONE).norm() < 1e-10);
        assert!((n[1] + 2.0 * 1f64.cos()).norm() < 1e-10);
        assert!((n[2] - ONE).norm() < 1e-12);
        assert!(poly.end_ratio_defect() < 1e-10);
    }

    #[test]
    fn two_by_two_free_coefficients_are_self_convolution() {
        let lambda = c(-7.0, 0.5);
        let poly = delta_poly(&free(2, 2), lambda, &tol()).unwrap();
        let cs = (-lambda).sqrt().cos();
        let s = [ONE, -2.0 * cs, ONE];
        let mut conv = vec![ZERO; 5];
        for i in 0..3 {
            for j in 0..3 {
                conv[i + j] += s[i] * s[j];
            }
        }
        for (a, b) in poly.normalized().iter().zip(&conv) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn polynomial_reproduces_direct_determinant() {
        let spec = coupled();
        let lambda = c(-45.0, 3.0);
        let poly = delta_poly(&spec, lambda, &tol()).unwrap();
        for &t in &[c(0.1, 0.0), c(1.3, 0.2), c(2.9, -0.1), c(4.0, 0.0), c(5.5, 0.3), c(-0.3, 0.0), c(3.3, 0.05)] {
            let direct = delta(&spec, lambda, t, &tol()).unwrap();
            assert!((poly.eval(t) - direct).norm() <= 1e-8 * direct.norm().max(poly.max_coeff()));
            // periodicity in t
            assert!((poly.eval(t + 2.0 * PI) - poly.eval(t)).norm() <= 1e-12 * poly.max_coeff());
        }
        assert!(poly.end_ratio_defect() < 1e-8);
    }

    #[test]
    fn odd_system_size_end_ratio() {
        let spec = OperatorSpec::free(3, 1).unwrap();
        let poly = delta_poly(&spec, c(30.0, -4.0), &tol()).unwrap();
        assert!(poly.end_ratio_defect() < 1e-8);
        assert!((poly.normalized()[0] + ONE).norm() < 1e-8);
    }

    #[test]
    fn segmented_determinant_matches_single_shot() {
        let spec = coupled();
        let lambda = c(-90.0, 20.0);
        let z = c(0.3, 0.8);
        let one = ode::segmented_flow_with(&spec, lambda, 1, true, &tol()).unwrap();
        let four = ode::segmented_flow_with(&spec, lambda, 4, true, &tol()).unwrap();
        let (a, b) = (evaluate_flow(&one, z), evaluate_flow(&four, z));
        assert!((a.value - b.value).norm() < 1e-8 * a.value.norm());
        assert!((a.d_lambda.unwrap() - b.d_lambda.unwrap()).norm() < 1e-8 * a.d_lambda.unwrap().norm());
        assert!((a.d_z - b.d_z).norm() < 1e-8 * a.d_z.norm());
    }

    #[test]
    fn t_derivative_closed_form() {
        let (lambda, t) = (c(-1.0, 0.0), c(0.5, 0.0));
        let (_, dt) = delta_derivatives(&free(2, 1), lambda, t, &tol()).unwrap();
        let expected = I * (2.0 * (I * 2.0 * t).exp() - 2.0 * (I * t).exp() * 1f64.cos());
        assert!((dt - expected).norm() < 1e-9);
    }

    #[test]
    fn lambda_derivative_matches_finite_difference() {
        let spec = coupled();
        for &(lambda, t) in &[
            (c(-40.0, 1.0), c(1.0, 0.0)),
            (c(-3.0, -2.0), c(2.5, 0.3)),
            (c(10.0, 0.0), c(0.2, 0.0)),
            (c(-150.0, 5.0), c(4.0, -0.2)),
            (c(-1.0, 0.5), c(5.9, 0.0)),
        ] {
            let (dl, dt) = delta_derivatives(&spec, lambda, t, &tol()).unwrap();
            let h = 1e-5 * (1.0 + lambda.norm());
            let fd = (delta(&spec, lambda + h, t, &tol()).unwrap() - delta(&spec, lambda - h, t, &tol()).unwrap()) / (2.0 * h);
            assert!((dl - fd).norm() <= 1e-5 * fd.norm().max(1e-3), "{dl} vs {fd}");
            // adjugate route for ∂Δ/∂t agrees with the polynomial route
            let flow = ode::segmented_flow(&spec, lambda, false, &tol()).unwrap();
            let z = (I * t).exp();
            let via_adj = I * z * evaluate_flow(&flow, z).d_z;
            assert!((via_adj - dt).norm() <= 1e-8 * dt.norm().max(1.0));
        }
    }

    #[test]
    fn t_derivative_vanishes_at_double_root() {
        let (_, dt) = delta_derivatives(&free(2, 1), c(-PI * PI, 0.0), c(PI, 0.0), &tol()).unwrap();
        assert!(dt.norm() < 1e-8);
    }

    fn discriminant(lambda: Complex64) -> Complex64 {
        let cs = (-lambda).sqrt().cos();
        4.0 * cs * cs - 4.0
    }

    #[test]
    fn resultant_vanishes_at_multiple_eigenvalue() {
        let spec = free(2, 1);
        assert!(resultant_r(&spec, c(-PI * PI, 0.0), &tol()).unwrap().norm() < 1e-8);
        let r = resultant_r(&spec, c(-PI * PI / 4.0, 0.0), &tol()).unwrap();
        assert!(r.norm() > 1e-3);
        // zero sets agree with the discriminant of z² − 2z cos s + 1
        assert!(discriminant(c(-PI * PI / 4.0, 0.0)).norm() > 1.0);
    }

    #[test]
    fn resultant_is_continuous() {
        let spec = coupled();
        for &lambda in &[c(-20.0, 1.0), c(3.0, 0.0), c(-70.0, -2.0)] {
            let r0 = resultant_r(&spec, lambda, &tol()).unwrap();
            let mut prev = f64::INFINITY;
            for e in [1e-2, 1e-4, 1e-6] {
                let d = (resultant_r(&spec, lambda + e, &tol()).unwrap() - r0).norm();
                assert!(d < prev.max(1e-12));
                prev = d;
            }
            assert!(prev < 1e-4 * r0.norm().max(1.0));
        }
    }

    #[test]
    fn fibers_of_free_case() {
        let spec = free(2, 1);
        let f = t_values_for_lambda(&spec, c(-1.0, 0.0), DEFAULT_STRIP_OFFSET, &tol()).unwrap();
        assert_eq!(f.len(), 2);
        assert!((f[0].t - c(1.0, 0.0)).norm() < 1e-9);
        assert!((f[1].t - c(2.0 * PI - 1.0, 0.0)).norm() < 1e-9);
        let f = t_values_for_lambda(&spec, c(-PI * PI, 0.0), DEFAULT_STRIP_OFFSET, &tol()).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].multiplicity, 2);
        assert!((f[0].t - c(PI, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn fibers_are_roots() {
        let spec = coupled();
        let lambda = c(-33.0, 4.0);
        let poly = delta_poly(&spec, lambda, &tol()).unwrap();
        let fibers = t_values_for_lambda(&spec, lambda, DEFAULT_STRIP_OFFSET, &tol()).unwrap();
        assert_eq!(fibers.iter().map(|f| f.multiplicity).sum::<usize>(), 4);
        for f in fibers {
            assert!(f.t.re >= -DEFAULT_STRIP_OFFSET && f.t.re < 2.0 * PI - DEFAULT_STRIP_OFFSET);
            assert!(poly.eval(f.t).norm() <= 1e-7 * poly.max_coeff());
            assert!(poly_eval(&poly.coeffs, (I * f.t).exp()).norm() <= 1e-7 * poly.max_coeff());
        }
    }

    #[test]
    fn closed_form_agrees_on_grid() {
        let spec = free(2, 1);
        for &lambda in &[c(-2.0, 0.3), c(-100.0, 0.0), c(4.0, 1.0)] {
            for &t in &[c(0.3, 0.0), c(2.0, 0.1)] {
                let d = delta(&spec, lambda, t, &tol()).unwrap();
                let e = free_scalar_delta(lambda, t);
                assert!((d - e).norm() < 1e-8 * (1.0 + e.norm()));
            }
        }
    }
}
