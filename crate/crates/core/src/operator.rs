//! Operator specifications: order, dimension and finite-Fourier matrix
//! potentials, plus the mean matrix `C = ∫₀¹ P₂ dx` and its eigen-data.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectralError};
use crate::linalg::{self, CMatrix, ONE, ZERO};

/// Periodic `m×m` matrix potential given by finitely many Fourier harmonics:
/// `P(x) = Σ_q H_q e^{i2πqx}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMatrixPotential {
    dim: usize,
    harmonics: BTreeMap<i32, CMatrix>,
}

impl FourierMatrixPotential {
    pub fn new(dim: usize, harmonics: BTreeMap<i32, CMatrix>) -> Result<Self> {
        if dim == 0 {
            return Err(SpectralError::InvalidSpec("potential dimension must be positive".into()));
        }
        for (q, h) in &harmonics {
            if h.nrows() != dim || h.ncols() != dim {
                return Err(SpectralError::InvalidSpec(format!(
                    "harmonic {q} has shape {}x{}, expected {dim}x{dim}",
                    h.nrows(),
                    h.ncols()
                )));
            }
        }
        Ok(Self { dim, harmonics })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, harmonics: BTreeMap::new() }
    }

    pub fn constant(c: CMatrix) -> Self {
        let dim = c.nrows();
        let mut harmonics = BTreeMap::new();
        harmonics.insert(0, c);
        Self { dim, harmonics }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn harmonics(&self) -> &BTreeMap<i32, CMatrix> {
        &self.harmonics
    }

    pub fn max_frequency(&self) -> u32 {
        self.harmonics.keys().map(|q| q.unsigned_abs()).max().unwrap_or(0)
    }

    /// Mean value over one period (the `q = 0` harmonic).
    pub fn mean(&self) -> CMatrix {
        self.harmonics.get(&0).cloned().unwrap_or_else(|| CMatrix::zeros(self.dim, self.dim))
    }

    pub fn eval(&self, x: f64) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim, self.dim);
        for (&q, h) in &self.harmonics {
            let phase = Complex64::from_polar(1.0, 2.0 * PI * q as f64 * x);
            out += h * phase;
        }
        out
    }

    /// Pointwise conjugate transpose `P(x)^H` as a potential.
    pub fn adjoint(&self) -> Self {
        let harmonics = self.harmonics.iter().map(|(&q, h)| (-q, h.adjoint())).collect();
        Self { dim: self.dim, harmonics }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let harmonics = self.harmonics.iter().map(|(&q, h)| (q, h * Complex64::from(factor))).collect();
        Self { dim: self.dim, harmonics }
    }

    pub fn is_zero(&self) -> bool {
        self.harmonics.values().all(|h| h.iter().all(|c| c.norm() == 0.0))
    }

    /// Largest entry modulus summed over harmonics; bounds `sup_x |P(x)|`.
    pub fn amplitude(&self) -> f64 {
        self.harmonics.values().map(|h| h.iter().map(|c| c.norm()).fold(0.0, f64::max)).sum::<f64>() * self.dim as f64
    }

    fn is_hermitian(&self) -> bool {
        let adj = self.adjoint();
        self.harmonics.keys().chain(adj.harmonics.keys()).all(|q| {
            let a = self.harmonics.get(q).cloned().unwrap_or_else(|| CMatrix::zeros(self.dim, self.dim));
            let b = adj.harmonics.get(q).cloned().unwrap_or_else(|| CMatrix::zeros(self.dim, self.dim));
            (a - b).norm() <= 1e-14 * (1.0 + self.amplitude())
        })
    }
}

/// The differential expression `y^(n) + P₂ y^(n-2) + ... + P_n y` with
/// `m×m` periodic matrix coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    order: usize,
    dim: usize,
    potentials: BTreeMap<usize, FourierMatrixPotential>,
}

impl OperatorSpec {
    pub fn new(order: usize, dim: usize, potentials: BTreeMap<usize, FourierMatrixPotential>) -> Result<Self> {
        if order < 2 {
            return Err(SpectralError::InvalidSpec(format!("order n = {order} must be at least 2")));
        }
        if dim == 0 {
            return Err(SpectralError::InvalidSpec("dimension m must be at least 1".into()));
        }
        for (&nu, p) in &potentials {
            if nu < 2 || nu > order {
                return Err(SpectralError::InvalidSpec(format!("potential index {nu} outside 2..={order}")));
            }
            if p.dim() != dim {
                return Err(SpectralError::InvalidSpec(format!(
                    "potential P_{nu} has dimension {}, expected {dim}",
                    p.dim()
                )));
            }
        }
        Ok(Self { order, dim, potentials })
    }

    /// Zero potential: the free operator `y^(n)`.
    pub fn free(order: usize, dim: usize) -> Result<Self> {
        Self::new(order, dim, BTreeMap::new())
    }

    /// `P₂ ≡ C`, all other potentials zero.
    pub fn constant(order: usize, c: CMatrix) -> Result<Self> {
        let dim = c.nrows();
        let mut potentials = BTreeMap::new();
        potentials.insert(2, FourierMatrixPotential::constant(c));
        Self::new(order, dim, potentials)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `n·m`, the size of the first-order system.
    pub fn system_size(&self) -> usize {
        self.order * self.dim
    }

    pub fn potential(&self, nu: usize) -> Option<&FourierMatrixPotential> {
        self.potentials.get(&nu)
    }

    pub fn potentials(&self) -> &BTreeMap<usize, FourierMatrixPotential> {
        &self.potentials
    }

    pub fn is_even_order(&self) -> bool {
        self.order.is_multiple_of(2)
    }

    /// The homotopy family `L_t(C) + ε(L_t − L_t(C))`: `P₂ → C + ε(P₂ − C)`,
    /// `P_ν → εP_ν` for `ν ≥ 3`.
    pub fn homotopy(&self, epsilon: f64) -> Self {
        let mut potentials = BTreeMap::new();
        for (&nu, p) in &self.potentials {
            if nu == 2 {
                let c = p.mean();
                let mut scaled = p.scaled(epsilon);
                let entry = scaled.harmonics.entry(0).or_insert_with(|| CMatrix::zeros(self.dim, self.dim));
                *entry += c * Complex64::from(1.0 - epsilon);
                potentials.insert(2, scaled);
            } else {
                potentials.insert(nu, p.scaled(epsilon));
            }
        }
        Self { order: self.order, dim: self.dim, potentials }
    }

    /// Coefficients are Hermitian for every `x`.
    pub fn has_hermitian_coefficients(&self) -> bool {
        self.potentials.values().all(|p| p.is_hermitian())
    }

    /// `Σ_ν sup|P_ν|^{1/ν}`, a scale for the exponential growth contributed by the potentials.
    pub(crate) fn growth_scale(&self) -> f64 {
        self.potentials
            .iter()
            .map(|(&nu, p)| p.amplitude().powf(1.0 / nu as f64))
            .sum()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: SpecDocument =
            serde_json::from_str(text).map_err(|e| SpectralError::InvalidSpec(format!("malformed spec document: {e}")))?;
        doc.try_into()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&SpecDocument::from(self)).expect("spec serializes")
    }
}

/// Serialized form: `{"n", "m", "potentials": {"2": [{"q", "re", "im"}]}}`,
/// matrices row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecDocument {
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub potentials: BTreeMap<String, Vec<HarmonicDocument>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarmonicDocument {
    pub q: i32,
    pub re: Vec<Vec<f64>>,
    #[serde(default)]
    pub im: Option<Vec<Vec<f64>>>,
}

impl TryFrom<SpecDocument> for OperatorSpec {
    type Error = SpectralError;

    fn try_from(doc: SpecDocument) -> Result<Self> {
        let mut potentials = BTreeMap::new();
        for (key, entries) in doc.potentials {
            let nu: usize = key
                .trim()
                .parse()
                .map_err(|_| SpectralError::InvalidSpec(format!("potential key {key:?} is not an integer")))?;
            let mut harmonics: BTreeMap<i32, CMatrix> = BTreeMap::new();
            for h in entries {
                let mat = harmonic_matrix(doc.m, &h)?;
                *harmonics.entry(h.q).or_insert_with(|| CMatrix::zeros(doc.m, doc.m)) += mat;
            }
            potentials.insert(nu, FourierMatrixPotential::new(doc.m, harmonics)?);
        }
        OperatorSpec::new(doc.n, doc.m, potentials)
    }
}

fn harmonic_matrix(m: usize, h: &HarmonicDocument) -> Result<CMatrix> {
    let check = |rows: &Vec<Vec<f64>>, part: &str| -> Result<()> {
        if rows.len() != m || rows.iter().any(|r| r.len() != m) {
            return Err(SpectralError::InvalidSpec(format!("harmonic q={} has a malformed {part} matrix", h.q)));
        }
        Ok(())
    };
    check(&h.re, "re")?;
    if let Some(im) = &h.im {
        check(im, "im")?;
    }
    Ok(DMatrix::from_fn(m, m, |i, j| {
        let im = h.im.as_ref().map(|v| v[i][j]).unwrap_or(0.0);
        Complex64::new(h.re[i][j], im)
    }))
}

impl From<&OperatorSpec> for SpecDocument {
    fn from(spec: &OperatorSpec) -> Self {
        let m = spec.dim;
        let potentials = spec
            .potentials
            .iter()
            .map(|(nu, p)| {
                let entries = p
                    .harmonics
                    .iter()
                    .map(|(&q, h)| HarmonicDocument {
                        q,
                        re: (0..m).map(|i| (0..m).map(|j| h[(i, j)].re).collect()).collect(),
                        im: Some((0..m).map(|i| (0..m).map(|j| h[(i, j)].im).collect()).collect()),
                    })
                    .collect();
                (nu.to_string(), entries)
            })
            .collect();
        SpecDocument { n: spec.order, m, potentials }
    }
}

/// Evaluate `P(x) = Σ_q H_q e^{i2πqx}`.
pub fn eval_potential(potential: &FourierMatrixPotential, x: f64) -> CMatrix {
    potential.eval(x)
}

/// The mean matrix `C` with eigenvalues `μ_j` (sorted by (Re, Im)), unit right
/// eigenvectors `v_j` and dual left eigenvectors `v_j*` with `⟨v_j*, v_i⟩ = δ_ij`.
#[derive(Debug, Clone)]
pub struct MeanMatrixData {
    pub c: CMatrix,
    pub eigenvalues: Vec<Complex64>,
    pub right: Vec<Vec<Complex64>>,
    pub left: Vec<Vec<Complex64>>,
}

impl MeanMatrixData {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `min_{i≠j} |μ_i − μ_j|`, or infinity when `m = 1`.
    pub fn min_gap(&self) -> f64 {
        min_gap(&self.eigenvalues)
    }
}

fn min_gap(values: &[Complex64]) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            gap = gap.min((values[i] - values[j]).norm());
        }
    }
    gap
}

pub const DEFAULT_DEGENERACY_REL: f64 = 1e-8;

pub fn mean_matrix(spec: &OperatorSpec) -> Result<MeanMatrixData> {
    mean_matrix_with_threshold(spec, DEFAULT_DEGENERACY_REL)
}

/// As [`mean_matrix`], failing when the eigenvalue gap is below `rel·max|μ|`.
pub fn mean_matrix_with_threshold(spec: &OperatorSpec, rel: f64) -> Result<MeanMatrixData> {
    let m = spec.dim();
    let c = spec.potential(2).map(|p| p.mean()).unwrap_or_else(|| CMatrix::zeros(m, m));
    let mut mu = linalg::eigenvalues(&c);
    mu.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let gap = min_gap(&mu);
    if m > 1 {
        let scale = mu.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let threshold = rel * scale;
        if gap <= threshold {
            return Err(SpectralError::NearDegenerateMeanMatrix { gap, threshold });
        }
    }
    // polish each eigenvalue and take the null vector of C - μI
    let mut right = Vec::with_capacity(m);
    for z in mu.iter() {
        let shifted = &c - CMatrix::identity(m, m) * *z;
        let (mut v, _, _) = linalg::null_vector(&shifted);
        fix_phase(&mut v);
        right.push(v);
    }
    let vmat = CMatrix::from_fn(m, m, |i, j| right[j][i]);
    let dual = vmat
        .clone()
        .try_inverse()
        .ok_or(SpectralError::NearDegenerateMeanMatrix { gap, threshold: 0.0 })?
        .adjoint();
    let left = (0..m).map(|j| dual.column(j).iter().copied().collect()).collect();
    Ok(MeanMatrixData { c, eigenvalues: mu, right, left })
}

/// Scale to unit norm and rotate so the first largest-modulus component is real positive.
pub(crate) fn fix_phase(v: &mut [Complex64]) {
    let norm = linalg::vec_norm(v);
    if norm == 0.0 {
        return;
    }
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    let rot = v[best].conj() / (v[best].norm() * norm);
    for z in v.iter_mut() {
        *z *= rot;
    }
}

/// Diagnostics for the standing assumptions on a spec.
#[derive(Debug, Clone, Serialize)]
pub struct SpecDiagnostics {
    pub order: usize,
    pub dim: usize,
    pub mean_eigenvalues: Vec<(f64, f64)>,
    /// `None` when `m = 1` (gap check skipped).
    pub eigenvalue_gap: Option<f64>,
    pub smoothness: String,
    /// `true` when admissible quasimomenta exclude ε-disks around `πZ` (even `n`).
    pub excludes_pi_multiples: bool,
    pub admissible_rule: String,
    pub hermitian_coefficients: bool,
    pub max_harmonic: u32,
}

pub fn validate_spec(spec: &OperatorSpec) -> SpecDiagnostics {
    let m = spec.dim();
    let c = spec.potential(2).map(|p| p.mean()).unwrap_or_else(|| CMatrix::zeros(m, m));
    let mut mu = linalg::eigenvalues(&c);
    mu.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let even = spec.is_even_order();
    SpecDiagnostics {
        order: spec.order(),
        dim: m,
        mean_eigenvalues: mu.iter().map(|z| (z.re, z.im)).collect(),
        eigenvalue_gap: if m > 1 { Some(min_gap(&mu)) } else { None },
        smoothness: "smooth (finite Fourier series)".into(),
        excludes_pi_multiples: even,
        admissible_rule: if even {
            "t in Q with |t - pi k| > eps for all integers k".into()
        } else {
            "all t in Q".into()
        },
        hermitian_coefficients: spec.has_hermitian_coefficients(),
        max_harmonic: spec.potentials().values().map(|p| p.max_frequency()).max().unwrap_or(0),
    }
}

/// Distance from `t` to the nearest multiple of π.
pub fn distance_to_pi_multiples(t: Complex64) -> f64 {
    let k = (t.re / PI).round();
    (t - Complex64::new(k * PI, 0.0)).norm()
}

/// Whether `t` is an admissible quasimomentum for the asymptotic formulas.
pub fn is_admissible(spec: &OperatorSpec, t: Complex64, eps: f64) -> bool {
    !spec.is_even_order() || distance_to_pi_multiples(t) > eps
}

#[allow(dead_code)]
pub(crate) fn identity(m: usize) -> CMatrix {
    CMatrix::from_fn(m, m, |i, j| if i == j { ONE } else { ZERO })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn diag12_with_harmonic() -> OperatorSpec {
        let mut h = BTreeMap::new();
        h.insert(0, CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), ZERO, ZERO, c(2.0, 0.0)]));
        h.insert(1, CMatrix::from_row_slice(2, 2, &[c(0.3, 0.1), c(-0.7, 0.0), c(0.2, 0.5), c(1.1, 0.0)]));
        let mut p = BTreeMap::new();
        p.insert(2, FourierMatrixPotential::new(2, h).unwrap());
        OperatorSpec::new(2, 2, p).unwrap()
    }

    #[test]
    fn constant_identity_potential_evaluates_to_identity() {
        let p = FourierMatrixPotential::constant(CMatrix::identity(2, 2));
        assert!((p.eval(0.37) - CMatrix::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn evaluation_at_zero_sums_harmonics() {
        let spec = diag12_with_harmonic();
        let p = spec.potential(2).unwrap();
        let expected = &p.harmonics()[&0] + &p.harmonics()[&1];
        assert!((p.eval(0.0) - expected).norm() < 1e-15);
    }

    #[test]
    fn potential_is_periodic() {
        let p = diag12_with_harmonic().potential(2).unwrap().clone();
        assert!((p.eval(0.25) - p.eval(1.25)).norm() < 1e-13);
    }

    #[test]
    fn mean_matrix_ignores_oscillatory_harmonics() {
        let data = mean_matrix(&diag12_with_harmonic()).unwrap();
        assert!((data.c[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((data.eigenvalues[0] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((data.eigenvalues[1] - c(2.0, 0.0)).norm() < 1e-12);
        assert!((data.right[0][0] - ONE).norm() < 1e-12 && data.right[0][1].norm() < 1e-12);
        assert!((data.right[1][1] - ONE).norm() < 1e-12 && data.right[1][0].norm() < 1e-12);
    }

    #[test]
    fn zero_mean_is_degenerate_for_m_two() {
        let spec = OperatorSpec::free(2, 2).unwrap();
        assert!(matches!(mean_matrix(&spec), Err(SpectralError::NearDegenerateMeanMatrix { .. })));
        // m = 1 has a single eigenvalue and no gap to check
        assert!(mean_matrix(&OperatorSpec::free(2, 1).unwrap()).is_ok());
    }

    #[test]
    fn swap_matrix_eigendata() {
        let spec = OperatorSpec::constant(2, CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])).unwrap();
        let data = mean_matrix(&spec).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((data.eigenvalues[0] - c(-1.0, 0.0)).norm() < 1e-12);
        assert!((data.eigenvalues[1] - c(1.0, 0.0)).norm() < 1e-12);
        assert!((data.right[0][0] - c(s, 0.0)).norm() < 1e-12 && (data.right[0][1] - c(-s, 0.0)).norm() < 1e-12);
        assert!((data.right[1][0] - c(s, 0.0)).norm() < 1e-12 && (data.right[1][1] - c(s, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn dual_eigenvectors_are_biorthonormal() {
        let c_mat = CMatrix::from_row_slice(3, 3, &[c(1.0, 0.0), c(0.5, 0.2), ZERO, ZERO, c(2.0, 1.0), c(0.3, 0.0), c(0.1, 0.0), ZERO, c(-1.0, 0.0)]);
        let spec = OperatorSpec::constant(2, c_mat.clone()).unwrap();
        let data = mean_matrix(&spec).unwrap();
        for i in 0..3 {
            let v = nalgebra::DVector::from_vec(data.right[i].clone());
            let cv = &c_mat * &v;
            assert!((cv - &v * data.eigenvalues[i]).norm() < 1e-10);
            assert!((linalg::vec_norm(&data.right[i]) - 1.0).abs() < 1e-12);
            let w = nalgebra::DVector::from_vec(data.left[i].clone());
            assert!((c_mat.adjoint() * &w - &w * data.eigenvalues[i].conj()).norm() < 1e-10);
            for j in 0..3 {
                let p = linalg::inner(&data.left[i], &data.right[j]);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((p - c(expected, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn mean_equals_grid_average_of_potential() {
        let spec = diag12_with_harmonic();
        let p = spec.potential(2).unwrap();
        let npts = 2 * p.max_frequency() as usize + 1;
        let mut avg = CMatrix::zeros(2, 2);
        for i in 0..npts {
            avg += p.eval(i as f64 / npts as f64);
        }
        avg /= Complex64::from(npts as f64);
        assert!((avg - mean_matrix(&spec).unwrap().c).norm() < 1e-12);
    }

    #[test]
    fn admissibility_depends_on_parity() {
        let odd = OperatorSpec::free(3, 1).unwrap();
        let even = OperatorSpec::free(2, 1).unwrap();
        assert!(validate_spec(&odd).admissible_rule.contains("all t"));
        assert!(!validate_spec(&odd).excludes_pi_multiples);
        assert!(validate_spec(&even).excludes_pi_multiples);
        assert!(is_admissible(&odd, c(PI, 0.0), 0.1));
        assert!(!is_admissible(&even, c(PI + 0.05, 0.0), 0.1));
        assert!(is_admissible(&even, c(1.0, 0.0), 0.1));
        assert!(validate_spec(&even).eigenvalue_gap.is_none());
    }

    #[test]
    fn json_round_trip_and_errors() {
        let text = r#"{"n": 2, "m": 1, "potentials": {"2": [{"q": 1, "re": [[1.0]], "im": [[0.0]]}, {"q": -1, "re": [[1.0]]}]}}"#;
        let spec = OperatorSpec::from_json_str(text).unwrap();
        assert_eq!(spec.order(), 2);
        let back = OperatorSpec::from_json_str(&spec.to_json_string()).unwrap();
        assert_eq!(spec, back);
        assert!((spec.potential(2).unwrap().eval(0.0)[(0, 0)] - c(2.0, 0.0)).norm() < 1e-14);
        assert!(OperatorSpec::from_json_str("{\"n\": 2").is_err());
        assert!(OperatorSpec::from_json_str(r#"{"n": 2, "m": 2, "potentials": {"2": [{"q": 0, "re": [[1.0]]}]}}"#).is_err());
        assert!(OperatorSpec::from_json_str(r#"{"n": 1, "m": 1}"#).is_err());
    }

    #[test]
    fn homotopy_endpoints() {
        let spec = diag12_with_harmonic();
        let start = spec.homotopy(0.0);
        assert!((start.potential(2).unwrap().eval(0.3) - mean_matrix(&spec).unwrap().c).norm() < 1e-14);
        let end = spec.homotopy(1.0);
        assert!((end.potential(2).unwrap().eval(0.3) - spec.potential(2).unwrap().eval(0.3)).norm() < 1e-14);
    }
}
