//! Closed-form reference eigenpairs of the constant-coefficient problem and
//! decay-rate diagnostics for the computed eigenpairs.

use num_complex::Complex64;
use serde::Serialize;

use crate::eigen::{free_root, mu_kj, Band};
use crate::error::{Result, SpectralError};
use crate::operator::{mean_matrix, OperatorSpec};

/// `‖e^{itx}‖ = (∫₀¹ e^{−2 Im(t) x} dx)^{1/2}`.
pub fn exp_norm(t: Complex64) -> f64 {
    let b = t.im;
    if b.abs() < 1e-8 {
        // series of (1 − e^{−2b})/(2b)
        (1.0 - b + 2.0 * b * b / 3.0).sqrt()
    } else {
        ((1.0 - (-2.0 * b).exp()) / (2.0 * b)).sqrt()
    }
}

/// Leading (`order = 0`: `(2πki + ti)^n`) or first-order (`μ_{k,j}(t)`) asymptotic eigenvalue.
pub fn reference_eigenvalue(spec: &OperatorSpec, k: i64, j: usize, t: Complex64, order: u8) -> Result<Complex64> {
    match order {
        0 => Ok(free_root(k, t).powu(spec.order() as u32)),
        1 => {
            let data = mean_matrix(spec)?;
            let mu = branch(&data.eigenvalues, j)?;
            Ok(mu_kj(spec.order(), mu, k, t))
        }
        _ => Err(SpectralError::InvalidParameters(format!("reference order {order} is not 0 or 1"))),
    }
}

fn branch<T: Copy>(items: &[T], j: usize) -> Result<T> {
    if j == 0 || j > items.len() {
        return Err(SpectralError::InvalidParameters(format!("branch index j = {j} outside 1..={}", items.len())));
    }
    Ok(items[j - 1])
}

/// `v_j e^{i(2πk+t)x}/‖e^{itx}‖`, or with `adjoint` the function
/// `v_j* ‖e^{itx}‖ e^{i(2πk+t̄)x}`, sampled on `x_grid`.
pub fn reference_eigenfunction(
    spec: &OperatorSpec,
    k: i64,
    j: usize,
    t: Complex64,
    x_grid: &[f64],
    adjoint: bool,
) -> Result<Vec<Vec<Complex64>>> {
    let data = mean_matrix(spec)?;
    branch(&data.eigenvalues, j)?;
    let norm = exp_norm(t);
    let (v, w, scale) = if adjoint {
        (&data.left[j - 1], free_root(k, t.conj()), norm)
    } else {
        (&data.right[j - 1], free_root(k, t), 1.0 / norm)
    };
    Ok(x_grid.iter().map(|&x| v.iter().map(|c| c * (w * x).exp() * scale).collect()).collect())
}

/// Residuals of one computed eigenpair against its reference.
#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub k: i64,
    pub j: usize,
    pub t: Complex64,
    pub e_lambda: f64,
    pub e_psi: f64,
    pub e_x: f64,
    /// `e_λ |k|^{3−n} / ln|k|`.
    pub n_lambda: f64,
    /// `e_Ψ |k| / ln|k|`.
    pub n_psi: f64,
    /// `e_X |k| / ln|k|`.
    pub n_x: f64,
}

/// Summary of one normalized residual column.
#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub max: f64,
    pub median: f64,
    /// Least-squares slope of `log e` against `log|k|`; `None` when every
    /// residual is at the solver noise floor.
    pub slope: Option<f64>,
    /// `max ≤ 3·median`, or all residuals at the noise floor.
    pub bounded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub order: usize,
    pub rows: Vec<DecayRow>,
    pub lambda: RateSummary,
    pub psi: RateSummary,
    pub x: RateSummary,
}

/// Slack added to the theoretical exponent `n − 3` of `e_λ`.
pub const SLOPE_SLACK: f64 = 0.3;

impl DecayReport {
    pub fn lambda_slope_ok(&self) -> bool {
        self.lambda.slope.is_none_or(|s| s <= self.order as f64 - 3.0 + SLOPE_SLACK)
    }

    pub fn passes(&self) -> bool {
        self.lambda.bounded && self.psi.bounded && self.x.bounded && self.lambda_slope_ok()
    }
}

/// Sup-norm distance after rotating `num` by the unimodular factor that best aligns it with `reference`.
fn aligned_sup(num: &[Vec<Complex64>], reference: &[Vec<Complex64>], phase: Complex64) -> f64 {
    num.iter()
        .zip(reference)
        .flat_map(|(a, b)| a.iter().zip(b).map(move |(x, y)| (x * phase - y).norm()))
        .fold(0.0, f64::max)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn summarize(rows: &[DecayRow], raw: impl Fn(&DecayRow) -> f64, normalized: impl Fn(&DecayRow) -> f64, floor: impl Fn(&DecayRow) -> f64) -> RateSummary {
    let norm: Vec<f64> = rows.iter().map(&normalized).collect();
    let max = norm.iter().copied().fold(0.0, f64::max);
    let med = median(&norm);
    let above: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| raw(r) > floor(r))
        .map(|r| ((r.k.unsigned_abs() as f64).ln(), raw(r).ln()))
        .collect();
    if above.is_empty() {
        return RateSummary { max, median: med, slope: None, bounded: true };
    }
    RateSummary { max, median: med, slope: least_squares_slope(&above), bounded: max <= 3.0 * med }
}

/// Decay table for labelled band records against the first-order references.
/// Eigenfunction errors are sup norms over the records' x-grid after a common
/// phase alignment of `Ψ` and `X` (the pair is determined up to `Ψ → cΨ, X → cX`, `|c| = 1`).
pub fn residual_report(bands: &[Band], spec: &OperatorSpec) -> Result<DecayReport> {
    let data = mean_matrix(spec)?;
    let n = spec.order();
    let mut rows = Vec::new();
    for band in bands {
        let (Some(k), Some(j)) = (band.k, band.j) else { continue };
        for rec in &band.records {
            let t = rec.t;
            let mu = mu_kj(n, data.eigenvalues[j - 1], k, t);
            let psi_ref = reference_eigenfunction(spec, k, j, t, &rec.x, false)?;
            let x_ref = reference_eigenfunction(spec, k, j, t, &rec.x, true)?;
            let overlap = crate::eigen::inner_product(&psi_ref, &rec.psi);
            let phase = if overlap.norm() > 0.0 { overlap / overlap.norm() } else { Complex64::new(1.0, 0.0) };
            let ka = k.unsigned_abs() as f64;
            // Same floor as the disk radius, so |k| = 1 stays finite.
            let log_k = ka.ln().max(1.0);
            let e_lambda = (rec.lambda - mu).norm();
            let e_psi = aligned_sup(&rec.psi, &psi_ref, phase);
            let e_x = aligned_sup(&rec.x_adj, &x_ref, phase);
            rows.push(DecayRow {
                k,
                j,
                t,
                e_lambda,
                e_psi,
                e_x,
                n_lambda: e_lambda * ka.powi(3 - n as i32) / log_k,
                n_psi: e_psi * ka / log_k,
                n_x: e_x * ka / log_k,
            });
        }
    }
    let distinct: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.k.unsigned_abs()).collect();
    if distinct.len() < 5 {
        return Err(SpectralError::InsufficientRange(distinct.len()));
    }
    rows.sort_by(|a, b| a.k.unsigned_abs().cmp(&b.k.unsigned_abs()).then(a.k.cmp(&b.k)).then(a.j.cmp(&b.j)));
    // residuals below these floors are integration noise, not asymptotic error
    let lambda = summarize(&rows, |r| r.e_lambda, |r| r.n_lambda, |r| 1e-9 * (1.0 + mu_kj(n, data.eigenvalues[r.j - 1], r.k, r.t).norm()));
    let psi = summarize(&rows, |r| r.e_psi, |r| r.n_psi, |_| 1e-7);
    let x = summarize(&rows, |r| r.e_x, |r| r.n_x, |_| 1e-7);
    Ok(DecayReport { order: n, rows, lambda, psi, x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::{periodic_inner, track_bands, EigenSettings};
    use crate::linalg::{CMatrix, ZERO};
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn reference_values() {
        let free = OperatorSpec::free(2, 1).unwrap();
        let l = reference_eigenvalue(&free, 3, 1, c(1.0, 0.0), 0).unwrap();
        assert!((l - c(-(6.0 * PI + 1.0).powi(2), 0.0)).norm() < 1e-9);
        assert!((l.re + 394.007).abs() < 5e-3);
        let cubic = OperatorSpec::free(3, 1).unwrap();
        let l = reference_eigenvalue(&cubic, -2, 1, c(0.7, 0.0), 0).unwrap();
        assert!((l - (I3 * (-4.0 * PI + 0.7)).powu(3)).norm() < 1e-9);
        let spec = OperatorSpec::constant(3, CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), ZERO, ZERO, c(2.0, 0.0)])).unwrap();
        let t = c(0.4, 0.2);
        let d = reference_eigenvalue(&spec, 4, 2, t, 1).unwrap() - reference_eigenvalue(&spec, 4, 2, t, 0).unwrap();
        assert!((d - c(2.0, 0.0) * free_root(4, t)).norm() < 1e-9);
        assert!(reference_eigenvalue(&spec, 4, 2, t, 2).is_err());
    }

    const I3: Complex64 = Complex64 { re: 0.0, im: 1.0 };

    #[test]
    fn exp_norm_closed_form() {
        assert!((exp_norm(c(0.3, 1.0)).powi(2) - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-14);
        assert!((exp_norm(c(0.3, 0.0)) - 1.0).abs() < 1e-15);
        assert!((exp_norm(c(0.0, 1e-10)) - exp_norm(c(0.0, 2e-8))).abs() < 1e-7);
    }

    #[test]
    fn references_are_biorthonormal() {
        let spec = OperatorSpec::constant(2, CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.5, 0.0), ZERO, c(2.0, 0.0)])).unwrap();
        let grid: Vec<f64> = (0..=2048).map(|i| i as f64 / 2048.0).collect();
        let t = c(1.1, 0.4);
        for (k, j) in [(2, 1), (2, 2), (-1, 1)] {
            let psi = reference_eigenfunction(&spec, k, j, t, &grid, false).unwrap();
            assert!((crate::eigen::inner_product(&psi, &psi).re - 1.0).abs() < 1e-10);
            for (kk, jj) in [(2, 1), (2, 2), (-1, 1), (3, 1)] {
                let x = reference_eigenfunction(&spec, kk, jj, t, &grid, true).unwrap();
                let g = periodic_inner(&psi, &x);
                let expected = if (k, j) == (kk, jj) { 1.0 } else { 0.0 };
                assert!((g - expected).norm() < 1e-10, "{k} {j} {kk} {jj} {g}");
            }
        }
        let free = OperatorSpec::free(2, 1).unwrap();
        let psi = reference_eigenfunction(&free, 3, 1, c(0.8, 0.0), &grid, false).unwrap();
        assert!(psi.iter().all(|v| (v[0].norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_potential_has_zero_residuals() {
        let spec = OperatorSpec::constant(2, CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), ZERO, ZERO, c(2.0, 0.0)])).unwrap();
        let bands = track_bands(&spec, &[c(1.0, 0.0)], 4..=9, &EigenSettings::default()).unwrap();
        let report = residual_report(&bands.bands, &spec).unwrap();
        assert!(report.rows.iter().all(|r| r.e_lambda <= 1e-8 * r.k.pow(2) as f64 * 40.0 && r.e_psi < 1e-7));
        assert!(report.passes());
    }

    #[test]
    fn too_few_k_is_insufficient() {
        let free = OperatorSpec::free(2, 1).unwrap();
        let bands = track_bands(&free, &[c(1.0, 0.0)], 3..=5, &EigenSettings::default()).unwrap();
        assert!(matches!(residual_report(&bands.bands, &free), Err(SpectralError::InsufficientRange(3))));
    }
}
