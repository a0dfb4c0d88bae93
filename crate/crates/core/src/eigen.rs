//! Eigenvalues `λ_{k,j}(t)` of the quasiperiodic problem, their eigenfunctions
//! and biorthogonal adjoint eigenfunctions, and band tracking over t-grids.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::characteristic::{self, cyclic_matrix, delta_poly_from_flow, evaluate_flow};
use crate::error::{Result, SpectralError};
use crate::linalg::{self, CMatrix, I, ZERO};
use crate::ode::{self, OdeTolerances, SegmentedFlow};
use crate::operator::{self, distance_to_pi_multiples, mean_matrix, MeanMatrixData, OperatorSpec};

/// Numerical settings shared by the eigen pipeline.
#[derive(Debug, Clone, Copy)]
pub struct EigenSettings {
    pub ode: OdeTolerances,
    /// Newton stops once `|Δ| ≤ newton_tol · max_s |c_s|`.
    pub newton_tol: f64,
    pub max_iterations: usize,
    /// Eigenfunctions are sampled at `x_i = i / x_intervals`, `i = 0..=x_intervals` (even).
    pub x_intervals: usize,
    pub strip_offset: f64,
    /// Radius of the excluded disks around `πZ` for even order.
    pub admissibility_eps: f64,
}

impl Default for EigenSettings {
    fn default() -> Self {
        Self {
            ode: OdeTolerances::default(),
            newton_tol: 1e-10,
            max_iterations: 50,
            x_intervals: 256,
            strip_offset: characteristic::DEFAULT_STRIP_OFFSET,
            admissibility_eps: 0.1,
        }
    }
}

impl EigenSettings {
    pub fn x_grid(&self) -> Vec<f64> {
        uniform_grid(self.x_intervals)
    }
}

pub(crate) fn uniform_grid(intervals: usize) -> Vec<f64> {
    (0..=intervals).map(|i| i as f64 / intervals as f64).collect()
}

/// `i(2πk + t)`, the exponent of the free eigenfunction.
pub fn free_root(k: i64, t: Complex64) -> Complex64 {
    I * (2.0 * PI * k as f64 + t)
}

/// `μ_{k,j}(t) = (2πki + ti)^n + μ_j (2πki + ti)^{n−2}`.
pub fn mu_kj(order: usize, mu_j: Complex64, k: i64, t: Complex64) -> Complex64 {
    let w = free_root(k, t);
    w.powu(order as u32) + mu_j * w.powu(order as u32 - 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Seed {
    pub k: i64,
    /// 1-based branch index.
    pub j: usize,
    pub mu: Complex64,
}

fn check_admissible(spec: &OperatorSpec, t: Complex64, eps: f64) -> Result<()> {
    if !operator::is_admissible(spec, t, eps) {
        return Err(SpectralError::InadmissibleQuasimomentum { t, eps });
    }
    Ok(())
}

/// Asymptotic seeds `μ_{k,j}(t)` for `k` in `ks` and all `j`.
pub fn seed_guesses(
    spec: &OperatorSpec,
    t: Complex64,
    ks: impl IntoIterator<Item = i64>,
    eps: f64,
) -> Result<Vec<Seed>> {
    check_admissible(spec, t, eps)?;
    let data = mean_matrix(spec)?;
    Ok(seeds_from(&data, spec.order(), t, ks))
}

fn seeds_from(data: &MeanMatrixData, order: usize, t: Complex64, ks: impl IntoIterator<Item = i64>) -> Vec<Seed> {
    let mut out = Vec::new();
    for k in ks {
        for (j, &mu) in data.eigenvalues.iter().enumerate() {
            out.push(Seed { k, j: j + 1, mu: mu_kj(order, mu, k, t) });
        }
    }
    out
}

/// A converged root of `Δ(·, t)` with the data computed at it.
#[derive(Debug, Clone)]
pub(crate) struct Refined {
    pub lambda: Complex64,
    #[cfg_attr(not(test), allow(dead_code))]
    pub iterations: usize,
    pub flow: SegmentedFlow,
}

struct Probe {
    lambda: Complex64,
    flow: SegmentedFlow,
    value: Complex64,
    d_lambda: Complex64,
    #[cfg_attr(not(test), allow(dead_code))]
    d_t: Complex64,
    scale: f64,
}

fn probe(spec: &OperatorSpec, lambda: Complex64, z: Complex64, tol: &OdeTolerances) -> Result<Probe> {
    let flow = ode::segmented_flow(spec, lambda, true, tol)?;
    let v = evaluate_flow(&flow, z);
    let scale = delta_poly_from_flow(&flow).max_coeff();
    Ok(Probe { lambda, value: v.value, d_lambda: v.d_lambda.expect("derivative flow"), d_t: I * z * v.d_z, scale, flow })
}

fn finish(p: Probe, iterations: usize) -> Refined {
    Refined { lambda: p.lambda, iterations, flow: p.flow }
}

/// Newton iteration on `Δ(·, t)` from `λ0`.
pub fn refine_eigenvalue(spec: &OperatorSpec, t: Complex64, lambda0: Complex64, settings: &EigenSettings) -> Result<Complex64> {
    refine(spec, t, lambda0, settings).map(|r| r.lambda)
}

pub(crate) fn refine(spec: &OperatorSpec, t: Complex64, lambda0: Complex64, settings: &EigenSettings) -> Result<Refined> {
    let z = (I * t).exp();
    let tol = &settings.ode;
    let mut cur = probe(spec, lambda0, z, tol)?;
    for iter in 0..settings.max_iterations {
        let res = cur.value.norm();
        if res <= settings.newton_tol * cur.scale {
            return Ok(finish(cur, iter));
        }
        let d = cur.d_lambda;
        if !(d.norm() > 0.0) || !d.re.is_finite() || !d.im.is_finite() {
            return muller(spec, z, cur, iter, settings);
        }
        let step = cur.value / d;
        // once the update is negligible the residual sits at the integration noise floor
        if step.norm() <= 1e-12 * (1.0 + cur.lambda.norm()) && res <= 1e-7 * cur.scale {
            return Ok(finish(cur, iter));
        }
        let mut best: Option<Probe> = None;
        let mut alpha = 1.0;
        for _ in 0..8 {
            let cand = probe(spec, cur.lambda - step * alpha, z, tol)?;
            let improved = cand.value.norm() < res;
            if best.as_ref().is_none_or(|b| cand.value.norm() < b.value.norm()) {
                best = Some(cand);
            }
            if improved {
                break;
            }
            alpha *= 0.5;
        }
        cur = best.expect("at least one candidate");
    }
    if cur.value.norm() <= settings.newton_tol * cur.scale {
        return Ok(finish(cur, settings.max_iterations));
    }
    Err(SpectralError::NoConvergence { last: cur.lambda, residual: cur.value.norm() })
}

/// Muller's three-point iteration, used when `∂Δ/∂λ` vanishes numerically.
fn muller(spec: &OperatorSpec, z: Complex64, start: Probe, used: usize, settings: &EigenSettings) -> Result<Refined> {
    let tol = &settings.ode;
    let h = 1e-3 * (1.0 + start.lambda.norm());
    let mut p0 = probe(spec, start.lambda - h, z, tol)?;
    let mut p1 = probe(spec, start.lambda + h, z, tol)?;
    let mut p2 = start;
    for iter in used..settings.max_iterations {
        if p2.value.norm() <= settings.newton_tol * p2.scale {
            return Ok(finish(p2, iter));
        }
        let (x0, x1, x2) = (p0.lambda, p1.lambda, p2.lambda);
        let (f0, f1, f2) = (p0.value, p1.value, p2.value);
        let d1 = (f1 - f0) / (x1 - x0);
        let d2 = (f2 - f1) / (x2 - x1);
        let a = (d2 - d1) / (x2 - x0);
        let b = d2 + a * (x2 - x1);
        let disc = (b * b - 4.0 * a * f2).sqrt();
        let den = if (b + disc).norm() >= (b - disc).norm() { b + disc } else { b - disc };
        if den.norm() == 0.0 {
            break;
        }
        let next = x2 - 2.0 * f2 / den;
        p0 = p1;
        p1 = p2;
        p2 = probe(spec, next, z, tol)?;
        if (next - x2).norm() <= 1e-12 * (1.0 + next.norm()) && p2.value.norm() <= 1e-7 * p2.scale {
            return Ok(finish(p2, iter + 1));
        }
    }
    Err(SpectralError::NoConvergence { last: p2.lambda, residual: p2.value.norm() })
}

/// Disk radii `c₁|k|^{n−3} ln|k|` valid from `|k| ≥ n0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiskCalibration {
    pub n0: i64,
    pub c1: f64,
    pub order: usize,
}

impl DiskCalibration {
    /// `c₁|k|^{n−3} ln|k|`, with `ln|k|` floored at 1 so the radius stays positive at `|k| ≤ 2`.
    pub fn radius(&self, k: i64) -> f64 {
        let ka = (k.unsigned_abs() as f64).max(1.0);
        self.c1 * ka.powi(self.order as i32 - 3) * ka.ln().max(1.0)
    }

    /// [`radius`](Self::radius) floored at the rounding level of `|center|`, so
    /// a disk never shrinks below what a converged eigenvalue can resolve.
    pub fn radius_at(&self, k: i64, center: Complex64) -> f64 {
        self.radius(k).max(DISK_NOISE * (1.0 + center.norm()))
    }
}

/// Relative size of eigenvalue rounding noise.
const DISK_NOISE: f64 = 1e-9;

/// Half the distance from `μ_{k,j}(t)` to the nearest other seed; a jump larger
/// than this lands in another eigenvalue's neighbourhood.
fn separation_radius(data: &MeanMatrixData, order: usize, k: i64, j: usize, t: Complex64) -> f64 {
    let target = mu_kj(order, data.eigenvalues[j - 1], k, t);
    let mut best = f64::INFINITY;
    for kk in [k - 1, k, k + 1, -k - 1, -k, -k + 1] {
        for (jj, &mu) in data.eigenvalues.iter().enumerate() {
            if kk == k && jj + 1 == j {
                continue;
            }
            best = best.min((mu_kj(order, mu, kk, t) - target).norm());
        }
    }
    0.5 * best
}

pub const DEFAULT_HOMOTOPY_STEPS: usize = 8;

/// Follow `λ_{k,j}` from `L_t(C)` (where it equals `μ_{k,j}(t)`) to `L_t` along
/// `P₂ → C + ε(P₂ − C)`, `P_ν → εP_ν`, over `ε ∈ {0, 2^{1−steps}, ..., 1/2, 1}`.
pub fn homotopy_continuation(
    spec: &OperatorSpec,
    t: Complex64,
    k: i64,
    j: usize,
    steps: usize,
    settings: &EigenSettings,
    calibration: Option<&DiskCalibration>,
) -> Result<Complex64> {
    let data = mean_matrix(spec)?;
    if j == 0 || j > data.dim() {
        return Err(SpectralError::InvalidParameters(format!("branch index j = {j} outside 1..={}", data.dim())));
    }
    let order = spec.order();
    let center = mu_kj(order, data.eigenvalues[j - 1], k, t);
    let allowed = match calibration {
        Some(cal) if k.abs() >= cal.n0 => cal.radius_at(k, center),
        _ => separation_radius(&data, order, k, j, t),
    };
    let mut ladder = vec![0.0];
    ladder.extend((0..steps).map(|i| 0.5f64.powi((steps - 1 - i) as i32)));
    let mut lambda = center;
    for &eps in &ladder {
        let family = spec.homotopy(eps);
        let next = refine(&family, t, lambda, settings)?.lambda;
        let jump = (next - lambda).norm();
        if jump > allowed || (calibration.is_some() && (next - center).norm() > allowed) {
            return Err(SpectralError::PathJump { epsilon: eps, jump, allowed });
        }
        lambda = next;
    }
    Ok(lambda)
}

/// Calibrate `N₀` and `c₁` at quasimomentum `t`: `c₁ = 2·max e·|k|^{3−n}/ln|k|`
/// over probe indices `4 ≤ |k| ≤ 8` (e = distance of the homotopy eigenvalue
/// from its seed), and `N₀` the smallest `|k| ≥ 1` from which all disks up to
/// `|k| = 60` are pairwise disjoint and every eigenvalue below the probes lies
/// inside its disk.
pub fn calibrate_disks(spec: &OperatorSpec, t: Complex64, settings: &EigenSettings) -> Result<DiskCalibration> {
    let data = mean_matrix(spec)?;
    let order = spec.order();
    let mut c1: f64 = 0.0;
    for ka in 4..=8i64 {
        for k in [ka, -ka] {
            for j in 1..=data.dim() {
                let lambda = homotopy_continuation(spec, t, k, j, DEFAULT_HOMOTOPY_STEPS, settings, None)?;
                let e = (lambda - mu_kj(order, data.eigenvalues[j - 1], k, t)).norm();
                let kf = ka as f64;
                c1 = c1.max(2.0 * e * kf.powi(3 - order as i32) / kf.ln().max(1.0));
            }
        }
    }
    // a floor keeps the disks from collapsing for exactly solvable cases
    c1 = c1.max(1e-6);
    let mut cal = DiskCalibration { n0: 1, c1, order };
    const K_CHECK: i64 = 60;
    let centers: Vec<(i64, Complex64)> = (-K_CHECK..=K_CHECK)
        .flat_map(|k| data.eigenvalues.iter().map(move |&mu| (k, mu_kj(order, mu, k, t))))
        .collect();
    'outer: for n0 in 1..K_CHECK {
        cal.n0 = n0;
        let active: Vec<&(i64, Complex64)> = centers.iter().filter(|(k, _)| k.abs() >= n0).collect();
        for (a, pa) in active.iter().enumerate() {
            for pb in &active[a + 1..] {
                if (pa.1 - pb.1).norm() <= cal.radius(pa.0) + cal.radius(pb.0) {
                    continue 'outer;
                }
            }
        }
        break;
    }
    // below the probes the asymptotic radius may not yet contain the eigenvalue
    for ka in (1..4i64).rev() {
        if ka < cal.n0 {
            break;
        }
        let outside = [ka, -ka].into_iter().any(|k| {
            (1..=data.dim()).any(|j| {
                let center = mu_kj(order, data.eigenvalues[j - 1], k, t);
                homotopy_continuation(spec, t, k, j, DEFAULT_HOMOTOPY_STEPS, settings, None)
                    .map_or(true, |l| (l - center).norm() > cal.radius_at(k, center))
            })
        });
        if outside {
            cal.n0 = ka + 1;
            break;
        }
    }
    Ok(cal)
}

/// Sampled eigenfunction on `x_i = i/N`.
#[derive(Debug, Clone, Serialize)]
pub struct SampledEigenfunction {
    pub x: Vec<f64>,
    /// `Ψ(x_i)` as m-vectors.
    pub values: Vec<Vec<Complex64>>,
    /// Full jets `(Ψ, Ψ', ..., Ψ^(n-1))(x_i)`.
    pub jets: Vec<Vec<Complex64>>,
}

/// One eigenvalue with its eigenfunction, biorthogonal function and pairing.
#[derive(Debug, Clone, Serialize)]
pub struct EigenRecord {
    pub k: Option<i64>,
    pub j: Option<usize>,
    pub t: Complex64,
    pub lambda: Complex64,
    pub x: Vec<f64>,
    /// Unit-norm eigenfunction samples.
    pub psi: Vec<Vec<Complex64>>,
    pub psi_jets: Vec<Vec<Complex64>>,
    /// Biorthogonal function `X = Ψ*/α` with `(Ψ, X) = 1`.
    pub x_adj: Vec<Vec<Complex64>>,
    /// `α = (Ψ, Ψ*)` with `Ψ*` the unit-norm adjoint eigenfunction, made real and nonnegative.
    pub alpha: Complex64,
    pub delta_residual: f64,
    pub delta_scale: f64,
    pub simple: bool,
}

impl EigenRecord {
    /// `1/|α|`, the norm of the spectral projection `f ↦ (f, X)Ψ`.
    pub fn projection_norm(&self) -> f64 {
        1.0 / self.alpha.norm()
    }
}

/// Composite Simpson weights on a uniform grid with an even number of intervals.
pub(crate) fn simpson_weights(intervals: usize) -> Vec<f64> {
    assert!(intervals.is_multiple_of(2), "Simpson rule needs an even number of intervals");
    let h = 1.0 / intervals as f64;
    (0..=intervals)
        .map(|i| {
            let w = if i == 0 || i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}

/// `‖f‖²_{L²(0,1)}` of samples on the uniform grid.
pub(crate) fn norm_sq(values: &[Vec<Complex64>]) -> f64 {
    let w = simpson_weights(values.len() - 1);
    values.iter().zip(&w).map(|(v, w)| w * v.iter().map(|c| c.norm_sqr()).sum::<f64>()).sum()
}

/// `(f, g) = ∫₀¹ Σ f_i conj(g_i)` by the trapezoid rule, which is spectrally
/// accurate when `f·conj(g)` is 1-periodic (e.g. `f` a quasiperiodic function
/// with multiplier `e^{it}` and `g` one with multiplier `e^{it̄}`).
pub fn periodic_inner(f: &[Vec<Complex64>], g: &[Vec<Complex64>]) -> Complex64 {
    let n = f.len() - 1;
    let mut acc = ZERO;
    for i in 0..n {
        acc += linalg::inner(&f[i], &g[i]);
    }
    acc / n as f64
}

/// General `(f, g)` by Simpson's rule.
pub fn inner_product(f: &[Vec<Complex64>], g: &[Vec<Complex64>]) -> Complex64 {
    let w = simpson_weights(f.len() - 1);
    f.iter().zip(g).zip(&w).map(|((a, b), w)| linalg::inner(a, b) * *w).sum()
}

/// Largest-modulus entry (first on ties) of `v`.
fn dominant_index(v: &[Complex64]) -> usize {
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    best
}

struct NullData {
    /// Balanced null vectors of `B(z)`: right `u` and left `w`.
    u: Vec<Complex64>,
    w: Vec<Complex64>,
    y_starts: Vec<Vec<Complex64>>,
    z_starts: Vec<Vec<Complex64>>,
    sigma_min: f64,
    sigma_next: f64,
}

fn null_data(flow: &SegmentedFlow, z: Complex64) -> NullData {
    let nm = flow.transfers[0].nrows();
    let segs = flow.segments();
    let b = cyclic_matrix(flow, z);
    let svd = linalg::svd_sorted(&b);
    let last = svd.sigma.len() - 1;
    let u: Vec<Complex64> = svd.v.column(last).iter().copied().collect();
    let w: Vec<Complex64> = svd.u.column(last).iter().copied().collect();
    let mut y_starts = Vec::with_capacity(segs);
    let mut z_starts = Vec::with_capacity(segs);
    for s in 0..segs {
        let mut ys = u[s * nm..(s + 1) * nm].to_vec();
        flow.unbalance(&mut ys);
        y_starts.push(ys);
        let mut ws = w[s * nm..(s + 1) * nm].to_vec();
        flow.unbalance_left(&mut ws);
        if s == 0 {
            let f = -z.conj();
            ws.iter_mut().for_each(|c| *c *= f);
        }
        z_starts.push(ws);
    }
    let sigma_next = if last >= 1 { svd.sigma[last - 1] } else { f64::INFINITY };
    NullData { u, w, y_starts, z_starts, sigma_min: svd.sigma[last], sigma_next }
}

fn ensure_even_grid(settings: &EigenSettings) -> Result<()> {
    if settings.x_intervals < 2 || !settings.x_intervals.is_multiple_of(2) {
        return Err(SpectralError::InvalidParameters(format!(
            "x_intervals = {} must be even and at least 2",
            settings.x_intervals
        )));
    }
    Ok(())
}

/// Solution pair at one `(λ, t)`: the solution `y` started from the right
/// null vector of `B`, the adjoint solution `ζ` started from the left null
/// vector, both sampled on the x-grid, and the two-sided Newton data.
///
/// With `u`, `w` the null vectors, `wᴴ ∂B/∂λ u = −∫₀¹ ⟨y₀, ζ_{n−1}⟩ dx`
/// (variation of constants on each segment), so the correction
/// `−wᴴBu / wᴴB'u` and the band slope `dλ/dt = i z w₀ᴴu₀ / wᴴB'u` come from
/// the samples without integrating the variational system.
#[derive(Clone)]
pub(crate) struct PairPoint {
    pub t: Complex64,
    pub lambda: Complex64,
    pub correction: Complex64,
    pub slope: Complex64,
    pub residual: f64,
    pub scale: f64,
    sigma_min: f64,
    sigma_next: f64,
    y0: Vec<Complex64>,
    ys: Vec<Vec<Complex64>>,
    zs: Vec<Vec<Complex64>>,
}

pub(crate) fn pair_point(spec: &OperatorSpec, t: Complex64, flow: &SegmentedFlow, settings: &EigenSettings) -> Result<PairPoint> {
    ensure_even_grid(settings)?;
    let lambda = flow.lambda;
    let z = (I * t).exp();
    let nd = null_data(flow, z);
    let m = spec.dim();
    let nm = spec.system_size();
    let grid = settings.x_grid();
    let (ys, zs) = ode::sample_pair(spec, lambda, &flow.breaks, &nd.y_starts, &nd.z_starts, &grid, &settings.ode)?;
    let w_simpson = simpson_weights(settings.x_intervals);
    let q: Complex64 = -ys
        .iter()
        .zip(&zs)
        .zip(&w_simpson)
        .map(|((y, zeta), wt)| linalg::inner(&y[..m], &zeta[nm - m..]) * *wt)
        .sum::<Complex64>();
    let b = cyclic_matrix(flow, z);
    let bu = &b * nalgebra::DVector::from_column_slice(&nd.u);
    let f = linalg::inner(bu.as_slice(), &nd.w);
    // w₀ᴴu₀ over the first segment block; the balancing factors cancel
    let w0u0 = linalg::inner(&nd.u[..nm], &nd.w[..nm]);
    let (correction, slope) = if q.norm() > 0.0 { (-f / q, I * z * w0u0 / q) } else { (ZERO, ZERO) };
    Ok(PairPoint {
        t,
        lambda,
        correction,
        slope,
        residual: evaluate_flow(flow, z).value.norm(),
        scale: delta_poly_from_flow(flow).max_coeff(),
        sigma_min: nd.sigma_min,
        sigma_next: nd.sigma_next,
        y0: nd.y_starts[0][..m].to_vec(),
        ys,
        zs,
    })
}

/// Two-sided Newton iteration `λ ← λ − wᴴBu / wᴴB'u` from `lambda0`,
/// stopping once the correction is below `accept·(1 + |λ|)` or stalls at the
/// integration noise floor. The returned point carries the samples at the
/// last evaluated `λ`.
pub(crate) fn pair_newton(
    spec: &OperatorSpec,
    t: Complex64,
    lambda0: Complex64,
    settings: &EigenSettings,
    accept: f64,
) -> Result<PairPoint> {
    let mut lambda = lambda0;
    let mut last = f64::INFINITY;
    for _ in 0..settings.max_iterations.min(12) {
        let flow = ode::segmented_flow(spec, lambda, false, &settings.ode)?;
        let p = pair_point(spec, t, &flow, settings)?;
        let step = p.correction.norm();
        let size = 1.0 + lambda.norm();
        if step <= accept * size || (step > 0.1 * last && step <= 1e-7 * size) {
            return Ok(p);
        }
        if !step.is_finite() {
            break;
        }
        last = step;
        lambda += p.correction;
    }
    Err(SpectralError::NoConvergence { last: lambda, residual: last })
}

/// Correction threshold for eigenpairs reported as records.
pub(crate) const RECORD_ACCEPT: f64 = 1e-11;

/// Normalize a converged pair into a record.
pub(crate) fn record_from_pair(p: &PairPoint, spec: &OperatorSpec, settings: &EigenSettings) -> Result<EigenRecord> {
    if p.sigma_next < 10.0 * p.sigma_min {
        return Err(SpectralError::NotSimple { lambda: p.lambda, sigma_min: p.sigma_min, sigma_next: p.sigma_next });
    }
    let m = spec.dim();
    let nm = spec.system_size();
    // phase: dominant component of Ψ(0) real positive; unit L² norm
    let idx = dominant_index(&p.y0);
    let y0 = p.y0[idx];
    let rot = if y0.norm() > 0.0 { y0.conj() / y0.norm() } else { Complex64::new(1.0, 0.0) };
    let mut psi: Vec<Vec<Complex64>> = p.ys.iter().map(|j| j[..m].iter().map(|c| c * rot).collect()).collect();
    let norm = norm_sq(&psi).sqrt();
    psi.iter_mut().flatten().for_each(|c| *c /= norm);
    let psi_jets: Vec<Vec<Complex64>> = p.ys.iter().map(|j| j.iter().map(|c| c * rot / norm).collect()).collect();

    let mut star: Vec<Vec<Complex64>> = p.zs.iter().map(|j| j[nm - m..].to_vec()).collect();
    let snorm = norm_sq(&star).sqrt();
    star.iter_mut().flatten().for_each(|c| *c /= snorm);
    let a0 = periodic_inner(&psi, &star);
    let alpha_abs = a0.norm();
    if alpha_abs < 1e-12 {
        return Err(SpectralError::VanishingPairing(alpha_abs));
    }
    // (Ψ, cΨ*) = conj(c)·a0 is real positive for c = a0/|a0|
    let c = a0 / alpha_abs;
    let x_adj: Vec<Vec<Complex64>> = star.iter().map(|v| v.iter().map(|s| s * c / alpha_abs).collect()).collect();
    Ok(EigenRecord {
        k: None,
        j: None,
        t: p.t,
        lambda: p.lambda,
        x: settings.x_grid(),
        psi,
        psi_jets,
        x_adj,
        alpha: Complex64::new(alpha_abs, 0.0),
        delta_residual: p.residual,
        delta_scale: p.scale,
        simple: true,
    })
}

/// Build the full record from a flow at a converged eigenvalue.
pub(crate) fn record_from_flow(spec: &OperatorSpec, t: Complex64, flow: &SegmentedFlow, settings: &EigenSettings) -> Result<EigenRecord> {
    record_from_pair(&pair_point(spec, t, flow, settings)?, spec, settings)
}

/// Normalized eigenfunction for a (numerically simple) eigenvalue `λ` of `L_t`.
pub fn eigenfunction(spec: &OperatorSpec, t: Complex64, lambda: Complex64, settings: &EigenSettings) -> Result<SampledEigenfunction> {
    let rec = biorthogonal_pair(spec, t, lambda, settings)?;
    Ok(SampledEigenfunction { x: rec.x, values: rec.psi, jets: rec.psi_jets })
}

/// Eigenfunction, biorthogonal adjoint function and pairing at `λ`.
pub fn biorthogonal_pair(spec: &OperatorSpec, t: Complex64, lambda: Complex64, settings: &EigenSettings) -> Result<EigenRecord> {
    let flow = ode::segmented_flow(spec, lambda, false, &settings.ode)?;
    record_from_flow(spec, t, &flow, settings)
}

/// Unnormalized eigenfunction `F(x) = Σ_k Y_k(x,λ) A_k` built from the
/// cofactors of one of the last `m` rows of `M(λ) − e^{it} I`.
pub fn eigenfunction_cofactor_check(
    spec: &OperatorSpec,
    t: Complex64,
    lambda: Complex64,
    settings: &EigenSettings,
) -> Result<Vec<Vec<Complex64>>> {
    let grid = settings.x_grid();
    let set = ode::propagate(spec, lambda, Some(&grid), &settings.ode)?;
    let nm = spec.system_size();
    let m = spec.dim();
    let z = (I * t).exp();
    let d = &set.boundary_jet - CMatrix::identity(nm, nm) * z;
    let adj = linalg::adjugate(&d);
    // column r of adj(D) holds the cofactors of row r of D
    let (mut best_r, mut best_norm) = (nm - m, 0.0);
    for r in nm - m..nm {
        let nrm = adj.column(r).norm();
        if nrm > best_norm {
            best_norm = nrm;
            best_r = r;
        }
    }
    let svd_scale = linalg::svd_sorted(&d).sigma[0].max(1.0);
    if best_norm <= 1e-13 * svd_scale.powi(nm as i32 - 1) {
        return Err(SpectralError::ZeroCofactor(lambda));
    }
    let a: nalgebra::DVector<Complex64> = adj.column(best_r).into_owned();
    let samples = set.samples.expect("samples requested");
    Ok(samples.iter().map(|(_, y)| (y * &a).rows(0, m).iter().copied().collect()).collect())
}

/// Sine of the angle between two sampled functions (0 when parallel).
pub fn sampled_angle(f: &[Vec<Complex64>], g: &[Vec<Complex64>]) -> f64 {
    let fg = inner_product(f, g).norm();
    let ff = inner_product(f, f).re;
    let gg = inner_product(g, g).re;
    let cos2 = (fg * fg / (ff * gg)).min(1.0);
    (1.0 - cos2).max(0.0).sqrt()
}

/// Number of roots of `Δ(·, t)` inside the circle `|λ − center| = radius`,
/// by following the argument of `Δ` around the boundary.
pub fn count_eigenvalues_in_circle(
    spec: &OperatorSpec,
    t: Complex64,
    center: Complex64,
    radius: f64,
    settings: &EigenSettings,
) -> Result<usize> {
    let z = (I * t).exp();
    let eval = |theta: f64| -> Result<Complex64> {
        let lambda = center + Complex64::from_polar(radius, theta);
        let flow = ode::segmented_flow(spec, lambda, false, &settings.ode)?;
        Ok(linalg::determinant(&cyclic_matrix(&flow, z)))
    };
    let base = 64;
    let mut thetas: Vec<f64> = (0..=base).map(|i| 2.0 * PI * i as f64 / base as f64).collect();
    let mut values: Vec<Complex64> = thetas.iter().map(|&th| eval(th)).collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut i = 0;
    while i + 1 < thetas.len() {
        let ratio = values[i + 1] / values[i];
        let darg = ratio.arg();
        if darg.abs() > 0.5 && thetas[i + 1] - thetas[i] > 1e-9 {
            let mid = 0.5 * (thetas[i] + thetas[i + 1]);
            let v = eval(mid)?;
            thetas.insert(i + 1, mid);
            values.insert(i + 1, v);
            continue;
        }
        total += darg;
        i += 1;
    }
    Ok((total / (2.0 * PI)).round().max(0.0) as usize)
}

/// One band: a labelled eigenvalue branch over a t-grid.
#[derive(Debug, Clone, Serialize)]
pub struct Band {
    pub p: usize,
    /// `(k, j)` label for `|k| ≥ N₀`; `None` for low bands.
    pub k: Option<i64>,
    pub j: Option<usize>,
    pub t_grid: Vec<Complex64>,
    pub lambdas: Vec<Complex64>,
    /// Full records (empty when only eigenvalues were requested).
    pub records: Vec<EigenRecord>,
}

/// Bands over a grid plus the calibration and the low-band anchor point.
#[derive(Debug, Clone, Serialize)]
pub struct BandSet {
    pub bands: Vec<Band>,
    pub calibration: DiskCalibration,
    /// Quasimomentum at which low bands were enumerated and numbered.
    pub anchor: Complex64,
}

/// Global band number: `2|k|m + j` for `k > 0`, `(2|k| − 1)m + j` for `k < 0`, `j` for `k = 0`.
pub fn band_index(k: i64, j: usize, m: usize) -> usize {
    let ka = k.unsigned_abs() as usize;
    if k > 0 {
        2 * ka * m + j
    } else if k < 0 {
        (2 * ka - 1) * m + j
    } else {
        j
    }
}

/// Eigenvalues of the low bands (`|k| < N₀`) at `t`, ordered by modulus and
/// then by argument in `[0, 2π)`.
pub fn low_band_eigenvalues(
    spec: &OperatorSpec,
    t: Complex64,
    cal: &DiskCalibration,
    settings: &EigenSettings,
) -> Result<Vec<Complex64>> {
    let data = mean_matrix(spec)?;
    let order = spec.order();
    let m = data.dim();
    let expected = (2 * cal.n0 as usize - 1) * m;
    let inner: Vec<Complex64> = seeds_from(&data, order, t, -(cal.n0 - 1)..=(cal.n0 - 1)).iter().map(|s| s.mu).collect();
    let outer: Vec<f64> = seeds_from(&data, order, t, [-cal.n0, cal.n0])
        .iter()
        .map(|s| s.mu.norm() - cal.radius(s.k))
        .collect();
    let r_in = inner.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let r_out = outer.iter().copied().fold(f64::INFINITY, f64::min);
    let radius = if r_out > r_in { 0.5 * (r_in + r_out) } else { r_in * 1.5 + 1.0 };
    let count = count_eigenvalues_in_circle(spec, t, ZERO, radius, settings)?;
    if count != expected {
        return Err(SpectralError::LowBandCount { found: count, expected });
    }
    let mut found: Vec<Complex64> = Vec::new();
    let dedupe_tol = |z: Complex64| 1e-6 * (1.0 + z.norm());
    let push = |lambda: Complex64, found: &mut Vec<Complex64>| {
        if lambda.norm() < radius && !found.iter().any(|f| (f - lambda).norm() <= dedupe_tol(lambda)) {
            found.push(lambda);
        }
    };
    for &s in &inner {
        if let Ok(r) = refine(spec, t, s, settings) {
            push(r.lambda, &mut found);
        }
    }
    let mut rings = 3;
    let mut spokes = 12;
    while found.len() < count && rings <= 12 {
        for ring in 1..=rings {
            let r = radius * ring as f64 / (rings as f64 + 1.0);
            for s in 0..spokes {
                let seed = Complex64::from_polar(r, 2.0 * PI * (s as f64 + 0.5 * (ring % 2) as f64) / spokes as f64);
                if let Ok(res) = refine(spec, t, seed, settings) {
                    push(res.lambda, &mut found);
                }
                if found.len() >= count {
                    break;
                }
            }
        }
        rings *= 2;
        spokes *= 2;
    }
    if found.len() != count {
        return Err(SpectralError::LowBandCount { found: found.len(), expected });
    }
    let arg = |z: &Complex64| {
        let a = z.arg();
        if a < 0.0 {
            a + 2.0 * PI
        } else {
            a
        }
    };
    found.sort_by(|a, b| {
        let (ma, mb) = (a.norm(), b.norm());
        if (ma - mb).abs() <= 1e-9 * ma.max(mb) {
            arg(a).total_cmp(&arg(b))
        } else {
            ma.total_cmp(&mb)
        }
    });
    Ok(found)
}

/// Bound on `|dλ/dt|` used to flag tracking jumps.
fn slope_bound(order: usize, lambda: Complex64) -> f64 {
    4.0 * order as f64 * (lambda.norm() + 1.0).powf((order as f64 - 1.0) / order as f64) + 10.0
}

/// Cubic Hermite extrapolation through `(t, λ, dλ/dt)` at `prev` and `from`,
/// or the tangent line from `from` alone.
fn predict(from: &PairPoint, prev: Option<&PairPoint>, to_t: Complex64) -> Complex64 {
    match prev {
        Some(p) => {
            let h = from.t - p.t;
            let s = (to_t - p.t) / h;
            let (s2, s3) = (s * s, s * s * s);
            p.lambda * (2.0 * s3 - 3.0 * s2 + 1.0)
                + p.slope * h * (s3 - 2.0 * s2 + s)
                + from.lambda * (-2.0 * s3 + 3.0 * s2)
                + from.slope * h * (s3 - s2)
        }
        None => from.lambda + from.slope * (to_t - from.t),
    }
}

/// Longest t-step attempted in one predictor/Newton pass; coarser output grids are subdivided.
const MAX_TRACK_STEP: f64 = 0.25;

/// Where to split a step longer than [`MAX_TRACK_STEP`]. For even order,
/// bands meet near `Re t ∈ πZ`, so a step straddling such a point is split
/// only to make the straddling piece symmetric about it; that piece is then
/// taken in one step (`None`).
fn long_step_split(spec: &OperatorSpec, a: Complex64, b: Complex64) -> Option<Complex64> {
    let dt = b - a;
    if spec.is_even_order() && dt.re != 0.0 {
        let (lo, hi) = (a.re.min(b.re), a.re.max(b.re));
        let m = (0.5 * (lo + hi) / PI).round();
        let c = m * PI;
        if lo < c && c < hi {
            let (da, db) = ((a.re - c).abs(), (b.re - c).abs());
            if (da - db).abs() <= 1e-9 * dt.norm() {
                return None;
            }
            let d = da.min(db);
            let split_re = if da > db { c + (a.re - c).signum() * d } else { c + (b.re - c).signum() * d };
            return Some(a + dt * ((split_re - a.re) / dt.re));
        }
    }
    Some(a + dt * 0.5)
}

fn step_to(
    spec: &OperatorSpec,
    from: &PairPoint,
    prev: Option<&PairPoint>,
    to_t: Complex64,
    settings: &EigenSettings,
    accept: f64,
    depth: usize,
) -> Result<PairPoint> {
    let dt = to_t - from.t;
    if dt.norm() > MAX_TRACK_STEP && depth < 8 {
        if let Some(split) = long_step_split(spec, from.t, to_t) {
            let mid = step_to(spec, from, prev, split, settings, accept, depth + 1)?;
            return step_to(spec, &mid, Some(from), to_t, settings, accept, depth + 1);
        }
    }
    let predicted = predict(from, prev, to_t);
    let attempt = pair_newton(spec, to_t, predicted, settings, accept);
    let bound = slope_bound(spec.order(), from.lambda) * dt.norm();
    let ok = match &attempt {
        Ok(r) => {
            let moved = (r.lambda - from.lambda).norm();
            let corr = (r.lambda - predicted).norm();
            moved <= bound && corr <= 0.1 * from.slope.norm() * dt.norm() + 0.1 * dt.norm_sqr() + 1e-8 * (1.0 + r.lambda.norm())
        }
        Err(_) => false,
    };
    if ok {
        return attempt;
    }
    if depth >= 8 {
        return match attempt {
            Ok(r) => Err(SpectralError::TrackingJump { t: to_t, jump: (r.lambda - from.lambda).norm(), allowed: bound }),
            Err(e) => Err(e),
        };
    }
    let mid = step_to(spec, from, prev, from.t + dt * 0.5, settings, accept, depth + 1)?;
    step_to(spec, &mid, Some(from), to_t, settings, accept, depth + 1)
}

/// Track one band from `start` (a converged point at `t_grid[anchor]`) along
/// the grid in both directions; `visit` receives each converged point.
pub(crate) fn track_from<F: FnMut(usize, &PairPoint) -> Result<()>>(
    spec: &OperatorSpec,
    t_grid: &[Complex64],
    anchor: usize,
    start: PairPoint,
    settings: &EigenSettings,
    accept: f64,
    mut visit: F,
) -> Result<Vec<Complex64>> {
    let mut lambdas = vec![ZERO; t_grid.len()];
    lambdas[anchor] = start.lambda;
    visit(anchor, &start)?;
    let mut walk = |range: &mut dyn Iterator<Item = usize>, lambdas: &mut Vec<Complex64>| -> Result<()> {
        let mut prev: Option<PairPoint> = None;
        let mut cur = start.clone();
        for i in range {
            let next = step_to(spec, &cur, prev.as_ref(), t_grid[i], settings, accept, 0)?;
            lambdas[i] = next.lambda;
            visit(i, &next)?;
            prev = Some(std::mem::replace(&mut cur, next));
        }
        Ok(())
    };
    walk(&mut (anchor + 1..t_grid.len()), &mut lambdas)?;
    walk(&mut (0..anchor).rev(), &mut lambdas)?;
    Ok(lambdas)
}

/// Starting eigenvalues of all bands in `k_range` at `t`: labelled bands from
/// seeds (homotopy when Newton leaves the disk) and, when `k_range` reaches
/// below `N₀`, all low bands.
pub(crate) fn band_starts(
    spec: &OperatorSpec,
    t: Complex64,
    k_range: std::ops::RangeInclusive<i64>,
    cal: &DiskCalibration,
    settings: &EigenSettings,
) -> Result<Vec<(usize, Option<i64>, Option<usize>, Complex64)>> {
    let data = mean_matrix(spec)?;
    let m = data.dim();
    let mut out = Vec::new();
    if k_range.clone().any(|k| k.abs() < cal.n0) {
        for (idx, lambda) in low_band_eigenvalues(spec, t, cal, settings)?.into_iter().enumerate() {
            out.push((idx + 1, None, None, lambda));
        }
    }
    for k in k_range {
        if k.abs() < cal.n0 {
            continue;
        }
        for j in 1..=m {
            let center = mu_kj(spec.order(), data.eigenvalues[j - 1], k, t);
            let mut r = refine(spec, t, center, settings).map(|r| r.lambda);
            let inside = matches!(&r, Ok(l) if (l - center).norm() <= cal.radius_at(k, center));
            if !inside {
                r = homotopy_continuation(spec, t, k, j, DEFAULT_HOMOTOPY_STEPS, settings, Some(cal));
            }
            out.push((band_index(k, j, m), Some(k), Some(j), r?));
        }
    }
    out.sort_by_key(|b| b.0);
    Ok(out)
}

fn check_collisions(bands: &[Band], t_grid: &[Complex64]) -> Result<()> {
    for (i, &t) in t_grid.iter().enumerate() {
        for a in 0..bands.len() {
            for b in a + 1..bands.len() {
                let (la, lb) = (bands[a].lambdas[i], bands[b].lambdas[i]);
                if (la - lb).norm() <= 1e-6 * la.norm().max(1.0) {
                    return Err(SpectralError::CollisionDetected { t, first: bands[a].p, second: bands[b].p });
                }
            }
        }
    }
    Ok(())
}

/// Index of the grid point closest to the middle of the grid.
pub(crate) fn middle_index(t_grid: &[Complex64]) -> usize {
    (t_grid.len() - 1) / 2
}

/// Track all bands with `k ∈ k_range` over an admissible t-grid, with full records.
pub fn track_bands(
    spec: &OperatorSpec,
    t_grid: &[Complex64],
    k_range: std::ops::RangeInclusive<i64>,
    settings: &EigenSettings,
) -> Result<BandSet> {
    track_bands_streaming(spec, t_grid, k_range, settings, |_| Ok(()))
}

/// As [`track_bands`], handing each band to `visit` as soon as it is tracked,
/// so callers keep the finished bands when a later one fails.
pub fn track_bands_streaming<F: FnMut(&Band) -> Result<()>>(
    spec: &OperatorSpec,
    t_grid: &[Complex64],
    k_range: std::ops::RangeInclusive<i64>,
    settings: &EigenSettings,
    visit: F,
) -> Result<BandSet> {
    for &t in t_grid {
        check_admissible(spec, t, settings.admissibility_eps)?;
    }
    track_bands_with(spec, t_grid, k_range, settings, true, visit)
}

pub(crate) fn check_grid(t_grid: &[Complex64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(SpectralError::InvalidParameters("empty t grid".into()));
    }
    if t_grid.windows(2).any(|w| w[1].re <= w[0].re) {
        return Err(SpectralError::InvalidParameters("t grid must be increasing in Re t".into()));
    }
    Ok(())
}

pub(crate) fn track_bands_with<F: FnMut(&Band) -> Result<()>>(
    spec: &OperatorSpec,
    t_grid: &[Complex64],
    k_range: std::ops::RangeInclusive<i64>,
    settings: &EigenSettings,
    with_records: bool,
    mut visit: F,
) -> Result<BandSet> {
    check_grid(t_grid)?;
    let anchor = middle_index(t_grid);
    let anchor_t = t_grid[anchor];
    let cal = calibrate_disks(spec, anchor_t, settings)?;
    let starts = band_starts(spec, anchor_t, k_range, &cal, settings)?;
    let mut bands = Vec::with_capacity(starts.len());
    for (p, k, j, lambda) in starts {
        let start = pair_newton(spec, anchor_t, lambda, settings, RECORD_ACCEPT)?;
        let mut records: Vec<Option<EigenRecord>> = vec![None; if with_records { t_grid.len() } else { 0 }];
        let lambdas = track_from(spec, t_grid, anchor, start, settings, RECORD_ACCEPT, |i, point| {
            if with_records {
                let mut rec = record_from_pair(point, spec, settings)?;
                rec.k = k;
                rec.j = j;
                records[i] = Some(rec);
            }
            Ok(())
        })?;
        let band = Band {
            p,
            k,
            j,
            t_grid: t_grid.to_vec(),
            lambdas,
            records: records.into_iter().flatten().collect(),
        };
        visit(&band)?;
        bands.push(band);
    }
    check_collisions(&bands, t_grid)?;
    Ok(BandSet { bands, calibration: cal, anchor: anchor_t })
}

/// `dist(t, πZ)` re-exported for callers building grids.
pub fn distance_to_pi(t: Complex64) -> f64 {
    distance_to_pi_multiples(t)
}
