//! Gelfand transform, expansion coefficients `a_k(t) = (f_t, X_{k,t})` and
//! reconstruction of whole-line functions from the band expansion, on the
//! real quasimomentum line or on a contour lifted into the upper half plane.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::eigen::{self, BandSet, EigenRecord, EigenSettings, PairPoint};
use crate::error::{Result, SpectralError};
use crate::linalg::{CMatrix, ZERO};
use crate::ode;
use crate::operator::OperatorSpec;
use crate::singularities::{Classification, SingularityReport};

/// Function classes a sampled input declares.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ClassFlags {
    pub compact_support: bool,
    /// Absolutely continuous with `f' ∈ L²`.
    pub absolutely_continuous: bool,
    /// `|f(x)| ≤ M e^{−α|x|}`, stored as `(M, α)`.
    pub class_s: Option<(f64, f64)>,
    /// Odd-order relaxation of the decay hypothesis; accepted with a warning.
    pub odd_order_relaxed: bool,
}

/// An `m`-vector function on a uniform grid with spacing `1/per_unit`,
/// aligned so that integer shifts map grid points to grid points.
#[derive(Debug, Clone, Serialize)]
pub struct SampledFunction {
    /// Grid index of the first sample; `x_i = i / per_unit`.
    start: i64,
    pub per_unit: usize,
    pub values: Vec<Vec<Complex64>>,
    pub support: (f64, f64),
    pub flags: ClassFlags,
}

fn grid_index(x: f64, per_unit: usize) -> Result<i64> {
    let g = x * per_unit as f64;
    if (g - g.round()).abs() > 1e-9 * (1.0 + g.abs()) {
        return Err(SpectralError::InvalidParameters(format!("x = {x} is not on the grid with spacing 1/{per_unit}")));
    }
    Ok(g.round() as i64)
}

impl SampledFunction {
    pub fn new(x_min: f64, per_unit: usize, values: Vec<Vec<Complex64>>, support: (f64, f64), flags: ClassFlags) -> Result<Self> {
        if per_unit < 2 || values.is_empty() {
            return Err(SpectralError::InvalidParameters("sampled function needs at least one value and per_unit >= 2".into()));
        }
        let dim = values[0].len();
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(SpectralError::InvalidParameters("all samples must have the same nonzero dimension".into()));
        }
        let f = Self { start: grid_index(x_min, per_unit)?, per_unit, values, support, flags };
        let (lo, hi) = (f.x_min(), f.x_max());
        if support.0 > support.1 || support.0 < lo - 1e-12 || support.1 > hi + 1e-12 {
            return Err(SpectralError::InvalidParameters(format!("support [{}, {}] must lie in [{lo}, {hi}]", support.0, support.1)));
        }
        let peak = f.values.iter().flatten().map(|c| c.norm()).fold(0.0, f64::max);
        for (i, v) in f.values.iter().enumerate() {
            let x = f.x(i);
            let size = v.iter().map(|c| c.norm()).fold(0.0, f64::max);
            if (x < support.0 - 1e-12 || x > support.1 + 1e-12) && size > 1e-14 * peak.max(1.0) {
                return Err(SpectralError::InvalidParameters(format!("value {size:.3e} at x = {x} outside the declared support")));
            }
            if let Some((m, alpha)) = flags.class_s {
                if size > m * (-alpha * x.abs()).exp() * (1.0 + 1e-12) + 1e-300 {
                    return Err(SpectralError::InvalidParameters(format!("class-S bound violated at x = {x}")));
                }
            }
        }
        Ok(f)
    }

    /// Sample `f` on `[x_min, x_max]`; values outside `support` are set to zero.
    pub fn from_fn<F: Fn(f64) -> Vec<Complex64>>(
        x_min: f64,
        x_max: f64,
        per_unit: usize,
        support: (f64, f64),
        flags: ClassFlags,
        f: F,
    ) -> Result<Self> {
        let lo = grid_index(x_min, per_unit)?;
        let hi = grid_index(x_max, per_unit)?;
        if hi < lo {
            return Err(SpectralError::InvalidParameters("x_max < x_min".into()));
        }
        let mut values = Vec::with_capacity((hi - lo + 1) as usize);
        let mut dim = None;
        for g in lo..=hi {
            let x = g as f64 / per_unit as f64;
            let mut v = f(x);
            if x < support.0 || x > support.1 {
                v.iter_mut().for_each(|c| *c = ZERO);
            }
            dim.get_or_insert(v.len());
            values.push(v);
        }
        Self::new(x_min, per_unit, values, support, flags)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn x(&self, i: usize) -> f64 {
        (self.start + i as i64) as f64 / self.per_unit as f64
    }

    pub fn x_min(&self) -> f64 {
        self.x(0)
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.values.len() - 1)
    }

    pub fn x_grid(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.x(i)).collect()
    }

    /// Value at global grid index `g` (`x = g / per_unit`), zero off the grid.
    fn at_index(&self, g: i64) -> Option<&[Complex64]> {
        let i = g - self.start;
        if i >= 0 && (i as usize) < self.values.len() {
            Some(&self.values[i as usize])
        } else {
            None
        }
    }

    /// Samples on `[x_lo, x_hi]`, zero where `f` is not sampled.
    pub fn restrict(&self, x_lo: f64, x_hi: f64) -> Result<Vec<Vec<Complex64>>> {
        let (lo, hi) = (grid_index(x_lo, self.per_unit)?, grid_index(x_hi, self.per_unit)?);
        Ok((lo..=hi).map(|g| self.at_index(g).map(|v| v.to_vec()).unwrap_or_else(|| vec![ZERO; self.dim()])).collect())
    }
}

/// Trapezoid `L²` norm of samples with spacing `h`.
pub fn l2_norm(values: &[Vec<Complex64>], h: f64) -> f64 {
    let n = values.len();
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        acc += w * v.iter().map(|c| c.norm_sqr()).sum::<f64>();
    }
    (acc * h).sqrt()
}

fn sup_norm(values: &[Vec<Complex64>]) -> f64 {
    values.iter().flatten().map(|c| c.norm()).fold(0.0, f64::max)
}

fn difference(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    a.iter().zip(b).map(|(u, v)| u.iter().zip(v).map(|(x, y)| x - y).collect()).collect()
}

/// `f_t` sampled on the `[0,1]` grid at one quasimomentum.
#[derive(Debug, Clone, Serialize)]
pub struct Fiber {
    pub t: Complex64,
    pub values: Vec<Vec<Complex64>>,
    /// Bound on the neglected tail for class-S inputs; zero for compact support.
    pub tail_bound: f64,
}

/// `f_t(x) = Σ_k f(x+k) e^{−ikt}` on `x ∈ [0,1]`, with `per_unit + 1` samples.
pub fn gelfand_transform(f: &SampledFunction, t: Complex64) -> Result<Fiber> {
    let tail_bound = tail_bound(f, t)?;
    let n = f.per_unit as i64;
    Ok(Fiber { t, values: fiber_values(f, t, 0, n), tail_bound })
}

fn tail_bound(f: &SampledFunction, t: Complex64) -> Result<f64> {
    if f.flags.compact_support {
        return Ok(0.0);
    }
    let (m, alpha) = f.flags.class_s.ok_or_else(|| {
        SpectralError::InvalidParameters("Gelfand transform needs a compact-support or class-S input".into())
    })?;
    let rate = alpha - t.im.abs();
    if rate <= 0.0 {
        return Err(SpectralError::DivergentTransform { im_t: t.im, alpha });
    }
    // whole periods sampled on each side of [0,1]
    let left = (-f.x_min()).floor().max(0.0);
    let right = (f.x_max() - 1.0).floor().max(0.0);
    Ok(m * alpha.exp() * ((-rate * left).exp() + (-rate * right).exp()) / (1.0 - (-rate).exp()))
}

/// `Σ_k f((g + kN)/N) e^{−ikt}` for global indices `g ∈ [g0, g0 + count]`.
fn fiber_values(f: &SampledFunction, t: Complex64, g0: i64, count: i64) -> Vec<Vec<Complex64>> {
    let n = f.per_unit as i64;
    let first = f.start;
    let last = f.start + f.values.len() as i64 - 1;
    let step = Complex64::new(0.0, -1.0) * t;
    (g0..=g0 + count)
        .map(|g| {
            let mut acc = vec![ZERO; f.dim()];
            let k_lo = (first - g).div_euclid(n) - 1;
            let k_hi = (last - g).div_euclid(n) + 1;
            for k in k_lo..=k_hi {
                if let Some(v) = f.at_index(g + k * n) {
                    let phase = (step * k as f64).exp();
                    acc.iter_mut().zip(v).for_each(|(a, x)| *a += x * phase);
                }
            }
            acc
        })
        .collect()
}

/// Relative defect `‖f_t(·+1) − e^{it} f_t‖ / ‖f_t‖` with `f_t(·+1)` summed directly.
pub fn quasiperiodicity_defect(f: &SampledFunction, t: Complex64) -> f64 {
    let n = f.per_unit as i64;
    let base = fiber_values(f, t, 0, n);
    let shifted = fiber_values(f, t, n, n);
    let z = (Complex64::new(0.0, 1.0) * t).exp();
    let scaled: Vec<Vec<Complex64>> = base.iter().map(|v| v.iter().map(|c| c * z).collect()).collect();
    let h = 1.0 / n as f64;
    let norm = l2_norm(&base, h);
    if norm == 0.0 {
        return 0.0;
    }
    l2_norm(&difference(&shifted, &scaled), h) / norm
}

/// Fibers `f_t` over a t-grid or contour samples.
#[derive(Debug, Clone, Serialize)]
pub struct GelfandTransform {
    pub per_unit: usize,
    pub fibers: Vec<Fiber>,
}

pub fn gelfand_transform_on(f: &SampledFunction, t_grid: &[Complex64]) -> Result<GelfandTransform> {
    let fibers = t_grid.iter().map(|&t| gelfand_transform(f, t)).collect::<Result<Vec<_>>>()?;
    Ok(GelfandTransform { per_unit: f.per_unit, fibers })
}

/// Uniform grid of `count` midpoints over `[−offset, 2π − offset)`.
///
/// With `count` a multiple of 4 and `offset = π/4` no node falls within
/// `π/count` of `πZ`.
pub fn periodic_t_grid(count: usize, offset: f64) -> Vec<Complex64> {
    (0..count).map(|i| Complex64::new(-offset + 2.0 * PI * (i as f64 + 0.5) / count as f64, 0.0)).collect()
}

fn check_periodic_grid(t: &[Complex64]) -> Result<()> {
    let nt = t.len();
    if nt < 2 {
        return Err(SpectralError::InvalidParameters("inverse transform needs at least two t samples".into()));
    }
    let h = 2.0 * PI / nt as f64;
    let uniform = t.windows(2).all(|w| ((w[1] - w[0]).re - h).abs() <= 1e-9) && t.iter().all(|s| s.im.abs() <= 1e-12);
    if !uniform {
        return Err(SpectralError::InvalidParameters("inverse transform needs a uniform real grid covering one period".into()));
    }
    Ok(())
}

/// `f(x + k) = (1/2π) ∫ f_t(x) e^{ikt} dt` by the trapezoid rule on the
/// transform's periodic t-grid, assembled on `[x_lo, x_hi]`.
pub fn inverse_gelfand(tr: &GelfandTransform, x_lo: f64, x_hi: f64) -> Result<SampledFunction> {
    let t: Vec<Complex64> = tr.fibers.iter().map(|f| f.t).collect();
    check_periodic_grid(&t)?;
    let n = tr.per_unit as i64;
    let (lo, hi) = (grid_index(x_lo, tr.per_unit)?, grid_index(x_hi, tr.per_unit)?);
    let dim = tr.fibers[0].values[0].len();
    let scale = 1.0 / t.len() as f64;
    let values = (lo..=hi)
        .map(|g| {
            let (j, i) = (g.div_euclid(n), g.rem_euclid(n) as usize);
            let mut acc = vec![ZERO; dim];
            for fiber in &tr.fibers {
                let phase = (Complex64::new(0.0, j as f64) * fiber.t).exp() * scale;
                acc.iter_mut().zip(&fiber.values[i]).for_each(|(a, v)| *a += v * phase);
            }
            acc
        })
        .collect();
    SampledFunction::new(x_lo, tr.per_unit, values, (x_lo, x_hi), ClassFlags { compact_support: true, ..Default::default() })
}

/// Smooth step: 0 for `u ≤ 0`, 1 for `u ≥ 1`, all derivatives vanishing at both ends.
fn smooth_step(u: f64) -> (f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0);
    }
    if u >= 1.0 {
        return (1.0, 0.0);
    }
    let (a, b) = ((-1.0 / u).exp(), (-1.0 / (1.0 - u)).exp());
    let (da, db) = (a / (u * u), -b / ((1.0 - u) * (1.0 - u)));
    let s = a + b;
    (a / s, (da * s - a * (da + db)) / (s * s))
}

/// Lift of the contour above one avoided point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Detour {
    pub center: Complex64,
    /// Centre of the lift in the path parameter `s`.
    pub s: f64,
    /// Half-width of the flat top in `s`.
    pub half_width: f64,
    pub lift: f64,
}

/// Path `t(s) = −a + 2πs + i h(s)`, `s ∈ [0,1]`, with `h = ε` on the middle,
/// smooth descents to the real endpoints, and smooth lifts over avoided points.
/// `h` is smooth and periodic, so the midpoint rule in `s` is spectrally
/// accurate for integrands that are 2π-periodic in `t`.
#[derive(Debug, Clone, Serialize)]
pub struct ContourPath {
    pub a: f64,
    pub epsilon: f64,
    pub avoided: Vec<Complex64>,
    pub detours: Vec<Detour>,
    /// Width in `s` of each descent.
    descent: f64,
}

impl ContourPath {
    fn plateau(&self, s: f64) -> (f64, f64) {
        let (l, dl) = smooth_step(s / self.descent);
        let (r, dr) = smooth_step((1.0 - s) / self.descent);
        (l * r, (dl * r - l * dr) / self.descent)
    }

    fn bump(d: &Detour, s: f64) -> (f64, f64) {
        // flat on |s − s₀| ≤ w, zero beyond 2w
        let u = (s - d.s).abs() / d.half_width;
        let (v, dv) = smooth_step(2.0 - u);
        let sign = if s >= d.s { 1.0 } else { -1.0 };
        (d.lift * v, -d.lift * dv * sign / d.half_width)
    }

    /// `(Im t(s), d Im t / ds)`.
    pub fn height(&self, s: f64) -> (f64, f64) {
        let (p, dp) = self.plateau(s);
        let (mut h, mut dh) = (self.epsilon * p, self.epsilon * dp);
        for d in &self.detours {
            let (b, db) = Self::bump(d, s);
            h += b;
            dh += db;
        }
        (h, dh)
    }

    pub fn point(&self, s: f64) -> Complex64 {
        if s <= 0.0 {
            return Complex64::new(-self.a, 0.0);
        }
        if s >= 1.0 {
            return Complex64::new(2.0 * PI - self.a, 0.0);
        }
        Complex64::new(-self.a + 2.0 * PI * s, self.height(s).0)
    }

    pub fn derivative(&self, s: f64) -> Complex64 {
        Complex64::new(2.0 * PI, self.height(s).1)
    }

    /// Midpoint nodes `t(s_i)` with weights `t'(s_i)/count`.
    pub fn nodes(&self, count: usize) -> Vec<(Complex64, Complex64)> {
        (0..count)
            .map(|i| {
                let s = (i as f64 + 0.5) / count as f64;
                (self.point(s), self.derivative(s) / count as f64)
            })
            .collect()
    }

    /// Smallest distance from densely sampled path points to `points`.
    pub fn min_distance(&self, points: &[Complex64]) -> f64 {
        let samples = 20_000;
        let mut best = f64::INFINITY;
        for i in 0..=samples {
            let t = self.point(i as f64 / samples as f64);
            for p in points {
                best = best.min((t - p).norm());
            }
        }
        best
    }

    fn max_height(&self) -> f64 {
        (0..=20_000).map(|i| self.height(i as f64 / 20_000.0).0).fold(0.0, f64::max)
    }
}

/// Contour from `−a` to `2π − a` at height `ε`, kept at least `ε/2` away from
/// every avoided point and below `2ε`.
pub fn contour_path(a: f64, epsilon: f64, avoided: &[Complex64]) -> Result<ContourPath> {
    if !(a > 0.0 && a < PI / 2.0) {
        return Err(SpectralError::InvalidParameters(format!("contour offset a = {a} must lie in (0, π/2)")));
    }
    if !(epsilon > 0.0 && epsilon < a / 2.0) {
        return Err(SpectralError::InvalidParameters(format!("contour height ε = {epsilon} must lie in (0, a/2)")));
    }
    let mut path = ContourPath { a, epsilon, avoided: avoided.to_vec(), detours: Vec::new(), descent: a / (4.0 * PI) };
    let half_width = epsilon / (4.0 * PI);
    for &p in avoided {
        let s = (p.re + a) / (2.0 * PI);
        if !(0.0..=1.0).contains(&s) {
            continue;
        }
        let base = path.height(s).0;
        let lift = p.im + 0.5 * epsilon - base;
        // points well below the path need nothing; otherwise pass above them
        if p.im <= base - 0.5 * epsilon - 1e-15 || lift <= 0.0 {
            continue;
        }
        path.detours.push(Detour { center: p, s, half_width, lift });
    }
    if !avoided.is_empty() && path.min_distance(avoided) < 0.5 * epsilon * (1.0 - 1e-9) {
        return Err(SpectralError::InvalidParameters("contour cannot keep ε/2 away from the avoided points".into()));
    }
    if path.max_height() >= 2.0 * epsilon {
        return Err(SpectralError::InvalidParameters("contour detours would exceed height 2ε".into()));
    }
    Ok(path)
}

/// Coefficient samples `a_k(t)` of one band.
#[derive(Debug, Clone, Serialize)]
pub struct BandCoefficients {
    pub p: usize,
    pub k: Option<i64>,
    pub j: Option<usize>,
    pub t: Vec<Complex64>,
    pub lambda: Vec<Complex64>,
    pub a: Vec<Complex64>,
}

/// A band left out of the expansion sum.
#[derive(Debug, Clone, Serialize)]
pub struct OmittedBand {
    pub p: usize,
    pub k: Option<i64>,
    pub j: Option<usize>,
    pub reason: String,
}

/// `a_k(t) = (f_t, X_{k,t})` for bands tracked with records on the transform's grid.
pub fn expansion_coefficients(bands: &BandSet, transform: &GelfandTransform) -> Result<Vec<BandCoefficients>> {
    let mut out = Vec::with_capacity(bands.bands.len());
    for band in &bands.bands {
        if band.records.len() != transform.fibers.len() {
            return Err(SpectralError::InvalidParameters(format!(
                "band {} has {} records for {} t samples; track with records on the transform grid",
                band.p,
                band.records.len(),
                transform.fibers.len()
            )));
        }
        let mut a = Vec::with_capacity(band.records.len());
        for (rec, fiber) in band.records.iter().zip(&transform.fibers) {
            if (rec.t - fiber.t).norm() > 1e-12 || rec.psi.len() != fiber.values.len() {
                return Err(SpectralError::InvalidParameters("band records and transform use different grids".into()));
            }
            a.push(coefficient(rec, &fiber.values)?);
        }
        out.push(BandCoefficients { p: band.p, k: band.k, j: band.j, t: band.t_grid.clone(), lambda: band.lambdas.clone(), a });
    }
    Ok(out)
}

fn coefficient(rec: &EigenRecord, f_t: &[Vec<Complex64>]) -> Result<Complex64> {
    if rec.alpha.norm() < 1e-12 {
        return Err(SpectralError::VanishingPairing(rec.alpha.norm()));
    }
    Ok(eigen::periodic_inner(f_t, &rec.x_adj))
}

/// Coefficients `(f_t, X_i)` and the partial sum `Σ a_i Ψ_i` over the given records at one t.
pub fn fiber_expansion(records: &[EigenRecord], f_t: &[Vec<Complex64>]) -> Result<(Vec<Complex64>, Vec<Vec<Complex64>>)> {
    let mut sum = vec![vec![ZERO; f_t[0].len()]; f_t.len()];
    let mut coeffs = Vec::with_capacity(records.len());
    for rec in records {
        let a = coefficient(rec, f_t)?;
        for (s, psi) in sum.iter_mut().zip(&rec.psi) {
            s.iter_mut().zip(psi).for_each(|(x, p)| *x += a * p);
        }
        coeffs.push(a);
    }
    Ok((coeffs, sum))
}

/// Quadrature in t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ExpansionMode {
    /// Midpoint rule on the real period `[−a, 2π − a)`.
    RealLine,
    /// Midpoint rule in the parameter of the lifted contour at height `ε`.
    Contour { epsilon: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct ExpansionSettings {
    pub eigen: EigenSettings,
    pub t_resolution: usize,
    /// Period window `[−a, 2π − a)`; also the contour offset.
    pub offset: f64,
    pub x_range: (f64, f64),
    /// Relative Newton correction accepted while tracking.
    pub accept: f64,
}

impl Default for ExpansionSettings {
    fn default() -> Self {
        Self { eigen: EigenSettings::default(), t_resolution: 256, offset: PI / 4.0, x_range: (-1.0, 2.0), accept: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionResult {
    pub x: Vec<f64>,
    pub reconstruction: Vec<Vec<Complex64>>,
    pub reference: Vec<Vec<Complex64>>,
    pub l2_error: f64,
    pub relative_l2_error: f64,
    pub sup_error: f64,
    pub band_count: usize,
    pub t_resolution: usize,
    pub mode: ExpansionMode,
    pub coefficients: Vec<BandCoefficients>,
    pub omitted: Vec<OmittedBand>,
    /// Relative `L²` change between contour heights `ε` and `ε/2`.
    pub richardson: Option<f64>,
    /// Regularized runs: integral of the jet-subtracted integrand.
    pub principal: Option<Vec<Vec<Complex64>>>,
    /// Regularized runs: the re-added jet terms.
    pub correction: Option<Vec<Vec<Complex64>>>,
    pub warnings: Vec<String>,
}

impl ExpansionResult {
    /// CSV rows `x, Re f_i, Im f_i, Re g_i, Im g_i, |f − g|` with `g` the reconstruction.
    pub fn to_csv(&self) -> String {
        let m = self.reference.first().map_or(0, |v| v.len());
        let mut out = String::from("x");
        for i in 0..m {
            out += &format!(",re_f{i},im_f{i}");
        }
        for i in 0..m {
            out += &format!(",re_rec{i},im_rec{i}");
        }
        out += ",error\n";
        for (idx, x) in self.x.iter().enumerate() {
            out += &format!("{x:.12}");
            for c in &self.reference[idx] {
                out += &format!(",{:.15e},{:.15e}", c.re, c.im);
            }
            for c in &self.reconstruction[idx] {
                out += &format!(",{:.15e},{:.15e}", c.re, c.im);
            }
            let err: f64 = self.reference[idx].iter().zip(&self.reconstruction[idx]).map(|(a, b)| (a - b).norm_sqr()).sum();
            out += &format!(",{:.6e}\n", err.sqrt());
        }
        out
    }
}

/// Spectral point whose neighbourhood gets the Taylor-jet subtraction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegularizationPoint {
    pub lambda: Complex64,
    /// Jet order `i_l`.
    pub order: u32,
    /// Neighbourhood radius; `None` picks the default.
    pub delta: Option<f64>,
}

impl RegularizationPoint {
    /// Flagged spectral singularities carry a jet order; others give `None`.
    pub fn from_report(report: &SingularityReport) -> Option<Self> {
        match (report.classification, report.pole_order) {
            (Classification::SpectralSingularity, Some(order)) => Some(Self { lambda: report.lambda, order, delta: None }),
            _ => None,
        }
    }
}

/// Taylor coefficients `C_ν(x) = ∂^ν_λ Y(x, Λ)/ν!` of the value rows of the
/// fundamental matrix on the `[0,1]` grid.
struct Jet {
    center: Complex64,
    delta: f64,
    coeffs: Vec<Vec<CMatrix>>,
}

const JET_NODES: usize = 32;
const MAX_JET_ORDER: u32 = 8;

fn default_deltas(spec: &OperatorSpec, points: &[RegularizationPoint]) -> Vec<f64> {
    let n = spec.order() as f64;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.delta.unwrap_or_else(|| {
                let nearest = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| (q.lambda - p.lambda).norm())
                    .fold(f64::INFINITY, f64::min);
                if nearest.is_finite() {
                    0.5 * nearest
                } else {
                    0.25 * (1.0 + p.lambda.norm()).powf((n - 1.0) / n)
                }
            })
        })
        .collect()
}

fn build_jet(spec: &OperatorSpec, point: &RegularizationPoint, delta: f64, settings: &EigenSettings) -> Result<Jet> {
    let order = point.order as usize;
    let fail = SpectralError::JetEstimationFailure { center: point.lambda, order };
    if point.order == 0 || point.order > MAX_JET_ORDER {
        return Err(fail);
    }
    let m = spec.dim();
    let grid = settings.x_grid();
    let value_rows = |set: ode::FundamentalSolutionSet| -> Vec<CMatrix> {
        set.samples.expect("samples requested").into_iter().map(|(_, y)| y.rows(0, m).into_owned()).collect()
    };
    let radius = 0.5 * delta.min(1.0);
    let mut coeffs = vec![vec![CMatrix::zeros(m, spec.system_size()); grid.len()]; order];
    for q in 0..JET_NODES {
        let theta = 2.0 * PI * q as f64 / JET_NODES as f64;
        let lambda = point.lambda + Complex64::from_polar(radius, theta);
        let samples = value_rows(ode::propagate(spec, lambda, Some(&grid), &settings.ode)?);
        for (nu, c) in coeffs.iter_mut().enumerate() {
            let w = Complex64::from_polar(radius.powi(-(nu as i32)), -(nu as f64) * theta) / JET_NODES as f64;
            for (acc, y) in c.iter_mut().zip(&samples) {
                *acc += y * w;
            }
        }
    }
    // the constant term must reproduce Y(Λ)
    let direct = value_rows(ode::propagate(spec, point.lambda, Some(&grid), &settings.ode)?);
    let scale = direct.iter().map(|y| y.norm()).fold(0.0, f64::max);
    let err = direct.iter().zip(&coeffs[0]).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    if !(err <= 1e-8 * scale.max(1.0)) {
        return Err(fail);
    }
    Ok(Jet { center: point.lambda, delta, coeffs })
}

struct Accumulation {
    total: Vec<Vec<Complex64>>,
    correction: Vec<Vec<Complex64>>,
    coefficients: Vec<BandCoefficients>,
    omitted: Vec<OmittedBand>,
}

struct BandSum {
    p: usize,
    k: Option<i64>,
    j: Option<usize>,
    total: Vec<Vec<Complex64>>,
    correction: Vec<Vec<Complex64>>,
    coeffs: BandCoefficients,
}

fn add_into(acc: &mut [Vec<Complex64>], part: &[Vec<Complex64>]) {
    for (a, b) in acc.iter_mut().zip(part) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

fn wrap(t: Complex64) -> Complex64 {
    let shift = (t.re / (2.0 * PI)).round();
    let w = Complex64::new(t.re - 2.0 * PI * shift, t.im);
    if w.re >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// `Σ_bands Σ_nodes w · a(t) Ψ_t(x)` on the output grid, streamed band by band.
fn accumulate(
    spec: &OperatorSpec,
    f: &SampledFunction,
    k_range: std::ops::RangeInclusive<i64>,
    nodes: &[(Complex64, Complex64)],
    settings: &ExpansionSettings,
    jets: &[Jet],
) -> Result<Accumulation> {
    let eig = &settings.eigen;
    if f.per_unit != eig.x_intervals {
        return Err(SpectralError::InvalidParameters(format!(
            "function grid spacing 1/{} must match the eigenfunction grid 1/{}",
            f.per_unit, eig.x_intervals
        )));
    }
    if f.dim() != spec.dim() {
        return Err(SpectralError::InvalidParameters(format!("function has {} components, operator acts on {}", f.dim(), spec.dim())));
    }
    // The summed integrand is 2π-periodic in t. Solving at Re t ∈ [−π, π)
    // keeps the low bands {|k| < N₀} the eigenvalues of smallest modulus.
    let mut nodes: Vec<(Complex64, Complex64)> = nodes.iter().map(|&(t, w)| (wrap(t), w)).collect();
    nodes.sort_by(|a, b| a.0.re.total_cmp(&b.0.re));
    let nodes = &nodes[..];
    let t_grid: Vec<Complex64> = nodes.iter().map(|n| n.0).collect();
    eigen::check_grid(&t_grid)?;
    let fibers = gelfand_transform_on(f, &t_grid)?;
    let n = f.per_unit as i64;
    let (lo, hi) = (grid_index(settings.x_range.0, f.per_unit)?, grid_index(settings.x_range.1, f.per_unit)?);
    if hi <= lo {
        return Err(SpectralError::InvalidParameters("empty reconstruction range".into()));
    }
    let periods: Vec<i64> = (lo..=hi).map(|g| g.div_euclid(n)).collect();
    let (j_min, j_max) = (periods[0], *periods.last().expect("nonempty"));
    let m = spec.dim();
    let zero_grid = || vec![vec![ZERO; m]; (hi - lo + 1) as usize];

    let anchor = eigen::middle_index(&t_grid);
    let cal = eigen::calibrate_disks(spec, t_grid[anchor], eig)?;
    let starts = eigen::band_starts(spec, t_grid[anchor], k_range, &cal, eig)?;
    let mut sums: Vec<BandSum> = Vec::new();
    let mut omitted = Vec::new();
    let new_sum = |p: usize, k: Option<i64>, j: Option<usize>| BandSum {
        p,
        k,
        j,
        total: zero_grid(),
        correction: zero_grid(),
        coeffs: BandCoefficients { p, k, j, t: t_grid.clone(), lambda: vec![ZERO; t_grid.len()], a: vec![ZERO; t_grid.len()] },
    };
    let mut low_slots = 0;
    for (p, k, j, lambda0) in starts {
        if k.is_none() {
            low_slots += 1;
            continue;
        }
        let mut sum = new_sum(p, k, j);
        let outcome = eigen::pair_newton(spec, t_grid[anchor], lambda0, eig, settings.accept).and_then(|start| {
            eigen::track_from(spec, &t_grid, anchor, start, eig, settings.accept, |i, point| {
                add_sample(spec, point, &fibers.fibers[i].values, nodes[i].1, eig, jets, lo, hi, n, (j_min, j_max), &mut sum, i)
            })
        });
        match outcome {
            Ok(_) => sums.push(sum),
            Err(e) => omitted.push(OmittedBand { p, k, j, reason: e.to_string() }),
        }
    }
    // low bands pass close to one another; their set is found afresh at each node
    if low_slots > 0 {
        let mut low: Vec<BandSum> = (1..=low_slots).map(|p| new_sum(p, None, None)).collect();
        let outcome = (0..t_grid.len()).try_for_each(|i| -> Result<()> {
            let lambdas = eigen::low_band_eigenvalues(spec, t_grid[i], &cal, eig)?;
            for (slot, lambda) in low.iter_mut().zip(lambdas) {
                let point = eigen::pair_newton(spec, t_grid[i], lambda, eig, settings.accept)?;
                add_sample(spec, &point, &fibers.fibers[i].values, nodes[i].1, eig, jets, lo, hi, n, (j_min, j_max), slot, i)?;
            }
            Ok(())
        });
        match outcome {
            Ok(()) => {
                low.sort_by_key(|b| b.p);
                sums.splice(0..0, low);
            }
            Err(e) => omitted.extend((1..=low_slots).map(|p| OmittedBand { p, k: None, j: None, reason: e.to_string() })),
        }
    }
    // two bands that coincide at a node are one eigenvalue found twice
    let mut keep = vec![true; sums.len()];
    for a in 0..sums.len() {
        for b in a + 1..sums.len() {
            if !keep[a] || !keep[b] {
                continue;
            }
            let clash = sums[a].coeffs.lambda.iter().zip(&sums[b].coeffs.lambda).any(|(x, y)| (x - y).norm() <= 1e-6 * x.norm().max(1.0));
            if clash {
                keep[b] = false;
                let s = &sums[b];
                omitted.push(OmittedBand { p: s.p, k: s.k, j: s.j, reason: format!("coincides with band {}", sums[a].p) });
            }
        }
    }
    let mut total = zero_grid();
    let mut correction = zero_grid();
    let mut coefficients = Vec::new();
    for (sum, keep) in sums.into_iter().zip(keep) {
        if keep {
            add_into(&mut total, &sum.total);
            add_into(&mut correction, &sum.correction);
            coefficients.push(sum.coeffs);
        }
    }
    Ok(Accumulation { total, correction, coefficients, omitted })
}

#[allow(clippy::too_many_arguments)]
fn add_sample(
    spec: &OperatorSpec,
    point: &PairPoint,
    f_t: &[Vec<Complex64>],
    weight: Complex64,
    eig: &EigenSettings,
    jets: &[Jet],
    lo: i64,
    hi: i64,
    n: i64,
    (j_min, j_max): (i64, i64),
    sum: &mut BandSum,
    index: usize,
) -> Result<()> {
    let rec = eigen::record_from_pair(point, spec, eig)?;
    let a = coefficient(&rec, f_t)?;
    sum.coeffs.lambda[index] = rec.lambda;
    sum.coeffs.a[index] = a;
    let m = spec.dim();
    // jet part on [0,1], already multiplied by a
    let jet_part: Option<Vec<Vec<Complex64>>> = jets.iter().find(|jet| (rec.lambda - jet.center).norm() < jet.delta).map(|jet| {
        let start = nalgebra::DVector::from_column_slice(&rec.psi_jets[0]);
        let d = rec.lambda - jet.center;
        (0..rec.psi.len())
            .map(|q| {
                let mut v = nalgebra::DVector::<Complex64>::zeros(m);
                let mut power = a;
                for c in &jet.coeffs {
                    v += &c[q] * &start * power;
                    power *= d;
                }
                v.iter().copied().collect()
            })
            .collect()
    });
    let z = (Complex64::new(0.0, 1.0) * rec.t).exp();
    let powers: Vec<Complex64> = (j_min..=j_max).map(|j| z.powi(j as i32) * weight).collect();
    for g in lo..=hi {
        let (j, i) = (g.div_euclid(n), g.rem_euclid(n) as usize);
        let w = powers[(j - j_min) as usize];
        let out = (g - lo) as usize;
        for c in 0..m {
            let full = a * rec.psi[i][c];
            match &jet_part {
                Some(jp) => {
                    sum.total[out][c] += w * (full - jp[i][c]);
                    sum.correction[out][c] += w * jp[i][c];
                }
                None => sum.total[out][c] += w * full,
            }
        }
    }
    Ok(())
}

fn real_line_nodes(settings: &ExpansionSettings) -> Vec<(Complex64, Complex64)> {
    let weight = Complex64::new(1.0 / settings.t_resolution as f64, 0.0);
    periodic_t_grid(settings.t_resolution, settings.offset).into_iter().map(|t| (t, weight)).collect()
}

fn contour_nodes(path: &ContourPath, count: usize) -> Vec<(Complex64, Complex64)> {
    path.nodes(count).into_iter().map(|(t, w)| (t, w / (2.0 * PI))).collect()
}

fn finish(
    f: &SampledFunction,
    settings: &ExpansionSettings,
    mode: ExpansionMode,
    acc: Accumulation,
    regularized: bool,
    warnings: Vec<String>,
) -> Result<ExpansionResult> {
    let h = 1.0 / f.per_unit as f64;
    let reference = f.restrict(settings.x_range.0, settings.x_range.1)?;
    let reconstruction = if regularized {
        let mut r = acc.total.clone();
        add_into(&mut r, &acc.correction);
        r
    } else {
        acc.total.clone()
    };
    let err = difference(&reconstruction, &reference);
    let l2_error = l2_norm(&err, h);
    let norm = l2_norm(&reference, h);
    let lo = grid_index(settings.x_range.0, f.per_unit)?;
    Ok(ExpansionResult {
        x: (0..reference.len()).map(|i| (lo + i as i64) as f64 * h).collect(),
        relative_l2_error: if norm > 0.0 { l2_error / norm } else { l2_error },
        l2_error,
        sup_error: sup_norm(&err),
        reconstruction,
        reference,
        band_count: acc.coefficients.len(),
        t_resolution: settings.t_resolution,
        mode,
        coefficients: acc.coefficients,
        omitted: acc.omitted,
        richardson: None,
        principal: regularized.then_some(acc.total),
        correction: regularized.then_some(acc.correction),
        warnings,
    })
}

fn class_warnings(spec: &OperatorSpec, f: &SampledFunction) -> Vec<String> {
    let mut w = Vec::new();
    if f.flags.odd_order_relaxed && spec.order() % 2 == 1 {
        w.push("odd-order relaxed decay hypothesis accepted; convergence is not guaranteed uniformly".to_string());
    }
    if !(f.flags.compact_support && f.flags.absolutely_continuous) {
        w.push("input is not declared absolutely continuous with compact support: convergence holds in L² only".to_string());
    }
    w
}

/// Whether band `coeffs` passes through `lambda`: some sample lies within one
/// step of the band polyline.
fn band_hits(coeffs: &BandCoefficients, lambda: Complex64) -> bool {
    let l = &coeffs.lambda;
    let step = l.windows(2).map(|w| (w[1] - w[0]).norm()).fold(0.0, f64::max);
    l.iter().any(|x| (x - lambda).norm() <= step.max(1e-8 * (1.0 + lambda.norm())))
}

/// Reconstruct `f` on `settings.x_range` from the bands with `k ∈ k_range`.
///
/// Real-line mode rejects inputs whose bands pass through a flagged spectral
/// singularity. Contour mode needs a compact-support or class-S input with
/// `2ε < α`, avoids the flagged quasimomenta, and repeats at `ε/2` for the
/// Richardson diagnostic.
pub fn reconstruct(
    spec: &OperatorSpec,
    f: &SampledFunction,
    k_range: std::ops::RangeInclusive<i64>,
    settings: &ExpansionSettings,
    mode: ExpansionMode,
    flags: &[SingularityReport],
) -> Result<ExpansionResult> {
    let warnings = class_warnings(spec, f);
    match mode {
        ExpansionMode::RealLine => {
            let acc = accumulate(spec, f, k_range, &real_line_nodes(settings), settings, &[])?;
            for report in flags.iter().filter(|r| r.classification == Classification::SpectralSingularity) {
                if let Some(band) = acc.coefficients.iter().find(|b| band_hits(b, report.lambda)) {
                    return Err(SpectralError::SingularBandInRealLineMode(band.p));
                }
            }
            finish(f, settings, mode, acc, false, warnings)
        }
        ExpansionMode::Contour { epsilon } => {
            if !f.flags.compact_support {
                match f.flags.class_s {
                    Some((_, alpha)) if 2.0 * epsilon < alpha => {}
                    Some((_, alpha)) => return Err(SpectralError::DivergentTransform { im_t: 2.0 * epsilon, alpha }),
                    None => {
                        return Err(SpectralError::InvalidParameters("contour mode needs a compact-support or class-S input".into()))
                    }
                }
            }
            let avoided: Vec<Complex64> = flags.iter().map(|r| r.t_star).collect();
            let run = |eps: f64| -> Result<Accumulation> {
                let path = contour_path(settings.offset, eps, &avoided)?;
                accumulate(spec, f, k_range.clone(), &contour_nodes(&path, settings.t_resolution), settings, &[])
            };
            let fine = run(epsilon)?;
            let half = run(0.5 * epsilon)?;
            let h = 1.0 / f.per_unit as f64;
            let scale = l2_norm(&fine.total, h);
            let change = l2_norm(&difference(&fine.total, &half.total), h);
            let mut result = finish(f, settings, mode, fine, false, warnings)?;
            result.richardson = Some(if scale > 0.0 { change / scale } else { change });
            Ok(result)
        }
    }
}

/// Real-line reconstruction with the Taylor jets of the fundamental solutions
/// subtracted near each point, and the subtracted terms accumulated
/// separately. `principal + correction` is returned as the reconstruction.
pub fn regularized_reconstruct(
    spec: &OperatorSpec,
    f: &SampledFunction,
    k_range: std::ops::RangeInclusive<i64>,
    settings: &ExpansionSettings,
    points: &[RegularizationPoint],
) -> Result<ExpansionResult> {
    let deltas = default_deltas(spec, points);
    let jets = points
        .iter()
        .zip(&deltas)
        .map(|(p, &d)| build_jet(spec, p, d, &settings.eigen))
        .collect::<Result<Vec<_>>>()?;
    let acc = accumulate(spec, f, k_range, &real_line_nodes(settings), settings, &jets)?;
    finish(f, settings, ExpansionMode::RealLine, acc, true, class_warnings(spec, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn bump(x: f64, a: f64, b: f64) -> f64 {
        let u = (2.0 * x - a - b) / (b - a);
        if u.abs() < 1.0 {
            (-1.0 / (1.0 - u * u)).exp()
        } else {
            0.0
        }
    }

    fn compact() -> ClassFlags {
        ClassFlags { compact_support: true, absolutely_continuous: true, ..Default::default() }
    }

    fn g(x: f64) -> Complex64 {
        c(bump(x, 0.1, 0.9), 0.3 * bump(x, 0.2, 0.7))
    }

    fn two_term() -> SampledFunction {
        SampledFunction::from_fn(-1.0, 3.0, 64, (0.1, 1.9), compact(), |x| vec![g(x) + g(x - 1.0)]).unwrap()
    }

    fn sup_diff(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> f64 {
        sup_norm(&difference(a, b))
    }

    #[test]
    fn single_period_support_is_its_own_transform() {
        let f = SampledFunction::from_fn(-2.0, 2.0, 64, (0.1, 0.9), compact(), |x| vec![g(x)]).unwrap();
        for t in [c(0.0, 0.0), c(1.3, 0.0), c(2.0, 0.4)] {
            let fiber = gelfand_transform(&f, t).unwrap();
            let direct = f.restrict(0.0, 1.0).unwrap();
            assert!(sup_diff(&fiber.values, &direct) < 1e-15);
            assert_eq!(fiber.tail_bound, 0.0);
        }
    }

    #[test]
    fn two_term_transform_and_quasiperiodicity() {
        let f = two_term();
        for t in [c(0.7, 0.0), c(2.9, 0.3)] {
            let fiber = gelfand_transform(&f, t).unwrap();
            let factor = c(1.0, 0.0) + (c(0.0, -1.0) * t).exp();
            let expected: Vec<Vec<Complex64>> = (0..=64).map(|i| vec![g(i as f64 / 64.0) * factor]).collect();
            assert!(sup_diff(&fiber.values, &expected) < 1e-14);
            assert!(quasiperiodicity_defect(&f, t) <= 1e-10);
        }
        let single = SampledFunction::from_fn(-1.0, 2.0, 64, (0.1, 0.9), compact(), |x| vec![g(x)]).unwrap();
        assert!(quasiperiodicity_defect(&single, c(1.0, 0.2)) <= 1e-10);
    }

    #[test]
    fn inverse_round_trips() {
        let f = two_term();
        let tr = gelfand_transform_on(&f, &periodic_t_grid(64, 0.0)).unwrap();
        let back = inverse_gelfand(&tr, -1.0, 3.0).unwrap();
        assert!(sup_diff(&back.values, &f.values) <= 1e-10);

        // a t-independent fiber comes from a function living on [0, 1)
        let grid = periodic_t_grid(16, PI / 4.0);
        let values: Vec<Vec<Complex64>> = (0..=64).map(|i| vec![c(i as f64 / 64.0, 1.0)]).collect();
        let tr = GelfandTransform { per_unit: 64, fibers: grid.iter().map(|&t| Fiber { t, values: values.clone(), tail_bound: 0.0 }).collect() };
        let back = inverse_gelfand(&tr, -1.0, 2.0).unwrap();
        for (i, v) in back.values.iter().enumerate() {
            let x = back.x(i);
            let expected = if (0.0..1.0).contains(&x) { c(x, 1.0) } else { ZERO };
            assert!((v[0] - expected).norm() < 1e-14, "x = {x}");
        }

        let wide = SampledFunction::from_fn(-1.0, 4.0, 64, (0.05, 2.45), compact(), |x| vec![c(bump(x, 0.05, 2.45), 0.0)]).unwrap();
        let tr = gelfand_transform_on(&wide, &periodic_t_grid(256, 0.0)).unwrap();
        let back = inverse_gelfand(&tr, -1.0, 4.0).unwrap();
        assert!(sup_diff(&back.values, &wide.values) <= 1e-8);
    }

    #[test]
    fn inverse_needs_periodic_grid() {
        let f = two_term();
        let t: Vec<Complex64> = (0..8).map(|i| c(0.1 * i as f64, 0.0)).collect();
        let tr = gelfand_transform_on(&f, &t).unwrap();
        assert!(matches!(inverse_gelfand(&tr, 0.0, 1.0), Err(SpectralError::InvalidParameters(_))));
    }

    #[test]
    fn class_s_tail_and_divergence() {
        let alpha = 2.0;
        let flags = ClassFlags { class_s: Some((1.0, alpha)), ..Default::default() };
        let decay = |x: f64| vec![c((-alpha * x.abs()).exp() * (1.0 + x * x).recip(), 0.0)];
        let narrow = SampledFunction::from_fn(-6.0, 7.0, 32, (-6.0, 7.0), flags, decay).unwrap();
        let wide = SampledFunction::from_fn(-12.0, 13.0, 32, (-12.0, 13.0), flags, decay).unwrap();
        let t = c(1.0, 0.5);
        let a = gelfand_transform(&narrow, t).unwrap();
        let b = gelfand_transform(&wide, t).unwrap();
        assert!(a.tail_bound > 0.0 && b.tail_bound < a.tail_bound);
        assert!(sup_diff(&a.values, &b.values) <= a.tail_bound);
        assert!(matches!(gelfand_transform(&narrow, c(1.0, 2.5)), Err(SpectralError::DivergentTransform { .. })));
        let none = SampledFunction::from_fn(0.0, 1.0, 32, (0.0, 1.0), ClassFlags::default(), |x| vec![c(x, 0.0)]).unwrap();
        assert!(gelfand_transform(&none, t).is_err());
    }

    #[test]
    fn sampled_function_invariants() {
        let vals = vec![vec![c(1.0, 0.0)]; 5];
        assert!(SampledFunction::new(0.0, 4, vals.clone(), (0.25, 0.5), compact()).is_err());
        assert!(SampledFunction::new(0.1, 4, vals.clone(), (0.0, 1.0), compact()).is_err());
        let flags = ClassFlags { class_s: Some((0.5, 1.0)), ..Default::default() };
        assert!(SampledFunction::new(0.0, 4, vals, (0.0, 1.0), flags).is_err());
    }

    #[test]
    fn contour_without_avoided_points() {
        let (a, eps) = (0.8, 0.2);
        let path = contour_path(a, eps, &[]).unwrap();
        assert_eq!(path.point(0.0), c(-a, 0.0));
        assert_eq!(path.point(1.0), c(2.0 * PI - a, 0.0));
        assert!(path.detours.is_empty());
        let nodes = path.nodes(200);
        assert!(nodes.windows(2).all(|w| w[1].0.re > w[0].0.re));
        for i in 0..=1000 {
            let h = path.point(i as f64 / 1000.0).im;
            assert!((0.0..=eps + 1e-15).contains(&h));
        }
        assert!((path.point(0.5).im - eps).abs() < 1e-15);
    }

    #[test]
    fn contour_keeps_away_from_avoided_points() {
        let (a, eps) = (1.0, 0.3);
        let path = contour_path(a, eps, &[c(0.0, 0.0), c(PI, 0.0)]).unwrap();
        assert!(path.min_distance(&[c(0.0, 0.0), c(PI, 0.0)]) >= 0.5 * eps);
        // a point just under the plateau forces a lift
        let tau = c(2.0, 0.9 * eps);
        let path = contour_path(a, eps, &[tau]).unwrap();
        assert_eq!(path.detours.len(), 1);
        assert!(path.min_distance(&[tau]) >= 0.5 * eps * (1.0 - 1e-9));
        assert!(path.max_height() < 2.0 * eps);
        assert!(contour_path(a, eps, &[c(2.0, 1.6 * eps)]).is_err());
    }

    #[test]
    fn contour_parameter_checks() {
        assert!(contour_path(0.0, 0.1, &[]).is_err());
        assert!(contour_path(2.0, 0.1, &[]).is_err());
        assert!(contour_path(0.5, 0.3, &[]).is_err());
    }

    #[test]
    fn contour_rule_is_spectral_for_periodic_integrands() {
        // (1/2π) ∫ dt / (2 − cos t) = 1/√3, analytic for |Im t| < acosh 2
        let path = contour_path(1.0, 0.3, &[c(PI, 0.0)]).unwrap();
        // the lift profile is smooth but not analytic, so convergence is super-algebraic
        let errors: Vec<f64> = [128usize, 256, 512]
            .iter()
            .map(|&n| {
                let sum: Complex64 = path.nodes(n).iter().map(|(t, w)| w / (2.0 - t.cos())).sum::<Complex64>() / (2.0 * PI);
                (sum - 1.0 / 3f64.sqrt()).norm()
            })
            .collect();
        assert!(errors[1] < 1e-2 * errors[0] && errors[2] < 1e-2 * errors[1], "{errors:?}");
        assert!(errors[2] < 1e-10, "{errors:?}");
        let derivative_error = (1..100)
            .map(|i| {
                let s = i as f64 / 100.0;
                let fd = (path.point(s + 1e-6) - path.point(s - 1e-6)) / 2e-6;
                (fd - path.derivative(s)).norm()
            })
            .fold(0.0, f64::max);
        assert!(derivative_error < 1e-5);
    }

    #[test]
    fn wrap_stays_in_principal_window() {
        for re in [-7.0, -PI, -1.0, 0.0, 3.0, PI, 6.0, 10.0] {
            let w = wrap(c(re, 0.2));
            assert!(w.re >= -PI && w.re < PI);
            assert!(((w.re - re) / (2.0 * PI) - ((w.re - re) / (2.0 * PI)).round()).abs() < 1e-12);
            assert_eq!(w.im, 0.2);
        }
    }

    #[test]
    fn jet_reproduces_fundamental_matrix_nearby() {
        let spec = OperatorSpec::free(2, 1).unwrap();
        let settings = EigenSettings { x_intervals: 16, ..Default::default() };
        let point = RegularizationPoint { lambda: c(-PI * PI, 0.0), order: 6, delta: None };
        let jet = build_jet(&spec, &point, 1.0, &settings).unwrap();
        let lambda = point.lambda + c(0.05, 0.02);
        let set = ode::propagate(&spec, lambda, Some(&settings.x_grid()), &settings.ode).unwrap();
        let d = lambda - point.lambda;
        for (q, (_, y)) in set.samples.unwrap().iter().enumerate() {
            let mut approx = CMatrix::zeros(1, 2);
            let mut power = c(1.0, 0.0);
            for coeff in &jet.coeffs {
                approx += &coeff[q] * power;
                power *= d;
            }
            assert!((approx - y.rows(0, 1)).norm() < 1e-8);
        }
        let bad = RegularizationPoint { order: 0, ..point };
        assert!(matches!(build_jet(&spec, &bad, 1.0, &settings), Err(SpectralError::JetEstimationFailure { .. })));
    }

    #[test]
    fn default_neighbourhoods() {
        let spec = OperatorSpec::free(2, 1).unwrap();
        let pts = [
            RegularizationPoint { lambda: c(-10.0, 0.0), order: 1, delta: None },
            RegularizationPoint { lambda: c(-14.0, 0.0), order: 1, delta: None },
            RegularizationPoint { lambda: c(-30.0, 0.0), order: 1, delta: Some(0.7) },
        ];
        let d = default_deltas(&spec, &pts);
        assert_eq!(d, vec![2.0, 2.0, 0.7]);
    }
}
