//! Fundamental solutions of `y^(n) + P₂y^(n-2) + ... + P_n y = λy` via an
//! embedded 8(5,3) Runge-Kutta integrator on the companion first-order system.
//!
//! States are stored row-major as `rows × ncols` complex arrays, where the
//! rows are the stacked jet blocks `(y, y', ..., y^(n-1))`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Result, SpectralError};
use crate::linalg::{CMatrix, ONE, ZERO};
use crate::operator::OperatorSpec;

/// Integrator tolerances and the admissible eigenvalue range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeTolerances {
    pub rtol: f64,
    pub atol: f64,
    pub lambda_budget: f64,
}

impl Default for OdeTolerances {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, lambda_budget: 1e6 }
    }
}

impl OdeTolerances {
    pub fn with_rtol(rtol: f64) -> Self {
        Self { rtol, atol: rtol * 1e-2, ..Self::default() }
    }
}

// Dormand-Prince 8(5,3) tableau.
const STAGES: usize = 12;
const C: [f64; STAGES] = [
    0.0,
    0.05260015195876773,
    0.0789002279381516,
    0.1183503419072274,
    0.2816496580927726,
    0.3333333333333333,
    0.25,
    0.3076923076923077,
    0.6512820512820513,
    0.6,
    0.8571428571428571,
    1.0,
];
const A: [[f64; 11]; STAGES] = [
    [0.0; 11],
    [0.05260015195876773, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0197250569845379, 0.0591751709536137, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.02958758547680685, 0.0, 0.08876275643042054, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2413651341592667, 0.0, -0.8845494793282861, 0.924834003261792, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.037037037037037035, 0.0, 0.0, 0.17082860872947386, 0.12546768756682242, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.037109375, 0.0, 0.0, 0.17025221101954405, 0.06021653898045596, -0.017578125, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        0.03709200011850479,
        0.0,
        0.0,
        0.17038392571223998,
        0.10726203044637328,
        -0.015319437748624402,
        0.008273789163814023,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        0.6241109587160757,
        0.0,
        0.0,
        -3.3608926294469414,
        -0.868219346841726,
        27.59209969944671,
        20.154067550477894,
        -43.48988418106996,
        0.0,
        0.0,
        0.0,
    ],
    [
        0.47766253643826434,
        0.0,
        0.0,
        -2.4881146199716677,
        -0.590290826836843,
        21.230051448181193,
        15.279233632882423,
        -33.28821096898486,
        -0.020331201708508627,
        0.0,
        0.0,
    ],
    [
        -0.9371424300859873,
        0.0,
        0.0,
        5.186372428844064,
        1.0914373489967295,
        -8.149787010746927,
        -18.52006565999696,
        22.739487099350505,
        2.4936055526796523,
        -3.0467644718982196,
        0.0,
    ],
    [
        2.273310147516538,
        0.0,
        0.0,
        -10.53449546673725,
        -2.0008720582248625,
        -17.9589318631188,
        27.94888452941996,
        -2.8589982771350235,
        -8.87285693353063,
        12.360567175794303,
        0.6433927460157636,
    ],
];
const B: [f64; STAGES] = [
    0.054293734116568765,
    0.0,
    0.0,
    0.0,
    0.0,
    4.450312892752409,
    1.8915178993145003,
    -5.801203960010585,
    0.3111643669578199,
    -0.1521609496625161,
    0.20136540080403034,
    0.04471061572777259,
];
const E3: [f64; STAGES + 1] = [
    -0.18980075407240762,
    0.0,
    0.0,
    0.0,
    0.0,
    4.450312892752409,
    1.8915178993145003,
    -5.801203960010585,
    -0.4226823213237919,
    -0.1521609496625161,
    0.20136540080403034,
    0.02265179219836082,
    0.0,
];
const E5: [f64; STAGES + 1] = [
    0.01312004499419488,
    0.0,
    0.0,
    0.0,
    0.0,
    -1.2251564463762044,
    -0.4957589496572502,
    1.6643771824549864,
    -0.35032884874997366,
    0.3341791187130175,
    0.08192320648511571,
    -0.022355307863886294,
    0.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const MAX_STEPS: usize = 2_000_000;

/// A linear system `Y' = A(x) Y` acting on a `rows × ncols` state.
pub(crate) trait LinearSystem {
    fn rows(&self) -> usize;
    fn rhs(&mut self, x: f64, y: &[Complex64], dy: &mut [Complex64], ncols: usize);
}

/// Reusable DOP853 workspace.
pub(crate) struct Dop853 {
    tol: OdeTolerances,
    k: Vec<Vec<Complex64>>,
    tmp: Vec<Complex64>,
    ynew: Vec<Complex64>,
    pub steps: usize,
}

impl Dop853 {
    pub fn new(tol: OdeTolerances) -> Self {
        Self { tol, k: Vec::new(), tmp: Vec::new(), ynew: Vec::new(), steps: 0 }
    }

    fn ensure(&mut self, len: usize) {
        if self.tmp.len() != len {
            self.k = vec![vec![ZERO; len]; STAGES + 1];
            self.tmp = vec![ZERO; len];
            self.ynew = vec![ZERO; len];
        }
    }

    /// Integrate from `x0` to `x1 > x0`, stopping exactly at each point of the
    /// sorted slice `stops` (which must lie in `[x0, x1]`) and handing the state
    /// to `observe`.
    pub fn integrate<S: LinearSystem, F: FnMut(usize, &[Complex64])>(
        &mut self,
        sys: &mut S,
        x0: f64,
        x1: f64,
        y: &mut [Complex64],
        ncols: usize,
        stops: &[f64],
        mut observe: F,
    ) -> Result<()> {
        let len = y.len();
        debug_assert_eq!(len, sys.rows() * ncols);
        self.ensure(len);
        let mut next_stop = 0;
        while next_stop < stops.len() && stops[next_stop] <= x0 {
            observe(next_stop, y);
            next_stop += 1;
        }
        if x1 <= x0 {
            return Ok(());
        }
        let rtol = self.tol.rtol;
        let atol = self.tol.atol;
        let mut x = x0;
        sys.rhs(x, y, &mut self.k[0], ncols);

        // initial step from the scale of y and y'
        let (mut d0, mut d1) = (0.0, 0.0);
        for i in 0..len {
            let sc = atol + y[i].norm() * rtol;
            d0 += (y[i].norm() / sc).powi(2);
            d1 += (self.k[0][i].norm() / sc).powi(2);
        }
        let (d0, d1) = ((d0 / len as f64).sqrt(), (d1 / len as f64).sqrt());
        let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h = h.min(x1 - x0);

        let mut rejected = false;
        while x < x1 {
            let target = if next_stop < stops.len() { stops[next_stop].min(x1) } else { x1 };
            let mut hit = false;
            let h_proposed = h;
            if x + h >= target - 1e-14 * target.abs().max(1.0) {
                h = target - x;
                hit = true;
            }
            if h < 1e-14 * x.abs().max(1.0) {
                return Err(SpectralError::IntegratorFailure { x, reason: format!("step size underflow (h = {h:.3e})") });
            }
            self.steps += 1;
            if self.steps > MAX_STEPS {
                return Err(SpectralError::IntegratorFailure { x, reason: "step budget exhausted".into() });
            }

            for s in 1..STAGES {
                for i in 0..len {
                    let mut acc = ZERO;
                    for (j, &a) in A[s][..s].iter().enumerate() {
                        if a != 0.0 {
                            acc += self.k[j][i] * a;
                        }
                    }
                    self.tmp[i] = y[i] + acc * h;
                }
                let (head, tail) = self.k.split_at_mut(s);
                let _ = head;
                sys.rhs(x + C[s] * h, &self.tmp, &mut tail[0], ncols);
            }
            for i in 0..len {
                let mut acc = ZERO;
                for (j, &b) in B.iter().enumerate() {
                    if b != 0.0 {
                        acc += self.k[j][i] * b;
                    }
                }
                self.ynew[i] = y[i] + acc * h;
            }
            {
                let (head, tail) = self.k.split_at_mut(STAGES);
                let _ = head;
                sys.rhs(x + h, &self.ynew, &mut tail[0], ncols);
            }

            let (mut e5, mut e3) = (0.0, 0.0);
            for i in 0..len {
                let sc = atol + y[i].norm().max(self.ynew[i].norm()) * rtol;
                let (mut a5, mut a3) = (ZERO, ZERO);
                for j in 0..=STAGES {
                    let kj = self.k[j][i];
                    if E5[j] != 0.0 {
                        a5 += kj * E5[j];
                    }
                    if E3[j] != 0.0 {
                        a3 += kj * E3[j];
                    }
                }
                e5 += (a5 / sc).norm_sqr();
                e3 += (a3 / sc).norm_sqr();
            }
            let denom = e5 + 0.01 * e3;
            let err = if denom > 0.0 { h.abs() * e5 / (denom * len as f64).sqrt() } else { 0.0 };

            if err < 1.0 {
                x = if hit { target } else { x + h };
                y.copy_from_slice(&self.ynew);
                let (first, rest) = self.k.split_at_mut(1);
                first[0].copy_from_slice(&rest[STAGES - 1]);
                let mut factor = if err == 0.0 { MAX_FACTOR } else { (SAFETY * err.powf(-1.0 / 8.0)).min(MAX_FACTOR) };
                if rejected {
                    factor = factor.min(1.0);
                }
                rejected = false;
                let h_used = h;
                h = h_used * factor;
                while next_stop < stops.len() && stops[next_stop] <= x + 1e-14 {
                    observe(next_stop, y);
                    next_stop += 1;
                }
                if hit {
                    // a forced stop shortened the step; resume with the proposed size
                    h = h.max(h_proposed);
                }
                h = h.min(x1 - x).max(0.0);
                if x1 - x <= 1e-15 {
                    break;
                }
            } else {
                h *= (SAFETY * err.powf(-1.0 / 8.0)).max(MIN_FACTOR);
                rejected = true;
            }
            if !y.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(SpectralError::IntegratorFailure { x, reason: "non-finite state".into() });
            }
        }
        while next_stop < stops.len() {
            observe(next_stop, y);
            next_stop += 1;
        }
        Ok(())
    }
}

/// Potentials `P_ν` tabulated for repeated evaluation without allocation.
#[derive(Clone)]
pub(crate) struct PotentialTable {
    n: usize,
    m: usize,
    /// (ν, harmonics as (q, row-major m×m)).
    terms: Vec<(usize, Vec<(i32, Vec<Complex64>)>)>,
    /// Current values, row-major, aligned with `terms`.
    values: Vec<Vec<Complex64>>,
}

impl PotentialTable {
    pub fn new(spec: &OperatorSpec) -> Self {
        let m = spec.dim();
        let terms: Vec<_> = spec
            .potentials()
            .iter()
            .filter(|(_, p)| !p.is_zero())
            .map(|(&nu, p)| {
                let hs = p
                    .harmonics()
                    .iter()
                    .map(|(&q, h)| (q, (0..m * m).map(|idx| h[(idx / m, idx % m)]).collect()))
                    .collect();
                (nu, hs)
            })
            .collect();
        let values = vec![vec![ZERO; m * m]; terms.len()];
        Self { n: spec.order(), m, terms, values }
    }

    fn eval(&mut self, x: f64) {
        for (slot, (_, hs)) in self.values.iter_mut().zip(&self.terms) {
            slot.iter_mut().for_each(|v| *v = ZERO);
            for (q, h) in hs {
                let phase = Complex64::from_polar(1.0, 2.0 * PI * *q as f64 * x);
                for (v, c) in slot.iter_mut().zip(h) {
                    *v += c * phase;
                }
            }
        }
    }

    /// `out_last = λ·y₀ − Σ_ν P_ν y_{n−ν}` for the companion system (no conjugation),
    /// written into `dy` rows of the last block of a jet starting at row `offset`.
    fn companion(&self, lambda: Complex64, y: &[Complex64], dy: &mut [Complex64], ncols: usize, offset: usize) {
        let (n, m) = (self.n, self.m);
        let blk = m * ncols;
        let base = offset * ncols;
        dy[base..base + (n - 1) * blk].copy_from_slice(&y[base + blk..base + n * blk]);
        let last = base + (n - 1) * blk;
        for idx in 0..blk {
            dy[last + idx] = lambda * y[base + idx];
        }
        for ((nu, _), p) in self.terms.iter().zip(&self.values) {
            let src = base + (n - nu) * blk;
            for r in 0..m {
                for s in 0..m {
                    let prs = p[r * m + s];
                    if prs == ZERO {
                        continue;
                    }
                    for c in 0..ncols {
                        dy[last + r * ncols + c] -= prs * y[src + s * ncols + c];
                    }
                }
            }
        }
    }

    /// Right-hand side of `Z' = −A^H Z` for the companion matrix `A`.
    fn adjoint(&self, lambda: Complex64, z: &[Complex64], dz: &mut [Complex64], ncols: usize, offset: usize) {
        let (n, m) = (self.n, self.m);
        let blk = m * ncols;
        let base = offset * ncols;
        let zl = base + (n - 1) * blk;
        for idx in 0..blk {
            dz[base + idx] = -lambda.conj() * z[zl + idx];
        }
        for j in 1..n {
            for idx in 0..blk {
                dz[base + j * blk + idx] = -z[base + (j - 1) * blk + idx];
            }
        }
        for ((nu, _), p) in self.terms.iter().zip(&self.values) {
            // block j = n − ν receives P_ν^H Z_{n−1}
            let dst = base + (n - nu) * blk;
            for r in 0..m {
                for s in 0..m {
                    let prs = p[s * m + r].conj();
                    if prs == ZERO {
                        continue;
                    }
                    for c in 0..ncols {
                        dz[dst + r * ncols + c] += prs * z[zl + s * ncols + c];
                    }
                }
            }
        }
    }
}

/// `Y' = A(x,λ) Y`.
pub(crate) struct CompanionSystem {
    table: PotentialTable,
    lambda: Complex64,
}

impl LinearSystem for CompanionSystem {
    fn rows(&self) -> usize {
        self.table.n * self.table.m
    }
    fn rhs(&mut self, x: f64, y: &[Complex64], dy: &mut [Complex64], ncols: usize) {
        self.table.eval(x);
        self.table.companion(self.lambda, y, dy, ncols, 0);
    }
}

/// `Y' = AY` stacked with its λ-derivative `W' = AW + (∂A/∂λ)Y`.
pub(crate) struct VariationalSystem {
    table: PotentialTable,
    lambda: Complex64,
}

impl LinearSystem for VariationalSystem {
    fn rows(&self) -> usize {
        2 * self.table.n * self.table.m
    }
    fn rhs(&mut self, x: f64, y: &[Complex64], dy: &mut [Complex64], ncols: usize) {
        self.table.eval(x);
        let nm = self.table.n * self.table.m;
        self.table.companion(self.lambda, y, dy, ncols, 0);
        self.table.companion(self.lambda, y, dy, ncols, nm);
        let m = self.table.m;
        let last = (nm + nm - m) * ncols;
        for idx in 0..m * ncols {
            dy[last + idx] += y[idx];
        }
    }
}

/// A solution of `y' = Ay` stacked with a solution of the adjoint system `z' = −A^H z`.
pub(crate) struct PairSystem {
    table: PotentialTable,
    lambda: Complex64,
}

impl LinearSystem for PairSystem {
    fn rows(&self) -> usize {
        2 * self.table.n * self.table.m
    }
    fn rhs(&mut self, x: f64, y: &[Complex64], dy: &mut [Complex64], ncols: usize) {
        self.table.eval(x);
        let nm = self.table.n * self.table.m;
        self.table.companion(self.lambda, y, dy, ncols, 0);
        self.table.adjoint(self.lambda, y, dy, ncols, nm);
    }
}

/// The adjoint system alone, used as an independent check.
pub(crate) struct AdjointSystem {
    table: PotentialTable,
    lambda: Complex64,
}

impl LinearSystem for AdjointSystem {
    fn rows(&self) -> usize {
        self.table.n * self.table.m
    }
    fn rhs(&mut self, x: f64, y: &[Complex64], dy: &mut [Complex64], ncols: usize) {
        self.table.eval(x);
        self.table.adjoint(self.lambda, y, dy, ncols, 0);
    }
}

fn check_lambda(lambda: Complex64, tol: &OdeTolerances) -> Result<()> {
    if !(lambda.re.is_finite() && lambda.im.is_finite()) {
        return Err(SpectralError::IntegratorFailure { x: 0.0, reason: format!("non-finite lambda {lambda}") });
    }
    if lambda.norm() > tol.lambda_budget {
        return Err(SpectralError::LambdaBudgetExceeded { modulus: lambda.norm(), budget: tol.lambda_budget });
    }
    Ok(())
}

fn identity_state(rows: usize, nm: usize) -> Vec<Complex64> {
    let mut y = vec![ZERO; rows * nm];
    for i in 0..nm {
        y[i * nm + i] = ONE;
    }
    y
}

fn state_to_matrix(y: &[Complex64], row0: usize, rows: usize, ncols: usize) -> CMatrix {
    CMatrix::from_fn(rows, ncols, |r, c| y[(row0 + r) * ncols + c])
}

/// Fundamental solutions `Y_k(x,λ)` with canonical initial jets, as the
/// `nm×nm` jet matrix at `x = 1` and optionally at interior sample points.
#[derive(Debug, Clone)]
pub struct FundamentalSolutionSet {
    pub lambda: Complex64,
    /// Column block `k` holds the jet `(Y_k, Y_k', ..., Y_k^(n-1))` at `x = 1`.
    pub boundary_jet: CMatrix,
    pub samples: Option<Vec<(f64, CMatrix)>>,
}

pub fn propagate(
    spec: &OperatorSpec,
    lambda: Complex64,
    x_grid: Option<&[f64]>,
    tol: &OdeTolerances,
) -> Result<FundamentalSolutionSet> {
    check_lambda(lambda, tol)?;
    let nm = spec.system_size();
    let mut sys = CompanionSystem { table: PotentialTable::new(spec), lambda };
    let mut y = identity_state(nm, nm);
    let mut solver = Dop853::new(*tol);
    let stops: Vec<f64> = x_grid.map(|g| g.to_vec()).unwrap_or_default();
    check_grid(&stops)?;
    let mut samples = Vec::with_capacity(stops.len());
    solver.integrate(&mut sys, 0.0, 1.0, &mut y, nm, &stops, |i, s| {
        samples.push((stops[i], state_to_matrix(s, 0, nm, nm)));
    })?;
    Ok(FundamentalSolutionSet {
        lambda,
        boundary_jet: state_to_matrix(&y, 0, nm, nm),
        samples: x_grid.map(|_| samples),
    })
}

/// Boundary jet together with its λ-derivative from the variational system.
pub fn propagate_with_lambda_derivative(
    spec: &OperatorSpec,
    lambda: Complex64,
    tol: &OdeTolerances,
) -> Result<(CMatrix, CMatrix)> {
    check_lambda(lambda, tol)?;
    let nm = spec.system_size();
    let (t, d) = transfer_with_derivative(spec, lambda, 0.0, 1.0, tol)?;
    debug_assert_eq!(t.nrows(), nm);
    Ok((t, d))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(SpectralError::InvalidParameters("x grid must be sorted and lie in [0, 1]".into()));
    }
    Ok(())
}

/// Solution of the initial value problem with jet `initial_jet` at `x = 0`;
/// returns the full jet `(y, ..., y^(n-1))` at each grid point.
pub fn solve_initial_value(
    spec: &OperatorSpec,
    lambda: Complex64,
    initial_jet: &[Complex64],
    x_grid: &[f64],
    tol: &OdeTolerances,
) -> Result<Vec<Vec<Complex64>>> {
    check_lambda(lambda, tol)?;
    check_grid(x_grid)?;
    let nm = spec.system_size();
    if initial_jet.len() != nm {
        return Err(SpectralError::InvalidParameters(format!("initial jet has length {}, expected {nm}", initial_jet.len())));
    }
    let mut sys = CompanionSystem { table: PotentialTable::new(spec), lambda };
    let mut y = initial_jet.to_vec();
    let mut out = Vec::with_capacity(x_grid.len());
    let end = x_grid.last().copied().unwrap_or(0.0);
    Dop853::new(*tol).integrate(&mut sys, 0.0, end, &mut y, 1, x_grid, |_, s| out.push(s.to_vec()))?;
    Ok(out)
}

/// Solution of the adjoint first-order system `z' = −A^H z` with jet `initial` at `x = 0`.
pub fn solve_adjoint_initial_value(
    spec: &OperatorSpec,
    lambda: Complex64,
    initial: &[Complex64],
    x_grid: &[f64],
    tol: &OdeTolerances,
) -> Result<Vec<Vec<Complex64>>> {
    check_lambda(lambda, tol)?;
    check_grid(x_grid)?;
    let mut sys = AdjointSystem { table: PotentialTable::new(spec), lambda };
    let mut z = initial.to_vec();
    let mut out = Vec::with_capacity(x_grid.len());
    let end = x_grid.last().copied().unwrap_or(0.0);
    Dop853::new(*tol).integrate(&mut sys, 0.0, end, &mut z, 1, x_grid, |_, s| out.push(s.to_vec()))?;
    Ok(out)
}

fn transfer_with_derivative(
    spec: &OperatorSpec,
    lambda: Complex64,
    a: f64,
    b: f64,
    tol: &OdeTolerances,
) -> Result<(CMatrix, CMatrix)> {
    let nm = spec.system_size();
    let mut sys = VariationalSystem { table: PotentialTable::new(spec), lambda };
    let mut y = identity_state(2 * nm, nm);
    Dop853::new(*tol).integrate(&mut sys, a, b, &mut y, nm, &[], |_, _| {})?;
    Ok((state_to_matrix(&y, 0, nm, nm), state_to_matrix(&y, nm, nm, nm)))
}

fn transfer(spec: &OperatorSpec, lambda: Complex64, a: f64, b: f64, tol: &OdeTolerances) -> Result<CMatrix> {
    let nm = spec.system_size();
    let mut sys = CompanionSystem { table: PotentialTable::new(spec), lambda };
    let mut y = identity_state(nm, nm);
    Dop853::new(*tol).integrate(&mut sys, a, b, &mut y, nm, &[], |_, _| {})?;
    Ok(state_to_matrix(&y, 0, nm, nm))
}

/// Number of sub-intervals of `[0,1]` so that each segment's transfer matrix
/// stays well conditioned: the exponential rates `Re ω` (with `ω^n = λ`)
/// spread over at most about 6 per segment.
pub fn segment_count(spec: &OperatorSpec, lambda: Complex64) -> usize {
    let n = spec.order();
    let r = lambda.norm().powf(1.0 / n as f64);
    let base = lambda.arg() / n as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in 0..n {
        let re = r * (base + 2.0 * PI * l as f64 / n as f64).cos();
        lo = lo.min(re);
        hi = hi.max(re);
    }
    let spread = (hi - lo) + 2.0 * spec.growth_scale();
    ((spread / 6.0).ceil() as usize).clamp(1, 200)
}

/// Transfer matrices of the jet over `[x_{i}, x_{i+1}]` for a uniform partition
/// of `[0,1]`, optionally with λ-derivatives.
///
/// Transfers are stored in balanced coordinates `D T D⁻¹`, where `D` scales jet
/// block `b` by `s^{-b}` with `s = max(1, |λ|^{1/n})`. Determinants, traces of
/// adjugate products and eigenvalues are unaffected; vectors convert with
/// [`SegmentedFlow::unbalance`].
#[derive(Debug, Clone)]
pub struct SegmentedFlow {
    pub lambda: Complex64,
    pub breaks: Vec<f64>,
    pub transfers: Vec<CMatrix>,
    pub derivatives: Option<Vec<CMatrix>>,
    pub jet_scale: f64,
    pub block: usize,
}

impl SegmentedFlow {
    pub fn segments(&self) -> usize {
        self.transfers.len()
    }

    fn exponent(&self, row: usize) -> i32 {
        (row / self.block) as i32
    }

    /// Product `T_N ⋯ T_1` in original coordinates: the boundary jet.
    pub fn monodromy(&self) -> CMatrix {
        let nm = self.transfers[0].nrows();
        let prod = self.transfers.iter().fold(CMatrix::identity(nm, nm), |acc, t| t * acc);
        CMatrix::from_fn(nm, nm, |r, c| prod[(r, c)] * self.jet_scale.powi(self.exponent(r) - self.exponent(c)))
    }

    /// Map a balanced right vector (one jet) back to original coordinates.
    pub fn unbalance(&self, v: &mut [Complex64]) {
        for (r, x) in v.iter_mut().enumerate() {
            *x *= self.jet_scale.powi(self.exponent(r));
        }
    }

    /// Map a balanced left (adjoint) vector back to original coordinates.
    pub fn unbalance_left(&self, v: &mut [Complex64]) {
        for (r, x) in v.iter_mut().enumerate() {
            *x *= self.jet_scale.powi(-self.exponent(r));
        }
    }

    fn balance(&mut self) {
        let s = self.jet_scale;
        let m = self.block;
        let apply = |t: &mut CMatrix| {
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    t[(r, c)] *= s.powi((c / m) as i32 - (r / m) as i32);
                }
            }
        };
        self.transfers.iter_mut().for_each(apply);
        if let Some(d) = self.derivatives.as_mut() {
            d.iter_mut().for_each(apply);
        }
    }
}

pub fn segmented_flow(
    spec: &OperatorSpec,
    lambda: Complex64,
    with_derivative: bool,
    tol: &OdeTolerances,
) -> Result<SegmentedFlow> {
    segmented_flow_with(spec, lambda, segment_count(spec, lambda), with_derivative, tol)
}

pub fn segmented_flow_with(
    spec: &OperatorSpec,
    lambda: Complex64,
    segments: usize,
    with_derivative: bool,
    tol: &OdeTolerances,
) -> Result<SegmentedFlow> {
    check_lambda(lambda, tol)?;
    let breaks: Vec<f64> = (0..=segments).map(|i| i as f64 / segments as f64).collect();
    let mut transfers = Vec::with_capacity(segments);
    let mut derivatives = Vec::with_capacity(segments);
    for w in breaks.windows(2) {
        if with_derivative {
            let (t, d) = transfer_with_derivative(spec, lambda, w[0], w[1], tol)?;
            transfers.push(t);
            derivatives.push(d);
        } else {
            transfers.push(transfer(spec, lambda, w[0], w[1], tol)?);
        }
    }
    let mut flow = SegmentedFlow {
        lambda,
        breaks,
        transfers,
        derivatives: with_derivative.then_some(derivatives),
        jet_scale: lambda.norm().powf(1.0 / spec.order() as f64).max(1.0),
        block: spec.dim(),
    };
    flow.balance();
    Ok(flow)
}

/// Sample a solution `y` of the equation and a solution `z` of the adjoint
/// first-order system on `x_grid ⊂ [0,1]`, restarting on each segment of
/// `breaks` from the given jets. Returns `(y jets, z jets)` per grid point.
pub(crate) fn sample_pair(
    spec: &OperatorSpec,
    lambda: Complex64,
    breaks: &[f64],
    y_starts: &[Vec<Complex64>],
    z_starts: &[Vec<Complex64>],
    x_grid: &[f64],
    tol: &OdeTolerances,
) -> Result<(Vec<Vec<Complex64>>, Vec<Vec<Complex64>>)> {
    let nm = spec.system_size();
    let mut sys = PairSystem { table: PotentialTable::new(spec), lambda };
    let mut solver = Dop853::new(*tol);
    let mut ys = Vec::with_capacity(x_grid.len());
    let mut zs = Vec::with_capacity(x_grid.len());
    let segs = breaks.len() - 1;
    let mut cursor = 0;
    for s in 0..segs {
        let (a, b) = (breaks[s], breaks[s + 1]);
        let start = cursor;
        while cursor < x_grid.len() && (x_grid[cursor] < b || (s == segs - 1 && x_grid[cursor] <= b)) {
            cursor += 1;
        }
        let stops = &x_grid[start..cursor];
        if stops.is_empty() {
            continue;
        }
        let mut state = Vec::with_capacity(2 * nm);
        state.extend_from_slice(&y_starts[s]);
        state.extend_from_slice(&z_starts[s]);
        let end = *stops.last().unwrap();
        solver.integrate(&mut sys, a, end, &mut state, 1, stops, |_, st| {
            ys.push(st[..nm].to_vec());
            zs.push(st[nm..].to_vec());
        })?;
    }
    Ok((ys, zs))
}
