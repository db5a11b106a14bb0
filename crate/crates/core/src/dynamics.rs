//! Right-hand sides in eigenvalue, `u` and matrix coordinates, the transforms
//! between them, and their conserved quantities.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrate::{Coordinates, Event, EventKind, OdeSystem, StepControl, U_MAGNITUDE_CAP};
use crate::model::{classify, CaseLabel, Group, RepParams, SpectralInitialData};

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaState {
    pub t: f64,
    pub lambda: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRate {
    pub lambda: Vec<f64>,
    pub rho: f64,
}

/// `lambda_i' = -lambda_i^2 + (k/n)(rho - c_b)`, `rho' = -rho * sum(lambda)`.
pub fn lambda_rhs(state: &LambdaState, params: &RepParams) -> Result<LambdaRate> {
    check_density(state.rho)?;
    let forcing = params.coupling() * (state.rho - params.c_b());
    Ok(LambdaRate {
        lambda: state.lambda.iter().map(|l| -l * l + forcing).collect(),
        rho: -state.rho * state.lambda.iter().sum::<f64>(),
    })
}

fn check_density(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveDensity(rho))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UState {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl UState {
    /// `u_i(0) = 1`, `v_i(0) = lambda_{i,0}`.
    pub fn initial(init: &SpectralInitialData) -> Self {
        Self {
            t: 0.0,
            u: vec![1.0; init.n()],
            v: init.lambda0().to_vec(),
        }
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.v.iter().zip(&self.u).map(|(v, u)| v / u).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct URate {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// `u_i'' = -omega^2 u_i + (k/n) rho u_i` with `rho = rho0 / prod(u)`.
pub fn u_rhs(state: &UState, params: &RepParams, rho0: f64) -> Result<URate> {
    let rho = rho_from_u(&state.u, rho0)?;
    let w2 = params.omega() * params.omega();
    let g = params.coupling() * rho;
    Ok(URate {
        u: state.v.clone(),
        v: state.u.iter().map(|u| -w2 * u + g * u).collect(),
    })
}

/// `rho0 / prod(u)`.
pub fn rho_from_u(u: &[f64], rho0: f64) -> Result<f64> {
    let mut prod = 1.0;
    for (index, &value) in u.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveU { index, value });
        }
        prod *= value;
    }
    Ok(rho0 / prod)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbelResidual {
    /// `r_ij = (v_i u_j - u_i v_j) - (lambda_{i,0} - lambda_{j,0})`
    pub matrix: DMatrix<f64>,
    pub max: f64,
    /// Largest `|r_ij| / max(1, |v_i u_j| + |u_i v_j|)`: absolute while the
    /// pairing terms are of order one, relative once they are large.
    pub scaled_max: f64,
}

/// `|r| / max(1, scale)`
fn mixed(r: f64, scale: f64) -> f64 {
    r.abs() / scale.max(1.0)
}

pub fn abel_residual(state: &UState, init: &SpectralInitialData) -> AbelResidual {
    let n = state.u.len();
    let l0 = init.lambda0();
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        (state.v[i] * state.u[j] - state.u[i] * state.v[j]) - (l0[i] - l0[j])
    });
    let max = matrix.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let mut scaled_max = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = (state.v[i] * state.u[j]).abs() + (state.u[i] * state.v[j]).abs();
            scaled_max = scaled_max.max(mixed(matrix[(i, j)], scale));
        }
    }
    AbelResidual {
        matrix,
        max,
        scaled_max,
    }
}

/// Coefficients with `u_j = a_j u_1 + b_j u_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Reduction {
    pub fn reconstruct(&self, first: f64, last: f64) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a * first + b * last)
            .collect()
    }
}

pub fn reduce_to_two(init: &SpectralInitialData) -> Result<Reduction> {
    let l = init.lambda0();
    let (lo, hi) = (init.lambda_min(), init.lambda_max());
    if lo == hi {
        return Err(Error::DegenerateSpectrum);
    }
    let d = hi - lo;
    let a = l.iter().map(|x| (hi - x) / d).collect();
    let b = l.iter().map(|x| (x - lo) / d).collect();
    Ok(Reduction { a, b })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixState {
    pub t: f64,
    pub m: DMatrix<f64>,
    pub rho: f64,
}

impl MatrixState {
    /// `M = S diag(lambda0) S^-1`.
    pub fn from_similarity(init: &SpectralInitialData, s: &DMatrix<f64>) -> Result<Self> {
        let n = init.n();
        if s.nrows() != n || s.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: s.nrows(),
            });
        }
        let lu = s.clone().lu();
        let det = lu.determinant();
        let scale = s.iter().fold(0.0f64, |m, x| m.max(x.abs())).powi(n as i32);
        if !(det.abs() > 1e-12 * scale) {
            return Err(Error::InvalidMatrixSeed);
        }
        let s_inv = lu.try_inverse().ok_or(Error::InvalidMatrixSeed)?;
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(init.lambda0()));
        Ok(Self {
            t: 0.0,
            m: s * d * s_inv,
            rho: init.rho0(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRate {
    pub m: DMatrix<f64>,
    pub rho: f64,
}

/// `M' = -M^2 + (k/n)(rho - c_b) I`, `rho' = -rho tr M`.
pub fn matrix_rhs(state: &MatrixState, params: &RepParams) -> Result<MatrixRate> {
    check_density(state.rho)?;
    let n = state.m.nrows();
    let forcing = params.coupling() * (state.rho - params.c_b());
    let m = -(&state.m * &state.m) + DMatrix::identity(n, n) * forcing;
    Ok(MatrixRate {
        m,
        rho: -state.rho * state.m.trace(),
    })
}

/// Sorted real eigenvalues of `m`; fails if the spectrum is visibly complex.
pub fn real_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let ev = m.clone().complex_eigenvalues();
    let scale = ev.iter().fold(1.0f64, |s, z| s.max(z.norm()));
    if ev.iter().any(|z| z.im.abs() > 1e-6 * scale) {
        return Err(Error::InvalidMatrixSeed);
    }
    let mut re: Vec<f64> = ev.iter().map(|z| z.re).collect();
    re.sort_by(f64::total_cmp);
    Ok(re)
}

/// Full eigenvalues, density and (when available) `ln u` read off a state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub lambda: Vec<f64>,
    pub rho: f64,
    pub log_u: Option<Vec<f64>>,
}

impl Observation {
    pub fn u(&self) -> Option<Vec<f64>> {
        self.log_u
            .as_ref()
            .map(|l| l.iter().map(|x| x.exp()).collect())
    }

    /// Largest Abel residual `|u_i u_j (lambda_i - lambda_j) - (lambda_{i,0} - lambda_{j,0})|`.
    pub fn abel_max(&self, lambda0: &[f64]) -> Option<f64> {
        self.abel_fold(lambda0, |r, _| r.abs())
    }

    /// Abel residual on the mixed scale of [`AbelResidual::scaled_max`].
    pub fn abel_scaled_max(&self, lambda0: &[f64]) -> Option<f64> {
        self.abel_fold(lambda0, mixed)
    }

    fn abel_fold(&self, lambda0: &[f64], f: impl Fn(f64, f64) -> f64) -> Option<f64> {
        let u = self.u()?;
        let n = u.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let uu = u[i] * u[j];
                let r = uu * (self.lambda[i] - self.lambda[j]) - (lambda0[i] - lambda0[j]);
                let scale = uu * (self.lambda[i].abs() + self.lambda[j].abs());
                worst = worst.max(f(r, scale));
            }
        }
        Some(worst)
    }
}

/// Systems that can report physical observables from their state vector.
pub trait Observe: OdeSystem + Send + Sync {
    fn observe(&self, y: &[f64]) -> Observation;

    /// State vector at `t = 0`.
    fn initial_state(&self) -> Vec<f64>;

    fn params(&self) -> &RepParams;

    /// Terminal events marking the approach to blow-up in these coordinates.
    fn terminal_events(&self, control: &StepControl) -> Vec<Event>;

    /// A coordinate with a simple zero at blow-up, with its time derivative.
    fn blowup_root(&self, _y: &[f64]) -> Option<(f64, f64)> {
        None
    }

    /// Continuation in `ln(-lambda_1)` from a state of these coordinates.
    fn tail(&self) -> Option<TailSystem> {
        None
    }

    /// `(lambda_1, lambda_1')`.
    fn lambda1_with_rate(&self, y: &[f64]) -> (f64, f64) {
        let o = self.observe(y);
        let p = self.params();
        let l = o.lambda[0];
        (l, -l * l + p.coupling() * (o.rho - p.c_b()))
    }
}

fn lambda_escape(threshold: f64, range: std::ops::Range<usize>) -> Event {
    Event::new(EventKind::LambdaEscape, move |_, y: &[f64]| {
        threshold - y[range.clone()].iter().fold(0.0f64, |m, x| m.max(x.abs()))
    })
}

fn expand(groups: &[Group], values: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for (g, v) in groups.iter().zip(values) {
        out.extend(std::iter::repeat_n(*v, g.multiplicity));
    }
    out
}

/// Eigenvalue coordinates with equal initial eigenvalues stored once.
/// State: `[lambda_g.., rho, ell_g..]` with `ell_g = ln u_g = int lambda_g`.
#[derive(Debug, Clone)]
pub struct LambdaSystem {
    params: RepParams,
    init: SpectralInitialData,
    groups: Vec<Group>,
}

impl LambdaSystem {
    pub fn new(params: RepParams, init: SpectralInitialData) -> Self {
        let groups = init.groups();
        Self {
            params,
            init,
            groups,
        }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    fn ng(&self) -> usize {
        self.groups.len()
    }
}

impl OdeSystem for LambdaSystem {
    fn dim(&self) -> usize {
        2 * self.ng() + 1
    }

    fn coordinates(&self) -> Coordinates {
        Coordinates::Lambda
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let g = self.ng();
        let rho = y[g];
        check_density(rho)?;
        let forcing = self.params.coupling() * (rho - self.params.c_b());
        let mut trace = 0.0;
        for (i, grp) in self.groups.iter().enumerate() {
            let l = y[i];
            dy[i] = -l * l + forcing;
            dy[g + 1 + i] = l;
            trace += grp.multiplicity as f64 * l;
        }
        dy[g] = -rho * trace;
        Ok(())
    }

    fn invariant_residual(&self, y: &[f64]) -> Option<f64> {
        self.observe(y).abel_scaled_max(self.init.lambda0())
    }

    fn density_overflow(&self, y: &[f64]) -> bool {
        !y[self.ng()].is_finite()
    }
}

impl Observe for LambdaSystem {
    fn observe(&self, y: &[f64]) -> Observation {
        let g = self.ng();
        let n = self.init.n();
        Observation {
            lambda: expand(&self.groups, &y[..g], n),
            rho: y[g],
            log_u: Some(expand(&self.groups, &y[g + 1..], n)),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut y: Vec<f64> = self.groups.iter().map(|g| g.value).collect();
        y.push(self.init.rho0());
        y.extend(std::iter::repeat_n(0.0, self.ng()));
        y
    }

    fn params(&self) -> &RepParams {
        &self.params
    }

    fn terminal_events(&self, control: &StepControl) -> Vec<Event> {
        vec![lambda_escape(control.lambda_escape, 0..self.ng())]
    }
}

/// Full `u` coordinates, one component per eigenvalue. State: `[u.., v..]`.
#[derive(Debug, Clone)]
pub struct USystem {
    params: RepParams,
    init: SpectralInitialData,
}

impl USystem {
    pub fn new(params: RepParams, init: SpectralInitialData) -> Self {
        Self { params, init }
    }
}

impl OdeSystem for USystem {
    fn dim(&self) -> usize {
        2 * self.init.n()
    }

    fn coordinates(&self) -> Coordinates {
        Coordinates::U
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.init.n();
        let (u, v) = y.split_at(n);
        let rho = rho_from_u(u, self.init.rho0())?;
        let w2 = self.params.omega() * self.params.omega();
        let g = self.params.coupling() * rho;
        for i in 0..n {
            dy[i] = v[i];
            dy[n + i] = (g - w2) * u[i];
        }
        Ok(())
    }

    fn max_step(&self, _t: f64, y: &[f64]) -> Option<f64> {
        near_root_cap(y[0], y[self.init.n()])
    }

    fn invariant_residual(&self, y: &[f64]) -> Option<f64> {
        let n = self.init.n();
        let st = UState {
            t: 0.0,
            u: y[..n].to_vec(),
            v: y[n..].to_vec(),
        };
        Some(abel_residual(&st, &self.init).scaled_max)
    }
}

impl Observe for USystem {
    fn observe(&self, y: &[f64]) -> Observation {
        let n = self.init.n();
        let (u, v) = y.split_at(n);
        let prod: f64 = u.iter().product();
        Observation {
            lambda: v.iter().zip(u).map(|(v, u)| v / u).collect(),
            rho: self.init.rho0() / prod,
            log_u: Some(u.iter().map(|x| x.ln()).collect()),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut y = vec![1.0; self.init.n()];
        y.extend_from_slice(self.init.lambda0());
        y
    }

    fn params(&self) -> &RepParams {
        &self.params
    }

    fn terminal_events(&self, control: &StepControl) -> Vec<Event> {
        u_events(control.u_zero_eps, 0, self.init.n() - 1)
    }

    fn blowup_root(&self, y: &[f64]) -> Option<(f64, f64)> {
        Some((y[0], y[self.init.n()]))
    }
}

/// `u_1` reaching the proximity threshold, or `u_n` passing the magnitude cap.
fn u_events(eps: f64, first: usize, last: usize) -> Vec<Event> {
    vec![
        Event::new(EventKind::U1Zero, move |_, y: &[f64]| y[first] - eps),
        Event::new(EventKind::MagnitudeCap, move |_, y: &[f64]| {
            U_MAGNITUDE_CAP - y[last]
        }),
    ]
}

/// Caps the step near a transversal zero of `u_1`.
fn near_root_cap(u1: f64, v1: f64) -> Option<f64> {
    (u1 < 1e-6 && v1 < 0.0 && u1 > 0.0).then(|| u1 / v1.abs() / 10.0)
}

/// `u` coordinates reduced to the extreme pair. State: `[u_1, v_1, u_n, v_n]`.
#[derive(Debug, Clone)]
pub struct ReducedUSystem {
    params: RepParams,
    init: SpectralInitialData,
    reduction: Reduction,
}

impl ReducedUSystem {
    pub fn new(params: RepParams, init: SpectralInitialData) -> Result<Self> {
        let reduction = reduce_to_two(&init)?;
        Ok(Self {
            params,
            init,
            reduction,
        })
    }

    pub fn reduction(&self) -> &Reduction {
        &self.reduction
    }

    /// Full `(u, v)` reconstructed from the extreme pair.
    pub fn expand(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.reduction.reconstruct(y[0], y[2]),
            self.reduction.reconstruct(y[1], y[3]),
        )
    }
}

impl OdeSystem for ReducedUSystem {
    fn dim(&self) -> usize {
        4
    }

    fn coordinates(&self) -> Coordinates {
        Coordinates::ReducedU
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let u = self.reduction.reconstruct(y[0], y[2]);
        let rho = rho_from_u(&u, self.init.rho0())?;
        let w2 = self.params.omega() * self.params.omega();
        let g = self.params.coupling() * rho - w2;
        dy[0] = y[1];
        dy[1] = g * y[0];
        dy[2] = y[3];
        dy[3] = g * y[2];
        Ok(())
    }

    fn max_step(&self, _t: f64, y: &[f64]) -> Option<f64> {
        near_root_cap(y[0], y[1])
    }

    fn invariant_residual(&self, y: &[f64]) -> Option<f64> {
        let (u, v) = self.expand(y);
        let st = UState { t: 0.0, u, v };
        Some(abel_residual(&st, &self.init).scaled_max)
    }
}

impl Observe for ReducedUSystem {
    fn observe(&self, y: &[f64]) -> Observation {
        let (u, v) = self.expand(y);
        let prod: f64 = u.iter().product();
        Observation {
            lambda: v.iter().zip(&u).map(|(v, u)| v / u).collect(),
            rho: self.init.rho0() / prod,
            log_u: Some(u.iter().map(|x| x.ln()).collect()),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![1.0, self.init.lambda_min(), 1.0, self.init.lambda_max()]
    }

    fn params(&self) -> &RepParams {
        &self.params
    }

    fn terminal_events(&self, control: &StepControl) -> Vec<Event> {
        u_events(control.u_zero_eps, 0, 2)
    }

    fn blowup_root(&self, y: &[f64]) -> Option<(f64, f64)> {
        Some((y[0], y[1]))
    }
}

/// The reduced `u` system in logarithmic form, carrying `lambda_1` directly:
/// state `[lambda_1, ln u_1, ln u_n]`. The Abel pairing of the extreme pair
/// gives `lambda_n = lambda_1 + D / (u_1 u_n)` with `D = lambda_{n,0} - lambda_{1,0}`,
/// so it holds exactly and the state stays finite while `u_1 -> 0` and
/// `u_n -> inf`.
#[derive(Debug, Clone)]
pub struct LogReducedSystem {
    params: RepParams,
    init: SpectralInitialData,
    groups: Vec<Group>,
    /// `(a_g, b_g)` per group
    weights: Vec<(f64, f64)>,
    gap: f64,
}

impl LogReducedSystem {
    pub fn new(params: RepParams, init: SpectralInitialData) -> Result<Self> {
        let red = reduce_to_two(&init)?;
        let groups = init.groups();
        let weights = groups
            .iter()
            .map(|g| (red.a[g.first], red.b[g.first]))
            .collect();
        let gap = init.spread();
        Ok(Self {
            params,
            init,
            groups,
            weights,
            gap,
        })
    }

    pub fn gap(&self) -> f64 {
        self.gap
    }

    /// `ln u_g` per group from `ln u_1`, `ln u_n`.
    fn log_u_groups(&self, l1: f64, ln: f64) -> Vec<f64> {
        let m = l1.max(ln);
        self.weights
            .iter()
            .map(|&(a, b)| {
                if b == 0.0 {
                    l1
                } else if a == 0.0 {
                    ln
                } else {
                    m + (a * (l1 - m).exp() + b * (ln - m).exp()).ln()
                }
            })
            .collect()
    }

    fn log_rho(&self, l1: f64, ln: f64) -> f64 {
        let lu = self.log_u_groups(l1, ln);
        let s: f64 = self
            .groups
            .iter()
            .zip(&lu)
            .map(|(g, l)| g.multiplicity as f64 * l)
            .sum();
        self.init.rho0().ln() - s
    }

    /// `D / (u_1 u_n)`.
    fn pair_gap(&self, l1: f64, ln: f64) -> f64 {
        self.gap * (-(l1 + ln)).exp()
    }
}

impl OdeSystem for LogReducedSystem {
    fn dim(&self) -> usize {
        3
    }

    fn coordinates(&self) -> Coordinates {
        Coordinates::LogReduced
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let rho = self.log_rho(y[1], y[2]).exp();
        check_density(rho)?;
        let forcing = self.params.coupling() * (rho - self.params.c_b());
        dy[0] = -y[0] * y[0] + forcing;
        dy[1] = y[0];
        dy[2] = y[0] + self.pair_gap(y[1], y[2]);
        Ok(())
    }

    fn density_overflow(&self, y: &[f64]) -> bool {
        !self.log_rho(y[1], y[2]).exp().is_finite()
    }
}

impl Observe for LogReducedSystem {
    fn tail(&self) -> Option<TailSystem> {
        Some(TailSystem::new(self.clone()))
    }

    fn observe(&self, y: &[f64]) -> Observation {
        let (l1, ln) = (y[1], y[2]);
        let lu = self.log_u_groups(l1, ln);
        let n = self.init.n();
        // lambda_j = v_j / u_j = (a_j v_1 + b_j v_n) / u_j with v = lambda u
        let lam_n = y[0] + self.pair_gap(l1, ln);
        let lam: Vec<f64> = self
            .weights
            .iter()
            .zip(&lu)
            .map(|(&(a, b), &lj)| {
                if b == 0.0 {
                    y[0]
                } else if a == 0.0 {
                    lam_n
                } else {
                    a * y[0] * (l1 - lj).exp() + b * lam_n * (ln - lj).exp()
                }
            })
            .collect();
        Observation {
            lambda: expand(&self.groups, &lam, n),
            rho: self.log_rho(l1, ln).exp(),
            log_u: Some(expand(&self.groups, &lu, n)),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![self.init.lambda_min(), 0.0, 0.0]
    }

    fn params(&self) -> &RepParams {
        &self.params
    }

    /// Only the escape of `lambda_1`: a small `u_1` alone is not a collision
    /// here, since `u_1` may decay exponentially while `u_n` grows.
    fn terminal_events(&self, control: &StepControl) -> Vec<Event> {
        vec![lambda_escape(control.lambda_escape, 0..1)]
    }

    fn lambda1_with_rate(&self, y: &[f64]) -> (f64, f64) {
        let rho = self.log_rho(y[1], y[2]).exp();
        let forcing = self.params.coupling() * (rho - self.params.c_b());
        (y[0], -y[0] * y[0] + forcing)
    }
}

/// Continuation past the reach of time coordinates, parametrized by
/// `s = ln(-lambda_1)`. State: `[lambda_n, ln u_1, ln u_n, t - t_0]`.
///
/// With `g = 1 - (k/n)(rho - c_b) e^{-2s}` one has `dt/ds = e^{-s} / g`, so
/// every right-hand side stays finite while `lambda_1`, `rho` and `1 / u_1`
/// grow past the floating-point range. Eigenvalues that diverge only
/// logarithmically in `t_B - t` can be followed to large magnitudes this way.
#[derive(Debug, Clone)]
pub struct TailSystem {
    log: LogReducedSystem,
}

/// End point of a tail continuation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEnd {
    /// `ln |lambda_1|` at the end point.
    pub s: f64,
    /// Eigenvalues beyond the minimal group, ascending.
    pub upper: Vec<f64>,
    pub log_rho: f64,
    /// `t_B - t_0` estimated by the converged elapsed time.
    pub elapsed: f64,
    pub steps: usize,
}

impl TailSystem {
    pub fn new(log: LogReducedSystem) -> Self {
        Self { log }
    }

    /// `(s_0, y_0)` from a state of the time-parametrized system. Needs
    /// `lambda_1 < 0`.
    pub fn start(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        if !(y[0] < 0.0) {
            return Err(Error::UnsupportedData(
                "tail continuation needs lambda_1 < 0",
            ));
        }
        let lam_n = y[0] + self.log.pair_gap(y[1], y[2]);
        Ok(((-y[0]).ln(), vec![lam_n, y[1], y[2], 0.0]))
    }

    fn scale(&self, s: f64, y: &[f64]) -> f64 {
        let p = &self.log.params;
        let log_rho = self.log.log_rho(y[1], y[2]);
        1.0 - p.coupling() * ((log_rho - 2.0 * s).exp() - p.c_b() * (-2.0 * s).exp())
    }

    /// Eigenvalues of the groups after the first.
    pub fn upper(&self, s: f64, y: &[f64]) -> Vec<f64> {
        let (l1, ln) = (y[1], y[2]);
        let lu = self.log.log_u_groups(l1, ln);
        let n = self.log.init.n();
        let lam: Vec<f64> = self.log.weights[1..]
            .iter()
            .zip(&lu[1..])
            .map(|(&(a, b), &lj)| {
                if a == 0.0 {
                    y[0]
                } else {
                    // a v_1 + b v_n over u_j, with v_1 = -exp(s + ln u_1)
                    -a * (s + l1 - lj).exp() + b * y[0] * (ln - lj).exp()
                }
            })
            .collect();
        let first = self.log.groups[0].multiplicity;
        expand(&self.log.groups[1..], &lam, n - first)
    }

    pub fn log_rho(&self, y: &[f64]) -> f64 {
        self.log.log_rho(y[1], y[2])
    }

    /// Event firing once every eigenvalue beyond the minimal group exceeds
    /// `threshold`.
    pub fn upper_escape(&self, threshold: f64) -> Event {
        let sys = self.clone();
        Event::new(EventKind::LambdaEscape, move |s, y: &[f64]| {
            threshold - sys.upper(s, y).into_iter().fold(f64::INFINITY, f64::min)
        })
    }
}

impl OdeSystem for TailSystem {
    fn dim(&self) -> usize {
        4
    }

    fn coordinates(&self) -> Coordinates {
        Coordinates::LogTail
    }

    fn rhs(&self, s: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let p = &self.log.params;
        let g = self.scale(s, y);
        if !(g > 0.0) {
            return Err(Error::UnsupportedData("lambda_1 is no longer decreasing"));
        }
        let log_rho = self.log.log_rho(y[1], y[2]);
        let dt = (-s).exp() / g;
        // (k/n) rho e^{-s} without forming rho
        let forcing = p.coupling() * ((log_rho - s).exp() - p.c_b() * (-s).exp());
        dy[0] = (-y[0] * y[0] * (-s).exp() + forcing) / g;
        dy[1] = -1.0 / g;
        dy[2] = y[0] * dt;
        dy[3] = dt;
        Ok(())
    }
}

/// Coordinates for `n = 4` with a doubled minimum: `W = sqrt(u_1 u_4)` and
/// `r = u_1 / u_4`. State: `[W, W', ln r]`.
///
/// The Abel pairing gives `(ln r)' = -D / W^2` and
/// `W'' = -omega^2 W + phi(r) / W^3` with
/// `phi = ((k rho0 - A0) - D (lambda_{4,0} - lambda_{3,0}) r) / (4 (a_3 r + b_3))`.
/// On `A0 = k rho0` the singular term vanishes as `r -> 0`, so the double pole
/// of the eigenvalues becomes a simple zero of `W`.
#[derive(Debug, Clone)]
pub struct PairProductSystem {
    params: RepParams,
    init: SpectralInitialData,
    gap: f64,
    /// `k rho0 - A0`
    surface_offset: f64,
    /// `D (lambda_{4,0} - lambda_{3,0})`
    inner_gap: f64,
    a3: f64,
    b3: f64,
}

impl PairProductSystem {
    pub fn new(params: RepParams, init: SpectralInitialData) -> Result<Self> {
        if init.n() != 4 || init.j() != 2 {
            return Err(Error::UnsupportedData(
                "pair-product coordinates need n = 4 and J = 2",
            ));
        }
        let l = init.lambda0();
        let red = reduce_to_two(&init)?;
        let gap = l[3] - l[0];
        let a0 = init.a0().expect("n = 4");
        Ok(Self {
            params,
            surface_offset: params.k() * init.rho0() - a0,
            inner_gap: gap * (l[3] - l[2]),
            a3: red.a[2],
            b3: red.b[2],
            gap,
            init,
        })
    }

    /// `u_3 / u_4 = a_3 r + b_3`
    fn inner_ratio(&self, r: f64) -> f64 {
        self.a3 * r + self.b3
    }
}

impl OdeSystem for PairProductSystem {
    fn dim(&self) -> usize {
        3
    }

    fn coordinates(&self) -> Coordinates {
        Coordinates::PairProduct
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let w = y[0];
        if !(w > 0.0) {
            return Err(Error::NonPositiveU { index: 0, value: w });
        }
        let r = y[2].exp();
        let phi = (self.surface_offset - self.inner_gap * r) / (4.0 * self.inner_ratio(r));
        let w2 = self.params.omega() * self.params.omega();
        dy[0] = y[1];
        dy[1] = -w2 * w + phi / (w * w * w);
        dy[2] = -self.gap / (w * w);
        Ok(())
    }

    fn max_step(&self, _t: f64, y: &[f64]) -> Option<f64> {
        near_root_cap(y[0], y[1])
    }
}

impl Observe for PairProductSystem {
    fn observe(&self, y: &[f64]) -> Observation {
        let (w, dw, log_r) = (y[0], y[1], y[2]);
        let r = log_r.exp();
        let q = self.inner_ratio(r);
        let half = self.gap / (2.0 * w * w);
        let mean = dw / w;
        let l1 = mean - half;
        let l4 = mean + half;
        let l3 = (self.a3 * r * l1 + self.b3 * l4) / q;
        let ln_w = w.ln();
        let lu1 = ln_w + 0.5 * log_r;
        let lu4 = ln_w - 0.5 * log_r;
        Observation {
            lambda: vec![l1, l1, l3, l4],
            rho: self.init.rho0() / (w.powi(4) * q),
            log_u: Some(vec![lu1, lu1, lu4 + q.ln(), lu4]),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![
            1.0,
            0.5 * (self.init.lambda_min() + self.init.lambda_max()),
            0.0,
        ]
    }

    fn params(&self) -> &RepParams {
        &self.params
    }

    fn terminal_events(&self, control: &StepControl) -> Vec<Event> {
        let eps = control.u_zero_eps;
        vec![Event::new(EventKind::U1Zero, move |_, y: &[f64]| {
            y[0] - eps
        })]
    }

    fn blowup_root(&self, y: &[f64]) -> Option<(f64, f64)> {
        Some((y[0], y[1]))
    }
}

/// Matrix coordinates. State: `[M (row-major).., rho]`.
#[derive(Debug, Clone)]
pub struct MatrixSystem {
    params: RepParams,
    seed: MatrixState,
}

impl MatrixSystem {
    pub fn new(params: RepParams, seed: MatrixState) -> Self {
        Self { params, seed }
    }

    fn n(&self) -> usize {
        self.params.n()
    }

    pub fn matrix(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.n(), &y[..self.n() * self.n()])
    }
}

impl OdeSystem for MatrixSystem {
    fn dim(&self) -> usize {
        self.n() * self.n() + 1
    }

    fn coordinates(&self) -> Coordinates {
        Coordinates::Matrix
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let nn = self.n() * self.n();
        let st = MatrixState {
            t,
            m: self.matrix(y),
            rho: y[nn],
        };
        let rate = matrix_rhs(&st, &self.params)?;
        for i in 0..self.n() {
            for j in 0..self.n() {
                dy[i * self.n() + j] = rate.m[(i, j)];
            }
        }
        dy[nn] = rate.rho;
        Ok(())
    }
}

impl Observe for MatrixSystem {
    fn observe(&self, y: &[f64]) -> Observation {
        let lambda = real_eigenvalues(&self.matrix(y)).unwrap_or_else(|_| vec![f64::NAN; self.n()]);
        Observation {
            lambda,
            rho: y[self.n() * self.n()],
            log_u: None,
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut y: Vec<f64> = self.seed.m.transpose().iter().copied().collect();
        y.push(self.seed.rho);
        y
    }

    fn params(&self) -> &RepParams {
        &self.params
    }

    fn terminal_events(&self, control: &StepControl) -> Vec<Event> {
        vec![lambda_escape(control.lambda_escape, 0..self.n() * self.n())]
    }
}

fn on_double_pole_surface(params: &RepParams, init: &SpectralInitialData) -> bool {
    classify(params, init).case_label == Some(CaseLabel::IIc)
}

/// Default coordinates for recording a trajectory: the reduced `u` system,
/// the pair-product form on the double-pole surface, and eigenvalue
/// coordinates (a single Riccati equation) when all eigenvalues coincide.
pub fn simulation_coordinates(
    params: RepParams,
    init: SpectralInitialData,
) -> Result<Box<dyn Observe>> {
    if init.all_equal() {
        Ok(Box::new(LambdaSystem::new(params, init)))
    } else if on_double_pole_surface(&params, &init) {
        Ok(Box::new(PairProductSystem::new(params, init)?))
    } else {
        Ok(Box::new(ReducedUSystem::new(params, init)?))
    }
}

/// Coordinates used to resolve the approach to blow-up: as
/// [`simulation_coordinates`] but with the logarithmic reduced form off the
/// double-pole surface, so the tail can be followed to large eigenvalues.
pub fn blowup_coordinates(
    params: RepParams,
    init: SpectralInitialData,
) -> Result<Box<dyn Observe>> {
    if init.all_equal() {
        Ok(Box::new(LambdaSystem::new(params, init)))
    } else if on_double_pole_surface(&params, &init) {
        Ok(Box::new(PairProductSystem::new(params, init)?))
    } else {
        Ok(Box::new(LogReducedSystem::new(params, init)?))
    }
}
