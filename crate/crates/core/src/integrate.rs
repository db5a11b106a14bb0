//! Adaptive Dormand-Prince 5(4) integration with dense output, terminal
//! events, and a fixed-step RK4 reference path.

use serde::Serialize;

use crate::error::{Error, Result};

/// Which coordinate system a trajectory lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coordinates {
    Lambda,
    U,
    ReducedU,
    LogReduced,
    LogTail,
    PairProduct,
    Matrix,
}

/// A first-order system `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn coordinates(&self) -> Coordinates;

    /// Evaluates `f(t, y)` into `dy`. An error marks the state as outside the
    /// domain of the system; the integrator rejects the step and retries smaller.
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;

    /// Additional cap on the next step size.
    fn max_step(&self, _t: f64, _y: &[f64]) -> Option<f64> {
        None
    }

    /// Conservation diagnostic recorded at every accepted step.
    fn invariant_residual(&self, _y: &[f64]) -> Option<f64> {
        None
    }

    /// True when the density has left the representable range.
    fn density_overflow(&self, _y: &[f64]) -> bool {
        false
    }
}

/// Magnitude at which a growing `u` component ends the integration.
pub const U_MAGNITUDE_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Stop threshold for `max |lambda_i|` in eigenvalue coordinates.
    pub lambda_escape: f64,
    /// Threshold for `u_1` proximity to zero.
    pub u_zero_eps: f64,
    pub max_steps: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: 1e-4,
            h_min: 1e-300,
            h_max: f64::INFINITY,
            lambda_escape: 1e8,
            u_zero_eps: 1e-12,
            max_steps: 2_000_000,
        }
    }
}

impl StepControl {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.rtol) || !pos(self.atol) {
            return Err(Error::InvalidControl("rtol and atol must be positive"));
        }
        if !pos(self.h_init) || self.h_min.is_nan() || self.h_min < 0.0 {
            return Err(Error::InvalidControl(
                "h_init must be positive and h_min non-negative",
            ));
        }
        if !(self.h_min <= self.h_max) {
            return Err(Error::InvalidControl("h_min must not exceed h_max"));
        }
        if !(self.lambda_escape > 0.0) {
            return Err(Error::InvalidControl("lambda_escape must be positive"));
        }
        if !(self.u_zero_eps >= 0.0) {
            return Err(Error::InvalidControl("u_zero_eps must be non-negative"));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidControl("max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// `u_1` fell to the proximity threshold.
    U1Zero,
    /// An eigenvalue magnitude passed the escape threshold.
    LambdaEscape,
    /// A `u` component passed the magnitude cap.
    MagnitudeCap,
}

/// A terminal event: the integration stops when `g` goes from positive to
/// non-positive across an accepted step.
type EventFn = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

pub struct Event {
    pub kind: EventKind,
    g: EventFn,
}

impl Event {
    pub fn new(kind: EventKind, g: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            kind,
            g: Box::new(g),
        }
    }

    pub fn value(&self, t: f64, y: &[f64]) -> f64 {
        (self.g)(t, y)
    }
}

impl std::fmt::Debug for Event {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Event").field("kind", &self.kind).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
}

impl Bracket {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Terminal {
    ReachedTmax,
    BlowupEvent {
        kind: EventKind,
        t_event: f64,
        bracket: Bracket,
    },
    StepSizeUnderflow {
        t: f64,
        h: f64,
    },
    DensityOverflow {
        t: f64,
    },
    /// The configured step budget ran out before `t_max`.
    StepLimit {
        t: f64,
    },
}

impl Terminal {
    pub fn is_event(&self) -> bool {
        matches!(self, Terminal::BlowupEvent { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evals: usize,
    /// Invariant residual at every sample, when the system provides one.
    pub invariant: Vec<f64>,
}

impl Diagnostics {
    pub fn invariant_max(&self) -> Option<f64> {
        self.invariant.iter().copied().reduce(f64::max)
    }
}

#[derive(Debug, Clone)]
enum Dense {
    /// Dormand-Prince continuous extension; five coefficient rows of length `dim`.
    Dopri(Vec<f64>),
    /// Cubic Hermite on values and slopes at both ends.
    Hermite { f0: Vec<f64>, f1: Vec<f64> },
}

/// Time-ordered samples with per-step dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub coordinates: Coordinates,
    dim: usize,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    dense: Vec<Dense>,
    pub terminal: Terminal,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("trajectory has a start sample")
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has a start sample")
    }

    /// Index of the step containing `t`, clamped to the recorded range.
    fn segment(&self, t: f64) -> usize {
        let n = self.times.len();
        if n < 2 {
            return 0;
        }
        let idx = self.times.partition_point(|&s| s <= t);
        idx.clamp(1, n - 1) - 1
    }

    /// Dense-output evaluation on `[t_start, t_end]`.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        if self.times.len() < 2 {
            return self.states[0].clone();
        }
        let i = self.segment(t);
        self.eval_segment(i, t)
    }

    pub fn eval_component(&self, t: f64, c: usize) -> f64 {
        self.eval(t)[c]
    }

    fn eval_segment(&self, i: usize, t: f64) -> Vec<f64> {
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let theta = if h > 0.0 { (t - t0) / h } else { 0.0 };
        let y0 = &self.states[i];
        let y1 = &self.states[i + 1];
        match &self.dense[i] {
            Dense::Dopri(r) => {
                let d = self.dim;
                let th1 = 1.0 - theta;
                (0..d)
                    .map(|c| {
                        r[c] + theta
                            * (r[d + c]
                                + th1
                                    * (r[2 * d + c] + theta * (r[3 * d + c] + th1 * r[4 * d + c])))
                    })
                    .collect()
            }
            Dense::Hermite { f0, f1 } => {
                let s = theta;
                let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
                let h10 = s * (1.0 - s) * (1.0 - s);
                let h01 = s * s * (3.0 - 2.0 * s);
                let h11 = s * s * (s - 1.0);
                (0..self.dim)
                    .map(|c| h00 * y0[c] + h10 * h * f0[c] + h01 * y1[c] + h11 * h * f1[c])
                    .collect()
            }
        }
    }

    /// Recorded samples with `t_lo <= t <= t_hi`.
    pub fn samples_within(&self, t_lo: f64, t_hi: f64) -> impl Iterator<Item = (f64, &[f64])> {
        self.times
            .iter()
            .zip(self.states.iter())
            .filter(move |(t, _)| **t >= t_lo && **t <= t_hi)
            .map(|(t, y)| (*t, y.as_slice()))
    }

    /// Gauss-Legendre integral of `f(t, y(t))` over `[a, b]`, applied per step
    /// so the quadrature never straddles a step boundary.
    pub fn integrate_quantity(&self, a: f64, b: f64, f: impl Fn(f64, &[f64]) -> f64) -> f64 {
        // 5-point Gauss-Legendre nodes and weights on [-1, 1].
        const X: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const W: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        if b <= a || self.times.len() < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let first = self.segment(a);
        let last = self.segment(b);
        for i in first..=last {
            let lo = self.times[i].max(a);
            let hi = self.times[i + 1].min(b);
            if hi <= lo {
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            for (x, w) in X.iter().zip(W.iter()) {
                let t = mid + half * x;
                let y = self.eval_segment(i, t);
                total += w * half * f(t, &y);
            }
        }
        total
    }

    /// Brackets the first downward crossing of `g` through zero on the
    /// recorded steps and refines it by bisection on the dense output.
    pub fn find_crossing(&self, g: impl Fn(f64, &[f64]) -> f64) -> Option<Bracket> {
        let mut prev = g(self.times[0], &self.states[0]);
        for i in 0..self.times.len().saturating_sub(1) {
            let next = g(self.times[i + 1], &self.states[i + 1]);
            if prev > 0.0 && next <= 0.0 {
                return Some(self.refine_in_segment(i, &g));
            }
            prev = next;
        }
        None
    }

    fn refine_in_segment(&self, i: usize, g: &impl Fn(f64, &[f64]) -> f64) -> Bracket {
        bisect(self.times[i], self.times[i + 1], |t| {
            g(t, &self.eval_segment(i, t))
        })
    }
}

/// Brackets the first step on which `u_1` falls to `eps` and refines the
/// crossing by bisection on the dense output.
pub fn detect_u1_zero(traj: &Trajectory, u1: impl Fn(&[f64]) -> f64, eps: f64) -> Result<Bracket> {
    traj.find_crossing(|_, y| u1(y) - eps)
        .ok_or(Error::NoCrossing)
}

/// Bisection for a downward crossing `g(lo) > 0 >= g(hi)` down to width
/// `1e-12 * max(1, |hi|)`.
pub(crate) fn bisect(mut lo: f64, mut hi: f64, g: impl Fn(f64) -> f64) -> Bracket {
    let tol = 1e-12 * hi.abs().max(1.0);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Bracket { lo, hi }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// Step-size controller (proportional-integral).
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y1: Vec<f64>,
    err: Vec<f64>,
}

impl Stages {
    fn new(d: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; d]),
            tmp: vec![0.0; d],
            y1: vec![0.0; d],
            err: vec![0.0; d],
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One Dormand-Prince step from `(t, y)` with `k[0] = f(t, y)` already set.
/// Returns the weighted max-norm error or `None` if a stage left the domain.
#[allow(clippy::needless_range_loop)] // stages index several arrays in lockstep
fn dopri_step(
    sys: &dyn OdeSystem,
    t: f64,
    y: &[f64],
    h: f64,
    s: &mut Stages,
    control: &StepControl,
    evals: &mut usize,
) -> Option<f64> {
    let d = y.len();
    macro_rules! stage {
        ($idx:expr, $c:expr, [$(($j:expr, $a:expr)),*]) => {{
            for i in 0..d {
                s.tmp[i] = y[i] + h * (0.0 $(+ $a * s.k[$j][i])*);
            }
            if !all_finite(&s.tmp) {
                return None;
            }
            let (head, tail) = s.k.split_at_mut($idx);
            let _ = head;
            *evals += 1;
            if sys.rhs(t + $c * h, &s.tmp, &mut tail[0]).is_err() || !all_finite(&tail[0]) {
                return None;
            }
        }};
    }
    stage!(1, C2, [(0, A21)]);
    stage!(2, C3, [(0, A31), (1, A32)]);
    stage!(3, C4, [(0, A41), (1, A42), (2, A43)]);
    stage!(4, C5, [(0, A51), (1, A52), (2, A53), (3, A54)]);
    stage!(5, 1.0, [(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
    for i in 0..d {
        s.y1[i] = y[i]
            + h * (A71 * s.k[0][i]
                + A73 * s.k[2][i]
                + A74 * s.k[3][i]
                + A75 * s.k[4][i]
                + A76 * s.k[5][i]);
    }
    if !all_finite(&s.y1) {
        return None;
    }
    *evals += 1;
    if sys.rhs(t + h, &s.y1, &mut s.k[6]).is_err() || !all_finite(&s.k[6]) {
        return None;
    }
    let mut err: f64 = 0.0;
    for i in 0..d {
        s.err[i] = h
            * (E1 * s.k[0][i]
                + E3 * s.k[2][i]
                + E4 * s.k[3][i]
                + E5 * s.k[4][i]
                + E6 * s.k[5][i]
                + E7 * s.k[6][i]);
        let sc = control.atol + control.rtol * y[i].abs().max(s.y1[i].abs());
        err = err.max((s.err[i] / sc).abs());
    }
    if err.is_finite() {
        Some(err)
    } else {
        None
    }
}

fn dense_coefficients(y0: &[f64], y1: &[f64], h: f64, k: &[Vec<f64>; 7]) -> Vec<f64> {
    let d = y0.len();
    let mut r = vec![0.0; 5 * d];
    for i in 0..d {
        let ydiff = y1[i] - y0[i];
        let bspl = h * k[0][i] - ydiff;
        r[i] = y0[i];
        r[d + i] = ydiff;
        r[2 * d + i] = bspl;
        r[3 * d + i] = ydiff - h * k[6][i] - bspl;
        r[4 * d + i] = h
            * (D1 * k[0][i]
                + D3 * k[2][i]
                + D4 * k[3][i]
                + D5 * k[4][i]
                + D6 * k[5][i]
                + D7 * k[6][i]);
    }
    r
}

/// Adaptive integration from `(t0, y0)` up to `t_max` or the first terminal event.
pub fn integrate(
    sys: &dyn OdeSystem,
    t0: f64,
    y0: &[f64],
    control: &StepControl,
    t_max: f64,
    events: &[Event],
) -> Result<Trajectory> {
    control.validate()?;
    let d = sys.dim();
    if y0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: y0.len(),
        });
    }
    if !all_finite(y0) {
        return Err(Error::NonFiniteState(t0));
    }
    if !(t_max > t0) {
        return Err(Error::InvalidControl("t_max must exceed the start time"));
    }

    let mut traj = Trajectory {
        coordinates: sys.coordinates(),
        dim: d,
        times: vec![t0],
        states: vec![y0.to_vec()],
        dense: Vec::new(),
        terminal: Terminal::ReachedTmax,
        diagnostics: Diagnostics::default(),
    };
    if let Some(r) = sys.invariant_residual(y0) {
        traj.diagnostics.invariant.push(r);
    }

    let mut st = Stages::new(d);
    let mut evals = 1;
    sys.rhs(t0, y0, &mut st.k[0])?;
    if !all_finite(&st.k[0]) {
        return Err(Error::NonFiniteState(t0));
    }
    let mut g_prev: Vec<f64> = events.iter().map(|e| e.value(t0, y0)).collect();

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h = control.h_init.min(control.h_max).min(t_max - t0);
    let mut err_old: f64 = 1e-4;
    let mut rejected_last = false;

    loop {
        if traj.diagnostics.accepted_steps >= control.max_steps {
            traj.terminal = Terminal::StepLimit { t };
            break;
        }
        if let Some(cap) = sys.max_step(t, &y) {
            h = h.min(cap);
        }
        let last = t + h >= t_max;
        if last {
            h = t_max - t;
        }
        if h < control.h_min || t + h <= t {
            traj.terminal = Terminal::StepSizeUnderflow { t, h };
            break;
        }

        match dopri_step(sys, t, &y, h, &mut st, control, &mut evals) {
            Some(err) if err <= 1.0 => {
                let t_new = if last { t_max } else { t + h };
                let dense = dense_coefficients(&y, &st.y1, h, &st.k);
                traj.times.push(t_new);
                traj.states.push(st.y1.clone());
                traj.dense.push(Dense::Dopri(dense));
                traj.diagnostics.accepted_steps += 1;
                if let Some(r) = sys.invariant_residual(&st.y1) {
                    traj.diagnostics.invariant.push(r);
                }

                // FSAL
                let (first, rest) = st.k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                std::mem::swap(&mut y, &mut st.y1);
                let t_prev = t;
                t = t_new;

                if sys.density_overflow(&y) {
                    traj.terminal = Terminal::DensityOverflow { t };
                    break;
                }

                let mut fired = None;
                for (idx, ev) in events.iter().enumerate() {
                    let g = ev.value(t, &y);
                    if g_prev[idx] > 0.0 && g <= 0.0 && fired.is_none() {
                        let seg = traj.dense.len() - 1;
                        let b = traj.refine_in_segment(seg, &|s: f64, ys: &[f64]| ev.value(s, ys));
                        fired = Some((ev.kind, b));
                    }
                    g_prev[idx] = g;
                }
                if let Some((kind, bracket)) = fired {
                    debug_assert!(bracket.lo >= t_prev);
                    traj.terminal = Terminal::BlowupEvent {
                        kind,
                        t_event: bracket.hi,
                        bracket,
                    };
                    break;
                }
                if last {
                    traj.terminal = Terminal::ReachedTmax;
                    break;
                }

                let fac11 = err.max(1e-16).powf(0.2 - 0.75 * BETA);
                let mut fac = fac11 / err_old.powf(BETA) / SAFETY;
                fac = fac.clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                let mut h_new = h / fac;
                if rejected_last {
                    h_new = h_new.min(h);
                }
                err_old = err.max(1e-4);
                rejected_last = false;
                h = h_new.min(control.h_max);
            }
            Some(err) => {
                traj.diagnostics.rejected_steps += 1;
                let fac11 = err.powf(0.2 - 0.75 * BETA);
                h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
                rejected_last = true;
            }
            None => {
                traj.diagnostics.rejected_steps += 1;
                h *= 0.25;
                rejected_last = true;
            }
        }
    }
    traj.diagnostics.rhs_evals = evals;
    Ok(traj)
}

/// Classical fixed-step fourth-order Runge-Kutta, recording every
/// `stride`-th step with cubic Hermite dense output between records.
pub fn reference_integrate(
    sys: &dyn OdeSystem,
    t0: f64,
    y0: &[f64],
    h_fixed: f64,
    t_max: f64,
    stride: usize,
) -> Result<Trajectory> {
    if !(h_fixed > 0.0) || !h_fixed.is_finite() {
        return Err(Error::InvalidControl("h_fixed must be positive"));
    }
    if !(t_max > t0) {
        return Err(Error::InvalidControl("t_max must exceed the start time"));
    }
    let d = sys.dim();
    if y0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: y0.len(),
        });
    }
    if !all_finite(y0) {
        return Err(Error::NonFiniteState(t0));
    }
    let stride = stride.max(1);
    let steps = ((t_max - t0) / h_fixed).round().max(1.0) as usize;

    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut y = y0.to_vec();
    let mut evals = 0;

    let mut times = vec![t0];
    let mut states = vec![y.clone()];
    let mut slopes = Vec::new();
    let mut diagnostics = Diagnostics::default();
    if let Some(r) = sys.invariant_residual(&y) {
        diagnostics.invariant.push(r);
    }

    for step in 0..steps {
        let t = t0 + step as f64 * h_fixed;
        let h = if step + 1 == steps {
            t_max - t
        } else {
            h_fixed
        };
        sys.rhs(t, &y, &mut k1)?;
        if step % stride == 0 && slopes.len() < times.len() {
            slopes.push(k1.clone());
        }
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        sys.rhs(t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        sys.rhs(t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..d {
            tmp[i] = y[i] + h * k3[i];
        }
        sys.rhs(t + h, &tmp, &mut k4)?;
        evals += 4;
        for i in 0..d {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t_new = if step + 1 == steps { t_max } else { t + h };
        if !all_finite(&y) {
            return Err(Error::NonFiniteState(t_new));
        }
        diagnostics.accepted_steps += 1;
        if (step + 1) % stride == 0 || step + 1 == steps {
            times.push(t_new);
            states.push(y.clone());
            if let Some(r) = sys.invariant_residual(&y) {
                diagnostics.invariant.push(r);
            }
        }
    }
    // slope at the final sample
    let mut f_end = vec![0.0; d];
    sys.rhs(*times.last().unwrap(), &y, &mut f_end)?;
    evals += 1;
    slopes.truncate(times.len() - 1);
    while slopes.len() < times.len() - 1 {
        // a final partial stride: recompute the slope at its start sample
        let i = slopes.len();
        let mut f = vec![0.0; d];
        sys.rhs(times[i], &states[i], &mut f)?;
        evals += 1;
        slopes.push(f);
    }
    slopes.push(f_end);
    let dense = (0..times.len() - 1)
        .map(|i| Dense::Hermite {
            f0: slopes[i].clone(),
            f1: slopes[i + 1].clone(),
        })
        .collect();
    diagnostics.rhs_evals = evals;
    Ok(Trajectory {
        coordinates: sys.coordinates(),
        dim: d,
        times,
        states,
        dense,
        terminal: Terminal::ReachedTmax,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y' = -y, y(0) = 1
    struct Decay;

    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn coordinates(&self) -> Coordinates {
            Coordinates::Lambda
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = -y[0];
            Ok(())
        }
    }

    /// y' = y^2, y(0) = 1: pole at t = 1.
    struct Pole;

    impl OdeSystem for Pole {
        fn dim(&self) -> usize {
            1
        }
        fn coordinates(&self) -> Coordinates {
            Coordinates::Lambda
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = y[0] * y[0];
            Ok(())
        }
    }

    /// Harmonic oscillator for dense-output checks.
    struct Oscillator;

    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn coordinates(&self) -> Coordinates {
            Coordinates::U
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        }
    }

    #[test]
    fn decay_matches_exponential() {
        let tr = integrate(&Decay, 0.0, &[1.0], &StepControl::default(), 5.0, &[]).unwrap();
        assert_eq!(tr.terminal, Terminal::ReachedTmax);
        assert_eq!(tr.t_end(), 5.0);
        assert!((tr.last_state()[0] - (-5.0f64).exp()).abs() < 1e-11);
    }

    #[test]
    fn dense_output_is_accurate_between_steps() {
        let tr = integrate(
            &Oscillator,
            0.0,
            &[0.0, 1.0],
            &StepControl::default(),
            10.0,
            &[],
        )
        .unwrap();
        for i in 0..200 {
            let t = 0.05 * i as f64;
            let y = tr.eval(t);
            assert!((y[0] - t.sin()).abs() < 1e-9, "t={t}");
            assert!((y[1] - t.cos()).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn escape_event_brackets_threshold() {
        let ev = Event::new(EventKind::LambdaEscape, |_, y: &[f64]| 1e6 - y[0].abs());
        let tr = integrate(&Pole, 0.0, &[1.0], &StepControl::default(), 2.0, &[ev]).unwrap();
        match tr.terminal {
            Terminal::BlowupEvent { kind, bracket, .. } => {
                assert_eq!(kind, EventKind::LambdaEscape);
                assert!(bracket.width() <= 1e-12);
                // y = 1/(1-t) hits 1e6 at t = 1 - 1e-6
                assert!((bracket.mid() - (1.0 - 1e-6)).abs() < 1e-9);
            }
            other => panic!("unexpected terminal {other:?}"),
        }
    }

    #[test]
    fn linear_crossing_bisects_to_root() {
        let b = bisect(0.0, 2.0, |t| 1.0 - t);
        assert!(b.width() <= 2e-12);
        assert!((b.mid() - 1.0).abs() < 1e-12);
    }

    /// u' = -1, u(0) = 1
    struct Line;

    impl OdeSystem for Line {
        fn dim(&self) -> usize {
            1
        }
        fn coordinates(&self) -> Coordinates {
            Coordinates::U
        }
        fn rhs(&self, _t: f64, _y: &[f64], dy: &mut [f64]) -> Result<()> {
            dy[0] = -1.0;
            Ok(())
        }
    }

    #[test]
    fn u1_zero_on_a_linear_profile() {
        let tr = integrate(&Line, 0.0, &[1.0], &StepControl::default(), 2.0, &[]).unwrap();
        let b = detect_u1_zero(&tr, |y| y[0], 0.0).unwrap();
        assert!(b.width() <= 2e-12);
        assert!((b.mid() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn u1_zero_absent() {
        let tr = integrate(&Decay, 0.0, &[1.0], &StepControl::default(), 2.0, &[]).unwrap();
        assert_eq!(detect_u1_zero(&tr, |y| y[0], 1e-12), Err(Error::NoCrossing));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |h: f64| {
            let tr = reference_integrate(&Decay, 0.0, &[1.0], h, 1.0, 1).unwrap();
            (tr.last_state()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 16.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn rk4_stride_keeps_hermite_dense_output() {
        let tr = reference_integrate(&Oscillator, 0.0, &[0.0, 1.0], 1e-3, 2.0, 10).unwrap();
        assert_eq!(tr.len(), 201);
        let y = tr.eval(1.2345);
        assert!((y[0] - 1.2345f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let a = integrate(
            &Oscillator,
            0.0,
            &[0.0, 1.0],
            &StepControl::default(),
            3.0,
            &[],
        )
        .unwrap();
        let b = integrate(
            &Oscillator,
            0.0,
            &[0.0, 1.0],
            &StepControl::default(),
            3.0,
            &[],
        )
        .unwrap();
        assert_eq!(a.times(), b.times());
        assert_eq!(a.states(), b.states());
    }

    #[test]
    fn invalid_control_is_rejected() {
        let c = StepControl {
            rtol: -1.0,
            ..StepControl::default()
        };
        assert!(matches!(
            integrate(&Decay, 0.0, &[1.0], &c, 1.0, &[]),
            Err(Error::InvalidControl(_))
        ));
    }

    #[test]
    fn quadrature_over_dense_output() {
        let tr = integrate(&Decay, 0.0, &[1.0], &StepControl::default(), 3.0, &[]).unwrap();
        let q = tr.integrate_quantity(0.5, 2.5, |_, y| y[0]);
        let exact = (-0.5f64).exp() - (-2.5f64).exp();
        assert!((q - exact).abs() < 1e-10);
    }
}
