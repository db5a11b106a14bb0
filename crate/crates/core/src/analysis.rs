//! Blow-up time extraction, the lower bound on `t_B`, limits of the extreme
//! pair, asymptotic rate fits and the checks that tie them together.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use serde::Serialize;

use crate::dynamics::{blowup_coordinates, Observation, Observe, TailEnd};
use crate::error::{Error, Result};
use crate::integrate::{integrate, Bracket, EventKind, StepControl, Terminal, Trajectory};
use crate::model::{classify, CaseLabel, Classification, RepParams, SpectralInitialData, Verdict};

/// Largest ladder offset `t_B - t`.
pub const LADDER_BASE: f64 = 1e-2;
/// Ladder offsets are `LADDER_BASE * 2^-m` for `m < LADDER_LEVELS`.
pub const LADDER_LEVELS: usize = 13;
/// Magnitude an eigenvalue must pass at the last sample to count as diverged.
pub const LAMBDA_CHECK: f64 = 1e3;
pub const LOWER_BOUND_SLACK: f64 = 1e-9;
pub const RATE_RTOL: f64 = 1e-2;
pub const IDENTITY_TOL: f64 = 1e-4;
pub const DOUBLING_ROUNDS: usize = 6;

/// `(1/omega) arctan(lambda_{1,0}/omega) + pi/(2 omega)`.
pub fn lower_bound_tb(params: &RepParams, lambda10: f64) -> f64 {
    let w = params.omega();
    ((lambda10 / w).atan() + FRAC_PI_2) / w
}

pub fn ladder_offsets() -> Vec<f64> {
    (0..LADDER_LEVELS)
        .map(|m| LADDER_BASE * 0.5f64.powi(m as i32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlowupTime {
    #[serde(rename = "tB")]
    pub t_b: f64,
    pub bracket: Bracket,
    /// True when `t_B` comes from the eigenvalue pole fit rather than a
    /// transversal zero.
    pub tangential: bool,
}

/// Transversal zero of the blow-up coordinate when the trajectory ended on
/// one, otherwise linear extrapolation of `1 / lambda_1` to zero from the
/// last sample.
pub fn find_blowup_time(sys: &dyn Observe, traj: &Trajectory) -> Result<BlowupTime> {
    let (kind, bracket) = match traj.terminal {
        Terminal::BlowupEvent { kind, bracket, .. } => (kind, bracket),
        Terminal::ReachedTmax => return Err(Error::NoBlowupBeforeTmax(traj.t_end())),
        _ => return Err(Error::NotABlowupTrajectory),
    };
    if kind == EventKind::U1Zero {
        let y = traj.eval(bracket.hi);
        if let Some((value, slope)) = sys.blowup_root(&y) {
            // a root the event could not see as transversal falls through to the pole fit
            if slope < 0.0 && value / -slope < 1e-6 {
                let t_b = bracket.hi + value / -slope;
                return Ok(BlowupTime {
                    t_b,
                    bracket: Bracket {
                        lo: bracket.lo,
                        hi: t_b.max(bracket.hi),
                    },
                    tangential: false,
                });
            }
        }
    }
    let (t_b, spread) = pole_fit(sys, traj)?;
    let t_end = traj.t_end();
    Ok(BlowupTime {
        t_b,
        bracket: Bracket {
            lo: t_end.max(t_b - spread),
            hi: t_b + spread,
        },
        tangential: true,
    })
}

/// `t + lambda_1 / lambda_1'` at the last sample, and its change against the
/// previous sample as an error scale.
fn pole_fit(sys: &dyn Observe, traj: &Trajectory) -> Result<(f64, f64)> {
    let estimate = |i: usize| {
        let (l, lp) = sys.lambda1_with_rate(&traj.states()[i]);
        traj.times()[i] + l / lp
    };
    let n = traj.len();
    let (l, _) = sys.lambda1_with_rate(traj.last_state());
    if n < 2 || !(l < -LAMBDA_CHECK) {
        return Err(Error::NotABlowupTrajectory);
    }
    let last = estimate(n - 1);
    let prev = estimate(n - 2);
    if !last.is_finite() || last < traj.t_end() {
        return Err(Error::NotABlowupTrajectory);
    }
    Ok((last, (last - prev).abs()))
}

/// Largest `ln |lambda_1|` reached by a tail continuation.
pub const TAIL_S_MAX: f64 = 1e9;

/// Follows the tail in `ln(-lambda_1)` from the last sample until every
/// eigenvalue above the minimal group exceeds `LAMBDA_CHECK` or
/// `ln |lambda_1|` reaches `s_max`. `None` when the coordinates have no
/// continuation.
pub fn continue_tail(
    sys: &dyn Observe,
    traj: &Trajectory,
    control: &StepControl,
    s_max: f64,
) -> Result<Option<TailEnd>> {
    let Some(tail) = sys.tail() else {
        return Ok(None);
    };
    let (s0, y0) = tail.start(traj.last_state())?;
    let events = [tail.upper_escape(LAMBDA_CHECK)];
    let control = StepControl {
        h_init: 1e-3,
        ..*control
    };
    let run = integrate(&tail, s0, &y0, &control, s_max, &events)?;
    let y = run.last_state();
    Ok(Some(TailEnd {
        s: run.t_end(),
        upper: tail.upper(run.t_end(), y),
        log_rho: tail.log_rho(y),
        elapsed: y[3],
        steps: run.diagnostics.accepted_steps,
    }))
}

/// e-folds of `|lambda_1|` past the last sample over which divergence is
/// confirmed.
pub const TAIL_CONFIRM: f64 = 10.0;

/// Follows the tail `TAIL_CONFIRM` e-folds of `|lambda_1|` past the last
/// sample. A near-collision, where `u_1` comes close to zero and turns back,
/// escapes the time coordinates just like a blow-up but shows up here as
/// `lambda_1` ceasing to decrease.
pub fn confirm_divergence(
    sys: &dyn Observe,
    traj: &Trajectory,
    control: &StepControl,
) -> Result<()> {
    let Some(tail) = sys.tail() else {
        return Ok(());
    };
    let (s0, y0) = tail.start(traj.last_state())?;
    let control = StepControl {
        h_init: 1e-3,
        ..*control
    };
    let turned = |s: f64| Error::NearCollision { lambda_1: -s.exp() };
    match integrate(&tail, s0, &y0, &control, s0 + TAIL_CONFIRM, &[]) {
        Ok(run) if run.terminal == Terminal::ReachedTmax => Ok(()),
        Ok(run) => Err(turned(run.t_end())),
        Err(Error::UnsupportedData(_)) | Err(Error::StepSizeUnderflow { .. }) => Err(turned(s0)),
        Err(e) => Err(e),
    }
}

/// Observations on the geometric ladder `t_B - tau_m`, restricted to the
/// recorded time range.
#[derive(Debug, Clone)]
pub struct Ladder {
    pub taus: Vec<f64>,
    pub obs: Vec<Observation>,
}

impl Ladder {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn decades(&self) -> f64 {
        match (self.taus.first(), self.taus.last()) {
            (Some(a), Some(b)) => (a / b).log10(),
            _ => 0.0,
        }
    }

    fn values(&self, q: Quantity) -> Vec<f64> {
        self.obs.iter().map(|o| q.read(o)).collect()
    }
}

pub fn sample_ladder(sys: &dyn Observe, traj: &Trajectory, t_b: f64) -> Result<Ladder> {
    let (t0, t1) = (traj.t_start(), traj.t_end());
    let mut taus = Vec::new();
    let mut obs = Vec::new();
    for tau in ladder_offsets() {
        let t = t_b - tau;
        if t < t0 || t > t1 {
            continue;
        }
        taus.push(tau);
        obs.push(sys.observe(&traj.eval(t)));
    }
    let ladder = Ladder { taus, obs };
    if ladder.len() < 4 || ladder.decades() < 2.0 {
        return Err(Error::InsufficientTailSamples(format!(
            "{} ladder points spanning {:.2} decades",
            ladder.len(),
            ladder.decades()
        )));
    }
    Ok(ladder)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    Lambda(usize),
    Rho,
    /// `sum(lambda_i)`
    Trace,
}

impl Quantity {
    fn read(self, o: &Observation) -> f64 {
        match self {
            Quantity::Lambda(i) => o.lambda[i],
            Quantity::Rho => o.rho,
            Quantity::Trace => o.lambda.iter().sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    /// Selected pole order; 0 for growth slower than any pole.
    pub exponent: f64,
    /// Negated log-log least-squares slope.
    pub measured_exponent: f64,
    /// Extrapolated limit of `(t_B - t)^exponent * quantity`, or the slope
    /// `K` in `quantity ~ K |ln(t_B - t)|` for logarithmic growth.
    pub coefficient: f64,
    #[serde(rename = "windowDecades")]
    pub window_decades: u32,
    /// Largest log deviation of the scaled quantity from the coefficient.
    pub residual: f64,
    pub log_growth: bool,
    #[serde(rename = "C")]
    pub c: f64,
}

/// `2 s_last - s_prev`: removes the leading linear term on a halving ladder.
pub fn richardson(values: &[f64]) -> f64 {
    match values {
        [] => f64::NAN,
        [x] => *x,
        [.., a, b] => 2.0 * b - a,
    }
}

fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Largest `|ln(s / c)|`; infinite when a value has the wrong sign. Agrees
/// with the relative deviation for small spreads and treats growth and decay
/// by the same factor alike.
fn log_spread(scaled: &[f64], c: f64) -> f64 {
    scaled.iter().fold(0.0f64, |m, s| {
        let r = s / c;
        m.max(if r > 0.0 { r.ln().abs() } else { f64::INFINITY })
    })
}

/// Pole order and prefactor of `quantity` on the ladder. Growth slower than
/// `1/(t_B - t)^{1/2}` is reported with exponent 0, flagged as logarithmic
/// when the quantity keeps increasing by comparable amounts per halving.
pub fn fit_rate(ladder: &Ladder, quantity: Quantity, trials: &[f64]) -> Result<RateFit> {
    if ladder.len() < 4 {
        return Err(Error::InsufficientTailSamples(format!(
            "{} ladder points",
            ladder.len()
        )));
    }
    let q = ladder.values(quantity);
    let log_tau: Vec<f64> = ladder.taus.iter().map(|t| t.ln()).collect();
    let log_q: Vec<f64> = q
        .iter()
        .map(|v| v.abs().max(f64::MIN_POSITIVE).ln())
        .collect();
    let measured = -least_squares(&log_tau, &log_q).0;
    let window_decades = ladder.decades().floor() as u32;

    if measured < 0.5 {
        let abs: Vec<f64> = q.iter().map(|v| v.abs()).collect();
        let steps: Vec<f64> = abs.windows(2).map(|w| w[1] - w[0]).collect();
        let tail = &steps[steps.len() / 2..];
        let growing = tail.iter().all(|d| *d > 0.0) && tail[tail.len() - 1] >= 0.5 * tail[0];
        if growing {
            let x: Vec<f64> = log_tau.iter().map(|l| -l).collect();
            let (k, b) = least_squares(&x, &abs);
            let residual = abs.iter().zip(&x).fold(0.0f64, |m, (a, x)| {
                m.max((a - (k * x + b)).abs() / a.max(f64::MIN_POSITIVE))
            });
            let coefficient = k * q[q.len() - 1].signum();
            return Ok(RateFit {
                exponent: 0.0,
                measured_exponent: measured,
                coefficient,
                window_decades,
                residual,
                log_growth: true,
                c: coefficient.abs(),
            });
        }
        let coefficient = richardson(&q);
        return Ok(RateFit {
            exponent: 0.0,
            measured_exponent: measured,
            coefficient,
            window_decades,
            residual: log_spread(&q, coefficient),
            log_growth: false,
            c: coefficient.abs(),
        });
    }

    let mut scored: Vec<(f64, f64, f64)> = trials
        .iter()
        .map(|&e| {
            let scaled: Vec<f64> = q
                .iter()
                .zip(&ladder.taus)
                .map(|(v, t)| t.powf(e) * v)
                .collect();
            let c = richardson(&scaled);
            (e, log_spread(&scaled, c), c)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let Some(&(exponent, residual, coefficient)) = scored.first() else {
        return Err(Error::InsufficientTailSamples("no trial exponents".into()));
    };
    if scored
        .get(1)
        .is_some_and(|second| !(second.1 >= 2.0 * residual))
    {
        return Err(Error::AmbiguousExponent(
            scored.iter().map(|s| (s.0, s.1)).collect(),
        ));
    }
    Ok(RateFit {
        exponent,
        measured_exponent: measured,
        coefficient,
        window_decades,
        residual,
        log_growth: false,
        c: coefficient.abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PqEstimate {
    /// Extrapolated `lim -v_1 u_n`.
    pub p: f64,
    /// Extrapolated `lim u_1 v_n`.
    pub q: f64,
    /// Values at the deepest ladder point.
    pub p_raw: f64,
    pub q_raw: f64,
}

/// Limits of `-v_1 u_n = -lambda_1 u_1 u_n` and `u_1 v_n = lambda_n u_1 u_n`.
pub fn estimate_pq(ladder: &Ladder) -> Result<PqEstimate> {
    if ladder.len() < 4 {
        return Err(Error::InsufficientTailSamples(format!(
            "{} ladder points",
            ladder.len()
        )));
    }
    let mut ps = Vec::with_capacity(ladder.len());
    let mut qs = Vec::with_capacity(ladder.len());
    for o in &ladder.obs {
        let lu = o
            .log_u
            .as_ref()
            .ok_or_else(|| Error::InsufficientTailSamples("coordinates carry no u".into()))?;
        let n = lu.len();
        let prod = (lu[0] + lu[n - 1]).exp();
        ps.push(-o.lambda[0] * prod);
        qs.push(o.lambda[n - 1] * prod);
    }
    Ok(PqEstimate {
        p: richardson(&ps),
        q: richardson(&qs),
        p_raw: ps[ps.len() - 1],
        q_raw: qs[qs.len() - 1],
    })
}

/// Measured inputs to the predicted rate table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Measured {
    #[serde(rename = "tB")]
    pub t_b: f64,
    #[serde(rename = "R0")]
    pub r0: Option<f64>,
    /// Measured `C = lim (t_B - t)^2 |lambda_1|` on the double-pole surface.
    #[serde(rename = "C")]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictedRates {
    pub case: CaseLabel,
    /// Pole order of `lambda_1`.
    pub order: f64,
    /// Predicted `lim (t_B - t)^order lambda_1`, when determined.
    pub xi1: Option<f64>,
    pub xin: Option<f64>,
    /// `lambda_n` grows slower than any pole.
    pub xin_sub_pole: bool,
    /// Predicted `lim (t_B - t)^4 rho` on the double-pole surface.
    pub rho_coefficient: Option<f64>,
    /// Pole order of `rho`, or an upper bound on it (case IIa).
    pub rho_order: f64,
    /// Roots of `xi^2 + xi - k rho0 t_B^2 R0 / n = 0`, when `R0` was measured.
    pub quadratic_roots: Option<(f64, f64)>,
}

pub fn predicted_rates(
    classification: &Classification,
    params: &RepParams,
    init: &SpectralInitialData,
    measured: &Measured,
) -> Result<PredictedRates> {
    let case = classification.case_label.ok_or(Error::UnresolvedCase)?;
    let n = init.n() as f64;
    let j = init.j() as f64;
    let quadratic_roots = measured.r0.map(|r0| {
        let c = params.k() * init.rho0() * measured.t_b * measured.t_b * r0 / n;
        let d = (1.0 + 4.0 * c).sqrt();
        ((-1.0 - d) / 2.0, (-1.0 + d) / 2.0)
    });
    let base = PredictedRates {
        case,
        order: 1.0,
        xi1: Some(-1.0),
        xin: Some(0.0),
        xin_sub_pole: true,
        rho_coefficient: None,
        rho_order: 1.0,
        quadratic_roots,
    };
    Ok(match case {
        CaseLabel::I => base,
        CaseLabel::IIa => PredictedRates {
            rho_order: 2.0,
            ..base
        },
        CaseLabel::IIb => {
            let a0 = classification.a0.ok_or(Error::UnresolvedCase)?;
            let s = (a0 / (a0 - params.k() * init.rho0())).sqrt();
            PredictedRates {
                xi1: Some(-0.5 - 0.5 * s),
                xin: Some(-0.5 + 0.5 * s),
                xin_sub_pole: false,
                rho_order: 2.0,
                ..base
            }
        }
        CaseLabel::IIc => PredictedRates {
            order: 2.0,
            xi1: measured.c.map(|c| -c),
            xin: measured.c,
            xin_sub_pole: false,
            // balance of rho' = -rho sum(lambda) against lambda_1' ~ kappa rho
            rho_coefficient: measured.c.map(|c| 4.0 * c * c / params.k()),
            rho_order: 4.0,
            ..base
        },
        CaseLabel::III => {
            let c = (n - j - 2.0) / (n - 2.0 * j);
            PredictedRates {
                xi1: Some(-c),
                xin: Some(c - 1.0),
                xin_sub_pole: false,
                rho_order: 2.0,
                ..base
            }
        }
    })
}

/// Running integral of the density sampled on the ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityIntegral {
    /// `int_0^{t_B - tau_m} rho` for each ladder offset.
    pub running: Vec<f64>,
    /// Consecutive ladder halvings over which the integral grew by at least
    /// half its growth over the first halving.
    pub rounds: usize,
}

/// Divergence test for `int_0^t rho`: each halving of `t_B - t` must keep
/// adding a non-vanishing amount. Integrable densities (`rho = O(tau^-a)`
/// with `a < 1`) add geometrically less per halving and stop passing.
pub fn density_integral_test(
    sys: &dyn Observe,
    traj: &Trajectory,
    ladder: &Ladder,
    t_b: f64,
) -> DensityIntegral {
    let rho = |_: f64, y: &[f64]| sys.observe(y).rho;
    let t0 = traj.t_start();
    let mut running = Vec::with_capacity(ladder.len());
    let mut prev_t = t0;
    let mut acc = 0.0;
    for tau in &ladder.taus {
        let t = t_b - tau;
        acc += traj.integrate_quantity(prev_t, t, rho);
        running.push(acc);
        prev_t = t;
    }
    let increments: Vec<f64> = running.windows(2).map(|w| w[1] - w[0]).collect();
    let rounds = match increments.first() {
        Some(&first) if first > 0.0 => increments.iter().take_while(|d| **d >= 0.5 * first).count(),
        _ => 0,
    };
    DensityIntegral { running, rounds }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonOscillation {
    pub passed: bool,
    /// Indices of diverging eigenvalues that are not eventually monotone.
    pub violations: Vec<usize>,
}

/// True when `values` has no interior local extremum whose amplitude exceeds
/// `rel` times the local magnitude.
pub fn eventually_monotone(values: &[f64], rel: f64) -> bool {
    let mut dir = 0.0f64;
    let mut pivot = match values.first() {
        Some(v) => *v,
        None => return true,
    };
    for &v in &values[1..] {
        let d = v - pivot;
        if d.abs() <= rel * v.abs().max(pivot.abs()) {
            continue;
        }
        if dir != 0.0 && d.signum() != dir {
            return false;
        }
        dir = d.signum();
        pivot = v;
    }
    true
}

/// Each eigenvalue that diverges must approach `t_B` monotonically over the
/// last ladder window.
pub fn check_non_oscillation(sys: &dyn Observe, traj: &Trajectory, t_b: f64) -> NonOscillation {
    let lo = t_b - LADDER_BASE;
    let series: Vec<Vec<f64>> = traj
        .samples_within(lo, f64::INFINITY)
        .map(|(_, y)| sys.observe(y).lambda)
        .collect();
    let n = series.first().map_or(0, |s| s.len());
    let violations = (0..n)
        .filter(|&i| {
            let vals: Vec<f64> = series.iter().map(|s| s[i]).collect();
            let diverging = vals.last().is_some_and(|v| v.abs() > LAMBDA_CHECK);
            diverging && !eventually_monotone(&vals, 1e-9)
        })
        .collect::<Vec<_>>();
    NonOscillation {
        passed: violations.is_empty(),
        violations,
    }
}

/// The observed blow-up regime, from the measured pole orders and `J`.
/// In case IIa `(t_B - t) lambda_n` decays only logarithmically, so its
/// sub-pole character is not required on the ladder.
pub fn observed_case(n: usize, j: usize, xi1: &RateFit, xin: &RateFit) -> Option<CaseLabel> {
    if xi1.exponent == 2.0 {
        return (n == 4 && j == 2).then_some(CaseLabel::IIc);
    }
    if xi1.exponent != 1.0 {
        return None;
    }
    let sub_pole = xin.exponent == 0.0 || xin.coefficient.abs() < RATE_RTOL;
    match (j, sub_pole) {
        (1, true) => Some(CaseLabel::I),
        (2, _) if n >= 5 => Some(CaseLabel::IIa),
        (2, false) if n == 4 => Some(CaseLabel::IIb),
        (j, false) if j >= 3 => Some(CaseLabel::III),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupReport {
    #[serde(rename = "tB")]
    pub t_b: f64,
    #[serde(rename = "tB_bracket")]
    pub t_b_bracket: Bracket,
    pub tangential: bool,
    #[serde(rename = "J")]
    pub j: usize,
    pub n: usize,
    pub p: f64,
    pub q: f64,
    pub p_raw: f64,
    pub q_raw: f64,
    /// `u_1'(t_B) = -alpha_1`
    pub u1_slope: f64,
    /// `lim (t_B - t) sum(lambda_i)`
    pub gamma: f64,
    #[serde(rename = "R0")]
    pub r0: Option<f64>,
    pub xi1: RateFit,
    pub xin: RateFit,
    pub rho_rate: RateFit,
    #[serde(rename = "caseObserved")]
    pub case_observed: Option<CaseLabel>,
    pub classification: Classification,
    pub predicted: Option<PredictedRates>,
    /// Eigenvalues at the last recorded sample.
    pub last_lambda: Vec<f64>,
    /// Continuation in `ln |lambda_1|`, run when some eigenvalue above the
    /// minimal group has not yet passed `LAMBDA_CHECK` at the last sample.
    pub tail: Option<TailEnd>,
    pub density_integral: DensityIntegral,
    pub non_oscillation: NonOscillation,
    pub residuals: BTreeMap<String, f64>,
    pub accepted_steps: usize,
}

impl BlowupReport {
    /// Names of violated hard invariants: `t_B` lower bound, `q <= p`, and
    /// the multiplicity range.
    pub fn hard_violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let r = |k: &str| self.residuals.get(k).copied().unwrap_or(0.0);
        if r("tB_lower_bound_slack") < -LOWER_BOUND_SLACK {
            out.push("tB_lower_bound_slack");
        }
        if r("pq_order") > IDENTITY_TOL {
            out.push("pq_order");
        }
        if r("J_range") > 0.0 {
            out.push("J_range");
        }
        out
    }

    /// Eigenvalues at the last sample diverge with the sign pattern
    /// `-` for `i <= J` and `+` beyond. The tail end, when present, is the
    /// last sample.
    pub fn sign_pattern_holds(&self) -> bool {
        if let Some(tail) = &self.tail {
            return tail.s > LAMBDA_CHECK.ln()
                && tail.upper.len() == self.n - self.j
                && tail.upper.iter().all(|l| *l > LAMBDA_CHECK);
        }
        self.last_lambda.iter().enumerate().all(|(i, l)| {
            if i < self.j {
                *l < -LAMBDA_CHECK
            } else {
                *l > LAMBDA_CHECK
            }
        })
    }
}

/// Named residuals of a completed report against its predictions.
pub fn verify(
    params: &RepParams,
    init: &SpectralInitialData,
    report: &BlowupReport,
    predictions: Option<&PredictedRates>,
) -> BTreeMap<String, f64> {
    let mut r = BTreeMap::new();
    let n = init.n();
    let j = init.j();
    r.insert(
        "tB_lower_bound_slack".into(),
        report.t_b - lower_bound_tb(params, init.lambda_min()),
    );
    r.insert("pq_sum".into(), (report.p + report.q - init.spread()).abs());
    r.insert(
        "pq_order".into(),
        (report.q - report.p).max(-report.q).max(0.0),
    );
    r.insert(
        "J_range".into(),
        if j >= 1 && 2 * j <= n { 0.0 } else { 1.0 },
    );
    r.insert(
        "rho_integral_divergence".into(),
        DOUBLING_ROUNDS.saturating_sub(report.density_integral.rounds) as f64,
    );
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    if let Some(pred) = predictions {
        if let Some(x) = pred.xi1 {
            r.insert("xi1_error".into(), rel(report.xi1.coefficient, x));
        }
        if pred.order == 2.0 {
            // equal and opposite second-order poles
            r.insert(
                "xin_error".into(),
                rel(report.xin.coefficient, -report.xi1.coefficient),
            );
            if let Some(c) = pred.rho_coefficient {
                r.insert("rho_rate_error".into(), rel(report.rho_rate.coefficient, c));
            }
        } else {
            if pred.xin_sub_pole {
                // (t_B - t) lambda_n -> 0
                let scaled =
                    report.xin.coefficient * if report.xin.exponent == 1.0 { 1.0 } else { 0.0 };
                r.insert("xin_error".into(), scaled.abs());
            } else if let Some(x) = pred.xin {
                r.insert("xin_error".into(), rel(report.xin.coefficient, x));
            }
            let xin = if report.xin.exponent == 1.0 {
                report.xin.coefficient
            } else {
                0.0
            };
            r.insert(
                "xi_sum_plus_1".into(),
                (report.xi1.coefficient + xin + 1.0).abs(),
            );
            // rho = O(tau^-order), or o(tau^-2) in case IIa
            let excess = if pred.case == CaseLabel::IIa {
                (report.rho_rate.measured_exponent - 2.0).max(0.0)
            } else {
                (report.rho_rate.measured_exponent - pred.rho_order).max(0.0)
            };
            r.insert("rho_rate_error".into(), excess);
        }
    }
    r
}

/// Integrates in blow-up coordinates to the first terminal event and
/// builds the full report.
pub fn analyze_blowup(
    params: &RepParams,
    init: &SpectralInitialData,
    control: &StepControl,
    t_max: f64,
) -> Result<BlowupReport> {
    let sys = blowup_coordinates(*params, init.clone())?;
    let traj = integrate(
        sys.as_ref(),
        0.0,
        &sys.initial_state(),
        control,
        t_max,
        &sys.terminal_events(control),
    )?;
    report_from_trajectory(params, init, sys.as_ref(), &traj, control)
}

pub fn report_from_trajectory(
    params: &RepParams,
    init: &SpectralInitialData,
    sys: &dyn Observe,
    traj: &Trajectory,
    control: &StepControl,
) -> Result<BlowupReport> {
    let classification = classify(params, init);
    let bt = find_blowup_time(sys, traj)?;
    confirm_divergence(sys, traj, control)?;
    let t_b = bt.t_b;
    let ladder = sample_ladder(sys, traj, t_b)?;
    let n = init.n();
    let j = init.j();

    let xi1 = fit_rate(&ladder, Quantity::Lambda(0), &[1.0, 2.0])?;
    let xin = fit_rate(&ladder, Quantity::Lambda(n - 1), &[1.0, 2.0])?;
    let rho_rate = match fit_rate(&ladder, Quantity::Rho, &[1.0, 2.0, 4.0]) {
        Ok(f) => f,
        Err(Error::AmbiguousExponent(scores)) => {
            // slower than any trial pole, e.g. o(tau^-2) with logarithms
            let (e, res) = scores[0];
            let q = ladder.values(Quantity::Rho);
            let log_tau: Vec<f64> = ladder.taus.iter().map(|t| t.ln()).collect();
            let log_q: Vec<f64> = q.iter().map(|v| v.ln()).collect();
            let measured = -least_squares(&log_tau, &log_q).0;
            let scaled: Vec<f64> = q
                .iter()
                .zip(&ladder.taus)
                .map(|(v, t)| t.powf(e) * v)
                .collect();
            RateFit {
                exponent: measured,
                measured_exponent: measured,
                coefficient: richardson(&scaled),
                window_decades: ladder.decades().floor() as u32,
                residual: res,
                log_growth: false,
                c: richardson(&scaled).abs(),
            }
        }
        Err(e) => return Err(e),
    };
    let pq = estimate_pq(&ladder)?;

    let trace_scaled: Vec<f64> = ladder
        .obs
        .iter()
        .zip(&ladder.taus)
        .map(|(o, t)| t * Quantity::Trace.read(o))
        .collect();
    let gamma = richardson(&trace_scaled);

    let slopes: Vec<f64> = ladder
        .obs
        .iter()
        .map(|o| o.lambda[0] * o.log_u.as_ref().map_or(f64::NAN, |l| l[0].exp()))
        .collect();
    let u1_slope = richardson(&slopes);

    // exp(-int R) with R = sum(lambda) - gamma/(t_B - t) equals
    // (rho / rho0) (tau / t_B)^(-gamma)
    let r0_series: Vec<f64> = ladder
        .obs
        .iter()
        .zip(&ladder.taus)
        .map(|(o, tau)| o.rho / init.rho0() * (tau / t_b).powf(-gamma.round()))
        .collect();
    let r0 = {
        let tail = &r0_series[r0_series.len().saturating_sub(4)..];
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
                (a.min(*x), b.max(*x))
            });
        let mid = 0.5 * (lo + hi);
        (mid > 0.0 && mid.is_finite() && (hi - lo) / mid < 0.05).then(|| richardson(&r0_series))
    };

    let case_observed = observed_case(n, j, &xi1, &xin);
    let measured = Measured {
        t_b,
        r0,
        c: (xi1.exponent == 2.0).then_some(xi1.c),
    };
    let label_for_prediction = classification.case_label.or(case_observed);
    let predicted = label_for_prediction.and_then(|case| {
        let c = Classification {
            case_label: Some(case),
            ..classification
        };
        predicted_rates(&c, params, init, &measured).ok()
    });

    let density_integral = density_integral_test(sys, traj, &ladder, t_b);
    let non_oscillation = check_non_oscillation(sys, traj, t_b);
    let last_lambda = sys.observe(traj.last_state()).lambda;
    let tail = if last_lambda[j..].iter().all(|l| *l > LAMBDA_CHECK) {
        None
    } else {
        continue_tail(sys, traj, control, TAIL_S_MAX)?
    };

    let mut report = BlowupReport {
        t_b,
        t_b_bracket: bt.bracket,
        tangential: bt.tangential,
        j,
        n,
        p: pq.p,
        q: pq.q,
        p_raw: pq.p_raw,
        q_raw: pq.q_raw,
        u1_slope,
        gamma,
        r0,
        xi1,
        xin,
        rho_rate,
        case_observed,
        classification,
        predicted,
        last_lambda,
        tail,
        density_integral,
        non_oscillation,
        residuals: BTreeMap::new(),
        accepted_steps: traj.diagnostics.accepted_steps,
    };
    report.residuals = verify(params, init, &report, predicted.as_ref());
    if classification.verdict == Verdict::GlobalBounded {
        report.residuals.insert("verdict_consistency".into(), 1.0);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate;
    use crate::oracle::ExampleFamily;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn synthetic_ladder(f: impl Fn(f64) -> f64) -> Ladder {
        let taus = ladder_offsets();
        let obs = taus
            .iter()
            .map(|&t| Observation {
                lambda: vec![f(t)],
                rho: 1.0,
                log_u: None,
            })
            .collect();
        Ladder { taus, obs }
    }

    #[test]
    fn lower_bound_examples() {
        let p = RepParams::new(4, 4.0, 1.0).unwrap();
        assert_relative_eq!(lower_bound_tb(&p, 0.0), FRAC_PI_2, epsilon = 1e-15);
        assert_relative_eq!(lower_bound_tb(&p, -1.0), FRAC_PI_4, epsilon = 1e-15);
        assert_relative_eq!(lower_bound_tb(&p, 1e12), PI, epsilon = 1e-9);
    }

    #[test]
    fn family_blowup_time_respects_bound() {
        for i in 0..10 {
            for j in 0..10 {
                let lo = -3.0 + 0.5 * i as f64;
                let hi = lo + 0.1 + 0.4 * j as f64;
                let w = 0.5 + 0.3 * ((i + j) % 5) as f64;
                let f = ExampleFamily::new(4.0 * w * w, 1.0, lo, hi).unwrap();
                assert!(f.t_b() >= lower_bound_tb(&f.params(), lo) - 1e-12);
            }
        }
    }

    #[test]
    fn fit_selects_first_order_pole() {
        let l = synthetic_ladder(|t| -1.0 / t + 3.0);
        let f = fit_rate(&l, Quantity::Lambda(0), &[1.0, 2.0]).unwrap();
        assert_eq!(f.exponent, 1.0);
        assert_relative_eq!(f.coefficient, -1.0, epsilon = 1e-12);
        assert!(f.residual < 0.05);
        assert_eq!(f.window_decades, 3);
    }

    #[test]
    fn fit_selects_second_order_pole() {
        let l = synthetic_ladder(|t| -2.0 / (t * t) - 1.0 / t);
        let f = fit_rate(&l, Quantity::Lambda(0), &[1.0, 2.0]).unwrap();
        assert_eq!(f.exponent, 2.0);
        assert_relative_eq!(f.coefficient, -2.0, epsilon = 1e-10);
        assert_relative_eq!(f.c, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn fit_flags_logarithmic_growth() {
        let l = synthetic_ladder(|t| 0.2 * t.ln().abs() - 0.3);
        let f = fit_rate(&l, Quantity::Lambda(0), &[1.0, 2.0]).unwrap();
        assert!(f.log_growth);
        assert_eq!(f.exponent, 0.0);
        assert_relative_eq!(f.coefficient, 0.2, epsilon = 1e-10);
    }

    #[test]
    fn ambiguous_exponent_is_reported() {
        // tau^-1.5 sits midway between the two trial orders
        let l = synthetic_ladder(|t| t.powf(-1.5));
        assert!(matches!(
            fit_rate(&l, Quantity::Lambda(0), &[1.4, 1.6]),
            Err(Error::AmbiguousExponent(_))
        ));
    }

    #[test]
    fn short_ladder_is_rejected() {
        let mut l = synthetic_ladder(|t| -1.0 / t);
        l.taus.truncate(3);
        l.obs.truncate(3);
        assert!(matches!(
            fit_rate(&l, Quantity::Lambda(0), &[1.0]),
            Err(Error::InsufficientTailSamples(_))
        ));
    }

    #[test]
    fn richardson_removes_linear_term() {
        let v: Vec<f64> = ladder_offsets().iter().map(|t| 5.0 + 7.0 * t).collect();
        assert_relative_eq!(richardson(&v), 5.0, epsilon = 1e-14);
    }

    #[test]
    fn monotone_detection() {
        let v: Vec<f64> = (1..50).map(|i| -(i as f64).powi(2)).collect();
        assert!(eventually_monotone(&v, 1e-9));
        let noisy: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(i, x)| x * (1.0 + 0.05 * if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        assert!(!eventually_monotone(&noisy, 1e-9));
    }

    #[test]
    fn predicted_rate_tables() {
        let (p, i) = validate(4, 4.0, 1.0, 0.5, &[-1.0, -1.0, 1.0, 1.0]).unwrap();
        let c = classify(&p, &i);
        let r = predicted_rates(&c, &p, &i, &Measured::default()).unwrap();
        assert_relative_eq!(r.xi1.unwrap(), -(1.0 + 2f64.sqrt()) / 2.0, epsilon = 1e-15);
        assert_relative_eq!(r.xin.unwrap(), (2f64.sqrt() - 1.0) / 2.0, epsilon = 1e-15);

        let f = ExampleFamily::standard();
        let c = classify(&f.params(), &f.init());
        let m = Measured {
            t_b: FRAC_PI_2,
            r0: None,
            c: Some(1.0),
        };
        let r = predicted_rates(&c, &f.params(), &f.init(), &m).unwrap();
        assert_eq!(r.rho_coefficient, Some(1.0));

        // off k = 4 the closed form fixes the coefficient at 4 C^2 / k
        let f = ExampleFamily::new(2.0, 1.0, -1.0, 1.0).unwrap();
        let c = classify(&f.params(), &f.init());
        let m = Measured {
            t_b: f.t_b(),
            r0: None,
            c: Some(2.0),
        };
        let r = predicted_rates(&c, &f.params(), &f.init(), &m).unwrap();
        assert_relative_eq!(r.rho_coefficient.unwrap(), 8.0, epsilon = 1e-12);

        let (p, i) = validate(7, 1.0, 1.0, 1.0, &[-2.0, -2.0, -2.0, 0.0, 0.5, 1.0, 1.5]).unwrap();
        let c = classify(&p, &i);
        let r = predicted_rates(&c, &p, &i, &Measured::default()).unwrap();
        assert_eq!(r.xi1, Some(-2.0));
        assert_eq!(r.xin, Some(1.0));
        // -C J + (C - 1)(n - J) = -2
        assert_relative_eq!(
            3.0 * r.xi1.unwrap() + 4.0 * r.xin.unwrap(),
            -2.0,
            epsilon = 1e-15
        );

        let (p, i) = validate(4, 1.0, 1.0, 1.0, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            predicted_rates(&classify(&p, &i), &p, &i, &Measured::default()),
            Err(Error::UnresolvedCase)
        );
    }

    #[test]
    fn quadratic_roots_from_r0() {
        let (p, i) = validate(4, 4.0, 1.0, 0.5, &[-1.0, -1.0, 1.0, 1.0]).unwrap();
        let c = classify(&p, &i);
        // xi^2 + xi = 1/4 for the A0 = 2 k rho0 rates
        let t_b = 1.0;
        let r0 = 0.25 * 4.0 / (p.k() * i.rho0());
        let r = predicted_rates(
            &c,
            &p,
            &i,
            &Measured {
                t_b,
                r0: Some(r0),
                c: None,
            },
        )
        .unwrap();
        let (a, b) = r.quadratic_roots.unwrap();
        assert_relative_eq!(a, r.xi1.unwrap(), epsilon = 1e-14);
        assert_relative_eq!(b, r.xin.unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn global_data_is_not_a_blowup() {
        let (p, i) = validate(4, 1.0, 1.0, 1.0, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            analyze_blowup(&p, &i, &StepControl::default(), 50.0),
            Err(Error::NoBlowupBeforeTmax(50.0))
        );
    }

    #[test]
    fn double_pole_density_coefficient_off_k_4() {
        let f = ExampleFamily::new(2.0, 1.0, -1.0, 1.0).unwrap();
        let r = analyze_blowup(
            &f.params(),
            &f.init(),
            &StepControl::default(),
            2.0 * f.t_b(),
        )
        .unwrap();
        assert_eq!(r.case_observed, Some(CaseLabel::IIc));
        assert_relative_eq!(r.rho_rate.coefficient, 8.0, max_relative = 1e-2);
        assert!(r.residuals["rho_rate_error"] < 1e-2);
    }
}
