use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use rep_core::analysis::{
    find_blowup_time, report_from_trajectory, sample_ladder, BlowupReport, PredictedRates, RateFit,
};
use rep_core::dynamics::{blowup_coordinates, simulation_coordinates, Observe};
use rep_core::integrate::{integrate, Bracket, Coordinates, Terminal, Trajectory};
use rep_core::oracle::ExampleFamily;
use rep_core::{classify, CaseLabel, Classification, RepParams, SpectralInitialData};

use crate::config::{Control, GridPoint, Mode, RunConfig};
use crate::error::CliError;
use crate::output::{fmt17, to_json, Envelope, OutDir, Table};
use crate::plot;

/// Parsed command-line arguments shared by every subcommand.
pub struct Invocation {
    pub config: RunConfig,
    pub out: OutDir,
    pub svg: bool,
}

impl Invocation {
    pub fn new(config: RunConfig, out: Option<PathBuf>, svg: bool) -> Result<Self, CliError> {
        if svg && out.is_none() {
            return Err(CliError::Config("--svg needs --out".into()));
        }
        Ok(Self {
            config,
            out: OutDir::new(out),
            svg,
        })
    }
}

fn run(sys: &dyn Observe, control: &Control) -> Result<Trajectory, CliError> {
    Ok(integrate(
        sys,
        0.0,
        &sys.initial_state(),
        &control.step,
        control.t_max,
        &sys.terminal_events(&control.step),
    )?)
}

fn emit<P: Serialize, I: Serialize, R: Serialize>(
    inv: &Invocation,
    file: &str,
    params: &P,
    init: &I,
    control: &Control,
    result: &R,
) -> Result<(), CliError> {
    let json = to_json(&Envelope {
        params,
        init,
        control,
        result,
    })?;
    print!("{json}");
    inv.out.write(file, &json)
}

#[derive(Debug, Serialize)]
pub struct SimulationSummary {
    pub coordinates: Coordinates,
    pub terminal: Terminal,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evals: usize,
    pub samples: usize,
    pub rows: usize,
    pub t_end: f64,
    /// Largest conservation residual of the integrated coordinates.
    pub invariant_max: Option<f64>,
    pub abel_residual_max: f64,
    pub lambda_abs_max: f64,
    pub rho_max: f64,
    #[serde(rename = "tB")]
    pub t_b: Option<f64>,
    #[serde(rename = "tB_bracket")]
    pub t_b_bracket: Option<Bracket>,
}

pub fn simulate(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    cfg.check_mode(Mode::Simulate)?;
    let (params, init) = cfg.data()?;
    let control = cfg.control.resolve()?;
    let stride = cfg.outputs.stride;
    if stride == 0 {
        return Err(CliError::Config("outputs.stride must be positive".into()));
    }
    let sys = simulation_coordinates(params, init.clone())?;
    let traj = run(sys.as_ref(), &control)?;

    let n = params.n();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("lambda_{i}")));
    header.push("rho".into());
    header.extend((1..=n).map(|i| format!("u_{i}")));
    header.push("abel_residual_max".into());
    let mut table = Table::new(&header)?;

    let last = traj.len() - 1;
    let (mut abel_max, mut lambda_max, mut rho_max, mut rows) = (0.0f64, 0.0f64, 0.0f64, 0);
    for (i, (t, y)) in traj.times().iter().zip(traj.states()).enumerate() {
        let o = sys.observe(y);
        let u = o.u().unwrap_or_else(|| vec![f64::NAN; n]);
        let abel = o.abel_max(init.lambda0()).unwrap_or(f64::NAN);
        abel_max = abel_max.max(abel);
        lambda_max = o.lambda.iter().fold(lambda_max, |m, l| m.max(l.abs()));
        rho_max = rho_max.max(o.rho);
        if i % stride != 0 && i != last {
            continue;
        }
        let mut cells = vec![fmt17(*t)];
        cells.extend(o.lambda.iter().map(|x| fmt17(*x)));
        cells.push(fmt17(o.rho));
        cells.extend(u.iter().map(|x| fmt17(*x)));
        cells.push(fmt17(abel));
        table.row(&cells)?;
        rows += 1;
    }

    let blowup = traj
        .terminal
        .is_event()
        .then(|| find_blowup_time(sys.as_ref(), &traj).ok())
        .flatten();
    let d = &traj.diagnostics;
    let summary = SimulationSummary {
        coordinates: traj.coordinates,
        terminal: traj.terminal,
        accepted_steps: d.accepted_steps,
        rejected_steps: d.rejected_steps,
        rhs_evals: d.rhs_evals,
        samples: traj.len(),
        rows,
        t_end: traj.t_end(),
        invariant_max: d.invariant_max(),
        abel_residual_max: abel_max,
        lambda_abs_max: lambda_max,
        rho_max,
        t_b: blowup.map(|b| b.t_b),
        t_b_bracket: blowup.map(|b| b.bracket),
    };
    inv.out.write(&cfg.outputs.trajectory, &table.finish()?)?;
    if inv.out.path().is_none() {
        eprintln!("trajectory not written: pass --out <dir>");
    }
    emit(
        inv,
        &cfg.outputs.summary,
        &params,
        &init,
        &control,
        &summary,
    )?;

    match traj.terminal {
        Terminal::ReachedTmax | Terminal::BlowupEvent { .. } => Ok(()),
        other => Err(CliError::Numeric(format!(
            "integration stopped early: {other:?}"
        ))),
    }
}

/// Integrates in blow-up coordinates and analyses the approach to `t_B`.
fn blowup_run(
    params: &RepParams,
    init: &SpectralInitialData,
    control: &Control,
) -> Result<(Box<dyn Observe>, Trajectory, BlowupReport), CliError> {
    let sys = blowup_coordinates(*params, init.clone())?;
    let traj = run(sys.as_ref(), control)?;
    let report = report_from_trajectory(params, init, sys.as_ref(), &traj, &control.step)?;
    Ok((sys, traj, report))
}

fn check_hard(report: &BlowupReport) -> Result<(), CliError> {
    let v = report.hard_violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(v.join(", ")))
    }
}

pub fn blowup(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    cfg.check_mode(Mode::Blowup)?;
    let (params, init) = cfg.data()?;
    let control = cfg.control.resolve()?;
    let (sys, traj, report) = blowup_run(&params, &init, &control)?;
    emit(inv, &cfg.outputs.report, &params, &init, &control, &report)?;
    if inv.svg {
        if let Some(dir) = inv.out.path() {
            let ladder = sample_ladder(sys.as_ref(), &traj, report.t_b).ok();
            plot::write_plots(dir, sys.as_ref(), &traj, ladder.as_ref())?;
        }
    }
    for (name, value) in &report.residuals {
        eprintln!("{name:>28} {value:.3e}");
    }
    check_hard(&report)
}

#[derive(Debug, Serialize)]
pub struct RateSummary<'a> {
    #[serde(rename = "tB")]
    pub t_b: f64,
    #[serde(rename = "caseLabel")]
    pub case_label: Option<CaseLabel>,
    #[serde(rename = "caseObserved")]
    pub case_observed: Option<CaseLabel>,
    pub xi1: &'a RateFit,
    pub xin: &'a RateFit,
    pub rho_rate: &'a RateFit,
    pub predicted: Option<&'a PredictedRates>,
    pub residuals: &'a std::collections::BTreeMap<String, f64>,
}

/// The rate portion of a blow-up report.
pub fn rates(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    cfg.check_mode(Mode::Rates)?;
    let (params, init) = cfg.data()?;
    let control = cfg.control.resolve()?;
    let (_, _, r) = blowup_run(&params, &init, &control)?;
    let summary = RateSummary {
        t_b: r.t_b,
        case_label: r.classification.case_label,
        case_observed: r.case_observed,
        xi1: &r.xi1,
        xin: &r.xin,
        rho_rate: &r.rho_rate,
        predicted: r.predicted.as_ref(),
        residuals: &r.residuals,
    };
    emit(inv, &cfg.outputs.report, &params, &init, &control, &summary)?;
    check_hard(&r)
}

#[derive(Debug, Serialize)]
pub struct ClassificationOut {
    pub n: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(flatten)]
    pub classification: Classification,
}

pub fn classify_cmd(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    cfg.check_mode(Mode::Classify)?;
    let (params, init) = cfg.data()?;
    let control = cfg.control.resolve()?;
    let out = ClassificationOut {
        n: init.n(),
        j: init.j(),
        classification: classify(&params, &init),
    };
    emit(inv, &cfg.outputs.report, &params, &init, &control, &out)
}

/// One sweep row; empty cells where a stage did not run.
#[derive(Debug, Default)]
struct Row {
    j: Option<usize>,
    classification: Option<Classification>,
    status: String,
    report: Option<BlowupReport>,
}

fn sweep_row(point: &GridPoint, control: &Control) -> Row {
    let (params, init) = match point.validate() {
        Ok(d) => d,
        Err(e) => {
            return Row {
                status: status(&e.into()),
                ..Row::default()
            }
        }
    };
    let mut row = Row {
        j: Some(init.j()),
        classification: Some(classify(&params, &init)),
        ..Row::default()
    };
    match blowup_run(&params, &init, control) {
        Ok((_, _, report)) => {
            row.status = match check_hard(&report) {
                Ok(()) => "ok".into(),
                Err(e) => status(&e),
            };
            row.report = Some(report);
        }
        Err(e) => row.status = status(&e),
    }
    row
}

/// `kind: message` for the status column.
fn status(e: &CliError) -> String {
    match e {
        CliError::Config(m) => format!("invalid: {m}"),
        CliError::Numeric(m) => format!("numeric: {m}"),
        CliError::Invariant(m) => format!("invariant: {m}"),
        CliError::NoEvent(m) => format!("no-event: {m}"),
        CliError::Output(m) => format!("output: {m}"),
    }
}

fn tag<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(v) => v.to_string(),
        Err(_) => String::new(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt17).unwrap_or_default()
}

pub fn sweep(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    cfg.check_mode(Mode::Sweep)?;
    let control = cfg.control.resolve()?;
    let grid = cfg.grid()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.workers)
        .build()
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    // indexed collect keeps grid order whatever the completion order
    let rows: Vec<Row> = pool.install(|| {
        grid.points
            .par_iter()
            .map(|p| sweep_row(p, &control))
            .collect()
    });

    let n = grid.points.first().map_or(0, |p| p.n);
    let mut header = vec!["index".to_string()];
    header.extend(grid.axes.iter().map(|a| a.names.join("|")));
    header.extend(["k", "c_b", "rho0"].map(String::from));
    header.extend((1..=n).map(|i| format!("lambda0_{i}")));
    header.extend(
        [
            "J",
            "verdict",
            "reason",
            "caseLabel",
            "A0",
            "status",
            "tB",
            "tB_width",
            "caseObserved",
            "xi1_exponent",
            "xi1_coefficient",
            "xin_exponent",
            "xin_coefficient",
            "rho_exponent",
            "rho_coefficient",
        ]
        .map(String::from),
    );
    let mut table = Table::new(&header)?;
    for (i, (p, r)) in grid.points.iter().zip(&rows).enumerate() {
        let mut cells = vec![i.to_string()];
        cells.extend(p.axis_values.iter().map(|v| fmt17(*v)));
        cells.extend([p.k, p.c_b, p.rho0].map(fmt17));
        cells.extend(p.lambda0.iter().map(|v| fmt17(*v)));
        let c = r.classification.as_ref();
        let rep = r.report.as_ref();
        cells.push(r.j.map(|j| j.to_string()).unwrap_or_default());
        cells.push(c.map(|c| tag(&c.verdict)).unwrap_or_default());
        cells.push(c.map(|c| tag(&c.reason)).unwrap_or_default());
        cells.push(
            c.and_then(|c| c.case_label)
                .map(|l| l.to_string())
                .unwrap_or_default(),
        );
        cells.push(opt(c.and_then(|c| c.a0)));
        cells.push(r.status.clone());
        cells.push(opt(rep.map(|r| r.t_b)));
        cells.push(opt(rep.map(|r| r.t_b_bracket.width())));
        cells.push(
            rep.and_then(|r| r.case_observed)
                .map(|l| l.to_string())
                .unwrap_or_default(),
        );
        for fit in [
            |r: &BlowupReport| r.xi1,
            |r: &BlowupReport| r.xin,
            |r: &BlowupReport| r.rho_rate,
        ] {
            cells.push(opt(rep.map(|r| fit(r).exponent)));
            cells.push(opt(rep.map(|r| fit(r).coefficient)));
        }
        table.row(&cells)?;
    }
    let csv = table.finish()?;
    print!("{csv}");
    inv.out.write(&cfg.outputs.sweep, &csv)
}

/// Pointwise tolerance against the closed form.
pub const POINTWISE_TOL: f64 = 1e-6;
pub const BLOWUP_TIME_TOL: f64 = 1e-6;
pub const RATE_TOL: f64 = 1e-2;
/// Pointwise comparison ends this far before `t_B`.
pub const EDGE: f64 = 1e-3;
const GRID_POINTS: usize = 4000;

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct Verification {
    pub family: ExampleFamily,
    #[serde(rename = "tB_exact")]
    pub t_b_exact: f64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// `|a - b| / max(|b|, 1)`
fn mixed(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn check(name: &'static str, value: f64, tolerance: f64) -> Check {
    Check {
        name,
        value,
        tolerance,
        pass: value <= tolerance,
    }
}

/// Runs the numerical pipeline on the closed-form family and compares.
pub fn verify_example(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    cfg.check_mode(Mode::VerifyExample)?;
    if cfg.params.is_some() || cfg.init.is_some() {
        return Err(CliError::Config(
            "verify-example takes `family`, not `params` or `init`".into(),
        ));
    }
    let fam = cfg.family()?;
    let control = cfg.control.resolve()?;
    let (params, init) = (fam.params(), fam.init());
    let t_exact = fam.t_b();

    let sys = simulation_coordinates(params, init.clone())?;
    let traj = run(sys.as_ref(), &control)?;
    let t_b = find_blowup_time(sys.as_ref(), &traj)
        .map(|b| b.t_b)
        .unwrap_or(f64::NAN);

    let t_hi = (t_exact - EDGE).min(traj.t_end());
    let grid = (0..=GRID_POINTS).map(|i| t_hi * i as f64 / GRID_POINTS as f64);
    let recorded = traj.times().iter().copied().filter(|t| *t <= t_hi);
    let (mut e1, mut e4, mut er) = (0.0f64, 0.0f64, 0.0f64);
    for t in grid.chain(recorded) {
        let o = sys.observe(&traj.eval(t));
        let v = fam.eval(t)?;
        e1 = e1.max(mixed(o.lambda[0], v.lambda1));
        e4 = e4.max(mixed(o.lambda[3], v.lambda4));
        er = er.max(mixed(o.rho, v.rho));
    }
    if traj.t_end() < t_exact - EDGE {
        // the run stopped short of the comparison window
        e1 = f64::INFINITY;
    }

    let mut checks = vec![
        check("lambda_1 pointwise", e1, POINTWISE_TOL),
        check("lambda_4 pointwise", e4, POINTWISE_TOL),
        check("rho pointwise", er, POINTWISE_TOL),
        check("tB", (t_b - t_exact).abs(), BLOWUP_TIME_TOL),
    ];
    let c = fam.pole_coefficient();
    let (c1, c4, cr, case) = match blowup_run(&params, &init, &control) {
        Ok((_, _, r)) => {
            let fit = |f: &RateFit, e: f64| {
                if f.exponent == e {
                    f.coefficient
                } else {
                    f64::NAN
                }
            };
            (
                fit(&r.xi1, 2.0),
                fit(&r.xin, 2.0),
                fit(&r.rho_rate, 4.0),
                r.case_observed,
            )
        }
        Err(e) => {
            eprintln!("rate pipeline failed: {e}");
            (f64::NAN, f64::NAN, f64::NAN, None)
        }
    };
    let rel = |a: f64, b: f64| {
        let r = (a - b).abs() / b.abs();
        if r.is_nan() {
            f64::INFINITY
        } else {
            r
        }
    };
    checks.push(check("(tB-t)^2 lambda_1 -> -C", rel(c1, -c), RATE_TOL));
    checks.push(check("(tB-t)^2 lambda_4 -> C", rel(c4, c), RATE_TOL));
    checks.push(check(
        "(tB-t)^4 rho -> 4C^2/k",
        rel(cr, fam.density_coefficient()),
        RATE_TOL,
    ));
    checks.push(check(
        "observed case IIc",
        if case == Some(CaseLabel::IIc) {
            0.0
        } else {
            1.0
        },
        0.0,
    ));

    let pass = checks.iter().all(|c| c.pass);
    println!(
        "{:<28} {:>12} {:>10}  result",
        "check", "max error", "tolerance"
    );
    for c in &checks {
        println!(
            "{:<28} {:>12.3e} {:>10.1e}  {}",
            c.name,
            c.value,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    println!("tB = {t_b:.12} (exact {t_exact:.12}), C = {c:.12}");
    let result = Verification {
        family: fam,
        t_b_exact: t_exact,
        checks,
        pass,
    };
    let json = to_json(&Envelope {
        params: &params,
        init: &init,
        control: &control,
        result: &result,
    })?;
    inv.out.write(&cfg.outputs.report, &json)?;
    if pass {
        Ok(())
    } else {
        let failed: Vec<_> = result
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name)
            .collect();
        Err(CliError::Invariant(format!(
            "tolerance breach: {}",
            failed.join(", ")
        )))
    }
}
