//! Run configuration: a single JSON document, validated before any computation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use rep_core::integrate::StepControl;
use rep_core::oracle::ExampleFamily;
use rep_core::{validate, RepParams, SpectralInitialData};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Blowup,
    Classify,
    VerifyExample,
    Sweep,
    Rates,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Blowup => "blowup",
            Mode::Classify => "classify",
            Mode::VerifyExample => "verify-example",
            Mode::Sweep => "sweep",
            Mode::Rates => "rates",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub params: Option<ParamsConfig>,
    pub init: Option<InitConfig>,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    pub sweep: Option<SweepConfig>,
    pub family: Option<FamilyConfig>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub n: usize,
    pub k: f64,
    pub c_b: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub rho0: f64,
    pub lambda0: Vec<f64>,
}

/// Integrator settings; anything omitted takes the library default.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub h_init: Option<f64>,
    pub h_min: Option<f64>,
    pub h_max: Option<f64>,
    pub lambda_escape: Option<f64>,
    pub u_zero_eps: Option<f64>,
    pub max_steps: Option<usize>,
    pub t_max: Option<f64>,
}

pub const DEFAULT_T_MAX: f64 = 50.0;

/// Resolved integrator settings as echoed in every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Control {
    #[serde(flatten)]
    pub step: StepControl,
    pub t_max: f64,
}

impl ControlConfig {
    pub fn resolve(&self) -> Result<Control, CliError> {
        let d = StepControl::default();
        let step = StepControl {
            rtol: self.rtol.unwrap_or(d.rtol),
            atol: self.atol.unwrap_or(d.atol),
            h_init: self.h_init.unwrap_or(d.h_init),
            h_min: self.h_min.unwrap_or(d.h_min),
            h_max: self.h_max.unwrap_or(d.h_max),
            lambda_escape: self.lambda_escape.unwrap_or(d.lambda_escape),
            u_zero_eps: self.u_zero_eps.unwrap_or(d.u_zero_eps),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
        };
        step.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let t_max = self.t_max.unwrap_or(DEFAULT_T_MAX);
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(CliError::Config(format!(
                "control.t_max must be positive and finite, got {t_max}"
            )));
        }
        Ok(Control { step, t_max })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Write every `stride`-th trajectory sample (the last is always written).
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "names::trajectory")]
    pub trajectory: String,
    #[serde(default = "names::summary")]
    pub summary: String,
    #[serde(default = "names::report")]
    pub report: String,
    #[serde(default = "names::sweep")]
    pub sweep: String,
}

fn one() -> usize {
    1
}

mod names {
    pub fn trajectory() -> String {
        "trajectory.csv".into()
    }
    pub fn summary() -> String {
        "summary.json".into()
    }
    pub fn report() -> String {
        "report.json".into()
    }
    pub fn sweep() -> String {
        "sweep.csv".into()
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            trajectory: names::trajectory(),
            summary: names::summary(),
            report: names::report(),
            sweep: names::sweep(),
        }
    }
}

/// Grid over any of `lambda0[i]` (1-based), `rho0`, `k`, `c_b`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axes: Vec<AxisConfig>,
    /// Derive `rho0` per point instead of taking it from `init`.
    pub rho0: Option<Rho0Rule>,
    /// Worker threads; defaults to the available parallelism.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rho0Rule {
    /// `rho0 = A0 / k`, placing `n = 4`, `J = 2` data on the double-pole surface.
    DoublePoleSurface,
}

/// One grid axis. All `targets` take the same value at each point.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub targets: Vec<String>,
    pub values: Option<Vec<f64>>,
    /// `[start, stop, count]`, endpoints included.
    pub linspace: Option<(f64, f64, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Lambda0(usize),
    Rho0,
    K,
    CB,
}

impl Target {
    fn parse(s: &str, n: usize) -> Result<Self, CliError> {
        match s {
            "rho0" => return Ok(Target::Rho0),
            "k" => return Ok(Target::K),
            "c_b" => return Ok(Target::CB),
            _ => {}
        }
        let index = s
            .strip_prefix("lambda0[")
            .and_then(|r| r.strip_suffix(']'))
            .and_then(|i| i.parse::<usize>().ok())
            .ok_or_else(|| CliError::Config(format!("unknown sweep target `{s}`")))?;
        if index == 0 || index > n {
            return Err(CliError::Config(format!(
                "sweep target `{s}` out of range 1..={n}"
            )));
        }
        Ok(Target::Lambda0(index - 1))
    }
}

#[derive(Debug, Clone)]
pub struct Axis {
    pub names: Vec<String>,
    pub targets: Vec<Target>,
    pub values: Vec<f64>,
}

impl AxisConfig {
    fn resolve(&self, n: usize) -> Result<Axis, CliError> {
        if self.targets.is_empty() {
            return Err(CliError::Config("sweep axis without targets".into()));
        }
        let targets = self
            .targets
            .iter()
            .map(|t| Target::parse(t, n))
            .collect::<Result<Vec<_>, _>>()?;
        let values = match (&self.values, self.linspace) {
            (Some(v), None) => v.clone(),
            (None, Some((a, b, count))) => linspace(a, b, count),
            _ => {
                return Err(CliError::Config(
                    "each sweep axis needs exactly one of `values` or `linspace`".into(),
                ))
            }
        };
        if values.is_empty() {
            return Err(CliError::Config("sweep axis has no points".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Config("sweep values must be finite".into()));
        }
        Ok(Axis {
            names: self.targets.clone(),
            targets,
            values,
        })
    }
}

fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![a],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    b
                } else {
                    a + (b - a) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

/// Raw coordinates of one grid point before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub axis_values: Vec<f64>,
    pub n: usize,
    pub k: f64,
    pub c_b: f64,
    pub rho0: f64,
    pub lambda0: Vec<f64>,
}

impl GridPoint {
    pub fn validate(&self) -> rep_core::Result<(RepParams, SpectralInitialData)> {
        validate(self.n, self.k, self.c_b, self.rho0, &self.lambda0)
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub axes: Vec<Axis>,
    pub points: Vec<GridPoint>,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub k: f64,
    pub c_b: f64,
    pub lambda1: f64,
    pub lambda4: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Rejects a `mode` that disagrees with the subcommand.
    pub fn check_mode(&self, mode: Mode) -> Result<(), CliError> {
        match self.mode {
            Some(m) if m != mode => Err(CliError::Config(format!(
                "config mode `{}` does not match command `{}`",
                m.name(),
                mode.name()
            ))),
            _ => Ok(()),
        }
    }

    fn raw(&self) -> Result<(ParamsConfig, &InitConfig), CliError> {
        let params = self
            .params
            .ok_or_else(|| CliError::Config("missing `params`".into()))?;
        let init = self
            .init
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `init`".into()))?;
        Ok((params, init))
    }

    pub fn data(&self) -> Result<(RepParams, SpectralInitialData), CliError> {
        let (p, i) = self.raw()?;
        validate(p.n, p.k, p.c_b, i.rho0, &i.lambda0).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn family(&self) -> Result<ExampleFamily, CliError> {
        match self.family {
            None => Ok(ExampleFamily::standard()),
            Some(f) => ExampleFamily::new(f.k, f.c_b, f.lambda1, f.lambda4)
                .map_err(|e| CliError::Config(e.to_string())),
        }
    }

    /// Cartesian product of the axes, first axis outermost. Individual points
    /// are validated later so that a bad point fails only its own row.
    pub fn grid(&self) -> Result<Grid, CliError> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `sweep`".into()))?;
        let (p, i) = self.raw()?;
        if i.lambda0.len() != p.n {
            return Err(CliError::Config(format!(
                "init.lambda0 has {} entries, expected n = {}",
                i.lambda0.len(),
                p.n
            )));
        }
        let axes = sweep
            .axes
            .iter()
            .map(|a| a.resolve(p.n))
            .collect::<Result<Vec<_>, _>>()?;
        if sweep.rho0 == Some(Rho0Rule::DoublePoleSurface) {
            if p.n != 4 {
                return Err(CliError::Config(
                    "the double-pole-surface rule needs n = 4".into(),
                ));
            }
            if axes.iter().any(|a| a.targets.contains(&Target::Rho0)) {
                return Err(CliError::Config(
                    "rho0 cannot be both swept and derived".into(),
                ));
            }
        }
        let workers = match sweep.workers {
            Some(0) => return Err(CliError::Config("sweep.workers must be positive".into())),
            Some(w) => w,
            None => std::thread::available_parallelism().map_or(1, |w| w.get()),
        };

        let mut points = Vec::new();
        let mut index = vec![0usize; axes.len()];
        loop {
            let mut pt = GridPoint {
                axis_values: Vec::with_capacity(axes.len()),
                n: p.n,
                k: p.k,
                c_b: p.c_b,
                rho0: i.rho0,
                lambda0: i.lambda0.clone(),
            };
            for (axis, &ix) in axes.iter().zip(&index) {
                let v = axis.values[ix];
                pt.axis_values.push(v);
                for t in &axis.targets {
                    match *t {
                        Target::Lambda0(j) => pt.lambda0[j] = v,
                        Target::Rho0 => pt.rho0 = v,
                        Target::K => pt.k = v,
                        Target::CB => pt.c_b = v,
                    }
                }
            }
            if sweep.rho0 == Some(Rho0Rule::DoublePoleSurface) {
                let mut l = pt.lambda0.clone();
                l.sort_by(f64::total_cmp);
                pt.rho0 = (l[0] - l[2]) * (l[0] - l[3]) / pt.k;
            }
            points.push(pt);

            // odometer, last axis fastest
            let mut d = axes.len();
            loop {
                if d == 0 {
                    return Ok(Grid {
                        axes,
                        points,
                        workers,
                    });
                }
                d -= 1;
                index[d] += 1;
                if index[d] < axes[d].values.len() {
                    break;
                }
                index[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, CliError> {
        serde_json::from_str(s).map_err(|e| CliError::Config(e.to_string()))
    }

    #[test]
    fn linspace_includes_endpoints() {
        assert_eq!(linspace(1.0, 3.0, 3), vec![1.0, 2.0, 3.0]);
        assert_eq!(linspace(0.0, 1.0, 1), vec![0.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(r#"{"params": {"n": 2, "k": 1, "c_b": 1, "extra": 0}}"#).is_err());
        assert!(parse(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn grid_is_a_product_with_the_last_axis_fastest() {
        let c = parse(
            r#"{"params": {"n": 4, "k": 4, "c_b": 1},
                "init": {"rho0": 1, "lambda0": [-1, -1, 1, 1]},
                "sweep": {"axes": [
                    {"targets": ["k"], "values": [1, 2]},
                    {"targets": ["lambda0[3]", "lambda0[4]"], "linspace": [1, 3, 3]}
                ], "workers": 1}}"#,
        )
        .unwrap();
        let g = c.grid().unwrap();
        let pts: Vec<_> = g.points.iter().map(|p| (p.k, p.lambda0[3])).collect();
        assert_eq!(
            pts,
            vec![
                (1.0, 1.0),
                (1.0, 2.0),
                (1.0, 3.0),
                (2.0, 1.0),
                (2.0, 2.0),
                (2.0, 3.0)
            ]
        );
        assert_eq!(g.points[4].lambda0, vec![-1.0, -1.0, 2.0, 2.0]);
    }

    #[test]
    fn double_pole_surface_rule_sets_rho0() {
        let c = parse(
            r#"{"params": {"n": 4, "k": 4, "c_b": 1},
                "init": {"rho0": 1, "lambda0": [-1, -1, 1, 1]},
                "sweep": {"axes": [{"targets": ["lambda0[4]"], "values": [3]}],
                          "rho0": "double-pole-surface"}}"#,
        )
        .unwrap();
        let g = c.grid().unwrap();
        assert_eq!(g.points[0].rho0, 2.0 * 4.0 / 4.0);
    }

    #[test]
    fn bad_targets_are_config_errors() {
        for t in ["lambda0[0]", "lambda0[5]", "mu"] {
            let c = parse(&format!(
                r#"{{"params": {{"n": 4, "k": 4, "c_b": 1}},
                    "init": {{"rho0": 1, "lambda0": [-1, -1, 1, 1]}},
                    "sweep": {{"axes": [{{"targets": ["{t}"], "values": [1]}}]}}}}"#
            ))
            .unwrap();
            assert!(matches!(c.grid(), Err(CliError::Config(_))), "{t}");
        }
    }

    #[test]
    fn control_defaults_and_checks() {
        let c = ControlConfig::default().resolve().unwrap();
        assert_eq!(c.step, StepControl::default());
        assert_eq!(c.t_max, DEFAULT_T_MAX);
        let bad = ControlConfig {
            rtol: Some(-1.0),
            ..ControlConfig::default()
        };
        assert!(bad.resolve().is_err());
    }
}
