//! Presentational SVG plots of a blow-up run.

use std::path::Path;

use plotters::prelude::*;

use rep_core::analysis::Ladder;
use rep_core::dynamics::Observe;
use rep_core::integrate::Trajectory;

use crate::error::CliError;

type Series = (String, Vec<(f64, f64)>);

const PALETTE: [RGBColor; 6] = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Output(format!("svg: {e}"))
}

fn bounds(series: &[Series]) -> Option<((f64, f64), (f64, f64))> {
    let pts = series
        .iter()
        .flat_map(|(_, p)| p)
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return None;
    }
    let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, b + 0.5) };
    Some((pad(x0, x1), pad(y0, y1)))
}

fn line_plot(
    path: &Path,
    caption: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series],
) -> Result<(), CliError> {
    let Some(((x0, x1), (y0, y1))) = bounds(series) else {
        return Ok(());
    };
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let finite = pts
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        chart
            .draw_series(LineSeries::new(finite, color))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// `sgn(x) log10(1 + |x|)`: linear near zero, logarithmic in the tail.
fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p() / std::f64::consts::LN_10
}

/// Writes `lambda.svg`, `rho.svg` and `ladder.svg` into `dir`.
pub fn write_plots(
    dir: &Path,
    sys: &dyn Observe,
    traj: &Trajectory,
    ladder: Option<&Ladder>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let obs: Vec<_> = traj.states().iter().map(|y| sys.observe(y)).collect();
    let t = traj.times();
    let n = obs.first().map_or(0, |o| o.lambda.len());

    let lambda: Vec<Series> = (0..n)
        .map(|i| {
            let pts = t
                .iter()
                .zip(&obs)
                .map(|(t, o)| (*t, signed_log(o.lambda[i])))
                .collect();
            (format!("lambda_{}", i + 1), pts)
        })
        .collect();
    line_plot(
        &dir.join("lambda.svg"),
        "eigenvalues",
        "t",
        "sgn log10(1 + |lambda|)",
        &lambda,
    )?;

    let rho = vec![(
        "rho".to_string(),
        t.iter()
            .zip(&obs)
            .map(|(t, o)| (*t, o.rho.log10()))
            .collect(),
    )];
    line_plot(&dir.join("rho.svg"), "density", "t", "log10 rho", &rho)?;

    if let Some(l) = ladder {
        let log = |f: &dyn Fn(&rep_core::dynamics::Observation) -> f64| -> Vec<(f64, f64)> {
            l.taus
                .iter()
                .zip(&l.obs)
                .map(|(tau, o)| (tau.log10(), f(o).abs().log10()))
                .collect()
        };
        let series = vec![
            ("|lambda_1|".to_string(), log(&|o| o.lambda[0])),
            (format!("|lambda_{n}|"), log(&|o| o.lambda[n - 1])),
            ("rho".to_string(), log(&|o| o.rho)),
        ];
        line_plot(
            &dir.join("ladder.svg"),
            "rate ladder",
            "log10 (tB - t)",
            "log10 magnitude",
            &series,
        )?;
    }
    Ok(())
}
