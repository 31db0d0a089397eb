//! Finite-difference derivative of a fixed polynomial, compared with the
//! exact derivative. Used by the bundled `fdiff` demo study.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};

/// p(x) = 3x⁴ − 2x³ + x − 5
fn p(x: f64) -> f64 {
    ((3.0 * x - 2.0) * x * x + 1.0) * x - 5.0
}

/// p'(x) = 12x³ − 6x² + 1
fn dp(x: f64) -> f64 {
    (12.0 * x - 6.0) * x * x + 1.0
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scheme {
    Forward,
    Backward,
    Central,
}

fn derivative(scheme: Scheme, x: f64, h: f64) -> f64 {
    match scheme {
        Scheme::Forward => (p(x + h) - p(x)) / h,
        Scheme::Backward => (p(x) - p(x - h)) / h,
        Scheme::Central => (p(x + h) - p(x - h)) / (2.0 * h),
    }
}

#[derive(Debug, Parser)]
#[command(version, about = "Finite-difference derivative of 3x^4 - 2x^3 + x - 5 on [0, 1]")]
struct Args {
    /// Step width h.
    #[arg(long)]
    step: f64,
    #[arg(long, value_enum, default_value = "central")]
    scheme: Scheme,
    /// Number of evenly spaced evaluation points.
    #[arg(long, default_value_t = 11)]
    points: usize,
    /// CSV output with X, FD_DERIVATIVE, EXACT_DERIVATIVE, ABS_ERROR.
    #[arg(long, default_value = "derivative.csv")]
    out: PathBuf,
    /// Also dump the sampled polynomial values (raw, primary data).
    #[arg(long)]
    samples: Option<PathBuf>,
}

fn run(args: &Args) -> Result<()> {
    if !(args.step.is_finite() && args.step > 0.0) {
        bail!("--step must be a positive number");
    }
    if args.points < 2 {
        bail!("--points must be at least 2");
    }
    let xs: Vec<f64> = (0..args.points)
        .map(|i| i as f64 / (args.points - 1) as f64)
        .collect();

    let mut csv = String::from("X,FD_DERIVATIVE,EXACT_DERIVATIVE,ABS_ERROR\n");
    for &x in &xs {
        let fd = derivative(args.scheme, x, args.step);
        let exact = dp(x);
        csv.push_str(&format!("{x},{fd},{exact},{}\n", (fd - exact).abs()));
    }
    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;

    if let Some(path) = &args.samples {
        let mut raw = String::new();
        for &x in &xs {
            for s in [-1.0, 0.0, 1.0] {
                let xi = x + s * args.step;
                raw.push_str(&format!("{xi} {}\n", p(xi)));
            }
        }
        fs::write(path, raw).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("labrun-fdiff: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_error_is_the_third_derivative_term() {
        // p has no fifth derivative, so the central error is exactly h²·p'''(x)/6.
        let h = 1e-2;
        for x in [0.0, 0.25, 0.5, 1.0] {
            let err = derivative(Scheme::Central, x, h) - dp(x);
            let predicted = h * h * (72.0 * x - 12.0) / 6.0;
            assert!((err - predicted).abs() < 1e-10, "x={x}: {err} vs {predicted}");
        }
    }

    #[test]
    fn forward_difference_error_shrinks_linearly() {
        let e1 = (derivative(Scheme::Forward, 0.5, 1e-2) - dp(0.5)).abs();
        let e2 = (derivative(Scheme::Forward, 0.5, 1e-3) - dp(0.5)).abs();
        let ratio = e1 / e2;
        assert!((8.0..12.0).contains(&ratio), "ratio {ratio}");
    }
}
