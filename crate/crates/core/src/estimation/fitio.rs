//! Text form of a [`FitResult`]: the fitted diagram followed by a
//! `[fit]` section of `key=value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::em::FitResult;
use crate::error::{Error, Result};
use crate::pathmodel::{parse_diagram, serialize_diagram};

const SECTION: &str = "[fit]";

pub fn serialize_fit(fit: &FitResult) -> String {
    let mut out = serialize_diagram(&fit.diagram);
    out.push_str(SECTION);
    out.push('\n');
    for (k, v) in &fit.intercepts {
        let _ = writeln!(out, "intercept.{k}={v}");
    }
    for (k, v) in &fit.variances {
        let _ = writeln!(out, "variance.{k}={v}");
    }
    for (k, v) in &fit.initial_means {
        let _ = writeln!(out, "initial_mean.{k}={v}");
    }
    let _ = writeln!(out, "initial_variance={}", fit.initial_variance);
    let _ = writeln!(out, "loglik={}", fit.log_likelihood);
    let _ = writeln!(out, "aic={}", fit.aic);
    let _ = writeln!(out, "n_params={}", fit.n_params);
    let _ = writeln!(out, "iterations={}", fit.n_iterations);
    let _ = writeln!(out, "converged={}", fit.converged);
    let trace: Vec<String> = fit.loglik_trace.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "trace={}", trace.join(","));
    out
}

pub fn parse_fit(text: &str) -> Result<FitResult> {
    let (diagram_text, trailer) = text
        .split_once(&format!("{SECTION}\n"))
        .or_else(|| text.split_once(SECTION))
        .ok_or_else(|| Error::Syntax {
            line: text.lines().count() + 1,
            message: format!("missing `{SECTION}` section"),
        })?;
    let diagram = parse_diagram(diagram_text)?;
    let first_line = diagram_text.lines().count() + 2;

    let mut intercepts = BTreeMap::new();
    let mut variances = BTreeMap::new();
    let mut initial_means = BTreeMap::new();
    let mut scalars: BTreeMap<&str, &str> = BTreeMap::new();
    for (i, line) in trailer.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let syntax = |message: String| Error::Syntax {
            line: first_line + i,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected key=value, got `{line}`")))?;
        let number = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| syntax(format!("bad number `{value}`")))
        };
        if let Some(var) = key.strip_prefix("intercept.") {
            intercepts.insert(var.to_string(), number()?);
        } else if let Some(var) = key.strip_prefix("variance.") {
            variances.insert(var.to_string(), number()?);
        } else if let Some(var) = key.strip_prefix("initial_mean.") {
            initial_means.insert(var.to_string(), number()?);
        } else {
            scalars.insert(key, value);
        }
    }
    let get = |key: &str| -> Result<&str> {
        scalars.get(key).copied().ok_or_else(|| Error::Syntax {
            line: first_line,
            message: format!("missing `{key}`"),
        })
    };
    let float = |key: &str| -> Result<f64> {
        get(key)?.parse().map_err(|_| Error::Syntax {
            line: first_line,
            message: format!("bad `{key}`"),
        })
    };
    let int = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| Error::Syntax {
            line: first_line,
            message: format!("bad `{key}`"),
        })
    };
    let converged = match get("converged")? {
        "true" => true,
        "false" => false,
        other => {
            return Err(Error::Syntax {
                line: first_line,
                message: format!("bad converged flag `{other}`"),
            })
        }
    };
    let trace = match scalars.get("trace") {
        Some(t) if !t.is_empty() => t
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Syntax {
                    line: first_line,
                    message: format!("bad trace value `{v}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };
    if diagram.edges.iter().any(|e| e.coefficient.is_none()) {
        return Err(Error::InvalidDiagram("fitted diagram has unset coefficients".into()));
    }
    Ok(FitResult {
        diagram,
        intercepts,
        variances,
        initial_means,
        initial_variance: float("initial_variance")?,
        log_likelihood: float("loglik")?,
        aic: float("aic")?,
        n_params: int("n_params")?,
        n_iterations: int("iterations")?,
        converged,
        loglik_trace: trace,
    })
}
