//! Line-oriented diagram format.
//!
//! ```text
//! # comment
//! var AIP observed continuous 0 1
//! var OverUnder observed ternary
//! target OverUnder
//! max_lag 1
//! OverUnder ~ AIP@0 = -0.42
//! ```
//!
//! The six trust-model variables are implicitly declared with their default
//! domains when an edge references them without a `var` line. `target`
//! defaults to the left-hand side of the first edge, `max_lag` to the
//! largest edge lag (at least 1).

use std::fmt::Write as _;

use super::diagram::{
    is_identifier, trust_variables, validate_diagram, LaggedEdge, PathDiagram, Role, Scale, VariableSpec,
};
use crate::error::{Error, Result};

pub fn parse_diagram(text: &str) -> Result<PathDiagram> {
    let mut variables: Vec<VariableSpec> = Vec::new();
    let mut edges: Vec<LaggedEdge> = Vec::new();
    let mut target: Option<String> = None;
    let mut max_lag: Option<usize> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let syntax = |message: String| Error::Syntax { line: line_no, message };
        let mut words = line.split_whitespace();
        match words.next() {
            Some("var") => {
                let spec = parse_var(words.collect(), &syntax)?;
                if variables.iter().any(|v| v.name == spec.name) {
                    return Err(Error::DuplicateVariable(spec.name));
                }
                variables.push(spec);
            }
            Some("target") => {
                let name = words
                    .next()
                    .ok_or_else(|| syntax("`target` needs a variable name".into()))?;
                if words.next().is_some() {
                    return Err(syntax("trailing tokens after target".into()));
                }
                target = Some(name.to_string());
            }
            Some("max_lag") => {
                let n = words
                    .next()
                    .and_then(|w| w.parse::<usize>().ok())
                    .ok_or_else(|| syntax("`max_lag` needs a non-negative integer".into()))?;
                if words.next().is_some() {
                    return Err(syntax("trailing tokens after max_lag".into()));
                }
                max_lag = Some(n);
            }
            _ => edges.push(parse_edge(line, &syntax)?),
        }
    }

    // Implicit declarations for the built-in trust variables.
    let builtins = trust_variables();
    let mut referenced: Vec<&str> = Vec::new();
    for e in &edges {
        referenced.push(&e.target);
        referenced.push(&e.source);
    }
    if let Some(t) = &target {
        referenced.push(t);
    }
    for name in referenced {
        if variables.iter().any(|v| v.name == name) {
            continue;
        }
        match builtins.iter().find(|b| b.name == name) {
            Some(b) => variables.push(b.clone()),
            None => return Err(Error::UnknownVariable(name.to_string())),
        }
    }

    let target = match target {
        Some(t) => t,
        None => edges
            .first()
            .map(|e| e.target.clone())
            .ok_or_else(|| Error::InvalidDiagram("no edges and no target".into()))?,
    };
    let max_lag = max_lag.unwrap_or_else(|| edges.iter().map(|e| e.lag).max().unwrap_or(0).max(1));

    validate_diagram(&PathDiagram {
        variables,
        edges,
        max_lag,
        target,
    })
}

fn parse_var(words: Vec<&str>, syntax: &dyn Fn(String) -> Error) -> Result<VariableSpec> {
    let (name, role, scale, rest) = match words.as_slice() {
        [name, role, scale, rest @ ..] => (*name, *role, *scale, rest),
        _ => {
            return Err(syntax(
                "expected `var <name> <observed|latent> <continuous|binary|ternary> [lo hi]`".into(),
            ))
        }
    };
    if !is_identifier(name) {
        return Err(syntax(format!("`{name}` is not a valid identifier")));
    }
    let role = match role {
        "observed" => Role::Observed,
        "latent" => Role::Latent,
        other => return Err(syntax(format!("unknown role `{other}`"))),
    };
    let scale = match scale {
        "continuous" => Scale::Continuous,
        "binary" => Scale::Binary,
        "ternary" => Scale::Ternary,
        other => return Err(syntax(format!("unknown scale `{other}`"))),
    };
    let bounds = match rest {
        [] => None,
        [lo, hi] => {
            let lo: f64 = lo.parse().map_err(|_| syntax(format!("bad bound `{lo}`")))?;
            let hi: f64 = hi.parse().map_err(|_| syntax(format!("bad bound `{hi}`")))?;
            Some((lo, hi))
        }
        _ => return Err(syntax("range needs exactly two bounds".into())),
    };
    match scale {
        Scale::Continuous => {
            let (lo, hi) = bounds.ok_or_else(|| syntax("continuous variable needs `lo hi`".into()))?;
            VariableSpec::continuous(name, role, lo, hi)
        }
        Scale::Binary => {
            check_fixed(bounds, (0.0, 1.0), syntax)?;
            Ok(VariableSpec::binary(name, role))
        }
        Scale::Ternary => {
            check_fixed(bounds, (-1.0, 1.0), syntax)?;
            Ok(VariableSpec::ternary(name, role))
        }
    }
}

fn check_fixed(bounds: Option<(f64, f64)>, expected: (f64, f64), syntax: &dyn Fn(String) -> Error) -> Result<()> {
    match bounds {
        Some(b) if b != expected => Err(syntax(format!(
            "discrete scale has fixed range {expected:?}, got {b:?}"
        ))),
        _ => Ok(()),
    }
}

fn parse_edge(line: &str, syntax: &dyn Fn(String) -> Error) -> Result<LaggedEdge> {
    let (lhs, rhs) = line
        .split_once('~')
        .ok_or_else(|| syntax(format!("unrecognized line `{line}`")))?;
    let target = lhs.trim();
    if !is_identifier(target) {
        return Err(syntax(format!("`{target}` is not a valid identifier")));
    }
    let (term, coef) = match rhs.split_once('=') {
        Some((term, coef)) => {
            let c: f64 = coef
                .trim()
                .parse()
                .map_err(|_| syntax(format!("bad coefficient `{}`", coef.trim())))?;
            (term.trim(), Some(c))
        }
        None => (rhs.trim(), None),
    };
    let (source, lag) = term
        .split_once('@')
        .ok_or_else(|| syntax(format!("expected `<source>@<lag>`, got `{term}`")))?;
    let source = source.trim();
    if !is_identifier(source) {
        return Err(syntax(format!("`{source}` is not a valid identifier")));
    }
    let lag: usize = lag
        .trim()
        .parse()
        .map_err(|_| syntax(format!("bad lag `{}`", lag.trim())))?;
    Ok(LaggedEdge {
        source: source.to_string(),
        target: target.to_string(),
        lag,
        coefficient: coef,
    })
}

pub fn serialize_diagram(diagram: &PathDiagram) -> String {
    let mut out = String::new();
    for v in &diagram.variables {
        let _ = write!(out, "var {} {} {}", v.name, v.role, v.scale);
        if v.scale == Scale::Continuous {
            let _ = write!(out, " {} {}", v.range.0, v.range.1);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "target {}", diagram.target);
    let _ = writeln!(out, "max_lag {}", diagram.max_lag);
    for e in &diagram.edges {
        let _ = write!(out, "{} ~ {}@{}", e.target, e.source, e.lag);
        if let Some(c) = e.coefficient {
            let _ = write!(out, " = {c}");
        }
        out.push('\n');
    }
    out
}
