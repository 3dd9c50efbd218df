use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};

/// Canonical names of the six trust-model variables.
pub const AIP: &str = "AIP";
pub const HP: &str = "HP";
pub const TRUST: &str = "E_AIP";
pub const OVER_UNDER: &str = "OverUnder";
pub const RELIANCE: &str = "Reliance";
pub const CUE: &str = "Cue";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Observed,
    Latent,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Observed => "observed",
            Role::Latent => "latent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Continuous,
    Binary,
    Ternary,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Continuous => "continuous",
            Scale::Binary => "binary",
            Scale::Ternary => "ternary",
        })
    }
}

/// A node of the path diagram.
///
/// Binary and ternary scales carry their fixed value sets; the `range`
/// field then holds the enclosing interval (`[0, 1]` or `[-1, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSpec {
    pub name: String,
    pub role: Role,
    pub scale: Scale,
    pub range: (f64, f64),
}

impl VariableSpec {
    pub fn continuous(name: &str, role: Role, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidRange {
                name: name.to_string(),
                message: format!("need finite lo < hi, got [{lo}, {hi}]"),
            });
        }
        Ok(Self {
            name: name.to_string(),
            role,
            scale: Scale::Continuous,
            range: (lo, hi),
        })
    }

    pub fn binary(name: &str, role: Role) -> Self {
        Self {
            name: name.to_string(),
            role,
            scale: Scale::Binary,
            range: (0.0, 1.0),
        }
    }

    pub fn ternary(name: &str, role: Role) -> Self {
        Self {
            name: name.to_string(),
            role,
            scale: Scale::Ternary,
            range: (-1.0, 1.0),
        }
    }

    /// Whether `value` belongs to the variable's domain.
    pub fn admits(&self, value: f64) -> bool {
        match self.scale {
            Scale::Continuous => value >= self.range.0 && value <= self.range.1,
            Scale::Binary => value == 0.0 || value == 1.0,
            Scale::Ternary => value == -1.0 || value == 0.0 || value == 1.0,
        }
    }

    fn check(&self) -> Result<()> {
        if !is_identifier(&self.name) {
            return Err(Error::InvalidDiagram(format!(
                "`{}` is not a valid identifier",
                self.name
            )));
        }
        let ok = match self.scale {
            Scale::Continuous => self.range.0.is_finite() && self.range.1.is_finite() && self.range.0 < self.range.1,
            Scale::Binary => self.range == (0.0, 1.0),
            Scale::Ternary => self.range == (-1.0, 1.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidRange {
                name: self.name.clone(),
                message: format!("range {:?} inconsistent with {} scale", self.range, self.scale),
            })
        }
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A directed edge `source@lag -> target`. Lag 0 is contemporaneous.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedEdge {
    pub source: String,
    pub target: String,
    pub lag: usize,
    pub coefficient: Option<f64>,
}

impl LaggedEdge {
    pub fn new(source: &str, target: &str, lag: usize) -> Self {
        Self {
            source: source.to_string(),
            target: target.to_string(),
            lag,
            coefficient: None,
        }
    }

    pub fn with_coefficient(mut self, value: f64) -> Self {
        self.coefficient = Some(value);
        self
    }

    pub fn key(&self) -> (&str, &str, usize) {
        (&self.source, &self.target, self.lag)
    }
}

impl fmt::Display for LaggedEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}@{}", self.source, self.target, self.lag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathDiagram {
    pub variables: Vec<VariableSpec>,
    pub edges: Vec<LaggedEdge>,
    pub max_lag: usize,
    pub target: String,
}

impl PathDiagram {
    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn edge(&self, source: &str, target: &str, lag: usize) -> Option<&LaggedEdge> {
        self.edges
            .iter()
            .find(|e| e.source == source && e.target == target && e.lag == lag)
    }

    pub fn incoming<'a>(&'a self, target: &'a str) -> impl Iterator<Item = &'a LaggedEdge> + 'a {
        self.edges.iter().filter(move |e| e.target == target)
    }

    /// Largest lag actually used by an edge.
    pub fn edge_max_lag(&self) -> usize {
        self.edges.iter().map(|e| e.lag).max().unwrap_or(0)
    }

    /// Lags of the autoregressive `var@lag -> var` edges, ascending.
    pub fn self_lags(&self, var: &str) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|e| e.source == var && e.target == var && e.lag > 0)
            .map(|e| e.lag)
            .collect()
    }

    /// Variables with at least one incoming edge.
    pub fn endogenous(&self) -> Vec<&VariableSpec> {
        self.variables
            .iter()
            .filter(|v| self.edges.iter().any(|e| e.target == v.name))
            .collect()
    }

    /// Copy of the diagram with every coefficient cleared.
    pub fn without_coefficients(&self) -> PathDiagram {
        let mut d = self.clone();
        for e in &mut d.edges {
            e.coefficient = None;
        }
        d
    }
}

/// Check every diagram invariant and return the diagram with its edges
/// ordered by the topological rank of their target in the lag-0 subgraph.
pub fn validate_diagram(diagram: &PathDiagram) -> Result<PathDiagram> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, v) in diagram.variables.iter().enumerate() {
        v.check()?;
        if index.insert(v.name.as_str(), i).is_some() {
            return Err(Error::DuplicateVariable(v.name.clone()));
        }
    }
    if diagram.max_lag == 0 {
        return Err(Error::InvalidDiagram("max_lag must be positive".into()));
    }

    let mut seen = BTreeSet::new();
    for e in &diagram.edges {
        for name in [&e.source, &e.target] {
            if !index.contains_key(name.as_str()) {
                return Err(Error::UnknownVariable(name.clone()));
            }
        }
        if e.lag > diagram.max_lag {
            return Err(Error::LagExceedsMax {
                source_var: e.source.clone(),
                target: e.target.clone(),
                lag: e.lag,
                max_lag: diagram.max_lag,
            });
        }
        if let Some(c) = e.coefficient {
            if !c.is_finite() {
                return Err(Error::NonFinite(format!("coefficient of {e}")));
            }
        }
        if !seen.insert((e.source.clone(), e.target.clone(), e.lag)) {
            return Err(Error::DuplicateEdge {
                source_var: e.source.clone(),
                target: e.target.clone(),
                lag: e.lag,
            });
        }
    }

    let order = topological_order(diagram, &index)?;

    if !index.contains_key(diagram.target.as_str()) {
        return Err(Error::UnknownVariable(diagram.target.clone()));
    }
    if !diagram.edges.iter().any(|e| e.target == diagram.target) {
        return Err(Error::MissingInflow(diagram.target.clone()));
    }

    let mut rank = vec![0usize; diagram.variables.len()];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    let mut out = diagram.clone();
    out.edges.sort_by_key(|e| rank[index[e.target.as_str()]]);
    Ok(out)
}

/// Kahn's algorithm over lag-0 edges, ties broken by declaration order.
fn topological_order(diagram: &PathDiagram, index: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    let n = diagram.variables.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for e in diagram.edges.iter().filter(|e| e.lag == 0) {
        let s = index[e.source.as_str()];
        let t = index[e.target.as_str()];
        children[s].push(t);
        indegree[t] += 1;
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(Error::Cycle(find_cycle(&children, &indegree, diagram)))
}

/// Walk predecessors among the unresolved nodes until one repeats.
fn find_cycle(children: &[Vec<usize>], indegree: &[usize], diagram: &PathDiagram) -> Vec<String> {
    let n = children.len();
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (s, cs) in children.iter().enumerate() {
        for &c in cs {
            if indegree[s] > 0 && indegree[c] > 0 {
                parents[c].push(s);
            }
        }
    }
    let start = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
    let mut path = vec![start];
    let mut pos = vec![usize::MAX; n];
    pos[start] = 0;
    let mut cur = start;
    while let Some(&p) = parents[cur].first() {
        if pos[p] != usize::MAX {
            let mut cycle: Vec<usize> = path[pos[p]..].to_vec();
            cycle.reverse();
            let mut names: Vec<String> = cycle.iter().map(|&i| diagram.variables[i].name.clone()).collect();
            names.push(names[0].clone());
            return names;
        }
        pos[p] = path.len();
        path.push(p);
        cur = p;
    }
    vec![diagram.variables[start].name.clone()]
}

/// The six trust-model variables with their domains.
pub fn trust_variables() -> Vec<VariableSpec> {
    vec![
        VariableSpec::continuous(AIP, Role::Observed, 0.0, 1.0).expect("static range"),
        VariableSpec::continuous(HP, Role::Observed, 0.0, 1.0).expect("static range"),
        VariableSpec::continuous(TRUST, Role::Latent, 0.0, 1.0).expect("static range"),
        VariableSpec::ternary(OVER_UNDER, Role::Observed),
        VariableSpec::binary(RELIANCE, Role::Observed),
        VariableSpec::binary(CUE, Role::Observed),
    ]
}

/// Build the trust diagram: contemporaneous structure plus autoregressive
/// trust edges at each lag in `trust_lags`. The target is `OverUnder`.
pub fn build_paper_diagram(include_cue: bool, trust_lags: &BTreeSet<usize>) -> Result<PathDiagram> {
    if trust_lags.is_empty() {
        return Err(Error::InvalidDiagram("trust_lags must be nonempty".into()));
    }
    if trust_lags.contains(&0) {
        return Err(Error::InvalidDiagram("trust lags must be positive".into()));
    }
    let mut edges = vec![
        LaggedEdge::new(AIP, TRUST, 0),
        LaggedEdge::new(AIP, OVER_UNDER, 0),
        LaggedEdge::new(HP, OVER_UNDER, 0),
        LaggedEdge::new(TRUST, OVER_UNDER, 0),
        LaggedEdge::new(TRUST, RELIANCE, 0),
        LaggedEdge::new(OVER_UNDER, RELIANCE, 0),
    ];
    if include_cue {
        edges.push(LaggedEdge::new(CUE, TRUST, 0));
        edges.push(LaggedEdge::new(CUE, OVER_UNDER, 0));
    }
    edges.extend(trust_lags.iter().map(|&l| LaggedEdge::new(TRUST, TRUST, l)));
    let max_lag = *trust_lags.iter().next_back().expect("nonempty");
    validate_diagram(&PathDiagram {
        variables: trust_variables(),
        edges,
        max_lag,
        target: OVER_UNDER.to_string(),
    })
}

/// Replace the autoregressive lags of `var` with `lags`, keeping the rest
/// of the structure. `max_lag` grows if needed.
pub fn with_self_lags(base: &PathDiagram, var: &str, lags: &BTreeSet<usize>) -> Result<PathDiagram> {
    let mut d = base.without_coefficients();
    d.edges.retain(|e| !(e.source == var && e.target == var && e.lag > 0));
    d.edges.extend(lags.iter().map(|&l| LaggedEdge::new(var, var, l)));
    let lag_needed = d.edge_max_lag().max(1);
    d.max_lag = lag_needed;
    validate_diagram(&d)
}
