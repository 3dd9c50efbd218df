//! Compilation of a path diagram into a linear-Gaussian state-space model.
//!
//! Latent variables become state blocks holding the current value and as
//! many lagged copies as the diagram reads. Observed variables with
//! incoming edges form the observation vector; everything else an equation
//! reads from the data (exogenous values, lagged observations, and
//! contemporaneous observed parents) enters through the input vector.
//!
//! ```text
//! x_t = F x_{t-1} + B u_t + c + w_t     w_t ~ N(0, diag(q))
//! y_t = H x_t     + D u_t + d + v_t     v_t ~ N(0, diag(r))
//! x_{-1} ~ N(m0, P0)
//! ```

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pathmodel::{validate_diagram, PathDiagram, Role, Series};

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub transition: DMatrix<f64>,
    pub state_input: DMatrix<f64>,
    pub state_intercept: DVector<f64>,
    pub process_noise: DVector<f64>,
    pub observation: DMatrix<f64>,
    pub obs_input: DMatrix<f64>,
    pub obs_intercept: DVector<f64>,
    pub obs_noise: DVector<f64>,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.state_input.ncols()
    }

    pub fn check(&self) -> Result<()> {
        let (n, p, m) = (self.state_dim(), self.obs_dim(), self.input_dim());
        let shapes = [
            ("transition", self.transition.shape(), (n, n)),
            ("state_input", self.state_input.shape(), (n, m)),
            ("state_intercept", self.state_intercept.shape(), (n, 1)),
            ("process_noise", self.process_noise.shape(), (n, 1)),
            ("observation", self.observation.shape(), (p, n)),
            ("obs_input", self.obs_input.shape(), (p, m)),
            ("obs_intercept", self.obs_intercept.shape(), (p, 1)),
            ("obs_noise", self.obs_noise.shape(), (p, 1)),
            ("initial_mean", self.initial_mean.shape(), (n, 1)),
            ("initial_cov", self.initial_cov.shape(), (n, n)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Dimension(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if self.process_noise.iter().chain(self.obs_noise.iter()).any(|&v| v < 0.0) {
            return Err(Error::NonPositiveVariance("noise diagonal".into()));
        }
        Ok(())
    }
}

/// Inputs and observations of one series, already laid out for a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateSeries {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl StateSeries {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LatentBlock {
    pub var: String,
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InputKind {
    /// A value read from the data at `t - lag`.
    Data,
    /// Contemporaneous value of observation row `row`; must be predicted
    /// when forecasting.
    CurrentObservation(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct InputSlot {
    pub var: String,
    pub lag: usize,
    pub kind: InputKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Regressor {
    Input(usize),
    /// Component of `x_t`.
    State(usize),
    /// Component of `x_{t-1}`.
    PrevState(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EquationKind {
    Latent { block: usize },
    Observed { row: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Term {
    pub edge: usize,
    pub regressor: Regressor,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Equation {
    pub var: String,
    pub kind: EquationKind,
    pub terms: Vec<Term>,
}

/// Structural bookkeeping shared by compilation, EM and prediction.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub diagram: PathDiagram,
    pub latents: Vec<LatentBlock>,
    pub observed: Vec<String>,
    pub inputs: Vec<InputSlot>,
    pub equations: Vec<Equation>,
    pub state_dim: usize,
}

impl Layout {
    pub fn new(diagram: &PathDiagram) -> Result<Self> {
        let diagram = validate_diagram(diagram)?;
        let role = |name: &str| diagram.variable(name).map(|v| v.role);

        // Endogenous variables in topological order (validated edges are
        // sorted by target rank).
        let mut endogenous: Vec<String> = Vec::new();
        for e in &diagram.edges {
            if !endogenous.contains(&e.target) {
                endogenous.push(e.target.clone());
            }
        }
        // Latent variables without parents still need a state block.
        for v in diagram.variables.iter().filter(|v| v.role == Role::Latent) {
            if !endogenous.contains(&v.name) {
                endogenous.push(v.name.clone());
            }
        }

        let mut latents = Vec::new();
        let mut offset = 0;
        for name in endogenous.iter().filter(|n| role(n) == Some(Role::Latent)) {
            let reach = diagram
                .edges
                .iter()
                .filter(|e| &e.source == name)
                .map(|e| match role(&e.target) {
                    Some(Role::Latent) => e.lag.saturating_sub(1),
                    _ => e.lag,
                })
                .max()
                .unwrap_or(0);
            latents.push(LatentBlock {
                var: name.clone(),
                offset,
                width: reach + 1,
            });
            offset += reach + 1;
        }
        // Latent variables used only as sources (never targets) were added
        // above; any remaining latent source is impossible.
        let observed: Vec<String> = endogenous
            .iter()
            .filter(|n| role(n) == Some(Role::Observed))
            .cloned()
            .collect();

        let block_of = |name: &str| latents.iter().position(|b| b.var == name);
        let mut inputs: Vec<InputSlot> = Vec::new();
        let mut input_slot = |var: &str, lag: usize, kind: InputKind| -> usize {
            if let Some(i) = inputs.iter().position(|s| s.var == var && s.lag == lag) {
                return i;
            }
            inputs.push(InputSlot {
                var: var.to_string(),
                lag,
                kind,
            });
            inputs.len() - 1
        };

        let mut equations = Vec::new();
        for name in &endogenous {
            let kind = match block_of(name) {
                Some(block) => EquationKind::Latent { block },
                None => EquationKind::Observed {
                    row: observed.iter().position(|o| o == name).expect("observed"),
                },
            };
            let mut terms = Vec::new();
            for (edge, e) in diagram.edges.iter().enumerate().filter(|(_, e)| &e.target == name) {
                let src_block = block_of(&e.source);
                let regressor = match (kind, src_block) {
                    (EquationKind::Latent { .. }, Some(b)) => {
                        if e.lag == 0 {
                            return Err(Error::Unsupported(format!("contemporaneous latent-to-latent edge {e}")));
                        }
                        Regressor::PrevState(latents[b].offset + e.lag - 1)
                    }
                    (EquationKind::Observed { .. }, Some(b)) => Regressor::State(latents[b].offset + e.lag),
                    (_, None) => {
                        let obs_row = observed.iter().position(|o| o == &e.source);
                        let input_kind = match (obs_row, e.lag) {
                            (Some(r), 0) => {
                                if matches!(kind, EquationKind::Latent { .. }) {
                                    return Err(Error::Unsupported(format!(
                                        "latent `{name}` depends on contemporaneous observation {e}"
                                    )));
                                }
                                InputKind::CurrentObservation(r)
                            }
                            _ => InputKind::Data,
                        };
                        Regressor::Input(input_slot(&e.source, e.lag, input_kind))
                    }
                };
                terms.push(Term { edge, regressor });
            }
            equations.push(Equation {
                var: name.clone(),
                kind,
                terms,
            });
        }

        Ok(Self {
            diagram,
            latents,
            observed,
            inputs,
            equations,
            state_dim: offset,
        })
    }

    /// Build the state-space matrices for a parameter set.
    pub fn model(&self, params: &ModelParams) -> Result<StateSpaceModel> {
        if params.coefficients.len() != self.diagram.edges.len() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} edges",
                params.coefficients.len(),
                self.diagram.edges.len()
            )));
        }
        let (n, p, m) = (self.state_dim, self.observed.len(), self.inputs.len());
        let mut ssm = StateSpaceModel {
            transition: DMatrix::zeros(n, n),
            state_input: DMatrix::zeros(n, m),
            state_intercept: DVector::zeros(n),
            process_noise: DVector::zeros(n),
            observation: DMatrix::zeros(p, n),
            obs_input: DMatrix::zeros(p, m),
            obs_intercept: DVector::zeros(p),
            obs_noise: DVector::zeros(p),
            initial_mean: DVector::zeros(n),
            initial_cov: DMatrix::identity(n, n) * params.initial_variance,
        };
        for eq in &self.equations {
            let variance = *params
                .variances
                .get(&eq.var)
                .ok_or_else(|| Error::NonPositiveVariance(eq.var.clone()))?;
            if !(variance > 0.0) || !variance.is_finite() {
                return Err(Error::NonPositiveVariance(eq.var.clone()));
            }
            let intercept = params.intercepts.get(&eq.var).copied().unwrap_or(0.0);
            match eq.kind {
                EquationKind::Latent { block } => {
                    let b = &self.latents[block];
                    let row = b.offset;
                    for t in &eq.terms {
                        let c = params.coefficients[t.edge];
                        match t.regressor {
                            Regressor::PrevState(j) => ssm.transition[(row, j)] += c,
                            Regressor::Input(k) => ssm.state_input[(row, k)] += c,
                            Regressor::State(_) => unreachable!("latent equations read x_(t-1)"),
                        }
                    }
                    for j in 1..b.width {
                        ssm.transition[(row + j, row + j - 1)] = 1.0;
                    }
                    ssm.state_intercept[row] = intercept;
                    ssm.process_noise[row] = variance;
                    let mean = params.initial_means.get(&eq.var).copied().unwrap_or(0.5);
                    for j in 0..b.width {
                        ssm.initial_mean[row + j] = mean;
                    }
                }
                EquationKind::Observed { row } => {
                    for t in &eq.terms {
                        let c = params.coefficients[t.edge];
                        match t.regressor {
                            Regressor::State(j) => ssm.observation[(row, j)] += c,
                            Regressor::Input(k) => ssm.obs_input[(row, k)] += c,
                            Regressor::PrevState(_) => unreachable!("observations read x_t"),
                        }
                    }
                    ssm.obs_intercept[row] = intercept;
                    ssm.obs_noise[row] = variance;
                }
            }
        }
        Ok(ssm)
    }

    /// Column indices of the panel variables this layout reads.
    pub fn bind(&self, variables: &[String]) -> Result<Binding> {
        let find = |name: &str| {
            variables
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::Panel(format!("panel lacks column `{name}`")))
        };
        Ok(Binding {
            inputs: self.inputs.iter().map(|s| find(&s.var)).collect::<Result<_>>()?,
            outputs: self.observed.iter().map(|o| find(o)).collect::<Result<_>>()?,
        })
    }

    /// Lay out one participant's data. Lagged reads before step 0 use the
    /// step-0 value.
    pub fn series_data(&self, binding: &Binding, series: &Series) -> Result<StateSeries> {
        let len = series.len();
        let mut out = StateSeries {
            inputs: Vec::with_capacity(len),
            outputs: Vec::with_capacity(len),
        };
        let value = |col: usize, var: &str, t: usize| -> Result<f64> {
            series.columns[col][t].ok_or_else(|| Error::MissingObserved {
                variable: var.to_string(),
                participant: series.id.clone(),
                step: t,
            })
        };
        for t in 0..len {
            let mut u = DVector::zeros(self.inputs.len());
            for (k, slot) in self.inputs.iter().enumerate() {
                u[k] = value(binding.inputs[k], &slot.var, t.saturating_sub(slot.lag))?;
            }
            let mut y = DVector::zeros(self.observed.len());
            for (r, name) in self.observed.iter().enumerate() {
                y[r] = value(binding.outputs[r], name, t)?;
            }
            out.inputs.push(u);
            out.outputs.push(y);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Binding {
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

/// Free quantities of a compiled diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One coefficient per diagram edge, in diagram edge order.
    pub coefficients: Vec<f64>,
    /// Intercept per endogenous variable; absent means 0.
    pub intercepts: BTreeMap<String, f64>,
    /// Noise variance per endogenous variable.
    pub variances: BTreeMap<String, f64>,
    /// Prior mean of each latent block (all lagged copies); absent means 0.5.
    pub initial_means: BTreeMap<String, f64>,
    /// Prior variance of every state component.
    pub initial_variance: f64,
}

/// Compile a diagram whose edges all carry coefficients. Intercepts are
/// zero and the state prior is `N(0.5, I)`.
pub fn to_state_space(diagram: &PathDiagram, variances: &BTreeMap<String, f64>) -> Result<StateSpaceModel> {
    let layout = Layout::new(diagram)?;
    let coefficients = layout
        .diagram
        .edges
        .iter()
        .map(|e| {
            e.coefficient
                .ok_or_else(|| Error::Config(format!("edge {e} has no coefficient")))
        })
        .collect::<Result<Vec<_>>>()?;
    for (var, v) in variances {
        if !(*v > 0.0) {
            return Err(Error::NonPositiveVariance(var.clone()));
        }
    }
    layout.model(&ModelParams {
        coefficients,
        intercepts: BTreeMap::new(),
        variances: variances.clone(),
        initial_means: BTreeMap::new(),
        initial_variance: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathmodel::{build_paper_diagram, parse_diagram, TRUST};
    use std::collections::BTreeSet;

    fn var(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn ar1_embedding() {
        let d = parse_diagram("var y latent continuous -10 10\ny ~ y@1 = 0.5\n").unwrap();
        let m = to_state_space(&d, &var(&[("y", 1.0)])).unwrap();
        assert_eq!(m.transition, DMatrix::from_row_slice(1, 1, &[0.5]));
        assert_eq!(m.process_noise[0], 1.0);
        assert_eq!(m.obs_dim(), 0);
    }

    #[test]
    fn pure_regression_has_no_state() {
        let d =
            parse_diagram("var y observed continuous -10 10\nvar x observed continuous -10 10\ny ~ x@0 = 2\n").unwrap();
        let m = to_state_space(&d, &var(&[("y", 0.3)])).unwrap();
        assert_eq!(m.state_dim(), 0);
        assert_eq!(m.obs_input, DMatrix::from_row_slice(1, 1, &[2.0]));
        assert_eq!(m.obs_noise[0], 0.3);
    }

    #[test]
    fn trust_diagram_state_holds_needed_lags() {
        let d = build_paper_diagram(true, &BTreeSet::from([1, 2])).unwrap();
        let layout = Layout::new(&d).unwrap();
        assert_eq!(layout.latents.len(), 1);
        assert_eq!(layout.latents[0].var, TRUST);
        // lag 2 is read through the lag-1 copy of x_(t-1)
        assert_eq!(layout.state_dim, 2);
        assert_eq!(layout.observed, vec!["OverUnder".to_string(), "Reliance".to_string()]);

        let d3 = build_paper_diagram(true, &BTreeSet::from([1, 2, 3])).unwrap();
        assert_eq!(Layout::new(&d3).unwrap().state_dim, 3);
    }

    #[test]
    fn non_positive_variance_rejected() {
        let d = parse_diagram("var y latent continuous -10 10\ny ~ y@1 = 0.5\n").unwrap();
        assert_eq!(
            to_state_space(&d, &var(&[("y", 0.0)])),
            Err(Error::NonPositiveVariance("y".into()))
        );
    }

    #[test]
    fn latent_reading_current_observation_unsupported() {
        let text = "var z latent continuous -1 1\nvar y observed continuous -1 1\nvar x observed continuous -1 1\n\
                    y ~ x@0\nz ~ y@0\ny ~ z@1\n";
        let d = parse_diagram(text).unwrap();
        assert!(matches!(Layout::new(&d), Err(Error::Unsupported(_))));
    }
}
