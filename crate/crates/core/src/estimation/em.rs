//! Maximum-likelihood fitting by expectation-maximization.
//!
//! The E-step runs the RTS smoother per participant and accumulates the
//! second moments of `v_t = [1, u_t, y_t, x_t, x_(t-1)]`. Every structural
//! equation is a linear regression on entries of `v_t`, so the M-step is a
//! set of small normal-equation solves.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::kalman::{kalman_filter, smooth_from_filter};
use super::statespace::{EquationKind, Layout, ModelParams, Regressor, StateSeries};
use crate::error::{Error, Result};
use crate::pathmodel::{PanelDataset, PathDiagram, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Stop when the relative log-likelihood change drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub variance_floor: f64,
    /// Process-noise variance of every latent variable. Held fixed: it sets
    /// the latent scale, which the likelihood cannot identify.
    pub latent_variance: f64,
    pub initial_latent_mean: f64,
    pub initial_variance: f64,
    /// Smoothing weight of the warm-start latent trajectory.
    pub init_smoothing: f64,
    /// Blank latent columns before fitting.
    pub mask_latent: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            variance_floor: 1e-8,
            latent_variance: 0.01,
            initial_latent_mean: 0.5,
            initial_variance: 1.0,
            init_smoothing: 0.5,
            mask_latent: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// The fitted diagram; every edge carries its coefficient.
    pub diagram: PathDiagram,
    pub intercepts: BTreeMap<String, f64>,
    /// Residual variance per endogenous variable.
    pub variances: BTreeMap<String, f64>,
    pub initial_means: BTreeMap<String, f64>,
    pub initial_variance: f64,
    pub log_likelihood: f64,
    pub aic: f64,
    pub n_params: usize,
    pub n_iterations: usize,
    pub converged: bool,
    /// Log-likelihood at each visited parameter set, in order.
    pub loglik_trace: Vec<f64>,
}

impl FitResult {
    pub fn coefficient(&self, source: &str, target: &str, lag: usize) -> Option<f64> {
        self.diagram.edge(source, target, lag).and_then(|e| e.coefficient)
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            coefficients: self
                .diagram
                .edges
                .iter()
                .map(|e| e.coefficient.unwrap_or(0.0))
                .collect(),
            intercepts: self.intercepts.clone(),
            variances: self.variances.clone(),
            initial_means: self.initial_means.clone(),
            initial_variance: self.initial_variance,
        }
    }
}

/// `-2 logL + 2k`.
pub fn aic(fit: &FitResult) -> f64 {
    aic_value(fit.log_likelihood, fit.n_params)
}

pub fn aic_value(log_likelihood: f64, n_params: usize) -> f64 {
    -2.0 * log_likelihood + 2.0 * n_params as f64
}

/// Offsets of the blocks of `v_t`.
#[derive(Debug, Clone, Copy)]
struct StatIndex {
    m: usize,
    p: usize,
    n: usize,
}

impl StatIndex {
    fn dim(&self) -> usize {
        1 + self.m + self.p + 2 * self.n
    }
    fn input(&self, k: usize) -> usize {
        1 + k
    }
    fn obs(&self, r: usize) -> usize {
        1 + self.m + r
    }
    fn state(&self, j: usize) -> usize {
        1 + self.m + self.p + j
    }
    fn prev(&self, j: usize) -> usize {
        1 + self.m + self.p + self.n + j
    }
    fn regressor(&self, r: Regressor) -> usize {
        match r {
            Regressor::Input(k) => self.input(k),
            Regressor::State(j) => self.state(j),
            Regressor::PrevState(j) => self.prev(j),
        }
    }
}

struct Problem {
    layout: Layout,
    data: Vec<StateSeries>,
    free: Vec<bool>,
    idx: StatIndex,
    n_steps: usize,
}

pub fn em_fit(diagram: &PathDiagram, panel: &PanelDataset, config: &FitConfig) -> Result<FitResult> {
    if !(config.variance_floor > 0.0) || !(config.latent_variance > 0.0) {
        return Err(Error::Config("variances in fit config must be positive".into()));
    }
    let layout = Layout::new(diagram)?;
    panel.check_against(&layout.diagram)?;
    let panel = if config.mask_latent {
        panel.mask_latent(&layout.diagram)
    } else {
        panel.clone()
    };
    let n_steps = panel.total_steps();
    if !(panel.n_participants() >= 2 || n_steps >= 10) || n_steps == 0 {
        return Err(Error::InsufficientData(format!(
            "{} participants with {} steps in total",
            panel.n_participants(),
            n_steps
        )));
    }

    let free: Vec<bool> = layout.diagram.edges.iter().map(|e| e.coefficient.is_none()).collect();
    check_regressor_variance(&layout, &panel, &free)?;

    let binding = layout.bind(&panel.variables)?;
    let data = panel
        .series
        .iter()
        .map(|s| layout.series_data(&binding, s))
        .collect::<Result<Vec<_>>>()?;
    let idx = StatIndex {
        m: layout.inputs.len(),
        p: layout.observed.len(),
        n: layout.state_dim,
    };
    let problem = Problem {
        layout,
        data,
        free,
        idx,
        n_steps,
    };

    let mut params = initial_params(&problem, &panel, config)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (ll, stats) = e_step(&problem, &params)?;
        trace.push(ll);
        if let [.., prev, last] = trace.as_slice() {
            let rel = (last - prev).abs() / prev.abs().max(1e-300);
            if rel < config.tolerance {
                converged = true;
                break;
            }
        }
        if iterations == config.max_iterations {
            break;
        }
        params = m_step(&problem, &params, &stats, config);
        iterations += 1;
    }

    let log_likelihood = *trace.last().expect("at least one E-step");
    let mut fitted = problem.layout.diagram.clone();
    for (e, c) in fitted.edges.iter_mut().zip(&params.coefficients) {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("coefficient of {e}")));
        }
        e.coefficient = Some(*c);
    }
    let n_free_variances = problem
        .layout
        .equations
        .iter()
        .filter(|e| matches!(e.kind, EquationKind::Observed { .. }))
        .count();
    let n_params = problem.free.iter().filter(|&&f| f).count() + n_free_variances;
    Ok(FitResult {
        diagram: fitted,
        intercepts: params.intercepts,
        variances: params.variances,
        initial_means: params.initial_means,
        initial_variance: params.initial_variance,
        log_likelihood,
        aic: aic_value(log_likelihood, n_params),
        n_params,
        n_iterations: iterations,
        converged,
        loglik_trace: trace,
    })
}

fn check_regressor_variance(layout: &Layout, panel: &PanelDataset, free: &[bool]) -> Result<()> {
    let mut flat = Vec::new();
    for (e, _) in layout.diagram.edges.iter().zip(free).filter(|(_, &f)| f) {
        if layout.diagram.variable(&e.source).map(|v| v.role) != Some(Role::Observed) {
            continue;
        }
        let Some(col) = panel.var_index(&e.source) else {
            continue;
        };
        let values: Vec<f64> = panel
            .series
            .iter()
            .flat_map(|s| s.columns[col].iter().flatten().copied())
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 1e-12) && !flat.contains(&e.source) {
            flat.push(e.source.clone());
        }
    }
    if flat.is_empty() {
        Ok(())
    } else {
        Err(Error::ZeroVarianceRegressor(flat))
    }
}

/// Least squares with a minimum-norm fallback for rank-deficient designs.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    solve_normal(&ata, &atb)
}

fn solve_normal(ata: &DMatrix<f64>, atb: &DVector<f64>) -> DVector<f64> {
    if ata.ncols() == 0 {
        return DVector::zeros(0);
    }
    let scale = ata.amax().max(1e-300);
    if let Some(ch) = ata.clone().cholesky() {
        // Reject numerically singular factorizations.
        let min_pivot = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if min_pivot * min_pivot > 1e-12 * scale {
            return ch.solve(atb);
        }
    }
    let svd = ata.clone().svd(true, true);
    svd.solve(atb, 1e-10 * scale)
        .unwrap_or_else(|_| DVector::zeros(ata.ncols()))
}

/// Warm start: per-equation OLS with a smoothed stand-in for each latent.
fn initial_params(problem: &Problem, panel: &PanelDataset, config: &FitConfig) -> Result<ModelParams> {
    let layout = &problem.layout;
    let d = &layout.diagram;

    // Stand-in trajectories for latent variables, per participant.
    let mut latent_init: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for block in &layout.latents {
        let own = panel.var_index(&block.var);
        let parent = d
            .edges
            .iter()
            .filter(|e| e.target == block.var && e.lag == 0)
            .find(|e| d.variable(&e.source).map(|v| v.role) == Some(Role::Observed))
            .and_then(|e| panel.var_index(&e.source));
        let series = panel
            .series
            .iter()
            .map(|s| {
                if let Some(col) = own {
                    if s.columns[col].iter().all(Option::is_some) && !s.is_empty() {
                        return s.columns[col].iter().map(|v| v.unwrap_or(0.0)).collect();
                    }
                }
                let mut level = config.initial_latent_mean;
                (0..s.len())
                    .map(|t| {
                        if let Some(col) = parent {
                            let x = s.columns[col][t].unwrap_or(level);
                            level += config.init_smoothing * (x - level);
                        }
                        level
                    })
                    .collect()
            })
            .collect();
        latent_init.insert(block.var.clone(), series);
    }

    let value = |var: &str, si: usize, t: usize| -> f64 {
        if let Some(traj) = latent_init.get(var) {
            return traj[si][t];
        }
        let col = panel.var_index(var).expect("bound");
        panel.series[si].columns[col][t].unwrap_or(0.0)
    };

    let mut coefficients: Vec<f64> = d.edges.iter().map(|e| e.coefficient.unwrap_or(0.0)).collect();
    let mut intercepts = BTreeMap::new();
    let mut variances = BTreeMap::new();
    for eq in &layout.equations {
        let terms: Vec<usize> = eq.terms.iter().map(|t| t.edge).collect();
        let free_terms: Vec<usize> = terms.iter().copied().filter(|&e| problem.free[e]).collect();
        let start = terms.iter().map(|&e| d.edges[e].lag).max().unwrap_or(0);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut targets: Vec<f64> = Vec::new();
        for (si, s) in panel.series.iter().enumerate() {
            for t in start..s.len() {
                let mut y = value(&eq.var, si, t);
                for &e in &terms {
                    if !problem.free[e] {
                        let edge = &d.edges[e];
                        y -= coefficients[e] * value(&edge.source, si, t - edge.lag);
                    }
                }
                let mut row = vec![1.0];
                for &e in &free_terms {
                    let edge = &d.edges[e];
                    row.push(value(&edge.source, si, t - edge.lag));
                }
                rows.push(row);
                targets.push(y);
            }
        }
        let k = free_terms.len() + 1;
        let (intercept, variance) = if rows.len() > k {
            let a = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
            let b = DVector::from_vec(targets);
            let beta = least_squares(&a, &b);
            for (j, &e) in free_terms.iter().enumerate() {
                coefficients[e] = beta[j + 1];
            }
            let resid = &b - &a * &beta;
            (beta[0], resid.norm_squared() / rows.len() as f64)
        } else {
            let mean = if targets.is_empty() {
                0.0
            } else {
                targets.iter().sum::<f64>() / targets.len() as f64
            };
            (mean, 1.0)
        };
        intercepts.insert(eq.var.clone(), intercept);
        let variance = match eq.kind {
            EquationKind::Latent { .. } => config.latent_variance,
            EquationKind::Observed { .. } => variance.max(config.variance_floor),
        };
        variances.insert(eq.var.clone(), variance);
    }

    let initial_means = layout
        .latents
        .iter()
        .map(|b| (b.var.clone(), config.initial_latent_mean))
        .collect();
    Ok(ModelParams {
        coefficients,
        intercepts,
        variances,
        initial_means,
        initial_variance: config.initial_variance,
    })
}

fn series_stats(
    model: &super::statespace::StateSpaceModel,
    data: &StateSeries,
    idx: StatIndex,
) -> Result<(f64, DMatrix<f64>)> {
    let filt = kalman_filter(model, data)?;
    let sm = smooth_from_filter(model, filt);
    let dim = idx.dim();
    let n = idx.n;
    let mut acc = DMatrix::zeros(dim, dim);
    let x0 = idx.state(0);
    let xp0 = idx.prev(0);
    for t in 0..data.len() {
        let mut mu = DVector::zeros(dim);
        mu[0] = 1.0;
        for (k, v) in data.inputs[t].iter().enumerate() {
            mu[idx.input(k)] = *v;
        }
        for (r, v) in data.outputs[t].iter().enumerate() {
            mu[idx.obs(r)] = *v;
        }
        let (prev_mean, prev_cov) = if t == 0 {
            (&sm.initial_mean, &sm.initial_cov)
        } else {
            (&sm.means[t - 1], &sm.covs[t - 1])
        };
        for j in 0..n {
            mu[x0 + j] = sm.means[t][j];
            mu[xp0 + j] = prev_mean[j];
        }
        acc.ger(1.0, &mu, &mu, 1.0);
        for i in 0..n {
            for j in 0..n {
                acc[(x0 + i, x0 + j)] += sm.covs[t][(i, j)];
                acc[(xp0 + i, xp0 + j)] += prev_cov[(i, j)];
                acc[(x0 + i, xp0 + j)] += sm.cross_covs[t][(i, j)];
                acc[(xp0 + j, x0 + i)] += sm.cross_covs[t][(i, j)];
            }
        }
    }
    Ok((sm.log_likelihood, acc))
}

fn e_step(problem: &Problem, params: &ModelParams) -> Result<(f64, DMatrix<f64>)> {
    let model = problem.layout.model(params)?;
    let per_series: Vec<Result<(f64, DMatrix<f64>)>> = problem
        .data
        .par_iter()
        .map(|d| series_stats(&model, d, problem.idx))
        .collect();
    // Sequential reduction keeps the sum independent of thread scheduling.
    let dim = problem.idx.dim();
    let mut total = DMatrix::zeros(dim, dim);
    let mut ll = 0.0;
    for r in per_series {
        let (l, s) = r?;
        ll += l;
        total += s;
    }
    Ok((ll, total))
}

fn m_step(problem: &Problem, current: &ModelParams, stats: &DMatrix<f64>, config: &FitConfig) -> ModelParams {
    let idx = problem.idx;
    let n_obs = problem.n_steps as f64;
    let mut next = current.clone();
    for eq in &problem.layout.equations {
        let target = match eq.kind {
            EquationKind::Latent { block } => idx.state(problem.layout.latents[block].offset),
            EquationKind::Observed { row } => idx.obs(row),
        };
        // Full regressor list: intercept then terms.
        let regs: Vec<usize> = std::iter::once(0)
            .chain(eq.terms.iter().map(|t| idx.regressor(t.regressor)))
            .collect();
        let mut weights: Vec<f64> = std::iter::once(current.intercepts.get(&eq.var).copied().unwrap_or(0.0))
            .chain(eq.terms.iter().map(|t| current.coefficients[t.edge]))
            .collect();
        let free: Vec<usize> = std::iter::once(0)
            .chain(
                eq.terms
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| problem.free[t.edge])
                    .map(|(i, _)| i + 1),
            )
            .collect();
        let fixed: Vec<usize> = (0..regs.len()).filter(|i| !free.contains(i)).collect();

        let a_ff = DMatrix::from_fn(free.len(), free.len(), |i, j| stats[(regs[free[i]], regs[free[j]])]);
        let mut rhs = DVector::from_fn(free.len(), |i, _| stats[(regs[free[i]], target)]);
        for (i, &fi) in free.iter().enumerate() {
            for &xj in &fixed {
                rhs[i] -= stats[(regs[fi], regs[xj])] * weights[xj];
            }
        }
        let beta = solve_normal(&a_ff, &rhs);
        for (i, &fi) in free.iter().enumerate() {
            weights[fi] = beta[i];
        }

        next.intercepts.insert(eq.var.clone(), weights[0]);
        for (i, t) in eq.terms.iter().enumerate() {
            next.coefficients[t.edge] = weights[i + 1];
        }
        if let EquationKind::Observed { .. } = eq.kind {
            let mut resid = stats[(target, target)];
            for (i, &ri) in regs.iter().enumerate() {
                resid -= 2.0 * weights[i] * stats[(ri, target)];
                for (j, &rj) in regs.iter().enumerate() {
                    resid += weights[i] * weights[j] * stats[(ri, rj)];
                }
            }
            next.variances
                .insert(eq.var.clone(), (resid / n_obs).max(config.variance_floor));
        }
    }
    next
}
