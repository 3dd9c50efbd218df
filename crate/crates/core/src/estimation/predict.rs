use std::collections::BTreeMap;

use nalgebra::DVector;

use super::em::FitResult;
use super::kalman::kalman_filter;
use super::statespace::{InputKind, Layout, StateSpaceModel};
use crate::error::{Error, Result};
use crate::pathmodel::Series;

/// Default cut-off between calibrated and over/under-trust.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Map a real-valued over/under-trust prediction to {-1, 0, 1}.
pub fn classify_over_under(value: f64, threshold: f64) -> Result<i8> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("prediction {value}")));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1]")));
    }
    Ok(if value > threshold {
        1
    } else if value < -threshold {
        -1
    } else {
        0
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub participant: String,
    pub step: usize,
    /// Conditional mean of every endogenous variable.
    pub predicted: BTreeMap<String, f64>,
    /// Conditional mean of the diagram target.
    pub predicted_value: f64,
    pub predicted_label: i8,
    pub actual_value: Option<f64>,
    pub actual_label: Option<i8>,
}

/// A fitted model compiled once for repeated one-step-ahead forecasts.
#[derive(Debug, Clone)]
pub struct Predictor {
    layout: Layout,
    model: StateSpaceModel,
    threshold: f64,
    min_history: usize,
}

impl Predictor {
    pub fn new(fit: &FitResult, threshold: f64) -> Result<Self> {
        classify_over_under(0.0, threshold)?;
        let layout = Layout::new(&fit.diagram)?;
        let model = layout.model(&fit.params())?;
        Ok(Self {
            min_history: layout.diagram.max_lag,
            layout,
            model,
            threshold,
        })
    }

    pub fn min_history(&self) -> usize {
        self.min_history
    }

    pub fn target(&self) -> &str {
        &self.layout.diagram.target
    }

    /// Forecast the step after `history` given that step's exogenous values.
    pub fn predict_next(
        &self,
        variables: &[String],
        history: &Series,
        next_exogenous: &BTreeMap<String, f64>,
    ) -> Result<PredictionRecord> {
        let len = history.len();
        if len < self.min_history {
            return Err(Error::InsufficientData(format!(
                "history of {len} steps, need at least {}",
                self.min_history
            )));
        }
        let binding = self.layout.bind(variables)?;
        let data = self.layout.series_data(&binding, history)?;
        let filt = kalman_filter(&self.model, &data)?;
        let prev = filt
            .filtered_means
            .last()
            .cloned()
            .unwrap_or_else(|| self.model.initial_mean.clone());

        let mut u = DVector::zeros(self.layout.inputs.len());
        for (k, slot) in self.layout.inputs.iter().enumerate() {
            if slot.kind != InputKind::Data {
                continue;
            }
            u[k] = if slot.lag == 0 {
                *next_exogenous
                    .get(&slot.var)
                    .ok_or_else(|| Error::Config(format!("missing next-step value of `{}`", slot.var)))?
            } else {
                let t = len.saturating_sub(slot.lag);
                history.columns[binding.inputs[k]][t].ok_or_else(|| Error::MissingObserved {
                    variable: slot.var.clone(),
                    participant: history.id.clone(),
                    step: t,
                })?
            };
        }
        self.record(&history.id, len, &prev, u, None)
    }

    /// One-step-ahead forecasts for steps `start..len` of a full series,
    /// each conditioned on the steps before it.
    pub fn predict_series(&self, variables: &[String], series: &Series, start: usize) -> Result<Vec<PredictionRecord>> {
        let start = start.max(self.min_history);
        let binding = self.layout.bind(variables)?;
        let data = self.layout.series_data(&binding, series)?;
        let filt = kalman_filter(&self.model, &data)?;
        let target_col = variables.iter().position(|v| v == self.target());
        let mut out = Vec::with_capacity(series.len().saturating_sub(start));
        for t in start..series.len() {
            let prev = if t == 0 {
                &self.model.initial_mean
            } else {
                &filt.filtered_means[t - 1]
            };
            let actual = target_col.and_then(|c| series.columns[c][t]);
            out.push(self.record(&series.id, t, prev, data.inputs[t].clone(), actual)?);
        }
        Ok(out)
    }

    fn record(
        &self,
        participant: &str,
        step: usize,
        prev_mean: &DVector<f64>,
        mut u: DVector<f64>,
        actual: Option<f64>,
    ) -> Result<PredictionRecord> {
        let (x, y) = self.forecast(prev_mean, &mut u);
        let mut predicted = BTreeMap::new();
        for b in &self.layout.latents {
            predicted.insert(b.var.clone(), x[b.offset]);
        }
        for (r, name) in self.layout.observed.iter().enumerate() {
            predicted.insert(name.clone(), y[r]);
        }
        let predicted_value = *predicted
            .get(self.target())
            .ok_or_else(|| Error::InvalidDiagram("target is not endogenous".into()))?;
        let actual_label = match actual {
            Some(a) => Some(classify_over_under(a, self.threshold)?),
            None => None,
        };
        Ok(PredictionRecord {
            participant: participant.to_string(),
            step,
            predicted,
            predicted_value,
            predicted_label: classify_over_under(predicted_value, self.threshold)?,
            actual_value: actual,
            actual_label,
        })
    }

    /// Conditional means of `x_t` and `y_t` given `E[x_(t-1)]`. Inputs that
    /// are contemporaneous observations are replaced by their forecasts.
    fn forecast(&self, prev_mean: &DVector<f64>, u: &mut DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = &self.model;
        for (k, slot) in self.layout.inputs.iter().enumerate() {
            if let InputKind::CurrentObservation(_) = slot.kind {
                u[k] = 0.0;
            }
        }
        let x = &m.transition * prev_mean + &m.state_input * &*u + &m.state_intercept;
        let p = m.obs_dim();
        let mut y = DVector::zeros(p);
        for r in 0..p {
            let mut v = m.obs_intercept[r] + m.observation.row(r).dot(&x.transpose());
            for k in 0..u.len() {
                v += m.obs_input[(r, k)] * u[k];
            }
            y[r] = v;
            for (k, slot) in self.layout.inputs.iter().enumerate() {
                if slot.kind == InputKind::CurrentObservation(r) {
                    u[k] = v;
                }
            }
        }
        (x, y)
    }
}

/// Forecast step `history.len()` of one participant.
pub fn predict_one_step(
    fit: &FitResult,
    variables: &[String],
    history: &Series,
    next_exogenous: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<PredictionRecord> {
    Predictor::new(fit, threshold)?.predict_next(variables, history, next_exogenous)
}
