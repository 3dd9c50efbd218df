//! Diagram selection: a threshold gate over hand-written candidate
//! diagrams, then an exhaustive search over autoregressive lag subsets of
//! the latent trust variable.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{classify_over_under, em_fit, FitConfig, FitResult, Predictor, DEFAULT_THRESHOLD};
use crate::pathmodel::{with_self_lags, PanelDataset, PathDiagram, TRUST};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Aic,
    CvAccuracy,
    CvRmse,
}

impl Criterion {
    fn higher_is_better(self) -> bool {
        self == Criterion::CvAccuracy
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "aic",
            Criterion::CvAccuracy => "cv_acc",
            Criterion::CvRmse => "cv_rmse",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aic" => Ok(Criterion::Aic),
            "cv_acc" => Ok(Criterion::CvAccuracy),
            "cv_rmse" => Ok(Criterion::CvRmse),
            other => Err(Error::Config(format!(
                "unknown criterion `{other}` (expected aic, cv_acc or cv_rmse)"
            ))),
        }
    }
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Accuracy a static diagram must reach to be accepted.
    pub tau: f64,
    /// Largest lag searched.
    pub eta: usize,
    pub criterion: Criterion,
    /// Training steps at the first cross-validation origin.
    pub min_train_origin: usize,
    /// Forecast horizon; only one-step-ahead is supported.
    pub horizon: usize,
    pub threshold: f64,
    pub enumeration_cap: u128,
    /// Latent variable whose autoregressive lags are searched.
    pub search_variable: String,
    pub fit: FitConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            eta: 2,
            criterion: Criterion::Aic,
            min_train_origin: 3,
            horizon: 1,
            threshold: DEFAULT_THRESHOLD,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            search_variable: TRUST.to_string(),
            fit: FitConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, panel: &PanelDataset) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.eta == 0 {
            return Err(Error::Config("eta must be at least 1".into()));
        }
        if self.horizon != 1 {
            return Err(Error::Unsupported(format!(
                "horizon {} (only 1 is supported)",
                self.horizon
            )));
        }
        let shortest = panel.min_len();
        if self.eta + 1 > shortest {
            return Err(Error::Config(format!(
                "eta {} needs series of at least {} steps, shortest has {shortest}",
                self.eta,
                self.eta + 1
            )));
        }
        if self.criterion != Criterion::Aic && self.min_train_origin < self.eta + 1 {
            return Err(Error::Config(format!(
                "min_train_origin {} must be at least eta + 1 = {}",
                self.min_train_origin,
                self.eta + 1
            )));
        }
        Ok(())
    }
}

/// Nonempty subsets of `{1..eta}`, ordered by size then lexicographically.
pub fn enumerate_lag_subsets(eta: usize, cap: u128) -> Result<Vec<BTreeSet<usize>>> {
    if eta == 0 {
        return Err(Error::Config("eta must be at least 1".into()));
    }
    let count = if eta >= 128 { u128::MAX } else { (1u128 << eta) - 1 };
    if count > cap {
        return Err(Error::EnumerationCap { eta, count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    for size in 1..=eta {
        // Lexicographic k-combinations of 1..=eta.
        let mut combo: Vec<usize> = (1..=size).collect();
        loop {
            out.push(combo.iter().copied().collect());
            let Some(i) = (0..size).rev().find(|&i| combo[i] < eta - (size - 1 - i)) else {
                break;
            };
            combo[i] += 1;
            for j in i + 1..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OriginScore {
    /// Training steps used; the forecast is for this step index.
    pub origin: usize,
    pub accuracy: f64,
    pub rmse: f64,
    pub n_predictions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub accuracy: f64,
    pub rmse: f64,
    pub origins: Vec<OriginScore>,
    /// Origins whose training window left a regressor constant, so the
    /// model was not identifiable there. They are excluded from the means.
    pub skipped: Vec<usize>,
}

/// Expanding-window cross-validation: for every origin `o` from
/// `min_train_origin` to `T - 1`, fit on steps `0..o` of all participants
/// and forecast step `o`. `T` is the shortest series length. Origins whose
/// training prefix has a constant regressor (AIP before its first change,
/// say) are skipped.
pub fn rolling_origin_cv(diagram: &PathDiagram, panel: &PanelDataset, config: &SearchConfig) -> Result<CvResult> {
    if config.horizon != 1 {
        return Err(Error::Unsupported(format!("horizon {}", config.horizon)));
    }
    let len = panel.min_len();
    if config.min_train_origin == 0 || len <= config.min_train_origin {
        return Err(Error::InsufficientData(format!(
            "series of {len} steps leave no origin after {} training steps",
            config.min_train_origin
        )));
    }
    let target_col = panel
        .var_index(&diagram.target)
        .ok_or_else(|| Error::Panel(format!("panel lacks target column `{}`", diagram.target)))?;
    let mut origins = Vec::with_capacity(len - config.min_train_origin);
    let mut skipped = Vec::new();
    for origin in config.min_train_origin..len {
        let fit = match em_fit(diagram, &panel.prefix(origin), &config.fit) {
            Ok(f) => f,
            Err(Error::ZeroVarianceRegressor(_)) => {
                skipped.push(origin);
                continue;
            }
            Err(e) => return Err(e),
        };
        let predictor = Predictor::new(&fit, config.threshold)?;
        let (mut hits, mut sq, mut n) = (0usize, 0.0, 0usize);
        for s in &panel.series {
            // Forecasts at `origin` only use the filter state from earlier steps.
            let rec = predictor.predict_series(&panel.variables, &s.prefix(origin + 1), origin)?;
            let rec = rec
                .first()
                .ok_or_else(|| Error::InsufficientData("no forecast produced".into()))?;
            let actual = s.columns[target_col][origin].ok_or_else(|| Error::MissingObserved {
                variable: diagram.target.clone(),
                participant: s.id.clone(),
                step: origin,
            })?;
            if rec.predicted_label == classify_over_under(actual, config.threshold)? {
                hits += 1;
            }
            sq += (rec.predicted_value - actual).powi(2);
            n += 1;
        }
        origins.push(OriginScore {
            origin,
            accuracy: hits as f64 / n as f64,
            rmse: (sq / n as f64).sqrt(),
            n_predictions: n,
        });
    }
    if origins.is_empty() {
        return Err(Error::InsufficientData(
            "every training window has a constant regressor".into(),
        ));
    }
    let k = origins.len() as f64;
    Ok(CvResult {
        accuracy: origins.iter().map(|o| o.accuracy).sum::<f64>() / k,
        rmse: origins.iter().map(|o| o.rmse).sum::<f64>() / k,
        origins,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticSelection {
    /// Position of the chosen diagram in the candidate list.
    pub index: usize,
    pub diagram: PathDiagram,
    pub accuracy: f64,
    pub above_threshold: bool,
    /// Cross-validated accuracy of every candidate evaluated, in order.
    pub scores: Vec<f64>,
}

/// Accept the first candidate whose cross-validated accuracy reaches tau;
/// otherwise return the best one flagged as below threshold.
pub fn select_static_diagram(
    candidates: &[PathDiagram],
    panel: &PanelDataset,
    config: &SearchConfig,
) -> Result<StaticSelection> {
    if candidates.is_empty() {
        return Err(Error::Empty);
    }
    let mut scores = Vec::new();
    for d in candidates {
        scores.push(rolling_origin_cv(d, panel, config)?.accuracy);
        if scores.last().is_some_and(|&a| a >= config.tau) {
            break;
        }
    }
    let (index, above_threshold) = gate_scores(&scores, config.tau).ok_or(Error::Empty)?;
    Ok(StaticSelection {
        index,
        diagram: candidates[index].clone(),
        accuracy: scores[index],
        above_threshold,
        scores,
    })
}

/// Index of the first score reaching `tau`, flagged `true`; otherwise the
/// first maximal score, flagged `false`.
pub fn gate_scores(scores: &[f64], tau: f64) -> Option<(usize, bool)> {
    if let Some(i) = scores.iter().position(|&s| s >= tau) {
        return Some((i, true));
    }
    let mut best = None::<usize>;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.map(|i| (i, false))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub lag_subset: BTreeSet<usize>,
    pub score: f64,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOutcome {
    pub lag_subset: BTreeSet<usize>,
    pub result: std::result::Result<CandidateScore, Error>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub criterion: Criterion,
    /// `None` when every candidate failed.
    pub best: Option<CandidateScore>,
    /// One entry per lag subset, in enumeration order.
    pub candidates: Vec<CandidateOutcome>,
}

fn evaluate_candidate(
    base: &PathDiagram,
    panel: &PanelDataset,
    config: &SearchConfig,
    lags: &BTreeSet<usize>,
) -> Result<CandidateScore> {
    let diagram = with_self_lags(base, &config.search_variable, lags)?;
    let fit = em_fit(&diagram, panel, &config.fit)?;
    let score = match config.criterion {
        Criterion::Aic => fit.aic,
        Criterion::CvAccuracy => rolling_origin_cv(&diagram, panel, config)?.accuracy,
        Criterion::CvRmse => rolling_origin_cv(&diagram, panel, config)?.rmse,
    };
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("{} score", config.criterion)));
    }
    Ok(CandidateScore {
        lag_subset: lags.clone(),
        score,
        fit,
    })
}

/// True when `a` beats `b`: better score, then fewer lags, then the
/// lexicographically smaller subset.
pub fn candidate_precedes(criterion: Criterion, a: (&BTreeSet<usize>, f64), b: (&BTreeSet<usize>, f64)) -> bool {
    if a.1 != b.1 {
        return if criterion.higher_is_better() {
            a.1 > b.1
        } else {
            a.1 < b.1
        };
    }
    if a.0.len() != b.0.len() {
        return a.0.len() < b.0.len();
    }
    a.0.iter().lt(b.0.iter())
}

/// Fit every lag subset of the search variable and pick the winner.
/// Candidate failures are recorded and do not stop the search.
pub fn optimize_structure(base: &PathDiagram, panel: &PanelDataset, config: &SearchConfig) -> Result<SearchOutcome> {
    config.validate(panel)?;
    if base.variable(&config.search_variable).is_none() {
        return Err(Error::UnknownVariable(config.search_variable.clone()));
    }
    let subsets = enumerate_lag_subsets(config.eta, config.enumeration_cap)?;
    let candidates: Vec<CandidateOutcome> = subsets
        .par_iter()
        .map(|lags| CandidateOutcome {
            lag_subset: lags.clone(),
            result: evaluate_candidate(base, panel, config, lags),
        })
        .collect();
    let mut best: Option<&CandidateScore> = None;
    for c in &candidates {
        if let Ok(s) = &c.result {
            let wins = best.is_none_or(|b| {
                candidate_precedes(config.criterion, (&s.lag_subset, s.score), (&b.lag_subset, b.score))
            });
            if wins {
                best = Some(s);
            }
        }
    }
    Ok(SearchOutcome {
        criterion: config.criterion,
        best: best.cloned(),
        candidates,
    })
}

pub const SEARCH_REPORT_HEADER: [&str; 6] = ["lag_subset", "criterion", "score", "aic", "loglik", "converged"];

/// Lags joined by `;`, e.g. `1;2`.
pub fn format_lag_subset(lags: &BTreeSet<usize>) -> String {
    lags.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// One row per candidate in enumeration order; failed candidates have
/// empty numeric fields.
pub fn write_search_report(outcome: &SearchOutcome) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SEARCH_REPORT_HEADER)?;
    for c in &outcome.candidates {
        let subset = format_lag_subset(&c.lag_subset);
        let criterion = outcome.criterion.to_string();
        match &c.result {
            Ok(s) => w.write_record([
                subset,
                criterion,
                s.score.to_string(),
                s.fit.aic.to_string(),
                s.fit.log_likelihood.to_string(),
                s.fit.converged.to_string(),
            ])?,
            Err(_) => w.write_record([
                subset,
                criterion,
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
            ])?,
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}
