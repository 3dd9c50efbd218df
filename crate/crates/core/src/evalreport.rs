//! Prediction metrics, significance tests and report files for comparing
//! the path model against the autoregressive baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::baselines::{fit_baseline, forecast_one_step, BaselineSpec};
use crate::error::{Error, Result};
use crate::estimation::{classify_over_under, FitResult, Predictor, DEFAULT_THRESHOLD};
use crate::pathmodel::PanelDataset;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(Error::Empty);
    }
    Ok(())
}

/// Fraction of exact label matches.
pub fn accuracy(predicted: &[i8], actual: &[i8]) -> Result<f64> {
    check_lengths(predicted.len(), actual.len())?;
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / predicted.len() as f64)
}

pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(predicted.len(), actual.len())?;
    let sse: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

/// `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn precision_recall(predicted: &[i8], actual: &[i8], positive_class: i8) -> Result<PrecisionRecall> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch(predicted.len(), actual.len()));
    }
    if positive_class != 1 && positive_class != -1 {
        return Err(Error::Config(format!("positive class {positive_class} is not 1 or -1")));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p == positive_class, a == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
    })
}

/// One forecast of the target for one participant and step.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub participant: String,
    pub step: usize,
    pub predicted_value: f64,
    pub predicted_label: i8,
    pub actual_value: f64,
    pub actual_label: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProportionRow {
    pub step: usize,
    pub actual: f64,
    pub predicted: f64,
}

/// Per step, `(#over-trust - #under-trust) / #participants` for actual and
/// predicted labels.
pub fn per_step_proportions(predictions: &[Prediction]) -> Result<Vec<ProportionRow>> {
    let participants: BTreeSet<&str> = predictions.iter().map(|p| p.participant.as_str()).collect();
    let mut by_step: BTreeMap<usize, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        by_step.entry(p.step).or_default().push(p);
    }
    let n = participants.len();
    let mut rows = Vec::with_capacity(by_step.len());
    for (step, preds) in by_step {
        let covered: BTreeSet<&str> = preds.iter().map(|p| p.participant.as_str()).collect();
        if covered.len() != n || preds.len() != n {
            return Err(Error::Panel(format!(
                "step {step} has {} predictions for {n} participants",
                preds.len()
            )));
        }
        let signed = |label: fn(&Prediction) -> i8| preds.iter().map(|p| f64::from(label(p))).sum::<f64>() / n as f64;
        rows.push(ProportionRow {
            step,
            actual: signed(|p| p.actual_label),
            predicted: signed(|p| p.predicted_label),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: f64,
    pub df_within: f64,
    /// Groups differ while every group is constant.
    pub infinite_f: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sum_sq_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum()
}

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} groups, need at least 2",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::InsufficientData(format!(
            "group of size {}, need at least 2",
            g.len()
        )));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("group sample".into()));
    }
    Ok(())
}

/// Classical one-way ANOVA.
pub fn anova_one_way(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    check_groups(groups)?;
    let k = groups.len() as f64;
    let n: f64 = groups.iter().map(|g| g.len() as f64).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n;
    let ss_between: f64 = groups.iter().map(|g| g.len() as f64 * (mean(g) - grand).powi(2)).sum();
    let ss_within: f64 = groups.iter().map(|g| sum_sq_dev(g)).sum();
    let (df_between, df_within) = (k - 1.0, n - k);
    let scale = groups.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let negligible = |ss: f64| ss <= 1e-24 * scale * scale * n;
    let (f, p, infinite_f) = if negligible(ss_between) {
        (0.0, 1.0, false)
    } else if negligible(ss_within) {
        (f64::INFINITY, 0.0, true)
    } else {
        let f = (ss_between / df_between) / (ss_within / df_within);
        let dist = FisherSnedecor::new(df_between, df_within).map_err(|e| Error::Config(e.to_string()))?;
        (f, dist.sf(f), false)
    };
    Ok(AnovaResult {
        f,
        p,
        df_between,
        df_within,
        infinite_f,
    })
}

/// Pooled-variance two-sample t test: (t, two-sided p).
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    check_groups(&[a.to_vec(), b.to_vec()])?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let diff = mean(a) - mean(b);
    let df = na + nb - 2.0;
    let pooled = (sum_sq_dev(a) + sum_sq_dev(b)) / df;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if diff.abs() <= 1e-12 * scale {
        return Ok((0.0, 1.0));
    }
    if se <= 1e-12 * scale {
        return Ok((diff.signum() * f64::INFINITY, 0.0));
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
    Ok((t, 2.0 * dist.sf(t.abs())))
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(raw: &[f64]) -> Vec<f64> {
    let m = raw.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| raw[i].total_cmp(&raw[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * raw[i]).min(1.0));
        adjusted[i] = running;
    }
    adjusted
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseResult {
    pub first: usize,
    pub second: usize,
    pub t: f64,
    pub raw_p: f64,
    pub adjusted_p: f64,
}

/// All-pairs t tests with Holm-adjusted p-values, pairs in `(i, j)`,
/// `i < j` order.
pub fn pairwise_comparisons(groups: &[Vec<f64>]) -> Result<Vec<PairwiseResult>> {
    check_groups(groups)?;
    let mut out = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (t, p) = two_sample_t(&groups[i], &groups[j])?;
            out.push(PairwiseResult {
                first: i,
                second: j,
                t,
                raw_p: p,
                adjusted_p: p,
            });
        }
    }
    let adjusted = holm_adjust(&out.iter().map(|r| r.raw_p).collect::<Vec<_>>());
    for (r, a) in out.iter_mut().zip(adjusted) {
        r.adjusted_p = a;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub model: String,
    pub participants: Vec<String>,
    pub accuracies: Vec<f64>,
    pub rmses: Vec<f64>,
    pub acc_mean: f64,
    pub acc_sd: f64,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    /// Over-trust precision and recall pooled over all predictions.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        0.0
    } else {
        (sum_sq_dev(x) / (x.len() - 1) as f64).sqrt()
    }
}

/// Collapse ternary labels to over-trust versus the rest.
fn binarize(label: i8) -> i8 {
    i8::from(label == 1)
}

/// Summarize one model's predictions, grouped by participant in order of
/// first appearance.
pub fn summarize(model: &str, predictions: &[Prediction], binary: bool) -> Result<MetricsSummary> {
    if predictions.is_empty() {
        return Err(Error::Empty);
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        let g = groups.entry(p.participant.as_str()).or_default();
        if g.is_empty() {
            order.push(p.participant.as_str());
        }
        g.push(p);
    }
    let label = |l: i8| if binary { binarize(l) } else { l };
    let mut accuracies = Vec::with_capacity(order.len());
    let mut rmses = Vec::with_capacity(order.len());
    for id in &order {
        let g = &groups[id];
        let pl: Vec<i8> = g.iter().map(|p| label(p.predicted_label)).collect();
        let al: Vec<i8> = g.iter().map(|p| label(p.actual_label)).collect();
        accuracies.push(accuracy(&pl, &al)?);
        let pv: Vec<f64> = g.iter().map(|p| p.predicted_value).collect();
        let av: Vec<f64> = g.iter().map(|p| p.actual_value).collect();
        rmses.push(rmse(&pv, &av)?);
    }
    let pl: Vec<i8> = predictions.iter().map(|p| p.predicted_label).collect();
    let al: Vec<i8> = predictions.iter().map(|p| p.actual_label).collect();
    let pr = precision_recall(&pl, &al, 1)?;
    Ok(MetricsSummary {
        model: model.to_string(),
        participants: order.iter().map(|s| s.to_string()).collect(),
        acc_mean: mean(&accuracies),
        acc_sd: sample_sd(&accuracies),
        rmse_mean: mean(&rmses),
        rmse_sd: sample_sd(&rmses),
        accuracies,
        rmses,
        precision: pr.precision,
        recall: pr.recall,
    })
}

pub const PM_NAME: &str = "PM";

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub threshold: f64,
    /// Score over-trust detection (1 versus the rest) instead of exact
    /// ternary matches.
    pub binary: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            binary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// First step scored; every arm is evaluated on the same steps.
    pub eval_start: usize,
    pub summaries: Vec<MetricsSummary>,
    /// Arms that could not be evaluated, with the reason.
    pub failed: Vec<(String, String)>,
    pub anova: Option<AnovaResult>,
    /// Pair labels refer to `summaries` by position.
    pub pairwise: Vec<PairwiseResult>,
    pub curves: Vec<ProportionRow>,
    pub multiple_comparison: &'static str,
    pub binary: bool,
}

fn pm_predictions(fit: &FitResult, panel: &PanelDataset, start: usize, threshold: f64) -> Result<Vec<Prediction>> {
    let predictor = Predictor::new(fit, threshold)?;
    let panel = panel.mask_latent(&fit.diagram);
    let mut out = Vec::new();
    for s in &panel.series {
        for r in predictor.predict_series(&panel.variables, s, start)? {
            let (Some(actual_value), Some(actual_label)) = (r.actual_value, r.actual_label) else {
                return Err(Error::MissingObserved {
                    variable: fit.diagram.target.clone(),
                    participant: r.participant,
                    step: r.step,
                });
            };
            out.push(Prediction {
                participant: r.participant,
                step: r.step,
                predicted_value: r.predicted_value,
                predicted_label: r.predicted_label,
                actual_value,
                actual_label,
            });
        }
    }
    Ok(out)
}

fn baseline_predictions(
    spec: BaselineSpec,
    panel: &PanelDataset,
    target: &str,
    start: usize,
    threshold: f64,
) -> Result<Vec<Prediction>> {
    let col = panel
        .var_index(target)
        .ok_or_else(|| Error::Panel(format!("panel lacks target column `{target}`")))?;
    let mut out = Vec::new();
    for s in &panel.series {
        let y = s.columns[col]
            .iter()
            .enumerate()
            .map(|(t, v)| {
                v.ok_or_else(|| Error::MissingObserved {
                    variable: target.to_string(),
                    participant: s.id.clone(),
                    step: t,
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let fit = fit_baseline(&y, spec)?;
        for t in start..y.len() {
            let value = forecast_one_step(&fit, &y[..t])?;
            out.push(Prediction {
                participant: s.id.clone(),
                step: t,
                predicted_value: value,
                predicted_label: classify_over_under(value, threshold)?,
                actual_value: y[t],
                actual_label: classify_over_under(y[t], threshold)?,
            });
        }
    }
    Ok(out)
}

/// One-step-ahead forecasts from the fitted path model and from baselines
/// fitted per participant on the target series, all scored on the steps
/// every arm can forecast.
pub fn compare_models(
    panel: &PanelDataset,
    pm_fit: &FitResult,
    baseline_specs: &[BaselineSpec],
    config: &CompareConfig,
) -> Result<ComparisonReport> {
    classify_over_under(0.0, config.threshold)?;
    let eval_start = baseline_specs
        .iter()
        .map(BaselineSpec::min_history)
        .fold(pm_fit.diagram.max_lag, usize::max);
    if eval_start >= panel.min_len() {
        return Err(Error::InsufficientData(format!(
            "series of {} steps leave nothing to score after step {eval_start}",
            panel.min_len()
        )));
    }
    let target = pm_fit.diagram.target.clone();
    let pm = pm_predictions(pm_fit, panel, eval_start, config.threshold)?;
    let curves = per_step_proportions(&pm)?;
    let mut summaries = vec![summarize(PM_NAME, &pm, config.binary)?];
    let mut failed = Vec::new();
    for spec in baseline_specs {
        let name = spec.to_string();
        match baseline_predictions(*spec, panel, &target, eval_start, config.threshold)
            .and_then(|p| summarize(&name, &p, config.binary))
        {
            Ok(s) => summaries.push(s),
            Err(e) => failed.push((name, e.to_string())),
        }
    }
    let groups: Vec<Vec<f64>> = summaries.iter().map(|s| s.accuracies.clone()).collect();
    let (anova, pairwise) = if groups.len() >= 2 {
        (Some(anova_one_way(&groups)?), pairwise_comparisons(&groups)?)
    } else {
        (None, Vec::new())
    };
    Ok(ComparisonReport {
        eval_start,
        summaries,
        failed,
        anova,
        pairwise,
        curves,
        multiple_comparison: "holm",
        binary: config.binary,
    })
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn summary_csv(report: &ComparisonReport) -> Result<String> {
    let mut rows = vec![[
        "model",
        "acc_mean",
        "acc_sd",
        "rmse_mean",
        "rmse_sd",
        "precision",
        "recall",
    ]
    .map(String::from)
    .to_vec()];
    for s in &report.summaries {
        rows.push(vec![
            s.model.clone(),
            s.acc_mean.to_string(),
            s.acc_sd.to_string(),
            s.rmse_mean.to_string(),
            s.rmse_sd.to_string(),
            opt(s.precision),
            opt(s.recall),
        ]);
    }
    csv_string(rows)
}

pub fn curves_csv(report: &ComparisonReport) -> Result<String> {
    let mut rows = vec![["step", "actual_prop", "predicted_prop"].map(String::from).to_vec()];
    for r in &report.curves {
        rows.push(vec![r.step.to_string(), r.actual.to_string(), r.predicted.to_string()]);
    }
    csv_string(rows)
}

pub fn pair_label(report: &ComparisonReport, pair: &PairwiseResult) -> String {
    format!(
        "{} vs {}",
        report.summaries[pair.first].model, report.summaries[pair.second].model
    )
}

pub fn stats_csv(report: &ComparisonReport) -> Result<String> {
    let mut rows = vec![["pair", "raw_p", "adjusted_p"].map(String::from).to_vec()];
    for p in &report.pairwise {
        rows.push(vec![
            pair_label(report, p),
            p.raw_p.to_string(),
            p.adjusted_p.to_string(),
        ]);
    }
    csv_string(rows)
}

pub fn baseline_report_csv(report: &ComparisonReport) -> Result<String> {
    let mut rows = vec![["participant", "model", "acc", "rmse"].map(String::from).to_vec()];
    for s in &report.summaries {
        for ((id, acc), rmse) in s.participants.iter().zip(&s.accuracies).zip(&s.rmses) {
            rows.push(vec![id.clone(), s.model.clone(), acc.to_string(), rmse.to_string()]);
        }
    }
    csv_string(rows)
}

pub fn text_summary(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let mode = if report.binary { "binary over-trust" } else { "ternary" };
    let _ = writeln!(
        out,
        "one-step-ahead comparison, scored from step {} ({mode} labels)",
        report.eval_start
    );
    let _ = writeln!(
        out,
        "{:<20} {:>14} {:>14} {:>9} {:>9}",
        "model", "ACC avg(sd)", "RMSE avg(sd)", "prec", "recall"
    );
    for s in &report.summaries {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(
            out,
            "{:<20} {:>14} {:>14} {:>9} {:>9}",
            s.model,
            format!("{:.2}({:.2})", s.acc_mean, s.acc_sd),
            format!("{:.2}({:.2})", s.rmse_mean, s.rmse_sd),
            fmt_opt(s.precision),
            fmt_opt(s.recall)
        );
    }
    for (name, why) in &report.failed {
        let _ = writeln!(out, "{name}: not evaluated ({why})");
    }
    if let Some(a) = &report.anova {
        let _ = writeln!(
            out,
            "one-way ANOVA on per-participant accuracy: F({}, {}) = {:.3}, p = {:.3e}",
            a.df_between, a.df_within, a.f, a.p
        );
    }
    let _ = writeln!(out, "pairwise t tests, {} adjusted:", report.multiple_comparison);
    for p in &report.pairwise {
        let _ = writeln!(
            out,
            "  {:<32} raw p = {:.3e}  adjusted p = {:.3e}",
            pair_label(report, p),
            p.raw_p,
            p.adjusted_p
        );
    }
    out
}
