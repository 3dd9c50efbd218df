//! Acceptance gate. Every criterion runs even when an earlier one fails;
//! each prints one PASS/FAIL line and the process exits non-zero if any
//! criterion failed.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use common::{
    brute_force_best, random_model, random_series, rng, simulate_known, DenseJoint, KNOWN_DIAGRAM, KNOWN_MODEL,
};
use trustdyn::baselines::{fit_ar, fit_arma, fit_sarima, BaselineSpec};
use trustdyn::cohortsim::{generate_cohort, AgentParams, CohortConfig};
use trustdyn::estimation::{em_fit, kalman_filter, FitConfig, FitResult};
use trustdyn::evalreport::{
    accuracy, anova_one_way, compare_models, holm_adjust, pairwise_comparisons, per_step_proportions, precision_recall,
    rmse, summarize, CompareConfig, ComparisonReport, Prediction,
};
use trustdyn::pathmodel::{
    build_paper_diagram, parse_diagram, PanelDataset, Series, AIP, CUE, HP, OVER_UNDER, RELIANCE, TRUST,
};
use trustdyn::structsearch::{optimize_structure, Criterion, SearchConfig};

const DEFAULT_SEED: u64 = 0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn panic_text(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn criterion(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v =
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| verdict(false, format!("panicked: {}", panic_text(e))));
    println!(
        "criterion {n:>2} {name:<22} {} [{:.1}s] {}",
        if v.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        v.detail
    );
    v.pass
}

fn likelihood_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(101);
    let cases = 60;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = r.random_range(1..=8);
        let p = r.random_range(1..=4);
        let m = r.random_range(0..=3);
        let len = r.random_range(1..=5);
        let model = random_model(&mut r, n, p, m);
        let data = random_series(&mut r, p, m, len);
        let dense = DenseJoint::new(&model, &data).log_likelihood(&data);
        let ll = kalman_filter(&model, &data).unwrap().log_likelihood;
        worst = worst.max((ll - dense).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-8 && elapsed < Duration::from_secs(10),
        format!("{cases} models, max |diff| {worst:.2e}"),
    )
}

fn drone_panel(n: usize, seed: u64) -> PanelDataset {
    let config = CohortConfig {
        n_participants: n,
        ..CohortConfig::drone(seed)
    };
    generate_cohort(&config, &AgentParams::default()).unwrap()
}

fn em_monotonicity() -> Verdict {
    let diagram = build_paper_diagram(true, &BTreeSet::from([1])).unwrap();
    let mut worst_drop = 0.0f64;
    let mut converged = 0;
    let mut failures = Vec::new();
    for seed in 0..20 {
        let fit = em_fit(&diagram, &drone_panel(20, seed), &FitConfig::default()).unwrap();
        let drop = fit.loglik_trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        worst_drop = worst_drop.max(drop);
        if drop > 1e-9 {
            failures.push(seed);
        }
        if fit.converged && fit.n_iterations <= 500 {
            converged += 1;
        }
    }
    verdict(
        failures.is_empty() && converged >= 18,
        format!("largest decrease {worst_drop:.2e}, non-monotone seeds {failures:?}, converged {converged}/20"),
    )
}

/// `y = 0.4 x` exactly: every lag subset predicts perfectly, so all
/// candidates tie and the tie-break decides.
fn exact_panel(len: usize) -> PanelDataset {
    let series = (0..4)
        .map(|i| {
            let x: Vec<f64> = (0..len).map(|t| ((t + i) % 7) as f64 - 3.0).collect();
            Series {
                id: format!("s{i}"),
                columns: vec![
                    x.iter().map(|v| Some(*v)).collect(),
                    x.iter().map(|v| Some(0.4 * v)).collect(),
                ],
            }
        })
        .collect();
    PanelDataset::new(vec!["x".into(), "y".into()], series).unwrap()
}

fn search_oracle() -> Verdict {
    let start = Instant::now();
    let mut cases: Vec<(trustdyn::pathmodel::PathDiagram, PanelDataset, SearchConfig)> = Vec::new();
    let known = parse_diagram(KNOWN_DIAGRAM).unwrap();
    for seed in 0..8u64 {
        let config = SearchConfig {
            eta: 2 + (seed as usize % 3),
            criterion: Criterion::Aic,
            ..SearchConfig::default()
        };
        cases.push((known.clone(), simulate_known(&KNOWN_MODEL, 8, 16, 200 + seed), config));
    }
    let exact = parse_diagram("var x observed continuous -10 10\nvar y observed continuous -10 10\ny ~ x@0\ny ~ y@1\n")
        .unwrap();
    for eta in [3, 4] {
        let config = SearchConfig {
            eta,
            criterion: Criterion::CvAccuracy,
            min_train_origin: 8,
            search_variable: "y".into(),
            ..SearchConfig::default()
        };
        cases.push((exact.clone(), exact_panel(12), config));
    }
    let mut mismatches = Vec::new();
    let mut ties = 0;
    for (i, (base, panel, config)) in cases.iter().enumerate() {
        let outcome = optimize_structure(base, panel, config).unwrap();
        let best = outcome.best.as_ref().map(|b| (b.lag_subset.clone(), b.score));
        let oracle = brute_force_best(base, panel, config);
        let top = best.as_ref().map(|b| b.1);
        ties += usize::from(
            outcome
                .candidates
                .iter()
                .filter(|c| c.result.as_ref().is_ok_and(|r| Some(r.score) == top))
                .count()
                > 1,
        );
        let same = match (&best, &oracle) {
            (Some(a), Some(b)) => a.0 == b.0 && (a.1 - b.1).abs() < 1e-9,
            (None, None) => true,
            _ => false,
        };
        if !same {
            mismatches.push(format!("panel {i}: {best:?} vs {oracle:?}"));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches.is_empty() && ties >= 2 && elapsed < Duration::from_secs(120),
        format!(
            "{} panels, {ties} with tied winners, mismatches {mismatches:?}",
            cases.len()
        ),
    )
}

fn parameter_recovery() -> Verdict {
    let base = parse_diagram(KNOWN_DIAGRAM).unwrap();
    let t = KNOWN_MODEL;
    let truth = [
        (AIP, TRUST, 0, t.aip_trust),
        (CUE, TRUST, 0, t.cue_trust),
        (TRUST, TRUST, 1, t.trust_ar),
        (AIP, OVER_UNDER, 0, t.aip_ou),
        (HP, OVER_UNDER, 0, t.hp_ou),
        (TRUST, OVER_UNDER, 0, t.trust_ou),
        (CUE, OVER_UNDER, 0, t.cue_ou),
        (TRUST, RELIANCE, 0, t.trust_rel),
        (OVER_UNDER, RELIANCE, 0, t.ou_rel),
    ];
    let mut good = 0;
    let mut worst = Vec::new();
    for seed in 0..10 {
        let fit = em_fit(&base, &simulate_known(&t, 200, 30, 1000 + seed), &FitConfig::default()).unwrap();
        let mut dev = 0.0f64;
        let mut signs = true;
        for (s, target, lag, want) in truth {
            let got = fit.coefficient(s, target, lag).unwrap();
            dev = dev.max((got - want).abs());
            signs &= got.signum() == want.signum();
        }
        if signs && dev <= 0.15 {
            good += 1;
        }
        worst.push(format!("{dev:.3}"));
    }
    verdict(
        good >= 9,
        format!(
            "{good}/10 seeds within 0.15, max deviation per seed [{}]",
            worst.join(" ")
        ),
    )
}

struct Cohort {
    fit: FitResult,
    report: ComparisonReport,
    elapsed: Duration,
}

fn cohort(config: CohortConfig, include_cue: bool, season: usize) -> Cohort {
    let start = Instant::now();
    let panel = generate_cohort(&config, &AgentParams::default()).unwrap();
    let diagram = build_paper_diagram(include_cue, &BTreeSet::from([1])).unwrap();
    let fit = em_fit(&diagram, &panel, &FitConfig::default()).unwrap();
    let specs = [
        BaselineSpec::ar(1),
        BaselineSpec::arma(1, 1),
        BaselineSpec::sarima(1, 0, 1, season),
    ];
    let report = compare_models(&panel, &fit, &specs, &CompareConfig::default()).unwrap();
    Cohort {
        fit,
        report,
        elapsed: start.elapsed(),
    }
}

fn sign_reproduction(drone: &Result<Cohort, String>) -> Verdict {
    let fit = match drone {
        Ok(c) => &c.fit,
        Err(e) => return verdict(false, format!("drone fit failed: {e}")),
    };
    let expected = [
        (AIP, TRUST, 1.0),
        (AIP, OVER_UNDER, -1.0),
        (HP, OVER_UNDER, 1.0),
        (TRUST, OVER_UNDER, 1.0),
        (CUE, TRUST, 1.0),
        (CUE, OVER_UNDER, -1.0),
        (TRUST, RELIANCE, 1.0),
        (OVER_UNDER, RELIANCE, 1.0),
    ];
    let mut wrong = Vec::new();
    let mut shown = Vec::new();
    for (s, t, sign) in expected {
        let c = fit.coefficient(s, t, 0).unwrap();
        shown.push(format!("{s}->{t} {c:+.3}"));
        if c.signum() != sign {
            wrong.push(format!("{s}->{t}"));
        }
    }
    verdict(
        wrong.is_empty(),
        format!("{}/8 signs; wrong {wrong:?}; {}", 8 - wrong.len(), shown.join(", ")),
    )
}

fn ordering(cohorts: &[(&str, &Result<Cohort, String>, f64)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, c, band) in cohorts {
        let c = match c {
            Ok(c) => c,
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: failed ({e})"));
                continue;
            }
        };
        let r = &c.report;
        let pm = r.summaries[0].acc_mean;
        let mut line = format!("{name} ({:.0}s) PM {pm:.3}", c.elapsed.as_secs_f64());
        pass &= r.failed.is_empty() && r.summaries.len() == 4;
        for (j, s) in r.summaries.iter().enumerate().skip(1) {
            let p = r
                .pairwise
                .iter()
                .find(|p| p.first == 0 && p.second == j)
                .map_or(f64::NAN, |p| p.adjusted_p);
            pass &= pm > s.acc_mean && p < 0.05;
            line.push_str(&format!(" vs {} {:.3} (adj p {p:.2e})", s.model, s.acc_mean));
        }
        pass &= c.elapsed < Duration::from_secs(300);
        line.push_str(&format!(
            "; advisory band PM >= {band}: {}",
            if pm >= *band { "met" } else { "missed" }
        ));
        parts.push(line);
    }
    verdict(pass, parts.join(" | "))
}

fn precision_check(drone: &Result<Cohort, String>) -> Verdict {
    let Ok(c) = drone else {
        return verdict(false, "drone comparison failed");
    };
    let pm = &c.report.summaries[0];
    match (pm.precision, pm.recall) {
        (Some(p), Some(r)) => verdict(p >= r, format!("over-trust precision {p:.3}, recall {r:.3}")),
        other => verdict(false, format!("undefined precision/recall {other:?}")),
    }
}

fn simulate_ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut y = Vec::with_capacity(n);
    let mut prev = 0.0;
    for i in 0..n + 200 {
        prev = phi * prev + z.sample(&mut r);
        if i >= 200 {
            y.push(prev);
        }
    }
    y
}

fn baseline_recovery() -> Verdict {
    let mut within = 0;
    let mut phis = Vec::new();
    for seed in 0..10 {
        let fit = fit_ar(&simulate_ar1(0.8, 500, 300 + seed), 1).unwrap();
        within += usize::from((fit.ar[0] - 0.8).abs() <= 0.1);
        phis.push(format!("{:.3}", fit.ar[0]));
    }
    let mut nesting = 0.0f64;
    for seed in 0..5 {
        let y = simulate_ar1(0.5, 300, 400 + seed);
        let ar = fit_ar(&y, 2).unwrap();
        let arma = fit_arma(&y, 2, 0).unwrap();
        nesting = nesting.max((ar.intercept - arma.intercept).abs());
        for (a, b) in ar.ar.iter().zip(&arma.ar) {
            nesting = nesting.max((a - b).abs());
        }
        let arma11 = fit_arma(&y, 1, 1).unwrap();
        let sarima = fit_sarima(&y, BaselineSpec::sarima(1, 0, 1, 0)).unwrap();
        nesting = nesting
            .max((arma11.intercept - sarima.intercept).abs())
            .max((arma11.ar[0] - sarima.ar[0]).abs())
            .max((arma11.ma[0] - sarima.ma[0]).abs());
    }
    verdict(
        within == 10 && nesting <= 1e-6,
        format!(
            "phi within 0.1 on {within}/10 [{}]; nesting gap {nesting:.2e}",
            phis.join(" ")
        ),
    )
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_trustdyn")
}

/// Every file of a run directory, by name.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn invoke(args: &[&str], out: &Path) -> i32 {
    let status = Command::new(bin())
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
        .status;
    status.code().unwrap_or(-1)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let dir = |name: &str| -> PathBuf { root.join(name) };
    let path = |p: PathBuf| p.to_string_lossy().into_owned();
    let panel = path(dir("drone-1").join("panel.csv"));
    let fit = path(dir("fit-1").join("fit.txt"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "drone",
            vec!["simulate", "--task", "drone", "--seed", "0", "--participants", "16"],
        ),
        (
            "driving",
            vec![
                "simulate",
                "--task",
                "driving",
                "--seed",
                "0",
                "--participants",
                "6",
                "--augment",
                "2",
            ],
        ),
        ("fit", vec!["fit", "--panel", &panel]),
        (
            "search",
            vec!["search", "--panel", &panel, "--eta", "2", "--criterion", "aic"],
        ),
        (
            "cvsearch",
            vec![
                "search",
                "--panel",
                &panel,
                "--eta",
                "1",
                "--criterion",
                "cv_acc",
                "--min-train-origin",
                "27",
            ],
        ),
        ("compare", vec!["compare", "--panel", &panel, "--fit", &fit]),
    ]
    .into_iter()
    .map(|(n, a)| (n, a.into_iter().map(String::from).collect()))
    .collect();

    let mut problems = Vec::new();
    for (name, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (first, second, replay) = (
            dir(&format!("{name}-1")),
            dir(&format!("{name}-2")),
            dir(&format!("{name}-3")),
        );
        let a = invoke(&args, &first);
        let b = invoke(&args, &second);
        let manifest = path(first.join("manifest.txt"));
        let c = invoke(&[args[0], "--config", &manifest], &replay);
        if !(a == 0 || a == 3) || a != b || a != c {
            problems.push(format!("{name}: exit codes {a}/{b}/{c}"));
            continue;
        }
        let base = snapshot(&first);
        if snapshot(&second) != base {
            problems.push(format!("{name}: rerun differs"));
        }
        if snapshot(&replay) != base {
            problems.push(format!("{name}: manifest replay differs"));
        }
    }
    verdict(
        problems.is_empty(),
        format!(
            "{} commands run twice and replayed from manifests; problems {problems:?}",
            runs.len()
        ),
    )
}

fn pred(id: &str, step: usize, p: i8, a: i8) -> Prediction {
    Prediction {
        participant: id.into(),
        step,
        predicted_value: f64::from(p),
        predicted_label: p,
        actual_value: f64::from(a),
        actual_label: a,
    }
}

fn metric_suite() -> Verdict {
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };
    check(
        "accuracy 2/3",
        (accuracy(&[1, 0, 1], &[1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15,
    );
    check("accuracy identical", accuracy(&[1, -1, 0], &[1, -1, 0]).unwrap() == 1.0);
    check("rmse identical", rmse(&[0.2, -0.7], &[0.2, -0.7]).unwrap() == 0.0);
    check("rmse unit", rmse(&[0.0, 0.0], &[1.0, 1.0]).unwrap() == 1.0);
    check("rmse sqrt2", rmse(&[0.0, 0.0], &[0.0, 2.0]).unwrap() == 2f64.sqrt());
    let pr = precision_recall(&[1, 1, 0, 0], &[1, 0, 0, 0], 1).unwrap();
    check(
        "precision/recall by hand",
        (pr.precision, pr.recall) == (Some(0.5), Some(1.0)),
    );
    let pr = precision_recall(&[0, 0, -1], &[1, 0, 0], 1).unwrap();
    check("no predicted positives", (pr.precision, pr.recall) == (None, Some(0.0)));
    let pr = precision_recall(&[1, -1, 0, 1], &[1, -1, 0, 1], 1).unwrap();
    check("all correct", (pr.precision, pr.recall) == (Some(1.0), Some(1.0)));
    let rows = per_step_proportions(&[
        pred("a", 0, 1, 1),
        pred("b", 0, 1, 1),
        pred("a", 1, 1, -1),
        pred("b", 1, 0, 1),
    ])
    .unwrap();
    check("all over-trusting", rows[0].actual == 1.0);
    check("over and under balance", rows[1].actual == 0.0);
    let same = anova_one_way(&vec![vec![0.4, 0.6, 0.9]; 3]).unwrap();
    check("identical groups F=0 p=1", (same.f, same.p) == (0.0, 1.0));
    let same = pairwise_comparisons(&vec![vec![0.4, 0.6, 0.9]; 3]).unwrap();
    check(
        "identical groups adjusted p=1",
        same.iter().all(|p| p.adjusted_p == 1.0),
    );
    let adj = holm_adjust(&[0.01, 0.5, 0.7]);
    check("smallest of three p-values", (adj[0] - 0.03).abs() < 1e-15);
    let perfect: Vec<Prediction> = (0..3)
        .flat_map(|i| (0..5).map(move |t| pred(&format!("p{i}"), t, 1, 1)))
        .collect();
    let s = summarize("perfect", &perfect, false).unwrap();
    check("perfect arm mean 1 sd 0", (s.acc_mean, s.acc_sd) == (1.0, 0.0));

    let mut r = rng(77);
    let mut violations = 0;
    for _ in 0..100 {
        let m = r.random_range(1..=12);
        let raw: Vec<f64> = (0..m).map(|_| r.random_range(0.0..=1.0)).collect();
        let adj = holm_adjust(&raw);
        for i in 0..m {
            if adj[i] < raw[i] || adj[i] > 1.0 {
                violations += 1;
            }
            for j in 0..m {
                if raw[i] <= raw[j] && adj[i] > adj[j] {
                    violations += 1;
                }
            }
        }
    }
    check("holm monotone on 100 random vectors", violations == 0);
    verdict(
        failed.is_empty(),
        format!("failed examples {failed:?}; holm violations {violations}"),
    )
}

fn main() -> ExitCode {
    println!("acceptance gate");
    let mut results = vec![
        criterion(1, "likelihood oracle", likelihood_oracle),
        criterion(2, "EM monotonicity", em_monotonicity),
        criterion(3, "search oracle", search_oracle),
        criterion(4, "parameter recovery", parameter_recovery),
    ];

    let run = |config: CohortConfig, cue: bool, season: usize| {
        catch_unwind(AssertUnwindSafe(|| cohort(config, cue, season))).map_err(panic_text)
    };
    let drone = run(CohortConfig::drone(DEFAULT_SEED), true, 15);
    let driving = run(CohortConfig::driving(DEFAULT_SEED), false, 4);
    results.push(criterion(5, "sign reproduction", || sign_reproduction(&drone)));
    results.push(criterion(6, "ordering vs baselines", || {
        ordering(&[("drone", &drone, 0.85), ("driving", &driving, 0.90)])
    }));
    results.push(criterion(7, "precision vs recall", || precision_check(&drone)));
    results.push(criterion(8, "baseline recovery", baseline_recovery));
    results.push(criterion(9, "CLI determinism", determinism));
    results.push(criterion(10, "metric unit suite", metric_suite));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
