//! `trustdyn`: simulate cohorts, fit path models, search lag structures and
//! compare against autoregressive baselines.
//!
//! Every run writes a `manifest.txt` of `key=value` lines into its output
//! directory. Passing that file back with `--config` repeats the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trustdyn::baselines::BaselineSpec;
use trustdyn::cohortsim::{augment_panel, generate_cohort, AgentParams, CohortConfig, CuePolicy, Phase};
use trustdyn::estimation::{em_fit, parse_fit, serialize_fit, FitConfig, FitResult};
use trustdyn::evalreport::{
    baseline_report_csv, compare_models, curves_csv, stats_csv, summary_csv, text_summary, CompareConfig,
};
use trustdyn::pathmodel::{
    build_paper_diagram, parse_diagram, read_panel_csv, write_panel_csv, PanelDataset, PathDiagram, CUE,
};
use trustdyn::structsearch::{
    format_lag_subset, optimize_structure, select_static_diagram, write_search_report, Criterion, SearchConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "trustdyn", version, about = "Dynamic path models of human trust in AI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort panel.
    Simulate(SimulateArgs),
    /// Fit a path diagram to a panel.
    Fit(FitArgs),
    /// Search autoregressive trust lags.
    Search(SearchArgs),
    /// Compare a fitted model against AR, ARMA and SARIMA baselines.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Drone,
    Driving,
}

impl Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Drone => "drone",
            Task::Driving => "driving",
        })
    }
}

impl FromStr for Task {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "drone" => Ok(Task::Drone),
            "driving" => Ok(Task::Driving),
            other => bail!("unknown task `{other}`"),
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Manifest of a previous run; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    /// Calibration margin for over/under-trust labels.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    participants: Option<usize>,
    /// Grow the panel this many times by resampling with noise.
    #[arg(long)]
    augment: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Diagram in text form; defaults to the trust diagram.
    #[arg(long)]
    diagram: Option<PathBuf>,
    /// Autoregressive trust lags of the default diagram, e.g. `1,2`.
    #[arg(long)]
    lags: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    panel: Option<PathBuf>,
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Training steps before the first cross-validation origin.
    #[arg(long)]
    min_train_origin: Option<usize>,
    /// Candidate static diagrams for the accuracy gate, tried in order.
    #[arg(long = "candidate")]
    candidates: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    panel: Option<PathBuf>,
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Chooses the SARIMA seasonal period (drone 15, driving 4).
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long)]
    season: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Score over-trust detection instead of exact ternary labels.
    #[arg(long)]
    binary: bool,
    #[command(flatten)]
    common: Common,
}

/// Failure classes, mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

/// Resolved settings: explicit flag, then manifest value, then default.
/// Everything resolved is echoed into the output manifest.
struct Settings {
    from_file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Settings {
    fn load(command: &str, config: Option<&Path>) -> Result<Self, Failure> {
        let mut from_file = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::Usage)?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                from_file.insert(k.trim().to_string(), v.trim().to_string());
            }
            if let Some(c) = from_file.get("command") {
                if c != command {
                    return Err(usage(format!("config is for `{c}`, not `{command}`")));
                }
            }
        }
        Ok(Self {
            from_file,
            resolved: vec![("command".into(), command.into())],
        })
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        let value = self.lookup(key, flag)?.unwrap_or(default);
        self.record(key, &value);
        Ok(value)
    }

    fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        let value = self
            .lookup(key, flag)?
            .ok_or_else(|| usage(format!("--{} is required", key.replace('_', "-"))))?;
        self.record(key, &value);
        Ok(value)
    }

    fn lookup<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.from_file.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config value {key}={raw}: {e}"))),
            None => Ok(None),
        }
    }

    fn record(&mut self, key: &str, value: &dyn Display) {
        self.resolved.push((key.to_string(), value.to_string()));
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let text: String = self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        write_file(dir, "manifest.txt", &text)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn read_panel(path: &Path) -> anyhow::Result<PanelDataset> {
    let file = fs::File::open(path).with_context(|| format!("opening panel {}", path.display()))?;
    read_panel_csv(file).with_context(|| format!("reading panel {}", path.display()))
}

/// Phase schedule as `length:aip` pairs separated by commas.
fn format_phases(phases: &[Phase]) -> String {
    phases
        .iter()
        .map(|p| format!("{}:{}", p.length, p.aip))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone)]
struct Phases(Vec<Phase>);

impl Display for Phases {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&format_phases(&self.0))
    }
}

impl FromStr for Phases {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        s.split(',')
            .map(|part| {
                let (len, aip) = part
                    .split_once(':')
                    .ok_or_else(|| anyhow!("phase `{part}` is not length:aip"))?;
                Ok(Phase {
                    length: len.trim().parse()?,
                    aip: aip.trim().parse()?,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()
            .map(Phases)
    }
}

#[derive(Debug, Clone)]
struct Lags(BTreeSet<usize>);

impl Display for Lags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Lags {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let set = s
            .split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|e| anyhow!("lag `{x}`: {e}")))
            .collect::<anyhow::Result<BTreeSet<_>>>()?;
        if set.is_empty() || set.contains(&0) {
            bail!("lags must be positive integers");
        }
        Ok(Lags(set))
    }
}

fn cue_policy_name(p: CuePolicy) -> &'static str {
    match p {
        CuePolicy::None => "none",
        CuePolicy::OnDetectedOvertrust => "on_detected_overtrust",
    }
}

#[derive(Debug, Clone, Copy)]
struct CuePolicyArg(CuePolicy);

impl Display for CuePolicyArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(cue_policy_name(self.0))
    }
}

impl FromStr for CuePolicyArg {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "none" => Ok(Self(CuePolicy::None)),
            "on_detected_overtrust" => Ok(Self(CuePolicy::OnDetectedOvertrust)),
            other => bail!("unknown cue policy `{other}`"),
        }
    }
}

fn fit_settings(s: &mut Settings) -> Result<FitConfig, Failure> {
    let d = FitConfig::default();
    Ok(FitConfig {
        tolerance: s.get("tolerance", None, d.tolerance)?,
        max_iterations: s.get("max_iterations", None, d.max_iterations)?,
        variance_floor: s.get("variance_floor", None, d.variance_floor)?,
        latent_variance: s.get("latent_variance", None, d.latent_variance)?,
        initial_latent_mean: s.get("initial_latent_mean", None, d.initial_latent_mean)?,
        initial_variance: s.get("initial_variance", None, d.initial_variance)?,
        init_smoothing: s.get("init_smoothing", None, d.init_smoothing)?,
        mask_latent: d.mask_latent,
    })
}

/// The trust diagram, with cue edges when the panel's cue column varies.
fn default_diagram(panel: &PanelDataset, lags: &BTreeSet<usize>) -> anyhow::Result<PathDiagram> {
    let cue_varies = panel.var_index(CUE).is_some_and(|c| {
        let mut values = panel.series.iter().flat_map(|s| s.columns[c].iter().flatten());
        values.next().is_some_and(|first| values.any(|v| v != first))
    });
    Ok(build_paper_diagram(cue_varies, lags)?)
}

fn run_simulate(a: SimulateArgs) -> Result<bool, Failure> {
    let mut s = Settings::load("simulate", a.common.config.as_deref())?;
    let task: Task = s.get("task", a.task, Task::Drone)?;
    let seed: u64 = s.require("seed", a.seed)?;
    let base = match task {
        Task::Drone => CohortConfig::drone(seed),
        Task::Driving => CohortConfig::driving(seed),
    };
    let agent = AgentParams::default();
    let config = CohortConfig {
        n_participants: s.get("n_participants", a.participants, base.n_participants)?,
        phases: s.get("phases", None, Phases(base.phases.clone()))?.0,
        hp_mean: s.get("hp_mean", None, base.hp_mean)?,
        hp_spread: s.get("hp_spread", None, base.hp_spread)?,
        initial_trust: s.get("initial_trust", None, base.initial_trust)?,
        cue_policy: s.get("cue_policy", None, CuePolicyArg(base.cue_policy))?.0,
        fraction_with_cues: s.get("fraction_with_cues", None, base.fraction_with_cues)?,
        seed,
    };
    let params = AgentParams {
        learning_rate: s.get("learning_rate", None, agent.learning_rate)?,
        cue_rate: s.get("cue_rate", None, agent.cue_rate)?,
        decision_noise: s.get("decision_noise", None, agent.decision_noise)?,
        label_margin: s.get("label_margin", a.margin, agent.label_margin)?,
    };
    let augment: usize = s.get("augment", a.augment, 1)?;
    config.validate().map_err(|e| Failure::Usage(e.into()))?;
    params.validate().map_err(|e| Failure::Usage(e.into()))?;

    let mut panel = generate_cohort(&config, &params).context("simulating cohort")?;
    if augment > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        panel = augment_panel(&panel, augment, params.label_margin, &mut rng).context("augmenting panel")?;
    }
    s.record("output", &"panel.csv");
    prepare_out(&a.common.out)?;
    write_file(
        &a.common.out,
        "panel.csv",
        &write_panel_csv(&panel).context("encoding panel")?,
    )?;
    s.write(&a.common.out)?;
    println!(
        "wrote {} participants x {} steps to {}",
        panel.n_participants(),
        panel.max_len(),
        a.common.out.join("panel.csv").display()
    );
    Ok(true)
}

fn run_fit(a: FitArgs) -> Result<bool, Failure> {
    let mut s = Settings::load("fit", a.common.config.as_deref())?;
    let panel_path: PathBuf = s.require("panel", a.panel.map(|p| p.display().to_string()))?.into();
    let diagram_path: String = s.get("diagram", a.diagram.map(|p| p.display().to_string()), String::new())?;
    let lags: Lags = s.get(
        "lags",
        a.lags.map(|l| l.parse()).transpose().map_err(Failure::Usage)?,
        Lags([1].into()),
    )?;
    let config = fit_settings(&mut s)?;

    let panel = read_panel(&panel_path)?;
    let diagram = if diagram_path.is_empty() {
        default_diagram(&panel, &lags.0)?
    } else {
        let text = fs::read_to_string(&diagram_path).with_context(|| format!("reading diagram {diagram_path}"))?;
        parse_diagram(&text).with_context(|| format!("parsing diagram {diagram_path}"))?
    };
    let fit = em_fit(&diagram, &panel, &config).context("fitting model")?;
    prepare_out(&a.common.out)?;
    write_file(&a.common.out, "fit.txt", &serialize_fit(&fit))?;
    s.record("output", &"fit.txt");
    s.write(&a.common.out)?;
    report_fit(&fit);
    Ok(fit.converged)
}

fn report_fit(fit: &FitResult) {
    println!(
        "log-likelihood {:.4}, AIC {:.4}, {} iterations, converged={}",
        fit.log_likelihood, fit.aic, fit.n_iterations, fit.converged
    );
    for e in &fit.diagram.edges {
        println!(
            "  {} -> {} @{}: {:.4}",
            e.source,
            e.target,
            e.lag,
            e.coefficient.unwrap_or(f64::NAN)
        );
    }
}

fn run_search(a: SearchArgs) -> Result<bool, Failure> {
    let mut s = Settings::load("search", a.common.config.as_deref())?;
    let panel_path: PathBuf = s.require("panel", a.panel.map(|p| p.display().to_string()))?.into();
    let d = SearchConfig::default();
    let criterion: String = s.get("criterion", a.criterion, d.criterion.to_string())?;
    let criterion: Criterion = criterion
        .parse()
        .map_err(|e: trustdyn::Error| Failure::Usage(e.into()))?;
    let eta = s.get("eta", a.eta, d.eta)?;
    let mut config = SearchConfig {
        tau: s.get("tau", a.tau, d.tau)?,
        eta,
        criterion,
        min_train_origin: s.get("min_train_origin", a.min_train_origin, eta + 1)?,
        horizon: 1,
        threshold: s.get("threshold", a.threshold, d.threshold)?,
        enumeration_cap: d.enumeration_cap,
        search_variable: d.search_variable.clone(),
        fit: FitConfig::default(),
    };
    config.fit = fit_settings(&mut s)?;
    let candidate_list: String = s.get(
        "candidates",
        (!a.candidates.is_empty()).then(|| {
            a.candidates
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(";")
        }),
        String::new(),
    )?;

    let panel = read_panel(&panel_path)?;
    let base = if candidate_list.is_empty() {
        default_diagram(&panel, &[1].into())?
    } else {
        let mut diagrams = Vec::new();
        for path in candidate_list.split(';') {
            let text = fs::read_to_string(path).with_context(|| format!("reading candidate {path}"))?;
            diagrams.push(parse_diagram(&text).with_context(|| format!("parsing candidate {path}"))?);
        }
        let chosen = select_static_diagram(&diagrams, &panel, &config).context("static diagram gate")?;
        println!(
            "static gate: candidate {} with accuracy {:.4} ({} threshold {})",
            chosen.index + 1,
            chosen.accuracy,
            if chosen.above_threshold { "meets" } else { "below" },
            config.tau
        );
        chosen.diagram
    };
    let outcome = optimize_structure(&base, &panel, &config).map_err(|e| match e {
        trustdyn::Error::EnumerationCap { .. } | trustdyn::Error::Config(_) => Failure::Usage(e.into()),
        other => Failure::Data(anyhow::Error::from(other).context("searching lag structures")),
    })?;
    for c in &outcome.candidates {
        if let Err(e) = &c.result {
            eprintln!("candidate {{{}}} failed: {e}", format_lag_subset(&c.lag_subset));
        }
    }
    prepare_out(&a.common.out)?;
    write_file(
        &a.common.out,
        "search.csv",
        &write_search_report(&outcome).context("encoding report")?,
    )?;
    let best = outcome
        .best
        .as_ref()
        .ok_or_else(|| Failure::Data(anyhow!("every candidate failed; see search.csv")))?;
    write_file(&a.common.out, "best_fit.txt", &serialize_fit(&best.fit))?;
    s.record("output", &"search.csv;best_fit.txt");
    s.write(&a.common.out)?;
    println!(
        "{} candidates; best lags {{{}}} with {} = {:.4}",
        outcome.candidates.len(),
        format_lag_subset(&best.lag_subset),
        outcome.criterion,
        best.score
    );
    Ok(best.fit.converged)
}

fn run_compare(a: CompareArgs) -> Result<bool, Failure> {
    let mut s = Settings::load("compare", a.common.config.as_deref())?;
    let panel_path: PathBuf = s.require("panel", a.panel.map(|p| p.display().to_string()))?.into();
    let fit_path: PathBuf = s.require("fit", a.fit.map(|p| p.display().to_string()))?.into();
    let task: Task = s.get("task", a.task, Task::Drone)?;
    let default_season = match task {
        Task::Drone => 15,
        Task::Driving => 4,
    };
    let season = s.get("season", a.season, default_season)?;
    let threshold = s.get("threshold", a.threshold, CompareConfig::default().threshold)?;
    let binary = s.get("binary", a.binary.then_some(true), false)?;

    let panel = read_panel(&panel_path)?;
    let fit_text = fs::read_to_string(&fit_path).with_context(|| format!("reading fit {}", fit_path.display()))?;
    let fit = parse_fit(&fit_text).with_context(|| format!("parsing fit {}", fit_path.display()))?;
    let specs = [
        BaselineSpec::ar(1),
        BaselineSpec::arma(1, 1),
        BaselineSpec::sarima(1, 0, 1, season),
    ];
    let report =
        compare_models(&panel, &fit, &specs, &CompareConfig { threshold, binary }).context("comparing models")?;
    prepare_out(&a.common.out)?;
    write_file(
        &a.common.out,
        "summary.csv",
        &summary_csv(&report).context("encoding summary")?,
    )?;
    write_file(
        &a.common.out,
        "curves.csv",
        &curves_csv(&report).context("encoding curves")?,
    )?;
    write_file(
        &a.common.out,
        "stats.csv",
        &stats_csv(&report).context("encoding stats")?,
    )?;
    write_file(
        &a.common.out,
        "baselines.csv",
        &baseline_report_csv(&report).context("encoding scores")?,
    )?;
    let text = text_summary(&report);
    write_file(&a.common.out, "report.txt", &text)?;
    s.record("multiple_comparison", &report.multiple_comparison);
    s.record("output", &"summary.csv;curves.csv;stats.csv;baselines.csv;report.txt");
    s.write(&a.common.out)?;
    print!("{text}");
    Ok(true)
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Search(a) => run_search(a),
        Command::Compare(a) => run_compare(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: estimation did not converge; results were written anyway");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
