//! Command-line pipeline: simulate batch trajectory data, evaluate target
//! policies with confidence intervals, and run Monte-Carlo interval
//! calibration studies.
//!
//! Exit codes: 0 on success, 1 on runtime failures (bad data, singular
//! systems, failed studies), 2 on usage and configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};

use avgreward::coverage::{run_study, CaseKind, StudyCase, StudyConfig, StudyModel};
use avgreward::data::{load_csv, write_csv, Policy, ReferencePoint};
use avgreward::error::Error;
use avgreward::estimator::FitOptions;
use avgreward::inference::evaluate_policies;
use avgreward::kernel::{median_heuristic, KernelSpec};
use avgreward::simulator::{
    finite_mdp_solve, simulate_finite_mdp, simulate_luckett, tabular_anchor, tabular_policy,
    FiniteMdp, LuckettModelConfig, MarkovBehavior, LUCKETT_ETA_ALWAYS_TREAT,
    LUCKETT_ETA_NEVER_TREAT,
};
use avgreward::tuning::TuningGrid;

#[derive(Parser)]
#[command(
    name = "avgreward",
    version,
    about = "Off-policy estimation of long-run average rewards from batch trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate batch trajectories and write them as CSV.
    Simulate(SimulateArgs),
    /// Estimate average rewards with confidence intervals for target policies.
    Evaluate(EvaluateArgs),
    /// Run a Monte-Carlo interval-calibration study from a config file.
    Coverage(CoverageArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Generative model: `luckett` or `mdp:<spec.json>`.
    #[arg(long)]
    model: String,
    /// Number of trajectories.
    #[arg(long)]
    n: usize,
    /// Decision points per trajectory.
    #[arg(long)]
    t: usize,
    #[arg(long)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Input CSV with columns `id,t,s_1..s_d,a,r,sp_1..sp_d`.
    #[arg(long)]
    data: PathBuf,
    /// Target policy: `always:<a>`, `never`, `uniform`, or a JSON file with
    /// an S x A probability table (repeatable).
    #[arg(long = "policy", required = true)]
    policies: Vec<String>,
    /// Confidence level of the reported intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Seed of the tuning split.
    #[arg(long)]
    seed: u64,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    /// State dimension (default: inferred from the CSV header).
    #[arg(long)]
    state_dim: Option<usize>,
    /// Directory for per-policy tuning score tables (CSV), written when set.
    #[arg(long)]
    score_tables: Option<PathBuf>,
}

#[derive(Args)]
struct CoverageArgs {
    /// Study configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing); receives study.json and
    /// table.csv.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

/// A failure bound for one of the documented exit codes.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure::runtime(err.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Coverage(args) => cmd_coverage(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

enum ModelSpec {
    Luckett,
    Mdp(PathBuf),
}

fn parse_model_spec(spec: &str) -> Result<ModelSpec, Failure> {
    if spec == "luckett" {
        Ok(ModelSpec::Luckett)
    } else if let Some(path) = spec.strip_prefix("mdp:") {
        Ok(ModelSpec::Mdp(PathBuf::from(path)))
    } else {
        Err(Failure::config(format!(
            "unknown model `{spec}`; expected `luckett` or `mdp:<spec.json>`"
        )))
    }
}

fn uniform_behavior(mdp: &FiniteMdp) -> Array2<f64> {
    Array2::from_elem((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions as f64)
}

fn uniform_init(mdp: &FiniteMdp) -> Array1<f64> {
    Array1::from_elem(mdp.num_states, 1.0 / mdp.num_states as f64)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let data = match parse_model_spec(&args.model)? {
        ModelSpec::Luckett => {
            let config = LuckettModelConfig { seed: args.seed, ..Default::default() };
            simulate_luckett(&config, args.n, args.t)?
        }
        ModelSpec::Mdp(path) => {
            let mdp = FiniteMdp::from_json_file(&path)?;
            let behavior = MarkovBehavior(uniform_behavior(&mdp));
            simulate_finite_mdp(&mdp, &behavior, uniform_init(&mdp).view(), args.n, args.t, args.seed)?
        }
    };
    write_csv(&data, &args.out)?;
    println!(
        "wrote {} transitions ({} trajectories x {} steps) to {}",
        data.num_transitions(),
        data.num_trajectories(),
        data.horizon(),
        args.out.display()
    );
    Ok(())
}

/// Count the `s_1..s_d` columns in the CSV header.
fn infer_state_dim(path: &Path) -> Result<usize, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or("");
    let dim = header
        .split(',')
        .filter(|name| {
            name.strip_prefix("s_").map_or(false, |idx| idx.parse::<usize>().is_ok())
        })
        .count();
    if dim == 0 {
        return Err(Failure::runtime(format!(
            "no `s_<i>` state columns in the header of {}",
            path.display()
        )));
    }
    Ok(dim)
}

fn parse_policy(spec: &str, num_actions: usize) -> Result<Policy, Failure> {
    match spec {
        "never" => Ok(Policy::never(num_actions)),
        "uniform" => Ok(Policy::uniform(num_actions)),
        s if s.starts_with("always:") => {
            let action: usize = s["always:".len()..].parse().map_err(|_| {
                Failure::config(format!("cannot parse action index in policy `{s}`"))
            })?;
            if action >= num_actions {
                return Err(Failure::runtime(format!(
                    "policy `{s}` references action {action}, but only {num_actions} actions exist"
                )));
            }
            Ok(Policy::always(num_actions, action))
        }
        path => load_policy_table(path, num_actions),
    }
}

/// Load an `S x A` probability table from JSON; states are matched by their
/// largest coordinate (the one-hot convention), so row `i` applies wherever
/// coordinate `i` dominates.
fn load_policy_table(path: &str, num_actions: usize) -> Result<Policy, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::runtime(format!("cannot read policy file {path}: {e}")))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
        .map_err(|e| Failure::runtime(format!("policy file {path} is not a JSON table: {e}")))?;
    let label = Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string());
    if rows.is_empty() {
        return Err(Failure::runtime(format!("policy file {path} has no rows")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != num_actions {
            return Err(Failure::runtime(format!(
                "policy file {path} row {i} has {} probabilities, expected {num_actions}",
                row.len()
            )));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidPolicyOutput {
                label: label.clone(),
                context: format!("row {i} has a negative or non-finite probability"),
            }
            .into());
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPolicyOutput {
                label: label.clone(),
                context: format!("row {i} sums to {sum}, expected 1"),
            }
            .into());
        }
    }
    let mut table = Array2::zeros((rows.len(), num_actions));
    for (i, row) in rows.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            table[[i, j]] = p;
        }
    }
    Ok(tabular_policy(label, table))
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::config(format!(
            "--level must lie in (0, 1), got {}",
            args.level
        )));
    }
    let state_dim = match args.state_dim {
        Some(dim) => dim,
        None => infer_state_dim(&args.data)?,
    };
    let data = load_csv(&args.data, state_dim, None)?;
    let policies: Vec<Policy> = args
        .policies
        .iter()
        .map(|spec| parse_policy(spec, data.num_actions()))
        .collect::<Result<_, _>>()?;

    let bandwidth = median_heuristic(data.transition_table().states.view())?;
    let kernel = KernelSpec::new(bandwidth)?;
    let anchor = ReferencePoint::new(Array1::zeros(state_dim), 0);
    let grid =
        TuningGrid { seed: args.seed, ..TuningGrid::default_for(data.num_transitions()) };
    let evaluation = evaluate_policies(
        &data,
        &policies,
        &kernel,
        &anchor,
        &grid,
        &FitOptions::default(),
        args.level,
    )?;

    if let Some(dir) = &args.score_tables {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
        for (policy, (_, table)) in policies.iter().zip(&evaluation.selections) {
            let file = dir.join(format!("{}.csv", sanitize_label(policy.label())));
            fs::write(&file, table.to_csv())
                .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", file.display())))?;
        }
    }

    let json = evaluation.inference.to_json()?;
    fs::write(&args.out, &json)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", args.out.display())))?;

    let percent = (args.level * 100.0).round() as u32;
    for (k, policy) in policies.iter().enumerate() {
        let ci = evaluation.inference.confidence_interval(k)?;
        let (params, _) = &evaluation.selections[k];
        println!(
            "{}: eta^ = {:+.4}  se = {:.4}  ci{percent} = [{:+.4}, {:+.4}]  (lambda = {:.2e}, mu = {:.2e})",
            policy.label(),
            ci.estimate,
            ci.se,
            ci.lower,
            ci.upper,
            params.lambda,
            params.mu
        );
    }
    for i in 0..policies.len() {
        for j in (i + 1)..policies.len() {
            let ci = evaluation.inference.contrast_interval(i, j)?;
            println!(
                "{} - {}: delta^ = {:+.4}  se = {:.4}  ci{percent} = [{:+.4}, {:+.4}]",
                policies[i].label(),
                policies[j].label(),
                ci.estimate,
                ci.se,
                ci.lower,
                ci.upper
            );
        }
    }
    Ok(())
}

fn default_level() -> f64 {
    0.95
}

fn default_contrasts() -> bool {
    true
}

fn default_failure_budget() -> f64 {
    0.01
}

fn default_split() -> f64 {
    0.5
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverageConfigFile {
    /// `luckett` or `mdp:<spec.json>`.
    model: String,
    n: usize,
    horizon: usize,
    replications: usize,
    base_seed: u64,
    policies: Vec<String>,
    #[serde(default = "default_level")]
    ci_level: f64,
    /// Track all pairwise contrasts in addition to each policy's value.
    #[serde(default = "default_contrasts")]
    contrasts: bool,
    #[serde(default = "default_failure_budget")]
    max_failure_fraction: f64,
    grid: Option<GridSection>,
    mdp: Option<MdpSection>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    lambdas: Vec<f64>,
    mus: Vec<f64>,
    #[serde(default = "default_split")]
    split_fraction: f64,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpSection {
    /// `S x A` behavior probabilities (default: uniform).
    behavior: Option<Vec<Vec<f64>>>,
    /// Initial state distribution (default: uniform).
    init: Option<Vec<f64>>,
}

fn oracle_for_luckett(policy: &Policy) -> Result<f64, Failure> {
    match policy.label() {
        "always:1" => Ok(LUCKETT_ETA_ALWAYS_TREAT),
        "always:0" | "never" => Ok(LUCKETT_ETA_NEVER_TREAT),
        other => Err(Failure::config(format!(
            "no exact long-run value is known for policy `{other}` under the behavioral model; \
             use `always:1`, `always:0`, or `never`"
        ))),
    }
}

fn table_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>, Failure> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Failure::config(format!("{what} must be a nonempty rectangular table")));
    }
    let mut table = Array2::zeros((rows.len(), ncols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &value) in row.iter().enumerate() {
            table[[i, j]] = value;
        }
    }
    Ok(table)
}

fn build_study_config(file: &CoverageConfigFile) -> Result<StudyConfig, Failure> {
    let (model, policies, anchor, oracles) = match parse_model_spec(&file.model)? {
        ModelSpec::Luckett => {
            let policies: Vec<Policy> = file
                .policies
                .iter()
                .map(|spec| parse_policy(spec, 2))
                .collect::<Result<_, _>>()?;
            let oracles: Vec<f64> =
                policies.iter().map(oracle_for_luckett).collect::<Result<_, _>>()?;
            let anchor = ReferencePoint::new(Array1::zeros(2), 0);
            let model = StudyModel::Luckett(LuckettModelConfig::default());
            (model, policies, anchor, oracles)
        }
        ModelSpec::Mdp(path) => {
            let mdp = FiniteMdp::from_json_file(&path)?;
            let policies: Vec<Policy> = file
                .policies
                .iter()
                .map(|spec| parse_policy(spec, mdp.num_actions))
                .collect::<Result<_, _>>()?;
            let oracles: Vec<f64> = policies
                .iter()
                .map(|policy| Ok(finite_mdp_solve(&mdp, policy, 0, 0)?.eta))
                .collect::<Result<_, Failure>>()?;
            let section = file.mdp.as_ref();
            let behavior = match section.and_then(|s| s.behavior.as_ref()) {
                Some(rows) => table_from_rows(rows, "mdp.behavior")?,
                None => uniform_behavior(&mdp),
            };
            let init = match section.and_then(|s| s.init.as_ref()) {
                Some(values) => Array1::from_vec(values.clone()),
                None => uniform_init(&mdp),
            };
            let anchor = tabular_anchor(mdp.num_states, 0, 0);
            let model = StudyModel::FiniteMdp { mdp, behavior, init };
            (model, policies, anchor, oracles)
        }
    };

    let mut cases: Vec<StudyCase> = policies
        .iter()
        .zip(&oracles)
        .enumerate()
        .map(|(k, (policy, &oracle))| StudyCase {
            label: policy.label().to_string(),
            kind: CaseKind::Policy(k),
            oracle,
        })
        .collect();
    if file.contrasts {
        for i in 0..policies.len() {
            for j in (i + 1)..policies.len() {
                cases.push(StudyCase {
                    label: format!("{} - {}", policies[i].label(), policies[j].label()),
                    kind: CaseKind::Contrast(i, j),
                    oracle: oracles[i] - oracles[j],
                });
            }
        }
    }

    let grid = match &file.grid {
        Some(section) => TuningGrid {
            lambdas: section.lambdas.clone(),
            mus: section.mus.clone(),
            split_fraction: section.split_fraction,
            seed: file.base_seed,
        },
        None => TuningGrid::default_for(file.n * file.horizon),
    };

    Ok(StudyConfig {
        model,
        n: file.n,
        horizon: file.horizon,
        num_replications: file.replications,
        policies,
        cases,
        anchor,
        grid,
        fit_options: FitOptions::default(),
        ci_level: file.ci_level,
        base_seed: file.base_seed,
        max_failure_fraction: file.max_failure_fraction,
    })
}

fn cmd_coverage(args: &CoverageArgs) -> Result<(), Failure> {
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::runtime(format!("cannot configure {jobs} workers: {e}")))?;
    }
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", args.config.display())))?;
    let file: CoverageConfigFile = toml::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", args.config.display())))?;
    let config = build_study_config(&file)?;
    let result = run_study(&config)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let json_path = args.out.join("study.json");
    fs::write(&json_path, result.to_json()?)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", json_path.display())))?;
    let csv_path = args.out.join("table.csv");
    fs::write(&csv_path, result.table_csv())
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", csv_path.display())))?;

    for case in &result.cases {
        println!(
            "{}: coverage = {:.3}  mad = {:.4}  mean_se = {:.4}  (oracle {:+.4})",
            case.label, case.coverage, case.mad, case.mean_se, case.oracle
        );
    }
    if !result.failures.is_empty() {
        println!(
            "excluded {} of {} replications",
            result.failures.len(),
            result.num_replications
        );
    }
    Ok(())
}
