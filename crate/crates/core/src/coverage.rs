//! Monte-Carlo replication engine for interval calibration: repeated
//! simulate → tune → fit → infer cycles against known long-run values,
//! aggregated into coverage probability, mean absolute deviation, and mean
//! estimated standard error per case.
//!
//! Replications are independent and schedule-invariant: replication `r`
//! seeds everything from `base_seed ^ r`, runs in parallel, and the
//! aggregation is a deterministic reduction in replication order.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Policy, ReferencePoint};
use crate::error::{Error, Result};
use crate::estimator::FitOptions;
use crate::inference::{evaluate_policies, Interval};
use crate::kernel::{self, KernelSpec};
use crate::simulator::{
    simulate_finite_mdp, simulate_luckett, FiniteMdp, LuckettModelConfig, MarkovBehavior,
    LUCKETT_ETA_ALWAYS_TREAT, LUCKETT_ETA_NEVER_TREAT,
};
use crate::tuning::TuningGrid;

pub const COVERAGE_SCHEMA: &str = "avgreward/coverage/1";

/// Data-generating process of one study.
#[derive(Debug, Clone)]
pub enum StudyModel {
    /// The two-dimensional behavioral model with its Bernoulli behavior
    /// policy; the config's own seed is ignored in favor of the
    /// per-replication seed.
    Luckett(LuckettModelConfig),
    /// A finite MDP sampled under a Markov behavior policy from a fixed
    /// initial state distribution.
    FiniteMdp { mdp: FiniteMdp, behavior: Array2<f64>, init: Array1<f64> },
}

impl StudyModel {
    fn simulate(&self, n: usize, horizon: usize, seed: u64) -> Result<Dataset> {
        match self {
            StudyModel::Luckett(config) => {
                let config = LuckettModelConfig { seed, ..config.clone() };
                simulate_luckett(&config, n, horizon)
            }
            StudyModel::FiniteMdp { mdp, behavior, init } => {
                let rule = MarkovBehavior(behavior.clone());
                simulate_finite_mdp(mdp, &rule, init.view(), n, horizon, seed)
            }
        }
    }
}

/// What a case tracks: one policy's value, or the difference of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseKind {
    Policy(usize),
    Contrast(usize, usize),
}

/// One tracked quantity and the ground truth its intervals are judged
/// against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCase {
    pub label: String,
    pub kind: CaseKind,
    pub oracle: f64,
}

/// Full specification of a replication study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub model: StudyModel,
    pub n: usize,
    pub horizon: usize,
    pub num_replications: usize,
    pub policies: Vec<Policy>,
    pub cases: Vec<StudyCase>,
    pub anchor: ReferencePoint,
    /// Penalty-weight grid; its `seed` field is overridden per replication.
    pub grid: TuningGrid,
    pub fit_options: FitOptions,
    pub ci_level: f64,
    pub base_seed: u64,
    /// Replications may fail (singular systems on unlucky draws); they are
    /// excluded from the aggregates unless their fraction reaches this
    /// budget, in which case the whole study errors out.
    pub max_failure_fraction: f64,
}

impl StudyConfig {
    /// The behavioral-model calibration protocol: always-treat and
    /// never-treat targets plus their contrast, 95% intervals, 500
    /// replications, default tuning grid.
    pub fn luckett_study(n: usize, horizon: usize, base_seed: u64) -> Self {
        let always = Policy::always(2, 1);
        let never = Policy::never(2);
        let cases = vec![
            StudyCase {
                label: "always-treat".into(),
                kind: CaseKind::Policy(0),
                oracle: LUCKETT_ETA_ALWAYS_TREAT,
            },
            StudyCase {
                label: "never-treat".into(),
                kind: CaseKind::Policy(1),
                oracle: LUCKETT_ETA_NEVER_TREAT,
            },
            StudyCase {
                label: "contrast".into(),
                kind: CaseKind::Contrast(0, 1),
                oracle: LUCKETT_ETA_ALWAYS_TREAT - LUCKETT_ETA_NEVER_TREAT,
            },
        ];
        Self {
            model: StudyModel::Luckett(LuckettModelConfig::default()),
            n,
            horizon,
            num_replications: 500,
            policies: vec![always, never],
            cases,
            anchor: ReferencePoint::new(Array1::zeros(2), 0),
            grid: TuningGrid::default_for(n * horizon),
            fit_options: FitOptions::default(),
            ci_level: 0.95,
            base_seed,
            max_failure_fraction: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig("n and horizon must be positive".into()));
        }
        if self.num_replications == 0 {
            return Err(Error::InvalidConfig("need at least one replication".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::InvalidConfig("need at least one policy".into()));
        }
        if self.cases.is_empty() {
            return Err(Error::InvalidConfig("need at least one case".into()));
        }
        let k = self.policies.len();
        for case in &self.cases {
            let ok = match case.kind {
                CaseKind::Policy(i) => i < k,
                CaseKind::Contrast(i, j) => i < k && j < k && i != j,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "case {:?} does not reference two distinct policies among {k}",
                    case.kind
                )));
            }
            if !case.oracle.is_finite() {
                return Err(Error::NonFiniteInput(format!(
                    "oracle value for case {}",
                    case.label
                )));
            }
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ci_level must lie in (0, 1), got {}",
                self.ci_level
            )));
        }
        if !(self.max_failure_fraction >= 0.0 && self.max_failure_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "max_failure_fraction must lie in [0, 1), got {}",
                self.max_failure_fraction
            )));
        }
        self.grid.validate()
    }
}

/// One replication's recorded output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    /// Per-case interval, in the order of `StudyConfig::cases`.
    pub intervals: Vec<Interval>,
    pub covered: Vec<bool>,
    /// Selected `(lambda, mu)` per policy.
    pub selected: Vec<(f64, f64)>,
}

/// A replication that was excluded from the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub seed: u64,
    pub message: String,
}

/// Aggregates of one case across the successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub label: String,
    pub oracle: f64,
    /// Fraction of replications whose interval contains the oracle value.
    pub coverage: f64,
    /// Mean absolute deviation of the point estimates from the oracle.
    pub mad: f64,
    pub mean_se: f64,
    pub mean_estimate: f64,
    /// Empirical standard deviation of the point estimates (zero when fewer
    /// than two replications succeeded).
    pub sd_estimate: f64,
}

/// Everything a study produced: per-case aggregates plus the raw records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub schema: String,
    pub n: usize,
    pub horizon: usize,
    pub num_replications: usize,
    pub ci_level: f64,
    pub base_seed: u64,
    pub cases: Vec<CaseSummary>,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<ReplicationFailure>,
}

impl StudyResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let result: Self = serde_json::from_str(text)?;
        if result.schema != COVERAGE_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "expected schema {COVERAGE_SCHEMA}, found {}",
                result.schema
            )));
        }
        Ok(result)
    }

    /// Summary CSV with one row per case: `case,n,horizon,coverage,mad,mean_se`.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("case,n,horizon,coverage,mad,mean_se\n");
        for case in &self.cases {
            out.push_str(&format!(
                "{},{},{},{:.3},{:.4},{:.4}\n",
                case.label, self.n, self.horizon, case.coverage, case.mad, case.mean_se
            ));
        }
        out
    }
}

/// Run one replication: simulate, pick penalty weights on a split, refit on
/// the full draw, fit the variance directions, and read off every case's
/// interval.
fn run_replication(config: &StudyConfig, replication: usize) -> Result<ReplicationRecord> {
    let seed = config.base_seed ^ replication as u64;
    let data = config.model.simulate(config.n, config.horizon, seed)?;
    let bandwidth = kernel::median_heuristic(data.transition_table().states.view())?;
    let kernel_spec = KernelSpec::new(bandwidth)?;
    let grid = TuningGrid { seed, ..config.grid.clone() };
    let evaluation = evaluate_policies(
        &data,
        &config.policies,
        &kernel_spec,
        &config.anchor,
        &grid,
        &config.fit_options,
        config.ci_level,
    )?;
    let selected =
        evaluation.selections.iter().map(|(params, _)| (params.lambda, params.mu)).collect();

    let mut intervals = Vec::with_capacity(config.cases.len());
    let mut covered = Vec::with_capacity(config.cases.len());
    for case in &config.cases {
        let interval = match case.kind {
            CaseKind::Policy(i) => evaluation.inference.confidence_interval(i)?,
            CaseKind::Contrast(i, j) => evaluation.inference.contrast_interval(i, j)?,
        };
        covered.push(interval.lower <= case.oracle && case.oracle <= interval.upper);
        intervals.push(interval);
    }
    Ok(ReplicationRecord { replication, seed, intervals, covered, selected })
}

/// Run every replication (in parallel) and aggregate. Failed replications
/// are excluded and reported; the study errors out once their fraction
/// reaches the configured budget.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let outcomes: Vec<(usize, Result<ReplicationRecord>)> = (0..config.num_replications)
        .into_par_iter()
        .map(|r| (r, run_replication(config, r)))
        .collect();

    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (replication, outcome) in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(err) => failures.push(ReplicationFailure {
                replication,
                seed: config.base_seed ^ replication as u64,
                message: err.to_string(),
            }),
        }
    }
    let failed_fraction = failures.len() as f64 / config.num_replications as f64;
    if !failures.is_empty() && failed_fraction >= config.max_failure_fraction {
        return Err(Error::SingularSystem(format!(
            "{} of {} replications failed (budget {:.1}%); first: {}",
            failures.len(),
            config.num_replications,
            100.0 * config.max_failure_fraction,
            failures[0].message
        )));
    }

    let cases = config
        .cases
        .iter()
        .enumerate()
        .map(|(c, case)| summarize_case(case, c, &records))
        .collect();
    Ok(StudyResult {
        schema: COVERAGE_SCHEMA.to_string(),
        n: config.n,
        horizon: config.horizon,
        num_replications: config.num_replications,
        ci_level: config.ci_level,
        base_seed: config.base_seed,
        cases,
        records,
        failures,
    })
}

fn summarize_case(case: &StudyCase, index: usize, records: &[ReplicationRecord]) -> CaseSummary {
    let m = records.len() as f64;
    let mut hits = 0usize;
    let (mut abs_dev, mut se_sum, mut est_sum) = (0.0, 0.0, 0.0);
    for record in records {
        let interval = &record.intervals[index];
        hits += record.covered[index] as usize;
        abs_dev += (interval.estimate - case.oracle).abs();
        se_sum += interval.se;
        est_sum += interval.estimate;
    }
    let mean_estimate = est_sum / m;
    let sd_estimate = if records.len() > 1 {
        let ss: f64 = records
            .iter()
            .map(|r| (r.intervals[index].estimate - mean_estimate).powi(2))
            .sum();
        (ss / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    CaseSummary {
        label: case.label.clone(),
        oracle: case.oracle,
        coverage: hits as f64 / m,
        mad: abs_dev / m,
        mean_se: se_sum / m,
        mean_estimate,
        sd_estimate,
    }
}
