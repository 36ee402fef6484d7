//! Data-driven selection of the penalty weights `(lambda, mu)` by
//! split-sample validation.
//!
//! The dataset is split at the trajectory level. For every grid cell the
//! estimator is fitted on the training split, its TD errors are computed on
//! the validation split, and a kernel ridge regression of those errors on
//! the validation pairs reconstructs the cell's Bellman error; the score is
//! the mean squared fitted value. The winning cell is the score minimizer,
//! with ties broken toward stronger regularization. The caller then refits
//! on the full dataset with the selected weights.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Policy, ReferencePoint, TransitionTable, TuningParams};
use crate::error::{Error, Result};
use crate::estimator::{td_against_centers, FitOptions, FitResult, PreparedProblem};
use crate::kernel::{self, KernelSpec, PointSet, ShiftedKernelSpec};
use crate::linalg::CholeskyFactor;

/// Ridge weight of the validation regression; the system solved is
/// `(K + N_v * VALIDATION_RIDGE * I) c = td`, the posterior mean of a
/// Gaussian-process regression with this noise-to-signal ratio.
pub const VALIDATION_RIDGE: f64 = 1e-3;

/// Candidate penalty weights and the trajectory split they are judged on.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningGrid {
    /// Candidate `lambda` values, strictly descending.
    pub lambdas: Vec<f64>,
    /// Candidate `mu` values, strictly descending.
    pub mus: Vec<f64>,
    /// Fraction of trajectories assigned to the training split.
    pub split_fraction: f64,
    /// Seed of the trajectory shuffle behind the split.
    pub seed: u64,
}

impl TuningGrid {
    /// The default grid: six decades over `[1e-5, 1]`, scaled by the number
    /// of transitions, for both weights, judged on a half/half split.
    pub fn default_for(num_transitions: usize) -> Self {
        assert!(num_transitions >= 1, "need at least one transition");
        let scale = 1.0 / num_transitions as f64;
        let values: Vec<f64> = (0..6).map(|i| scale * 10f64.powi(-i)).collect();
        Self { lambdas: values.clone(), mus: values, split_fraction: 0.5, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.mus.is_empty() {
            return Err(Error::InvalidConfig("tuning grid must be nonempty".into()));
        }
        for v in self.lambdas.iter().chain(&self.mus) {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "tuning candidates must be positive and finite, got {v}"
                )));
            }
        }
        for list in [&self.lambdas, &self.mus] {
            if list.windows(2).any(|w| w[0] <= w[1]) {
                return Err(Error::InvalidConfig(
                    "tuning candidates must be strictly descending".into(),
                ));
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

/// Split whole trajectories into training and validation sets: a seeded
/// shuffle, then `round(fraction * n)` trajectories for training (clamped so
/// both sides are nonempty). Each side keeps the original trajectory order.
pub fn split_dataset(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.num_trajectories();
    if n < 2 {
        return Err(Error::TooFewTrajectories { need: 2, found: n });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let num_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, val_idx) = indices.split_at(num_train);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((data.subset(&train_idx)?, data.subset(&val_idx)?))
}

/// Validation-side quantities shared by every grid cell and every policy:
/// the flattened transitions and the factored kernel ridge system over the
/// validation pairs (median-heuristic bandwidth on the validation states).
struct ValidationContext {
    table: TransitionTable,
    gram: Array2<f64>,
    chol: CholeskyFactor,
}

impl ValidationContext {
    fn new(validation: &Dataset) -> Result<Self> {
        if validation.num_transitions() == 0 {
            return Err(Error::EmptyValidation);
        }
        let table = validation.transition_table();
        let bandwidth = kernel::median_heuristic(table.states.view())?;
        let spec = KernelSpec::new(bandwidth)?;
        let points = PointSet::new(table.states.view(), &table.actions);
        let gram = kernel::gram(&points, &spec);
        let mut sys = gram.clone();
        let ridge = gram.nrows() as f64 * VALIDATION_RIDGE;
        for i in 0..sys.nrows() {
            sys[[i, i]] += ridge;
        }
        let chol = CholeskyFactor::new(&sys)?;
        Ok(Self { table, gram, chol })
    }

    /// Mean squared fitted value of the ridge regression of `td_errors` on
    /// the validation pairs.
    fn score(&self, td_errors: ArrayView1<'_, f64>) -> Result<f64> {
        let coeffs = self.chol.solve_vec(td_errors)?;
        let fitted = self.gram.dot(&coeffs);
        Ok(fitted.dot(&fitted) / fitted.len() as f64)
    }
}

/// Squared estimated Bellman error of a fit on held-out data: TD errors on
/// the validation transitions, smoothed by kernel ridge regression over the
/// validation pairs, returned as the mean squared fitted value.
pub fn validation_score(fit: &FitResult, validation: &Dataset, policy: &Policy) -> Result<f64> {
    let ctx = ValidationContext::new(validation)?;
    let spec = ShiftedKernelSpec::new(fit.kernel.clone(), fit.anchor.clone())?;
    let centers = PointSet::new(fit.center_states.view(), &fit.center_actions);
    let td = td_against_centers(
        ctx.table.states.view(),
        &ctx.table.actions,
        ctx.table.rewards.view(),
        ctx.table.next_states.view(),
        policy,
        &spec,
        &centers,
    )?;
    let residuals = td.residuals(fit.eta_hat, fit.q_coeffs.view());
    ctx.score(residuals.view())
}

/// One scored grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreCell {
    pub lambda: f64,
    pub mu: f64,
    pub score: f64,
}

/// Every scored cell of one selection run, in grid order (`lambda`-major,
/// both weights descending). Failed cells carry an infinite score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub cells: Vec<ScoreCell>,
}

impl ScoreTable {
    pub fn min_score(&self) -> f64 {
        self.cells.iter().map(|c| c.score).fold(f64::INFINITY, f64::min)
    }

    /// Diagnostic CSV with one row per cell: `lambda,mu,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,mu,score\n");
        for c in &self.cells {
            out.push_str(&format!("{:e},{:e},{:e}\n", c.lambda, c.mu, c.score));
        }
        out
    }
}

/// The winning cell: smallest score, ties broken toward larger `lambda`,
/// then larger `mu`. `None` when every cell failed.
fn best_cell(cells: &[ScoreCell]) -> Option<ScoreCell> {
    let mut best: Option<ScoreCell> = None;
    for &cell in cells {
        if !cell.score.is_finite() {
            continue;
        }
        let improves = match best {
            None => true,
            Some(b) => {
                cell.score < b.score
                    || (cell.score == b.score
                        && (cell.lambda > b.lambda
                            || (cell.lambda == b.lambda && cell.mu > b.mu)))
            }
        };
        if improves {
            best = Some(cell);
        }
    }
    best
}

/// Select `(lambda, mu)` for one target policy. Returns the winner and the
/// full score table; the caller refits on the complete dataset with the
/// winning weights.
pub fn select_tuning(
    data: &Dataset,
    policy: &Policy,
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
    grid: &TuningGrid,
    options: &FitOptions,
) -> Result<(TuningParams, ScoreTable)> {
    let mut results =
        select_tuning_many(data, std::slice::from_ref(policy), kernel_spec, anchor, grid, options)?;
    Ok(results.pop().expect("one result per policy"))
}

/// Select `(lambda, mu)` for several target policies on one shared split,
/// reusing the validation-side kernel system across policies.
pub fn select_tuning_many(
    data: &Dataset,
    policies: &[Policy],
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
    grid: &TuningGrid,
    options: &FitOptions,
) -> Result<Vec<(TuningParams, ScoreTable)>> {
    grid.validate()?;
    if policies.is_empty() {
        return Err(Error::InvalidConfig("need at least one policy".into()));
    }
    let (train, validation) = split_dataset(data, grid.split_fraction, grid.seed)?;
    let ctx = ValidationContext::new(&validation)?;
    policies
        .iter()
        .map(|policy| select_for_policy(&train, &ctx, policy, kernel_spec, anchor, grid, options))
        .collect()
}

fn select_for_policy(
    train: &Dataset,
    ctx: &ValidationContext,
    policy: &Policy,
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
    grid: &TuningGrid,
    options: &FitOptions,
) -> Result<(TuningParams, ScoreTable)> {
    let prepared = PreparedProblem::new(train, policy, kernel_spec, anchor, options)?;
    let centers = PointSet::new(prepared.center_states(), prepared.center_actions());
    let td = td_against_centers(
        ctx.table.states.view(),
        &ctx.table.actions,
        ctx.table.rewards.view(),
        ctx.table.next_states.view(),
        policy,
        prepared.shifted_kernel(),
        &centers,
    )?;

    // Smoothers depend only on mu, so score mu-columns one factorization at
    // a time; a failure anywhere marks the affected cells infinite.
    let (nl, nm) = (grid.lambdas.len(), grid.mus.len());
    let mut scores = Array2::from_elem((nl, nm), f64::INFINITY);
    for (mi, &mu) in grid.mus.iter().enumerate() {
        let smoother = match prepared.inner_smoother(mu) {
            Ok(s) => s,
            Err(_) => continue,
        };
        for (li, &lambda) in grid.lambdas.iter().enumerate() {
            let solution = match prepared.solve_outer(&smoother, lambda) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let residuals = td.residuals(solution.eta, solution.alpha.view());
            if let Ok(score) = ctx.score(residuals.view()) {
                if score.is_finite() {
                    scores[[li, mi]] = score;
                }
            }
        }
    }

    let mut cells = Vec::with_capacity(nl * nm);
    for (li, &lambda) in grid.lambdas.iter().enumerate() {
        for (mi, &mu) in grid.mus.iter().enumerate() {
            cells.push(ScoreCell { lambda, mu, score: scores[[li, mi]] });
        }
    }
    let winner = best_cell(&cells).ok_or_else(|| {
        Error::SingularSystem(format!("all {nl} x {nm} tuning cells failed to fit"))
    })?;
    Ok((TuningParams::new(winner.lambda, winner.mu), ScoreTable { cells }))
}
