//! Inference for fitted average rewards: direction-function (density-ratio)
//! estimation, the plug-in covariance matrix across target policies, and
//! normal-approximation confidence intervals for average rewards and their
//! pairwise contrasts.
//!
//! The sampling variance of `eta^` is governed by how often the behavior
//! data visits the pairs the target policy occupies. That information is the
//! direction function `e^pi`: the target policy's stationary state-action
//! density over the average data density, normalized to integrate to one
//! against the target density. It solves the same projected Bellman problem
//! as the main estimator with the reward replaced by the constant one and the
//! average-reward slot pinned to zero, so a direction fit reuses the
//! estimator's prepared matrices wholesale. The fitted ratio multiplies each
//! TD residual to form the per-trajectory influence values whose empirical
//! second moments give `Sigma^`.

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Policy, ReferencePoint, TuningParams};
use crate::error::{Error, Result};
use crate::estimator::{
    td_against_centers, FitOptions, FitResult, InnerSmoother, PreparedProblem,
};
use crate::kernel::{self, KernelSpec, PointSet, ShiftedKernelSpec};
use crate::stats::normal_quantile;
use crate::tuning::{select_tuning_many, ScoreTable, TuningGrid};

/// Fitted direction values below this are lifted to the floor before the
/// ratio is normalized. The true ratio is nonnegative, so flooring changes
/// nothing wherever the fit is accurate and keeps the plug-in weights
/// positive where it is not.
pub const RATIO_FLOOR: f64 = 1e-6;

/// A fitted direction function: the companion value expansion `q^`, the
/// direction estimate `e^` at every training transition, and the
/// self-normalization constant that turns `e^` into a density ratio.
#[derive(Debug, Clone)]
pub struct DirectionFit {
    /// Representer coefficients of the companion `q^` over the anchored
    /// kernel at the centers.
    pub q_coeffs: Array1<f64>,
    /// `e^` at every training transition's current pair, trajectory-major.
    pub e_values: Array1<f64>,
    /// Training-weighted mean of `max(e^, RATIO_FLOOR)`; always positive.
    pub normalizer: f64,
    policy: Policy,
    /// `[intercept | base-kernel coefficients at centers]` of `e^`.
    g_coeffs: Array1<f64>,
    kernel: KernelSpec,
    anchor: ReferencePoint,
    center_states: Array2<f64>,
    center_actions: Vec<usize>,
    training_hash: String,
}

impl DirectionFit {
    /// The target policy this direction function belongs to.
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// SHA-256 over centers, anchor, and bandwidth; matches the hash of the
    /// main fit produced from the same prepared problem.
    pub fn training_hash(&self) -> &str {
        &self.training_hash
    }

    /// Evaluate the companion `q^` at one state-action pair. Exactly zero at
    /// the anchor.
    pub fn predict_q(&self, state: ArrayView1<'_, f64>, action: usize) -> f64 {
        let spec = ShiftedKernelSpec { base: self.kernel.clone(), anchor: self.anchor.clone() };
        let mut total = 0.0;
        for (k, &coef) in self.q_coeffs.iter().enumerate() {
            total += coef
                * kernel::k_shifted(
                    state,
                    action,
                    self.center_states.row(k),
                    self.center_actions[k],
                    &spec,
                );
        }
        total
    }

    /// Raw `e^` at one state-action pair (no floor, no normalization).
    pub fn evaluate(&self, state: ArrayView1<'_, f64>, action: usize) -> f64 {
        let mut e = self.g_coeffs[0];
        for (k, &coef) in self.g_coeffs.iter().skip(1).enumerate() {
            e += coef
                * kernel::k(
                    state,
                    action,
                    self.center_states.row(k),
                    self.center_actions[k],
                    &self.kernel,
                );
        }
        e
    }

    /// Floored, normalized ratios at the training transitions, in training
    /// order. Their training-weighted mean is exactly one.
    pub fn training_ratios(&self) -> Array1<f64> {
        self.e_values.mapv(|e| e.max(RATIO_FLOOR) / self.normalizer)
    }
}

/// Estimated density ratio `d^pi / d-bar` at one state-action pair:
/// `max(e^(x), RATIO_FLOOR) / normalizer`. Always positive.
pub fn density_ratio(dirfit: &DirectionFit, state: ArrayView1<'_, f64>, action: usize) -> f64 {
    dirfit.evaluate(state, action).max(RATIO_FLOOR) / dirfit.normalizer
}

/// Density ratios at many pairs with one matrix product.
pub fn density_ratio_batch(dirfit: &DirectionFit, points: &PointSet<'_>) -> Array1<f64> {
    let centers = PointSet::new(dirfit.center_states.view(), &dirfit.center_actions);
    let mut e = kernel::cross_gram(points, &centers, &dirfit.kernel)
        .dot(&dirfit.g_coeffs.slice(s![1..]));
    e += dirfit.g_coeffs[0];
    e.mapv(|v| v.max(RATIO_FLOOR) / dirfit.normalizer)
}

/// Fit the direction function of `policy` on trajectory data.
///
/// `lambda_tilde` penalizes the companion `q^` and `mu_tilde` the projection
/// fit, exactly as `lambda` and `mu` do in the main estimator; the standard
/// pipeline reuses the main fit's selected values. Kernel, anchor, and
/// center selection must match the main fit for the two to be combined in
/// [`covariance_matrix`].
pub fn fit_direction(
    data: &Dataset,
    policy: &Policy,
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
    lambda_tilde: f64,
    mu_tilde: f64,
    options: &FitOptions,
) -> Result<DirectionFit> {
    let prepared = PreparedProblem::new(data, policy, kernel_spec, anchor, options)?;
    let smoother = prepared.inner_smoother(mu_tilde)?;
    direction_from_prepared(&prepared, &smoother, lambda_tilde, policy)
}

/// Direction fit reusing an existing prepared problem and inner smoother
/// (when `mu~ = mu`, the direction solve shares the main fit's
/// factorization).
pub fn direction_from_prepared(
    prepared: &PreparedProblem,
    smoother: &InnerSmoother,
    lambda_tilde: f64,
    policy: &Policy,
) -> Result<DirectionFit> {
    let solution = prepared.solve_direction(smoother, lambda_tilde)?;
    let normalizer = prepared
        .weights()
        .iter()
        .zip(solution.e_values.iter())
        .map(|(&w, &e)| w * e.max(RATIO_FLOOR))
        .sum::<f64>();
    if !(normalizer.is_finite() && normalizer > 0.0) {
        return Err(Error::SingularSystem(format!(
            "direction normalizer {normalizer} is not positive"
        )));
    }
    let shifted = prepared.shifted_kernel();
    Ok(DirectionFit {
        q_coeffs: solution.q_coeffs,
        e_values: solution.e_values,
        normalizer,
        policy: policy.clone(),
        g_coeffs: solution.g_coeffs,
        kernel: shifted.base.clone(),
        anchor: shifted.anchor.clone(),
        center_states: prepared.center_states().to_owned(),
        center_actions: prepared.center_actions().to_vec(),
        training_hash: prepared.training_hash(),
    })
}

/// Plug-in covariance matrix of `sqrt(n) (eta^_1 - eta_1, ..., eta^_K -
/// eta_K)` from one fit and one direction fit per target policy, all trained
/// on `data`.
///
/// Entry `(i, j)` is the empirical covariance of the per-trajectory
/// influence values `psi_k = (1/T) sum_t ratio_k(X_t) delta_k(X_t, R_t,
/// S_{t+1})`, where `ratio_k` is the floored, normalized direction estimate
/// and `delta_k` the TD residual of fit `k`. Errors with
/// [`Error::MismatchedFits`] when a fit and its direction fit were not
/// prepared identically, or when a direction fit's training transitions do
/// not match `data`.
pub fn covariance_matrix(
    fits: &[FitResult],
    dirfits: &[DirectionFit],
    data: &Dataset,
) -> Result<Array2<f64>> {
    if fits.is_empty() || fits.len() != dirfits.len() {
        return Err(Error::MismatchedFits(format!(
            "{} fits but {} direction fits",
            fits.len(),
            dirfits.len()
        )));
    }
    let n = data.num_trajectories();
    let t = data.horizon();
    let m = n * t;
    let tt = data.transition_table();
    let num_fits = fits.len();
    let mut psi = Array2::zeros((num_fits, n));
    for (k, (fit, dirfit)) in fits.iter().zip(dirfits).enumerate() {
        if fit.training_hash != dirfit.training_hash {
            return Err(Error::MismatchedFits(format!(
                "fit {k} and its direction fit disagree on centers, anchor, or bandwidth"
            )));
        }
        if dirfit.e_values.len() != m {
            return Err(Error::MismatchedFits(format!(
                "direction fit {k} covers {} transitions but the dataset has {m}",
                dirfit.e_values.len()
            )));
        }
        let spec = ShiftedKernelSpec::new(fit.kernel.clone(), fit.anchor.clone())?;
        let centers = PointSet::new(fit.center_states.view(), &fit.center_actions);
        let td = td_against_centers(
            tt.states.view(),
            &tt.actions,
            tt.rewards.view(),
            tt.next_states.view(),
            &dirfit.policy,
            &spec,
            &centers,
        )?;
        let residuals = td.residuals(fit.eta_hat, fit.q_coeffs.view());
        let ratios = dirfit.training_ratios();
        for i in 0..n {
            let mut acc = 0.0;
            for step in 0..t {
                let j = i * t + step;
                acc += ratios[j] * residuals[j];
            }
            psi[[k, i]] = acc / t as f64;
        }
    }
    let mut sigma = Array2::zeros((num_fits, num_fits));
    for a in 0..num_fits {
        for b in a..num_fits {
            let v = psi.row(a).dot(&psi.row(b)) / n as f64;
            sigma[[a, b]] = v;
            sigma[[b, a]] = v;
        }
    }
    Ok(sigma)
}

/// A point estimate with its normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Average-reward estimates for `K` target policies with their joint
/// covariance, ready for interval queries and serialization.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    labels: Vec<String>,
    eta_hats: Vec<f64>,
    sigma_hat: Array2<f64>,
    n: usize,
    ci_level: f64,
}

impl InferenceResult {
    /// Validate and assemble a result. `sigma_hat` must be `K x K`,
    /// symmetric, and have a nonnegative diagonal; `ci_level` must lie
    /// strictly between zero and one; `n` is the trajectory count behind
    /// every estimate.
    pub fn new(
        labels: Vec<String>,
        eta_hats: Vec<f64>,
        sigma_hat: Array2<f64>,
        n: usize,
        ci_level: f64,
    ) -> Result<Self> {
        let k = eta_hats.len();
        if k == 0 {
            return Err(Error::InvalidConfig("need at least one policy".into()));
        }
        if labels.len() != k {
            return Err(Error::InvalidConfig(format!(
                "{} labels for {k} estimates",
                labels.len()
            )));
        }
        if sigma_hat.dim() != (k, k) {
            return Err(Error::InvalidConfig(format!(
                "covariance is {:?}, expected ({k}, {k})",
                sigma_hat.dim()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidConfig("need at least one trajectory".into()));
        }
        if !(ci_level > 0.0 && ci_level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence level must lie in (0, 1), got {ci_level}"
            )));
        }
        if eta_hats.iter().any(|v| !v.is_finite())
            || sigma_hat.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteInput(
                "estimates and covariance entries must be finite".into(),
            ));
        }
        let scale = sigma_hat.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for i in 0..k {
            if sigma_hat[[i, i]] < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "negative variance {} for policy {i}",
                    sigma_hat[[i, i]]
                )));
            }
            for j in (i + 1)..k {
                if (sigma_hat[[i, j]] - sigma_hat[[j, i]]).abs() > 1e-10 * (1.0 + scale) {
                    return Err(Error::InvalidConfig(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { labels, eta_hats, sigma_hat, n, ci_level })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn eta_hats(&self) -> &[f64] {
        &self.eta_hats
    }

    pub fn sigma_hat(&self) -> &Array2<f64> {
        &self.sigma_hat
    }

    pub fn num_trajectories(&self) -> usize {
        self.n
    }

    pub fn ci_level(&self) -> f64 {
        self.ci_level
    }

    /// Standard error of `eta^_j`: `sqrt(Sigma^_jj / n)`.
    pub fn standard_error(&self, j: usize) -> Result<f64> {
        self.check_index(j)?;
        Ok((self.sigma_hat[[j, j]] / self.n as f64).sqrt())
    }

    /// Two-sided confidence interval for the `j`-th average reward:
    /// `eta^_j -+ z_{(1 + level)/2} sqrt(Sigma^_jj / n)`.
    pub fn confidence_interval(&self, j: usize) -> Result<Interval> {
        self.check_index(j)?;
        let se = self.standard_error(j)?;
        Ok(self.interval_around(self.eta_hats[j], se))
    }

    /// Two-sided confidence interval for the contrast `eta^_i - eta^_j`,
    /// with variance `Sigma^_ii + Sigma^_jj - 2 Sigma^_ij`. The indices must
    /// be distinct.
    pub fn contrast_interval(&self, i: usize, j: usize) -> Result<Interval> {
        self.check_index(i)?;
        self.check_index(j)?;
        if i == j {
            return Err(Error::InvalidConfig(
                "a contrast needs two distinct policies".into(),
            ));
        }
        let var = self.sigma_hat[[i, i]] + self.sigma_hat[[j, j]]
            - 2.0 * self.sigma_hat[[i, j]];
        let se = (var.max(0.0) / self.n as f64).sqrt();
        Ok(self.interval_around(self.eta_hats[i] - self.eta_hats[j], se))
    }

    /// Serialize to a JSON document with one entry per policy, one per
    /// pairwise contrast (`i < j`), and the full covariance matrix.
    pub fn to_json(&self) -> Result<String> {
        let k = self.eta_hats.len();
        let mut policies = Vec::with_capacity(k);
        for j in 0..k {
            let ci = self.confidence_interval(j)?;
            policies.push(PolicyReport {
                label: self.labels[j].clone(),
                eta_hat: ci.estimate,
                se: ci.se,
                ci: [ci.lower, ci.upper],
            });
        }
        let mut contrasts = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in (i + 1)..k {
                let ci = self.contrast_interval(i, j)?;
                contrasts.push(ContrastReport {
                    first: self.labels[i].clone(),
                    second: self.labels[j].clone(),
                    estimate: ci.estimate,
                    se: ci.se,
                    ci: [ci.lower, ci.upper],
                });
            }
        }
        let doc = InferenceDocument {
            schema: INFERENCE_SCHEMA.to_string(),
            n: self.n,
            ci_level: self.ci_level,
            policies,
            contrasts,
            sigma_hat: self
                .sigma_hat
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.eta_hats.len() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.eta_hats.len(),
                what: "policy index".into(),
            });
        }
        Ok(())
    }

    fn interval_around(&self, estimate: f64, se: f64) -> Interval {
        let z = normal_quantile(0.5 * (1.0 + self.ci_level));
        Interval { estimate, se, lower: estimate - z * se, upper: estimate + z * se }
    }
}

/// Assemble an [`InferenceResult`] from matched fits and direction fits:
/// estimates from the fits, labels from the direction fits' policies, and
/// the covariance from [`covariance_matrix`].
pub fn infer(
    fits: &[FitResult],
    dirfits: &[DirectionFit],
    data: &Dataset,
    ci_level: f64,
) -> Result<InferenceResult> {
    let sigma_hat = covariance_matrix(fits, dirfits, data)?;
    let labels = dirfits.iter().map(|d| d.policy.label().to_string()).collect();
    let eta_hats = fits.iter().map(|f| f.eta_hat).collect();
    InferenceResult::new(labels, eta_hats, sigma_hat, data.num_trajectories(), ci_level)
}

/// Everything the full pipeline produces for a batch of target policies.
#[derive(Debug)]
pub struct PolicyEvaluation {
    pub inference: InferenceResult,
    pub fits: Vec<FitResult>,
    pub directions: Vec<DirectionFit>,
    /// Selected penalty weights and the full score table, per policy.
    pub selections: Vec<(TuningParams, ScoreTable)>,
}

/// The analyst entry point: select penalty weights on a trajectory split,
/// refit each policy on the full dataset, fit its variance direction
/// (reusing the main fit's factorization when `mu~ = mu`), and assemble
/// joint confidence intervals.
pub fn evaluate_policies(
    data: &Dataset,
    policies: &[Policy],
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
    grid: &TuningGrid,
    options: &FitOptions,
    ci_level: f64,
) -> Result<PolicyEvaluation> {
    let selections = select_tuning_many(data, policies, kernel_spec, anchor, grid, options)?;
    let mut fits = Vec::with_capacity(policies.len());
    let mut directions = Vec::with_capacity(policies.len());
    for (policy, (params, _)) in policies.iter().zip(&selections) {
        let prepared = PreparedProblem::new(data, policy, kernel_spec, anchor, options)?;
        let smoother = prepared.inner_smoother(params.mu)?;
        let solution = prepared.solve_outer(&smoother, params.lambda)?;
        let direction = if params.mu_tilde == params.mu {
            direction_from_prepared(&prepared, &smoother, params.lambda_tilde, policy)?
        } else {
            let tilde_smoother = prepared.inner_smoother(params.mu_tilde)?;
            direction_from_prepared(&prepared, &tilde_smoother, params.lambda_tilde, policy)?
        };
        fits.push(prepared.finalize(&smoother, solution, params.clone())?);
        directions.push(direction);
    }
    let inference = infer(&fits, &directions, data, ci_level)?;
    Ok(PolicyEvaluation { inference, fits, directions, selections })
}

const INFERENCE_SCHEMA: &str = "avgreward/inference/1";

#[derive(Serialize, Deserialize)]
struct PolicyReport {
    label: String,
    eta_hat: f64,
    se: f64,
    ci: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct ContrastReport {
    first: String,
    second: String,
    estimate: f64,
    se: f64,
    ci: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct InferenceDocument {
    schema: String,
    n: usize,
    ci_level: f64,
    policies: Vec<PolicyReport>,
    contrasts: Vec<ContrastReport>,
    sigma_hat: Vec<Vec<f64>>,
}
