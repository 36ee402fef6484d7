//! The coupled average-reward estimator, reduced to closed-form linear
//! algebra.
//!
//! The estimator minimizes, over an intercept-free anchored value-function
//! class `Q` and a scalar `eta`, the weighted mean square of a *projected*
//! temporal-difference residual, plus a kernel ridge penalty:
//!
//! ```text
//!   minimize_{eta, Q}  sum_j w_j g_hat(x_j; eta, Q)^2 + lambda ||Q||^2
//!   where g_hat(.; eta, Q) = argmin_{g in G} sum_j w_j (delta_j - g(x_j))^2 + mu ||g||^2
//!   and   delta_j = r_j - eta + sum_{a'} pi(a'|s'_j) Q(s'_j, a') - Q(s_j, a_j).
//! ```
//!
//! `G` is the span of a constant (unpenalized) plus the RKHS of the base
//! kernel; `Q` lives in the RKHS of the anchored kernel. Writing
//! `Q = sum_k alpha_k k~(., z_k)` over representer centers `z_k`, the TD
//! residual vector is affine in `u = (1, eta, alpha)`:
//! `delta = Z u` with `Z = [r | -1 | B - C]`. The inner fit is a linear
//! smoother, so the outer objective is the quadratic form
//! `u' A u + lambda alpha' K~ alpha` with
//! `A = G_w' W_mu^{-1} Q_g W_mu^{-1} G_w`, where `D_g = [1 | K_xz]` is the
//! `G` design, `W_mu = D_g' W D_g + mu diag(0, K_zz)`, `Q_g = D_g' W D_g`,
//! and `G_w = D_g' W Z`. The minimizer solves one small positive
//! semidefinite system per `(lambda, mu)`.
//!
//! [`PreparedProblem`] caches everything that depends only on the data,
//! policy, and kernel; [`InnerSmoother`] caches the factorization and `A`
//! for one `mu`, so sweeping `lambda` (and fitting the companion direction
//! problem used for inference) costs one small solve each.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    policy_prob_matrix, Dataset, Policy, ReferencePoint, TuningParams, WeightedTransitions,
};
use crate::error::{Error, Result};
use crate::kernel::{self, KernelSpec, PointSet, ShiftedKernelSpec};
use crate::linalg::{eigh, solve_normal_equations, CholeskyFactor};

/// Relative eigenvalue cutoff for the whitened inner-fit basis.
const WHITEN_TOL: f64 = 1e-12;

/// Orthonormalize the RKHS spanned by the centers: columns of the returned
/// matrix map whitened coordinates to center coefficients,
/// `basis = V diag(eigenvalue^{-1/2})` over eigenvalues above
/// `WHITEN_TOL * max`. In the whitened coordinates the squared RKHS norm is
/// the squared Euclidean norm, and every design entry is bounded by one, so
/// the regularized inner system stays well-conditioned even when the Gram
/// matrix is numerically low-rank.
fn whiten_gram(k_zz: &Array2<f64>) -> Result<Array2<f64>> {
    let eig = eigh(k_zz)?;
    let max = eig.values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::SingularSystem(
            "kernel Gram matrix has no positive eigenvalues".into(),
        ));
    }
    let keep: Vec<usize> =
        (0..eig.values.len()).filter(|&i| eig.values[i] > WHITEN_TOL * max).collect();
    let mut basis = Array2::zeros((k_zz.nrows(), keep.len()));
    for (col, &i) in keep.iter().enumerate() {
        let scale = eig.values[i].sqrt().recip();
        for row in 0..k_zz.nrows() {
            basis[[row, col]] = scale * eig.vectors[[i, row]];
        }
    }
    Ok(basis)
}

/// Default cap on the number of representer centers.
pub const DEFAULT_MAX_CENTERS: usize = 1000;
/// Default seed for the center subsample when the cap binds.
pub const DEFAULT_CENTER_SEED: u64 = 0x5851_f42d_4c95_7f2d;

/// Knobs controlling the representer-center construction. Distinct observed
/// state-action pairs become centers; when there are more than
/// `max_centers`, a seeded uniform subsample is kept (an approximation knob,
/// off below the threshold).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_centers: usize,
    pub center_seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_centers: DEFAULT_MAX_CENTERS, center_seed: DEFAULT_CENTER_SEED }
    }
}

/// The affine ingredients of the TD residual against a set of representer
/// centers: `residual(eta, alpha) = rewards - eta + (B - C) alpha` with
/// `B = next_features` (policy-averaged anchored kernel at next states) and
/// `C = current_features` (anchored kernel at current pairs).
#[derive(Debug, Clone)]
pub struct TdComponents {
    pub rewards: Array1<f64>,
    pub next_features: Array2<f64>,
    pub current_features: Array2<f64>,
}

impl TdComponents {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn num_centers(&self) -> usize {
        self.current_features.ncols()
    }

    /// TD residual vector at the given `(eta, alpha)`.
    pub fn residuals(&self, eta: f64, alpha: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut out = self.next_features.dot(&alpha) - self.current_features.dot(&alpha);
        out += &self.rewards;
        out -= eta;
        out
    }
}

/// Policy-averaged anchored-kernel features of next states:
/// `B[j][k] = sum_{a'} pi(a'|s'_j) k~((s'_j, a'), z_k)`.
fn policy_averaged_features(
    next_states: ArrayView2<'_, f64>,
    policy_probs: &Array2<f64>,
    centers: &PointSet<'_>,
    spec: &ShiftedKernelSpec,
) -> Array2<f64> {
    let anchor = &spec.anchor;
    let mut b = kernel::rbf_cross(next_states, centers.states, spec.base.bandwidth);
    let kr = kernel::rbf_to_point(next_states, anchor.state.view(), spec.base.bandwidth);
    let kc = kernel::anchor_column(centers, spec);
    let inv_aa = 1.0
        / kernel::k(anchor.state.view(), anchor.action, anchor.state.view(), anchor.action, &spec.base);
    for ((j, k), v) in b.indexed_iter_mut() {
        *v = policy_probs[[j, centers.actions[k]]] * *v
            - policy_probs[[j, anchor.action]] * kr[j] * kc[k] * inv_aa;
    }
    b
}

pub(crate) fn td_against_centers<'a>(
    states: ArrayView2<'a, f64>,
    actions: &'a [usize],
    rewards: ArrayView1<'_, f64>,
    next_states: ArrayView2<'_, f64>,
    policy: &Policy,
    spec: &ShiftedKernelSpec,
    centers: &PointSet<'_>,
) -> Result<TdComponents> {
    let current = PointSet::new(states, actions);
    let current_features = kernel::cross_gram_shifted(&current, centers, spec);
    let probs = policy_prob_matrix(policy, next_states)?;
    let next_features = policy_averaged_features(next_states, &probs, centers, spec);
    Ok(TdComponents { rewards: rewards.to_owned(), next_features, current_features })
}

/// TD-residual components of a dataset with every observed state-action pair
/// as a representer center (no subsampling).
pub fn build_td_components(
    data: &Dataset,
    policy: &Policy,
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
) -> Result<TdComponents> {
    check_policy_width(policy, data.num_actions(), anchor)?;
    let spec = ShiftedKernelSpec::new(kernel_spec.clone(), anchor.clone())?;
    let tt = data.transition_table();
    let centers = PointSet::new(tt.states.view(), &tt.actions);
    td_against_centers(
        tt.states.view(),
        &tt.actions,
        tt.rewards.view(),
        tt.next_states.view(),
        policy,
        &spec,
        &centers,
    )
}

fn check_policy_width(policy: &Policy, num_actions: usize, anchor: &ReferencePoint) -> Result<()> {
    if policy.num_actions() < num_actions {
        return Err(Error::DimensionMismatch {
            expected: num_actions,
            found: policy.num_actions(),
            context: "policy action count vs. actions present in the data".into(),
        });
    }
    if anchor.action >= policy.num_actions() {
        return Err(Error::IndexOutOfRange {
            index: anchor.action,
            len: policy.num_actions(),
            what: "anchor action".into(),
        });
    }
    Ok(())
}

/// Distinct state-action pairs (bit-level equality, with `-0.0` folded into
/// `0.0`), in first-appearance order, subsampled with a fixed seed when the
/// cap binds.
fn select_centers(
    states: ArrayView2<'_, f64>,
    actions: &[usize],
    options: &FitOptions,
) -> (Array2<f64>, Vec<usize>) {
    use std::collections::HashSet;
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut keep: Vec<usize> = Vec::new();
    for (i, row) in states.rows().into_iter().enumerate() {
        let mut key: Vec<u64> = row.iter().map(|&v| (v + 0.0).to_bits()).collect();
        key.push(actions[i] as u64);
        if seen.insert(key) {
            keep.push(i);
        }
    }
    if keep.len() > options.max_centers {
        let mut rng = ChaCha8Rng::seed_from_u64(options.center_seed);
        let mut chosen =
            rand::seq::index::sample(&mut rng, keep.len(), options.max_centers).into_vec();
        chosen.sort_unstable();
        keep = chosen.into_iter().map(|j| keep[j]).collect();
    }
    let mut center_states = Array2::zeros((keep.len(), states.ncols()));
    let mut center_actions = Vec::with_capacity(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        center_states.row_mut(row).assign(&states.row(i));
        center_actions.push(actions[i]);
    }
    (center_states, center_actions)
}

/// Everything about one (data, policy, kernel, anchor) instance that does
/// not depend on the tuning parameters: representer centers, Gram matrices,
/// the TD design `Z = [r | -1 | B - C]`, the inner-fit design
/// `D_g = [1 | K_xz basis]` (the kernel block orthonormalized so the `mu`
/// penalty becomes a plain ridge), and the weighted cross-products reused by
/// every smoother.
#[derive(Debug, Clone)]
pub struct PreparedProblem {
    shifted: ShiftedKernelSpec,
    center_states: Array2<f64>,
    center_actions: Vec<usize>,
    ktilde_zz: Array2<f64>,
    /// Maps whitened inner-fit coordinates to base-kernel coefficients at
    /// the centers.
    basis: Array2<f64>,
    d_g: Array2<f64>,
    z: Array2<f64>,
    weights: Array1<f64>,
    g_w: Array2<f64>,
    q_gw: Array2<f64>,
    /// `(n, T)` when built from trajectory data (transitions are stored
    /// trajectory-major); `None` for weighted expected transitions.
    grouping: Option<(usize, usize)>,
}

impl PreparedProblem {
    /// Prepare from trajectory data; each transition gets weight `1/(nT)`,
    /// matching the `P_n { (1/T) sum_t ... }` empirical functional.
    pub fn new(
        data: &Dataset,
        policy: &Policy,
        kernel_spec: &KernelSpec,
        anchor: &ReferencePoint,
        options: &FitOptions,
    ) -> Result<Self> {
        check_policy_width(policy, data.num_actions(), anchor)?;
        let tt = data.transition_table();
        let m = tt.len();
        let weights = Array1::from_elem(m, 1.0 / m as f64);
        Self::assemble(
            tt.states.view(),
            &tt.actions,
            tt.rewards.view(),
            tt.next_states.view(),
            weights,
            policy,
            kernel_spec,
            anchor,
            options,
            Some((data.num_trajectories(), data.horizon())),
        )
    }

    /// Prepare from weighted transitions (for example exact expected
    /// transition frequencies of a finite MDP). Weights are normalized to
    /// sum to one.
    pub fn from_weighted(
        transitions: &WeightedTransitions,
        policy: &Policy,
        kernel_spec: &KernelSpec,
        anchor: &ReferencePoint,
        options: &FitOptions,
    ) -> Result<Self> {
        transitions.validate(policy.num_actions())?;
        check_policy_width(policy, policy.num_actions(), anchor)?;
        let total = transitions.weights.sum();
        let weights = transitions.weights.mapv(|w| w / total);
        Self::assemble(
            transitions.states.view(),
            &transitions.actions,
            transitions.rewards.view(),
            transitions.next_states.view(),
            weights,
            policy,
            kernel_spec,
            anchor,
            options,
            None,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble<'a>(
        states: ArrayView2<'a, f64>,
        actions: &'a [usize],
        rewards: ArrayView1<'_, f64>,
        next_states: ArrayView2<'_, f64>,
        weights: Array1<f64>,
        policy: &Policy,
        kernel_spec: &KernelSpec,
        anchor: &ReferencePoint,
        options: &FitOptions,
        grouping: Option<(usize, usize)>,
    ) -> Result<Self> {
        if anchor.state.len() != states.ncols() {
            return Err(Error::DimensionMismatch {
                expected: states.ncols(),
                found: anchor.state.len(),
                context: "anchor state dimension".into(),
            });
        }
        let shifted = ShiftedKernelSpec::new(kernel_spec.clone(), anchor.clone())?;
        let (center_states, center_actions) = select_centers(states, actions, options);
        let centers = PointSet::new(center_states.view(), &center_actions);
        let m = states.nrows();
        let mc = centers.len();

        let k_zz = kernel::gram(&centers, kernel_spec);
        let ktilde_zz = kernel::gram_shifted(&centers, &shifted);
        let basis = whiten_gram(&k_zz)?;
        let td = td_against_centers(states, actions, rewards, next_states, policy, &shifted, &centers)?;

        let k_xz = kernel::cross_gram(&PointSet::new(states, actions), &centers, kernel_spec);
        let mut d_g = Array2::ones((m, 1 + basis.ncols()));
        d_g.slice_mut(s![.., 1..]).assign(&k_xz.dot(&basis));

        let mut z = Array2::zeros((m, 2 + mc));
        z.column_mut(0).assign(&td.rewards);
        z.column_mut(1).fill(-1.0);
        {
            let mut mblock = z.slice_mut(s![.., 2..]);
            mblock.assign(&td.next_features);
            mblock -= &td.current_features;
        }

        let mut wd_g = d_g.clone();
        for (mut row, &w) in wd_g.rows_mut().into_iter().zip(weights.iter()) {
            row *= w;
        }
        let g_w = wd_g.t().dot(&z);
        let mut q_gw = wd_g.t().dot(&d_g);
        symmetrize(&mut q_gw);

        Ok(Self {
            shifted,
            center_states,
            center_actions,
            ktilde_zz,
            basis,
            d_g,
            z,
            weights,
            g_w,
            q_gw,
            grouping,
        })
    }

    pub fn num_transitions(&self) -> usize {
        self.z.nrows()
    }

    pub fn num_centers(&self) -> usize {
        self.center_actions.len()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    /// `(n, T)` for trajectory data, `None` for weighted transitions.
    pub fn grouping(&self) -> Option<(usize, usize)> {
        self.grouping
    }

    pub fn shifted_kernel(&self) -> &ShiftedKernelSpec {
        &self.shifted
    }

    pub fn center_states(&self) -> ArrayView2<'_, f64> {
        self.center_states.view()
    }

    pub fn center_actions(&self) -> &[usize] {
        &self.center_actions
    }

    pub fn shifted_gram(&self) -> &Array2<f64> {
        &self.ktilde_zz
    }

    /// Convert whitened inner-fit coefficients to `[intercept | base-kernel
    /// coefficients at the centers]`, the representation used to evaluate
    /// the fitted function away from the training points.
    pub fn to_center_coeffs(&self, coeffs: ArrayView1<'_, f64>) -> Array1<f64> {
        let beta = self.basis.dot(&coeffs.slice(s![1..]));
        let mut out = Array1::zeros(1 + beta.len());
        out[0] = coeffs[0];
        out.slice_mut(s![1..]).assign(&beta);
        out
    }

    /// TD residual vector at `(eta, alpha)`.
    pub fn residual_values(&self, eta: f64, alpha: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut u = Array1::zeros(2 + self.num_centers());
        u[0] = 1.0;
        u[1] = eta;
        u.slice_mut(s![2..]).assign(&alpha);
        self.z.dot(&u)
    }

    /// Factor the inner-regression system for one `mu` and cache the
    /// quadratic form `A` of the outer objective.
    pub fn inner_smoother(&self, mu: f64) -> Result<InnerSmoother> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::InvalidConfig(format!("mu must be positive, got {mu}")));
        }
        let mc = self.num_centers();
        // In the whitened coordinates the RKHS penalty `mu ||g||^2` is
        // `mu` times the identity on the non-intercept block, so the system
        // has smallest eigenvalue at least `mu` by construction.
        let mut w_mu = self.q_gw.clone();
        for i in 1..w_mu.nrows() {
            w_mu[[i, i]] += mu;
        }
        let chol = CholeskyFactor::new(&w_mu)?;
        let h = chol.solve_mat(self.g_w.view())?;
        let mut a_full = h.t().dot(&self.q_gw.dot(&h));
        symmetrize(&mut a_full);
        debug_assert_eq!(a_full.nrows(), 2 + mc);
        Ok(InnerSmoother { mu, chol, h, a_full })
    }

    /// Inner fit at a given `(eta, alpha)`: whitened coefficients (see
    /// [`PreparedProblem::to_center_coeffs`]) and fitted values at every
    /// transition's current pair.
    pub fn fit_inner(
        &self,
        smoother: &InnerSmoother,
        eta: f64,
        alpha: ArrayView1<'_, f64>,
    ) -> InnerFit {
        let mut u = Array1::zeros(2 + self.num_centers());
        u[0] = 1.0;
        u[1] = eta;
        u.slice_mut(s![2..]).assign(&alpha);
        let coeffs = smoother.h.dot(&u);
        let values = self.d_g.dot(&coeffs);
        InnerFit { coeffs, values }
    }

    /// Inner fit of arbitrary per-transition targets (the smoother applied
    /// to a vector that need not come from the TD design).
    pub fn smooth_targets(
        &self,
        smoother: &InnerSmoother,
        targets: ArrayView1<'_, f64>,
    ) -> Result<InnerFit> {
        let mut weighted = targets.to_owned();
        weighted *= &self.weights;
        let rhs = self.d_g.t().dot(&weighted);
        let coeffs = smoother.chol.solve_vec(rhs.view())?;
        let values = self.d_g.dot(&coeffs);
        Ok(InnerFit { coeffs, values })
    }

    /// Minimize the outer objective for one `lambda`, reusing the smoother's
    /// cached quadratic form.
    pub fn solve_outer(&self, smoother: &InnerSmoother, lambda: f64) -> Result<OuterSolution> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
        }
        let mc = self.num_centers();
        let a = &smoother.a_full;
        let mut sys = a.slice(s![1.., 1..]).to_owned();
        sys.slice_mut(s![1.., 1..]).scaled_add(lambda, &self.ktilde_zz);
        let rhs = a.slice(s![1.., 0]).mapv(|v| -v);
        let theta = solve_normal_equations(&sys, rhs.view())?;
        let eta = theta[0];
        let alpha = theta.slice(s![1..]).to_owned();
        let inner = self.fit_inner(smoother, eta, alpha.view());
        let pbe = self
            .weights
            .iter()
            .zip(inner.values.iter())
            .map(|(&w, &g)| w * g * g)
            .sum::<f64>();
        debug_assert_eq!(alpha.len(), mc);
        let g_coeffs = self.to_center_coeffs(inner.coeffs.view());
        Ok(OuterSolution { eta, alpha, g_coeffs, g_values: inner.values, pbe })
    }

    /// Minimize the companion direction problem (TD design `1 + (B - C) q`,
    /// no free scalar) for one `lambda`, reusing the same smoother. The
    /// quadratic form is a reindexing of the cached `A`: the direction
    /// design's columns are `[-Z_1 | Z_2..]`.
    pub fn solve_direction(
        &self,
        smoother: &InnerSmoother,
        lambda: f64,
    ) -> Result<DirectionSolution> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
        }
        let mc = self.num_centers();
        let a = &smoother.a_full;
        let mut sys = a.slice(s![2.., 2..]).to_owned();
        sys.scaled_add(lambda, &self.ktilde_zz);
        // rhs = -A_dir[1.., 0] and A_dir[1+k][0] = -A[2+k][1].
        let rhs = a.slice(s![2.., 1]).to_owned();
        let q_coeffs = solve_normal_equations(&sys, rhs.view())?;
        // gamma = H_dir [1; q] with H_dir = [-H_1 | H_2..].
        let mut gamma = smoother.h.slice(s![.., 2..]).dot(&q_coeffs);
        gamma -= &smoother.h.column(1);
        let e_values = self.d_g.dot(&gamma);
        debug_assert_eq!(q_coeffs.len(), mc);
        let g_coeffs = self.to_center_coeffs(gamma.view());
        Ok(DirectionSolution { q_coeffs, g_coeffs, e_values })
    }

    /// The matrix mapping per-transition target vectors to inner-fit
    /// coefficients, `W_mu^{-1} D_g' W`.
    pub fn solution_map(&self, smoother: &InnerSmoother) -> Result<Array2<f64>> {
        let mut wd_g = self.d_g.clone();
        for (mut row, &w) in wd_g.rows_mut().into_iter().zip(self.weights.iter()) {
            row *= w;
        }
        smoother.chol.solve_mat(wd_g.t())
    }

    /// Evaluate the outer objective at an arbitrary `(eta, alpha)`:
    /// projected-residual term plus `lambda` penalty.
    pub fn objective(
        &self,
        smoother: &InnerSmoother,
        lambda: f64,
        eta: f64,
        alpha: ArrayView1<'_, f64>,
    ) -> f64 {
        let inner = self.fit_inner(smoother, eta, alpha);
        let fit_term: f64 = self
            .weights
            .iter()
            .zip(inner.values.iter())
            .map(|(&w, &g)| w * g * g)
            .sum();
        fit_term + lambda * alpha.dot(&self.ktilde_zz.dot(&alpha))
    }

    pub(crate) fn training_hash(&self) -> String {
        hash_training_points(
            self.center_states.view(),
            &self.center_actions,
            &self.shifted.anchor,
            self.shifted.base.bandwidth,
        )
    }

    /// Package an outer solution as a [`FitResult`].
    pub fn finalize(
        &self,
        smoother: &InnerSmoother,
        solution: OuterSolution,
        tuning: TuningParams,
    ) -> Result<FitResult> {
        let map = self.solution_map(smoother)?;
        let max_abs = self.z.column(0).iter().fold(0.0f64, |m, &r| m.max(r.abs()));
        let range = {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in self.z.column(0) {
                lo = lo.min(r);
                hi = hi.max(r);
            }
            hi - lo
        };
        let diagnostics = FitDiagnostics {
            pbe: solution.pbe,
            eta_outside_reward_range: solution.eta.abs() > max_abs + 10.0 * range,
            single_transition_trajectories: self.grouping.map_or(false, |(_, t)| t == 1),
        };
        Ok(FitResult {
            eta_hat: solution.eta,
            q_coeffs: solution.alpha,
            g_coeffs: solution.g_coeffs,
            g_coeffs_map: Some(map),
            tuning,
            anchor: self.shifted.anchor.clone(),
            kernel: self.shifted.base.clone(),
            center_states: self.center_states.clone(),
            center_actions: self.center_actions.clone(),
            training_hash: self.training_hash(),
            diagnostics,
        })
    }
}

fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = avg;
            a[[j, i]] = avg;
        }
    }
}

fn hash_training_points(
    states: ArrayView2<'_, f64>,
    actions: &[usize],
    anchor: &ReferencePoint,
    bandwidth: f64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update((states.nrows() as u64).to_le_bytes());
    hasher.update((states.ncols() as u64).to_le_bytes());
    for &v in states.iter() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    for &a in actions {
        hasher.update((a as u64).to_le_bytes());
    }
    for &v in anchor.state.iter() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    hasher.update((anchor.action as u64).to_le_bytes());
    hasher.update(bandwidth.to_bits().to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cached per-`mu` quantities: the Cholesky factor of the inner system, the
/// coefficient map `H = W_mu^{-1} G_w`, and the outer quadratic form `A`.
#[derive(Debug)]
pub struct InnerSmoother {
    pub mu: f64,
    chol: CholeskyFactor,
    h: Array2<f64>,
    a_full: Array2<f64>,
}

/// An inner (projection) fit: coefficients in the whitened basis (convert
/// with [`PreparedProblem::to_center_coeffs`] to evaluate off-sample) and
/// fitted values at every transition.
#[derive(Debug, Clone)]
pub struct InnerFit {
    pub coeffs: Array1<f64>,
    pub values: Array1<f64>,
}

/// Raw outer minimizer for one `(lambda, mu)`. `g_coeffs` is the inner fit
/// at the minimizer as `[intercept | base-kernel coefficients at centers]`.
#[derive(Debug, Clone)]
pub struct OuterSolution {
    pub eta: f64,
    pub alpha: Array1<f64>,
    pub g_coeffs: Array1<f64>,
    pub g_values: Array1<f64>,
    /// Minimized projected-Bellman-error term (no penalty).
    pub pbe: f64,
}

/// Raw direction-problem minimizer for one `(lambda~, mu~)`: coefficients of
/// `q^`, the `e^` expansion as `[intercept | base-kernel coefficients at
/// centers]`, and `e^` evaluated at every transition's current pair.
#[derive(Debug, Clone)]
pub struct DirectionSolution {
    pub q_coeffs: Array1<f64>,
    pub g_coeffs: Array1<f64>,
    pub e_values: Array1<f64>,
}

/// Warnings and diagnostics attached to a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Minimized projected-Bellman-error term.
    pub pbe: f64,
    /// Set when `|eta_hat|` exceeds `max |r| + 10 (max r - min r)`.
    pub eta_outside_reward_range: bool,
    /// Set when the data has a single transition per trajectory.
    pub single_transition_trajectories: bool,
}

/// A fitted average-reward estimate: the scalar `eta_hat` plus the anchored
/// value-function expansion `Q^(x) = sum_k q_coeffs[k] k~(x, z_k)`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub eta_hat: f64,
    /// Representer coefficients of `Q^` over the anchored kernel at the
    /// centers.
    pub q_coeffs: Array1<f64>,
    /// Inner-fit coefficients at the minimizer (intercept first).
    pub g_coeffs: Array1<f64>,
    /// Inner-fit solution operator mapping per-transition target vectors to
    /// coefficients; cached for diagnostics, absent after JSON reload.
    pub g_coeffs_map: Option<Array2<f64>>,
    pub tuning: TuningParams,
    pub anchor: ReferencePoint,
    pub kernel: KernelSpec,
    pub center_states: Array2<f64>,
    pub center_actions: Vec<usize>,
    /// SHA-256 over centers, anchor, and bandwidth; verified on reload.
    pub training_hash: String,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Evaluate `Q^` at one state-action pair. Exactly zero at the anchor.
    pub fn predict_q(&self, state: ArrayView1<'_, f64>, action: usize) -> f64 {
        let spec = ShiftedKernelSpec {
            base: self.kernel.clone(),
            anchor: self.anchor.clone(),
        };
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

    /// Evaluate `Q^` at many pairs with one matrix product. Values at the
    /// anchor are zero only up to matrix-product rounding; use
    /// [`FitResult::predict_q`] where exactness matters.
    pub fn predict_q_batch(&self, points: &PointSet<'_>) -> Array1<f64> {
        let spec = ShiftedKernelSpec {
            base: self.kernel.clone(),
            anchor: self.anchor.clone(),
        };
        let centers = PointSet::new(self.center_states.view(), &self.center_actions);
        kernel::cross_gram_shifted(points, &centers, &spec).dot(&self.q_coeffs)
    }

    /// Serialize to a self-contained JSON document (enough to reload and
    /// predict; the cached solution operator is not persisted).
    pub fn to_json(&self) -> Result<String> {
        let doc = FitDocument {
            schema: FIT_SCHEMA.to_string(),
            eta_hat: self.eta_hat,
            tuning: self.tuning,
            bandwidth: self.kernel.bandwidth,
            anchor_state: self.anchor.state.to_vec(),
            anchor_action: self.anchor.action,
            q_coeffs: self.q_coeffs.to_vec(),
            center_states: self
                .center_states
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            center_actions: self.center_actions.clone(),
            training_hash: self.training_hash.clone(),
            diagnostics: self.diagnostics,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Reload a fit from [`FitResult::to_json`] output, verifying the
    /// training-point hash.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FitDocument = serde_json::from_str(text)?;
        if doc.schema != FIT_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported fit schema {:?}, expected {FIT_SCHEMA:?}",
                doc.schema
            )));
        }
        let mc = doc.center_actions.len();
        if doc.center_states.len() != mc || doc.q_coeffs.len() != mc {
            return Err(Error::InvalidConfig("center/coefficient counts disagree".into()));
        }
        let dim = doc.anchor_state.len();
        let mut center_states = Array2::zeros((mc, dim));
        for (i, row) in doc.center_states.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidConfig("ragged center states".into()));
            }
            center_states.row_mut(i).assign(&Array1::from(row.clone()));
        }
        let anchor = ReferencePoint::new(Array1::from(doc.anchor_state), doc.anchor_action);
        let kernel_spec = KernelSpec::new(doc.bandwidth)?;
        let expected =
            hash_training_points(center_states.view(), &doc.center_actions, &anchor, doc.bandwidth);
        if expected != doc.training_hash {
            return Err(Error::InvalidConfig(
                "training-point hash mismatch; document corrupted".into(),
            ));
        }
        Ok(FitResult {
            eta_hat: doc.eta_hat,
            q_coeffs: Array1::from(doc.q_coeffs),
            g_coeffs: Array1::zeros(0),
            g_coeffs_map: None,
            tuning: doc.tuning,
            anchor,
            kernel: kernel_spec,
            center_states,
            center_actions: doc.center_actions,
            training_hash: doc.training_hash,
            diagnostics: doc.diagnostics,
        })
    }
}

const FIT_SCHEMA: &str = "avgreward/fit/1";

#[derive(Serialize, Deserialize)]
struct FitDocument {
    schema: String,
    eta_hat: f64,
    tuning: TuningParams,
    bandwidth: f64,
    anchor_state: Vec<f64>,
    anchor_action: usize,
    q_coeffs: Vec<f64>,
    center_states: Vec<Vec<f64>>,
    center_actions: Vec<usize>,
    training_hash: String,
    diagnostics: FitDiagnostics,
}

/// Fit the coupled estimator on trajectory data.
pub fn fit_coupled(
    data: &Dataset,
    policy: &Policy,
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
    tuning: &TuningParams,
    options: &FitOptions,
) -> Result<FitResult> {
    tuning.validate()?;
    let prepared = PreparedProblem::new(data, policy, kernel_spec, anchor, options)?;
    let smoother = prepared.inner_smoother(tuning.mu)?;
    let solution = prepared.solve_outer(&smoother, tuning.lambda)?;
    prepared.finalize(&smoother, solution, *tuning)
}

/// Fit the coupled estimator on weighted expected transitions.
pub fn fit_coupled_weighted(
    transitions: &WeightedTransitions,
    policy: &Policy,
    kernel_spec: &KernelSpec,
    anchor: &ReferencePoint,
    tuning: &TuningParams,
    options: &FitOptions,
) -> Result<FitResult> {
    tuning.validate()?;
    let prepared = PreparedProblem::from_weighted(transitions, policy, kernel_spec, anchor, options)?;
    let smoother = prepared.inner_smoother(tuning.mu)?;
    let solution = prepared.solve_outer(&smoother, tuning.lambda)?;
    prepared.finalize(&smoother, solution, *tuning)
}

/// The minimized projected-Bellman-error term of the outer objective,
/// recomputed for a fit on a dataset (normally its training data). Uses the
/// cached solution operator when present; otherwise rebuilds the inner
/// system from the fit's tuning parameters.
pub fn empirical_projected_bellman_error(
    fit: &FitResult,
    data: &Dataset,
    policy: &Policy,
) -> Result<f64> {
    check_policy_width(policy, data.num_actions(), &fit.anchor)?;
    let spec = ShiftedKernelSpec::new(fit.kernel.clone(), fit.anchor.clone())?;
    let tt = data.transition_table();
    let m = tt.len();
    let centers = PointSet::new(fit.center_states.view(), &fit.center_actions);
    let td = td_against_centers(
        tt.states.view(),
        &tt.actions,
        tt.rewards.view(),
        tt.next_states.view(),
        policy,
        &spec,
        &centers,
    )?;
    let resid = td.residuals(fit.eta_hat, fit.q_coeffs.view());

    let values = match &fit.g_coeffs_map {
        Some(map) => {
            if map.ncols() != m {
                return Err(Error::MismatchedFits(format!(
                    "fit was trained on {} transitions, dataset has {m}",
                    map.ncols()
                )));
            }
            // The cached operator produces whitened coefficients; rebuild
            // the (deterministic) whitened design from the stored centers.
            let k_zz = kernel::gram(&centers, &fit.kernel);
            let basis = whiten_gram(&k_zz)?;
            if map.nrows() != 1 + basis.ncols() {
                return Err(Error::MismatchedFits(
                    "cached solution operator does not match the rebuilt center basis".into(),
                ));
            }
            let coeffs = map.dot(&resid);
            let k_xz = kernel::cross_gram(
                &PointSet::new(tt.states.view(), &tt.actions),
                &centers,
                &fit.kernel,
            );
            let mut d_g = Array2::ones((m, 1 + basis.ncols()));
            d_g.slice_mut(s![.., 1..]).assign(&k_xz.dot(&basis));
            d_g.dot(&coeffs)
        }
        None => {
            let options = FitOptions { max_centers: usize::MAX, center_seed: 0 };
            let prepared = PreparedProblem::new(data, policy, &fit.kernel, &fit.anchor, &options)?;
            let smoother = prepared.inner_smoother(fit.tuning.mu)?;
            prepared.smooth_targets(&smoother, resid.view())?.values
        }
    };
    Ok(values.iter().map(|&g| g * g).sum::<f64>() / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Policy;
    use crate::linalg::{eigh, lstsq_min_norm};
    use crate::simulator::{
        average_occupancy, exact_weighted_transitions, finite_mdp_solve, one_hot, random_mdp,
        simulate_finite_mdp, simulate_luckett, tabular_anchor, LuckettModelConfig, MarkovBehavior,
    };
    use ndarray::array;

    fn small_luckett(n: usize, horizon: usize, seed: u64) -> Dataset {
        let config = LuckettModelConfig { seed, ..Default::default() };
        simulate_luckett(&config, n, horizon).unwrap()
    }

    fn luckett_anchor() -> ReferencePoint {
        ReferencePoint::new(array![0.0, 0.0], 0)
    }

    #[test]
    fn residuals_at_zero_equal_rewards() {
        let data = small_luckett(3, 4, 1);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.0).unwrap();
        let td = build_td_components(&data, &policy, &kernel_spec, &luckett_anchor()).unwrap();
        let resid = td.residuals(0.0, Array1::zeros(td.num_centers()).view());
        let tt = data.transition_table();
        assert_eq!(resid, tt.rewards);
    }

    #[test]
    fn deterministic_policy_uses_single_next_action() {
        let data = small_luckett(2, 5, 2);
        let policy = Policy::always(2, 1);
        let kernel_spec = KernelSpec::new(0.8).unwrap();
        let anchor = luckett_anchor();
        let td = build_td_components(&data, &policy, &kernel_spec, &anchor).unwrap();
        let spec = ShiftedKernelSpec::new(kernel_spec, anchor).unwrap();
        let tt = data.transition_table();
        for j in 0..tt.len() {
            for k in 0..td.num_centers() {
                let direct = kernel::k_shifted(
                    tt.next_states.row(j),
                    1,
                    tt.states.row(k),
                    tt.actions[k],
                    &spec,
                );
                assert!(
                    (td.next_features[[j, k]] - direct).abs() < 1e-12,
                    "B[{j}][{k}] = {} vs {direct}",
                    td.next_features[[j, k]]
                );
            }
        }
    }

    #[test]
    fn residuals_match_pointwise_kernel_oracle() {
        let data = small_luckett(2, 5, 3);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.3).unwrap();
        let anchor = luckett_anchor();
        let td = build_td_components(&data, &policy, &kernel_spec, &anchor).unwrap();
        let spec = ShiftedKernelSpec::new(kernel_spec, anchor).unwrap();
        let tt = data.transition_table();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alpha = Array1::from_iter((0..td.num_centers()).map(|_| {
            use rand::Rng;
            rng.gen::<f64>() - 0.5
        }));
        let eta = 0.3;
        let resid = td.residuals(eta, alpha.view());

        let q = |state: ArrayView1<'_, f64>, action: usize| -> f64 {
            (0..td.num_centers())
                .map(|k| {
                    alpha[k]
                        * kernel::k_shifted(state, action, tt.states.row(k), tt.actions[k], &spec)
                })
                .sum()
        };
        for j in 0..tt.len() {
            let next = 0.5 * (q(tt.next_states.row(j), 0) + q(tt.next_states.row(j), 1));
            let direct = tt.rewards[j] - eta + next - q(tt.states.row(j), tt.actions[j]);
            assert!(
                (resid[j] - direct).abs() < 1e-12,
                "residual {j}: {} vs {direct}",
                resid[j]
            );
        }
    }

    #[test]
    fn inner_fit_absorbs_constants_into_intercept() {
        let data = small_luckett(3, 6, 4);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.0).unwrap();
        let prepared = PreparedProblem::new(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &FitOptions::default(),
        )
        .unwrap();
        let targets = Array1::from_elem(prepared.num_transitions(), 2.7);
        for mu in [1e-4, 1.0] {
            let smoother = prepared.inner_smoother(mu).unwrap();
            let fit = prepared.smooth_targets(&smoother, targets.view()).unwrap();
            for &v in fit.values.iter() {
                assert!((v - 2.7).abs() < 1e-8, "mu={mu}: fitted {v}");
            }
        }
    }

    #[test]
    fn inner_fit_shrinks_to_mean_under_huge_penalty() {
        let data = small_luckett(3, 6, 5);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.0).unwrap();
        let prepared = PreparedProblem::new(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &FitOptions::default(),
        )
        .unwrap();
        let tt = data.transition_table();
        let smoother = prepared.inner_smoother(1e12).unwrap();
        let fit = prepared.smooth_targets(&smoother, tt.rewards.view()).unwrap();
        let mean = tt.rewards.sum() / tt.rewards.len() as f64;
        for &v in fit.values.iter() {
            assert!((v - mean).abs() < 1e-6, "fitted {v} vs mean {mean}");
        }
    }

    /// Independent inner-fit oracle in the raw representer parameterization:
    /// weighted design rows `[1 | K_xz]` stacked over penalty rows
    /// `sqrt(mu) L` with `L'L = diag(0, K_zz)`, solved by SVD least squares.
    /// Returns coefficients over `[intercept | centers]` and fitted values
    /// at the data points.
    fn stacked_inner_oracle(
        k_xz: &Array2<f64>,
        k_zz: &Array2<f64>,
        weights: ArrayView1<'_, f64>,
        targets: ArrayView1<'_, f64>,
        mu: f64,
    ) -> (Array1<f64>, Array1<f64>) {
        let (m, mc) = k_xz.dim();
        let eig = eigh(k_zz).unwrap();
        let mut stacked = Array2::zeros((m + mc, 1 + mc));
        for j in 0..m {
            let sw = weights[j].sqrt();
            stacked[[j, 0]] = sw;
            for c in 0..mc {
                stacked[[j, 1 + c]] = sw * k_xz[[j, c]];
            }
        }
        let smu = mu.sqrt();
        for i in 0..mc {
            let lam = eig.values[i].max(0.0).sqrt();
            for c in 0..mc {
                stacked[[m + i, 1 + c]] = smu * lam * eig.vectors[[i, c]];
            }
        }
        let mut rhs = Array1::zeros(m + mc);
        for j in 0..m {
            rhs[j] = weights[j].sqrt() * targets[j];
        }
        let gamma = lstsq_min_norm(&stacked, rhs.view()).unwrap();
        let mut values = k_xz.dot(&gamma.slice(s![1..]));
        values += gamma[0];
        (gamma, values)
    }

    #[test]
    fn inner_fit_matches_stacked_least_squares() {
        let data = small_luckett(2, 4, 6);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(0.9).unwrap();
        let prepared = PreparedProblem::new(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(prepared.num_transitions(), 8);

        let tt = data.transition_table();
        let centers = PointSet::new(prepared.center_states.view(), &prepared.center_actions);
        let k_zz = kernel::gram(&centers, &kernel_spec);
        let k_xz = kernel::cross_gram(
            &PointSet::new(tt.states.view(), &tt.actions),
            &centers,
            &kernel_spec,
        );
        let probe_states = array![[0.3, -0.4], [1.2, 0.8], [-0.7, 0.1]];
        let probe_actions = [0usize, 1, 0];
        let probe_k = kernel::cross_gram(
            &PointSet::new(probe_states.view(), &probe_actions),
            &centers,
            &kernel_spec,
        );

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let targets = Array1::from_iter((0..8).map(|_| {
            use rand::Rng;
            rng.gen::<f64>() * 4.0 - 2.0
        }));
        for mu in [1e-3, 0.1] {
            let smoother = prepared.inner_smoother(mu).unwrap();
            let fit = prepared.smooth_targets(&smoother, targets.view()).unwrap();
            let (gamma, values) =
                stacked_inner_oracle(&k_xz, &k_zz, prepared.weights.view(), targets.view(), mu);
            for (a, b) in fit.values.iter().zip(values.iter()) {
                assert!((a - b).abs() < 1e-6, "mu={mu}: fitted {a} vs {b}");
            }
            // The fitted functions also agree away from the sample.
            let cc = prepared.to_center_coeffs(fit.coeffs.view());
            let mine = probe_k.dot(&cc.slice(s![1..])) + cc[0];
            let oracle = probe_k.dot(&gamma.slice(s![1..])) + gamma[0];
            for (a, b) in mine.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-6, "mu={mu}: prediction {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_rewards_recover_constant_eta() {
        let mdp = crate::simulator::FiniteMdp {
            num_states: 2,
            num_actions: 2,
            transitions: vec![
                vec![vec![0.5, 0.5], vec![0.3, 0.7]],
                vec![vec![0.8, 0.2], vec![0.5, 0.5]],
            ],
            mean_rewards: vec![vec![2.5, 2.5], vec![2.5, 2.5]],
            reward_noise_sd: 0.0,
        };
        let behavior = MarkovBehavior(Array2::from_elem((2, 2), 0.5));
        let init = array![0.5, 0.5];
        let data = simulate_finite_mdp(&mdp, &behavior, init.view(), 5, 10, 0).unwrap();
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.0).unwrap();
        let anchor = tabular_anchor(2, 0, 0);
        let tuning = TuningParams::new(1e-4, 1e-4);
        let fit =
            fit_coupled(&data, &policy, &kernel_spec, &anchor, &tuning, &FitOptions::default())
                .unwrap();
        assert!((fit.eta_hat - 2.5).abs() < 1e-6, "eta {}", fit.eta_hat);
        let norm = fit.q_coeffs.dot(&fit.q_coeffs).sqrt();
        assert!(norm < 1e-3, "alpha norm {norm}");
        // Q^ vanishes everywhere, not just at the anchor.
        for s in 0..2 {
            for a in 0..2 {
                let v = fit.predict_q(one_hot(2, s).view(), a);
                assert!(v.abs() < 1e-6, "Q({s},{a}) = {v}");
            }
        }
        assert!(!fit.diagnostics.eta_outside_reward_range);
        let pbe = empirical_projected_bellman_error(&fit, &data, &policy).unwrap();
        assert!(pbe < 1e-10, "pbe {pbe}");
    }

    #[test]
    fn two_state_mdp_recovers_eta_and_value_difference() {
        let mdp = crate::simulator::FiniteMdp {
            num_states: 2,
            num_actions: 2,
            transitions: vec![
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
            mean_rewards: vec![vec![0.0, 1.0], vec![0.0, 3.0]],
            reward_noise_sd: 0.0,
        };
        let policy = Policy::always(2, 1);
        // On-policy data: behavior also always takes action 1.
        let behavior = MarkovBehavior(array![[0.0, 1.0], [0.0, 1.0]]);
        let init = array![0.5, 0.5];
        let data = simulate_finite_mdp(&mdp, &behavior, init.view(), 4, 500, 9).unwrap();
        let kernel_spec = KernelSpec::new(0.5).unwrap();
        let anchor = tabular_anchor(2, 0, 1);
        let tuning = TuningParams::new(1e-6, 1e-6);
        let fit =
            fit_coupled(&data, &policy, &kernel_spec, &anchor, &tuning, &FitOptions::default())
                .unwrap();
        assert!((fit.eta_hat - 2.0).abs() < 0.1, "eta {}", fit.eta_hat);
        let q11 = fit.predict_q(one_hot(2, 1).view(), 1);
        let q01 = fit.predict_q(one_hot(2, 0).view(), 1);
        let oracle = finite_mdp_solve(&mdp, &policy, 0, 1).unwrap();
        let oracle_diff = oracle.q_tilde[[1, 1]] - oracle.q_tilde[[0, 1]];
        assert!(
            ((q11 - q01) - oracle_diff).abs() < 0.1,
            "diff {} vs {oracle_diff}",
            q11 - q01
        );
    }

    #[test]
    fn anchor_prediction_is_exactly_zero() {
        let data = small_luckett(4, 6, 12);
        let policy = Policy::always(2, 1);
        let kernel_spec = KernelSpec::new(1.1).unwrap();
        let anchor = ReferencePoint::new(array![0.25, -1.5], 1);
        let tuning = TuningParams::new(1e-3, 1e-3);
        let fit =
            fit_coupled(&data, &policy, &kernel_spec, &anchor, &tuning, &FitOptions::default())
                .unwrap();
        assert_eq!(fit.predict_q(array![0.25, -1.5].view(), 1), 0.0);
        // At a training point the expansion matches the Gram product.
        let tt = data.transition_table();
        let spec = ShiftedKernelSpec::new(kernel_spec, anchor).unwrap();
        let j = 5;
        let direct: f64 = (0..fit.q_coeffs.len())
            .map(|k| {
                fit.q_coeffs[k]
                    * kernel::k_shifted(
                        tt.states.row(j),
                        tt.actions[j],
                        fit.center_states.row(k),
                        fit.center_actions[k],
                        &spec,
                    )
            })
            .sum();
        let predicted = fit.predict_q(tt.states.row(j), tt.actions[j]);
        assert!((predicted - direct).abs() < 1e-14);
    }

    #[test]
    fn pbe_increases_under_eta_perturbation() {
        let data = small_luckett(5, 8, 13);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.0).unwrap();
        let tuning = TuningParams::new(1e-3, 1e-3);
        let fit = fit_coupled(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &tuning,
            &FitOptions::default(),
        )
        .unwrap();
        let base = empirical_projected_bellman_error(&fit, &data, &policy).unwrap();
        let mut perturbed = fit.clone();
        perturbed.eta_hat += 1.0;
        let worse = empirical_projected_bellman_error(&perturbed, &data, &policy).unwrap();
        assert!(worse > base + 0.1, "pbe {base} -> {worse}");
        assert!((base - fit.diagnostics.pbe).abs() < 1e-10);
    }

    #[test]
    fn pbe_reload_path_matches_cached_map() {
        let data = small_luckett(4, 5, 21);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.0).unwrap();
        let tuning = TuningParams::new(1e-3, 1e-3);
        let fit = fit_coupled(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &tuning,
            &FitOptions::default(),
        )
        .unwrap();
        let cached = empirical_projected_bellman_error(&fit, &data, &policy).unwrap();
        let reloaded = FitResult::from_json(&fit.to_json().unwrap()).unwrap();
        assert!(reloaded.g_coeffs_map.is_none());
        let rebuilt = empirical_projected_bellman_error(&reloaded, &data, &policy).unwrap();
        assert!(
            (cached - rebuilt).abs() < 1e-12 * (1.0 + cached),
            "{cached} vs {rebuilt}"
        );
    }

    #[test]
    fn eta_error_decreases_with_sample_size() {
        // Tabular MDP with noisy rewards: the true Q lives in the deduped
        // center basis, so the estimation error of eta^ is a pure noise
        // term that shrinks as data grows.
        let mut mdp = random_mdp(3, 2, 55);
        mdp.reward_noise_sd = 0.5;
        let behavior = MarkovBehavior(Array2::from_elem((3, 2), 0.5));
        let init = Array1::from_elem(3, 1.0 / 3.0);
        let policy = Policy::uniform(2);
        let eta_star = finite_mdp_solve(&mdp, &policy, 0, 0).unwrap().eta;
        let kernel_spec = KernelSpec::new(0.1).unwrap();
        let anchor = tabular_anchor(3, 0, 0);
        let tuning = TuningParams::new(1e-4, 1e-4);
        let mut medians = Vec::new();
        for &n in &[10usize, 40, 160] {
            let mut errors = Vec::new();
            for seed in 0..50 {
                let data =
                    simulate_finite_mdp(&mdp, &behavior, init.view(), n, 5, 1000 + seed).unwrap();
                let fit = fit_coupled(
                    &data,
                    &policy,
                    &kernel_spec,
                    &anchor,
                    &tuning,
                    &FitOptions::default(),
                )
                .unwrap();
                errors.push((fit.eta_hat - eta_star).abs());
            }
            errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(0.5 * (errors[24] + errors[25]));
        }
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "medians {medians:?}"
        );
    }

    #[test]
    fn exact_identification_on_tabular_mdps() {
        for seed in 0..20 {
            let ns = 3 + (seed as usize % 3);
            let mdp = random_mdp(ns, 2, 100 + seed);
            let policy = Policy::uniform(2);
            let behavior = Array2::from_elem((ns, 2), 0.5);
            let init = Array1::from_elem(ns, 1.0 / ns as f64);
            let occupancy = average_occupancy(&mdp, behavior.view(), init.view(), 7);
            let wt = exact_weighted_transitions(&mdp, occupancy.view());
            // Narrow bandwidth on one-hot states: the kernel is numerically
            // an indicator of state-action equality.
            let kernel_spec = KernelSpec::new(0.1).unwrap();
            let anchor = tabular_anchor(ns, 0, 0);
            let tuning = TuningParams::new(1e-8, 1e-8);
            let fit = fit_coupled_weighted(
                &wt,
                &policy,
                &kernel_spec,
                &anchor,
                &tuning,
                &FitOptions::default(),
            )
            .unwrap();
            let oracle = finite_mdp_solve(&mdp, &policy, 0, 0).unwrap();
            assert!(
                (fit.eta_hat - oracle.eta).abs() < 1e-6,
                "seed {seed}: eta {} vs {}",
                fit.eta_hat,
                oracle.eta
            );
            for s in 0..ns {
                for a in 0..2 {
                    let q = fit.predict_q(one_hot(ns, s).view(), a);
                    assert!(
                        (q - oracle.q_tilde[[s, a]]).abs() < 1e-5,
                        "seed {seed}: Q({s},{a}) {q} vs {}",
                        oracle.q_tilde[[s, a]]
                    );
                }
            }
        }
    }

    #[test]
    fn objective_at_fit_does_not_exceed_projected_oracle() {
        let mdp = random_mdp(4, 2, 77);
        let policy = Policy::uniform(2);
        let behavior = Array2::from_elem((4, 2), 0.5);
        let init = Array1::from_elem(4, 0.25);
        let occupancy = average_occupancy(&mdp, behavior.view(), init.view(), 5);
        let wt = exact_weighted_transitions(&mdp, occupancy.view());
        let kernel_spec = KernelSpec::new(0.1).unwrap();
        let anchor = tabular_anchor(4, 0, 0);
        let options = FitOptions::default();
        let prepared =
            PreparedProblem::from_weighted(&wt, &policy, &kernel_spec, &anchor, &options).unwrap();
        let (lambda, mu) = (1e-5, 1e-5);
        let smoother = prepared.inner_smoother(mu).unwrap();
        let solution = prepared.solve_outer(&smoother, lambda).unwrap();
        let at_fit = prepared.objective(&smoother, lambda, solution.eta, solution.alpha.view());

        // Interpolate the oracle value function on the centers.
        let oracle = finite_mdp_solve(&mdp, &policy, 0, 0).unwrap();
        let targets = Array1::from_iter(prepared.center_actions.iter().enumerate().map(|(k, &a)| {
            let s = prepared
                .center_states
                .row(k)
                .iter()
                .position(|&v| v == 1.0)
                .unwrap();
            oracle.q_tilde[[s, a]]
        }));
        let alpha_star =
            crate::linalg::pinv_solve_sym(&prepared.ktilde_zz, targets.view(), 1e-12).unwrap();
        let at_oracle = prepared.objective(&smoother, lambda, oracle.eta, alpha_star.view());
        assert!(
            at_fit <= at_oracle + 1e-12,
            "objective {at_fit} exceeds oracle value {at_oracle}"
        );
    }

    /// Generic minimizer of the nested objective, independent of the
    /// closed-form algebra: the objective is evaluated from pointwise kernel
    /// sums with the inner fit done by stacked least squares; the outer
    /// minimizer is one Newton step from zero with finite-difference
    /// gradient and Hessian (exact for a quadratic up to roundoff), solved
    /// by SVD with minimum-norm tie-breaking.
    fn generic_nested_minimizer<'a>(
        prepared: &PreparedProblem,
        states: ArrayView2<'a, f64>,
        actions: &'a [usize],
        lambda: f64,
        mu: f64,
    ) -> (f64, Array1<f64>) {
        let mc = prepared.num_centers();
        let dim = 1 + mc;
        let centers = PointSet::new(prepared.center_states.view(), &prepared.center_actions);
        let k_zz = kernel::gram(&centers, &prepared.shifted.base);
        let k_xz = kernel::cross_gram(
            &PointSet::new(states, actions),
            &centers,
            &prepared.shifted.base,
        );
        let objective = |v: &Array1<f64>| -> f64 {
            let eta = v[0];
            let alpha = v.slice(s![1..]);
            let resid = prepared.residual_values(eta, alpha);
            let (_, fitted) = stacked_inner_oracle(
                &k_xz,
                &k_zz,
                prepared.weights.view(),
                resid.view(),
                mu,
            );
            let fit_term: f64 = prepared
                .weights
                .iter()
                .zip(fitted.iter())
                .map(|(&w, &g)| w * g * g)
                .sum();
            fit_term + lambda * alpha.dot(&prepared.ktilde_zz.dot(&alpha))
        };

        // The objective is exactly quadratic (the inner solve is linear in
        // the residual), so central differences are exact for any step; a
        // large step minimizes roundoff amplification.
        let h = 0.5;
        let origin = Array1::zeros(dim);
        let mut grad = Array1::zeros(dim);
        for i in 0..dim {
            let mut up = origin.clone();
            let mut dn = origin.clone();
            up[i] += h;
            dn[i] -= h;
            grad[i] = (objective(&up) - objective(&dn)) / (2.0 * h);
        }
        let f0 = objective(&origin);
        let mut hess = Array2::zeros((dim, dim));
        for i in 0..dim {
            let mut up = origin.clone();
            let mut dn = origin.clone();
            up[i] += h;
            dn[i] -= h;
            hess[[i, i]] = (objective(&up) + objective(&dn) - 2.0 * f0) / (h * h);
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let mut pp = origin.clone();
                let mut pm = origin.clone();
                let mut mp = origin.clone();
                let mut mm = origin.clone();
                pp[i] += h;
                pp[j] += h;
                pm[i] += h;
                pm[j] -= h;
                mp[i] -= h;
                mp[j] += h;
                mm[i] -= h;
                mm[j] -= h;
                let v =
                    (objective(&pp) - objective(&pm) - objective(&mp) + objective(&mm)) / (4.0 * h * h);
                hess[[i, j]] = v;
                hess[[j, i]] = v;
            }
        }
        let step = lstsq_min_norm(&hess, grad.mapv(|g| -g).view()).unwrap();
        (step[0], step.slice(s![1..]).to_owned())
    }

    #[test]
    fn closed_form_matches_generic_minimizer() {
        let mut checked = 0;
        for seed in 0..6 {
            let ns = 3;
            let mdp = random_mdp(ns, 2, 300 + seed);
            let behavior = MarkovBehavior(Array2::from_elem((ns, 2), 0.5));
            let init = Array1::from_elem(ns, 1.0 / ns as f64);
            let data = simulate_finite_mdp(&mdp, &behavior, init.view(), 3, 10, seed).unwrap();
            let policy = Policy::uniform(2);
            let kernel_spec = KernelSpec::new(0.7).unwrap();
            let anchor = tabular_anchor(ns, 0, 0);
            let options = FitOptions::default();
            let prepared =
                PreparedProblem::new(&data, &policy, &kernel_spec, &anchor, &options).unwrap();
            let (lambda, mu) = (1e-3, 1e-3);
            let smoother = prepared.inner_smoother(mu).unwrap();
            let solution = prepared.solve_outer(&smoother, lambda).unwrap();
            let tt = data.transition_table();
            let (eta_g, alpha_g) =
                generic_nested_minimizer(&prepared, tt.states.view(), &tt.actions, lambda, mu);
            assert!(
                (solution.eta - eta_g).abs() < 1e-5,
                "seed {seed}: eta {} vs generic {eta_g}",
                solution.eta
            );
            // Compare fitted Q at all training points.
            let points = PointSet::new(tt.states.view(), &tt.actions);
            let centers =
                PointSet::new(prepared.center_states.view(), &prepared.center_actions);
            let phi = kernel::cross_gram_shifted(&points, &centers, &prepared.shifted);
            let q_closed = phi.dot(&solution.alpha);
            let q_generic = phi.dot(&alpha_g);
            for (a, b) in q_closed.iter().zip(q_generic.iter()) {
                assert!((a - b).abs() < 1e-4, "seed {seed}: Q {a} vs {b}");
            }
            checked += 1;
        }
        // Two small continuous-state instances.
        for seed in 0..2 {
            let data = small_luckett(3, 8, 400 + seed);
            let policy = Policy::always(2, 1);
            let kernel_spec = KernelSpec::new(1.0).unwrap();
            let anchor = luckett_anchor();
            let options = FitOptions::default();
            let prepared =
                PreparedProblem::new(&data, &policy, &kernel_spec, &anchor, &options).unwrap();
            let (lambda, mu) = (1e-2, 1e-2);
            let smoother = prepared.inner_smoother(mu).unwrap();
            let solution = prepared.solve_outer(&smoother, lambda).unwrap();
            let tt = data.transition_table();
            let (eta_g, alpha_g) =
                generic_nested_minimizer(&prepared, tt.states.view(), &tt.actions, lambda, mu);
            assert!(
                (solution.eta - eta_g).abs() < 1e-5,
                "seed {seed}: eta {} vs generic {eta_g}",
                solution.eta
            );
            let points = PointSet::new(tt.states.view(), &tt.actions);
            let centers =
                PointSet::new(prepared.center_states.view(), &prepared.center_actions);
            let phi = kernel::cross_gram_shifted(&points, &centers, &prepared.shifted);
            let q_closed = phi.dot(&solution.alpha);
            let q_generic = phi.dot(&alpha_g);
            for (a, b) in q_closed.iter().zip(q_generic.iter()) {
                assert!((a - b).abs() < 1e-4, "seed {seed}: Q {a} vs {b}");
            }
            checked += 1;
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn recovers_behavioral_model_average_reward() {
        // 40 trajectories of length 50 under the uniform behavior policy;
        // the always-treat average reward is known from the frozen
        // Monte-Carlo oracle. The error bound is three reported median
        // absolute deviations for this sample size.
        let config = LuckettModelConfig { seed: 7, ..Default::default() };
        let data = simulate_luckett(&config, 40, 50).unwrap();
        let tt = data.transition_table();
        let bandwidth = kernel::median_heuristic(tt.states.view()).unwrap();
        let kernel_spec = KernelSpec::new(bandwidth).unwrap();
        let n_total = tt.len() as f64;
        let tuning = TuningParams::new(1e-3 / n_total, 1e-3 / n_total);
        let policy = Policy::always(2, 1);
        let fit = fit_coupled(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &tuning,
            &FitOptions::default(),
        )
        .unwrap();
        let oracle = crate::simulator::LUCKETT_ETA_ALWAYS_TREAT;
        let err = (fit.eta_hat - oracle).abs();
        assert!(err < 0.13, "eta {} vs oracle {oracle}, err {err}", fit.eta_hat);
        assert!(!fit.diagnostics.eta_outside_reward_range);
    }

    #[test]
    fn center_subsampling_caps_problem_size() {
        let data = small_luckett(10, 12, 14);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(1.0).unwrap();
        let options = FitOptions { max_centers: 30, center_seed: 1 };
        let prepared = PreparedProblem::new(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &options,
        )
        .unwrap();
        assert_eq!(prepared.num_centers(), 30);
        assert_eq!(prepared.num_transitions(), 120);
        // Deterministic given the seed.
        let again = PreparedProblem::new(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &options,
        )
        .unwrap();
        assert_eq!(prepared.center_states, again.center_states);
        // Duplicate state-action pairs collapse to one center.
        let tabular = simulate_finite_mdp(
            &random_mdp(3, 2, 5),
            &MarkovBehavior(Array2::from_elem((3, 2), 0.5)),
            Array1::from_elem(3, 1.0 / 3.0).view(),
            20,
            10,
            2,
        )
        .unwrap();
        let anchor = tabular_anchor(3, 0, 0);
        let prepared =
            PreparedProblem::new(&tabular, &policy, &kernel_spec, &anchor, &FitOptions::default())
                .unwrap();
        assert!(prepared.num_centers() <= 6);
    }

    #[test]
    fn fit_json_round_trip_preserves_predictions() {
        let data = small_luckett(3, 6, 15);
        let policy = Policy::uniform(2);
        let kernel_spec = KernelSpec::new(0.9).unwrap();
        let tuning = TuningParams::new(1e-3, 2e-3);
        let fit = fit_coupled(
            &data,
            &policy,
            &kernel_spec,
            &luckett_anchor(),
            &tuning,
            &FitOptions::default(),
        )
        .unwrap();
        let text = fit.to_json().unwrap();
        let reloaded = FitResult::from_json(&text).unwrap();
        assert_eq!(reloaded.eta_hat.to_bits(), fit.eta_hat.to_bits());
        assert_eq!(reloaded.tuning, fit.tuning);
        let probe = array![0.4, -1.2];
        for a in 0..2 {
            let x = fit.predict_q(probe.view(), a);
            let y = reloaded.predict_q(probe.view(), a);
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Tampering with a center is caught by the hash.
        let tampered = text.replace("\"training_hash\"", "\"training_hash_x\"");
        assert!(FitResult::from_json(&tampered).is_err());
    }
}
