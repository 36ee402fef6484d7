//! State-action kernels: an RBF kernel over states combined with an exact
//! match on actions, the zero-anchored (shifted) variant whose functions all
//! vanish at a reference pair, Gram-matrix assembly, and the median-heuristic
//! bandwidth rule.
//!
//! Conventions fixed here: the RBF exponent is `-||s - s'||^2 / (2 h^2)`, and
//! the median heuristic uses plain (not squared) Euclidean distances.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ReferencePoint;
use crate::error::{Error, Result};

/// Fixed seed for the median-heuristic subsample so the bandwidth is a pure
/// function of the input states.
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x9e3779b97f4a7c15;

/// Cap on the number of states entering the O(m^2) pairwise-distance median.
const MEDIAN_SUBSAMPLE_CAP: usize = 2000;

/// How matching of action indices enters the state-action kernel. Only exact
/// matching is implemented: points with different actions are orthogonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionRule {
    Delta,
}

/// RBF-over-states kernel with an action-delta factor:
/// `k((s,a),(s',a')) = 1{a = a'} exp(-||s - s'||^2 / (2 h^2))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    pub bandwidth: f64,
    pub action_rule: ActionRule,
}

impl KernelSpec {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if bandwidth.is_finite() && bandwidth > 0.0 {
            Ok(Self { bandwidth, action_rule: ActionRule::Delta })
        } else {
            Err(Error::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")))
        }
    }
}

/// Kernel for the anchored value-function class: every member vanishes at the
/// reference pair. Realized as
/// `k~(x, y) = k(x, y) - k(x, x*) k(x*, y) / k(x*, x*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedKernelSpec {
    pub base: KernelSpec,
    pub anchor: ReferencePoint,
}

impl ShiftedKernelSpec {
    pub fn new(base: KernelSpec, anchor: ReferencePoint) -> Result<Self> {
        let k_aa = k(anchor.state.view(), anchor.action, anchor.state.view(), anchor.action, &base);
        if k_aa > 0.0 {
            Ok(Self { base, anchor })
        } else {
            Err(Error::AnchorDegenerate)
        }
    }

    fn anchor_self_kernel(&self) -> f64 {
        k(
            self.anchor.state.view(),
            self.anchor.action,
            self.anchor.state.view(),
            self.anchor.action,
            &self.base,
        )
    }
}

/// A borrowed collection of state-action pairs: row `i` of `states` paired
/// with `actions[i]`.
#[derive(Debug, Clone, Copy)]
pub struct PointSet<'a> {
    pub states: ArrayView2<'a, f64>,
    pub actions: &'a [usize],
}

impl<'a> PointSet<'a> {
    pub fn new(states: ArrayView2<'a, f64>, actions: &'a [usize]) -> Self {
        assert_eq!(states.nrows(), actions.len(), "one action per state row");
        Self { states, actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn sq_dist(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// Evaluate the state-action kernel at a single pair of points.
pub fn k(
    x_state: ArrayView1<'_, f64>,
    x_action: usize,
    y_state: ArrayView1<'_, f64>,
    y_action: usize,
    spec: &KernelSpec,
) -> f64 {
    if x_action != y_action {
        return 0.0;
    }
    (-sq_dist(x_state, y_state) / (2.0 * spec.bandwidth * spec.bandwidth)).exp()
}

/// Evaluate the anchored kernel at a single pair of points. Exactly zero when
/// either argument equals the anchor.
pub fn k_shifted(
    x_state: ArrayView1<'_, f64>,
    x_action: usize,
    y_state: ArrayView1<'_, f64>,
    y_action: usize,
    spec: &ShiftedKernelSpec,
) -> f64 {
    let anchor = &spec.anchor;
    let k_xy = k(x_state, x_action, y_state, y_action, &spec.base);
    let k_xa = k(x_state, x_action, anchor.state.view(), anchor.action, &spec.base);
    let k_ay = k(anchor.state.view(), anchor.action, y_state, y_action, &spec.base);
    k_xy - k_xa * k_ay / spec.anchor_self_kernel()
}

/// RBF cross-Gram over states only (no action factor): entry `(i, j)` is
/// `exp(-||x_i - y_j||^2 / (2 h^2))`. Assembled with one matrix product.
pub fn rbf_cross(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    bandwidth: f64,
) -> Array2<f64> {
    let xs = x.map_axis(Axis(1), |row| row.dot(&row));
    let ys = y.map_axis(Axis(1), |row| row.dot(&row));
    let mut g = x.dot(&y.t());
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    for ((i, j), v) in g.indexed_iter_mut() {
        let d2 = (xs[i] + ys[j] - 2.0 * *v).max(0.0);
        *v = (-d2 * inv).exp();
    }
    g
}

/// RBF kernel values between every row of `states` and one fixed point,
/// computed with exact per-pair distances (no matrix-product rounding).
pub fn rbf_to_point(
    states: ArrayView2<'_, f64>,
    point: ArrayView1<'_, f64>,
    bandwidth: f64,
) -> Array1<f64> {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    Array1::from_iter(states.rows().into_iter().map(|row| (-sq_dist(row, point) * inv).exp()))
}

/// Rectangular kernel matrix: entry `(i, j)` is `k(rows[i], cols[j])`.
pub fn cross_gram(rows: &PointSet<'_>, cols: &PointSet<'_>, spec: &KernelSpec) -> Array2<f64> {
    let mut g = rbf_cross(rows.states, cols.states, spec.bandwidth);
    for ((i, j), v) in g.indexed_iter_mut() {
        if rows.actions[i] != cols.actions[j] {
            *v = 0.0;
        }
    }
    g
}

/// Symmetric kernel matrix of one point set (symmetrized to cancel
/// matrix-product rounding).
pub fn gram(points: &PointSet<'_>, spec: &KernelSpec) -> Array2<f64> {
    let mut g = cross_gram(points, points, spec);
    for i in 0..g.nrows() {
        for j in (i + 1)..g.ncols() {
            let avg = 0.5 * (g[[i, j]] + g[[j, i]]);
            g[[i, j]] = avg;
            g[[j, i]] = avg;
        }
        g[[i, i]] = 1.0;
    }
    g
}

/// Kernel values between every point in a set and the anchor.
pub fn anchor_column(points: &PointSet<'_>, spec: &ShiftedKernelSpec) -> Array1<f64> {
    let mut col = rbf_to_point(points.states, spec.anchor.state.view(), spec.base.bandwidth);
    for (i, &a) in points.actions.iter().enumerate() {
        if a != spec.anchor.action {
            col[i] = 0.0;
        }
    }
    col
}

/// Rectangular matrix of the anchored kernel.
pub fn cross_gram_shifted(
    rows: &PointSet<'_>,
    cols: &PointSet<'_>,
    spec: &ShiftedKernelSpec,
) -> Array2<f64> {
    let mut g = cross_gram(rows, cols, &spec.base);
    let kr = anchor_column(rows, spec);
    let kc = anchor_column(cols, spec);
    let inv_aa = 1.0 / spec.anchor_self_kernel();
    for ((i, j), v) in g.indexed_iter_mut() {
        *v -= kr[i] * kc[j] * inv_aa;
    }
    g
}

/// Symmetric anchored-kernel matrix of one point set.
pub fn gram_shifted(points: &PointSet<'_>, spec: &ShiftedKernelSpec) -> Array2<f64> {
    let mut g = gram(points, &spec.base);
    let kc = anchor_column(points, spec);
    let inv_aa = 1.0 / spec.anchor_self_kernel();
    for ((i, j), v) in g.indexed_iter_mut() {
        *v -= kc[i] * kc[j] * inv_aa;
    }
    g
}

/// Median pairwise Euclidean distance among the given states, the standard
/// bandwidth heuristic.
///
/// With more than 2000 states a fixed-seed uniform subsample bounds the
/// O(m^2) enumeration. An even pair count uses the average of the two middle
/// distances. If the median is zero (mostly duplicated states) the smallest
/// nonzero distance is returned instead.
pub fn median_heuristic(states: ArrayView2<'_, f64>) -> Result<f64> {
    let m = states.nrows();
    assert!(m >= 2, "median heuristic needs at least two states");
    let mut dists = if m > MEDIAN_SUBSAMPLE_CAP {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SUBSAMPLE_SEED);
        let mut idx = rand::seq::index::sample(&mut rng, m, MEDIAN_SUBSAMPLE_CAP).into_vec();
        idx.sort_unstable();
        pairwise_distances(states.select(Axis(0), &idx).view())
    } else {
        pairwise_distances(states)
    };
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median > 0.0 {
        return Ok(median);
    }
    match dists.iter().find(|&&d| d > 0.0) {
        Some(&d) => Ok(d),
        None => Err(Error::DegenerateStates(m)),
    }
}

fn pairwise_distances(states: ArrayView2<'_, f64>) -> Vec<f64> {
    let m = states.nrows();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            dists.push(sq_dist(states.row(i), states.row(j)).sqrt());
        }
    }
    dists
}
