//! Data generators and exact oracles: the two-dimensional behavioral dynamics
//! model of Luckett et al. (2020), a finite-MDP specification with exact
//! average reward / relative value function / stationary-distribution solves,
//! and seeded trajectory sampling under arbitrary (possibly
//! history-dependent) behavior policies.
//!
//! All sampling uses per-trajectory counter-based substreams: trajectory `i`
//! draws from `ChaCha8Rng::seed_from_u64(seed)` with stream `i`, so datasets
//! are reproducible regardless of scheduling or trajectory count.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    policy_prob_matrix, Dataset, Policy, ReferencePoint, Trajectory, WeightedTransitions,
};
use crate::error::{Error, Result};
use crate::linalg::{lstsq_min_norm, solve_general};

/// Configuration of the Luckett et al. (2020) generative model: a
/// two-dimensional state with bilinear dynamics, Gaussian innovations, and a
/// Bernoulli behavior policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LuckettModelConfig {
    /// Standard deviation of the per-coordinate Gaussian innovations.
    pub noise_sd: f64,
    /// Probability the behavior policy picks action 1 at each decision time.
    pub behavior_prob: f64,
    /// Base seed; trajectory `i` uses substream `i`.
    pub seed: u64,
}

impl Default for LuckettModelConfig {
    fn default() -> Self {
        Self { noise_sd: 0.5, behavior_prob: 0.5, seed: 0 }
    }
}

impl LuckettModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sd must be nonnegative, got {}",
                self.noise_sd
            )));
        }
        if !(self.behavior_prob > 0.0 && self.behavior_prob < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "behavior_prob must lie in (0,1), got {}",
                self.behavior_prob
            )));
        }
        Ok(())
    }
}

/// Noise-free part of the next state: given state `(s1, s2)` and action `a`,
/// `s1' = (3/4)(2a-1) s1 + (1/4) s1 s2` and
/// `s2' = (3/4)(1-2a) s2 + (1/4) s1 s2`.
pub fn luckett_mean_next(s1: f64, s2: f64, action: usize) -> (f64, f64) {
    let sign = 2.0 * action as f64 - 1.0;
    let cross = 0.25 * s1 * s2;
    (0.75 * sign * s1 + cross, 0.75 * (-sign) * s2 + cross)
}

/// Reward earned on arriving at `(s1', s2')` after taking `action`:
/// `r = s1' + s2'/2 + (2a-1)/4`.
pub fn luckett_reward(next_s1: f64, next_s2: f64, action: usize) -> f64 {
    next_s1 + 0.5 * next_s2 + 0.25 * (2.0 * action as f64 - 1.0)
}

/// Sample an action index from a probability vector using a single uniform
/// draw (fixed draw count keeps substreams aligned across policies).
fn sample_action<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

fn luckett_trajectory(
    config: &LuckettModelConfig,
    index: usize,
    horizon: usize,
    mut choose: impl FnMut(&mut ChaCha8Rng, (f64, f64)) -> usize,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let mut states = Array2::zeros((horizon + 1, 2));
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Array1::zeros(horizon);
    let mut s1: f64 = StandardNormal.sample(&mut rng);
    let mut s2: f64 = StandardNormal.sample(&mut rng);
    states[[0, 0]] = s1;
    states[[0, 1]] = s2;
    for t in 0..horizon {
        let a = choose(&mut rng, (s1, s2));
        let (m1, m2) = luckett_mean_next(s1, s2, a);
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        s1 = m1 + config.noise_sd * e1;
        s2 = m2 + config.noise_sd * e2;
        states[[t + 1, 0]] = s1;
        states[[t + 1, 1]] = s2;
        actions.push(a);
        rewards[t] = luckett_reward(s1, s2, a);
    }
    Trajectory { id: index.to_string(), states, actions, rewards }
}

/// Simulate `n` trajectories of length `horizon` under the Bernoulli behavior
/// policy, with initial states i.i.d. standard normal per coordinate.
pub fn simulate_luckett(config: &LuckettModelConfig, n: usize, horizon: usize) -> Result<Dataset> {
    config.validate()?;
    assert!(n >= 1 && horizon >= 1, "need n >= 1 and horizon >= 1");
    let p1 = config.behavior_prob;
    let trajs = (0..n)
        .map(|i| {
            luckett_trajectory(config, i, horizon, |rng, _s| {
                let u: f64 = rng.gen();
                usize::from(u < p1)
            })
        })
        .collect();
    Dataset::new(trajs, 2)
}

/// Simulate with actions drawn from `policy` instead of the Bernoulli
/// behavior rule (on-policy data).
pub fn simulate_luckett_on_policy(
    config: &LuckettModelConfig,
    policy: &Policy,
    n: usize,
    horizon: usize,
) -> Result<Dataset> {
    assert!(n >= 1 && horizon >= 1, "need n >= 1 and horizon >= 1");
    assert_eq!(policy.num_actions(), 2, "this model has two actions");
    let trajs = (0..n)
        .map(|i| {
            luckett_trajectory(config, i, horizon, |rng, (s1, s2)| {
                let probs = policy.probs(ndarray::aview1(&[s1, s2]));
                sample_action(rng, &probs)
            })
        })
        .collect();
    Dataset::new(trajs, 2)
}

/// A Monte-Carlo point estimate with its standard error and an account of
/// rollouts excluded because the state diverged.
#[derive(Debug, Clone, Copy)]
pub struct MonteCarloEstimate {
    pub value: f64,
    pub mc_se: f64,
    pub rollouts_used: usize,
    pub rollouts_escaped: usize,
}

/// State norm beyond which a rollout is declared to have escaped into the
/// divergent region of the dynamics (the bilinear term then grows
/// super-exponentially and the state overflows within a few steps).
const ESCAPE_THRESHOLD: f64 = 1e8;

/// Monte-Carlo long-run average reward under on-policy rollouts, each with a
/// 1000-step burn-in. The dynamics have a divergent region that is reached
/// with per-step probability on the order of 1e-8; rollouts that enter it
/// are excluded, so the estimate is the long-run average conditional on
/// remaining in the stable region — the regime every short-horizon
/// trajectory dataset effectively samples from.
pub fn oracle_eta_luckett(
    policy: &Policy,
    noise_sd: f64,
    horizon: usize,
    num_rollouts: usize,
    seed: u64,
) -> MonteCarloEstimate {
    assert!(horizon >= 1 && num_rollouts >= 1);
    let burn_in = 1000;
    let mut per_rollout = Vec::with_capacity(num_rollouts);
    let mut escaped = 0;
    for i in 0..num_rollouts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut s1: f64 = StandardNormal.sample(&mut rng);
        let mut s2: f64 = StandardNormal.sample(&mut rng);
        let mut total = 0.0;
        let mut ok = true;
        for step in 0..burn_in + horizon {
            let probs = policy.probs(ndarray::aview1(&[s1, s2]));
            let a = sample_action(&mut rng, &probs);
            let (m1, m2) = luckett_mean_next(s1, s2, a);
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            s1 = m1 + noise_sd * e1;
            s2 = m2 + noise_sd * e2;
            if s1.abs() + s2.abs() > ESCAPE_THRESHOLD {
                ok = false;
                break;
            }
            if step >= burn_in {
                total += luckett_reward(s1, s2, a);
            }
        }
        if ok {
            per_rollout.push(total / horizon as f64);
        } else {
            escaped += 1;
        }
    }
    assert!(
        escaped * 10 < num_rollouts,
        "{escaped} of {num_rollouts} rollouts diverged; shorten the horizon"
    );
    let value = crate::stats::mean(&per_rollout);
    let mc_se = crate::stats::sample_sd(&per_rollout) / (per_rollout.len() as f64).sqrt();
    MonteCarloEstimate { value, mc_se, rollouts_used: per_rollout.len(), rollouts_escaped: escaped }
}

/// Long-run average reward of the always-treat policy (action 1) in the
/// default-noise model, established once by a 250-rollout, 200000-step
/// on-policy Monte-Carlo run of [`oracle_eta_luckett`] (seed 20214; 3 of
/// 250 rollouts escaped and were excluded) and frozen as a regression
/// constant. See `examples/luckett_oracle.rs` for the exact protocol.
pub const LUCKETT_ETA_ALWAYS_TREAT: f64 = 0.27692474253903582;
/// Monte-Carlo standard error of [`LUCKETT_ETA_ALWAYS_TREAT`].
pub const LUCKETT_ETA_ALWAYS_TREAT_MC_SE: f64 = 2.606534e-4;
/// Long-run average reward of the never-treat policy (action 0), same
/// protocol as [`LUCKETT_ETA_ALWAYS_TREAT`] (6 of 250 rollouts escaped).
pub const LUCKETT_ETA_NEVER_TREAT: f64 = -0.23363293229680365;
/// Monte-Carlo standard error of [`LUCKETT_ETA_NEVER_TREAT`].
pub const LUCKETT_ETA_NEVER_TREAT_MC_SE: f64 = 1.405888e-4;

/// A finite Markov decision process given by explicit transition
/// probabilities and mean rewards. Observed rewards are the mean plus
/// Gaussian noise with `reward_noise_sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `P[s][a][s']`: probability of moving to `s'` from `s` under `a`.
    #[serde(rename = "P")]
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `r[s][a]`: mean reward of taking `a` in `s`.
    #[serde(rename = "r")]
    pub mean_rewards: Vec<Vec<f64>>,
    pub reward_noise_sd: f64,
}

impl FiniteMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidConfig("need at least one state and action".into()));
        }
        if self.transitions.len() != ns || self.mean_rewards.len() != ns {
            return Err(Error::InvalidConfig("transition/reward tables must have one row per state".into()));
        }
        for s in 0..ns {
            if self.transitions[s].len() != na || self.mean_rewards[s].len() != na {
                return Err(Error::InvalidConfig(format!(
                    "state {s}: tables must have one entry per action"
                )));
            }
            for a in 0..na {
                let row = &self.transitions[s][a];
                if row.len() != ns {
                    return Err(Error::InvalidConfig(format!(
                        "P[{s}][{a}] must have {ns} entries"
                    )));
                }
                let mut sum = 0.0;
                for &p in row {
                    if !(p.is_finite() && p >= 0.0) {
                        return Err(Error::InvalidConfig(format!(
                            "P[{s}][{a}] contains invalid probability {p}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidConfig(format!(
                        "P[{s}][{a}] sums to {sum}, expected 1"
                    )));
                }
                if !self.mean_rewards[s][a].is_finite() {
                    return Err(Error::InvalidConfig(format!("r[{s}][{a}] is not finite")));
                }
            }
        }
        if !(self.reward_noise_sd.is_finite() && self.reward_noise_sd >= 0.0) {
            return Err(Error::InvalidConfig("reward_noise_sd must be nonnegative".into()));
        }
        Ok(())
    }

    /// Load from a JSON document
    /// `{num_states, num_actions, P, r, reward_noise_sd}`.
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mdp: FiniteMdp = serde_json::from_str(&text)?;
        mdp.validate()?;
        Ok(mdp)
    }
}

/// One-hot encoding of a finite state as a real vector.
pub fn one_hot(num_states: usize, state: usize) -> Array1<f64> {
    let mut v = Array1::zeros(num_states);
    v[state] = 1.0;
    v
}

/// Reference point for tabular problems: the one-hot encoding of
/// `(state, action)`.
pub fn tabular_anchor(num_states: usize, state: usize, action: usize) -> ReferencePoint {
    ReferencePoint::new(one_hot(num_states, state), action)
}

/// A tabular policy reading probabilities from an `S x A` table; states are
/// matched by the argmax coordinate of their (one-hot) encoding.
pub fn tabular_policy(label: impl Into<String>, table: Array2<f64>) -> Policy {
    let num_actions = table.ncols();
    Policy::custom(label, num_actions, move |state, out| {
        let idx = state
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite state"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        out.copy_from_slice(table.row(idx).to_slice().expect("contiguous row"));
    })
}

/// Evaluate a [`Policy`] at every one-hot state of a finite MDP, returning
/// the `S x A` probability table.
pub fn policy_table(mdp: &FiniteMdp, policy: &Policy) -> Result<Array2<f64>> {
    let eye = Array2::eye(mdp.num_states);
    policy_prob_matrix(policy, eye.view())
}

/// Exact solution of a finite MDP under a target policy.
#[derive(Debug, Clone)]
pub struct MdpSolution {
    /// Long-run average reward.
    pub eta: f64,
    /// Relative value function anchored to zero at the reference pair
    /// (`S x A`).
    pub q_tilde: Array2<f64>,
    /// Stationary state distribution of the induced chain.
    pub d_state: Array1<f64>,
    /// Stationary state-action distribution `d(s) pi(a|s)`.
    pub d_state_action: Array2<f64>,
}

fn state_chain(mdp: &FiniteMdp, pi: ArrayView2<'_, f64>) -> Array2<f64> {
    let ns = mdp.num_states;
    let mut p = Array2::zeros((ns, ns));
    for s in 0..ns {
        for a in 0..mdp.num_actions {
            let w = pi[[s, a]];
            if w > 0.0 {
                for sp in 0..ns {
                    p[[s, sp]] += w * mdp.transitions[s][a][sp];
                }
            }
        }
    }
    p
}

fn strongly_connected(p: ArrayView2<'_, f64>) -> bool {
    let n = p.nrows();
    let reach = |from: usize, transpose: bool| -> usize {
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        seen[from] = true;
        let mut count = 1;
        while let Some(s) = stack.pop() {
            for t in 0..n {
                let edge = if transpose { p[[t, s]] } else { p[[s, t]] };
                if edge > 0.0 && !seen[t] {
                    seen[t] = true;
                    count += 1;
                    stack.push(t);
                }
            }
        }
        count
    };
    reach(0, false) == n && reach(0, true) == n
}

/// Flatten `(s, a)` to a single index, action-fastest.
fn sa_index(a_count: usize, s: usize, a: usize) -> usize {
    s * a_count + a
}

/// The state-action transition matrix of the chain
/// `(s, a) -> s' ~ P(.|s,a) -> a' ~ pi(.|s')`.
fn state_action_chain(mdp: &FiniteMdp, pi: ArrayView2<'_, f64>) -> Array2<f64> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut p = Array2::zeros((ns * na, ns * na));
    for s in 0..ns {
        for a in 0..na {
            let row = sa_index(na, s, a);
            for sp in 0..ns {
                let trans = mdp.transitions[s][a][sp];
                if trans > 0.0 {
                    for ap in 0..na {
                        p[[row, sa_index(na, sp, ap)]] = trans * pi[[sp, ap]];
                    }
                }
            }
        }
    }
    p
}

/// Solve the anchored linear system `(I - P + 1 e_anchor^T) x = rhs` and
/// shift so the anchor coordinate is exactly zero. For row-stochastic `P`
/// with a single recurrent class this system is nonsingular, and the shift
/// leaves `(I - P) x` unchanged.
fn anchored_solve(p: &Array2<f64>, rhs: ArrayView1<'_, f64>, anchor: usize) -> Result<Array1<f64>> {
    let n = p.nrows();
    let mut m = -p.clone();
    for i in 0..n {
        m[[i, i]] += 1.0;
        m[[i, anchor]] += 1.0;
    }
    let mut x = solve_general(&m, rhs)?;
    let shift = x[anchor];
    x.mapv_inplace(|v| v - shift);
    x[anchor] = 0.0;
    Ok(x)
}

/// Exact average reward, anchored relative value function, and stationary
/// distributions of a finite MDP under a target policy. Requires the induced
/// state chain to be irreducible.
pub fn finite_mdp_solve(
    mdp: &FiniteMdp,
    policy: &Policy,
    anchor_state: usize,
    anchor_action: usize,
) -> Result<MdpSolution> {
    mdp.validate()?;
    assert!(anchor_state < mdp.num_states && anchor_action < mdp.num_actions);
    let pi = policy_table(mdp, policy)?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let p_pi = state_chain(mdp, pi.view());
    if !strongly_connected(p_pi.view()) {
        return Err(Error::NotIrreducible(
            "positive-probability transition graph is not strongly connected".into(),
        ));
    }

    // Stationary distribution: least-squares solve of d'(I - P) = 0, sum d = 1.
    let mut a = Array2::zeros((ns + 1, ns));
    for i in 0..ns {
        for j in 0..ns {
            a[[i, j]] = f64::from(i == j) - p_pi[[j, i]];
        }
    }
    for j in 0..ns {
        a[[ns, j]] = 1.0;
    }
    let mut b = Array1::zeros(ns + 1);
    b[ns] = 1.0;
    let mut d = lstsq_min_norm(&a, b.view())?;
    if d.iter().any(|&v| v < -1e-8) {
        return Err(Error::NoStationaryDistribution(format!(
            "solved distribution has negative mass {:?}",
            d.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    d.mapv_inplace(|v| v.max(0.0));
    let total = d.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::NoStationaryDistribution("distribution sums to zero".into()));
    }
    d.mapv_inplace(|v| v / total);
    let resid = d.dot(&p_pi) - &d;
    if resid.iter().any(|v| v.abs() > 1e-8) {
        return Err(Error::NoStationaryDistribution(format!(
            "stationarity residual {:.3e}",
            resid.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()))
        )));
    }

    let mut d_sa = Array2::zeros((ns, na));
    let mut eta = 0.0;
    for s in 0..ns {
        for a in 0..na {
            d_sa[[s, a]] = d[s] * pi[[s, a]];
            eta += d_sa[[s, a]] * mdp.mean_rewards[s][a];
        }
    }

    // Anchored Bellman solve over state-action pairs.
    let p_sa = state_action_chain(mdp, pi.view());
    let mut rhs = Array1::zeros(ns * na);
    for s in 0..ns {
        for a in 0..na {
            rhs[sa_index(na, s, a)] = mdp.mean_rewards[s][a] - eta;
        }
    }
    let q_flat = anchored_solve(&p_sa, rhs.view(), sa_index(na, anchor_state, anchor_action))?;
    let q_tilde =
        Array2::from_shape_fn((ns, na), |(s, a)| q_flat[sa_index(na, s, a)]);

    Ok(MdpSolution { eta, q_tilde, d_state: d, d_state_action: d_sa })
}

/// Average state-action occupancy over `horizon` steps when states start at
/// `init` and actions follow the (Markov) `behavior` table:
/// `(1/T) sum_t Pr(S_t = s) behavior(a | s)`.
pub fn average_occupancy(
    mdp: &FiniteMdp,
    behavior: ArrayView2<'_, f64>,
    init: ArrayView1<'_, f64>,
    horizon: usize,
) -> Array2<f64> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    assert!(horizon >= 1);
    assert_eq!(init.len(), ns);
    let p_b = state_chain(mdp, behavior);
    let mut p = init.to_owned();
    let mut acc = Array2::zeros((ns, na));
    for _ in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                acc[[s, a]] += p[s] * behavior[[s, a]];
            }
        }
        p = p_b.t().dot(&p);
    }
    acc.mapv_inplace(|v| v / horizon as f64);
    acc
}

/// Exact direction-function quantities for a tabular problem: the average
/// behavior occupancy, the normalized density-ratio direction `e`, and the
/// anchored solution `q` of its Bellman-like equation.
#[derive(Debug, Clone)]
pub struct TabularDirection {
    pub d_bar: Array2<f64>,
    pub e: Array2<f64>,
    pub q: Array2<f64>,
}

/// Compute the exact direction function
/// `e(s,a) = (d_pi(s,a) / d_bar(s,a)) / sum_{s,a} (d_pi/d_bar) d_pi` and the
/// anchored solution of `q = (1 - e) + P Pi q`.
pub fn finite_mdp_direction(
    mdp: &FiniteMdp,
    policy: &Policy,
    behavior: ArrayView2<'_, f64>,
    init: ArrayView1<'_, f64>,
    horizon: usize,
    anchor_state: usize,
    anchor_action: usize,
) -> Result<TabularDirection> {
    let sol = finite_mdp_solve(mdp, policy, anchor_state, anchor_action)?;
    let d_bar = average_occupancy(mdp, behavior, init, horizon);
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut ratio = Array2::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            let dpi = sol.d_state_action[[s, a]];
            if dpi > 0.0 {
                if d_bar[[s, a]] <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "behavior never visits state {s} action {a}, but the target policy does"
                    )));
                }
                ratio[[s, a]] = dpi / d_bar[[s, a]];
            }
        }
    }
    let norm: f64 = (&ratio * &sol.d_state_action).sum();
    let e = ratio.mapv(|v| v / norm);

    let pi = policy_table(mdp, policy)?;
    let p_sa = state_action_chain(mdp, pi.view());
    let mut rhs = Array1::zeros(ns * na);
    for s in 0..ns {
        for a in 0..na {
            rhs[sa_index(na, s, a)] = 1.0 - e[[s, a]];
        }
    }
    let q_flat = anchored_solve(&p_sa, rhs.view(), sa_index(na, anchor_state, anchor_action))?;
    let q = Array2::from_shape_fn((ns, na), |(s, a)| q_flat[sa_index(na, s, a)]);
    Ok(TabularDirection { d_bar, e, q })
}

/// A stochastic behavior rule that may depend on the entire history of
/// (state, action) pairs, not just the current state.
pub trait BehaviorRule: Sync {
    /// Write the action distribution given the history so far and the
    /// current state.
    fn probs(&self, history: &[(usize, usize)], state: usize, out: &mut [f64]);
}

/// Markov behavior: a fixed `S x A` probability table.
#[derive(Debug, Clone)]
pub struct MarkovBehavior(pub Array2<f64>);

impl BehaviorRule for MarkovBehavior {
    fn probs(&self, _history: &[(usize, usize)], state: usize, out: &mut [f64]) {
        out.copy_from_slice(self.0.row(state).to_slice().expect("contiguous row"));
    }
}

/// Simulate a finite MDP with one-hot state encodings, so the kernel
/// machinery applies unchanged. Initial states are drawn from `init`.
pub fn simulate_finite_mdp(
    mdp: &FiniteMdp,
    behavior: &dyn BehaviorRule,
    init: ArrayView1<'_, f64>,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    mdp.validate()?;
    assert!(n >= 1 && horizon >= 1);
    assert_eq!(init.len(), mdp.num_states);
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let init_slice: Vec<f64> = init.iter().cloned().collect();
    let mut trajs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut states = Array2::zeros((horizon + 1, ns));
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Array1::zeros(horizon);
        let mut history: Vec<(usize, usize)> = Vec::with_capacity(horizon);
        let mut s = sample_action(&mut rng, &init_slice);
        states[[0, s]] = 1.0;
        let mut probs = vec![0.0; na];
        for t in 0..horizon {
            behavior.probs(&history, s, &mut probs);
            let a = sample_action(&mut rng, &probs);
            let noise: f64 = StandardNormal.sample(&mut rng);
            rewards[t] = mdp.mean_rewards[s][a] + mdp.reward_noise_sd * noise;
            let sp = sample_action(&mut rng, &mdp.transitions[s][a]);
            history.push((s, a));
            actions.push(a);
            s = sp;
            states[[t + 1, s]] = 1.0;
        }
        trajs.push(Trajectory { id: i.to_string(), states, actions, rewards });
    }
    Dataset::new(trajs, na)
}

/// Expected transitions of a finite MDP weighted by a supplied state-action
/// occupancy: one row per `(s, a, s')` with positive mass, with
/// `weight = occupancy(s, a) P(s'|s, a)` and the mean reward as the reward.
/// Feeding these to the estimator reproduces population quantities exactly.
pub fn exact_weighted_transitions(
    mdp: &FiniteMdp,
    occupancy: ArrayView2<'_, f64>,
) -> WeightedTransitions {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    assert_eq!(occupancy.dim(), (ns, na));
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut next_states = Vec::new();
    let mut weights = Vec::new();
    for s in 0..ns {
        for a in 0..na {
            let u = occupancy[[s, a]];
            if u <= 0.0 {
                continue;
            }
            for sp in 0..ns {
                let p = mdp.transitions[s][a][sp];
                if p <= 0.0 {
                    continue;
                }
                states.push(one_hot(ns, s));
                actions.push(a);
                rewards.push(mdp.mean_rewards[s][a]);
                next_states.push(one_hot(ns, sp));
                weights.push(u * p);
            }
        }
    }
    let m = actions.len();
    let mut s_mat = Array2::zeros((m, ns));
    let mut sp_mat = Array2::zeros((m, ns));
    for (j, (s, sp)) in states.iter().zip(&next_states).enumerate() {
        s_mat.row_mut(j).assign(s);
        sp_mat.row_mut(j).assign(sp);
    }
    WeightedTransitions {
        states: s_mat,
        actions,
        rewards: Array1::from(rewards),
        next_states: sp_mat,
        weights: Array1::from(weights),
    }
}

/// A uniformly random irreducible MDP for stress tests: transition rows are
/// Dirichlet-like draws bumped away from zero, rewards uniform on [-1, 1].
pub fn random_mdp(num_states: usize, num_actions: usize, seed: u64) -> FiniteMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = vec![vec![vec![0.0; num_states]; num_actions]; num_states];
    let mut mean_rewards = vec![vec![0.0; num_actions]; num_states];
    for s in 0..num_states {
        for a in 0..num_actions {
            let mut row: Vec<f64> = (0..num_states).map(|_| rng.gen::<f64>() + 0.05).collect();
            let total: f64 = row.iter().sum();
            for v in &mut row {
                *v /= total;
            }
            transitions[s][a] = row;
            mean_rewards[s][a] = rng.gen::<f64>() * 2.0 - 1.0;
        }
    }
    FiniteMdp { num_states, num_actions, transitions, mean_rewards, reward_noise_sd: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn luckett_dynamics_match_hand_calculations() {
        // S=(0,0), A=1: next mean (0,0), reward 0.25.
        let (m1, m2) = luckett_mean_next(0.0, 0.0, 1);
        assert_eq!((m1, m2), (0.0, 0.0));
        assert_eq!(luckett_reward(m1, m2, 1), 0.25);
        // S=(1,1), A=0: next mean (-0.5, 1.0), reward -0.25.
        let (m1, m2) = luckett_mean_next(1.0, 1.0, 0);
        assert_eq!((m1, m2), (-0.5, 1.0));
        assert_eq!(luckett_reward(m1, m2, 0), -0.25);
    }

    #[test]
    fn luckett_zero_noise_origin_is_fixed_under_treatment() {
        let (m1, m2) = luckett_mean_next(0.0, 0.0, 1);
        assert_eq!((m1, m2), (0.0, 0.0));
        // Per-step reward at the fixed point is 0.25, hence the average too.
        assert_eq!(luckett_reward(0.0, 0.0, 1), 0.25);
    }

    #[test]
    fn simulate_luckett_is_deterministic_and_consistent() {
        let config = LuckettModelConfig { seed: 42, ..Default::default() };
        let a = simulate_luckett(&config, 3, 5).unwrap();
        let b = simulate_luckett(&config, 3, 5).unwrap();
        assert_eq!(a, b);
        // Rewards must satisfy the reward equation given states and actions.
        for traj in a.trajectories() {
            for t in 0..traj.len() {
                let r = luckett_reward(traj.states[[t + 1, 0]], traj.states[[t + 1, 1]], traj.actions[t]);
                assert!((r - traj.rewards[t]).abs() < 1e-12);
            }
        }
        // Prefix property: fewer trajectories are a prefix of more.
        let c = simulate_luckett(&config, 2, 5).unwrap();
        assert_eq!(a.trajectories()[..2], c.trajectories()[..]);
    }

    #[test]
    fn simulate_luckett_innovation_moments() {
        let config = LuckettModelConfig { seed: 7, ..Default::default() };
        let data = simulate_luckett(&config, 2000, 5).unwrap();
        // Residuals of next states around their conditional means are
        // N(0, 0.5^2) per coordinate.
        let mut resid = Vec::new();
        for traj in data.trajectories() {
            for t in 0..traj.len() {
                let (m1, m2) =
                    luckett_mean_next(traj.states[[t, 0]], traj.states[[t, 1]], traj.actions[t]);
                resid.push(traj.states[[t + 1, 0]] - m1);
                resid.push(traj.states[[t + 1, 1]] - m2);
            }
        }
        let mean = crate::stats::mean(&resid);
        let sd = crate::stats::sample_sd(&resid);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((sd - 0.5).abs() < 0.01, "sd {sd}");
        // Behavior policy treats about half the time.
        let treated: usize = data
            .trajectories()
            .iter()
            .flat_map(|t| t.actions.iter())
            .filter(|&&a| a == 1)
            .count();
        let frac = treated as f64 / data.num_transitions() as f64;
        assert!((frac - 0.5).abs() < 0.02, "treated fraction {frac}");
    }

    #[test]
    fn oracle_eta_variance_scales_with_rollouts() {
        let policy = Policy::always(2, 1);
        let small = oracle_eta_luckett(&policy, 0.5, 2000, 8, 99);
        let large = oracle_eta_luckett(&policy, 0.5, 2000, 32, 99);
        assert!(small.value.is_finite() && large.value.is_finite());
        assert_eq!(small.rollouts_escaped + large.rollouts_escaped, 0);
        // Quadrupling rollouts should roughly halve the standard error.
        assert!(large.mc_se < small.mc_se, "se did not shrink: {} -> {}", small.mc_se, large.mc_se);
    }

    fn two_state_uniform_mdp() -> FiniteMdp {
        // Both actions move to either state with probability 1/2;
        // r(0,1)=1, r(1,1)=3, r(s,0)=0.
        FiniteMdp {
            num_states: 2,
            num_actions: 2,
            transitions: vec![
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
            mean_rewards: vec![vec![0.0, 1.0], vec![0.0, 3.0]],
            reward_noise_sd: 0.0,
        }
    }

    #[test]
    fn two_state_mdp_solved_by_hand() {
        let mdp = two_state_uniform_mdp();
        let policy = Policy::always(2, 1);
        let sol = finite_mdp_solve(&mdp, &policy, 0, 1).unwrap();
        assert!((sol.eta - 2.0).abs() < 1e-12);
        assert!((sol.d_state[0] - 0.5).abs() < 1e-12);
        // Q(1,1) - Q(0,1) = r(1,1) - r(0,1) = 2 (identical next-state laws).
        let diff = sol.q_tilde[[1, 1]] - sol.q_tilde[[0, 1]];
        assert!((diff - 2.0).abs() < 1e-10);
        assert_eq!(sol.q_tilde[[0, 1]], 0.0);
    }

    #[test]
    fn bellman_residual_vanishes_on_random_mdps() {
        for seed in 0..5 {
            let mdp = random_mdp(4, 3, seed);
            let policy = Policy::uniform(3);
            let sol = finite_mdp_solve(&mdp, &policy, 0, 0).unwrap();
            let pi = policy_table(&mdp, &policy).unwrap();
            for s in 0..4 {
                for a in 0..3 {
                    let mut next = 0.0;
                    for sp in 0..4 {
                        for ap in 0..3 {
                            next += mdp.transitions[s][a][sp] * pi[[sp, ap]] * sol.q_tilde[[sp, ap]];
                        }
                    }
                    let resid = mdp.mean_rewards[s][a] - sol.eta + next - sol.q_tilde[[s, a]];
                    assert!(resid.abs() < 1e-10, "seed {seed} resid {resid}");
                }
            }
        }
    }

    #[test]
    fn eta_is_anchor_invariant_and_q_shifts_by_constant() {
        let mdp = random_mdp(5, 2, 31);
        let policy = Policy::uniform(2);
        let a = finite_mdp_solve(&mdp, &policy, 0, 0).unwrap();
        let b = finite_mdp_solve(&mdp, &policy, 3, 1).unwrap();
        assert!((a.eta - b.eta).abs() < 1e-12);
        let shift = a.q_tilde[[0, 0]] - b.q_tilde[[0, 0]];
        for s in 0..5 {
            for act in 0..2 {
                let d = a.q_tilde[[s, act]] - b.q_tilde[[s, act]] - shift;
                assert!(d.abs() < 1e-10, "anchor shift not constant: {d}");
            }
        }
    }

    #[test]
    fn reducible_chain_is_rejected() {
        // Two absorbing states.
        let mdp = FiniteMdp {
            num_states: 2,
            num_actions: 1,
            transitions: vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            mean_rewards: vec![vec![0.0], vec![1.0]],
            reward_noise_sd: 0.0,
        };
        let err = finite_mdp_solve(&mdp, &Policy::always(1, 0), 0, 0).unwrap_err();
        assert!(matches!(err, Error::NotIrreducible(_)), "{err}");
    }

    #[test]
    fn direction_is_one_when_behavior_matches_target_at_stationarity() {
        let mdp = random_mdp(4, 2, 5);
        let policy = Policy::uniform(2);
        let sol = finite_mdp_solve(&mdp, &policy, 0, 0).unwrap();
        let pi = policy_table(&mdp, &policy).unwrap();
        let dir = finite_mdp_direction(
            &mdp,
            &policy,
            pi.view(),
            sol.d_state.view(),
            10,
            0,
            0,
        )
        .unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert!((dir.e[[s, a]] - 1.0).abs() < 1e-10, "e({s},{a}) = {}", dir.e[[s, a]]);
                assert!(dir.q[[s, a]].abs() < 1e-10, "q({s},{a}) = {}", dir.q[[s, a]]);
            }
        }
    }

    #[test]
    fn direction_normalizations_hold() {
        let mdp = random_mdp(5, 2, 17);
        let policy = tabular_policy(
            "mostly-zero",
            array![[0.8, 0.2], [0.7, 0.3], [0.9, 0.1], [0.6, 0.4], [0.8, 0.2]],
        );
        let behavior = Array2::from_elem((5, 2), 0.5);
        let init = Array1::from_elem(5, 0.2);
        let dir =
            finite_mdp_direction(&mdp, &policy, behavior.view(), init.view(), 7, 0, 0).unwrap();
        let sol = finite_mdp_solve(&mdp, &policy, 0, 0).unwrap();
        // sum of e over the target stationary distribution is 1
        let total = (&dir.e * &sol.d_state_action).sum();
        assert!((total - 1.0).abs() < 1e-10, "sum e d_pi = {total}");
        // d_bar is a probability table
        assert!((dir.d_bar.sum() - 1.0).abs() < 1e-12);
        // q solves its Bellman-like equation
        let pi = policy_table(&mdp, &policy).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                let mut next = 0.0;
                for sp in 0..5 {
                    for ap in 0..2 {
                        next += mdp.transitions[s][a][sp] * pi[[sp, ap]] * dir.q[[sp, ap]];
                    }
                }
                let resid = 1.0 - dir.e[[s, a]] + next - dir.q[[s, a]];
                assert!(resid.abs() < 1e-10, "q residual {resid}");
            }
        }
    }

    #[test]
    fn simulated_frequencies_match_average_occupancy() {
        let mdp = random_mdp(3, 2, 23);
        let behavior = MarkovBehavior(array![[0.3, 0.7], [0.5, 0.5], [0.8, 0.2]]);
        let init = array![0.5, 0.25, 0.25];
        let horizon = 4;
        let data = simulate_finite_mdp(&mdp, &behavior, init.view(), 50_000, horizon, 3).unwrap();
        let mut freq = Array2::<f64>::zeros((3, 2));
        for traj in data.trajectories() {
            for t in 0..traj.len() {
                let s = traj.states.row(t).iter().position(|&v| v == 1.0).unwrap();
                freq[[s, traj.actions[t]]] += 1.0;
            }
        }
        freq.mapv_inplace(|v| v / data.num_transitions() as f64);
        let exact = average_occupancy(&mdp, behavior.0.view(), init.view(), horizon);
        let tv: f64 = (&freq - &exact).mapv(f64::abs).sum() / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn history_dependent_behavior_runs() {
        struct Alternating;
        impl BehaviorRule for Alternating {
            fn probs(&self, history: &[(usize, usize)], _state: usize, out: &mut [f64]) {
                // Lean toward the action not taken last time.
                let last = history.last().map(|&(_, a)| a);
                match last {
                    Some(0) => {
                        out[0] = 0.2;
                        out[1] = 0.8;
                    }
                    Some(_) => {
                        out[0] = 0.8;
                        out[1] = 0.2;
                    }
                    None => {
                        out[0] = 0.5;
                        out[1] = 0.5;
                    }
                }
            }
        }
        let mdp = random_mdp(3, 2, 11);
        let init = Array1::from_elem(3, 1.0 / 3.0);
        let data = simulate_finite_mdp(&mdp, &Alternating, init.view(), 10, 20, 1).unwrap();
        assert_eq!(data.num_transitions(), 200);
    }

    #[test]
    fn constant_reward_single_state_mdp() {
        let mdp = FiniteMdp {
            num_states: 1,
            num_actions: 2,
            transitions: vec![vec![vec![1.0], vec![1.0]]],
            mean_rewards: vec![vec![2.5, 2.5]],
            reward_noise_sd: 0.0,
        };
        let behavior = MarkovBehavior(Array2::from_elem((1, 2), 0.5));
        let init = array![1.0];
        let data = simulate_finite_mdp(&mdp, &behavior, init.view(), 3, 4, 0).unwrap();
        for traj in data.trajectories() {
            for &r in traj.rewards.iter() {
                assert_eq!(r, 2.5);
            }
        }
    }

    #[test]
    fn mdp_json_round_trip_and_validation() {
        let mdp = two_state_uniform_mdp();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mdp.json");
        std::fs::write(&path, serde_json::to_string(&mdp).unwrap()).unwrap();
        let loaded = FiniteMdp::from_json_file(&path).unwrap();
        assert_eq!(mdp, loaded);
        // Keys must be the short table names.
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"P\"") && text.contains("\"r\""));

        let mut bad = mdp;
        bad.transitions[0][0][0] = 0.7; // row no longer sums to 1
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exact_weighted_transitions_cover_support() {
        let mdp = two_state_uniform_mdp();
        let occ = array![[0.25, 0.25], [0.25, 0.25]];
        let wt = exact_weighted_transitions(&mdp, occ.view());
        assert_eq!(wt.len(), 8); // 2 states x 2 actions x 2 next states
        assert!((wt.weights.sum() - 1.0).abs() < 1e-12);
        wt.validate(2).unwrap();
    }
}
