//! Computes high-precision Monte-Carlo values of the long-run average reward
//! under the always-treat and never-treat policies of the behavioral
//! dynamics model, for freezing as regression constants.

use avgreward::data::Policy;
use avgreward::simulator::oracle_eta_luckett;

fn main() {
    let horizon = 200_000;
    let rollouts = 250;
    for (label, policy) in [("always", Policy::always(2, 1)), ("never", Policy::never(2))] {
        let est = oracle_eta_luckett(&policy, 0.5, horizon, rollouts, 20214);
        println!(
            "{label}: eta = {:.17} mc_se = {:.6e} used = {} escaped = {}",
            est.value, est.mc_se, est.rollouts_used, est.rollouts_escaped
        );
    }
}
