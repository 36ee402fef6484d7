//! End-to-end smoke drive: simulate behavioral-model trajectories, fit the
//! coupled estimator for two target policies, round-trip the fit through
//! JSON, and recompute the projected Bellman error from the reloaded fit.

use avgreward::data::{Policy, ReferencePoint, TuningParams};
use avgreward::estimator::{
    empirical_projected_bellman_error, fit_coupled, FitOptions, FitResult,
};
use avgreward::kernel::{median_heuristic, KernelSpec};
use avgreward::simulator::{simulate_luckett, LuckettModelConfig};
use ndarray::array;

fn main() {
    let config = LuckettModelConfig { seed: 3, ..Default::default() };
    let data = simulate_luckett(&config, 10, 20).expect("simulate");
    let tt = data.transition_table();
    let bandwidth = median_heuristic(tt.states.view()).expect("bandwidth");
    let kernel = KernelSpec::new(bandwidth).expect("kernel");
    let anchor = ReferencePoint::new(array![0.0, 0.0], 0);
    let n_total = tt.len() as f64;
    let tuning = TuningParams::new(1e-3 / n_total, 1e-3 / n_total);

    for (label, policy) in [
        ("always-treat", Policy::always(2, 1)),
        ("never-treat", Policy::never(2)),
    ] {
        let fit = fit_coupled(&data, &policy, &kernel, &anchor, &tuning, &FitOptions::default())
            .expect("fit");
        let json = fit.to_json().expect("serialize");
        let reloaded = FitResult::from_json(&json).expect("reload");
        assert_eq!(reloaded.eta_hat, fit.eta_hat);
        let pbe = empirical_projected_bellman_error(&reloaded, &data, &policy).expect("pbe");
        println!(
            "{label}: eta^ = {:+.4}  pbe = {:.3e}  centers = {}  bandwidth = {:.3}",
            fit.eta_hat,
            pbe,
            fit.center_actions.len(),
            bandwidth
        );
    }
}
