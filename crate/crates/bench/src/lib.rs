//! Fixtures shared by the benchmarks in `benches/`.

use biasnet::lab::paper_scenario;
use biasnet::{NetworkState, SimConfig};

/// Built-in five-agent scenario cut to `horizon` seconds.
pub fn builtin_sim(horizon: f64) -> SimConfig {
    let mut cfg = paper_scenario();
    cfg.horizon = horizon;
    cfg.sim_config().expect("built-in scenario is valid")
}

/// A mid-run state with nonzero filters, reached by integrating one second.
pub fn warm_state(cfg: &SimConfig) -> NetworkState {
    let mut short = cfg.clone();
    short.horizon = 1.0;
    biasnet::plant::integrate(&short).expect("short run").final_state
}
