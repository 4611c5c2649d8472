//! Fixtures shared by the benchmarks: simulated designs at the sizes used in
//! the Monte Carlo experiments.

use dptr_core::{simulate_panel, DgpConfig, GammaGrid, InstrumentSpec, ThresholdModel};

/// Model on a simulated jump-1 panel with `n` units and a `points`-point
/// quantile grid.
pub fn model(n: usize, points: usize, seed: u64) -> ThresholdModel {
    let cfg = DgpConfig {
        n,
        ..DgpConfig::default()
    };
    let panel = simulate_panel(&cfg, seed).expect("valid design");
    let grid = GammaGrid::quantile(&panel, 0.1, 0.9, points).expect("valid grid");
    ThresholdModel::new(&panel, &InstrumentSpec::default(), grid).expect("identified model")
}
