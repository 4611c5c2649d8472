//! Recentered bootstrap for the first-differenced threshold model.
//!
//! A bootstrap world resamples whole units i.i.d. (instruments, regressor
//! pairs and residuals move together) and rebuilds outcomes from a chosen
//! parameter point `θ₀*`:
//!
//! ```text
//! Δy*_it = Δx*_it'β₀* + 1*_it(γ₀*)'X*_it δ₀* + Δε̂*_it
//! ```
//!
//! Bootstrap moments are recentered by `ḡ_n(θ̂)` so that their resampling
//! expectation at `θ₀*` is exactly zero, and every replicate re-runs the full
//! two-stage estimator. The schemes differ only in `θ₀*` and in the statistic
//! recorded per replicate.

mod grid;
mod residual;
mod tests;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::engine::Sample;
use crate::gmm::{GmmFit, ThresholdModel};
use crate::panel::ThresholdParams;
use crate::rng::{stream, Scheme};
use crate::stats::{p_value, quantile};

pub use grid::{grid_bootstrap_at, grid_bootstrap_ci, write_grid_curve, GridCi, GridPoint};
pub use residual::{
    estimator_bootstrap, nonparametric_bootstrap_ci, residual_bootstrap_ci,
    residual_bootstrap_with, shrinkage_weight, CoefCi, CoefficientCis, EstimatorDraws,
};
pub(crate) use tests::c_hat_from;
pub use tests::{
    compute_c_hat, continuity_bootstrap_test, continuity_replicates, linearity_bootstrap_test,
    TestOutcome,
};

/// How `Ĉ` is estimated for the shrinkage weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CHatRule {
    pub quantile_level: f64,
    /// Replicates of the continuity bootstrap; `None` uses `B`.
    pub b_c: Option<usize>,
}

impl Default for CHatRule {
    fn default() -> Self {
        Self {
            quantile_level: 0.5,
            b_c: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub tau: f64,
    pub c_hat: CHatRule,
    /// Largest tolerated fraction of failed replicates.
    pub max_failure_rate: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b: 500,
            seed: 1,
            tau: 0.05,
            c_hat: CHatRule::default(),
            max_failure_rate: 0.05,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::Config("B must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        let level = self.c_hat.quantile_level;
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Config(format!(
                "C-hat quantile level must lie in (0, 1), got {level}"
            )));
        }
        if self.c_hat.b_c == Some(0) {
            return Err(Error::Config("B_C must be at least 1".into()));
        }
        if self.b > u32::MAX as usize {
            return Err(Error::Config("B is too large".into()));
        }
        Ok(())
    }

    pub fn b_c(&self) -> usize {
        self.c_hat.b_c.unwrap_or(self.b)
    }
}

/// Scheme tag recorded with every run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeTag {
    Grid,
    Residual,
    Continuity,
    Linearity,
    Nonparametric,
}

impl SchemeTag {
    pub(crate) fn stream(self) -> Scheme {
        match self {
            SchemeTag::Grid => Scheme::Grid,
            SchemeTag::Residual => Scheme::Residual,
            SchemeTag::Continuity => Scheme::Continuity,
            SchemeTag::Linearity => Scheme::Linearity,
            SchemeTag::Nonparametric => Scheme::Nonparametric,
        }
    }
}

/// The sample-side ingredients every scheme needs: the model, the
/// unrestricted fit and the recentering vector `ḡ_n(θ̂)`.
#[derive(Debug, Clone)]
pub struct BootstrapContext<'a> {
    model: &'a ThresholdModel,
    fit: &'a GmmFit,
    recenter: DVector<f64>,
}

impl<'a> BootstrapContext<'a> {
    pub fn new(model: &'a ThresholdModel, fit: &'a GmmFit) -> Result<Self> {
        let sys = model.system();
        if fit.residuals.nrows() != sys.n() || fit.residuals.ncols() != sys.m() {
            return Err(Error::Dimension(format!(
                "fit residuals are {}x{}, model expects {}x{}",
                fit.residuals.nrows(),
                fit.residuals.ncols(),
                sys.n(),
                sys.m()
            )));
        }
        let resid: Vec<f64> = fit.residuals.transpose().iter().copied().collect();
        let recenter = sys.mean_moment(&resid);
        Ok(Self {
            model,
            fit,
            recenter,
        })
    }

    pub fn model(&self) -> &ThresholdModel {
        self.model
    }

    pub fn fit(&self) -> &GmmFit {
        self.fit
    }

    /// `ḡ_n(θ̂)`.
    pub fn recenter(&self) -> &DVector<f64> {
        &self.recenter
    }

    /// Outcome differences every original unit carries into a world built
    /// from `θ₀*`: `fitted(θ₀*) + Δε̂`, written as `Δy + (fitted(θ₀*) - fitted(θ̂))`
    /// so that `θ₀* = θ̂` reproduces `Δy` exactly.
    pub fn world_outcomes(&self, theta0: &ThresholdParams) -> Vec<f64> {
        let sys = self.model.system();
        let theta_hat = &self.fit.theta_hat;
        let mut out = Vec::with_capacity(sys.n() * sys.m());
        for j in 0..sys.n() {
            for s in 0..sys.m() {
                let dy = sys.dy()[j * sys.m() + s];
                let shift = sys.fitted(j, s, theta0) - sys.fitted(j, s, theta_hat);
                out.push(if shift == 0.0 { dy } else { dy + shift });
            }
        }
        out
    }

    /// Bootstrap sample for replicate `rep` of `(scheme, point)`.
    pub(crate) fn sample(
        &self,
        outcomes: &[f64],
        seed: u64,
        scheme: SchemeTag,
        point: u32,
        rep: u32,
    ) -> Sample<'a> {
        let n = self.model.n();
        let mut counts = vec![0u32; n];
        for i in draw_indices(n, seed, scheme, point, rep) {
            counts[i] += 1;
        }
        Sample::resampled(
            self.model.system(),
            counts,
            outcomes.to_vec(),
            self.recenter.clone(),
        )
    }
}

fn draw_indices(n: usize, seed: u64, scheme: SchemeTag, point: u32, rep: u32) -> Vec<usize> {
    let mut rng = stream(seed, scheme.stream(), point, rep);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// One bootstrap world, materialised unit by unit.
#[derive(Debug, Clone)]
pub struct BootstrapWorld {
    /// Original unit drawn into each bootstrap position.
    pub resample_index: Vec<usize>,
    pub theta0_star: ThresholdParams,
    /// `n × (T - t0 + 1)`; row `i` belongs to original unit `resample_index[i]`.
    pub dy_star: DMatrix<f64>,
}

impl BootstrapWorld {
    /// Builds the world for an explicit index map.
    pub fn from_indices(
        ctx: &BootstrapContext<'_>,
        theta0_star: &ThresholdParams,
        resample_index: Vec<usize>,
    ) -> Self {
        let sys = ctx.model.system();
        let m = sys.m();
        let outcomes = ctx.world_outcomes(theta0_star);
        let dy_star = DMatrix::from_fn(resample_index.len(), m, |i, s| {
            outcomes[resample_index[i] * m + s]
        });
        Self {
            resample_index,
            theta0_star: theta0_star.clone(),
            dy_star,
        }
    }

    /// Per-original-unit counts and outcomes, recentered at `ḡ_n(θ̂)`.
    pub fn sample<'a>(&self, ctx: &BootstrapContext<'a>) -> Sample<'a> {
        let sys = ctx.model.system();
        let m = sys.m();
        let mut counts = vec![0u32; sys.n()];
        let mut outcomes = ctx.world_outcomes(&self.theta0_star);
        for (row, &j) in self.resample_index.iter().enumerate() {
            counts[j] += 1;
            for s in 0..m {
                outcomes[j * m + s] = self.dy_star[(row, s)];
            }
        }
        Sample::resampled(sys, counts, outcomes, ctx.recenter.clone())
    }

    /// Recentered bootstrap moment `ḡ*_n(θ)`.
    pub fn moment(&self, ctx: &BootstrapContext<'_>, theta: &ThresholdParams) -> DVector<f64> {
        self.sample(ctx).moment(theta)
    }
}

/// Draws the world for replicate `rep` of `(scheme, point)` under `seed`.
pub fn make_world(
    ctx: &BootstrapContext<'_>,
    theta0_star: &ThresholdParams,
    scheme: SchemeTag,
    point: u32,
    rep: u32,
    seed: u64,
) -> BootstrapWorld {
    let index = draw_indices(ctx.model.n(), seed, scheme, point, rep);
    BootstrapWorld::from_indices(ctx, theta0_star, index)
}

/// Two-stage recentered bootstrap criterion `Q̂*_n(θ)` on a world: the
/// weight comes from the world's own first-stage estimate.
pub fn bootstrap_criterion(
    ctx: &BootstrapContext<'_>,
    world: &BootstrapWorld,
    theta: &ThresholdParams,
) -> Result<f64> {
    let sample = world.sample(ctx);
    let ts = crate::gmm::engine::two_stage(&sample, ctx.model.grid().points())?;
    Ok(ts.weighting.quadratic(&sample.moment(theta)))
}

/// Surviving replicate values, in replicate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSet<T> {
    pub values: Vec<T>,
    pub failures: usize,
    pub total: usize,
}

impl ReplicateSet<f64> {
    pub fn sorted(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn quantile(&self, level: f64) -> f64 {
        quantile(&self.sorted(), level)
    }

    pub fn p_value(&self, stat: f64) -> f64 {
        p_value(stat, &self.values)
    }
}

/// Runs `b` replicates of `f` in parallel; results are gathered in replicate
/// order, failures dropped and counted.
pub(crate) fn run_replicates<T, F>(b: usize, max_failure_rate: f64, f: F) -> Result<ReplicateSet<T>>
where
    T: Send,
    F: Fn(u32) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = (0..b as u32).into_par_iter().map(&f).collect();
    let mut values = Vec::with_capacity(b);
    let mut failures = 0;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(err) => {
                log::debug!("bootstrap replicate failed: {err}");
                failures += 1;
            }
        }
    }
    if failures as f64 > max_failure_rate * b as f64 || values.is_empty() {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: b,
        });
    }
    if failures > 0 {
        log::warn!("{failures} of {b} bootstrap replicates failed and were dropped");
    }
    Ok(ReplicateSet {
        values,
        failures,
        total: b,
    })
}

/// Serializable record of a bootstrap run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub scheme: SchemeTag,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub tau: f64,
    pub failures: usize,
    pub theta0_star: Option<ThresholdParams>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outcome {
    Grid(GridCi),
    Coefficients(CoefficientCis),
    Test(TestOutcome),
}

#[cfg(test)]
mod unit_tests {
    use super::*;
    use crate::dgp::{simulate_panel, DgpConfig};
    use crate::grid::GammaGrid;
    use crate::panel::InstrumentSpec;

    fn setup(n: usize) -> ThresholdModel {
        let cfg = DgpConfig {
            n,
            ..DgpConfig::default()
        };
        let panel = simulate_panel(&cfg, 1).unwrap();
        let grid = GammaGrid::quantile(&panel, 0.1, 0.9, 7).unwrap();
        ThresholdModel::new(&panel, &InstrumentSpec::default(), grid).unwrap()
    }

    #[test]
    fn identity_world_reproduces_data_and_zero_moment() {
        let model = setup(80);
        let fit = model.fit_unrestricted().unwrap();
        let ctx = BootstrapContext::new(&model, &fit).unwrap();
        let world = BootstrapWorld::from_indices(&ctx, &fit.theta_hat, (0..80).collect());
        let m = model.system().m();
        for i in 0..80 {
            for s in 0..m {
                assert_eq!(
                    world.dy_star[(i, s)].to_bits(),
                    model.system().dy()[i * m + s].to_bits()
                );
            }
        }
        let g = world.moment(&ctx, &fit.theta_hat);
        assert!(g.amax() < 1e-12);
    }

    #[test]
    fn linear_world_ignores_threshold_location() {
        let model = setup(60);
        let fit = model.fit_unrestricted().unwrap();
        let ctx = BootstrapContext::new(&model, &fit).unwrap();
        let a = ThresholdParams::new(vec![0.5, 1.0], vec![0.0; 3], -0.3).unwrap();
        let b = ThresholdParams {
            gamma: 0.8,
            ..a.clone()
        };
        let wa = make_world(&ctx, &a, SchemeTag::Linearity, 0, 3, 9);
        let wb = make_world(&ctx, &b, SchemeTag::Linearity, 0, 3, 9);
        assert_eq!(wa.resample_index, wb.resample_index);
        assert_eq!(wa.dy_star, wb.dy_star);
    }

    #[test]
    fn bootstrap_criterion_is_nonnegative() {
        let model = setup(120);
        let fit = model.fit_unrestricted().unwrap();
        let ctx = BootstrapContext::new(&model, &fit).unwrap();
        let world = make_world(&ctx, &fit.theta_hat, SchemeTag::Nonparametric, 0, 0, 1);
        for j in 0..10 {
            let t = ThresholdParams::new(
                vec![0.1 * j as f64, 1.0],
                vec![0.2, -0.1, 1.0 + j as f64 * 0.1],
                0.1 * j as f64 - 0.4,
            )
            .unwrap();
            assert!(bootstrap_criterion(&ctx, &world, &t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(BootstrapConfig::default().validate().is_ok());
        assert!(BootstrapConfig {
            b: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BootstrapConfig {
            tau: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
