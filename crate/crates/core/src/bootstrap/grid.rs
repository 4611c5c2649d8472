//! Grid bootstrap confidence set for the threshold location, obtained by
//! inverting null-imposed bootstrap distance tests over the grid.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{run_replicates, BootstrapConfig, BootstrapContext, SchemeTag};
use crate::error::{Error, Result};
use crate::gmm::engine::{two_stage, Restriction};
use crate::panel::format_float;
use crate::stats::distance_value;

/// Test of `γ = γ_ℓ` at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub gamma: f64,
    /// `D_n(γ_ℓ)`; `None` when the restricted fit is unavailable.
    pub d_n: Option<f64>,
    /// `(1-τ)` quantile of `D*_n(γ_ℓ)`.
    pub crit: Option<f64>,
    pub accepted: bool,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCi {
    pub tau: f64,
    /// Accepted grid points.
    pub ci_set: Vec<f64>,
    /// `[min, max]` of the accepted points.
    pub ci_convex: [f64; 2],
    pub points: Vec<GridPoint>,
    pub failures: usize,
}

/// Bootstrap tests at the listed grid indices. Each point uses
/// `θ₀* = (α̂(γ_ℓ)', γ_ℓ)'` and `D*_n(γ_ℓ) = n(min_α Q̂*(α, γ_ℓ) - min_θ Q̂*(θ))`.
pub fn grid_bootstrap_at(
    ctx: &BootstrapContext<'_>,
    cfg: &BootstrapConfig,
    indices: &[usize],
) -> Result<Vec<GridPoint>> {
    cfg.validate()?;
    let model = ctx.model();
    let fit = ctx.fit();
    let gammas = model.grid().points();
    if fit.profiled_curve.len() != gammas.len() {
        return Err(Error::Dimension(format!(
            "fit carries a {}-point profile, model grid has {} points",
            fit.profiled_curve.len(),
            gammas.len()
        )));
    }
    let n = model.n();
    let p = model.p();
    let mut out = Vec::with_capacity(indices.len());
    for &ell in indices {
        let gamma = gammas[ell];
        let curve = &fit.profiled_curve[ell];
        let (Some(q_ell), Some(alpha)) = (curve.criterion, curve.alpha.as_ref()) else {
            log::warn!("restricted fit unavailable at gamma = {gamma}; grid point excluded");
            out.push(GridPoint {
                index: ell,
                gamma,
                d_n: None,
                crit: None,
                accepted: false,
                failures: 0,
            });
            continue;
        };
        let d_n = distance_value(n, q_ell, fit.criterion)?;
        let theta0 = Restriction::None.embed(alpha, p, gamma);
        let outcomes = ctx.world_outcomes(&theta0);
        let reps = run_replicates(cfg.b, cfg.max_failure_rate, |r| {
            let sample = ctx.sample(&outcomes, cfg.seed, SchemeTag::Grid, ell as u32, r);
            let ts = two_stage(&sample, gammas)?;
            let restricted = ts
                .second
                .criterion_at(ell)
                .ok_or(Error::RankDeficient { gamma })?;
            distance_value(n, restricted, ts.second.min_criterion())
        })?;
        let crit = reps.quantile(1.0 - cfg.tau);
        out.push(GridPoint {
            index: ell,
            gamma,
            d_n: Some(d_n),
            crit: Some(crit),
            accepted: d_n <= crit,
            failures: reps.failures,
        });
    }
    Ok(out)
}

/// Confidence set `{γ ∈ Γ_n : D_n(γ) ≤ F*⁻¹(1-τ; D*_n(γ))}` over the whole grid.
pub fn grid_bootstrap_ci(ctx: &BootstrapContext<'_>, cfg: &BootstrapConfig) -> Result<GridCi> {
    let indices: Vec<usize> = (0..ctx.model().grid().len()).collect();
    let points = grid_bootstrap_at(ctx, cfg, &indices)?;
    let ci_set: Vec<f64> = points
        .iter()
        .filter(|p| p.accepted)
        .map(|p| p.gamma)
        .collect();
    let ci_convex = match (ci_set.first(), ci_set.last()) {
        (Some(lo), Some(hi)) => [*lo, *hi],
        _ => {
            return Err(Error::Estimation(
                "grid bootstrap confidence set is empty".into(),
            ))
        }
    };
    Ok(GridCi {
        tau: cfg.tau,
        ci_set,
        ci_convex,
        failures: points.iter().map(|p| p.failures).sum(),
        points,
    })
}

/// Writes the `gamma,D_n,crit` curve.
pub fn write_grid_curve<W: Write>(ci: &GridCi, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["gamma", "D_n", "crit"])?;
    let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    for p in &ci.points {
        w.write_record([format_float(p.gamma), opt(p.d_n), opt(p.crit)])?;
    }
    w.flush()?;
    Ok(())
}
