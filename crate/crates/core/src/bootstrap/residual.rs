//! Bootstrap confidence intervals for the coefficients: the residual
//! bootstrap with data-driven shrinkage towards the continuity-restricted
//! estimate, and the standard nonparametric bootstrap (`θ₀* = θ̂`).

use serde::{Deserialize, Serialize};

use super::tests::continuity_replicates;
use super::{run_replicates, BootstrapConfig, BootstrapContext, ReplicateSet, SchemeTag};
use crate::error::{Error, Result};
use crate::gmm::engine::two_stage;
use crate::gmm::GmmFit;
use crate::panel::ThresholdParams;
use crate::stats::{continuity_stat, quantile};

/// Bootstrap estimates `θ̂*` (as `(α', γ)`) from worlds built on `θ₀*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDraws {
    pub theta0_star: ThresholdParams,
    pub draws: ReplicateSet<Vec<f64>>,
}

/// Percentile intervals for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefCi {
    pub name: String,
    pub estimate: f64,
    /// `[θ̂_j - q(1-τ/2)/√n, θ̂_j - q(τ/2)/√n]` from quantiles of `√n(θ̂*_j - θ*_0j)`.
    pub asymmetric: [f64; 2],
    /// `θ̂_j ± q(1-τ)/√n` from quantiles of `√n|θ̂*_j - θ*_0j|`.
    pub symmetric: [f64; 2],
}

impl CoefCi {
    pub fn asymmetric_contains(&self, v: f64) -> bool {
        self.asymmetric[0] <= v && v <= self.asymmetric[1]
    }

    pub fn symmetric_contains(&self, v: f64) -> bool {
        self.symmetric[0] <= v && v <= self.symmetric[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientCis {
    pub tau: f64,
    pub theta0_star: ThresholdParams,
    /// Shrinkage weight `w_n` (residual bootstrap only).
    pub w_n: Option<f64>,
    pub c_hat: Option<f64>,
    pub t_n: Option<f64>,
    /// `β₁..β_p, δ₁..δ_{p+1}, γ`.
    pub coefficients: Vec<CoefCi>,
    pub failures: usize,
}

/// `w_n = min(T_n / (Ĉ n^{1/4}), 1)`.
pub fn shrinkage_weight(t_n: f64, c_hat: f64, n: usize) -> f64 {
    (t_n / (c_hat * (n as f64).powf(0.25))).clamp(0.0, 1.0)
}

fn parameter_names(p: usize) -> Vec<String> {
    (1..=p)
        .map(|j| format!("beta_{j}"))
        .chain((1..=p + 1).map(|j| format!("delta_{j}")))
        .chain(std::iter::once("gamma".to_string()))
        .collect()
}

fn flatten(theta: &ThresholdParams) -> Vec<f64> {
    let mut v = theta.alpha();
    v.push(theta.gamma);
    v
}

/// Full unrestricted two-stage re-estimation on `B` worlds built from `θ₀*`.
pub fn estimator_bootstrap(
    ctx: &BootstrapContext<'_>,
    cfg: &BootstrapConfig,
    theta0: &ThresholdParams,
    scheme: SchemeTag,
) -> Result<EstimatorDraws> {
    cfg.validate()?;
    let model = ctx.model();
    let gammas = model.grid().points();
    let p = model.p();
    let outcomes = ctx.world_outcomes(theta0);
    let draws = run_replicates(cfg.b, cfg.max_failure_rate, |r| {
        let sample = ctx.sample(&outcomes, cfg.seed, scheme, 0, r);
        let ts = two_stage(&sample, gammas)?;
        Ok(flatten(&ts.theta(p)))
    })?;
    Ok(EstimatorDraws {
        theta0_star: theta0.clone(),
        draws,
    })
}

fn intervals(
    estimate: &ThresholdParams,
    draws: &EstimatorDraws,
    n: usize,
    tau: f64,
) -> Vec<CoefCi> {
    let est = flatten(estimate);
    let center = flatten(&draws.theta0_star);
    let root_n = (n as f64).sqrt();
    parameter_names(estimate.p())
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let mut signed: Vec<f64> = draws
                .draws
                .values
                .iter()
                .map(|d| root_n * (d[j] - center[j]))
                .collect();
            signed.sort_by(f64::total_cmp);
            let mut abs: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
            abs.sort_by(f64::total_cmp);
            let (lo_q, hi_q) = (
                quantile(&signed, tau / 2.0),
                quantile(&signed, 1.0 - tau / 2.0),
            );
            let half = quantile(&abs, 1.0 - tau) / root_n;
            CoefCi {
                name,
                estimate: est[j],
                asymmetric: [est[j] - hi_q / root_n, est[j] - lo_q / root_n],
                symmetric: [est[j] - half, est[j] + half],
            }
        })
        .collect()
}

/// Residual bootstrap with `θ₀* = w_nθ̂ + (1-w_n)θ̃`, given `T_n` and `Ĉ`.
pub fn residual_bootstrap_with(
    ctx: &BootstrapContext<'_>,
    kink: &GmmFit,
    cfg: &BootstrapConfig,
    t_n: f64,
    c_hat: f64,
) -> Result<CoefficientCis> {
    if !(c_hat > 0.0) {
        return Err(Error::Degenerate(format!(
            "C-hat must be positive, got {c_hat}"
        )));
    }
    let n = ctx.model().n();
    let w_n = shrinkage_weight(t_n, c_hat, n);
    let theta0 = ctx.fit().theta_hat.convex_combination(&kink.theta_hat, w_n);
    let draws = estimator_bootstrap(ctx, cfg, &theta0, SchemeTag::Residual)?;
    Ok(CoefficientCis {
        tau: cfg.tau,
        coefficients: intervals(&ctx.fit().theta_hat, &draws, n, cfg.tau),
        theta0_star: theta0,
        w_n: Some(w_n),
        c_hat: Some(c_hat),
        t_n: Some(t_n),
        failures: draws.draws.failures,
    })
}

/// Residual bootstrap CIs, estimating `Ĉ` from the continuity bootstrap.
pub fn residual_bootstrap_ci(
    ctx: &BootstrapContext<'_>,
    kink: &GmmFit,
    cfg: &BootstrapConfig,
) -> Result<CoefficientCis> {
    cfg.validate()?;
    let t_n = continuity_stat(ctx.fit(), kink)?.value;
    let reps = continuity_replicates(ctx, kink, cfg, cfg.b_c())?;
    let c_hat = super::tests::c_hat_from(&reps, cfg.c_hat.quantile_level)?;
    residual_bootstrap_with(ctx, kink, cfg, t_n, c_hat)
}

/// Standard nonparametric bootstrap CIs (`θ₀* = θ̂`).
pub fn nonparametric_bootstrap_ci(
    ctx: &BootstrapContext<'_>,
    cfg: &BootstrapConfig,
) -> Result<CoefficientCis> {
    let theta0 = ctx.fit().theta_hat.clone();
    let draws = estimator_bootstrap(ctx, cfg, &theta0, SchemeTag::Nonparametric)?;
    Ok(CoefficientCis {
        tau: cfg.tau,
        coefficients: intervals(&ctx.fit().theta_hat, &draws, ctx.model().n(), cfg.tau),
        theta0_star: theta0,
        w_n: None,
        c_hat: None,
        t_n: None,
        failures: draws.draws.failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrinkage_weight_endpoints() {
        assert_eq!(shrinkage_weight(0.0, 1.0, 400), 0.0);
        assert_eq!(shrinkage_weight(100.0, 1.0, 16), 1.0);
        assert!((shrinkage_weight(1.0, 1.0, 16) - 0.5).abs() < 1e-15);
    }
}
