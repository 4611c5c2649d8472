//! Null-imposed bootstrap tests of continuity and of linearity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{run_replicates, BootstrapConfig, BootstrapContext, ReplicateSet, SchemeTag};
use crate::error::{Error, Result};
use crate::gmm::engine::{two_stage, Restriction};
use crate::gmm::{FitKind, GmmFit};
use crate::panel::ThresholdParams;
use crate::stats::{
    continuity_stat, distance_value, sup_wald, sup_wald_sample, TestReport, TestStat,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub report: TestReport,
    pub theta0_star: ThresholdParams,
    pub tau: f64,
    /// `T > F*⁻¹(1-τ)`.
    pub rejected: bool,
    pub failures: usize,
}

fn outcome(
    stat: TestStat,
    reps: &ReplicateSet<f64>,
    cfg: &BootstrapConfig,
    theta0: ThresholdParams,
) -> TestOutcome {
    let sorted = reps.sorted();
    let mut critical_values = BTreeMap::new();
    for level in [0.9, 0.95, 0.99, 1.0 - cfg.tau] {
        critical_values.insert(format!("{level}"), crate::stats::quantile(&sorted, level));
    }
    let crit = crate::stats::quantile(&sorted, 1.0 - cfg.tau);
    TestOutcome {
        rejected: stat.value > crit,
        report: TestReport {
            kind: stat.kind,
            value: stat.value,
            n: stat.n,
            gamma: stat.at_gamma,
            p_value: Some(reps.p_value(stat.value)),
            critical_values,
        },
        theta0_star: theta0,
        tau: cfg.tau,
        failures: reps.failures,
    }
}

/// `B` replicates of `T*_n` from worlds built on `θ₀* = θ̃`.
pub fn continuity_replicates(
    ctx: &BootstrapContext<'_>,
    kink: &GmmFit,
    cfg: &BootstrapConfig,
    b: usize,
) -> Result<ReplicateSet<f64>> {
    if kink.kind != FitKind::ContinuityRestricted {
        return Err(Error::Estimation(
            "continuity bootstrap needs the continuity-restricted fit".into(),
        ));
    }
    let model = ctx.model();
    let gammas = model.grid().points();
    let n = model.n();
    let outcomes = ctx.world_outcomes(&kink.theta_hat);
    run_replicates(b, cfg.max_failure_rate, |r| {
        let sample = ctx.sample(&outcomes, cfg.seed, SchemeTag::Continuity, 0, r);
        let ts = two_stage(&sample, gammas)?;
        let kink_min = ts.whitened.profile(Restriction::Kink)?.min_criterion();
        distance_value(n, kink_min, ts.second.min_criterion())
    })
}

pub(crate) fn c_hat_from(reps: &ReplicateSet<f64>, level: f64) -> Result<f64> {
    let c = reps.quantile(level);
    if c > 0.0 {
        Ok(c)
    } else {
        Err(Error::Degenerate(format!(
            "the {level} quantile of the continuity bootstrap statistic is {c}"
        )))
    }
}

/// `Ĉ`: a quantile (default the median) of `B_C` continuity-bootstrap draws.
pub fn compute_c_hat(
    ctx: &BootstrapContext<'_>,
    kink: &GmmFit,
    cfg: &BootstrapConfig,
) -> Result<f64> {
    cfg.validate()?;
    let reps = continuity_replicates(ctx, kink, cfg, cfg.b_c())?;
    c_hat_from(&reps, cfg.c_hat.quantile_level)
}

/// Bootstrap test of continuity; rejects when `T_n` exceeds the `1-τ`
/// quantile of `T*_n`.
pub fn continuity_bootstrap_test(
    ctx: &BootstrapContext<'_>,
    kink: &GmmFit,
    cfg: &BootstrapConfig,
) -> Result<TestOutcome> {
    cfg.validate()?;
    let stat = continuity_stat(ctx.fit(), kink)?;
    let reps = continuity_replicates(ctx, kink, cfg, cfg.b)?;
    Ok(outcome(stat, &reps, cfg, kink.theta_hat.clone()))
}

/// Bootstrap sup-Wald test of linearity with `β₀*` from the null fit and
/// `δ₀* = 0` (the threshold location of the world is irrelevant).
pub fn linearity_bootstrap_test(
    ctx: &BootstrapContext<'_>,
    null_fit: &GmmFit,
    cfg: &BootstrapConfig,
) -> Result<TestOutcome> {
    cfg.validate()?;
    if null_fit.kind != FitKind::LinearNull {
        return Err(Error::Estimation(
            "linearity bootstrap needs the linear null fit".into(),
        ));
    }
    let model = ctx.model();
    let gammas = model.grid().points();
    let stat = sup_wald(model)?;
    let theta0 = null_fit.theta_hat.clone();
    let outcomes = ctx.world_outcomes(&theta0);
    let reps = run_replicates(cfg.b, cfg.max_failure_rate, |r| {
        let sample = ctx.sample(&outcomes, cfg.seed, SchemeTag::Linearity, 0, r);
        Ok(sup_wald_sample(&sample, gammas)?.value)
    })?;
    Ok(outcome(stat, &reps, cfg, theta0))
}
