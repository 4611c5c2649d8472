//! Test statistics: threshold-location distance `D_n(γ)`, continuity distance
//! `T_n`, linearity sup-Wald, and simulation of the continuity statistic's
//! limit law from plug-in estimates.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::engine::{self, Restriction, Sample, Weighting};
use crate::gmm::{FitKind, GmmFit, ThresholdModel};
use crate::grid::ceil_rank;
use crate::rng::{stream, Scheme};

/// Relative tolerance below which a negative statistic is rounding noise.
pub const NEGATIVE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Distance,
    Continuity,
    Supwald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStat {
    pub kind: StatKind,
    pub value: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub at_gamma: Option<f64>,
}

/// Serializable test outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub kind: StatKind,
    pub value: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_value: Option<f64>,
    pub critical_values: BTreeMap<String, f64>,
}

/// `n·(restricted - unrestricted)`, clamping rounding-level negatives to 0.
pub fn distance_value(n: usize, restricted: f64, unrestricted: f64) -> Result<f64> {
    let value = n as f64 * (restricted - unrestricted);
    let tol = NEGATIVE_TOL * (n as f64 * unrestricted.abs()).max(1.0);
    if value >= 0.0 {
        Ok(value)
    } else if value >= -tol {
        Ok(0.0)
    } else {
        Err(Error::NegativeStatistic { value })
    }
}

fn check_pair(unres: &GmmFit, other: &GmmFit) -> Result<()> {
    if unres.kind != FitKind::Unrestricted {
        return Err(Error::Estimation(
            "first argument must be an unrestricted fit".into(),
        ));
    }
    if unres.k() != other.k() || unres.n != other.n {
        return Err(Error::Dimension(format!(
            "fits disagree: k = {} vs {}, n = {} vs {}",
            unres.k(),
            other.k(),
            unres.n,
            other.n
        )));
    }
    Ok(())
}

/// `D_n(γ) = n(min_α Q̂(α, γ) - Q̂(θ̂))`.
pub fn distance_stat(unres: &GmmFit, at_gamma: &GmmFit) -> Result<TestStat> {
    check_pair(unres, at_gamma)?;
    Ok(TestStat {
        kind: StatKind::Distance,
        value: distance_value(unres.n, at_gamma.criterion, unres.criterion)?,
        n: unres.n,
        at_gamma: Some(at_gamma.theta_hat.gamma),
    })
}

/// `T_n = n(Q̂(θ̃) - Q̂(θ̂))`.
pub fn continuity_stat(unres: &GmmFit, kink: &GmmFit) -> Result<TestStat> {
    check_pair(unres, kink)?;
    if kink.kind != FitKind::ContinuityRestricted {
        return Err(Error::Estimation(
            "second argument must be a continuity-restricted fit".into(),
        ));
    }
    Ok(TestStat {
        kind: StatKind::Continuity,
        value: distance_value(unres.n, kink.criterion, unres.criterion)?,
        n: unres.n,
        at_gamma: None,
    })
}

/// Wald statistic for `δ = 0` at one grid point, with the threshold pinned
/// and a two-stage weight computed under that restriction. `None` when the
/// sandwich covariance is singular.
fn wald_at(sample: &Sample<'_>, agg: &engine::Aggregates, ell: usize) -> Result<Option<f64>> {
    let sys = sample.system();
    let (n, p) = (sys.n(), sys.p());
    let (point, weighting, _) = engine::two_stage_at(sample, agg, ell, Restriction::None)?;
    let theta = Restriction::None.embed(&point.coef, p, point.gamma);
    let omega = sample.moment_covariance(&theta);
    let m = agg.jacobian(ell);
    let wm = weighting.apply(&m);
    let a = m.tr_mul(&wm);
    let Some(a_chol) = Cholesky::new(a) else {
        return Ok(None);
    };
    let a_inv = a_chol.inverse();
    let mid = wm.tr_mul(&(&omega * &wm));
    let v = &a_inv * mid * &a_inv;
    let vd = v.view((p, p), (p + 1, p + 1)).clone_owned();
    let vd = 0.5 * (&vd + vd.transpose());
    let Some(vd_chol) = Cholesky::new(vd) else {
        return Ok(None);
    };
    let delta = DVector::from_column_slice(&point.coef[p..]);
    let solved = vd_chol.solve(&delta);
    Ok(Some(n as f64 * delta.dot(&solved)))
}

/// Supremum over `gammas` of the Wald statistic for `δ = 0`.
pub fn sup_wald_sample(sample: &Sample<'_>, gammas: &[f64]) -> Result<TestStat> {
    let agg = sample.aggregate(gammas);
    let mut best: Option<(f64, f64)> = None;
    for (ell, &gamma) in gammas.iter().enumerate() {
        match wald_at(sample, &agg, ell) {
            Ok(Some(w)) => {
                if best.is_none_or(|(b, _)| w > b) {
                    best = Some((w, gamma));
                }
            }
            Ok(None) => {
                log::warn!("singular sandwich covariance at gamma = {gamma}; point skipped")
            }
            Err(err) => log::warn!("Wald statistic unavailable at gamma = {gamma}: {err}"),
        }
    }
    let (value, gamma) = best.ok_or_else(|| {
        Error::Estimation("sandwich covariance singular at every grid point".into())
    })?;
    Ok(TestStat {
        kind: StatKind::Supwald,
        value: value.max(0.0),
        n: sample.system().n(),
        at_gamma: Some(gamma),
    })
}

/// Linearity sup-Wald statistic on the model's data and grid.
pub fn sup_wald(model: &ThresholdModel) -> Result<TestStat> {
    sup_wald_sample(&Sample::original(model.system()), model.grid().points())
}

/// Plug-in estimates of the objects entering the continuity statistic's
/// limit `V₁ - V₂ + V₃`.
#[derive(Debug, Clone)]
pub struct ContinuityLimitPlugins {
    pub omega_hat: DMatrix<f64>,
    pub m1_hat: DMatrix<f64>,
    pub m2_hat: DMatrix<f64>,
    pub psi_hat: DMatrix<f64>,
    pub n2_hat: DMatrix<f64>,
    pub gamma_hat: f64,
    pub delta3_hat: f64,
    /// Rows map a standard normal vector ξ to `(M₂'ΨM₂)^{-1/2}M₂'ΨZ` with `Z = L_Ω ξ`.
    proj_m2: DMatrix<f64>,
    proj_n2: DMatrix<f64>,
}

fn chol_or(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let sym = 0.5 * (&m + m.transpose());
    Cholesky::new(sym).ok_or_else(|| Error::Estimation(format!("{what} is not positive definite")))
}

impl ContinuityLimitPlugins {
    /// Plug-ins at the unrestricted estimate `θ̂`.
    pub fn from_fit(model: &ThresholdModel, unres: &GmmFit) -> Result<Self> {
        let theta = &unres.theta_hat;
        let agg = Sample::original(model.system()).aggregate(&[theta.gamma]);
        Self::new(
            unres.omega_hat.clone(),
            agg.m1.clone(),
            agg.m2[0].clone(),
            theta.gamma,
            theta.delta3(),
        )
    }

    pub fn new(
        omega_hat: DMatrix<f64>,
        m1_hat: DMatrix<f64>,
        m2_hat: DMatrix<f64>,
        gamma_hat: f64,
        delta3_hat: f64,
    ) -> Result<Self> {
        let k = omega_hat.nrows();
        let w = match Weighting::from_covariance(&omega_hat)? {
            Weighting::Factor(chol) => chol,
            Weighting::Identity => {
                unreachable!("covariance factorisation never yields the identity")
            }
        };
        let l_omega = w.l();
        let w_m1 = w.solve(&m1_hat);
        let inner = chol_or(m1_hat.tr_mul(&w_m1), "M1'Ω⁻¹M1")?;
        let omega_inv = w.inverse();
        let mut psi_hat = &omega_inv - &w_m1 * inner.solve(&w_m1.transpose());
        psi_hat = 0.5 * (&psi_hat + psi_hat.transpose());
        let cols = m2_hat.ncols();
        let mut c = DMatrix::zeros(cols, 2);
        c[(0, 0)] = -gamma_hat;
        c[(cols - 1, 0)] = 1.0;
        c[(0, 1)] = -delta3_hat;
        let n2_hat = &m2_hat * c;
        let project = |b: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
            let chol = chol_or(b.tr_mul(&(&psi_hat * b)), what)?;
            let mut rows = b.tr_mul(&psi_hat) * &l_omega;
            chol.l_dirty().solve_lower_triangular_mut(&mut rows);
            Ok(rows)
        };
        let proj_m2 = project(&m2_hat, "M2'ΨM2")?;
        let proj_n2 = project(&n2_hat, "N2'ΨN2")?;
        debug_assert_eq!(proj_m2.ncols(), k);
        Ok(Self {
            omega_hat,
            m1_hat,
            m2_hat,
            psi_hat,
            n2_hat,
            gamma_hat,
            delta3_hat,
            proj_m2,
            proj_n2,
        })
    }

    /// One draw of `(V₁, V₂, V₃)` from a standard normal vector and an
    /// independent standard normal `z0`.
    pub fn components(&self, xi: &DVector<f64>, z0: f64) -> (f64, f64, f64) {
        let v1 = (&self.proj_m2 * xi).norm_squared();
        let v2 = (&self.proj_n2 * xi).norm_squared();
        let v3 = z0.max(0.0).powi(2);
        (v1, v2, v3)
    }
}

const LIMIT_CHUNK: usize = 1024;

/// Sorted i.i.d. draws of `V₁ - V₂ + V₃`.
pub fn simulate_continuity_limit(
    plugs: &ContinuityLimitPlugins,
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    let k = plugs.omega_hat.nrows();
    let chunks = draws.div_ceil(LIMIT_CHUNK);
    let mut out: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream(seed, Scheme::LimitSimulation, 0, c as u32);
            let len = LIMIT_CHUNK.min(draws - c * LIMIT_CHUNK);
            let mut xi = DVector::zeros(k);
            (0..len)
                .map(|_| {
                    for v in xi.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let z0: f64 = StandardNormal.sample(&mut rng);
                    let (v1, v2, v3) = plugs.components(&xi, z0);
                    v1 - v2 + v3
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Type-1 empirical quantile: the order statistic at `ceil(level·m)`.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let m = sorted.len();
    sorted[ceil_rank(level, m).clamp(1, m) - 1]
}

/// Fraction of draws at least as large as `stat`.
pub fn p_value(stat: f64, draws: &[f64]) -> f64 {
    draws.iter().filter(|d| **d >= stat).count() as f64 / draws.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_panel, DgpConfig};
    use crate::gmm::WeightChoice;
    use crate::grid::GammaGrid;
    use crate::panel::InstrumentSpec;

    fn model(cfg: &DgpConfig, seed: u64, pts: usize) -> ThresholdModel {
        let panel = simulate_panel(cfg, seed).unwrap();
        let grid = GammaGrid::quantile(&panel, 0.1, 0.9, pts).unwrap();
        ThresholdModel::new(&panel, &InstrumentSpec::default(), grid).unwrap()
    }

    #[test]
    fn quantile_is_type_one() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5), 5.0);
        assert_eq!(quantile(&v, 0.95), 10.0);
        assert_eq!(quantile(&v, 0.9), 9.0);
        assert_eq!(quantile(&v, 0.01), 1.0);
        assert_eq!(p_value(5.0, &v), 0.6);
    }

    #[test]
    fn clamps_only_rounding_noise() {
        assert_eq!(distance_value(100, 1.0, 1.0 + 1e-15).unwrap(), 0.0);
        assert!(distance_value(100, 1.0, 1.1).is_err());
    }

    #[test]
    fn distance_is_zero_at_estimate_and_nonnegative() {
        let m = model(&DgpConfig::default(), 1, 11);
        let fit = m.fit_unrestricted().unwrap();
        let at_hat = m
            .fit_gamma_restricted(fit.theta_hat.gamma, WeightChoice::Shared(&fit))
            .unwrap();
        assert_eq!(distance_stat(&fit, &at_hat).unwrap().value, 0.0);
        for &g in m.grid().points() {
            let r = m
                .fit_gamma_restricted(g, WeightChoice::Shared(&fit))
                .unwrap();
            assert!(distance_stat(&fit, &r).unwrap().value >= 0.0);
        }
        let kink = m.fit_continuity_restricted(&fit).unwrap();
        let t = continuity_stat(&fit, &kink).unwrap();
        let raw = fit.n as f64 * (kink.criterion - fit.criterion);
        assert!((t.value - raw.max(0.0)).abs() <= 1e-8);
    }

    #[test]
    fn sup_wald_invariant_to_instrument_scale() {
        let cfg = DgpConfig {
            n: 300,
            ..DgpConfig::default()
        };
        let m = model(&cfg, 4, 5);
        let scaled = ThresholdModel::from_parts(
            m.diff().clone(),
            m.instruments().scaled(3.0),
            m.grid().clone(),
        )
        .unwrap();
        let a = sup_wald(&m).unwrap().value;
        let b = sup_wald(&scaled).unwrap().value;
        assert!(((a - b) / a).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn limit_plugins_annihilate_m1_and_nest_projections() {
        let cfg = DgpConfig {
            n: 800,
            ..DgpConfig::with_jump(0.0)
        };
        let m = model(&cfg, 2, 11);
        let fit = m.fit_unrestricted().unwrap();
        let plugs = ContinuityLimitPlugins::from_fit(&m, &fit).unwrap();
        let psi_m1 = &plugs.psi_hat * &plugs.m1_hat;
        assert!(psi_m1.amax() < 1e-8 * plugs.psi_hat.amax() * plugs.m1_hat.amax());
        let draws = simulate_continuity_limit(&plugs, 10_000, 3);
        assert!(draws.windows(2).all(|w| w[0] <= w[1]));
        let mut rng = stream(5, Scheme::LimitSimulation, 9, 0);
        let k = plugs.omega_hat.nrows();
        let mut zeros = 0;
        for _ in 0..10_000 {
            let xi = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            let z0: f64 = StandardNormal.sample(&mut rng);
            let (v1, v2, v3) = plugs.components(&xi, z0);
            assert!(v1 >= v2 - 1e-9 * v1.max(1.0));
            if v3 == 0.0 {
                zeros += 1;
            }
        }
        assert!((zeros as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }
}
