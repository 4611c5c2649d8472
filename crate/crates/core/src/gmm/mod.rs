//! Two-stage GMM estimation of the first-differenced threshold model.
//!
//! The threshold is estimated by grid search over the profiled criterion
//! `Q̃(γ) = min_α Q̂(α, γ)`, whose inner minimiser is available in closed
//! form. Restricted estimators (threshold pinned, continuity imposed, or no
//! threshold effect) share the same machinery.

pub mod engine;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GammaGrid;
use crate::panel::{
    build_instruments, first_difference, moment_eval, DiffPanel, InstrumentSet, InstrumentSpec,
    PanelDataset, ThresholdParams,
};

pub use engine::{MomentSystem, Restriction, Sample, Stage, Weighting};

/// One point of the profiled criterion curve; `None` where the Jacobian is
/// rank deficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub criterion: Option<f64>,
    pub alpha: Option<Vec<f64>>,
}

/// Continuity-restricted parameters `ψ = (β', δ₃, γ)'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinkParams {
    pub beta: Vec<f64>,
    pub delta3: f64,
    pub gamma: f64,
}

impl KinkParams {
    pub fn psi(&self) -> Vec<f64> {
        let mut out = self.beta.clone();
        out.push(self.delta3);
        out.push(self.gamma);
        out
    }

    /// `T(ψ) = (β', -γδ₃, 0', δ₃, γ)'`.
    pub fn embed(&self) -> ThresholdParams {
        let mut coef = self.beta.clone();
        coef.push(self.delta3);
        Restriction::Kink.embed(&coef, self.beta.len(), self.gamma)
    }
}

/// Which estimator produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Unrestricted,
    GammaRestricted,
    ContinuityRestricted,
    LinearNull,
}

/// Result of a GMM estimation.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub kind: FitKind,
    pub theta_hat: ThresholdParams,
    /// Weight matrix `W` under which `criterion` is evaluated.
    pub weight: DMatrix<f64>,
    /// `Q̂(θ̂) = ḡ(θ̂)'Wḡ(θ̂)`.
    pub criterion: f64,
    pub profiled_curve: Vec<CurvePoint>,
    /// `n × (T - t0 + 1)` residuals `Δε̂_it`.
    pub residuals: DMatrix<f64>,
    /// Centered covariance of `g_i(θ̂)`.
    pub omega_hat: DMatrix<f64>,
    pub stage: Stage,
    pub kink: Option<KinkParams>,
    pub n: usize,
    pub(crate) weighting: Weighting,
}

impl GmmFit {
    pub fn k(&self) -> usize {
        self.weight.nrows()
    }

    pub fn report(&self) -> FitReport {
        FitReport {
            kind: self.kind,
            stage: self.stage,
            n: self.n,
            k: self.k(),
            theta: self.theta_hat.clone(),
            jump: self.theta_hat.jump(),
            criterion: self.criterion,
            kink: self.kink.clone(),
            profiled_curve: self
                .profiled_curve
                .iter()
                .map(|c| CurveRow {
                    gamma: c.gamma,
                    qtilde: c.criterion,
                })
                .collect(),
            residuals: ResidualRef {
                rows: self.residuals.nrows(),
                cols: self.residuals.ncols(),
                path: None,
            },
        }
    }
}

/// Serializable summary of a [`GmmFit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: FitKind,
    pub stage: Stage,
    pub n: usize,
    pub k: usize,
    pub theta: ThresholdParams,
    pub jump: f64,
    pub criterion: f64,
    pub kink: Option<KinkParams>,
    pub profiled_curve: Vec<CurveRow>,
    pub residuals: ResidualRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub gamma: f64,
    pub qtilde: Option<f64>,
}

/// Shape of the residual matrix and, when written out, where it lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRef {
    pub rows: usize,
    pub cols: usize,
    pub path: Option<String>,
}

/// Weighting used by a restricted estimator.
#[derive(Debug, Clone, Copy)]
pub enum WeightChoice<'a> {
    /// Reuse the final weight of an unrestricted fit, so that criteria are
    /// directly comparable (distance statistics).
    Shared(&'a GmmFit),
    /// Own first stage with `W = I` under the restriction, then reweight.
    TwoStage,
}

/// Data, instruments and grid prepared for repeated estimation.
#[derive(Debug, Clone)]
pub struct ThresholdModel {
    diff: DiffPanel,
    iv: InstrumentSet,
    system: MomentSystem,
    grid: GammaGrid,
}

impl ThresholdModel {
    pub fn new(panel: &PanelDataset, spec: &InstrumentSpec, grid: GammaGrid) -> Result<Self> {
        let diff = first_difference(panel)?;
        let iv = build_instruments(panel, spec)?;
        Self::from_parts(diff, iv, grid)
    }

    pub fn from_parts(diff: DiffPanel, iv: InstrumentSet, grid: GammaGrid) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Grid("grid is empty".into()));
        }
        let system = MomentSystem::new(&diff, &iv)?;
        let params = 2 * diff.p() + 2;
        if iv.k() < params {
            return Err(Error::Dimension(format!(
                "order condition fails: k = {} < dim(theta) = {params}",
                iv.k()
            )));
        }
        if diff.n() <= iv.k() {
            log::warn!(
                "n = {} does not exceed k = {}; the weight matrix will be singular",
                diff.n(),
                iv.k()
            );
        }
        Ok(Self {
            diff,
            iv,
            system,
            grid,
        })
    }

    pub fn diff(&self) -> &DiffPanel {
        &self.diff
    }

    pub fn instruments(&self) -> &InstrumentSet {
        &self.iv
    }

    pub fn system(&self) -> &MomentSystem {
        &self.system
    }

    pub fn grid(&self) -> &GammaGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn p(&self) -> usize {
        self.system.p()
    }

    /// Same data and instruments on a different grid.
    pub fn with_grid(&self, grid: GammaGrid) -> Self {
        Self {
            grid,
            ..self.clone()
        }
    }

    fn finish(
        &self,
        kind: FitKind,
        theta: ThresholdParams,
        weighting: Weighting,
        criterion: f64,
        profiled_curve: Vec<CurvePoint>,
        stage: Stage,
        kink: Option<KinkParams>,
    ) -> GmmFit {
        let sys = &self.system;
        let resid = sys.residuals(sys.dy(), &theta);
        let residuals = DMatrix::from_row_slice(sys.n(), sys.m(), &resid);
        let omega_hat = Sample::original(sys).moment_covariance(&theta);
        GmmFit {
            kind,
            weight: weighting.matrix(sys.k()),
            theta_hat: theta,
            criterion,
            profiled_curve,
            residuals,
            omega_hat,
            stage,
            kink,
            n: sys.n(),
            weighting,
        }
    }

    /// Stage 1 with `W = I`, stage 2 with `W_n` from the stage-1 estimate;
    /// `γ̂` is the grid argmin of the profiled criterion (smallest on ties).
    pub fn fit_unrestricted(&self) -> Result<GmmFit> {
        let sample = Sample::original(&self.system);
        let ts = engine::two_stage(&sample, self.grid.points())?;
        let theta = ts.theta(self.p());
        let curve = curve_from(&ts.second, Restriction::None, self.p());
        let criterion = ts.second.min_criterion();
        Ok(self.finish(
            FitKind::Unrestricted,
            theta,
            ts.weighting,
            criterion,
            curve,
            ts.stage,
            None,
        ))
    }

    /// Minimises over `α` with the threshold pinned at `gamma`.
    pub fn fit_gamma_restricted(&self, gamma: f64, weights: WeightChoice<'_>) -> Result<GmmFit> {
        let sample = Sample::original(&self.system);
        // Aggregating over the model grid when γ lies on it reproduces the
        // unrestricted profile at γ bit for bit.
        let (agg, ell) = match self.grid.index_of(gamma) {
            Some(ell) => (sample.aggregate(self.grid.points()), ell),
            None => (sample.aggregate(&[gamma]), 0),
        };
        let p = self.p();
        let (point, weighting, stage) = match weights {
            WeightChoice::Shared(fit) => {
                let point = fit
                    .weighting
                    .whiten_point(&agg, ell)
                    .solve(0, Restriction::None)?;
                (point, fit.weighting.clone(), fit.stage)
            }
            WeightChoice::TwoStage => engine::two_stage_at(&sample, &agg, ell, Restriction::None)?,
        };
        let theta = Restriction::None.embed(&point.coef, p, gamma);
        let curve = vec![CurvePoint {
            gamma,
            criterion: Some(point.criterion),
            alpha: Some(point.coef.clone()),
        }];
        Ok(self.finish(
            FitKind::GammaRestricted,
            theta,
            weighting,
            point.criterion,
            curve,
            stage,
            None,
        ))
    }

    /// Continuity-restricted estimator `θ̃` over the model grid, evaluated
    /// with the unrestricted fit's weight matrix.
    pub fn fit_continuity_restricted(&self, unrestricted: &GmmFit) -> Result<GmmFit> {
        let sample = Sample::original(&self.system);
        let agg = sample.aggregate(self.grid.points());
        let profile = unrestricted
            .weighting
            .whiten(&agg)
            .profile(Restriction::Kink)?;
        let p = self.p();
        let best = profile.best_fit();
        let kink = KinkParams {
            beta: best.coef[..p].to_vec(),
            delta3: best.coef[p],
            gamma: best.gamma,
        };
        let curve = curve_from(&profile, Restriction::Kink, p);
        Ok(self.finish(
            FitKind::ContinuityRestricted,
            kink.embed(),
            unrestricted.weighting.clone(),
            best.criterion,
            curve,
            unrestricted.stage,
            Some(kink),
        ))
    }

    /// Two-stage linear GMM with `δ = 0`. The threshold location is
    /// irrelevant and reported as the first grid point.
    pub fn fit_linear_null(&self) -> Result<GmmFit> {
        let sample = Sample::original(&self.system);
        let gamma = self.grid.points()[0];
        let agg = sample.aggregate(&[gamma]);
        let (point, weighting, stage) =
            engine::two_stage_at(&sample, &agg, 0, Restriction::Linear)?;
        let theta = Restriction::Linear.embed(&point.coef, self.p(), gamma);
        Ok(self.finish(
            FitKind::LinearNull,
            theta,
            weighting,
            point.criterion,
            Vec::new(),
            stage,
            None,
        ))
    }

    /// `Q̂(θ) = ḡ(θ)'Wḡ(θ)` under the weight of `fit`.
    pub fn criterion_under(&self, fit: &GmmFit, theta: &ThresholdParams) -> f64 {
        let g = Sample::original(&self.system).moment(theta);
        fit.weighting.quadratic(&g)
    }
}

fn curve_from(profile: &engine::Profile, restriction: Restriction, p: usize) -> Vec<CurvePoint> {
    profile
        .points
        .iter()
        .zip(&profile.gammas)
        .map(|(pt, &gamma)| match pt {
            Some(fit) => CurvePoint {
                gamma: fit.gamma,
                criterion: Some(fit.criterion),
                alpha: Some(restriction.embed(&fit.coef, p, fit.gamma).alpha()),
            },
            None => CurvePoint {
                gamma,
                criterion: None,
                alpha: None,
            },
        })
        .collect()
}

/// Inverse of the centered covariance of the per-unit moments.
pub fn weight_matrix(ev: &crate::panel::MomentEvaluation) -> Result<DMatrix<f64>> {
    let n = ev.g_units.nrows() as f64;
    let centered = DMatrix::from_fn(ev.g_units.nrows(), ev.g_units.ncols(), |i, j| {
        ev.g_units[(i, j)] - ev.g_bar[j]
    });
    let cov = centered.tr_mul(&centered) / n;
    let k = cov.nrows();
    Ok(Weighting::from_covariance(&cov)?.matrix(k))
}

/// Closed-form `α̂(γ) = -(M̄'WM̄)⁻¹M̄'Wv̄` and `Q̃(γ)`, evaluated directly from
/// the per-unit moment decomposition.
pub fn profiled_alpha(
    diff: &DiffPanel,
    iv: &InstrumentSet,
    gamma: f64,
    w: &DMatrix<f64>,
) -> Result<(Vec<f64>, f64)> {
    let p = diff.p();
    let zero = ThresholdParams::new(vec![0.0; p], vec![0.0; p + 1], gamma)?;
    let ev = moment_eval(diff, iv, &zero)?;
    if w.nrows() != iv.k() || w.ncols() != iv.k() {
        return Err(Error::Dimension(format!(
            "weight matrix is {}x{}, k = {}",
            w.nrows(),
            w.ncols(),
            iv.k()
        )));
    }
    let wm = w * &ev.m_bar;
    let a = ev.m_bar.tr_mul(&wm);
    let b = wm.tr_mul(&ev.v_n);
    let alpha = -engine::solve_spd_equilibrated(&a, &b).ok_or(Error::RankDeficient { gamma })?;
    let g: DVector<f64> = &ev.v_n + &ev.m_bar * &alpha;
    let criterion = g.dot(&(w * &g)).max(0.0);
    Ok((alpha.iter().copied().collect(), criterion))
}

/// [`ThresholdModel::fit_unrestricted`] from raw inputs.
pub fn fit_unrestricted(
    panel: &PanelDataset,
    spec: &InstrumentSpec,
    grid: &GammaGrid,
) -> Result<GmmFit> {
    ThresholdModel::new(panel, spec, grid.clone())?.fit_unrestricted()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_panel, DgpConfig};

    fn model(cfg: &DgpConfig, seed: u64, grid_pts: usize) -> ThresholdModel {
        let panel = simulate_panel(cfg, seed).unwrap();
        let grid = GammaGrid::quantile(&panel, 0.1, 0.9, grid_pts)
            .unwrap()
            .with_points(&[cfg.gamma], &panel)
            .unwrap();
        ThresholdModel::new(&panel, &InstrumentSpec::default(), grid).unwrap()
    }

    #[test]
    fn aggregates_match_direct_moment_evaluation() {
        let cfg = DgpConfig {
            n: 60,
            ..DgpConfig::default()
        };
        let m = model(&cfg, 1, 7);
        let agg = Sample::original(m.system()).aggregate(m.grid().points());
        for (ell, &gamma) in m.grid().points().iter().enumerate() {
            let theta = ThresholdParams::new(vec![0.3, -0.7], vec![0.2, 0.5, 1.1], gamma).unwrap();
            let ev = moment_eval(m.diff(), m.instruments(), &theta).unwrap();
            let direct = &agg.v + agg.jacobian(ell) * DVector::from_vec(theta.alpha());
            assert!((&direct - &ev.g_bar).amax() < 1e-12);
            assert!((agg.jacobian(ell) - &ev.m_bar).amax() < 1e-12);
            let g = Sample::original(m.system()).moment(&theta);
            assert!((g - &ev.g_bar).amax() < 1e-12);
        }
    }

    #[test]
    fn noise_free_data_recovers_truth() {
        let cfg = DgpConfig {
            n: 80,
            sigma: 0.0,
            ..DgpConfig::with_jump(1.0)
        };
        let m = model(&cfg, 3, 9);
        let fit = m.fit_unrestricted().unwrap();
        assert_eq!(fit.theta_hat.gamma, cfg.gamma);
        assert!(fit.criterion < 1e-20, "{} {:?}", fit.criterion, fit.stage);
        for (a, b) in fit.theta_hat.alpha().iter().zip(cfg.true_params().alpha()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(fit.residuals.amax() < 1e-9);
    }

    #[test]
    fn profile_dominates_minimum_and_restricted_fits_nest() {
        let cfg = DgpConfig {
            n: 200,
            ..DgpConfig::with_jump(1.0)
        };
        let m = model(&cfg, 1, 15);
        let fit = m.fit_unrestricted().unwrap();
        for c in &fit.profiled_curve {
            if let Some(q) = c.criterion {
                assert!(q >= fit.criterion);
            }
        }
        let at_hat = m
            .fit_gamma_restricted(fit.theta_hat.gamma, WeightChoice::Shared(&fit))
            .unwrap();
        assert_eq!(at_hat.criterion, fit.criterion);
        let kink = m.fit_continuity_restricted(&fit).unwrap();
        assert!(kink.criterion >= fit.criterion);
        let th = &kink.theta_hat;
        assert_eq!(th.delta1() + th.delta3() * th.gamma, 0.0);
        assert!(th.delta2().iter().all(|d| *d == 0.0));
        let lin = m.fit_linear_null().unwrap();
        let lin_under_shared = m.criterion_under(&fit, &lin.theta_hat);
        assert!(lin_under_shared > fit.criterion);
    }

    #[test]
    fn residuals_match_definition() {
        let cfg = DgpConfig {
            n: 50,
            ..DgpConfig::default()
        };
        let m = model(&cfg, 2, 5);
        let fit = m.fit_unrestricted().unwrap();
        let t0 = m.instruments().t0();
        for i in 0..m.n() {
            for (s, t) in m.instruments().moment_periods().enumerate() {
                let direct = m.diff().residual(i, t, &fit.theta_hat);
                assert!((fit.residuals[(i, s)] - direct).abs() < 1e-12, "t0 = {t0}");
            }
        }
    }

    #[test]
    fn weight_matrix_inverts_covariance() {
        let cfg = DgpConfig {
            n: 200,
            ..DgpConfig::default()
        };
        let m = model(&cfg, 1, 5);
        let fit = m.fit_unrestricted().unwrap();
        let ev = moment_eval(m.diff(), m.instruments(), &fit.theta_hat).unwrap();
        let w = weight_matrix(&ev).unwrap();
        let prod = &w * &fit.omega_hat;
        let eye = DMatrix::<f64>::identity(prod.nrows(), prod.nrows());
        assert!((prod - eye).amax() < 1e-8);
    }

    #[test]
    fn rank_error_below_support() {
        let cfg = DgpConfig {
            n: 50,
            ..DgpConfig::default()
        };
        let m = model(&cfg, 1, 5);
        let lo = m.diff().x_level(0, 1)[1].min(-1e6);
        let w = DMatrix::identity(m.instruments().k(), m.instruments().k());
        assert!(matches!(
            profiled_alpha(m.diff(), m.instruments(), lo, &w),
            Err(Error::RankDeficient { .. })
        ));
    }
}
