//! Simulation design for dynamic panel threshold models.
//!
//! ```text
//! y_it = η_i + β₂y_i,t-1 + β₃q_it + (δ₁ + δ₂y_i,t-1 + δ₃q_it)1{q_it > γ} + σe_it
//! q_it = ρq_i,t-1 + u_it,     corr(e_it, u_i,t+1) = ρ_eu
//! ```
//!
//! Each unit draws from its own random stream, so a unit's path does not
//! depend on how many other units are simulated.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, ThresholdParams};
use crate::rng::{stream, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n: usize,
    pub periods: usize,
    pub beta2: f64,
    pub beta3: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub rho: f64,
    pub rho_eu: f64,
    pub burn_in: usize,
    pub fixed_effect_sd: f64,
}

impl Default for DgpConfig {
    /// The discontinuous design with unit jump, `n = 400`, `T = 6`.
    fn default() -> Self {
        Self::with_jump(1.0)
    }
}

impl DgpConfig {
    /// Base design with `δ₁` chosen so that `δ₁ + δ₃γ = jump`.
    pub fn with_jump(jump: f64) -> Self {
        let (delta3, gamma) = (2.0, 0.25);
        Self {
            n: 400,
            periods: 6,
            beta2: 0.6,
            beta3: 1.0,
            delta1: jump - delta3 * gamma,
            delta2: 0.0,
            delta3,
            gamma,
            sigma: 0.5,
            rho: 0.7,
            rho_eu: 0.5,
            burn_in: 100,
            fixed_effect_sd: 0.0,
        }
    }

    /// Base design without threshold effect (`δ = 0`).
    pub fn linear() -> Self {
        Self {
            delta1: 0.0,
            delta2: 0.0,
            delta3: 0.0,
            ..Self::with_jump(0.0)
        }
    }

    pub fn jump(&self) -> f64 {
        self.delta1 + self.delta3 * self.gamma
    }

    pub fn is_continuous(&self) -> bool {
        self.delta2 == 0.0 && self.jump() == 0.0
    }

    /// The data-generating parameter point, with `x = (y_{t-1}, q_t)`.
    pub fn true_params(&self) -> ThresholdParams {
        ThresholdParams {
            beta: vec![self.beta2, self.beta3],
            delta: vec![self.delta1, self.delta2, self.delta3],
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 || self.periods == 0 {
            return bad(format!(
                "n and T must be positive (n = {}, T = {})",
                self.n, self.periods
            ));
        }
        if self.n > u32::MAX as usize {
            return bad(format!("n = {} is too large", self.n));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be below 1, got {}", self.rho));
        }
        if !(self.rho_eu.abs() <= 1.0) {
            return bad(format!("|rho_eu| must be at most 1, got {}", self.rho_eu));
        }
        if !(self.sigma >= 0.0) || !(self.fixed_effect_sd >= 0.0) {
            return bad("sigma and fixed_effect_sd must be non-negative".into());
        }
        let coefs = [
            self.beta2,
            self.beta3,
            self.delta1,
            self.delta2,
            self.delta3,
            self.gamma,
        ];
        if coefs.iter().any(|v| !v.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }

    /// Regression function `E[y_t | y_{t-1}, q_t]` net of the fixed effect.
    pub fn regression_function(&self, y_lag: f64, q: f64) -> f64 {
        let regime = if q > self.gamma {
            self.delta1 + self.delta2 * y_lag + self.delta3 * q
        } else {
            0.0
        };
        self.beta2 * y_lag + self.beta3 * q + regime
    }
}

/// Structural shocks of the retained periods, unit-major `n*T`.
#[derive(Debug, Clone)]
pub struct Shocks {
    /// `e_it`.
    pub e: Vec<f64>,
    /// `u_i,t+1`, the innovation of the following period's threshold variable.
    pub u_next: Vec<f64>,
}

/// Simulates a balanced panel with `x_it = (y_i,t-1, q_it)`.
pub fn simulate_panel(cfg: &DgpConfig, seed: u64) -> Result<PanelDataset> {
    simulate_with_shocks(cfg, seed).map(|(panel, _)| panel)
}

/// As [`simulate_panel`], also returning the shocks of the retained periods.
pub fn simulate_with_shocks(cfg: &DgpConfig, seed: u64) -> Result<(PanelDataset, Shocks)> {
    cfg.validate()?;
    let (n, periods) = (cfg.n, cfg.periods);
    let total = cfg.burn_in + periods;
    let mut y = Vec::with_capacity(n * periods);
    let mut x = Vec::with_capacity(n * periods * 2);
    let mut e_kept = Vec::with_capacity(n * periods);
    let mut u_kept = Vec::with_capacity(n * periods);
    let stationary_sd = (1.0 / (1.0 - cfg.rho * cfg.rho)).sqrt();
    let orth = (1.0 - cfg.rho_eu * cfg.rho_eu).max(0.0).sqrt();
    for i in 0..n {
        let mut rng = stream(seed, Scheme::Dgp, 0, i as u32);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let eta = cfg.fixed_effect_sd * normal();
        let mut q = stationary_sd * normal();
        let mut y_prev = 0.0;
        let mut u = normal();
        for t in 0..total {
            q = cfg.rho * q + u;
            let e = normal();
            let xi = normal();
            let u_next = cfg.rho_eu * e + orth * xi;
            let y_t = eta + cfg.regression_function(y_prev, q) + cfg.sigma * e;
            if t >= cfg.burn_in {
                y.push(y_t);
                x.push(y_prev);
                x.push(q);
                e_kept.push(e);
                u_kept.push(u_next);
            }
            y_prev = y_t;
            u = u_next;
        }
    }
    let panel = PanelDataset::new(
        (1..=n).map(|i| i.to_string()).collect(),
        (1..=periods as i64).collect(),
        vec!["y_lag".into(), "q".into()],
        y,
        x,
    )?;
    Ok((
        panel,
        Shocks {
            e: e_kept,
            u_next: u_kept,
        },
    ))
}
