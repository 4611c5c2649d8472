//! Monte Carlo harness: coverage of the threshold location, power against
//! shifted thresholds, coefficient interval coverage and length, and the
//! size or power of the continuity and linearity tests.
//!
//! Replicate `r` simulates from the child seed
//! `derive_seed(seed, MonteCarlo, r)` and uses the same child seed for its
//! bootstrap streams, so results do not depend on scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    c_hat_from, continuity_replicates, grid_bootstrap_ci, linearity_bootstrap_test,
    nonparametric_bootstrap_ci, residual_bootstrap_with, BootstrapConfig, BootstrapContext,
    CoefficientCis, GridCi,
};
use crate::dgp::{simulate_panel, DgpConfig};
use crate::error::{Error, Result};
use crate::gmm::ThresholdModel;
use crate::grid::{GammaGrid, GridRule};
use crate::panel::{InstrumentSpec, ThresholdParams};
use crate::rng::{derive_seed, Scheme};
use crate::stats::{continuity_stat, distance_value};

/// Which quantities each replicate computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McTargets {
    /// Grid bootstrap and nonparametric intervals for `γ`.
    pub threshold_coverage: bool,
    /// Offsets `c` of the alternatives `γ₀ + c`; each is added to the grid.
    pub power_offsets: Vec<f64>,
    /// Residual and nonparametric intervals for `β` and `δ`.
    pub coefficient_cis: bool,
    pub continuity_test: bool,
    pub linearity_test: bool,
}

impl Default for McTargets {
    fn default() -> Self {
        Self {
            threshold_coverage: true,
            power_offsets: vec![0.1, 0.25, 0.5],
            coefficient_cis: false,
            continuity_test: false,
            linearity_test: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    /// Master seed; the bootstrap seed of each replicate is derived from it.
    pub seed: u64,
    pub bootstrap: BootstrapConfig,
    pub grid: GridRule,
    pub instruments: InstrumentSpec,
    pub targets: McTargets,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            reps: 200,
            seed: 1,
            bootstrap: BootstrapConfig {
                b: 200,
                ..BootstrapConfig::default()
            },
            grid: GridRule::Quantile {
                lo: 0.1,
                hi: 0.9,
                count: 21,
            },
            instruments: InstrumentSpec::default(),
            targets: McTargets::default(),
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.reps > u32::MAX as usize {
            return Err(Error::Config("reps is too large".into()));
        }
        if matches!(self.grid, GridRule::Explicit) {
            return Err(Error::Config(
                "the Monte Carlo grid must be a quantile rule".into(),
            ));
        }
        if self.targets.power_offsets.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("power offsets must be finite".into()));
        }
        self.dgp.validate()?;
        self.bootstrap.validate()
    }

    /// Seed of replicate `rep`.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, Scheme::MonteCarlo, rep as u64)
    }
}

/// Coverage and length of one interval family for `β` and `δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub covered: Vec<bool>,
    pub length: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRecord {
    pub rb: IntervalRecord,
    pub rb_s: IntervalRecord,
    pub np_b: IntervalRecord,
    pub np_b_s: IntervalRecord,
    pub w_n: f64,
    pub c_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub statistic: f64,
    pub p_value: f64,
    pub rejected: bool,
}

/// One Monte Carlo replicate. `error` is set when the replicate failed, in
/// which case it is excluded from every rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub rep: usize,
    pub seed: u64,
    pub error: Option<String>,
    pub gamma_hat: Option<f64>,
    /// `D_n(γ₀)`.
    pub d_n_truth: Option<f64>,
    pub grid_b_covered: Option<bool>,
    pub grid_b_convex_covered: Option<bool>,
    pub np_b_covered: Option<bool>,
    pub np_b_s_covered: Option<bool>,
    /// Rejection of `γ₀ + c`, in the order of `power_offsets`.
    pub grid_b_reject: Vec<bool>,
    pub np_b_s_reject: Vec<bool>,
    pub coefficients: Option<CoefRecord>,
    pub continuity: Option<TestRecord>,
    pub linearity: Option<TestRecord>,
    /// Failed bootstrap replicates summed over all schemes.
    pub bootstrap_failures: usize,
}

impl McRecord {
    fn blank(rep: usize, seed: u64) -> Self {
        Self {
            rep,
            seed,
            error: None,
            gamma_hat: None,
            d_n_truth: None,
            grid_b_covered: None,
            grid_b_convex_covered: None,
            np_b_covered: None,
            np_b_s_covered: None,
            grid_b_reject: Vec::new(),
            np_b_s_reject: Vec::new(),
            coefficients: None,
            continuity: None,
            linearity: None,
            bootstrap_failures: 0,
        }
    }

    fn failed(rep: usize, seed: u64, err: &Error) -> Self {
        Self {
            error: Some(err.to_string()),
            ..Self::blank(rep, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCoverage {
    pub grid_b: f64,
    pub grid_b_convex: f64,
    pub np_b: f64,
    pub np_b_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub c: f64,
    pub grid_b: f64,
    pub np_b_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub names: Vec<String>,
    pub coverage_rb: Vec<f64>,
    pub coverage_rb_s: Vec<f64>,
    pub coverage_np_b: Vec<f64>,
    pub coverage_np_b_s: Vec<f64>,
    pub mean_length_rb: Vec<f64>,
    pub mean_length_rb_s: Vec<f64>,
    pub mean_length_np_b: Vec<f64>,
    pub mean_length_np_b_s: Vec<f64>,
    /// `R-B / NP-B` average length ratio.
    pub ratio: Vec<f64>,
    /// `R-B(S) / NP-B(S)` average length ratio.
    pub ratio_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config: McConfig,
    pub completed: usize,
    pub failed: usize,
    pub bootstrap_failures: usize,
    pub threshold: Option<ThresholdCoverage>,
    pub power: Vec<PowerRow>,
    pub coefficients: Option<CoefSummary>,
    pub continuity_rejection: Option<f64>,
    pub linearity_rejection: Option<f64>,
    pub records: Vec<McRecord>,
}

/// Confidence set method for the threshold location.
pub type ThresholdCiMethod =
    dyn Fn(&BootstrapContext<'_>, &BootstrapConfig) -> Result<GridCi> + Sync;

/// Runs the experiment with the grid bootstrap.
pub fn run_mc(cfg: &McConfig) -> Result<McResult> {
    run_mc_with(cfg, &grid_bootstrap_ci)
}

/// Runs the experiment with a caller-supplied threshold confidence set.
pub fn run_mc_with(cfg: &McConfig, threshold_ci: &ThresholdCiMethod) -> Result<McResult> {
    cfg.validate()?;
    let started = Instant::now();
    let first = run_replicate(cfg, 0, threshold_ci);
    if cfg.reps > 1 {
        let per_rep = started.elapsed().as_secs_f64();
        let threads = rayon::current_num_threads().max(1);
        log::info!(
            "Monte Carlo: {} replicates, about {:.1}s each, estimated {:.0}s on {threads} threads",
            cfg.reps,
            per_rep,
            per_rep * cfg.reps as f64 / threads as f64
        );
    }
    let mut records = vec![first];
    records.extend(
        (1..cfg.reps)
            .into_par_iter()
            .map(|r| run_replicate(cfg, r, threshold_ci))
            .collect::<Vec<_>>(),
    );
    Ok(summarize(cfg, records))
}

fn run_replicate(cfg: &McConfig, rep: usize, threshold_ci: &ThresholdCiMethod) -> McRecord {
    let seed = cfg.rep_seed(rep);
    match replicate(cfg, rep, seed, threshold_ci) {
        Ok(rec) => rec,
        Err(err) => {
            log::warn!("Monte Carlo replicate {rep} failed: {err}");
            McRecord::failed(rep, seed, &err)
        }
    }
}

fn interval_record(cis: &CoefficientCis, truth: &[f64], symmetric: bool) -> IntervalRecord {
    let mut rec = IntervalRecord {
        covered: Vec::with_capacity(truth.len()),
        length: Vec::with_capacity(truth.len()),
    };
    for (ci, &v) in cis.coefficients.iter().zip(truth) {
        let [lo, hi] = if symmetric {
            ci.symmetric
        } else {
            ci.asymmetric
        };
        rec.covered.push(lo <= v && v <= hi);
        rec.length.push(hi - lo);
    }
    rec
}

fn replicate(
    cfg: &McConfig,
    rep: usize,
    seed: u64,
    threshold_ci: &ThresholdCiMethod,
) -> Result<McRecord> {
    let targets = &cfg.targets;
    let truth: ThresholdParams = cfg.dgp.true_params();
    let gamma0 = truth.gamma;
    let panel = simulate_panel(&cfg.dgp, seed)?;
    let base = GammaGrid::from_rule(&cfg.grid, &panel)?;
    let pooled = panel.pooled_q();
    let (q_lo, q_hi) = pooled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let extra: Vec<f64> = std::iter::once(gamma0)
        .chain(targets.power_offsets.iter().map(|c| gamma0 + c))
        .filter(|g| (q_lo..=q_hi).contains(g))
        .collect();
    let grid = base.with_points(&extra, &panel)?;
    let model = ThresholdModel::new(&panel, &cfg.instruments, grid)?;
    let fit = model.fit_unrestricted()?;
    let bcfg = BootstrapConfig {
        seed,
        ..cfg.bootstrap.clone()
    };
    let ctx = BootstrapContext::new(&model, &fit)?;
    let n = model.n();

    let mut rec = McRecord::blank(rep, seed);
    rec.gamma_hat = Some(fit.theta_hat.gamma);
    rec.d_n_truth = match model
        .grid()
        .index_of(gamma0)
        .and_then(|l| fit.profiled_curve[l].criterion)
    {
        Some(q) => Some(distance_value(n, q, fit.criterion)?),
        None => None,
    };

    let wants_threshold = targets.threshold_coverage || !targets.power_offsets.is_empty();
    if wants_threshold {
        let ci = threshold_ci(&ctx, &bcfg)?;
        rec.bootstrap_failures += ci.failures;
        rec.grid_b_covered = Some(ci.ci_set.contains(&gamma0));
        rec.grid_b_convex_covered = Some(ci.ci_convex[0] <= gamma0 && gamma0 <= ci.ci_convex[1]);
        rec.grid_b_reject = targets
            .power_offsets
            .iter()
            .map(|c| !ci.ci_set.contains(&(gamma0 + c)))
            .collect();
    }

    let np = if wants_threshold || targets.coefficient_cis {
        let np = nonparametric_bootstrap_ci(&ctx, &bcfg)?;
        rec.bootstrap_failures += np.failures;
        let gamma_ci = np.coefficients.last().expect("gamma interval");
        rec.np_b_covered = Some(gamma_ci.asymmetric_contains(gamma0));
        rec.np_b_s_covered = Some(gamma_ci.symmetric_contains(gamma0));
        rec.np_b_s_reject = targets
            .power_offsets
            .iter()
            .map(|c| !gamma_ci.symmetric_contains(gamma0 + c))
            .collect();
        Some(np)
    } else {
        None
    };

    if targets.coefficient_cis || targets.continuity_test {
        let kink = model.fit_continuity_restricted(&fit)?;
        let stat = continuity_stat(&fit, &kink)?;
        let test_reps = if targets.continuity_test {
            let reps = continuity_replicates(&ctx, &kink, &bcfg, bcfg.b)?;
            rec.bootstrap_failures += reps.failures;
            let crit = reps.quantile(1.0 - bcfg.tau);
            rec.continuity = Some(TestRecord {
                statistic: stat.value,
                p_value: reps.p_value(stat.value),
                rejected: stat.value > crit,
            });
            Some(reps)
        } else {
            None
        };
        if targets.coefficient_cis {
            let c_reps = match test_reps {
                Some(reps) if bcfg.b_c() == bcfg.b => reps,
                _ => {
                    let reps = continuity_replicates(&ctx, &kink, &bcfg, bcfg.b_c())?;
                    rec.bootstrap_failures += reps.failures;
                    reps
                }
            };
            let c_hat = c_hat_from(&c_reps, bcfg.c_hat.quantile_level)?;
            let rb = residual_bootstrap_with(&ctx, &kink, &bcfg, stat.value, c_hat)?;
            rec.bootstrap_failures += rb.failures;
            let np = np.as_ref().expect("nonparametric intervals computed");
            let alpha0 = truth.alpha();
            rec.coefficients = Some(CoefRecord {
                rb: interval_record(&rb, &alpha0, false),
                rb_s: interval_record(&rb, &alpha0, true),
                np_b: interval_record(np, &alpha0, false),
                np_b_s: interval_record(np, &alpha0, true),
                w_n: rb.w_n.unwrap_or(f64::NAN),
                c_hat,
            });
        }
    }

    if targets.linearity_test {
        let null_fit = model.fit_linear_null()?;
        let out = linearity_bootstrap_test(&ctx, &null_fit, &bcfg)?;
        rec.bootstrap_failures += out.failures;
        rec.linearity = Some(TestRecord {
            statistic: out.report.value,
            p_value: out.report.p_value.unwrap_or(f64::NAN),
            rejected: out.rejected,
        });
    }
    Ok(rec)
}

fn rate<'a>(flags: impl Iterator<Item = Option<bool>> + 'a) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for f in flags.flatten() {
        total += 1;
        hit += usize::from(f);
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for v in values {
        s += v;
        c += 1;
    }
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

fn summarize(cfg: &McConfig, records: Vec<McRecord>) -> McResult {
    let ok: Vec<&McRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let threshold = match (
        rate(ok.iter().map(|r| r.grid_b_covered)),
        rate(ok.iter().map(|r| r.grid_b_convex_covered)),
        rate(ok.iter().map(|r| r.np_b_covered)),
        rate(ok.iter().map(|r| r.np_b_s_covered)),
    ) {
        (Some(grid_b), Some(grid_b_convex), Some(np_b), Some(np_b_s))
            if cfg.targets.threshold_coverage =>
        {
            Some(ThresholdCoverage {
                grid_b,
                grid_b_convex,
                np_b,
                np_b_s,
            })
        }
        _ => None,
    };
    let power = cfg
        .targets
        .power_offsets
        .iter()
        .enumerate()
        .filter_map(|(j, &c)| {
            Some(PowerRow {
                c,
                grid_b: rate(ok.iter().map(|r| r.grid_b_reject.get(j).copied()))?,
                np_b_s: rate(ok.iter().map(|r| r.np_b_s_reject.get(j).copied()))?,
            })
        })
        .collect();
    let coef: Vec<&CoefRecord> = ok.iter().filter_map(|r| r.coefficients.as_ref()).collect();
    let coefficients = (!coef.is_empty()).then(|| {
        let p = cfg.dgp.true_params().p();
        let names: Vec<String> = (1..=p)
            .map(|j| format!("beta_{}", j + 1))
            .chain((1..=p + 1).map(|j| format!("delta_{j}")))
            .collect();
        let k = names.len();
        let cov = |f: fn(&CoefRecord) -> &IntervalRecord| -> Vec<f64> {
            (0..k)
                .map(|j| rate(coef.iter().map(|c| Some(f(c).covered[j]))).unwrap_or(f64::NAN))
                .collect()
        };
        let len = |f: fn(&CoefRecord) -> &IntervalRecord| -> Vec<f64> {
            (0..k)
                .map(|j| mean(coef.iter().map(|c| f(c).length[j])))
                .collect()
        };
        let (l_rb, l_rbs, l_np, l_nps) = (
            len(|c| &c.rb),
            len(|c| &c.rb_s),
            len(|c| &c.np_b),
            len(|c| &c.np_b_s),
        );
        CoefSummary {
            coverage_rb: cov(|c| &c.rb),
            coverage_rb_s: cov(|c| &c.rb_s),
            coverage_np_b: cov(|c| &c.np_b),
            coverage_np_b_s: cov(|c| &c.np_b_s),
            ratio: l_rb.iter().zip(&l_np).map(|(a, b)| a / b).collect(),
            ratio_s: l_rbs.iter().zip(&l_nps).map(|(a, b)| a / b).collect(),
            mean_length_rb: l_rb,
            mean_length_rb_s: l_rbs,
            mean_length_np_b: l_np,
            mean_length_np_b_s: l_nps,
            names,
        }
    });
    McResult {
        config: cfg.clone(),
        completed: ok.len(),
        failed: records.len() - ok.len(),
        bootstrap_failures: records.iter().map(|r| r.bootstrap_failures).sum(),
        threshold,
        power,
        coefficients,
        continuity_rejection: rate(ok.iter().map(|r| r.continuity.as_ref().map(|t| t.rejected))),
        linearity_rejection: rate(ok.iter().map(|r| r.linearity.as_ref().map(|t| t.rejected))),
        records,
    }
}

/// Six significant digits.
pub fn format_sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

impl McResult {
    /// Writes the table CSVs and `records.json` into `dir`; returns the paths written.
    pub fn write_tables(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let n = self.config.dgp.n.to_string();
        let jump = format_sig6(self.config.dgp.jump());
        let mut written = Vec::new();
        let mut table = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(header)?;
            for row in rows {
                w.write_record(row)?;
            }
            w.flush()?;
            written.push(path);
            Ok(())
        };

        if let Some(t) = &self.threshold {
            let rows = [
                ("Grid-B", t.grid_b),
                ("Grid-B(convex)", t.grid_b_convex),
                ("NP-B", t.np_b),
                ("NP-B(S)", t.np_b_s),
            ]
            .iter()
            .map(|(m, v)| vec![m.to_string(), n.clone(), jump.clone(), format_sig6(*v)])
            .collect();
            table(
                "table1_coverage.csv",
                &["method", "n", "jump", "coverage"],
                rows,
            )?;
        }
        if !self.power.is_empty() {
            let rows = self
                .power
                .iter()
                .map(|p| {
                    vec![
                        format_sig6(p.c),
                        n.clone(),
                        jump.clone(),
                        format_sig6(p.grid_b),
                        format_sig6(p.np_b_s),
                    ]
                })
                .collect();
            table(
                "table2_power.csv",
                &["c", "n", "jump", "Grid-B", "NP-B(S)"],
                rows,
            )?;
        }
        if let Some(c) = &self.coefficients {
            let header: Vec<&str> = ["method", "n", "jump"]
                .into_iter()
                .chain(c.names.iter().map(String::as_str))
                .collect();
            let row = |m: &str, vals: &[f64]| -> Vec<String> {
                [m.to_string(), n.clone(), jump.clone()]
                    .into_iter()
                    .chain(vals.iter().map(|v| format_sig6(*v)))
                    .collect()
            };
            let rows = vec![
                row("R-B", &c.coverage_rb),
                row("NP-B", &c.coverage_np_b),
                row("R-B(S)", &c.coverage_rb_s),
                row("NP-B(S)", &c.coverage_np_b_s),
            ];
            table("table3_coef_coverage.csv", &header, rows)?;
            let rows = vec![row("R-B/NP-B", &c.ratio), row("R-B(S)/NP-B(S)", &c.ratio_s)];
            table("table4_length_ratio.csv", &header, rows)?;
        }
        let mut tests = Vec::new();
        if let Some(r) = self.continuity_rejection {
            tests.push(vec![
                "continuity".into(),
                n.clone(),
                jump.clone(),
                format_sig6(r),
            ]);
        }
        if let Some(r) = self.linearity_rejection {
            tests.push(vec![
                "linearity".into(),
                n.clone(),
                jump.clone(),
                format_sig6(r),
            ]);
        }
        if !tests.is_empty() {
            table("tests.csv", &["test", "n", "jump", "rejection_rate"], tests)?;
        }

        let path = dir.join("records.json");
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &self.records)?;
        w.flush()?;
        written.push(path);
        Ok(written)
    }
}
