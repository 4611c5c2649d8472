//! `dptr`: estimation, bootstrap inference, simulation and Monte Carlo
//! experiments for dynamic panel threshold regressions.
//!
//! Every artifact-producing command writes its outputs plus one
//! `manifest.json` into `--out`. Exit codes: 0 success, 1 runtime or
//! estimation failure, 2 usage error.

mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dptr_core::bootstrap::{
    continuity_bootstrap_test, grid_bootstrap_ci, linearity_bootstrap_test, residual_bootstrap_ci,
    write_grid_curve, BootstrapConfig, BootstrapContext, CHatRule,
};
use dptr_core::mc::{run_mc, McConfig};
use dptr_core::{
    load_panel, simulate_panel, write_panel_csv, DgpConfig, GammaGrid, GridRule, InstrumentSpec,
    LagRange, PanelDataset, PanelSchema, ThresholdModel,
};

use manifest::{Outputs, RunManifest};

/// Invalid flag or configuration content, reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "dptr",
    version,
    about = "Dynamic panel threshold regression: GMM and bootstrap inference"
)]
struct Cli {
    /// Worker threads for bootstrap and Monte Carlo tasks (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "dptr-out")]
    out: PathBuf,

    /// Master seed.
    #[arg(long, global = true, env = "DPTR_SEED")]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-stage GMM fit; writes fit.json and the profiled criterion curve.
    Estimate(DataArgs),
    /// Grid bootstrap confidence set for the threshold location.
    CiGrid {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Residual bootstrap confidence intervals for the coefficients.
    CiResid {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Bootstrap test of continuity at the threshold.
    TestContinuity {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Bootstrap sup-Wald test of linearity.
    TestLinearity {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Simulates a panel from the Monte Carlo design.
    Simulate(SimArgs),
    /// Runs a Monte Carlo experiment described by a TOML file.
    Mc(McArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct DataArgs {
    /// Long-format panel CSV.
    panel: PathBuf,
    /// Threshold variable column.
    #[arg(long)]
    threshold: String,
    #[arg(long, default_value = "unit")]
    unit: String,
    #[arg(long, default_value = "time")]
    time: String,
    #[arg(long, default_value = "y")]
    y: String,
    /// Regressor columns (comma separated); default: all remaining columns.
    #[arg(long, value_delimiter = ',')]
    regressors: Option<Vec<String>>,
    /// First period used in estimation.
    #[arg(long, default_value_t = 3)]
    t0: usize,
    /// Lags of y used as instruments: `FIRST`, `FIRST:LAST` or `none`.
    #[arg(long, default_value = "2")]
    iv_y_lags: String,
    /// Lags of the threshold variable used as instruments.
    #[arg(long, default_value = "1")]
    iv_q_lags: String,
    /// Threshold grid, `quantile:LO:HI:COUNT`.
    #[arg(long, default_value = "quantile:0.1:0.9:81")]
    grid: String,
    /// Extra grid points (comma separated).
    #[arg(long, value_delimiter = ',')]
    grid_add: Vec<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BootArgs {
    /// Significance level.
    #[arg(long)]
    tau: Option<f64>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    b: Option<usize>,
    /// Replicates for the continuity bootstrap behind C-hat (default: B).
    #[arg(long = "B-c")]
    b_c: Option<usize>,
    /// Quantile level of the continuity bootstrap used as C-hat.
    #[arg(long)]
    c_hat_level: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimArgs {
    /// TOML file with design fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    periods: Option<usize>,
    /// Sets delta1 so that the regression function jumps by this amount.
    #[arg(long)]
    jump: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rho_eu: Option<f64>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    fixed_effect_sd: Option<f64>,
    /// Linear design (delta = 0).
    #[arg(long)]
    linear: bool,
    /// Output file name inside `--out`.
    #[arg(long, default_value = "panel.csv")]
    file: String,
}

#[derive(Args, Debug, Clone, Serialize)]
struct McArgs {
    /// TOML experiment description.
    config: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[command(flatten)]
    boot: BootArgs,
}

const DEFAULT_SEED: u64 = 1;

fn parse_lags(text: &str, flag: &str) -> Result<Option<LagRange>> {
    let bad = || {
        usage(format!(
            "--{flag}: expected FIRST, FIRST:LAST or none, got `{text}`"
        ))
    };
    if text.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    match text.split_once(':') {
        None => Ok(Some(LagRange::from(
            text.trim().parse().map_err(|_| bad())?,
        ))),
        Some((a, b)) => Ok(Some(LagRange::bounded(
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ))),
    }
}

impl DataArgs {
    fn instruments(&self) -> Result<InstrumentSpec> {
        Ok(InstrumentSpec {
            t0: self.t0,
            y_lags: parse_lags(&self.iv_y_lags, "iv-y-lags")?,
            q_lags: parse_lags(&self.iv_q_lags, "iv-q-lags")?,
            x_lags: Vec::new(),
        })
    }

    fn load(&self) -> Result<(PanelDataset, ThresholdModel)> {
        let rule = GridRule::parse(&self.grid).map_err(|e| usage(format!("--grid: {e}")))?;
        let spec = self.instruments()?;
        let schema = PanelSchema {
            unit: self.unit.clone(),
            time: self.time.clone(),
            y: self.y.clone(),
            threshold: self.threshold.clone(),
            regressors: self.regressors.clone(),
        };
        let file = File::open(&self.panel)
            .with_context(|| format!("cannot open {}", self.panel.display()))?;
        let panel = load_panel(BufReader::new(file), &schema)?;
        let mut grid = GammaGrid::from_rule(&rule, &panel)?;
        if !self.grid_add.is_empty() {
            grid = grid.with_points(&self.grid_add, &panel)?;
        }
        let model = ThresholdModel::new(&panel, &spec, grid)?;
        Ok((panel, model))
    }
}

impl BootArgs {
    /// Flags override `base`.
    fn apply(&self, mut base: BootstrapConfig, seed: Option<u64>) -> Result<BootstrapConfig> {
        if let Some(tau) = self.tau {
            base.tau = tau;
        }
        if let Some(b) = self.b {
            base.b = b;
        }
        if let Some(b_c) = self.b_c {
            base.c_hat.b_c = Some(b_c);
        }
        if let Some(level) = self.c_hat_level {
            base.c_hat = CHatRule {
                quantile_level: level,
                ..base.c_hat
            };
        }
        if let Some(seed) = seed {
            base.seed = seed;
        }
        base.validate().map_err(|e| usage(e.to_string()))?;
        Ok(base)
    }

    fn resolve(&self, seed: Option<u64>) -> Result<BootstrapConfig> {
        self.apply(
            BootstrapConfig {
                seed: DEFAULT_SEED,
                ..BootstrapConfig::default()
            },
            seed,
        )
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    );
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_curve(path: &Path, rows: &[dptr_core::gmm::CurveRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "gamma,Qtilde")?;
    for r in rows {
        let q = r.qtilde.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(w, "{:?},{q}", r.gamma)?;
    }
    w.flush()?;
    Ok(())
}

fn write_residuals(path: &Path, fit: &dptr_core::GmmFit, panel: &PanelDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let times = panel.times();
    let first = times.len() - fit.residuals.ncols();
    write!(w, "unit")?;
    for t in &times[first..] {
        write!(w, ",{t}")?;
    }
    writeln!(w)?;
    for (i, unit) in panel.unit_ids().iter().enumerate() {
        write!(w, "{unit}")?;
        for s in 0..fit.residuals.ncols() {
            write!(w, ",{:?}", fit.residuals[(i, s)])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_estimate(data: &DataArgs, out: &mut Outputs) -> Result<serde_json::Value> {
    let (panel, model) = data.load()?;
    let fit = model.fit_unrestricted()?;
    let mut report = fit.report();
    let resid = out.path("residuals.csv");
    write_residuals(&resid, &fit, &panel)?;
    report.residuals.path = Some("residuals.csv".into());
    write_json(&out.path("fit.json"), &report)?;
    write_curve(&out.path("curve.csv"), &report.profiled_curve)?;
    Ok(serde_json::json!({ "gamma_hat": fit.theta_hat.gamma, "criterion": fit.criterion }))
}

fn cmd_ci_grid(
    data: &DataArgs,
    boot: &BootstrapConfig,
    out: &mut Outputs,
) -> Result<serde_json::Value> {
    let (_, model) = data.load()?;
    let fit = model.fit_unrestricted()?;
    let ctx = BootstrapContext::new(&model, &fit)?;
    let ci = grid_bootstrap_ci(&ctx, boot)?;
    let excluded: Vec<f64> = ci
        .points
        .iter()
        .filter(|p| p.d_n.is_none())
        .map(|p| p.gamma)
        .collect();
    if !excluded.is_empty() {
        out.warn(format!(
            "restricted fit unavailable at {} grid points: {excluded:?}",
            excluded.len()
        ));
    }
    write_json(
        &out.path("ci_grid.json"),
        &serde_json::json!({ "estimate": fit.report(), "ci": ci }),
    )?;
    write_grid_curve(
        &ci,
        BufWriter::new(File::create(out.path("grid_curve.csv"))?),
    )?;
    Ok(
        serde_json::json!({ "gamma_hat": fit.theta_hat.gamma, "ci_convex": ci.ci_convex, "failures": ci.failures }),
    )
}

fn cmd_ci_resid(
    data: &DataArgs,
    boot: &BootstrapConfig,
    out: &mut Outputs,
) -> Result<serde_json::Value> {
    let (_, model) = data.load()?;
    let fit = model.fit_unrestricted()?;
    let kink = model.fit_continuity_restricted(&fit)?;
    let ctx = BootstrapContext::new(&model, &fit)?;
    let cis = residual_bootstrap_ci(&ctx, &kink, boot)?;
    write_json(&out.path("ci_resid.json"), &cis)?;
    Ok(serde_json::json!({ "w_n": cis.w_n, "c_hat": cis.c_hat, "failures": cis.failures }))
}

fn cmd_test_continuity(
    data: &DataArgs,
    boot: &BootstrapConfig,
    out: &mut Outputs,
) -> Result<serde_json::Value> {
    let (_, model) = data.load()?;
    let fit = model.fit_unrestricted()?;
    let kink = model.fit_continuity_restricted(&fit)?;
    let ctx = BootstrapContext::new(&model, &fit)?;
    let outcome = continuity_bootstrap_test(&ctx, &kink, boot)?;
    write_json(&out.path("test_continuity.json"), &outcome)?;
    Ok(serde_json::json!({ "statistic": outcome.report.value, "p_value": outcome.report.p_value }))
}

fn cmd_test_linearity(
    data: &DataArgs,
    boot: &BootstrapConfig,
    out: &mut Outputs,
) -> Result<serde_json::Value> {
    let (_, model) = data.load()?;
    let fit = model.fit_unrestricted()?;
    let null_fit = model.fit_linear_null()?;
    let ctx = BootstrapContext::new(&model, &fit)?;
    let outcome = linearity_bootstrap_test(&ctx, &null_fit, boot)?;
    write_json(&out.path("test_linearity.json"), &outcome)?;
    Ok(serde_json::json!({ "statistic": outcome.report.value, "p_value": outcome.report.p_value }))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn sim_config(args: &SimArgs) -> Result<DgpConfig> {
    let mut cfg: DgpConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => DgpConfig::default(),
    };
    if args.linear {
        cfg.delta1 = 0.0;
        cfg.delta2 = 0.0;
        cfg.delta3 = 0.0;
    }
    if let Some(jump) = args.jump {
        cfg.delta1 = jump - cfg.delta3 * cfg.gamma;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { cfg.$f = v; })* };
    }
    set!(n, periods, sigma, rho, rho_eu, burn_in, fixed_effect_sd);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_simulate(args: &SimArgs, seed: u64, out: &mut Outputs) -> Result<serde_json::Value> {
    let cfg = sim_config(args)?;
    let panel = simulate_panel(&cfg, seed)?;
    let path = out.path(&args.file);
    let mut w = BufWriter::new(File::create(&path)?);
    write_panel_csv(&panel, &mut w)?;
    w.flush()?;
    Ok(serde_json::to_value(&cfg)?)
}

fn mc_config(args: &McArgs, seed: Option<u64>) -> Result<McConfig> {
    let mut cfg: McConfig = read_toml(&args.config)?;
    if let Some(reps) = args.reps {
        cfg.reps = reps;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.bootstrap = args.boot.apply(cfg.bootstrap.clone(), None)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_mc(cfg: &McConfig, out: &mut Outputs) -> Result<serde_json::Value> {
    let result = run_mc(cfg)?;
    for path in result.write_tables(out.dir())? {
        out.record(&path);
    }
    write_json(&out.path("mc_result.json"), &result)?;
    Ok(serde_json::json!({
        "completed": result.completed,
        "failed": result.failed,
        "bootstrap_failures": result.bootstrap_failures,
    }))
}

fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let mut out = Outputs::new(&cli.out)?;
    let seed = cli.seed;
    let (name, config, master_seed, summary) = match &cli.command {
        Command::Estimate(data) => {
            let summary = cmd_estimate(data, &mut out)?;
            (
                "estimate",
                serde_json::json!({ "data": data }),
                None,
                summary,
            )
        }
        Command::CiGrid { data, boot } => {
            let b = boot.resolve(seed)?;
            let summary = cmd_ci_grid(data, &b, &mut out)?;
            (
                "ci-grid",
                serde_json::json!({ "data": data, "bootstrap": b }),
                Some(b.seed),
                summary,
            )
        }
        Command::CiResid { data, boot } => {
            let b = boot.resolve(seed)?;
            let summary = cmd_ci_resid(data, &b, &mut out)?;
            (
                "ci-resid",
                serde_json::json!({ "data": data, "bootstrap": b }),
                Some(b.seed),
                summary,
            )
        }
        Command::TestContinuity { data, boot } => {
            let b = boot.resolve(seed)?;
            let summary = cmd_test_continuity(data, &b, &mut out)?;
            (
                "test-continuity",
                serde_json::json!({ "data": data, "bootstrap": b }),
                Some(b.seed),
                summary,
            )
        }
        Command::TestLinearity { data, boot } => {
            let b = boot.resolve(seed)?;
            let summary = cmd_test_linearity(data, &b, &mut out)?;
            (
                "test-linearity",
                serde_json::json!({ "data": data, "bootstrap": b }),
                Some(b.seed),
                summary,
            )
        }
        Command::Simulate(args) => {
            let s = seed.unwrap_or(DEFAULT_SEED);
            let cfg = cmd_simulate(args, s, &mut out)?;
            (
                "simulate",
                serde_json::json!({ "dgp": cfg }),
                Some(s),
                serde_json::Value::Null,
            )
        }
        Command::Mc(args) => {
            let cfg = mc_config(args, seed)?;
            let summary = cmd_mc(&cfg, &mut out)?;
            ("mc", serde_json::to_value(&cfg)?, Some(cfg.seed), summary)
        }
    };
    let manifest = RunManifest {
        command: name.to_string(),
        config,
        seed: master_seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_seconds: started.elapsed().as_secs_f64(),
        outputs: out.files(),
        warnings: out.warnings().to_vec(),
        summary,
    };
    write_json(&out.dir().join("manifest.json"), &manifest)?;
    println!("{}", serde_json::to_string(&manifest.summary)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.workers {
        Some(0) => Err(usage("--workers must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| run(&cli))),
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if err.is::<UsageError>() => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_flags() {
        assert_eq!(parse_lags("2", "x").unwrap(), Some(LagRange::from(2)));
        assert_eq!(
            parse_lags("2:4", "x").unwrap(),
            Some(LagRange::bounded(2, 4))
        );
        assert_eq!(parse_lags("none", "x").unwrap(), None);
        assert!(parse_lags("two", "x").unwrap_err().is::<UsageError>());
    }

    #[test]
    fn boot_flags_override_base() {
        let args = BootArgs {
            tau: Some(0.1),
            b: None,
            b_c: Some(50),
            c_hat_level: None,
        };
        let base = BootstrapConfig {
            b: 99,
            ..BootstrapConfig::default()
        };
        let cfg = args.apply(base, Some(7)).unwrap();
        assert_eq!((cfg.b, cfg.tau, cfg.seed, cfg.b_c()), (99, 0.1, 7, 50));
        assert_eq!(
            BootArgs {
                tau: None,
                b: None,
                b_c: None,
                c_hat_level: None
            }
            .resolve(None)
            .unwrap()
            .tau,
            0.05
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
