//! Balanced panel data, first differences, instruments and the stacked moment
//! vector of the first-differenced threshold model.
//!
//! Periods are 1-based throughout the public API: levels run over `1..=T`,
//! moment conditions over `t0..=T`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Balanced panel in levels. The last regressor column is the threshold variable.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n: usize,
    periods: usize,
    p: usize,
    y: Vec<f64>,
    x: Vec<f64>,
    unit_ids: Vec<String>,
    times: Vec<i64>,
    x_names: Vec<String>,
}

impl PanelDataset {
    /// Builds a panel from unit-major outcome rows (`n` rows of length `T`) and
    /// regressor arrays (`n*T*p`, unit-major, then period, then column).
    pub fn new(
        unit_ids: Vec<String>,
        times: Vec<i64>,
        x_names: Vec<String>,
        y: Vec<f64>,
        x: Vec<f64>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let periods = times.len();
        let p = x_names.len();
        if n == 0 || periods == 0 {
            return Err(Error::Dimension(
                "panel needs at least one unit and one period".into(),
            ));
        }
        if p == 0 {
            return Err(Error::Dimension(
                "panel needs at least the threshold regressor".into(),
            ));
        }
        if y.len() != n * periods {
            return Err(Error::Dimension(format!(
                "outcome has {} values, expected {}",
                y.len(),
                n * periods
            )));
        }
        if x.len() != n * periods * p {
            return Err(Error::Dimension(format!(
                "regressors have {} values, expected {}",
                x.len(),
                n * periods * p
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dimension("panel contains non-finite values".into()));
        }
        Ok(Self {
            n,
            periods,
            p,
            y,
            x,
            unit_ids,
            times,
            x_names,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of periods `T`.
    pub fn periods(&self) -> usize {
        self.periods
    }

    /// Number of regressors `p` (threshold variable included).
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    /// Outcome `y_it`, `t` in `1..=T`.
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.periods + t - 1]
    }

    /// Regressor row `x_it`, `t` in `1..=T`.
    pub fn x(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.periods + t - 1) * self.p;
        &self.x[start..start + self.p]
    }

    /// Threshold variable `q_it`.
    pub fn q(&self, i: usize, t: usize) -> f64 {
        self.x(i, t)[self.p - 1]
    }

    /// All threshold-variable observations, pooled.
    pub fn pooled_q(&self) -> Vec<f64> {
        self.x
            .iter()
            .skip(self.p - 1)
            .step_by(self.p)
            .copied()
            .collect()
    }
}

/// Column mapping for long-format CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelSchema {
    pub unit: String,
    pub time: String,
    pub y: String,
    pub threshold: String,
    /// Regressor columns; `None` takes every remaining column in header order.
    pub regressors: Option<Vec<String>>,
}

impl PanelSchema {
    pub fn new(threshold: impl Into<String>) -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            y: "y".into(),
            threshold: threshold.into(),
            regressors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum UnitKey {
    Numeric(i64, String),
    Text(String),
}

impl UnitKey {
    fn parse(raw: &str) -> Self {
        match raw.parse::<i64>() {
            Ok(v) => UnitKey::Numeric(v, raw.to_string()),
            Err(_) => UnitKey::Text(raw.to_string()),
        }
    }

    fn label(&self) -> &str {
        match self {
            UnitKey::Numeric(_, s) | UnitKey::Text(s) => s,
        }
    }
}

impl Ord for UnitKey {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (UnitKey::Numeric(a, sa), UnitKey::Numeric(b, sb)) => a.cmp(b).then_with(|| sa.cmp(sb)),
            (UnitKey::Numeric(..), UnitKey::Text(_)) => Ordering::Less,
            (UnitKey::Text(_), UnitKey::Numeric(..)) => Ordering::Greater,
            (UnitKey::Text(a), UnitKey::Text(b)) => a.cmp(b),
        }
    }
}

impl PartialOrd for UnitKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Reads a long-format panel (`unit,time,y,x...`). Rows may come in any
/// order; the result is sorted by (unit, time) with the threshold column last.
pub fn load_panel<R: Read>(source: R, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let unit_col = find(&schema.unit)?;
    let time_col = find(&schema.time)?;
    let y_col = find(&schema.y)?;
    let threshold_col = find(&schema.threshold)?;

    let mut regressor_names: Vec<String> = match &schema.regressors {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != unit_col && *j != time_col && *j != y_col)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    regressor_names.retain(|name| name != &schema.threshold);
    regressor_names.push(schema.threshold.clone());
    let regressor_cols = regressor_names
        .iter()
        .map(|name| find(name))
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(*regressor_cols.last().unwrap(), threshold_col);

    let mut cells: BTreeMap<UnitKey, BTreeMap<i64, (f64, Vec<f64>)>> = BTreeMap::new();
    let mut all_times = BTreeSet::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(idx + 2);
        let field = |col: usize| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing field {}", headers.get(col).unwrap_or("?")),
            })
        };
        let number = |col: usize| -> Result<f64> {
            let raw = field(col)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    message: format!("column `{}`: `{raw}` is not a finite number", &headers[col]),
                })
        };
        let unit = UnitKey::parse(field(unit_col)?);
        let time_raw = field(time_col)?;
        let time = time_raw.parse::<i64>().map_err(|_| Error::Parse {
            row,
            message: format!(
                "column `{}`: `{time_raw}` is not an integer",
                &headers[time_col]
            ),
        })?;
        let y = number(y_col)?;
        let x = regressor_cols
            .iter()
            .map(|&c| number(c))
            .collect::<Result<Vec<_>>>()?;
        all_times.insert(time);
        let per_unit = cells.entry(unit.clone()).or_default();
        if per_unit.insert(time, (y, x)).is_some() {
            return Err(Error::DuplicateCell {
                unit: unit.label().to_string(),
                time,
            });
        }
    }

    let mut missing = Vec::new();
    for (unit, per_unit) in &cells {
        for t in &all_times {
            if !per_unit.contains_key(t) {
                missing.push((unit.label().to_string(), *t));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Unbalanced { missing });
    }

    let p = regressor_names.len();
    let mut y = Vec::with_capacity(cells.len() * all_times.len());
    let mut x = Vec::with_capacity(cells.len() * all_times.len() * p);
    let mut unit_ids = Vec::with_capacity(cells.len());
    for (unit, per_unit) in cells {
        unit_ids.push(unit.label().to_string());
        for (_, (yv, xv)) in per_unit {
            y.push(yv);
            x.extend(xv);
        }
    }
    PanelDataset::new(
        unit_ids,
        all_times.into_iter().collect(),
        regressor_names,
        y,
        x,
    )
}

/// Writes the panel in long format with full round-trip precision.
pub fn write_panel_csv<W: Write>(panel: &PanelDataset, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec!["unit".to_string(), "time".to_string(), "y".to_string()];
    header.extend(panel.x_names.iter().cloned());
    writer.write_record(&header)?;
    for i in 0..panel.n {
        for t in 1..=panel.periods {
            let mut row = vec![
                panel.unit_ids[i].clone(),
                panel.times[t - 1].to_string(),
                format_float(panel.y(i, t)),
            ];
            row.extend(panel.x(i, t).iter().map(|v| format_float(*v)));
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Shortest decimal representation that parses back to the same bits.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Full parameter point: slopes `beta` (length p), regime shifts `delta`
/// (length p+1, ordered intercept, non-threshold slopes, threshold slope) and
/// the threshold location `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: f64,
}

impl ThresholdParams {
    pub fn new(beta: Vec<f64>, delta: Vec<f64>, gamma: f64) -> Result<Self> {
        if beta.is_empty() || delta.len() != beta.len() + 1 {
            return Err(Error::Dimension(format!(
                "beta has length {}, delta has length {} (expected p and p+1)",
                beta.len(),
                delta.len()
            )));
        }
        Ok(Self { beta, delta, gamma })
    }

    /// Splits a coefficient vector `alpha = (beta', delta')'` of length 2p+1.
    pub fn from_alpha(alpha: &[f64], gamma: f64) -> Result<Self> {
        if alpha.len() < 3 || alpha.len() % 2 == 0 {
            return Err(Error::Dimension(format!(
                "alpha has even or too small length {}",
                alpha.len()
            )));
        }
        let p = (alpha.len() - 1) / 2;
        Self::new(alpha[..p].to_vec(), alpha[p..].to_vec(), gamma)
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.beta.iter().chain(self.delta.iter()).copied().collect()
    }

    pub fn delta1(&self) -> f64 {
        self.delta[0]
    }

    pub fn delta2(&self) -> &[f64] {
        &self.delta[1..self.delta.len() - 1]
    }

    pub fn delta3(&self) -> f64 {
        self.delta[self.delta.len() - 1]
    }

    /// Size of the discontinuity in the intercept at the threshold, `delta1 + delta3*gamma`.
    pub fn jump(&self) -> f64 {
        self.delta1() + self.delta3() * self.gamma
    }

    /// Componentwise `w*self + (1-w)*other`, the threshold location included.
    pub fn convex_combination(&self, other: &Self, w: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| w * x + (1.0 - w) * y)
                .collect()
        };
        Self {
            beta: mix(&self.beta, &other.beta),
            delta: mix(&self.delta, &other.delta),
            gamma: w * self.gamma + (1.0 - w) * other.gamma,
        }
    }
}

/// Panel after first differencing. Differences are stored for `t = 2..=T`;
/// levels are kept so the regime rows `X_it` can be rebuilt for any threshold.
#[derive(Debug, Clone)]
pub struct DiffPanel {
    n: usize,
    periods: usize,
    p: usize,
    dy: Vec<f64>,
    dx: Vec<f64>,
    x_levels: Vec<f64>,
}

pub fn first_difference(panel: &PanelDataset) -> Result<DiffPanel> {
    let (n, periods, p) = (panel.n, panel.periods, panel.p);
    if periods < 2 {
        return Err(Error::Dimension(format!(
            "first differencing needs T >= 2, got T = {periods}"
        )));
    }
    let mut dy = Vec::with_capacity(n * (periods - 1));
    let mut dx = Vec::with_capacity(n * (periods - 1) * p);
    for i in 0..n {
        for t in 2..=periods {
            dy.push(panel.y(i, t) - panel.y(i, t - 1));
            dx.extend(
                panel
                    .x(i, t)
                    .iter()
                    .zip(panel.x(i, t - 1))
                    .map(|(a, b)| a - b),
            );
        }
    }
    Ok(DiffPanel {
        n,
        periods,
        p,
        dy,
        dx,
        x_levels: panel.x.clone(),
    })
}

impl DiffPanel {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// `Δy_it`, `t` in `2..=T`.
    pub fn dy(&self, i: usize, t: usize) -> f64 {
        self.dy[i * (self.periods - 1) + t - 2]
    }

    /// `Δx_it`, `t` in `2..=T`.
    pub fn dx(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * (self.periods - 1) + t - 2) * self.p;
        &self.dx[start..start + self.p]
    }

    /// Level regressors `x_it`, `t` in `1..=T`.
    pub fn x_level(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.periods + t - 1) * self.p;
        &self.x_levels[start..start + self.p]
    }

    /// `(q_it, q_i,t-1)`.
    pub fn q_pair(&self, i: usize, t: usize) -> (f64, f64) {
        (
            self.x_level(i, t)[self.p - 1],
            self.x_level(i, t - 1)[self.p - 1],
        )
    }

    /// `(1{q_it > γ}, -1{q_i,t-1 > γ})`; ties fall in the lower regime.
    pub fn regime_indicator(&self, i: usize, t: usize, gamma: f64) -> (f64, f64) {
        let (q, q_lag) = self.q_pair(i, t);
        (indicator(q > gamma), -indicator(q_lag > gamma))
    }

    /// `1_it(γ)'X_it`, a row of length p+1.
    pub fn regime_row(&self, i: usize, t: usize, gamma: f64) -> Vec<f64> {
        let (cur, lag) = self.regime_indicator(i, t, gamma);
        let x_cur = self.x_level(i, t);
        let x_lag = self.x_level(i, t - 1);
        let mut row = Vec::with_capacity(self.p + 1);
        row.push(cur + lag);
        row.extend(x_cur.iter().zip(x_lag).map(|(a, b)| cur * a + lag * b));
        row
    }

    /// Structural residual `Δy_it - Δx_it'β - 1_it(γ)'X_it δ`.
    pub fn residual(&self, i: usize, t: usize, theta: &ThresholdParams) -> f64 {
        let slope: f64 = self
            .dx(i, t)
            .iter()
            .zip(&theta.beta)
            .map(|(a, b)| a * b)
            .sum();
        let regime: f64 = self
            .regime_row(i, t, theta.gamma)
            .iter()
            .zip(&theta.delta)
            .map(|(a, b)| a * b)
            .sum();
        self.dy(i, t) - slope - regime
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Inclusive lag range `first..=last`; `last = None` reaches back to period 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagRange {
    pub first: usize,
    pub last: Option<usize>,
}

impl LagRange {
    pub fn from(first: usize) -> Self {
        Self { first, last: None }
    }

    pub fn bounded(first: usize, last: usize) -> Self {
        Self {
            first,
            last: Some(last),
        }
    }

    fn lags_at(&self, t: usize) -> Result<Vec<usize>> {
        if self.first == 0 {
            return Err(Error::InstrumentSpec {
                t,
                lag: 0,
                message: "contemporaneous instruments are not valid for differenced errors".into(),
            });
        }
        if let Some(last) = self.last {
            if last < self.first {
                return Err(Error::InstrumentSpec {
                    t,
                    lag: last,
                    message: format!("empty lag range {}..={last}", self.first),
                });
            }
        }
        let deepest = self.last.unwrap_or(t.saturating_sub(1));
        if self.first >= t || deepest >= t {
            let lag = if self.first >= t { self.first } else { deepest };
            return Err(Error::InstrumentSpec {
                t,
                lag,
                message: format!("references period {} < 1", t as i64 - lag as i64),
            });
        }
        Ok((self.first..=deepest).collect())
    }
}

/// Which lagged levels enter `z_it` at each moment period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub t0: usize,
    pub y_lags: Option<LagRange>,
    pub q_lags: Option<LagRange>,
    /// Lags of non-threshold regressor columns, by column index.
    pub x_lags: Vec<(usize, LagRange)>,
}

impl Default for InstrumentSpec {
    /// `z_it = (y_{t-2},...,y_1, q_{t-1},...,q_1)` from `t0 = 3`.
    fn default() -> Self {
        Self {
            t0: 3,
            y_lags: Some(LagRange::from(2)),
            q_lags: Some(LagRange::from(1)),
            x_lags: Vec::new(),
        }
    }
}

impl InstrumentSpec {
    pub fn y_only(t0: usize) -> Self {
        Self {
            t0,
            y_lags: Some(LagRange::from(2)),
            q_lags: None,
            x_lags: Vec::new(),
        }
    }
}

/// Per-period instrument blocks, stacked unit by unit into length-k rows.
#[derive(Debug, Clone)]
pub struct InstrumentSet {
    n: usize,
    t0: usize,
    periods: usize,
    k: usize,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    z: Vec<f64>,
    labels: Vec<String>,
}

pub fn build_instruments(panel: &PanelDataset, spec: &InstrumentSpec) -> Result<InstrumentSet> {
    let (n, periods, p) = (panel.n, panel.periods, panel.p);
    if spec.t0 < 2 {
        return Err(Error::InstrumentSpec {
            t: spec.t0,
            lag: 0,
            message: "t0 must be at least 2".into(),
        });
    }
    if spec.t0 > periods {
        return Err(Error::Dimension(format!(
            "t0 = {} exceeds T = {periods}",
            spec.t0
        )));
    }
    for (col, _) in &spec.x_lags {
        if *col + 1 >= p {
            return Err(Error::Dimension(format!(
                "x-lag column {col} is not a non-threshold regressor (p = {p})"
            )));
        }
    }

    // (source column: None = y, Some(j) = x column j, lags) for each period.
    let mut layout: Vec<Vec<(Option<usize>, usize)>> = Vec::new();
    for t in spec.t0..=periods {
        let mut entries = Vec::new();
        if let Some(range) = &spec.y_lags {
            entries.extend(range.lags_at(t)?.into_iter().map(|lag| (None, lag)));
        }
        if let Some(range) = &spec.q_lags {
            entries.extend(range.lags_at(t)?.into_iter().map(|lag| (Some(p - 1), lag)));
        }
        for (col, range) in &spec.x_lags {
            entries.extend(range.lags_at(t)?.into_iter().map(|lag| (Some(*col), lag)));
        }
        if entries.is_empty() {
            return Err(Error::InstrumentSpec {
                t,
                lag: 0,
                message: "no instruments at this period".into(),
            });
        }
        layout.push(entries);
    }

    let dims: Vec<usize> = layout.iter().map(Vec::len).collect();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, d| {
            let start = *acc;
            *acc += d;
            Some(start)
        })
        .collect();
    let k: usize = dims.iter().sum();

    let mut labels = Vec::with_capacity(k);
    for (entries, t) in layout.iter().zip(spec.t0..) {
        for (source, lag) in entries {
            let name = match source {
                None => "y".to_string(),
                Some(j) => panel.x_names[*j].clone(),
            };
            labels.push(format!("{name}[t={}]@{t}", t - lag));
        }
    }

    let mut z = Vec::with_capacity(n * k);
    for i in 0..n {
        for (entries, t) in layout.iter().zip(spec.t0..) {
            for (source, lag) in entries {
                let s = t - lag;
                z.push(match source {
                    None => panel.y(i, s),
                    Some(j) => panel.x(i, s)[*j],
                });
            }
        }
    }

    Ok(InstrumentSet {
        n,
        t0: spec.t0,
        periods,
        k,
        dims,
        offsets,
        z,
        labels,
    })
}

impl InstrumentSet {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Total stacked dimension k.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    /// Moment periods `t0..=T`.
    pub fn moment_periods(&self) -> std::ops::RangeInclusive<usize> {
        self.t0..=self.periods
    }

    /// Number of instruments at moment period `t`.
    pub fn dim(&self, t: usize) -> usize {
        self.dims[t - self.t0]
    }

    /// Start of period `t`'s block inside the stacked vector.
    pub fn offset(&self, t: usize) -> usize {
        self.offsets[t - self.t0]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `z_it`.
    pub fn z(&self, i: usize, t: usize) -> &[f64] {
        let start = i * self.k + self.offset(t);
        &self.z[start..start + self.dim(t)]
    }

    /// Stacked instruments of unit `i` (length k).
    pub fn unit(&self, i: usize) -> &[f64] {
        &self.z[i * self.k..(i + 1) * self.k]
    }

    /// Multiplies every instrument by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.z.iter_mut().for_each(|v| *v *= c);
        out
    }
}

/// Moment vector and its linear decomposition `ḡ_n(θ) = v_n + M̄_n(γ)α`.
#[derive(Debug, Clone)]
pub struct MomentEvaluation {
    pub g_bar: DVector<f64>,
    /// n×k, row i is `g_i(θ)'`.
    pub g_units: DMatrix<f64>,
    /// k×(2p+1), `[M̄_1n | M̄_2n(γ)]`.
    pub m_bar: DMatrix<f64>,
    pub v_n: DVector<f64>,
}

fn check_compatible(diff: &DiffPanel, iv: &InstrumentSet) -> Result<()> {
    if diff.n != iv.n || diff.periods != iv.periods {
        return Err(Error::Dimension(format!(
            "differenced panel is {}x{}, instruments were built for {}x{}",
            diff.n, diff.periods, iv.n, iv.periods
        )));
    }
    Ok(())
}

/// Evaluates the stacked moments unit by unit at `theta`.
pub fn moment_eval(
    diff: &DiffPanel,
    iv: &InstrumentSet,
    theta: &ThresholdParams,
) -> Result<MomentEvaluation> {
    check_compatible(diff, iv)?;
    let p = diff.p;
    if theta.p() != p {
        return Err(Error::Dimension(format!(
            "theta has p = {}, data has p = {p}",
            theta.p()
        )));
    }
    let (n, k) = (diff.n, iv.k);
    let inv_n = 1.0 / n as f64;
    let mut g_units = DMatrix::zeros(n, k);
    let mut v_n = DVector::zeros(k);
    let mut m_bar = DMatrix::zeros(k, 2 * p + 1);
    for i in 0..n {
        for t in iv.moment_periods() {
            let e = diff.residual(i, t, theta);
            let dy = diff.dy(i, t);
            let dx = diff.dx(i, t);
            let regime = diff.regime_row(i, t, theta.gamma);
            let off = iv.offset(t);
            for (r, &z) in iv.z(i, t).iter().enumerate() {
                let row = off + r;
                g_units[(i, row)] = z * e;
                v_n[row] += z * dy * inv_n;
                for (c, &d) in dx.iter().enumerate() {
                    m_bar[(row, c)] -= z * d * inv_n;
                }
                for (c, &d) in regime.iter().enumerate() {
                    m_bar[(row, p + c)] -= z * d * inv_n;
                }
            }
        }
    }
    let g_bar = g_units.row_mean().transpose();
    Ok(MomentEvaluation {
        g_bar,
        g_units,
        m_bar,
        v_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_csv() -> &'static str {
        "unit,time,y,q\n1,1,0.5,0.1\n1,2,0.7,0.3\n1,3,0.9,-0.2\n2,1,1.5,1.1\n2,2,1.2,0.8\n2,3,1.0,0.4\n"
    }

    #[test]
    fn loads_smallest_balanced_panel() {
        let panel = load_panel(tiny_csv().as_bytes(), &PanelSchema::new("q")).unwrap();
        assert_eq!((panel.n(), panel.periods(), panel.p()), (2, 3, 1));
        assert_eq!(panel.y(1, 2), 1.2);
        assert_eq!(panel.q(0, 3), -0.2);
    }

    #[test]
    fn reports_missing_cell() {
        let csv = tiny_csv().replace("2,3,1.0,0.4\n", "");
        match load_panel(csv.as_bytes(), &PanelSchema::new("q")) {
            Err(Error::Unbalanced { missing }) => assert_eq!(missing, vec![("2".to_string(), 3)]),
            other => panic!("expected unbalanced error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_and_non_numeric_rows() {
        let dup = format!("{}1,2,0.0,0.0\n", tiny_csv());
        assert!(matches!(
            load_panel(dup.as_bytes(), &PanelSchema::new("q")),
            Err(Error::DuplicateCell { time: 2, .. })
        ));
        let bad = tiny_csv().replace("0.7", "abc");
        match load_panel(bad.as_bytes(), &PanelSchema::new("q")) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn threshold_column_moves_last_and_rows_sort() {
        let csv = "q,unit,time,y,w\n0.3,10,2,1.0,5\n0.1,2,1,2.0,6\n0.2,2,2,3.0,7\n0.4,10,1,4.0,8\n";
        let panel = load_panel(csv.as_bytes(), &PanelSchema::new("q")).unwrap();
        assert_eq!(panel.x_names(), &["w".to_string(), "q".to_string()]);
        assert_eq!(panel.unit_ids(), &["2".to_string(), "10".to_string()]);
        assert_eq!(panel.x(1, 1), &[8.0, 0.4]);
        assert!(matches!(
            load_panel(csv.as_bytes(), &PanelSchema::new("missing")),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn differencing_removes_levels() {
        let n = 3;
        let periods = 5;
        let mut y = Vec::new();
        let mut x = Vec::new();
        for i in 0..n {
            for t in 1..=periods {
                y.push(i as f64 * 10.0 + t as f64);
                x.push(0.5);
            }
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        let panel = PanelDataset::new(ids, (1..=5).collect(), vec!["q".into()], y, x).unwrap();
        let diff = first_difference(&panel).unwrap();
        for i in 0..n {
            for t in 2..=periods {
                assert_eq!(diff.dy(i, t), 1.0);
                assert_eq!(diff.dx(i, t), &[0.0]);
            }
        }
    }

    #[test]
    fn single_period_cannot_be_differenced() {
        let panel = PanelDataset::new(
            vec!["a".into()],
            vec![1],
            vec!["q".into()],
            vec![1.0],
            vec![0.0],
        )
        .unwrap();
        assert!(matches!(first_difference(&panel), Err(Error::Dimension(_))));
    }

    fn level_panel(n: usize, periods: usize) -> PanelDataset {
        let mut y = Vec::new();
        let mut x = Vec::new();
        for i in 0..n {
            for t in 1..=periods {
                y.push((i * periods + t) as f64 * 0.37 % 1.9);
                x.push(((i + 2 * t) as f64 * 0.61).sin());
                x.push(((3 * i + t) as f64 * 0.29).cos());
            }
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        PanelDataset::new(
            ids,
            (1..=periods as i64).collect(),
            vec!["ylag".into(), "q".into()],
            y,
            x,
        )
        .unwrap()
    }

    #[test]
    fn instrument_counts_match_closed_forms() {
        let panel = level_panel(4, 6);
        let iv = build_instruments(&panel, &InstrumentSpec::y_only(3)).unwrap();
        assert_eq!(iv.k(), 10);
        let iv = build_instruments(&panel, &InstrumentSpec::default()).unwrap();
        assert_eq!(iv.k(), 24);
        assert_eq!(
            iv.z(2, 4),
            &[
                panel.y(2, 2),
                panel.y(2, 1),
                panel.q(2, 3),
                panel.q(2, 2),
                panel.q(2, 1)
            ]
        );

        let short = level_panel(4, 3);
        let iv = build_instruments(&short, &InstrumentSpec::y_only(3)).unwrap();
        assert_eq!(iv.k(), 1);
        assert_eq!(iv.z(1, 3), &[short.y(1, 1)]);
    }

    #[test]
    fn infeasible_lags_name_the_period() {
        let panel = level_panel(2, 6);
        let spec = InstrumentSpec::y_only(2);
        match build_instruments(&panel, &spec) {
            Err(Error::InstrumentSpec { t, lag, .. }) => assert_eq!((t, lag), (2, 2)),
            other => panic!("expected spec error, got {other:?}"),
        }
        let spec = InstrumentSpec {
            t0: 3,
            y_lags: Some(LagRange::bounded(2, 3)),
            q_lags: None,
            x_lags: vec![],
        };
        match build_instruments(&panel, &spec) {
            Err(Error::InstrumentSpec { t, lag, .. }) => assert_eq!((t, lag), (3, 3)),
            other => panic!("expected spec error, got {other:?}"),
        }
    }

    #[test]
    fn saturated_indicator_with_zero_delta_is_inert() {
        let panel = level_panel(5, 6);
        let diff = first_difference(&panel).unwrap();
        let iv = build_instruments(&panel, &InstrumentSpec::default()).unwrap();
        let lo = ThresholdParams::new(vec![0.3, -0.2], vec![0.0; 3], -10.0).unwrap();
        let hi = ThresholdParams {
            gamma: 10.0,
            ..lo.clone()
        };
        let a = moment_eval(&diff, &iv, &lo).unwrap();
        let b = moment_eval(&diff, &iv, &hi).unwrap();
        assert_eq!(a.g_bar, b.g_bar);
    }

    #[test]
    fn ties_fall_in_lower_regime() {
        let panel = level_panel(2, 4);
        let diff = first_difference(&panel).unwrap();
        let q = panel.q(0, 3);
        assert_eq!(diff.regime_indicator(0, 3, q).0, 0.0);
        assert_eq!(diff.regime_indicator(0, 3, q - 1e-12).0, 1.0);
    }

    #[test]
    fn convex_combination_endpoints() {
        let a = ThresholdParams::new(vec![1.0], vec![2.0, 3.0], 0.5).unwrap();
        let b = ThresholdParams::new(vec![-1.0], vec![0.0, 1.0], -0.5).unwrap();
        assert_eq!(a.convex_combination(&b, 1.0), a);
        assert_eq!(a.convex_combination(&b, 0.0), b);
        assert_eq!(a.jump(), 3.5);
    }
}
