use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;

/// How a grid of candidate thresholds was constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridRule {
    Explicit,
    /// `count` order statistics of the pooled threshold variable, at evenly
    /// spaced levels between `lo` and `hi`.
    Quantile {
        lo: f64,
        hi: f64,
        count: usize,
    },
}

impl GridRule {
    /// Parses `quantile:LO:HI:COUNT`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["quantile", lo, hi, count] => {
                let bad = |what: &str| Error::Grid(format!("cannot parse {what} in `{text}`"));
                let lo: f64 = lo.parse().map_err(|_| bad("lower level"))?;
                let hi: f64 = hi.parse().map_err(|_| bad("upper level"))?;
                let count: usize = count.parse().map_err(|_| bad("point count"))?;
                let rule = GridRule::Quantile { lo, hi, count };
                rule.validate()?;
                Ok(rule)
            }
            _ => Err(Error::Grid(format!(
                "expected quantile:LO:HI:COUNT, got `{text}`"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if let GridRule::Quantile { lo, hi, count } = *self {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Grid(format!(
                    "quantile levels must satisfy 0 <= lo <= hi <= 1, got {lo}, {hi}"
                )));
            }
            if count == 0 {
                return Err(Error::Grid("quantile grid needs at least one point".into()));
            }
        }
        Ok(())
    }
}

impl Default for GridRule {
    fn default() -> Self {
        GridRule::Quantile {
            lo: 0.1,
            hi: 0.9,
            count: 81,
        }
    }
}

/// Strictly increasing candidate thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaGrid {
    points: Vec<f64>,
    rule: GridRule,
}

impl GammaGrid {
    /// Sorts and deduplicates `points`; every point must lie within the
    /// range of the pooled threshold variable.
    pub fn explicit(mut points: Vec<f64>, panel: &PanelDataset) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Grid("grid is empty".into()));
        }
        if points.iter().any(|g| !g.is_finite()) {
            return Err(Error::Grid("grid contains non-finite points".into()));
        }
        let (lo, hi) = q_range(panel);
        if let Some(bad) = points.iter().find(|g| **g < lo || **g > hi) {
            return Err(Error::Grid(format!(
                "point {bad} lies outside the threshold range [{lo}, {hi}]"
            )));
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        Ok(Self {
            points,
            rule: GridRule::Explicit,
        })
    }

    /// Quantile grid: the order statistic at `ceil(level*N)` for evenly spaced
    /// levels, so consecutive points are separated by equal observation counts.
    pub fn quantile(panel: &PanelDataset, lo: f64, hi: f64, count: usize) -> Result<Self> {
        let rule = GridRule::Quantile { lo, hi, count };
        rule.validate()?;
        let mut q = panel.pooled_q();
        q.sort_by(f64::total_cmp);
        let m = q.len();
        let mut points: Vec<f64> = (0..count)
            .map(|j| {
                let level = if count == 1 {
                    lo
                } else {
                    lo + (hi - lo) * j as f64 / (count - 1) as f64
                };
                let rank = ceil_rank(level, m).clamp(1, m);
                q[rank - 1]
            })
            .collect();
        points.dedup();
        Ok(Self { points, rule })
    }

    pub fn from_rule(rule: &GridRule, panel: &PanelDataset) -> Result<Self> {
        match *rule {
            GridRule::Quantile { lo, hi, count } => Self::quantile(panel, lo, hi, count),
            GridRule::Explicit => Err(Error::Grid("an explicit grid needs its points".into())),
        }
    }

    /// Adds points (e.g. hypothesised thresholds) to the grid.
    pub fn with_points(&self, extra: &[f64], panel: &PanelDataset) -> Result<Self> {
        let mut all = self.points.clone();
        all.extend_from_slice(extra);
        let mut grid = Self::explicit(all, panel)?;
        if extra.is_empty() {
            grid.rule = self.rule.clone();
        }
        Ok(grid)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rule(&self) -> &GridRule {
        &self.rule
    }

    /// Index of a point that is exactly on the grid.
    pub fn index_of(&self, gamma: f64) -> Option<usize> {
        self.points.iter().position(|g| *g == gamma)
    }
}

/// `ceil(level*m)`, treating products within rounding error of an integer as that integer.
pub(crate) fn ceil_rank(level: f64, m: usize) -> usize {
    let x = level * m as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * (m as f64).max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn q_range(panel: &PanelDataset) -> (f64, f64) {
    panel
        .pooled_q()
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
            (lo.min(q), hi.max(q))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel_with_q(q: &[f64]) -> PanelDataset {
        let n = q.len();
        PanelDataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            vec![1],
            vec!["q".into()],
            vec![0.0; n],
            q.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn quantile_grid_uses_order_statistics() {
        let q: Vec<f64> = (1..=100).map(f64::from).collect();
        let panel = panel_with_q(&q);
        let grid = GammaGrid::quantile(&panel, 0.1, 0.9, 81).unwrap();
        assert_eq!(grid.len(), 81);
        assert_eq!(grid.points()[0], 10.0);
        assert_eq!(grid.points()[1], 11.0);
        assert_eq!(*grid.points().last().unwrap(), 90.0);
        assert!(grid.points().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn explicit_grid_sorted_and_bounded() {
        let panel = panel_with_q(&[0.0, 1.0, 2.0]);
        let grid = GammaGrid::explicit(vec![1.5, 0.5, 1.5], &panel).unwrap();
        assert_eq!(grid.points(), &[0.5, 1.5]);
        assert!(GammaGrid::explicit(vec![3.0], &panel).is_err());
    }

    #[test]
    fn parses_rule() {
        assert_eq!(
            GridRule::parse("quantile:0.1:0.9:81").unwrap(),
            GridRule::Quantile {
                lo: 0.1,
                hi: 0.9,
                count: 81
            }
        );
        assert!(GridRule::parse("quantile:0.9:0.1:5").is_err());
        assert!(GridRule::parse("uniform:0:1:5").is_err());
    }
}
