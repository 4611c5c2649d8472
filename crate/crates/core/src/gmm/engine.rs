//! Numerical core shared by the sample estimators and every bootstrap scheme.
//!
//! The moment vector is linear in the coefficients, `ḡ(α, γ) = v̄ + M̄(γ)α`,
//! so for a fixed weighting the profiled problem at each γ is a small least
//! squares problem in whitened coordinates. A [`Sample`] is either the
//! original data or a bootstrap resample expressed as per-unit counts over
//! the original units together with per-unit outcome differences; all
//! aggregates are count-weighted sums, so resampling never copies the
//! instrument blocks.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::panel::{DiffPanel, InstrumentSet, ThresholdParams};

/// Relative pivot below which an equilibrated normal matrix is treated as singular.
const RANK_TOL: f64 = 1e-12;
/// Largest accepted condition estimate for the moment covariance.
const MAX_WEIGHT_CONDITION: f64 = 1e13;
/// Relative jitter added to the covariance diagonal on a failed factorisation.
pub const WEIGHT_JITTER: f64 = 1e-10;

/// Compact per-unit layout of everything the moment function needs.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    n: usize,
    p: usize,
    k: usize,
    m: usize,
    offsets: Vec<usize>,
    dims: Vec<usize>,
    z: Vec<f64>,
    dy: Vec<f64>,
    dx: Vec<f64>,
    cur: Vec<f64>,
    lag: Vec<f64>,
    q_cur: Vec<f64>,
    q_lag: Vec<f64>,
}

impl MomentSystem {
    pub fn new(diff: &DiffPanel, iv: &InstrumentSet) -> Result<Self> {
        if diff.n() != iv.n() || diff.periods() != iv.periods() {
            return Err(Error::Dimension(format!(
                "differenced panel is {}x{}, instruments were built for {}x{}",
                diff.n(),
                diff.periods(),
                iv.n(),
                iv.periods()
            )));
        }
        let (n, p, k) = (diff.n(), diff.p(), iv.k());
        let periods: Vec<usize> = iv.moment_periods().collect();
        let m = periods.len();
        let mut sys = Self {
            n,
            p,
            k,
            m,
            offsets: periods.iter().map(|&t| iv.offset(t)).collect(),
            dims: periods.iter().map(|&t| iv.dim(t)).collect(),
            z: Vec::with_capacity(n * k),
            dy: Vec::with_capacity(n * m),
            dx: Vec::with_capacity(n * m * p),
            cur: Vec::with_capacity(n * m * (p + 1)),
            lag: Vec::with_capacity(n * m * (p + 1)),
            q_cur: Vec::with_capacity(n * m),
            q_lag: Vec::with_capacity(n * m),
        };
        for i in 0..n {
            sys.z.extend_from_slice(iv.unit(i));
            for &t in &periods {
                sys.dy.push(diff.dy(i, t));
                sys.dx.extend_from_slice(diff.dx(i, t));
                sys.cur.push(1.0);
                sys.cur.extend_from_slice(diff.x_level(i, t));
                sys.lag.push(1.0);
                sys.lag.extend_from_slice(diff.x_level(i, t - 1));
                let (q, q_lag) = diff.q_pair(i, t);
                sys.q_cur.push(q);
                sys.q_lag.push(q_lag);
            }
        }
        Ok(sys)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of moment periods.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Observed `Δy`, unit-major (`n*m`).
    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    /// `Δx_js'β + 1_js(γ)'X_js δ` for unit `j`, moment period index `s`.
    pub fn fitted(&self, j: usize, s: usize, theta: &ThresholdParams) -> f64 {
        let p = self.p;
        let idx = j * self.m + s;
        let dx = &self.dx[idx * p..(idx + 1) * p];
        let slope: f64 = dx.iter().zip(&theta.beta).map(|(a, b)| a * b).sum();
        if theta.delta.iter().all(|d| *d == 0.0) {
            return slope;
        }
        let mut regime = 0.0;
        if self.q_cur[idx] > theta.gamma {
            let row = &self.cur[idx * (p + 1)..(idx + 1) * (p + 1)];
            regime += row
                .iter()
                .zip(&theta.delta)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        if self.q_lag[idx] > theta.gamma {
            let row = &self.lag[idx * (p + 1)..(idx + 1) * (p + 1)];
            regime -= row
                .iter()
                .zip(&theta.delta)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        slope + regime
    }

    /// Residuals `dy - fitted(θ)` for every unit and moment period.
    pub fn residuals(&self, dy: &[f64], theta: &ThresholdParams) -> Vec<f64> {
        (0..self.n)
            .flat_map(|j| (0..self.m).map(move |s| (j, s)))
            .map(|(j, s)| dy[j * self.m + s] - self.fitted(j, s, theta))
            .collect()
    }

    /// Stacked `g_j = z_j ⊙ e_j` for a unit given its residuals.
    fn unit_moment(&self, j: usize, resid: &[f64], out: &mut [f64]) {
        let z = &self.z[j * self.k..(j + 1) * self.k];
        for s in 0..self.m {
            let e = resid[s];
            let (off, dim) = (self.offsets[s], self.dims[s]);
            for r in off..off + dim {
                out[r] = z[r] * e;
            }
        }
    }

    /// Sample mean of `z_j ⊙ e_j` over the original units.
    pub fn mean_moment(&self, resid: &[f64]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.k);
        let mut g = vec![0.0; self.k];
        for j in 0..self.n {
            self.unit_moment(j, &resid[j * self.m..(j + 1) * self.m], &mut g);
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        acc / self.n as f64
    }
}

/// The data a criterion is evaluated on: per-unit counts over the original
/// units, per-unit outcome differences, and an optional recentering vector
/// subtracted from the sample moment.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    sys: &'a MomentSystem,
    counts: Option<Cow<'a, [u32]>>,
    dy: Cow<'a, [f64]>,
    recenter: Option<DVector<f64>>,
}

impl<'a> Sample<'a> {
    pub fn original(sys: &'a MomentSystem) -> Self {
        Self {
            sys,
            counts: None,
            dy: Cow::Borrowed(&sys.dy),
            recenter: None,
        }
    }

    pub fn resampled(
        sys: &'a MomentSystem,
        counts: Vec<u32>,
        dy: Vec<f64>,
        recenter: DVector<f64>,
    ) -> Self {
        debug_assert_eq!(counts.len(), sys.n);
        debug_assert_eq!(dy.len(), sys.n * sys.m);
        Self {
            sys,
            counts: Some(Cow::Owned(counts)),
            dy: Cow::Owned(dy),
            recenter: Some(recenter),
        }
    }

    pub fn system(&self) -> &MomentSystem {
        self.sys
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    fn count(&self, j: usize) -> u32 {
        self.counts.as_ref().map_or(1, |c| c[j])
    }

    fn active_units(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.sys.n).filter_map(move |j| {
            let c = self.count(j);
            (c > 0).then_some((j, c as f64))
        })
    }

    /// Recentered sample moment `ḡ(θ)` evaluated directly.
    pub fn moment(&self, theta: &ThresholdParams) -> DVector<f64> {
        let sys = self.sys;
        let mut acc = DVector::zeros(sys.k);
        let mut g = vec![0.0; sys.k];
        let mut resid = vec![0.0; sys.m];
        for (j, c) in self.active_units() {
            for (s, e) in resid.iter_mut().enumerate() {
                *e = self.dy[j * sys.m + s] - sys.fitted(j, s, theta);
            }
            sys.unit_moment(j, &resid, &mut g);
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += c * b;
            }
        }
        acc /= sys.n as f64;
        if let Some(rc) = &self.recenter {
            acc -= rc;
        }
        acc
    }

    /// Centered covariance `n⁻¹Σ g_i g_i' - ḡḡ'` of the per-unit moments at θ.
    pub fn moment_covariance(&self, theta: &ThresholdParams) -> DMatrix<f64> {
        let sys = self.sys;
        let active: Vec<(usize, f64)> = self.active_units().collect();
        let mut g = DMatrix::zeros(sys.k, active.len());
        let mut resid = vec![0.0; sys.m];
        let mut mean = DVector::zeros(sys.k);
        for (col, &(j, c)) in active.iter().enumerate() {
            for (s, e) in resid.iter_mut().enumerate() {
                *e = self.dy[j * sys.m + s] - sys.fitted(j, s, theta);
            }
            let column = g.column_mut(col);
            let slice = column.data.into_slice_mut();
            sys.unit_moment(j, &resid, slice);
            for (a, b) in mean.iter_mut().zip(slice.iter()) {
                *a += c * b;
            }
        }
        mean /= sys.n as f64;
        let mut scaled = g.clone();
        for (col, &(_, c)) in active.iter().enumerate() {
            let mut gc = g.column_mut(col);
            gc -= &mean;
            let mut sc = scaled.column_mut(col);
            sc.copy_from(&gc);
            sc *= c;
        }
        let mut cov = &g * scaled.transpose();
        cov /= sys.n as f64;
        symmetrize(&mut cov);
        cov
    }

    /// Count-weighted aggregates `v̄`, `M̄_1` and `M̄_2(γ)` for sorted `gammas`.
    ///
    /// `M̄_2` is accumulated by bucketing each regime term at the number of
    /// grid points below its threshold value and taking suffix sums, so the
    /// whole grid costs one pass over the data.
    pub fn aggregate(&self, gammas: &[f64]) -> Aggregates {
        debug_assert!(gammas.windows(2).all(|w| w[0] < w[1]));
        let sys = self.sys;
        let (k, p, m) = (sys.k, sys.p, sys.m);
        let w = p + 1;
        let blk = k * w;
        let nb = gammas.len();
        let mut v = vec![0.0; k];
        let mut m1 = vec![0.0; k * p];
        let mut buckets = vec![0.0; nb * blk];
        for (j, c) in self.active_units() {
            let z = &sys.z[j * k..(j + 1) * k];
            for s in 0..m {
                let idx = j * m + s;
                let (off, dim) = (sys.offsets[s], sys.dims[s]);
                let dy = c * self.dy[idx];
                let dx = &sys.dx[idx * p..(idx + 1) * p];
                for r in off..off + dim {
                    v[r] += z[r] * dy;
                }
                for (col, &d) in dx.iter().enumerate() {
                    let cd = c * d;
                    let base = col * k;
                    for r in off..off + dim {
                        m1[base + r] += z[r] * cd;
                    }
                }
                let terms = [
                    (sys.q_cur[idx], c, &sys.cur[idx * w..(idx + 1) * w]),
                    (sys.q_lag[idx], -c, &sys.lag[idx * w..(idx + 1) * w]),
                ];
                for (q, sign, row) in terms {
                    let b = gammas.partition_point(|g| *g < q);
                    if b == 0 {
                        continue;
                    }
                    let bucket = &mut buckets[(b - 1) * blk..b * blk];
                    for (col, &x) in row.iter().enumerate() {
                        let sx = sign * x;
                        let base = col * k;
                        for r in off..off + dim {
                            bucket[base + r] += z[r] * sx;
                        }
                    }
                }
            }
        }
        for ell in (0..nb.saturating_sub(1)).rev() {
            let (head, tail) = buckets.split_at_mut((ell + 1) * blk);
            for (a, b) in head[ell * blk..].iter_mut().zip(&tail[..blk]) {
                *a += b;
            }
        }
        let inv_n = 1.0 / sys.n as f64;
        let mut v = DVector::from_vec(v) * inv_n;
        if let Some(rc) = &self.recenter {
            v -= rc;
        }
        let m1 = DMatrix::from_vec(k, p, m1) * (-inv_n);
        let m2 = buckets
            .chunks_exact(blk)
            .map(|chunk| DMatrix::from_column_slice(k, w, chunk) * (-inv_n))
            .collect();
        Aggregates {
            gammas: gammas.to_vec(),
            v,
            m1,
            m2,
        }
    }

    /// Weighting built from the centered moment covariance at θ.
    pub fn weighting_at(&self, theta: &ThresholdParams) -> Result<Weighting> {
        Weighting::from_covariance(&self.moment_covariance(theta))
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for r in 0..n {
        for c in r + 1..n {
            let v = 0.5 * (a[(r, c)] + a[(c, r)]);
            a[(r, c)] = v;
            a[(c, r)] = v;
        }
    }
}

/// `v̄`, `M̄_1` and `M̄_2(γ_ℓ)` for each grid point.
#[derive(Debug, Clone)]
pub struct Aggregates {
    pub gammas: Vec<f64>,
    pub v: DVector<f64>,
    pub m1: DMatrix<f64>,
    pub m2: Vec<DMatrix<f64>>,
}

impl Aggregates {
    /// `[M̄_1 | M̄_2(γ_ℓ)]`.
    pub fn jacobian(&self, ell: usize) -> DMatrix<f64> {
        let (k, p) = (self.m1.nrows(), self.m1.ncols());
        let mut out = DMatrix::zeros(k, 2 * p + 1);
        out.columns_mut(0, p).copy_from(&self.m1);
        out.columns_mut(p, p + 1).copy_from(&self.m2[ell]);
        out
    }
}

/// A GMM weight matrix `W = Σ⁻¹`, held as the Cholesky factor of Σ.
#[derive(Debug, Clone)]
pub enum Weighting {
    Identity,
    Factor(nalgebra::Cholesky<f64, Dyn>),
}

impl Weighting {
    /// Factorises a covariance matrix; on failure or extreme conditioning
    /// retries once with `WEIGHT_JITTER·tr(Σ)/k` added to the diagonal.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        if let Some(chol) = well_conditioned_cholesky(cov.clone()) {
            return Ok(Weighting::Factor(chol));
        }
        let k = cov.nrows() as f64;
        let jitter = WEIGHT_JITTER * cov.trace() / k;
        if jitter > 0.0 && jitter.is_finite() {
            let mut bumped = cov.clone();
            for d in 0..cov.nrows() {
                bumped[(d, d)] += jitter;
            }
            if let Some(chol) = well_conditioned_cholesky(bumped) {
                log::warn!("moment covariance near-singular; added diagonal jitter {jitter:e}");
                return Ok(Weighting::Factor(chol));
            }
        }
        let min_eigenvalue = if cov.iter().all(|v| v.is_finite()) {
            cov.clone().symmetric_eigen().eigenvalues.min()
        } else {
            f64::NAN
        };
        Err(Error::SingularWeight { min_eigenvalue })
    }

    /// Explicit `W` (k×k).
    pub fn matrix(&self, k: usize) -> DMatrix<f64> {
        match self {
            Weighting::Identity => DMatrix::identity(k, k),
            Weighting::Factor(chol) => {
                let mut w = chol.inverse();
                symmetrize(&mut w);
                w
            }
        }
    }

    fn whiten_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Weighting::Identity => v.clone(),
            Weighting::Factor(chol) => {
                let mut out = v.clone();
                chol.l_dirty().solve_lower_triangular_mut(&mut out);
                out
            }
        }
    }

    fn whiten_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Weighting::Identity => m.clone(),
            Weighting::Factor(chol) => {
                let mut out = m.clone();
                chol.l_dirty().solve_lower_triangular_mut(&mut out);
                out
            }
        }
    }

    /// `W·m`, computed as `L⁻ᵀL⁻¹m`.
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Weighting::Identity => m.clone(),
            Weighting::Factor(chol) => chol.solve(m),
        }
    }

    /// Quadratic form `g'Wg`.
    pub fn quadratic(&self, g: &DVector<f64>) -> f64 {
        self.whiten_vec(g).norm_squared()
    }

    /// Whitened aggregates for every grid point.
    pub fn whiten(&self, agg: &Aggregates) -> Whitened {
        Whitened {
            gammas: agg.gammas.clone(),
            v: self.whiten_vec(&agg.v),
            m1: self.whiten_mat(&agg.m1),
            m2: agg.m2.iter().map(|m| self.whiten_mat(m)).collect(),
        }
    }

    /// Whitened aggregates restricted to a single grid point.
    pub fn whiten_point(&self, agg: &Aggregates, ell: usize) -> Whitened {
        Whitened {
            gammas: vec![agg.gammas[ell]],
            v: self.whiten_vec(&agg.v),
            m1: self.whiten_mat(&agg.m1),
            m2: vec![self.whiten_mat(&agg.m2[ell])],
        }
    }
}

fn well_conditioned_cholesky(cov: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, Dyn>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = nalgebra::Cholesky::new(cov)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), d| {
        (lo.min(d.abs()), hi.max(d.abs()))
    });
    if lo <= 0.0 || (hi / lo).powi(2) > MAX_WEIGHT_CONDITION {
        return None;
    }
    Some(chol)
}

/// Aggregates premultiplied by `L⁻¹`, so that `Q = ‖v + Mα‖²`.
#[derive(Debug, Clone)]
pub struct Whitened {
    pub gammas: Vec<f64>,
    pub v: DVector<f64>,
    pub m1: DMatrix<f64>,
    pub m2: Vec<DMatrix<f64>>,
}

/// Coefficient restrictions available for the profiled solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restriction {
    /// Free `α = (β', δ')'`.
    None,
    /// Continuity: `δ₂ = 0`, `δ₁ = -δ₃γ`; coefficients `(β', δ₃)'`.
    Kink,
    /// Linearity: `δ = 0`; coefficients `β`.
    Linear,
}

impl Restriction {
    /// Embeds restricted coefficients into a full parameter point.
    pub fn embed(self, coef: &[f64], p: usize, gamma: f64) -> ThresholdParams {
        match self {
            Restriction::None => ThresholdParams {
                beta: coef[..p].to_vec(),
                delta: coef[p..].to_vec(),
                gamma,
            },
            Restriction::Kink => {
                let delta3 = coef[p];
                let mut delta = vec![0.0; p + 1];
                delta[0] = -gamma * delta3;
                delta[p] = delta3;
                ThresholdParams {
                    beta: coef[..p].to_vec(),
                    delta,
                    gamma,
                }
            }
            Restriction::Linear => ThresholdParams {
                beta: coef[..p].to_vec(),
                delta: vec![0.0; p + 1],
                gamma,
            },
        }
    }
}

/// Minimiser of the criterion at one threshold.
#[derive(Debug, Clone)]
pub struct PointFit {
    pub gamma: f64,
    pub coef: Vec<f64>,
    pub criterion: f64,
}

impl Whitened {
    fn design(&self, ell: usize, restriction: Restriction) -> DMatrix<f64> {
        let (k, p) = (self.m1.nrows(), self.m1.ncols());
        match restriction {
            Restriction::None => {
                let mut d = DMatrix::zeros(k, 2 * p + 1);
                d.columns_mut(0, p).copy_from(&self.m1);
                d.columns_mut(p, p + 1).copy_from(&self.m2[ell]);
                d
            }
            Restriction::Kink => {
                let gamma = self.gammas[ell];
                let m2 = &self.m2[ell];
                let mut d = DMatrix::zeros(k, p + 1);
                d.columns_mut(0, p).copy_from(&self.m1);
                let kink = m2.column(p) - m2.column(0) * gamma;
                d.column_mut(p).copy_from(&kink);
                d
            }
            Restriction::Linear => self.m1.clone(),
        }
    }

    /// Closed-form minimiser of `‖v + Dα‖²` at grid point `ell`.
    pub fn solve(&self, ell: usize, restriction: Restriction) -> Result<PointFit> {
        let gamma = self.gammas[ell];
        let d = self.design(ell, restriction);
        let a = d.tr_mul(&d);
        let b = d.tr_mul(&self.v);
        let coef = solve_spd_equilibrated(&a, &b).ok_or(Error::RankDeficient { gamma })?;
        let coef = -coef;
        let resid = &self.v + &d * &coef;
        Ok(PointFit {
            gamma,
            coef: coef.iter().copied().collect(),
            criterion: resid.norm_squared(),
        })
    }

    /// Profiles the criterion over every grid point.
    pub fn profile(&self, restriction: Restriction) -> Result<Profile> {
        let points: Vec<Option<PointFit>> = (0..self.gammas.len())
            .map(|ell| self.solve(ell, restriction).ok())
            .collect();
        Profile::from_points(points, &self.gammas)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` after diagonal
/// equilibration; `None` when `A` is numerically rank deficient.
pub fn solve_spd_equilibrated(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let r = a.nrows();
    let max_diag = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(*v));
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return None;
    }
    let mut scale = DVector::zeros(r);
    for i in 0..r {
        let d = a[(i, i)];
        if !(d > RANK_TOL * RANK_TOL * max_diag) {
            return None;
        }
        scale[i] = 1.0 / d.sqrt();
    }
    // Cholesky of the unit-diagonal matrix S A S with an explicit pivot floor.
    let mut l = DMatrix::<f64>::zeros(r, r);
    for j in 0..r {
        let mut diag = a[(j, j)] * scale[j] * scale[j];
        for c in 0..j {
            diag -= l[(j, c)] * l[(j, c)];
        }
        if !(diag > RANK_TOL) {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..r {
            let mut v = a[(i, j)] * scale[i] * scale[j];
            for c in 0..j {
                v -= l[(i, c)] * l[(j, c)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    let mut y = b.component_mul(&scale);
    for i in 0..r {
        let mut v = y[i];
        for c in 0..i {
            v -= l[(i, c)] * y[c];
        }
        y[i] = v / l[(i, i)];
    }
    for i in (0..r).rev() {
        let mut v = y[i];
        for c in i + 1..r {
            v -= l[(c, i)] * y[c];
        }
        y[i] = v / l[(i, i)];
    }
    Some(y.component_mul(&scale))
}

/// Profiled criterion over a grid; rank-deficient points are `None`.
#[derive(Debug, Clone)]
pub struct Profile {
    pub gammas: Vec<f64>,
    pub points: Vec<Option<PointFit>>,
    pub best: usize,
}

impl Profile {
    fn from_points(points: Vec<Option<PointFit>>, gammas: &[f64]) -> Result<Self> {
        let mut best: Option<(usize, f64)> = None;
        for (ell, fit) in points.iter().enumerate() {
            if let Some(fit) = fit {
                if best.is_none_or(|(_, q)| fit.criterion < q) {
                    best = Some((ell, fit.criterion));
                }
            }
        }
        match best {
            Some((best, _)) => Ok(Self {
                gammas: gammas.to_vec(),
                points,
                best,
            }),
            None => Err(Error::Estimation(format!(
                "every one of the {} grid points is rank deficient",
                gammas.len()
            ))),
        }
    }

    pub fn best_fit(&self) -> &PointFit {
        self.points[self.best]
            .as_ref()
            .expect("best point is solved")
    }

    pub fn min_criterion(&self) -> f64 {
        self.best_fit().criterion
    }

    pub fn criterion_at(&self, ell: usize) -> Option<f64> {
        self.points[ell].as_ref().map(|f| f.criterion)
    }
}

/// Which estimation stage produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    First,
    Second,
}

/// Both stages of the unrestricted estimator on one sample.
#[derive(Debug, Clone)]
pub struct TwoStage {
    pub aggregates: Aggregates,
    pub first: Profile,
    pub weighting: Weighting,
    pub whitened: Whitened,
    pub second: Profile,
    pub stage: Stage,
}

impl TwoStage {
    /// Final-stage estimate embedded as full parameters.
    pub fn theta(&self, p: usize) -> ThresholdParams {
        let best = self.second.best_fit();
        Restriction::None.embed(&best.coef, p, best.gamma)
    }
}

/// First stage with `W = I` over the grid, weight from the first-stage
/// estimate, second stage with that weight.
///
/// When the first stage fits the moments exactly (noise-free data) the
/// moment covariance vanishes and the exact first-stage fit is final.
pub fn two_stage(sample: &Sample<'_>, gammas: &[f64]) -> Result<TwoStage> {
    let p = sample.sys.p;
    let aggregates = sample.aggregate(gammas);
    let identity = Weighting::Identity.whiten(&aggregates);
    let first = identity.profile(Restriction::None)?;
    let first_fit = first.best_fit();
    if is_exact_fit(first_fit.criterion, &aggregates.v) {
        return Ok(TwoStage {
            aggregates,
            second: first.clone(),
            first,
            weighting: Weighting::Identity,
            whitened: identity,
            stage: Stage::First,
        });
    }
    let theta1 = Restriction::None.embed(&first_fit.coef, p, first_fit.gamma);
    let weighting = sample.weighting_at(&theta1)?;
    let whitened = weighting.whiten(&aggregates);
    let second = whitened.profile(Restriction::None)?;
    Ok(TwoStage {
        aggregates,
        first,
        weighting,
        whitened,
        second,
        stage: Stage::Second,
    })
}

/// Two-stage estimation with the threshold pinned to grid point `ell` of `agg`.
pub fn two_stage_at(
    sample: &Sample<'_>,
    agg: &Aggregates,
    ell: usize,
    restriction: Restriction,
) -> Result<(PointFit, Weighting, Stage)> {
    let p = sample.sys.p;
    let identity = Weighting::Identity.whiten_point(agg, ell);
    let first = identity.solve(0, restriction)?;
    if is_exact_fit(first.criterion, &agg.v) {
        return Ok((first, Weighting::Identity, Stage::First));
    }
    let theta1 = restriction.embed(&first.coef, p, first.gamma);
    let weighting = sample.weighting_at(&theta1)?;
    let second = weighting.whiten_point(agg, ell).solve(0, restriction)?;
    Ok((second, weighting, Stage::Second))
}

fn is_exact_fit(criterion: f64, v: &DVector<f64>) -> bool {
    criterion <= 1e-20 * (1.0 + v.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrated_solve_matches_direct() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = solve_spd_equilibrated(&a, &b).unwrap();
        let r = &a * &x - &b;
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn equilibrated_solve_detects_rank_deficiency() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(solve_spd_equilibrated(&a, &b).is_none());
        let zero = DMatrix::zeros(2, 2);
        assert!(solve_spd_equilibrated(&zero, &b).is_none());
    }

    #[test]
    fn zero_covariance_is_singular() {
        let cov = DMatrix::zeros(3, 3);
        match Weighting::from_covariance(&cov) {
            Err(Error::SingularWeight { min_eigenvalue }) => assert_eq!(min_eigenvalue, 0.0),
            other => panic!("expected singular weight, got {other:?}"),
        }
    }

    #[test]
    fn scalar_weight_is_reciprocal_variance() {
        let cov = DMatrix::from_element(1, 1, 0.25);
        let w = Weighting::from_covariance(&cov).unwrap();
        assert!((w.matrix(1)[(0, 0)] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn kink_embedding_is_continuous() {
        let theta = Restriction::Kink.embed(&[0.6, 1.0, 2.0], 2, 0.25);
        assert_eq!(theta.delta, vec![-0.5, 0.0, 2.0]);
        assert_eq!(theta.delta1() + theta.delta3() * theta.gamma, 0.0);
    }
}
