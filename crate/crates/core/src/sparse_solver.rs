//! L1-constrained least squares `min ‖y − Xβ‖² s.t. ‖β‖₁ ≤ t` over its whole
//! regularization path, computed with LARS and the LASSO modification.
//!
//! The path is driven entirely by the cross products `XᵀX`, `Xᵀy` and `yᵀy`,
//! so one design can be shared by many profiles. Along each segment the
//! active correlations fall together at unit rate; a segment ends when an
//! inactive column catches up (it enters), an active coefficient reaches zero
//! (it leaves), or the correlations vanish (least-squares fit reached).

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::imaging::DesignMatrix;

/// Relative Schur-complement pivot below which the active set is declared singular.
pub const PIVOT_TOL: f64 = 1e-10;
/// Default tolerance for [`kkt_check`].
pub const KKT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LarsOptions {
    pub max_steps: usize,
    /// Only columns positively correlated with the residual may enter.
    pub nonnegative: bool,
    /// Stop once the L1 norm reaches this level (the last segment is cut there).
    pub t_limit: Option<f64>,
}

impl Default for LarsOptions {
    fn default() -> Self {
        LarsOptions { max_steps: 500, nonnegative: true, t_limit: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    /// Signal has no usable correlation with any column.
    ZeroSignal,
    /// Correlations reached zero: least-squares (or NNLS) point on the active set.
    LeastSquares,
    MaxSteps,
    /// Active set as large as the number of observations.
    Saturated,
    TLimit,
    Breakdown { step: usize, pivot: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Breakpoint {
    /// L1 norm of `beta`.
    pub t: f64,
    /// Active columns on the segment that starts here, ascending.
    pub active: Vec<usize>,
    pub beta: Vec<f64>,
    pub sse: f64,
}

#[derive(Debug, Clone)]
pub struct LassoPath {
    breakpoints: Vec<Breakpoint>,
    termination: Termination,
    nonnegative: bool,
    design_ref: String,
    xtx: Arc<DMatrix<f64>>,
    xty: DVector<f64>,
    yty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    pub beta: Vec<f64>,
    /// Realized L1 norm.
    pub t: f64,
    pub residual_sse: f64,
}

impl SparseSolution {
    /// Indices with nonzero coefficients.
    pub fn support(&self) -> Vec<usize> {
        self.beta.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(i, _)| i).collect()
    }
}

impl LassoPath {
    pub fn breakpoints(&self) -> &[Breakpoint] {
        &self.breakpoints
    }

    pub fn termination(&self) -> Termination {
        self.termination
    }

    pub fn design_ref(&self) -> &str {
        &self.design_ref
    }

    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }

    pub fn max_t(&self) -> f64 {
        self.breakpoints.last().map_or(0.0, |b| b.t)
    }

    pub fn steps(&self) -> usize {
        self.breakpoints.len() - 1
    }

    fn sse_of(&self, beta: &[f64]) -> f64 {
        sse_dense(&self.xtx, &self.xty, self.yty, beta)
    }

    /// Exact LASSO minimizer at level `min(t, max_t)` by linear interpolation
    /// between breakpoints.
    pub fn solve_at(&self, t: f64) -> SparseSolution {
        let t = t.max(0.0);
        let bps = &self.breakpoints;
        let last = bps.last().expect("path has a starting point");
        if t >= last.t {
            return SparseSolution { beta: last.beta.clone(), t: last.t, residual_sse: last.sse };
        }
        // first breakpoint with bp.t > t; t >= bps[0].t == 0 so idx >= 1
        let idx = bps.partition_point(|b| b.t <= t);
        let (lo, hi) = (&bps[idx - 1], &bps[idx]);
        let frac = (t - lo.t) / (hi.t - lo.t);
        let beta: Vec<f64> = lo
            .beta
            .iter()
            .zip(&hi.beta)
            .enumerate()
            .map(|(i, (a, b))| {
                // columns leaving at `hi` are exactly zero there; keep them
                // nonzero on the open segment, and columns absent from the
                // segment's active set exactly zero.
                if lo.active.binary_search(&i).is_ok() {
                    a + frac * (b - a)
                } else {
                    0.0
                }
            })
            .collect();
        let sse = self.sse_of(&beta);
        let t_real = beta.iter().map(|b| b.abs()).sum();
        SparseSolution { beta, t: t_real, residual_sse: sse }
    }

    /// Text dump: one line per breakpoint `t active_count sse` followed by
    /// `index:value` pairs of the nonzero coefficients.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for bp in &self.breakpoints {
            let _ = write!(out, "{:.12e} {} {:.12e}", bp.t, bp.active.len(), bp.sse);
            for (i, b) in bp.beta.iter().enumerate().filter(|(_, b)| **b != 0.0) {
                let _ = write!(out, " {i}:{b:.12e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Full LARS-LASSO path for a profile against a design matrix. A singular
/// active set is an error.
pub fn lars_lasso_path(design: &DesignMatrix, y: &[f64], opts: &LarsOptions) -> Result<LassoPath> {
    let path = lars_lasso_path_lenient(design, y, opts)?;
    match path.termination {
        Termination::Breakdown { step, pivot } => Err(Error::NumericalBreakdown { step, pivot }),
        _ => Ok(path),
    }
}

/// As [`lars_lasso_path`], but a singular active set ends the path (recorded
/// in [`LassoPath::termination`]) instead of failing.
pub fn lars_lasso_path_lenient(design: &DesignMatrix, y: &[f64], opts: &LarsOptions) -> Result<LassoPath> {
    let xty = design.correlate(y)?;
    let yty = y.iter().map(|v| v * v).sum();
    let g = design.grid();
    let design_ref = format!(
        "T={} L={} w={} sigma2={} columns={}",
        g.t(),
        g.extent(),
        design.mask().radius(),
        design.sigma2(),
        design.ncols()
    );
    Ok(run_lars(design.shared_cross_product(), xty, yty, design.matrix().nrows(), opts, design_ref))
}

/// Path for an arbitrary dense design.
pub fn lars_path_dense(x: &DMatrix<f64>, y: &[f64], opts: &LarsOptions) -> Result<LassoPath> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    let yv = DVector::from_column_slice(y);
    let path = run_lars(Arc::new(x.tr_mul(x)), x.tr_mul(&yv), yv.norm_squared(), x.nrows(), opts, format!("dense {}x{}", x.nrows(), x.ncols()));
    match path.termination {
        Termination::Breakdown { step, pivot } => Err(Error::NumericalBreakdown { step, pivot }),
        _ => Ok(path),
    }
}

fn run_lars(xtx: Arc<DMatrix<f64>>, xty: DVector<f64>, yty: f64, nrows: usize, opts: &LarsOptions, design_ref: String) -> LassoPath {
    let p = xty.len();
    let mut beta = vec![0.0; p];
    let mut active: Vec<usize> = Vec::new();
    let mut signs: Vec<f64> = Vec::new();
    // column dropped on the last step, with its old sign
    let mut blocked: Option<(usize, f64)> = None;
    let mut breakpoints = vec![Breakpoint { t: 0.0, active: Vec::new(), beta: beta.clone(), sse: yty }];
    let scale = xty.amax();
    let eps = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let sign_of = |c: f64| if opts.nonnegative { 1.0 } else { c.signum() };
    let score = |c: f64| if opts.nonnegative { c } else { c.abs() };

    let finish = |termination: Termination, breakpoints: Vec<Breakpoint>| LassoPath {
        breakpoints,
        termination,
        nonnegative: opts.nonnegative,
        design_ref: design_ref.clone(),
        xtx: Arc::clone(&xtx),
        xty: xty.clone(),
        yty,
    };

    if p == 0 || scale <= 0.0 {
        return finish(Termination::ZeroSignal, breakpoints);
    }

    let mut step = 0;
    loop {
        // correlations with the current residual
        let mut c = xty.clone();
        for &a in &active {
            c.axpy(-beta[a], &xtx.column(a), 1.0);
        }

        if active.is_empty() {
            let (j, best) = (0..p).map(|j| (j, score(c[j]))).fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= eps {
                let t = if step == 0 { Termination::ZeroSignal } else { Termination::LeastSquares };
                return finish(t, breakpoints);
            }
            active.push(j);
            signs.push(sign_of(c[j]));
            if let Some(last) = breakpoints.last_mut() {
                last.active = vec![j];
            }
        }

        if step >= opts.max_steps {
            return finish(Termination::MaxSteps, breakpoints);
        }
        if active.len() > nrows {
            return finish(Termination::Saturated, breakpoints);
        }

        let cmax = active.iter().zip(&signs).map(|(&a, s)| s * c[a]).sum::<f64>() / active.len() as f64;
        if cmax <= eps {
            return finish(Termination::LeastSquares, breakpoints);
        }

        // equiangular direction: G_AA w = s_A
        let k = active.len();
        let gaa = DMatrix::from_fn(k, k, |i, j| xtx[(active[i], active[j])]);
        let w = match cholesky_solve(&gaa, &DVector::from_column_slice(&signs)) {
            Ok(w) => w,
            Err(pivot) => return finish(Termination::Breakdown { step, pivot }, breakpoints),
        };
        let mut a = DVector::zeros(p);
        for (i, &col) in active.iter().enumerate() {
            a.axpy(w[i], &xtx.column(col), 1.0);
        }

        let mut gamma = cmax;
        let mut event = Event::End;
        for j in 0..p {
            if active.contains(&j) {
                continue;
            }
            // a dropped column sits exactly at its old-sign entry root; only
            // the opposite sign can bring it back on this segment
            let skip = blocked.filter(|b| b.0 == j).map(|b| b.1);
            let mut consider = |g: f64, sign: f64| {
                if Some(sign) != skip && g > 0.0 && g < gamma {
                    gamma = g;
                    event = Event::Enter(j, sign);
                }
            };
            if 1.0 - a[j] > 1e-14 {
                consider((cmax - c[j]) / (1.0 - a[j]), 1.0);
            }
            if !opts.nonnegative && 1.0 + a[j] > 1e-14 {
                consider((cmax + c[j]) / (1.0 + a[j]), -1.0);
            }
        }
        for (i, &col) in active.iter().enumerate() {
            if w[i] != 0.0 && beta[col] != 0.0 {
                let g = -beta[col] / w[i];
                if g > 0.0 && g < gamma {
                    gamma = g;
                    event = Event::Drop(i);
                }
            }
        }

        let t_now: f64 = beta.iter().map(|b| b.abs()).sum();
        let dt: f64 = signs.iter().zip(w.iter()).map(|(s, w)| s * w).sum();
        let mut limited = false;
        if let Some(limit) = opts.t_limit {
            if dt > 0.0 && t_now + gamma * dt >= limit {
                gamma = ((limit - t_now) / dt).max(0.0);
                limited = true;
            }
        }

        for (i, &col) in active.iter().enumerate() {
            beta[col] += gamma * w[i];
        }
        blocked = None;
        if !limited {
            match event {
                Event::Enter(j, sign) => {
                    active.push(j);
                    signs.push(sign);
                }
                Event::Drop(i) => {
                    let col = active.remove(i);
                    let sign = signs.remove(i);
                    beta[col] = 0.0;
                    blocked = Some((col, sign));
                }
                Event::End => {}
            }
        }
        step += 1;

        let mut sorted = active.clone();
        sorted.sort_unstable();
        let t = beta.iter().map(|b| b.abs()).sum();
        let sse = sse_dense(&xtx, &xty, yty, &beta);
        breakpoints.push(Breakpoint { t, active: sorted, beta: beta.clone(), sse });

        if limited {
            return finish(Termination::TLimit, breakpoints);
        }
        if matches!(event, Event::End) {
            return finish(Termination::LeastSquares, breakpoints);
        }
        if active.is_empty() {
            // every coefficient dropped back to zero; restart from the origin
            continue;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Enter(usize, f64),
    Drop(usize),
    End,
}

fn sse_dense(xtx: &DMatrix<f64>, xty: &DVector<f64>, yty: f64, beta: &[f64]) -> f64 {
    let nz: Vec<(usize, f64)> = beta.iter().copied().enumerate().filter(|(_, b)| *b != 0.0).collect();
    let mut quad = 0.0;
    for &(i, bi) in &nz {
        for &(j, bj) in &nz {
            quad += bi * bj * xtx[(i, j)];
        }
    }
    let lin: f64 = nz.iter().map(|&(i, b)| b * xty[i]).sum();
    (yty - 2.0 * lin + quad).max(0.0)
}

/// Solves `G w = b` by Cholesky, failing with the offending relative pivot
/// when a Schur complement falls below [`PIVOT_TOL`] of its diagonal.
fn cholesky_solve(g: &DMatrix<f64>, b: &DVector<f64>) -> std::result::Result<DVector<f64>, f64> {
    let n = g.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = g[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        let rel = d / g[(j, j)];
        if !(rel > PIVOT_TOL) {
            return Err(rel);
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    let mut z = b.clone();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub optimal: bool,
    pub max_violation: f64,
    /// Common active correlation (the implied penalty).
    pub lambda: f64,
}

/// Subgradient optimality check for `min ‖y − Xβ‖² s.t. ‖β‖₁ ≤ t` (and
/// `β ≥ 0` when `nonnegative`), with the correlation convention `c = Xᵀ(y − Xβ)`.
pub fn kkt_check(x: &DMatrix<f64>, y: &[f64], beta: &[f64], t: f64, nonnegative: bool) -> Result<KktReport> {
    kkt_check_tol(x, y, beta, t, nonnegative, KKT_TOL)
}

pub fn kkt_check_tol(x: &DMatrix<f64>, y: &[f64], beta: &[f64], t: f64, nonnegative: bool, tol: f64) -> Result<KktReport> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    if beta.len() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), found: beta.len() });
    }
    let b = DVector::from_column_slice(beta);
    let r = DVector::from_column_slice(y) - x * &b;
    let c = x.tr_mul(&r);
    let l1: f64 = beta.iter().map(|v| v.abs()).sum();

    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    let lambda = if active.is_empty() {
        let m = if nonnegative { c.max() } else { c.amax() };
        m.max(0.0)
    } else {
        active.iter().map(|&j| beta[j].signum() * c[j]).sum::<f64>() / active.len() as f64
    };

    let mut viol: f64 = (l1 - t).max(0.0);
    viol = viol.max((-lambda).max(0.0));
    for j in 0..beta.len() {
        if beta[j] != 0.0 {
            viol = viol.max((beta[j].signum() * c[j] - lambda).abs());
            if nonnegative && beta[j] < 0.0 {
                viol = viol.max(-beta[j]);
            }
        } else {
            let excess = if nonnegative { c[j] - lambda } else { c[j].abs() - lambda };
            viol = viol.max(excess.max(0.0));
        }
    }
    // a slack constraint needs a zero multiplier
    if l1 < t - tol {
        viol = viol.max(lambda);
    }
    Ok(KktReport { optimal: viol <= tol, max_violation: viol, lambda })
}

/// Raises the constraint from `t_start` towards `t_max` for as long as the
/// cluster count (as reported by `cluster_count`) stays unchanged, and
/// returns the solution at the highest level reached.
pub fn calibrate_constraint<F>(path: &LassoPath, t_start: f64, t_max: f64, cluster_count: F) -> Result<SparseSolution>
where
    F: Fn(&SparseSolution) -> usize,
{
    if !(t_start > 0.0 && t_start <= t_max) {
        return Err(Error::InvalidArgument(format!("need 0 < t_start <= t_max, got {t_start}, {t_max}")));
    }
    let top = t_max.min(path.max_t());
    if t_start >= top {
        return Ok(path.solve_at(t_start.min(t_max)));
    }
    let reference = cluster_count(&path.solve_at(t_start));
    let inner: Vec<f64> = path.breakpoints().iter().map(|b| b.t).filter(|&t| t > t_start && t < top).collect();
    for (i, &tb) in inner.iter().enumerate() {
        let next = inner.get(i + 1).copied().unwrap_or(top);
        let probe = path.solve_at(0.5 * (tb + next));
        if cluster_count(&probe) != reference {
            return Ok(path.solve_at(tb));
        }
    }
    Ok(path.solve_at(top))
}
