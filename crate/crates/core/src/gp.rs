//! Gaussian conditioning of query signals on measured ones.
//!
//! Two prior families are supported: the grid prior built from eigenstate
//! kernels ([`CovarianceModel`]) and a single-channel squared-exponential
//! prior used where no network model is involved (gap filling, numerical
//! differentiation of angles).

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::Serialize;
use rayon::prelude::*;

use crate::covariance::{filtered_noise, CovarianceModel, Filtering, SelectionSet};
use crate::error::{Error, Result};
use crate::frame::{ChannelSpec, Quantity, SignalFrame};

/// Relative jitter levels tried, in order, when a covariance is not numerically PD.
pub const JITTER_LEVELS: [f64; 3] = [1e-10, 1e-8, 1e-6];
/// Posterior variances above `-VARIANCE_CLIP` are clipped to zero.
pub const VARIANCE_CLIP: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Squared-exponential kernel `s² exp(−β (t − t')²)` with a white noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ModelFreeKernel {
    pub s2: f64,
    pub beta: f64,
    pub noise_var: f64,
}

impl ModelFreeKernel {
    pub fn new(s2: f64, beta: f64, noise_var: f64) -> Result<Self> {
        if !(s2 > 0.0) || !(beta > 0.0) || !(noise_var >= 0.0) {
            return Err(Error::Invalid(format!("invalid SE kernel s2={s2} beta={beta} noise={noise_var}")));
        }
        Ok(Self { s2, beta, noise_var })
    }

    /// Covariance of the `da`-th derivative at `t` with the `db`-th derivative at `t2` (orders 0 or 1).
    pub fn cov(&self, t: f64, t2: f64, da: u8, db: u8) -> f64 {
        let r = t - t2;
        let k = self.s2 * (-self.beta * r * r).exp();
        match (da, db) {
            (0, 0) => k,
            (0, 1) => 2.0 * self.beta * r * k,
            (1, 0) => -2.0 * self.beta * r * k,
            _ => (2.0 * self.beta - 4.0 * self.beta * self.beta * r * r) * k,
        }
    }

    fn matrix(&self, ta: &[f64], tb: &[f64], da: u8, db: u8) -> DMatrix<f64> {
        DMatrix::from_fn(ta.len(), tb.len(), |a, b| self.cov(ta[a], tb[b], da, db))
    }
}

/// Prior over measured and query variables.
#[derive(Debug, Clone)]
pub enum Prior<'a> {
    /// Network-informed prior; measurement noise is conjugated by the filter when there is one.
    Grid {
        cov: CovarianceModel<'a>,
        filtering: Filtering<'a>,
    },
    /// Single-signal SE prior around the sample mean of the measured data.
    ModelFree(ModelFreeKernel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    /// Low-rank identity when the factored form is available, dense otherwise.
    #[default]
    Auto,
    Dense,
}

#[derive(Debug, Clone)]
pub struct InferenceProblem<'a> {
    pub measured: SelectionSet,
    /// Measured values in the selection's channel-major order.
    pub data: DVector<f64>,
    pub query: SelectionSet,
    pub prior: Prior<'a>,
    pub solver: Solver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub query: SelectionSet,
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    /// Log-density of the measured data under the prior.
    pub loglik: f64,
    /// Full posterior covariance when requested.
    pub cov: Option<DMatrix<f64>>,
}

#[derive(Serialize)]
struct PosteriorRow<'a> {
    bus: usize,
    quantity: &'a str,
    time_s: f64,
    mean: f64,
    std: f64,
}

impl PosteriorEstimate {
    fn rows(&self) -> Vec<PosteriorRow<'_>> {
        let t = self.query.times.len();
        (0..self.mean.len())
            .map(|k| {
                let ch = &self.query.channels[k / t];
                PosteriorRow {
                    bus: ch.bus,
                    quantity: ch.quantity.as_str(),
                    time_s: self.query.times[k % t],
                    mean: self.mean[k],
                    std: self.std[k],
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bus,quantity,time_s,mean,std")?;
        for r in self.rows() {
            writeln!(f, "{},{},{},{},{}", r.bus, r.quantity, r.time_s, r.mean, r.std)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = serde_json::json!({ "loglik": self.loglik, "rows": self.rows() });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Mean and std of one query channel as time series.
    pub fn channel(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        let t = self.query.times.len();
        let r = c * t..(c + 1) * t;
        (self.mean.as_slice()[r.clone()].to_vec(), self.std.as_slice()[r].to_vec())
    }
}

/// Cholesky factor with the escalating jitter policy; returns the factor and the jitter added.
pub fn robust_cholesky(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = a.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let n = a.nrows().max(1);
    let scale = a.trace().abs() / n as f64;
    for &rel in &JITTER_LEVELS {
        let jitter = rel * scale.max(f64::MIN_POSITIVE);
        let mut b = a.clone();
        for i in 0..a.nrows() {
            b[(i, i)] += jitter;
        }
        log::warn!("covariance not positive definite, retrying with jitter {jitter:.3e}");
        if let Some(c) = b.cholesky() {
            return Ok((c, jitter));
        }
    }
    Err(Error::NotPositiveDefinite(format!(
        "{}x{} covariance failed Cholesky even with jitter {:.0e}·trace/n",
        a.nrows(),
        a.ncols(),
        JITTER_LEVELS[JITTER_LEVELS.len() - 1]
    )))
}

fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Solver for `B K Bᵀ + diag(σ²)` through the inner `DT×DT` system `I + G K`, `G = Bᵀ S⁻¹ B`.
pub struct Woodbury {
    b: DMatrix<f64>,
    k: DMatrix<f64>,
    s_inv: DVector<f64>,
    inner: nalgebra::LU<f64, Dyn, Dyn>,
    logdet: f64,
}

impl Woodbury {
    /// Returns `None` when the inner system is numerically singular.
    pub fn new(b: &DMatrix<f64>, k: &DMatrix<f64>, sigma2: &DVector<f64>) -> Result<Option<Self>> {
        let n = b.nrows();
        let r = b.ncols();
        if sigma2.len() != n || k.nrows() != r || k.ncols() != r {
            return Err(Error::Dimension(format!(
                "factor {}x{}, inner {}x{}, noise {}",
                n,
                r,
                k.nrows(),
                k.ncols(),
                sigma2.len()
            )));
        }
        if sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("low-rank solve needs strictly positive noise variances".into()));
        }
        let s_inv = sigma2.map(|s| 1.0 / s);
        let sb = DMatrix::from_fn(n, r, |i, j| b[(i, j)] * s_inv[i]);
        let g = b.transpose() * &sb;
        let inner = (DMatrix::identity(r, r) + &g * k).lu();
        // det(I + GK) > 0 since GK is similar to the PSD K^{1/2} G K^{1/2}
        let diag = inner.u().diagonal();
        let dmax = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dmin = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(dmin > 1e-13 * dmax) {
            return Ok(None);
        }
        let logdet = sigma2.iter().map(|s| s.ln()).sum::<f64>() + diag.iter().map(|v| v.abs().ln()).sum::<f64>();
        Ok(Some(Self {
            b: b.clone(),
            k: k.clone(),
            s_inv,
            inner,
            logdet,
        }))
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let srhs = DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| rhs[(i, j)] * self.s_inv[i]);
        let x = self.b.transpose() * &srhs;
        let y = self.inner.solve(&x).expect("inner system checked non-singular");
        let corr = &self.b * (&self.k * y);
        DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| srhs[(i, j)] - corr[(i, j)] * self.s_inv[i])
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }
}

fn dense_cov(b: &DMatrix<f64>, k: &DMatrix<f64>, sigma2: &DVector<f64>) -> DMatrix<f64> {
    let mut a = b * k * b.transpose();
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2[i];
    }
    (&a + a.transpose()) * 0.5
}

/// `(B K Bᵀ + diag σ²)⁻¹ rhs`, falling back to a dense factorization when the inner system is singular.
pub fn woodbury_solve(b: &DMatrix<f64>, k: &DMatrix<f64>, sigma2: &DVector<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rhs.nrows() != b.nrows() {
        return Err(Error::Dimension("right-hand side rows differ from the factor".into()));
    }
    match Woodbury::new(b, k, sigma2)? {
        Some(w) => Ok(w.solve(rhs)),
        None => {
            log::warn!("low-rank inner system singular, using dense solve");
            let (c, _) = robust_cholesky(&dense_cov(b, k, sigma2))?;
            Ok(c.solve(rhs))
        }
    }
}

/// Inverse operator of the measured covariance.
enum MeasuredSolve {
    Dense(Cholesky<f64, Dyn>),
    LowRank(Woodbury),
}

impl MeasuredSolve {
    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            MeasuredSolve::Dense(c) => c.solve(rhs),
            MeasuredSolve::LowRank(w) => w.solve(rhs),
        }
    }

    /// `X Σ⁻¹ Xᵀ` for `x = X` given as its transpose `xt`: returns the diagonal, and the full matrix on request.
    fn quadratic(&self, xt: &DMatrix<f64>, full: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        match self {
            MeasuredSolve::Dense(c) => {
                let l = c.l_dirty();
                let n = xt.nrows();
                let chunk = 64;
                let cols: Vec<DMatrix<f64>> = (0..xt.ncols())
                    .step_by(chunk)
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|c0| {
                        let w = chunk.min(xt.ncols() - c0);
                        let mut y = xt.columns(c0, w).into_owned();
                        l.view((0, 0), (n, n)).solve_lower_triangular_mut(&mut y);
                        y
                    })
                    .collect();
                let mut y = DMatrix::zeros(n, xt.ncols());
                let mut c0 = 0;
                for blk in cols {
                    let w = blk.ncols();
                    y.columns_mut(c0, w).copy_from(&blk);
                    c0 += w;
                }
                let diag = DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.norm_squared()));
                let fullm = full.then(|| y.transpose() * &y);
                (diag, fullm)
            }
            MeasuredSolve::LowRank(w) => {
                let sol = w.solve(xt);
                let diag = DVector::from_iterator(xt.ncols(), (0..xt.ncols()).map(|k| xt.column(k).dot(&sol.column(k))));
                let fullm = full.then(|| xt.transpose() * &sol);
                (diag, fullm)
            }
        }
    }

    fn logdet(&self) -> f64 {
        match self {
            MeasuredSolve::Dense(c) => chol_logdet(c),
            MeasuredSolve::LowRank(w) => w.logdet(),
        }
    }
}

fn derivative_order(measured: Quantity, query: Quantity) -> Result<u8> {
    match (measured, query) {
        (a, b) if a == b => Ok(0),
        (Quantity::Angle, Quantity::Speed) | (Quantity::Speed, Quantity::Rocof) => Ok(1),
        _ => Err(Error::Invalid(format!("model-free prior cannot relate {measured} data to {query}"))),
    }
}

struct Blocks {
    solve: MeasuredSolve,
    cross: DMatrix<f64>,
    query_diag: DVector<f64>,
    query_full: Option<DMatrix<f64>>,
    data: DVector<f64>,
    offset: DVector<f64>,
}

impl InferenceProblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.data.len() != self.measured.len() {
            return Err(Error::Dimension(format!(
                "data has {} values for {} measured variables",
                self.data.len(),
                self.measured.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("measured data contains non-finite values".into()));
        }
        Ok(())
    }

    fn blocks(&self, full_query: bool) -> Result<Blocks> {
        self.validate()?;
        match &self.prior {
            Prior::Grid { cov, filtering } => {
                let noise = match filtering {
                    Filtering::None => DMatrix::from_diagonal(&self.measured.noise_variances()),
                    Filtering::Stationary(f) | Filtering::Frame(f) => filtered_noise(&self.measured, f, true)?,
                };
                let low_rank = match (self.solver, filtering) {
                    (Solver::Auto, Filtering::None) => {
                        let nv = self.measured.noise_variances();
                        // the inner system has D·T rows, so it only pays off with fewer modes than channels
                        if nv.iter().all(|&v| v > 0.0) && cov.space.n_retained() < self.measured.channels.len() {
                            cov.low_rank_factor(&self.measured, *filtering)?.map(|f| (f, nv))
                        } else {
                            None
                        }
                    }
                    _ => None,
                };
                let solve = match low_rank {
                    Some(((b, k), nv)) => match Woodbury::new(&b, &k, &nv)? {
                        Some(w) => MeasuredSolve::LowRank(w),
                        None => {
                            log::warn!("low-rank inner system singular, using dense solve");
                            MeasuredSolve::Dense(robust_cholesky(&dense_cov(&b, &k, &nv))?.0)
                        }
                    },
                    None => {
                        let s11 = cov.assemble(&self.measured, &self.measured, *filtering)?.values + noise;
                        MeasuredSolve::Dense(robust_cholesky(&((&s11 + s11.transpose()) * 0.5))?.0)
                    }
                };
                let cross = cov.assemble(&self.query, &self.measured, *filtering)?.values;
                let (query_diag, query_full) = if full_query || matches!(filtering, Filtering::Frame(_)) {
                    let q = cov.assemble(&self.query, &self.query, *filtering)?.values;
                    (q.diagonal(), Some(q))
                } else {
                    // stationary prior: one variance per channel
                    let t = self.query.times.len();
                    let mut diag = DVector::zeros(self.query.len());
                    for (c, ch) in self.query.channels.iter().enumerate() {
                        let one = SelectionSet::new(vec![*ch], vec![self.query.times[0]])?;
                        let v = cov.assemble(&one, &one, *filtering)?.values[(0, 0)];
                        diag.rows_mut(c * t, t).fill(v);
                    }
                    (diag, None)
                };
                let zeros = DVector::zeros(self.query.len());
                Ok(Blocks {
                    solve,
                    cross,
                    query_diag,
                    query_full,
                    data: self.data.clone(),
                    offset: zeros,
                })
            }
            Prior::ModelFree(kern) => {
                let mq = self.measured.channels[0].quantity;
                if self.measured.channels.iter().any(|c| c.quantity != mq) {
                    return Err(Error::Invalid("model-free prior needs a single measured quantity".into()));
                }
                let tm = &self.measured.times;
                let tq = &self.query.times;
                let nm = self.measured.len();
                let nq = self.query.len();
                let mut s11 = DMatrix::zeros(nm, nm);
                let nv = self.measured.noise_variances();
                let mt = tm.len();
                for a in 0..self.measured.channels.len() {
                    for b in 0..self.measured.channels.len() {
                        if self.measured.channels[a].same_signal(&self.measured.channels[b]) {
                            s11.view_mut((a * mt, b * mt), (mt, mt)).copy_from(&kern.matrix(tm, tm, 0, 0));
                        }
                    }
                }
                for i in 0..nm {
                    s11[(i, i)] += nv[i];
                }
                let solve = MeasuredSolve::Dense(robust_cholesky(&s11)?.0);
                let qt = tq.len();
                let mut cross = DMatrix::zeros(nq, nm);
                let mut qfull = DMatrix::zeros(nq, nq);
                let orders: Vec<u8> = self
                    .query
                    .channels
                    .iter()
                    .map(|c| derivative_order(mq, c.quantity))
                    .collect::<Result<_>>()?;
                for (a, qa) in self.query.channels.iter().enumerate() {
                    for (b, mb) in self.measured.channels.iter().enumerate() {
                        if qa.bus == mb.bus {
                            cross.view_mut((a * qt, b * mt), (qt, mt)).copy_from(&kern.matrix(tq, tm, orders[a], 0));
                        }
                    }
                    for (b, qb) in self.query.channels.iter().enumerate() {
                        if qa.bus == qb.bus {
                            qfull
                                .view_mut((a * qt, b * qt), (qt, qt))
                                .copy_from(&kern.matrix(tq, tq, orders[a], orders[b]));
                        }
                    }
                }
                let mean = self.data.mean();
                let offset = DVector::from_fn(nq, |k, _| if orders[k / qt] == 0 { mean } else { 0.0 });
                Ok(Blocks {
                    solve,
                    cross,
                    query_diag: qfull.diagonal(),
                    query_full: Some(qfull),
                    data: self.data.add_scalar(-mean),
                    offset,
                })
            }
        }
    }
}

fn assemble_posterior(problem: &InferenceProblem, blocks: Blocks, want_cov: bool) -> Result<PosteriorEstimate> {
    let n = blocks.data.len();
    let z = DMatrix::from_column_slice(n, 1, blocks.data.as_slice());
    let alpha = blocks.solve.solve(&z);
    let quad = (z.transpose() * &alpha)[(0, 0)];
    let loglik = -0.5 * (quad + blocks.solve.logdet() + n as f64 * LN_2PI);
    let mean = &blocks.cross * alpha.column(0) + &blocks.offset;
    let (reduction, full) = blocks.solve.quadratic(&blocks.cross.transpose(), want_cov);
    let var = &blocks.query_diag - reduction;
    let mut std = DVector::zeros(var.len());
    for (k, &v) in var.iter().enumerate() {
        let tol = VARIANCE_CLIP * blocks.query_diag[k].abs().max(1.0);
        if v < -tol {
            return Err(Error::NotPositiveDefinite(format!(
                "negative posterior variance {v:.3e} at query variable {k}"
            )));
        }
        std[k] = v.max(0.0).sqrt();
    }
    let cov = if want_cov {
        let q = blocks.query_full.ok_or_else(|| Error::Invalid("query covariance not assembled".into()))?;
        let c = q - full.expect("full quadratic form requested");
        Some((&c + c.transpose()) * 0.5)
    } else {
        None
    };
    Ok(PosteriorEstimate {
        query: problem.query.clone(),
        mean,
        std,
        loglik,
        cov,
    })
}

/// Posterior mean and standard deviation of the query variables.
pub fn posterior(problem: &InferenceProblem) -> Result<PosteriorEstimate> {
    let b = problem.blocks(false)?;
    assemble_posterior(problem, b, false)
}

/// Posterior including the full query covariance.
pub fn posterior_with_cov(problem: &InferenceProblem) -> Result<PosteriorEstimate> {
    let b = problem.blocks(true)?;
    assemble_posterior(problem, b, true)
}

/// Negative log-density of `candidate` under the posterior over the query set.
pub fn anomaly_score(problem: &InferenceProblem, candidate: &DVector<f64>) -> Result<f64> {
    let post = posterior_with_cov(problem)?;
    score_against(&post, candidate)
}

/// Negative log-density of `candidate` under a posterior that carries its covariance.
pub fn score_against(post: &PosteriorEstimate, candidate: &DVector<f64>) -> Result<f64> {
    let cov = post
        .cov
        .as_ref()
        .ok_or_else(|| Error::Invalid("posterior has no covariance".into()))?;
    if candidate.len() != post.mean.len() {
        return Err(Error::Dimension("candidate length differs from the query set".into()));
    }
    let (c, _) = robust_cholesky(cov)?;
    let d = candidate - &post.mean;
    let sol = c.solve(&d);
    Ok(0.5 * (d.dot(&sol) + chol_logdet(&c) + d.len() as f64 * LN_2PI))
}

// ---- model-free hyperparameters ----

const GOLDEN: f64 = 0.618_033_988_749_894_9;
/// Upper bound of `η = σ²/s²` in the profile search.
const ETA_MAX: f64 = 1e4;
const ETA_MIN: f64 = 1e-10;
/// Largest number of samples used for hyperparameter fitting.
pub const FIT_WINDOW: usize = 400;

fn golden_max<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Grid scan followed by golden refinement around the best grid point.
fn scan_max<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, points: usize, tol: f64) -> (f64, f64) {
    let step = (hi - lo) / (points - 1) as f64;
    let vals: Vec<f64> = (0..points).map(|k| f(lo + k as f64 * step)).collect();
    let best = (0..points)
        .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Less))
        .unwrap_or(0);
    let a = lo + best.saturating_sub(1) as f64 * step;
    let b = lo + (best + 1).min(points - 1) as f64 * step;
    let (x, v) = golden_max(&mut f, a, b, tol);
    if vals[best] > v {
        (lo + best as f64 * step, vals[best])
    } else {
        (x, v)
    }
}

/// Profile log-likelihood for fixed `β`: best `log η` and the closed-form `s²`.
fn profile_beta(times: &[f64], y: &DVector<f64>, beta: f64) -> (f64, f64, f64) {
    let n = times.len();
    let r = DMatrix::from_fn(n, n, |a, b| (-beta * (times[a] - times[b]).powi(2)).exp());
    let eig = SymmetricEigen::new(r);
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let proj = eig.eigenvectors.transpose() * y;
    let p2: Vec<f64> = proj.iter().map(|v| v * v).collect();
    let ll = |log_eta: f64| -> f64 {
        let eta = log_eta.exp();
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for k in 0..n {
            let d = lam[k] + eta;
            quad += p2[k] / d;
            logdet += d.ln();
        }
        let s2 = quad / n as f64;
        -0.5 * (n as f64 * s2.ln() + logdet + n as f64 * (1.0 + LN_2PI))
    };
    let (le, v) = scan_max(ll, ETA_MIN.ln(), ETA_MAX.ln(), 25, 1e-3);
    let eta = le.exp();
    let quad: f64 = (0..n).map(|k| p2[k] / (lam[k] + eta)).sum();
    (v, eta, quad / n as f64)
}

/// Maximum marginal likelihood SE kernel for scattered samples.
pub fn fit_model_free_points(times: &[f64], values: &[f64]) -> Result<ModelFreeKernel> {
    let n = times.len();
    if n < 30 || values.len() != n {
        return Err(Error::InsufficientSamples { need: 30, have: n.min(values.len()) });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 1e-300) || !var.is_finite() {
        return Err(Error::Degenerate("signal has no variation".into()));
    }
    let (times, y) = if n > FIT_WINDOW {
        let start = (n - FIT_WINDOW) / 2;
        (&times[start..start + FIT_WINDOW], &values[start..start + FIT_WINDOW])
    } else {
        (times, values)
    };
    let m = times.len();
    let scale = var.sqrt();
    let y = DVector::from_fn(m, |k, _| (y[k] - mean) / scale);
    let span = times[m - 1] - times[0];
    let min_dt = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if !(span > 0.0) || !(min_dt > 0.0) {
        return Err(Error::Invalid("sample times must be strictly increasing".into()));
    }
    let lo = (0.01 / (span * span)).ln();
    let hi = (1.0 / (min_dt * min_dt)).ln();
    let (lb, _) = scan_max(|lb| profile_beta(times, &y, lb.exp()).0, lo, hi, 16, 1e-3);
    let beta = lb.exp();
    let (_, eta, s2) = profile_beta(times, &y, beta);
    let s2 = s2 * var;
    ModelFreeKernel::new(s2, beta, eta * s2)
}

/// Fits the SE kernel to the single channel of a frame (edge samples excluded).
pub fn fit_model_free(data: &SignalFrame) -> Result<ModelFreeKernel> {
    if data.channels.len() != 1 {
        return Err(Error::Invalid("model-free fit needs a single-channel frame".into()));
    }
    let e = data.edge_samples;
    let end = data.len().saturating_sub(e);
    if end <= e {
        return Err(Error::InsufficientSamples { need: 30, have: 0 });
    }
    let times: Vec<f64> = (e..end).map(|k| data.time(k)).collect();
    let vals: Vec<f64> = (e..end).map(|k| data.samples[(k, 0)]).collect();
    fit_model_free_points(&times, &vals)
}

fn single_channel(data: &SignalFrame) -> Result<&ChannelSpec> {
    if data.channels.len() != 1 {
        return Err(Error::Invalid("expected a single-channel frame".into()));
    }
    Ok(&data.channels[0])
}

/// Posterior of the time derivative of a single angle (or speed) channel.
pub fn differentiate(data: &SignalFrame, query_times: &[f64], kernel: Option<ModelFreeKernel>) -> Result<PosteriorEstimate> {
    let ch = single_channel(data)?;
    let target = match ch.quantity {
        Quantity::Angle => Quantity::Speed,
        Quantity::Speed => Quantity::Rocof,
        q => return Err(Error::Invalid(format!("cannot differentiate a {q} channel"))),
    };
    let kern = match kernel {
        Some(k) => k,
        None => fit_model_free(data)?,
    };
    let noise = if ch.noise_std > 0.0 { ch.noise_std } else { kern.noise_var.sqrt() };
    let measured = SelectionSet::new(vec![ChannelSpec::new(ch.bus, ch.quantity, noise)], data.times())?;
    let query = SelectionSet::new(vec![ChannelSpec::new(ch.bus, target, 0.0)], query_times.to_vec())?;
    let problem = InferenceProblem {
        measured,
        data: DVector::from_column_slice(data.samples.column(0).as_slice()),
        query,
        prior: Prior::ModelFree(kern),
        solver: Solver::Dense,
    };
    posterior(&problem)
}

/// Fills the time windows `[start, end)` of a single channel from the remaining samples.
pub fn impute(data: &SignalFrame, gaps: &[(f64, f64)], kernel: Option<ModelFreeKernel>) -> Result<PosteriorEstimate> {
    let ch = single_channel(data)?;
    let in_gap = |t: f64| gaps.iter().any(|&(a, b)| t >= a && t < b);
    let (mut tm, mut vm, mut tq) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..data.len() {
        let t = data.time(k);
        if in_gap(t) {
            tq.push(t);
        } else {
            tm.push(t);
            vm.push(data.samples[(k, 0)]);
        }
    }
    if tq.is_empty() {
        return Err(Error::Invalid("gaps contain no samples".into()));
    }
    let kern = match kernel {
        Some(k) => k,
        None => fit_model_free_points(&tm, &vm)?,
    };
    let noise = if ch.noise_std > 0.0 { ch.noise_std } else { kern.noise_var.sqrt() };
    let problem = InferenceProblem {
        measured: SelectionSet::new(vec![ChannelSpec::new(ch.bus, ch.quantity, noise)], tm)?,
        data: DVector::from_vec(vm),
        query: SelectionSet::new(vec![ChannelSpec::new(ch.bus, ch.quantity, 0.0)], tq)?,
        prior: Prior::ModelFree(kern),
        solver: Solver::Dense,
    };
    posterior(&problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{eigenspace, GridModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn sherman_morrison_rank_one() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let k = DMatrix::from_element(1, 1, 0.7);
        let s = DVector::from_vec(vec![0.5, 1.5, 2.0]);
        let rhs = DMatrix::from_column_slice(3, 1, &[1.0, 0.3, -0.2]);
        let got = woodbury_solve(&b, &k, &s, &rhs).unwrap();
        let si = DMatrix::from_diagonal(&s.map(|v| 1.0 / v));
        let sib = &si * &b;
        let denom = 1.0 + 0.7 * (b.transpose() * &sib)[(0, 0)];
        let inv = &si - &sib * sib.transpose() * (0.7 / denom);
        assert!((got - inv * rhs).amax() < 1e-12);
    }

    #[test]
    fn woodbury_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 40;
            let r = 12;
            let b = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
            let k = random_psd(&mut rng, r, 8);
            let s = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
            let rhs = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let got = woodbury_solve(&b, &k, &s, &rhs).unwrap();
            let want = dense_cov(&b, &k, &s).cholesky().unwrap().solve(&rhs);
            assert!((&got - &want).norm() <= 1e-8 * want.norm());
            let w = Woodbury::new(&b, &k, &s).unwrap().unwrap();
            let dl = chol_logdet(&dense_cov(&b, &k, &s).cholesky().unwrap());
            assert!((w.logdet() - dl).abs() < 1e-8 * dl.abs().max(1.0));
        }
    }

    #[test]
    fn zero_factor_is_diagonal_scaling() {
        let b = DMatrix::zeros(4, 2);
        let k = DMatrix::identity(2, 2);
        let s = DVector::from_vec(vec![1.0, 2.0, 4.0, 8.0]);
        let rhs = DMatrix::from_element(4, 1, 8.0);
        let got = woodbury_solve(&b, &k, &s, &rhs).unwrap();
        assert_eq!(got.as_slice(), &[8.0, 4.0, 2.0, 1.0]);
    }

    #[test]
    fn se_cross_kernel_odd() {
        let k = ModelFreeKernel::new(2.0, 3.0, 0.0).unwrap();
        assert_eq!(k.cov(1.3, 1.3, 0, 1), 0.0);
        assert!((k.cov(1.0, 1.2, 0, 1) + k.cov(1.2, 1.0, 0, 1)).abs() < 1e-15);
        // finite-difference check of the mixed derivative
        let h = 1e-5;
        let fd = (k.cov(0.4 + h, 0.1 + h, 0, 0) - k.cov(0.4 + h, 0.1 - h, 0, 0) - k.cov(0.4 - h, 0.1 + h, 0, 0)
            + k.cov(0.4 - h, 0.1 - h, 0, 0))
            / (4.0 * h * h);
        assert!((fd - k.cov(0.4, 0.1, 1, 1)).abs() < 1e-5);
    }

    fn two_machine() -> (GridModel, crate::grid::EigenSpace) {
        let l = DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]);
        let m = GridModel::new(DVector::from_element(2, 1.0), DVector::from_element(2, 0.3), l, 60.0).unwrap();
        let s = eigenspace(&m, None).unwrap().with_retained(vec![1]).unwrap();
        (m, s)
    }

    #[test]
    fn scalar_conditioning_by_hand() {
        let (m, s) = two_machine();
        let alpha = DMatrix::from_element(1, 1, 0.8);
        let cm = CovarianceModel::new(&m, &s, &alpha, None).unwrap();
        let measured = SelectionSet::new(vec![ChannelSpec::new(0, Quantity::Speed, 0.05)], vec![0.0]).unwrap();
        let query = SelectionSet::new(vec![ChannelSpec::speed(1)], vec![0.0]).unwrap();
        let s11 = cm.assemble(&measured, &measured, Filtering::None).unwrap().values[(0, 0)];
        let s21 = cm.assemble(&query, &measured, Filtering::None).unwrap().values[(0, 0)];
        let z = 0.37;
        for solver in [Solver::Auto, Solver::Dense] {
            let p = InferenceProblem {
                measured: measured.clone(),
                data: DVector::from_element(1, z),
                query: query.clone(),
                prior: Prior::Grid {
                    cov: cm.clone(),
                    filtering: Filtering::None,
                },
                solver,
            };
            let post = posterior(&p).unwrap();
            let rho = s21 / (s11 + 0.0025);
            assert!((post.mean[0] - rho * z).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_data_zero_mean() {
        let (m, s) = two_machine();
        let alpha = DMatrix::from_element(1, 1, 1.0);
        let cm = CovarianceModel::new(&m, &s, &alpha, None).unwrap();
        let measured = SelectionSet::uniform(vec![ChannelSpec::new(0, Quantity::Speed, 0.01)], 0.0, 10.0, 20).unwrap();
        let query = SelectionSet::uniform(vec![ChannelSpec::speed(1)], 0.0, 10.0, 20).unwrap();
        let p = InferenceProblem {
            measured,
            data: DVector::zeros(20),
            query,
            prior: Prior::Grid {
                cov: cm,
                filtering: Filtering::None,
            },
            solver: Solver::Auto,
        };
        let post = posterior(&p).unwrap();
        assert!(post.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn anomaly_displacement() {
        let k = ModelFreeKernel::new(1.0, 0.5, 0.0).unwrap();
        let measured = SelectionSet::new(vec![ChannelSpec::new(0, Quantity::Angle, 0.1)], vec![0.0, 1.0, 2.0]).unwrap();
        let query = SelectionSet::new(vec![ChannelSpec::angle(0)], vec![10.0]).unwrap();
        let p = InferenceProblem {
            measured,
            data: DVector::from_vec(vec![0.2, -0.1, 0.4]),
            query,
            prior: Prior::ModelFree(k),
            solver: Solver::Dense,
        };
        let post = posterior_with_cov(&p).unwrap();
        let base = anomaly_score(&p, &post.mean).unwrap();
        let shifted = &post.mean + DVector::from_element(1, 5.0 * post.std[0]);
        let up = anomaly_score(&p, &shifted).unwrap();
        assert!((up - base - 12.5).abs() < 1e-9);
        let down = &post.mean - DVector::from_element(1, 5.0 * post.std[0]);
        assert!((anomaly_score(&p, &down).unwrap() - up).abs() < 1e-9);
    }

    fn sample_se(k: &ModelFreeKernel, times: &[f64], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = times.len();
        let mut c = k.matrix(times, times, 0, 0);
        for i in 0..n {
            c[(i, i)] += k.noise_var + 1e-10;
        }
        let l = c.cholesky().unwrap().unpack();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        (l * z).iter().copied().collect()
    }

    #[test]
    fn se_hyperparameters_recovered() {
        let truth = ModelFreeKernel::new(1.0, 4.0, 1e-4).unwrap();
        let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let y = sample_se(&truth, &times, 9);
        let fit = fit_model_free_points(&times, &y).unwrap();
        assert!(fit.beta > 4.0 / 1.5 && fit.beta < 4.0 * 1.5, "{fit:?}");
        let scaled: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let fit3 = fit_model_free_points(&times, &scaled).unwrap();
        assert!((fit3.s2 / fit.s2 - 9.0).abs() < 1e-6 * 9.0);
        assert!((fit3.beta / fit.beta - 1.0).abs() < 1e-6);
    }

    #[test]
    fn white_noise_goes_to_noise_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.1).collect();
        let y: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let var = y.iter().map(|v| v * v).sum::<f64>() / 200.0;
        let fit = fit_model_free_points(&times, &y).unwrap();
        assert!(fit.s2 < 0.1 * var, "{fit:?}");
    }

    #[test]
    fn constant_data_is_degenerate() {
        let times: Vec<f64> = (0..50).map(|k| k as f64).collect();
        assert!(matches!(fit_model_free_points(&times, &[2.0; 50]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn derivative_of_sinusoid() {
        let rate = 30.0;
        let n = 300;
        let f0 = 0.6;
        let w = 2.0 * std::f64::consts::PI * f0;
        let s = DMatrix::from_fn(n, 1, |k, _| (w * k as f64 / rate).sin());
        let frame = SignalFrame::new(rate, 0.0, vec![ChannelSpec::new(0, Quantity::Angle, 1e-4)], s).unwrap();
        let qt: Vec<f64> = (30..270).map(|k| k as f64 / rate).collect();
        let post = differentiate(&frame, &qt, None).unwrap();
        let err: f64 = qt.iter().enumerate().map(|(k, t)| (post.mean[k] - w * (w * t).cos()).powi(2)).sum::<f64>();
        let rms = (err / qt.len() as f64).sqrt();
        assert!(rms < 0.02 * w, "rms {rms}");
    }

    #[test]
    fn derivative_of_constant() {
        let frame = SignalFrame::new(10.0, 0.0, vec![ChannelSpec::new(0, Quantity::Angle, 0.01)], DMatrix::from_element(80, 1, 0.3)).unwrap();
        let k = ModelFreeKernel::new(1.0, 1.0, 1e-4).unwrap();
        let post = differentiate(&frame, &[1.0, 4.0, 7.0], Some(k)).unwrap();
        for i in 0..3 {
            assert!(post.mean[i].abs() < 3.0 * post.std[i] + 1e-12);
        }
    }

    #[test]
    fn impute_reproduces_smooth_signal() {
        let n = 200;
        let s = DMatrix::from_fn(n, 1, |k, _| (0.5 * k as f64 / 10.0).sin());
        let frame = SignalFrame::new(10.0, 0.0, vec![ChannelSpec::new(0, Quantity::Angle, 1e-3)], s).unwrap();
        let post = impute(&frame, &[(8.0, 9.0)], None).unwrap();
        for (k, t) in post.query.times.iter().enumerate() {
            assert!((post.mean[k] - (0.5 * t).sin()).abs() < 0.01);
        }
    }

    #[test]
    fn interpolates_measured_points() {
        let k = ModelFreeKernel::new(1.0, 1.0, 0.0).unwrap();
        let times: Vec<f64> = (0..12).map(|t| t as f64 * 0.5).collect();
        let data = DVector::from_fn(12, |i, _| (0.7 * times[i]).cos() + 2.0);
        let p = InferenceProblem {
            measured: SelectionSet::new(vec![ChannelSpec::new(0, Quantity::Angle, 1e-8)], times.clone()).unwrap(),
            data: data.clone(),
            query: SelectionSet::new(vec![ChannelSpec::angle(0)], times).unwrap(),
            prior: Prior::ModelFree(k),
            solver: Solver::Dense,
        };
        let post = posterior(&p).unwrap();
        for i in 0..12 {
            assert!((post.mean[i] - data[i]).abs() < 1e-4 * data[i].abs());
            assert!(post.std[i] < 1e-3);
        }
    }
}
