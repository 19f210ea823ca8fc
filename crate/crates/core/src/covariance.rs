//! Spatiotemporal covariance of bus signals assembled from eigenstate kernels.
//!
//! Every bus signal is a sum over retained eigenstates of a response driven by
//! that eigenstate's input `x_i`, weighted by `[M^{-1/2}V]_{n,i}`; power
//! injections follow from `p = M ω̇ + D ω + L θ` (plus the turbine term when
//! present). With `E[x_i(t) x_j(s)] = α_ij δ(t − s)`, the covariance between two
//! channels is `Σ_ij α_ij ∫ g_{a,i}(τ+s) g_{b,j}(s) ds`.
//!
//! Variable ordering in every block is channel-major: index `c·T + t`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::FilterOperator;
use crate::frame::{ChannelSpec, Quantity};
use crate::grid::{EigenSpace, GridModel, TurbineSpec};
use crate::kernels::{mode_kernel, CorrKernel, ExpMixKernel, KernelQuantity};

/// Channels observed at a common ascending set of instants.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSet {
    pub channels: Vec<ChannelSpec>,
    pub times: Vec<f64>,
}

impl SelectionSet {
    pub fn new(channels: Vec<ChannelSpec>, times: Vec<f64>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Invalid("selection has no channels".into()));
        }
        if times.is_empty() {
            return Err(Error::Invalid("selection has no times".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("selection times must be strictly increasing".into()));
        }
        if let Some(c) = channels.iter().find(|c| !(c.noise_std >= 0.0)) {
            return Err(Error::Invalid(format!("negative noise std on {}", c.label())));
        }
        Ok(Self { channels, times })
    }

    /// Uniform grid `t0 + k/rate`, `k = 0..len`.
    pub fn uniform(channels: Vec<ChannelSpec>, t0: f64, rate: f64, len: usize) -> Result<Self> {
        Self::new(channels, (0..len).map(|k| t0 + k as f64 / rate).collect())
    }

    pub fn len(&self) -> usize {
        self.channels.len() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, channel: usize, time: usize) -> usize {
        channel * self.times.len() + time
    }

    /// Noise variance of every variable.
    pub fn noise_variances(&self) -> DVector<f64> {
        let t = self.times.len();
        DVector::from_fn(self.len(), |k, _| self.channels[k / t].noise_std.powi(2))
    }

    fn check_buses(&self, n: usize) -> Result<()> {
        match self.channels.iter().find(|c| c.bus >= n) {
            Some(c) => Err(Error::Invalid(format!("bus {} out of range for {n} buses", c.bus))),
            None => Ok(()),
        }
    }
}

/// Time-axis treatment of a covariance block.
#[derive(Debug, Clone, Copy)]
pub enum Filtering<'a> {
    /// Raw continuous-time kernel samples.
    None,
    /// Interior (edge-free) effect of zero-phase filtering: `Σ_u ρ(u) k(m − u)`.
    Stationary(&'a FilterOperator),
    /// Exact `F K Fᵀ` with the filter's padded convolution matrix on the spanned grid.
    Frame(&'a FilterOperator),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBlock {
    pub rows: SelectionSet,
    pub cols: SelectionSet,
    pub values: DMatrix<f64>,
}

/// Eigeninput covariance together with the model it refers to.
#[derive(Debug, Clone)]
pub struct CovarianceModel<'a> {
    pub model: &'a GridModel,
    pub space: &'a EigenSpace,
    pub alpha: &'a DMatrix<f64>,
    pub turbine: Option<&'a TurbineSpec>,
}

fn kq(q: Quantity) -> Option<KernelQuantity> {
    match q {
        Quantity::Angle => Some(KernelQuantity::Angle),
        Quantity::Speed => Some(KernelQuantity::Speed),
        Quantity::Rocof => Some(KernelQuantity::Rocof),
        Quantity::Power => None,
    }
}

impl<'a> CovarianceModel<'a> {
    pub fn new(
        model: &'a GridModel,
        space: &'a EigenSpace,
        alpha: &'a DMatrix<f64>,
        turbine: Option<&'a TurbineSpec>,
    ) -> Result<Self> {
        let d = space.retained.len();
        if d == 0 {
            return Err(Error::Invalid("no retained eigenstates".into()));
        }
        if alpha.nrows() != d || alpha.ncols() != d {
            return Err(Error::Dimension(format!(
                "alpha is {}x{} but {d} eigenstates are retained",
                alpha.nrows(),
                alpha.ncols()
            )));
        }
        if space.weights.nrows() != model.n_buses {
            return Err(Error::Dimension("eigenspace does not belong to the model".into()));
        }
        Ok(Self {
            model,
            space,
            alpha,
            turbine,
        })
    }

    fn mode(&self, k: usize, q: KernelQuantity) -> Result<ExpMixKernel> {
        let i = self.space.retained[k];
        mode_kernel(self.space.eigvals[i], self.space.gamma, self.turbine, q).map_err(|e| match e {
            Error::ZeroModeAngle(_) => Error::ZeroModeAngle(i),
            other => other,
        })
    }

    /// Response of a channel to each retained eigeninput.
    pub fn channel_responses(&self, ch: &ChannelSpec) -> Result<Vec<ExpMixKernel>> {
        let n = ch.bus;
        if n >= self.model.n_buses {
            return Err(Error::Invalid(format!("bus {n} out of range")));
        }
        (0..self.space.retained.len())
            .map(|k| {
                let i = self.space.retained[k];
                let w = self.space.weights[(n, i)];
                match kq(ch.quantity) {
                    Some(q) => Ok(self.mode(k, q)?.scaled(w)),
                    None => {
                        let m = self.model.inertia[n];
                        let lam = self.space.eigvals[i];
                        let speed = self.mode(k, KernelQuantity::Speed)?;
                        let mut out = self.mode(k, KernelQuantity::Rocof)?.scaled(m * w);
                        out = out.add(&speed.scaled(self.model.damping[n] * w));
                        if lam != 0.0 {
                            out = out.add(&self.mode(k, KernelQuantity::Angle)?.scaled(lam * m * w));
                        }
                        if let Some(t) = self.turbine {
                            // −p_c = r M · (speed through the turbine lag)
                            out = out.add(&speed.cascade_lag(t.tau).scaled(t.droop_r * m * w));
                        }
                        Ok(out)
                    }
                }
            })
            .collect()
    }

    fn pair_from_responses(&self, ga: &[ExpMixKernel], gb: &[ExpMixKernel]) -> Result<CorrKernel> {
        let mut k = CorrKernel::default();
        for (i, a) in ga.iter().enumerate() {
            for (j, b) in gb.iter().enumerate() {
                k.accumulate(a, b, self.alpha[(i, j)])?;
            }
        }
        Ok(k)
    }

    /// Correlation kernel between two channels.
    pub fn pair_kernel(&self, a: &ChannelSpec, b: &ChannelSpec) -> Result<CorrKernel> {
        self.pair_from_responses(&self.channel_responses(a)?, &self.channel_responses(b)?)
    }

    /// Covariance block between two selections.
    pub fn assemble(&self, rows: &SelectionSet, cols: &SelectionSet, filtering: Filtering) -> Result<CovarianceBlock> {
        rows.check_buses(self.model.n_buses)?;
        cols.check_buses(self.model.n_buses)?;
        let row_resp: Vec<Vec<ExpMixKernel>> =
            rows.channels.iter().map(|c| self.channel_responses(c)).collect::<Result<_>>()?;
        let col_resp: Vec<Vec<ExpMixKernel>> =
            cols.channels.iter().map(|c| self.channel_responses(c)).collect::<Result<_>>()?;
        let grid = TimeAxis::new(&rows.times, &cols.times, filtering)?;
        let tr = rows.times.len();
        let tc = cols.times.len();
        let strips: Vec<Vec<DMatrix<f64>>> = row_resp
            .par_iter()
            .map(|ga| {
                col_resp
                    .iter()
                    .map(|gb| {
                        let k = self.pair_from_responses(ga, gb)?;
                        grid.fill(&k)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut values = DMatrix::zeros(rows.len(), cols.len());
        for (a, strip) in strips.iter().enumerate() {
            for (b, blk) in strip.iter().enumerate() {
                values.view_mut((a * tr, b * tc), (tr, tc)).copy_from(blk);
            }
        }
        Ok(CovarianceBlock {
            rows: rows.clone(),
            cols: cols.clone(),
            values,
        })
    }

    /// Factor `Σ = B K Bᵀ` for selections whose channels share one state quantity.
    ///
    /// `B = W ⊗ I_T` with `W` the channel rows of `M^{-1/2}V₁`, and `K` the
    /// eigenstate covariance in mode-major order `i·T + t`. Returns `None`
    /// for power channels or mixed quantities.
    pub fn low_rank_factor(&self, sel: &SelectionSet, filtering: Filtering) -> Result<Option<(DMatrix<f64>, DMatrix<f64>)>> {
        let q = sel.channels[0].quantity;
        if sel.channels.iter().any(|c| c.quantity != q) {
            return Ok(None);
        }
        let kq = match kq(q) {
            Some(k) => k,
            None => return Ok(None),
        };
        sel.check_buses(self.model.n_buses)?;
        let d = self.space.retained.len();
        let t = sel.times.len();
        let buses: Vec<usize> = sel.channels.iter().map(|c| c.bus).collect();
        let w = self.space.retained_weights(&buses);
        let mut b = DMatrix::zeros(sel.len(), d * t);
        for c in 0..buses.len() {
            for i in 0..d {
                for k in 0..t {
                    b[(c * t + k, i * t + k)] = w[(c, i)];
                }
            }
        }
        let modes: Vec<ExpMixKernel> = (0..d).map(|k| self.mode(k, kq)).collect::<Result<_>>()?;
        let grid = TimeAxis::new(&sel.times, &sel.times, filtering)?;
        let blocks: Vec<Vec<DMatrix<f64>>> = (0..d)
            .into_par_iter()
            .map(|i| {
                (0..d)
                    .map(|j| grid.fill(&CorrKernel::from_pair(&modes[i], &modes[j], self.alpha[(i, j)])?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut kmat = DMatrix::zeros(d * t, d * t);
        for (i, row) in blocks.iter().enumerate() {
            for (j, blk) in row.iter().enumerate() {
                kmat.view_mut((i * t, j * t), (t, t)).copy_from(blk);
            }
        }
        Ok(Some((b, kmat)))
    }
}

/// Convenience wrapper over [`CovarianceModel::assemble`].
pub fn assemble(
    model: &GridModel,
    space: &EigenSpace,
    alpha: &DMatrix<f64>,
    rows: &SelectionSet,
    cols: &SelectionSet,
    filtering: Filtering,
    turbine: Option<&TurbineSpec>,
) -> Result<CovarianceBlock> {
    CovarianceModel::new(model, space, alpha, turbine)?.assemble(rows, cols, filtering)
}

/// Adds measurement noise variances on the diagonal of a square block.
pub fn add_noise(block: &CovarianceBlock) -> Result<CovarianceBlock> {
    if block.rows != block.cols {
        return Err(Error::Invalid("noise can only be added to a block with rows = cols".into()));
    }
    let mut out = block.clone();
    let nv = block.rows.noise_variances();
    for k in 0..nv.len() {
        out.values[(k, k)] += nv[k];
    }
    Ok(out)
}

/// Covariance of white measurement noise after zero-phase filtering.
///
/// With `banded` the full `σ² ρ(m)` structure is returned, otherwise only its diagonal `σ² ρ(0)`.
pub fn filtered_noise(sel: &SelectionSet, filter: &FilterOperator, banded: bool) -> Result<DMatrix<f64>> {
    let rho = filter.lag_weights();
    let mid = (rho.len() - 1) as i64 / 2;
    let t = sel.times.len();
    let mut out = DMatrix::zeros(sel.len(), sel.len());
    let lags = integer_lags(&sel.times, &sel.times, filter.sample_rate)?;
    for (c, ch) in sel.channels.iter().enumerate() {
        let var = ch.noise_std * ch.noise_std;
        if var == 0.0 {
            continue;
        }
        for a in 0..t {
            for b in 0..t {
                if !banded && a != b {
                    continue;
                }
                let m = lags[(a, b)];
                if m.abs() <= mid {
                    out[(c * t + a, c * t + b)] = var * rho[(mid + m) as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Row `bus` of `M^{-1/2}V` restricted to the retained eigenstates.
pub fn participation(model: &GridModel, space: &EigenSpace, bus: usize) -> Result<DVector<f64>> {
    if bus >= model.n_buses {
        return Err(Error::Invalid(format!("bus {bus} out of range")));
    }
    Ok(DVector::from_iterator(
        space.retained.len(),
        space.retained.iter().map(|&i| space.weights[(bus, i)]),
    ))
}

/// Kernel values at integer sample lags `m / rate`, raw or stationary-filtered.
pub fn kernel_at_lags(k: &CorrKernel, lags: &[i64], rate: f64, filtering: Filtering) -> Result<Vec<f64>> {
    if matches!(filtering, Filtering::Frame(_)) {
        return Err(Error::Invalid("frame filtering has no lag-only form".into()));
    }
    if lags.is_empty() {
        return Ok(Vec::new());
    }
    let tr: Vec<f64> = lags.iter().map(|&m| m as f64 / rate).collect();
    let out = TimeAxis::new(&tr, &[0.0], filtering)?.fill(k)?;
    Ok(out.iter().copied().collect())
}

fn integer_lags(tr: &[f64], tc: &[f64], rate: f64) -> Result<DMatrix<i64>> {
    let origin = tr[0].min(tc[0]);
    let idx = |t: f64| -> Result<i64> {
        let x = (t - origin) * rate;
        let k = x.round();
        if (x - k).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "time {t} is not on the {rate} Hz sample grid required by filtering"
            )));
        }
        Ok(k as i64)
    };
    let ir: Vec<i64> = tr.iter().map(|&t| idx(t)).collect::<Result<_>>()?;
    let ic: Vec<i64> = tc.iter().map(|&t| idx(t)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(ir.len(), ic.len(), |a, b| ir[a] - ic[b]))
}

/// Maps a correlation kernel onto a pair of time sets.
enum TimeAxis {
    Raw {
        tr: Vec<f64>,
        tc: Vec<f64>,
    },
    Stationary {
        lags: DMatrix<i64>,
        rho: Vec<f64>,
        dt: f64,
    },
    Frame {
        fmat: DMatrix<f64>,
        dt: f64,
        row_idx: Vec<usize>,
        col_idx: Vec<usize>,
    },
}

impl TimeAxis {
    fn new(tr: &[f64], tc: &[f64], filtering: Filtering) -> Result<Self> {
        match filtering {
            Filtering::None => Ok(TimeAxis::Raw {
                tr: tr.to_vec(),
                tc: tc.to_vec(),
            }),
            Filtering::Stationary(f) => Ok(TimeAxis::Stationary {
                lags: integer_lags(tr, tc, f.sample_rate)?,
                rho: f.lag_weights(),
                dt: 1.0 / f.sample_rate,
            }),
            Filtering::Frame(f) => {
                let rate = f.sample_rate;
                let origin = tr[0].min(tc[0]);
                let end = tr[tr.len() - 1].max(tc[tc.len() - 1]);
                let len = ((end - origin) * rate).round() as usize + 1;
                integer_lags(tr, tc, rate)?;
                let to_idx = |t: f64| ((t - origin) * rate).round() as usize;
                Ok(TimeAxis::Frame {
                    fmat: f.matrix(len)?,
                    dt: 1.0 / rate,
                    row_idx: tr.iter().map(|&t| to_idx(t)).collect(),
                    col_idx: tc.iter().map(|&t| to_idx(t)).collect(),
                })
            }
        }
    }

    fn fill(&self, k: &CorrKernel) -> Result<DMatrix<f64>> {
        match self {
            TimeAxis::Raw { tr, tc } => {
                // lags are keyed at 1 ns so that t_a - t_b round-off on a sample grid hits the cache
                let mut cache: HashMap<i64, f64> = HashMap::new();
                let mut out = DMatrix::zeros(tr.len(), tc.len());
                for (a, &ta) in tr.iter().enumerate() {
                    for (b, &tb) in tc.iter().enumerate() {
                        let tau = ta - tb;
                        if tau.abs() < 1e-12 && k.impulse_weight() != 0.0 {
                            return Err(Error::UnfilteredImpulse(
                                "a channel pair with white feedthrough (rocof or power)".into(),
                            ));
                        }
                        let key = (tau * 1e9).round() as i64;
                        out[(a, b)] = *cache.entry(key).or_insert_with(|| k.eval(tau));
                    }
                }
                Ok(out)
            }
            TimeAxis::Stationary { lags, rho, dt } => {
                if lags.is_empty() {
                    return Ok(DMatrix::zeros(lags.nrows(), lags.ncols()));
                }
                let half = (rho.len() - 1) as i64 / 2;
                let mmin = *lags.iter().min().unwrap();
                let mmax = *lags.iter().max().unwrap();
                let lo = mmin - half;
                let raw: Vec<f64> = (lo..=mmax + half).map(|l| k.eval(l as f64 * dt)).collect();
                let imp = k.impulse_weight() / dt;
                let mut filtered = HashMap::new();
                for &m in lags.iter() {
                    filtered.entry(m).or_insert_with(|| {
                        let mut acc = 0.0;
                        for (u, &r) in rho.iter().enumerate() {
                            let l = m - (u as i64 - half);
                            acc += r * raw[(l - lo) as usize];
                        }
                        if m.abs() <= half {
                            acc += imp * rho[(m + half) as usize];
                        }
                        acc
                    });
                }
                Ok(lags.map(|m| filtered[&m]))
            }
            TimeAxis::Frame {
                fmat,
                dt,
                row_idx,
                col_idx,
            } => {
                let len = fmat.nrows();
                let raw: Vec<f64> = (0..2 * len - 1)
                    .map(|u| k.eval((u as f64 - (len - 1) as f64) * dt))
                    .collect();
                let mut kk = DMatrix::from_fn(len, len, |a, b| raw[a + len - 1 - b]);
                let imp = k.impulse_weight() / dt;
                for a in 0..len {
                    kk[(a, a)] += imp;
                }
                let fr = fmat.select_rows(row_idx);
                let fc = fmat.select_rows(col_idx);
                Ok(&fr * kk * fc.transpose())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{design, BandSpec};
    use crate::grid::eigenspace;

    fn two_machine() -> (GridModel, EigenSpace) {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let m = GridModel::new(DVector::from_element(2, 1.0), DVector::from_element(2, 1.0), l, 60.0).unwrap();
        let s = eigenspace(&m, None).unwrap();
        (m, s)
    }

    fn ring(n: usize) -> (GridModel, EigenSpace) {
        let mut l = DMatrix::zeros(n, n);
        for a in 0..n {
            let b = (a + 1) % n;
            let w = 1.0 + 0.3 * a as f64;
            l[(a, a)] += w;
            l[(b, b)] += w;
            l[(a, b)] -= w;
            l[(b, a)] -= w;
        }
        let inertia = DVector::from_fn(n, |k, _| 1.0 + 0.2 * k as f64);
        let damping = &inertia * 0.4;
        let m = GridModel::new(inertia, damping, l, 60.0).unwrap();
        let s = eigenspace(&m, None).unwrap();
        (m, s)
    }

    #[test]
    fn zero_mode_speed_variance() {
        let (m, s) = two_machine();
        let s = s.with_retained(vec![0]).unwrap();
        let alpha = DMatrix::from_element(1, 1, 1.0);
        let sel = SelectionSet::new(vec![ChannelSpec::speed(0)], vec![0.0]).unwrap();
        let blk = assemble(&m, &s, &alpha, &sel, &sel, Filtering::None, None).unwrap();
        let v = s.weights[(0, 0)];
        assert!((blk.values[(0, 0)] - v * v / (2.0 * m.gamma)).abs() < 1e-14);
    }

    #[test]
    fn speed_block_symmetric_psd() {
        let (m, s) = ring(5);
        let alpha = DMatrix::from_fn(5, 5, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let sel = SelectionSet::uniform((0..5).map(ChannelSpec::speed).collect(), 0.0, 5.0, 8).unwrap();
        let blk = assemble(&m, &s, &alpha, &sel, &sel, Filtering::None, None).unwrap();
        let v = &blk.values;
        assert!((v - v.transpose()).amax() < 1e-12 * v.amax());
        let ev = v.clone().symmetric_eigen().eigenvalues;
        assert!(ev.min() >= -1e-8 * v.trace());
    }

    #[test]
    fn low_rank_reconstructs_block() {
        let (m, s) = ring(6);
        let s = s.with_retained(vec![1, 2, 4]).unwrap();
        let alpha = DMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.3 });
        let sel = SelectionSet::uniform(vec![ChannelSpec::speed(0), ChannelSpec::speed(3)], 0.0, 10.0, 7).unwrap();
        let cm = CovarianceModel::new(&m, &s, &alpha, None).unwrap();
        let blk = cm.assemble(&sel, &sel, Filtering::None).unwrap();
        let (b, k) = cm.low_rank_factor(&sel, Filtering::None).unwrap().unwrap();
        let rec = &b * k * b.transpose();
        assert!((&rec - &blk.values).norm() < 1e-9 * blk.values.norm());
    }

    #[test]
    fn power_requires_filter_at_equal_time() {
        let (m, s) = ring(4);
        let alpha = DMatrix::identity(4, 4);
        let sel = SelectionSet::new(vec![ChannelSpec::new(1, Quantity::Power, 0.0)], vec![0.0, 0.5]).unwrap();
        let r = assemble(&m, &s, &alpha, &sel, &sel, Filtering::None, None);
        assert!(matches!(r, Err(Error::UnfilteredImpulse(_))));
    }

    #[test]
    fn power_is_white_input_when_damping_uniform() {
        // p = M ω̇ + D ω + L θ recovers the injection, so E[p pᵀ] has no smooth part
        let (m, s) = ring(4);
        let s = s.with_retained(vec![1, 2, 3]).unwrap();
        let alpha = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.2 });
        let cm = CovarianceModel::new(&m, &s, &alpha, None).unwrap();
        let p = ChannelSpec::new(2, Quantity::Power, 0.0);
        let k = cm.pair_kernel(&p, &p).unwrap();
        for &t in &[0.1, 0.7, 3.0] {
            assert!(k.eval(t).abs() < 1e-10, "{}", k.eval(t));
        }
        let w = participation(&m, &s, 2).unwrap() * m.inertia[2];
        let expected = (w.transpose() * &alpha * &w)[(0, 0)];
        assert!((k.impulse_weight() - expected).abs() < 1e-12);
    }

    #[test]
    fn angle_speed_is_time_derivative() {
        let (m, s) = ring(4);
        let s = s.with_retained(vec![1, 3]).unwrap();
        let alpha = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let cm = CovarianceModel::new(&m, &s, &alpha, None).unwrap();
        let a = ChannelSpec::angle(0);
        let kaa = cm.pair_kernel(&a, &ChannelSpec::angle(2)).unwrap();
        let kas = cm.pair_kernel(&a, &ChannelSpec::speed(2)).unwrap();
        // cov(θ_a(t), ω_b(t')) = ∂/∂t' cov(θ_a(t), θ_b(t')) = −k_aa'(τ) with τ = t − t'
        let h = 1e-5;
        for &tau in &[-1.2, -0.3, 0.4, 2.0] {
            let fd = -(kaa.eval(tau + h) - kaa.eval(tau - h)) / (2.0 * h);
            let v = kas.eval(tau);
            assert!((fd - v).abs() < 1e-6 * v.abs().max(1e-3), "{tau}: {fd} vs {v}");
        }
    }

    #[test]
    fn identical_weights_identical_rows() {
        let (m, s) = two_machine();
        let s = s.with_retained(vec![0]).unwrap();
        let alpha = DMatrix::from_element(1, 1, 1.0);
        let sel = SelectionSet::uniform(vec![ChannelSpec::speed(0), ChannelSpec::speed(1)], 0.0, 2.0, 3).unwrap();
        let blk = assemble(&m, &s, &alpha, &sel, &sel, Filtering::None, None).unwrap();
        for c in 0..6 {
            for t in 0..3 {
                assert!((blk.values[(t, c)] - blk.values[(3 + t, c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn participation_signs() {
        let (m, s) = two_machine();
        let p0 = participation(&m, &s, 0).unwrap();
        let p1 = participation(&m, &s, 1).unwrap();
        assert!((p0[1] + p1[1]).abs() < 1e-14);
        assert!((p0[1].abs() - p1[1].abs()).abs() < 1e-14);
        let (m, s) = ring(5);
        for i in 1..5 {
            let sum: f64 = (0..5).map(|n| m.inertia[n] * s.weights[(n, i)]).sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn noise_diagonal() {
        let (m, s) = two_machine();
        let alpha = DMatrix::identity(2, 2);
        let sel = SelectionSet::uniform(
            vec![ChannelSpec::new(0, Quantity::Speed, 0.005), ChannelSpec::new(1, Quantity::Speed, 0.01)],
            0.0,
            15.0,
            4,
        )
        .unwrap();
        let blk = assemble(&m, &s, &alpha, &sel, &sel, Filtering::None, None).unwrap();
        let noisy = add_noise(&blk).unwrap();
        let diff = &noisy.values - &blk.values;
        assert!((diff[(0, 0)] - 2.5e-5).abs() < 1e-15);
        assert!((diff[(5, 5)] - 1e-4).abs() < 1e-15);
        assert_eq!(diff[(0, 1)], 0.0);
        let other = SelectionSet::uniform(vec![ChannelSpec::speed(0)], 0.0, 15.0, 4).unwrap();
        let off = assemble(&m, &s, &alpha, &sel, &other, Filtering::None, None).unwrap();
        assert!(add_noise(&off).is_err());
    }

    #[test]
    fn stationary_matches_frame_interior() {
        let (m, s) = ring(4);
        let alpha = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let f = design(&BandSpec::new(0.0, 2.0).with_taps(31).with_transition(2.0), 15.0).unwrap();
        let len = 200;
        let all = SelectionSet::uniform(vec![ChannelSpec::speed(1)], 0.0, 15.0, len).unwrap();
        let mid = SelectionSet::uniform(vec![ChannelSpec::speed(1)], 80.0 / 15.0, 15.0, 20).unwrap();
        let cm = CovarianceModel::new(&m, &s, &alpha, None).unwrap();
        let frame = cm.assemble(&all, &all, Filtering::Frame(&f)).unwrap();
        let inner = frame.values.view((80, 80), (20, 20)).into_owned();
        let stat = cm.assemble(&mid, &mid, Filtering::Stationary(&f)).unwrap();
        assert!((&inner - &stat.values).amax() < 1e-10 * stat.values.amax());
    }

    #[test]
    fn filtered_rocof_is_finite_and_psd() {
        let (m, s) = ring(4);
        let s = s.with_retained(vec![1, 2, 3]).unwrap();
        let alpha = DMatrix::identity(3, 3);
        let f = design(&BandSpec::new(0.0, 2.0), 15.0).unwrap();
        let sel = SelectionSet::uniform(
            vec![ChannelSpec::new(0, Quantity::Rocof, 0.0), ChannelSpec::new(2, Quantity::Power, 0.0)],
            0.0,
            15.0,
            10,
        )
        .unwrap();
        let blk = assemble(&m, &s, &alpha, &sel, &sel, Filtering::Stationary(&f), None).unwrap();
        assert!(blk.values.iter().all(|v| v.is_finite()));
        let ev = blk.values.clone().symmetric_eigen().eigenvalues;
        assert!(ev.min() > -1e-8 * blk.values.trace());
    }
}
