//! Method-of-moments estimation of the eigeninput covariance `Ã`.
//!
//! Sample covariances `C_τ` of metered (optionally filtered) channels are
//! matched to their model-implied forms, which are linear in the entries of
//! `Ã` and in the measurement noise variances. The least-squares solution is
//! then pushed onto the intersection of the PSD cone and the sparsity mask.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{kernel_at_lags, CovarianceModel, Filtering};
use crate::error::{Error, Result};
use crate::filter::FilterOperator;
use crate::frame::{ChannelSpec, SignalFrame};
use crate::grid::{Band, EigenSpace, GridModel, TurbineSpec};
use crate::kernels::CorrKernel;

/// Iteration cap of the PSD/mask alternating projection.
pub const PROJECTION_MAX_ITER: usize = 50;
/// Frobenius change below which the alternating projection stops.
pub const PROJECTION_TOL: f64 = 1e-10;
/// Allowed negative eigenvalue relative to the trace after projection.
pub const PSD_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    /// Lag in seconds.
    pub lag: f64,
    pub lag_samples: usize,
    pub values: DMatrix<f64>,
    /// Number of sample pairs averaged.
    pub sample_count: usize,
}

/// `C_τ = (1/T) Σ z(t+τ) z(t)ᵀ` over the non-edge samples of a frame; symmetrized at lag 0.
pub fn sample_cov(data: &SignalFrame, lag_samples: usize) -> Result<SampleCovariance> {
    let edge = data.edge_samples;
    let len = data.len();
    let usable = len.saturating_sub(2 * edge);
    if usable < lag_samples + 2 {
        return Err(Error::InsufficientSamples {
            need: lag_samples + 2 + 2 * edge,
            have: len,
        });
    }
    let z = data.samples.rows(edge, usable);
    let t = usable - lag_samples;
    let lead = z.rows(lag_samples, t);
    let base = z.rows(0, t);
    let mut values = lead.transpose() * base / t as f64;
    if lag_samples == 0 {
        values = (&values + values.transpose()) * 0.5;
    }
    Ok(SampleCovariance {
        lag: lag_samples as f64 / data.rate,
        lag_samples,
        values,
        sample_count: t,
    })
}

/// Sample covariances at several lags.
pub fn sample_covs(data: &SignalFrame, lags: &[usize]) -> Result<Vec<SampleCovariance>> {
    lags.iter().map(|&l| sample_cov(data, l)).collect()
}

/// Passband edges `(w̲, w̄, w̄ − w̲ = γ)` of an eigensystem in rad/s.
pub fn cutoffs(lambda: f64, gamma: f64) -> (f64, f64, f64) {
    let s = (gamma * gamma + 4.0 * lambda).sqrt();
    ((-gamma + s) / 2.0, (gamma + s) / 2.0, gamma)
}

/// Pairs of retained eigenstates whose doubled passbands `(2w̲, 2w̄)` intersect.
pub fn overlap_mask(space: &EigenSpace) -> DMatrix<bool> {
    let bands: Vec<(f64, f64)> = space
        .retained_eigvals()
        .iter()
        .map(|&l| {
            let (lo, hi, _) = cutoffs(l, space.gamma);
            (2.0 * lo, 2.0 * hi)
        })
        .collect();
    let d = bands.len();
    DMatrix::from_fn(d, d, |i, j| {
        let (a, b) = (bands[i], bands[j]);
        a.0.max(b.0) < a.1.min(b.1)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Every entry free.
    Full,
    /// Off-diagonal entries fixed at zero.
    Diagonal,
    /// Off-diagonal entries free only where passbands overlap.
    #[default]
    Overlap,
}

pub fn make_mask(space: &EigenSpace, policy: MaskPolicy) -> DMatrix<bool> {
    let d = space.n_retained();
    match policy {
        MaskPolicy::Full => DMatrix::from_element(d, d, true),
        MaskPolicy::Diagonal => DMatrix::from_fn(d, d, |i, j| i == j),
        MaskPolicy::Overlap => overlap_mask(space),
    }
}

/// Per-channel measurement noise variances, each either known or to be estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variances: Vec<f64>,
    pub known: Vec<bool>,
}

impl NoiseSpec {
    pub fn known(variances: Vec<f64>) -> Self {
        let n = variances.len();
        Self {
            variances,
            known: vec![true; n],
        }
    }

    pub fn unknown(m: usize) -> Self {
        Self {
            variances: vec![0.0; m],
            known: vec![false; m],
        }
    }

    /// Known variances taken from the channels' `noise_std`.
    pub fn from_channels(channels: &[ChannelSpec]) -> Self {
        Self::known(channels.iter().map(|c| c.noise_std * c.noise_std).collect())
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.variances.len() != m || self.known.len() != m {
            return Err(Error::Dimension(format!("noise spec must have {m} entries")));
        }
        if self.variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("noise variances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlphaProvenance {
    pub band: Option<Band>,
    pub retained: Vec<usize>,
    pub data_hash: Option<String>,
    /// Noise variances used or estimated in the fit, one per metered channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_variances: Option<Vec<f64>>,
}

/// Fitted eigeninput covariance over the retained eigenstates.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatrix {
    pub values: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub provenance: AlphaProvenance,
}

#[derive(Serialize, Deserialize)]
struct AlphaDocument {
    dim: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    #[serde(flatten)]
    provenance: AlphaProvenance,
}

impl AlphaMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn to_json(&self) -> Result<String> {
        let d = self.dim();
        let doc = AlphaDocument {
            dim: d,
            values: (0..d * d).map(|k| self.values[(k / d, k % d)]).collect(),
            mask: (0..d * d).map(|k| self.mask[(k / d, k % d)]).collect(),
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: AlphaDocument = serde_json::from_str(text)?;
        let d = doc.dim;
        if doc.values.len() != d * d || doc.mask.len() != d * d {
            return Err(Error::Dimension(format!("alpha document entries do not match dim {d}")));
        }
        Ok(Self {
            values: DMatrix::from_row_slice(d, d, &doc.values),
            mask: DMatrix::from_row_slice(d, d, &doc.mask),
            provenance: doc.provenance,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Settings of [`fit_alpha`] beyond the data and model.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomOptions<'a> {
    /// Filter the data went through; kernels are conjugated with its stationary form.
    pub filter: Option<&'a FilterOperator>,
    pub turbine: Option<&'a TurbineSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomFit {
    pub alpha: AlphaMatrix,
    pub noise: NoiseSpec,
    /// `Ã` straight from least squares, before any projection.
    pub unconstrained: DMatrix<f64>,
    pub residual_norm: f64,
}

/// Least-squares moment fit of `Ã` (masked entries) and the unknown noise variances.
///
/// `channels` describes the columns of every sample covariance (bus and quantity).
pub fn fit_alpha(
    covs: &[SampleCovariance],
    model: &GridModel,
    space: &EigenSpace,
    mask: &DMatrix<bool>,
    noise: &NoiseSpec,
    channels: &[ChannelSpec],
    opts: MomOptions,
) -> Result<MomFit> {
    let d = space.n_retained();
    let m = channels.len();
    if covs.is_empty() {
        return Err(Error::Invalid("at least one lag is required".into()));
    }
    if d == 0 {
        return Err(Error::Invalid("no retained eigenstates".into()));
    }
    if mask.nrows() != d || mask.ncols() != d {
        return Err(Error::Dimension(format!("mask must be {d}x{d}")));
    }
    if (0..d).any(|i| (0..d).any(|j| mask[(i, j)] != mask[(j, i)])) {
        return Err(Error::Invalid("mask must be symmetric".into()));
    }
    if (0..d).any(|i| !mask[(i, i)]) {
        return Err(Error::Invalid("diagonal entries of the mask must be free".into()));
    }
    noise.validate(m)?;
    for c in covs {
        if c.values.nrows() != m || c.values.ncols() != m {
            return Err(Error::Dimension(format!("sample covariance is not {m}x{m}")));
        }
    }
    let data_rate = covs.iter().find(|c| c.lag_samples > 0).map(|c| c.lag_samples as f64 / c.lag);
    let rate = match (opts.filter, data_rate) {
        (Some(f), Some(r)) if (f.sample_rate - r).abs() > 1e-9 * r => {
            return Err(Error::Invalid("filter rate differs from the sample covariance rate".into()));
        }
        (Some(f), _) => f.sample_rate,
        (None, r) => r.unwrap_or(1.0),
    };
    let filtering = match opts.filter {
        Some(f) => Filtering::Stationary(f),
        None => Filtering::None,
    };

    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).filter(|&(i, j)| mask[(i, j)]).collect();
    let free_noise: Vec<usize> = (0..m).filter(|&a| !noise.known[a]).collect();
    let n_unknown = pairs.len() + free_noise.len();

    let unit = DMatrix::identity(d, d);
    let cm = CovarianceModel::new(model, space, &unit, opts.turbine)?;
    let responses: Vec<_> = channels.iter().map(|c| cm.channel_responses(c)).collect::<Result<Vec<_>>>()?;
    let lags: Vec<i64> = covs.iter().map(|c| c.lag_samples as i64).collect();
    let rho = opts.filter.map(|f| f.lag_weights());

    // design values per (a, b, i, j) over all lags
    let entries: Vec<(usize, usize)> = (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).collect();
    let kernel_vals: Vec<Vec<Vec<f64>>> = entries
        .par_iter()
        .map(|&(a, b)| {
            let mut per_pair = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    let k = CorrKernel::from_pair(&responses[a][i], &responses[b][j], 1.0)?;
                    per_pair.push(kernel_at_lags(&k, &lags, rate, filtering)?);
                }
            }
            Ok(per_pair)
        })
        .collect::<Result<_>>()?;

    let n_rows = covs.len() * m * m;
    let mut design = DMatrix::zeros(n_rows, n_unknown);
    let mut rhs = DMatrix::zeros(n_rows, 1);
    let noise_weight = |lag: i64| -> f64 {
        match &rho {
            Some(r) => {
                let half = (r.len() - 1) as i64 / 2;
                if lag.abs() <= half {
                    r[(half + lag) as usize]
                } else {
                    0.0
                }
            }
            None => {
                if lag == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    };
    for (l, c) in covs.iter().enumerate() {
        let nw = noise_weight(c.lag_samples as i64);
        for (e, &(a, b)) in entries.iter().enumerate() {
            let row = l * m * m + e;
            let mut target = c.values[(a, b)];
            if a == b && noise.known[a] {
                target -= nw * noise.variances[a];
            }
            rhs[row] = target;
            for (col, &(i, j)) in pairs.iter().enumerate() {
                let mut v = kernel_vals[e][i * d + j][l];
                if i != j {
                    v += kernel_vals[e][j * d + i][l];
                }
                design[(row, col)] = v;
            }
            if a == b {
                if let Some(k) = free_noise.iter().position(|&x| x == a) {
                    design[(row, pairs.len() + k)] = nw;
                }
            }
        }
    }

    let mut solution = solve_ls(&design, &rhs)?;
    let mut noise_out = noise.clone();
    // non-negative noise: clip and refit the rest with the clipped entries fixed at zero
    let negative: Vec<usize> = (0..free_noise.len()).filter(|&k| solution[pairs.len() + k] < 0.0).collect();
    if !negative.is_empty() {
        let keep: Vec<usize> = (0..n_unknown).filter(|c| !negative.iter().any(|&k| pairs.len() + k == *c)).collect();
        let reduced = solve_ls(&design.select_columns(&keep), &rhs)?;
        solution = DMatrix::zeros(n_unknown, 1);
        for (r, &c) in keep.iter().enumerate() {
            solution[c] = reduced[r];
        }
        for (k, _) in free_noise.iter().enumerate() {
            solution[pairs.len() + k] = solution[pairs.len() + k].max(0.0);
        }
    }
    for (k, &a) in free_noise.iter().enumerate() {
        noise_out.variances[a] = solution[pairs.len() + k];
    }
    let mut ls = DMatrix::zeros(d, d);
    for (col, &(i, j)) in pairs.iter().enumerate() {
        ls[(i, j)] = solution[col];
        ls[(j, i)] = solution[col];
    }
    let residual_norm = (&design * &solution - &rhs).norm();
    let values = project_psd_masked(&ls, mask);
    Ok(MomFit {
        alpha: AlphaMatrix {
            values,
            mask: mask.clone(),
            provenance: AlphaProvenance {
                band: None,
                retained: space.retained.clone(),
                data_hash: None,
                noise_variances: Some(noise_out.variances.clone()),
            },
        },
        noise: noise_out,
        unconstrained: ls,
        residual_norm,
    })
}

fn solve_ls(design: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = design.ncols();
    if design.nrows() < n {
        return Err(Error::RankDeficient {
            deficiency: n - design.nrows(),
        });
    }
    // unit-norm columns keep the rank test independent of kernel and noise scales
    let scale: Vec<f64> = (0..n)
        .map(|c| {
            let s = design.column(c).norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(design.nrows(), n, |r, c| design[(r, c)] / scale[c]);
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * design.nrows().max(n) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < n {
        return Err(Error::RankDeficient { deficiency: n - rank });
    }
    let x = svd.solve(rhs, tol).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(DMatrix::from_fn(n, 1, |r, _| x[r] / scale[r]))
}

/// Nearest PSD matrix by clipping negative eigenvalues at zero.
pub fn project_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

fn apply_mask(a: &DMatrix<f64>, mask: &DMatrix<bool>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| if mask[(i, j)] { a[(i, j)] } else { 0.0 })
}

/// Alternating projection between the PSD cone and the mask subspace, ending on the mask.
///
/// A residual negative eigenvalue beyond `PSD_SLACK·trace` is removed by a diagonal shift.
pub fn project_psd_masked(a: &DMatrix<f64>, mask: &DMatrix<bool>) -> DMatrix<f64> {
    let mut x = apply_mask(&((a + a.transpose()) * 0.5), mask);
    for _ in 0..PROJECTION_MAX_ITER {
        let next = apply_mask(&project_psd(&x), mask);
        let change = (&next - &x).norm();
        x = next;
        if change < PROJECTION_TOL {
            break;
        }
    }
    let trace = x.trace();
    let lmin = SymmetricEigen::new(x.clone()).eigenvalues.min();
    if lmin < -PSD_SLACK * trace.abs() {
        for i in 0..x.nrows() {
            x[(i, i)] -= lmin;
        }
    }
    x
}
