//! Linearized swing-equation simulator and synchrophasor measurement model.
//!
//! The state `(θ, ω)` (plus the turbine power `p_c` when a [`TurbineSpec`] is
//! given) is advanced by classical fourth-order Runge–Kutta with the input held
//! constant over each step. For a linear time-invariant system that step is
//! the fixed map `x ← Φ x + Γ u`, which is precomputed once.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ChannelSpec, Quantity, SignalFrame};
use crate::grid::{EigenSpace, GridModel, TurbineSpec};

/// State norm beyond which a run is declared unstable.
pub const DIVERGENCE_BOUND: f64 = 1e6;

const AMBIENT_STREAM: u64 = 1;
const MEASURE_STREAM_BASE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Ambient,
    FaultImpulse,
    GeneratorTrip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Bus index hit by the fault or trip.
    #[serde(default)]
    pub target_bus: usize,
    /// σ in `E[p pᵀ] = σ² M² δ`; applies to every kind, 0 disables ambient input.
    #[serde(default)]
    pub ambient_scale: f64,
    /// Full input covariance `Σ_p` replacing `σ² M²` when given.
    #[serde(skip)]
    pub input_cov: Option<DMatrix<f64>>,
    pub duration: f64,
    #[serde(default = "default_sim_dt")]
    pub sim_dt: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fault impulse area (pu·s) or tripped power (pu).
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
    /// Keep every `record_stride`-th integration step.
    #[serde(default = "default_stride")]
    pub record_stride: usize,
}

fn default_sim_dt() -> f64 {
    1e-3
}

fn default_magnitude() -> f64 {
    1.0
}

fn default_stride() -> usize {
    1
}

impl Scenario {
    pub fn ambient(scale: f64, duration: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::Ambient,
            target_bus: 0,
            ambient_scale: scale,
            input_cov: None,
            duration,
            sim_dt: default_sim_dt(),
            seed,
            magnitude: default_magnitude(),
            record_stride: 1,
        }
    }

    pub fn fault(target_bus: usize, duration: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::FaultImpulse,
            target_bus,
            ambient_scale: 0.0,
            ..Self::ambient(0.0, duration, seed)
        }
    }

    pub fn trip(target_bus: usize, magnitude: f64, duration: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::GeneratorTrip,
            target_bus,
            magnitude,
            ..Self::ambient(0.0, duration, seed)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.sim_dt = dt;
        self
    }

    pub fn with_ambient(mut self, scale: f64) -> Self {
        self.ambient_scale = scale;
        self
    }

    pub fn with_input_cov(mut self, cov: DMatrix<f64>) -> Self {
        self.input_cov = Some(cov);
        self
    }

    pub fn n_steps(&self) -> usize {
        (self.duration / self.sim_dt).round() as usize
    }

    /// Integration step at which the fault or trip starts.
    pub fn event_step(&self) -> usize {
        (self.duration / 4.0 / self.sim_dt).round() as usize
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.sim_dt > 0.0) || self.sim_dt > self.duration {
            return Err(Error::Invalid(format!("invalid sim_dt {}", self.sim_dt)));
        }
        if !(self.ambient_scale >= 0.0) {
            return Err(Error::Invalid("ambient_scale must be non-negative".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::Invalid("record_stride must be at least 1".into()));
        }
        if self.kind != ScenarioKind::Ambient && self.target_bus >= n {
            return Err(Error::Invalid(format!("target bus {} out of range", self.target_bus)));
        }
        if let Some(c) = &self.input_cov {
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::Dimension(format!("input covariance must be {n}x{n}")));
            }
        }
        Ok(())
    }
}

/// Input covariance `Σ_p = M^{1/2} V A Vᵀ M^{1/2}` for an eigeninput covariance `A` over all eigenstates.
pub fn input_cov_from_alpha(model: &GridModel, space: &EigenSpace, alpha_full: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = model.n_buses;
    if alpha_full.nrows() != n || alpha_full.ncols() != n {
        return Err(Error::Dimension(format!("full eigeninput covariance must be {n}x{n}")));
    }
    let mv = DMatrix::from_fn(n, n, |r, c| model.inertia[r].sqrt() * space.eigvecs[(r, c)]);
    let s = &mv * alpha_full * mv.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Retained block of `A = Vᵀ M^{-1/2} Σ_p M^{-1/2} V`, the eigeninput covariance implied by `Σ_p`.
pub fn alpha_from_input_cov(model: &GridModel, space: &EigenSpace, input_cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = model.n_buses;
    if input_cov.nrows() != n || input_cov.ncols() != n {
        return Err(Error::Dimension(format!("input covariance must be {n}x{n}")));
    }
    let w = space.retained_weights(&(0..n).collect::<Vec<_>>());
    let a = w.transpose() * input_cov * &w;
    Ok((&a + a.transpose()) * 0.5)
}

/// Eigeninput covariance of the ambient input `σ² M²`.
pub fn ambient_alpha(model: &GridModel, space: &EigenSpace, scale: f64) -> Result<DMatrix<f64>> {
    let m2 = DMatrix::from_diagonal(&model.inertia.map(|m| scale * scale * m * m));
    alpha_from_input_cov(model, space, &m2)
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Continuous-time state matrices `(A, B)` with state `(θ, ω[, p_c])` and input `p`.
pub fn state_space(model: &GridModel, turbine: Option<&TurbineSpec>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.n_buses;
    let s = if turbine.is_some() { 3 * n } else { 2 * n };
    let mut a = DMatrix::zeros(s, s);
    let mut b = DMatrix::zeros(s, n);
    for i in 0..n {
        let m = model.inertia[i];
        a[(i, n + i)] = 1.0;
        for j in 0..n {
            a[(n + i, j)] = -model.laplacian[(i, j)] / m;
        }
        a[(n + i, n + i)] = -model.damping[i] / m;
        b[(n + i, i)] = 1.0 / m;
        if let Some(t) = turbine {
            a[(n + i, 2 * n + i)] = 1.0 / m;
            a[(2 * n + i, n + i)] = -t.droop_r * m / t.tau;
            a[(2 * n + i, 2 * n + i)] = -1.0 / t.tau;
        }
    }
    (a, b)
}

fn max_real_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// One RK4 step for `ẋ = A x + B u` with `u` held constant: `(Φ, Γ)`.
pub fn rk4_propagator(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = a.nrows();
    let ha = a * dt;
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ha4 = &ha3 * &ha;
    let id = DMatrix::<f64>::identity(s, s);
    let phi = &id + &ha + &ha2 / 2.0 + &ha3 / 6.0 + &ha4 / 24.0;
    let gamma = (&id + &ha / 2.0 + &ha2 / 6.0 + &ha3 / 24.0) * b * dt;
    (phi, gamma)
}

struct Recorder {
    n: usize,
    rows: Vec<f64>,
}

/// Integrates the model for `steps` steps with `input(k, u)` filling the injection of step `k`.
fn integrate<F>(
    model: &GridModel,
    turbine: Option<&TurbineSpec>,
    dt: f64,
    steps: usize,
    stride: usize,
    mut input: F,
) -> Result<Recorder>
where
    F: FnMut(usize, &mut [f64]),
{
    let n = model.n_buses;
    let (a, b) = state_space(model, turbine);
    let s = a.nrows();
    let max_re = max_real_eigenvalue(&a);
    if max_re > 1e-9 {
        return Err(Error::Unstable(max_re));
    }
    let (phi, gam) = rk4_propagator(&a, &b, dt);
    // row-major copies for the inner loop
    let phi_r: Vec<f64> = phi.transpose().iter().copied().collect();
    let gam_r: Vec<f64> = gam.transpose().iter().copied().collect();
    let lap_r: Vec<f64> = model.laplacian.transpose().iter().copied().collect();
    let mut x = vec![0.0; s];
    let mut next = vec![0.0; s];
    let mut u = vec![0.0; n];
    let mut rec = Recorder {
        n,
        rows: Vec::with_capacity(steps.div_ceil(stride) * 4 * n),
    };
    for k in 0..steps {
        u.iter_mut().for_each(|v| *v = 0.0);
        input(k, &mut u);
        if k % stride == 0 {
            record(model, turbine, &lap_r, &x, &u, &mut rec.rows);
            let norm2: f64 = x.iter().map(|v| v * v).sum();
            if !(norm2.sqrt() <= DIVERGENCE_BOUND) {
                return Err(Error::Unstable(max_re));
            }
        }
        for r in 0..s {
            let pr = &phi_r[r * s..(r + 1) * s];
            let gr = &gam_r[r * n..(r + 1) * n];
            let mut acc = 0.0;
            for c in 0..s {
                acc += pr[c] * x[c];
            }
            for c in 0..n {
                acc += gr[c] * u[c];
            }
            next[r] = acc;
        }
        std::mem::swap(&mut x, &mut next);
    }
    Ok(rec)
}

fn record(model: &GridModel, turbine: Option<&TurbineSpec>, lap_r: &[f64], x: &[f64], u: &[f64], out: &mut Vec<f64>) {
    let n = model.n_buses;
    out.extend_from_slice(&x[..n]);
    out.extend_from_slice(&x[n..2 * n]);
    for i in 0..n {
        let lt: f64 = (0..n).map(|j| lap_r[i * n + j] * x[j]).sum();
        let pc = if turbine.is_some() { x[2 * n + i] } else { 0.0 };
        out.push((u[i] + pc - model.damping[i] * x[n + i] - lt) / model.inertia[i]);
    }
    out.extend_from_slice(u);
}

fn truth_channels(n: usize) -> Vec<ChannelSpec> {
    [Quantity::Angle, Quantity::Speed, Quantity::Rocof, Quantity::Power]
        .iter()
        .flat_map(|&q| (0..n).map(move |b| ChannelSpec::new(b, q, 0.0)))
        .collect()
}

fn to_frame(rec: Recorder, rate: f64) -> Result<SignalFrame> {
    let c = 4 * rec.n;
    let t = rec.rows.len() / c;
    SignalFrame::new(rate, 0.0, truth_channels(rec.n), DMatrix::from_row_slice(t, c, &rec.rows))
}

/// Runs a scenario; the frame holds θ, ω, ω̇ and p of every bus (in that order) at the recording rate.
pub fn simulate(model: &GridModel, scenario: &Scenario, turbine: Option<&TurbineSpec>) -> Result<SignalFrame> {
    let n = model.n_buses;
    scenario.validate(n)?;
    let dt = scenario.sim_dt;
    let steps = scenario.n_steps();
    let inv_sqrt_dt = 1.0 / dt.sqrt();
    let sqrt_cov = scenario.input_cov.as_ref().map(psd_sqrt);
    let sqrt_r: Option<Vec<f64>> = sqrt_cov.map(|m| m.transpose().iter().copied().collect());
    let diag_std: Vec<f64> = model.inertia.iter().map(|m| scenario.ambient_scale * m * inv_sqrt_dt).collect();
    let ambient = scenario.input_cov.is_some() || scenario.ambient_scale > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(AMBIENT_STREAM);
    let mut z = vec![0.0; n];
    let event = scenario.event_step();
    let kind = scenario.kind;
    let target = scenario.target_bus;
    let mag = scenario.magnitude;
    let rec = integrate(model, turbine, dt, steps, scenario.record_stride, |k, u| {
        if ambient {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            match &sqrt_r {
                Some(s) => {
                    for i in 0..n {
                        let row = &s[i * n..(i + 1) * n];
                        u[i] += inv_sqrt_dt * row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                None => {
                    for i in 0..n {
                        u[i] += diag_std[i] * z[i];
                    }
                }
            }
        }
        match kind {
            ScenarioKind::Ambient => {}
            ScenarioKind::FaultImpulse => {
                if k == event {
                    u[target] += mag / dt;
                }
            }
            ScenarioKind::GeneratorTrip => {
                if k >= event {
                    u[target] -= mag;
                }
            }
        }
    })?;
    let mut frame = to_frame(rec, 1.0 / (dt * scenario.record_stride as f64))?;
    frame.meta.insert("seed".into(), serde_json::json!(scenario.seed));
    frame.meta.insert("scenario".into(), serde_json::to_value(scenario)?);
    Ok(frame)
}

/// Response to an explicit injection record (`steps × n`, one row per integration step).
pub fn simulate_input(
    model: &GridModel,
    input: &DMatrix<f64>,
    dt: f64,
    stride: usize,
    turbine: Option<&TurbineSpec>,
) -> Result<SignalFrame> {
    let n = model.n_buses;
    if input.ncols() != n {
        return Err(Error::Dimension(format!("input has {} columns for {n} buses", input.ncols())));
    }
    if stride == 0 {
        return Err(Error::Invalid("stride must be at least 1".into()));
    }
    let rec = integrate(model, turbine, dt, input.nrows(), stride, |k, u| {
        for i in 0..n {
            u[i] = input[(k, i)];
        }
    })?;
    to_frame(rec, 1.0 / (dt * stride as f64))
}

/// Noise levels and reporting rate of the synchrophasor measurement chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPipeline {
    #[serde(default)]
    pub angle_noise_std: f64,
    #[serde(default)]
    pub speed_noise_std: f64,
    #[serde(default)]
    pub rocof_noise_std: f64,
    #[serde(default)]
    pub power_noise_std: f64,
    #[serde(default = "default_report_rate")]
    pub report_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_report_rate() -> f64 {
    15.0
}

impl Default for MeasurementPipeline {
    fn default() -> Self {
        Self {
            angle_noise_std: 0.0,
            speed_noise_std: 0.0,
            rocof_noise_std: 0.0,
            power_noise_std: 0.0,
            report_rate: default_report_rate(),
            seed: 0,
        }
    }
}

impl MeasurementPipeline {
    pub fn noise_for(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Angle => self.angle_noise_std,
            Quantity::Speed => self.speed_noise_std,
            Quantity::Rocof => self.rocof_noise_std,
            Quantity::Power => self.power_noise_std,
        }
    }
}

/// Integer decimation factor from `rate` to `report_rate`.
pub fn decimation_factor(rate: f64, report_rate: f64) -> Result<usize> {
    let f = rate / report_rate;
    let k = f.round();
    if !(report_rate > 0.0) || k < 1.0 || (f - k).abs() > 1e-9 * f.max(1.0) {
        return Err(Error::Invalid(format!(
            "reporting rate {report_rate} Hz does not divide the {rate} Hz simulation rate"
        )));
    }
    Ok(k as usize)
}

fn wrap(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Decimates by sample picking and adds measurement noise to the requested channels.
///
/// Angles are perturbed in Cartesian phasor form (unit magnitude) and converted back.
pub fn measure(truth: &SignalFrame, pipeline: &MeasurementPipeline, channels: &[ChannelSpec]) -> Result<SignalFrame> {
    let factor = decimation_factor(truth.rate, pipeline.report_rate)?;
    let cols: Vec<usize> = channels
        .iter()
        .map(|c| {
            truth
                .find(c.bus, c.quantity)
                .ok_or_else(|| Error::Invalid(format!("truth has no channel {}", c.label())))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<usize> = (0..truth.len()).step_by(factor).collect();
    let mut samples = truth.samples.select_rows(&rows).select_columns(&cols);
    let mut out_channels = Vec::with_capacity(channels.len());
    for (k, ch) in channels.iter().enumerate() {
        let std = pipeline.noise_for(ch.quantity);
        out_channels.push(ChannelSpec::new(ch.bus, ch.quantity, std));
        if std == 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pipeline.seed);
        rng.set_stream(MEASURE_STREAM_BASE + k as u64);
        let mut col = samples.column_mut(k);
        for v in col.iter_mut() {
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            if ch.quantity == Quantity::Angle {
                let (s, c) = v.sin_cos();
                let noisy = (s + std * n2).atan2(c + std * n1);
                *v += wrap(noisy - *v);
            } else {
                *v += std * n1;
            }
        }
    }
    let mut frame = SignalFrame::new(truth.rate / factor as f64, truth.t0, out_channels, samples)?;
    frame.meta = truth.meta.clone();
    frame.meta.insert("measurement_seed".into(), serde_json::json!(pipeline.seed));
    Ok(frame)
}

/// Eigen-coordinates `y = VᵀM^{1/2}θ` (quantity `angle`) and `ẏ = VᵀM^{1/2}ω` (quantity `speed`);
/// the channel `bus` field holds the eigenstate index.
pub fn eigen_trajectories(model: &GridModel, space: &EigenSpace, truth: &SignalFrame) -> Result<SignalFrame> {
    let n = model.n_buses;
    let idx = |q: Quantity| -> Result<Vec<usize>> {
        (0..n)
            .map(|b| {
                truth
                    .find(b, q)
                    .ok_or_else(|| Error::Invalid(format!("truth lacks bus{b}_{q}")))
            })
            .collect()
    };
    let th = truth.samples.select_columns(&idx(Quantity::Angle)?);
    let om = truth.samples.select_columns(&idx(Quantity::Speed)?);
    let t = DMatrix::from_fn(n, n, |r, c| model.inertia[r].sqrt() * space.eigvecs[(r, c)]);
    let y = th * &t;
    let yd = om * &t;
    let mut samples = DMatrix::zeros(truth.len(), 2 * n);
    samples.columns_mut(0, n).copy_from(&y);
    samples.columns_mut(n, n).copy_from(&yd);
    let channels = (0..n)
        .map(ChannelSpec::angle)
        .chain((0..n).map(ChannelSpec::speed))
        .collect();
    SignalFrame::new(truth.rate, truth.t0, channels, samples)
}

/// Empirical covariance `(1/T) Σ a(t+lag) b(t)` of two equal-length series.
pub fn empirical_cross_cov(a: &[f64], b: &[f64], lag: usize) -> f64 {
    let t = a.len().min(b.len());
    if lag >= t {
        return 0.0;
    }
    let s: f64 = (0..t - lag).map(|k| a[k + lag] * b[k]).sum();
    s / (t - lag) as f64
}

/// Eigenvector column of the retained index, scaled to physical speeds: `M^{-1/2} v_i`.
pub fn mode_shape(space: &EigenSpace, i: usize) -> DVector<f64> {
    space.weights.column(i).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::eigenspace;

    fn two_machine(gamma: f64) -> GridModel {
        let l = DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]);
        GridModel::new(DVector::from_element(2, 1.0), DVector::from_element(2, gamma), l, 60.0).unwrap()
    }

    #[test]
    fn rest_stays_at_rest() {
        let f = simulate(&two_machine(0.3), &Scenario::ambient(0.0, 1.0, 0), None).unwrap();
        assert!(f.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_machine_impulse() {
        let g = 1.5;
        let m = GridModel::new(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, g),
            DMatrix::zeros(1, 1),
            60.0,
        )
        .unwrap();
        let dt = 1e-3;
        let mut input = DMatrix::zeros(3001, 1);
        input[(0, 0)] = 1.0 / dt;
        let f = simulate_input(&m, &input, dt, 1, None).unwrap();
        // a one-step pulse of area 1 starting at rest: ω(t) = e^{−γt}(1 − e^{−γ dt})/(γ dt) · e^{γ dt}
        // for t ≥ dt; compare against the exact response of the pulse
        for k in [1usize, 500, 3000] {
            let t = k as f64 * dt;
            let exact = (1.0 - (-g * dt).exp()) / (g * dt) * (-g * (t - dt)).exp();
            assert!((f.samples[(k, 1)] - exact).abs() < 1e-8, "{k}");
            let ideal = (-g * t).exp();
            assert!((f.samples[(k, 1)] - ideal).abs() < 2e-3);
        }
    }

    #[test]
    fn linearity() {
        let m = two_machine(0.4);
        let dt = 1e-2;
        let a = DMatrix::from_fn(500, 2, |k, i| ((k * 31 + i * 7) % 13) as f64 - 6.0);
        let b = DMatrix::from_fn(500, 2, |k, i| ((k * 17 + i * 5) % 11) as f64 * 0.3);
        let fa = simulate_input(&m, &a, dt, 1, None).unwrap();
        let fb = simulate_input(&m, &b, dt, 1, None).unwrap();
        let fab = simulate_input(&m, &(&a + &b), dt, 1, None).unwrap();
        let diff = &fab.samples - (&fa.samples + &fb.samples);
        assert!(diff.amax() <= 1e-9 * fab.samples.amax());
    }

    #[test]
    fn rk4_fourth_order() {
        let m = two_machine(0.3);
        let (a, _) = state_space(&m, None);
        let x0 = DVector::from_vec(vec![0.1, -0.1, 1.0, -1.0]);
        let exact = {
            let mut x = x0.clone();
            let (phi, _) = rk4_propagator(&a, &DMatrix::zeros(4, 2), 1e-4);
            for _ in 0..40_000 {
                x = &phi * x;
            }
            x
        };
        let at = |dt: f64| {
            let (phi, _) = rk4_propagator(&a, &DMatrix::zeros(4, 2), dt);
            let mut x = x0.clone();
            for _ in 0..(4.0 / dt).round() as usize {
                x = &phi * x;
            }
            (x - &exact).norm()
        };
        let e1 = at(0.1);
        let e2 = at(0.05);
        assert!(e1 / e2 >= 8.0, "{e1} {e2}");
    }

    #[test]
    fn unstable_model_rejected() {
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let m = GridModel::new(DVector::from_element(2, 1.0), DVector::from_element(2, 0.1), l, 60.0).unwrap();
        assert!(matches!(simulate(&m, &Scenario::fault(0, 1.0, 0), None), Err(Error::Unstable(_))));
    }

    #[test]
    fn decimation_contract() {
        assert!(decimation_factor(1000.0, 15.0).is_err());
        assert_eq!(decimation_factor(1000.0, 20.0).unwrap(), 50);
        let f = simulate(&two_machine(0.3), &Scenario::fault(0, 2.0, 0), None).unwrap();
        let p = MeasurementPipeline {
            report_rate: 1000.0,
            ..Default::default()
        };
        let chans = f.channels.clone();
        let same = measure(&f, &p, &chans).unwrap();
        assert_eq!(same.samples, f.samples);
        let p20 = MeasurementPipeline {
            report_rate: 20.0,
            ..Default::default()
        };
        let d = measure(&f, &p20, &chans).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.samples.row(3), f.samples.row(150));
    }

    #[test]
    fn cartesian_angle_noise_level() {
        let n = 100_000;
        let truth = SignalFrame::new(1.0, 0.0, vec![ChannelSpec::angle(0)], DMatrix::zeros(n, 1)).unwrap();
        let p = MeasurementPipeline {
            angle_noise_std: 0.01,
            report_rate: 1.0,
            seed: 3,
            ..Default::default()
        };
        let m = measure(&truth, &p, &[ChannelSpec::angle(0)]).unwrap();
        let var: f64 = m.samples.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.0005);
    }

    #[test]
    fn eigen_round_trip_and_energy() {
        let m = two_machine(0.3);
        let s = eigenspace(&m, None).unwrap();
        let f = simulate(&m, &Scenario::ambient(0.1, 5.0, 1).with_stride(10), None).unwrap();
        let e = eigen_trajectories(&m, &s, &f).unwrap();
        for k in (0..f.len()).step_by(37) {
            let y = DVector::from_fn(2, |i, _| e.samples[(k, i)]);
            let theta = &s.weights * &y;
            for b in 0..2 {
                assert!((theta[b] - f.samples[(k, b)]).abs() < 1e-10);
            }
            let ke: f64 = (0..2).map(|i| e.samples[(k, 2 + i)].powi(2)).sum();
            let w: f64 = (0..2).map(|b| m.inertia[b] * f.samples[(k, 2 + b)].powi(2)).sum();
            assert!((ke - w).abs() <= 1e-9 * w.max(1e-12));
        }
    }

    #[test]
    fn antisymmetric_start_has_no_common_mode() {
        let m = two_machine(0.3);
        let s = eigenspace(&m, None).unwrap();
        let mut input = DMatrix::zeros(2000, 2);
        input[(0, 0)] = 100.0;
        input[(0, 1)] = -100.0;
        let f = simulate_input(&m, &input, 1e-3, 1, None).unwrap();
        let e = eigen_trajectories(&m, &s, &f).unwrap();
        assert!(e.samples.column(0).amax() < 1e-12);
    }

    #[test]
    fn reproducible_with_seed() {
        let m = two_machine(0.3);
        let sc = Scenario::ambient(0.1, 3.0, 42);
        let a = simulate(&m, &sc, None).unwrap();
        let b = simulate(&m, &sc, None).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = simulate(&m, &Scenario::ambient(0.1, 3.0, 43), None).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn turbine_state_included() {
        let m = two_machine(0.3);
        let t = TurbineSpec::new(5.0, 1.0).unwrap();
        let f = simulate(&m, &Scenario::trip(0, 0.2, 40.0, 0).with_stride(100), Some(&t)).unwrap();
        // droop pulls the common frequency back toward a finite offset
        let last = f.len() - 1;
        assert!(f.samples[(last, 2)].is_finite());
        assert!(f.samples[(last, 2)] < 0.0);
    }
}
