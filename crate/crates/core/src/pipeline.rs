//! Experiment orchestration: configuration, stages, artifacts and run manifests.
//!
//! Every stage reads its inputs from the output directory and writes its
//! results there, so stages can run one at a time on persisted artifacts.
//! Frames label channels by model bus index; every table uses case bus ids.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::{CovarianceModel, Filtering, SelectionSet};
use crate::error::{Error, Result};
use crate::filter::{apply_zero_phase, design, BandSpec, FilterOperator, DEFAULT_NUM_TAPS, DEFAULT_TRANSITION_HZ};
use crate::frame::{ChannelSpec, Quantity, SignalFrame};
use crate::gp::{self, InferenceProblem, PosteriorEstimate, Prior, Solver};
use crate::grid::{build_reduced_model, eigenspace, parse_case, Band, EigenSpace, GridModel, TurbineSpec};
use crate::mom::{fit_alpha, make_mask, sample_covs, AlphaMatrix, AlphaProvenance, MaskPolicy, MomOptions, NoiseSpec};
use crate::sim::{ambient_alpha, decimation_factor, measure, simulate, MeasurementPipeline, Scenario, ScenarioKind};

pub const TRUTH_CSV: &str = "truth.csv";
pub const MEASURED_CSV: &str = "measured.csv";
pub const FILTERED_CSV: &str = "filtered.csv";
pub const ALPHA_JSON: &str = "alpha.json";
pub const POSTERIOR_CSV: &str = "posterior.csv";
pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const LOCATE_CSV: &str = "locate.csv";
pub const IMPUTE_CSV: &str = "impute.csv";
pub const DIFFERENTIATE_CSV: &str = "differentiate.csv";
pub const REPORT_JSON: &str = "report.json";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Tolerance of the report cross-check against the stored summary.
pub const REPORT_TOL: f64 = 1e-12;

// ---- configuration ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Case file, relative to the config file.
    pub case: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub band: Option<BandConfig>,
    #[serde(default)]
    pub turbine: Option<TurbineSpec>,
    pub channels: ChannelConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub locate: LocateConfig,
    #[serde(default)]
    pub impute: Option<ImputeConfig>,
    #[serde(default)]
    pub differentiate: Option<DifferentiateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Case bus id of the fault or trip.
    #[serde(default)]
    pub target_bus: Option<i64>,
    #[serde(default)]
    pub ambient_scale: f64,
    pub duration: f64,
    /// Integration rate; defaults to the smallest multiple of the reporting rate ≥ 1000 Hz.
    #[serde(default)]
    pub sim_rate_hz: Option<f64>,
    #[serde(default = "one")]
    pub magnitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
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
}

fn default_report_rate() -> f64 {
    15.0
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            angle_noise_std: 0.0,
            speed_noise_std: 0.0,
            rocof_noise_std: 0.0,
            power_noise_std: 0.0,
            report_rate: default_report_rate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    #[serde(default = "default_transition")]
    pub transition_hz: f64,
    #[serde(default = "default_taps")]
    pub num_taps: usize,
}

fn default_transition() -> f64 {
    DEFAULT_TRANSITION_HZ
}

fn default_taps() -> usize {
    DEFAULT_NUM_TAPS
}

/// A signal named by case bus id, written `"<bus>:<quantity>"` (e.g. `"4:speed"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelRef {
    pub bus: i64,
    pub quantity: Quantity,
}

impl FromStr for ChannelRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (b, q) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("channel {s:?} is not of the form <bus>:<quantity>")))?;
        let bus = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid bus id in channel {s:?}")))?;
        Ok(Self {
            bus,
            quantity: q.trim().parse()?,
        })
    }
}

impl fmt::Display for ChannelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.bus, self.quantity)
    }
}

impl Serialize for ChannelRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ChannelRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub metered: Vec<ChannelRef>,
    #[serde(default)]
    pub query: Vec<ChannelRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    /// Method-of-moments fit on the metered data.
    #[default]
    Estimate,
    /// Eigeninput covariance implied by the simulated ambient input (synthetic studies only).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub alpha: AlphaSource,
    #[serde(default = "default_lags")]
    pub lags: Vec<usize>,
    #[serde(default)]
    pub mask: MaskPolicy,
    #[serde(default = "yes")]
    pub known_noise: bool,
}

fn default_lags() -> Vec<usize> {
    vec![0]
}

fn yes() -> bool {
    true
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alpha: AlphaSource::default(),
            lags: default_lags(),
            mask: MaskPolicy::default(),
            known_noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    #[default]
    Auto,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// `[start, end)` in seconds; defaults to a centered window of `window_len` seconds.
    #[serde(default)]
    pub window: Option<[f64; 2]>,
    #[serde(default = "default_window_len")]
    pub window_len: f64,
    #[serde(default)]
    pub solver: SolverChoice,
}

fn default_window_len() -> f64 {
    20.0
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: None,
            window_len: default_window_len(),
            solver: SolverChoice::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocateConfig {
    /// Seconds before the event included in the window.
    #[serde(default = "default_before")]
    pub before: f64,
    /// Seconds after the event included in the window.
    #[serde(default = "default_after")]
    pub after: f64,
}

fn default_before() -> f64 {
    2.0
}

fn default_after() -> f64 {
    8.0
}

impl Default for LocateConfig {
    fn default() -> Self {
        Self {
            before: default_before(),
            after: default_after(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeConfig {
    pub channel: ChannelRef,
    /// `[start, end)` windows in seconds hidden from the data.
    pub gaps: Vec<[f64; 2]>,
    /// Seconds of data kept on each side of the gaps.
    #[serde(default = "default_context")]
    pub context: f64,
}

fn default_context() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifferentiateConfig {
    /// Case bus id of a metered angle channel.
    pub bus: i64,
    #[serde(default)]
    pub window: Option<[f64; 2]>,
    #[serde(default = "default_window_len")]
    pub window_len: f64,
    /// Seconds of data kept on each side of the window.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    2.0
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

// ---- stages ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    EstimateAlpha,
    Infer,
    Locate,
    Impute,
    Differentiate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Simulate,
        Stage::EstimateAlpha,
        Stage::Infer,
        Stage::Locate,
        Stage::Impute,
        Stage::Differentiate,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::EstimateAlpha => "estimate-alpha",
            Stage::Infer => "infer",
            Stage::Locate => "locate",
            Stage::Impute => "impute",
            Stage::Differentiate => "differentiate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// A validated experiment with its model and output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_text: String,
    pub case_text: String,
    pub model: GridModel,
    pub space: EigenSpace,
    pub filter: Option<FilterOperator>,
    pub metered: Vec<ChannelSpec>,
    pub query: Vec<ChannelSpec>,
    pub out: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    }
}

impl Experiment {
    /// Loads a config file; the case path is resolved relative to it.
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config = ExperimentConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let case_path = base.join(&config.case);
        let case_text = std::fs::read_to_string(&case_path)
            .map_err(|e| Error::Config(format!("cannot read case {}: {e}", case_path.display())))?;
        Self::from_texts(&text, &case_text, overrides, base)
    }

    /// Builds an experiment from config and case contents; a relative `output_dir`
    /// is resolved against `base`, and `base/out` is the default.
    pub fn from_texts(config_text: &str, case_text: &str, overrides: &Overrides, base: &Path) -> Result<Self> {
        let mut config = ExperimentConfig::parse(config_text)?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        let out = overrides
            .out
            .clone()
            .or_else(|| config.output_dir.as_ref().map(|d| base.join(d)))
            .unwrap_or_else(|| base.join("out"));
        let case = parse_case(case_text)?;
        let model = build_reduced_model(&case)?;
        let pipe = &config.pipeline;
        let band = config.band.map(|b| Band::new(b.low_hz, b.high_hz));
        let space = eigenspace(&model, band)?;
        if space.n_retained() == 0 {
            return Err(Error::Config("no eigenstate falls inside the band".into()));
        }
        let filter = match &config.band {
            Some(b) => Some(design(
                &BandSpec::new(b.low_hz, b.high_hz)
                    .with_transition(b.transition_hz)
                    .with_taps(b.num_taps),
                pipe.report_rate,
            )?),
            None => None,
        };
        let noise_of = |q: Quantity| match q {
            Quantity::Angle => pipe.angle_noise_std,
            Quantity::Speed => pipe.speed_noise_std,
            Quantity::Rocof => pipe.rocof_noise_std,
            Quantity::Power => pipe.power_noise_std,
        };
        let resolve = |r: &ChannelRef, noise: bool| -> Result<ChannelSpec> {
            let idx = model.index_of(r.bus)?;
            Ok(ChannelSpec::new(idx, r.quantity, if noise { noise_of(r.quantity) } else { 0.0 }))
        };
        if config.channels.metered.is_empty() {
            return Err(Error::Config("at least one metered channel is required".into()));
        }
        let metered: Vec<ChannelSpec> = config.channels.metered.iter().map(|r| resolve(r, true)).collect::<Result<_>>()?;
        let query: Vec<ChannelSpec> = config.channels.query.iter().map(|r| resolve(r, false)).collect::<Result<_>>()?;
        for q in &config.channels.query {
            if config.channels.metered.contains(q) {
                return Err(Error::Config(format!("query channel {q} is also metered")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in config.channels.metered.iter().chain(&config.channels.query) {
            if !seen.insert(*r) {
                return Err(Error::Config(format!("channel {r} listed twice")));
            }
        }
        if config.scenario.kind != ScenarioKind::Ambient {
            let t = config
                .scenario
                .target_bus
                .ok_or_else(|| Error::Config("fault and trip scenarios need target_bus".into()))?;
            model.index_of(t)?;
        }
        if let Some(im) = &config.impute {
            if !config.channels.metered.contains(&im.channel) {
                return Err(Error::Config(format!("imputed channel {} must be metered", im.channel)));
            }
        }
        if let Some(d) = &config.differentiate {
            let r = ChannelRef {
                bus: d.bus,
                quantity: Quantity::Angle,
            };
            if !config.channels.metered.contains(&r) {
                return Err(Error::Config(format!("differentiation needs metered channel {r}")));
            }
        }
        Ok(Self {
            config,
            config_text: config_text.to_string(),
            case_text: case_text.to_string(),
            model,
            space,
            filter,
            metered,
            query,
            out,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn bus_id(&self, idx: usize) -> i64 {
        self.model.bus_ids[idx]
    }

    /// Stages that apply to this config, in execution order.
    pub fn default_stages(&self) -> Vec<Stage> {
        let mut st = vec![Stage::Simulate, Stage::EstimateAlpha];
        if !self.query.is_empty() {
            st.push(Stage::Infer);
        }
        if self.config.scenario.kind != ScenarioKind::Ambient {
            st.push(Stage::Locate);
        }
        if self.config.impute.is_some() {
            st.push(Stage::Impute);
        }
        if self.config.differentiate.is_some() {
            st.push(Stage::Differentiate);
        }
        if !self.query.is_empty() {
            st.push(Stage::Report);
        }
        st
    }

    /// Runs the given stages and writes the manifest.
    pub fn run(&self, stages: &[Stage]) -> Result<Manifest> {
        std::fs::create_dir_all(&self.out)?;
        for &s in stages {
            log::info!("stage {s}");
            self.run_stage(s)?;
        }
        let manifest = self.manifest(stages)?;
        std::fs::write(self.path(MANIFEST_JSON), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let r = match stage {
            Stage::Simulate => self.stage_simulate(),
            Stage::EstimateAlpha => self.stage_estimate_alpha(),
            Stage::Infer => self.stage_infer(),
            Stage::Locate => self.stage_locate().map(|_| ()),
            Stage::Impute => self.stage_impute(),
            Stage::Differentiate => self.stage_differentiate(),
            Stage::Report => self.stage_report().map(|_| ()),
        };
        r.map_err(stage_err(stage))
    }

    fn sim_dt(&self) -> f64 {
        let rate = self.config.pipeline.report_rate;
        match self.config.scenario.sim_rate_hz {
            Some(r) => 1.0 / r,
            None => 1.0 / ((1000.0 / rate).ceil() * rate),
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let sc = &self.config.scenario;
        let dt = self.sim_dt();
        let stride = decimation_factor(1.0 / dt, self.config.pipeline.report_rate)?;
        let target = match sc.target_bus {
            Some(b) => self.model.index_of(b)?,
            None => 0,
        };
        Ok(Scenario {
            kind: sc.kind,
            target_bus: target,
            ambient_scale: sc.ambient_scale,
            input_cov: None,
            duration: sc.duration,
            sim_dt: dt,
            seed: self.config.seed,
            magnitude: sc.magnitude,
            record_stride: stride,
        })
    }

    fn annotate(&self, frame: &mut SignalFrame) {
        frame.meta.insert("bus_ids".into(), serde_json::json!(self.model.bus_ids));
    }

    fn stage_simulate(&self) -> Result<()> {
        let scenario = self.scenario()?;
        let mut truth = simulate(&self.model, &scenario, self.config.turbine.as_ref())?;
        self.annotate(&mut truth);
        let p = &self.config.pipeline;
        let pipe = MeasurementPipeline {
            angle_noise_std: p.angle_noise_std,
            speed_noise_std: p.speed_noise_std,
            rocof_noise_std: p.rocof_noise_std,
            power_noise_std: p.power_noise_std,
            report_rate: truth.rate,
            seed: self.config.seed,
        };
        let measured = measure(&truth, &pipe, &self.metered)?;
        truth.write(self.path(TRUTH_CSV))?;
        measured.write(self.path(MEASURED_CSV))?;
        Ok(())
    }

    fn read_frame(&self, name: &str) -> Result<SignalFrame> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        SignalFrame::read(p)
    }

    /// Metered data as used for estimation and inference (filtered when a band is configured).
    pub fn processed(&self) -> Result<SignalFrame> {
        match &self.filter {
            Some(_) => self.read_frame(FILTERED_CSV),
            None => self.read_frame(MEASURED_CSV),
        }
    }

    fn check_channels(&self, frame: &SignalFrame) -> Result<()> {
        let same = frame.channels.len() == self.metered.len()
            && frame
                .channels
                .iter()
                .zip(&self.metered)
                .all(|(a, b)| a.bus == b.bus && a.quantity == b.quantity);
        if !same {
            return Err(Error::Invalid("measured artifact does not match the configured metered channels".into()));
        }
        Ok(())
    }

    fn stage_estimate_alpha(&self) -> Result<()> {
        let measured = self.read_frame(MEASURED_CSV)?;
        self.check_channels(&measured)?;
        let data = match &self.filter {
            Some(f) => {
                let mut filtered = apply_zero_phase(f, &measured)?;
                self.annotate(&mut filtered);
                filtered.write(self.path(FILTERED_CSV))?;
                filtered
            }
            None => measured,
        };
        let data_hash = sha256_hex(&std::fs::read(self.path(MEASURED_CSV))?);
        let band = self.config.band.map(|b| Band::new(b.low_hz, b.high_hz));
        let est = &self.config.estimator;
        let alpha = match est.alpha {
            AlphaSource::Oracle => {
                let values = ambient_alpha(&self.model, &self.space, self.config.scenario.ambient_scale)?;
                let d = values.nrows();
                AlphaMatrix {
                    values,
                    mask: DMatrix::from_element(d, d, true),
                    provenance: AlphaProvenance {
                        band,
                        retained: self.space.retained.clone(),
                        data_hash: None,
                        noise_variances: None,
                    },
                }
            }
            AlphaSource::Estimate => {
                let covs = sample_covs(&data, &est.lags)?;
                let mask = make_mask(&self.space, est.mask);
                let noise = if est.known_noise {
                    NoiseSpec::from_channels(&self.metered)
                } else {
                    NoiseSpec::unknown(self.metered.len())
                };
                let fit = fit_alpha(
                    &covs,
                    &self.model,
                    &self.space,
                    &mask,
                    &noise,
                    &self.metered,
                    MomOptions {
                        filter: self.filter.as_ref(),
                        turbine: self.config.turbine.as_ref(),
                    },
                )?;
                let mut a = fit.alpha;
                a.provenance.band = band;
                a.provenance.data_hash = Some(data_hash);
                a
            }
        };
        alpha.write(self.path(ALPHA_JSON))
    }

    fn read_alpha(&self) -> Result<AlphaMatrix> {
        let p = self.path(ALPHA_JSON);
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        let a = AlphaMatrix::read(p)?;
        if a.provenance.retained != self.space.retained {
            return Err(Error::Invalid("alpha artifact was fitted for different retained eigenstates".into()));
        }
        Ok(a)
    }

    fn filtering(&self) -> Filtering<'_> {
        match &self.filter {
            Some(f) => Filtering::Stationary(f),
            None => Filtering::None,
        }
    }

    /// Sample range `[k0, k1)` of a time window clamped to the non-edge part of a frame.
    fn window_range(&self, frame: &SignalFrame, window: Option<[f64; 2]>, len: f64) -> Result<(usize, usize)> {
        let e = frame.edge_samples;
        let lo = e;
        let hi = frame.len().saturating_sub(e);
        if hi <= lo + 1 {
            return Err(Error::InsufficientSamples {
                need: 2 * e + 2,
                have: frame.len(),
            });
        }
        let (k0, k1) = match window {
            Some([a, b]) => {
                if !(b > a) {
                    return Err(Error::Config(format!("empty window [{a}, {b})")));
                }
                let k0 = ((a - frame.t0) * frame.rate).ceil().max(0.0) as usize;
                let k1 = ((b - frame.t0) * frame.rate).ceil().max(0.0) as usize;
                (k0.max(lo), k1.min(hi))
            }
            None => {
                let n = ((len * frame.rate).round() as usize).max(1).min(hi - lo);
                let mid = (lo + hi) / 2;
                let k0 = mid - n / 2;
                (k0, k0 + n)
            }
        };
        if k1 <= k0 {
            return Err(Error::Config("inference window lies outside the usable (non-edge) samples".into()));
        }
        Ok((k0, k1))
    }

    fn selection_data(frame: &SignalFrame, channels: &[ChannelSpec], k0: usize, k1: usize) -> Result<(SelectionSet, DVector<f64>)> {
        let times: Vec<f64> = (k0..k1).map(|k| frame.time(k)).collect();
        let t = times.len();
        let mut data = DVector::zeros(channels.len() * t);
        for (c, ch) in channels.iter().enumerate() {
            let col = frame
                .find(ch.bus, ch.quantity)
                .ok_or_else(|| Error::Invalid(format!("frame lacks {}", ch.label())))?;
            for k in 0..t {
                data[c * t + k] = frame.samples[(k0 + k, col)];
            }
        }
        Ok((SelectionSet::new(channels.to_vec(), times)?, data))
    }

    fn posterior_for(&self, alpha: &AlphaMatrix, frame: &SignalFrame, k0: usize, k1: usize, query: &[ChannelSpec]) -> Result<PosteriorEstimate> {
        let cov = CovarianceModel::new(&self.model, &self.space, &alpha.values, self.config.turbine.as_ref())?;
        let (measured, data) = Self::selection_data(frame, &self.metered, k0, k1)?;
        let query = SelectionSet::new(query.to_vec(), measured.times.clone())?;
        let problem = InferenceProblem {
            measured,
            data,
            query,
            prior: Prior::Grid {
                cov,
                filtering: self.filtering(),
            },
            solver: match self.config.inference.solver {
                SolverChoice::Auto => Solver::Auto,
                SolverChoice::Dense => Solver::Dense,
            },
        };
        gp::posterior(&problem)
    }

    /// Truth frame as seen through the configured filter.
    fn comparable_truth(&self) -> Result<SignalFrame> {
        let truth = self.read_frame(TRUTH_CSV)?;
        match &self.filter {
            Some(f) => apply_zero_phase(f, &truth),
            None => Ok(truth),
        }
    }

    fn write_posterior(&self, post: &PosteriorEstimate, name: &str) -> Result<()> {
        let mut relabeled = post.clone();
        // tables carry case bus ids
        for ch in relabeled.query.channels.iter_mut() {
            ch.bus = self.bus_id(ch.bus) as usize;
        }
        relabeled.write_csv(self.path(name))
    }

    fn stage_infer(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::Config("no query channels configured".into()));
        }
        let alpha = self.read_alpha()?;
        let frame = self.processed()?;
        self.check_channels(&frame)?;
        let inf = &self.config.inference;
        let (k0, k1) = self.window_range(&frame, inf.window, inf.window_len)?;
        let post = self.posterior_for(&alpha, &frame, k0, k1, &self.query)?;
        self.write_posterior(&post, POSTERIOR_CSV)?;
        let truth = self.comparable_truth().ok();
        let table = ResultTable::from_posterior(&post, truth.as_ref(), &self.model)?;
        table.write_csv(self.path(RESULTS_CSV))?;
        table.summary().write_csv(self.path(SUMMARY_CSV))
    }

    /// Ranks buses by `∫ p̂² dt` of the filtered posterior injection around the event.
    pub fn stage_locate(&self) -> Result<Vec<(i64, f64)>> {
        if self.filter.is_none() {
            return Err(Error::Config("locate needs a band so that injections are filtered".into()));
        }
        let alpha = self.read_alpha()?;
        let frame = self.processed()?;
        self.check_channels(&frame)?;
        let sc = self.scenario()?;
        let t_event = sc.event_step() as f64 * sc.sim_dt;
        let lc = &self.config.locate;
        let (k0, k1) = self.window_range(&frame, Some([t_event - lc.before, t_event + lc.after]), 0.0)?;
        let query: Vec<ChannelSpec> = (0..self.model.n_buses).map(|b| ChannelSpec::new(b, Quantity::Power, 0.0)).collect();
        let post = self.posterior_for(&alpha, &frame, k0, k1, &query)?;
        let dt = 1.0 / frame.rate;
        let mut energy: Vec<(i64, f64)> = (0..self.model.n_buses)
            .map(|b| {
                let (mean, _) = post.channel(b);
                (self.bus_id(b), mean.iter().map(|v| v * v).sum::<f64>() * dt)
            })
            .collect();
        energy.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.path(LOCATE_CSV))?);
        writeln!(f, "rank,bus,energy")?;
        for (r, (bus, e)) in energy.iter().enumerate() {
            writeln!(f, "{},{},{}", r + 1, bus, e)?;
        }
        f.flush()?;
        Ok(energy)
    }

    fn single_channel(&self, frame: &SignalFrame, r: ChannelRef, k0: usize, k1: usize) -> Result<SignalFrame> {
        let idx = self.model.index_of(r.bus)?;
        let col = frame
            .find(idx, r.quantity)
            .ok_or_else(|| Error::Invalid(format!("measured data lacks channel {r}")))?;
        let mut one = frame.select_channels(&[col]).slice(k0, k1);
        one.edge_samples = 0;
        Ok(one)
    }

    fn stage_impute(&self) -> Result<()> {
        let cfg = self
            .config
            .impute
            .as_ref()
            .ok_or_else(|| Error::Config("no [impute] section".into()))?;
        let frame = self.read_frame(MEASURED_CSV)?;
        let post = impute_channel(self, &frame, cfg)?;
        self.write_posterior(&post, IMPUTE_CSV)
    }

    fn stage_differentiate(&self) -> Result<()> {
        let cfg = self
            .config
            .differentiate
            .as_ref()
            .ok_or_else(|| Error::Config("no [differentiate] section".into()))?;
        let frame = self.read_frame(MEASURED_CSV)?;
        let (q0, q1) = self.window_range(&frame, cfg.window, cfg.window_len)?;
        let margin = (cfg.margin * frame.rate).round() as usize;
        let k0 = q0.saturating_sub(margin);
        let k1 = (q1 + margin).min(frame.len());
        let r = ChannelRef {
            bus: cfg.bus,
            quantity: Quantity::Angle,
        };
        let one = self.single_channel(&frame, r, k0, k1)?;
        let qt: Vec<f64> = (q0..q1).map(|k| frame.time(k)).collect();
        let post = gp::differentiate(&one, &qt, None)?;
        self.write_posterior(&post, DIFFERENTIATE_CSV)
    }

    /// Recomputes the summary from `results.csv` and cross-checks the stored summary.
    pub fn stage_report(&self) -> Result<Summary> {
        let p = self.path(RESULTS_CSV);
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        let table = ResultTable::read_csv(&p)?;
        let summary = table.summary();
        let stored = self.path(SUMMARY_CSV);
        if stored.exists() {
            let old = Summary::read_csv(&stored)?;
            summary.check_against(&old)?;
        }
        std::fs::write(self.path(REPORT_JSON), serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(summary)
    }

    fn manifest(&self, stages: &[Stage]) -> Result<Manifest> {
        let mut artifacts = BTreeMap::new();
        let names = [
            TRUTH_CSV,
            MEASURED_CSV,
            FILTERED_CSV,
            ALPHA_JSON,
            POSTERIOR_CSV,
            RESULTS_CSV,
            SUMMARY_CSV,
            LOCATE_CSV,
            IMPUTE_CSV,
            DIFFERENTIATE_CSV,
            REPORT_JSON,
        ];
        for name in names {
            let p = self.path(name);
            if p.exists() {
                artifacts.insert(name.to_string(), sha256_hex(&std::fs::read(&p)?));
            }
        }
        Ok(Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            stages: stages.to_vec(),
            config_sha256: sha256_hex(self.config_text.as_bytes()),
            case_sha256: sha256_hex(self.case_text.as_bytes()),
            config: self.config_text.clone(),
            case: self.case_text.clone(),
            artifacts,
        })
    }
}

/// Imputes the configured gaps of one metered channel from the surrounding samples.
pub fn impute_channel(exp: &Experiment, frame: &SignalFrame, cfg: &ImputeConfig) -> Result<PosteriorEstimate> {
    if cfg.gaps.is_empty() {
        return Err(Error::Config("impute needs at least one gap".into()));
    }
    let lo = cfg.gaps.iter().map(|g| g[0]).fold(f64::INFINITY, f64::min) - cfg.context;
    let hi = cfg.gaps.iter().map(|g| g[1]).fold(f64::NEG_INFINITY, f64::max) + cfg.context;
    let k0 = ((lo - frame.t0) * frame.rate).floor().max(0.0) as usize;
    let k1 = (((hi - frame.t0) * frame.rate).ceil().max(0.0) as usize).min(frame.len());
    if k1 <= k0 {
        return Err(Error::Config("imputation window lies outside the record".into()));
    }
    let one = exp.single_channel(frame, cfg.channel, k0, k1)?;
    let gaps: Vec<(f64, f64)> = cfg.gaps.iter().map(|g| (g[0], g[1])).collect();
    gp::impute(&one, &gaps, None)
}

/// Reproduction record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub config_sha256: String,
    pub case_sha256: String,
    pub config: String,
    pub case: String,
    /// Artifact file name → sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }
}

/// Outcome of re-running a manifest: artifacts whose hashes differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub manifest: Manifest,
    pub mismatched: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-executes a recorded run into `out` and compares every artifact hash.
pub fn replay(manifest_path: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<ReplayReport> {
    let old = Manifest::read(manifest_path)?;
    let overrides = Overrides {
        seed: Some(old.seed),
        out: Some(out.as_ref().to_path_buf()),
    };
    let exp = Experiment::from_texts(&old.config, &old.case, &overrides, out.as_ref())?;
    let new = exp.run(&old.stages)?;
    let mut mismatched: Vec<String> = old
        .artifacts
        .iter()
        .filter(|(k, v)| new.artifacts.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    mismatched.extend(new.artifacts.keys().filter(|k| !old.artifacts.contains_key(*k)).cloned());
    Ok(ReplayReport {
        manifest: new,
        mismatched,
    })
}

// ---- result tables ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub bus: i64,
    pub quantity: Quantity,
    pub time_s: f64,
    pub truth: Option<f64>,
    pub mean: f64,
    pub std: f64,
    /// `|truth − mean|` in the quantity's internal unit.
    pub abs_error: Option<f64>,
    /// `|ω − ω̂| / ω₀` for speed rows.
    pub e_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSummary {
    pub bus: i64,
    pub quantity: Quantity,
    pub rows: usize,
    pub mean_abs_error: Option<f64>,
    pub mean_e_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_bus: Vec<BusSummary>,
    /// Mean absolute error over all rows with truth.
    pub mae: Option<f64>,
    /// Mean `E_n` over all speed rows with truth.
    pub mean_e_n: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("invalid number {s:?}"),
    })
}

fn parse_f(s: &str, line: usize) -> Result<f64> {
    parse_opt(s, line)?.ok_or_else(|| Error::Parse {
        line,
        message: "missing value".into(),
    })
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        None
    } else {
        Some(s / n as f64)
    }
}

impl ResultTable {
    /// Joins a posterior (model bus indices) with the truth frame when there is one.
    pub fn from_posterior(post: &PosteriorEstimate, truth: Option<&SignalFrame>, model: &GridModel) -> Result<Self> {
        let t = post.query.times.len();
        let w0 = model.omega0();
        let mut rows = Vec::with_capacity(post.mean.len());
        for (c, ch) in post.query.channels.iter().enumerate() {
            let col = truth.and_then(|f| f.find(ch.bus, ch.quantity).map(|k| (f, k)));
            for k in 0..t {
                let time = post.query.times[k];
                let tv = match col {
                    Some((f, idx)) => {
                        let row = ((time - f.t0) * f.rate).round() as usize;
                        Some(f.samples[(row, idx)])
                    }
                    None => None,
                };
                let mean = post.mean[c * t + k];
                let abs_error = tv.map(|v| (v - mean).abs());
                rows.push(ResultRow {
                    bus: model.bus_ids[ch.bus],
                    quantity: ch.quantity,
                    time_s: time,
                    truth: tv,
                    mean,
                    std: post.std[c * t + k],
                    abs_error,
                    e_n: if ch.quantity == Quantity::Speed { abs_error.map(|e| e / w0) } else { None },
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bus,quantity,time_s,truth,mean,std,abs_error,e_n")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.bus,
                r.quantity,
                r.time_s,
                fmt_opt(r.truth),
                r.mean,
                r.std,
                fmt_opt(r.abs_error),
                fmt_opt(r.e_n)
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "bus,quantity,time_s,truth,mean,std,abs_error,e_n" {
            return Err(Error::Parse {
                line: 1,
                message: "unexpected results header".into(),
            });
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let ln = k + 2;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected 8 fields, found {}", f.len()),
                });
            }
            rows.push(ResultRow {
                bus: f[0].parse().map_err(|_| Error::Parse {
                    line: ln,
                    message: "invalid bus".into(),
                })?,
                quantity: f[1].parse()?,
                time_s: parse_f(f[2], ln)?,
                truth: parse_opt(f[3], ln)?,
                mean: parse_f(f[4], ln)?,
                std: parse_f(f[5], ln)?,
                abs_error: parse_opt(f[6], ln)?,
                e_n: parse_opt(f[7], ln)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn summary(&self) -> Summary {
        let mut keys: Vec<(i64, Quantity)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.bus, r.quantity)) {
                keys.push((r.bus, r.quantity));
            }
        }
        let per_bus = keys
            .iter()
            .map(|&(bus, q)| {
                let sel = || self.rows.iter().filter(move |r| r.bus == bus && r.quantity == q);
                BusSummary {
                    bus,
                    quantity: q,
                    rows: sel().count(),
                    mean_abs_error: mean_of(sel().filter_map(|r| r.abs_error)),
                    mean_e_n: mean_of(sel().filter_map(|r| r.e_n)),
                }
            })
            .collect();
        Summary {
            per_bus,
            mae: mean_of(self.rows.iter().filter_map(|r| r.abs_error)),
            mean_e_n: mean_of(self.rows.iter().filter_map(|r| r.e_n)),
        }
    }
}

impl Summary {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "scope,bus,quantity,rows,mean_abs_error,mean_e_n")?;
        for b in &self.per_bus {
            writeln!(
                f,
                "bus,{},{},{},{},{}",
                b.bus,
                b.quantity,
                b.rows,
                fmt_opt(b.mean_abs_error),
                fmt_opt(b.mean_e_n)
            )?;
        }
        let total: usize = self.per_bus.iter().map(|b| b.rows).sum();
        writeln!(f, "global,,,{},{},{}", total, fmt_opt(self.mae), fmt_opt(self.mean_e_n))?;
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut per_bus = Vec::new();
        let mut global = None;
        for (k, line) in text.lines().enumerate().skip(1) {
            let ln = k + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse {
                    line: ln,
                    message: "expected 6 fields".into(),
                });
            }
            match f[0] {
                "bus" => per_bus.push(BusSummary {
                    bus: f[1].parse().map_err(|_| Error::Parse {
                        line: ln,
                        message: "invalid bus".into(),
                    })?,
                    quantity: f[2].parse()?,
                    rows: f[3].parse().map_err(|_| Error::Parse {
                        line: ln,
                        message: "invalid row count".into(),
                    })?,
                    mean_abs_error: parse_opt(f[4], ln)?,
                    mean_e_n: parse_opt(f[5], ln)?,
                }),
                "global" => global = Some((parse_opt(f[4], ln)?, parse_opt(f[5], ln)?)),
                other => {
                    return Err(Error::Parse {
                        line: ln,
                        message: format!("unknown scope {other:?}"),
                    })
                }
            }
        }
        let (mae, mean_e_n) = global.ok_or_else(|| Error::Parse {
            line: 0,
            message: "summary has no global row".into(),
        })?;
        Ok(Self { per_bus, mae, mean_e_n })
    }

    /// Errors when any statistic differs from `other` by more than [`REPORT_TOL`] (relative).
    pub fn check_against(&self, other: &Summary) -> Result<()> {
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= REPORT_TOL * x.abs().max(y.abs()).max(f64::MIN_POSITIVE),
            (None, None) => true,
            _ => false,
        };
        let ok = self.per_bus.len() == other.per_bus.len()
            && close(self.mae, other.mae)
            && close(self.mean_e_n, other.mean_e_n)
            && self.per_bus.iter().zip(&other.per_bus).all(|(a, b)| {
                a.bus == b.bus
                    && a.quantity == b.quantity
                    && a.rows == b.rows
                    && close(a.mean_abs_error, b.mean_abs_error)
                    && close(a.mean_e_n, b.mean_e_n)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("recomputed summary differs from the stored summary".into()))
        }
    }
}
