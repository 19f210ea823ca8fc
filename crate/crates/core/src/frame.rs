//! Multichannel sampled signals and their boundary units.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Angle,
    Speed,
    Rocof,
    Power,
}

impl Quantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quantity::Angle => "angle",
            Quantity::Speed => "speed",
            Quantity::Rocof => "rocof",
            Quantity::Power => "power",
        }
    }

    pub fn internal_unit(&self) -> Unit {
        match self {
            Quantity::Angle => Unit::Rad,
            Quantity::Speed => Unit::RadPerS,
            Quantity::Rocof => Unit::RadPerS2,
            Quantity::Power => Unit::Pu,
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angle" => Ok(Quantity::Angle),
            "speed" => Ok(Quantity::Speed),
            "rocof" => Ok(Quantity::Rocof),
            "power" => Ok(Quantity::Power),
            other => Err(Error::Invalid(format!("unknown quantity {other:?}"))),
        }
    }
}

/// One measured or queried signal: a bus (model index), a quantity and its noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub bus: usize,
    pub quantity: Quantity,
    /// Measurement noise standard deviation in internal units.
    #[serde(default)]
    pub noise_std: f64,
}

impl ChannelSpec {
    pub fn new(bus: usize, quantity: Quantity, noise_std: f64) -> Self {
        Self { bus, quantity, noise_std }
    }

    pub fn speed(bus: usize) -> Self {
        Self::new(bus, Quantity::Speed, 0.0)
    }

    pub fn angle(bus: usize) -> Self {
        Self::new(bus, Quantity::Angle, 0.0)
    }

    pub fn label(&self) -> String {
        format!("bus{}_{}", self.bus, self.quantity)
    }

    pub fn same_signal(&self, other: &Self) -> bool {
        self.bus == other.bus && self.quantity == other.quantity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "rad")]
    Rad,
    #[serde(rename = "deg")]
    Deg,
    #[serde(rename = "rad/s")]
    RadPerS,
    #[serde(rename = "Hz")]
    Hz,
    #[serde(rename = "pu_speed")]
    PuSpeed,
    #[serde(rename = "rad/s^2")]
    RadPerS2,
    #[serde(rename = "Hz/s")]
    HzPerS,
    #[serde(rename = "pu_speed/s")]
    PuSpeedPerS,
    #[serde(rename = "pu")]
    Pu,
}

impl Unit {
    pub fn tag(&self) -> &'static str {
        match self {
            Unit::Rad => "rad",
            Unit::Deg => "deg",
            Unit::RadPerS => "rad/s",
            Unit::Hz => "Hz",
            Unit::PuSpeed => "pu_speed",
            Unit::RadPerS2 => "rad/s^2",
            Unit::HzPerS => "Hz/s",
            Unit::PuSpeedPerS => "pu_speed/s",
            Unit::Pu => "pu",
        }
    }

    /// Factor that converts a value in this unit to the internal unit of its quantity.
    fn to_internal(self, omega0: f64) -> f64 {
        match self {
            Unit::Rad | Unit::RadPerS | Unit::RadPerS2 | Unit::Pu => 1.0,
            Unit::Deg => PI / 180.0,
            Unit::Hz | Unit::HzPerS => 2.0 * PI,
            Unit::PuSpeed | Unit::PuSpeedPerS => omega0,
        }
    }

    fn quantity_family(&self) -> Quantity {
        match self {
            Unit::Rad | Unit::Deg => Quantity::Angle,
            Unit::RadPerS | Unit::Hz | Unit::PuSpeed => Quantity::Speed,
            Unit::RadPerS2 | Unit::HzPerS | Unit::PuSpeedPerS => Quantity::Rocof,
            Unit::Pu => Quantity::Power,
        }
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Unit::Rad,
            Unit::Deg,
            Unit::RadPerS,
            Unit::Hz,
            Unit::PuSpeed,
            Unit::RadPerS2,
            Unit::HzPerS,
            Unit::PuSpeedPerS,
            Unit::Pu,
        ]
        .into_iter()
        .find(|u| u.tag() == s)
        .ok_or_else(|| Error::UnknownUnit(s.to_string()))
    }
}

/// Target unit family for [`convert_units`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitSystem {
    /// rad, rad/s, rad/s², pu.
    Internal,
    /// deg, Hz, Hz/s, pu.
    Display,
    /// rad, speed normalized by ω₀, pu.
    PerUnit,
}

impl UnitSystem {
    fn unit_for(&self, q: Quantity) -> Unit {
        match (self, q) {
            (UnitSystem::Internal, q) => q.internal_unit(),
            (UnitSystem::Display, Quantity::Angle) => Unit::Deg,
            (UnitSystem::Display, Quantity::Speed) => Unit::Hz,
            (UnitSystem::Display, Quantity::Rocof) => Unit::HzPerS,
            (UnitSystem::PerUnit, Quantity::Angle) => Unit::Rad,
            (UnitSystem::PerUnit, Quantity::Speed) => Unit::PuSpeed,
            (UnitSystem::PerUnit, Quantity::Rocof) => Unit::PuSpeedPerS,
            (_, Quantity::Power) => Unit::Pu,
        }
    }
}

/// Uniformly sampled multichannel signal; `samples` is T×C.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFrame {
    pub rate: f64,
    pub t0: f64,
    pub channels: Vec<ChannelSpec>,
    pub samples: DMatrix<f64>,
    pub units: Vec<Unit>,
    /// Samples at each end affected by filter start-up.
    pub edge_samples: usize,
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rate: f64,
    t0: f64,
    n_samples: usize,
    channels: Vec<ChannelSpec>,
    units: Vec<Unit>,
    edge_samples: usize,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

impl SignalFrame {
    /// Frame in internal units.
    pub fn new(rate: f64, t0: f64, channels: Vec<ChannelSpec>, samples: DMatrix<f64>) -> Result<Self> {
        let units = channels.iter().map(|c| c.quantity.internal_unit()).collect();
        let frame = Self {
            rate,
            t0,
            channels,
            samples,
            units,
            edge_samples: 0,
            meta: BTreeMap::new(),
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::Invalid(format!("sample rate must be positive, got {}", self.rate)));
        }
        if self.samples.ncols() != self.channels.len() || self.units.len() != self.channels.len() {
            return Err(Error::Dimension(format!(
                "{} sample columns, {} channels, {} units",
                self.samples.ncols(),
                self.channels.len(),
                self.units.len()
            )));
        }
        if let Some(k) = self.samples.iter().position(|v| !v.is_finite()) {
            let t = k % self.samples.nrows().max(1);
            return Err(Error::Invalid(format!("non-finite sample at row {t}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.rate
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    pub fn find(&self, bus: usize, quantity: Quantity) -> Option<usize> {
        self.channels.iter().position(|c| c.bus == bus && c.quantity == quantity)
    }

    pub fn column(&self, bus: usize, quantity: Quantity) -> Result<Vec<f64>> {
        let k = self
            .find(bus, quantity)
            .ok_or_else(|| Error::Invalid(format!("frame has no channel bus{bus}_{quantity}")))?;
        Ok(self.samples.column(k).iter().copied().collect())
    }

    /// Frame restricted to the given columns.
    pub fn select_channels(&self, cols: &[usize]) -> Self {
        Self {
            rate: self.rate,
            t0: self.t0,
            channels: cols.iter().map(|&k| self.channels[k]).collect(),
            samples: self.samples.select_columns(cols),
            units: cols.iter().map(|&k| self.units[k]).collect(),
            edge_samples: self.edge_samples,
            meta: self.meta.clone(),
        }
    }

    /// Frame restricted to sample rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let rows: Vec<usize> = (start..end).collect();
        Self {
            rate: self.rate,
            t0: self.time(start),
            channels: self.channels.clone(),
            samples: self.samples.select_rows(&rows),
            units: self.units.clone(),
            edge_samples: if start >= self.edge_samples && self.len() - end >= self.edge_samples {
                0
            } else {
                self.edge_samples
            },
            meta: self.meta.clone(),
        }
    }

    /// Writes `path` as CSV and a JSON sidecar next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "time_s")?;
        for c in &self.channels {
            write!(out, ",{}", c.label())?;
        }
        writeln!(out)?;
        for t in 0..self.len() {
            write!(out, "{}", self.time(t))?;
            for c in 0..self.channels.len() {
                write!(out, ",{}", self.samples[(t, c)])?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        let side = Sidecar {
            rate: self.rate,
            t0: self.t0,
            n_samples: self.len(),
            channels: self.channels.clone(),
            units: self.units.clone(),
            edge_samples: self.edge_samples,
            meta: self.meta.clone(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    /// Reads a frame written by [`SignalFrame::write`].
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side_path = sidecar_path(path);
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        if !side_path.exists() {
            return Err(Error::MissingArtifact(side_path.display().to_string()));
        }
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(&side_path)?)?;
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, message: "empty csv".into() })??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() != side.channels.len() + 1 || cols[0] != "time_s" {
            return Err(Error::Parse {
                line: 1,
                message: "csv header does not match sidecar channels".into(),
            });
        }
        for (name, ch) in cols[1..].iter().zip(&side.channels) {
            if *name != ch.label() {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("column {name} does not match channel {}", ch.label()),
                });
            }
        }
        let c = side.channels.len();
        let mut data = Vec::with_capacity(side.n_samples * c);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != c + 1 {
                return Err(Error::Parse {
                    line: k + 2,
                    message: format!("expected {} fields, found {}", c + 1, fields.len()),
                });
            }
            for f in &fields[1..] {
                data.push(f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: k + 2,
                    message: format!("invalid number {f:?}"),
                })?);
            }
        }
        let t = data.len() / c.max(1);
        if t != side.n_samples {
            return Err(Error::Parse {
                line: t + 1,
                message: format!("expected {} rows, found {t}", side.n_samples),
            });
        }
        let frame = Self {
            rate: side.rate,
            t0: side.t0,
            channels: side.channels,
            samples: DMatrix::from_row_slice(t, c, &data),
            units: side.units,
            edge_samples: side.edge_samples,
            meta: side.meta,
        };
        frame.validate()?;
        Ok(frame)
    }
}

/// `frame.csv` → `frame.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Converts every channel to the unit of `system`, using ω₀ = 2π f₀ for per-unit speeds.
pub fn convert_units(frame: &SignalFrame, system: UnitSystem, base_freq_hz: f64) -> Result<SignalFrame> {
    let omega0 = 2.0 * PI * base_freq_hz;
    let mut out = frame.clone();
    for (k, ch) in frame.channels.iter().enumerate() {
        let from = frame.units[k];
        if from.quantity_family() != ch.quantity {
            return Err(Error::Invalid(format!(
                "unit {} does not fit quantity {}",
                from.tag(),
                ch.quantity
            )));
        }
        let to = system.unit_for(ch.quantity);
        if from == to {
            continue;
        }
        let factor = from.to_internal(omega0) / to.to_internal(omega0);
        out.samples.column_mut(k).scale_mut(factor);
        out.units[k] = to;
    }
    Ok(out)
}
