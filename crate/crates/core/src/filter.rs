//! Linear-phase FIR band-pass design and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SignalFrame;

pub const DEFAULT_NUM_TAPS: usize = 201;
pub const DEFAULT_TRANSITION_HZ: f64 = 0.3;
pub const MIN_NUM_TAPS: usize = 31;

/// Pass band in Hz; `low_hz = 0` designs a low-pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub transition_hz: f64,
    pub num_taps: usize,
}

impl BandSpec {
    pub fn new(low_hz: f64, high_hz: f64) -> Self {
        Self {
            low_hz,
            high_hz,
            transition_hz: DEFAULT_TRANSITION_HZ,
            num_taps: DEFAULT_NUM_TAPS,
        }
    }

    pub fn with_taps(mut self, num_taps: usize) -> Self {
        self.num_taps = num_taps;
        self
    }

    pub fn with_transition(mut self, transition_hz: f64) -> Self {
        self.transition_hz = transition_hz;
        self
    }

    pub fn validate(&self, rate: f64) -> Result<()> {
        let nyq = rate / 2.0;
        if !(self.low_hz >= 0.0 && self.low_hz < self.high_hz && self.high_hz < nyq) {
            return Err(Error::FilterDesign(format!(
                "band [{}, {}] Hz invalid for rate {rate} Hz",
                self.low_hz, self.high_hz
            )));
        }
        if self.num_taps.is_multiple_of(2) || self.num_taps < MIN_NUM_TAPS {
            return Err(Error::FilterDesign(format!(
                "num_taps must be odd and at least {MIN_NUM_TAPS}, got {}",
                self.num_taps
            )));
        }
        if !(self.transition_hz > 0.0) {
            return Err(Error::FilterDesign("transition width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOperator {
    pub taps: Vec<f64>,
    pub sample_rate: f64,
    pub band: BandSpec,
}

fn hamming_lowpass(cutoff_hz: f64, rate: f64, n: usize) -> Vec<f64> {
    let m = (n - 1) as f64 / 2.0;
    let fc = cutoff_hz / rate;
    let mut h: Vec<f64> = (0..n)
        .map(|k| {
            let x = k as f64 - m;
            let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
            let w = 0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    for v in h.iter_mut() {
        *v /= dc;
    }
    h
}

/// Windowed-sinc (Hamming) design, checked against 1 dB ripple and 40 dB stopband.
pub fn design(band: &BandSpec, rate: f64) -> Result<FilterOperator> {
    band.validate(rate)?;
    let n = band.num_taps;
    let half = band.transition_hz / 2.0;
    let upper = hamming_lowpass((band.high_hz + half).min(rate / 2.0), rate, n);
    let taps: Vec<f64> = if band.low_hz - half > 0.0 {
        let lower = hamming_lowpass(band.low_hz - half, rate, n);
        upper.iter().zip(&lower).map(|(u, l)| u - l).collect()
    } else {
        upper
    };
    // enforce exact symmetry against round-off in the window
    let mut taps = taps;
    for k in 0..n / 2 {
        let v = 0.5 * (taps[k] + taps[n - 1 - k]);
        taps[k] = v;
        taps[n - 1 - k] = v;
    }
    let filter = FilterOperator {
        taps,
        sample_rate: rate,
        band: *band,
    };
    let (ripple_db, atten_db) = filter.measured_response();
    if ripple_db >= 1.0 || atten_db <= 40.0 {
        return Err(Error::FilterDesign(format!(
            "{n} taps give passband ripple {ripple_db:.2} dB and stopband attenuation {atten_db:.1} dB"
        )));
    }
    Ok(filter)
}

impl FilterOperator {
    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    /// Single-pass magnitude response at `f_hz`.
    pub fn gain(&self, f_hz: f64) -> f64 {
        let w = 2.0 * PI * f_hz / self.sample_rate;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, &h) in self.taps.iter().enumerate() {
            re += h * (w * k as f64).cos();
            im -= h * (w * k as f64).sin();
        }
        (re * re + im * im).sqrt()
    }

    /// Magnitude response of the forward-backward cascade.
    pub fn zero_phase_gain(&self, f_hz: f64) -> f64 {
        let g = self.gain(f_hz);
        g * g
    }

    /// Worst passband ripple and minimum stopband attenuation over a 1024-point grid, both in dB.
    pub fn measured_response(&self) -> (f64, f64) {
        let b = &self.band;
        let nyq = self.sample_rate / 2.0;
        let mut pass_max = f64::NEG_INFINITY;
        let mut pass_min = f64::INFINITY;
        let mut stop_max: f64 = 0.0;
        for k in 0..1024 {
            let f = nyq * k as f64 / 1023.0;
            let g = self.gain(f);
            if f >= b.low_hz && f <= b.high_hz {
                pass_max = pass_max.max(g);
                pass_min = pass_min.min(g);
            }
            let below = b.low_hz > 0.0 && f <= b.low_hz - b.transition_hz;
            let above = f >= b.high_hz + b.transition_hz;
            if below || above {
                stop_max = stop_max.max(g);
            }
        }
        let ripple = 20.0 * (pass_max / pass_min).log10();
        let atten = if stop_max > 0.0 { -20.0 * stop_max.log10() } else { f64::INFINITY };
        (ripple, atten)
    }

    fn causal(&self, x: &[f64]) -> Vec<f64> {
        let h = &self.taps;
        (0..x.len())
            .map(|k| {
                let lo = (k + 1).saturating_sub(h.len());
                (lo..=k).map(|i| h[k - i] * x[i]).sum()
            })
            .collect()
    }

    /// Forward-backward filtering with odd reflection padding of `num_taps` samples.
    pub fn filter_series(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        let pad = self.num_taps();
        if n <= 3 * pad {
            return Err(Error::InsufficientSamples { need: 3 * pad + 1, have: n });
        }
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for k in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[k]);
        }
        ext.extend_from_slice(x);
        for k in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - k]);
        }
        let mut y = self.causal(&ext);
        y.reverse();
        let mut y = self.causal(&y);
        y.reverse();
        Ok(y[pad..pad + n].to_vec())
    }

    /// Explicit `len × len` matrix of the zero-phase operator including edge handling.
    pub fn matrix(&self, len: usize) -> Result<DMatrix<f64>> {
        let cols: Vec<Vec<f64>> = (0..len)
            .into_par_iter()
            .map(|k| {
                let mut e = vec![0.0; len];
                e[k] = 1.0;
                self.filter_series(&e)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(len, len, |r, c| cols[c][r]))
    }

    /// Impulse response of the forward-backward cascade, `g = h ⋆ h`, centred (length `2n−1`).
    pub fn zero_phase_impulse(&self) -> Vec<f64> {
        autocorrelation(&self.taps)
    }

    /// Lag weights `ρ(m) = Σ_u g(u) g(u+m)` for `m = −(L−1)..(L−1)`, centred.
    ///
    /// For a stationary input with covariance `k`, the filtered covariance at lag
    /// `m` is `Σ_u ρ(u) k(m − u)` away from the edges.
    pub fn lag_weights(&self) -> Vec<f64> {
        autocorrelation(&self.zero_phase_impulse())
    }
}

/// Full autocorrelation `r(m) = Σ_k x(k) x(k+m)`, index `len−1` is lag 0.
pub fn autocorrelation(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; 2 * n - 1];
    for m in 0..n {
        let v: f64 = (0..n - m).map(|k| x[k] * x[k + m]).sum();
        out[n - 1 + m] = v;
        out[n - 1 - m] = v;
    }
    out
}

/// Zero-phase filtering of every channel; the first and last `num_taps` samples are marked as edges.
pub fn apply_zero_phase(filter: &FilterOperator, frame: &SignalFrame) -> Result<SignalFrame> {
    if (frame.rate - filter.sample_rate).abs() > 1e-9 * frame.rate {
        return Err(Error::Invalid(format!(
            "filter designed for {} Hz applied to {} Hz data",
            filter.sample_rate, frame.rate
        )));
    }
    let cols: Vec<Vec<f64>> = (0..frame.channels.len())
        .into_par_iter()
        .map(|c| {
            let x: Vec<f64> = frame.samples.column(c).iter().copied().collect();
            filter.filter_series(&x)
        })
        .collect::<Result<_>>()?;
    let mut out = frame.clone();
    for (c, col) in cols.iter().enumerate() {
        out.samples.column_mut(c).copy_from_slice(col);
    }
    out.edge_samples = frame.edge_samples.max(filter.num_taps());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandpass() -> FilterOperator {
        design(&BandSpec::new(0.5, 0.8), 15.0).unwrap()
    }

    #[test]
    fn lowpass_unit_dc() {
        let f = design(&BandSpec::new(0.0, 2.0), 15.0).unwrap();
        let g = f.gain(0.0);
        assert!((0.99..=1.01).contains(&g));
    }

    #[test]
    fn bandpass_gains() {
        let f = bandpass();
        assert!(f.gain(0.65) >= 0.9);
        assert!(f.gain(0.1) <= 0.01);
    }

    #[test]
    fn taps_symmetric() {
        let f = bandpass();
        let n = f.num_taps();
        for k in 0..n {
            assert_eq!(f.taps[k], f.taps[n - 1 - k]);
        }
    }

    #[test]
    fn too_few_taps_rejected() {
        assert!(matches!(design(&BandSpec::new(0.5, 0.8).with_taps(31), 15.0), Err(Error::FilterDesign(_))));
        assert!(matches!(design(&BandSpec::new(0.5, 0.8).with_taps(200), 15.0), Err(Error::FilterDesign(_))));
    }

    #[test]
    fn sinusoid_amplitude_and_phase() {
        let f = bandpass();
        let rate = 15.0;
        let n = 3000;
        let w = 2.0 * PI * 0.65;
        let x: Vec<f64> = (0..n).map(|k| (w * k as f64 / rate).sin()).collect();
        let y = f.filter_series(&x).unwrap();
        // least-squares fit of a sin + b cos over the interior
        let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 400..n - 400 {
            let t = k as f64 / rate;
            let (s, c) = ((w * t).sin(), (w * t).cos());
            ss += s * s;
            cc += c * c;
            sc += s * c;
            ys += y[k] * s;
            yc += y[k] * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        let amp = (a * a + b * b).sqrt();
        let phase = b.atan2(a).to_degrees();
        assert!((amp - 1.0).abs() < 0.02, "amp {amp}");
        assert!(phase.abs() < 0.5, "phase {phase}");
    }

    #[test]
    fn drift_attenuated() {
        let f = bandpass();
        let rate = 15.0;
        let x: Vec<f64> = (0..6000).map(|k| (2.0 * PI * 0.05 * k as f64 / rate).sin()).collect();
        let y = f.filter_series(&x).unwrap();
        let peak = y[600..5400].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(peak <= 0.01, "peak {peak}");
    }

    #[test]
    fn zero_in_zero_out() {
        let y = bandpass().filter_series(&vec![0.0; 700]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_input_rejected() {
        assert!(matches!(bandpass().filter_series(&[0.0; 100]), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn matrix_matches_series() {
        let f = design(&BandSpec::new(0.0, 2.0).with_taps(31).with_transition(2.0), 15.0).unwrap();
        let len = 120;
        let fm = f.matrix(len).unwrap();
        let x: Vec<f64> = (0..len).map(|k| ((k * 7919) % 23) as f64 - 11.0).collect();
        let y = f.filter_series(&x).unwrap();
        let y2 = &fm * nalgebra::DVector::from_vec(x);
        for k in 0..len {
            assert!((y[k] - y2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn interior_equals_cascade_impulse() {
        let f = design(&BandSpec::new(0.0, 2.0).with_taps(31).with_transition(2.0), 15.0).unwrap();
        let g = f.zero_phase_impulse();
        let len = 200;
        let fm = f.matrix(len).unwrap();
        let row = 100;
        for (u, &gu) in g.iter().enumerate() {
            let col = row + u - (g.len() - 1) / 2;
            assert!((fm[(row, col)] - gu).abs() < 1e-14);
        }
    }
}
