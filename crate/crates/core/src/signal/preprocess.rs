//! Resampling, zero-phase FIR bandpass, per-lead normalisation and
//! fixed-length segment extraction.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::Recording;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Rate every recording is resampled to, Hz.
    pub target_fs: f64,
    /// Segment length T in seconds.
    pub segment_seconds: f64,
    pub filter: bool,
    pub bandpass_low: f64,
    pub bandpass_high: f64,
    pub fir_taps: usize,
    /// Per-lead z-score over the whole recording.
    pub normalize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_fs: 500.0,
            segment_seconds: 15.0,
            filter: true,
            bandpass_low: 0.5,
            bandpass_high: 40.0,
            fir_taps: 101,
            normalize: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.target_fs > 0.0) {
            return cfg(format!("target_fs must be positive, got {}", self.target_fs));
        }
        if !(self.segment_seconds > 0.0) {
            return cfg(format!("segment_seconds must be positive, got {}", self.segment_seconds));
        }
        if self.filter {
            let nyq = self.target_fs / 2.0;
            if !(0.0 < self.bandpass_low && self.bandpass_low < self.bandpass_high && self.bandpass_high < nyq) {
                return cfg(format!(
                    "bandpass needs 0 < low < high < fs/2, got {}..{} at fs {}",
                    self.bandpass_low, self.bandpass_high, self.target_fs
                ));
            }
            if self.fir_taps < 3 || self.fir_taps.is_multiple_of(2) {
                return cfg(format!("fir_taps must be odd and >= 3, got {}", self.fir_taps));
            }
        }
        Ok(())
    }

    /// Samples per segment, `round(T · fs)`.
    pub fn segment_len(&self) -> usize {
        (self.segment_seconds * self.target_fs).round() as usize
    }
}

/// Resamples every lead by linear interpolation.
///
/// Output length is `round(L · target_fs / fs)`. Positions past the last
/// input sample hold the last value.
pub fn resample_linear(rec: &Recording, target_fs: f64) -> Result<Recording> {
    if !(target_fs > 0.0) {
        return Err(Error::Config(format!("target_fs must be positive, got {target_fs}")));
    }
    if rec.fs() == target_fs {
        return Ok(rec.clone());
    }
    let n = rec.n_samples();
    let out_len = ((n as f64 * target_fs / rec.fs()).round() as usize).max(1);
    let mut out = Vec::with_capacity(out_len * rec.leads());
    for c in 0..rec.leads() {
        let x = rec.lead(c);
        for i in 0..out_len {
            let pos = i as f64 * rec.fs() / target_fs;
            let j = pos.floor() as usize;
            let v = if j + 1 >= n {
                x[n - 1] as f64
            } else {
                let frac = pos - j as f64;
                x[j] as f64 * (1.0 - frac) + x[j + 1] as f64 * frac
            };
            out.push(v as f32);
        }
    }
    rec.with_signal(target_fs, out)
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Hamming-windowed sinc lowpass normalised to unit DC gain.
fn lowpass(taps: usize, cutoff: f64, fs: f64) -> Vec<f64> {
    let fc = cutoff / fs;
    let mid = (taps - 1) as f64 / 2.0;
    let win = hamming(taps);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            };
            sinc * win[i]
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Linear-phase bandpass taps: the difference of two unit-DC lowpasses at
/// the band edges, so the DC gain is exactly zero.
pub fn design_bandpass(low: f64, high: f64, fs: f64, taps: usize) -> Vec<f64> {
    let hi = lowpass(taps, high, fs);
    let lo = lowpass(taps, low, fs);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

fn causal_fir(h: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let mut s = 0.0;
            for (k, &hk) in h.iter().enumerate().take(n + 1) {
                s += hk * x[n - k];
            }
            s
        })
        .collect()
}

/// Forward-backward FIR application with reflect padding of `taps − 1`
/// samples per side; output has the input's length and zero phase.
pub fn filtfilt(h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let pad = h.len() - 1;
    let n = x.len();
    if n < h.len() {
        return Err(Error::InputTooShort {
            op: "fir_bandpass",
            len: n,
            kernel: h.len(),
        });
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| x[n - 1 - i]));
    let mut y = causal_fir(h, &ext);
    y.reverse();
    let mut y = causal_fir(h, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Zero-phase bandpass of every lead with the configured FIR.
pub fn fir_bandpass(rec: &Recording, cfg: &PipelineConfig) -> Result<Recording> {
    cfg.validate()?;
    if rec.n_samples() < cfg.fir_taps {
        return Err(Error::InputTooShort {
            op: "fir_bandpass",
            len: rec.n_samples(),
            kernel: cfg.fir_taps,
        });
    }
    let h = design_bandpass(cfg.bandpass_low, cfg.bandpass_high, rec.fs(), cfg.fir_taps);
    let mut out = Vec::with_capacity(rec.signal().len());
    for c in 0..rec.leads() {
        let x: Vec<f64> = rec.lead(c).iter().map(|&v| v as f64).collect();
        out.extend(filtfilt(&h, &x)?.into_iter().map(|v| v as f32));
    }
    rec.with_signal(rec.fs(), out)
}

const STD_FLOOR: f64 = 1e-8;

/// Per-lead z-score with population standard deviation. Leads whose std
/// falls below 1e-8 become all zeros.
pub fn zscore_normalize(rec: &Recording) -> Result<Recording> {
    let mut out = Vec::with_capacity(rec.signal().len());
    for c in 0..rec.leads() {
        let x = rec.lead(c);
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < STD_FLOOR {
            out.extend(std::iter::repeat_n(0.0f32, x.len()));
        } else {
            out.extend(x.iter().map(|&v| ((v as f64 - mean) / std) as f32));
        }
    }
    rec.with_signal(rec.fs(), out)
}

/// Window `[start, start + len)` of every lead, zero-padded at the end
/// where the recording runs out.
pub fn crop_at(rec: &Recording, start: usize, len: usize) -> Result<Recording> {
    let n = rec.n_samples();
    let mut out = vec![0.0f32; rec.leads() * len];
    for c in 0..rec.leads() {
        let x = rec.lead(c);
        let avail = n.saturating_sub(start).min(len);
        out[c * len..c * len + avail].copy_from_slice(&x[start.min(n)..start.min(n) + avail]);
    }
    rec.with_signal(rec.fs(), out)
}

/// Fixed-length segment of `round(T · fs)` samples: a uniformly random
/// window when the recording is longer, zero padding at the end when shorter.
pub fn crop_or_pad(rec: &Recording, seconds: f64, rng: &mut Rng) -> Result<Recording> {
    if !(seconds > 0.0) {
        return Err(Error::Config(format!("segment length must be positive, got {seconds}")));
    }
    let len = (seconds * rec.fs()).round() as usize;
    let n = rec.n_samples();
    let start = if n > len { rng.random_range(0..=n - len) } else { 0 };
    crop_at(rec, start, len)
}

/// Start offsets of the `ceil(L / W)` evenly spaced evaluation windows.
pub fn eval_crop_starts(n: usize, window: usize) -> Vec<usize> {
    let k = n.div_ceil(window).max(1);
    if k == 1 || n <= window {
        return vec![0];
    }
    let span = (n - window) as f64;
    (0..k)
        .map(|j| (j as f64 * span / (k - 1) as f64).round() as usize)
        .collect()
}

/// Resample, optionally bandpass, optionally normalise.
pub fn preprocess(rec: &Recording, cfg: &PipelineConfig) -> Result<Recording> {
    cfg.validate()?;
    let mut r = resample_linear(rec, cfg.target_fs)?;
    if cfg.filter {
        r = fir_bandpass(&r, cfg)?;
    }
    if cfg.normalize {
        r = zscore_normalize(&r)?;
    }
    Ok(r)
}
