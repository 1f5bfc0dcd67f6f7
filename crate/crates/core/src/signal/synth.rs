//! Synthetic multi-lead ECG built from five Gaussian waves per beat.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::manifest::{DatasetManifest, ManifestEntry};
use super::recording::{write_recording, Recording};

/// One Gaussian wave: centre offset from the R peak (s), amplitude (mV)
/// and width (s, standard deviation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub offset: f64,
    pub amplitude: f64,
    pub width: f64,
}

/// Baseline P, Q, R, S, T waves.
pub const BASE_WAVES: [Wave; 5] = [
    Wave { offset: -0.20, amplitude: 0.15, width: 0.025 },
    Wave { offset: -0.05, amplitude: -0.10, width: 0.010 },
    Wave { offset: 0.0, amplitude: 1.0, width: 0.012 },
    Wave { offset: 0.05, amplitude: -0.25, width: 0.012 },
    Wave { offset: 0.30, amplitude: 0.30, width: 0.050 },
];

pub const T_WAVE: usize = 4;
pub const R_WAVE: usize = 2;

/// Per-class multipliers on the P, Q, R, S, T amplitudes and widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMorphology {
    pub name: String,
    #[serde(default = "ones")]
    pub amplitude: [f64; 5],
    #[serde(default = "ones")]
    pub width: [f64; 5],
}

fn ones() -> [f64; 5] {
    [1.0; 5]
}

impl ClassMorphology {
    pub fn baseline(name: impl Into<String>) -> Self {
        ClassMorphology {
            name: name.into(),
            amplitude: ones(),
            width: ones(),
        }
    }

    /// Tall, narrow T wave.
    pub fn peaked_t(name: impl Into<String>, amp: f64, width: f64) -> Self {
        let mut m = Self::baseline(name);
        m.amplitude[T_WAVE] = amp;
        m.width[T_WAVE] = width;
        m
    }

    pub fn waves(&self) -> [Wave; 5] {
        let mut w = BASE_WAVES;
        for (i, wave) in w.iter_mut().enumerate() {
            wave.amplitude *= self.amplitude[i];
            wave.width *= self.width[i];
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_recordings: usize,
    pub leads: usize,
    pub duration_seconds: f64,
    pub fs: f64,
    pub heart_rate_bpm: (f64, f64),
    pub noise_std: f64,
    /// Per-lead gain drawn uniformly from this range, once per recording.
    pub lead_gain: (f64, f64),
    /// Recording `i` gets class `i % classes.len()`.
    pub classes: Vec<ClassMorphology>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_recordings: 100,
            leads: 12,
            duration_seconds: 10.0,
            fs: 500.0,
            heart_rate_bpm: (50.0, 100.0),
            noise_std: 0.02,
            lead_gain: (0.6, 1.4),
            classes: vec![
                ClassMorphology::baseline("normal"),
                ClassMorphology::peaked_t("high_potassium", 2.0, 0.6),
            ],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.leads == 0 {
            return bad("synthetic spec needs at least one lead".into());
        }
        if !(self.fs > 0.0) || !(self.duration_seconds > 0.0) {
            return bad(format!(
                "fs and duration must be positive, got {} Hz and {} s",
                self.fs, self.duration_seconds
            ));
        }
        let (lo, hi) = self.heart_rate_bpm;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("heart-rate range must satisfy 0 < min <= max, got {lo}..{hi}"));
        }
        let (glo, ghi) = self.lead_gain;
        if !(glo > 0.0 && glo <= ghi) {
            return bad(format!("lead-gain range must satisfy 0 < min <= max, got {glo}..{ghi}"));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise std must be non-negative, got {}", self.noise_std));
        }
        if self.classes.is_empty() {
            return bad("synthetic spec needs at least one class".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

fn sample_uniform(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Noise-free, unit-gain beat train for one class.
fn beat_train(waves: &[Wave; 5], fs: f64, n: usize, rr: f64, first_r: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let n_beats = (n as f64 / (rr * fs)).ceil() as i64 + 2;
    for beat in -1..=n_beats {
        let r = first_r as f64 / fs + beat as f64 * rr;
        for w in waves {
            let centre = r + w.offset;
            let reach = 6.0 * w.width;
            let lo = (((centre - reach) * fs).floor().max(0.0)) as usize;
            let hi = (((centre + reach) * fs).ceil().max(0.0) as usize).min(n);
            for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
                let d = i as f64 / fs - centre;
                *v += w.amplitude * (-0.5 * (d / w.width).powi(2)).exp();
            }
        }
    }
    x
}

/// Generates `spec.n_recordings` labelled recordings, deterministic per seed.
///
/// Each recording draws a heart rate, a first R-peak phase within the first
/// RR interval (snapped to the sample grid), per-lead gains and white noise
/// from its own stream.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let n = (spec.duration_seconds * spec.fs).round().max(1.0) as usize;
    (0..spec.n_recordings)
        .map(|i| {
            let mut rng = rng::stream(spec.seed, &[i as u64]);
            let class = i % spec.classes.len();
            let hr = sample_uniform(&mut rng, spec.heart_rate_bpm);
            let rr = 60.0 / hr;
            let phase = rng.random_range(0.25..=0.75) * rr;
            let first_r = (phase * spec.fs).round() as usize;
            let beats = beat_train(&spec.classes[class].waves(), spec.fs, n, rr, first_r);
            let mut signal = Vec::with_capacity(spec.leads * n);
            for _ in 0..spec.leads {
                let gain = sample_uniform(&mut rng, spec.lead_gain);
                for &b in &beats {
                    let noise = if spec.noise_std > 0.0 {
                        spec.noise_std * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    signal.push((gain * b + noise) as f32);
                }
            }
            let mut rec = Recording::new(format!("synth_{i:05}"), spec.fs, spec.leads, signal, vec![class])?;
            rec.source_meta.insert("heart_rate_bpm".into(), format!("{hr:.3}"));
            rec.source_meta.insert("class".into(), spec.classes[class].name.clone());
            Ok(rec)
        })
        .collect()
}

/// Writes every recording under `dir` and returns a manifest whose paths
/// are relative to `dir`.
pub fn write_dataset(recs: &[Recording], class_names: Vec<String>, dir: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(recs.len());
    for rec in recs {
        let path = write_recording(rec, dir)?;
        let rel = path.strip_prefix(dir).unwrap_or(&path).to_path_buf();
        entries.push(ManifestEntry {
            path: rel,
            labels: rec.labels.clone(),
            fold: None,
            features: None,
        });
    }
    DatasetManifest::new(entries, class_names, dir.to_path_buf())
}
