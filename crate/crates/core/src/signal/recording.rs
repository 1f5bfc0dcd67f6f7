//! Multi-lead recordings and their on-disk container.
//!
//! A recording is stored as two adjacent files sharing a stem:
//! `<stem>.json` holds the header
//! `{id, fs, leads, n_samples, labels, dtype: "f32le"}` and `<stem>.bin`
//! holds the samples as little-endian IEEE-754 `f32`, lead-major (all of
//! lead 0, then all of lead 1, ...).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAYLOAD_DTYPE: &str = "f32le";

/// One multi-lead ECG. Samples are in millivolts, lead-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    fs: f64,
    leads: usize,
    n_samples: usize,
    signal: Vec<f32>,
    pub labels: Vec<usize>,
    pub source_meta: BTreeMap<String, String>,
}

impl Recording {
    /// Builds a recording from a lead-major sample vector.
    pub fn new(id: impl Into<String>, fs: f64, leads: usize, signal: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if leads == 0 || signal.is_empty() || !signal.len().is_multiple_of(leads) {
            return Err(Error::Data(format!(
                "{} samples cannot form {leads} non-empty leads",
                signal.len()
            )));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::Data(format!("sampling rate must be positive, got {fs}")));
        }
        if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at flat index {i}")));
        }
        let mut labels = labels;
        labels.sort_unstable();
        labels.dedup();
        Ok(Recording {
            id: id.into(),
            fs,
            leads,
            n_samples: signal.len() / leads,
            signal,
            labels,
            source_meta: BTreeMap::new(),
        })
    }

    /// Same metadata, new samples (possibly a different length or rate).
    pub(crate) fn with_signal(&self, fs: f64, signal: Vec<f32>) -> Result<Self> {
        let mut rec = Recording::new(self.id.clone(), fs, self.leads, signal, self.labels.clone())?;
        rec.source_meta = self.source_meta.clone();
        Ok(rec)
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn leads(&self) -> usize {
        self.leads
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_samples as f64 / self.fs
    }

    pub fn signal(&self) -> &[f32] {
        &self.signal
    }

    pub fn lead(&self, c: usize) -> &[f32] {
        &self.signal[c * self.n_samples..(c + 1) * self.n_samples]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    id: String,
    fs: f64,
    leads: usize,
    n_samples: usize,
    labels: Vec<usize>,
    dtype: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

/// Payload path belonging to a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Writes `<dir>/<id>.json` and `<dir>/<id>.bin`, returning the header path.
pub fn write_recording(rec: &Recording, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header_path = dir.join(format!("{}.json", rec.id));
    let header = Header {
        id: rec.id.clone(),
        fs: rec.fs,
        leads: rec.leads,
        n_samples: rec.n_samples,
        labels: rec.labels.clone(),
        dtype: PAYLOAD_DTYPE.into(),
        meta: rec.source_meta.clone(),
    };
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;
    let mut bytes = Vec::with_capacity(rec.signal.len() * 4);
    for v in &rec.signal {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let payload = payload_path(&header_path);
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    Ok(header_path)
}

fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if header.dtype != PAYLOAD_DTYPE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    Ok(header)
}

/// Reads only the header's recording id.
pub fn read_recording_id(path: &Path) -> Result<String> {
    Ok(read_header(path)?.id)
}

/// Loads a recording from its header path.
pub fn load_recording(path: &Path) -> Result<Recording> {
    let header = read_header(path)?;
    let payload = payload_path(path);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = header.leads * header.n_samples;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::format(
            &payload,
            format!(
                "header declares {} leads x {} samples = {expected} values, payload holds {} bytes",
                header.leads,
                header.n_samples,
                bytes.len()
            ),
        ));
    }
    let signal: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut rec = Recording::new(header.id, header.fs, header.leads, signal, header.labels)
        .map_err(|e| Error::format(path, e.to_string()))?;
    rec.source_meta = header.meta;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(leads: usize, n: usize) -> Recording {
        let sig = (0..leads * n).map(|i| i as f32 * 0.001).collect();
        Recording::new("r1", 500.0, leads, sig, vec![1]).unwrap()
    }

    #[test]
    fn round_trip_12_lead() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ramp(12, 5000);
        let path = write_recording(&rec, dir.path()).unwrap();
        let back = load_recording(&path).unwrap();
        assert_eq!(back.leads(), 12);
        assert_eq!(back.n_samples(), 5000);
        assert_eq!(back, rec);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ramp(1, 5000);
        let path = write_recording(&rec, dir.path()).unwrap();
        let payload = payload_path(&path);
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
        match load_recording(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("5000"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_bad_samples() {
        assert!(matches!(
            load_recording(Path::new("/nonexistent/x.json")),
            Err(Error::Io { .. })
        ));
        assert!(Recording::new("x", 500.0, 1, vec![0.0, f32::NAN], vec![]).is_err());
        assert!(Recording::new("x", 0.0, 1, vec![0.0], vec![]).is_err());
        assert!(Recording::new("x", 500.0, 2, vec![0.0; 3], vec![]).is_err());
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_recording(&ramp(1, 4), dir.path()).unwrap();
        let mut bytes = Vec::new();
        for v in [0.0f32, f32::INFINITY, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(payload_path(&path), bytes).unwrap();
        assert!(matches!(load_recording(&path), Err(Error::Format { .. })));
    }
}
