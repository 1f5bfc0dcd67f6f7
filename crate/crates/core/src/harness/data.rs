//! In-memory preprocessed datasets and batch assembly.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::signal::{crop_at, crop_or_pad, eval_crop_starts, load_recording, preprocess, DatasetManifest, PipelineConfig, Recording};
use crate::tensor::{Scalar, Tensor};

/// One preprocessed recording with its targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub rec: Recording,
    pub features: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub leads: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads and preprocesses every manifest entry.
    pub fn load(manifest: &DatasetManifest, pipeline: &PipelineConfig) -> Result<Self> {
        manifest.validate()?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let mut rec = load_recording(&manifest.resolve(e))?;
                rec.labels = e.labels.clone();
                Ok(Sample { rec: preprocess(&rec, pipeline)?, features: e.features.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_samples(manifest.class_names.clone(), samples)
    }

    /// Preprocesses in-memory recordings.
    pub fn from_recordings(class_names: Vec<String>, recs: &[Recording], pipeline: &PipelineConfig) -> Result<Self> {
        let samples = recs
            .iter()
            .map(|r| Ok(Sample { rec: preprocess(r, pipeline)?, features: None }))
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_samples(class_names, samples)
    }

    /// Wraps already preprocessed recordings.
    pub fn from_samples(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let leads = samples.first().map_or(0, |s| s.rec.leads());
        for s in &samples {
            if s.rec.leads() != leads {
                return Err(Error::Data(format!(
                    "{}: {} leads, expected {leads}",
                    s.rec.id,
                    s.rec.leads()
                )));
            }
            if let Some(&k) = s.rec.labels.iter().find(|&&k| k >= class_names.len()) {
                return Err(Error::Data(format!("{}: label {k} out of range", s.rec.id)));
            }
        }
        Ok(Dataset { class_names, leads, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.rec.labels.clone()).collect()
    }

    /// Width of the auxiliary feature vectors, 0 when absent.
    pub fn feature_dim(&self) -> Result<usize> {
        let dims: Vec<usize> = self.samples.iter().map(|s| s.features.as_ref().map_or(0, Vec::len)).collect();
        match dims.first() {
            Some(&d) if dims.iter().all(|&x| x == d) => Ok(d),
            Some(_) => Err(Error::Data("recordings disagree on auxiliary feature width".into())),
            None => Ok(0),
        }
    }
}

/// Random training crop of `seconds` from one sample.
pub fn train_crop(s: &Sample, seconds: f64, rng: &mut Rng) -> Result<Recording> {
    crop_or_pad(&s.rec, seconds, rng)
}

/// The evenly spaced evaluation windows of one sample.
pub fn eval_crops(s: &Sample, len: usize) -> Result<Vec<Recording>> {
    eval_crop_starts(s.rec.n_samples(), len)
        .into_iter()
        .map(|start| crop_at(&s.rec, start, len))
        .collect()
}

/// Stacks equal-shape crops into `[B, C, L]`.
pub fn stack<T: Scalar>(crops: &[&Recording]) -> Result<Tensor<T>> {
    let first = crops.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (c, l) = (first.leads(), first.n_samples());
    let mut data = Vec::with_capacity(crops.len() * c * l);
    for r in crops {
        if r.leads() != c || r.n_samples() != l {
            return Err(Error::Contract("crops in a batch differ in shape".into()));
        }
        data.extend(r.signal().iter().map(|&v| T::c(v as f64)));
    }
    Tensor::new(vec![crops.len(), c, l], data)
}

/// Multi-hot targets `[B, N]`.
pub fn targets(label_sets: &[&[usize]], n: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; label_sets.len() * n];
    for (b, set) in label_sets.iter().enumerate() {
        for &k in *set {
            if k >= n {
                return Err(Error::Data(format!("label {k} out of range for {n} classes")));
            }
            data[b * n + k] = 1.0;
        }
    }
    Tensor::new(vec![label_sets.len(), n], data)
}

/// Auxiliary features `[B, F]`, or `None` when `f` is 0.
pub fn features<T: Scalar>(rows: &[Option<&Vec<f64>>], f: usize) -> Result<Option<Tensor<T>>> {
    if f == 0 {
        return Ok(None);
    }
    let mut data = Vec::with_capacity(rows.len() * f);
    for r in rows {
        match r {
            Some(v) if v.len() == f => data.extend(v.iter().map(|&x| T::c(x))),
            _ => return Err(Error::Data(format!("every recording needs {f} auxiliary features"))),
        }
    }
    Tensor::new(vec![rows.len(), f], data).map(Some)
}
