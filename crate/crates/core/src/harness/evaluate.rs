//! Multi-crop inference and evaluation reports.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, Predictions, WeightMatrix, DEFAULT_THRESHOLD};
use crate::model::{forward, Params};
use crate::tensor::Scalar;

use super::checkpoint::{Checkpoint, Weights};
use super::config::TrainConfig;
use super::data::{eval_crops, features, stack, Dataset};
use super::train::sigmoid;

/// Per-recording logits averaged over the evenly spaced evaluation crops.
pub fn predict_logits<T: Scalar>(params: &Params<T>, cfg: &TrainConfig, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let len = cfg.pipeline.segment_len();
    let n = cfg.model.n_classes;
    let mut out = Vec::with_capacity(data.len());
    // Whole recordings are packed until a batch holds at least batch_size crops.
    let mut i = 0;
    while i < data.len() {
        let mut crops = Vec::new();
        let mut owners = Vec::new();
        while i < data.len() && (crops.is_empty() || crops.len() < cfg.batch_size) {
            for c in eval_crops(&data.samples[i], len)? {
                crops.push(c);
                owners.push(i);
            }
            i += 1;
        }
        let refs: Vec<_> = crops.iter().collect();
        let x = stack::<T>(&refs)?;
        let rows: Vec<_> = owners.iter().map(|&o| data.samples[o].features.as_ref()).collect();
        let f = features::<T>(&rows, cfg.model.wide_features)?;
        let mut tape = Tape::<T>::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let fv = f.map(|f| tape.constant(f));
        let fw = forward(&mut tape, &bound, &cfg.model, xv, fv, false)?;
        let logits = tape.value(fw.logits).data();
        let first = owners[0];
        let mut sums = vec![vec![0.0; n]; owners[owners.len() - 1] - first + 1];
        let mut counts = vec![0usize; sums.len()];
        for (r, &o) in owners.iter().enumerate() {
            for k in 0..n {
                sums[o - first][k] += logits[r * n + k].as_f64();
            }
            counts[o - first] += 1;
        }
        for (s, c) in sums.into_iter().zip(counts) {
            out.push(s.into_iter().map(|v| v / c as f64).collect());
        }
    }
    Ok(out)
}

/// Scores a checkpoint on a dataset. Sigmoid outputs are thresholded at
/// 0.5 for the set-based metrics.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, weights: Option<&WeightMatrix>) -> Result<(EvalReport, Predictions)> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if data.class_names != ckpt.class_names {
        return Err(Error::Data(format!(
            "dataset has {} classes {:?}, checkpoint was trained on {} classes {:?}",
            data.n_classes(),
            data.class_names,
            ckpt.class_names.len(),
            ckpt.class_names
        )));
    }
    let logits = match &ckpt.weights {
        Weights::F32(t) => predict_logits(&t.params, &ckpt.config, data)?,
        Weights::F64(t) => predict_logits(&t.params, &ckpt.config, data)?,
    };
    let scores: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|&z| sigmoid(z)).collect()).collect();
    let n = data.n_classes();
    let report = EvalReport::compute(&scores, &data.label_sets(), &data.class_names, &vec![DEFAULT_THRESHOLD; n], weights)?;
    let predictions = Predictions {
        class_names: data.class_names.clone(),
        ids: data.samples.iter().map(|s| s.rec.id.clone()).collect(),
        scores,
    };
    Ok((report, predictions))
}
