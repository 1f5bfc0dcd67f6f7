//! Mini-batch training with per-epoch deterministic random streams.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, DEFAULT_THRESHOLD};
use crate::model::{forward, Params};
use crate::rng;
use crate::tensor::{DType, Scalar, Tensor};

use super::checkpoint::{Checkpoint, RngState, Trained, Weights};
use super::config::{LossKind, TrainConfig};
use super::data::{features, stack, targets, train_crop, Dataset};
use super::evaluate::predict_logits;
use super::optim::Optimizer;

const SHUFFLE_STREAM: u64 = 1;
const CROP_STREAM: u64 = 2;

/// One JSON-lines record per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub loss: f64,
    pub macro_auc: Option<f64>,
    pub macro_fbeta: f64,
    pub macro_gbeta: f64,
    pub challenge_normalized: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serialises")
    }
}

/// Mean BCE-with-logits over every (sample, class) pair.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, kind: LossKind, logits: crate::autodiff::Var, targets: &Tensor<f64>) -> Result<crate::autodiff::Var> {
    match kind {
        LossKind::BceWithLogits => tape.bce_with_logits(logits, &targets.cast()),
    }
}

/// Freshly initialised checkpoint at epoch 0.
pub fn init_checkpoint(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.model.n_classes != data.n_classes() {
        return Err(Error::Config(format!(
            "model.n_classes is {} but the dataset has {} classes",
            cfg.model.n_classes,
            data.n_classes()
        )));
    }
    if cfg.model.leads() != data.leads {
        return Err(Error::Config(format!(
            "model expects {} leads but the recordings have {}",
            cfg.model.leads(),
            data.leads
        )));
    }
    let fdim = data.feature_dim()?;
    if cfg.model.wide_features > 0 && cfg.model.wide_features != fdim {
        return Err(Error::Config(format!(
            "model.wide_features is {} but the manifest supplies {fdim} features",
            cfg.model.wide_features
        )));
    }
    let weights = match cfg.precision {
        DType::F32 => Weights::F32(Trained::init(cfg)?),
        DType::F64 => Weights::F64(Trained::init(cfg)?),
    };
    Ok(Checkpoint {
        config: cfg.clone(),
        class_names: data.class_names.clone(),
        epoch: 0,
        rng: RngState { seed: cfg.seed, next_epoch: 0 },
        weights,
    })
}

impl<T: Scalar> Trained<T> {
    fn init(cfg: &TrainConfig) -> Result<Self> {
        let params: Params<T> = cfg.model.init_params(cfg.seed)?;
        let opt = Optimizer::new(cfg.optimizer.clone(), &params);
        Ok(Trained { params, opt })
    }
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
    log: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let ckpt = init_checkpoint(cfg, data)?;
    resume(ckpt, cfg.epochs, data, validation, log)
}

/// Continues training until `until_epoch` epochs are complete.
pub fn resume(
    mut ckpt: Checkpoint,
    until_epoch: usize,
    data: &Dataset,
    validation: Option<&Dataset>,
    log: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.class_names != ckpt.class_names {
        return Err(Error::Data("dataset classes differ from the checkpoint".into()));
    }
    while ckpt.epoch < until_epoch {
        let epoch = ckpt.epoch;
        let cfg = &ckpt.config;
        let (train_loss, steps) = match &mut ckpt.weights {
            Weights::F32(t) => run_epoch(cfg, t, data, epoch)?,
            Weights::F64(t) => run_epoch(cfg, t, data, epoch)?,
        };
        let validation = match validation {
            Some(v) => Some(validate(&ckpt, v)?),
            None => None,
        };
        ckpt.epoch += 1;
        ckpt.rng.next_epoch = ckpt.epoch;
        log(&EpochLog { epoch: ckpt.epoch, train_loss, steps, validation })?;
    }
    Ok(ckpt)
}

fn run_epoch<T: Scalar>(cfg: &TrainConfig, state: &mut Trained<T>, data: &Dataset, epoch: usize) -> Result<(f64, usize)> {
    let e = epoch as u64;
    let mut order: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|i| (0..cfg.crops_per_recording).map(move |k| (i, k)))
        .collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE_STREAM, e]));
    let n = data.n_classes();
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let crops = chunk
            .iter()
            .map(|&(i, k)| {
                let mut r = rng::stream(cfg.seed, &[CROP_STREAM, e, i as u64, k as u64]);
                train_crop(&data.samples[i], cfg.pipeline.segment_seconds, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = crops.iter().collect();
        let x = stack::<T>(&refs)?;
        let labels: Vec<&[usize]> = chunk.iter().map(|&(i, _)| data.samples[i].rec.labels.as_slice()).collect();
        let y = targets(&labels, n)?;
        let rows: Vec<_> = chunk.iter().map(|&(i, _)| data.samples[i].features.as_ref()).collect();
        let f = features::<T>(&rows, cfg.model.wide_features)?;

        let mut tape = Tape::<T>::new();
        let bound = state.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let fv = f.map(|f| tape.constant(f));
        let out = forward(&mut tape, &bound, &cfg.model, xv, fv, false)?;
        let l = loss(&mut tape, cfg.loss, out.logits, &y)?;
        let lv = tape.value(l).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at epoch {} step {steps}", epoch + 1)));
        }
        tape.backward(l)?;
        let mut grads = Params::new();
        for (name, &v) in bound.iter() {
            grads.insert(name.clone(), tape.grad_tensor(v));
        }
        state.opt.update(&mut state.params, &grads)?;
        if state.params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Numerical(format!("non-finite parameter at epoch {} step {steps}", epoch + 1)));
        }
        total += lv * chunk.len() as f64;
        steps += 1;
    }
    Ok((total / order.len() as f64, steps))
}

fn validate(ckpt: &Checkpoint, v: &Dataset) -> Result<ValidationLog> {
    if v.is_empty() {
        return Err(Error::Data("validation fold is empty".into()));
    }
    let logits = match &ckpt.weights {
        Weights::F32(t) => predict_logits(&t.params, &ckpt.config, v)?,
        Weights::F64(t) => predict_logits(&t.params, &ckpt.config, v)?,
    };
    let n = v.n_classes();
    let mut total = 0.0;
    for (row, s) in logits.iter().zip(&v.samples) {
        for (k, &z) in row.iter().enumerate() {
            let t = if s.rec.labels.contains(&k) { 1.0 } else { 0.0 };
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
    }
    let scores: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|&z| sigmoid(z)).collect()).collect();
    let report = EvalReport::compute(&scores, &v.label_sets(), &v.class_names, &vec![DEFAULT_THRESHOLD; n], None)?;
    Ok(ValidationLog {
        loss: total / (logits.len() * n) as f64,
        macro_auc: report.macro_auc,
        macro_fbeta: report.macro_fbeta,
        macro_gbeta: report.macro_gbeta,
        challenge_normalized: report.challenge.normalized,
    })
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
