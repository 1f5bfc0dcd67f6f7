//! The finite-difference gradient suite run by `gradcheck`.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_error, primitive_suite};
use crate::error::Result;
use crate::model::{is_shift_invariant, EncoderConfig, HeadConfig, ModelConfig, ModelLoss, StageConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::Variant;

/// Relative-error bound for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Relative-error bound for the whole model loss.
pub const END_TO_END_TOL: f64 = 1e-4;
/// Finite-difference step for single primitives.
pub const PRIMITIVE_STEP: f64 = 1e-4;
/// Finite-difference step for the model loss, whose higher derivatives
/// are large enough that truncation at 1e-4 exceeds the bound.
pub const END_TO_END_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCheck {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Small model used by the end-to-end check and the fast tests.
pub fn tiny_model(variant: Variant) -> ModelConfig {
    let mut m = ModelConfig {
        input_len: 120,
        n_classes: 3,
        encoder: EncoderConfig {
            leads: 4,
            kernels: [5, 3, 3, 3],
            strides: [2, 2, 2, 2],
            channels: [2, 3, 4, 4],
            ..Default::default()
        },
        stages: StageConfig {
            layers: [1, 1, 1],
            dim: 8,
            heads: 2,
            ..Default::default()
        },
        head: HeadConfig::default(),
        wide_features: 0,
    };
    variant.apply(&mut m);
    m
}

/// Worst relative error of the mean BCE loss of a random tiny model, over
/// one sampled coordinate of every parameter tensor. Parameters with an
/// identically zero gradient are skipped.
pub fn end_to_end_error(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let params = cfg.init_params::<f64>(seed)?;
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
    let (b, c, l, n) = (2, cfg.leads(), cfg.input_len, cfg.n_classes);
    let x = Tensor::new(vec![b, c, l], (0..b * c * l).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let targets = Tensor::new(vec![b, n], (0..b * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())?;
    let checked = params.names().filter(|n| !is_shift_invariant(n)).cloned().collect();
    let graph = ModelLoss { cfg: cfg.clone(), params, checked, x, targets };
    gradient_error::<f64, _>(&graph, &graph.inputs()?, END_TO_END_STEP, Some(1), seed)
}

/// Primitive sweep plus the end-to-end check, `instances` random cases each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut out: Vec<SuiteCheck> = primitive_suite::<f64>(instances, seed, PRIMITIVE_STEP)
        .into_iter()
        .map(|r| SuiteCheck {
            name: format!("primitive/{}", r.name),
            instances: r.instances,
            worst: r.worst,
            tolerance: PRIMITIVE_TOL,
            pass: r.worst < PRIMITIVE_TOL,
        })
        .collect();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut cfg = tiny_model(Variant::ALL[i % 4]);
        // Cycle the optional switches too.
        cfg.encoder.per_lead_projection = i % 3 == 1;
        cfg.stages.per_lead_cls = i % 5 == 2;
        cfg.stages.head_norm = i % 2 == 1;
        cfg.head.per_lead_gating = i % 3 == 2;
        worst = worst.max(end_to_end_error(&cfg, seed.wrapping_add(i as u64))?);
    }
    out.push(SuiteCheck {
        name: "end_to_end/tiny_model_loss".into(),
        instances,
        worst,
        tolerance: END_TO_END_TOL,
        pass: worst < END_TO_END_TOL,
    });
    Ok(out)
}
