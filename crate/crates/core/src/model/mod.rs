//! The full classifier: depthwise encoder, three-stage CLS transformer and
//! a gated or pooled head.

mod encoder;
mod head;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};

pub use encoder::{encode, project_per_lead, EncoderConfig};
pub use head::{gated_attention, gated_logits, lead_attribution, pooled_head, HeadConfig, HeadKind, LeadAttribution};
pub use params::{Bound, Init, Params};
pub use transformer::{
    initial_cls, msa_differential, msa_standard, run_three_stages, transformer_block, transformer_stage,
    AttentionKind, AttentionRecord, Positional, StageConfig, StageOutput,
};

use crate::autodiff::{ScalarGraph, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Samples per input segment; sizes the positional tables.
    pub input_len: usize,
    pub n_classes: usize,
    pub encoder: EncoderConfig,
    pub stages: StageConfig,
    pub head: HeadConfig,
    /// Width of the optional per-recording auxiliary feature vector, mapped
    /// linearly onto every class logit. Zero disables it.
    pub wide_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 7500,
            n_classes: 2,
            encoder: EncoderConfig::default(),
            stages: StageConfig::default(),
            head: HeadConfig::default(),
            wide_features: 0,
        }
    }
}

impl ModelConfig {
    pub fn leads(&self) -> usize {
        self.encoder.leads
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.stages.validate()?;
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        self.encoder.tap_lengths(self.input_len)?;
        Ok(())
    }

    /// Seeded initial parameters.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<Params<T>> {
        self.validate()?;
        let init = Init::new(seed);
        let mut p = Params::new();
        let d = self.stages.dim;
        self.encoder.init(d, &init, &mut p);
        self.stages.init(self.encoder.tap_lengths(self.input_len)?, self.leads(), &init, &mut p);
        self.head.init(d, self.n_classes, self.leads(), &init, &mut p);
        if self.wide_features > 0 {
            let f = self.wide_features;
            p.insert("head.wide", init.fan_in("head.wide", &[f, self.n_classes], f));
        }
        Ok(p)
    }
}

/// Parameters with identically zero gradient: biases added uniformly along
/// a softmax axis (attention key biases, the gate projection bias).
/// Finite-difference checks on them only compare rounding noise.
pub fn is_shift_invariant(name: &str) -> bool {
    name.ends_with("attn.bk") || name == "head.bp"
}

/// Mean binary cross-entropy of the model as a function of a chosen subset
/// of its parameters; every other parameter and the input are constants.
pub struct ModelLoss {
    pub cfg: ModelConfig,
    pub params: Params<f64>,
    /// Names of the parameters exposed as graph inputs, in input order.
    pub checked: Vec<String>,
    pub x: Tensor<f64>,
    pub targets: Tensor<f64>,
}

impl ModelLoss {
    /// Current values of the checked parameters.
    pub fn inputs(&self) -> Result<Vec<Tensor<f64>>> {
        self.checked.iter().map(|n| self.params.get(n).cloned()).collect()
    }
}

impl ScalarGraph for ModelLoss {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let pairs: Vec<(String, Var)> = self.checked.iter().cloned().zip(inputs.iter().copied()).collect();
        let p = self.params.cast::<T>().bind_with(tape, &pairs);
        let x = tape.constant(self.x.cast());
        let out = forward(tape, &p, &self.cfg, x, None, false)?;
        tape.bce_with_logits(out.logits, &self.targets.cast())
    }
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// `[B, N]`.
    pub logits: Var,
    /// Final per-lead CLS, `[B, C, D]`.
    pub final_cls: Var,
    /// Gated head's lead weights `[B, N, C]`; `None` for the pooled head.
    pub lead_weights: Option<Var>,
    pub attention: Option<AttentionRecord>,
}

/// Runs the model on `x: [B, C, L]` with optional features `[B, F]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    features: Option<Var>,
    record: bool,
) -> Result<Forward> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 3 || sx[1] != cfg.leads() {
        return Err(Error::dim("forward", &sx, &[0, cfg.leads(), cfg.input_len]));
    }
    let batch = sx[0];
    let taps = encode(tape, p, &cfg.encoder, x)?;
    let mut projected = taps;
    for (s, &t) in taps.iter().enumerate() {
        projected[s] = project_per_lead(tape, p, &cfg.encoder, s + 1, t)?;
    }
    let (final_cls, attention) = run_three_stages(tape, p, &cfg.stages, projected, batch, cfg.leads(), record)?;
    let (mut logits, lead_weights) = match cfg.head.kind {
        HeadKind::Gated => {
            let a = gated_attention(tape, p, final_cls)?;
            let (l, w) = gated_logits(tape, p, final_cls, a)?;
            (l, Some(w))
        }
        HeadKind::Pooled => (pooled_head(tape, p, final_cls)?, None),
    };
    match (cfg.wide_features, features) {
        (0, None) => {}
        (f, Some(fv)) if f > 0 && tape.shape(fv) == [batch, f] => {
            let w = tape.matmul(fv, p.get("head.wide")?)?;
            logits = tape.add(logits, w)?;
        }
        (f, fv) => {
            return Err(Error::Contract(format!(
                "model expects {f} auxiliary features, got {:?}",
                fv.map(|v| tape.shape(v).to_vec())
            )))
        }
    }
    Ok(Forward {
        logits,
        final_cls,
        lead_weights,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};

    use super::*;
    use crate::autodiff::gradient_error;
    use crate::rng::Rng;

    fn small(kind: HeadKind, attention: AttentionKind, wide: usize) -> ModelConfig {
        ModelConfig {
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
                attention,
                ..Default::default()
            },
            head: HeadConfig { kind, per_lead_gating: false },
            wide_features: wide,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(cfg: &ModelConfig, p: &Params<f64>, x: &Tensor<f64>, f: Option<&Tensor<f64>>) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let fv = f.map(|f| tape.constant(f.clone()));
        let out = forward(&mut tape, &b, cfg, xv, fv, false)?;
        Ok((tape.value(out.logits).clone(), out.lead_weights.map(|w| tape.value(w).clone())))
    }

    #[test]
    fn forward_shapes_for_every_variant() {
        for kind in [HeadKind::Gated, HeadKind::Pooled] {
            for att in [AttentionKind::Standard, AttentionKind::Differential] {
                let cfg = small(kind, att, 0);
                let p = cfg.init_params::<f64>(1).unwrap();
                let (l, w) = run(&cfg, &p, &rand_tensor(&[2, 4, 120], 2), None).unwrap();
                assert_eq!(l.shape(), &[2, 3]);
                assert!(l.all_finite());
                assert_eq!(w.is_some(), kind == HeadKind::Gated);
            }
        }
    }

    #[test]
    fn wide_features_add_a_linear_term() {
        let cfg = small(HeadKind::Gated, AttentionKind::Standard, 2);
        let p = cfg.init_params::<f64>(3).unwrap();
        let x = rand_tensor(&[2, 4, 120], 4);
        let f0 = Tensor::zeros(&[2, 2]);
        let f1 = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let (l0, _) = run(&cfg, &p, &x, Some(&f0)).unwrap();
        let (l1, _) = run(&cfg, &p, &x, Some(&f1)).unwrap();
        let w = p.get("head.wide").unwrap().data();
        for b in 0..2 {
            for i in 0..3 {
                let d = l1.data()[b * 3 + i] - l0.data()[b * 3 + i];
                assert!((d - w[b * 3 + i]).abs() < 1e-12);
            }
        }
        assert!(run(&cfg, &p, &x, None).is_err());
    }

    #[test]
    fn wrong_lead_count_is_rejected() {
        let cfg = small(HeadKind::Pooled, AttentionKind::Standard, 0);
        let p = cfg.init_params::<f64>(1).unwrap();
        assert!(matches!(run(&cfg, &p, &rand_tensor(&[1, 3, 120], 0), None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn logits_are_invariant_to_lead_order_except_through_the_encoder() {
        // Permuting leads together with their encoder groups leaves logits
        // unchanged; permuting inputs alone generally does not.
        let cfg = small(HeadKind::Gated, AttentionKind::Differential, 0);
        let p = cfg.init_params::<f64>(5).unwrap();
        let x = rand_tensor(&[1, 4, 120], 6);
        let perm = [2, 0, 3, 1];
        let mut xp = Vec::new();
        for &src in &perm {
            xp.extend_from_slice(&x.data()[src * 120..(src + 1) * 120]);
        }
        let xp = Tensor::new(vec![1, 4, 120], xp).unwrap();
        let mut pp = p.clone();
        for l in 1..=4 {
            for suffix in ["w", "b"] {
                let name = format!("enc.{l}.{suffix}");
                let t = p.get(&name).unwrap();
                let per = t.len() / 4;
                let mut d = Vec::with_capacity(t.len());
                for &src in &perm {
                    d.extend_from_slice(&t.data()[src * per..(src + 1) * per]);
                }
                pp.insert(name, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
        }
        let (l0, w0) = run(&cfg, &p, &x, None).unwrap();
        let (l1, w1) = run(&cfg, &pp, &xp, None).unwrap();
        assert!(l0.max_abs_diff(&l1) < 1e-12);
        let (w0, w1) = (w0.unwrap(), w1.unwrap());
        for i in 0..3 {
            for (j, &src) in perm.iter().enumerate() {
                assert!((w1.data()[i * 4 + j] - w0.data()[i * 4 + src]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        for att in [AttentionKind::Standard, AttentionKind::Differential] {
            let cfg = small(HeadKind::Gated, att, 0);
            let params = cfg.init_params::<f64>(7).unwrap();
            let checked: Vec<String> = params.names().filter(|n| !is_shift_invariant(n)).cloned().collect();
            let graph = ModelLoss {
                cfg,
                params,
                checked,
                x: rand_tensor(&[2, 4, 120], 8),
                targets: Tensor::from_f64(&[2, 3], &[1., 0., 1., 0., 1., 1.]).unwrap(),
            };
            let err = gradient_error::<f64, _>(&graph, &graph.inputs().unwrap(), 1e-5, Some(3), 2).unwrap();
            assert!(err < 1e-4, "{att:?}: {err}");
        }
    }

    #[test]
    fn shift_invariant_parameters_get_no_gradient() {
        let cfg = small(HeadKind::Gated, AttentionKind::Differential, 0);
        let params = cfg.init_params::<f64>(7).unwrap();
        let checked: Vec<String> = params.names().filter(|n| is_shift_invariant(n)).cloned().collect();
        assert_eq!(checked.len(), 4);
        let graph = ModelLoss {
            cfg,
            params,
            checked,
            x: rand_tensor(&[2, 4, 120], 8),
            targets: Tensor::from_f64(&[2, 3], &[1., 0., 1., 0., 1., 1.]).unwrap(),
        };
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = graph.inputs().unwrap().into_iter().map(|t| tape.param(t)).collect();
        let loss = graph.build(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();
        for v in vars {
            assert!(tape.grad_tensor(v).data().iter().all(|g| g.abs() < 1e-12));
        }
    }
}
