//! Four-layer depthwise 1-D convolutional encoder with three token taps.
//!
//! Every layer is a grouped convolution with one group per lead, so no
//! layer ever mixes leads. Tap outputs are reshaped from `[B, C·m, N]` to
//! per-lead token sequences `[B·C, N, m]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Conv1dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::params::{Bound, Init, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub leads: usize,
    pub kernels: [usize; 4],
    pub strides: [usize; 4],
    /// Output channels per lead of each layer.
    pub channels: [usize; 4],
    /// 1-based layers whose outputs feed stages 1, 2 and 3.
    pub tap_layers: [usize; 3],
    pub activation: Activation,
    /// Separate projection weights for every lead instead of one shared map.
    pub per_lead_projection: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            leads: 12,
            kernels: [15, 9, 9, 5],
            strides: [3, 2, 2, 2],
            channels: [8, 16, 16, 32],
            tap_layers: [2, 3, 4],
            activation: Activation::Gelu,
            per_lead_projection: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.leads == 0 {
            return bad("encoder needs at least one lead".into());
        }
        if self.kernels.contains(&0) || self.strides.contains(&0) || self.channels.contains(&0) {
            return bad(format!(
                "kernels, strides and channels must be positive, got {:?} {:?} {:?}",
                self.kernels, self.strides, self.channels
            ));
        }
        let t = self.tap_layers;
        if !(1 <= t[0] && t[0] < t[1] && t[1] < t[2] && t[2] <= 4) {
            return bad(format!("tap layers must be strictly increasing within 1..=4, got {t:?}"));
        }
        Ok(())
    }

    /// Output length of every layer for an input of `len` samples.
    pub fn layer_lengths(&self, len: usize) -> Result<[usize; 4]> {
        let mut out = [0; 4];
        let mut n = len;
        for l in 0..4 {
            if n < self.kernels[l] {
                return Err(Error::InputTooShort {
                    op: "encode",
                    len: n,
                    kernel: self.kernels[l],
                });
            }
            n = (n - self.kernels[l]) / self.strides[l] + 1;
            out[l] = n;
        }
        Ok(out)
    }

    /// Token counts `N_1, N_2, N_3` of the three taps; must strictly decrease.
    pub fn tap_lengths(&self, len: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let ls = self.layer_lengths(len)?;
        let n = self.tap_layers.map(|t| ls[t - 1]);
        if !(n[0] > n[1] && n[1] > n[2]) {
            return Err(Error::Config(format!(
                "tap token counts must strictly decrease, got {n:?} for input length {len}"
            )));
        }
        Ok(n)
    }

    /// Channels per lead at each tap.
    pub fn tap_channels(&self) -> [usize; 3] {
        self.tap_layers.map(|t| self.channels[t - 1])
    }

    pub fn init<T: Scalar>(&self, d_model: usize, init: &Init, params: &mut Params<T>) {
        let c = self.leads;
        let mut cin = 1;
        for l in 0..4 {
            let (k, m) = (self.kernels[l], self.channels[l]);
            let name = format!("enc.{}.w", l + 1);
            params.insert(&name, init.fan_in(&name, &[c * m, cin, k], cin * k));
            params.insert(format!("enc.{}.b", l + 1), crate::Tensor::zeros(&[c * m]));
            cin = m;
        }
        for (s, m) in self.tap_channels().into_iter().enumerate() {
            let name = format!("proj.{}.w", s + 1);
            let shape = if self.per_lead_projection {
                vec![c, m, d_model]
            } else {
                vec![m, d_model]
            };
            params.insert(&name, init.fan_in(&name, &shape, m));
            params.insert(format!("proj.{}.b", s + 1), crate::Tensor::zeros(&[d_model]));
        }
    }
}

/// Runs the four convolutions on `x: [B, C, L]` and returns the three tap
/// token maps, each `[B·C, N_s, m_s]`, in stage order.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &EncoderConfig, x: Var) -> Result<[Var; 3]> {
    cfg.validate()?;
    let sx = tape.shape(x).to_vec();
    if sx.len() != 3 || sx[1] != cfg.leads {
        return Err(Error::dim("encode", &sx, &[0, cfg.leads, 0]));
    }
    cfg.tap_lengths(sx[2])?;
    let b = sx[0];
    let c = cfg.leads;
    let mut h = x;
    let mut outs = Vec::with_capacity(4);
    for l in 0..4 {
        let spec = Conv1dSpec {
            stride: cfg.strides[l],
            padding: 0,
            groups: c,
        };
        let w = p.get(&format!("enc.{}.w", l + 1))?;
        let bias = p.get(&format!("enc.{}.b", l + 1))?;
        let y = tape.grouped_conv1d(h, w, Some(bias), spec)?;
        h = cfg.activation.apply(tape, y);
        outs.push(h);
    }
    let mut taps = [x; 3];
    for (s, &layer) in cfg.tap_layers.iter().enumerate() {
        let v = outs[layer - 1];
        let shape = tape.shape(v).to_vec();
        let (m, n) = (cfg.channels[layer - 1], shape[2]);
        let v = tape.reshape(v, &[b * c, m, n])?;
        taps[s] = tape.transpose_last2(v)?;
    }
    Ok(taps)
}

/// Affine map from the tap width to the model width, applied at every
/// position. `stage` is 1-based.
pub fn project_per_lead<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    stage: usize,
    tokens: Var,
) -> Result<Var> {
    let w = p.get(&format!("proj.{stage}.w"))?;
    let bias = p.get(&format!("proj.{stage}.b"))?;
    let st = tape.shape(tokens).to_vec();
    let y = if cfg.per_lead_projection {
        let c = cfg.leads;
        if !st[0].is_multiple_of(c) {
            return Err(Error::dim("project_per_lead", &st, tape.shape(w)));
        }
        let t4 = tape.reshape(tokens, &[st[0] / c, c, st[1], st[2]])?;
        let y = tape.matmul(t4, w)?;
        let d = *tape.shape(y).last().unwrap();
        tape.reshape(y, &[st[0], st[1], d])?
    } else {
        tape.matmul(tokens, w)?
    };
    tape.add(y, bias)
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};

    use super::*;
    use crate::autodiff::{gradient_error, ScalarGraph};
    use crate::rng::Rng;
    use crate::Tensor;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_cfg(leads: usize) -> EncoderConfig {
        EncoderConfig {
            leads,
            kernels: [5, 3, 3, 3],
            strides: [2, 2, 2, 1],
            channels: [2, 3, 3, 4],
            ..Default::default()
        }
    }

    #[test]
    fn default_lengths_on_fifteen_seconds() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.layer_lengths(7500).unwrap(), [2496, 1244, 618, 307]);
        assert_eq!(cfg.tap_lengths(7500).unwrap(), [1244, 618, 307]);
    }

    #[test]
    fn non_decreasing_taps_are_rejected() {
        let cfg = EncoderConfig {
            leads: 1,
            kernels: [1; 4],
            strides: [1; 4],
            channels: [1; 4],
            ..Default::default()
        };
        assert!(matches!(cfg.tap_lengths(20), Err(Error::Config(_))));
        let mut params = Params::<f64>::new();
        cfg.init(1, &Init::new(0), &mut params);
        for l in 1..=4 {
            params.insert(format!("enc.{l}.w"), Tensor::full(&[1, 1, 1], 1.0));
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(rand_tensor(&[1, 1, 20], 0));
        assert!(matches!(encode(&mut tape, &p, &cfg, x), Err(Error::Config(_))));
    }

    #[test]
    fn bad_tap_layers_are_rejected() {
        let cfg = EncoderConfig {
            tap_layers: [2, 2, 4],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            tap_layers: [0, 2, 4],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn too_short_input_propagates() {
        let cfg = small_cfg(2);
        assert!(matches!(cfg.tap_lengths(6), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn tap_shapes_and_lead_isolation() {
        let (b, c, l) = (2, 6, 80);
        let cfg = small_cfg(c);
        let mut params = Params::<f64>::new();
        cfg.init(8, &Init::new(3), &mut params);
        let x0 = rand_tensor(&[b, c, l], 1);
        let mut x1 = x0.clone();
        for bi in 0..b {
            for t in 0..l {
                x1.data_mut()[(bi * c + 5) * l + t] += 0.3;
            }
        }
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let taps = encode(&mut tape, &p, &cfg, xv).unwrap();
            let mut out = Vec::new();
            for (s, tap) in taps.into_iter().enumerate() {
                let proj = project_per_lead(&mut tape, &p, &cfg, s + 1, tap).unwrap();
                out.push((tape.value(tap).clone(), tape.value(proj).clone()));
            }
            out
        };
        let a = run(&x0);
        let z = run(&x1);
        let n = cfg.tap_lengths(l).unwrap();
        for s in 0..3 {
            assert_eq!(a[s].0.shape(), &[b * c, n[s], cfg.tap_channels()[s]]);
            assert_eq!(a[s].1.shape(), &[b * c, n[s], 8]);
            assert!(a[s].1.all_finite());
            for (t_a, t_z) in [(&a[s].0, &z[s].0), (&a[s].1, &z[s].1)] {
                let row = t_a.len() / (b * c);
                for seq in 0..b * c {
                    let same = t_a.data()[seq * row..(seq + 1) * row] == t_z.data()[seq * row..(seq + 1) * row];
                    assert_eq!(same, seq % c != 5, "stage {s} sequence {seq}");
                }
            }
        }
    }

    #[test]
    fn projection_identity_and_zero_weights() {
        let cfg = EncoderConfig {
            leads: 2,
            ..Default::default()
        };
        let tokens = rand_tensor(&[4, 5, 3], 2);
        let mut params = Params::<f64>::new();
        params.insert("proj.1.w", Tensor::eye(3));
        params.insert("proj.1.b", Tensor::zeros(&[3]));
        params.insert("proj.2.w", Tensor::zeros(&[3, 3]));
        params.insert("proj.2.b", Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let id = project_per_lead(&mut tape, &p, &cfg, 1, t).unwrap();
        assert_eq!(tape.value(id), &tokens);
        let z = project_per_lead(&mut tape, &p, &cfg, 2, t).unwrap();
        assert!(tape.value(z).data().chunks(3).all(|r| r == [1., 2., 3.]));
    }

    struct ProjGraph {
        per_lead: bool,
    }

    impl ScalarGraph for ProjGraph {
        fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
            let cfg = EncoderConfig {
                leads: 3,
                per_lead_projection: self.per_lead,
                ..Default::default()
            };
            let p = Bound::from_vars([("proj.1.w", x[1]), ("proj.1.b", x[2])]);
            let y = project_per_lead(tape, &p, &cfg, 1, x[0])?;
            let r = tape.constant(rand_tensor(tape.shape(y), 9).cast());
            let p = tape.mul(y, r)?;
            Ok(tape.sum_all(p))
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let shared = [rand_tensor(&[6, 4, 3], 4), rand_tensor(&[3, 5], 5), rand_tensor(&[5], 6)];
        let err = gradient_error::<f64, _>(&ProjGraph { per_lead: false }, &shared, 1e-5, None, 0).unwrap();
        assert!(err < 1e-5, "shared projection {err}");
        let per_lead = [rand_tensor(&[6, 4, 3], 4), rand_tensor(&[3, 3, 5], 5), rand_tensor(&[5], 6)];
        let err = gradient_error::<f64, _>(&ProjGraph { per_lead: true }, &per_lead, 1e-5, None, 0).unwrap();
        assert!(err < 1e-5, "per-lead projection {err}");
    }
}
