//! Three-stage transformer in which only the CLS token crosses stage
//! boundaries.
//!
//! Leads are folded into the batch, so every lead is its own sequence and
//! attention never mixes leads. Each stage prepends the incoming CLS token
//! to the stage's contextual tokens, runs a stack of pre-norm blocks and
//! hands token 0 to the next stage.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::params::{Bound, Init, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Standard,
    /// Difference of two softmax maps, `A = softmax₁ − λ·softmax₂`.
    Differential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    Learned,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Blocks per stage; zero makes a stage the identity on the CLS token.
    pub layers: [usize; 3],
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
    pub lambda_init: f64,
    /// Per-head layer norm scaled by `1 − λ_init` after differential attention.
    pub head_norm: bool,
    pub positional: Positional,
    /// One CLS parameter per lead instead of a single shared one.
    pub per_lead_cls: bool,
    pub ln_eps: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            layers: [2, 2, 2],
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            attention: AttentionKind::Standard,
            lambda_init: 0.5,
            head_norm: false,
            positional: Positional::Learned,
            per_lead_cls: false,
            ln_eps: 1e-5,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.attention == AttentionKind::Differential && !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "differential attention needs an even head dimension, got {}",
                self.head_dim()
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if !self.lambda_init.is_finite() || !(self.ln_eps > 0.0) {
            return bad("lambda_init must be finite and ln_eps positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn block_prefix(stage: usize, layer: usize) -> String {
        format!("stage{stage}.layer{layer}")
    }

    /// Parameters for all three stages. `pos_len[s]` is the positional table
    /// length of stage `s + 1` and must cover that stage's token count.
    pub fn init<T: Scalar>(&self, pos_len: [usize; 3], leads: usize, init: &Init, params: &mut Params<T>) {
        let d = self.dim;
        let cls_shape = if self.per_lead_cls { vec![leads, d] } else { vec![d] };
        params.insert("cls", init.normal("cls", &cls_shape, 0.02));
        for s in 1..=3 {
            if self.positional == Positional::Learned {
                let name = format!("stage{s}.pos");
                params.insert(&name, init.normal(&name, &[pos_len[s - 1], d], 0.02));
            }
            for l in 1..=self.layers[s - 1] {
                let pre = Self::block_prefix(s, l);
                for ln in ["ln1", "ln2"] {
                    params.insert(format!("{pre}.{ln}.g"), Tensor::full(&[d], T::one()));
                    params.insert(format!("{pre}.{ln}.b"), Tensor::zeros(&[d]));
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    let name = format!("{pre}.attn.{w}");
                    params.insert(&name, init.fan_in(&name, &[d, d], d));
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    params.insert(format!("{pre}.attn.{b}"), Tensor::zeros(&[d]));
                }
                if self.attention == AttentionKind::Differential {
                    params.insert(format!("{pre}.attn.lambda"), Tensor::scalar(T::c(self.lambda_init)));
                    if self.head_norm {
                        let dh = self.head_dim();
                        params.insert(format!("{pre}.attn.hn.g"), Tensor::full(&[dh], T::one()));
                        params.insert(format!("{pre}.attn.hn.b"), Tensor::zeros(&[dh]));
                    }
                }
                let hidden = d * self.mlp_ratio;
                let w1 = format!("{pre}.mlp.w1");
                params.insert(&w1, init.fan_in(&w1, &[d, hidden], d));
                params.insert(format!("{pre}.mlp.b1"), Tensor::zeros(&[hidden]));
                let w2 = format!("{pre}.mlp.w2");
                params.insert(&w2, init.fan_in(&w2, &[hidden, d], hidden));
                params.insert(format!("{pre}.mlp.b2"), Tensor::zeros(&[d]));
            }
        }
    }
}

/// Attention maps kept for export: `maps[stage][layer]` is
/// `[B·C, H, T, T]`, the combined map for differential attention.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub maps: Vec<Vec<Tensor<f64>>>,
}

fn affine<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, p.get(w)?)?;
    tape.add(y, p.get(b)?)
}

/// `[B', T, D]` → `[B', H, T, D/H]`.
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    if d % heads != 0 {
        return Err(Error::dim("split_heads", &s, &[heads]));
    }
    let r = tape.reshape(x, &[b, t, heads, d / heads])?;
    tape.transpose(r, &[0, 2, 1, 3])
}

/// `[B', H, T, dh]` → `[B', T, H·dh]`.
fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.transpose(x, &[0, 2, 1, 3])?;
    tape.reshape(r, &[s[0], s[2], s[1] * s[3]])
}

/// Row-stochastic map `softmax(q kᵀ · scale)` over the last axis.
fn attention_map<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, scale: f64) -> Result<Var> {
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, scale);
    Ok(tape.softmax_lastdim(scores))
}

fn qkv<T: Scalar>(tape: &mut Tape<T>, p: &Bound, pre: &str, x: Var, heads: usize) -> Result<[Var; 3]> {
    let d = *tape.shape(x).last().unwrap();
    if !d.is_multiple_of(heads) {
        return Err(Error::dim("msa", tape.shape(x), &[heads]));
    }
    let mut out = [x; 3];
    for (i, n) in ["q", "k", "v"].iter().enumerate() {
        let y = affine(tape, p, x, &format!("{pre}.w{n}"), &format!("{pre}.b{n}"))?;
        out[i] = split_heads(tape, y, heads)?;
    }
    Ok(out)
}

/// Multi-head self-attention over `x: [B', T, D]` without a mask.
///
/// Returns the projected output and the attention map `[B', H, T, T]`.
pub fn msa_standard<T: Scalar>(tape: &mut Tape<T>, p: &Bound, pre: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let [q, k, v] = qkv(tape, p, pre, x, heads)?;
    let dh = *tape.shape(q).last().unwrap();
    let a = attention_map(tape, q, k, 1.0 / (dh as f64).sqrt())?;
    let o = tape.matmul(a, v)?;
    let o = merge_heads(tape, o)?;
    let y = affine(tape, p, o, &format!("{pre}.wo"), &format!("{pre}.bo"))?;
    Ok((y, a))
}

/// Differential multi-head self-attention without a mask.
///
/// Each head's query and key are split into halves `(Q₁, Q₂)`, `(K₁, K₂)`;
/// the combined map `softmax(Q₁K₁ᵀ/√(dh/2)) − λ·softmax(Q₂K₂ᵀ/√(dh/2))`
/// is applied to the full-width values. `λ` is the learnable
/// `{pre}.lambda`. With `head_norm = Some(λ_init)` each head output is
/// layer-normalised and scaled by `1 − λ_init`.
pub fn msa_differential<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    pre: &str,
    x: Var,
    heads: usize,
    head_norm: Option<f64>,
) -> Result<(Var, Var)> {
    let [q, k, v] = qkv(tape, p, pre, x, heads)?;
    let dh = *tape.shape(q).last().unwrap();
    if !dh.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "differential attention needs an even head dimension, got {dh}"
        )));
    }
    let half = dh / 2;
    let scale = 1.0 / (half as f64).sqrt();
    let (q1, q2) = (tape.slice(q, 3, 0, half)?, tape.slice(q, 3, half, dh)?);
    let (k1, k2) = (tape.slice(k, 3, 0, half)?, tape.slice(k, 3, half, dh)?);
    let a1 = attention_map(tape, q1, k1, scale)?;
    let a2 = attention_map(tape, q2, k2, scale)?;
    let lambda = p.get(&format!("{pre}.lambda"))?;
    let a2 = tape.scale_by(a2, lambda)?;
    let a = tape.sub(a1, a2)?;
    let mut o = tape.matmul(a, v)?;
    if let Some(lambda_init) = head_norm {
        let g = p.get(&format!("{pre}.hn.g"))?;
        let b = p.get(&format!("{pre}.hn.b"))?;
        o = tape.layer_norm(o, g, b, 1e-5)?;
        o = tape.scale(o, 1.0 - lambda_init);
    }
    let o = merge_heads(tape, o)?;
    let y = affine(tape, p, o, &format!("{pre}.wo"), &format!("{pre}.bo"))?;
    Ok((y, a))
}

/// Pre-norm block: `x + MSA(LN(x))`, then `h + MLP(LN(h))` with gelu.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &StageConfig,
    pre: &str,
    x: Var,
) -> Result<(Var, Var)> {
    let n1 = tape.layer_norm(x, p.get(&format!("{pre}.ln1.g"))?, p.get(&format!("{pre}.ln1.b"))?, cfg.ln_eps)?;
    let attn_pre = format!("{pre}.attn");
    let (att, map) = match cfg.attention {
        AttentionKind::Standard => msa_standard(tape, p, &attn_pre, n1, cfg.heads)?,
        AttentionKind::Differential => {
            let hn = cfg.head_norm.then_some(cfg.lambda_init);
            msa_differential(tape, p, &attn_pre, n1, cfg.heads, hn)?
        }
    };
    let h = tape.add(x, att)?;
    let n2 = tape.layer_norm(h, p.get(&format!("{pre}.ln2.g"))?, p.get(&format!("{pre}.ln2.b"))?, cfg.ln_eps)?;
    let m = affine(tape, p, n2, &format!("{pre}.mlp.w1"), &format!("{pre}.mlp.b1"))?;
    let m = tape.gelu(m);
    let m = affine(tape, p, m, &format!("{pre}.mlp.w2"), &format!("{pre}.mlp.b2"))?;
    Ok((tape.add(h, m)?, map))
}

/// Output of one stage. `tokens` is kept only for inspection; the next
/// stage receives `cls` alone.
pub struct StageOutput {
    pub tokens: Var,
    pub cls: Var,
    pub maps: Vec<Var>,
}

/// One stage: `concat(cls_in, ctx + pos)` through the stage's blocks, with
/// token 0 of the result as `cls_out`. `stage` is 1-based.
///
/// The positional table covers contextual tokens only, so a stage with no
/// blocks returns `cls_in` unchanged.
pub fn transformer_stage<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &StageConfig,
    stage: usize,
    ctx: Var,
    cls_in: Var,
) -> Result<StageOutput> {
    let sc = tape.shape(ctx).to_vec();
    let scls = tape.shape(cls_in).to_vec();
    if sc.len() != 3 || sc[2] != cfg.dim || scls != [sc[0], 1, cfg.dim] {
        return Err(Error::dim("transformer_stage", &sc, &scls));
    }
    let n = sc[1];
    let ctx = match cfg.positional {
        Positional::Learned => {
            let pos = p.get(&format!("stage{stage}.pos"))?;
            let len = tape.shape(pos)[0];
            if len < n {
                return Err(Error::Config(format!(
                    "stage {stage} positional table holds {len} rows but the stage has {n} tokens"
                )));
            }
            let pos = tape.slice(pos, 0, 0, n)?;
            tape.add(ctx, pos)?
        }
        Positional::None => ctx,
    };
    let mut x = tape.concat(&[cls_in, ctx], 1)?;
    debug_assert_eq!(tape.shape(x)[1], n + 1);
    let mut maps = Vec::with_capacity(cfg.layers[stage - 1]);
    for l in 1..=cfg.layers[stage - 1] {
        let (y, map) = transformer_block(tape, p, cfg, &StageConfig::block_prefix(stage, l), x)?;
        x = y;
        maps.push(map);
    }
    let cls = if cfg.layers[stage - 1] == 0 {
        cls_in
    } else {
        tape.slice(x, 1, 0, 1)?
    };
    if tape.shape(cls) != [sc[0], 1, cfg.dim] {
        return Err(Error::Contract(format!(
            "stage {stage} must forward exactly one token per sequence, got {:?}",
            tape.shape(cls)
        )));
    }
    Ok(StageOutput { tokens: x, cls, maps })
}

/// The CLS parameter broadcast to `[B·C, 1, D]`.
pub fn initial_cls<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &StageConfig, batch: usize, leads: usize) -> Result<Var> {
    let cls = p.get("cls")?;
    let d = cfg.dim;
    if cfg.per_lead_cls {
        let r = tape.reshape(cls, &[leads, 1, d])?;
        let e = tape.expand(r, &[batch]);
        tape.reshape(e, &[batch * leads, 1, d])
    } else {
        let r = tape.reshape(cls, &[1, d])?;
        Ok(tape.expand(r, &[batch * leads]))
    }
}

/// Runs the three stages on projected taps `[B·C, N_s, D]`, threading the
/// CLS token, and returns the final CLS as `[B, C, D]`. Attention maps are
/// copied out when `record` is set.
pub fn run_three_stages<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &StageConfig,
    taps: [Var; 3],
    batch: usize,
    leads: usize,
    record: bool,
) -> Result<(Var, Option<AttentionRecord>)> {
    cfg.validate()?;
    let mut cls = initial_cls(tape, p, cfg, batch, leads)?;
    let mut rec = record.then(AttentionRecord::default);
    for (s, &tap) in taps.iter().enumerate() {
        let out = transformer_stage(tape, p, cfg, s + 1, tap, cls)?;
        cls = out.cls;
        if let Some(r) = rec.as_mut() {
            r.maps.push(out.maps.iter().map(|&m| tape.value(m).cast()).collect());
        }
    }
    let final_cls = tape.reshape(cls, &[batch, leads, cfg.dim])?;
    Ok((final_cls, rec))
}
