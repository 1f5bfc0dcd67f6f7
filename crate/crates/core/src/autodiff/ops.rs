//! Differentiable primitives: forward kernels recorded on the tape and
//! their backward rules.
//!
//! Binary elementwise ops broadcast only along leading dimensions: the
//! smaller operand's shape must be a suffix of the larger one's, and is
//! repeated over the remaining leading axes. The same rule applies to the
//! batch dimensions of [`Tape::matmul`]. All reductions run in a fixed
//! sequential order so results are reproducible bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{split_axis, strides, MatMut, MatRef, Scalar, Tensor};

use super::tape::{GradSink, Tape, Var};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Scale(f64),
}

/// Pointwise nonlinearity used by the encoder and the MLP blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
}

/// Geometry of a grouped 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    groups: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    l_in: usize,
    l_out: usize,
}

impl ConvGeom {
    /// Output positions `t` whose tap `kk` reads inside the unpadded input.
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kk).div_ceil(self.stride);
        let end = (self.l_in + self.padding).saturating_sub(kk);
        let hi = end.div_ceil(self.stride).min(self.l_out);
        (lo, hi.max(lo))
    }

    /// Unfolds one group's input `[cin_g, l_in]` into `[cin_g·K, l_out]`
    /// windows, with zeros where a tap falls in the padding.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let cin_g = x.len() / self.l_in;
        for ci in 0..cin_g {
            let xrow = &x[ci * self.l_in..(ci + 1) * self.l_in];
            for kk in 0..self.kernel {
                let row = &mut col[(ci * self.kernel + kk) * self.l_out..(ci * self.kernel + kk + 1) * self.l_out];
                let (lo, hi) = self.valid_range(kk);
                row[..lo].fill(T::zero());
                row[hi..].fill(T::zero());
                for t in lo..hi {
                    row[t] = xrow[t * self.stride + kk - self.padding];
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters window gradients back.
    fn col2im_acc<T: Scalar>(&self, col: &[T], gx: &mut [T]) {
        let cin_g = gx.len() / self.l_in;
        for ci in 0..cin_g {
            let grow = &mut gx[ci * self.l_in..(ci + 1) * self.l_in];
            for kk in 0..self.kernel {
                let row = &col[(ci * self.kernel + kk) * self.l_out..(ci * self.kernel + kk + 1) * self.l_out];
                let (lo, hi) = self.valid_range(kk);
                for t in lo..hi {
                    let p = t * self.stride + kk - self.padding;
                    grow[p] = grow[p] + row[t];
                }
            }
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    ScaleBy {
        a: Var,
        s: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        b_batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    /// Output element `i` is input element `map[i]`.
    Gather {
        a: Var,
        map: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: usize,
        scale: T,
    },
    /// Output element `i` is input element `i % n` (leading-dim repeat).
    Expand {
        a: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let u = k * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let u = k * (x + T::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

/// Result shape when `small` may be repeated along the leading axes of `big`.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::dim(op, a, b))
}

impl<T: Scalar> Tape<T> {
    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(value, op, rg)
    }

    /// Single entry point over the elementwise family.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::Contract(format!("{kind:?} needs a second operand")))
        };
        Ok(match kind {
            ElementwiseKind::Add => self.add(a, need_b()?)?,
            ElementwiseKind::Sub => self.sub(a, need_b()?)?,
            ElementwiseKind::Mul => self.mul(a, need_b()?)?,
            ElementwiseKind::Tanh => self.tanh(a),
            ElementwiseKind::Sigmoid => self.sigmoid(a),
            ElementwiseKind::Relu => self.relu(a),
            ElementwiseKind::Gelu => self.gelu(a),
            ElementwiseKind::Scale(c) => self.scale(a, c),
        })
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (na, nb) = (av.len(), bv.len());
        let n: usize = shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let mut data = Vec::with_capacity(n);
        if na == n {
            for ac in av.chunks(nb) {
                data.extend(ac.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for bc in bv.chunks(na) {
                data.extend(av.iter().zip(bc).map(|(&x, &y)| f(x, y)));
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.derived(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(T) -> T = match kind {
            UnaryKind::Tanh => |x| x.tanh(),
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |x| if x > T::zero() { x } else { T::zero() },
            UnaryKind::Gelu => gelu,
        };
        let value = self.value(a).map(f);
        self.derived(value, Op::Unary { kind, a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::c(c);
        let value = self.value(a).map(|x| x * c);
        self.derived(value, Op::Scale { a, c }, &[a])
    }

    /// Multiplies every element of `a` by the single-element array `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let value = self.value(a).map(|x| x * c);
        Ok(self.derived(value, Op::ScaleBy { a, s }, &[a, s]))
    }

    /// Batched matrix product `[..., M, K] @ [..., K, P]`.
    ///
    /// The batch dimensions of `b` must equal, or be a suffix of, those of
    /// `a`; a plain `[K, P]` weight is shared across every batch of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != k2 || !batch_a.ends_with(batch_b) {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let b_batch: usize = batch_b.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * p];
        for bi in 0..batch {
            let aoff = bi * m * k;
            let boff = (bi % b_batch) * k * p;
            let coff = bi * m * p;
            T::gemm_acc(
                m,
                k,
                p,
                MatRef { data: &av[aoff..aoff + m * k], rs: k, cs: 1 },
                MatRef { data: &bv[boff..boff + k * p], rs: p, cs: 1 },
                MatMut { data: &mut out[coff..coff + m * p], rs: p, cs: 1 },
            );
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, p]);
        let value = Tensor::new(shape, out)?;
        let op = Op::MatMul {
            a,
            b,
            batch,
            b_batch,
            m,
            k,
            p,
        };
        Ok(self.derived(value, op, &[a, b]))
    }

    /// Grouped 1-D convolution of `x: [B, C_in, L]` with
    /// `kernels: [C_out, C_in / groups, K]` and optional `bias: [C_out]`.
    ///
    /// Output length is `floor((L + 2·padding − K) / stride) + 1`. Output
    /// channels of group `g` read only input channels of group `g`; with
    /// `groups == C_in` this is a depthwise convolution.
    pub fn grouped_conv1d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        spec: Conv1dSpec,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(kernels).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(Error::dim("grouped_conv1d", &sx, &sw));
        }
        let (batch, c_in, l_in) = (sx[0], sx[1], sx[2]);
        let (c_out, cin_g, kernel) = (sw[0], sw[1], sw[2]);
        let groups = spec.groups;
        if groups == 0 || spec.stride == 0 {
            return Err(Error::Contract("grouped_conv1d: stride and groups must be ≥ 1".into()));
        }
        if c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(Error::dim("grouped_conv1d", &sx, &sw));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(Error::dim("grouped_conv1d bias", self.shape(bv), &[c_out]));
            }
        }
        let padded = l_in + 2 * spec.padding;
        if padded < kernel {
            return Err(Error::InputTooShort {
                op: "grouped_conv1d",
                len: padded,
                kernel,
            });
        }
        let l_out = (padded - kernel) / spec.stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            groups,
            kernel,
            stride: spec.stride,
            padding: spec.padding,
            l_in,
            l_out,
        };
        let xv = self.value(x).data();
        let wv = self.value(kernels).data();
        let bv = bias.map(|b| self.value(b).data());
        let cout_g = c_out / groups;
        let ck = cin_g * kernel;
        let mut out = vec![T::zero(); batch * c_out * l_out];
        let mut col = vec![T::zero(); ck * l_out];
        for b in 0..batch {
            for g in 0..groups {
                geom.im2col(&xv[(b * c_in + g * cin_g) * l_in..(b * c_in + (g + 1) * cin_g) * l_in], &mut col);
                let o0 = (b * c_out + g * cout_g) * l_out;
                let dst = &mut out[o0..o0 + cout_g * l_out];
                if let Some(bv) = bv {
                    for (row, &bias) in dst.chunks_mut(l_out).zip(&bv[g * cout_g..(g + 1) * cout_g]) {
                        row.fill(bias);
                    }
                }
                T::gemm_acc(
                    cout_g,
                    ck,
                    l_out,
                    MatRef { data: &wv[g * cout_g * ck..(g + 1) * cout_g * ck], rs: ck, cs: 1 },
                    MatRef { data: &col, rs: l_out, cs: 1 },
                    MatMut { data: dst, rs: l_out, cs: 1 },
                );
            }
        }
        let value = Tensor::new(vec![batch, c_out, l_out], out)?;
        let mut inputs = vec![x, kernels];
        inputs.extend(bias);
        Ok(self.derived(
            value,
            Op::Conv1d {
                x,
                w: kernels,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.derived(value, Op::Softmax { a }, &[a])
    }

    /// Normalizes each last-dimension slice to zero mean and unit variance,
    /// then applies `gain` and `shift` (both shaped like the last dimension).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for p in [gain, shift] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", &sx, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(shift).data();
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        let nd = T::c(d as f64);
        for row in xv.chunks(d) {
            let mu = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nd;
            let r = T::one() / (var + T::c(eps)).sqrt();
            for (i, &v) in row.iter().enumerate() {
                out.push((v - mu) * r * gv[i] + bv[i]);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let value = Tensor::new(sx, out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            shift,
            mean,
            rstd,
        };
        Ok(self.derived(value, op, &[x, gain, shift]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero arrays".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: s0.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == s0.len()
                && sp
                    .iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &s0, sp));
            }
            total += sp[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: sa.len(),
            });
        }
        if start >= end || end > sa[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{end} out of range for axis {axis} of {sa:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&av[base + start * inner..base + end * inner]);
        }
        let mut shape = sa;
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::Slice { a, axis, start }, &[a]))
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() {
            return Err(Error::dim("transpose", &sa, perm));
        }
        for &p in perm {
            if p >= sa.len() || seen[p] {
                return Err(Error::Axis {
                    op: "transpose",
                    axis: p,
                    rank: sa.len(),
                });
            }
            seen[p] = true;
        }
        let in_strides = strides(&sa);
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.value(a).len();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let mut src = 0usize;
        for _ in 0..n {
            map.push(src);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                src -= src_strides[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        let av = self.value(a).data();
        let out = map.iter().map(|&i| av[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::Gather { a, map }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.transpose(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.derived(value, Op::Reshape { a }, &[a]))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Axis {
                op: if mean { "mean" } else { "sum" },
                axis,
                rank: sa.len(),
            });
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let scale = if mean {
            T::one() / T::c(len as f64)
        } else {
            T::one()
        };
        let av = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::SumAxis { a, axis, scale }, &[a]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Sum of every element, as a single-element array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n]).unwrap();
        self.sum(flat, 0).unwrap()
    }

    /// Repeats `a` along new leading axes of extent `lead`.
    pub fn expand(&mut self, a: Var, lead: &[usize]) -> Var {
        let t = self.value(a);
        let reps: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(t.shape());
        let mut out = Vec::with_capacity(reps * t.len());
        for _ in 0..reps {
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(shape, out).unwrap();
        self.derived(value, Op::Expand { a }, &[a])
    }

    /// Mean binary cross-entropy of `logits` against same-shaped 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::dim("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let z = self.value(logits).data();
        let n = T::c(z.len() as f64);
        let total: T = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.data().to_vec(),
        };
        Ok(self.derived(value, op, &[logits]))
    }
}

fn acc<T: Scalar>(dst: &mut [T], i: usize, v: T) {
    dst[i] = dst[i] + v;
}

impl<T: Scalar> Op<T> {
    /// Pushes `g` (the gradient of this op's output) into its inputs.
    pub(crate) fn backward(&self, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
        match self {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let av = sink.value(*a).data();
                let bv = sink.value(*b).data();
                let n = g.len();
                let (na, nb) = (av.len(), bv.len());
                // One operand is full size; the other repeats with this period.
                let period = na.min(nb).max(1);
                let part = |v: &[T], off: usize, len: usize| if v.len() == n { off..off + len } else { 0..len };
                if let Some(ga) = sink.get(*a) {
                    for (ci, gc) in g.chunks(period).enumerate() {
                        let off = ci * period;
                        let dst = &mut ga[part(av, off, gc.len())];
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => dst.iter_mut().zip(gc).for_each(|(d, &gi)| *d = *d + gi),
                            BinaryKind::Mul => {
                                let other = &bv[part(bv, off, gc.len())];
                                dst.iter_mut().zip(gc).zip(other).for_each(|((d, &gi), &o)| *d = *d + gi * o)
                            }
                        }
                    }
                }
                if let Some(gb) = sink.get(*b) {
                    for (ci, gc) in g.chunks(period).enumerate() {
                        let off = ci * period;
                        let dst = &mut gb[part(bv, off, gc.len())];
                        match kind {
                            BinaryKind::Add => dst.iter_mut().zip(gc).for_each(|(d, &gi)| *d = *d + gi),
                            BinaryKind::Sub => dst.iter_mut().zip(gc).for_each(|(d, &gi)| *d = *d - gi),
                            BinaryKind::Mul => {
                                let other = &av[part(av, off, gc.len())];
                                dst.iter_mut().zip(gc).zip(other).for_each(|((d, &gi), &o)| *d = *d + gi * o)
                            }
                        }
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = sink.value(*a).data();
                let y = out.data();
                if let Some(ga) = sink.get(*a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Tanh => T::one() - y[i] * y[i],
                            UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                            UnaryKind::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Gelu => gelu_grad(x[i]),
                        };
                        acc(ga, i, g[i] * d);
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = sink.get(*a) {
                    for (i, &gi) in g.iter().enumerate() {
                        acc(ga, i, gi * *c);
                    }
                }
            }
            Op::ScaleBy { a, s } => {
                let av = sink.value(*a).data();
                let c = sink.value(*s).data()[0];
                if let Some(ga) = sink.get(*a) {
                    for (i, &gi) in g.iter().enumerate() {
                        acc(ga, i, gi * c);
                    }
                }
                if let Some(gs) = sink.get(*s) {
                    let mut t = T::zero();
                    for (&gi, &ai) in g.iter().zip(av) {
                        t = t + gi * ai;
                    }
                    acc(gs, 0, t);
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                b_batch,
                m,
                k,
                p,
            } => {
                let av = sink.value(a).data();
                let bv = sink.value(b).data();
                if let Some(ga) = sink.get(a) {
                    for bi in 0..batch {
                        let (aoff, boff, coff) = (bi * m * k, (bi % b_batch) * k * p, bi * m * p);
                        T::gemm_acc(
                            m,
                            p,
                            k,
                            MatRef { data: &g[coff..coff + m * p], rs: p, cs: 1 },
                            MatRef { data: &bv[boff..boff + k * p], rs: 1, cs: p },
                            MatMut { data: &mut ga[aoff..aoff + m * k], rs: k, cs: 1 },
                        );
                    }
                }
                if let Some(gb) = sink.get(b) {
                    for bi in 0..batch {
                        let (aoff, boff, coff) = (bi * m * k, (bi % b_batch) * k * p, bi * m * p);
                        T::gemm_acc(
                            k,
                            m,
                            p,
                            MatRef { data: &av[aoff..aoff + m * k], rs: 1, cs: k },
                            MatRef { data: &g[coff..coff + m * p], rs: p, cs: 1 },
                            MatMut { data: &mut gb[boff..boff + k * p], rs: p, cs: 1 },
                        );
                    }
                }
            }
            Op::Conv1d { x, w, bias, geom } => conv1d_backward(*x, *w, *bias, geom, g, sink),
            Op::Softmax { a } => {
                let y = out.data();
                let n = *out.shape().last().unwrap();
                if let Some(ga) = sink.get(*a) {
                    for (r, (yrow, grow)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let mut dot = T::zero();
                        for (&yi, &gi) in yrow.iter().zip(grow) {
                            dot = dot + yi * gi;
                        }
                        for i in 0..n {
                            acc(ga, r * n + i, yrow[i] * (grow[i] - dot));
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
            } => {
                let xv = sink.value(*x).data();
                let gv = sink.value(*gain).data();
                let d = gv.len();
                let nd = T::c(d as f64);
                let xhat = |r: usize, i: usize| (xv[r * d + i] - mean[r]) * rstd[r];
                if let Some(gx) = sink.get(*x) {
                    for r in 0..mean.len() {
                        let grow = &g[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..d {
                            let dxh = grow[i] * gv[i];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat(r, i);
                        }
                        for i in 0..d {
                            let dxh = grow[i] * gv[i];
                            acc(gx, r * d + i, rstd[r] * (dxh - s1 / nd - xhat(r, i) * s2 / nd));
                        }
                    }
                }
                if let Some(gg) = sink.get(*gain) {
                    for r in 0..mean.len() {
                        for i in 0..d {
                            acc(gg, i, g[r * d + i] * xhat(r, i));
                        }
                    }
                }
                if let Some(gs) = sink.get(*shift) {
                    for r in 0..mean.len() {
                        for i in 0..d {
                            acc(gs, i, g[r * d + i]);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = sink.value(p).shape()[*axis];
                    if let Some(gp) = sink.get(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (j, &v) in src.iter().enumerate() {
                                acc(gp, o * len * inner + j, v);
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = sink.value(*a).shape().to_vec();
                let (outer, len, inner) = split_axis(&sa, *axis);
                let width = out.shape()[*axis];
                if let Some(ga) = sink.get(*a) {
                    for o in 0..outer {
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        let base = (o * len + start) * inner;
                        for (j, &v) in src.iter().enumerate() {
                            acc(ga, base + j, v);
                        }
                    }
                }
            }
            Op::Gather { a, map } => {
                if let Some(ga) = sink.get(*a) {
                    for (i, &src) in map.iter().enumerate() {
                        acc(ga, src, g[i]);
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = sink.get(*a) {
                    for (i, &v) in g.iter().enumerate() {
                        acc(ga, i, v);
                    }
                }
            }
            Op::SumAxis { a, axis, scale } => {
                let sa = sink.value(*a).shape().to_vec();
                let (outer, len, inner) = split_axis(&sa, *axis);
                if let Some(ga) = sink.get(*a) {
                    for o in 0..outer {
                        for l in 0..len {
                            for j in 0..inner {
                                acc(ga, (o * len + l) * inner + j, g[o * inner + j] * *scale);
                            }
                        }
                    }
                }
            }
            Op::Expand { a } => {
                let n = sink.value(*a).len();
                if let Some(ga) = sink.get(*a) {
                    for (i, &v) in g.iter().enumerate() {
                        acc(ga, i % n, v);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = sink.value(*logits).data();
                let n = T::c(z.len() as f64);
                if let Some(gz) = sink.get(*logits) {
                    for i in 0..z.len() {
                        acc(gz, i, g[0] * (sigmoid(z[i]) - targets[i]) / n);
                    }
                }
            }
        }
    }
}

fn conv1d_backward<T: Scalar>(
    x: Var,
    w: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let ConvGeom {
        batch,
        c_in,
        c_out,
        groups,
        kernel,
        l_in,
        l_out,
        ..
    } = *geom;
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    let xv = sink.value(x).data();
    let wv = sink.value(w).data();
    let ck = cin_g * kernel;
    let mut col = vec![T::zero(); ck * l_out];
    if let Some(gx) = sink.get(x) {
        for b in 0..batch {
            for grp in 0..groups {
                col.fill(T::zero());
                let o0 = (b * c_out + grp * cout_g) * l_out;
                T::gemm_acc(
                    ck,
                    cout_g,
                    l_out,
                    MatRef { data: &wv[grp * cout_g * ck..(grp + 1) * cout_g * ck], rs: 1, cs: ck },
                    MatRef { data: &g[o0..o0 + cout_g * l_out], rs: l_out, cs: 1 },
                    MatMut { data: &mut col, rs: l_out, cs: 1 },
                );
                let x0 = (b * c_in + grp * cin_g) * l_in;
                geom.col2im_acc(&col, &mut gx[x0..x0 + cin_g * l_in]);
            }
        }
    }
    if let Some(gw) = sink.get(w) {
        for b in 0..batch {
            for grp in 0..groups {
                geom.im2col(&xv[(b * c_in + grp * cin_g) * l_in..(b * c_in + (grp + 1) * cin_g) * l_in], &mut col);
                let o0 = (b * c_out + grp * cout_g) * l_out;
                T::gemm_acc(
                    cout_g,
                    l_out,
                    ck,
                    MatRef { data: &g[o0..o0 + cout_g * l_out], rs: l_out, cs: 1 },
                    MatRef { data: &col, rs: 1, cs: l_out },
                    MatMut { data: &mut gw[grp * cout_g * ck..(grp + 1) * cout_g * ck], rs: ck, cs: 1 },
                );
            }
        }
    }
    if let Some(bias) = bias {
        if let Some(gb) = sink.get(bias) {
            for b in 0..batch {
                for o in 0..c_out {
                    let grow = &g[(b * c_out + o) * l_out..(b * c_out + o + 1) * l_out];
                    let s = grow.iter().copied().sum::<T>();
                    acc(gb, o, s);
                }
            }
        }
    }
}
