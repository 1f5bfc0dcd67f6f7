//! Finite-difference sweep over every differentiable primitive.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient_error, Conv1dSpec, ScalarGraph, Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).expect("shape matches data")
}

/// `sum(r ⊙ y)` with a fixed random weighting `r`, so every output
/// element contributes a distinct amount to the scalar.
fn weighted<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(randn(&mut rng, &shape).cast());
    let p = tape.mul(y, r)?;
    Ok(tape.sum_all(p))
}

/// One random instance of every primitive, as a scalar graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    MulBroadcast,
    Tanh,
    Sigmoid,
    Gelu,
    Scale,
    ScaleBy,
    MatMul,
    MatMulBatched,
    Conv,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Transpose,
    Mean,
    Expand,
    Relu,
    Bce,
}

pub const PRIMS: [Prim; 21] = [
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::MulBroadcast,
    Prim::Tanh,
    Prim::Sigmoid,
    Prim::Gelu,
    Prim::Scale,
    Prim::ScaleBy,
    Prim::MatMul,
    Prim::MatMulBatched,
    Prim::Conv,
    Prim::Softmax,
    Prim::LayerNorm,
    Prim::Concat,
    Prim::Slice,
    Prim::Transpose,
    Prim::Mean,
    Prim::Expand,
    Prim::Relu,
    Prim::Bce,
];

pub struct PrimGraph(pub Prim, pub u64);

impl ScalarGraph for PrimGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let y = match self.0 {
            Prim::Add => tape.add(x[0], x[1])?,
            Prim::Sub => tape.sub(x[0], x[1])?,
            Prim::Mul | Prim::MulBroadcast => tape.mul(x[0], x[1])?,
            Prim::Tanh => tape.tanh(x[0]),
            Prim::Sigmoid => tape.sigmoid(x[0]),
            Prim::Gelu => tape.gelu(x[0]),
            Prim::Relu => tape.relu(x[0]),
            Prim::Scale => tape.scale(x[0], -1.7),
            Prim::ScaleBy => tape.scale_by(x[0], x[1])?,
            Prim::MatMul | Prim::MatMulBatched => tape.matmul(x[0], x[1])?,
            Prim::Conv => {
                let spec = Conv1dSpec {
                    stride: 2,
                    padding: 1,
                    groups: 2,
                };
                tape.grouped_conv1d(x[0], x[1], Some(x[2]), spec)?
            }
            Prim::Softmax => tape.softmax_lastdim(x[0]),
            Prim::LayerNorm => tape.layer_norm(x[0], x[1], x[2], 1e-5)?,
            Prim::Concat => tape.concat(&[x[0], x[1]], 1)?,
            Prim::Slice => tape.slice(x[0], 1, 1, 4)?,
            Prim::Transpose => tape.transpose(x[0], &[2, 0, 1])?,
            Prim::Mean => tape.mean(x[0], 1)?,
            Prim::Expand => tape.expand(x[0], &[3]),
            Prim::Bce => {
                let targets = Tensor::from_f64(&[3, 4], &[1., 0., 0., 1., 1., 1., 0., 0., 1., 0., 1., 0.])?;
                return tape.bce_with_logits(x[0], &targets);
            }
        };
        weighted(tape, y, self.1)
    }
}

pub fn prim_inputs(p: Prim, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut r = |s: &[usize]| randn(rng, s);
    match p {
        Prim::Add | Prim::Sub | Prim::Mul => vec![r(&[3, 4]), r(&[3, 4])],
        Prim::MulBroadcast => vec![r(&[2, 3, 4]), r(&[4])],
        Prim::Tanh | Prim::Sigmoid | Prim::Gelu | Prim::Scale | Prim::Softmax => vec![r(&[4, 7])],
        Prim::ScaleBy => vec![r(&[3, 5]), r(&[1])],
        Prim::MatMul => vec![r(&[3, 4]), r(&[4, 2])],
        Prim::MatMulBatched => vec![r(&[2, 3, 4]), r(&[4, 5])],
        Prim::Conv => vec![r(&[2, 4, 9]), r(&[6, 2, 3]), r(&[6])],
        Prim::LayerNorm => vec![r(&[2, 8]), r(&[8]), r(&[8])],
        Prim::Concat => vec![r(&[2, 3, 2]), r(&[2, 1, 2])],
        Prim::Slice | Prim::Transpose | Prim::Mean => vec![r(&[2, 5, 3])],
        Prim::Expand => vec![r(&[2, 2])],
        // Kept away from the kink at 0.
        Prim::Relu => vec![r(&[4, 7]).map(|v| v.signum() * (0.2 + v.abs()))],
        Prim::Bce => vec![r(&[3, 4]).map(|v| 3.0 * v)],
    }
}

/// Worst relative error of one check over its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

/// Checks every primitive on `instances` random inputs. The analytic side
/// runs at precision `T`, the numeric side in 64-bit.
pub fn primitive_suite<T: Scalar>(instances: usize, seed: u64, h: f64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMS
        .iter()
        .map(|&prim| {
            let mut worst = 0.0f64;
            for i in 0..instances as u64 {
                let inputs = prim_inputs(prim, &mut rng);
                let e = gradient_error::<T, _>(&PrimGraph(prim, i), &inputs, h, None, i).unwrap_or(f64::INFINITY);
                worst = worst.max(e);
            }
            CheckResult { name: format!("{prim:?}"), instances, worst }
        })
        .collect()
}
