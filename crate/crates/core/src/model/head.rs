//! Classification heads over the per-lead CLS matrix `x: [B, C, S]`.
//!
//! The gated head scores every lead per class and classifies a
//! class-specific lead mixture; the pooled head averages leads.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::params::{Bound, Init, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Gated,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Separate query/key affines per lead instead of one shared pair.
    pub per_lead_gating: bool,
}

impl HeadConfig {
    pub fn init<T: Scalar>(&self, s: usize, n: usize, leads: usize, init: &Init, params: &mut Params<T>) {
        match self.kind {
            HeadKind::Gated => {
                for w in ["wq", "wk"] {
                    let name = format!("head.{w}");
                    let shape = if self.per_lead_gating { vec![leads, s, s] } else { vec![s, s] };
                    params.insert(&name, init.fan_in(&name, &shape, s));
                }
                for b in ["bq", "bk"] {
                    let shape = if self.per_lead_gating { vec![leads, s] } else { vec![s] };
                    params.insert(format!("head.{b}"), Tensor::zeros(&shape));
                }
                params.insert("head.wp", init.fan_in("head.wp", &[s, n], s));
                params.insert("head.bp", Tensor::zeros(&[n]));
                params.insert("head.wcls", init.fan_in("head.wcls", &[n, s], s));
                params.insert("head.bcls", Tensor::zeros(&[n]));
            }
            HeadKind::Pooled => {
                params.insert("head.w", init.fan_in("head.w", &[s, n], s));
                params.insert("head.b", Tensor::zeros(&[n]));
            }
        }
    }
}

fn gate_affine<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = p.get(w)?;
    let b = p.get(b)?;
    let sx = tape.shape(x).to_vec();
    let y = if tape.shape(w).len() == 3 {
        let x4 = tape.reshape(x, &[sx[0], sx[1], 1, sx[2]])?;
        let y = tape.matmul(x4, w)?;
        tape.reshape(y, &sx)?
    } else {
        tape.matmul(x, w)?
    };
    tape.add(y, b)
}

/// `a = tanh(x W_q + b_q) ⊙ σ(x W_k + b_k)`, acting along `S` for each lead.
pub fn gated_attention<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    let q = gate_affine(tape, p, x, "head.wq", "head.bq")?;
    let q = tape.tanh(q);
    let k = gate_affine(tape, p, x, "head.wk", "head.bk")?;
    let k = tape.sigmoid(k);
    tape.mul(q, k)
}

/// Per-class logits from the gate scores `a`.
///
/// `a′ = a W_p + b_p` is `[B, C, N]`; its transpose is normalised over
/// leads to `a″: [B, N, C]`; `v = a″ x` is `[B, N, S]`; logit `i` is
/// `⟨W_i, v_i⟩ + b_i`. Returns `(logits, a″)`.
pub fn gated_logits<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var, a: Var) -> Result<(Var, Var)> {
    let ap = tape.matmul(a, p.get("head.wp")?)?;
    let ap = tape.add(ap, p.get("head.bp")?)?;
    let apt = tape.transpose(ap, &[0, 2, 1])?;
    let app = tape.softmax_lastdim(apt);
    let v = tape.matmul(app, x)?;
    let wv = tape.mul(v, p.get("head.wcls")?)?;
    let logits = tape.sum(wv, 2)?;
    let logits = tape.add(logits, p.get("head.bcls")?)?;
    Ok((logits, app))
}

/// Mean over leads followed by one affine map `S → N`.
pub fn pooled_head<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    let m = tape.mean(x, 1)?;
    let y = tape.matmul(m, p.get("head.w")?)?;
    tape.add(y, p.get("head.b")?)
}

/// Per-recording, per-class lead weights with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadAttribution {
    /// `[B, N, C]`; row `(b, i)` is a distribution over leads.
    pub weights: Tensor<f64>,
    pub class_names: Vec<String>,
    pub lead_names: Vec<String>,
}

/// Attaches class and lead labels to `a″`.
pub fn lead_attribution<T: Scalar>(
    weights: &Tensor<T>,
    class_names: &[String],
    lead_names: &[String],
) -> Result<LeadAttribution> {
    let s = weights.shape();
    if s.len() != 3 || s[1] != class_names.len() || s[2] != lead_names.len() {
        return Err(Error::dim("lead_attribution", s, &[0, class_names.len(), lead_names.len()]));
    }
    Ok(LeadAttribution {
        weights: weights.cast(),
        class_names: class_names.to_vec(),
        lead_names: lead_names.to_vec(),
    })
}

impl LeadAttribution {
    /// CSV of one recording: header `class,<leads...>`, one row per class.
    /// Values use Rust's shortest round-trip formatting.
    pub fn to_csv(&self, b: usize) -> String {
        let (n, c) = (self.class_names.len(), self.lead_names.len());
        let mut out = String::from("class");
        for l in &self.lead_names {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&self.class_names[i]);
            for j in 0..c {
                let _ = write!(out, ",{}", self.weights.data()[(b * n + i) * c + j]);
            }
            out.push('\n');
        }
        out
    }

    /// Parses one recording's CSV written by [`LeadAttribution::to_csv`].
    pub fn from_csv(text: &str, path: &Path) -> Result<LeadAttribution> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty attribution file"))?;
        let lead_names: Vec<String> = header.split(',').skip(1).map(String::from).collect();
        let mut class_names = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            class_names.push(cells.next().unwrap_or_default().to_string());
            let row: Vec<f64> = cells
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("row {}: {e}", i + 2)))?;
            if row.len() != lead_names.len() {
                return Err(Error::format(path, format!("row {} has {} values", i + 2, row.len())));
            }
            data.extend(row);
        }
        let weights = Tensor::new(vec![1, class_names.len(), lead_names.len()], data)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(LeadAttribution {
            weights,
            class_names,
            lead_names,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};

    use super::*;
    use crate::autodiff::{gradient_error, ScalarGraph};
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn head_params(kind: HeadKind, s: usize, n: usize, leads: usize, seed: u64) -> Params<f64> {
        let mut p = Params::new();
        HeadConfig { kind, per_lead_gating: false }.init(s, n, leads, &Init::new(seed), &mut p);
        // Nonzero biases so every path is exercised.
        for (name, t) in p.iter_mut() {
            if name.contains(".b") {
                *t = rand_tensor(t.shape(), 99);
            }
        }
        p
    }

    fn gated(p: &Params<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let a = gated_attention(&mut tape, &b, xv).unwrap();
        let (logits, app) = gated_logits(&mut tape, &b, xv, a).unwrap();
        (tape.value(a).clone(), tape.value(logits).clone(), tape.value(app).clone())
    }

    fn pooled(p: &Params<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = pooled_head(&mut tape, &b, xv).unwrap();
        tape.value(y).clone()
    }

    /// Direct evaluation of the gated head for one recording.
    fn oracle_gated(p: &Params<f64>, x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let g = |n: &str| p.get(n).unwrap();
        let lin = |v: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let (k, m) = (w.shape()[0], w.shape()[1]);
            (0..m).map(|j| b.data()[j] + (0..k).map(|i| v[i] * w.data()[i * m + j]).sum::<f64>()).collect()
        };
        let c = x.len();
        let s = x[0].len();
        let ap: Vec<Vec<f64>> = x
            .iter()
            .map(|xc| {
                let q = lin(xc, g("head.wq"), g("head.bq"));
                let k = lin(xc, g("head.wk"), g("head.bk"));
                let a: Vec<f64> = q.iter().zip(&k).map(|(q, k)| q.tanh() / (1.0 + (-k).exp())).collect();
                lin(&a, g("head.wp"), g("head.bp"))
            })
            .collect();
        let n = ap[0].len();
        let mut logits = vec![0.0; n];
        let mut weights = vec![vec![0.0; c]; n];
        for i in 0..n {
            let m = (0..c).map(|l| ap[l][i]).fold(f64::MIN, f64::max);
            let e: Vec<f64> = (0..c).map(|l| (ap[l][i] - m).exp()).collect();
            let z: f64 = e.iter().sum();
            weights[i] = e.iter().map(|v| v / z).collect();
            let v: Vec<f64> = (0..s).map(|j| (0..c).map(|l| weights[i][l] * x[l][j]).sum()).collect();
            logits[i] = g("head.bcls").data()[i] + (0..s).map(|j| g("head.wcls").data()[i * s + j] * v[j]).sum::<f64>();
        }
        (logits, weights)
    }

    #[test]
    fn gated_head_matches_direct_evaluation() {
        let (b, c, s, n) = (2, 12, 16, 3);
        let p = head_params(HeadKind::Gated, s, n, c, 1);
        let x = rand_tensor(&[b, c, s], 2);
        let (a, logits, app) = gated(&p, &x);
        assert_eq!(a.shape(), &[b, c, s]);
        assert_eq!(logits.shape(), &[b, n]);
        assert_eq!(app.shape(), &[b, n, c]);
        for r in app.data().chunks(c) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
        for bi in 0..b {
            let rows: Vec<Vec<f64>> = (0..c).map(|l| x.data()[(bi * c + l) * s..(bi * c + l + 1) * s].to_vec()).collect();
            let (want, w) = oracle_gated(&p, &rows);
            for i in 0..n {
                assert!((logits.data()[bi * n + i] - want[i]).abs() < 1e-12);
                for l in 0..c {
                    assert!((app.data()[(bi * n + i) * c + l] - w[i][l]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_examples() {
        let (b, c, s, n) = (2, 4, 6, 3);
        let x = rand_tensor(&[b, c, s], 3);
        let mut p = head_params(HeadKind::Gated, s, n, c, 2);
        let (a, _, _) = gated(&p, &x);
        assert!(a.data().iter().all(|v| v.abs() < 1.0));

        let mut pk = p.clone();
        pk.insert("head.wk", Tensor::zeros(&[s, s]));
        pk.insert("head.bk", Tensor::zeros(&[s]));
        let (ak, _, _) = gated(&pk, &x);
        let mut tape = Tape::new();
        let bd = pk.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let q = gate_affine(&mut tape, &bd, xv, "head.wq", "head.bq").unwrap();
        let q = tape.tanh(q);
        for (av, qv) in ak.data().iter().zip(tape.value(q).data()) {
            assert_eq!(*av, 0.5 * qv);
        }

        p.insert("head.wq", Tensor::zeros(&[s, s]));
        p.insert("head.bq", Tensor::zeros(&[s]));
        let (a0, _, _) = gated(&p, &x);
        assert!(a0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_lead_gets_all_weight() {
        let p = head_params(HeadKind::Gated, 5, 3, 1, 4);
        let x = rand_tensor(&[2, 1, 5], 5);
        let (_, logits, app) = gated(&p, &x);
        assert!(app.data().iter().all(|&v| v == 1.0));
        for bi in 0..2 {
            for i in 0..3 {
                let w = &p.get("head.wcls").unwrap().data()[i * 5..(i + 1) * 5];
                let want: f64 = p.get("head.bcls").unwrap().data()[i]
                    + w.iter().zip(&x.data()[bi * 5..(bi + 1) * 5]).map(|(a, b)| a * b).sum::<f64>();
                assert!((logits.data()[bi * 3 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_gate_equals_pooled_head() {
        let (b, c, s, n) = (3, 5, 4, 2);
        let x = rand_tensor(&[b, c, s], 6);
        let mut pg = head_params(HeadKind::Gated, s, n, c, 7);
        pg.insert("head.wp", Tensor::zeros(&[s, n]));
        pg.insert("head.bp", Tensor::zeros(&[n]));
        let (_, lg, app) = gated(&pg, &x);
        assert!(app.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        // Pooled head whose rows equal the per-class classifiers.
        let wcls = pg.get("head.wcls").unwrap();
        let mut wt = vec![0.0; s * n];
        for i in 0..n {
            for j in 0..s {
                wt[j * n + i] = wcls.data()[i * s + j];
            }
        }
        let mut pp = Params::new();
        pp.insert("head.w", Tensor::new(vec![s, n], wt).unwrap());
        pp.insert("head.b", pg.get("head.bcls").unwrap().clone());
        let lp = pooled(&pp, &x);
        assert!(lg.max_abs_diff(&lp) < 1e-12, "{}", lg.max_abs_diff(&lp));
    }

    #[test]
    fn pooled_examples() {
        let (b, c, s, n) = (2, 3, 4, 2);
        let p = head_params(HeadKind::Pooled, s, n, c, 8);
        let row = rand_tensor(&[s], 9);
        let x = Tensor::new(vec![b, c, s], row.data().repeat(b * c)).unwrap();
        let y = pooled(&p, &x);
        let single = pooled(&p, &Tensor::new(vec![1, 1, s], row.data().to_vec()).unwrap());
        for bi in 0..b {
            for i in 0..n {
                assert!((y.data()[bi * n + i] - single.data()[i]).abs() < 1e-15);
            }
        }
        let mut pz = p.clone();
        pz.insert("head.w", Tensor::zeros(&[s, n]));
        let yz = pooled(&pz, &x);
        let bias = p.get("head.b").unwrap().data();
        assert!(yz.data().chunks(n).all(|r| r == bias));
    }

    #[test]
    fn lead_permutation_permutes_weights_and_keeps_logits() {
        let (b, c, s, n) = (2, 6, 5, 3);
        let p = head_params(HeadKind::Gated, s, n, c, 10);
        let x = rand_tensor(&[b, c, s], 11);
        let perm = [2, 4, 0, 5, 1, 3];
        let mut xp = Vec::new();
        for bi in 0..b {
            for &src in &perm {
                xp.extend_from_slice(&x.data()[(bi * c + src) * s..(bi * c + src + 1) * s]);
            }
        }
        let xp = Tensor::new(vec![b, c, s], xp).unwrap();
        let (_, l0, w0) = gated(&p, &x);
        let (_, l1, w1) = gated(&p, &xp);
        // Summation order over leads changes, so compare to rounding.
        assert!(l0.max_abs_diff(&l1) < 1e-12);
        for bi in 0..b {
            for i in 0..n {
                for (j, &src) in perm.iter().enumerate() {
                    let a = w1.data()[(bi * n + i) * c + j];
                    let e = w0.data()[(bi * n + i) * c + src];
                    assert!((a - e).abs() < 1e-15);
                }
            }
        }
    }

    struct HeadLoss {
        kind: HeadKind,
        params: Params<f64>,
        checked: Vec<String>,
    }

    impl ScalarGraph for HeadLoss {
        fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
            let pairs: Vec<(String, Var)> = self.checked.iter().cloned().zip(x[1..].iter().copied()).collect();
            let p = self.params.cast::<T>().bind_with(tape, &pairs);
            let logits = match self.kind {
                HeadKind::Gated => {
                    let a = gated_attention(tape, &p, x[0])?;
                    gated_logits(tape, &p, x[0], a)?.0
                }
                HeadKind::Pooled => pooled_head(tape, &p, x[0])?,
            };
            let r = tape.constant(rand_tensor(tape.shape(logits), 5).cast());
            let y = tape.mul(logits, r)?;
            Ok(tape.sum_all(y))
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for kind in [HeadKind::Gated, HeadKind::Pooled] {
            let params = head_params(kind, 16, 3, 12, 12);
            // The gate projection bias shifts every lead equally before the
            // lead softmax, so its gradient is identically zero.
            let checked: Vec<String> = params.names().filter(|n| *n != "head.bp").cloned().collect();
            let mut inputs = vec![rand_tensor(&[2, 12, 16], 13)];
            inputs.extend(checked.iter().map(|n| params.get(n).unwrap().clone()));
            let graph = HeadLoss { kind, params, checked };
            let err = gradient_error::<f64, _>(&graph, &inputs, 1e-4, Some(40), 3).unwrap();
            assert!(err < 1e-5, "{kind:?}: {err}");
        }
    }

    #[test]
    fn attribution_csv_round_trip_is_exact() {
        let p = head_params(HeadKind::Gated, 4, 2, 3, 14);
        let (_, _, app) = gated(&p, &rand_tensor(&[2, 3, 4], 15));
        let classes = vec!["normal".to_string(), "high_potassium".to_string()];
        let leads = vec!["I".to_string(), "II".to_string(), "V1".to_string()];
        let attr = lead_attribution(&app, &classes, &leads).unwrap();
        let text = attr.to_csv(1);
        let back = LeadAttribution::from_csv(&text, Path::new("x.csv")).unwrap();
        assert_eq!(back.class_names, classes);
        assert_eq!(back.lead_names, leads);
        assert_eq!(back.weights.data(), &attr.weights.data()[6..12]);
        assert!(lead_attribution(&app, &classes, &leads[..2]).is_err());
    }
}
