//! Class-similarity weighted challenge score.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::counts::{check_lengths, masks};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square class-similarity weights; row and column order follow
/// `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    class_names: Vec<String>,
    w: Tensor<f64>,
}

impl WeightMatrix {
    pub fn new(class_names: Vec<String>, w: Tensor<f64>) -> Result<Self> {
        let n = class_names.len();
        if w.shape() != [n, n] {
            return Err(Error::Data(format!(
                "weight matrix shape {:?} does not match {n} classes",
                w.shape()
            )));
        }
        if !w.all_finite() {
            return Err(Error::Data("weight matrix has non-finite entries".into()));
        }
        Ok(WeightMatrix { class_names, w })
    }

    pub fn identity(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        WeightMatrix { class_names, w: Tensor::eye(n) }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n(&self) -> usize {
        self.class_names.len()
    }

    pub fn weights(&self) -> &Tensor<f64> {
        &self.w
    }

    /// Parses the CSV layout: header `,c0,c1,...`, then one row per class
    /// starting with its name.
    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = rd
            .records()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let (header, body) = rows.split_first().ok_or_else(|| bad("empty weight matrix".into()))?;
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let n = names.len();
        if body.len() != n {
            return Err(bad(format!("{} rows for {n} classes", body.len())));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in body.iter().enumerate() {
            if row.len() != n + 1 {
                return Err(bad(format!("row {} has {} fields, expected {}", i + 1, row.len(), n + 1)));
            }
            if row[0] != names[i] {
                return Err(bad(format!("row {} is labelled {:?}, expected {:?}", i + 1, &row[0], names[i])));
            }
            for f in row.iter().skip(1) {
                data.push(f.parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}")))?);
            }
        }
        WeightMatrix::new(names, Tensor::new(vec![n, n], data)?).map_err(|e| bad(e.to_string()))
    }

    /// Loads a weight matrix and checks its classes against `expected`.
    pub fn load(path: &Path, expected: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w = WeightMatrix::from_csv(&text, path)?;
        if w.class_names != expected {
            return Err(Error::format(
                path,
                format!("classes {:?} do not match class list {:?}", w.class_names, expected),
            ));
        }
        Ok(w)
    }

    pub fn to_csv(&self) -> String {
        let mut wr = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("").chain(self.class_names.iter().map(String::as_str)).collect();
        wr.write_record(&header).expect("in-memory write");
        let n = self.n();
        for (i, name) in self.class_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.w.data()[i * n..(i + 1) * n].iter().map(|v| v.to_string()));
            wr.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(wr.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

/// `a[i][j]` accumulates recordings predicted as class `i` whose true
/// labels include class `j`. Each recording adds `1 / max(1, |true ∪ pred|)`
/// for every such pair.
pub fn challenge_confusion(true_sets: &[Vec<usize>], pred_sets: &[Vec<usize>], n: usize) -> Result<Tensor<f64>> {
    check_lengths(true_sets.len(), pred_sets.len())?;
    let t = masks(true_sets, n)?;
    let p = masks(pred_sets, n)?;
    let mut a = vec![0.0; n * n];
    for (t, p) in t.iter().zip(&p) {
        let union = t.iter().zip(p).filter(|(a, b)| **a || **b).count();
        let w = 1.0 / union.max(1) as f64;
        for i in (0..n).filter(|&i| p[i]) {
            for j in (0..n).filter(|&j| t[j]) {
                a[i * n + j] += w;
            }
        }
    }
    Tensor::new(vec![n, n], a)
}

/// `Σ w_ij a_ij`.
pub fn weighted_sum(a: &Tensor<f64>, w: &WeightMatrix) -> Result<f64> {
    if a.shape() != w.w.shape() {
        return Err(Error::Dimension {
            op: "challenge_score",
            left: a.shape().to_vec(),
            right: w.w.shape().to_vec(),
        });
    }
    Ok(a.data().iter().zip(w.w.data()).map(|(a, w)| a * w).sum())
}

/// Raw score together with the reference points used to normalise it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChallengeScore {
    pub raw: f64,
    /// `(raw − inactive) / (perfect − inactive)`, 0 if the references tie.
    pub normalized: f64,
    /// Score of a classifier that predicts no class.
    pub inactive: f64,
    /// Score of predictions equal to the true labels.
    pub perfect: f64,
}

pub fn challenge_score(true_sets: &[Vec<usize>], pred_sets: &[Vec<usize>], w: &WeightMatrix) -> Result<ChallengeScore> {
    let n = w.n();
    let raw = weighted_sum(&challenge_confusion(true_sets, pred_sets, n)?, w)?;
    let empty = vec![Vec::new(); true_sets.len()];
    let inactive = weighted_sum(&challenge_confusion(true_sets, &empty, n)?, w)?;
    let perfect = weighted_sum(&challenge_confusion(true_sets, true_sets, n)?, w)?;
    let normalized = if perfect != inactive {
        (raw - inactive) / (perfect - inactive)
    } else {
        0.0
    };
    Ok(ChallengeScore { raw, normalized, inactive, perfect })
}
