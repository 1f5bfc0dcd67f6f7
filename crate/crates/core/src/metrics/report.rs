//! Thresholding, prediction files and the aggregated evaluation report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::auc::macro_auc;
use super::challenge::{challenge_score, ChallengeScore, WeightMatrix};
use super::counts::{fbeta, gbeta, per_class_counts, ConfusionCounts, BETA};
use crate::error::{Error, Result};

/// Default decision threshold on sigmoid outputs.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Class `k` is predicted iff `score[k] >= thresholds[k]`.
pub fn binarize(scores: &[Vec<f64>], thresholds: &[f64]) -> Result<Vec<Vec<usize>>> {
    scores
        .iter()
        .map(|row| {
            if row.len() != thresholds.len() {
                return Err(Error::Data(format!(
                    "{} scores but {} thresholds",
                    row.len(),
                    thresholds.len()
                )));
            }
            Ok((0..row.len()).filter(|&k| row[k] >= thresholds[k]).collect())
        })
        .collect()
}

/// Per-recording class scores, stored as CSV `id,score_<class>,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub class_names: Vec<String>,
    pub ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn to_csv(&self) -> String {
        let mut wr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.class_names.iter().map(|c| format!("score_{c}")));
        wr.write_record(&header).expect("in-memory write");
        for (id, row) in self.ids.iter().zip(&self.scores) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wr.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(wr.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.get(0) != Some("id") {
            return Err(bad("first column must be `id`".into()));
        }
        let class_names = header
            .iter()
            .skip(1)
            .map(|h| {
                h.strip_prefix("score_")
                    .map(str::to_string)
                    .ok_or_else(|| bad(format!("column {h:?} lacks the score_ prefix")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut p = Predictions { class_names, ids: Vec::new(), scores: Vec::new() };
        for rec in rd.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            p.ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            p.scores.push(row);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Predictions::from_csv(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub fbeta: f64,
    pub gbeta: f64,
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_recordings: usize,
    pub beta: f64,
    pub per_class: Vec<ClassReport>,
    pub macro_fbeta: f64,
    pub macro_gbeta: f64,
    pub challenge: ChallengeScore,
    /// Mean AUC over classes having both positives and negatives.
    pub macro_auc: Option<f64>,
    pub auc_skipped: Vec<String>,
}

impl EvalReport {
    /// Scores thresholded predictions and ranks `scores` against the true
    /// label sets. `weights` defaults to the identity.
    pub fn compute(
        scores: &[Vec<f64>],
        true_sets: &[Vec<usize>],
        class_names: &[String],
        thresholds: &[f64],
        weights: Option<&WeightMatrix>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("cannot evaluate an empty set of recordings".into()));
        }
        let n = class_names.len();
        if thresholds.len() != n {
            return Err(Error::Data(format!("{} thresholds for {n} classes", thresholds.len())));
        }
        let identity;
        let w = match weights {
            Some(w) if w.class_names() != class_names => {
                return Err(Error::Data(format!(
                    "weight matrix classes {:?} differ from {:?}",
                    w.class_names(),
                    class_names
                )))
            }
            Some(w) => w,
            None => {
                identity = WeightMatrix::identity(class_names.to_vec());
                &identity
            }
        };
        let auc = macro_auc(scores, true_sets, n)?;
        let preds = binarize(scores, thresholds)?;
        let counts = per_class_counts(true_sets, &preds, n)?;
        let per_class: Vec<ClassReport> = (0..n)
            .map(|k| ClassReport {
                name: class_names[k].clone(),
                fbeta: fbeta(&counts[k], BETA),
                gbeta: gbeta(&counts[k], BETA),
                auc: auc.per_class[k],
                counts: counts[k],
            })
            .collect();
        let mean = |f: fn(&ClassReport) -> f64| per_class.iter().map(f).sum::<f64>() / n.max(1) as f64;
        Ok(EvalReport {
            n_recordings: scores.len(),
            beta: BETA,
            macro_fbeta: mean(|c| c.fbeta),
            macro_gbeta: mean(|c| c.gbeta),
            challenge: challenge_score(true_sets, &preds, w)?,
            macro_auc: auc.macro_auc,
            auc_skipped: auc.skipped.iter().map(|&k| class_names[k].clone()).collect(),
            per_class,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
