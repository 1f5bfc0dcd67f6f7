//! Attention-map export: raw CSV matrices, lead attribution and SVG overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, lead_attribution, HeadKind};
use crate::signal::{crop_at, preprocess, Recording};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;

const STANDARD_12: [&str; 12] = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];

/// Conventional names for 12-lead recordings, `lead{c}` otherwise.
pub fn lead_names(leads: usize) -> Vec<String> {
    if leads == 12 {
        STANDARD_12.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=leads).map(|c| format!("lead{c}")).collect()
    }
}

fn matrix_csv(t: &Tensor<f64>, offset: usize, n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        let row = &t.data()[offset + i * n..offset + (i + 1) * n];
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Runs the model on the first evaluation window of `rec` and writes:
/// `stage{s}_layer{l}_head{h}_lead{c}.csv` (1-based indices) for every
/// attention map, `lead_attribution.csv` with the class-by-lead gate
/// weights, and `lead{c}.svg` overlaying the final stage's CLS-row
/// attention on the signal trace.
pub fn export_attention(ckpt: &Checkpoint, rec: &Recording, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = &ckpt.config;
    let leads = cfg.model.leads();
    if rec.leads() != leads {
        return Err(Error::Data(format!("{}: {} leads, model expects {leads}", rec.id, rec.leads())));
    }
    if cfg.model.wide_features > 0 {
        return Err(Error::Data("attention export does not take auxiliary features".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let len = cfg.pipeline.segment_len();
    let seg = crop_at(&preprocess(rec, &cfg.pipeline)?, 0, len)?;
    let x = Tensor::<f64>::new(vec![1, leads, len], seg.signal().iter().map(|&v| v as f64).collect())?;

    let params = ckpt.weights.params_f64();
    let mut tape = Tape::<f64>::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x);
    let out = forward(&mut tape, &bound, &cfg.model, xv, None, true)?;
    let record = out.attention.ok_or_else(|| Error::Contract("forward did not record attention".into()))?;

    let mut written = Vec::new();
    let heads = cfg.model.stages.heads;
    for (s, layers) in record.maps.iter().enumerate() {
        for (l, map) in layers.iter().enumerate() {
            let t = map.shape()[2];
            for h in 0..heads {
                for c in 0..leads {
                    let name = format!("stage{}_layer{}_head{}_lead{}.csv", s + 1, l + 1, h + 1, c + 1);
                    write(out_dir.join(name), &matrix_csv(map, (c * heads + h) * t * t, t), &mut written)?;
                }
            }
        }
    }

    let names = lead_names(leads);
    let n = cfg.model.n_classes;
    let weights = match (cfg.model.head.kind, out.lead_weights) {
        (HeadKind::Gated, Some(w)) => tape.value(w).clone(),
        // Mean pooling weighs every lead equally.
        _ => Tensor::full(&[1, n, leads], 1.0 / leads as f64),
    };
    let attr = lead_attribution(&weights, &ckpt.class_names, &names)?;
    write(out_dir.join("lead_attribution.csv"), &attr.to_csv(0), &mut written)?;

    // CLS row of the last layer of the deepest stage that has layers, averaged over heads.
    let cls_map = record.maps.iter().rev().find_map(|layers| layers.last());
    for c in 0..leads {
        let overlay = cls_map.map(|m| {
            let t = m.shape()[2];
            (1..t)
                .map(|j| (0..heads).map(|h| m.data()[((c * heads + h) * t) * t + j]).sum::<f64>() / heads as f64)
                .collect::<Vec<f64>>()
        });
        let svg = lead_svg(&names[c], seg.lead(c), overlay.as_deref());
        write(out_dir.join(format!("lead{}.svg", c + 1)), &svg, &mut written)?;
    }
    Ok(written)
}

/// Signal trace with the token attention upsampled by nearest neighbour to
/// one value per sample and drawn as a shaded band.
fn lead_svg(title: &str, signal: &[f32], attention: Option<&[f64]>) -> String {
    let (w, h) = (1000.0, 240.0);
    let n = signal.len().max(1);
    let (lo, hi) = signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let xs = |i: usize| i as f64 * w / n as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<title>{title}</title>"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if let Some(att) = attention.filter(|a| !a.is_empty()) {
        let peak = att.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let peak = if peak > 0.0 { peak } else { 1.0 };
        let upsampled: Vec<f64> = (0..n).map(|i| att[i * att.len() / n]).collect();
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && upsampled[end] == upsampled[start] {
                end += 1;
            }
            let op = (upsampled[start].abs() / peak * 0.6).clamp(0.0, 0.6);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.3}" y="0" width="{:.3}" height="{h}" fill="crimson" fill-opacity="{op:.4}"/>"#,
                xs(start),
                xs(end) - xs(start)
            );
            start = end;
        }
    }
    let mut pts = String::new();
    for (i, &v) in signal.iter().enumerate() {
        let y = h - 10.0 - (v as f64 - lo) / span * (h - 20.0);
        let _ = write!(pts, "{:.3},{:.3} ", xs(i), y);
    }
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="black" stroke-width="1" points="{}"/>"#, pts.trim_end());
    svg.push_str("</svg>\n");
    svg
}
