//! Top-1 accuracy with view averaging, class-wise mean average precision,
//! class-wise F1, and the serialized report.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vidpriv_tensor::Tensor;

use crate::error::{Error, Result};

fn matrix_dims(scores: &Tensor, labels: &[Vec<bool>]) -> Result<(usize, usize)> {
    let &[s, p] = scores.shape() else {
        return Err(Error::Metric(format!("scores must be [samples, attributes], got {:?}", scores.shape())));
    };
    if labels.len() != s || labels.iter().any(|l| l.len() != p) {
        return Err(Error::Metric(format!("labels do not match scores of shape [{s}, {p}]")));
    }
    Ok((s, p))
}

/// Percent of videos whose view-averaged logits peak at the label.
///
/// `logits` is `[videos * views, C]` with the views of one video adjacent.
/// Ties in the averaged logits resolve to the lowest class index.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize], views: usize) -> Result<f64> {
    let &[rows, c] = logits.shape() else {
        return Err(Error::Metric(format!("logits must be [views, classes], got {:?}", logits.shape())));
    };
    if views == 0 || rows != labels.len() * views || labels.is_empty() {
        return Err(Error::Metric(format!(
            "{rows} logit rows for {} videos at {views} views each",
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (v, &label) in labels.iter().enumerate() {
        let mut mean = vec![0.0f64; c];
        for r in v * views..(v + 1) * views {
            for (m, &x) in mean.iter_mut().zip(&logits.data()[r * c..(r + 1) * c]) {
                *m += x as f64;
            }
        }
        let best = (0..c).fold(0, |b, j| if mean[j] > mean[b] { j } else { b });
        correct += usize::from(best == label);
    }
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Non-interpolated average precision of one attribute; `None` without
/// positives. Scores are ranked descending, ties by sample index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    /// Percent over attributes that have positives.
    pub cmap: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn cmap(scores: &Tensor, labels: &[Vec<bool>]) -> Result<ClassAp> {
    let (s, p) = matrix_dims(scores, labels)?;
    let per_class: Vec<Option<f64>> = (0..p)
        .map(|a| {
            let col: Vec<f64> = (0..s).map(|i| scores.data()[i * p + a] as f64).collect();
            let lab: Vec<bool> = labels.iter().map(|l| l[a]).collect();
            average_precision(&col, &lab)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Metric("no attribute has a positive sample".into()));
    }
    Ok(ClassAp {
        cmap: 100.0 * present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassF1 {
    /// Macro mean in `[0, 1]`.
    pub f1: f64,
    pub per_class: Vec<f64>,
}

/// Scores at or above `threshold` count as positive predictions.
pub fn f1(scores: &Tensor, labels: &[Vec<bool>], threshold: f64) -> Result<ClassF1> {
    let (s, p) = matrix_dims(scores, labels)?;
    let per_class: Vec<f64> = (0..p)
        .map(|a| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (i, l) in labels.iter().enumerate().take(s) {
                let pred = scores.data()[i * p + a] as f64 >= threshold;
                match (pred, l[a]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect();
    let f1 = if p == 0 { 0.0 } else { per_class.iter().sum::<f64>() / p as f64 };
    Ok(ClassF1 { f1, per_class })
}

/// One CSV row: `(metric, value, class, seed)`. Headline rows have an empty class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub class: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: String,
    /// `None` for an AP row of an attribute without positives.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    /// Action top-1, percent.
    pub top1: f64,
    /// Privacy cMAP, percent.
    pub cmap: f64,
    /// Privacy macro F1 in `[0, 1]`.
    pub f1: f64,
    pub per_class_ap: Vec<ClassMetric>,
    pub per_class_f1: Vec<ClassMetric>,
    pub config: serde_json::Value,
}

pub const HEADLINE: [&str; 3] = ["top1", "cmap", "f1"];

impl MetricsReport {
    pub fn new(seed: u64, top1: f64, ap: &ClassAp, f: &ClassF1, names: &[&str], config: serde_json::Value) -> Self {
        let name = |i: usize| names.get(i).map_or_else(|| format!("attr-{i}"), |s| s.to_string());
        MetricsReport {
            seed,
            top1,
            cmap: ap.cmap,
            f1: f.f1,
            per_class_ap: ap
                .per_class
                .iter()
                .enumerate()
                .map(|(i, v)| ClassMetric { class: name(i), value: *v })
                .collect(),
            per_class_f1: f
                .per_class
                .iter()
                .enumerate()
                .map(|(i, v)| ClassMetric {
                    class: name(i),
                    value: Some(*v),
                })
                .collect(),
            config,
        }
    }

    pub fn headline(&self) -> [(&'static str, f64); 3] {
        [("top1", self.top1), ("cmap", self.cmap), ("f1", self.f1)]
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let row = |metric: &str, value: f64, class: &str| ReportRow {
            metric: metric.into(),
            value,
            class: class.into(),
            seed: self.seed,
        };
        let mut rows: Vec<ReportRow> = self.headline().iter().map(|(m, v)| row(m, *v, "")).collect();
        for (metric, list) in [("ap", &self.per_class_ap), ("f1", &self.per_class_f1)] {
            for c in list {
                rows.push(row(metric, c.value.unwrap_or(f64::NAN), &c.class));
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows())
    }

    /// Rebuilds a report from its CSV rows. The config snapshot is not part
    /// of the CSV and comes back as `null`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = rows_from_csv(text)?;
        let seed = rows.first().map(|r| r.seed).ok_or(Error::Metric("empty report".into()))?;
        let head = |m: &str| {
            rows.iter()
                .find(|r| r.metric == m && r.class.is_empty())
                .map(|r| r.value)
                .ok_or_else(|| Error::Metric(format!("report lacks {m}")))
        };
        let class_rows = |m: &str| {
            rows.iter()
                .filter(|r| r.metric == m && !r.class.is_empty())
                .map(|r| ClassMetric {
                    class: r.class.clone(),
                    value: (!r.value.is_nan()).then_some(r.value),
                })
                .collect()
        };
        Ok(MetricsReport {
            seed,
            top1: head("top1")?,
            cmap: head("cmap")?,
            f1: head("f1")?,
            per_class_ap: class_rows("ap"),
            per_class_f1: class_rows("f1"),
            config: serde_json::Value::Null,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Metric(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metric(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Metric(format!("csv: {e}")))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Metric(format!("csv: {e}")))
}

/// Cuts `clips x crops` views of size `clip = [T, H, W]` out of a longer or
/// larger `[T', H', W', 3]` video, view-major by clip then crop.
///
/// Clip starts are spread uniformly over the time axis; crops are taken
/// left, centre and right along the width at the vertical centre (a single
/// crop is the centre one).
pub fn extract_views(pixels: &Tensor, clip: [usize; 3], clips: usize, crops: usize) -> Result<Vec<Tensor>> {
    let &[tf, hf, wf, ch] = pixels.shape() else {
        return Err(Error::Layout(format!("video must be [T, H, W, 3], got {:?}", pixels.shape())));
    };
    let [t, h, w] = clip;
    if t > tf || h > hf || w > wf || clips == 0 || crops == 0 {
        return Err(Error::Layout(format!(
            "cannot cut {clips}x{crops} views of {clip:?} from {:?}",
            pixels.shape()
        )));
    }
    let spread = |n: usize, i: usize, room: usize| if n == 1 { room / 2 } else { (i * room + (n - 1) / 2) / (n - 1) };
    let mut views = Vec::with_capacity(clips * crops);
    for ci in 0..clips {
        let t0 = if clips == 1 { 0 } else { spread(clips, ci, tf - t) };
        for cj in 0..crops {
            let w0 = spread(crops, cj, wf - w);
            let h0 = (hf - h) / 2;
            let mut data = Vec::with_capacity(t * h * w * ch);
            for ti in t0..t0 + t {
                for hi in h0..h0 + h {
                    let start = ((ti * hf + hi) * wf + w0) * ch;
                    data.extend_from_slice(&pixels.data()[start..start + w * ch]);
                }
            }
            views.push(Tensor::from_vec(&[t, h, w, ch], data)?);
        }
    }
    Ok(views)
}
