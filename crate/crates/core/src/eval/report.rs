use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{SequenceDataset, ABSENCE_FLAGS};
use super::metrics::{compute_metrics, Metrics, NUM_THRESHOLDS};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Metrics for one sequence run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequence: String,
    /// False when the tracker failed before the last frame; the frames it
    /// never reached count as misses.
    pub valid: bool,
    pub failure: Option<String>,
    pub metrics: Metrics,
    pub per_attribute: BTreeMap<String, Metrics>,
}

impl MetricReport {
    /// Score `pred` (one entry per frame, frame 1 included) against the
    /// dataset, skipping absent-target frames.
    pub fn from_predictions(dataset: &SequenceDataset, pred: &[Option<BBox>]) -> Result<Self> {
        if pred.len() != dataset.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} frames in `{}`",
                pred.len(),
                dataset.len(),
                dataset.name
            )));
        }
        let present: Vec<usize> = (0..dataset.len()).filter(|i| !dataset.is_absent(*i)).collect();
        let metrics = metrics_over(dataset, pred, &present)?;
        let mut per_attribute = BTreeMap::new();
        for (name, flags) in &dataset.flags {
            if ABSENCE_FLAGS.contains(&name.as_str()) {
                continue;
            }
            let frames: Vec<usize> = present.iter().copied().filter(|i| flags[*i]).collect();
            if !frames.is_empty() {
                per_attribute.insert(name.clone(), metrics_over(dataset, pred, &frames)?);
            }
        }
        Ok(Self {
            sequence: dataset.name.clone(),
            valid: true,
            failure: None,
            metrics,
            per_attribute,
        })
    }
}

fn metrics_over(dataset: &SequenceDataset, pred: &[Option<BBox>], frames: &[usize]) -> Result<Metrics> {
    let p: Vec<Option<BBox>> = frames.iter().map(|i| pred[*i]).collect();
    let g: Vec<BBox> = frames
        .iter()
        .map(|i| dataset.boxes[*i].expect("present frames have boxes"))
        .collect();
    compute_metrics(&p, &g)
}

/// Mean over sequences: curves average pointwise and the areas are taken
/// from the averaged curves, so `S` stays the mean of its 21 points.
pub fn aggregate(items: &[&Metrics]) -> Result<Metrics> {
    if items.is_empty() {
        return Err(Error::Empty("sequence reports"));
    }
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&Metrics) -> f64| items.iter().map(|m| f(m)).sum::<f64>() / n;
    let curve = |f: &dyn Fn(&Metrics) -> &Vec<f64>| -> Vec<f64> {
        (0..NUM_THRESHOLDS)
            .map(|k| items.iter().map(|m| f(m)[k]).sum::<f64>() / n)
            .collect()
    };
    let success_curve = curve(&|m| &m.success_curve);
    let np_curve = curve(&|m| &m.np_curve);
    Ok(Metrics {
        frames: items.iter().map(|m| m.frames).sum(),
        s: success_curve.iter().sum::<f64>() / NUM_THRESHOLDS as f64,
        np: np_curve.iter().sum::<f64>() / NUM_THRESHOLDS as f64,
        success_curve,
        np_curve,
        p: mean(&|m| m.p),
        ao: mean(&|m| m.ao),
        sr_050: mean(&|m| m.sr_050),
        sr_075: mean(&|m| m.sr_075),
    })
}

/// Reports for a set of sequences, in dataset order, plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sequences: Vec<MetricReport>,
    pub overall: Metrics,
    pub per_attribute: BTreeMap<String, Metrics>,
}

impl EvaluationReport {
    pub fn new(sequences: Vec<MetricReport>) -> Result<Self> {
        let overall = aggregate(&sequences.iter().map(|r| &r.metrics).collect::<Vec<_>>())?;
        let mut grouped: BTreeMap<String, Vec<&Metrics>> = BTreeMap::new();
        for r in &sequences {
            for (name, m) in &r.per_attribute {
                grouped.entry(name.clone()).or_default().push(m);
            }
        }
        let per_attribute = grouped
            .into_iter()
            .map(|(k, v)| aggregate(&v).map(|m| (k, m)))
            .collect::<Result<_>>()?;
        Ok(Self {
            sequences,
            overall,
            per_attribute,
        })
    }

    pub fn all_valid(&self) -> bool {
        self.sequences.iter().all(|r| r.valid)
    }

    /// One row per sequence followed by an `ALL` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["sequence", "frames", "valid", "S", "P", "NP", "AO", "SR_050", "SR_075"])
            .map_err(csv_err)?;
        let row = |name: &str, valid: bool, m: &Metrics| -> Vec<String> {
            vec![
                name.to_string(),
                m.frames.to_string(),
                valid.to_string(),
                m.s.to_string(),
                m.p.to_string(),
                m.np.to_string(),
                m.ao.to_string(),
                m.sr_050.to_string(),
                m.sr_075.to_string(),
            ]
        };
        for r in &self.sequences {
            w.write_record(row(&r.sequence, r.valid, &r.metrics)).map_err(csv_err)?;
        }
        w.write_record(row("ALL", self.all_valid(), &self.overall)).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv()?.as_bytes())?;
        write_atomic(json_path, self.to_json()?.as_bytes())
    }
}
