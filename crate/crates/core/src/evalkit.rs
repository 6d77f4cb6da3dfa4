//! Confusion matrices, IoU and run reports.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// `K × K` counts, rows = ground truth, cols = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds `pred` against `gt`, skipping pixels where `gt == ignore`.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::InvalidInput(format!(
                    "class id {} outside 0..{k}",
                    g.max(p)
                )));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "{} vs {} classes",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` where a class is absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub n_pixels: u64,
}

/// `IoU_c = TP/(TP+FP+FN)`; classes with empty union are left out of the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let k = cm.classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).map(|p| cm.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|g| cm.get(g, c)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidInput(
            "mIoU of an empty confusion matrix is undefined".into(),
        ));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport {
        per_class,
        miou,
        n_pixels: cm.total(),
    })
}

impl IouReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (c, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => s.push_str(&format!("{c},{v:.6}\n")),
                None => s.push_str(&format!("{c},\n")),
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
