//! Confusion matrices and the segmentation scores derived from them.
//!
//! Everything is computed from one global matrix per split. Classes with an
//! empty union (absent from both prediction and truth) have no IoU and are
//! left out of every mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row labels of the results table, in class-id order.
pub const TABLE_CATEGORIES: [&str; 10] = [
    "Background",
    "Road",
    "Lanemark",
    "Curb",
    "Person",
    "Rider",
    "Vehicles",
    "Bicycle",
    "Motorcycle",
    "Traffic Sign",
];

/// `counts[t][p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { n: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn set(&mut self, truth: usize, pred: usize, count: u64) {
        self.counts[truth * self.n + pred] = count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    /// Adds one prediction/truth pair of equally sized label maps. Nothing is
    /// counted if any label is out of range.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c as usize >= self.n) {
            return Err(Error::Label(format!("class {bad} outside 0..{}", self.n)));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::dim(format!("cannot merge {}-class and {}-class matrices", self.n, other.n)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn true_pixels(&self, c: usize) -> u64 {
        (0..self.n).map(|p| self.get(c, p)).sum()
    }

    fn predicted_pixels(&self, c: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, c)).sum()
    }

    /// TP/(TP+FP+FN); `None` when the class never occurs in truth or prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.true_pixels(c) + self.predicted_pixels(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Recall TP/(TP+FN); `None` when the class has no true pixels.
    pub fn per_class_acc(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let support = self.true_pixels(c);
                (support > 0).then(|| self.get(c, c) as f64 / support as f64)
            })
            .collect()
    }

    pub fn summary(&self) -> Result<Summary> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetrics("confusion matrix is empty".into()));
        }
        let iou = self.per_class_iou();
        let acc = self.per_class_acc();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let macro_miou = defined.iter().sum::<f64>() / defined.len() as f64;
        let freq_weighted_iou = iou
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.map(|v| self.true_pixels(c) as f64 / total as f64 * v))
            .sum();
        let defined_acc: Vec<f64> = acc.iter().flatten().copied().collect();
        let mean_acc = defined_acc.iter().sum::<f64>() / defined_acc.len() as f64;
        Ok(Summary {
            per_class_iou: iou,
            per_class_acc: acc,
            macro_miou,
            freq_weighted_iou,
            mean_acc,
            overall_acc: self.trace() as f64 / total as f64,
            pixels: total,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    /// Unweighted mean over classes with a defined IoU.
    pub macro_miou: f64,
    /// IoU averaged with weights = share of true pixels.
    pub freq_weighted_iou: f64,
    /// Unweighted mean of defined per-class accuracies.
    pub mean_acc: f64,
    pub overall_acc: f64,
    pub pixels: u64,
}

/// One trained configuration's column pair in the results table.
#[derive(Clone, Debug)]
pub struct ReportColumn {
    pub label: String,
    pub summary: Summary,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_string(), |v| format!("{v:.2}"))
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

fn category(i: usize) -> String {
    TABLE_CATEGORIES.get(i).map_or_else(|| format!("class {i}"), |s| s.to_string())
}

/// Markdown table in the results-table layout: `Sr. #`, `Categories`, an
/// (Acc, IoU) column pair per configuration, one row per category, then
/// `Average mIOU` (pixel-weighted IoU, in the IoU column) and
/// `Average Accuracy` (overall pixel accuracy, in the Acc column). A final
/// `Macro mIOU` row gives the unweighted class mean, which the pixel-weighted
/// average hides on imbalanced data.
pub fn report_markdown(columns: &[ReportColumn]) -> String {
    let mut s = String::from("| Sr. # | Categories |");
    for c in columns {
        let _ = write!(s, " {0} Acc | {0} IoU |", c.label);
    }
    s.push_str("\n|---:|---|");
    s.push_str(&"---:|---:|".repeat(columns.len()));
    s.push('\n');
    let rows = columns.iter().map(|c| c.summary.per_class_iou.len()).max().unwrap_or(0);
    for r in 0..rows {
        let _ = write!(s, "| {} | {} |", r + 1, category(r));
        for c in columns {
            let acc = c.summary.per_class_acc.get(r).copied().flatten();
            let iou = c.summary.per_class_iou.get(r).copied().flatten();
            let _ = write!(s, " {} | {} |", cell(acc), cell(iou));
        }
        s.push('\n');
    }
    let averages: [(&str, fn(&Summary) -> (Option<f64>, Option<f64>)); 3] = [
        ("Average mIOU", |m| (None, Some(m.freq_weighted_iou))),
        ("Average Accuracy", |m| (Some(m.overall_acc), None)),
        ("Macro mIOU", |m| (None, Some(m.macro_miou))),
    ];
    for (name, f) in averages {
        let _ = write!(s, "| | {name} |");
        for c in columns {
            let (a, i) = f(&c.summary);
            let show = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.2}"));
            let _ = write!(s, " {} | {} |", show(a), show(i));
        }
        s.push('\n');
    }
    s
}

/// Long-format CSV: `config,category,acc,iou`; undefined values are empty.
pub fn report_csv(columns: &[ReportColumn]) -> String {
    let mut s = String::from("config,category,acc,iou\n");
    for c in columns {
        for (r, (acc, iou)) in c.summary.per_class_acc.iter().zip(&c.summary.per_class_iou).enumerate() {
            let _ = writeln!(s, "{},{},{},{}", c.label, category(r), csv_cell(*acc), csv_cell(*iou));
        }
        let m = &c.summary;
        let _ = writeln!(s, "{},average_macro,{:.4},{:.4}", c.label, m.mean_acc, m.macro_miou);
        let _ = writeln!(s, "{},average_pixel_weighted,{:.4},{:.4}", c.label, m.overall_acc, m.freq_weighted_iou);
    }
    s
}
