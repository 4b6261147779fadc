//! Checkpoint evaluation and results-table reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::metrics::{report_csv, report_markdown, ConfusionMatrix, ReportColumn, Summary};

use super::checkpoint::Checkpoint;
use super::trainer::evaluate_samples;

/// Scores of one configuration on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Column label, `<variant>_<loss>`.
    pub label: String,
    pub split: String,
    pub summary: Summary,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn new(label: impl Into<String>, split: impl Into<String>, confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self { label: label.into(), split: split.into(), summary: confusion.summary()?, confusion })
    }

    pub fn column(&self) -> ReportColumn {
        ReportColumn { label: self.label.clone(), summary: self.summary.clone() }
    }

    pub fn markdown(&self) -> String {
        report_markdown(&[self.column()])
    }

    pub fn csv(&self) -> String {
        report_csv(&[self.column()])
    }

    pub fn metrics_file(split: &str) -> String {
        format!("{split}_metrics.json")
    }
}

/// Writes `<split>_metrics.json`, `report.md` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::State(e.to_string()))?;
    fs::write(dir.join(EvalReport::metrics_file(&report.split)), json)?;
    fs::write(dir.join("report.md"), report.markdown())?;
    fs::write(dir.join("report.csv"), report.csv())?;
    Ok(())
}

/// Loads a checkpoint and scores it in eval mode on `samples`.
pub fn evaluate_checkpoint(
    path: &Path,
    samples: &[SegmentationSample],
    label: &str,
    split: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    let mut model = Checkpoint::load(path)?.restore_model()?;
    let (_, cm) = evaluate_samples(&mut model, samples, None)?;
    EvalReport::new(label, split, cm)
}

/// Collects `<split>_metrics.json` from each run directory, in the order given.
pub fn collect_runs(dirs: &[impl AsRef<Path>], split: &str) -> Result<Vec<EvalReport>> {
    dirs.iter()
        .map(|d| {
            let path = d.as_ref().join(EvalReport::metrics_file(split));
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// One results table over several runs: `(markdown, csv)`.
pub fn merge_reports(reports: &[EvalReport]) -> (String, String) {
    let cols: Vec<ReportColumn> = reports.iter().map(EvalReport::column).collect();
    (report_markdown(&cols), report_csv(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label: &str, pred: &[u8]) -> EvalReport {
        let mut cm = ConfusionMatrix::new(10);
        cm.accumulate(pred, &[0, 1, 2, 9]).unwrap();
        EvalReport::new(label, "test", cm).unwrap()
    }

    #[test]
    fn write_collect_merge() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_report(&a, &report("V_U-Net_ce", &[0, 1, 2, 9])).unwrap();
        write_report(&b, &report("V_DeU-Net_ce", &[0, 1, 1, 0])).unwrap();
        let runs = collect_runs(&[&a, &b], "test").unwrap();
        assert_eq!(runs[0], report("V_U-Net_ce", &[0, 1, 2, 9]));
        let (md, csv) = merge_reports(&runs);
        let header = md.lines().next().unwrap();
        assert!(header.find("V_U-Net_ce Acc").unwrap() < header.find("V_DeU-Net_ce Acc").unwrap());
        assert!(csv.contains("V_DeU-Net_ce,Lanemark,0.0000,0.0000"));
        assert!(collect_runs(&[dir.path().join("missing")], "test").is_err());
    }
}
