//! Loss and IoU learning curves as a standalone SVG.

use std::fmt::Write as _;

use super::checkpoint::EpochRecord;

const W: f64 = 420.0;
const H: f64 = 260.0;
const PAD: f64 = 40.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn panel(out: &mut String, x0: f64, title: &str, series: &[Series<'_>], y_max: Option<f64>) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let e_max = pts.clone().map(|p| p.0).fold(1.0, f64::max);
    let v_max = y_max.unwrap_or_else(|| pts.map(|p| p.1).fold(1e-9, f64::max) * 1.05);
    let sx = |e: f64| x0 + PAD + (e - 1.0) / (e_max - 1.0).max(1.0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v / v_max).clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        x0 + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(out, r#"<text x="{}" y="24" font-size="13">{title}</text>"#, x0 + PAD);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">epoch</text>"#, x0 + W / 2.0 - 14.0, H - 10.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{v_max:.3}</text>"#, x0 + 2.0, PAD + 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">0</text>"#, x0 + PAD - 12.0, H - PAD);
    for (k, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let path: Vec<String> = s.points.iter().map(|&(e, v)| format!("{:.1},{:.1}", sx(e), sy(v))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            path.join(" ")
        );
        let ly = PAD + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" font-size="10" fill="{}">{}</text>"#,
            x0 + W - PAD - 70.0,
            s.color,
            s.label
        );
    }
}

/// Two panels: train/val loss and val/train macro-mIoU against epoch.
pub fn svg(history: &[EpochRecord]) -> String {
    let series = |label, color, f: fn(&EpochRecord) -> Option<f32>| Series {
        label,
        color,
        points: history.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v as f64))).collect(),
    };
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" font-family="sans-serif">"#,
        2.0 * W
    );
    out.push('\n');
    panel(
        &mut out,
        0.0,
        "loss",
        &[series("train", "#1f77b4", |r| Some(r.train_loss)), series("val", "#d62728", |r| r.val_loss)],
        None,
    );
    panel(
        &mut out,
        W,
        "macro mIoU",
        &[series("val", "#d62728", |r| r.val_miou), series("train", "#1f77b4", |r| r.train_miou)],
        Some(1.0),
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_present_series() {
        let h: Vec<EpochRecord> = (1..=3)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f32,
                val_loss: Some(1.2 / e as f32),
                val_miou: Some(0.2 * e as f32),
                train_miou: None,
                lr: 1e-4,
            })
            .collect();
        let s = svg(&h);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 3);
        assert_eq!(svg(&[]).matches("<polyline").count(), 0);
    }
}
