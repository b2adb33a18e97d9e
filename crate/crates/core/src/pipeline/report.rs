//! CSV and markdown metric tables with static reference rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::metrics::MetricReport;

pub const CSV_HEADER: &str = "method,ssim,psnr,fid,lpips,source";
pub const REFERENCE_SOURCE: &str = "paper-reported, not reproduced";
pub const COMPUTED_SOURCE: &str = "computed";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    pub source: String,
}

impl ReportRow {
    pub fn computed(r: &MetricReport) -> Self {
        Self {
            method: format!("this run (n={})", r.n_pairs),
            ssim: Some(r.ssim),
            psnr: Some(r.psnr),
            fid: Some(r.fid),
            lpips: Some(r.lpips),
            source: COMPUTED_SOURCE.into(),
        }
    }

    fn reference(method: &str, ssim: f64, psnr: f64, fid: f64, lpips: Option<f64>) -> Self {
        Self {
            method: method.into(),
            ssim: Some(ssim),
            psnr: Some(psnr),
            fid: Some(fid),
            lpips,
            source: REFERENCE_SOURCE.into(),
        }
    }

    /// Published CVUSA numbers, kept for context only; the computed row uses proxy backbones.
    pub fn references() -> Vec<Self> {
        vec![
            Self::reference("CrossViewDiff", 0.371, 12.000, 23.67, None),
            Self::reference("Sat2Density", 0.339, 14.229, 41.43, None),
            Self::reference("Hybrid diffusion + cGAN (published)", 0.3464, 13.41, 40.32, Some(0.6305)),
        ]
    }

    fn cells(&self) -> [String; 4] {
        let f = |v: Option<f64>, p: usize| v.map_or_else(String::new, |v| format!("{v:.p$}"));
        [f(self.ssim, 4), f(self.psnr, 3), f(self.fid, 4), f(self.lpips, 4)]
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows.iter().cloned().chain(ReportRow::references()) {
        let c = r.cells();
        let _ = writeln!(out, "{},{},{},{},{},{}", csv_field(&r.method), c[0], c[1], c[2], c[3], csv_field(&r.source));
    }
    out
}

pub fn render_markdown(rows: &[ReportRow], warning: Option<&str>) -> String {
    let mut out = String::from("| Method | SSIM ↑ | PSNR ↑ | FID-proxy ↓ | LPIPS-proxy ↓ | Source |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in rows.iter().cloned().chain(ReportRow::references()) {
        let c = r.cells().map(|s| if s.is_empty() { "-".to_string() } else { s });
        let _ = writeln!(out, "| {} | {} | {} | {} | {} | {} |", r.method, c[0], c[1], c[2], c[3], r.source);
    }
    out.push_str(
        "\nComputed FID and LPIPS columns use a fixed-seed random-feature embedder; \
         they are not comparable with the reference rows, which report Inception- and \
         learned-feature metrics on the full CVUSA test set.\n",
    );
    if let Some(w) = warning {
        let _ = writeln!(out, "\nWarning: {w}");
    }
    out
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow], warning: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), render_csv(rows))?;
    fs::write(dir.join("report.md"), render_markdown(rows, warning))?;
    Ok(())
}

/// Re-renders the report files from a saved `metrics.json`.
pub fn report_from_metrics(dir: &Path) -> Result<MetricReport> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|_| crate::Error::MissingFile(path.clone()))?;
    let m: MetricReport = serde_json::from_str(&text)?;
    write_report(dir, &[ReportRow::computed(&m)], m.warning.as_deref())?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_computed_then_reference_rows() {
        let m = MetricReport { ssim: 1.0, psnr: 100.0, fid: 0.0, lpips: 0.0, n_pairs: 4, warning: None };
        let csv = render_csv(&[ReportRow::computed(&m)]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "this run (n=4),1.0000,100.000,0.0000,0.0000,computed");
        assert_eq!(lines.len(), 5);
        assert!(lines[2..].iter().all(|l| l.ends_with("\"paper-reported, not reproduced\"")));
        assert_eq!(lines[4], "Hybrid diffusion + cGAN (published),0.3464,13.410,40.3200,0.6305,\"paper-reported, not reproduced\"");
        assert!(lines[2].starts_with("CrossViewDiff,0.3710,12.000,23.6700,,"));
    }

    #[test]
    fn markdown_marks_missing_and_warning() {
        let md = render_markdown(&[], Some("few pairs"));
        assert!(md.contains("| CrossViewDiff | 0.3710 | 12.000 | 23.6700 | - |"));
        assert!(md.trim_end().ends_with("Warning: few pairs"));
    }
}
