use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{AgreementReport, ConfusionMatrix, CvReport, RocCurve};
use crate::cohort::{OutcomeLabel, RocGroup};

/// One line of the model comparison table. Rows for learners not built
/// here can be supplied directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub model: String,
    pub accuracy: f64,
    pub standard_deviation: f64,
    pub runtime_seconds: Option<f64>,
}

impl Table2Row {
    pub fn from_report(report: &CvReport) -> Self {
        Self {
            model: report.kind.display_name().to_string(),
            accuracy: report.mean_accuracy,
            standard_deviation: report.sd_accuracy,
            runtime_seconds: Some(report.seconds),
        }
    }
}

fn fixed3(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "NA".into())
}

fn csv_error(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// `model,accuracy,standard_deviation,runtime_s`, three decimals.
pub fn write_table2_csv<W: Write>(rows: &[Table2Row], w: W) -> std::io::Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(["model", "accuracy", "standard_deviation", "runtime_s"])
        .map_err(csv_error)?;
    for r in rows {
        out.write_record([
            r.model.clone(),
            fixed3(Some(r.accuracy)),
            fixed3(Some(r.standard_deviation)),
            fixed3(r.runtime_seconds),
        ])
        .map_err(csv_error)?;
    }
    out.flush()
}

/// AUC per outcome group for one model; `None` where the AUC is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub model: String,
    pub auc: [Option<f64>; 4],
}

impl AucRow {
    pub fn from_curves(model: &str, curves: &[RocCurve]) -> Self {
        let mut auc = [None; 4];
        for c in curves {
            if let Some(i) = RocGroup::ALL.iter().position(|&g| g == c.group) {
                auc[i] = Some(c.auc);
            }
        }
        Self {
            model: model.to_string(),
            auc,
        }
    }
}

pub fn write_auc_table_csv<W: Write>(rows: &[AucRow], w: W) -> std::io::Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    let mut header = vec!["model".to_string()];
    header.extend(RocGroup::ALL.iter().map(|g| g.token().to_string()));
    out.write_record(&header).map_err(csv_error)?;
    for r in rows {
        let mut line = vec![r.model.clone()];
        line.extend(r.auc.iter().map(|&a| fixed3(a)));
        out.write_record(&line).map_err(csv_error)?;
    }
    out.flush()
}

/// Rows are predicted labels, columns true labels.
pub fn write_confusion_csv<W: Write>(m: &ConfusionMatrix, w: W) -> std::io::Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    let mut header = vec!["predicted".to_string()];
    header.extend(OutcomeLabel::ALL.iter().map(|l| l.token().to_string()));
    out.write_record(&header).map_err(csv_error)?;
    for (label, row) in OutcomeLabel::ALL.iter().zip(&m.counts) {
        let mut line = vec![label.token().to_string()];
        line.extend(row.iter().map(u64::to_string));
        out.write_record(&line).map_err(csv_error)?;
    }
    out.flush()
}

/// `fold,n_train,n_test,accuracy,seconds`; seconds become `NA` when timing
/// is excluded.
pub fn write_folds_csv<W: Write>(report: &CvReport, include_timing: bool, mut w: W) -> std::io::Result<()> {
    writeln!(w, "fold,n_train,n_test,accuracy,seconds")?;
    for f in &report.folds {
        let secs = if include_timing { fixed3(Some(f.seconds)) } else { "NA".into() };
        writeln!(w, "{},{},{},{:.6},{}", f.fold, f.n_train, f.n_test, f.accuracy, secs)?;
    }
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 480.0;
const M: f64 = 60.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"Helvetica\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<rect x=\"{M}\" y=\"{M}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * M,
        H - 2.0 * M
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_labels(s: &mut String, x: &str, y: &str) {
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 20.0, escape(x));
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y)
    );
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        M + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * M)
    }

    fn py(&self, y: f64) -> f64 {
        H - M - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * M)
    }

    fn ticks(&self, s: &mut String, n: usize) {
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let xv = self.x0 + t * (self.x1 - self.x0);
            let yv = self.y0 + t * (self.y1 - self.y0);
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{:.2}</text>",
                self.px(xv),
                H - M + 14.0,
                xv
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{:.2}</text>",
                M - 4.0,
                self.py(yv) + 3.0,
                yv
            );
        }
    }
}

/// ROC curves on one FPR/TPR chart with an AUC legend.
pub fn roc_svg(curves: &[RocCurve], title: &str) -> String {
    let mut s = svg_open(title);
    let f = Frame {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    f.ticks(&mut s, 5);
    axis_labels(&mut s, "False positive rate", "True positive rate");
    let _ = writeln!(
        s,
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>",
        f.px(0.0),
        f.py(0.0),
        f.px(1.0),
        f.py(1.0)
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let ly = f.py(0.0) - 14.0 * (curves.len() - i) as f64;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" fill=\"{color}\" text-anchor=\"end\">{} (AUC {:.2})</text>",
            f.px(1.0) - 6.0,
            escape(c.group.display_name()),
            c.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Mean-versus-difference scatter with the bias line and dotted limits of
/// agreement.
pub fn bland_altman_svg(report: &AgreementReport, title: &str) -> String {
    let mut s = svg_open(title);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (report.lower, report.upper);
    for p in &report.pairs {
        x0 = x0.min(p.mean);
        x1 = x1.max(p.mean);
        y0 = y0.min(p.difference);
        y1 = y1.max(p.difference);
    }
    if !(x1 > x0) {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad_x = 0.05 * (x1 - x0);
    let pad_y = 0.1 * (y1 - y0);
    let f = Frame {
        x0: x0 - pad_x,
        x1: x1 + pad_x,
        y0: y0 - pad_y,
        y1: y1 + pad_y,
    };
    f.ticks(&mut s, 5);
    axis_labels(&mut s, "Mean of actual and predicted (months)", "Actual − predicted (months)");
    for p in &report.pairs {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>",
            f.px(p.mean),
            f.py(p.difference)
        );
    }
    for (y, dash, label) in [
        (report.bias, "", format!("bias {:.2}", report.bias)),
        (report.upper, " stroke-dasharray=\"2 3\"", format!("+1.96 SD {:.2}", report.upper)),
        (report.lower, " stroke-dasharray=\"2 3\"", format!("−1.96 SD {:.2}", report.lower)),
    ] {
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{:.2}\" x2=\"{:.1}\" y2=\"{:.2}\" stroke=\"black\"{dash}/>",
            f.px(f.x0),
            f.py(y),
            f.px(f.x1),
            f.py(y)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
            f.px(f.x1) - 4.0,
            f.py(y) - 3.0,
            escape(&label)
        );
    }
    s.push_str("</svg>\n");
    s
}
