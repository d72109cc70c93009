use std::fmt::Write as _;

use crate::data::{MATERIALS, MULTICLASS};
use crate::error::{Error, Result};

/// One line of a compression report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// IoU per class including background; `None` for an empty union.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub size_mb: f64,
    /// Whether `size_mb` exceeds the configured budget.
    pub over_budget: bool,
}

/// `(value - baseline) / baseline` in percent; `None` when the baseline is zero
/// and the value is not.
pub fn relative_change_pct(value: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        return (value == 0.0).then_some(0.0);
    }
    Some((value - baseline) / baseline * 100.0)
}

/// Two-decimal signed percentage: `-1.53%`, `+0.28%`, `0.00%`.
pub fn format_pct(pct: Option<f64>) -> String {
    match pct {
        None => "n/a".into(),
        Some(p) => {
            let s = format!("{p:.2}");
            match s.as_str() {
                "0.00" | "-0.00" => "0.00%".into(),
                _ if p > 0.0 => format!("+{s}%"),
                _ => format!("{s}%"),
            }
        }
    }
}

fn iou_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

struct Cells {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn cells(rows: &[ReportRow]) -> Result<Cells> {
    let base = rows.first().ok_or_else(|| Error::invalid("report with no rows"))?;
    let classes = base.per_class_iou.len();
    if rows.iter().any(|r| r.per_class_iou.len() != classes) {
        return Err(Error::shape("report rows disagree on the number of classes"));
    }
    let materials = classes == MULTICLASS;
    let mut header: Vec<String> = vec!["Model".into()];
    if materials {
        header.extend(MATERIALS.iter().map(|m| m.to_string()));
    }
    header.extend(["mIoU", "Size (MB)", "ΔmIoU %", "ΔSize %"].map(String::from));
    let body = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.label.clone()];
            if materials {
                line.extend(r.per_class_iou[1..].iter().map(|&v| iou_cell(v)));
            }
            let size = format!("{:.2}{}", r.size_mb, if r.over_budget { "*" } else { "" });
            line.extend([
                format!("{:.3}", r.miou),
                size,
                format_pct(relative_change_pct(r.miou, base.miou)),
                format_pct(relative_change_pct(r.size_mb, base.size_mb)),
            ]);
            line
        })
        .collect();
    Ok(Cells { header, rows: body })
}

/// Aligned text table; deltas are relative to the first row. Sizes over
/// budget are marked with `*`.
pub fn report_table(rows: &[ReportRow]) -> Result<String> {
    let c = cells(rows)?;
    let widths: Vec<usize> = (0..c.header.len())
        .map(|i| {
            std::iter::once(&c.header)
                .chain(&c.rows)
                .map(|r| r[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, r: &[String]| {
        for (i, (cell, w)) in r.iter().zip(&widths).enumerate() {
            let pad = w - cell.chars().count();
            if i == 0 {
                let _ = write!(out, "{cell}{}", " ".repeat(pad));
            } else {
                let _ = write!(out, "  {}{cell}", " ".repeat(pad));
            }
        }
        out.push('\n');
    };
    line(&mut out, &c.header);
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in &c.rows {
        line(&mut out, r);
    }
    if rows.iter().any(|r| r.over_budget) {
        out.push_str("* exceeds the size budget\n");
    }
    Ok(out)
}

/// Published full-scale results kept beside the desk report:
/// `(model, stage, baseline MB, compressed MB)`.
pub const REFERENCE_ROWS: [(&str, &str, f64, f64); 2] =
    [("BiSeNet", "quantized", 13.38, 3.21), ("ICNet", "quantized", 189.96, 90.69)];

/// [`REFERENCE_ROWS`] with size changes computed by the same convention as
/// the desk rows.
pub fn reference_table() -> String {
    let mut out = String::from("Full-scale reference (published sizes)\n");
    let _ = writeln!(out, "{:<8}  {:<9}  {:>13}  {:>9}  {:>8}", "Model", "Stage", "Baseline (MB)", "Size (MB)", "ΔSize %");
    for (model, stage, base, size) in REFERENCE_ROWS {
        let _ = writeln!(
            out,
            "{model:<8}  {stage:<9}  {base:>13.2}  {size:>9.2}  {:>8}",
            format_pct(relative_change_pct(size, base))
        );
    }
    out
}

/// Machine-readable form of [`report_table`] with unrounded values.
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let base = rows.first().ok_or_else(|| Error::invalid("report with no rows"))?;
    let classes = base.per_class_iou.len();
    let mut out = String::from("label");
    for c in 0..classes {
        let _ = write!(out, ",iou_{c}");
    }
    out.push_str(",miou,size_mb,delta_miou_pct,delta_size_pct,over_budget\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for r in rows {
        if r.per_class_iou.len() != classes {
            return Err(Error::shape("report rows disagree on the number of classes"));
        }
        let _ = write!(out, "{}", r.label);
        for &v in &r.per_class_iou {
            let _ = write!(out, ",{}", opt(v));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            r.miou,
            r.size_mb,
            opt(relative_change_pct(r.miou, base.miou)),
            opt(relative_change_pct(r.size_mb, base.size_mb)),
            r.over_budget
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, miou: f64, size: f64) -> ReportRow {
        ReportRow {
            label: label.into(),
            per_class_iou: vec![Some(0.9), Some(0.5), None, Some(0.25), Some(1.0)],
            miou,
            size_mb: size,
            over_budget: false,
        }
    }

    #[test]
    fn deltas_follow_percentage_of_baseline() {
        assert_eq!(format_pct(relative_change_pct(0.707, 0.718)), "-1.53%");
        // -76.009; a printed -76.02% needs the size before its own rounding
        assert_eq!(format_pct(relative_change_pct(3.21, 13.38)), "-76.01%");
        assert_eq!(format_pct(relative_change_pct(0.72, 0.72)), "0.00%");
        assert_eq!(format_pct(relative_change_pct(1.0, 0.0)), "n/a");
        assert_eq!(format_pct(Some(7.481)), "+7.48%");
        assert_eq!(format_pct(Some(-0.001)), "0.00%");
    }

    #[test]
    fn table_layout() {
        let t = report_table(&[row("baseline", 0.718, 13.38), row("quantized", 0.707, 3.21)]).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Model"));
        assert!(lines[0].contains("Aluminium") && lines[0].contains("Nylon"));
        assert!(lines[2].contains("0.500") && lines[2].contains(" - ") && lines[2].contains("13.38"));
        assert!(lines[3].ends_with("-1.53%  -76.01%"));
        assert!(lines[2].ends_with("0.00%    0.00%"));
        assert!(report_table(&[]).is_err());
    }

    #[test]
    fn reference_rows_use_the_desk_convention() {
        let t = reference_table();
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().nth(2).unwrap().ends_with("13.38       3.21   -76.01%"));
        assert!(t.lines().nth(3).unwrap().ends_with("-52.26%"));
    }

    #[test]
    fn binary_mode_omits_material_columns() {
        let mut r = row("baseline", 0.8, 0.06);
        r.per_class_iou = vec![Some(0.9), Some(0.7)];
        r.over_budget = true;
        let t = report_table(&[r]).unwrap();
        assert!(!t.contains("Aluminium"));
        assert!(t.contains("0.06*"));
        assert!(t.ends_with("* exceeds the size budget\n"));
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let csv = report_csv(&[row("baseline", 0.718, 13.38), row("pruned", 0.7, 9.366)]).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("baseline,0.9,0.5,,0.25,1,0.718,13.38,0,0,false"));
    }
}
