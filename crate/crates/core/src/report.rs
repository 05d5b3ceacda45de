//! Markdown and CSV rendering of accuracy, gap, ablation and caption-metric tables.
//! Output depends only on its inputs, so identical runs give identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::capmetrics::MetricReport;
use crate::directqa::GapRow;
use crate::ingest::Category;
use crate::sns::{CategoryAccuracy, Pct};

/// Columns for a set of accuracy tables: the four benchmark categories in their
/// fixed order (when present), then any other categories, then overall.
fn columns<'a, I>(tables: I) -> (Vec<Category>, Vec<&'static str>)
where
    I: IntoIterator<Item = &'a CategoryAccuracy>,
{
    let present: BTreeSet<Category> = tables
        .into_iter()
        .flat_map(|t| t.per_category.keys().cloned())
        .collect();
    let mut missing = Vec::new();
    let mut cols = Vec::new();
    for c in Category::STANDARD_ORDER.iter() {
        if present.contains(c) {
            cols.push(c.clone());
        } else {
            missing.push(column_label(c));
        }
    }
    cols.extend(present.into_iter().filter(|c| matches!(c, Category::Other(_))));
    (cols, missing)
}

fn column_label(c: &Category) -> &'static str {
    match c {
        Category::RelDir => "Rel. Dir.",
        Category::RelDist => "Rel. Dist.",
        Category::ApprOrder => "Appr. Order",
        Category::RoutePlan => "Route Plan.",
        Category::Other(_) => "other",
    }
}

fn omitted_note(out: &mut String, missing: &[&str]) {
    if !missing.is_empty() {
        let _ = writeln!(out, "\nNote: no questions in {}; column omitted.", missing.join(", "));
    }
}

/// One row per `(label, table)`; cells show the percentage.
pub fn accuracy_markdown(rows: &[(String, &CategoryAccuracy)]) -> String {
    let (cols, missing) = columns(rows.iter().map(|(_, t)| *t));
    let mut out = String::from("| Model |");
    for c in &cols {
        let _ = write!(out, " {} |", c.label());
    }
    out.push_str(" Overall |\n|---|");
    out.push_str(&"---|".repeat(cols.len() + 1));
    out.push('\n');
    for (label, t) in rows {
        let _ = write!(out, "| {label} |");
        for c in &cols {
            match t.per_category.get(c) {
                Some(tally) => {
                    let _ = write!(out, " {} |", tally.pct);
                }
                None => out.push_str(" - |"),
            }
        }
        let _ = writeln!(out, " {} |", t.overall.pct);
    }
    omitted_note(&mut out, &missing);
    out
}

/// Long-form CSV: one line per (row, category) with raw counts.
pub fn accuracy_csv(rows: &[(String, &CategoryAccuracy)]) -> String {
    let (cols, _) = columns(rows.iter().map(|(_, t)| *t));
    let mut out = String::from("model,category,correct,total,pct\n");
    for (label, t) in rows {
        for c in &cols {
            if let Some(tally) = t.per_category.get(c) {
                let _ = writeln!(out, "{},{},{},{},{}", csv_field(label), c.as_str(), tally.correct, tally.total, tally.pct);
            }
        }
        let o = &t.overall;
        let _ = writeln!(out, "{},overall,{},{},{}", csv_field(label), o.correct, o.total, o.pct);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn gap_key(row: &GapRow) -> Option<&Category> {
    row.category.as_ref()
}

/// Direct-versus-narrative table with `direct / sns (±gap)` cells.
pub fn gap_markdown(rows: &[(String, Vec<GapRow>)]) -> String {
    let mut cats: BTreeSet<Category> = BTreeSet::new();
    for (_, r) in rows {
        cats.extend(r.iter().filter_map(gap_key).cloned());
    }
    let mut cols: Vec<Category> = Category::STANDARD_ORDER.iter().filter(|c| cats.contains(c)).cloned().collect();
    let missing: Vec<&str> = Category::STANDARD_ORDER
        .iter()
        .filter(|c| !cats.contains(c))
        .map(column_label)
        .collect();
    cols.extend(cats.iter().filter(|c| matches!(c, Category::Other(_))).cloned());

    let mut out = String::from("| Model |");
    for c in &cols {
        let _ = write!(out, " {} |", c.label());
    }
    out.push_str(" Overall |\n|---|");
    out.push_str(&"---|".repeat(cols.len() + 1));
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "| {label} |");
        for c in &cols {
            match r.iter().find(|g| g.category.as_ref() == Some(c)) {
                Some(g) => {
                    let _ = write!(out, " {} |", g.cell());
                }
                None => out.push_str(" - |"),
            }
        }
        match r.iter().find(|g| g.category.is_none()) {
            Some(g) => {
                let _ = writeln!(out, " {} |", g.cell());
            }
            None => out.push_str(" - |\n"),
        }
    }
    omitted_note(&mut out, &missing);
    out
}

pub fn gap_csv(rows: &[(String, Vec<GapRow>)]) -> String {
    let mut out = String::from("model,category,direct,sns,gap\n");
    for (label, r) in rows {
        for g in r {
            let cat = g.category.as_ref().map_or("overall", |c| c.as_str());
            let _ = writeln!(out, "{},{cat},{},{},{}", csv_field(label), g.direct, g.sns, g.gap.signed());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    SegmentLength,
    ProxyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    /// Mean segments per video, recomputed from the plans (segment-length ablation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_segments: Option<f64>,
    pub score: Option<Pct>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub knob: Knob,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = match self.knob {
            Knob::SegmentLength => String::from("| Frames per Seg. | Num. of Segments | SNS |\n|---|---|---|\n"),
            Knob::ProxyModel => String::from("| Proxy LLM | SNS |\n|---|---|\n"),
        };
        for r in &self.rows {
            let score = match (&r.score, &r.error) {
                (Some(p), _) => p.to_string(),
                (None, Some(_)) => "failed".into(),
                (None, None) => "-".into(),
            };
            match self.knob {
                Knob::SegmentLength => {
                    let segs = r.mean_segments.map_or("-".into(), |m| format!("{m:.1}"));
                    let _ = writeln!(out, "| {} | {segs} | {score} |", r.value);
                }
                Knob::ProxyModel => {
                    let _ = writeln!(out, "| {} | {score} |", r.value);
                }
            }
        }
        let failures: Vec<_> = self.rows.iter().filter_map(|r| r.error.as_ref().map(|e| (&r.value, e))).collect();
        if !failures.is_empty() {
            out.push('\n');
            for (v, e) in failures {
                let _ = writeln!(out, "Failed `{v}`: {e}");
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = match self.knob {
            Knob::SegmentLength => String::from("frames_per_segment,mean_segments,sns,error\n"),
            Knob::ProxyModel => String::from("proxy,sns,error\n"),
        };
        for r in &self.rows {
            let score = r.score.map(|p| p.to_string()).unwrap_or_default();
            let err = r.error.as_deref().map(csv_field).unwrap_or_default();
            match self.knob {
                Knob::SegmentLength => {
                    let segs = r.mean_segments.map(|m| format!("{m:.1}")).unwrap_or_default();
                    let _ = writeln!(out, "{},{segs},{score},{err}", csv_field(&r.value));
                }
                Knob::ProxyModel => {
                    let _ = writeln!(out, "{},{score},{err}", csv_field(&r.value));
                }
            }
        }
        out
    }
}

pub fn metrics_markdown(label: &str, r: &MetricReport) -> String {
    let spice = r.spice.map_or("NA".to_string(), |s| format!("{s:.2}"));
    format!(
        "METEOR: exact-match only; ROUGE-L beta = {}; SPICE not computed.\n\n| Model | SPICE | ROUGE-L | BLEU-2 | METEOR |\n|---|---|---|---|---|\n| {label} | {spice} | {:.2} | {:.2} | {:.2} |\n",
        r.rouge_beta, r.rouge_l, r.bleu_2, r.meteor
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1() -> CategoryAccuracy {
        CategoryAccuracy::from_counts(&[
            (Category::RelDir, 20, 50),
            (Category::RelDist, 23, 50),
            (Category::ApprOrder, 34, 49),
            (Category::RoutePlan, 24, 49),
        ])
        .unwrap()
    }

    #[test]
    fn markdown_uses_fixed_column_order() {
        let t = table1();
        let md = accuracy_markdown(&[("CaMo-3B".into(), &t)]);
        assert_eq!(
            md,
            "| Model | Rel. Dir. | Rel. Dist. | Appr. Order | Route Plan. | Overall |\n|---|---|---|---|---|---|\n| CaMo-3B | 40.0 | 46.0 | 69.4 | 49.0 | 51.0 |\n"
        );
        assert_eq!(md, accuracy_markdown(&[("CaMo-3B".into(), &t)]));
    }

    #[test]
    fn empty_category_is_omitted_with_note() {
        let t = CategoryAccuracy::from_counts(&[(Category::RelDir, 1, 2), (Category::ApprOrder, 2, 2)]).unwrap();
        let md = accuracy_markdown(&[("m".into(), &t)]);
        assert!(md.starts_with("| Model | Rel. Dir. | Appr. Order | Overall |"));
        assert!(md.contains("Note: no questions in Rel. Dist., Route Plan.; column omitted."));
    }

    #[test]
    fn csv_has_counts() {
        let csv = accuracy_csv(&[("m".into(), &table1())]);
        assert!(csv.starts_with("model,category,correct,total,pct\nm,rel_dir,20,50,40.0\n"));
        assert!(csv.ends_with("m,overall,101,198,51.0\n"));
    }

    #[test]
    fn gap_table_cells() {
        let rows = vec![GapRow::new(None, Pct(460), Pct(328))];
        let md = gap_markdown(&[("SpatialLadder".into(), rows.clone())]);
        assert!(md.contains("| SpatialLadder | 46.0 / 32.8 (-13.2) |"));
        assert!(gap_csv(&[("SpatialLadder".into(), rows)]).contains("SpatialLadder,overall,46.0,32.8,-13.2"));
    }

    #[test]
    fn ablation_rendering() {
        let t = AblationTable {
            knob: Knob::SegmentLength,
            rows: vec![
                AblationRow { value: "16".into(), mean_segments: Some(12.4), score: Some(Pct(510)), error: None },
                AblationRow { value: "24".into(), mean_segments: None, score: None, error: Some("boom".into()) },
            ],
        };
        let md = t.to_markdown();
        assert!(md.contains("| 16 | 12.4 | 51.0 |"));
        assert!(md.contains("| 24 | - | failed |"));
        assert!(t.to_csv().contains("16,12.4,51.0,\n24,,,boom\n"));
    }
}
