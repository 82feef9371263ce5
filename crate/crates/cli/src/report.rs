//! Report rendering: JSON files, aligned text tables and CSV.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use groundconv::eval::{DatasetStats, RoundtripReport, TurnScore};
use groundconv::{ClassScores, CorpusSummary};
use serde::Serialize;

/// Left-aligned first column, right-aligned value columns.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(ncol) {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(rule.iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Fraction in `[0, 1]` shown as a percentage with one decimal.
pub fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

/// Value already in `[0, 100]`.
pub fn pct100(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

/// Pretty JSON followed by a newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// `report.json` → `report.txt`.
pub fn table_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("txt")
}

/// Writes the JSON report and its text table next to it.
pub fn write_report<T: Serialize>(path: &Path, value: &T, table: &str) -> Result<()> {
    std::fs::write(path, to_json(value)?).with_context(|| format!("writing {}", path.display()))?;
    let txt = table_path(path);
    std::fs::write(&txt, table).with_context(|| format!("writing {}", txt.display()))?;
    Ok(())
}

/// Lexical evaluation of one dataset against pseudo-references.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub n_conversations: usize,
    pub n_scored_turns: usize,
    pub missing_references: usize,
    pub unscorable_references: usize,
    pub scores: ClassScores,
    pub stats: Option<DatasetStats>,
    pub turns: Vec<TurnScore>,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        let s = &self.scores;
        let mut header = vec!["", "F1 A", "F1 UA", "F1 HM", "Cls A", "Cls UA", "Cls HM"];
        let mut row = vec![
            "dataset".to_string(),
            pct(s.f1_answerable),
            pct(s.f1_unanswerable),
            pct(Some(s.f1_hm)),
            pct(s.cls_acc_a),
            pct(s.cls_acc_ua),
            pct(Some(s.cls_acc_hm)),
        ];
        if let Some(st) = &self.stats {
            header.extend(["Has ans", "Extracted", "Faithful"]);
            row.extend([pct100(st.pct_has_answer), pct100(st.pct_extracted), pct(st.mean_faithfulness)]);
        }
        let mut out = render_table(&header, &[row]);
        out.push_str(&format!(
            "turns scored: {} (A {}, UA {}); missing references: {}\n",
            self.n_scored_turns, s.n_a, s.n_ua, self.missing_references
        ));
        out
    }

    /// Per-turn scores as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        for t in &self.turns {
            w.serialize(t)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn stats_table(st: &DatasetStats) -> String {
    let mut header = vec!["", "Turns", "Answered", "Has ans", "Extracted", "Faithful"];
    let mut row = vec![
        "dataset".to_string(),
        st.n_agent_turns.to_string(),
        st.n_answered.to_string(),
        pct100(st.pct_has_answer),
        pct100(st.pct_extracted),
        pct(st.mean_faithfulness),
    ];
    if st.wecheck_mean.is_some() {
        header.push("Consistency");
        row.push(pct(st.wecheck_mean));
    }
    render_table(&header, &[row])
}

pub fn roundtrip_table(r: &RoundtripReport) -> String {
    let p = &r.per_class;
    let mut out = render_table(
        &["", "F1 A", "F1 UA", "F1 HM", "Std %", "Cls A", "Cls UA"],
        &[vec![
            "roundtrip".to_string(),
            pct(p.f1_answerable),
            pct(p.f1_unanswerable),
            pct(Some(r.mean_f1_hm)),
            format!("{:.1}", r.std_pct),
            pct(p.cls_acc_a),
            pct(p.cls_acc_ua),
        ]],
    );
    out.push_str(&format!(
        "cycles: {}; retried rounds: {}; skipped rounds: {}\n",
        r.cycles.len(),
        r.retried_rounds,
        r.skipped_rounds
    ));
    out
}

pub fn generation_summary(algorithm: &str, s: &CorpusSummary) -> String {
    let mut rows = vec![
        vec!["attempted".to_string(), s.attempted.to_string()],
        vec!["succeeded".to_string(), s.succeeded.to_string()],
        vec!["failed".to_string(), s.failed.to_string()],
    ];
    for (kind, n) in &s.anomalies {
        rows.push(vec![format!("anomaly {kind}"), n.to_string()]);
    }
    let mut out = format!("algorithm {algorithm}\n");
    out.push_str(&render_table(&["", "count"], &rows));
    if s.cancelled {
        out.push_str("interrupted: remaining documents were not started\n");
    }
    out
}
