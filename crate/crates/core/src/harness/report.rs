use std::fmt::Write as _;

use super::experiment::Report;
use super::HarnessError;
use crate::metrics::LangScores;

/// A rendered table: aligned text and its TSV twin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub tsv: String,
}

/// One block of a report TSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TsvTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

const MISSING: &str = "FAILED";

/// One decimal place, the print convention of every table.
pub fn fmt1(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.1}"),
        None => MISSING.to_string(),
    }
}

pub fn round1(v: f64) -> f64 {
    format!("{v:.1}").parse().expect("formatted float parses")
}

fn tables(r: &Report) -> Vec<TsvTable> {
    let mut columns = r.regimes.clone();
    columns.push("Avg.".into());
    let mut main = TsvTable {
        title: format!("{} (median over {} runs)", r.metric, r.config.runs),
        columns,
        rows: Vec::new(),
    };
    for row in &r.rows {
        let mut cells: Vec<Option<f64>> = row.cells.iter().map(|c| c.median).collect();
        cells.push(row.aggregate);
        main.rows.push((row.label.clone(), cells));
    }
    for d in r.deltas.iter().filter(|d| d.label != r.baseline) {
        let mut cells = d.cells.clone();
        cells.push(d.aggregate);
        main.rows.push((format!("Δ {}", d.label), cells));
    }
    let mut out = vec![main];
    for (i, regime) in r.regimes.iter().enumerate() {
        let mut langs: Vec<String> = r
            .rows
            .iter()
            .filter_map(|row| row.cells.get(i))
            .flat_map(|c| c.per_lang.keys().cloned())
            .collect();
        langs.sort();
        langs.dedup();
        if langs.is_empty() {
            continue;
        }
        let mut columns = langs.clone();
        columns.push("Avg.".into());
        let rows = r
            .rows
            .iter()
            .map(|row| {
                let cell = row.cells.get(i);
                let mut v: Vec<Option<f64>> = langs
                    .iter()
                    .map(|l| cell.and_then(|c| c.per_lang.get(l).copied()))
                    .collect();
                v.push(cell.and_then(|c| c.median));
                (row.label.clone(), v)
            })
            .collect();
        out.push(TsvTable {
            title: format!("{regime} by direction"),
            columns,
            rows,
        });
    }
    out
}

fn render_text(t: &TsvTable, out: &mut String) {
    let label_w = t
        .rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    let widths: Vec<usize> = t
        .columns
        .iter()
        .enumerate()
        .map(|(i, c)| {
            t.rows
                .iter()
                .map(|(_, v)| fmt1(v[i]).len())
                .max()
                .unwrap_or(0)
                .max(c.chars().count())
        })
        .collect();
    let _ = writeln!(out, "{}", t.title);
    let mut header = format!("{:<label_w$}", "");
    for (c, w) in t.columns.iter().zip(&widths) {
        let _ = write!(header, "  {c:>w$}");
    }
    let _ = writeln!(out, "{}", header.trim_end());
    for (label, values) in &t.rows {
        let pad = label_w - label.chars().count();
        let mut line = format!("{label}{}", " ".repeat(pad));
        for (v, w) in values.iter().zip(&widths) {
            let _ = write!(line, "  {:>w$}", fmt1(*v));
        }
        let _ = writeln!(out, "{line}");
    }
}

fn render_tsv(t: &TsvTable, out: &mut String) {
    let _ = writeln!(out, "# {}", t.title);
    let _ = writeln!(out, "row\t{}", t.columns.join("\t"));
    for (label, values) in &t.rows {
        let cells: Vec<String> = values.iter().map(|v| fmt1(*v)).collect();
        let _ = writeln!(out, "{label}\t{}", cells.join("\t"));
    }
}

/// Aligned text tables plus their TSV twin, one decimal place.
pub fn render_report(r: &Report) -> Rendered {
    let mut text = String::new();
    let mut tsv = String::new();
    for (i, t) in tables(r).iter().enumerate() {
        if i > 0 {
            text.push('\n');
            tsv.push('\n');
        }
        render_text(t, &mut text);
        render_tsv(t, &mut tsv);
    }
    let failures: Vec<String> = r
        .rows
        .iter()
        .flat_map(|row| {
            let pre = row
                .error
                .iter()
                .map(move |e| format!("{}: pre-training failed: {e}", row.label));
            let runs = row.cells.iter().flat_map(move |c| {
                c.runs.iter().filter_map(move |run| {
                    run.error
                        .as_ref()
                        .map(|e| format!("{} {} run {}: {e}", row.label, c.regime, run.run))
                })
            });
            pre.chain(runs)
        })
        .collect();
    if !failures.is_empty() {
        text.push_str("\nfailures\n");
        for f in failures {
            let _ = writeln!(text, "  {f}");
        }
    }
    Rendered { text, tsv }
}

/// One column of per-language scores closed by an `Avg.` row.
pub fn render_lang_scores(metric: &str, per_lang: &LangScores, aggregate: f64) -> Rendered {
    let mut rows: Vec<(String, Vec<Option<f64>>)> = per_lang
        .iter()
        .map(|(l, s)| (l.clone(), vec![Some(s.value())]))
        .collect();
    rows.push(("Avg.".into(), vec![Some(aggregate)]));
    let t = TsvTable {
        title: format!("{metric} by language"),
        columns: vec![metric.to_string()],
        rows,
    };
    let (mut text, mut tsv) = (String::new(), String::new());
    render_text(&t, &mut text);
    render_tsv(&t, &mut tsv);
    Rendered { text, tsv }
}

pub fn parse_report_tsv(tsv: &str) -> Result<Vec<TsvTable>, HarnessError> {
    let bad = |line: usize, msg: String| HarnessError::Format {
        path: "<report tsv>".into(),
        line,
        msg,
    };
    let mut out: Vec<TsvTable> = Vec::new();
    let mut expect_header = false;
    for (i, line) in tsv.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(title) = line.strip_prefix("# ") {
            out.push(TsvTable {
                title: title.to_string(),
                columns: Vec::new(),
                rows: Vec::new(),
            });
            expect_header = true;
            continue;
        }
        let table = out
            .last_mut()
            .ok_or_else(|| bad(i + 1, "data before a table title".into()))?;
        let mut fields = line.split('\t');
        let first = fields.next().unwrap_or_default();
        if expect_header {
            if first != "row" {
                return Err(bad(i + 1, "expected a header line".into()));
            }
            table.columns = fields.map(str::to_string).collect();
            expect_header = false;
            continue;
        }
        let values = fields
            .map(|f| match f {
                MISSING => Ok(None),
                v => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| bad(i + 1, format!("bad value {v:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != table.columns.len() {
            return Err(bad(
                i + 1,
                format!(
                    "expected {} values, found {}",
                    table.columns.len(),
                    values.len()
                ),
            ));
        }
        table.rows.push((first.to_string(), values));
    }
    Ok(out)
}
