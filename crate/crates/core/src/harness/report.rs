use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use crate::error::{CsdnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    /// Rows keyed by topology.
    Ablation,
    /// Rows keyed by layer count.
    Sweep,
}

impl ReportKind {
    fn name(self) -> &'static str {
        match self {
            Self::Ablation => "ablation",
            Self::Sweep => "sweep",
        }
    }

    fn key_title(self) -> &'static str {
        match self {
            Self::Ablation => "Topology",
            Self::Sweep => "Layers",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
}

/// One trained model: a matrix cell for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub label: String,
    pub seed: u64,
    pub params: usize,
    pub epochs: usize,
    pub steps: u64,
    /// `Err` carries the failure reason of a diverged run.
    pub result: std::result::Result<Metrics, String>,
}

/// Mean and standard error over the successful runs of one label.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub params: usize,
    pub runs: usize,
    pub failed: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub map50: Option<(f64, f64)>,
    pub map5095: Option<(f64, f64)>,
}

/// A qualitative ordering asserted about the summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub kind: ReportKind,
    pub config: RunConfig,
    pub rows: Vec<RunRow>,
}

fn mean_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

const COLUMNS: &str = "label\tseed\tparams\tstatus\tepochs\tsteps\tprecision\trecall\tmap50\tmap5095\tnote";

impl Report {
    /// Summary rows in first-appearance order of their labels.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut labels: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
        labels
            .into_iter()
            .map(|label| {
                let rows: Vec<&RunRow> = self.rows.iter().filter(|r| r.label == label).collect();
                let ok: Vec<Metrics> = rows.iter().filter_map(|r| r.result.as_ref().ok().copied()).collect();
                let col = |f: fn(&Metrics) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
                SummaryRow {
                    label: label.to_string(),
                    params: rows[0].params,
                    runs: rows.len(),
                    failed: rows.len() - ok.len(),
                    precision: mean_se(&col(|m| m.precision)).map(|p| p.0),
                    recall: mean_se(&col(|m| m.recall)).map(|p| p.0),
                    map50: mean_se(&col(|m| m.map50)),
                    map5095: mean_se(&col(|m| m.map5095)),
                }
            })
            .collect()
    }

    /// Orderings asserted for this kind of report. Checks whose labels are
    /// absent from the matrix are skipped.
    pub fn checks(&self) -> Vec<Check> {
        let summary = self.summary();
        match self.kind {
            ReportKind::Ablation => ablation_checks(&summary),
            ReportKind::Sweep => sweep_checks(&summary, self.config.sweep.min_map50),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# kind: {}\n", self.kind.name());
        for line in self.config.to_text().lines() {
            let _ = writeln!(s, "# {line}");
        }
        let _ = writeln!(s, "{COLUMNS}");
        for r in &self.rows {
            let (status, m, note) = match &r.result {
                Ok(m) => ("ok", *m, String::new()),
                Err(e) => (
                    "FAILED",
                    Metrics {
                        precision: f64::NAN,
                        recall: f64::NAN,
                        map50: f64::NAN,
                        map5095: f64::NAN,
                    },
                    e.replace(['\t', '\n'], " "),
                ),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{status}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{note}",
                r.label, r.seed, r.params, r.epochs, r.steps, m.precision, m.recall, m.map50, m.map5095
            );
        }
        s
    }

    /// Inverse of [`Report::to_tsv`].
    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| CsdnError::InvalidArgument(format!("report: {m}"));
        let mut lines = text.lines();
        let kind = match lines.next().and_then(|l| l.strip_prefix("# kind: ")) {
            Some("ablation") => ReportKind::Ablation,
            Some("sweep") => ReportKind::Sweep,
            other => return Err(bad(format!("unknown kind line {other:?}"))),
        };
        let mut config_text = String::new();
        let mut rows = Vec::new();
        let mut in_rows = false;
        for line in lines {
            if !in_rows {
                if let Some(c) = line.strip_prefix('#') {
                    config_text.push_str(c.strip_prefix(' ').unwrap_or(c));
                    config_text.push('\n');
                    continue;
                }
                if line != COLUMNS {
                    return Err(bad(format!("unexpected column header {line:?}")));
                }
                in_rows = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 11 {
                return Err(bad(format!("row has {} fields: {line:?}", f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", f[i])));
            let int = |i: usize| f[i].parse::<u64>().map_err(|e| bad(format!("{}: {e}", f[i])));
            let result = match f[3] {
                "ok" => Ok(Metrics {
                    precision: num(6)?,
                    recall: num(7)?,
                    map50: num(8)?,
                    map5095: num(9)?,
                }),
                "FAILED" => Err(f[10].to_string()),
                s => return Err(bad(format!("status {s:?}"))),
            };
            rows.push(RunRow {
                label: f[0].to_string(),
                seed: int(1)?,
                params: int(2)? as usize,
                epochs: int(4)? as usize,
                steps: int(5)?,
                result,
            });
        }
        if !in_rows {
            return Err(bad("missing column header".into()));
        }
        Ok(Self {
            kind,
            config: RunConfig::from_text(&config_text)?,
            rows,
        })
    }

    /// Aligned human-readable rendering with the embedded config, a summary
    /// table, per-seed rows and footnotes on failed runs and orderings.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "CSDN {} report", self.kind.name());
        let _ = writeln!(s, "\nConfiguration:");
        for line in self.config.to_text().lines() {
            let _ = writeln!(s, "    {line}");
        }
        let fmt_ms = |v: Option<(f64, f64)>| v.map_or("FAILED".to_string(), |(m, e)| format!("{m:.4} ± {e:.4}"));
        let fmt_m = |v: Option<f64>| v.map_or("FAILED".to_string(), |m| format!("{m:.4}"));
        let mut table = vec![vec![
            self.kind.key_title().to_string(),
            "Params".into(),
            "Runs".into(),
            "P".into(),
            "R".into(),
            "mAP50".into(),
            "mAP@[.5:.95]".into(),
        ]];
        for r in self.summary() {
            table.push(vec![
                r.label.clone(),
                r.params.to_string(),
                format!("{}/{}", r.runs - r.failed, r.runs),
                fmt_m(r.precision),
                fmt_m(r.recall),
                fmt_ms(r.map50),
                fmt_ms(r.map5095),
            ]);
        }
        let _ = writeln!(s, "\nSummary (mean ± standard error over seeds):");
        s.push_str(&align(&table));

        let mut table = vec![["Key", "Seed", "Epochs", "P", "R", "mAP50", "mAP@[.5:.95]"]
            .map(String::from)
            .to_vec()];
        for r in &self.rows {
            let m = r.result.as_ref().ok();
            let cell = |f: fn(&Metrics) -> f64| m.map_or("FAILED".to_string(), |m| format!("{:.4}", f(m)));
            table.push(vec![
                r.label.clone(),
                r.seed.to_string(),
                r.epochs.to_string(),
                cell(|m| m.precision),
                cell(|m| m.recall),
                cell(|m| m.map50),
                cell(|m| m.map5095),
            ]);
        }
        let _ = writeln!(s, "\nRuns:");
        s.push_str(&align(&table));

        let mut notes = Vec::new();
        for r in &self.rows {
            if let Err(e) = &r.result {
                notes.push(format!("{} seed {} FAILED: {e}", r.label, r.seed));
            }
        }
        for c in self.checks() {
            let verdict = if c.holds { "holds" } else { "FAILS" };
            notes.push(format!("{} {verdict}: {}", c.claim, c.detail));
        }
        if !notes.is_empty() {
            let _ = writeln!(s, "\nNotes:");
            for (i, n) in notes.iter().enumerate() {
                let _ = writeln!(s, "  [{}] {n}", i + 1);
            }
        }
        s
    }

    /// Writes `<stem>.tsv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.tsv")), self.to_tsv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}

fn align(table: &[Vec<String>]) -> String {
    let cols = table[0].len();
    let width: Vec<usize> = (0..cols)
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in table {
        let cells: Vec<String> = row
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (cell, &w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(s, "  {}", cells.join("  ").trim_end());
    }
    s
}

fn find<'a>(summary: &'a [SummaryRow], label: &str) -> Option<&'a SummaryRow> {
    summary.iter().find(|r| r.label == label)
}

fn ablation_checks(summary: &[SummaryRow]) -> Vec<Check> {
    let mut checks = Vec::new();
    let missing = |a: &str, b: &str| Check {
        claim: format!("{a} vs {b}"),
        holds: false,
        detail: "no successful runs to compare".into(),
    };
    if let (Some(sd), Some(spd)) = (find(summary, "s-d"), find(summary, "s+d")) {
        checks.push(match (spd.map50, sd.map50) {
            (Some((a, _)), Some((b, _))) => Check {
                claim: "mean mAP50 of s+d < s-d".into(),
                holds: a < b,
                detail: format!("s+d {a:.4}, s-d {b:.4}"),
            },
            _ => missing("s+d", "s-d"),
        });
    }
    if let Some(full) = find(summary, "n+b+d") {
        for variant in ["s+d", "b+d", "n+d"] {
            let Some(v) = find(summary, variant) else { continue };
            checks.push(match (full.map50, v.map50) {
                (Some((a, _)), Some((b, se))) => Check {
                    claim: format!("mean mAP50 of n+b+d >= {variant} minus one standard error"),
                    holds: a >= b - se,
                    detail: format!("n+b+d {a:.4}, {variant} {b:.4} - {se:.4} = {:.4}", b - se),
                },
                _ => missing("n+b+d", variant),
            });
        }
    }
    checks
}

fn sweep_checks(summary: &[SummaryRow], min_map50: f64) -> Vec<Check> {
    let mut sorted: Vec<&SummaryRow> = summary.iter().collect();
    sorted.sort_by_key(|r| r.label.parse::<usize>().unwrap_or(usize::MAX));
    let params: Vec<String> = sorted.iter().map(|r| format!("{}:{}", r.label, r.params)).collect();
    let mut checks = vec![Check {
        claim: "parameter count non-decreasing in depth".into(),
        holds: sorted.windows(2).all(|w| w[0].params <= w[1].params),
        detail: params.join(", "),
    }];
    for r in sorted {
        let (holds, detail) = match r.map50 {
            Some((m, _)) if r.failed == 0 => (m >= min_map50, format!("mAP50 {m:.4} (target {min_map50})")),
            _ => (false, format!("{} of {} runs failed", r.failed, r.runs)),
        };
        checks.push(Check {
            claim: format!("{} layers converge", r.label),
            holds,
            detail,
        });
    }
    checks
}
