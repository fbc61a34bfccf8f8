use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::metrics::{
    cross_group_report, group_weights, summarize_group, CrossGroupReport, GroupKey, GroupSummary, Metric, MetricsError,
};
use super::score::BinaryScore;

/// One scored (tool, binary) pair with the binary's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub tool: String,
    pub binary: String,
    pub binary_hash: String,
    pub isa: String,
    pub os: String,
    pub compiler: String,
    pub optflag: String,
    pub project: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreRow {
    pub fn key(&self) -> GroupKey {
        GroupKey {
            isa: Some(self.isa.clone()),
            os: Some(self.os.clone()),
            compiler: Some(self.compiler.clone()),
            optflag: Some(self.optflag.clone()),
            project: Some(self.project.clone()),
        }
    }

    pub fn score(&self) -> BinaryScore {
        BinaryScore::from_counts(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown grouping dimension `{0}`")]
    UnknownDimension(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub fn write_scores_csv<W: Write>(out: W, rows: &[ScoreRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<ScoreRow>, ReportError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<ScoreRow>, _>>()?)
}

fn check_dims(dims: &[&str]) -> Result<(), ReportError> {
    match dims.iter().find(|d| !GroupKey::DIMENSIONS.contains(d)) {
        Some(d) => Err(ReportError::UnknownDimension(d.to_string())),
        None => Ok(()),
    }
}

/// Per tool, per group summaries. Groups are the distinct projections of the
/// binaries' metadata onto `group_by`.
pub fn summarize_scores(
    rows: &[ScoreRow],
    group_by: &[&str],
) -> Result<BTreeMap<String, BTreeMap<GroupKey, GroupSummary>>, ReportError> {
    check_dims(group_by)?;
    let mut buckets: BTreeMap<String, BTreeMap<GroupKey, Vec<BinaryScore>>> = BTreeMap::new();
    for r in rows {
        buckets
            .entry(r.tool.clone())
            .or_default()
            .entry(r.key().project_onto(group_by))
            .or_default()
            .push(r.score());
    }
    let mut out = BTreeMap::new();
    for (tool, groups) in buckets {
        let mut summaries = BTreeMap::new();
        for (key, scores) in groups {
            let weights = group_weights(&scores).map_err(|e| match e {
                MetricsError::ZeroDenominator(_) => MetricsError::ZeroDenominator(key.to_string()),
                e => e,
            })?;
            let s = summarize_group(key.clone(), &scores, &weights)?;
            summaries.insert(key, s);
        }
        out.insert(tool, summaries);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_summary_csv<W: Write>(
    out: W,
    summaries: &BTreeMap<String, BTreeMap<GroupKey, GroupSummary>>,
) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "tool",
        "group",
        "n",
        "w_precision",
        "w_recall",
        "w_f1",
        "min_nonzero_f1",
        "max_f1",
        "gt_insn_weighted_mean_f1",
    ])?;
    for (tool, groups) in summaries {
        for s in groups.values() {
            w.write_record([
                tool.clone(),
                s.key.to_string(),
                s.n.to_string(),
                format!("{:.6}", s.w_precision),
                format!("{:.6}", s.w_recall),
                format!("{:.6}", s.w_f1),
                opt(s.min_nonzero_f1),
                format!("{:.6}", s.max_f1),
                format!("{:.6}", s.gt_insn_weighted_mean_f1),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Splits rows by `partition_by` and builds one cross-group report per
/// partition over the groups given by `group_by`.
pub fn partition_reports(
    rows: &[ScoreRow],
    partition_by: &[&str],
    group_by: &[&str],
) -> Result<BTreeMap<GroupKey, CrossGroupReport>, ReportError> {
    check_dims(partition_by)?;
    let mut parts: BTreeMap<GroupKey, Vec<ScoreRow>> = BTreeMap::new();
    for r in rows {
        parts
            .entry(r.key().project_onto(partition_by))
            .or_default()
            .push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (key, rows) in parts {
        let summaries = summarize_scores(&rows, group_by)?;
        out.insert(key, cross_group_report(&summaries)?);
    }
    Ok(out)
}

pub fn write_wins_csv<W: Write>(out: W, reports: &BTreeMap<GroupKey, CrossGroupReport>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["partition", "metric", "tool", "wins", "harmonic_mean", "groups"])?;
    for (key, rep) in reports {
        for (mi, m) in Metric::ALL.iter().enumerate() {
            for t in &rep.tools {
                w.write_record([
                    key.to_string(),
                    m.label().to_string(),
                    t.tool.clone(),
                    t.wins[mi].to_string(),
                    format!("{:.5}", t.harmonic[mi]),
                    rep.groups.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn partition_title(key: &GroupKey) -> String {
    let vals: Vec<&str> = GroupKey::DIMENSIONS.iter().filter_map(|d| key.get(d)).collect();
    if vals.is_empty() {
        "all".into()
    } else {
        vals.join("-")
    }
}

/// Plain-text table: per partition a header with the tool names, then one
/// row per metric holding `<wins> <harmonic mean>` for each tool.
pub fn render_table(reports: &BTreeMap<GroupKey, CrossGroupReport>) -> String {
    let mut s = String::new();
    for (key, rep) in reports {
        s.push_str(&format!("{} ({} groups)\n", partition_title(key), rep.groups));
        let names: Vec<&str> = rep.tools.iter().map(|t| t.tool.as_str()).collect();
        s.push_str(&format!("Metric | {}\n", names.join(" | ")));
        for (mi, m) in Metric::ALL.iter().enumerate() {
            let cells: Vec<String> = rep
                .tools
                .iter()
                .map(|t| format!("{} {:.5}", t.wins[mi], t.harmonic[mi]))
                .collect();
            s.push_str(&format!("{} | {}\n", m.label(), cells.join(" | ")));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tool: &str, compiler: &str, tp: u64, fp: u64, fn_: u64) -> ScoreRow {
        let s = BinaryScore::from_counts(tp, fp, fn_);
        ScoreRow {
            tool: tool.into(),
            binary: format!("{compiler}.bin"),
            binary_hash: "00".into(),
            isa: "x64".into(),
            os: "linux".into(),
            compiler: compiler.into(),
            optflag: "-O2".into(),
            project: "p".into(),
            tp,
            fp,
            fn_,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        }
    }

    #[test]
    fn scores_csv_round_trip() {
        let rows = vec![row("a", "gcc", 9, 1, 1), row("b", "clang", 10, 0, 0)];
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8_lossy(&buf)
            .starts_with("tool,binary,binary_hash,isa,os,compiler,optflag,project,tp,fp,fn,"));
        assert_eq!(read_scores_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn table_rows_have_wins_and_means() {
        let rows = vec![
            row("a", "gcc", 9, 1, 1),
            row("a", "clang", 10, 0, 0),
            row("b", "gcc", 10, 0, 0),
            row("b", "clang", 10, 0, 0),
        ];
        let reps = partition_reports(&rows, &["isa", "os"], &["compiler", "optflag"]).unwrap();
        let text = render_table(&reps);
        assert!(text.starts_with("x64-linux (2 groups)\nMetric | a | b\n"), "{text}");
        assert!(text.contains("F1 | 1 0.94737 | 2 1.00000\n"), "{text}");
        let mut buf = Vec::new();
        write_wins_csv(&mut buf, &reps).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .contains("isa=x64;os=linux,F1,b,2,1.00000,2"));
    }

    #[test]
    fn unknown_dimension() {
        assert!(matches!(
            summarize_scores(&[], &["arch"]),
            Err(ReportError::UnknownDimension(_))
        ));
    }

    #[test]
    fn zero_group_names_the_group() {
        let rows = vec![row("a", "gcc", 0, 3, 0)];
        let e = summarize_scores(&rows, &["compiler"]).unwrap_err();
        assert!(e.to_string().contains("compiler=gcc"), "{e}");
    }
}
