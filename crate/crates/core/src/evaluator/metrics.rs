use std::collections::BTreeMap;
use std::fmt;

use super::score::BinaryScore;

/// Grouping dimensions. Unselected dimensions are `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub isa: Option<String>,
    pub os: Option<String>,
    pub compiler: Option<String>,
    pub optflag: Option<String>,
    pub project: Option<String>,
}

impl GroupKey {
    pub const DIMENSIONS: [&'static str; 5] = ["isa", "os", "compiler", "optflag", "project"];

    pub fn get(&self, dim: &str) -> Option<&str> {
        match dim {
            "isa" => self.isa.as_deref(),
            "os" => self.os.as_deref(),
            "compiler" => self.compiler.as_deref(),
            "optflag" => self.optflag.as_deref(),
            "project" => self.project.as_deref(),
            _ => None,
        }
    }

    pub fn set(&mut self, dim: &str, value: Option<String>) -> bool {
        let slot = match dim {
            "isa" => &mut self.isa,
            "os" => &mut self.os,
            "compiler" => &mut self.compiler,
            "optflag" => &mut self.optflag,
            "project" => &mut self.project,
            _ => return false,
        };
        *slot = value;
        true
    }

    /// The key restricted to `dims`.
    pub fn project_onto(&self, dims: &[&str]) -> GroupKey {
        let mut k = GroupKey::default();
        for d in dims {
            k.set(d, self.get(d).map(str::to_string));
        }
        k
    }
}

/// `dim=value` pairs joined by `;`, or `all` for the empty key.
impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Self::DIMENSIONS
            .iter()
            .filter_map(|d| self.get(d).map(|v| format!("{d}={v}")))
            .collect();
        if parts.is_empty() {
            f.write_str("all")
        } else {
            f.write_str(&parts.join(";"))
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("group {0} has no ground-truth instructions")]
    ZeroDenominator(String),
    #[error("group is empty")]
    EmptyGroup,
    #[error("tool {tool} was scored on a different set of groups than {reference}")]
    MismatchedGroupSets { tool: String, reference: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// No binary had any claim, so precision weights are uniform.
    pub uniform_precision: bool,
}

/// Per-binary weights `(TP_i+FN_i)/Σ(TP_j+FN_j)` and `(TP_i+FP_i)/Σ(TP_j+FP_j)`.
pub fn group_weights(scores: &[BinaryScore]) -> Result<Weights, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let rden: u64 = scores.iter().map(|s| s.tp + s.fn_).sum();
    if rden == 0 {
        return Err(MetricsError::ZeroDenominator(String::new()));
    }
    let pden: u64 = scores.iter().map(|s| s.tp + s.fp).sum();
    let recall = scores.iter().map(|s| (s.tp + s.fn_) as f64 / rden as f64).collect();
    let uniform_precision = pden == 0;
    let precision = if uniform_precision {
        vec![1.0 / scores.len() as f64; scores.len()]
    } else {
        scores.iter().map(|s| (s.tp + s.fp) as f64 / pden as f64).collect()
    };
    Ok(Weights {
        recall,
        precision,
        uniform_precision,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub n: usize,
    pub w_recall: f64,
    pub w_precision: f64,
    pub w_f1: f64,
    /// `None` when every F1 in the group is zero.
    pub min_nonzero_f1: Option<f64>,
    pub max_f1: f64,
    pub gt_insn_weighted_mean_f1: f64,
}

/// Harmonic mean of two ratios, 0 when either is 0.
fn harmonic2(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Harmonic mean; 0 when any value is 0 or the list is empty.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Weighted precision, recall and F1 of one group, plus the F1 spread and
/// the mean F1 weighted by ground-truth instruction counts.
pub fn summarize_group(key: GroupKey, scores: &[BinaryScore], weights: &Weights) -> Result<GroupSummary, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let gt_total: u64 = scores.iter().map(|s| s.gt_instructions()).sum();
    if gt_total == 0 {
        return Err(MetricsError::ZeroDenominator(key.to_string()));
    }
    let w_recall: f64 = scores.iter().zip(&weights.recall).map(|(s, w)| w * s.recall).sum();
    let w_precision: f64 = scores
        .iter()
        .zip(&weights.precision)
        .map(|(s, w)| w * s.precision)
        .sum();
    let gt_insn_weighted_mean_f1 = scores
        .iter()
        .map(|s| s.gt_instructions() as f64 / gt_total as f64 * s.f1)
        .sum();
    let min_nonzero_f1 = scores.iter().map(|s| s.f1).filter(|&f| f > 0.0).reduce(f64::min);
    let max_f1 = scores.iter().map(|s| s.f1).fold(0.0, f64::max);
    Ok(GroupSummary {
        key,
        n: scores.len(),
        w_recall,
        w_precision,
        w_f1: harmonic2(w_precision, w_recall),
        min_nonzero_f1,
        max_f1,
        gt_insn_weighted_mean_f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Recall,
    Precision,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Recall, Metric::Precision, Metric::F1];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Recall => "Recall",
            Metric::Precision => "Prec",
            Metric::F1 => "F1",
        }
    }

    pub fn of(self, s: &GroupSummary) -> f64 {
        match self {
            Metric::Recall => s.w_recall,
            Metric::Precision => s.w_precision,
            Metric::F1 => s.w_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolRow {
    pub tool: String,
    /// Indexed like [`Metric::ALL`].
    pub harmonic: [f64; 3],
    pub wins: [u32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossGroupReport {
    pub tools: Vec<ToolRow>,
    pub groups: usize,
}

/// Harmonic means across groups and win counts per tool. In each group and
/// metric, every tool attaining the maximum value gets a win.
pub fn cross_group_report(
    summaries: &BTreeMap<String, BTreeMap<GroupKey, GroupSummary>>,
) -> Result<CrossGroupReport, MetricsError> {
    let mut iter = summaries.iter();
    let Some((ref_tool, ref_groups)) = iter.next() else {
        return Ok(CrossGroupReport {
            tools: Vec::new(),
            groups: 0,
        });
    };
    for (tool, groups) in iter {
        if !groups.keys().eq(ref_groups.keys()) {
            return Err(MetricsError::MismatchedGroupSets {
                tool: tool.clone(),
                reference: ref_tool.clone(),
            });
        }
    }
    let mut rows: Vec<ToolRow> = summaries
        .iter()
        .map(|(tool, groups)| {
            let harmonic = Metric::ALL.map(|m| {
                let values: Vec<f64> = groups.values().map(|s| m.of(s)).collect();
                harmonic_mean(&values)
            });
            ToolRow {
                tool: tool.clone(),
                harmonic,
                wins: [0; 3],
            }
        })
        .collect();
    for key in ref_groups.keys() {
        for (mi, m) in Metric::ALL.iter().enumerate() {
            let values: Vec<f64> = summaries.values().map(|g| m.of(&g[key])).collect();
            let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (row, v) in rows.iter_mut().zip(&values) {
                if *v == best {
                    row.wins[mi] += 1;
                }
            }
        }
    }
    Ok(CrossGroupReport {
        tools: rows,
        groups: ref_groups.len(),
    })
}
