use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::confusion::{confusion, confusion_any_foreground, dsc_sen_ppv, ConfusionCounts};
use super::stats::{agreement, AgreementStats, Bootstrap};
use crate::error::{Error, Result};
use crate::morphology::{label_components, Connectivity};
use crate::volume::{LabelMap, BACKGROUND, IGNORE};

/// Which voxels count as positive for a per-case metric row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSel {
    /// Every non-background class merged.
    AnyForeground,
    Class(u8),
}

impl ClassSel {
    fn name(&self) -> String {
        match self {
            ClassSel::AnyForeground => "all".into(),
            ClassSel::Class(c) => c.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dataset: String,
    pub class: ClassSel,
    pub counts: ConfusionCounts,
    pub pred_voxels: u64,
    pub ref_voxels: u64,
    pub pred_clusters: u64,
    pub ref_clusters: u64,
}

fn binarize(l: &LabelMap, sel: ClassSel) -> LabelMap {
    let data = l
        .data
        .iter()
        .map(|&v| {
            let on = match sel {
                ClassSel::AnyForeground => v != BACKGROUND && v != IGNORE,
                ClassSel::Class(c) => v == c,
            };
            on as u8
        })
        .collect();
    LabelMap {
        grid: l.grid.clone(),
        data,
    }
}

/// Overlap counts and cluster counts for one case and class selection.
/// Cluster counts use the whole grid, including ignored reference voxels.
pub fn case_metrics(
    id: &str,
    dataset: &str,
    pred: &LabelMap,
    reference: &LabelMap,
    sel: ClassSel,
    conn: Connectivity,
) -> Result<CaseMetrics> {
    let counts = match sel {
        ClassSel::AnyForeground => confusion_any_foreground(pred, reference)?,
        ClassSel::Class(c) => confusion(pred, reference, c)?,
    };
    let (pb, rb) = (binarize(pred, sel), binarize(reference, sel));
    let (_, pc) = label_components(&pb, 1, conn)?;
    let (_, rc) = label_components(&rb, 1, conn)?;
    Ok(CaseMetrics {
        id: id.to_string(),
        dataset: dataset.to_string(),
        class: sel,
        counts,
        pred_voxels: pb.count(1) as u64,
        ref_voxels: rb.count(1) as u64,
        pred_clusters: pc as u64,
        ref_clusters: rc as u64,
    })
}

/// Mean and sample SD over the defined values of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// Number of defined values.
    pub n: usize,
    /// Undefined values left out.
    pub excluded: usize,
    /// Set when only one value contributed and `sd` is reported as 0.
    pub single: bool,
}

pub fn summarize(values: &[Option<f64>]) -> Summary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let excluded = values.len() - defined.len();
    let n = defined.len();
    if n == 0 {
        return Summary {
            mean: None,
            sd: None,
            n,
            excluded,
            single: false,
        };
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let sd = if n == 1 {
        0.0
    } else {
        (defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary {
        mean: Some(mean),
        sd: Some(sd),
        n,
        excluded,
        single: n == 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    /// Mean predicted cluster count per case.
    pub pred: f64,
    /// Mean reference cluster count per case.
    #[serde(rename = "ref")]
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub n: usize,
    pub dsc: Summary,
    pub sen: Summary,
    pub ppv: Summary,
    pub clusters: ClusterSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// All cases, foreground classes merged.
    Overall,
    /// Per dataset, foreground classes merged.
    ByDataset,
    /// Per class id, all datasets.
    ByClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub groups: Vec<GroupReport>,
    /// Cluster-count agreement (merged foreground); absent below 3 cases.
    pub agreement: Option<AgreementStats>,
    pub connectivity: Connectivity,
    /// Counts pooled across cases instead of averaging per-case metrics.
    pub pooled: bool,
    pub config_fingerprint: Option<String>,
}

fn group(name: String, rows: &[&CaseMetrics], pooled: bool) -> GroupReport {
    let (dsc, sen, ppv) = if pooled {
        let total = rows.iter().fold(ConfusionCounts::default(), |acc, r| acc + r.counts);
        let m = dsc_sen_ppv(&total);
        (summarize(&[m.dsc]), summarize(&[m.sen]), summarize(&[m.ppv]))
    } else {
        let metrics: Vec<_> = rows.iter().map(|r| dsc_sen_ppv(&r.counts)).collect();
        (
            summarize(&metrics.iter().map(|m| m.dsc).collect::<Vec<_>>()),
            summarize(&metrics.iter().map(|m| m.sen).collect::<Vec<_>>()),
            summarize(&metrics.iter().map(|m| m.ppv).collect::<Vec<_>>()),
        )
    };
    let n = rows.len();
    GroupReport {
        name,
        n,
        dsc,
        sen,
        ppv,
        clusters: ClusterSummary {
            pred: rows.iter().map(|r| r.pred_clusters as f64).sum::<f64>() / n as f64,
            reference: rows.iter().map(|r| r.ref_clusters as f64).sum::<f64>() / n as f64,
        },
    }
}

/// Aggregates per-case rows into mean ± SD cells.
///
/// `Overall` and `ByDataset` use the merged-foreground rows, `ByClass` the
/// per-class rows. Agreement statistics are computed on the merged-foreground
/// cluster counts when at least 3 cases are present.
pub fn aggregate_report(
    rows: &[CaseMetrics],
    groupings: &[Grouping],
    conn: Connectivity,
    pooled: bool,
    boot: Bootstrap,
) -> Result<MetricsReport> {
    let merged: Vec<&CaseMetrics> = rows.iter().filter(|r| r.class == ClassSel::AnyForeground).collect();
    let mut groups = Vec::new();
    for g in groupings {
        match g {
            Grouping::Overall => {
                if merged.is_empty() {
                    return Err(Error::InvalidArgument("overall cell has no cases".into()));
                }
                groups.push(group("overall".into(), &merged, pooled));
            }
            Grouping::ByDataset => {
                let mut by: BTreeMap<&str, Vec<&CaseMetrics>> = BTreeMap::new();
                for r in &merged {
                    by.entry(r.dataset.as_str()).or_default().push(r);
                }
                if by.is_empty() {
                    return Err(Error::InvalidArgument("no dataset cells to report".into()));
                }
                for (ds, rs) in by {
                    groups.push(group(format!("dataset:{ds}"), &rs, pooled));
                }
            }
            Grouping::ByClass => {
                let mut by: BTreeMap<ClassSel, Vec<&CaseMetrics>> = BTreeMap::new();
                for r in rows.iter().filter(|r| r.class != ClassSel::AnyForeground) {
                    by.entry(r.class).or_default().push(r);
                }
                if by.is_empty() {
                    return Err(Error::InvalidArgument("no per-class cells to report".into()));
                }
                for (c, rs) in by {
                    groups.push(group(format!("class:{}", c.name()), &rs, pooled));
                }
            }
        }
    }
    let agreement = if merged.len() >= 3 {
        let p: Vec<f64> = merged.iter().map(|r| r.pred_clusters as f64).collect();
        let r: Vec<f64> = merged.iter().map(|r| r.ref_clusters as f64).collect();
        agreement(&p, &r, boot).ok()
    } else {
        None
    };
    Ok(MetricsReport {
        groups,
        agreement,
        connectivity: conn,
        pooled,
        config_fingerprint: None,
    })
}

fn cell(s: &Summary) -> String {
    match (s.mean, s.sd) {
        (Some(m), Some(sd)) => format!("{:.1} ± {:.1}", m * 100.0, sd * 100.0),
        _ => "n/a".into(),
    }
}

impl MetricsReport {
    /// Table-style CSV: one row per group, metrics in percent as mean ± SD.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,n,DSC,SEN,PPV,clusters_pred,clusters_ref\n");
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.2},{:.2}",
                g.name,
                g.n,
                cell(&g.dsc),
                cell(&g.sen),
                cell(&g.ppv),
                g.clusters.pred,
                g.clusters.reference
            );
        }
        out
    }
}
