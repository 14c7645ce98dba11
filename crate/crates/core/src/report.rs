//! Summary tables over a run's metric files.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::scenario::{HostClassRow, NodeRow, RoundMetrics};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing metric files: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("cannot read {file}: {reason}")]
    Parse { file: String, reason: String },
}

/// Ranks with ties given their average position, 1-based.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant series.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "series lengths differ");
    if x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| ReportError::Parse {
        file: file.clone(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| ReportError::Parse {
            file,
            reason: e.to_string(),
        })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Correlation between blocks led and mean election weight.
pub fn leader_correlation(nodes: &[NodeRow]) -> Option<f64> {
    let eligible: Vec<&NodeRow> = nodes.iter().filter(|n| n.class != "sybil").collect();
    let led: Vec<f64> = eligible.iter().map(|n| n.blocks_led as f64).collect();
    let weight: Vec<f64> = eligible.iter().map(|n| n.mean_weight).collect();
    spearman(&led, &weight)
}

/// Renders the summary of the run stored in `dir`.
pub fn report(dir: &Path) -> Result<String, ReportError> {
    let files = ["metrics.csv", "host_classes.csv", "nodes.csv"];
    let missing: Vec<String> = files
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ReportError::Missing(missing));
    }
    let metrics: Vec<RoundMetrics> = read_rows(&dir.join(files[0]))?;
    let hosts: Vec<HostClassRow> = read_rows(&dir.join(files[1]))?;
    let nodes: Vec<NodeRow> = read_rows(&dir.join(files[2]))?;

    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "final detection");
    let _ = writeln!(w, "{:>8} {:>10} {:>10}", "round", "precision", "recall");
    if let Some(m) = metrics.last() {
        let _ = writeln!(
            w,
            "{:>8} {:>10} {:>10}",
            m.round,
            opt(m.precision),
            opt(m.recall)
        );
    }

    let _ = writeln!(w, "\nrecall by host class");
    let _ = writeln!(
        w,
        "{:>8} {:>10} {:>10} {:>12} {:>10}",
        "p_mal", "malicious", "monitored", "blacklisted", "rate"
    );
    if let Some(last) = hosts.last().map(|h| h.round) {
        for h in hosts.iter().filter(|h| h.round == last) {
            let rate = (h.monitored_pairs > 0)
                .then(|| h.blacklisted_pairs as f64 / h.monitored_pairs as f64);
            let _ = writeln!(
                w,
                "{:>8} {:>10} {:>10} {:>12} {:>10}",
                h.p_mal,
                h.malicious,
                h.monitored_pairs,
                h.blacklisted_pairs,
                opt(rate)
            );
        }
    }

    let _ = writeln!(w, "\nleader election");
    let _ = writeln!(w, "{:>8} {:>10} {:>10}", "members", "blocks", "spearman");
    if !nodes.is_empty() {
        let blocks: u64 = nodes.iter().map(|n| n.blocks_led).sum();
        let _ = writeln!(
            w,
            "{:>8} {:>10} {:>10}",
            nodes.len(),
            blocks,
            opt(leader_correlation(&nodes))
        );
    }

    let _ = writeln!(w, "\nforks");
    let _ = writeln!(
        w,
        "{:>8} {:>10} {:>10} {:>8} {:>8} {:>10}",
        "rounds", "produced", "competing", "reorgs", "invalid", "max_tips"
    );
    if !metrics.is_empty() {
        let sum = |f: fn(&RoundMetrics) -> u64| metrics.iter().map(f).sum::<u64>();
        let _ = writeln!(
            w,
            "{:>8} {:>10} {:>10} {:>8} {:>8} {:>10}",
            metrics.len(),
            sum(|m| m.blocks_produced),
            sum(|m| m.competing_blocks),
            sum(|m| m.reorgs),
            sum(|m| m.invalid_blocks),
            metrics.iter().map(|m| m.distinct_tips).max().unwrap_or(0)
        );
    }
    Ok(out)
}
