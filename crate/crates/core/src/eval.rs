//! Offline metrics (pairwise accuracy and average hinge loss) and the replay
//! harness: held-out message events re-run through each retrieval strategy
//! at their original timestamps, scored as recall@N.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{render_table, EventKind, EventRecord};
use crate::error::{Error, Result};
use crate::retrieval::{RetrievalRequest, Retriever, Strategy};

/// One evaluation pair: the model's score for the messaged product and for
/// the impressed-but-not-messaged product, same user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTuple {
    pub positive_score: f64,
    pub negative_score: f64,
}

/// Fraction of tuples scoring the positive strictly higher. Ties count as
/// incorrect.
pub fn accuracy(set: &[ScoredTuple]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let correct = set
        .iter()
        .filter(|t| t.positive_score > t.negative_score)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Mean of max(0, negative - positive + margin) over the set.
pub fn average_loss(set: &[ScoredTuple], margin: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidConfig {
            msg: format!("margin must be >= 0, got {margin}"),
        });
    }
    let total: f64 = set
        .iter()
        .map(|t| (t.negative_score - t.positive_score + margin).max(0.0))
        .sum();
    Ok(total / set.len() as f64)
}

/// One machine-readable report line: {"strategy":...,"metric":...,"value":...}.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub strategy: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub hits: usize,
    pub events: usize,
    pub recall: f64,
    /// (recall - time recall) / time recall. 0 for time itself; absent when
    /// the baseline recall is 0.
    pub lift_vs_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub m: usize,
    pub n: usize,
    pub rows: Vec<StrategyOutcome>,
}

impl ReplayReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for row in &self.rows {
            out.push(MetricRecord {
                strategy: row.strategy.to_string(),
                metric: format!("recall@{}", self.n),
                value: row.recall,
            });
            if let Some(lift) = row.lift_vs_time {
                out.push(MetricRecord {
                    strategy: row.strategy.to_string(),
                    metric: "lift_vs_time".into(),
                    value: lift,
                });
            }
        }
        out
    }

    /// One JSON record per line, trailing newline.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&r.line());
            out.push('\n');
        }
        out
    }

    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.strategy.to_string(),
                    format!("{:.4}", r.recall),
                    format!("{}/{}", r.hits, r.events),
                    match r.lift_vs_time {
                        Some(l) => format!("{:+.2}%", l * 100.0),
                        None => "n/a".into(),
                    },
                ]
            })
            .collect();
        render_table(
            &[
                "strategy",
                &format!("recall@{}", self.n),
                "hits",
                "lift vs time",
            ],
            &rows,
        )
    }
}

/// Re-run each held-out message event: retrieve for its user with the event
/// timestamp as the eligibility cutoff, count a hit when the messaged
/// product appears in the top N. Only message events participate; the time
/// baseline is always computed internally so lifts are well-defined.
pub fn replay(
    retriever: &Retriever,
    held_out: &[EventRecord],
    strategies: &[Strategy],
    m: usize,
    n: usize,
    workers: usize,
) -> Result<ReplayReport> {
    let messages: Vec<&EventRecord> = held_out
        .iter()
        .filter(|e| e.kind == EventKind::Message)
        .collect();
    if messages.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut run: Vec<Strategy> = Vec::new();
    for &s in strategies {
        if !run.contains(&s) {
            run.push(s);
        }
    }
    if !run.contains(&Strategy::Time) {
        run.push(Strategy::Time);
    }
    let hit_vector = |e: &EventRecord| -> Result<Vec<bool>> {
        run.iter()
            .map(|&strategy| {
                let req = RetrievalRequest {
                    user_id: e.user_id,
                    m,
                    n,
                    strategy,
                    as_of: Some(e.timestamp),
                };
                let results = retriever.retrieve(&req)?;
                Ok(results.iter().any(|r| r.product_id == e.product_id))
            })
            .collect()
    };
    let hits_per_event: Vec<Vec<bool>> = if workers > 1 {
        let pool = crate::worker_pool(workers)?;
        pool.install(|| {
            messages
                .par_iter()
                .map(|e| hit_vector(e))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        messages
            .iter()
            .map(|e| hit_vector(e))
            .collect::<Result<Vec<_>>>()?
    };
    let events = messages.len();
    let mut hits = vec![0usize; run.len()];
    for row in &hits_per_event {
        for (i, &h) in row.iter().enumerate() {
            if h {
                hits[i] += 1;
            }
        }
    }
    let recall_of = |s: Strategy| -> f64 {
        let i = run.iter().position(|&r| r == s).expect("strategy was run");
        hits[i] as f64 / events as f64
    };
    let time_recall = recall_of(Strategy::Time);
    let mut reported: Vec<Strategy> = Vec::new();
    for &s in strategies {
        if !reported.contains(&s) {
            reported.push(s);
        }
    }
    let rows = reported
        .into_iter()
        .map(|s| {
            let recall = recall_of(s);
            let i = run.iter().position(|&r| r == s).expect("strategy was run");
            StrategyOutcome {
                strategy: s,
                hits: hits[i],
                events,
                recall,
                lift_vs_time: if s == Strategy::Time {
                    Some(0.0)
                } else if time_recall > 0.0 {
                    Some((recall - time_recall) / time_recall)
                } else {
                    None
                },
            }
        })
        .collect();
    Ok(ReplayReport { m, n, rows })
}
