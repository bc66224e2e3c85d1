//! Slot-usage statistics from logged memory attention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{AttentionRecord, RunResult};
use crate::error::{Error, Result};

/// Mean attention on one slot within one (run, city, time-of-day bucket).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub run: String,
    pub config_hash: String,
    pub city: String,
    pub bucket: usize,
    pub slot: usize,
    pub mean: f64,
    /// Attention vectors averaged into this row.
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub period: usize,
    pub buckets: usize,
    pub rows: Vec<AttentionRow>,
    pub warnings: Vec<String>,
}

/// Averages attention per slot by city and time of day.
///
/// A record at absolute step `t` falls in bucket
/// `(t mod period) * buckets / period`. Slots from different runs are kept
/// apart because their memories are unrelated. Runs without attention are
/// skipped; if none has any, the summary is empty and carries a warning.
pub fn attention_report(
    results: &[RunResult],
    period: usize,
    buckets: usize,
) -> Result<AttentionSummary> {
    if period == 0 || buckets == 0 || buckets > period {
        return Err(Error::config(format!(
            "need 0 < buckets <= period, got buckets {buckets}, period {period}"
        )));
    }
    let mut summary = AttentionSummary {
        period,
        buckets,
        ..Default::default()
    };
    type Key = (String, String, String, usize);
    let mut sums: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
    for r in results.iter().filter(|r| !r.attention.is_empty()) {
        let run = r.run_id();
        let mut records: Vec<&AttentionRecord> = r.attention.iter().collect();
        records.sort_by(|a, b| (&a.city, a.start, a.step).cmp(&(&b.city, b.start, b.step)));
        let k = records[0].alpha.len();
        for rec in records {
            if rec.alpha.len() != k {
                return Err(Error::data(format!(
                    "{run}: attention vectors have {} and {k} slots",
                    rec.alpha.len()
                )));
            }
            let bucket = (rec.step % period) * buckets / period;
            let entry = sums
                .entry((run.clone(), r.config_hash.clone(), rec.city.clone(), bucket))
                .or_insert_with(|| (vec![0.0; k], 0));
            for (s, a) in entry.0.iter_mut().zip(&rec.alpha) {
                *s += a;
            }
            entry.1 += 1;
        }
    }
    if sums.is_empty() {
        summary
            .warnings
            .push("no attention records found; run citymem with log_attention = true".into());
        return Ok(summary);
    }
    for ((run, config_hash, city, bucket), (slot_sums, count)) in sums {
        for (slot, s) in slot_sums.into_iter().enumerate() {
            summary.rows.push(AttentionRow {
                run: run.clone(),
                config_hash: config_hash.clone(),
                city: city.clone(),
                bucket,
                slot,
                mean: s / count as f64,
                count,
            });
        }
    }
    Ok(summary)
}

pub fn attention_csv(summary: &AttentionSummary) -> String {
    let mut out = String::from("run,config_hash,city,bucket,slot,mean,count\n");
    for r in &summary.rows {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            r.run, r.config_hash, r.city, r.bucket, r.slot, r.mean, r.count
        );
    }
    out
}
