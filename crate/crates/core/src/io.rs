//! JSONL rows and CSV outputs.
//!
//! Every JSONL row is one object with `schema_version: 1` next to the
//! payload's own fields: base trajectories for `retrofit` input, retrofit
//! records for its output, and retrofit records plus `reasons` for
//! rejected rows.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::Reason;
use crate::runtime::{SurvivalRow, SweepRow};
use crate::stitch::RetrofitRecord;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Row<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

pub fn to_line<T: Serialize>(body: &T) -> Result<String> {
    Ok(serde_json::to_string(&Row {
        schema_version: SCHEMA_VERSION,
        body,
    })?)
}

pub fn parse_line<T: DeserializeOwned>(line: &str) -> Result<T> {
    let row: Row<T> = serde_json::from_str(line)?;
    if row.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema_version {} (expected {SCHEMA_VERSION})",
            row.schema_version
        )));
    }
    Ok(row.body)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub reasons: Vec<Reason>,
    #[serde(flatten)]
    pub record: RetrofitRecord,
}

pub const FOLD_LOG_HEADER: &str = "task_id,round,base_round,block_tokens,compressible_tokens,ratio";

pub fn fold_log_rows(out: &mut String, record: &RetrofitRecord) {
    for f in &record.fold_log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            record.trajectory.task_id,
            f.round,
            f.base_round,
            f.block_tokens,
            f.compressible_tokens,
            f.ratio()
        );
    }
}

pub fn survival_csv(rows: &[SurvivalRow]) -> String {
    let mut out = String::from("t,survivors,token_sum,mean_tokens\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.3}", r.t, r.survivors, r.token_sum, r.mean);
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("strategy,max_rounds,tasks,completed,completion_rate,total_tokens,mean_final_context\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{},{:.1}",
            r.strategy, r.max_rounds, r.tasks, r.completed, r.completion_rate, r.total_tokens, r.mean_final_context
        );
    }
    out
}
