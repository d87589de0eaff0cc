//! Reachability-test record schemas: the nested probe record as archived by
//! the measurement platform, and its flattened request/response form.

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("field '{field}': {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub country_name: String,
    pub country_code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseObservation {
    pub matches_template: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub start_time: String,
    pub end_time: String,
}

/// One probe's metadata plus its list of response observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuackTestRecord {
    pub vp: String,
    pub location: Location,
    pub service: String,
    pub test_url: String,
    pub response: Vec<ResponseObservation>,
    pub anomaly: bool,
    pub controls_failed: bool,
    pub stateful_block: bool,
    pub tag: String,
}

/// One request/response pair: top-level metadata merged with a single
/// response observation. Field order here is the documented key order of
/// the flattened JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatRecord {
    pub vp: String,
    pub country_name: String,
    pub country_code: String,
    pub service: String,
    pub test_url: String,
    pub anomaly: bool,
    pub controls_failed: bool,
    pub stateful_block: bool,
    pub tag: String,
    pub matches_template: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub start_time: String,
    pub end_time: String,
}

/// Parses an ISO-8601 datetime (with or without a zone offset) to UNIX
/// seconds. Zoneless values are read as UTC.
pub fn parse_iso8601_secs(s: &str) -> Result<i64, RecordError> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(naive.and_utc().timestamp());
        }
    }
    Err(RecordError::Invalid { field: "datetime", reason: format!("unparseable value '{s}'") })
}

pub fn parse_vp_octets(vp: &str) -> Result<[u8; 4], RecordError> {
    let parts: Vec<&str> = vp.split('.').collect();
    if parts.len() != 4 {
        return Err(RecordError::Invalid { field: "vp", reason: format!("'{vp}' is not dotted-quad") });
    }
    let mut octets = [0u8; 4];
    for (i, p) in parts.iter().enumerate() {
        octets[i] = p.parse::<u8>().map_err(|_| RecordError::Invalid {
            field: "vp",
            reason: format!("octet '{p}' out of range"),
        })?;
    }
    Ok(octets)
}

impl QuackTestRecord {
    /// Checks the type invariants; records failing them are treated as
    /// malformed by the ingest stream.
    pub fn validate(&self) -> Result<(), RecordError> {
        parse_vp_octets(&self.vp)?;
        if self.response.is_empty() {
            return Err(RecordError::Invalid {
                field: "response",
                reason: "response list is empty".into(),
            });
        }
        parse_iso8601_secs(&self.tag)
            .map_err(|_| RecordError::Invalid { field: "tag", reason: format!("'{}'", self.tag) })?;
        for obs in &self.response {
            let start = parse_iso8601_secs(&obs.start_time).map_err(|_| RecordError::Invalid {
                field: "start_time",
                reason: format!("'{}'", obs.start_time),
            })?;
            let end = parse_iso8601_secs(&obs.end_time).map_err(|_| RecordError::Invalid {
                field: "end_time",
                reason: format!("'{}'", obs.end_time),
            })?;
            if end < start {
                return Err(RecordError::Invalid {
                    field: "end_time",
                    reason: "end_time precedes start_time".into(),
                });
            }
        }
        Ok(())
    }
}
