//! Streaming ingestion of archived test records.
//!
//! Archives are tar files (optionally gzip-compressed) whose members are
//! newline-delimited JSON documents; a plain JSONL file is accepted as a
//! fallback. Records stream through a callback one at a time so an archive
//! never has to fit in memory.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use thiserror::Error;

use crate::record::{FlatRecord, QuackTestRecord};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable archive '{locator}': {source}")]
    Unreadable { locator: String, source: std::io::Error },
    #[error("failed to fetch '{locator}': {reason}")]
    Fetch { locator: String, reason: String },
    #[error("archive '{locator}': {source}")]
    Archive { locator: String, source: std::io::Error },
    #[error("sink error: {0}")]
    Sink(#[from] std::io::Error),
}

/// Counters surfaced in the run manifest so data-quality drift is observable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IngestStats {
    pub records_read: u64,
    pub lines_skipped: u64,
    pub flats_emitted: u64,
}

fn open_byte_source(locator: &str) -> Result<Box<dyn Read>, IngestError> {
    if locator.starts_with("http://") || locator.starts_with("https://") {
        let resp = ureq::get(locator)
            .call()
            .map_err(|e| IngestError::Fetch { locator: locator.into(), reason: e.to_string() })?;
        Ok(Box::new(resp.into_body().into_reader()))
    } else {
        let f = File::open(locator)
            .map_err(|e| IngestError::Unreadable { locator: locator.into(), source: e })?;
        Ok(Box::new(f))
    }
}

fn locator_name(locator: &str) -> &str {
    locator.rsplit('/').next().unwrap_or(locator)
}

enum SourceKind {
    Tar { gzip: bool },
    Jsonl { gzip: bool },
}

fn sniff_kind(locator: &str) -> SourceKind {
    let name = locator_name(locator).to_ascii_lowercase();
    if name.ends_with(".jsonl") || name.ends_with(".json") {
        SourceKind::Jsonl { gzip: false }
    } else if name.ends_with(".jsonl.gz") || name.ends_with(".json.gz") {
        SourceKind::Jsonl { gzip: true }
    } else if name.ends_with(".tar.gz") || name.ends_with(".tgz") {
        SourceKind::Tar { gzip: true }
    } else {
        SourceKind::Tar { gzip: false }
    }
}

fn drain_lines<R: Read>(
    reader: R,
    locator: &str,
    stats: &mut IngestStats,
    on_record: &mut dyn FnMut(QuackTestRecord) -> Result<(), IngestError>,
) -> Result<(), IngestError> {
    let buf = BufReader::new(reader);
    for line in buf.lines() {
        let line = line.map_err(|e| IngestError::Archive { locator: locator.into(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<QuackTestRecord>(&line) {
            Ok(record) => {
                if record.validate().is_ok() {
                    stats.records_read += 1;
                    on_record(record)?;
                } else {
                    stats.lines_skipped += 1;
                }
            }
            Err(_) => stats.lines_skipped += 1,
        }
    }
    Ok(())
}

/// Streams records from the named archives in archive order, member order,
/// line order. Malformed lines are counted, not fatal; unreadable archives
/// are fatal and name the locator.
pub fn stream_records(
    locators: &[String],
    mut on_record: impl FnMut(QuackTestRecord) -> Result<(), IngestError>,
) -> Result<IngestStats, IngestError> {
    let mut stats = IngestStats::default();
    for locator in locators {
        let raw = open_byte_source(locator)?;
        match sniff_kind(locator) {
            SourceKind::Jsonl { gzip } => {
                let reader: Box<dyn Read> =
                    if gzip { Box::new(flate2::read::GzDecoder::new(raw)) } else { raw };
                drain_lines(reader, locator, &mut stats, &mut on_record)?;
            }
            SourceKind::Tar { gzip } => {
                let reader: Box<dyn Read> =
                    if gzip { Box::new(flate2::read::GzDecoder::new(raw)) } else { raw };
                let mut archive = tar::Archive::new(reader);
                let entries = archive
                    .entries()
                    .map_err(|e| IngestError::Unreadable { locator: locator.clone(), source: e })?;
                for entry in entries {
                    let entry = entry.map_err(|e| IngestError::Archive {
                        locator: locator.clone(),
                        source: e,
                    })?;
                    if !entry.header().entry_type().is_file() {
                        continue;
                    }
                    drain_lines(entry, locator, &mut stats, &mut on_record)?;
                }
            }
        }
    }
    Ok(stats)
}

/// Flattens one record into one `FlatRecord` per retained observation, in
/// original order. Observations with `matches_template == true` are dropped
/// unless `include_matching` is set.
pub fn flatten(record: &QuackTestRecord, include_matching: bool) -> Vec<FlatRecord> {
    record
        .response
        .iter()
        .filter(|obs| include_matching || !obs.matches_template)
        .map(|obs| FlatRecord {
            vp: record.vp.clone(),
            country_name: record.location.country_name.clone(),
            country_code: record.location.country_code.clone(),
            service: record.service.clone(),
            test_url: record.test_url.clone(),
            anomaly: record.anomaly,
            controls_failed: record.controls_failed,
            stateful_block: record.stateful_block,
            tag: record.tag.clone(),
            matches_template: obs.matches_template,
            response: obs.response.clone(),
            start_time: obs.start_time.clone(),
            end_time: obs.end_time.clone(),
        })
        .collect()
}

/// Retains only records with `anomaly == true` when `anomalies_only` is set;
/// otherwise the identity filter.
pub fn filter_anomalies<I>(stream: I, anomalies_only: bool) -> impl Iterator<Item = QuackTestRecord>
where
    I: Iterator<Item = QuackTestRecord>,
{
    stream.filter(move |r| !anomalies_only || r.anomaly)
}

#[derive(Debug, Clone, Copy)]
pub struct FlattenOptions {
    pub include_matching: bool,
    pub anomalies_only: bool,
}

impl Default for FlattenOptions {
    fn default() -> Self {
        FlattenOptions { include_matching: false, anomalies_only: false }
    }
}

/// Drives the full ingest: stream, filter, flatten, and write one FlatRecord
/// per line to `out`.
pub fn ingest_to_writer(
    locators: &[String],
    opts: FlattenOptions,
    out: &mut dyn std::io::Write,
) -> Result<IngestStats, IngestError> {
    let mut flats = 0u64;
    let mut stats = stream_records(locators, |record| {
        if opts.anomalies_only && !record.anomaly {
            return Ok(());
        }
        for flat in flatten(&record, opts.include_matching) {
            let line = serde_json::to_string(&flat).expect("FlatRecord serializes");
            writeln!(out, "{line}")?;
            flats += 1;
        }
        Ok(())
    })?;
    stats.flats_emitted = flats;
    Ok(stats)
}

/// Reads flattened records back from a JSONL stream (one per line).
pub fn read_flats(path: &Path) -> Result<Vec<FlatRecord>, IngestError> {
    let f = File::open(path)
        .map_err(|e| IngestError::Unreadable { locator: path.display().to_string(), source: e })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let flat: FlatRecord = serde_json::from_str(&line).map_err(|e| {
            IngestError::Archive {
                locator: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            }
        })?;
        out.push(flat);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Location, ResponseObservation};
    use std::io::Write;

    fn record(vp: &str, anomaly: bool, observations: usize, matching: usize) -> QuackTestRecord {
        let mut response = Vec::new();
        for i in 0..observations {
            response.push(ResponseObservation {
                matches_template: i < matching,
                response: if i < matching { None } else { Some(format!("HTTP/1.1 403 body {i}")) },
                start_time: "2021-07-19T01:07:35Z".into(),
                end_time: "2021-07-19T01:07:37Z".into(),
            });
        }
        QuackTestRecord {
            vp: vp.into(),
            location: Location { country_name: "China".into(), country_code: "CN".into() },
            service: "echo".into(),
            test_url: "example.org".into(),
            response,
            anomaly,
            controls_failed: false,
            stateful_block: false,
            tag: "2021-07-19T01:01:01".into(),
        }
    }

    fn tar_with_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let tmp = tempfile::Builder::new().suffix(".tar").tempfile().unwrap();
        let mut builder = tar::Builder::new(tmp.reopen().unwrap());
        let body = lines.join("\n");
        let mut header = tar::Header::new_gnu();
        header.set_size(body.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder.append_data(&mut header, "member0.jsonl", body.as_bytes()).unwrap();
        builder.finish().unwrap();
        tmp
    }

    #[test]
    fn records_stream_in_file_order() {
        let lines: Vec<String> = (0..3)
            .map(|i| serde_json::to_string(&record(&format!("10.0.0.{i}"), false, 1, 0)).unwrap())
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let tar = tar_with_lines(&refs);

        let mut seen = Vec::new();
        let stats = stream_records(&[tar.path().display().to_string()], |r| {
            seen.push(r.vp);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec!["10.0.0.0", "10.0.0.1", "10.0.0.2"]);
        assert_eq!(stats.records_read, 3);
        assert_eq!(stats.lines_skipped, 0);
    }

    #[test]
    fn truncated_line_is_skipped_not_fatal() {
        let good = serde_json::to_string(&record("10.0.0.1", false, 1, 0)).unwrap();
        let truncated = &good[..good.len() / 2];
        let tar = tar_with_lines(&[&good, truncated]);

        let mut count = 0;
        let stats = stream_records(&[tar.path().display().to_string()], |_| {
            count += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(count, 1);
        assert_eq!(stats.lines_skipped, 1);
    }

    #[test]
    fn unreadable_archive_is_fatal_and_names_the_locator() {
        let err = stream_records(&["/nonexistent/archive.tar".to_string()], |_| Ok(())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/archive.tar"), "{msg}");
    }

    #[test]
    fn gzipped_tar_roundtrips() {
        let line = serde_json::to_string(&record("10.0.0.7", true, 2, 1)).unwrap();
        let tmp = tempfile::Builder::new().suffix(".tar.gz").tempfile().unwrap();
        let gz = flate2::write::GzEncoder::new(tmp.reopen().unwrap(), flate2::Compression::fast());
        let mut builder = tar::Builder::new(gz);
        let mut header = tar::Header::new_gnu();
        header.set_size(line.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder.append_data(&mut header, "m.jsonl", line.as_bytes()).unwrap();
        builder.into_inner().unwrap().finish().unwrap();

        let stats = stream_records(&[tmp.path().display().to_string()], |_| Ok(())).unwrap();
        assert_eq!(stats.records_read, 1);
    }

    #[test]
    fn flatten_drops_matching_by_default() {
        // Mirrors the archived example: three observations, one matching the
        // probe template, flatten to two rows without it.
        let r = record("114.116.151.108", false, 3, 1);
        let flats = flatten(&r, false);
        assert_eq!(flats.len(), 2);
        assert!(flats.iter().all(|f| !f.matches_template));
        let all = flatten(&r, true);
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn flatten_preserves_scalar_fields_verbatim() {
        let r = record("114.116.151.108", true, 2, 0);
        for f in flatten(&r, true) {
            assert_eq!(f.vp, r.vp);
            assert_eq!(f.country_name, r.location.country_name);
            assert_eq!(f.country_code, r.location.country_code);
            assert_eq!(f.service, r.service);
            assert_eq!(f.test_url, r.test_url);
            assert_eq!(f.anomaly, r.anomaly);
            assert_eq!(f.controls_failed, r.controls_failed);
            assert_eq!(f.stateful_block, r.stateful_block);
            assert_eq!(f.tag, r.tag);
        }
    }

    #[test]
    fn anomaly_filter() {
        let records: Vec<QuackTestRecord> =
            (0..5).map(|i| record(&format!("10.0.0.{i}"), i % 2 == 0, 1, 0)).collect();
        assert_eq!(filter_anomalies(records.clone().into_iter(), true).count(), 3);
        assert_eq!(filter_anomalies(records.into_iter(), false).count(), 5);
        assert_eq!(filter_anomalies(Vec::new().into_iter(), true).count(), 0);
    }

    #[test]
    fn ingest_to_writer_counts_flats() {
        let lines: Vec<String> = vec![
            serde_json::to_string(&record("10.0.0.1", true, 3, 1)).unwrap(),
            serde_json::to_string(&record("10.0.0.2", false, 2, 0)).unwrap(),
        ];
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let tar = tar_with_lines(&refs);

        let mut out = Vec::new();
        let opts = FlattenOptions { include_matching: false, anomalies_only: true };
        let stats =
            ingest_to_writer(&[tar.path().display().to_string()], opts, &mut out).unwrap();
        assert_eq!(stats.records_read, 2);
        assert_eq!(stats.flats_emitted, 2); // only the anomaly record's two non-matching rows

        // The emitted JSONL parses back into FlatRecords.
        let mut tmp = tempfile::NamedTempFile::new().unwrap();
        tmp.write_all(&out).unwrap();
        let flats = read_flats(tmp.path()).unwrap();
        assert_eq!(flats.len(), 2);
        assert_eq!(flats[0].vp, "10.0.0.1");
    }
}
