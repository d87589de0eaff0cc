//! Metrics, classification of undetermined records, and pattern-based
//! grouping of predicted-censored candidates.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::FlatRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and labels differ in length: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("group rule '{name}': invalid pattern: {source}")]
    BadPattern { name: String, source: regex::Error },
    #[error("rule file line {line}: {source}")]
    BadLine { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Confusion counts and summary statistics at a decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean binary cross-entropy of the probabilities.
    pub loss: f64,
    /// (TP + TN) / (P + N).
    pub accuracy: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn compute_metrics(
    probabilities: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<Metrics, EvalError> {
    if probabilities.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: probabilities.len(),
            labels: labels.len(),
        });
    }
    let mut m = Metrics { loss: 0.0, accuracy: 0.0, tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (&p, &y) in probabilities.iter().zip(labels) {
        let decision = p >= threshold;
        match (decision, y) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
        let clamped = p.clamp(1e-12, 1.0 - 1e-12);
        m.loss -= if y { clamped.ln() } else { (1.0 - clamped).ln() };
    }
    let n = probabilities.len().max(1) as f64;
    m.loss /= n;
    m.accuracy = (m.tp + m.tn) as f64 / n;
    Ok(m)
}

/// Decisions over an unlabeled set plus the fraction flagged as probable
/// censorship. An empty set reports fraction 0 with a warning.
pub fn classify_undetermined(probabilities: &[f64], threshold: f64) -> (Vec<bool>, f64) {
    if probabilities.is_empty() {
        log::warn!("classify_undetermined: empty input set; fraction reported as 0");
        return (Vec::new(), 0.0);
    }
    let decisions: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
    let censored = decisions.iter().filter(|d| **d).count();
    (decisions.clone(), censored as f64 / probabilities.len() as f64)
}

/// One candidate-grouping rule. The rule file shares the fingerprint JSONL
/// format with an added `category` field; file order is match priority.
#[derive(Debug, Clone)]
pub struct GroupRule {
    pub name: String,
    pub pattern: Regex,
    pub category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupRuleSpec {
    name: String,
    pattern: String,
    category: String,
}

impl GroupRule {
    pub fn new(name: &str, pattern: &str, category: &str) -> Result<Self, EvalError> {
        let re = Regex::new(pattern)
            .map_err(|e| EvalError::BadPattern { name: name.into(), source: e })?;
        Ok(GroupRule { name: name.into(), pattern: re, category: category.into() })
    }
}

pub fn read_group_rules(reader: impl Read) -> Result<Vec<GroupRule>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: GroupRuleSpec = serde_json::from_str(&line)
            .map_err(|e| EvalError::BadLine { line: i + 1, source: e })?;
        out.push(GroupRule::new(&spec.name, &spec.pattern, &spec.category)?);
    }
    Ok(out)
}

/// The default rule set, reconstructed from the published candidate-group
/// names. The exact original expressions were never published; these
/// patterns are first-match-wins approximations of the group descriptions.
pub fn default_group_rules() -> Vec<GroupRule> {
    let rules = [
        ("att", r"(?i)att\.net|at&t", "ATT block page"),
        ("bitdefender", r"(?i)bitdefender", "Bitdefender Alert Page block page"),
        ("extra_safe", r"(?i)extra\s*safe\s*internet", "Extra Safe Internet block page"),
        ("http_302", r"^HTTP/1\.[01] 302", "HTTP code 302"),
        ("meraki", r"(?i)meraki", "Meraki block page"),
        ("seqrite", r"(?i)seqrite", "Seqrite Endpoint Security block page"),
        ("net_protector", r"(?i)net\s*protector", "Net Protector block page"),
        (
            "connection_close_only",
            r"(?s)\A[^<]*Connection:\s*close[^<]*\z",
            "`Connection: close` message returned without block page",
        ),
        ("reset_by_peer", r"(?i)connection reset by peer", "`connection reset by peer' error"),
        ("no_route", r"(?i)no route to host", "`no route to host' error"),
        ("conn_timed_out", r"(?i)connection timed out", "`connection timed out' error"),
        ("io_timeout", r"(?i)i/o timeout", "`I/O timeout' error"),
        ("net_unreachable", r"(?i)network is unreachable", "`network is unreachable' error"),
        ("conn_refused", r"(?i)connection refused", "`connection refused' error"),
        (
            "echo_mismatch",
            r"(?i)echo response does not match echo request",
            "`echo response does not match echo request' and no other data",
        ),
    ];
    rules
        .iter()
        .map(|(name, pattern, category)| {
            GroupRule::new(name, pattern, category).expect("default rules compile")
        })
        .collect()
}

pub const UNMATCHED_CATEGORY: &str = "unmatched";

/// Frequency and deduplicated sorted country list for one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupReport {
    pub category: String,
    pub frequency: u64,
    pub locations: Vec<String>,
}

/// Assigns each candidate to the first matching category and aggregates.
/// Categories appear in rule order, followed by an `unmatched` bucket when
/// anything falls through; the frequencies always sum to the input count.
pub fn group_candidates(candidates: &[FlatRecord], rules: &[GroupRule]) -> Vec<GroupReport> {
    let mut freq = vec![0u64; rules.len() + 1];
    let mut locations: Vec<BTreeSet<String>> = vec![BTreeSet::new(); rules.len() + 1];

    for flat in candidates {
        let slot = match flat.response.as_deref() {
            Some(text) => rules
                .iter()
                .position(|r| r.pattern.is_match(text))
                .unwrap_or(rules.len()),
            None => rules.len(),
        };
        freq[slot] += 1;
        locations[slot].insert(flat.country_name.clone());
    }

    let mut out = Vec::new();
    for (i, rule) in rules.iter().enumerate() {
        if freq[i] > 0 {
            out.push(GroupReport {
                category: rule.category.clone(),
                frequency: freq[i],
                locations: locations[i].iter().cloned().collect(),
            });
        }
    }
    if freq[rules.len()] > 0 {
        out.push(GroupReport {
            category: UNMATCHED_CATEGORY.into(),
            frequency: freq[rules.len()],
            locations: locations[rules.len()].iter().cloned().collect(),
        });
    }
    out
}

/// CSV rendering: No., Type, Frequency, Locations.
pub fn write_report_csv(reports: &[GroupReport], w: &mut dyn std::io::Write) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["No.", "Type", "Frequency", "Locations"])?;
    for (i, r) in reports.iter().enumerate() {
        wtr.write_record([
            (i + 1).to_string(),
            r.category.clone(),
            r.frequency.to_string(),
            r.locations.join(", "),
        ])?;
    }
    wtr.flush()
}

/// Human-readable table mirroring the CSV layout.
pub fn write_report_text(reports: &[GroupReport], w: &mut dyn std::io::Write) -> std::io::Result<()> {
    writeln!(w, "{:>3}  {:<55} {:>9}  Locations", "No.", "Type", "Frequency")?;
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            w,
            "{:>3}  {:<55} {:>9}  {}",
            i + 1,
            r.category,
            r.frequency,
            r.locations.join(", ")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn all_correct_and_all_wrong() {
        let m = compute_metrics(&[0.9, 0.1, 0.8], &[true, false, true], 0.5).unwrap();
        assert_eq!((m.tp, m.tn, m.fp, m.fn_), (2, 1, 0, 0));
        assert_abs_diff_eq!(m.accuracy, 1.0, epsilon = 1e-15);

        let m = compute_metrics(&[0.9, 0.1], &[false, true], 0.5).unwrap();
        assert_abs_diff_eq!(m.accuracy, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn threshold_zero_classifies_everything_positive() {
        let m = compute_metrics(&[0.0, 0.4, 1.0], &[true, false, false], 0.0).unwrap();
        assert_eq!(m.tn, 0);
        assert_eq!(m.fn_, 0);
        assert_eq!(m.tp + m.fp, 3);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let probs = [0.9, 0.2, 0.7, 0.4];
        let labels = [true, false, true, true];
        let a = compute_metrics(&probs, &labels, 0.5).unwrap();
        let b = compute_metrics(&[0.4, 0.7, 0.2, 0.9], &[true, true, false, true], 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_metrics(&[0.5], &[true, false], 0.5).is_err());
    }

    #[test]
    fn counts_always_cover_the_dataset() {
        let probs: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let labels: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let m = compute_metrics(&probs, &labels, 0.35).unwrap();
        assert_eq!(m.tp + m.tn + m.fp + m.fn_, 100);
        assert!(m.accuracy >= 0.0 && m.accuracy <= 1.0);
    }

    #[test]
    fn undetermined_classification() {
        let (d, f) = classify_undetermined(&[], 0.5);
        assert!(d.is_empty());
        assert_eq!(f, 0.0);

        let (d, f) = classify_undetermined(&[1.0, 1.0, 1.0], 0.5);
        assert_eq!(d, vec![true, true, true]);
        assert_abs_diff_eq!(f, 1.0, epsilon = 1e-15);
    }

    fn flat(country: &str, response: Option<&str>) -> FlatRecord {
        FlatRecord {
            vp: "1.2.3.4".into(),
            country_name: country.into(),
            country_code: "XX".into(),
            service: "echo".into(),
            test_url: "x.org".into(),
            anomaly: true,
            controls_failed: false,
            stateful_block: false,
            tag: "2021-07-19T01:01:01".into(),
            matches_template: false,
            response: response.map(String::from),
            start_time: "2021-07-19T01:07:35Z".into(),
            end_time: "2021-07-19T01:07:37Z".into(),
        }
    }

    #[test]
    fn grouping_examples() {
        let rules = default_group_rules();
        let candidates = vec![
            flat("China", Some("read: connection reset by peer")),
            flat("Russia", Some("HTTP/1.1 302 Found\nLocation: http://blocked.example\n\n<html>moved</html>")),
            flat("Brazil", Some("something entirely novel")),
        ];
        let reports = group_candidates(&candidates, &rules);
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[0].category, "HTTP code 302");
        assert_eq!(reports[0].locations, vec!["Russia"]);
        assert_eq!(reports[1].category, "`connection reset by peer' error");
        assert_eq!(reports[1].locations, vec!["China"]);
        assert_eq!(reports[2].category, UNMATCHED_CATEGORY);
    }

    #[test]
    fn grouping_is_a_partition() {
        let rules = default_group_rules();
        let candidates: Vec<FlatRecord> = (0..30)
            .map(|i| match i % 5 {
                0 => flat("China", Some("connection reset by peer")),
                1 => flat("India", Some("Protected by Bitdefender Alert Page")),
                2 => flat("Poland", Some("dial tcp: i/o timeout")),
                3 => flat("Iran", None),
                _ => flat("Peru", Some("HTTP/1.1 200 OK\n\n<html>fine</html>")),
            })
            .collect();
        let reports = group_candidates(&candidates, &rules);
        let total: u64 = reports.iter().map(|r| r.frequency).sum();
        assert_eq!(total, 30);
    }

    #[test]
    fn first_match_wins_across_rules() {
        // A 302 block page that also mentions Bitdefender groups under the
        // earlier Bitdefender rule.
        let rules = default_group_rules();
        let candidates =
            vec![flat("India", Some("HTTP/1.1 302 Found\nbitdefender alert page"))];
        let reports = group_candidates(&candidates, &rules);
        assert_eq!(reports[0].category, "Bitdefender Alert Page block page");
    }

    #[test]
    fn connection_close_without_markup_only() {
        let rules = default_group_rules();
        let with_page = flat("US", Some("HTTP/1.1 403\nConnection: close\n\n<html>x</html>"));
        let without_page = flat("US", Some("HTTP/1.1 403\nConnection: close\n\n"));
        let reports = group_candidates(&[with_page, without_page], &rules);
        let close: Vec<_> = reports
            .iter()
            .filter(|r| r.category.contains("Connection: close"))
            .collect();
        assert_eq!(close.len(), 1);
        assert_eq!(close[0].frequency, 1);
    }

    #[test]
    fn rule_file_round_trip() {
        let body = "{\"name\":\"a\",\"pattern\":\"foo\",\"category\":\"Foo page\"}\n";
        let rules = read_group_rules(body.as_bytes()).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].category, "Foo page");
    }

    #[test]
    fn report_rendering() {
        let reports = vec![GroupReport {
            category: "HTTP code 302".into(),
            frequency: 3,
            locations: vec!["China".into(), "Russia".into()],
        }];
        let mut csv_out = Vec::new();
        write_report_csv(&reports, &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.contains("No.,Type,Frequency,Locations"));
        assert!(text.contains("1,HTTP code 302,3,\"China, Russia\""));

        let mut txt_out = Vec::new();
        write_report_text(&reports, &mut txt_out).unwrap();
        assert!(String::from_utf8(txt_out).unwrap().contains("HTTP code 302"));
    }
}
