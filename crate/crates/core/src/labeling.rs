//! Label assignment via regular-expression fingerprints, class balancing by
//! under-sampling, and seeded dataset partitioning.

use std::io::{BufRead, BufReader, Read};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::FlatRecord;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("fingerprint '{name}': invalid pattern: {source}")]
    BadPattern { name: String, source: regex::Error },
    #[error("duplicate fingerprint name '{0}'")]
    DuplicateName(String),
    #[error("fingerprint file line {line}: {source}")]
    BadLine { line: usize, source: serde_json::Error },
    #[error("cannot balance: a class is empty")]
    EmptyClass,
    #[error("partition ratio out of [0,1]: {0}")]
    BadRatio(f64),
    #[error("partition ratios must sum to 1, got {0}")]
    RatioSum(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Censored,
    Uncensored,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Censored,
    Uncensored,
}

impl From<Verdict> for Label {
    fn from(v: Verdict) -> Label {
        match v {
            Verdict::Censored => Label::Censored,
            Verdict::Uncensored => Label::Uncensored,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FingerprintSpec {
    name: String,
    pattern: String,
    verdict: Verdict,
}

/// A named block-page (or benign-page) signature. File order is matching
/// priority: the first matching fingerprint decides the label.
#[derive(Debug, Clone)]
pub struct Fingerprint {
    pub name: String,
    pub pattern: Regex,
    pub verdict: Verdict,
}

impl Fingerprint {
    pub fn new(name: &str, pattern: &str, verdict: Verdict) -> Result<Self, LabelError> {
        let re = Regex::new(pattern)
            .map_err(|e| LabelError::BadPattern { name: name.into(), source: e })?;
        Ok(Fingerprint { name: name.into(), pattern: re, verdict })
    }
}

/// Parses a fingerprint set from JSONL lines of `{name, pattern, verdict}`.
pub fn read_fingerprints(reader: impl Read) -> Result<Vec<Fingerprint>, LabelError> {
    let mut out: Vec<Fingerprint> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: FingerprintSpec = serde_json::from_str(&line)
            .map_err(|e| LabelError::BadLine { line: i + 1, source: e })?;
        if out.iter().any(|f| f.name == spec.name) {
            return Err(LabelError::DuplicateName(spec.name));
        }
        out.push(Fingerprint::new(&spec.name, &spec.pattern, spec.verdict)?);
    }
    Ok(out)
}

/// First fingerprint whose pattern matches the response text decides the
/// label; no match (or absent response text) is Undetermined.
pub fn match_fingerprints(flat: &FlatRecord, fingerprints: &[Fingerprint]) -> Label {
    let Some(text) = flat.response.as_deref() else {
        return Label::Undetermined;
    };
    for fp in fingerprints {
        if fp.pattern.is_match(text) {
            return fp.verdict.into();
        }
    }
    Label::Undetermined
}

/// A flattened record with its assigned label, as written to labeled JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledRecord {
    #[serde(flatten)]
    pub flat: FlatRecord,
    pub label: Label,
}

/// Randomly down-samples the majority class to the minority size and
/// shuffles the result, all driven by `seed`. Inputs must carry only
/// Censored/Uncensored labels.
pub fn balance_undersample<T: Clone>(
    examples: &[(T, Label)],
    seed: u64,
) -> Result<Vec<(T, Label)>, LabelError> {
    let censored: Vec<&(T, Label)> =
        examples.iter().filter(|(_, l)| *l == Label::Censored).collect();
    let uncensored: Vec<&(T, Label)> =
        examples.iter().filter(|(_, l)| *l == Label::Uncensored).collect();
    if censored.is_empty() || uncensored.is_empty() {
        return Err(LabelError::EmptyClass);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let target = censored.len().min(uncensored.len());
    let sample = |class: &[&(T, Label)], rng: &mut ChaCha20Rng| -> Vec<(T, Label)> {
        if class.len() == target {
            class.iter().map(|x| (*x).clone()).collect()
        } else {
            let mut idx: Vec<usize> = (0..class.len()).collect();
            idx.shuffle(rng);
            idx.truncate(target);
            idx.sort_unstable(); // keep input order within the class
            idx.into_iter().map(|i| class[i].clone()).collect()
        }
    };

    let mut out = sample(&censored, &mut rng);
    out.extend(sample(&uncensored, &mut rng));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Seeded three-way split. Sizes are floor-rounded with the remainder
/// assigned to the training partition.
pub fn partition<T: Clone>(
    examples: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), LabelError> {
    let (rt, rv, rs) = ratios;
    for r in [rt, rv, rs] {
        if !(0.0..=1.0).contains(&r) {
            return Err(LabelError::BadRatio(r));
        }
    }
    let sum = rt + rv + rs;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(LabelError::RatioSum(sum));
    }

    let n = examples.len();
    let n_val = (n as f64 * rv).floor() as usize;
    let n_test = (n as f64 * rs).floor() as usize;
    // Remainder after flooring every partition goes to train.
    let n_train = n - n_val - n_test;

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let take = |range: std::ops::Range<usize>| -> Vec<T> {
        idx[range].iter().map(|&i| examples[i].clone()).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok((train, val, test))
}

/// Partition sizes under the documented rounding rule, split out so the rule
/// itself can be enumerated in tests.
pub fn partition_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let n_val = (n as f64 * ratios.1).floor() as usize;
    let n_test = (n as f64 * ratios.2).floor() as usize;
    (n - n_val - n_test, n_val, n_test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::FlatRecord;

    fn flat(response: Option<&str>) -> FlatRecord {
        FlatRecord {
            vp: "1.2.3.4".into(),
            country_name: "China".into(),
            country_code: "CN".into(),
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

    fn fps() -> Vec<Fingerprint> {
        vec![
            Fingerprint::new("blockpage_a", "(?i)access denied", Verdict::Censored).unwrap(),
            Fingerprint::new("benign_echo", "^echo-ok", Verdict::Uncensored).unwrap(),
        ]
    }

    #[test]
    fn direct_match_labels_censored() {
        let f = flat(Some("HTTP/1.1 403\n\nACCESS DENIED by firewall"));
        assert_eq!(match_fingerprints(&f, &fps()), Label::Censored);
    }

    #[test]
    fn no_match_and_absent_text_are_undetermined() {
        assert_eq!(match_fingerprints(&flat(Some("hello")), &fps()), Label::Undetermined);
        assert_eq!(match_fingerprints(&flat(None), &fps()), Label::Undetermined);
    }

    #[test]
    fn first_match_wins_ordering() {
        // Prepending a catch-all censored fingerprint labels everything.
        let mut ordered = vec![Fingerprint::new("all", ".", Verdict::Censored).unwrap()];
        ordered.extend(fps());
        assert_eq!(match_fingerprints(&flat(Some("echo-ok")), &ordered), Label::Censored);
        assert_eq!(match_fingerprints(&flat(Some("echo-ok")), &fps()), Label::Uncensored);
    }

    #[test]
    fn fingerprint_file_parses_and_rejects_duplicates() {
        let body = "{\"name\":\"a\",\"pattern\":\"x\",\"verdict\":\"censored\"}\n\
                    {\"name\":\"b\",\"pattern\":\"y\",\"verdict\":\"uncensored\"}\n";
        let fps = read_fingerprints(body.as_bytes()).unwrap();
        assert_eq!(fps.len(), 2);

        let dup = "{\"name\":\"a\",\"pattern\":\"x\",\"verdict\":\"censored\"}\n\
                   {\"name\":\"a\",\"pattern\":\"y\",\"verdict\":\"censored\"}\n";
        assert!(matches!(read_fingerprints(dup.as_bytes()), Err(LabelError::DuplicateName(_))));
    }

    #[test]
    fn undersample_exact_counts() {
        let examples: Vec<(u32, Label)> = (0..1000)
            .map(|i| (i, Label::Uncensored))
            .chain((1000..1300).map(|i| (i, Label::Censored)))
            .collect();
        let balanced = balance_undersample(&examples, 7).unwrap();
        let c = balanced.iter().filter(|(_, l)| *l == Label::Censored).count();
        let u = balanced.iter().filter(|(_, l)| *l == Label::Uncensored).count();
        assert_eq!((c, u), (300, 300));
    }

    #[test]
    fn undersample_is_deterministic_and_payloads_unaltered() {
        let examples: Vec<(u32, Label)> = (0..50)
            .map(|i| (i, Label::Censored))
            .chain((50..100).map(|i| (i, Label::Uncensored)))
            .collect();
        let a = balance_undersample(&examples, 3).unwrap();
        let b = balance_undersample(&examples, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        // Already balanced: membership is unchanged, only order differs.
        let mut ids: Vec<u32> = a.iter().map(|(i, _)| *i).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn undersample_empty_class_errors() {
        let examples: Vec<(u32, Label)> = (0..10).map(|i| (i, Label::Censored)).collect();
        assert!(matches!(balance_undersample(&examples, 1), Err(LabelError::EmptyClass)));
    }

    #[test]
    fn partition_ten_items() {
        let items: Vec<u32> = (0..10).collect();
        let (tr, va, te) = partition(&items, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn partition_is_a_disjoint_cover_and_deterministic() {
        let items: Vec<u32> = (0..37).collect();
        let (tr, va, te) = partition(&items, (0.7, 0.1, 0.2), 42).unwrap();
        let mut all: Vec<u32> = tr.iter().chain(&va).chain(&te).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, items);

        let again = partition(&items, (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!((tr, va, te), again);
    }

    #[test]
    fn partition_rejects_bad_ratios() {
        let items: Vec<u32> = (0..4).collect();
        assert!(partition(&items, (0.7, 0.1, 0.3), 0).is_err());
        assert!(partition(&items, (1.2, -0.4, 0.2), 0).is_err());
    }

    #[test]
    fn rounding_rule_enumeration() {
        // Oracle: floor val and test, remainder (including both floored
        // leftovers) to train. Enumerated for n in 1..=50.
        for n in 1..=50usize {
            let (tr, va, te) = partition_sizes(n, (0.7, 0.1, 0.2));
            let brute_val = (n as f64 * 0.1).floor() as usize;
            let brute_test = (n as f64 * 0.2).floor() as usize;
            assert_eq!(va, brute_val);
            assert_eq!(te, brute_test);
            assert_eq!(tr + va + te, n);
            assert!(tr >= (n as f64 * 0.7).floor() as usize);
        }
        // Spot value frozen from the oracle: floor gives (6,0,1), the
        // remainder of 2 goes to train.
        assert_eq!(partition_sizes(9, (0.7, 0.1, 0.2)), (8, 0, 1));
    }
}
