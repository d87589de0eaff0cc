//! Shared loaders and config-merging helpers.

use std::path::Path;

use anyhow::{bail, Context, Result};
use censorseq_core::labeling::{Label, LabeledRecord};
use serde::{Deserialize, Serialize};

/// Loads a JSON config file when given, otherwise the type's defaults.
/// Command-line flags are applied on top by the caller; the result is what
/// the manifest records.
pub fn load_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let body = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config '{}'", p.display()))?;
            serde_json::from_str(&body)
                .with_context(|| format!("invalid config '{}'", p.display()))
        }
        None => Ok(T::default()),
    }
}

/// Applies a flag override onto a config field.
pub fn overlay<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Index-tagged label line, as written beside split datasets.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IndexedLabel {
    pub index: usize,
    pub label: Label,
}

pub fn write_indexed_labels(path: &Path, labels: &[IndexedLabel]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path)
            .with_context(|| format!("cannot create '{}'", path.display()))?,
    );
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_indexed_labels(path: &Path) -> Result<Vec<IndexedLabel>> {
    use std::io::BufRead;
    let f = std::fs::File::open(path)
        .with_context(|| format!("cannot open labels '{}'", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: IndexedLabel = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(l);
    }
    Ok(out)
}

/// Binary ground-truth pairs (true = censored) from indexed labels.
pub fn binary_labels(labels: &[IndexedLabel]) -> Result<Vec<bool>> {
    labels
        .iter()
        .map(|l| match l.label {
            Label::Censored => Ok(true),
            Label::Uncensored => Ok(false),
            Label::Undetermined => bail!(
                "label file holds an undetermined record (index {}); evaluation needs binary ground truth",
                l.index
            ),
        })
        .collect()
}

/// Reads labeled records and pairs each with its line index.
pub fn read_labeled_records(path: &Path) -> Result<Vec<LabeledRecord>> {
    censorseq_core::formats::read_labeled(path)
        .with_context(|| format!("cannot read labeled records '{}'", path.display()))
}

/// Splits a comma-separated ratio triple like "0.7,0.1,0.2".
pub fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        bail!("ratios must be three comma-separated numbers, got '{s}'");
    }
    let p: Vec<f64> = parts
        .iter()
        .map(|x| x.trim().parse::<f64>().map_err(|_| anyhow::anyhow!("bad ratio '{x}'")))
        .collect::<Result<_>>()?;
    Ok((p[0], p[1], p[2]))
}
