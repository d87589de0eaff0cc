//! On-disk dataset formats: token vectors, embeddings, image planes,
//! training histories, labeled records, and prediction lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cd::ClassifierEpoch;
use crate::censor2seq::EpochRecord;
use crate::image::{GrayImage, CELLS, HEIGHT, WIDTH};
use crate::labeling::{Label, LabeledRecord};
use crate::vectorizer::RawVector;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: String, reason: &'static str },
    #[error("{path}: line {line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

const VEC_MAGIC: &[u8; 8] = b"RAWVEC01";
const EMB_MAGIC: &[u8; 8] = b"EMBVEC01";
const IMG_MAGIC: &[u8; 8] = b"GRAYIM01";
/// Token serialization tag recorded in image dataset headers.
const IMG_TOKEN_TAG: &[u8; 8] = b"u16le\0\0\0";

/// Length-prefixed binary vectors: magic, token range V, count, then each
/// vector as a u32 length followed by little-endian u32 tokens.
pub fn save_vectors(path: &Path, vectors: &[RawVector], range: u32) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let inner = |w: &mut dyn Write| -> std::io::Result<()> {
        w.write_all(VEC_MAGIC)?;
        w.write_all(&range.to_le_bytes())?;
        w.write_all(&(vectors.len() as u64).to_le_bytes())?;
        for v in vectors {
            w.write_all(&(v.tokens.len() as u32).to_le_bytes())?;
            for &t in &v.tokens {
                w.write_all(&t.to_le_bytes())?;
            }
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err(path))
}

pub fn load_vectors(path: &Path) -> Result<(Vec<RawVector>, u32), FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != VEC_MAGIC {
        return Err(FormatError::Corrupt { path: path.display().to_string(), reason: "bad magic" });
    }
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf4).map_err(io_err(path))?;
    let range = u32::from_le_bytes(buf4);
    r.read_exact(&mut buf8).map_err(io_err(path))?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf4).map_err(io_err(path))?;
        let len = u32::from_le_bytes(buf4) as usize;
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf4).map_err(io_err(path))?;
            tokens.push(u32::from_le_bytes(buf4));
        }
        vectors.push(RawVector { tokens });
    }
    Ok((vectors, range))
}

/// Debug JSONL form of the vectors, one token array per line.
pub fn write_vectors_jsonl(path: &Path, vectors: &[RawVector]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for v in vectors {
        serde_json::to_writer(&mut w, &v.tokens)
            .map_err(|e| FormatError::Json { path: path.display().to_string(), line: 0, source: e })?;
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Embedding file: magic, dimension, count, then little-endian f32 values.
pub fn save_embeddings(path: &Path, embeddings: &[Vec<f64>]) -> Result<(), FormatError> {
    let dim = embeddings.first().map_or(0, Vec::len) as u32;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let inner = |w: &mut dyn Write| -> std::io::Result<()> {
        w.write_all(EMB_MAGIC)?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(embeddings.len() as u64).to_le_bytes())?;
        for e in embeddings {
            for &v in e {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err(path))
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Vec<f64>>, FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != EMB_MAGIC {
        return Err(FormatError::Corrupt { path: path.display().to_string(), reason: "bad magic" });
    }
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf4).map_err(io_err(path))?;
    let dim = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf8).map_err(io_err(path))?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut e = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut buf4).map_err(io_err(path))?;
            e.push(f32::from_le_bytes(buf4) as f64);
        }
        out.push(e);
    }
    Ok(out)
}

/// Image dataset: magic, width, height, token serialization tag, count,
/// then raw 224x224 byte planes.
pub fn save_images(path: &Path, images: &[GrayImage]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let inner = |w: &mut dyn Write| -> std::io::Result<()> {
        w.write_all(IMG_MAGIC)?;
        w.write_all(&(WIDTH as u32).to_le_bytes())?;
        w.write_all(&(HEIGHT as u32).to_le_bytes())?;
        w.write_all(IMG_TOKEN_TAG)?;
        w.write_all(&(images.len() as u64).to_le_bytes())?;
        for img in images {
            w.write_all(&img.pixels)?;
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err(path))
}

pub fn load_images(path: &Path) -> Result<Vec<GrayImage>, FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != IMG_MAGIC {
        return Err(FormatError::Corrupt { path: path.display().to_string(), reason: "bad magic" });
    }
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf4).map_err(io_err(path))?;
    let w = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4).map_err(io_err(path))?;
    let h = u32::from_le_bytes(buf4) as usize;
    if w != WIDTH || h != HEIGHT {
        return Err(FormatError::Corrupt {
            path: path.display().to_string(),
            reason: "unexpected dimensions",
        });
    }
    let mut tag = [0u8; 8];
    r.read_exact(&mut tag).map_err(io_err(path))?;
    if &tag != IMG_TOKEN_TAG {
        return Err(FormatError::Corrupt {
            path: path.display().to_string(),
            reason: "unknown token serialization tag",
        });
    }
    r.read_exact(&mut buf8).map_err(io_err(path))?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pixels = vec![0u8; CELLS];
        r.read_exact(&mut pixels).map_err(io_err(path))?;
        out.push(GrayImage { pixels });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Autoencoder history CSV: epoch, lr, train_loss, val_loss.
pub fn write_ae_history(path: &Path, history: &[EpochRecord]) -> Result<(), FormatError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let inner = |w: &mut csv::Writer<_>| -> csv::Result<()> {
        w.write_record(["epoch", "lr", "train_loss", "val_loss"])?;
        for row in history {
            w.write_record([
                row.epoch.to_string(),
                row.lr.to_string(),
                fmt_opt(row.train_loss),
                row.val_loss.to_string(),
            ])?;
        }
        Ok(())
    };
    inner(&mut w)
        .map_err(|e| FormatError::Io { path: path.display().to_string(), source: e.into() })?;
    w.flush().map_err(io_err(path))
}

/// Classifier history CSV: epoch, lr, train_loss, val_loss, val_accuracy.
pub fn write_classifier_history(
    path: &Path,
    history: &[ClassifierEpoch],
) -> Result<(), FormatError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let inner = |w: &mut csv::Writer<_>| -> csv::Result<()> {
        w.write_record(["epoch", "lr", "train_loss", "val_loss", "val_accuracy"])?;
        for row in history {
            w.write_record([
                row.epoch.to_string(),
                row.lr.to_string(),
                fmt_opt(row.train_loss),
                row.val_loss.to_string(),
                row.val_accuracy.to_string(),
            ])?;
        }
        Ok(())
    };
    inner(&mut w)
        .map_err(|e| FormatError::Io { path: path.display().to_string(), source: e.into() })?;
    w.flush().map_err(io_err(path))
}

/// One prediction line: record key, probability, decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub record_key: String,
    pub probability: f64,
    pub decision: Label,
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for p in predictions {
        serde_json::to_writer(&mut w, p)
            .map_err(|e| FormatError::Json { path: path.display().to_string(), line: 0, source: e })?;
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_labeled(path: &Path, records: &[LabeledRecord]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| FormatError::Json { path: path.display().to_string(), line: 0, source: e })?;
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_labeled(path: &Path) -> Result<Vec<LabeledRecord>, FormatError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledRecord = serde_json::from_str(&line).map_err(|e| FormatError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source: e,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vectors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let vs = vec![RawVector { tokens: vec![257, 0, 300, 258] }, RawVector { tokens: vec![] }];
        save_vectors(&path, &vs, 310).unwrap();
        let (back, range) = load_vectors(&path).unwrap();
        assert_eq!(back, vs);
        assert_eq!(range, 310);
    }

    #[test]
    fn embeddings_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let es = vec![vec![0.5, -1.25, 3.0], vec![0.0, 2.0, -0.125]];
        save_embeddings(&path, &es).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back, es); // all values exactly representable in f32
    }

    #[test]
    fn images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.bin");
        let imgs = vec![GrayImage { pixels: vec![7u8; CELLS] }];
        save_images(&path, &imgs).unwrap();
        assert_eq!(load_images(&path).unwrap(), imgs);
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOTMAGICxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_vectors(&path), Err(FormatError::Corrupt { .. })));
        assert!(matches!(load_embeddings(&path), Err(FormatError::Corrupt { .. })));
        assert!(matches!(load_images(&path), Err(FormatError::Corrupt { .. })));
    }

    proptest! {
        #[test]
        fn vector_file_round_trips(tokens in proptest::collection::vec(0u32..7069, 0..64)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.bin");
            let vs = vec![RawVector { tokens }];
            save_vectors(&path, &vs, 7069).unwrap();
            let (back, _) = load_vectors(&path).unwrap();
            prop_assert_eq!(back, vs);
        }
    }

    #[test]
    fn history_csv_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let history = vec![
            EpochRecord { epoch: 0, lr: 0.003, train_loss: None, val_loss: 39.0 },
            EpochRecord { epoch: 1, lr: 0.003, train_loss: Some(30.5), val_loss: 28.0 },
        ];
        write_ae_history(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,lr,train_loss,val_loss"));
        assert_eq!(lines.next(), Some("0,0.003,,39"));
        assert_eq!(lines.next(), Some("1,0.003,30.5,28"));
    }
}
