//! Data-preparation subcommands: ingest, label, build-vocab, vectorize.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;

use censorseq_core::formats;
use censorseq_core::ingest::{ingest_to_writer, FlattenOptions};
use censorseq_core::labeling::{match_fingerprints, read_fingerprints, Label, LabeledRecord};
use censorseq_core::tokenizer::SubwordTokenizer;
use censorseq_core::vectorizer::{self, tokenize_text};
use censorseq_core::vocab::TokenVocabulary;

use crate::manifest::Manifest;

#[derive(Args)]
pub struct IngestArgs {
    /// Archive locators: tar / tar.gz paths or URLs; .jsonl accepted.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Keep only records the probe marked as anomalies.
    #[arg(long)]
    anomalies_only: bool,
    /// Also emit observations that matched the probe template.
    #[arg(long)]
    include_matching: bool,
}

pub fn run_ingest(args: IngestArgs) -> Result<()> {
    let opts = FlattenOptions {
        include_matching: args.include_matching,
        anomalies_only: args.anomalies_only,
    };
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&args.out)
            .with_context(|| format!("cannot create '{}'", args.out.display()))?,
    );
    let stats = ingest_to_writer(&args.input, opts, &mut out)?;
    drop(out);

    let local_inputs: Vec<PathBuf> = args
        .input
        .iter()
        .filter(|l| !l.starts_with("http://") && !l.starts_with("https://"))
        .map(PathBuf::from)
        .collect();
    let manifest = Manifest::new(
        "ingest",
        serde_json::json!({
            "in": args.input,
            "anomalies_only": args.anomalies_only,
            "include_matching": args.include_matching,
        }),
        &local_inputs,
        &[args.out.clone()],
        serde_json::to_value(stats)?,
    )?;
    manifest.write_for(&args.out)?;
    println!(
        "ingest: {} records read, {} lines skipped, {} flats emitted",
        stats.records_read, stats.lines_skipped, stats.flats_emitted
    );
    Ok(())
}

#[derive(Args)]
pub struct LabelArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    fingerprints: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn run_label(args: LabelArgs) -> Result<()> {
    let fps = read_fingerprints(
        std::fs::File::open(&args.fingerprints)
            .with_context(|| format!("cannot open '{}'", args.fingerprints.display()))?,
    )?;
    let flats = censorseq_core::ingest::read_flats(&args.input)?;

    let labeled: Vec<LabeledRecord> = flats
        .into_par_iter()
        .map(|flat| {
            let label = match_fingerprints(&flat, &fps);
            LabeledRecord { flat, label }
        })
        .collect();

    let mut counts = [0u64; 3];
    for l in &labeled {
        match l.label {
            Label::Censored => counts[0] += 1,
            Label::Uncensored => counts[1] += 1,
            Label::Undetermined => counts[2] += 1,
        }
    }
    formats::write_labeled(&args.out, &labeled)?;

    let manifest = Manifest::new(
        "label",
        serde_json::json!({ "in": args.input, "fingerprints": args.fingerprints }),
        &[args.input.clone(), args.fingerprints.clone()],
        &[args.out.clone()],
        serde_json::json!({
            "records": labeled.len(),
            "censored": counts[0],
            "uncensored": counts[1],
            "undetermined": counts[2],
        }),
    )?;
    manifest.write_for(&args.out)?;
    println!(
        "label: {} records -> {} censored, {} uncensored, {} undetermined",
        labeled.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

#[derive(Args)]
pub struct BuildVocabArgs {
    /// Flattened (optionally labeled) JSONL corpus.
    #[arg(long = "in")]
    input: PathBuf,
    /// Tokenizer vocabulary file (one piece per line).
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_frequency: u64,
}

pub fn run_build_vocab(args: BuildVocabArgs) -> Result<()> {
    let tok = SubwordTokenizer::from_file(&args.tokenizer)?;
    let flats = censorseq_core::ingest::read_flats(&args.input)?;

    let streams: Vec<Vec<u32>> = flats
        .par_iter()
        .map(|f| tokenize_text(&f.test_url, f.response.as_deref(), &tok))
        .collect();
    let vocab = TokenVocabulary::build(&streams, &tok, args.min_frequency);

    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&args.out)
            .with_context(|| format!("cannot create '{}'", args.out.display()))?,
    );
    vocab.save(&mut out)?;
    drop(out);

    let manifest = Manifest::new(
        "build-vocab",
        serde_json::json!({
            "in": args.input,
            "tokenizer": args.tokenizer,
            "min_frequency": args.min_frequency,
        }),
        &[args.input.clone(), args.tokenizer.clone()],
        &[args.out.clone()],
        serde_json::json!({
            "records": flats.len(),
            "text_dim": vocab.text_dim(),
            "retained": vocab.retained().len(),
            "token_range": vectorizer::vocab_range(&vocab),
        }),
    )?;
    manifest.write_for(&args.out)?;
    println!(
        "build-vocab: {} retained text tokens, token range {}",
        vocab.retained().len(),
        vectorizer::vocab_range(&vocab)
    );
    Ok(())
}

#[derive(Args)]
pub struct VectorizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_seq_len: usize,
    /// Also write a JSONL debug form of the vectors.
    #[arg(long)]
    jsonl_debug: Option<PathBuf>,
}

pub fn run_vectorize(args: VectorizeArgs) -> Result<()> {
    let tok = SubwordTokenizer::from_file(&args.tokenizer)?;
    let vocab = TokenVocabulary::load_file(&args.vocab)?;
    let flats = censorseq_core::ingest::read_flats(&args.input)?;

    let vectors = flats
        .par_iter()
        .map(|f| vectorizer::vectorize(f, &vocab, &tok, args.max_seq_len))
        .collect::<Result<Vec<_>, _>>()?;

    let range = vectorizer::vocab_range(&vocab);
    formats::save_vectors(&args.out, &vectors, range)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(debug) = &args.jsonl_debug {
        formats::write_vectors_jsonl(debug, &vectors)?;
        outputs.push(debug.clone());
    }

    let manifest = Manifest::new(
        "vectorize",
        serde_json::json!({
            "in": args.input,
            "vocab": args.vocab,
            "tokenizer": args.tokenizer,
            "max_seq_len": args.max_seq_len,
        }),
        &[args.input.clone(), args.vocab.clone(), args.tokenizer.clone()],
        &outputs,
        serde_json::json!({ "vectors": vectors.len(), "token_range": range }),
    )?;
    manifest.write_for(&args.out)?;
    println!("vectorize: {} vectors, token range {}", vectors.len(), range);
    Ok(())
}
