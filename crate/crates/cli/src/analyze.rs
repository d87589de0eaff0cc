//! Analysis subcommands: classify, eval, group.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use censorseq_core::cd::CdModel;
use censorseq_core::evaluate::{
    classify_undetermined, compute_metrics, default_group_rules, group_candidates,
    read_group_rules, write_report_csv, write_report_text,
};
use censorseq_core::formats::{self, Prediction};
use censorseq_core::image::{to_grayscale, DenseBlockModel, GrayImage};
use censorseq_core::labeling::Label;
use censorseq_core::nn::checkpoint::Checkpoint;

use crate::manifest::Manifest;
use crate::util::{binary_labels, read_indexed_labels, read_labeled_records};

/// A trained decision model of either kind, resolved from the checkpoint.
enum AnyModel {
    Cd(CdModel),
    Img(DenseBlockModel),
}

fn load_model(path: &PathBuf) -> Result<AnyModel> {
    let ck = Checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint '{}'", path.display()))?;
    match ck.model_kind.as_str() {
        "cd_classifier" => Ok(AnyModel::Cd(CdModel::from_checkpoint(&ck)?)),
        "densenet_cd" => Ok(AnyModel::Img(DenseBlockModel::from_checkpoint(&ck)?)),
        other => bail!("checkpoint '{}' holds '{other}', not a classifier", path.display()),
    }
}

/// Resolves model inputs: embeddings for the embedding classifier, images
/// (or vectors converted on the fly) for the image model.
fn probabilities(
    model: &AnyModel,
    embeddings: Option<&PathBuf>,
    images: Option<&PathBuf>,
    vectors: Option<&PathBuf>,
    keep: Option<&[usize]>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let restrict = |n: usize| -> Vec<usize> {
        match keep {
            Some(ids) => ids.to_vec(),
            None => (0..n).collect(),
        }
    };
    match model {
        AnyModel::Cd(m) => {
            let Some(path) = embeddings else {
                bail!("this checkpoint classifies embeddings; pass --embeddings");
            };
            let embs = formats::load_embeddings(path)?;
            let ids = restrict(embs.len());
            let probs = ids
                .iter()
                .map(|&i| {
                    let e = embs.get(i).ok_or_else(|| {
                        anyhow::anyhow!("index {i} out of range for {} embeddings", embs.len())
                    })?;
                    Ok(m.classify(e)?)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((ids, probs))
        }
        AnyModel::Img(m) => {
            let imgs: Vec<GrayImage> = if let Some(path) = images {
                formats::load_images(path)?
            } else if let Some(path) = vectors {
                let (vecs, _) = formats::load_vectors(path)?;
                vecs.iter().map(to_grayscale).collect::<Result<_, _>>()?
            } else {
                bail!("this checkpoint classifies images; pass --images or --vectors");
            };
            let ids = restrict(imgs.len());
            let probs = ids
                .iter()
                .map(|&i| {
                    let img = imgs.get(i).ok_or_else(|| {
                        anyhow::anyhow!("index {i} out of range for {} images", imgs.len())
                    })?;
                    Ok(m.classify(img)?)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((ids, probs))
        }
    }
}

#[derive(Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Labeled JSONL aligned with the inputs; enables --only-label.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Restrict classification to records carrying this label
    /// (censored | uncensored | undetermined).
    #[arg(long)]
    only_label: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn parse_label(s: &str) -> Result<Label> {
    match s.to_ascii_lowercase().as_str() {
        "censored" => Ok(Label::Censored),
        "uncensored" => Ok(Label::Uncensored),
        "undetermined" => Ok(Label::Undetermined),
        other => bail!("unknown label '{other}'"),
    }
}

pub fn run_classify(args: ClassifyArgs) -> Result<()> {
    let model = load_model(&args.model)?;

    let keep: Option<Vec<usize>> = match (&args.labels, &args.only_label) {
        (Some(path), Some(want)) => {
            let want = parse_label(want)?;
            let records = read_labeled_records(path)?;
            Some(
                records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.label == want)
                    .map(|(i, _)| i)
                    .collect(),
            )
        }
        (None, Some(_)) => bail!("--only-label needs --labels"),
        _ => None,
    };

    let (ids, probs) = probabilities(
        &model,
        args.embeddings.as_ref(),
        args.images.as_ref(),
        args.vectors.as_ref(),
        keep.as_deref(),
    )?;
    let (decisions, fraction) = classify_undetermined(&probs, args.threshold);

    let predictions: Vec<Prediction> = ids
        .iter()
        .zip(&probs)
        .zip(&decisions)
        .map(|((&i, &p), &d)| Prediction {
            record_key: i.to_string(),
            probability: p,
            decision: if d { Label::Censored } else { Label::Uncensored },
        })
        .collect();
    formats::write_predictions(&args.out, &predictions)?;

    let mut inputs = vec![args.model.clone()];
    for p in [&args.embeddings, &args.images, &args.vectors, &args.labels].into_iter().flatten() {
        inputs.push(p.clone());
    }
    let positives = decisions.iter().filter(|d| **d).count();
    let manifest = Manifest::new(
        "classify",
        serde_json::json!({
            "model": args.model,
            "threshold": args.threshold,
            "only_label": args.only_label,
        }),
        &inputs,
        &[args.out.clone()],
        serde_json::json!({
            "records": probs.len(),
            "probable_censorship": positives,
            "censored_fraction": fraction,
        }),
    )?;
    manifest.write_for(&args.out)?;
    println!(
        "classify: {}/{} probable censorship ({:.2}%)",
        positives,
        probs.len(),
        fraction * 100.0
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Indexed label JSONL ({"index": .., "label": ..}) aligned with the data.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (_, probs) = probabilities(
        &model,
        args.embeddings.as_ref(),
        args.images.as_ref(),
        args.vectors.as_ref(),
        None,
    )?;
    let labels = read_indexed_labels(&args.labels)?;
    let truth = binary_labels(&labels)?;
    let metrics = compute_metrics(&probs, &truth, args.threshold)?;

    let mut w = csv::Writer::from_path(&args.out)
        .with_context(|| format!("cannot create '{}'", args.out.display()))?;
    w.write_record(["loss", "accuracy", "tp", "tn", "fp", "fn"])?;
    w.write_record([
        metrics.loss.to_string(),
        metrics.accuracy.to_string(),
        metrics.tp.to_string(),
        metrics.tn.to_string(),
        metrics.fp.to_string(),
        metrics.fn_.to_string(),
    ])?;
    w.flush()?;

    let mut inputs = vec![args.model.clone(), args.labels.clone()];
    for p in [&args.embeddings, &args.images, &args.vectors].into_iter().flatten() {
        inputs.push(p.clone());
    }
    let manifest = Manifest::new(
        "eval",
        serde_json::json!({ "model": args.model, "threshold": args.threshold }),
        &inputs,
        &[args.out.clone()],
        serde_json::to_value(metrics)?,
    )?;
    manifest.write_for(&args.out)?;
    println!("eval: loss {:.4}, accuracy {:.4}", metrics.loss, metrics.accuracy);
    Ok(())
}

#[derive(Args)]
pub struct GroupArgs {
    /// Candidate records: flattened (optionally labeled) JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Rule file (fingerprint JSONL with a category field); the built-in
    /// reconstructed rule set applies when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Optional human-readable rendering.
    #[arg(long)]
    text: Option<PathBuf>,
}

pub fn run_group(args: GroupArgs) -> Result<()> {
    let rules = match &args.rules {
        Some(path) => read_group_rules(
            std::fs::File::open(path)
                .with_context(|| format!("cannot open rules '{}'", path.display()))?,
        )?,
        None => default_group_rules(),
    };
    let flats = censorseq_core::ingest::read_flats(&args.input)?;
    let reports = group_candidates(&flats, &rules);

    let mut out = std::fs::File::create(&args.out)
        .with_context(|| format!("cannot create '{}'", args.out.display()))?;
    write_report_csv(&reports, &mut out)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(path) = &args.text {
        let mut t = std::fs::File::create(path)?;
        write_report_text(&reports, &mut t)?;
        outputs.push(path.clone());
    }

    let mut inputs = vec![args.input.clone()];
    if let Some(r) = &args.rules {
        inputs.push(r.clone());
    }
    let manifest = Manifest::new(
        "group",
        serde_json::json!({ "in": args.input, "rules": args.rules }),
        &inputs,
        &outputs,
        serde_json::json!({
            "candidates": flats.len(),
            "categories": reports.len(),
        }),
    )?;
    manifest.write_for(&args.out)?;
    for (i, r) in reports.iter().enumerate() {
        println!("{:>3}. {:<55} {:>7}  {}", i + 1, r.category, r.frequency, r.locations.join(", "));
    }
    Ok(())
}
