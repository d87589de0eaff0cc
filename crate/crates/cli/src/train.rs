//! Training subcommands: the autoencoder, the embedding classifier, the
//! image baseline, and embedding inference.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use censorseq_core::cd::{train_classifier, CdModel, CdTrainConfig};
use censorseq_core::censor2seq::{
    train_autoencoder, AeError, AeTrainConfig, Censor2Seq, Censor2SeqConfig, SamplingGranularity,
};
use censorseq_core::formats;
use censorseq_core::image::{
    to_grayscale, train_image_classifier, write_pgm, CnnConfig, DenseBlockModel, GrayImage,
    ImageError, ImgTrainConfig,
};
use censorseq_core::labeling::{balance_undersample, partition, Label};
use censorseq_core::nn::checkpoint::Checkpoint;
use censorseq_core::nn::schedule::LrSchedule;
use censorseq_core::vocab::SPECIALS;

use crate::manifest::Manifest;
use crate::util::{
    load_config, overlay, parse_ratios, read_labeled_records, write_indexed_labels, IndexedLabel,
};

/// First decoder input for vectors produced by the vectorizer: the offset
/// sequence-start marker.
const RAW_VECTOR_BOS: usize = 256 + SPECIALS.bos as usize;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AeRunConfig {
    pub seed: u64,
    pub val_fraction: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_epochs: u64,
    pub batch_size: usize,
    pub effective_batch: usize,
    pub sample_fraction: f64,
    pub teacher_forcing_prob: f64,
    pub per_step_sampling: bool,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_period: u32,
    pub early_stop_ratio: f64,
    pub early_stop_dips: u32,
}

impl Default for AeRunConfig {
    fn default() -> Self {
        AeRunConfig {
            seed: 0,
            val_fraction: 0.125,
            embed_dim: 96,
            hidden_dim: 128,
            max_epochs: 100,
            batch_size: 2,
            effective_batch: 16,
            sample_fraction: 0.1,
            teacher_forcing_prob: 0.5,
            per_step_sampling: false,
            lr_max: 0.003,
            lr_min: 0.0001,
            lr_period: 10,
            early_stop_ratio: 0.2,
            early_stop_dips: 2,
        }
    }
}

#[derive(Args)]
pub struct TrainAeArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    effective_batch: Option<usize>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    teacher_forcing: Option<f64>,
    #[arg(long)]
    per_step_sampling: Option<bool>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_period: Option<u32>,
    #[arg(long)]
    stop_ratio: Option<f64>,
    #[arg(long)]
    stop_dips: Option<u32>,
}

pub fn run_train_ae(args: TrainAeArgs) -> Result<()> {
    let mut cfg: AeRunConfig = load_config(args.config.as_deref())?;
    overlay(&mut cfg.seed, args.seed);
    overlay(&mut cfg.val_fraction, args.val_fraction);
    overlay(&mut cfg.embed_dim, args.embed_dim);
    overlay(&mut cfg.hidden_dim, args.hidden_dim);
    overlay(&mut cfg.max_epochs, args.epochs);
    overlay(&mut cfg.batch_size, args.batch_size);
    overlay(&mut cfg.effective_batch, args.effective_batch);
    overlay(&mut cfg.sample_fraction, args.sample_fraction);
    overlay(&mut cfg.teacher_forcing_prob, args.teacher_forcing);
    overlay(&mut cfg.per_step_sampling, args.per_step_sampling);
    overlay(&mut cfg.lr_max, args.lr_max);
    overlay(&mut cfg.lr_min, args.lr_min);
    overlay(&mut cfg.lr_period, args.lr_period);
    overlay(&mut cfg.early_stop_ratio, args.stop_ratio);
    overlay(&mut cfg.early_stop_dips, args.stop_dips);

    std::fs::create_dir_all(&args.out_dir)?;
    let (vectors, range) = formats::load_vectors(&args.vectors)?;
    if vectors.is_empty() {
        bail!("vector file '{}' is empty", args.vectors.display());
    }

    // Seeded train/validation split of the unsupervised corpus.
    let mut split_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(3);
    let mut idx: Vec<usize> = (0..vectors.len()).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut split_rng);
    let n_val = ((vectors.len() as f64 * cfg.val_fraction).floor() as usize)
        .clamp(1, vectors.len() - 1);
    let as_tokens = |i: &usize| -> Vec<usize> {
        vectors[*i].tokens.iter().map(|&t| t as usize).collect()
    };
    let val: Vec<Vec<usize>> = idx[..n_val].iter().map(as_tokens).collect();
    let train: Vec<Vec<usize>> = idx[n_val..].iter().map(as_tokens).collect();

    let model_cfg = Censor2SeqConfig {
        vocab_size: range as usize,
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        bos_token: RAW_VECTOR_BOS,
    };
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = Censor2Seq::new(model_cfg, &mut init_rng);

    let train_cfg = AeTrainConfig {
        seed: cfg.seed,
        max_epochs: cfg.max_epochs,
        batch_size: cfg.batch_size,
        effective_batch: cfg.effective_batch,
        sample_fraction: cfg.sample_fraction,
        teacher_forcing_prob: cfg.teacher_forcing_prob,
        granularity: if cfg.per_step_sampling {
            SamplingGranularity::PerStep
        } else {
            SamplingGranularity::PerSequence
        },
        lr: LrSchedule::new(cfg.lr_max, cfg.lr_min, cfg.lr_period),
        early_stop_ratio: cfg.early_stop_ratio,
        early_stop_dips: cfg.early_stop_dips,
    };

    let ckpt_path = args.out_dir.join("model.ckpt");
    let outcome = match train_autoencoder(&mut model, &train, &val, &train_cfg) {
        Ok(outcome) => outcome,
        Err(e @ AeError::NonFiniteLoss(_)) => {
            // Keep the last usable parameters on disk before aborting.
            model.to_checkpoint(None, 0).save(&ckpt_path)?;
            return Err(e).context("training aborted; last checkpoint saved");
        }
        Err(e) => return Err(e.into()),
    };

    model.to_checkpoint(None, outcome.epochs_run).save(&ckpt_path)?;
    let history_path = args.out_dir.join("history.csv");
    formats::write_ae_history(&history_path, &outcome.history)?;

    let manifest = Manifest::new(
        "train-ae",
        serde_json::to_value(&cfg)?,
        &[args.vectors.clone()],
        &[ckpt_path, history_path],
        serde_json::json!({
            "train_vectors": train.len(),
            "val_vectors": val.len(),
            "token_range": range,
            "epochs_run": outcome.epochs_run,
            "stopped_early": outcome.stopped_early,
            "initial_val_loss": outcome.history.first().map(|r| r.val_loss),
            "final_val_loss": outcome.history.last().map(|r| r.val_loss),
        }),
    )?;
    manifest.write_for(&args.out_dir)?;
    println!(
        "train-ae: {} epochs, val loss {:.4} -> {:.4}{}",
        outcome.epochs_run,
        outcome.history.first().map(|r| r.val_loss).unwrap_or(f64::NAN),
        outcome.history.last().map(|r| r.val_loss).unwrap_or(f64::NAN),
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn run_embed(args: EmbedArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.model)?;
    let model = Censor2Seq::from_checkpoint(&ck)?;
    let (vectors, _) = formats::load_vectors(&args.vectors)?;

    use rayon::prelude::*;
    let embeddings: Vec<Vec<f64>> = vectors
        .par_iter()
        .map(|v| {
            let tokens: Vec<usize> = v.tokens.iter().map(|&t| t as usize).collect();
            model.encode(&tokens).map(|(_, e)| e)
        })
        .collect::<Result<_, _>>()?;

    formats::save_embeddings(&args.out, &embeddings)?;
    let manifest = Manifest::new(
        "embed",
        serde_json::json!({ "vectors": args.vectors, "model": args.model }),
        &[args.vectors.clone(), args.model.clone()],
        &[args.out.clone()],
        serde_json::json!({
            "embeddings": embeddings.len(),
            "dim": embeddings.first().map(Vec::len).unwrap_or(0),
        }),
    )?;
    manifest.write_for(&args.out)?;
    println!(
        "embed: {} embeddings of dim {}",
        embeddings.len(),
        embeddings.first().map(Vec::len).unwrap_or(0)
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CdRunConfig {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub max_epochs: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_period: u32,
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for CdRunConfig {
    fn default() -> Self {
        CdRunConfig {
            seed: 0,
            ratios: (0.7, 0.1, 0.2),
            max_epochs: 200,
            batch_size: 16,
            lr_max: 1e-6,
            lr_min: 1e-7,
            lr_period: 10,
            patience: 5,
            min_delta: 1e-5,
        }
    }
}

#[derive(Args)]
pub struct TrainCdArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Labeled flattened JSONL aligned line-for-line with the embeddings.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train,validation,test fractions, e.g. 0.7,0.1,0.2.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_period: Option<u32>,
    #[arg(long)]
    patience: Option<u32>,
    #[arg(long)]
    min_delta: Option<f64>,
}

/// Balanced, labeled, index-tracked dataset split shared by both
/// supervised trainers.
struct SupervisedSplit {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn balanced_split(
    labels: &[Label],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SupervisedSplit> {
    let labeled: Vec<(usize, Label)> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != Label::Undetermined)
        .map(|(i, l)| (i, *l))
        .collect();
    if labeled.is_empty() {
        bail!("no censored/uncensored records to train on");
    }
    let balanced = balance_undersample(&labeled, seed)?;
    let (train, val, test) = partition(&balanced, ratios, seed)?;
    let just_idx = |v: Vec<(usize, Label)>| v.into_iter().map(|(i, _)| i).collect();
    Ok(SupervisedSplit {
        train: just_idx(train),
        val: just_idx(val),
        test: just_idx(test),
    })
}

fn write_split(path: &std::path::Path, split: &SupervisedSplit) -> Result<()> {
    let body = serde_json::json!({
        "train": split.train,
        "val": split.val,
        "test": split.test,
    });
    std::fs::write(path, serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

pub fn run_train_cd(args: TrainCdArgs) -> Result<()> {
    let mut cfg: CdRunConfig = load_config(args.config.as_deref())?;
    overlay(&mut cfg.seed, args.seed);
    if let Some(r) = &args.ratios {
        cfg.ratios = parse_ratios(r)?;
    }
    overlay(&mut cfg.max_epochs, args.epochs);
    overlay(&mut cfg.batch_size, args.batch_size);
    overlay(&mut cfg.lr_max, args.lr_max);
    overlay(&mut cfg.lr_min, args.lr_min);
    overlay(&mut cfg.lr_period, args.lr_period);
    overlay(&mut cfg.patience, args.patience);
    overlay(&mut cfg.min_delta, args.min_delta);

    std::fs::create_dir_all(&args.out_dir)?;
    let embeddings = formats::load_embeddings(&args.embeddings)?;
    let records = read_labeled_records(&args.labels)?;
    if embeddings.len() != records.len() {
        bail!(
            "embeddings ({}) and labels ({}) differ in length; they must come from the same corpus in the same order",
            embeddings.len(),
            records.len()
        );
    }

    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let split = balanced_split(&labels, cfg.ratios, cfg.seed)?;

    let gather = |ids: &[usize]| -> Vec<(Vec<f64>, bool)> {
        ids.iter()
            .map(|&i| (embeddings[i].clone(), labels[i] == Label::Censored))
            .collect()
    };
    let train = gather(&split.train);
    let val = gather(&split.val);

    let dim = embeddings.first().map(Vec::len).unwrap_or(0);
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = CdModel::new(dim, &mut init_rng);
    let train_cfg = CdTrainConfig {
        seed: cfg.seed,
        max_epochs: cfg.max_epochs,
        batch_size: cfg.batch_size,
        lr: LrSchedule::new(cfg.lr_max, cfg.lr_min, cfg.lr_period),
        patience: cfg.patience,
        min_delta: cfg.min_delta,
    };
    let outcome = train_classifier(&mut model, &train, &val, &train_cfg)?;

    let ckpt_path = args.out_dir.join("model.ckpt");
    model.to_checkpoint(None, outcome.epochs_run).save(&ckpt_path)?;
    let history_path = args.out_dir.join("history.csv");
    formats::write_classifier_history(&history_path, &outcome.history)?;
    let split_path = args.out_dir.join("split.json");
    write_split(&split_path, &split)?;

    let test_emb: Vec<Vec<f64>> = split.test.iter().map(|&i| embeddings[i].clone()).collect();
    let test_emb_path = args.out_dir.join("test.emb");
    formats::save_embeddings(&test_emb_path, &test_emb)?;
    let test_labels: Vec<IndexedLabel> =
        split.test.iter().map(|&i| IndexedLabel { index: i, label: labels[i] }).collect();
    let test_labels_path = args.out_dir.join("test_labels.jsonl");
    write_indexed_labels(&test_labels_path, &test_labels)?;

    let manifest = Manifest::new(
        "train-cd",
        serde_json::to_value(&cfg)?,
        &[args.embeddings.clone(), args.labels.clone()],
        &[ckpt_path, history_path, split_path, test_emb_path, test_labels_path],
        serde_json::json!({
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
            "epochs_run": outcome.epochs_run,
            "stopped_early": outcome.stopped_early,
            "best_epoch": outcome.best_epoch,
            "final_val_accuracy": outcome.history.last().map(|r| r.val_accuracy),
        }),
    )?;
    manifest.write_for(&args.out_dir)?;
    println!(
        "train-cd: {} epochs, final val accuracy {:.4}{}",
        outcome.epochs_run,
        outcome.history.last().map(|r| r.val_accuracy).unwrap_or(f64::NAN),
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ImgRunConfig {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub max_epochs: u64,
    pub batch_size: usize,
    pub sample_fraction: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_period: u32,
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for ImgRunConfig {
    fn default() -> Self {
        ImgRunConfig {
            seed: 0,
            ratios: (0.7, 0.1, 0.2),
            max_epochs: 20,
            batch_size: 16,
            sample_fraction: 1.0,
            lr_max: 1e-6,
            lr_min: 1e-7,
            lr_period: 10,
            patience: 5,
            min_delta: 1e-5,
        }
    }
}

#[derive(Args)]
pub struct TrainImgArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_period: Option<u32>,
    #[arg(long)]
    patience: Option<u32>,
    #[arg(long)]
    min_delta: Option<f64>,
    /// Also write the full image dataset file.
    #[arg(long)]
    export_images: Option<PathBuf>,
    /// Directory for sample PGM exports.
    #[arg(long)]
    export_pgm: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pgm_limit: usize,
}

pub fn run_train_img(args: TrainImgArgs) -> Result<()> {
    let mut cfg: ImgRunConfig = load_config(args.config.as_deref())?;
    overlay(&mut cfg.seed, args.seed);
    if let Some(r) = &args.ratios {
        cfg.ratios = parse_ratios(r)?;
    }
    overlay(&mut cfg.max_epochs, args.epochs);
    overlay(&mut cfg.batch_size, args.batch_size);
    overlay(&mut cfg.sample_fraction, args.sample_fraction);
    overlay(&mut cfg.lr_max, args.lr_max);
    overlay(&mut cfg.lr_min, args.lr_min);
    overlay(&mut cfg.lr_period, args.lr_period);
    overlay(&mut cfg.patience, args.patience);
    overlay(&mut cfg.min_delta, args.min_delta);

    std::fs::create_dir_all(&args.out_dir)?;
    let (vectors, _) = formats::load_vectors(&args.vectors)?;
    let records = read_labeled_records(&args.labels)?;
    if vectors.len() != records.len() {
        bail!(
            "vectors ({}) and labels ({}) differ in length",
            vectors.len(),
            records.len()
        );
    }

    // Over-capacity records are rejected with a count, never truncated.
    let mut rejected = 0u64;
    let mut images: Vec<GrayImage> = Vec::with_capacity(vectors.len());
    let mut labels: Vec<Label> = Vec::with_capacity(vectors.len());
    for (v, r) in vectors.iter().zip(&records) {
        match to_grayscale(v) {
            Ok(img) => {
                images.push(img);
                labels.push(r.label);
            }
            Err(ImageError::ExceedsCapacity { .. }) => rejected += 1,
            Err(e) => return Err(e.into()),
        }
    }

    let split = balanced_split(&labels, cfg.ratios, cfg.seed)?;
    let gather = |ids: &[usize]| -> Vec<(GrayImage, bool)> {
        ids.iter().map(|&i| (images[i].clone(), labels[i] == Label::Censored)).collect()
    };
    let train = gather(&split.train);
    let val = gather(&split.val);

    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = DenseBlockModel::new(CnnConfig::desk_default(), &mut init_rng);
    let train_cfg = ImgTrainConfig {
        seed: cfg.seed,
        max_epochs: cfg.max_epochs,
        batch_size: cfg.batch_size,
        sample_fraction: cfg.sample_fraction,
        lr: LrSchedule::new(cfg.lr_max, cfg.lr_min, cfg.lr_period),
        patience: cfg.patience,
        min_delta: cfg.min_delta,
    };
    let outcome = train_image_classifier(&mut model, &train, &val, &train_cfg)?;

    let ckpt_path = args.out_dir.join("model.ckpt");
    model.to_checkpoint(None, outcome.epochs_run).save(&ckpt_path)?;
    let history_path = args.out_dir.join("history.csv");
    formats::write_classifier_history(&history_path, &outcome.history)?;
    let split_path = args.out_dir.join("split.json");
    write_split(&split_path, &split)?;

    let test_images: Vec<GrayImage> = split.test.iter().map(|&i| images[i].clone()).collect();
    let test_img_path = args.out_dir.join("test.img");
    formats::save_images(&test_img_path, &test_images)?;
    let test_labels: Vec<IndexedLabel> =
        split.test.iter().map(|&i| IndexedLabel { index: i, label: labels[i] }).collect();
    let test_labels_path = args.out_dir.join("test_labels.jsonl");
    write_indexed_labels(&test_labels_path, &test_labels)?;

    let mut outputs =
        vec![ckpt_path, history_path, split_path, test_img_path, test_labels_path];
    if let Some(all) = &args.export_images {
        formats::save_images(all, &images)?;
        outputs.push(all.clone());
    }
    if let Some(dir) = &args.export_pgm {
        std::fs::create_dir_all(dir)?;
        for (i, img) in images.iter().take(args.pgm_limit).enumerate() {
            let mut f = std::fs::File::create(dir.join(format!("{i:04}.pgm")))?;
            write_pgm(img, &mut f)?;
        }
    }

    let manifest = Manifest::new(
        "train-img",
        serde_json::to_value(&cfg)?,
        &[args.vectors.clone(), args.labels.clone()],
        &outputs,
        serde_json::json!({
            "images": images.len(),
            "images_rejected": rejected,
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
            "epochs_run": outcome.epochs_run,
            "stopped_early": outcome.stopped_early,
            "final_val_accuracy": outcome.history.last().map(|r| r.val_accuracy),
        }),
    )?;
    manifest.write_for(&args.out_dir)?;
    println!(
        "train-img: {} images ({} rejected), {} epochs, final val accuracy {:.4}",
        images.len(),
        rejected,
        outcome.epochs_run,
        outcome.history.last().map(|r| r.val_accuracy).unwrap_or(f64::NAN)
    );
    Ok(())
}
