//! `censorseq`: end-to-end pipeline for detecting network-based Internet
//! censorship from reachability-test records.

mod analyze;
mod data;
mod manifest;
mod train;
mod util;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "censorseq", version, about = "Censorship detection on reachability-test records")]
struct Cli {
    /// Record-level worker threads for the pure per-record stages
    /// (label, vectorize, embed). Outputs are identical for any count.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream archived test records, flatten them to one line per response.
    Ingest(data::IngestArgs),
    /// Assign censored/uncensored/undetermined labels via fingerprints.
    Label(data::LabelArgs),
    /// Build the compact token vocabulary from a flattened corpus.
    BuildVocab(data::BuildVocabArgs),
    /// Encode flattened records as compact token vectors.
    Vectorize(data::VectorizeArgs),
    /// Train the sequence autoencoder on token vectors.
    TrainAe(train::TrainAeArgs),
    /// Produce embedding vectors with a trained autoencoder.
    Embed(train::EmbedArgs),
    /// Train the embedding classifier on labeled embeddings.
    TrainCd(train::TrainCdArgs),
    /// Train the byte-image baseline classifier on labeled vectors.
    TrainImg(train::TrainImgArgs),
    /// Classify embeddings or vector-derived images with a trained model.
    Classify(analyze::ClassifyArgs),
    /// Evaluate a trained model against labeled data.
    Eval(analyze::EvalArgs),
    /// Group candidate records into categories by response patterns.
    Group(analyze::GroupArgs),
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build()
        .expect("worker pool");

    let result = pool.install(|| match cli.command {
        Command::Ingest(args) => data::run_ingest(args),
        Command::Label(args) => data::run_label(args),
        Command::BuildVocab(args) => data::run_build_vocab(args),
        Command::Vectorize(args) => data::run_vectorize(args),
        Command::TrainAe(args) => train::run_train_ae(args),
        Command::Embed(args) => train::run_embed(args),
        Command::TrainCd(args) => train::run_train_cd(args),
        Command::TrainImg(args) => train::run_train_img(args),
        Command::Classify(args) => analyze::run_classify(args),
        Command::Eval(args) => analyze::run_eval(args),
        Command::Group(args) => analyze::run_group(args),
    });

    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
