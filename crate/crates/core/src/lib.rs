//! Detection of network-based Internet censorship from reachability-test
//! records: ingestion and flattening, fingerprint labeling, vectorization,
//! a sequence-to-sequence embedding model, classifiers over the learned
//! embeddings, a byte-image baseline, and evaluation utilities.

pub mod cd;
pub mod censor2seq;
pub mod evaluate;
pub mod formats;
pub mod image;
pub mod ingest;
pub mod labeling;
pub mod nn;
pub mod record;
pub mod synthetic;
pub mod tokenizer;
pub mod vectorizer;
pub mod vocab;

pub use labeling::Label;
pub use record::{FlatRecord, QuackTestRecord, ResponseObservation};
