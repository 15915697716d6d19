//! Metrics, similarity, and the evaluation protocols built on decoding.

pub mod metrics;
pub mod protocols;
pub mod similarity;

pub use metrics::{average_ranks, mae, pcc, r2, rmse, spearman, Correlation};
pub use protocols::*;
pub use similarity::{knn_baseline, levenshtein, ngram_bins, tanimoto_of_sets, token_tanimoto, Distance};
