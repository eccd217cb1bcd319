//! Interaction logs, preprocessing, leave-one-out splits and synthetic data.

mod filter;
mod ingest;
mod split;
pub mod synth;

pub use filter::{five_core_filter, rating_positivity_filter, FilterReport};
pub use ingest::{read_interactions, LogFormat};
pub use split::{
    build_sequences, leave_one_out_split, truncate_pad, Corpus, DatasetSplit, Example,
    InteractionSequence, SplitStats, UserRecord, PAD,
};
pub use synth::{synth_generate, SynthConfig, SynthData};

use serde::{Deserialize, Serialize};

/// One row of a raw log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
    pub rating: Option<f64>,
}
