//! From a click log and catalog to model-ready inputs.

use crate::catalog::{build_vocab_from_sessions, FeatureSchema, FeatureTable, HotelRecord, Vocabulary};
use crate::error::Result;
use crate::sessions::{sessionize, split_corpus, strip_hotels, ClickEvent, SessionCorpus};

pub const DEFAULT_GAP_DAYS: f64 = 7.0;
pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub gap_days: f64,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    /// Hotel ids removed from every training session.
    pub held_out: Vec<String>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            gap_days: DEFAULT_GAP_DAYS,
            ratios: DEFAULT_SPLIT,
            split_seed: 0,
            held_out: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub features: FeatureTable,
    pub corpus: SessionCorpus<u32>,
}

impl Dataset {
    /// Sessionizes, splits, strips held-out hotels from the training split,
    /// builds the vocabulary from what remains and encodes the catalog.
    pub fn build(
        catalog: &[HotelRecord],
        schema: &FeatureSchema,
        events: &[ClickEvent],
        options: &DatasetOptions,
    ) -> Result<Self> {
        for r in catalog {
            r.validate(schema)?;
        }
        let sessions = sessionize(events, options.gap_days);
        let mut corpus = split_corpus(sessions, options.ratios, options.split_seed)?;
        if !options.held_out.is_empty() {
            corpus.train = strip_hotels(&corpus.train, &options.held_out);
        }
        let vocab = build_vocab_from_sessions(catalog, &corpus.train)?;
        let features = FeatureTable::build(catalog, schema, &vocab)?;
        let corpus = corpus.to_indices(&vocab)?;
        Ok(Dataset {
            vocab,
            features,
            corpus,
        })
    }
}
