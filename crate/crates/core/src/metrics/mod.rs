//! Navigation metrics (success rate, navigation error, SPL, oracle success)
//! and caption metrics (BLEU-4, ROUGE-L, CIDEr).

mod caption;
mod nav;

pub use caption::{
    bleu4, cider, corpus_bleu, rouge_l, CaptionMetric, CiderCorpus, UnknownMetric, BLEU_EPSILON, MAX_ORDER,
    ROUGE_BETA,
};
pub use nav::{
    aggregate, nav_metrics, nav_metrics_with, score_outcome, EpisodeScore, MetricsReport, NavOutcome, REPORT_VERSION,
    SUCCESS_RADIUS,
};
