//! End-to-end orchestration: configuration, per-generation records, and the
//! generate/correct phases of the loop
//! rewrite -> retrieve -> decode -> detect -> gate -> correct -> evaluate.

mod config;
mod record;
mod run;

pub use config::{PipelineConfig, CONFIG_KEYS_DOC};
pub use record::{
    read_records, records_equal_modulo_timestamps, write_records, LossNumbers, RecordWriter,
    RetrievalEntry, RunRecord,
};
pub use run::{
    read_queries, restore_training_state, run_correct, run_generate_all, run_generate_one,
    verify_gating, CorrectionEvent, CorrectionRun, PipelineState, Query, RunArtifacts,
};
