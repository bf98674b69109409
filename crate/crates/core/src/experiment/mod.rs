//! Desk-scale experiment pipeline: phantom corpus, shape models, virtual
//! training sets, the 15 model variants, robustness sweeps, OOD experiments
//! and the summary tables.

mod config;
mod dataset;
mod pipeline;
pub mod trends;

pub use config::{DataConfig, ExperimentConfig, OodStageConfig, SweepConfig, VariantId, DESK_POINTS, DESK_SIZE};
pub use dataset::{
    augment, generate_corpus, load_samples, read_index, read_split, sample_id, save_samples, write_corpus, write_preview, DatasetIndex,
};
pub use pipeline::{stage, train_variant, Pipeline, RunManifest, Tables, MANIFEST_FILE, TABLE_FILES};
