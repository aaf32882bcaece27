//! Tasks that drive code learning, data ingestion, quality metrics and
//! reporting.

mod classification;
mod data;
mod metrics;
mod reconstruction;
mod report;
mod sweep;

pub use classification::{ClassificationTask, HEAD_B, HEAD_W};
pub use data::{
    clustered_embeddings, held_out, load_embeddings, marker_corpus, parse_embeddings, write_embeddings, LabeledCorpus,
    MarkerCorpusSpec, VocabTable,
};
pub use metrics::{code_semantics_probe, group_by_code, nn_overlap, CodeProbe};
pub use reconstruction::ReconstructionTask;
pub use report::{read_reports, render_table, write_reports, RunReport};
pub use sweep::{sweep, SweepAxis, SweepOutcome};
