//! Multi-annotator water traversability dataset: manifest, annotation store
//! and agreement statistics.

mod agreement;
mod manifest;
mod store;

use std::path::PathBuf;

pub use agreement::{
    agreement_histogram, annotation_stddev, bin_index, consensus_label, consensus_labels,
    ratings_by_key, AgreementStats, ConsensusPolicy, HistogramBin, InstanceRobotKey, KeyStdDev,
    MAX_STD_DEV,
};
pub use manifest::{
    load_manifest, validate_manifest, DatasetManifest, ImageRecord, ImageSource, RobotProfile,
    Rule, Violation, WaterInstance, ANNOTATIONS_FILE, MANIFEST_FILE,
};
pub use store::{latest_per_key, read_annotations, to_jsonl, AnnotationRecord, AnnotationStore};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed: {detail}", path.display())]
    Malformed { path: PathBuf, detail: String },
    #[error("{}: {entity}.{field}: dangling reference: {detail}", path.display())]
    DanglingReference {
        path: PathBuf,
        entity: String,
        field: String,
        detail: String,
    },
    #[error("{}: cannot decode raster: {detail}", path.display())]
    Raster { path: PathBuf, detail: String },
    #[error("empty rating list")]
    EmptyRatings,
    #[error("no annotations")]
    NoAnnotations,
    #[error("bin width must be a positive finite number, got {0}")]
    InvalidBinWidth(f64),
}
