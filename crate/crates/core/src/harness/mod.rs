//! Datasets, distortions, experiment protocols and reports.

mod dataset;
mod distort;
mod experiment;
mod report;

pub use dataset::{
    gen_synthetic, read_idx_images, read_idx_labels, save_idx, write_idx_images, write_idx_labels,
    Dataset, Provenance, Split, SyntheticSpec, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, SHAPE_NAMES,
};
pub use distort::{
    apply_distortion, distort_sample, DistortionKind, DistortionSpec, DistortionTable,
};
pub use experiment::{
    extract_all, fit_head, init_threads, loss_comparison_report, parity_report, run_clean_parity,
    run_distortion_sweep, run_limited, run_loss_comparison, sweep_report, sweep_rows,
    train_pipeline, BenchConfig, IdxPaths, LimitedMode, TrainedPipeline,
};
pub use report::{Aggregate, ExperimentReport, ReportFormat, ReportRow, CSV_HEADER};
