//! Ingestion, chronological splits, sliding windows and normalization.

mod dataset;
mod norm;
mod split;
mod window;

pub use dataset::{load_dataset, write_dataset_csv, TimeSeriesDataset};
pub use norm::{instance_denormalize, instance_normalize, NormStats, Standardizer};
pub use split::{split_dataset, SplitRanges, SplitSpec};
pub use window::{make_windows, WindowPair};
