//! Rotated BEV overlap, average precision, and the compression harness.

mod ap;
mod compress;
mod iou;
mod report;
mod sweep;

pub use ap::{average_precision, average_precision_frames, mean_ap, Frame};
pub use compress::{compress, Compressor, COMPRESSION_RATIOS};
pub use iou::rotated_bev_iou;
pub use report::{evaluate, score, ClassAp, EvalConfig, MetricsReport, ReportConfig};
pub use sweep::{normalize_ratios, sweep_compression, sweep_csv, sweep_plot_data, SweepRow};
