//! Evaluation and accounting: IoU and mAP sweeps, anchor clustering,
//! parameter/FLOPs/storage accounting, and compression reports.

pub mod accounting;
pub mod anchors;
pub mod ap;
pub mod boxes;
pub mod report;

pub use accounting::{count_flops, count_params, storage_bytes, BYTES_PER_PARAM};
pub use anchors::{
    group_by_scale, kmeans_anchors, kmeans_anchors_with, AnchorConfig, AnchorDistance,
    DEFAULT_ANCHORS,
};
pub use ap::{
    average_precision, map_at, map_sweep, EvalSweep, ImageEval, Interpolation, DEFAULT_THRESHOLDS,
};
pub use boxes::{iou, iou_wh, BoundingBox};
pub use report::{reference_cross_checks, CrossCheck, LayerReportRow, PruneReport, ReferenceResults};
