//! Evaluation: pixel metrics, marker localization, trajectory tracing,
//! spawn-from-map generation, view-pair matrices and exposure studies.

mod marker;
mod metrics;
mod predictor;
mod protocol;
pub mod report;

pub use marker::{angular_error, detect_marker, MarkerDetection};
pub use metrics::{bootstrap_ci, mean, median, mse, pixel_metrics, psnr_from_mse, ssim, Interval, PixelMetrics, PSNR_CAP_DB};
pub use predictor::{
    require_views, ConstantGray, CopyAnchorOutput, CopyLastContext, ModelPredictor, PredictionRequest, Predictor,
    SimulatorOracle,
};
pub use protocol::{
    localization_eval, metric_matrix, spawn_eval, success_thresholds, trajectory_eval, transfer_study, EvalProtocol,
    LocalizationReport, LocalizationRow, MatrixCell, MatrixReport, MetricSummary, PixelSummary, SpawnRow, TestSet,
    TraceStep, TrajectoryTrace, TransferEntry, TransferReport, TransferRow,
};
