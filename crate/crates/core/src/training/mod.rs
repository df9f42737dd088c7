//! Single-, two- and four-view training schemes and the optimization loop.

mod scheme;
mod trainer;

pub use scheme::{sample_time_offset, sample_view_pair, Exposure, Scheme, SchemeConfig};
pub use trainer::{
    checkpoint_path, latest_checkpoint, run, AnchorIndex, MetricsLog, MetricsRecord, RunSummary, SampleRef, Source,
    TrainConfig, Trainer,
};
