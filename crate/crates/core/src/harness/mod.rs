//! Experiment orchestration: spec files, metrics tables, the model and agent
//! studies and rollout galleries.

mod agent_study;
mod gallery;
mod metrics;
mod model_study;
mod spec;

pub use agent_study::{median_curves, plot_learning_curves, run_agent_study, DISTILL_KL, MEAN_RETURN};
pub use gallery::{blur_statistic, render_rollout_gallery, GalleryOptions, GalleryReport};
pub use metrics::{MetricRow, MetricsTable};
pub use model_study::{
    prepare_data, run_model_study, train_or_load, ModelReport, ModelReportRow, PER_ENV_STEP, RELATIVE_SPEED,
    TEST_SCORE, TRAIN_LOSS,
};
pub use spec::{AgentEntry, DataSpec, ExperimentSpec, ModelEntry, StudyKind};
