//! End-to-end assembly: configuration, model, training, evaluation,
//! ablations and image export.

pub mod ablation;
pub mod config;
pub mod export;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, AblationRow, AblationTable, Axis};
pub use config::{GlobalFusion, PipelineConfig};
pub use export::{export_bev_image, write_bev_image, BevMode};
pub use model::{forward_pipeline, predict_logits, Model, PipelineOutput};
pub use train::{argmax_labels, decoy_false_positives, dilate_xy, eval_noise, evaluate, probe_overlap, train, train_model, Dataset, EvalResult, RunReport, TrainedRun};
