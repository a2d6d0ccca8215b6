//! Experiment plumbing: configuration, metrics, rollouts, pretraining,
//! training, evaluation and the acceptance suites.

pub mod acceptance;
pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod pretrain;
pub mod rollout;
pub mod trainer;

pub use config::{ExperimentConfig, FeConfig, RunConfig};
pub use evaluate::{evaluate, EvalOptions, EvalSummary};
pub use metrics::{parse_metrics, EpisodeMetrics, EpochMetrics, MetricsRecord, MetricsWriter};
pub use pretrain::{collect_random_dataset, heldout_split_mse, mean_predictor_mse, pretrain_fe};
pub use rollout::{run_episode, EpisodeResult, EpisodeSettings, ShieldModelKind};
pub use trainer::{epoch_count, train, train_from, Checkpoint};
