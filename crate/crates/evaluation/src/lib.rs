//! Rollout scoring, embedding-space diagnostics and the comparison studies
//! run on trained bundles.

pub mod embedding;
pub mod experiments;
pub mod scores;
pub mod stats;

pub use embedding::{embedding_report, principal_directions, project, EmbeddingRow};
pub use experiments::{
    ablation_oppo_a, alignment, context_scores, feedback_sweep, train_quiet, AblationRow, Alignment,
    ContextScores, SweepRow, Workbench,
};
pub use scores::{evaluate_context, evaluate_policy, resolve_z, ScoreSummary, ZChoice};
pub use stats::{preference_accuracy, spearman};
pub mod plot;
pub mod report;

pub use report::{embedding_table_csv, parse_embedding_table, EvalReport};
