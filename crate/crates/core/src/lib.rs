//! Ranked-preference choice models with rank-heterogeneous context
//! effects: fixed-effect and linear MNL, low-rank and full context-dependent
//! models, nested MNL, and rank-stratified variants tied by a path-graph
//! Laplacian.

pub mod data;
pub mod equivalence;
pub mod error;
pub mod estimation;
pub mod io;
pub mod metrics;
pub mod model;
pub mod paramfile;
pub mod stratified;
pub mod synthetic;

pub use data::{
    explode_ranking, explode_rankings, summarize, ChoiceDataset, ChoiceRecord, Context,
    ContextPolicy, Covariates, DatasetSummary, ProgramCatalog, RankingDataset,
};
pub use error::{Error, Result};
pub use model::{
    choice_probabilities, log_choice_probabilities, ranking_log_likelihood, representative_utility,
    sample_ranking, ContextAggregation, Family, FamilyKind, ModelParams, UtilityContext,
};
pub use stratified::{laplacian_penalty, stratum_of, StratifiedParams};
