//! Behavior-driven fuzzing of CLI coding agents.
//!
//! The pipeline runs in five stages: compose seed templates from a catalog of
//! interaction patterns and action types, instantiate each seed into a
//! repository-grounded case, run the case against an agent in an isolated
//! workspace, classify the evidence, and report campaign metrics.

pub mod campaign;
pub mod bundled;
pub mod catalog;
pub mod clock;
pub mod composer;
pub mod executor;
pub mod fsutil;
pub mod ids;
pub mod instantiator;
pub mod labels;
pub mod llm;
pub mod oracle;
pub mod paths;
pub mod report;
pub mod validation;
pub mod workspace;

pub use catalog::{load_catalog, save_catalog, validate_catalog, ActionType, Catalog, InteractionPattern};
pub use composer::{compose_seeds, screen_pair, CompatibilityDecision, CompatibilityJudge, SeedTemplate};
pub use ids::{ActionId, ConfigId};
