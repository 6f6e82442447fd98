//! Linear semi-bandit product selection.
//!
//! A seller offers `K` of `N` products per period; each offered product is
//! bought with probability `μ(i) = x_iᵀθ*`. [`policy`] holds the SemiUCB and
//! ConsUCB selection rules, [`harness`] runs replicated experiments and
//! [`lemmas`] checks the inequalities the conservative score relies on.

pub mod design;
pub mod environment;
pub mod error;
pub mod harness;
pub mod instances;
pub mod lemmas;
pub mod policy;
pub mod seed;

pub use design::{theory_alpha, AlphaVariant, ConfidenceInterval, ConfidenceParams, DesignState};
pub use environment::{optimal_set, period_regret, sample_feedback, Catalog, GroundTruth, PeriodFeedback};
pub use error::{Error, Result};
pub use harness::{alpha_sweep, coverage_audit, replacement_counts, run_experiment, ExperimentPlan, RegretSeries};
pub use instances::{build_instance, InstanceKind, InstanceSpec};
pub use policy::{run_policy, PolicyConfig, PolicyKind, PolicyTrace, TieBreak};
