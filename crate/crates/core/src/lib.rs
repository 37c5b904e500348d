// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discretize;
pub mod envgraph;
pub mod metrics;
pub mod numcore;
pub mod moe;
pub mod policy;
pub mod trainer;
pub mod ablation;
pub mod gradsuite;
