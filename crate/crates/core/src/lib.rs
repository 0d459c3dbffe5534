//! Whole-slide tiling, multi-scale viewport navigation, a three-stage
//! screening → planning → reasoning agent runtime over any multimodal chat
//! backend, and the evaluation metrics used to score it.

pub mod agent_runtime;
pub mod backend;
pub mod dataset_io;
pub mod eval_harness;
pub mod nav_dsl;
pub mod region_tiler;
pub mod slide_model;
