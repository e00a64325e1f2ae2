//! Disperse-then-merge: split instruction data into portions, fine-tune one
//! sub-model per portion, then fuse the sub-models into a single checkpoint.
//!
//! The crate bundles the checkpoint container, the dispersal strategies, the
//! merge operators, a small synthetic training harness used to study data
//! bias, and the analysis utilities that go with it.

pub mod analysis;
pub mod bias_lab;
pub mod dispersal;
pub mod merge_engine;
pub mod pipeline;
pub mod rng;
pub mod tensor_store;

pub use dispersal::{ClusterAssignment, Corpus, DispersalMethod, InstructionRecord};
pub use merge_engine::{MergeMethod, MergeRecipe, TaskVector};
pub use pipeline::{run_pipeline, run_sweep, Mode, PipelineConfig};
pub use tensor_store::{Checkpoint, Dtype, Tensor};
