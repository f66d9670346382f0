//! Checkpoint merging (linear and SLerp), merge-coefficient sweeps, and the
//! evaluation stack around them: classification metrics, perplexity-based
//! leakage checks, a toy bigram LM, EHR text serialization and BM25 retrieval.

pub mod cli;
pub mod dlt;
pub mod ehr;
pub mod merge;
pub mod metrics;
pub mod retrieval;
pub mod sweep;
pub mod tensor_store;
pub mod toy_lm;

pub use merge::{linear_merge, slerp_merge, slerp_vector, LambdaWeights, MergeMethod, MergeRecipe, SlerpOptions};
pub use tensor_store::{read_checkpoint, write_checkpoint, DType, Tensor, TensorMap};
