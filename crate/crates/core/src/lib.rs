//! Gated linear attention in three equivalent forms: the step-by-step
//! recurrence, the quadratic parallel form, and the chunkwise-parallel form,
//! each with gradients of `sum(O * dO)` including closed-form gate gradients.

#![allow(clippy::needless_range_loop)]

pub mod chunkwise;
pub mod config;
pub mod cost;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod gates;
pub mod parallel_form;
pub mod recurrent;
pub mod tensor;
pub mod tensor_file;
pub mod verify;

pub use chunkwise::{backward_chunkwise, backward_chunkwise_with, forward_chunkwise, ChunkwiseOutput};
pub use config::{Form, RunConfig};
pub use cost::{predict_cost, predict_parallel_cost, predict_recurrent_cost, ChunkPolicy, CostReport, Pass};
pub use error::{GlaError, Result};
pub use fixtures::{make_cotangent, make_instance, ModelKind};
pub use gates::{
    chunk_relative_decays, cumulative_log_decay, ChunkDecays, ChunkPlan, CumulativeDecay, GateSeq,
};
pub use parallel_form::{
    backward_parallel, backward_parallel_with, forward_parallel, forward_parallel_with, GateGradSign,
    ParallelOptions,
};
pub use recurrent::{
    backward_recurrent_exact, backward_recurrent_fd, forward_recurrent, ForwardTrace, GlaInstance, GradBundle,
};
pub use tensor::{hadamard, hadamard_row, matmul, suffix_sum, SeqTensor, State};
pub use tensor_file::{read_tensor, write_tensor, TensorFile};
pub use verify::{check_causality, check_equivalence, check_gradients, CheckReport, GradCheckOptions};
