//! Test-time adaptation of batch-normalization statistics under stain shift.
//!
//! * [`tensor`]: dense f32 tensors, convolution and a reverse-mode tape.
//! * [`nn`]: layers, reference networks, SGDM training.
//! * [`adapt`]: inference-time normalization policies and the two-step protocol.
//! * [`stainsim`]: the synthetic multi-center benchmark.
//! * [`harness`]: metrics, experiments, sweeps and shift diagnostics.

pub mod adapt;
pub mod archive;
pub mod error;
pub mod harness;
pub mod nn;
pub mod seed;
pub mod stainsim;
pub mod tensor;

pub use adapt::{AdaptationPolicy, ProtocolParams};
pub use error::{Error, Result};
pub use nn::{Model, NetworkSpec, TaskKind, TrainRecipe};
pub use stainsim::CenterDataset;
pub use tensor::Tensor;

/// Maps `f` over `range`, in parallel when the `parallel` feature is on. The
/// output order (and content) never depends on scheduling.
pub(crate) fn par_map<T, F>(range: std::ops::Range<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        range.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        range.map(f).collect()
    }
}
