//! Nonlinear-inversion MRI reconstruction on the multi-device runtime.
//!
//! The measured multi-channel k-space data is modelled as `y = F(x)` with
//! unknowns `x = (rho, chat)`: the image and the coil sensitivities in a
//! smoothness-weighted Fourier representation. Each frame solves the
//! regularized normal equations of the linearized problem with conjugate
//! gradients inside an iteratively regularized Gauss-Newton loop. Work is
//! decomposed by channel; the image is replicated on every device and
//! assembled with a block-wise all-reduce after each adjoint application.

mod cg;
mod context;
mod pca;
mod solver;
mod state;
mod types;

pub use cg::{cg_solve, CgReport, CgVector};
pub use context::{Linearization, NlinvContext};
pub use pca::{compress_channels, CompressionInfo};
pub use solver::{
    reconstruct_frame, reconstruct_series, zero_filled_rss, FrameResult, StepInfo,
};
pub use state::Unknowns;
pub use types::{
    CgParams, Counters, OpCounts, ReconGrid, ReconProblem, RegSchedule, SamplingMask,
    WeightParams,
};
