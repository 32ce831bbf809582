//! Multi-device programming model on simulated compute devices: segmented
//! containers, MPI-like collectives routed through an explicit interconnect
//! topology, asynchronous per-device command queues, and segment-aware
//! numerical kernels. A nonlinear-inversion MRI reconstruction built on top
//! serves as the flagship workload.

pub mod comm;
pub mod error;
pub mod nlinv;
pub mod numerics;
pub mod phantom;
pub mod runtime;
pub mod segvec;
pub mod topology;

pub use error::{Error, Result};
pub use runtime::{DevGroup, EnvConfig, Environment, Fence, KernelCtx, Rank};
pub use segvec::{Dtype, Element, SegVector, SegmentDescriptor, SplitPolicy};
pub use topology::{Endpoint, PathKind, Topology, TransferLedger};
