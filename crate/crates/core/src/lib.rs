//! Shared gated recurrence over transformer depth.
//!
//! A single small cell reads each layer's residual update together with a
//! running recurrent state and decides how much of the update reaches the
//! residual stream. The backbone stays frozen; only the cell is trained.

pub mod backbone;
pub mod cells;
pub mod checkpoint;
pub mod diagnostics;
pub mod eval;
pub mod experiment;
pub mod numerics;
pub mod recurrence;
pub mod reference;
pub mod rng;
pub mod training;
