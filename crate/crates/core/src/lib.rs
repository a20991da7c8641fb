//! Memory budgets for fine-tuning decoder-only transformers with backpropagation
//! versus memory-efficient zeroth-order optimization (MeZO), plus the pieces needed
//! to check the zeroth-order estimator end to end:
//!
//! * [`memory`]: analytic parameter/activation/total-memory models, sweeps and a
//!   budget solver.
//! * [`zo`]: seed-replayed SPSA directional derivatives, the MeZO step and a plain
//!   SGD step for comparison.
//! * [`toy`]: a small f64 decoder-only transformer with hand-written backward pass
//!   and an activation ledger.
//! * [`bench`]: matched-budget BP vs. MeZO fine-tuning runs with CSV output.
//! * [`config`]: the sectioned key-value config format and model presets.
//! * [`verify`]: estimator and gradient self-checks.

pub mod bench;
pub mod config;
pub mod memory;
pub mod noise;
pub mod toy;
pub mod verify;
pub mod zo;

pub use memory::{MemoryBreakdown, MemoryMode, ModelConfig};
pub use zo::{ParameterVector, ZoConfig};
