//! Deterministic GPU memory-subsystem simulator.
//!
//! Device memory with a Rowhammer fault model, GPU page tables and TLB, a
//! driver-model UVM allocator, the restricted guest API seen by unprivileged
//! kernels, and a model of the host driver's message-queue handling.

pub mod addr;
pub mod device_memory;
pub mod guest_api;
pub mod host_driver;
pub mod lru;
pub mod page_table;
pub mod sim;
pub mod uvm_allocator;

pub use addr::*;
pub use guest_api::{Guest, GuestError, GuestOp, SpikeDetector};
pub use sim::{SessionId, SimConfig, Simulator};
