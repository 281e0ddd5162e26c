//! Desk-scale hybrid HPC + quantum computing stack.
//!
//! The crate wires together a circuit model and transpiler, a noisy
//! statevector backend, a quota accounting service, a FIFO device gateway,
//! a discrete-event workload manager and variational hybrid workloads.

pub mod accounting;
pub mod backend;
pub mod circuit;
pub mod gateway;
pub mod hybrid;
pub mod scheduler;
pub mod transpiler;
pub mod workload;
