//! Asynchronous Hogbatch SGD for fully-connected networks on a simulated
//! heterogeneous machine.
//!
//! A single coordinator thread owns the global model and the training data
//! and answers `ScheduleWork` requests from a set of workers. Workers are
//! either Hogwild-style sharded pools that update the shared model by
//! reference, or batch workers that compute on a deep-copied replica and
//! merge into the current global model. The scheduling policy decides each
//! worker's batch size and learning rate.

pub mod dataset;
pub mod engine;
pub mod linalg;
pub mod model;
pub mod policies;
