//! Task-based data-flow runtime with a task-aware asynchronous device
//! layer and a cooperative scheduler substrate.
//!
//! * [`depsys`]: dependency inference from access annotations and
//!   (deferred) dependency release.
//! * [`taskrt`]: the scheduler substrate, one running task per worker,
//!   in deterministic virtual time or on OS threads.
//! * [`simdev`]: a simulated accelerator with streams and events.
//! * [`talib`]: non-blocking device synchronization for tasks, driven by
//!   a polling task.
//! * [`bench`]: conjugate gradient and a layer-gradient pipeline.
//! * [`cli`]: scenario configuration, metrics and trace tooling.

pub mod bench;
pub mod cli;
pub mod depsys;
pub mod error;
pub mod simdev;
pub mod talib;
pub mod taskrt;
pub mod time;

pub use error::{Error, Result};
