//! Capability-based process orchestration.
//!
//! Production recipes are modelled as capability processes: BPMN processes
//! whose service tasks reference abstract capabilities. Before a run, each
//! capability is resolved to a concrete machine skill, and the resulting skill
//! process is executed token by token against skills that follow a common
//! state machine.

pub mod engine;
pub mod model;
pub mod plant;
pub mod registry;
pub mod resolution;
pub mod state_machine;
pub mod value;

pub use registry::Registry;
pub use value::{Datatype, Value, Variables};
