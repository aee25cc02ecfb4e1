//! Reference models for testing: each one is a deliberately naive
//! reimplementation that shares no code with the component it checks.

pub mod expr;
pub mod gateway;
pub mod state_machine;
