//! Service, wire protocol and command-line client around `skillflow-core`.
//!
//! The service keeps the registry, deployed processes, resolution sessions
//! and running instances, persists them under a data directory and exposes
//! them over HTTP. Virtual modules are served over a small HTTP protocol
//! that the engine reaches through [`connector::HttpConnector`].

pub mod api;
pub mod app;
pub mod cli;
pub mod config;
pub mod connector;
pub mod sinks;
pub mod storage;
pub mod wire;
