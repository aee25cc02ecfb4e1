//! Token-based execution of skill processes.
//!
//! [`instance`] holds the pure process semantics. [`host`] runs instances
//! concurrently: it serializes stimuli per instance, drives skills through a
//! [`SkillConnector`], fires timers and hands notifications to a sink.

pub mod connector;
pub mod host;
pub mod instance;

use thiserror::Error;

use crate::model::Diagnostic;
use crate::value::Datatype;

pub use connector::{ConnectorError, InProcessConnector, SkillConnector, SkillStateReport};
pub use host::{Engine, EngineObserver, EngineOptions, NotificationSink, StartRecord};
pub use instance::{
    DelegationRequest, Effect, EngineEvent, EventKind, Instance, InstanceStatus, InstanceView,
    NotificationRecord, PreparedPlan, Stimulus, WorkItem,
};

/// Error codes thrown inside a process; boundary events filter on them.
pub mod codes {
    pub const SKILL_STOPPED: &str = "SkillStopped";
    pub const SKILL_ABORTED: &str = "SkillAborted";
    pub const SKILL_UNREACHABLE: &str = "SkillUnreachable";
    pub const PARAMETER_CONSTRAINT: &str = "ParameterConstraint";
    pub const UNKNOWN_VARIABLE: &str = "UnknownVariable";
    pub const NO_FLOW_ENABLED: &str = "NoFlowEnabled";
    /// Type errors, division by zero and overflow while evaluating an expression.
    pub const EXPRESSION_ERROR: &str = "ExpressionError";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("plan does not match the definition: {0}")]
    PlanMismatch(String),
    #[error("validation failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Diagnostic>),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("instance {0} already exists")]
    DuplicateInstance(String),
    #[error("instance {0} has already ended")]
    AlreadyEnded(String),
    #[error("persisting the change failed: {0}")]
    Persistence(String),
    #[error("no open work item for task {0}")]
    NoOpenWorkItem(String),
    #[error("missing form field {0}")]
    MissingField(String),
    #[error("unknown form field {0}")]
    UnknownField(String),
    #[error("form field {field} expects {expected}, got {found}")]
    DatatypeMismatch {
        field: String,
        expected: Datatype,
        found: Datatype,
    },
}
