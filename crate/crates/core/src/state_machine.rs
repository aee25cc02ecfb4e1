//! Skill state machine: a reduced machine/unit state model without the
//! hold and suspend branches.
//!
//! Waiting states only change on an external [`TransitionCommand`]. Acting
//! states perform work and advance on their own once the work is done.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkillState {
    Idle,
    Starting,
    Execute,
    Completing,
    Complete,
    Resetting,
    Stopping,
    Stopped,
    Clearing,
    Aborting,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionCommand {
    Start,
    Stop,
    Abort,
    Reset,
    Clear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activity {
    Acting,
    Waiting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Nominal,
    Failure,
    FinalSuccess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StateMachineError {
    #[error("command {cmd} is not allowed in state {state}")]
    IllegalTransition {
        state: SkillState,
        cmd: TransitionCommand,
    },
    #[error("state {0} is not an acting state")]
    NotActing(SkillState),
}

impl SkillState {
    pub const ALL: [SkillState; 11] = [
        SkillState::Idle,
        SkillState::Starting,
        SkillState::Execute,
        SkillState::Completing,
        SkillState::Complete,
        SkillState::Resetting,
        SkillState::Stopping,
        SkillState::Stopped,
        SkillState::Clearing,
        SkillState::Aborting,
        SkillState::Aborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SkillState::Idle => "Idle",
            SkillState::Starting => "Starting",
            SkillState::Execute => "Execute",
            SkillState::Completing => "Completing",
            SkillState::Complete => "Complete",
            SkillState::Resetting => "Resetting",
            SkillState::Stopping => "Stopping",
            SkillState::Stopped => "Stopped",
            SkillState::Clearing => "Clearing",
            SkillState::Aborting => "Aborting",
            SkillState::Aborted => "Aborted",
        }
    }

    pub fn is_acting(self) -> bool {
        classify(self).0 == Activity::Acting
    }

    pub fn is_waiting(self) -> bool {
        !self.is_acting()
    }
}

impl fmt::Display for SkillState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SkillState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SkillState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown skill state {s:?}"))
    }
}

impl TransitionCommand {
    pub const ALL: [TransitionCommand; 5] = [
        TransitionCommand::Start,
        TransitionCommand::Stop,
        TransitionCommand::Abort,
        TransitionCommand::Reset,
        TransitionCommand::Clear,
    ];

    /// Lower-case spelling used in wire paths.
    pub fn as_str(self) -> &'static str {
        match self {
            TransitionCommand::Start => "start",
            TransitionCommand::Stop => "stop",
            TransitionCommand::Abort => "abort",
            TransitionCommand::Reset => "reset",
            TransitionCommand::Clear => "clear",
        }
    }
}

impl fmt::Display for TransitionCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransitionCommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransitionCommand::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown transition {s:?}"))
    }
}

/// State a clearing skill settles in. Reset then takes it back to Idle.
pub const CLEARING_TARGET: SkillState = SkillState::Stopped;

pub fn apply_command(
    state: SkillState,
    cmd: TransitionCommand,
) -> Result<SkillState, StateMachineError> {
    use SkillState::*;
    use TransitionCommand::*;
    let next = match (cmd, state) {
        (Start, Idle) => Some(Starting),
        (Stop, Stopping | Stopped | Clearing | Aborting | Aborted) => None,
        (Stop, _) => Some(Stopping),
        (Abort, Aborting | Aborted) => None,
        (Abort, _) => Some(Aborting),
        (Clear, Aborted) => Some(Clearing),
        (Reset, Complete | Stopped) => Some(Resetting),
        _ => None,
    };
    next.ok_or(StateMachineError::IllegalTransition { state, cmd })
}

/// State reached when an acting state finishes its work.
pub fn complete_acting(state: SkillState) -> Result<SkillState, StateMachineError> {
    use SkillState::*;
    match state {
        Starting => Ok(Execute),
        Execute => Ok(Completing),
        Completing => Ok(Complete),
        Resetting => Ok(Idle),
        Stopping => Ok(Stopped),
        Clearing => Ok(CLEARING_TARGET),
        Aborting => Ok(Aborted),
        other => Err(StateMachineError::NotActing(other)),
    }
}

pub fn classify(state: SkillState) -> (Activity, Outcome) {
    use SkillState::*;
    let activity = match state {
        Idle | Complete | Stopped | Aborted => Activity::Waiting,
        _ => Activity::Acting,
    };
    let outcome = match state {
        Complete => Outcome::FinalSuccess,
        Stopped | Aborted => Outcome::Failure,
        _ => Outcome::Nominal,
    };
    (activity, outcome)
}

/// Whether `to` can directly follow `from` in an observed state sequence,
/// either by a command or by an acting state finishing.
pub fn is_step(from: SkillState, to: SkillState) -> bool {
    complete_acting(from).ok() == Some(to)
        || TransitionCommand::ALL
            .into_iter()
            .any(|c| apply_command(from, c).ok() == Some(to))
}

/// Whether `states`, starting from `from`, is a path in the transition graph.
pub fn is_legal_path(from: SkillState, states: &[SkillState]) -> bool {
    let mut cur = from;
    for &next in states {
        if !is_step(cur, next) {
            return false;
        }
        cur = next;
    }
    true
}
