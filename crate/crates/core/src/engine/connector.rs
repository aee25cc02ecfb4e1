//! Boundary between the engine and whatever runs a skill.

use std::collections::BTreeMap;
use std::sync::RwLock;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{PlantError, SkillEvent, VirtualModule};
use crate::registry::Skill;
use crate::state_machine::{SkillState, TransitionCommand};
use crate::value::Variables;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillStateReport {
    pub state: SkillState,
    pub seq: u64,
    #[serde(default)]
    pub outputs: Variables,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConnectorError {
    #[error("skill unreachable: {0}")]
    Unreachable(String),
    #[error("skill rejected the request: {0}")]
    Rejected(String),
}

/// Invocation interface of a skill: configure, trigger, observe.
#[async_trait]
pub trait SkillConnector: Send + Sync + 'static {
    async fn set_parameters(&self, skill: &Skill, values: &Variables) -> Result<(), ConnectorError>;

    /// Triggers `command` and returns the acting state entered.
    async fn transition(&self, skill: &Skill, command: TransitionCommand) -> Result<SkillState, ConnectorError>;

    async fn state(&self, skill: &Skill) -> Result<SkillStateReport, ConnectorError>;

    /// State changes with `seq > since`, waiting up to `timeout` for the first.
    async fn events(&self, skill: &Skill, since: u64, timeout: Duration) -> Result<Vec<SkillEvent>, ConnectorError>;
}

/// Calls virtual modules of the same process directly, keyed by machine iri.
#[derive(Default)]
pub struct InProcessConnector {
    modules: RwLock<BTreeMap<String, VirtualModule>>,
}

impl InProcessConnector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_module(&self, module: VirtualModule) {
        self.modules
            .write()
            .expect("module table poisoned")
            .insert(module.machine().iri.clone(), module);
    }

    pub fn remove_module(&self, machine_iri: &str) -> Option<VirtualModule> {
        self.modules.write().expect("module table poisoned").remove(machine_iri)
    }

    pub fn module(&self, machine_iri: &str) -> Option<VirtualModule> {
        self.modules.read().expect("module table poisoned").get(machine_iri).cloned()
    }

    fn lookup(&self, skill: &Skill) -> Result<VirtualModule, ConnectorError> {
        self.module(&skill.machine_iri)
            .ok_or_else(|| ConnectorError::Unreachable(format!("no module {} in this process", skill.machine_iri)))
    }
}

fn plant_error(e: PlantError) -> ConnectorError {
    match e {
        PlantError::UnknownSkill(_) => ConnectorError::Unreachable(e.to_string()),
        other => ConnectorError::Rejected(other.to_string()),
    }
}

#[async_trait]
impl SkillConnector for InProcessConnector {
    async fn set_parameters(&self, skill: &Skill, values: &Variables) -> Result<(), ConnectorError> {
        self.lookup(skill)?
            .set_parameters(&skill.interface.skill_id, values.clone())
            .map_err(plant_error)
    }

    async fn transition(&self, skill: &Skill, command: TransitionCommand) -> Result<SkillState, ConnectorError> {
        self.lookup(skill)?
            .invoke_transition(&skill.interface.skill_id, command)
            .map_err(plant_error)
    }

    async fn state(&self, skill: &Skill) -> Result<SkillStateReport, ConnectorError> {
        let rec = self.lookup(skill)?.get_state(&skill.interface.skill_id).map_err(plant_error)?;
        Ok(SkillStateReport {
            state: rec.state,
            seq: rec.event_seq,
            outputs: rec.outputs,
        })
    }

    async fn events(&self, skill: &Skill, since: u64, timeout: Duration) -> Result<Vec<SkillEvent>, ConnectorError> {
        self.lookup(skill)?
            .poll_events(&skill.interface.skill_id, since, timeout)
            .await
            .map_err(plant_error)
    }
}
