//! Simulated machine modules.
//!
//! Every skill of a module runs the shared state machine: commands move it
//! into an acting state, and each acting state finishes after a configured
//! duration. Outputs are computed from the parameters when `Complete` is
//! entered. Failures can be injected so that a skill stops or aborts on its
//! own in a chosen phase.
//!
//! A [`VirtualModule`] is driven in process. The service crate puts the HTTP
//! wire protocol in front of the same handle.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;

use crate::model::expr::{evaluate, parse_expr, Expr};
use crate::registry::{MachineDocument, SkillDocument};
use crate::state_machine::{apply_command, complete_acting, SkillState, StateMachineError, TransitionCommand};
use crate::value::{Datatype, Variables};

pub const DEFAULT_ACTING_MS: u64 = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid module configuration: {0}")]
    Config(String),
    #[error("unknown skill {0}")]
    UnknownSkill(String),
    #[error("parameters can only be set in Idle, skill is {0}")]
    WrongState(SkillState),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name} expects {expected}, got {found}")]
    DatatypeMismatch {
        name: String,
        expected: Datatype,
        found: Datatype,
    },
    #[error(transparent)]
    IllegalTransition(#[from] StateMachineError),
}

/// Scripted behaviour of one skill.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkillBehavior {
    /// Acting state → milliseconds. Missing states take [`DEFAULT_ACTING_MS`].
    #[serde(default)]
    pub acting_durations_ms: BTreeMap<SkillState, u64>,
    /// Result variable → expression over parameter names.
    #[serde(default)]
    pub output_programs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VirtualModuleConfig {
    pub machine: MachineDocument,
    /// Keyed by the skill's transport-local id.
    #[serde(default)]
    pub skills: BTreeMap<String, SkillBehavior>,
}

/// One module of a plant file; the machine itself comes from a registry
/// document and is looked up by iri.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlantModuleEntry {
    pub machine_iri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    #[serde(default)]
    pub skills: BTreeMap<String, SkillBehavior>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    #[serde(default)]
    pub modules: Vec<PlantModuleEntry>,
}

impl PlantConfig {
    /// Joins each entry with its machine document.
    pub fn module_configs<'a>(
        &self,
        machines: impl IntoIterator<Item = &'a MachineDocument>,
    ) -> Result<Vec<(VirtualModuleConfig, Option<u16>)>, PlantError> {
        let by_iri: BTreeMap<&str, &MachineDocument> =
            machines.into_iter().map(|m| (m.iri.as_str(), m)).collect();
        self.modules
            .iter()
            .map(|entry| {
                let machine = by_iri
                    .get(entry.machine_iri.as_str())
                    .ok_or_else(|| PlantError::Config(format!("no machine document for {}", entry.machine_iri)))?;
                Ok((
                    VirtualModuleConfig {
                        machine: (*machine).clone(),
                        skills: entry.skills.clone(),
                    },
                    entry.port,
                ))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    Stop,
    Abort,
}

impl InjectionMode {
    fn command(self) -> TransitionCommand {
        match self {
            InjectionMode::Stop => TransitionCommand::Stop,
            InjectionMode::Abort => TransitionCommand::Abort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectionPhase {
    #[serde(rename = "duringStarting", alias = "starting")]
    DuringStarting,
    #[serde(rename = "duringExecute", alias = "execute")]
    DuringExecute,
    #[serde(rename = "duringCompleting", alias = "completing")]
    DuringCompleting,
}

impl InjectionPhase {
    pub fn state(self) -> SkillState {
        match self {
            InjectionPhase::DuringStarting => SkillState::Starting,
            InjectionPhase::DuringExecute => SkillState::Execute,
            InjectionPhase::DuringCompleting => SkillState::Completing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FailureInjection {
    pub mode: InjectionMode,
    pub phase: InjectionPhase,
    #[serde(default = "default_one_shot")]
    pub one_shot: bool,
}

fn default_one_shot() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillEvent {
    pub seq: u64,
    pub state: SkillState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkillRuntimeRecord {
    pub skill_id: String,
    pub state: SkillState,
    pub parameters: Variables,
    pub outputs: Variables,
    pub event_seq: u64,
}

struct Runtime {
    state: SkillState,
    parameters: Variables,
    outputs: Variables,
    seq: u64,
    events: Vec<SkillEvent>,
    /// Bumped on every state change so stale timers can tell they are stale.
    generation: u64,
    injection: Option<FailureInjection>,
    runs: Vec<Variables>,
}

struct SkillCell {
    id: String,
    decl: SkillDocument,
    durations: BTreeMap<SkillState, u64>,
    programs: BTreeMap<String, Expr>,
    runtime: Mutex<Runtime>,
    seq_tx: watch::Sender<u64>,
}

impl SkillCell {
    fn lock(&self) -> std::sync::MutexGuard<'_, Runtime> {
        self.runtime.lock().expect("skill runtime poisoned")
    }

    fn duration(&self, state: SkillState) -> Duration {
        Duration::from_millis(self.durations.get(&state).copied().unwrap_or(DEFAULT_ACTING_MS))
    }
}

/// Enters `next`, records the event and arms the timer of acting states.
fn enter(cell: &Arc<SkillCell>, rt: &mut Runtime, next: SkillState) {
    let prev = rt.state;
    rt.state = next;
    rt.seq += 1;
    rt.generation += 1;
    rt.events.push(SkillEvent { seq: rt.seq, state: next });
    if prev == SkillState::Complete {
        rt.outputs.clear();
    }
    match next {
        SkillState::Complete => rt.outputs = compute_outputs(cell, &rt.parameters),
        SkillState::Idle => {
            rt.parameters.clear();
            rt.outputs.clear();
        }
        SkillState::Starting => {
            let params = rt.parameters.clone();
            rt.runs.push(params);
        }
        _ => {}
    }
    if next.is_acting() {
        let generation = rt.generation;
        let delay = cell.duration(next);
        let cell = Arc::clone(cell);
        tokio::spawn(async move {
            tokio::time::sleep(delay).await;
            expire(&cell, generation);
        });
    }
    cell.seq_tx.send_replace(rt.seq);
}

fn expire(cell: &Arc<SkillCell>, generation: u64) {
    let mut rt = cell.lock();
    if rt.generation != generation {
        return;
    }
    let injected = rt
        .injection
        .filter(|inj| inj.phase.state() == rt.state);
    let next = match injected {
        Some(inj) => {
            if inj.one_shot {
                rt.injection = None;
            }
            apply_command(rt.state, inj.mode.command())
        }
        None => complete_acting(rt.state),
    };
    match next {
        Ok(next) => enter(cell, &mut rt, next),
        Err(e) => tracing::error!(skill = %cell.id, "timer fired in a waiting state: {e}"),
    }
}

fn compute_outputs(cell: &SkillCell, params: &Variables) -> Variables {
    let mut out = Variables::new();
    for (name, program) in &cell.programs {
        let declared = cell.decl.results.iter().find(|r| &r.name == name).map(|r| r.datatype);
        match evaluate(program, params) {
            Ok(v) => match declared.and_then(|dt| v.clone().coerce(dt)) {
                Some(v) => {
                    out.insert(name.clone(), v);
                }
                None => tracing::warn!(skill = %cell.id, output = %name, "output {v} has the wrong datatype"),
            },
            Err(e) => tracing::warn!(skill = %cell.id, output = %name, "output program failed: {e}"),
        }
    }
    out
}

/// Handle to a running virtual module. Clones share the same module.
#[derive(Clone)]
pub struct VirtualModule {
    machine: Arc<MachineDocument>,
    cells: Arc<BTreeMap<String, Arc<SkillCell>>>,
}

impl std::fmt::Debug for VirtualModule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VirtualModule")
            .field("machine", &self.machine.iri)
            .field("skills", &self.cells.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl VirtualModule {
    /// Validates `config` and brings every skill up in Idle. Timers run on the
    /// ambient tokio runtime.
    pub fn spawn(config: VirtualModuleConfig) -> Result<VirtualModule, PlantError> {
        let machine = config.machine;
        for id in config.skills.keys() {
            if !machine.skills.iter().any(|s| &s.interface.skill_id == id) {
                return Err(PlantError::Config(format!("behavior given for unknown skill {id}")));
            }
        }
        let mut cells = BTreeMap::new();
        for decl in &machine.skills {
            let id = decl.interface.skill_id.clone();
            let behavior = config.skills.get(&id).cloned().unwrap_or_default();
            for state in behavior.acting_durations_ms.keys() {
                if !state.is_acting() {
                    return Err(PlantError::Config(format!(
                        "skill {id}: duration given for waiting state {state}"
                    )));
                }
            }
            let mut programs = BTreeMap::new();
            for (result, src) in &behavior.output_programs {
                if !decl.results.iter().any(|r| &r.name == result) {
                    return Err(PlantError::Config(format!(
                        "skill {id}: output program for undeclared result {result}"
                    )));
                }
                let expr = parse_expr(src)
                    .map_err(|e| PlantError::Config(format!("skill {id}: output {result}: {e}")))?;
                if let Some(v) = expr
                    .variables()
                    .into_iter()
                    .find(|v| !decl.parameters.iter().any(|p| p.name == *v))
                {
                    return Err(PlantError::Config(format!(
                        "skill {id}: output {result} references unknown parameter {v}"
                    )));
                }
                programs.insert(result.clone(), expr);
            }
            let cell = SkillCell {
                id: id.clone(),
                decl: decl.clone(),
                durations: behavior.acting_durations_ms,
                programs,
                runtime: Mutex::new(Runtime {
                    state: SkillState::Idle,
                    parameters: Variables::new(),
                    outputs: Variables::new(),
                    seq: 0,
                    events: Vec::new(),
                    generation: 0,
                    injection: None,
                    runs: Vec::new(),
                }),
                seq_tx: watch::channel(0).0,
            };
            if cells.insert(id.clone(), Arc::new(cell)).is_some() {
                return Err(PlantError::Config(format!("skill id {id} used twice")));
            }
        }
        Ok(VirtualModule {
            machine: Arc::new(machine),
            cells: Arc::new(cells),
        })
    }

    pub fn machine(&self) -> &MachineDocument {
        &self.machine
    }

    pub fn skill_ids(&self) -> impl Iterator<Item = &str> {
        self.cells.keys().map(String::as_str)
    }

    fn cell(&self, skill_id: &str) -> Result<&Arc<SkillCell>, PlantError> {
        self.cells
            .get(skill_id)
            .ok_or_else(|| PlantError::UnknownSkill(skill_id.to_owned()))
    }

    pub fn set_parameters(&self, skill_id: &str, values: Variables) -> Result<(), PlantError> {
        let cell = self.cell(skill_id)?;
        let mut rt = cell.lock();
        if rt.state != SkillState::Idle {
            return Err(PlantError::WrongState(rt.state));
        }
        let mut accepted = Variables::new();
        for (name, value) in values {
            let decl = cell
                .decl
                .parameters
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| PlantError::UnknownParameter(name.clone()))?;
            let found = value.datatype();
            let value = value.coerce(decl.datatype).ok_or(PlantError::DatatypeMismatch {
                name: name.clone(),
                expected: decl.datatype,
                found,
            })?;
            accepted.insert(name, value);
        }
        rt.parameters.extend(accepted);
        Ok(())
    }

    /// Applies `cmd` and returns the acting state entered. Further progress
    /// happens asynchronously.
    pub fn invoke_transition(&self, skill_id: &str, cmd: TransitionCommand) -> Result<SkillState, PlantError> {
        let cell = self.cell(skill_id)?;
        let mut rt = cell.lock();
        let next = apply_command(rt.state, cmd)?;
        enter(cell, &mut rt, next);
        Ok(next)
    }

    pub fn get_state(&self, skill_id: &str) -> Result<SkillRuntimeRecord, PlantError> {
        let cell = self.cell(skill_id)?;
        let rt = cell.lock();
        Ok(SkillRuntimeRecord {
            skill_id: skill_id.to_owned(),
            state: rt.state,
            parameters: rt.parameters.clone(),
            outputs: rt.outputs.clone(),
            event_seq: rt.seq,
        })
    }

    /// Events with `seq > since`. Waits up to `timeout` for the first one.
    pub async fn poll_events(&self, skill_id: &str, since: u64, timeout: Duration) -> Result<Vec<SkillEvent>, PlantError> {
        let cell = self.cell(skill_id)?;
        let mut rx = cell.seq_tx.subscribe();
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            rx.borrow_and_update();
            {
                let rt = cell.lock();
                if rt.seq > since {
                    return Ok(events_after(&rt.events, since));
                }
            }
            let changed = tokio::time::timeout_at(deadline, rx.changed()).await;
            if changed.is_err() {
                return Ok(Vec::new());
            }
        }
    }

    pub fn inject_failure(&self, skill_id: &str, injection: FailureInjection) -> Result<(), PlantError> {
        self.cell(skill_id)?.lock().injection = Some(injection);
        Ok(())
    }

    pub fn pending_injection(&self, skill_id: &str) -> Result<Option<FailureInjection>, PlantError> {
        Ok(self.cell(skill_id)?.lock().injection)
    }

    /// Every state change since the module was spawned.
    pub fn event_log(&self, skill_id: &str) -> Result<Vec<SkillEvent>, PlantError> {
        Ok(self.cell(skill_id)?.lock().events.clone())
    }

    /// Parameters in effect at each Start, oldest first.
    pub fn runs(&self, skill_id: &str) -> Result<Vec<Variables>, PlantError> {
        Ok(self.cell(skill_id)?.lock().runs.clone())
    }
}

fn events_after(events: &[SkillEvent], since: u64) -> Vec<SkillEvent> {
    // seq starts at 1 and has no gaps, so event n sits at index n - 1.
    let start = usize::try_from(since).unwrap_or(usize::MAX).min(events.len());
    events[start..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{SkillInterface, SkillVariable};
    use crate::value::Value;
    use SkillState::*;

    fn drill_config(execute_ms: u64) -> VirtualModuleConfig {
        let var = |name: &str, dt| SkillVariable {
            name: name.into(),
            datatype: dt,
            linked_property: None,
        };
        VirtualModuleConfig {
            machine: MachineDocument {
                iri: "urn:m:drill".into(),
                name: "drill".into(),
                skills: vec![SkillDocument {
                    iri: "urn:s:drill".into(),
                    name: "drill".into(),
                    capability: "urn:c:drill".into(),
                    parameters: vec![var("noOfHoles", Datatype::Integer)],
                    results: vec![var("duration", Datatype::Real)],
                    interface: SkillInterface::in_process("drill"),
                }],
            },
            skills: BTreeMap::from([(
                "drill".to_owned(),
                SkillBehavior {
                    acting_durations_ms: BTreeMap::from([(Execute, execute_ms)]),
                    output_programs: BTreeMap::from([("duration".into(), "noOfHoles / 10.0".into())]),
                },
            )]),
        }
    }

    fn states(events: &[SkillEvent]) -> Vec<SkillState> {
        events.iter().map(|e| e.state).collect()
    }

    async fn wait_for(m: &VirtualModule, target: SkillState) -> Vec<SkillEvent> {
        let mut all = Vec::new();
        loop {
            let since = all.last().map_or(0, |e: &SkillEvent| e.seq);
            let batch = m.poll_events("drill", since, Duration::from_secs(2)).await.unwrap();
            assert!(!batch.is_empty(), "timed out waiting for {target}");
            all.extend(batch);
            if all.last().unwrap().state == target {
                return all;
            }
        }
    }

    #[tokio::test(start_paused = true)]
    async fn nominal_run_computes_outputs() {
        let m = VirtualModule::spawn(drill_config(100)).unwrap();
        let rec = m.get_state("drill").unwrap();
        assert_eq!((rec.state, rec.event_seq), (Idle, 0));
        m.set_parameters("drill", Variables::from([("noOfHoles".into(), Value::Integer(3))]))
            .unwrap();
        assert_eq!(m.invoke_transition("drill", TransitionCommand::Start).unwrap(), Starting);
        let events = wait_for(&m, Complete).await;
        assert_eq!(states(&events), [Starting, Execute, Completing, Complete]);
        let rec = m.get_state("drill").unwrap();
        assert_eq!(rec.outputs["duration"], Value::Real(0.3));
        m.invoke_transition("drill", TransitionCommand::Reset).unwrap();
        wait_for(&m, Idle).await;
        let rec = m.get_state("drill").unwrap();
        assert!(rec.parameters.is_empty() && rec.outputs.is_empty());
        assert_eq!(m.runs("drill").unwrap().len(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn parameters_only_in_idle() {
        let m = VirtualModule::spawn(drill_config(100)).unwrap();
        m.invoke_transition("drill", TransitionCommand::Start).unwrap();
        tokio::time::sleep(Duration::from_millis(60)).await;
        assert_eq!(
            m.set_parameters("drill", Variables::from([("noOfHoles".into(), Value::Integer(1))])),
            Err(PlantError::WrongState(Execute))
        );
        let m2 = VirtualModule::spawn(drill_config(100)).unwrap();
        assert_eq!(
            m2.set_parameters("drill", Variables::from([("bogus".into(), Value::Integer(1))])),
            Err(PlantError::UnknownParameter("bogus".into()))
        );
        assert!(matches!(
            m2.set_parameters("drill", Variables::from([("noOfHoles".into(), Value::from("x"))])),
            Err(PlantError::DatatypeMismatch { .. })
        ));
        assert!(matches!(
            m2.invoke_transition("drill", TransitionCommand::Reset),
            Err(PlantError::IllegalTransition(_))
        ));
    }

    #[tokio::test(start_paused = true)]
    async fn one_shot_abort_fires_once() {
        let m = VirtualModule::spawn(drill_config(100)).unwrap();
        m.inject_failure(
            "drill",
            FailureInjection {
                mode: InjectionMode::Abort,
                phase: InjectionPhase::DuringExecute,
                one_shot: true,
            },
        )
        .unwrap();
        m.invoke_transition("drill", TransitionCommand::Start).unwrap();
        let events = wait_for(&m, Aborted).await;
        assert_eq!(states(&events), [Starting, Execute, Aborting, Aborted]);
        assert_eq!(m.pending_injection("drill").unwrap(), None);
        m.invoke_transition("drill", TransitionCommand::Clear).unwrap();
        wait_for(&m, Stopped).await;
        m.invoke_transition("drill", TransitionCommand::Reset).unwrap();
        wait_for(&m, Idle).await;
        m.invoke_transition("drill", TransitionCommand::Start).unwrap();
        let events = wait_for(&m, Complete).await;
        assert!(states(&events).ends_with(&[Starting, Execute, Completing, Complete]));
    }

    #[tokio::test(start_paused = true)]
    async fn poll_times_out_empty() {
        let m = VirtualModule::spawn(drill_config(100)).unwrap();
        let got = m.poll_events("drill", 0, Duration::from_millis(30)).await.unwrap();
        assert!(got.is_empty());
        assert!(matches!(
            m.poll_events("nope", 0, Duration::ZERO).await,
            Err(PlantError::UnknownSkill(_))
        ));
    }

    #[test]
    fn config_errors() {
        let mut c = drill_config(10);
        c.skills.get_mut("drill").unwrap().output_programs =
            BTreeMap::from([("duration".into(), "depth * 2".into())]);
        assert!(matches!(VirtualModule::spawn(c), Err(PlantError::Config(_))));
        let mut c = drill_config(10);
        c.skills.get_mut("drill").unwrap().acting_durations_ms.insert(Idle, 5);
        assert!(matches!(VirtualModule::spawn(c), Err(PlantError::Config(_))));
        let mut c = drill_config(10);
        c.skills.insert("ghost".into(), SkillBehavior::default());
        assert!(matches!(VirtualModule::spawn(c), Err(PlantError::Config(_))));
    }
}
