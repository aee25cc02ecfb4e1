//! Runs instances against real time and real skills.
//!
//! Stimuli for one instance are applied one at a time under that instance's
//! lock; different instances proceed independently. Each skill gets one
//! driver task that runs at most one delegation at a time and queues the
//! rest, because a machine cannot execute the same skill twice at once. The
//! driver also brings a skill back to Idle once the instance no longer needs
//! it.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};

use super::connector::SkillConnector;
use super::instance::{
    DelegationRequest, Effect, EngineEvent, Instance, InstanceView, NotificationRecord, PreparedPlan, Stimulus,
};
use super::EngineError;
use crate::model::ProcessDefinition;
use crate::registry::{Registry, Skill};
use crate::resolution::BindingPlan;
use crate::state_machine::{SkillState, TransitionCommand};
use crate::value::Variables;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Where notifications go after they are recorded.
#[async_trait]
pub trait NotificationSink: Send + Sync + 'static {
    async fn deliver(&self, record: &NotificationRecord) -> Result<(), String>;
}

/// Everything needed to rebuild an instance by replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StartRecord {
    pub instance_id: String,
    pub definition_id: String,
    pub prepared: PreparedPlan,
    pub initial: Variables,
    pub at: u64,
}

/// Hook for persistence. Called under the instance lock, in apply order.
///
/// An error from `instance_started`, or from `stimulus_applied` for a
/// stimulus that came through the public API, discards the change and is
/// returned to the caller as [`EngineError::Persistence`]. Errors for skill
/// events and timers are logged; those already happened in the plant.
pub trait EngineObserver: Send + Sync + 'static {
    fn instance_started(&self, _record: &StartRecord, _events: &[EngineEvent]) -> Result<(), String> {
        Ok(())
    }
    fn stimulus_applied(&self, _instance_id: &str, _stimulus: &Stimulus, _events: &[EngineEvent]) -> Result<(), String> {
        Ok(())
    }
    fn notification(&self, _record: &NotificationRecord) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Clone)]
pub struct EngineOptions {
    pub sink: Option<Arc<dyn NotificationSink>>,
    pub observer: Option<Arc<dyn EngineObserver>>,
    /// Long-poll window used when waiting for skill events.
    pub poll_timeout: Duration,
    /// Consecutive failed polls before a skill counts as unreachable.
    pub poll_retries: u32,
    /// Events included in snapshots.
    pub history_tail: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            sink: None,
            observer: None,
            poll_timeout: Duration::from_secs(1),
            poll_retries: 3,
            history_tail: 200,
        }
    }
}

struct InstanceCell {
    instance: Mutex<Instance>,
    seq: watch::Sender<u64>,
}

impl InstanceCell {
    fn lock(&self) -> std::sync::MutexGuard<'_, Instance> {
        self.instance.lock().expect("instance lock poisoned")
    }
}

#[derive(Debug, Clone)]
struct Job {
    instance_id: String,
    activation: u64,
    skill: Skill,
    request: DelegationRequest,
}

impl Job {
    fn is(&self, instance_id: &str, activation: u64) -> bool {
        self.instance_id == instance_id && self.activation == activation
    }
}

enum DriverMsg {
    Job(Job),
    Command {
        instance_id: String,
        activation: u64,
        command: TransitionCommand,
    },
}

struct Inner {
    connector: Arc<dyn SkillConnector>,
    options: EngineOptions,
    instances: RwLock<HashMap<String, Arc<InstanceCell>>>,
    drivers: Mutex<HashMap<String, mpsc::UnboundedSender<DriverMsg>>>,
    notifications: Mutex<Vec<NotificationRecord>>,
}

#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

impl Engine {
    pub fn new(connector: Arc<dyn SkillConnector>, options: EngineOptions) -> Engine {
        Engine {
            inner: Arc::new(Inner {
                connector,
                options,
                instances: RwLock::new(HashMap::new()),
                drivers: Mutex::new(HashMap::new()),
                notifications: Mutex::new(Vec::new()),
            }),
        }
    }

    fn cell(&self, id: &str) -> Result<Arc<InstanceCell>, EngineError> {
        self.inner
            .instances
            .read()
            .expect("instance table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownInstance(id.to_owned()))
    }

    fn insert(&self, id: &str, instance: Instance) -> Result<Arc<InstanceCell>, EngineError> {
        let mut table = self.inner.instances.write().expect("instance table poisoned");
        if table.contains_key(id) {
            return Err(EngineError::DuplicateInstance(id.to_owned()));
        }
        let cell = Arc::new(InstanceCell {
            seq: watch::channel(instance.history().len() as u64).0,
            instance: Mutex::new(instance),
        });
        table.insert(id.to_owned(), Arc::clone(&cell));
        Ok(cell)
    }

    /// Prepares `plan` against `registry`, starts the instance and runs it
    /// until it waits for something.
    pub fn start_instance(
        &self,
        id: &str,
        def: Arc<ProcessDefinition>,
        plan: &BindingPlan,
        registry: &Registry,
        initial: Variables,
    ) -> Result<InstanceView, EngineError> {
        if self.cell(id).is_ok() {
            return Err(EngineError::DuplicateInstance(id.to_owned()));
        }
        let prepared = PreparedPlan::prepare(&def, plan, registry)?;
        let at = now_ms();
        let record = StartRecord {
            instance_id: id.to_owned(),
            definition_id: def.id.clone(),
            prepared: prepared.clone(),
            initial: initial.clone(),
            at,
        };
        let (instance, effects) = Instance::start(id, def, prepared, initial, at)?;
        if let Some(obs) = &self.inner.options.observer {
            obs.instance_started(&record, instance.history())
                .map_err(EngineError::Persistence)?;
        }
        let view = instance.view(self.inner.options.history_tail);
        self.insert(id, instance)?;
        self.record_notifications(&effects);
        self.dispatch(id, effects, None);
        Ok(view)
    }

    /// Rebuilds an instance from persisted stimuli without re-running any
    /// side effects. Skill work that was in flight is not resumed.
    pub fn restore(
        &self,
        record: StartRecord,
        def: Arc<ProcessDefinition>,
        stimuli: &[Stimulus],
    ) -> Result<(), EngineError> {
        let instance = Instance::replay(
            record.instance_id.clone(),
            def,
            record.prepared,
            record.initial,
            record.at,
            stimuli,
        )?;
        self.inner
            .notifications
            .lock()
            .expect("notifications poisoned")
            .extend(instance.notifications().iter().cloned());
        self.insert(&record.instance_id, instance)?;
        Ok(())
    }

    /// Runs before the new sequence is published, so a waiter that sees an
    /// ended instance also sees its notifications.
    fn record_notifications(&self, effects: &[Effect]) {
        for effect in effects {
            if let Effect::Notify(record) = effect {
                self.inner
                    .notifications
                    .lock()
                    .expect("notifications poisoned")
                    .push(record.clone());
                if let Some(obs) = &self.inner.options.observer {
                    if let Err(e) = obs.notification(record) {
                        tracing::error!(instance = %record.instance_id, "persisting notification failed: {e}");
                    }
                }
            }
        }
    }

    /// With `durable`, the stimulus is applied to a copy that replaces the
    /// instance only once the observer has stored it.
    fn apply(&self, id: &str, stimulus: Stimulus, durable: bool) -> Result<Vec<Effect>, EngineError> {
        let cell = self.cell(id)?;
        let mut inst = cell.lock();
        let before = inst.history().len();
        let observer = self.inner.options.observer.as_ref();
        let effects = if durable && observer.is_some() {
            let mut next = inst.clone();
            let effects = next.apply(stimulus.clone())?;
            if let Some(obs) = observer {
                obs.stimulus_applied(id, &stimulus, &next.history()[before..])
                    .map_err(EngineError::Persistence)?;
            }
            *inst = next;
            effects
        } else {
            let effects = inst.apply(stimulus.clone())?;
            if let Some(obs) = observer {
                if let Err(e) = obs.stimulus_applied(id, &stimulus, &inst.history()[before..]) {
                    tracing::error!(instance = %id, "persisting stimulus failed: {e}");
                }
            }
            effects
        };
        self.record_notifications(&effects);
        cell.seq.send_replace(inst.history().len() as u64);
        Ok(effects)
    }

    pub fn complete_user_task(&self, id: &str, task_id: &str, values: Variables) -> Result<(), EngineError> {
        let effects = self.apply(
            id,
            Stimulus::CompleteUserTask {
                task_id: task_id.to_owned(),
                values,
                at: now_ms(),
            },
            true,
        )?;
        self.dispatch(id, effects, None);
        Ok(())
    }

    pub fn cancel_instance(&self, id: &str) -> Result<(), EngineError> {
        let effects = self.apply(id, Stimulus::Cancel { at: now_ms() }, true)?;
        self.dispatch(id, effects, None);
        Ok(())
    }

    pub fn snapshot(&self, id: &str) -> Result<InstanceView, EngineError> {
        Ok(self.cell(id)?.lock().view(self.inner.options.history_tail))
    }

    pub fn instance_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .inner
            .instances
            .read()
            .expect("instance table poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    /// Runs `f` against the live instance.
    pub fn with_instance<T>(&self, id: &str, f: impl FnOnce(&Instance) -> T) -> Result<T, EngineError> {
        Ok(f(&self.cell(id)?.lock()))
    }

    /// Events with `seq > since`, waiting up to `timeout` for the first.
    /// An ended instance answers at once since nothing more will come.
    pub async fn events(&self, id: &str, since: u64, timeout: Duration) -> Result<Vec<EngineEvent>, EngineError> {
        let cell = self.cell(id)?;
        let mut rx = cell.seq.subscribe();
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            rx.borrow_and_update();
            {
                let inst = cell.lock();
                let history = inst.history();
                if history.len() as u64 > since {
                    let start = usize::try_from(since).unwrap_or(usize::MAX);
                    return Ok(history[start..].to_vec());
                }
                if inst.status().is_terminal() {
                    return Ok(Vec::new());
                }
            }
            if tokio::time::timeout_at(deadline, rx.changed()).await.is_err() {
                return Ok(Vec::new());
            }
        }
    }

    /// Waits until the instance reaches a terminal status or `timeout` passes.
    pub async fn wait_until_ended(&self, id: &str, timeout: Duration) -> Result<InstanceView, EngineError> {
        let cell = self.cell(id)?;
        let mut rx = cell.seq.subscribe();
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            rx.borrow_and_update();
            let view = self.snapshot(id)?;
            if view.status.is_terminal() {
                return Ok(view);
            }
            if tokio::time::timeout_at(deadline, rx.changed()).await.is_err() {
                return self.snapshot(id);
            }
        }
    }

    pub fn notifications(&self) -> Vec<NotificationRecord> {
        self.inner.notifications.lock().expect("notifications poisoned").clone()
    }

    fn awaits_skill(&self, id: &str, activation: u64) -> bool {
        self.cell(id).is_ok_and(|c| c.lock().awaits_skill(activation))
    }

    /// Carries out effects. Skill commands addressed to `current` are handed
    /// back to the calling driver instead of being queued.
    fn dispatch(&self, id: &str, effects: Vec<Effect>, current: Option<u64>) -> Vec<TransitionCommand> {
        let mut own = Vec::new();
        for effect in effects {
            match effect {
                Effect::Delegate {
                    activation,
                    skill,
                    request,
                    ..
                } => {
                    let iri = skill.iri.clone();
                    self.send_to_driver(
                        &iri,
                        DriverMsg::Job(Job {
                            instance_id: id.to_owned(),
                            activation,
                            skill,
                            request,
                        }),
                    );
                }
                Effect::SkillCommand {
                    activation,
                    skill_iri,
                    command,
                } => {
                    if current == Some(activation) {
                        own.push(command);
                    } else {
                        self.send_to_driver(
                            &skill_iri,
                            DriverMsg::Command {
                                instance_id: id.to_owned(),
                                activation,
                                command,
                            },
                        );
                    }
                }
                Effect::ScheduleTimer { activation, due_at } => {
                    let engine = self.clone();
                    let id = id.to_owned();
                    let delay = Duration::from_millis(due_at.saturating_sub(now_ms()));
                    tokio::spawn(async move {
                        tokio::time::sleep(delay).await;
                        let at = now_ms().max(due_at);
                        if let Ok(effects) = engine.apply(&id, Stimulus::TimerFired { activation, at }, false) {
                            engine.dispatch(&id, effects, None);
                        }
                    });
                }
                Effect::Notify(record) => {
                    if let Some(sink) = self.inner.options.sink.clone() {
                        tokio::spawn(async move {
                            if let Err(e) = sink.deliver(&record).await {
                                tracing::warn!(task = %record.task_id, "notification delivery failed: {e}");
                            }
                        });
                    }
                }
            }
        }
        own
    }

    fn send_to_driver(&self, skill_iri: &str, msg: DriverMsg) {
        let mut drivers = self.inner.drivers.lock().expect("driver table poisoned");
        let tx = drivers.entry(skill_iri.to_owned()).or_insert_with(|| {
            let (tx, rx) = mpsc::unbounded_channel();
            let driver = Driver {
                engine: Arc::downgrade(&self.inner),
                queue: VecDeque::new(),
                rx,
            };
            tokio::spawn(driver.run());
            tx
        });
        if tx.send(msg).is_err() {
            tracing::error!(skill = %skill_iri, "skill driver has stopped");
        }
    }

    /// Feeds an observed skill state to the instance. Returns the commands the
    /// instance wants sent to the skill and whether it still waits on it.
    fn deliver(&self, job: &Job, stimulus: Stimulus) -> (Vec<TransitionCommand>, bool) {
        match self.apply(&job.instance_id, stimulus, false) {
            Ok(effects) => {
                let own = self.dispatch(&job.instance_id, effects, Some(job.activation));
                (own, self.awaits_skill(&job.instance_id, job.activation))
            }
            Err(_) => (Vec::new(), false),
        }
    }
}

struct Driver {
    engine: Weak<Inner>,
    queue: VecDeque<Job>,
    rx: mpsc::UnboundedReceiver<DriverMsg>,
}

/// Command that moves a skill no one waits for towards Idle.
fn recovery(state: SkillState) -> Option<TransitionCommand> {
    match state {
        SkillState::Complete | SkillState::Stopped => Some(TransitionCommand::Reset),
        SkillState::Aborted => Some(TransitionCommand::Clear),
        _ => None,
    }
}

impl Driver {
    fn engine(&self) -> Option<Engine> {
        self.engine.upgrade().map(|inner| Engine { inner })
    }

    fn accept_idle(&mut self, msg: DriverMsg) {
        match msg {
            DriverMsg::Job(job) => self.queue.push_back(job),
            DriverMsg::Command {
                instance_id,
                activation,
                ..
            } => self.queue.retain(|j| !j.is(&instance_id, activation)),
        }
    }

    async fn run(mut self) {
        loop {
            let Some(job) = self.queue.pop_front() else {
                match self.rx.recv().await {
                    Some(msg) => self.accept_idle(msg),
                    None => return,
                }
                continue;
            };
            let Some(engine) = self.engine() else { return };
            if engine.awaits_skill(&job.instance_id, job.activation) {
                self.run_job(&engine, job).await;
            }
        }
    }

    async fn run_job(&mut self, engine: &Engine, job: Job) {
        let connector = Arc::clone(&engine.inner.connector);
        let skill = &job.skill;
        let fail = |message: String| {
            engine.deliver(
                &job,
                Stimulus::SkillCallFailed {
                    activation: job.activation,
                    message,
                    at: now_ms(),
                },
            );
        };
        let report = match connector.state(skill).await {
            Ok(r) => r,
            Err(e) => return fail(e.to_string()),
        };
        if report.state != SkillState::Idle {
            return fail(format!("skill {} is {} instead of Idle", skill.iri, report.state));
        }
        if !job.request.parameter_values.is_empty() {
            if let Err(e) = connector.set_parameters(skill, &job.request.parameter_values).await {
                return fail(e.to_string());
            }
        }
        if let Err(e) = connector.transition(skill, job.request.transition).await {
            return fail(e.to_string());
        }

        let options = engine.inner.options.clone();
        let mut since = report.seq;
        let mut attached = true;
        let mut settled = false;
        let mut failures = 0;
        loop {
            tokio::select! {
                msg = self.rx.recv() => match msg {
                    None => return,
                    Some(DriverMsg::Job(j)) => self.queue.push_back(j),
                    Some(DriverMsg::Command { instance_id, activation, command }) => {
                        if job.is(&instance_id, activation) {
                            if attached && !settled {
                                attached = false;
                                if let Err(e) = connector.transition(skill, command).await {
                                    tracing::warn!(skill = %skill.iri, "{command} failed: {e}");
                                }
                            }
                        } else {
                            self.queue.retain(|j| !j.is(&instance_id, activation));
                        }
                    }
                },
                polled = connector.events(skill, since, options.poll_timeout) => match polled {
                    Err(e) => {
                        failures += 1;
                        if failures >= options.poll_retries {
                            if attached {
                                fail(e.to_string());
                            }
                            return;
                        }
                        tokio::time::sleep(Duration::from_millis(200)).await;
                    }
                    Ok(events) => {
                        failures = 0;
                        for ev in events {
                            since = ev.seq;
                            settled |= ev.state.is_waiting();
                            let mut recover = !attached;
                            if attached {
                                if ev.state == SkillState::Idle {
                                    fail(format!("skill {} returned to Idle on its own", skill.iri));
                                    return;
                                }
                                let outputs = if ev.state == SkillState::Complete {
                                    connector.state(skill).await.map(|r| r.outputs).unwrap_or_default()
                                } else {
                                    Variables::new()
                                };
                                let (commands, still) = engine.deliver(
                                    &job,
                                    Stimulus::SkillEvent {
                                        activation: job.activation,
                                        state: ev.state,
                                        outputs,
                                        at: now_ms(),
                                    },
                                );
                                attached = still;
                                for command in &commands {
                                    if let Err(e) = connector.transition(skill, *command).await {
                                        tracing::warn!(skill = %skill.iri, "{command} failed: {e}");
                                    }
                                }
                                if !commands.is_empty() {
                                    attached = false;
                                } else if !attached {
                                    recover = true;
                                }
                            }
                            if recover {
                                if ev.state == SkillState::Idle {
                                    return;
                                }
                                if let Some(command) = recovery(ev.state) {
                                    if let Err(e) = connector.transition(skill, command).await {
                                        tracing::warn!(skill = %skill.iri, "recovery {command} failed: {e}");
                                    }
                                }
                            }
                        }
                    }
                },
            }
        }
    }
}
