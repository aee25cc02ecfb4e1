//! Deterministic process instance.
//!
//! An [`Instance`] owns tokens, variables and history. It never performs I/O:
//! each [`Stimulus`] is applied in one step that runs the token game to
//! quiescence and returns the [`Effect`]s the host has to carry out. Replaying
//! the same stimuli therefore rebuilds the same instance.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{codes, EngineError};
use crate::model::{
    evaluate, render_template, validate_process, ExprError, FlowNode, FormField, NodeKind,
    ProcessDefinition, ValueExpr,
};
use crate::registry::{ConstraintResult, PropertyElement, Registry, Skill};
use crate::resolution::{validate_plan, BindingPlan};
use crate::state_machine::{SkillState, TransitionCommand};
use crate::value::{Datatype, Value, Variables};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceStatus {
    Running,
    WaitingUser,
    Completed,
    Faulted,
    Cancelled,
}

impl InstanceStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            InstanceStatus::Completed | InstanceStatus::Faulted | InstanceStatus::Cancelled
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPlan {
    pub name: String,
    pub datatype: Datatype,
    pub value: ValueExpr,
    /// Linked capability property, checked when the value is known.
    pub property: Option<PropertyElement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPlan {
    pub result: String,
    pub datatype: Datatype,
    pub variable: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub skill: Skill,
    pub parameters: Vec<ParameterPlan>,
    pub outputs: Vec<OutputPlan>,
}

/// A binding plan joined with the registry entries it refers to, so that an
/// instance no longer depends on the registry after it started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPlan {
    pub plan: BindingPlan,
    pub tasks: BTreeMap<String, TaskPlan>,
}

impl PreparedPlan {
    pub fn prepare(
        def: &ProcessDefinition,
        plan: &BindingPlan,
        registry: &Registry,
    ) -> Result<PreparedPlan, EngineError> {
        if plan.definition_id != def.id {
            return Err(EngineError::PlanMismatch(format!(
                "plan belongs to {}, not {}",
                plan.definition_id, def.id
            )));
        }
        let task_ids: Vec<&str> = def.capability_tasks().map(|(n, _)| n.id.as_str()).collect();
        if let Some(missing) = task_ids.iter().find(|t| !plan.bindings.contains_key(**t)) {
            return Err(EngineError::PlanMismatch(format!("no binding for task {missing}")));
        }
        if let Some(extra) = plan.bindings.keys().find(|k| !task_ids.contains(&k.as_str())) {
            return Err(EngineError::PlanMismatch(format!("binding for unknown task {extra}")));
        }
        let mut diags = validate_process(def, Some(registry));
        diags.extend(validate_plan(plan, def, registry));
        if !diags.is_empty() {
            return Err(EngineError::ValidationFailed(diags));
        }
        let mut tasks = BTreeMap::new();
        for (task, sb) in &plan.bindings {
            let skill = registry.skill(&sb.skill).expect("validated").clone();
            let capability = registry.capability(&skill.capability_iri).expect("validated");
            let parameters = sb
                .parameters
                .iter()
                .map(|(name, value)| {
                    let var = skill.parameter(name).expect("validated");
                    ParameterPlan {
                        name: name.clone(),
                        datatype: var.datatype,
                        value: value.clone(),
                        property: var
                            .linked_property
                            .as_deref()
                            .and_then(|p| capability.property(p))
                            .cloned(),
                    }
                })
                .collect();
            let outputs = sb
                .outputs
                .iter()
                .map(|(result, variable)| OutputPlan {
                    result: result.clone(),
                    datatype: skill.result(result).expect("validated").datatype,
                    variable: variable.clone(),
                })
                .collect();
            tasks.insert(
                task.clone(),
                TaskPlan {
                    skill,
                    parameters,
                    outputs,
                },
            );
        }
        Ok(PreparedPlan {
            plan: plan.clone(),
            tasks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEvent {
    pub seq: u64,
    /// Milliseconds since the Unix epoch, taken from the stimulus.
    pub at: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all_fields = "camelCase")]
pub enum EventKind {
    NodeEntered { node: String },
    NodeCompleted { node: String },
    VariableSet { name: String, value: Value },
    SkillStateObserved { task: String, skill: String, state: SkillState },
    SkillCommandIssued { task: String, skill: String, command: TransitionCommand },
    ErrorThrown { node: String, code: String, message: String },
    ErrorCaught { boundary: String, task: String, code: String },
    Diagnostic { node: String, message: String },
    InstanceEnded { status: InstanceStatus },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DelegationRequest {
    pub skill_iri: String,
    pub transition: TransitionCommand,
    pub parameter_values: Variables,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NotificationRecord {
    pub instance_id: String,
    pub task_id: String,
    pub subject: String,
    pub body: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkItem {
    pub instance_id: String,
    pub task_id: String,
    pub form_fields: Vec<FormField>,
    pub created_at: u64,
}

/// External input to an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all_fields = "camelCase")]
pub enum Stimulus {
    CompleteUserTask { task_id: String, values: Variables, at: u64 },
    SkillEvent { activation: u64, state: SkillState, outputs: Variables, at: u64 },
    SkillCallFailed { activation: u64, message: String, at: u64 },
    TimerFired { activation: u64, at: u64 },
    Cancel { at: u64 },
}

impl Stimulus {
    pub fn at(&self) -> u64 {
        match self {
            Stimulus::CompleteUserTask { at, .. }
            | Stimulus::SkillEvent { at, .. }
            | Stimulus::SkillCallFailed { at, .. }
            | Stimulus::TimerFired { at, .. }
            | Stimulus::Cancel { at } => *at,
        }
    }
}

/// Work the host performs on behalf of an instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Delegate {
        activation: u64,
        task_id: String,
        skill: Skill,
        request: DelegationRequest,
    },
    SkillCommand {
        activation: u64,
        skill_iri: String,
        command: TransitionCommand,
    },
    ScheduleTimer { activation: u64, due_at: u64 },
    Notify(NotificationRecord),
}

#[derive(Debug, Clone, PartialEq)]
enum Waiting {
    User { created_at: u64 },
    Skill { skill_iri: String, settled: bool },
    Timer,
}

#[derive(Debug, Clone, PartialEq)]
struct Activation {
    node: String,
    waiting: Waiting,
}

struct Arrival {
    node: String,
    via: Option<String>,
}

struct Step {
    at: u64,
    effects: Vec<Effect>,
    work: VecDeque<Arrival>,
}

/// Consistent point-in-time view of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceView {
    pub instance_id: String,
    pub definition_id: String,
    pub status: InstanceStatus,
    /// Node ids holding a token; a node appears once per token.
    pub tokens: Vec<String>,
    pub variables: Variables,
    pub work_items: Vec<WorkItem>,
    /// Task id → last skill state observed for it.
    pub last_skill_state: BTreeMap<String, SkillState>,
    pub history_len: u64,
    pub history: Vec<EngineEvent>,
}

#[derive(Debug, Clone)]
pub struct Instance {
    id: String,
    def: Arc<ProcessDefinition>,
    prepared: PreparedPlan,
    variables: Variables,
    status: InstanceStatus,
    history: Vec<EngineEvent>,
    activations: BTreeMap<u64, Activation>,
    next_activation: u64,
    /// Parallel join → incoming flow → tokens waiting on that flow.
    joins: BTreeMap<String, BTreeMap<String, u32>>,
    notifications: Vec<NotificationRecord>,
    last_skill_state: BTreeMap<String, SkillState>,
}

impl Instance {
    /// Creates the instance and runs it from the start event to quiescence.
    pub fn start(
        id: impl Into<String>,
        def: Arc<ProcessDefinition>,
        prepared: PreparedPlan,
        initial: Variables,
        at: u64,
    ) -> Result<(Instance, Vec<Effect>), EngineError> {
        if prepared.plan.definition_id != def.id {
            return Err(EngineError::PlanMismatch(format!(
                "plan belongs to {}, not {}",
                prepared.plan.definition_id, def.id
            )));
        }
        let start = def
            .start_event()
            .ok_or_else(|| EngineError::PlanMismatch("definition has no start event".into()))?
            .id
            .clone();
        let mut inst = Instance {
            id: id.into(),
            def,
            prepared,
            variables: Variables::new(),
            status: InstanceStatus::Running,
            history: Vec::new(),
            activations: BTreeMap::new(),
            next_activation: 1,
            joins: BTreeMap::new(),
            notifications: Vec::new(),
            last_skill_state: BTreeMap::new(),
        };
        let mut step = Step {
            at,
            effects: Vec::new(),
            work: VecDeque::new(),
        };
        for (name, value) in initial {
            inst.set_variable(&mut step, name, value);
        }
        step.work.push_back(Arrival { node: start, via: None });
        inst.run(&mut step);
        Ok((inst, step.effects))
    }

    /// Rebuilds an instance from its start parameters and applied stimuli.
    pub fn replay(
        id: impl Into<String>,
        def: Arc<ProcessDefinition>,
        prepared: PreparedPlan,
        initial: Variables,
        at: u64,
        stimuli: &[Stimulus],
    ) -> Result<Instance, EngineError> {
        let (mut inst, _) = Instance::start(id, def, prepared, initial, at)?;
        for s in stimuli {
            // Rejected stimuli were rejected the first time too.
            let _ = inst.apply(s.clone());
        }
        Ok(inst)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn definition(&self) -> &Arc<ProcessDefinition> {
        &self.def
    }

    pub fn prepared(&self) -> &PreparedPlan {
        &self.prepared
    }

    pub fn status(&self) -> InstanceStatus {
        self.status
    }

    pub fn variables(&self) -> &Variables {
        &self.variables
    }

    pub fn history(&self) -> &[EngineEvent] {
        &self.history
    }

    pub fn notifications(&self) -> &[NotificationRecord] {
        &self.notifications
    }

    /// Whether a skill event for `activation` would still be acted upon.
    pub fn awaits_skill(&self, activation: u64) -> bool {
        matches!(
            self.activations.get(&activation),
            Some(Activation {
                waiting: Waiting::Skill { settled: false, .. },
                ..
            })
        )
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = self.activations.values().map(|a| a.node.clone()).collect();
        for (gw, arrivals) in &self.joins {
            for n in arrivals.values() {
                out.extend(std::iter::repeat(gw.clone()).take(*n as usize));
            }
        }
        out
    }

    /// No tokens can move any more without a terminal status: only parallel
    /// joins still hold tokens.
    pub fn is_stuck(&self) -> bool {
        !self.status.is_terminal() && self.activations.is_empty() && !self.tokens().is_empty()
    }

    pub fn work_items(&self) -> Vec<WorkItem> {
        self.activations
            .values()
            .filter_map(|a| match (&a.waiting, self.def.node(&a.node).map(|n| &n.kind)) {
                (Waiting::User { created_at }, Some(NodeKind::UserTask { form_fields })) => Some(WorkItem {
                    instance_id: self.id.clone(),
                    task_id: a.node.clone(),
                    form_fields: form_fields.clone(),
                    created_at: *created_at,
                }),
                _ => None,
            })
            .collect()
    }

    /// View with the last `history_tail` events.
    pub fn view(&self, history_tail: usize) -> InstanceView {
        let skip = self.history.len().saturating_sub(history_tail);
        InstanceView {
            instance_id: self.id.clone(),
            definition_id: self.def.id.clone(),
            status: self.status,
            tokens: self.tokens(),
            variables: self.variables.clone(),
            work_items: self.work_items(),
            last_skill_state: self.last_skill_state.clone(),
            history_len: self.history.len() as u64,
            history: self.history[skip..].to_vec(),
        }
    }

    pub fn apply(&mut self, stimulus: Stimulus) -> Result<Vec<Effect>, EngineError> {
        let mut step = Step {
            at: stimulus.at(),
            effects: Vec::new(),
            work: VecDeque::new(),
        };
        match stimulus {
            Stimulus::CompleteUserTask { task_id, values, .. } => {
                self.complete_user_task(&mut step, &task_id, values)?
            }
            Stimulus::SkillEvent {
                activation,
                state,
                outputs,
                ..
            } => self.skill_event(&mut step, activation, state, outputs),
            Stimulus::SkillCallFailed {
                activation, message, ..
            } => {
                if self.awaits_skill(activation) {
                    self.settle_skill(activation);
                    let node = self.activations[&activation].node.clone();
                    self.throw(&mut step, &node, Some(activation), codes::SKILL_UNREACHABLE, message);
                }
            }
            Stimulus::TimerFired { activation, .. } => {
                if matches!(
                    self.activations.get(&activation),
                    Some(Activation { waiting: Waiting::Timer, .. })
                ) {
                    let act = self.activations.remove(&activation).expect("checked");
                    self.complete_node(&mut step, &act.node);
                }
            }
            Stimulus::Cancel { .. } => {
                if self.status.is_terminal() {
                    return Err(EngineError::AlreadyEnded(self.id.clone()));
                }
                self.end_abnormally(&mut step, InstanceStatus::Cancelled);
            }
        }
        self.run(&mut step);
        Ok(step.effects)
    }

    fn complete_user_task(&mut self, step: &mut Step, task_id: &str, mut values: Variables) -> Result<(), EngineError> {
        if self.status.is_terminal() {
            return Err(EngineError::AlreadyEnded(self.id.clone()));
        }
        let act_id = self
            .activations
            .iter()
            .find(|(_, a)| a.node == task_id && matches!(a.waiting, Waiting::User { .. }))
            .map(|(id, _)| *id)
            .ok_or_else(|| EngineError::NoOpenWorkItem(task_id.to_owned()))?;
        let Some(NodeKind::UserTask { form_fields }) = self.def.node(task_id).map(|n| n.kind.clone()) else {
            unreachable!("user activation on a non-user task");
        };
        let mut accepted = Vec::new();
        for f in &form_fields {
            let v = values
                .remove(&f.name)
                .ok_or_else(|| EngineError::MissingField(f.name.clone()))?;
            let found = v.datatype();
            let v = v.coerce(f.datatype).ok_or(EngineError::DatatypeMismatch {
                field: f.name.clone(),
                expected: f.datatype,
                found,
            })?;
            accepted.push((format!("{task_id}_{}", f.name), v));
        }
        if let Some(extra) = values.keys().next() {
            return Err(EngineError::UnknownField(extra.clone()));
        }
        self.activations.remove(&act_id);
        for (name, v) in accepted {
            self.set_variable(step, name, v);
        }
        self.complete_node(step, task_id);
        Ok(())
    }

    fn skill_event(&mut self, step: &mut Step, activation: u64, state: SkillState, outputs: Variables) {
        if !self.awaits_skill(activation) {
            return;
        }
        let node = self.activations[&activation].node.clone();
        let skill_iri = self.prepared.tasks[&node].skill.iri.clone();
        self.last_skill_state.insert(node.clone(), state);
        self.log(step, EventKind::SkillStateObserved {
            task: node.clone(),
            skill: skill_iri.clone(),
            state,
        });
        match state {
            SkillState::Complete => {
                self.settle_skill(activation);
                let plans = self.prepared.tasks[&node].outputs.clone();
                for out in plans {
                    match outputs.get(&out.result).cloned().and_then(|v| v.coerce(out.datatype)) {
                        Some(v) => self.set_variable(step, out.variable, v),
                        None => self.log(step, EventKind::Diagnostic {
                            node: node.clone(),
                            message: format!(
                                "skill returned no {} value for result {}; {} left unset",
                                out.datatype, out.result, out.variable
                            ),
                        }),
                    }
                }
                self.command(step, activation, TransitionCommand::Reset);
                self.activations.remove(&activation);
                self.complete_node(step, &node);
            }
            SkillState::Stopped => {
                self.settle_skill(activation);
                self.throw(step, &node, Some(activation), codes::SKILL_STOPPED, format!("{skill_iri} stopped"));
            }
            SkillState::Aborted => {
                self.settle_skill(activation);
                self.command(step, activation, TransitionCommand::Clear);
                self.throw(step, &node, Some(activation), codes::SKILL_ABORTED, format!("{skill_iri} aborted"));
            }
            _ => {}
        }
    }

    fn settle_skill(&mut self, activation: u64) {
        if let Some(Activation {
            waiting: Waiting::Skill { settled, .. },
            ..
        }) = self.activations.get_mut(&activation)
        {
            *settled = true;
        }
    }

    fn command(&mut self, step: &mut Step, activation: u64, command: TransitionCommand) {
        let Some(act) = self.activations.get(&activation) else { return };
        let Waiting::Skill { skill_iri, .. } = &act.waiting else { return };
        let (task, skill_iri) = (act.node.clone(), skill_iri.clone());
        self.log(step, EventKind::SkillCommandIssued {
            task,
            skill: skill_iri.clone(),
            command,
        });
        step.effects.push(Effect::SkillCommand {
            activation,
            skill_iri,
            command,
        });
    }

    fn log(&mut self, step: &Step, kind: EventKind) {
        let seq = self.history.len() as u64 + 1;
        self.history.push(EngineEvent { seq, at: step.at, kind });
    }

    fn set_variable(&mut self, step: &mut Step, name: String, value: Value) {
        self.log(step, EventKind::VariableSet {
            name: name.clone(),
            value: value.clone(),
        });
        self.variables.insert(name, value);
    }

    fn new_activation(&mut self, node: &str, waiting: Waiting) -> u64 {
        let id = self.next_activation;
        self.next_activation += 1;
        self.activations.insert(
            id,
            Activation {
                node: node.to_owned(),
                waiting,
            },
        );
        id
    }

    /// Marks `node` done and sends a token down every outgoing flow.
    fn complete_node(&mut self, step: &mut Step, node: &str) {
        self.log(step, EventKind::NodeCompleted { node: node.to_owned() });
        let def = Arc::clone(&self.def);
        for f in def.outgoing(node) {
            step.work.push_back(Arrival {
                node: f.target.clone(),
                via: Some(f.id.clone()),
            });
        }
    }

    fn run(&mut self, step: &mut Step) {
        while let Some(arrival) = step.work.pop_front() {
            if self.status.is_terminal() {
                step.work.clear();
                break;
            }
            self.enter(step, arrival);
        }
        if self.status.is_terminal() {
            return;
        }
        let has_tokens = !self.activations.is_empty() || self.joins.values().any(|m| m.values().any(|n| *n > 0));
        if !has_tokens {
            self.status = InstanceStatus::Completed;
            self.log(step, EventKind::InstanceEnded {
                status: InstanceStatus::Completed,
            });
        } else if self
            .activations
            .values()
            .any(|a| matches!(a.waiting, Waiting::User { .. }))
        {
            self.status = InstanceStatus::WaitingUser;
        } else {
            self.status = InstanceStatus::Running;
        }
    }

    fn enter(&mut self, step: &mut Step, arrival: Arrival) {
        let def = Arc::clone(&self.def);
        let node: &FlowNode = def.node(&arrival.node).expect("flows point at existing nodes");
        self.log(step, EventKind::NodeEntered { node: node.id.clone() });
        match &node.kind {
            NodeKind::StartEvent | NodeKind::BoundaryErrorEvent { .. } => self.complete_node(step, &node.id),
            NodeKind::EndEvent => {
                self.log(step, EventKind::NodeCompleted { node: node.id.clone() });
            }
            NodeKind::ExclusiveGateway { default_flow } => match self.choose_flow(&node.id, default_flow.as_deref()) {
                Ok(flow) => {
                    self.log(step, EventKind::NodeCompleted { node: node.id.clone() });
                    let f = def.flow(&flow).expect("outgoing flow exists");
                    step.work.push_back(Arrival {
                        node: f.target.clone(),
                        via: Some(f.id.clone()),
                    });
                }
                Err((code, message)) => self.throw(step, &node.id, None, code, message),
            },
            NodeKind::ParallelGateway => {
                let incoming: Vec<&str> = def.incoming(&node.id).map(|f| f.id.as_str()).collect();
                if incoming.len() <= 1 {
                    self.complete_node(step, &node.id);
                    return;
                }
                let arrivals = self.joins.entry(node.id.clone()).or_default();
                let via = arrival.via.expect("tokens reach a join over a flow");
                *arrivals.entry(via).or_insert(0) += 1;
                if incoming.iter().all(|f| arrivals.get(*f).copied().unwrap_or(0) > 0) {
                    for f in &incoming {
                        *arrivals.get_mut(*f).expect("present") -= 1;
                    }
                    arrivals.retain(|_, n| *n > 0);
                    if arrivals.is_empty() {
                        self.joins.remove(&node.id);
                    }
                    // One completion per consumed token; the last one fires the outgoing flows.
                    for _ in 1..incoming.len() {
                        self.log(step, EventKind::NodeCompleted { node: node.id.clone() });
                    }
                    self.complete_node(step, &node.id);
                }
            }
            NodeKind::UserTask { .. } => {
                self.new_activation(&node.id, Waiting::User { created_at: step.at });
            }
            NodeKind::SendTask { subject, body } => {
                let rendered = render_template(subject, &self.variables)
                    .and_then(|s| Ok((s, render_template(body, &self.variables)?)));
                match rendered {
                    Ok((subject, body)) => {
                        let record = NotificationRecord {
                            instance_id: self.id.clone(),
                            task_id: node.id.clone(),
                            subject,
                            body,
                            timestamp: step.at,
                        };
                        self.notifications.push(record.clone());
                        step.effects.push(Effect::Notify(record));
                        self.complete_node(step, &node.id);
                    }
                    Err(e) => {
                        let (code, message) = expr_error(&e);
                        self.throw(step, &node.id, None, code, message);
                    }
                }
            }
            NodeKind::CapabilityTask { .. } => self.delegate(step, &node.id),
            NodeKind::TimerCatchEvent { duration } => {
                let activation = self.new_activation(&node.id, Waiting::Timer);
                step.effects.push(Effect::ScheduleTimer {
                    activation,
                    due_at: step.at.saturating_add(duration.millis()),
                });
            }
        }
    }

    /// Outgoing flow of an exclusive gateway: first enabled flow in document
    /// order, else the default flow.
    fn choose_flow(&self, node: &str, default_flow: Option<&str>) -> Result<String, (&'static str, String)> {
        for f in self.def.outgoing(node) {
            if Some(f.id.as_str()) == default_flow {
                continue;
            }
            let Some(cond) = &f.condition else {
                return Ok(f.id.clone());
            };
            match evaluate(cond, &self.variables) {
                Ok(Value::Boolean(true)) => return Ok(f.id.clone()),
                Ok(Value::Boolean(false)) => {}
                Ok(other) => {
                    return Err((
                        codes::EXPRESSION_ERROR,
                        format!("condition of {} yielded {} instead of a boolean", f.id, other.datatype()),
                    ))
                }
                Err(e) => return Err(expr_error(&e)),
            }
        }
        default_flow
            .map(str::to_owned)
            .ok_or_else(|| (codes::NO_FLOW_ENABLED, format!("no outgoing flow of {node} is enabled")))
    }

    fn delegate(&mut self, step: &mut Step, node: &str) {
        let task = self.prepared.tasks[node].clone();
        let activation = self.new_activation(
            node,
            Waiting::Skill {
                skill_iri: task.skill.iri.clone(),
                settled: false,
            },
        );
        let mut values = Variables::new();
        for p in &task.parameters {
            let checked = p
                .value
                .evaluate(&self.variables)
                .map_err(|e| expr_error(&e))
                .and_then(|v| check_parameter(p, v));
            match checked {
                Ok(v) => {
                    values.insert(p.name.clone(), v);
                }
                Err((code, message)) => {
                    // Nothing was sent to the skill yet, so there is nothing to abort.
                    self.settle_skill(activation);
                    self.throw(step, node, Some(activation), code, message);
                    return;
                }
            }
        }
        step.effects.push(Effect::Delegate {
            activation,
            task_id: node.to_owned(),
            request: DelegationRequest {
                skill_iri: task.skill.iri.clone(),
                transition: TransitionCommand::Start,
                parameter_values: values,
            },
            skill: task.skill,
        });
    }

    fn throw(&mut self, step: &mut Step, node: &str, activation: Option<u64>, code: &str, message: String) {
        self.log(step, EventKind::ErrorThrown {
            node: node.to_owned(),
            code: code.to_owned(),
            message,
        });
        let def = Arc::clone(&self.def);
        let filter = |n: &&FlowNode, want: Option<&str>| {
            matches!(&n.kind, NodeKind::BoundaryErrorEvent { error_code, .. } if error_code.as_deref() == want)
        };
        let boundary = def
            .boundaries_of(node)
            .find(|n| filter(n, Some(code)))
            .or_else(|| def.boundaries_of(node).find(|n| filter(n, None)));
        match boundary {
            Some(b) => {
                if let Some(a) = activation {
                    self.cancel_activation(step, a);
                }
                self.log(step, EventKind::ErrorCaught {
                    boundary: b.id.clone(),
                    task: node.to_owned(),
                    code: code.to_owned(),
                });
                step.work.push_back(Arrival {
                    node: b.id.clone(),
                    via: None,
                });
            }
            None => self.end_abnormally(step, InstanceStatus::Faulted),
        }
    }

    fn cancel_activation(&mut self, step: &mut Step, activation: u64) {
        if self.awaits_skill(activation) {
            self.command(step, activation, TransitionCommand::Abort);
        }
        self.activations.remove(&activation);
    }

    fn end_abnormally(&mut self, step: &mut Step, status: InstanceStatus) {
        let ids: Vec<u64> = self.activations.keys().copied().collect();
        for id in ids {
            self.cancel_activation(step, id);
        }
        self.joins.clear();
        step.work.clear();
        self.status = status;
        self.log(step, EventKind::InstanceEnded { status });
    }
}

fn expr_error(e: &ExprError) -> (&'static str, String) {
    match e {
        ExprError::UnknownVariable(_) => (codes::UNKNOWN_VARIABLE, e.to_string()),
        _ => (codes::EXPRESSION_ERROR, e.to_string()),
    }
}

fn check_parameter(p: &ParameterPlan, v: Value) -> Result<Value, (&'static str, String)> {
    let found = v.datatype();
    let v = v.coerce(p.datatype).ok_or_else(|| {
        (
            codes::PARAMETER_CONSTRAINT,
            format!("parameter {} expects {}, got {found}", p.name, p.datatype),
        )
    })?;
    if let Some(prop) = &p.property {
        if let Ok(ConstraintResult::Violated(bound)) = prop.check_constraint(&v) {
            return Err((
                codes::PARAMETER_CONSTRAINT,
                format!("{} = {v} violates {bound} of {}", p.name, prop.iri),
            ));
        }
    }
    Ok(v)
}
