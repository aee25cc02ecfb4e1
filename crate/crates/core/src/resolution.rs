//! Turning a capability process into a skill process.
//!
//! Every capability task is bound to one registered skill that executes its
//! capability, and the task's property assignments are rewritten onto the
//! skill variables linked to those properties. When several skills qualify,
//! the selection policy decides, or the choice is handed back to a user as a
//! set of pending decisions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::validate::is_identifier;
use crate::model::{
    validate_process, CapabilityBinding, Diagnostic, DiagnosticKind, NodeKind, ProcessDefinition,
    ValueExpr,
};
use crate::registry::{ConstraintResult, Registry, Skill};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SelectionPolicy {
    /// Ambiguity is an error.
    #[default]
    AutoStrict,
    /// Lexicographically smallest skill iri wins.
    FirstDeterministic,
    /// Ambiguous tasks are returned as pending decisions.
    Interactive,
}

impl std::str::FromStr for SelectionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "autoStrict" | "auto-strict" | "strict" => Ok(SelectionPolicy::AutoStrict),
            "firstDeterministic" | "first-deterministic" | "first" => {
                Ok(SelectionPolicy::FirstDeterministic)
            }
            "interactive" => Ok(SelectionPolicy::Interactive),
            other => Err(format!("unknown selection policy {other:?}")),
        }
    }
}

/// Skill chosen for one capability task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillBinding {
    pub skill: String,
    /// Skill parameter name → value.
    #[serde(default)]
    pub parameters: BTreeMap<String, ValueExpr>,
    /// Skill result name → process variable.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BindingPlan {
    pub definition_id: String,
    /// Capability task id → binding.
    pub bindings: BTreeMap<String, SkillBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PendingDecision {
    pub task_id: String,
    pub capability_iri: String,
    pub candidates: Vec<String>,
    /// Mapped binding for every candidate, keyed by skill iri.
    pub options: BTreeMap<String, SkillBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PendingDecisions {
    pub definition_id: String,
    pub pending: Vec<PendingDecision>,
    /// Tasks that are already decided.
    pub bindings: BTreeMap<String, SkillBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "camelCase")]
pub enum Resolution {
    Complete { plan: BindingPlan },
    Pending { decisions: PendingDecisions },
}

impl Resolution {
    pub fn plan(&self) -> Option<&BindingPlan> {
        match self {
            Resolution::Complete { plan } => Some(plan),
            Resolution::Pending { .. } => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResolutionError {
    #[error("definition is not resolvable: {}", join(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("no skill available for {capability_iri} (task {task_id})")]
    NoSkillAvailable {
        task_id: String,
        capability_iri: String,
    },
    #[error("task {task_id} can be executed by {} skills", .candidates.len())]
    AmbiguousCapability {
        task_id: String,
        candidates: Vec<String>,
    },
    #[error("skill {skill_iri} has no variable linked to {property_iri}")]
    UnlinkedProperty {
        property_iri: String,
        skill_iri: String,
    },
    #[error("skill {skill_iri} does not execute {capability_iri}")]
    CapabilityMismatch {
        skill_iri: String,
        capability_iri: String,
    },
    #[error("no pending decision for task {0}")]
    UnknownPendingTask(String),
    #[error("{skill_iri} is not a candidate for task {task_id}")]
    NotACandidate { task_id: String, skill_iri: String },
}

fn join(diags: &[Diagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Rewrites property assignments of `binding` onto the variables of `skill`.
pub fn map_parameters(binding: &CapabilityBinding, skill: &Skill) -> Result<SkillBinding, ResolutionError> {
    if skill.capability_iri != binding.capability_iri {
        return Err(ResolutionError::CapabilityMismatch {
            skill_iri: skill.iri.clone(),
            capability_iri: binding.capability_iri.clone(),
        });
    }
    let unlinked = |p: &str| ResolutionError::UnlinkedProperty {
        property_iri: p.to_owned(),
        skill_iri: skill.iri.clone(),
    };
    let mut parameters = BTreeMap::new();
    for (prop, value) in &binding.input_assignments {
        let var = skill.parameter_linked_to(prop).ok_or_else(|| unlinked(prop))?;
        parameters.insert(var.name.clone(), value.clone());
    }
    let mut outputs = BTreeMap::new();
    for (prop, variable) in &binding.output_mappings {
        let var = skill.result_linked_to(prop).ok_or_else(|| unlinked(prop))?;
        outputs.insert(var.name.clone(), variable.clone());
    }
    Ok(SkillBinding {
        skill: skill.iri.clone(),
        parameters,
        outputs,
    })
}

pub fn resolve(
    def: &ProcessDefinition,
    registry: &Registry,
    policy: SelectionPolicy,
) -> Result<Resolution, ResolutionError> {
    let diags = validate_process(def, Some(registry));
    if !diags.is_empty() {
        return Err(ResolutionError::Invalid(diags));
    }
    let mut bindings = BTreeMap::new();
    let mut pending = Vec::new();
    for (node, binding) in def.capability_tasks() {
        let binding = binding.expect("validated: every capability task is bound");
        let candidates = registry
            .skills_for_capability(&binding.capability_iri)
            .expect("validated: capability is registered");
        match (candidates.as_slice(), policy) {
            ([], _) => {
                return Err(ResolutionError::NoSkillAvailable {
                    task_id: node.id.clone(),
                    capability_iri: binding.capability_iri.clone(),
                })
            }
            ([only], _) | ([only, ..], SelectionPolicy::FirstDeterministic) => {
                bindings.insert(node.id.clone(), map_parameters(binding, only)?);
            }
            (many, SelectionPolicy::AutoStrict) => {
                return Err(ResolutionError::AmbiguousCapability {
                    task_id: node.id.clone(),
                    candidates: many.iter().map(|s| s.iri.clone()).collect(),
                })
            }
            (many, _) => {
                let mut options = BTreeMap::new();
                for s in many {
                    options.insert(s.iri.clone(), map_parameters(binding, s)?);
                }
                pending.push(PendingDecision {
                    task_id: node.id.clone(),
                    capability_iri: binding.capability_iri.clone(),
                    candidates: many.iter().map(|s| s.iri.clone()).collect(),
                    options,
                });
            }
        }
    }
    let decisions = PendingDecisions {
        definition_id: def.id.clone(),
        pending,
        bindings,
    };
    Ok(finish(decisions))
}

fn finish(decisions: PendingDecisions) -> Resolution {
    if decisions.pending.is_empty() {
        Resolution::Complete {
            plan: BindingPlan {
                definition_id: decisions.definition_id,
                bindings: decisions.bindings,
            },
        }
    } else {
        Resolution::Pending { decisions }
    }
}

/// Records the choice of `skill_iri` for `task_id`.
pub fn decide(
    pending: &PendingDecisions,
    task_id: &str,
    skill_iri: &str,
) -> Result<Resolution, ResolutionError> {
    let idx = pending
        .pending
        .iter()
        .position(|p| p.task_id == task_id)
        .ok_or_else(|| ResolutionError::UnknownPendingTask(task_id.to_owned()))?;
    let binding = pending.pending[idx].options.get(skill_iri).cloned().ok_or_else(|| {
        ResolutionError::NotACandidate {
            task_id: task_id.to_owned(),
            skill_iri: skill_iri.to_owned(),
        }
    })?;
    let mut next = pending.clone();
    next.pending.remove(idx);
    next.bindings.insert(task_id.to_owned(), binding);
    Ok(finish(next))
}

/// Checks a plan against its definition and the current registry.
pub fn validate_plan(plan: &BindingPlan, def: &ProcessDefinition, registry: &Registry) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut out = Vec::new();
    if plan.definition_id != def.id {
        out.push(Diagnostic::new(
            PlanIncomplete,
            &def.id,
            format!("plan was made for definition {}", plan.definition_id),
        ));
    }
    for id in plan.bindings.keys() {
        if !matches!(def.node(id).map(|n| &n.kind), Some(NodeKind::CapabilityTask { .. })) {
            out.push(Diagnostic::new(PlanIncomplete, id, "binding for a node that is not a capability task"));
        }
    }
    for (node, binding) in def.capability_tasks() {
        let Some(sb) = plan.bindings.get(&node.id) else {
            out.push(Diagnostic::new(PlanIncomplete, &node.id, "task has no skill binding"));
            continue;
        };
        let Some(binding) = binding else {
            out.push(Diagnostic::new(MissingBinding, &node.id, "service task has no capability"));
            continue;
        };
        let Some(skill) = registry.skill(&sb.skill) else {
            out.push(Diagnostic::new(UnknownSkill, &node.id, format!("skill {} is not registered", sb.skill)));
            continue;
        };
        if skill.capability_iri != binding.capability_iri {
            out.push(Diagnostic::new(
                CapabilityMismatch,
                &node.id,
                format!("skill {} executes {}, task needs {}", skill.iri, skill.capability_iri, binding.capability_iri),
            ));
            continue;
        }
        let capability = registry.capability(&skill.capability_iri);
        for prop in binding.input_assignments.keys() {
            let covered = skill
                .parameter_linked_to(prop)
                .is_some_and(|v| sb.parameters.contains_key(&v.name));
            if !covered {
                out.push(Diagnostic::new(
                    UnlinkedProperty,
                    &node.id,
                    format!("assignment to {prop} does not reach a parameter of {}", skill.iri),
                ));
            }
        }
        for (name, value) in &sb.parameters {
            let Some(var) = skill.parameter(name) else {
                out.push(Diagnostic::new(UnknownProperty, &node.id, format!("{} has no parameter {name}", skill.iri)));
                continue;
            };
            let Some(v) = value.as_constant() else { continue };
            if !var.datatype.accepts(v.datatype()) {
                out.push(Diagnostic::new(
                    DatatypeMismatch,
                    &node.id,
                    format!("parameter {name} expects {}, got {}", var.datatype, v.datatype()),
                ));
                continue;
            }
            let prop = var
                .linked_property
                .as_deref()
                .and_then(|p| capability.and_then(|c| c.property(p)));
            if let Some(prop) = prop {
                if let Ok(ConstraintResult::Violated(bound)) = prop.check_constraint(v) {
                    out.push(Diagnostic::new(
                        ConstraintViolated,
                        &node.id,
                        format!("parameter {name} = {v} violates {bound} of {}", prop.iri),
                    ));
                }
            }
        }
        for (name, variable) in &sb.outputs {
            if skill.result(name).is_none() {
                out.push(Diagnostic::new(UnknownProperty, &node.id, format!("{} has no result {name}", skill.iri)));
            }
            if !is_identifier(variable) {
                out.push(Diagnostic::new(
                    InvalidExpression,
                    &node.id,
                    format!("output variable {variable:?} is not an identifier"),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_value_expr, FlowNode, SequenceFlow};
    use crate::registry::{
        Capability, MachineDocument, PropertyElement, SkillDocument, SkillInterface, SkillVariable,
    };
    use crate::value::{Datatype, Value};

    fn registry(drills: &[&str]) -> Registry {
        let mut r = Registry::new();
        r.add_capability(Capability {
            iri: "urn:c:drill".into(),
            name: "Drilling".into(),
            inputs: vec![PropertyElement {
                iri: "urn:p:holes".into(),
                name: "holes".into(),
                datatype: Datatype::Integer,
                unit: None,
                constraint: Some(crate::registry::Constraint {
                    max: Some(Value::Integer(4)),
                    ..Default::default()
                }),
            }],
            outputs: vec![],
        })
        .unwrap();
        for d in drills {
            r.register_machine(MachineDocument {
                iri: format!("urn:m:{d}"),
                name: d.to_string(),
                skills: vec![SkillDocument {
                    iri: format!("urn:s:{d}"),
                    name: d.to_string(),
                    capability: "urn:c:drill".into(),
                    parameters: vec![SkillVariable {
                        name: "n".into(),
                        datatype: Datatype::Integer,
                        linked_property: Some("urn:p:holes".into()),
                    }],
                    results: vec![],
                    interface: SkillInterface::in_process("drill"),
                }],
            })
            .unwrap();
        }
        r
    }

    fn def(value: &str) -> ProcessDefinition {
        let mut d = ProcessDefinition::new("p");
        d.nodes = vec![
            FlowNode::new("s", NodeKind::StartEvent),
            FlowNode::new(
                "t",
                NodeKind::CapabilityTask {
                    binding: Some(
                        CapabilityBinding::new("urn:c:drill")
                            .input("urn:p:holes", parse_value_expr(value).unwrap()),
                    ),
                },
            ),
            FlowNode::new("e", NodeKind::EndEvent),
        ];
        d.flows = vec![SequenceFlow::new("f1", "s", "t"), SequenceFlow::new("f2", "t", "e")];
        d
    }

    #[test]
    fn unique_candidate_resolves() {
        let res = resolve(&def("${x}"), &registry(&["a"]), SelectionPolicy::AutoStrict).unwrap();
        let plan = res.plan().unwrap();
        assert_eq!(plan.bindings["t"].skill, "urn:s:a");
        assert_eq!(plan.bindings["t"].parameters["n"].to_text(), "${x}");
    }

    #[test]
    fn policies_on_ambiguity() {
        let reg = registry(&["b", "a"]);
        assert!(matches!(
            resolve(&def("2"), &reg, SelectionPolicy::AutoStrict),
            Err(ResolutionError::AmbiguousCapability { .. })
        ));
        let first = resolve(&def("2"), &reg, SelectionPolicy::FirstDeterministic).unwrap();
        assert_eq!(first.plan().unwrap().bindings["t"].skill, "urn:s:a");
        let Resolution::Pending { decisions } = resolve(&def("2"), &reg, SelectionPolicy::Interactive).unwrap() else {
            panic!("expected pending decisions");
        };
        assert_eq!(decisions.pending[0].candidates, ["urn:s:a", "urn:s:b"]);
        assert!(matches!(
            decide(&decisions, "t", "urn:s:zzz"),
            Err(ResolutionError::NotACandidate { .. })
        ));
        let done = decide(&decisions, "t", "urn:s:b").unwrap();
        assert_eq!(done.plan().unwrap().bindings["t"].skill, "urn:s:b");
        assert!(matches!(
            decide(&decisions, "x", "urn:s:b"),
            Err(ResolutionError::UnknownPendingTask(_))
        ));
    }

    #[test]
    fn no_skill() {
        assert_eq!(
            resolve(&def("2"), &registry(&[]), SelectionPolicy::AutoStrict),
            Err(ResolutionError::NoSkillAvailable {
                task_id: "t".into(),
                capability_iri: "urn:c:drill".into()
            })
        );
    }

    #[test]
    fn constant_over_limit_fails_plan_validation() {
        let reg = registry(&["a"]);
        let d = def("2");
        let mut plan = resolve(&d, &reg, SelectionPolicy::AutoStrict).unwrap().plan().unwrap().clone();
        assert!(validate_plan(&plan, &d, &reg).is_empty());
        plan.bindings.get_mut("t").unwrap().parameters.insert("n".into(), ValueExpr::Constant(Value::Integer(9)));
        let diags = validate_plan(&plan, &d, &reg);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::ConstraintViolated);
    }

    #[test]
    fn plan_json_shape() {
        let plan = resolve(&def("${x + 1}"), &registry(&["a"]), SelectionPolicy::AutoStrict)
            .unwrap()
            .plan()
            .unwrap()
            .clone();
        let json = serde_json::to_value(&plan).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "definitionId": "p",
                "bindings": {"t": {"skill": "urn:s:a", "parameters": {"n": "${x + 1}"}, "outputs": {}}}
            })
        );
        let back: BindingPlan = serde_json::from_value(json).unwrap();
        assert_eq!(back, plan);
    }
}
