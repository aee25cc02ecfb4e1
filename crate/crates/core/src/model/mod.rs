//! Capability processes: a BPMN subset whose service tasks carry a binding to
//! an abstract capability instead of an implementation.

pub mod duration;
pub mod expr;
pub mod validate;
pub mod xml;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::Datatype;

pub use duration::IsoDuration;
pub use expr::{
    evaluate, parse_expr, parse_value_expr, render_template, BinaryOp, Expr, ExprError, UnaryOp,
    ValueExpr,
};
pub use validate::{validate_process, Diagnostic, DiagnosticKind};
pub use xml::{parse_process, serialize_process};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("xml error: {0}")]
    Xml(String),
    #[error("unsupported element {0}")]
    UnsupportedElement(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("invalid binding: {0}")]
    InvalidBinding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormField {
    pub name: String,
    pub datatype: Datatype,
}

/// Capability reference stored inside a service task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CapabilityBinding {
    pub capability_iri: String,
    /// Input property iri → value.
    pub input_assignments: BTreeMap<String, ValueExpr>,
    /// Output property iri → process variable receiving it.
    pub output_mappings: BTreeMap<String, String>,
}

impl CapabilityBinding {
    pub fn new(capability_iri: impl Into<String>) -> Self {
        CapabilityBinding {
            capability_iri: capability_iri.into(),
            ..Default::default()
        }
    }

    pub fn input(mut self, property: impl Into<String>, value: ValueExpr) -> Self {
        self.input_assignments.insert(property.into(), value);
        self
    }

    pub fn output(mut self, property: impl Into<String>, variable: impl Into<String>) -> Self {
        self.output_mappings.insert(property.into(), variable.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum NodeKind {
    StartEvent,
    EndEvent,
    #[serde(rename_all = "camelCase")]
    ExclusiveGateway { default_flow: Option<String> },
    ParallelGateway,
    #[serde(rename_all = "camelCase")]
    UserTask { form_fields: Vec<FormField> },
    SendTask { subject: String, body: String },
    /// Service task; `None` is a placeholder awaiting a capability.
    CapabilityTask { binding: Option<CapabilityBinding> },
    TimerCatchEvent { duration: IsoDuration },
    #[serde(rename_all = "camelCase")]
    BoundaryErrorEvent {
        attached_to: String,
        error_code: Option<String>,
    },
}

impl NodeKind {
    pub fn is_task(&self) -> bool {
        matches!(
            self,
            NodeKind::UserTask { .. } | NodeKind::SendTask { .. } | NodeKind::CapabilityTask { .. }
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::StartEvent => "startEvent",
            NodeKind::EndEvent => "endEvent",
            NodeKind::ExclusiveGateway { .. } => "exclusiveGateway",
            NodeKind::ParallelGateway => "parallelGateway",
            NodeKind::UserTask { .. } => "userTask",
            NodeKind::SendTask { .. } => "sendTask",
            NodeKind::CapabilityTask { .. } => "serviceTask",
            NodeKind::TimerCatchEvent { .. } => "intermediateCatchEvent",
            NodeKind::BoundaryErrorEvent { .. } => "boundaryEvent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: String,
    pub name: Option<String>,
    pub kind: NodeKind,
}

impl FlowNode {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        FlowNode {
            id: id.into(),
            name: None,
            kind,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFlow {
    pub id: String,
    pub name: Option<String>,
    pub source: String,
    pub target: String,
    pub condition: Option<Expr>,
}

impl SequenceFlow {
    pub fn new(id: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        SequenceFlow {
            id: id.into(),
            name: None,
            source: source.into(),
            target: target.into(),
            condition: None,
        }
    }

    pub fn when(mut self, condition: Expr) -> Self {
        self.condition = Some(condition);
        self
    }
}

/// A deployed or deployable process graph. Immutable once built; editing
/// operations return a new value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessDefinition {
    pub id: String,
    /// Empty means no name.
    pub name: String,
    pub nodes: Vec<FlowNode>,
    pub flows: Vec<SequenceFlow>,
    /// Diagram interchange block, kept verbatim.
    pub diagram: Option<String>,
}

impl ProcessDefinition {
    pub fn new(id: impl Into<String>) -> Self {
        ProcessDefinition {
            id: id.into(),
            name: String::new(),
            nodes: Vec::new(),
            flows: Vec::new(),
            diagram: None,
        }
    }

    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn flow(&self, id: &str) -> Option<&SequenceFlow> {
        self.flows.iter().find(|f| f.id == id)
    }

    pub fn outgoing<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a SequenceFlow> + 'a {
        self.flows.iter().filter(move |f| f.source == node)
    }

    pub fn incoming<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a SequenceFlow> + 'a {
        self.flows.iter().filter(move |f| f.target == node)
    }

    pub fn start_event(&self) -> Option<&FlowNode> {
        self.nodes.iter().find(|n| n.kind == NodeKind::StartEvent)
    }

    /// Boundary event id → host task id.
    pub fn boundary_attachments(&self) -> BTreeMap<String, String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::BoundaryErrorEvent { attached_to, .. } => {
                    Some((n.id.clone(), attached_to.clone()))
                }
                _ => None,
            })
            .collect()
    }

    /// Boundary events attached to `task`, in document order.
    pub fn boundaries_of<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a FlowNode> + 'a {
        self.nodes.iter().filter(move |n| {
            matches!(&n.kind, NodeKind::BoundaryErrorEvent { attached_to, .. } if attached_to == task)
        })
    }

    /// Capability tasks with their bindings (placeholders included).
    pub fn capability_tasks(&self) -> impl Iterator<Item = (&FlowNode, Option<&CapabilityBinding>)> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::CapabilityTask { binding } => Some((n, binding.as_ref())),
            _ => None,
        })
    }

    /// Returns a copy with `binding` attached to the service task `task_id`,
    /// replacing any previous binding.
    pub fn attach_capability(
        &self,
        task_id: &str,
        binding: CapabilityBinding,
    ) -> Result<ProcessDefinition, ModelError> {
        let idx = self
            .nodes
            .iter()
            .position(|n| n.id == task_id && matches!(n.kind, NodeKind::CapabilityTask { .. }))
            .ok_or_else(|| ModelError::UnknownTask(task_id.to_owned()))?;
        if binding.capability_iri.is_empty() {
            return Err(ModelError::InvalidBinding("empty capability iri".into()));
        }
        if let Some(var) = binding
            .output_mappings
            .values()
            .find(|v| !validate::is_identifier(v))
        {
            return Err(ModelError::InvalidBinding(format!(
                "output variable {var:?} is not an identifier"
            )));
        }
        let mut next = self.clone();
        next.nodes[idx].kind = NodeKind::CapabilityTask {
            binding: Some(binding),
        };
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ProcessDefinition {
        let mut d = ProcessDefinition::new("p");
        d.nodes = vec![
            FlowNode::new("s", NodeKind::StartEvent),
            FlowNode::new("t", NodeKind::CapabilityTask { binding: None }),
            FlowNode::new("u", NodeKind::UserTask { form_fields: vec![] }),
            FlowNode::new("e", NodeKind::EndEvent),
        ];
        d.flows = vec![
            SequenceFlow::new("f1", "s", "t"),
            SequenceFlow::new("f2", "t", "u"),
            SequenceFlow::new("f3", "u", "e"),
        ];
        d
    }

    #[test]
    fn attach_replaces_previous_binding() {
        let d = sample();
        let first = d
            .attach_capability("t", CapabilityBinding::new("urn:cap:a"))
            .unwrap();
        let second = first
            .attach_capability("t", CapabilityBinding::new("urn:cap:b"))
            .unwrap();
        let (_, b) = second.capability_tasks().next().unwrap();
        assert_eq!(b.unwrap().capability_iri, "urn:cap:b");
        // Original untouched.
        assert!(d.capability_tasks().next().unwrap().1.is_none());
    }

    #[test]
    fn attach_to_non_service_task_fails() {
        let d = sample();
        assert_eq!(
            d.attach_capability("u", CapabilityBinding::new("urn:cap:a")),
            Err(ModelError::UnknownTask("u".into()))
        );
        assert_eq!(
            d.attach_capability("nope", CapabilityBinding::new("urn:cap:a")),
            Err(ModelError::UnknownTask("nope".into()))
        );
        assert!(matches!(
            d.attach_capability("t", CapabilityBinding::new("urn:cap:a").output("p", "not valid")),
            Err(ModelError::InvalidBinding(_))
        ));
    }
}
