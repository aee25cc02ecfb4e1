//! Pre-deployment checks for process definitions.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::{parse_template, ValueExpr};
use super::{NodeKind, ProcessDefinition};
use crate::registry::{ConstraintResult, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    /// A graph invariant is violated; such definitions are rejected on parse.
    Structure,
    MissingBinding,
    AmbiguousGateway,
    InvalidExpression,
    UnknownCapability,
    UnknownProperty,
    DatatypeMismatch,
    ConstraintViolated,
    CapabilityMismatch,
    UnknownSkill,
    UnlinkedProperty,
    PlanIncomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub element: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(kind: DiagnosticKind, element: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            kind,
            element: Some(element.into()),
            message: message.into(),
        }
    }

    fn global(kind: DiagnosticKind, message: impl Into<String>) -> Self {
        Diagnostic {
            kind,
            element: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.element {
            Some(e) => write!(f, "{:?} at {e}: {}", self.kind, self.message),
            None => write!(f, "{:?}: {}", self.kind, self.message),
        }
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
        && !matches!(s, "and" | "or" | "not" | "true" | "false")
}

/// Graph invariants only. Parsing rejects any definition failing these.
pub fn structural_diagnostics(def: &ProcessDefinition) -> Vec<Diagnostic> {
    use DiagnosticKind::Structure;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for id in def.nodes.iter().map(|n| &n.id).chain(def.flows.iter().map(|f| &f.id)) {
        if id.is_empty() {
            out.push(Diagnostic::global(Structure, "element without id"));
        } else if !ids.insert(id.as_str()) {
            out.push(Diagnostic::new(Structure, id, "duplicate id"));
        }
    }

    let starts: Vec<_> = def
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::StartEvent)
        .collect();
    if starts.len() != 1 {
        out.push(Diagnostic::global(
            Structure,
            format!("expected exactly one start event, found {}", starts.len()),
        ));
    }
    if !def.nodes.iter().any(|n| n.kind == NodeKind::EndEvent) {
        out.push(Diagnostic::global(Structure, "no end event"));
    }

    let kinds: HashMap<&str, &NodeKind> = def.nodes.iter().map(|n| (n.id.as_str(), &n.kind)).collect();
    for f in &def.flows {
        match kinds.get(f.source.as_str()) {
            None => out.push(Diagnostic::new(Structure, &f.id, format!("unknown source {}", f.source))),
            Some(NodeKind::EndEvent) => {
                out.push(Diagnostic::new(Structure, &f.id, "flow leaves an end event"))
            }
            Some(NodeKind::ExclusiveGateway { .. }) => {}
            Some(_) if f.condition.is_some() => out.push(Diagnostic::new(
                Structure,
                &f.id,
                "conditions are only allowed on exclusive gateway outputs",
            )),
            Some(_) => {}
        }
        match kinds.get(f.target.as_str()) {
            None => out.push(Diagnostic::new(Structure, &f.id, format!("unknown target {}", f.target))),
            Some(NodeKind::StartEvent) => {
                out.push(Diagnostic::new(Structure, &f.id, "flow enters the start event"))
            }
            Some(NodeKind::BoundaryErrorEvent { .. }) => {
                out.push(Diagnostic::new(Structure, &f.id, "flow enters a boundary event"))
            }
            Some(_) => {}
        }
    }

    for n in &def.nodes {
        match &n.kind {
            NodeKind::BoundaryErrorEvent { attached_to, .. } => match kinds.get(attached_to.as_str()) {
                Some(k) if k.is_task() => {}
                _ => out.push(Diagnostic::new(
                    Structure,
                    &n.id,
                    format!("boundary event attached to {attached_to}, which is not a task"),
                )),
            },
            NodeKind::ExclusiveGateway {
                default_flow: Some(default),
            } => match def.flow(default) {
                Some(f) if f.source == n.id => {
                    if f.condition.is_some() {
                        out.push(Diagnostic::new(Structure, &n.id, "default flow carries a condition"));
                    }
                }
                _ => out.push(Diagnostic::new(
                    Structure,
                    &n.id,
                    format!("default flow {default} is not an outgoing flow"),
                )),
            },
            _ => {}
        }
        if n.kind != NodeKind::EndEvent && def.outgoing(&n.id).next().is_none() {
            out.push(Diagnostic::new(Structure, &n.id, "no outgoing flow"));
        }
    }

    // Reachability; boundary events are reachable through their host.
    if let [start] = starts.as_slice() {
        let mut seen = BTreeSet::from([start.id.as_str()]);
        let mut queue = VecDeque::from([start.id.as_str()]);
        while let Some(id) = queue.pop_front() {
            let next = def
                .outgoing(id)
                .map(|f| f.target.as_str())
                .chain(def.boundaries_of(id).map(|b| b.id.as_str()));
            for t in next.collect::<Vec<_>>() {
                if kinds.contains_key(t) && seen.insert(t) {
                    queue.push_back(t);
                }
            }
        }
        for n in &def.nodes {
            if !seen.contains(n.id.as_str()) {
                out.push(Diagnostic::new(Structure, &n.id, "not reachable from the start event"));
            }
        }
    }
    out
}

/// Full check. With a registry, capability bindings are resolved as well.
pub fn validate_process(def: &ProcessDefinition, registry: Option<&Registry>) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut out = structural_diagnostics(def);

    for n in &def.nodes {
        match &n.kind {
            NodeKind::ExclusiveGateway { default_flow } => {
                let unconditioned = def
                    .outgoing(&n.id)
                    .filter(|f| f.condition.is_none() && Some(&f.id) != default_flow.as_ref())
                    .count();
                if unconditioned >= 2 {
                    out.push(Diagnostic::new(
                        AmbiguousGateway,
                        &n.id,
                        format!("{unconditioned} outgoing flows without condition"),
                    ));
                }
            }
            NodeKind::UserTask { form_fields } => {
                let mut names = BTreeSet::new();
                for f in form_fields {
                    if !is_identifier(&f.name) || !names.insert(f.name.as_str()) {
                        out.push(Diagnostic::new(
                            InvalidExpression,
                            &n.id,
                            format!("form field {:?} is not a unique identifier", f.name),
                        ));
                    }
                }
            }
            NodeKind::SendTask { subject, body } => {
                for t in [subject, body] {
                    if let Err(e) = parse_template(t) {
                        out.push(Diagnostic::new(InvalidExpression, &n.id, e.to_string()));
                    }
                }
            }
            NodeKind::CapabilityTask { binding: None } => {
                out.push(Diagnostic::new(MissingBinding, &n.id, "service task has no capability"));
            }
            NodeKind::CapabilityTask { binding: Some(b) } => {
                for var in b.output_mappings.values() {
                    if !is_identifier(var) {
                        out.push(Diagnostic::new(
                            InvalidExpression,
                            &n.id,
                            format!("output variable {var:?} is not an identifier"),
                        ));
                    }
                }
                let Some(reg) = registry else { continue };
                let Some(cap) = reg.capability(&b.capability_iri) else {
                    out.push(Diagnostic::new(
                        UnknownCapability,
                        &n.id,
                        format!("capability {} is not registered", b.capability_iri),
                    ));
                    continue;
                };
                for (prop_iri, value) in &b.input_assignments {
                    let Some(prop) = cap.input(prop_iri) else {
                        out.push(Diagnostic::new(
                            UnknownProperty,
                            &n.id,
                            format!("{prop_iri} is not an input of {}", cap.iri),
                        ));
                        continue;
                    };
                    if let ValueExpr::Constant(v) = value {
                        match prop.check_constraint(v) {
                            Err(_) => out.push(Diagnostic::new(
                                DatatypeMismatch,
                                &n.id,
                                format!("{prop_iri} expects {}, got {}", prop.datatype, v.datatype()),
                            )),
                            Ok(ConstraintResult::Violated(bound)) => out.push(Diagnostic::new(
                                ConstraintViolated,
                                &n.id,
                                format!("{prop_iri} = {v} violates {bound}"),
                            )),
                            Ok(ConstraintResult::Satisfied) => {}
                        }
                    }
                }
                for prop_iri in b.output_mappings.keys() {
                    if cap.output(prop_iri).is_none() {
                        out.push(Diagnostic::new(
                            UnknownProperty,
                            &n.id,
                            format!("{prop_iri} is not an output of {}", cap.iri),
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::expr::parse_condition;
    use crate::model::{FlowNode, SequenceFlow};

    fn gateway_def(conditions: [Option<&str>; 2], default: Option<&str>) -> ProcessDefinition {
        let mut d = ProcessDefinition::new("g");
        d.nodes = vec![
            FlowNode::new("s", NodeKind::StartEvent),
            FlowNode::new(
                "gw",
                NodeKind::ExclusiveGateway {
                    default_flow: default.map(str::to_owned),
                },
            ),
            FlowNode::new("e1", NodeKind::EndEvent),
            FlowNode::new("e2", NodeKind::EndEvent),
        ];
        let mut a = SequenceFlow::new("a", "gw", "e1");
        a.condition = conditions[0].map(|c| parse_condition(c).unwrap());
        let mut b = SequenceFlow::new("b", "gw", "e2");
        b.condition = conditions[1].map(|c| parse_condition(c).unwrap());
        d.flows = vec![SequenceFlow::new("f0", "s", "gw"), a, b];
        d
    }

    #[test]
    fn ambiguous_gateway() {
        let diags = validate_process(&gateway_def([None, None], None), None);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::AmbiguousGateway);
        assert!(validate_process(&gateway_def([None, None], Some("b")), None).is_empty());
        assert!(validate_process(&gateway_def([Some("${x}"), None], None), None).is_empty());
    }

    #[test]
    fn structural_violations() {
        let mut d = gateway_def([Some("${x}"), None], None);
        d.nodes.push(FlowNode::new("lost", NodeKind::EndEvent));
        d.nodes.push(FlowNode::new("s2", NodeKind::StartEvent));
        d.flows.push(SequenceFlow::new("bad", "s2", "ghost"));
        let kinds: Vec<_> = structural_diagnostics(&d).into_iter().map(|x| x.message).collect();
        assert!(kinds.iter().any(|m| m.contains("exactly one start")), "{kinds:?}");
        assert!(kinds.iter().any(|m| m.contains("unknown target ghost")), "{kinds:?}");

        let mut d = gateway_def([Some("${x}"), None], Some("a"));
        assert!(structural_diagnostics(&d)
            .iter()
            .any(|x| x.message.contains("default flow carries a condition")));
        d.nodes[1].kind = NodeKind::ExclusiveGateway {
            default_flow: Some("f0".into()),
        };
        assert!(structural_diagnostics(&d)
            .iter()
            .any(|x| x.message.contains("not an outgoing flow")));
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("Activity_6k239cs_NoOfHoles"));
        assert!(is_identifier("_x1"));
        assert!(!is_identifier("1x"));
        assert!(!is_identifier("and"));
        assert!(!is_identifier("a-b"));
    }
}
