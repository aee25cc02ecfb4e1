//! BPMN 2.0 XML for capability processes.
//!
//! Capability bindings live in the `urn:skillflow:capability` namespace under
//! `bpmn:extensionElements`:
//!
//! ```xml
//! <bpmn:serviceTask id="Drill">
//!   <bpmn:extensionElements>
//!     <cap:capability iri="urn:festo:cap:Drilling">
//!       <cap:input property="urn:festo:prop:NoOfHoles" value="${Activity_6k239cs_NoOfHoles}"/>
//!       <cap:output property="urn:festo:prop:DrillDuration" variable="drillDuration"/>
//!     </cap:capability>
//!   </bpmn:extensionElements>
//! </bpmn:serviceTask>
//! ```
//!
//! User task forms use `<cap:formField name=".." datatype=".."/>` and send
//! tasks `<cap:notification subject="..">body</cap:notification>`. Anything
//! outside the supported subset is rejected.

use std::collections::BTreeMap;

use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::name::ResolveResult;
use quick_xml::NsReader;

use super::expr::{parse_condition, parse_value_expr};
use super::validate::structural_diagnostics;
use super::{
    CapabilityBinding, FlowNode, FormField, IsoDuration, ModelError, NodeKind, ProcessDefinition,
    SequenceFlow,
};
use crate::value::Datatype;

pub const BPMN_NS: &str = "http://www.omg.org/spec/BPMN/20100524/MODEL";
pub const BPMNDI_NS: &str = "http://www.omg.org/spec/BPMN/20100524/DI";
pub const DC_NS: &str = "http://www.omg.org/spec/DD/20100524/DC";
pub const DI_NS: &str = "http://www.omg.org/spec/DD/20100524/DI";
pub const CAP_NS: &str = "urn:skillflow:capability";
pub const XSI_NS: &str = "http://www.w3.org/2001/XMLSchema-instance";

#[derive(Debug, Default)]
struct Elem {
    ns: Option<String>,
    local: String,
    qname: String,
    attrs: Vec<(Option<String>, String, String)>,
    children: Vec<Elem>,
    text: String,
    span: (usize, usize),
}

impl Elem {
    fn is(&self, ns: &str, local: &str) -> bool {
        self.ns.as_deref() == Some(ns) && self.local == local
    }

    fn attr(&self, local: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(ns, l, _)| ns.is_none() && l == local)
            .map(|(_, _, v)| v.as_str())
    }

    fn required(&self, local: &str) -> Result<&str, ModelError> {
        self.attr(local).ok_or_else(|| {
            ModelError::Structure(format!("{} is missing attribute {local}", self.qname))
        })
    }

    fn unsupported(&self) -> ModelError {
        ModelError::UnsupportedElement(self.qname.clone())
    }
}

fn xml_err(e: impl std::fmt::Display) -> ModelError {
    ModelError::Xml(e.to_string())
}

fn resolve(r: ResolveResult) -> Option<String> {
    match r {
        ResolveResult::Bound(ns) => Some(String::from_utf8_lossy(ns.as_ref()).into_owned()),
        _ => None,
    }
}

fn read_dom(src: &str) -> Result<Elem, ModelError> {
    let mut reader = NsReader::from_str(src);
    let mut stack: Vec<Elem> = Vec::new();
    let mut root: Option<Elem> = None;
    loop {
        let start = reader.buffer_position() as usize;
        let (ns, event) = reader.read_resolved_event().map_err(xml_err)?;
        let ns = resolve(ns);
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let mut elem = Elem {
                    ns,
                    local: String::from_utf8_lossy(e.local_name().as_ref()).into_owned(),
                    qname: String::from_utf8_lossy(e.name().as_ref()).into_owned(),
                    span: (start, start),
                    ..Default::default()
                };
                for attr in e.attributes() {
                    let attr = attr.map_err(xml_err)?;
                    let key = attr.key;
                    if key.as_namespace_binding().is_some() {
                        continue;
                    }
                    let (ans, local) = reader.resolve_attribute(key);
                    let value = attr
                        .decode_and_unescape_value(reader.decoder())
                        .map_err(xml_err)?
                        .into_owned();
                    elem.attrs.push((
                        resolve(ans),
                        String::from_utf8_lossy(local.as_ref()).into_owned(),
                        value,
                    ));
                }
                if matches!(event, Event::Start(_)) {
                    stack.push(elem);
                } else {
                    elem.span.1 = reader.buffer_position() as usize;
                    match stack.last_mut() {
                        Some(parent) => parent.children.push(elem),
                        None if root.is_none() => root = Some(elem),
                        None => return Err(xml_err("multiple root elements")),
                    }
                }
            }
            Event::End(_) => {
                let mut elem = stack.pop().ok_or_else(|| xml_err("unbalanced end tag"))?;
                elem.span.1 = reader.buffer_position() as usize;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(elem),
                    None if root.is_none() => root = Some(elem),
                    None => return Err(xml_err("multiple root elements")),
                }
            }
            Event::Text(t) => {
                if let Some(top) = stack.last_mut() {
                    top.text.push_str(&t.unescape().map_err(xml_err)?);
                } else if !t.iter().all(u8::is_ascii_whitespace) {
                    return Err(xml_err("text outside the root element"));
                }
            }
            Event::CData(c) => {
                if let Some(top) = stack.last_mut() {
                    top.text.push_str(&String::from_utf8_lossy(&c.into_inner()));
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(xml_err("unexpected end of document"));
    }
    root.ok_or_else(|| xml_err("empty document"))
}

/// Parses a capability process from BPMN XML.
pub fn parse_process(xml: &[u8]) -> Result<ProcessDefinition, ModelError> {
    let src = std::str::from_utf8(xml).map_err(xml_err)?;
    let root = read_dom(src)?;
    if !root.is(BPMN_NS, "definitions") {
        return Err(root.unsupported());
    }

    let mut errors: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut processes = Vec::new();
    let mut diagrams = Vec::new();
    for child in &root.children {
        if child.is(BPMN_NS, "process") {
            processes.push(child);
        } else if child.is(BPMN_NS, "error") {
            errors.insert(
                child.required("id")?.to_owned(),
                child.attr("errorCode").map(str::to_owned),
            );
        } else if child.is(BPMNDI_NS, "BPMNDiagram") {
            diagrams.push(&src[child.span.0..child.span.1]);
        } else {
            return Err(child.unsupported());
        }
    }
    let [process] = processes.as_slice() else {
        return Err(ModelError::Structure(format!(
            "expected exactly one process, found {}",
            processes.len()
        )));
    };

    let mut def = ProcessDefinition::new(process.required("id")?);
    def.name = process.attr("name").unwrap_or_default().to_owned();
    def.diagram = (!diagrams.is_empty()).then(|| diagrams.join("\n"));

    for el in &process.children {
        if el.is(BPMN_NS, "sequenceFlow") {
            def.flows.push(parse_flow(el)?);
        } else {
            def.nodes.push(parse_node(el, &errors)?);
        }
    }

    if let Some(first) = structural_diagnostics(&def).into_iter().next() {
        return Err(ModelError::Structure(first.to_string()));
    }
    Ok(def)
}

fn parse_flow(el: &Elem) -> Result<SequenceFlow, ModelError> {
    let mut flow = SequenceFlow::new(
        el.required("id")?,
        el.required("sourceRef")?,
        el.required("targetRef")?,
    );
    flow.name = el.attr("name").map(str::to_owned);
    for c in &el.children {
        if c.is(BPMN_NS, "conditionExpression") {
            let cond = parse_condition(&c.text).map_err(|e| {
                ModelError::Structure(format!("condition of {}: {e}", flow.id))
            })?;
            flow.condition = Some(cond);
        } else {
            return Err(c.unsupported());
        }
    }
    Ok(flow)
}

/// Children every flow node may carry; they are derived from the flows.
fn is_flow_ref(c: &Elem) -> bool {
    c.is(BPMN_NS, "incoming") || c.is(BPMN_NS, "outgoing")
}

fn extension_children<'a>(
    el: &'a Elem,
) -> Result<impl Iterator<Item = &'a Elem> + 'a, ModelError> {
    for c in &el.children {
        if !is_flow_ref(c) && !c.is(BPMN_NS, "extensionElements") {
            return Err(c.unsupported());
        }
    }
    Ok(el
        .children
        .iter()
        .filter(|c| c.is(BPMN_NS, "extensionElements"))
        .flat_map(|c| c.children.iter()))
}

fn no_children(el: &Elem) -> Result<(), ModelError> {
    match el.children.iter().find(|c| !is_flow_ref(c)) {
        Some(c) => Err(c.unsupported()),
        None => Ok(()),
    }
}

fn parse_node(
    el: &Elem,
    errors: &BTreeMap<String, Option<String>>,
) -> Result<FlowNode, ModelError> {
    if el.ns.as_deref() != Some(BPMN_NS) {
        return Err(el.unsupported());
    }
    let kind = match el.local.as_str() {
        "startEvent" => {
            no_children(el)?;
            NodeKind::StartEvent
        }
        "endEvent" => {
            no_children(el)?;
            NodeKind::EndEvent
        }
        "parallelGateway" => {
            no_children(el)?;
            NodeKind::ParallelGateway
        }
        "exclusiveGateway" => {
            no_children(el)?;
            NodeKind::ExclusiveGateway {
                default_flow: el.attr("default").map(str::to_owned),
            }
        }
        "userTask" => {
            let mut form_fields = Vec::new();
            for c in extension_children(el)? {
                if !c.is(CAP_NS, "formField") {
                    return Err(c.unsupported());
                }
                let dt = c.required("datatype")?;
                form_fields.push(FormField {
                    name: c.required("name")?.to_owned(),
                    datatype: Datatype::parse(dt)
                        .ok_or_else(|| ModelError::Structure(format!("unknown datatype {dt}")))?,
                });
            }
            NodeKind::UserTask { form_fields }
        }
        "sendTask" => {
            let mut message = None;
            for c in extension_children(el)? {
                if !c.is(CAP_NS, "notification") || message.is_some() {
                    return Err(c.unsupported());
                }
                message = Some((c.attr("subject").unwrap_or_default().to_owned(), c.text.clone()));
            }
            let (subject, body) = message.unwrap_or_default();
            NodeKind::SendTask { subject, body }
        }
        "serviceTask" => {
            let mut binding = None;
            for c in extension_children(el)? {
                if !c.is(CAP_NS, "capability") || binding.is_some() {
                    return Err(c.unsupported());
                }
                binding = Some(parse_binding(c)?);
            }
            NodeKind::CapabilityTask { binding }
        }
        "intermediateCatchEvent" => {
            let mut duration = None;
            for c in el.children.iter().filter(|c| !is_flow_ref(c)) {
                if !c.is(BPMN_NS, "timerEventDefinition") || duration.is_some() {
                    return Err(c.unsupported());
                }
                let [d] = c.children.as_slice() else {
                    return Err(ModelError::Structure(format!(
                        "timer {} needs exactly one timeDuration",
                        el.attr("id").unwrap_or_default()
                    )));
                };
                if !d.is(BPMN_NS, "timeDuration") {
                    return Err(d.unsupported());
                }
                duration = Some(IsoDuration::parse(d.text.trim()).map_err(ModelError::Structure)?);
            }
            let duration = duration.ok_or_else(|| el.unsupported())?;
            NodeKind::TimerCatchEvent { duration }
        }
        "boundaryEvent" => {
            if el.attr("cancelActivity") == Some("false") {
                return Err(ModelError::UnsupportedElement(format!(
                    "{} (non-interrupting)",
                    el.qname
                )));
            }
            let mut code = None;
            for c in el.children.iter().filter(|c| !is_flow_ref(c)) {
                if !c.is(BPMN_NS, "errorEventDefinition") || code.is_some() {
                    return Err(c.unsupported());
                }
                code = Some(match c.attr("errorRef") {
                    None => None,
                    Some(r) => errors
                        .get(r)
                        .ok_or_else(|| ModelError::Structure(format!("unknown error {r}")))?
                        .clone(),
                });
            }
            let error_code = code.ok_or_else(|| el.unsupported())?;
            NodeKind::BoundaryErrorEvent {
                attached_to: el.required("attachedToRef")?.to_owned(),
                error_code,
            }
        }
        _ => return Err(el.unsupported()),
    };
    Ok(FlowNode {
        id: el.required("id")?.to_owned(),
        name: el.attr("name").map(str::to_owned),
        kind,
    })
}

fn parse_binding(el: &Elem) -> Result<CapabilityBinding, ModelError> {
    let mut b = CapabilityBinding::new(el.required("iri")?);
    for c in &el.children {
        if c.is(CAP_NS, "input") {
            let prop = c.required("property")?;
            let raw = c.required("value")?;
            let value = parse_value_expr(raw)
                .map_err(|e| ModelError::Structure(format!("value of {prop}: {e}")))?;
            b.input_assignments.insert(prop.to_owned(), value);
        } else if c.is(CAP_NS, "output") {
            b.output_mappings.insert(
                c.required("property")?.to_owned(),
                c.required("variable")?.to_owned(),
            );
        } else {
            return Err(c.unsupported());
        }
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// Writer

struct Out {
    buf: String,
}

impl Out {
    fn line(&mut self, depth: usize, s: &str) {
        for _ in 0..depth {
            self.buf.push_str("  ");
        }
        self.buf.push_str(s);
        self.buf.push('\n');
    }
}

fn attrs(pairs: &[(&str, Option<&str>)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        if let Some(v) = v {
            s.push(' ');
            s.push_str(k);
            s.push_str("=\"");
            s.push_str(&escape(*v));
            s.push('"');
        }
    }
    s
}

/// Assigns stable element ids to the distinct error codes used by boundary events.
fn error_ids(def: &ProcessDefinition) -> BTreeMap<String, String> {
    let mut ids = BTreeMap::new();
    let mut taken = std::collections::BTreeSet::new();
    for n in &def.nodes {
        if let NodeKind::BoundaryErrorEvent {
            error_code: Some(code),
            ..
        } = &n.kind
        {
            ids.entry(code.clone()).or_insert_with(String::new);
        }
    }
    for (code, id) in ids.iter_mut() {
        let base: String = code
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
            .collect();
        let mut candidate = format!("Error_{base}");
        let mut n = 1;
        while !taken.insert(candidate.clone()) {
            n += 1;
            candidate = format!("Error_{base}_{n}");
        }
        *id = candidate;
    }
    ids
}

/// Serializes a definition. Output is deterministic: nodes, then flows, in
/// definition order, two-space indentation.
pub fn serialize_process(def: &ProcessDefinition) -> Vec<u8> {
    let mut out = Out { buf: String::new() };
    out.line(0, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let defs_id = format!("Definitions_{}", def.id);
    let mut root = vec![
        ("xmlns:bpmn", Some(BPMN_NS)),
        ("xmlns:cap", Some(CAP_NS)),
        ("xmlns:xsi", Some(XSI_NS)),
    ];
    if def.diagram.is_some() {
        root.extend([
            ("xmlns:bpmndi", Some(BPMNDI_NS)),
            ("xmlns:dc", Some(DC_NS)),
            ("xmlns:di", Some(DI_NS)),
        ]);
    }
    root.extend([
        ("id", Some(defs_id.as_str())),
        ("targetNamespace", Some("urn:skillflow:processes")),
    ]);
    out.line(0, &format!("<bpmn:definitions{}>", attrs(&root)));

    let errors = error_ids(def);
    for (code, id) in &errors {
        out.line(
            1,
            &format!(
                "<bpmn:error{} />",
                attrs(&[("id", Some(id)), ("name", Some(code)), ("errorCode", Some(code))])
            ),
        );
    }

    let name = (!def.name.is_empty()).then_some(def.name.as_str());
    out.line(
        1,
        &format!(
            "<bpmn:process{}>",
            attrs(&[("id", Some(&def.id)), ("name", name), ("isExecutable", Some("true"))])
        ),
    );
    for node in &def.nodes {
        write_node(&mut out, def, node, &errors);
    }
    for flow in &def.flows {
        let head = attrs(&[
            ("id", Some(&flow.id)),
            ("name", flow.name.as_deref()),
            ("sourceRef", Some(&flow.source)),
            ("targetRef", Some(&flow.target)),
        ]);
        match &flow.condition {
            None => out.line(2, &format!("<bpmn:sequenceFlow{head} />")),
            Some(c) => {
                out.line(2, &format!("<bpmn:sequenceFlow{head}>"));
                out.line(
                    3,
                    &format!(
                        "<bpmn:conditionExpression xsi:type=\"bpmn:tFormalExpression\">{}</bpmn:conditionExpression>",
                        escape(format!("${{{c}}}").as_str())
                    ),
                );
                out.line(2, "</bpmn:sequenceFlow>");
            }
        }
    }
    out.line(1, "</bpmn:process>");
    if let Some(di) = &def.diagram {
        out.buf.push_str("  ");
        out.buf.push_str(di);
        out.buf.push('\n');
    }
    out.line(0, "</bpmn:definitions>");
    out.buf.into_bytes()
}

fn write_node(
    out: &mut Out,
    def: &ProcessDefinition,
    node: &FlowNode,
    errors: &BTreeMap<String, String>,
) {
    let tag = format!("bpmn:{}", node.kind.label());
    let mut head = vec![("id", Some(node.id.as_str())), ("name", node.name.as_deref())];
    match &node.kind {
        NodeKind::ExclusiveGateway { default_flow } => head.push(("default", default_flow.as_deref())),
        NodeKind::BoundaryErrorEvent { attached_to, .. } => {
            head.push(("attachedToRef", Some(attached_to)))
        }
        _ => {}
    }
    let mut body: Vec<(usize, String)> = Vec::new();
    for f in def.incoming(&node.id) {
        body.push((0, format!("<bpmn:incoming>{}</bpmn:incoming>", escape(f.id.as_str()))));
    }
    for f in def.outgoing(&node.id) {
        body.push((0, format!("<bpmn:outgoing>{}</bpmn:outgoing>", escape(f.id.as_str()))));
    }
    match &node.kind {
        NodeKind::UserTask { form_fields } if !form_fields.is_empty() => {
            body.insert(0, (0, "<bpmn:extensionElements>".into()));
            let mut at = 1;
            for f in form_fields {
                body.insert(
                    at,
                    (
                        1,
                        format!(
                            "<cap:formField{} />",
                            attrs(&[("name", Some(&f.name)), ("datatype", Some(f.datatype.as_str()))])
                        ),
                    ),
                );
                at += 1;
            }
            body.insert(at, (0, "</bpmn:extensionElements>".into()));
        }
        NodeKind::SendTask { subject, body: text } => {
            let ext = [
                (0, "<bpmn:extensionElements>".to_owned()),
                (
                    1,
                    format!(
                        "<cap:notification{}>{}</cap:notification>",
                        attrs(&[("subject", Some(subject))]),
                        escape(text.as_str())
                    ),
                ),
                (0, "</bpmn:extensionElements>".to_owned()),
            ];
            body.splice(0..0, ext);
        }
        NodeKind::CapabilityTask { binding: Some(b) } => {
            let mut ext = vec![
                (0, "<bpmn:extensionElements>".to_owned()),
                (1, format!("<cap:capability{}>", attrs(&[("iri", Some(&b.capability_iri))]))),
            ];
            for (prop, value) in &b.input_assignments {
                let text = value.to_text();
                ext.push((
                    2,
                    format!(
                        "<cap:input{} />",
                        attrs(&[("property", Some(prop)), ("value", Some(&text))])
                    ),
                ));
            }
            for (prop, var) in &b.output_mappings {
                ext.push((
                    2,
                    format!(
                        "<cap:output{} />",
                        attrs(&[("property", Some(prop)), ("variable", Some(var))])
                    ),
                ));
            }
            ext.push((1, "</cap:capability>".to_owned()));
            ext.push((0, "</bpmn:extensionElements>".to_owned()));
            body.splice(0..0, ext);
        }
        NodeKind::TimerCatchEvent { duration } => body.push((
            0,
            format!(
                "<bpmn:timerEventDefinition><bpmn:timeDuration xsi:type=\"bpmn:tFormalExpression\">{}</bpmn:timeDuration></bpmn:timerEventDefinition>",
                escape(duration.as_str())
            ),
        )),
        NodeKind::BoundaryErrorEvent { error_code, .. } => {
            let r = error_code.as_ref().map(|c| errors[c].as_str());
            body.push((0, format!("<bpmn:errorEventDefinition{} />", attrs(&[("errorRef", r)]))));
        }
        _ => {}
    }
    if body.is_empty() {
        out.line(2, &format!("<{tag}{} />", attrs(&head)));
    } else {
        out.line(2, &format!("<{tag}{}>", attrs(&head)));
        for (depth, line) in body {
            out.line(3 + depth, &line);
        }
        out.line(2, &format!("</{tag}>"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="http://www.omg.org/spec/BPMN/20100524/MODEL" id="d">
  <bpmn:process id="p" isExecutable="true">
    <bpmn:startEvent id="s"><bpmn:outgoing>f</bpmn:outgoing></bpmn:startEvent>
    <bpmn:sequenceFlow id="f" sourceRef="s" targetRef="e" />
    <bpmn:endEvent id="e" />
  </bpmn:process>
</bpmn:definitions>"#;

    #[test]
    fn minimal_process() {
        let d = parse_process(MINIMAL.as_bytes()).unwrap();
        assert_eq!(d.nodes.len(), 2);
        assert_eq!(d.flows.len(), 1);
        assert_eq!(d.name, "");
        let xml = String::from_utf8(serialize_process(&d)).unwrap();
        assert!(xml.contains(r#"<bpmn:process id="p" isExecutable="true">"#), "{xml}");
        assert_eq!(parse_process(xml.as_bytes()).unwrap(), d);
    }

    #[test]
    fn prefix_is_irrelevant() {
        let other = MINIMAL
            .replace("bpmn:", "semantic:")
            .replace("xmlns:bpmn=", "xmlns:semantic=");
        assert_eq!(
            parse_process(other.as_bytes()).unwrap(),
            parse_process(MINIMAL.as_bytes()).unwrap()
        );
    }

    #[test]
    fn unsupported_elements_are_rejected() {
        let collab = MINIMAL.replace(
            "<bpmn:process",
            r#"<bpmn:collaboration id="c"><bpmn:participant id="x" processRef="p"/></bpmn:collaboration><bpmn:process"#,
        );
        assert_eq!(
            parse_process(collab.as_bytes()),
            Err(ModelError::UnsupportedElement("bpmn:collaboration".into()))
        );
        let script = MINIMAL.replace(r#"<bpmn:endEvent id="e" />"#, r#"<bpmn:endEvent id="e" /><bpmn:scriptTask id="x"/>"#);
        assert_eq!(
            parse_process(script.as_bytes()),
            Err(ModelError::UnsupportedElement("bpmn:scriptTask".into()))
        );
    }

    #[test]
    fn malformed_xml() {
        assert!(matches!(parse_process(b"<bpmn:definitions"), Err(ModelError::Xml(_))));
        assert!(matches!(
            parse_process(MINIMAL.replace("</bpmn:process>", "").as_bytes()),
            Err(ModelError::Xml(_))
        ));
    }

    #[test]
    fn structure_errors() {
        let no_end = MINIMAL
            .replace(r#"<bpmn:endEvent id="e" />"#, r#"<bpmn:parallelGateway id="e" />"#);
        assert!(matches!(parse_process(no_end.as_bytes()), Err(ModelError::Structure(_))));
    }
}
