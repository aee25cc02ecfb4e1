mod common;

use common::{festo_registry, fixture};
use proptest::prelude::*;
use skillflow_core::model::{
    parse_process, parse_value_expr, serialize_process, validate_process, CapabilityBinding, Expr, FlowNode,
    FormField, IsoDuration, NodeKind, ProcessDefinition, SequenceFlow, ValueExpr,
};
use skillflow_core::{Datatype, Value};

const FIXTURES: [&str; 5] = [
    "minimal.bpmn",
    "thermometer.bpmn",
    "parallel_timer.bpmn",
    "gateway_loop.bpmn",
    "constant_drill.bpmn",
];

fn assert_round_trip(def: &ProcessDefinition) {
    let first = serialize_process(def);
    let reparsed = parse_process(&first)
        .unwrap_or_else(|e| panic!("{e}\n{}", String::from_utf8_lossy(&first)));
    assert_eq!(&reparsed, def, "{}", String::from_utf8_lossy(&first));
    let second = serialize_process(&reparsed);
    assert_eq!(first, second, "serialization is not deterministic");
}

#[test]
fn fixtures_round_trip() {
    for name in FIXTURES {
        let def = parse_process(&fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_round_trip(&def);
    }
}

#[test]
fn thermometer_shape_and_validity() {
    let def = parse_process(&fixture("thermometer.bpmn")).unwrap();
    assert_eq!(def.nodes.len(), 12);
    assert_eq!(def.flows.len(), 10);
    assert!(def.diagram.as_deref().unwrap().contains("Shape_UserTask"));
    assert_eq!(validate_process(&def, Some(&festo_registry())), []);
    let xml = String::from_utf8(serialize_process(&def)).unwrap();
    assert!(xml.contains(r#"value="${Activity_6k239cs_NoOfHoles}""#));
}

#[test]
fn every_fixture_is_valid_against_the_registry() {
    let registry = festo_registry();
    for name in FIXTURES {
        let def = parse_process(&fixture(name)).unwrap();
        assert_eq!(validate_process(&def, Some(&registry)), [], "{name}");
    }
}

#[test]
fn unnamed_process_omits_the_name_attribute() {
    let mut def = parse_process(&fixture("minimal.bpmn")).unwrap();
    def.name = String::new();
    let xml = String::from_utf8(serialize_process(&def)).unwrap();
    let process_line = xml.lines().find(|l| l.contains("<bpmn:process")).unwrap();
    assert!(!process_line.contains("name="), "{process_line}");
}

// ---------------------------------------------------------------------------
// Random definitions

fn text() -> impl Strategy<Value = String> {
    // Markup characters and quotes exercise escaping.
    "[A-Za-z][A-Za-z0-9 &<>\"'_.-]{0,12}"
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][A-Za-z0-9_]{0,8}".prop_filter("keywords", |s| !["and", "or", "not", "true", "false"].contains(&s.as_str()))
}

fn constant() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i32>().prop_map(|i| Value::Integer(i as i64)),
        (-1000i32..1000, 1u8..100).prop_map(|(a, b)| Value::Real(a as f64 + b as f64 / 100.0)),
        any::<bool>().prop_map(Value::Boolean),
        "[A-Za-z][A-Za-z &<>_]{0,10}"
            .prop_filter("not a keyword", |s| s != "true" && s != "false")
            .prop_map(Value::String),
    ]
}

fn expression() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        ident().prop_map(Expr::Var),
        (-50i64..50).prop_map(|i| Expr::Literal(Value::Integer(i))),
    ];
    leaf.prop_recursive(3, 12, 2, |inner| {
        (inner.clone(), inner, 0usize..6).prop_map(|(l, r, k)| {
            let src = format!("({l}) {} ({r})", ["+", "*", "<", "==", "-", "/"][k]);
            skillflow_core::model::parse_expr(&src).unwrap()
        })
    })
}

fn value_expr() -> impl Strategy<Value = ValueExpr> {
    prop_oneof![
        constant().prop_map(ValueExpr::Constant),
        expression().prop_map(|e| parse_value_expr(&format!("${{{e}}}")).unwrap()),
    ]
}

#[derive(Debug, Clone)]
enum Step {
    User(Vec<(String, Datatype)>),
    Send(String, String),
    Capability(Vec<(String, ValueExpr)>, Vec<(String, String)>, Option<Option<String>>),
    Timer(u64),
    Exclusive(Expr),
}

fn datatype() -> impl Strategy<Value = Datatype> {
    prop_oneof![
        Just(Datatype::Integer),
        Just(Datatype::Real),
        Just(Datatype::Boolean),
        Just(Datatype::String)
    ]
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        prop::collection::vec((ident(), datatype()), 0..3).prop_map(|mut f| {
            f.sort();
            f.dedup_by(|a, b| a.0 == b.0);
            Step::User(f)
        }),
        (text(), prop_oneof![text(), ident().prop_map(|v| format!("value ${{{v}}} & more"))])
            .prop_map(|(s, b)| Step::Send(s, b)),
        (
            prop::collection::btree_map(ident(), value_expr(), 0..3),
            prop::collection::btree_map(ident(), ident(), 0..2),
            proptest::option::of(proptest::option::of(prop_oneof![
                Just("SkillAborted".to_owned()),
                Just("SkillStopped".to_owned())
            ])),
        )
            .prop_map(|(i, o, b)| Step::Capability(i.into_iter().collect(), o.into_iter().collect(), b)),
        (0u64..100_000).prop_map(Step::Timer),
        expression().prop_map(Step::Exclusive),
    ]
}

/// A chain start → steps → end. Exclusive gateways get a conditioned flow to
/// the next step and a default flow to an extra end; capability tasks may
/// carry a boundary event leading to another end.
fn build(name: String, steps: Vec<Step>, with_diagram: bool) -> ProcessDefinition {
    let mut def = ProcessDefinition::new("Process_Random");
    def.name = name;
    def.nodes.push(FlowNode::new("Start", NodeKind::StartEvent).named("Begin & go"));
    let mut prev = "Start".to_owned();
    let mut extra = Vec::new();
    let mut flows = Vec::new();
    // Condition for the next flow leaving an exclusive gateway.
    let mut pending_condition: Option<Expr> = None;
    let link = |flows: &mut Vec<SequenceFlow>, id: String, from: &str, to: &str, cond: Option<Expr>| {
        let mut f = SequenceFlow::new(id, from, to);
        f.condition = cond;
        flows.push(f);
    };
    for (i, s) in steps.into_iter().enumerate() {
        let id = format!("N{i}");
        let mut condition = None;
        let kind = match s {
            Step::User(fields) => NodeKind::UserTask {
                form_fields: fields
                    .into_iter()
                    .map(|(name, datatype)| FormField { name, datatype })
                    .collect(),
            },
            Step::Send(subject, body) => NodeKind::SendTask { subject, body },
            Step::Capability(inputs, outputs, boundary) => {
                let mut b = CapabilityBinding::new(format!("urn:cap:{i}"));
                for (p, v) in inputs {
                    b = b.input(format!("urn:prop:{p}"), v);
                }
                for (p, v) in outputs {
                    b = b.output(format!("urn:prop:out:{p}"), v);
                }
                if let Some(code) = boundary {
                    let bid = format!("B{i}");
                    extra.push(FlowNode::new(
                        bid.clone(),
                        NodeKind::BoundaryErrorEvent {
                            attached_to: id.clone(),
                            error_code: code,
                        },
                    ));
                    extra.push(FlowNode::new(format!("E{i}"), NodeKind::EndEvent));
                    flows.push(SequenceFlow::new(format!("FB{i}"), bid, format!("E{i}")));
                }
                NodeKind::CapabilityTask { binding: Some(b) }
            }
            Step::Timer(ms) => NodeKind::TimerCatchEvent {
                duration: IsoDuration::from_millis(ms),
            },
            Step::Exclusive(cond) => {
                let default = format!("FD{i}");
                extra.push(FlowNode::new(format!("E{i}"), NodeKind::EndEvent));
                flows.push(SequenceFlow::new(default.clone(), id.clone(), format!("E{i}")));
                condition = Some(cond);
                NodeKind::ExclusiveGateway {
                    default_flow: Some(default),
                }
            }
        };
        def.nodes.push(FlowNode::new(id.clone(), kind));
        link(&mut flows, format!("F{i}"), &prev, &id, pending_condition.take());
        pending_condition = condition;
        prev = id;
    }
    link(&mut flows, "FEnd".to_owned(), &prev, "End", pending_condition.take());
    def.nodes.push(FlowNode::new("End", NodeKind::EndEvent));
    def.nodes.extend(extra);
    def.flows = flows;
    if with_diagram {
        def.diagram = Some(r#"<bpmndi:BPMNDiagram id="D"><bpmndi:BPMNPlane id="P" bpmnElement="Process_Random" /></bpmndi:BPMNDiagram>"#.to_owned());
    }
    def
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_definitions_round_trip(
        name in prop_oneof![Just(String::new()), text()],
        steps in prop::collection::vec(step(), 0..6),
        diagram in any::<bool>(),
    ) {
        let def = build(name, steps, diagram);
        let diags = validate_process(&def, None);
        prop_assert!(diags.is_empty(), "{:?}", diags);
        let xml = serialize_process(&def);
        let reparsed = parse_process(&xml).map_err(|e| TestCaseError::fail(format!("{e}\n{}", String::from_utf8_lossy(&xml))))?;
        prop_assert_eq!(serialize_process(&reparsed), xml.clone());
        prop_assert_eq!(reparsed, def);
    }
}
