//! Brute-force token interpreter for gateway graphs.
//!
//! Graphs contain a start event, end events, exclusive and parallel gateways
//! and no-op tasks. The interpreter explores every order in which pending
//! tokens can be processed and returns the set of reachable outcomes. For
//! graphs where no error is raised this set always has one element; a raised
//! error ends the run immediately, so what completed before it can depend on
//! the order.

use std::collections::{BTreeMap, BTreeSet};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use skillflow_core::engine::{Instance, InstanceStatus, PreparedPlan, EventKind};
use skillflow_core::model::{
    evaluate, validate_process, BinaryOp, Expr, FlowNode, NodeKind, ProcessDefinition, SequenceFlow,
    UnaryOp,
};
use skillflow_core::resolution::BindingPlan;
use skillflow_core::{Value, Variables};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EndStatus {
    Completed,
    Faulted,
    /// Tokens left waiting at a join that can never fire.
    Stuck,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Outcome {
    pub completed: BTreeSet<String>,
    pub status: EndStatus,
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct State {
    /// (node, incoming flow) → number of tokens in transit.
    pending: BTreeMap<(String, String), u32>,
    /// join node → incoming flow → tokens waiting there.
    waiting: BTreeMap<String, BTreeMap<String, u32>>,
    completed: BTreeSet<String>,
}

struct Graph<'a> {
    def: &'a ProcessDefinition,
    vars: &'a Variables,
}

enum Processed {
    Next(State),
    Fault(BTreeSet<String>),
}

impl Graph<'_> {
    fn kind(&self, node: &str) -> &NodeKind {
        &self.def.nodes.iter().find(|n| n.id == node).expect("node exists").kind
    }

    fn outgoing(&self, node: &str) -> Vec<&SequenceFlow> {
        self.def.flows.iter().filter(|f| f.source == node).collect()
    }

    fn incoming(&self, node: &str) -> Vec<&SequenceFlow> {
        self.def.flows.iter().filter(|f| f.target == node).collect()
    }

    fn emit(state: &mut State, flows: &[&SequenceFlow]) {
        for f in flows {
            *state.pending.entry((f.target.clone(), f.id.clone())).or_insert(0) += 1;
        }
    }

    /// Processes one token that travelled over `via` to `node`.
    fn process(&self, mut s: State, node: &str, via: &str) -> Processed {
        let key = (node.to_owned(), via.to_owned());
        let n = s.pending.get_mut(&key).expect("token present");
        *n -= 1;
        if *n == 0 {
            s.pending.remove(&key);
        }
        match self.kind(node) {
            NodeKind::EndEvent => {
                s.completed.insert(node.to_owned());
            }
            NodeKind::ExclusiveGateway { default_flow } => {
                let outs = self.outgoing(node);
                let mut chosen = None;
                for f in outs.iter().filter(|f| Some(&f.id) != default_flow.as_ref()) {
                    let enabled = match &f.condition {
                        None => true,
                        Some(c) => match evaluate(c, self.vars) {
                            Ok(Value::Boolean(b)) => b,
                            _ => return Processed::Fault(s.completed),
                        },
                    };
                    if enabled {
                        chosen = Some(*f);
                        break;
                    }
                }
                let chosen = chosen.or_else(|| {
                    default_flow
                        .as_ref()
                        .and_then(|d| outs.iter().copied().find(|f| &f.id == d))
                });
                let Some(f) = chosen else {
                    return Processed::Fault(s.completed);
                };
                s.completed.insert(node.to_owned());
                Self::emit(&mut s, &[f]);
            }
            NodeKind::ParallelGateway if self.incoming(node).len() > 1 => {
                let incoming = self.incoming(node);
                let w = s.waiting.entry(node.to_owned()).or_default();
                *w.entry(via.to_owned()).or_insert(0) += 1;
                if incoming.iter().all(|f| w.get(&f.id).copied().unwrap_or(0) > 0) {
                    for f in &incoming {
                        let c = w.get_mut(&f.id).expect("present");
                        *c -= 1;
                        if *c == 0 {
                            w.remove(&f.id);
                        }
                    }
                    if w.is_empty() {
                        s.waiting.remove(node);
                    }
                    s.completed.insert(node.to_owned());
                    Self::emit(&mut s, &self.outgoing(node));
                }
            }
            // Start, tasks and forking gateways pass the token on everywhere.
            _ => {
                s.completed.insert(node.to_owned());
                Self::emit(&mut s, &self.outgoing(node));
            }
        }
        Processed::Next(s)
    }

    fn explore(&self, s: State, seen: &mut BTreeSet<State>, out: &mut BTreeSet<Outcome>) {
        if !seen.insert(s.clone()) {
            return;
        }
        if s.pending.is_empty() {
            let status = if s.waiting.is_empty() {
                EndStatus::Completed
            } else {
                EndStatus::Stuck
            };
            out.insert(Outcome {
                completed: s.completed,
                status,
            });
            return;
        }
        let keys: Vec<(String, String)> = s.pending.keys().cloned().collect();
        for (node, via) in keys {
            match self.process(s.clone(), &node, &via) {
                Processed::Next(next) => self.explore(next, seen, out),
                Processed::Fault(completed) => {
                    out.insert(Outcome {
                        completed,
                        status: EndStatus::Faulted,
                    });
                }
            }
        }
    }
}

/// Every outcome reachable by some processing order.
pub fn reference_outcomes(def: &ProcessDefinition, vars: &Variables) -> BTreeSet<Outcome> {
    let g = Graph { def, vars };
    let start = def
        .nodes
        .iter()
        .find(|n| matches!(n.kind, NodeKind::StartEvent))
        .expect("start event");
    let mut s = State {
        pending: BTreeMap::new(),
        waiting: BTreeMap::new(),
        completed: BTreeSet::from([start.id.clone()]),
    };
    Graph::emit(&mut s, &g.outgoing(&start.id));
    let mut out = BTreeSet::new();
    g.explore(s, &mut BTreeSet::new(), &mut out);
    out
}

/// Runs the graph through the engine; no node waits, so starting the
/// instance runs it to its end.
pub fn engine_outcome(def: &ProcessDefinition, vars: &Variables) -> Outcome {
    let prepared = PreparedPlan {
        plan: BindingPlan {
            definition_id: def.id.clone(),
            bindings: BTreeMap::new(),
        },
        tasks: BTreeMap::new(),
    };
    let (inst, _) = Instance::start("oracle", std::sync::Arc::new(def.clone()), prepared, vars.clone(), 0)
        .expect("instance starts");
    let completed = inst
        .history()
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::NodeCompleted { node } => Some(node.clone()),
            _ => None,
        })
        .collect();
    let status = match inst.status() {
        InstanceStatus::Completed => EndStatus::Completed,
        InstanceStatus::Faulted => EndStatus::Faulted,
        InstanceStatus::Running if inst.is_stuck() => EndStatus::Stuck,
        other => panic!("gateway graph left the instance {other:?}"),
    };
    Outcome { completed, status }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    End,
    Task,
    Xor,
    And,
}

const FLAGS: [&str; 3] = ["a", "b", "c"];

fn flag(rng: &mut impl Rng) -> Box<Expr> {
    Box::new(Expr::Var(FLAGS[rng.gen_range(0..FLAGS.len())].to_owned()))
}

fn random_condition(rng: &mut impl Rng) -> Expr {
    match rng.gen_range(0..4) {
        0 => *flag(rng),
        1 => Expr::Unary(UnaryOp::Not, flag(rng)),
        2 => Expr::Binary(BinaryOp::And, flag(rng), flag(rng)),
        _ => Expr::Binary(BinaryOp::Or, flag(rng), flag(rng)),
    }
}

/// Random acyclic graph with `2..=max_nodes` nodes. Flows only go from lower
/// to higher indices; the last node is an end event. May be invalid; callers
/// filter with `validate_process`.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize) -> ProcessDefinition {
    let n = rng.gen_range(3..=max_nodes.max(3));
    let mut shapes = vec![Shape::Task; n];
    for s in shapes.iter_mut().take(n - 1).skip(1) {
        *s = match rng.gen_range(0..10) {
            0 | 1 => Shape::End,
            2 | 3 => Shape::Task,
            4..=6 => Shape::Xor,
            _ => Shape::And,
        };
    }
    shapes[n - 1] = Shape::End;
    let id = |i: usize| format!("n{i}");
    let mut def = ProcessDefinition::new("Process_Random");
    let mut flows = Vec::new();
    for i in 0..n {
        let kind = match (i, shapes[i]) {
            (0, _) => NodeKind::StartEvent,
            (_, Shape::End) => NodeKind::EndEvent,
            (_, Shape::Task) => NodeKind::SendTask {
                subject: String::new(),
                body: String::new(),
            },
            (_, Shape::Xor) => NodeKind::ExclusiveGateway { default_flow: None },
            (_, Shape::And) => NodeKind::ParallelGateway,
        };
        def.nodes.push(FlowNode::new(id(i), kind));
        if i == n - 1 || (i > 0 && shapes[i] == Shape::End) {
            continue;
        }
        let fanout = match (i, shapes[i]) {
            (0, _) | (_, Shape::Task) => 1,
            _ => rng.gen_range(1..=3),
        };
        let mut outs = Vec::new();
        for k in 0..fanout {
            let target = rng.gen_range(i + 1..n);
            let mut f = SequenceFlow::new(format!("f{i}_{k}"), id(i), id(target));
            if shapes[i] == Shape::Xor && i > 0 && rng.gen_bool(0.75) {
                f = f.when(random_condition(rng));
            }
            outs.push(f);
        }
        if i > 0 && shapes[i] == Shape::Xor && rng.gen_bool(0.4) {
            let d = rng.gen_range(0..outs.len());
            outs[d].condition = None;
            def.nodes[i].kind = NodeKind::ExclusiveGateway {
                default_flow: Some(outs[d].id.clone()),
            };
        }
        flows.extend(outs);
    }
    def.flows = flows;
    def
}

pub fn random_flags(rng: &mut impl Rng) -> Variables {
    FLAGS
        .iter()
        .map(|f| ((*f).to_owned(), Value::Boolean(rng.gen())))
        .collect()
}

#[derive(Debug, Default)]
pub struct GatewayReport {
    /// Valid graphs compared.
    pub cases: usize,
    /// Cases where the reference has a single outcome and equality is exact.
    pub deterministic: usize,
    pub by_status: BTreeMap<String, usize>,
    pub max_nodes: usize,
    pub mismatches: Vec<String>,
}

/// Generates graphs until `cases` valid ones were compared.
pub fn run_gateway_oracle(seed: u64, cases: usize, max_nodes: usize) -> GatewayReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = GatewayReport::default();
    let mut attempts = 0;
    while report.cases < cases {
        attempts += 1;
        assert!(attempts < cases * 200, "generator produces too few valid graphs");
        let def = random_graph(&mut rng, max_nodes);
        if !validate_process(&def, None).is_empty() {
            continue;
        }
        let vars = random_flags(&mut rng);
        report.cases += 1;
        report.max_nodes = report.max_nodes.max(def.nodes.len());
        let expected = reference_outcomes(&def, &vars);
        let got = engine_outcome(&def, &vars);
        *report.by_status.entry(format!("{:?}", got.status)).or_default() += 1;
        if expected.len() == 1 {
            report.deterministic += 1;
        }
        if !expected.contains(&got) {
            report.mismatches.push(format!(
                "graph {:?} with {vars:?}: engine {got:?}, reference {expected:?}",
                def.flows
                    .iter()
                    .map(|f| format!("{}->{}", f.source, f.target))
                    .collect::<Vec<_>>()
            ));
        }
    }
    report
}
