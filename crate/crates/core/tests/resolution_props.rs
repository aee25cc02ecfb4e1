mod common;

use std::collections::BTreeMap;

use common::{drill2_machine, festo_registry, fixture};
use proptest::prelude::*;
use skillflow_core::model::{parse_process, ProcessDefinition, ValueExpr};
use skillflow_core::registry::MachineDocument;
use skillflow_core::resolution::{
    decide, resolve, validate_plan, BindingPlan, Resolution, ResolutionError, SelectionPolicy,
};
use skillflow_core::Registry;

fn thermometer() -> ProcessDefinition {
    parse_process(&fixture("thermometer.bpmn")).unwrap()
}

fn plan(def: &ProcessDefinition, r: &Registry, policy: SelectionPolicy) -> BindingPlan {
    resolve(def, r, policy).unwrap().plan().cloned().expect("complete")
}

/// Parameter and output assignments keyed by the capability property they
/// are linked to, so plans for differently named skills can be compared.
fn by_property(p: &BindingPlan, r: &Registry) -> BTreeMap<String, (Vec<(String, ValueExpr)>, Vec<(String, String)>)> {
    p.bindings
        .iter()
        .map(|(task, b)| {
            let skill = r.skill(&b.skill).unwrap();
            let params = b
                .parameters
                .iter()
                .map(|(n, v)| (skill.parameter(n).unwrap().linked_property.clone().unwrap(), v.clone()))
                .collect();
            let outs = b
                .outputs
                .iter()
                .map(|(n, v)| (skill.result(n).unwrap().linked_property.clone().unwrap(), v.clone()))
                .collect();
            (task.clone(), (params, outs))
        })
        .collect()
}

#[test]
fn module_swap_changes_only_the_drill_binding() {
    let def = thermometer();
    let r1 = festo_registry();
    let mut r2 = festo_registry();
    r2.unregister_machine("urn:festo:machine:drill1").unwrap();
    r2.register_machine(drill2_machine()).unwrap();

    let p1 = plan(&def, &r1, SelectionPolicy::AutoStrict);
    let p2 = plan(&def, &r2, SelectionPolicy::AutoStrict);
    assert_eq!(p1.bindings.len(), 3);
    assert!(validate_plan(&p1, &def, &r1).is_empty());
    assert!(validate_plan(&p2, &def, &r2).is_empty());
    for task in ["Task_Supply", "Task_Transport"] {
        assert_eq!(p1.bindings[task], p2.bindings[task]);
    }
    assert_eq!(p1.bindings["Task_Drill"].skill, "urn:festo:skill:drill1");
    assert_eq!(p2.bindings["Task_Drill"].skill, "urn:festo:skill:drill2");
    assert_eq!(by_property(&p1, &r1), by_property(&p2, &r2));
    assert_eq!(
        p1.bindings["Task_Drill"].parameters["noOfHoles"].to_text(),
        "${Activity_6k239cs_NoOfHoles}"
    );
    assert_eq!(
        p2.bindings["Task_Drill"].parameters["holes"].to_text(),
        "${Activity_6k239cs_NoOfHoles}"
    );
}

#[test]
fn interactive_decision_flow() {
    let def = thermometer();
    let mut r = festo_registry();
    r.register_machine(drill2_machine()).unwrap();
    let Resolution::Pending { decisions } = resolve(&def, &r, SelectionPolicy::Interactive).unwrap() else {
        panic!("expected pending");
    };
    assert_eq!(decisions.pending.len(), 1);
    assert_eq!(decisions.pending[0].task_id, "Task_Drill");
    assert_eq!(
        decisions.pending[0].candidates,
        ["urn:festo:skill:drill1", "urn:festo:skill:drill2"]
    );
    assert!(matches!(
        decide(&decisions, "Task_Drill", "urn:festo:skill:supply"),
        Err(ResolutionError::NotACandidate { .. })
    ));
    let done = decide(&decisions, "Task_Drill", "urn:festo:skill:drill2").unwrap();
    let plan = done.plan().unwrap();
    assert_eq!(plan.bindings["Task_Drill"].skill, "urn:festo:skill:drill2");
    assert!(matches!(
        decide(&decisions, "Task_Supply", "urn:festo:skill:supply"),
        Err(ResolutionError::UnknownPendingTask(_))
    ));
    assert!(matches!(
        resolve(&def, &r, SelectionPolicy::AutoStrict),
        Err(ResolutionError::AmbiguousCapability { .. })
    ));
}

fn drill_clone(iri_suffix: &str, rename: bool) -> MachineDocument {
    let mut m = drill2_machine();
    m.iri = format!("urn:festo:machine:{iri_suffix}");
    m.name = format!("drill {iri_suffix}");
    for s in &mut m.skills {
        s.iri = format!("urn:festo:skill:{iri_suffix}");
        if rename {
            for v in s.parameters.iter_mut().chain(s.results.iter_mut()) {
                v.name = format!("{}_{iri_suffix}", v.name);
            }
        }
    }
    m
}

proptest! {
    /// Whatever order drill modules are registered in, FirstDeterministic
    /// binds the lexicographically smallest skill iri, and resolving again
    /// yields the same plan.
    #[test]
    fn first_deterministic_picks_smallest(
        suffixes in prop::collection::btree_set("[a-z]{1,6}", 1..6),
        rename in any::<bool>(),
        rotate in 0usize..6,
    ) {
        let def = thermometer();
        let mut r = festo_registry();
        r.unregister_machine("urn:festo:machine:drill1").unwrap();
        let mut order: Vec<&String> = suffixes.iter().collect();
        let k = rotate % order.len();
        order.rotate_left(k);
        order.reverse();
        for s in &order {
            r.register_machine(drill_clone(s, rename)).unwrap();
        }
        let p = plan(&def, &r, SelectionPolicy::FirstDeterministic);
        let smallest = format!("urn:festo:skill:{}", suffixes.iter().next().unwrap());
        prop_assert_eq!(&p.bindings["Task_Drill"].skill, &smallest);
        prop_assert_eq!(&plan(&def, &r, SelectionPolicy::FirstDeterministic), &p);
        prop_assert!(validate_plan(&p, &def, &r).is_empty());

        // Swapping to one specific clone leaves everything but the drill binding alone.
        let base = plan(&def, &festo_registry(), SelectionPolicy::AutoStrict);
        prop_assert_eq!(by_property(&p, &r), by_property(&base, &festo_registry()));
        if suffixes.len() == 1 && !rename {
            let mut expected = base.clone();
            let b = expected.bindings.get_mut("Task_Drill").unwrap();
            b.skill = smallest.clone();
            b.parameters = [("holes".to_owned(), base.bindings["Task_Drill"].parameters["noOfHoles"].clone())].into();
            b.outputs = [("elapsed".to_owned(), "drillDuration".to_owned())].into();
            prop_assert_eq!(p, expected);
        }
    }
}
