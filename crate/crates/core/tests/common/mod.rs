#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use skillflow_core::engine::InProcessConnector;
use skillflow_core::plant::{PlantConfig, VirtualModule};
use skillflow_core::registry::MachineDocument;
use skillflow_core::state_machine::{apply_command, complete_acting, SkillState, TransitionCommand};
use skillflow_core::Registry;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn festo_registry() -> Registry {
    Registry::load(&fixture("festo_registry.json")).expect("festo registry")
}

pub fn drill2_machine() -> MachineDocument {
    serde_json::from_slice(&fixture("drill2_machine.json")).expect("drill2 machine")
}

/// All four virtual modules of the plant file, spawned in-process.
pub fn festo_plant() -> (Arc<InProcessConnector>, Vec<VirtualModule>) {
    let plant: PlantConfig = serde_json::from_slice(&fixture("festo_plant.json")).unwrap();
    let mut machines = festo_registry().to_document().machines;
    machines.push(drill2_machine());
    let connector = Arc::new(InProcessConnector::new());
    let mut modules = Vec::new();
    for (config, _port) in plant.module_configs(&machines).unwrap() {
        let module = VirtualModule::spawn(config).unwrap();
        connector.add_module(module.clone());
        modules.push(module);
    }
    (connector, modules)
}

/// True when `states` is a walk through the skill state machine that starts
/// in Idle, each step being a command or an auto-advance.
pub fn is_legal_path(states: &[SkillState]) -> bool {
    let mut prev = SkillState::Idle;
    for &next in states {
        let by_advance = complete_acting(prev).ok() == Some(next);
        let by_command = TransitionCommand::ALL
            .iter()
            .any(|&c| apply_command(prev, c).ok() == Some(next));
        if !by_advance && !by_command {
            return false;
        }
        prev = next;
    }
    true
}
