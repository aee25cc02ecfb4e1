//! The skill transition table written out as data.

use std::collections::{BTreeSet, VecDeque};

use skillflow_core::state_machine::{apply_command, complete_acting, SkillState, TransitionCommand};

use SkillState::*;
use TransitionCommand::*;

pub const STATES: [SkillState; 11] = [
    Idle, Starting, Execute, Completing, Complete, Resetting, Stopping, Stopped, Clearing, Aborting,
    Aborted,
];

pub const COMMANDS: [TransitionCommand; 5] = [Start, Stop, Abort, Reset, Clear];

pub const ACTING: [SkillState; 7] = [Starting, Execute, Completing, Resetting, Stopping, Clearing, Aborting];

/// Expected target for every (state, command) pair; `None` is illegal.
pub fn expected_command(state: SkillState, cmd: TransitionCommand) -> Option<SkillState> {
    match cmd {
        Start => (state == Idle).then_some(Starting),
        Stop => (![Stopping, Stopped, Clearing, Aborting, Aborted].contains(&state)).then_some(Stopping),
        Abort => (![Aborting, Aborted].contains(&state)).then_some(Aborting),
        Clear => (state == Aborted).then_some(Clearing),
        Reset => ([Complete, Stopped].contains(&state)).then_some(Resetting),
    }
}

pub const AUTO_ADVANCE: [(SkillState, SkillState); 7] = [
    (Starting, Execute),
    (Execute, Completing),
    (Completing, Complete),
    (Resetting, Idle),
    (Stopping, Stopped),
    (Clearing, Stopped),
    (Aborting, Aborted),
];

#[derive(Debug, Default)]
pub struct TableReport {
    pub command_pairs: usize,
    pub advance_rows: usize,
    pub not_acting_checked: usize,
    pub mismatches: Vec<String>,
}

pub fn check_table() -> TableReport {
    let mut report = TableReport::default();
    for s in STATES {
        for c in COMMANDS {
            report.command_pairs += 1;
            let got = apply_command(s, c).ok();
            let want = expected_command(s, c);
            if got != want {
                report.mismatches.push(format!("({s:?}, {c:?}): got {got:?}, want {want:?}"));
            }
        }
    }
    for (from, to) in AUTO_ADVANCE {
        report.advance_rows += 1;
        let got = complete_acting(from).ok();
        if got != Some(to) {
            report.mismatches.push(format!("advance {from:?}: got {got:?}, want {to:?}"));
        }
    }
    for s in STATES.into_iter().filter(|s| !ACTING.contains(s)) {
        report.not_acting_checked += 1;
        if complete_acting(s).is_ok() {
            report.mismatches.push(format!("{s:?} is waiting but auto-advanced"));
        }
    }
    report
}

/// States from which Idle is reachable using only Abort, Clear and Reset
/// (each where legal) and auto-advances, found by breadth-first search
/// backwards from Idle over the implementation's transitions.
pub fn states_recovering_to_idle() -> BTreeSet<SkillState> {
    let step = |s: SkillState| -> Vec<SkillState> {
        let mut next: Vec<SkillState> = [Abort, Clear, Reset]
            .into_iter()
            .filter_map(|c| apply_command(s, c).ok())
            .collect();
        next.extend(complete_acting(s).ok());
        next
    };
    let mut good = BTreeSet::from([Idle]);
    let mut changed = true;
    while changed {
        changed = false;
        for s in STATES {
            if !good.contains(&s) && step(s).iter().any(|t| good.contains(t)) {
                good.insert(s);
                changed = true;
            }
        }
    }
    good
}

/// Shortest recovery sequence from `from` to Idle as a list of states.
pub fn recovery_path(from: SkillState) -> Option<Vec<SkillState>> {
    let mut queue = VecDeque::from([vec![from]]);
    let mut seen = BTreeSet::from([from]);
    while let Some(path) = queue.pop_front() {
        let s = *path.last().expect("non-empty");
        if s == Idle {
            return Some(path);
        }
        let mut next: Vec<SkillState> = [Abort, Clear, Reset]
            .into_iter()
            .filter_map(|c| apply_command(s, c).ok())
            .collect();
        next.extend(complete_acting(s).ok());
        for t in next {
            if seen.insert(t) {
                let mut p = path.clone();
                p.push(t);
                queue.push_back(p);
            }
        }
    }
    None
}

/// True when `states`, read from Idle, is a walk through the table.
pub fn is_legal_path(states: &[SkillState]) -> bool {
    let mut prev = Idle;
    for &next in states {
        let advance = AUTO_ADVANCE.iter().any(|&(a, b)| a == prev && b == next);
        let command = COMMANDS.iter().any(|&c| expected_command(prev, c) == Some(next));
        if !advance && !command {
            return false;
        }
        prev = next;
    }
    true
}
