use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sandwich,
    TaDistill,
    StudentDistill,
    MaxidiscEnumeration,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Sandwich,
        Phase::TaDistill,
        Phase::StudentDistill,
        Phase::MaxidiscEnumeration,
    ];
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Sandwich => "sandwich",
            Phase::TaDistill => "ta_distill",
            Phase::StudentDistill => "student_distill",
            Phase::MaxidiscEnumeration => "maxidisc_enumeration",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCount {
    pub steps: u64,
    pub trials: u64,
}

/// Optimizer steps and full training runs per phase. Counts only grow.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialLedger {
    pub sandwich: PhaseCount,
    pub ta_distill: PhaseCount,
    pub student_distill: PhaseCount,
    pub maxidisc_enumeration: PhaseCount,
}

impl TrialLedger {
    pub fn phase(&self, p: Phase) -> PhaseCount {
        match p {
            Phase::Sandwich => self.sandwich,
            Phase::TaDistill => self.ta_distill,
            Phase::StudentDistill => self.student_distill,
            Phase::MaxidiscEnumeration => self.maxidisc_enumeration,
        }
    }

    fn phase_mut(&mut self, p: Phase) -> &mut PhaseCount {
        match p {
            Phase::Sandwich => &mut self.sandwich,
            Phase::TaDistill => &mut self.ta_distill,
            Phase::StudentDistill => &mut self.student_distill,
            Phase::MaxidiscEnumeration => &mut self.maxidisc_enumeration,
        }
    }

    pub fn add_steps(&mut self, p: Phase, steps: u64) {
        self.phase_mut(p).steps += steps;
    }

    pub fn add_trial(&mut self, p: Phase) {
        self.phase_mut(p).trials += 1;
    }

    pub fn total_steps(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.phase(p).steps).sum()
    }

    pub fn total_trials(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.phase(p).trials).sum()
    }

    /// Runs spent choosing a teacher assistant: the one shared sandwich run
    /// plus any enumerated standalone assistants.
    pub fn ta_selection_trials(&self) -> u64 {
        self.sandwich.trials + self.maxidisc_enumeration.trials
    }

    pub fn merge(&mut self, other: &TrialLedger) {
        for p in Phase::ALL {
            let o = other.phase(p);
            let c = self.phase_mut(p);
            c.steps += o.steps;
            c.trials += o.trials;
        }
    }
}
