//! Exponential search over the block width when `n` is unknown.
//!
//! Attempt `i` runs the census-based algorithm on the current ID space of
//! size `N_i` with width `b_i`, followed by a test slot in which the rank-1
//! device transmits and everybody else listens. A silent test slot means no
//! group formed; the devices then halve the ID space with one pairing level
//! and try again with a larger width. When even `b_i = N_i` fails, a single
//! device is left and it elects itself.

use std::sync::Arc;

use serde::Serialize;

use super::ImprovedCore;
use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::protocols::pairing::PairingDevice;
use crate::runtime::{Device, Protocol, Round, RunReport, SubDevice, Verdict};
use crate::util::tower2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct AttemptPlan {
    /// 1-based attempt number.
    pub index: u32,
    pub b: u64,
    pub space: u64,
    pub start: Round,
    pub core_len: Round,
    pub reduce_len: Round,
    pub core_budget: u64,
}

impl AttemptPlan {
    pub fn test_slot(&self) -> Round {
        self.start + self.core_len
    }

    pub fn end(&self) -> Round {
        self.test_slot() + 1 + self.reduce_len
    }

    pub fn is_last(&self) -> bool {
        self.b >= self.space
    }
}

/// Width schedule: `2^(2^i)` without sender-side detection, `2^(2^(2^i))`
/// with it, capped at the current ID space.
pub fn attempt_width(model: CdModel, i: u32, space: u64) -> u64 {
    let w = if model.sender_side() {
        tower2(1u32 << i.min(5))
    } else {
        tower2(i)
    };
    w.min(space).max(1)
}

pub fn plan_attempts(model: CdModel, space: u64) -> Vec<AttemptPlan> {
    let mut plans = Vec::new();
    let mut n = space;
    let mut start = 0;
    for i in 1.. {
        let b = attempt_width(model, i, n);
        let core = ImprovedCore::new(model, n, b).expect("positive sizes");
        let last = b >= n;
        let plan = AttemptPlan {
            index: i,
            b,
            space: n,
            start,
            core_len: core.schedule_length(),
            reduce_len: if last { 0 } else { n / 2 },
            core_budget: core.energy_budget().unwrap_or(0),
        };
        start = plan.end();
        plans.push(plan);
        if last {
            break;
        }
        n = n.div_ceil(2);
    }
    plans
}

#[derive(Debug, Clone)]
pub struct ExponentialSearch {
    model: CdModel,
    space: u64,
    plans: Arc<[AttemptPlan]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttemptSummary {
    pub attempt: u32,
    pub b: u64,
    pub space: u64,
    pub success: bool,
    pub energy_max: u64,
    pub rounds: Round,
}

impl ExponentialSearch {
    pub fn new(model: CdModel, space: u64) -> Self {
        ExponentialSearch {
            model,
            space,
            plans: plan_attempts(model, space).into(),
        }
    }

    pub fn plans(&self) -> &[AttemptPlan] {
        &self.plans
    }

    /// Per-attempt results up to the first successful test slot.
    pub fn attempt_summaries(&self, report: &RunReport) -> Vec<AttemptSummary> {
        let mut out = Vec::new();
        for p in self.plans.iter() {
            let mut energy = std::collections::BTreeMap::<DeviceId, u64>::new();
            let mut success = false;
            for rec in report
                .transcript
                .rounds
                .iter()
                .filter(|r| r.round >= p.start && r.round < p.end())
            {
                for e in &rec.entries {
                    *energy.entry(e.id).or_default() += 1;
                }
                if rec.round == p.test_slot() && rec.transmitters() == 1 {
                    success = true;
                }
            }
            out.push(AttemptSummary {
                attempt: p.index,
                b: p.b,
                space: p.space,
                success,
                energy_max: energy.values().copied().max().unwrap_or(0),
                rounds: if success { p.core_len + 1 } else { p.end() - p.start },
            });
            if success {
                break;
            }
        }
        out
    }
}

impl Protocol for ExponentialSearch {
    fn name(&self) -> String {
        "exp-search".into()
    }

    fn model(&self) -> CdModel {
        self.model
    }

    fn id_space(&self) -> u64 {
        self.space
    }

    fn schedule_length(&self) -> Round {
        self.plans.last().map_or(0, |p| p.end())
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        let mut d = SearchDevice {
            plans: self.plans.clone(),
            model: self.model,
            attempt: 0,
            current_id: id,
            stage: Stage::Core,
            core: None,
            reduce: None,
            leader: false,
            history: vec![(1, id)],
        };
        d.start_core();
        Box::new(d)
    }

    fn energy_budget(&self) -> Option<u64> {
        Some(
            self.plans
                .iter()
                .map(|p| p.core_budget + 1 + u64::from(!p.is_last()))
                .sum(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Stage {
    Core,
    Test,
    Reduce,
    Done,
}

#[derive(Debug, Clone, Hash)]
pub struct SearchDevice {
    plans: Arc<[AttemptPlan]>,
    model: CdModel,
    attempt: usize,
    current_id: u64,
    stage: Stage,
    core: Option<SubDevice>,
    reduce: Option<PairingDevice>,
    leader: bool,
    /// `(attempt, id)` for every attempt this device took part in.
    pub history: Vec<(u32, u64)>,
}

impl SearchDevice {
    fn plan(&self) -> &AttemptPlan {
        &self.plans[self.attempt]
    }

    fn start_core(&mut self) {
        let p = *self.plan();
        let core = ImprovedCore::new(self.model, p.space, p.b).expect("planned");
        self.core = Some(SubDevice(core.spawn(self.current_id)));
        self.stage = Stage::Core;
    }

    fn core_leader(&self) -> bool {
        self.core.as_ref().is_some_and(|c| c.0.verdict().is_leader())
    }
}

impl Device for SearchDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        loop {
            let p = *self.plan();
            match self.stage {
                Stage::Done => return None,
                Stage::Core => {
                    let core = self.core.as_mut().expect("core running");
                    if let Some(r) = core.0.next_active(from.saturating_sub(p.start)) {
                        return Some(r + p.start);
                    }
                    self.stage = Stage::Test;
                }
                Stage::Test => return Some(p.test_slot()),
                Stage::Reduce => {
                    let off = p.test_slot() + 1;
                    let red = self.reduce.as_mut().expect("reduction running");
                    if let Some(r) = red.next_active(from.saturating_sub(off)) {
                        return Some(r + off);
                    }
                    if red.alive {
                        self.current_id = red.current_id;
                        self.reduce = None;
                        self.attempt += 1;
                        self.history.push((self.attempt as u32 + 1, self.current_id));
                        self.start_core();
                    } else {
                        self.stage = Stage::Done;
                    }
                }
            }
        }
    }

    fn act(&mut self, round: Round) -> Action {
        let p = *self.plan();
        match self.stage {
            Stage::Core => self.core.as_mut().expect("core running").0.act(round - p.start),
            Stage::Test if self.core_leader() => Action::Transmit(Message::Token),
            Stage::Test => Action::Listen,
            Stage::Reduce => self
                .reduce
                .as_mut()
                .expect("reduction running")
                .act(round - p.test_slot() - 1),
            Stage::Done => Action::Idle,
        }
    }

    fn observe(&mut self, round: Round, feedback: &Feedback) {
        let p = *self.plan();
        match self.stage {
            Stage::Core => self
                .core
                .as_mut()
                .expect("core running")
                .0
                .observe(round - p.start, feedback),
            Stage::Test => {
                if self.core_leader() {
                    self.leader = true;
                    self.stage = Stage::Done;
                } else if feedback.message().is_some() {
                    self.stage = Stage::Done;
                } else if p.is_last() {
                    self.leader = true;
                    self.stage = Stage::Done;
                } else {
                    self.core = None;
                    self.reduce = Some(PairingDevice::new(self.current_id, p.space, Some(1)));
                    self.stage = Stage::Reduce;
                }
            }
            Stage::Reduce => self
                .reduce
                .as_mut()
                .expect("reduction running")
                .observe(round - p.test_slot() - 1, feedback),
            Stage::Done => {}
        }
    }

    fn verdict(&self) -> Verdict {
        if self.leader {
            Verdict {
                rank: Some(1),
                ..Verdict::LEADER
            }
        } else {
            Verdict::NON_LEADER
        }
    }
}
