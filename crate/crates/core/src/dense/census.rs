//! Tournament census over a bucket of consecutive IDs.
//!
//! At level `l` adjacent blocks of size `2^(l-1)` merge. Two slots per
//! merge: the left representative transmits its member list while the right
//! one listens and prepends it, then the right representative transmits a
//! token while the left one listens and retires if it hears it. An empty
//! side leaves the other representative in charge. The last representative
//! broadcasts the sorted list, from which every member reads its index.

use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::runtime::{Device, Protocol, Round, Verdict};
use crate::util::ceil_log2;

/// Index (1-based) of a member in the bucket's sorted list and the list size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CensusResult {
    pub index: u64,
    pub size: u64,
}

/// Rounds used by a census on a bucket of `m` IDs.
pub fn census_rounds(m: u64) -> Round {
    if m <= 1 {
        0
    } else {
        2 * (m - 1) + 1
    }
}

/// Merges at level `l >= 1` in a bucket of `m` IDs.
fn merges(m: u64, l: u32) -> u64 {
    m.div_ceil(1 << (l - 1)) - m.div_ceil(1 << l)
}

fn level_offset(m: u64, l: u32) -> Round {
    (1..l).map(|x| 2 * merges(m, x)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Stage {
    Merge1,
    Merge2,
    Broadcast,
    Done,
}

/// Census state of one bucket member. Rounds are relative to the start of
/// the census.
#[derive(Debug, Clone, Hash)]
pub struct CensusMember {
    pub id: DeviceId,
    pos: u64,
    m: u64,
    level: u32,
    stage: Stage,
    rep: bool,
    list: Vec<u64>,
    pub result: Option<CensusResult>,
}

impl CensusMember {
    /// Member `id` of the bucket `[lo, lo + m - 1]`.
    pub fn new(id: DeviceId, lo: u64, m: u64) -> Self {
        let mut c = CensusMember {
            id,
            pos: id - lo,
            m,
            level: 1,
            stage: Stage::Merge1,
            rep: true,
            list: vec![id],
            result: None,
        };
        if m <= 1 {
            c.finish(vec![id]);
        }
        c
    }

    fn levels(&self) -> u32 {
        ceil_log2(self.m)
    }

    fn finish(&mut self, list: Vec<u64>) {
        self.result = list.iter().position(|&x| x == self.id).map(|p| CensusResult {
            index: p as u64 + 1,
            size: list.len() as u64,
        });
        self.stage = Stage::Done;
    }

    fn block(&self) -> u64 {
        self.pos >> self.level
    }

    fn is_left(&self) -> bool {
        (self.pos >> (self.level - 1)) & 1 == 0
    }

    fn merge_slot(&self) -> Round {
        level_offset(self.m, self.level) + 2 * self.block()
    }

    pub fn next_active(&mut self) -> Option<Round> {
        loop {
            match self.stage {
                Stage::Done => return None,
                Stage::Merge1 => {
                    if self.level > self.levels() {
                        self.stage = Stage::Broadcast;
                    } else if self.block() < merges(self.m, self.level) {
                        return Some(self.merge_slot());
                    } else {
                        // Left block with nobody to its right.
                        self.level += 1;
                    }
                }
                Stage::Merge2 => return Some(self.merge_slot() + 1),
                Stage::Broadcast => return Some(2 * (self.m - 1)),
            }
        }
    }

    pub fn act(&mut self) -> Action {
        match (self.stage, self.is_left()) {
            (Stage::Merge1, true) | (Stage::Merge2, false) => match self.stage {
                Stage::Merge1 => Action::Transmit(Message::list(self.list.clone())),
                _ => Action::Transmit(Message::Token),
            },
            (Stage::Merge1, false) | (Stage::Merge2, true) => Action::Listen,
            (Stage::Broadcast, _) if self.rep => Action::Transmit(Message::list(self.list.clone())),
            _ => Action::Listen,
        }
    }

    pub fn observe(&mut self, feedback: &Feedback) {
        match self.stage {
            Stage::Merge1 => {
                if !self.is_left() {
                    if let Some(left) = feedback.message().and_then(Message::as_list) {
                        let mut merged = left.to_vec();
                        merged.extend_from_slice(&self.list);
                        self.list = merged;
                    }
                }
                self.stage = Stage::Merge2;
            }
            Stage::Merge2 => {
                if self.is_left() && feedback.message().is_some() {
                    self.rep = false;
                    self.list.clear();
                    self.stage = Stage::Broadcast;
                } else {
                    self.level += 1;
                    self.stage = Stage::Merge1;
                }
            }
            Stage::Broadcast => {
                if self.rep {
                    let list = std::mem::take(&mut self.list);
                    self.finish(list);
                } else {
                    match feedback.message().and_then(Message::as_list) {
                        Some(list) => self.finish(list.to_vec()),
                        None => self.stage = Stage::Done,
                    }
                }
            }
            Stage::Done => {}
        }
    }
}

/// A census on the bucket `[1, m]` as a standalone protocol.
#[derive(Debug, Clone)]
pub struct CensusProtocol {
    pub model: CdModel,
    pub m: u64,
}

impl Protocol for CensusProtocol {
    fn name(&self) -> String {
        "census".into()
    }

    fn model(&self) -> CdModel {
        self.model
    }

    fn id_space(&self) -> u64 {
        self.m
    }

    fn schedule_length(&self) -> Round {
        census_rounds(self.m)
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        Box::new(CensusDevice(CensusMember::new(id, 1, self.m)))
    }

    fn energy_budget(&self) -> Option<u64> {
        Some(2 * ceil_log2(self.m) as u64 + 1)
    }
}

#[derive(Debug, Clone, Hash)]
pub struct CensusDevice(pub CensusMember);

impl Device for CensusDevice {
    fn next_active(&mut self, _from: Round) -> Option<Round> {
        self.0.next_active()
    }

    fn act(&mut self, _round: Round) -> Action {
        self.0.act()
    }

    fn observe(&mut self, _round: Round, feedback: &Feedback) {
        self.0.observe(feedback)
    }

    fn verdict(&self) -> Verdict {
        match self.0.result {
            Some(r) => Verdict {
                role: if r.index == 1 {
                    crate::runtime::Role::Leader
                } else {
                    crate::runtime::Role::NonLeader
                },
                rank: Some(r.index),
            },
            None => Verdict::NON_LEADER,
        }
    }
}
