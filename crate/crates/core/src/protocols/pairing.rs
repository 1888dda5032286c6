//! ID-space halving by pairing `{2i-1, 2i}`.
//!
//! In each slot of a level the odd ID transmits a token and its even partner
//! listens; the even device survives only if it heard nothing. Survivors
//! rename themselves `ceil(id / 2)`. When the current space has odd size its
//! top ID has no partner and survives without a slot.

use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::runtime::{Device, Protocol, Round, Verdict};
use crate::util::ceil_log2;

/// `(space, slots)` for each level, stopping after `max_levels` levels or
/// when the space reaches size 1.
pub fn pairing_levels(space: u64, max_levels: Option<u32>) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut m = space;
    while m > 1 && max_levels.is_none_or(|l| out.len() < l as usize) {
        out.push((m, m / 2));
        m = m.div_ceil(2);
    }
    out
}

/// Rounds used by one reduction of a space of size `space`.
pub fn reduce_once_rounds(space: u64) -> Round {
    space / 2
}

/// Rounds used by the full election on `space` (without announcement).
pub fn election_rounds(space: u64) -> Round {
    pairing_levels(space, None).iter().map(|&(_, s)| s).sum()
}

/// The pairing tournament, either run to completion (an election core) or
/// for a bounded number of levels (an ID-space reduction phase).
#[derive(Debug, Clone)]
pub struct PairingCore {
    pub model: CdModel,
    pub space: u64,
    pub max_levels: Option<u32>,
}

impl PairingCore {
    pub fn election(model: CdModel, space: u64) -> Self {
        PairingCore {
            model,
            space,
            max_levels: None,
        }
    }

    pub fn reduce_once(model: CdModel, space: u64) -> Self {
        PairingCore {
            model,
            space,
            max_levels: Some(1),
        }
    }
}

impl Protocol for PairingCore {
    fn name(&self) -> String {
        match self.max_levels {
            None => "pairing-core".into(),
            Some(l) => format!("pairing-reduce-{l}"),
        }
    }

    fn model(&self) -> CdModel {
        self.model
    }

    fn id_space(&self) -> u64 {
        self.space
    }

    fn schedule_length(&self) -> Round {
        pairing_levels(self.space, self.max_levels)
            .iter()
            .map(|&(_, s)| s)
            .sum()
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        Box::new(PairingDevice::new(id, self.space, self.max_levels))
    }

    fn energy_budget(&self) -> Option<u64> {
        Some(pairing_levels(self.space, self.max_levels).len() as u64)
    }
}

#[derive(Debug, Clone, Hash)]
pub struct PairingDevice {
    /// Current (renamed) identifier.
    pub current_id: u64,
    /// Size of the current ID space.
    pub space: u64,
    pub level: u32,
    pub alive: bool,
    level_start: Round,
    max_levels: Option<u32>,
}

impl PairingDevice {
    pub fn new(id: DeviceId, space: u64, max_levels: Option<u32>) -> Self {
        PairingDevice {
            current_id: id,
            space,
            level: 0,
            alive: true,
            level_start: 0,
            max_levels,
        }
    }

    fn levels_done(&self) -> bool {
        self.space <= 1 || self.max_levels.is_some_and(|l| self.level >= l)
    }

    fn promote(&mut self) {
        self.level_start += self.space / 2;
        self.current_id = self.current_id.div_ceil(2);
        self.space = self.space.div_ceil(2);
        self.level += 1;
    }

    fn slot(&self) -> Round {
        self.level_start + self.current_id.div_ceil(2) - 1
    }

    /// Survived every level of the phase.
    pub fn survived(&self) -> bool {
        self.alive
    }
}

impl Device for PairingDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        loop {
            if !self.alive || self.levels_done() {
                return None;
            }
            if self.current_id == self.space && self.space % 2 == 1 {
                // Unpaired top ID.
                self.promote();
                continue;
            }
            let slot = self.slot();
            debug_assert!(slot >= from, "pairing slot {slot} already passed ({from})");
            return Some(slot.max(from));
        }
    }

    fn act(&mut self, _round: Round) -> Action {
        if self.current_id % 2 == 1 {
            Action::Transmit(Message::Token)
        } else {
            Action::Listen
        }
    }

    fn observe(&mut self, _round: Round, feedback: &Feedback) {
        if self.current_id % 2 == 0 && feedback.message().is_some() {
            self.alive = false;
            return;
        }
        self.promote();
    }

    fn verdict(&self) -> Verdict {
        if self.alive {
            Verdict::LEADER
        } else {
            Verdict::NON_LEADER
        }
    }
}

/// Bound on the number of pairing levels for a space of size `space`.
pub fn level_count(space: u64) -> u64 {
    ceil_log2(space) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{execute, Execution};

    fn survivors(space: u64, devices: &[u64]) -> Vec<(u64, u64)> {
        let p = PairingCore::reduce_once(CdModel::NoCd, space);
        let mut exec = Execution::new(&p, devices.iter().copied()).unwrap();
        exec.run_until(p.schedule_length()).unwrap();
        let mut out = Vec::new();
        for (id, dev) in exec.devices() {
            let d = dev.as_any().downcast_ref::<PairingDevice>().unwrap();
            if d.alive {
                out.push((id, d.current_id));
            }
        }
        out
    }

    #[test]
    fn reduce_keeps_one_per_occupied_pair() {
        assert_eq!(survivors(4, &[2, 3]), vec![(2, 1), (3, 2)]);
        assert_eq!(survivors(2, &[1, 2]), vec![(1, 1)]);
        assert_eq!(survivors(2, &[2]), vec![(2, 1)]);
        assert_eq!(survivors(5, &[5]), vec![(5, 3)]);
    }

    #[test]
    fn survivors_cover_every_occupied_pair_exhaustively() {
        for space in 1..=12u64 {
            for mask in 1u32..(1 << space) {
                let v: Vec<u64> = (1..=space).filter(|i| mask >> (i - 1) & 1 == 1).collect();
                let s = survivors(space, &v);
                let pairs: std::collections::BTreeSet<u64> =
                    v.iter().map(|i| i.div_ceil(2)).collect();
                assert_eq!(s.len(), pairs.len());
                assert!(s.len() >= v.len().div_ceil(2));
                for (old, new) in &s {
                    assert_eq!(*new, old.div_ceil(2));
                    assert!(*new <= space.div_ceil(2));
                }
            }
        }
    }

    #[test]
    fn level_recurrence() {
        for n in 1..200u64 {
            let half = n.div_ceil(2);
            let expected = if n == 1 { 0 } else { election_rounds(half) + n / 2 };
            assert_eq!(election_rounds(n), expected);
            // Each level drops floor(n/2) IDs, so the total is n - 1.
            assert_eq!(election_rounds(n), n - 1);
        }
    }

    #[test]
    fn core_elects_single_survivor() {
        let p = PairingCore::election(CdModel::NoCd, 8);
        for mask in 1u32..256 {
            let v: Vec<u64> = (1..=8).filter(|i| mask >> (i - 1) & 1 == 1).collect();
            let rep = execute(&p, v).unwrap();
            assert!(rep.strict_success);
            assert!(rep.ledger.max_energy <= 3);
        }
    }
}
