//! Binary search over the ID space.
//!
//! Each probe splits the live interval into a lower half `L` (the first
//! `ceil(size/2)` IDs) and an upper half `R`. Devices in `L` transmit and
//! devices in `R` listen. Anything other than silence proves `L` non-empty,
//! so `R` drops out; silence moves everyone into `R`. Listeners must be able
//! to tell collision from silence, so this needs Strong-CD or Receiver-CD.

use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::runtime::{Device, Protocol, Round, Verdict};
use crate::util::ceil_log2;

/// Binary search run for a fixed number of probes.
#[derive(Debug, Clone)]
pub struct BinarySearchCore {
    pub model: CdModel,
    pub space: u64,
    pub probes: u32,
}

impl BinarySearchCore {
    /// Enough probes to reach a single ID.
    pub fn election(model: CdModel, space: u64) -> Self {
        BinarySearchCore {
            model,
            space,
            probes: ceil_log2(space),
        }
    }

    /// At most `k` probes (capped at the number needed to reach one ID).
    pub fn halvings(model: CdModel, space: u64, k: u32) -> Self {
        BinarySearchCore {
            model,
            space,
            probes: k.min(ceil_log2(space)),
        }
    }

    /// Upper bound on the size of the interval left after all probes.
    pub fn residual_space(&self) -> u64 {
        let mut s = self.space;
        for _ in 0..self.probes {
            s = s.div_ceil(2);
        }
        s
    }
}

impl Protocol for BinarySearchCore {
    fn name(&self) -> String {
        "binary-search-core".into()
    }

    fn model(&self) -> CdModel {
        self.model
    }

    fn id_space(&self) -> u64 {
        self.space
    }

    fn schedule_length(&self) -> Round {
        self.probes as Round
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        Box::new(BinarySearchDevice {
            id,
            lo: 1,
            hi: self.space,
            alive: true,
            probes_left: self.probes,
            probes_done: 0,
        })
    }

    fn energy_budget(&self) -> Option<u64> {
        Some(self.probes as u64)
    }
}

#[derive(Debug, Clone, Hash)]
pub struct BinarySearchDevice {
    pub id: DeviceId,
    /// Live interval `[lo, hi]`.
    pub lo: u64,
    pub hi: u64,
    pub alive: bool,
    probes_left: u32,
    probes_done: u32,
}

impl BinarySearchDevice {
    fn mid(&self) -> u64 {
        self.lo + (self.hi - self.lo + 1).div_ceil(2) - 1
    }

    pub fn interval_size(&self) -> u64 {
        self.hi - self.lo + 1
    }
}

impl Device for BinarySearchDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        if !self.alive || self.probes_left == 0 || self.lo == self.hi {
            return None;
        }
        let r = self.probes_done as Round;
        debug_assert!(r >= from);
        Some(r.max(from))
    }

    fn act(&mut self, _round: Round) -> Action {
        if self.id <= self.mid() {
            Action::Transmit(Message::Token)
        } else {
            Action::Listen
        }
    }

    fn observe(&mut self, _round: Round, feedback: &Feedback) {
        let mid = self.mid();
        if self.id <= mid {
            self.hi = mid;
        } else if matches!(feedback, Feedback::Silence) {
            self.lo = mid + 1;
        } else {
            self.alive = false;
        }
        self.probes_left -= 1;
        self.probes_done += 1;
    }

    fn verdict(&self) -> Verdict {
        if self.alive && self.lo == self.hi {
            Verdict::LEADER
        } else {
            Verdict::NON_LEADER
        }
    }
}
