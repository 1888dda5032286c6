//! Strong-CD time/energy trade-off: a few binary-search probes shrink the
//! live ID interval, then a pluggable inner election runs on the residue.

use crate::channel::{Action, CdModel, DeviceId, Feedback};
use crate::protocols::binary_search::{BinarySearchCore, BinarySearchDevice};
use crate::protocols::InnerElection;
use crate::runtime::{Device, Protocol, Round, SubDevice, Verdict};

#[derive(Debug, Clone)]
pub struct HalvingCore {
    probes: BinarySearchCore,
    inner: InnerElection,
    residual: u64,
    inner_len: Round,
}

impl HalvingCore {
    pub fn new(model: CdModel, space: u64, k: u32, inner: InnerElection) -> Self {
        let probes = BinarySearchCore::halvings(model, space, k);
        let residual = probes.residual_space();
        let inner = inner.resolve(model);
        let inner_len = inner.core(model, residual).schedule_length();
        HalvingCore {
            probes,
            inner,
            residual,
            inner_len,
        }
    }

    pub fn probes(&self) -> u32 {
        self.probes.probes
    }

    pub fn residual_space(&self) -> u64 {
        self.residual
    }
}

impl Protocol for HalvingCore {
    fn name(&self) -> String {
        format!("halving-core-k{}", self.probes.probes)
    }

    fn model(&self) -> CdModel {
        self.probes.model
    }

    fn id_space(&self) -> u64 {
        self.probes.space
    }

    fn schedule_length(&self) -> Round {
        self.probes.schedule_length() + self.inner_len
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        let bs = self.probes.spawn(id);
        let bs = bs
            .as_any()
            .downcast_ref::<BinarySearchDevice>()
            .expect("binary search device")
            .clone();
        Box::new(HalvingDevice {
            search: bs,
            inner: None,
            model: self.probes.model,
            inner_kind: self.inner,
            residual: self.residual,
            offset: self.probes.schedule_length(),
        })
    }

    fn energy_budget(&self) -> Option<u64> {
        let inner = self.inner.core(self.probes.model, self.residual).energy_budget()?;
        Some(self.probes.probes as u64 + inner)
    }
}

#[derive(Debug, Clone, Hash)]
pub struct HalvingDevice {
    pub search: BinarySearchDevice,
    inner: Option<SubDevice>,
    model: CdModel,
    inner_kind: InnerElection,
    residual: u64,
    offset: Round,
}

impl HalvingDevice {
    fn start_inner(&mut self) {
        if self.inner.is_none() && self.search.alive {
            let local = self.search.id - self.search.lo + 1;
            let dev = self.inner_kind.core(self.model, self.residual).spawn(local);
            self.inner = Some(SubDevice(dev));
        }
    }
}

impl Device for HalvingDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        if from < self.offset {
            if let Some(r) = self.search.next_active(from) {
                return Some(r);
            }
        }
        self.start_inner();
        let inner = self.inner.as_mut()?;
        inner
            .0
            .next_active(from.saturating_sub(self.offset))
            .map(|r| r + self.offset)
    }

    fn act(&mut self, round: Round) -> Action {
        if round < self.offset {
            self.search.act(round)
        } else {
            let offset = self.offset;
            self.inner
                .as_mut()
                .expect("inner started")
                .0
                .act(round - offset)
        }
    }

    fn observe(&mut self, round: Round, feedback: &Feedback) {
        if round < self.offset {
            self.search.observe(round, feedback)
        } else {
            let offset = self.offset;
            self.inner
                .as_mut()
                .expect("inner started")
                .0
                .observe(round - offset, feedback)
        }
    }

    fn verdict(&self) -> Verdict {
        match &self.inner {
            Some(inner) if self.search.alive => inner.0.verdict(),
            None if self.search.alive && self.residual == 1 => Verdict::LEADER,
            _ => Verdict::NON_LEADER,
        }
    }
}
