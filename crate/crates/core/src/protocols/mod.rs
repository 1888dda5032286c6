//! Leader-election protocols and the glue that composes them.

pub mod binary_search;
pub mod halving;
pub mod pairing;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::dense::{dense_improved_election, dense_simple_election, ExponentialSearch};
use crate::error::{Error, Result};
use crate::partitions::{generate_family, FamilyOptions};
use crate::runtime::{Device, Protocol, ProtocolConfig, Round, SubDevice, Verdict};
use crate::tradeoff::{choose_params, PartitionTradeoff};
use crate::util::ceil_log2;

pub use binary_search::BinarySearchCore;
pub use halving::HalvingCore;
pub use pairing::PairingCore;

/// Election subroutine run on a reduced ID space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InnerElection {
    /// Binary search under Strong-CD/Receiver-CD, pairing otherwise.
    #[default]
    Auto,
    Pairing,
    BinarySearch,
}

impl InnerElection {
    pub fn resolve(self, model: CdModel) -> InnerElection {
        match self {
            InnerElection::Auto if model.receiver_side() => InnerElection::BinarySearch,
            InnerElection::Auto => InnerElection::Pairing,
            other => other,
        }
    }

    /// Election core (no announcement slot) on an ID space of size `space`.
    pub fn core(self, model: CdModel, space: u64) -> Box<dyn Protocol> {
        match self.resolve(model) {
            InnerElection::BinarySearch => Box::new(BinarySearchCore::election(model, space)),
            _ => Box::new(PairingCore::election(model, space)),
        }
    }
}

impl FromStr for InnerElection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "auto" => Ok(InnerElection::Auto),
            "pairing" => Ok(InnerElection::Pairing),
            "binary-search" | "binary" => Ok(InnerElection::BinarySearch),
            _ => Err(format!("unknown inner election `{s}`")),
        }
    }
}

/// Wraps an election core with one final slot in which the elected device
/// transmits and everybody else listens.
pub struct Announced {
    core: Arc<dyn Protocol>,
    name: String,
}

impl Announced {
    pub fn new(name: impl Into<String>, core: impl Protocol + 'static) -> Self {
        Announced {
            core: Arc::new(core),
            name: name.into(),
        }
    }

    pub fn core(&self) -> &dyn Protocol {
        self.core.as_ref()
    }
}

impl Protocol for Announced {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn model(&self) -> CdModel {
        self.core.model()
    }

    fn id_space(&self) -> u64 {
        self.core.id_space()
    }

    fn schedule_length(&self) -> Round {
        self.core.schedule_length() + 1
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        Box::new(AnnouncedDevice {
            core: SubDevice(self.core.spawn(id)),
            slot: self.core.schedule_length(),
            done: false,
        })
    }

    fn energy_budget(&self) -> Option<u64> {
        self.core.energy_budget().map(|e| e + 1)
    }
}

#[derive(Debug, Clone, Hash)]
pub struct AnnouncedDevice {
    pub core: SubDevice,
    slot: Round,
    done: bool,
}

impl Device for AnnouncedDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        if from < self.slot {
            if let Some(r) = self.core.0.next_active(from) {
                return Some(r);
            }
        }
        (!self.done && from <= self.slot).then_some(self.slot)
    }

    fn act(&mut self, round: Round) -> Action {
        if round < self.slot {
            return self.core.0.act(round);
        }
        if self.core.0.verdict().is_leader() {
            Action::Transmit(Message::Token)
        } else {
            Action::Listen
        }
    }

    fn observe(&mut self, round: Round, feedback: &Feedback) {
        if round < self.slot {
            self.core.0.observe(round, feedback);
        } else {
            self.done = true;
        }
    }

    fn verdict(&self) -> Verdict {
        self.core.0.verdict()
    }
}

/// Pairing election: halve the ID space until one ID remains.
pub fn pairing_election(model: CdModel, space: u64) -> Announced {
    Announced::new("pairing", PairingCore::election(model, space))
}

/// Binary search over the ID space (Strong-CD or Receiver-CD).
pub fn binary_search_election(model: CdModel, space: u64) -> Result<Announced> {
    if !model.receiver_side() {
        return Err(Error::InvalidParams(format!(
            "binary search needs receiver-side collision detection, not {model}"
        )));
    }
    Ok(Announced::new(
        "binary-search",
        BinarySearchCore::election(model, space),
    ))
}

/// `k` binary-search halvings followed by an inner election (Strong-CD).
pub fn halving_tradeoff_election(
    model: CdModel,
    space: u64,
    k: u32,
    inner: InnerElection,
) -> Result<Announced> {
    if model != CdModel::StrongCd {
        return Err(Error::InvalidParams(format!(
            "halving trade-off runs under strong-cd, not {model}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidParams("halving needs k >= 1".into()));
    }
    Ok(Announced::new(
        "halving",
        HalvingCore::new(model, space, k, inner),
    ))
}

/// Predicted energy of the pairing election, announcement included.
pub fn pairing_energy_bound(space: u64) -> u64 {
    ceil_log2(space) as u64 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolKind {
    Pairing,
    BinarySearch,
    Halving,
    PartitionTradeoff,
    DenseSimple,
    DenseImproved,
    ExponentialSearch,
    /// Strong-CD dispatch between halving and the partition trade-off,
    /// whichever has the shorter schedule.
    StrongTradeoff,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 8] = [
        ProtocolKind::Pairing,
        ProtocolKind::BinarySearch,
        ProtocolKind::Halving,
        ProtocolKind::PartitionTradeoff,
        ProtocolKind::DenseSimple,
        ProtocolKind::DenseImproved,
        ProtocolKind::ExponentialSearch,
        ProtocolKind::StrongTradeoff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Pairing => "pairing",
            ProtocolKind::BinarySearch => "binary-search",
            ProtocolKind::Halving => "halving",
            ProtocolKind::PartitionTradeoff => "partition-tradeoff",
            ProtocolKind::DenseSimple => "dense-simple",
            ProtocolKind::DenseImproved => "dense-improved",
            ProtocolKind::ExponentialSearch => "exp-search",
            ProtocolKind::StrongTradeoff => "strong-tradeoff",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown protocol `{s}`"))
    }
}

fn require<T>(v: Option<T>, what: &str, kind: ProtocolKind) -> Result<T> {
    v.ok_or_else(|| Error::InvalidParams(format!("{kind} requires {what}")))
}

/// Build a protocol from the shared configuration. Partition families are
/// generated from `cfg.seed` when the protocol needs one.
pub fn build(kind: ProtocolKind, cfg: &ProtocolConfig) -> Result<Box<dyn Protocol>> {
    cfg.validate()?;
    let n_space = cfg.id_space;
    Ok(match kind {
        ProtocolKind::Pairing => Box::new(pairing_election(cfg.model, n_space)),
        ProtocolKind::BinarySearch => Box::new(binary_search_election(cfg.model, n_space)?),
        ProtocolKind::Halving => {
            let k = require(cfg.k, "k", kind)?;
            Box::new(halving_tradeoff_election(
                cfg.model,
                n_space,
                k,
                cfg.inner_election,
            )?)
        }
        ProtocolKind::PartitionTradeoff => Box::new(build_partition(cfg)?),
        ProtocolKind::DenseSimple => {
            Box::new(dense_simple_election(cfg.model, n_space, dense_width(cfg, kind)?)?)
        }
        ProtocolKind::DenseImproved => Box::new(dense_improved_election(
            cfg.model,
            n_space,
            dense_width(cfg, kind)?,
        )?),
        ProtocolKind::ExponentialSearch => Box::new(ExponentialSearch::new(cfg.model, n_space)),
        ProtocolKind::StrongTradeoff => {
            let k = require(cfg.k, "k", kind)?;
            let halving =
                halving_tradeoff_election(cfg.model, n_space, k, cfg.inner_election)?;
            let partition = build_partition(cfg)?;
            if halving.schedule_length() <= partition.schedule_length() {
                Box::new(halving)
            } else {
                Box::new(partition)
            }
        }
    })
}

fn dense_width(cfg: &ProtocolConfig, kind: ProtocolKind) -> Result<u64> {
    if let Some(b) = cfg.b {
        return Ok(b);
    }
    let n = require(cfg.known_n, "b or known n", kind)?;
    Ok(crate::dense::width_for_known_n(cfg.id_space, n))
}

fn build_partition(cfg: &ProtocolConfig) -> Result<PartitionTradeoff> {
    let kind = ProtocolKind::PartitionTradeoff;
    let n = require(cfg.known_upper_n.or(cfg.known_n), "an upper bound on n", kind)?;
    let eps = require(cfg.epsilon, "epsilon", kind)?;
    let k = require(cfg.k, "k", kind)?;
    let params = choose_params(cfg.id_space, n, k, eps)?;
    let family = generate_family(
        cfg.id_space,
        params.b,
        params.epsilon_tilde,
        n,
        cfg.seed,
        &FamilyOptions::default(),
    )?;
    PartitionTradeoff::new(cfg.model, Arc::new(family), cfg.inner_election)
}
