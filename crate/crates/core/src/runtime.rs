//! Round-synchronous execution of a device program over a set of devices.
//!
//! Every protocol declares a static schedule length. Devices are woken only
//! in rounds where they may be non-idle (see [`Device::next_active`]), so the
//! cost of an execution is proportional to the total energy spent rather than
//! to `|V| * rounds`.

use std::any::Any;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::channel::{feedback_for, Action, CdModel, DeviceId, Feedback, Message};
use crate::error::{Error, Result};
use crate::protocols::InnerElection;

/// Zero-based slot index.
pub type Round = u64;

/// Global knowledge shared by every device of an execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub model: CdModel,
    /// Size `N` of the ID space.
    pub id_space: u64,
    pub known_n: Option<u64>,
    pub known_upper_n: Option<u64>,
    pub k: Option<u32>,
    pub epsilon: Option<f64>,
    pub b: Option<u64>,
    pub seed: u64,
    pub inner_election: InnerElection,
}

impl ProtocolConfig {
    pub fn new(model: CdModel, id_space: u64) -> Self {
        ProtocolConfig {
            model,
            id_space,
            known_n: None,
            known_upper_n: None,
            k: None,
            epsilon: None,
            b: None,
            seed: 0,
            inner_election: InnerElection::default(),
        }
    }

    pub fn with_k(mut self, k: u32) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_b(mut self, b: u64) -> Self {
        self.b = Some(b);
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = Some(epsilon);
        self
    }

    pub fn with_upper_n(mut self, n: u64) -> Self {
        self.known_upper_n = Some(n);
        self
    }

    pub fn with_inner(mut self, inner: InnerElection) -> Self {
        self.inner_election = inner;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_space == 0 {
            return Err(Error::InvalidParams("N must be at least 1".into()));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::InvalidParams(format!(
                    "epsilon must lie in (0, 1), got {eps}"
                )));
            }
        }
        if self.b == Some(0) {
            return Err(Error::InvalidParams("b must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Leader,
    NonLeader,
}

/// Final output of one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub role: Role,
    pub rank: Option<u64>,
}

impl Verdict {
    pub const NON_LEADER: Verdict = Verdict {
        role: Role::NonLeader,
        rank: None,
    };
    pub const LEADER: Verdict = Verdict {
        role: Role::Leader,
        rank: None,
    };

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }
}

/// Per-device automaton.
///
/// The driver visits rounds in increasing order. For a device it repeatedly
/// asks `next_active(r)`, calls `act` on the returned round and, when the
/// action is not idle, delivers the slot's feedback through `observe`. Rounds
/// skipped by `next_active` are idle for this device. Actions must be a
/// deterministic function of the ID, the shared configuration and the
/// feedback observed so far.
pub trait Device: DeviceBoxed + Send {
    /// Earliest round `>= from` in which the device may be non-idle, or
    /// `None` once it will stay idle for the rest of the schedule.
    fn next_active(&mut self, from: Round) -> Option<Round>;
    fn act(&mut self, round: Round) -> Action;
    fn observe(&mut self, round: Round, feedback: &Feedback);
    fn verdict(&self) -> Verdict;
}

/// Object-safe cloning, hashing and downcasting for boxed devices.
pub trait DeviceBoxed {
    fn fork(&self) -> Box<dyn Device>;
    fn fingerprint(&self) -> u64;
    fn as_any(&self) -> &dyn Any;
}

impl<T> DeviceBoxed for T
where
    T: Device + Clone + Hash + 'static,
{
    fn fork(&self) -> Box<dyn Device> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        self.hash(&mut h);
        h.finish()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// A boxed device usable as a field of a composite device.
pub struct SubDevice(pub Box<dyn Device>);

impl Clone for SubDevice {
    fn clone(&self) -> Self {
        SubDevice(self.0.fork())
    }
}

impl Hash for SubDevice {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.fingerprint().hash(state)
    }
}

impl fmt::Debug for SubDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SubDevice({:#x})", self.0.fingerprint())
    }
}

/// A leader-election protocol bound to its shared configuration.
pub trait Protocol: Send + Sync {
    fn name(&self) -> String;
    fn model(&self) -> CdModel;
    fn id_space(&self) -> u64;
    fn schedule_length(&self) -> Round;
    fn spawn(&self, id: DeviceId) -> Box<dyn Device>;

    /// Declared per-device energy bound under every feedback history, if the
    /// protocol has one.
    fn energy_budget(&self) -> Option<u64> {
        None
    }
}

/// One non-idle `(round, device)` entry of a transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub id: DeviceId,
    pub action: Action,
    pub feedback: Feedback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub round: Round,
    /// Sorted by device ID.
    pub entries: Vec<TranscriptEntry>,
}

impl RoundRecord {
    pub fn transmitters(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.action, Action::Transmit(_)))
            .count()
    }

    pub fn listeners(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.action, Action::Listen))
            .count()
    }
}

/// Sparse record of an execution: rounds in which every device idled are
/// omitted, as are idle entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub model: CdModel,
    pub devices: Vec<DeviceId>,
    pub round_count: Round,
    pub rounds: Vec<RoundRecord>,
}

fn write_int<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(itoa::Buffer::new().format(v).as_bytes())
}

fn write_payload<W: Write>(w: &mut W, m: &Message) -> io::Result<()> {
    match m {
        Message::Token => w.write_all(b"-"),
        Message::Int(v) => write_int(w, *v),
        Message::List(ids) => {
            for (i, id) in ids.iter().enumerate() {
                if i > 0 {
                    w.write_all(b",")?;
                }
                write_int(w, *id)?;
            }
            Ok(())
        }
    }
}

impl Transcript {
    /// Line format: `round<TAB>id<TAB>action<TAB>payload<TAB>feedback`, one
    /// line per non-idle entry in (round, id) order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for rec in &self.rounds {
            for e in &rec.entries {
                write_int(w, rec.round)?;
                w.write_all(b"\t")?;
                write_int(w, e.id)?;
                w.write_all(&[b'\t', e.action.tag().letter() as u8, b'\t'])?;
                match &e.action {
                    Action::Transmit(m) => write_payload(w, m)?,
                    _ => w.write_all(b"-")?,
                }
                w.write_all(b"\t")?;
                match &e.feedback {
                    Feedback::None => w.write_all(b"-")?,
                    Feedback::Silence => w.write_all(b"S")?,
                    Feedback::Collision => w.write_all(b"C")?,
                    Feedback::Received(m) => {
                        w.write_all(b"R:")?;
                        write_payload(w, m)?;
                    }
                }
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii transcript")
    }

    /// 64-bit FNV-1a digest of the serialized transcript.
    pub fn hash(&self) -> u64 {
        let mut w = io::BufWriter::with_capacity(1 << 16, FnvWriter(FnvHasher::default()));
        self.write_to(&mut w).expect("hash write");
        w.into_inner().map_err(|_| ()).expect("hash flush").0.finish()
    }

    /// Some round has exactly one transmitter and at least one listener.
    pub fn easy_success(&self) -> bool {
        self.rounds
            .iter()
            .any(|r| r.transmitters() == 1 && r.listeners() >= 1)
    }

    /// Count non-idle slots per device straight from the entries.
    pub fn recount_energy(&self) -> BTreeMap<DeviceId, u64> {
        let mut out: BTreeMap<DeviceId, u64> = self.devices.iter().map(|&d| (d, 0)).collect();
        for rec in &self.rounds {
            for e in &rec.entries {
                if !e.action.is_idle() {
                    *out.entry(e.id).or_default() += 1;
                }
            }
        }
        out
    }

    /// Every entry's feedback matches the channel rules for that round.
    pub fn is_consistent(&self) -> bool {
        self.rounds.iter().all(|rec| {
            let count = rec.transmitters();
            let delivered = rec.entries.iter().find_map(|e| match &e.action {
                Action::Transmit(m) if count == 1 => Some(m.clone()),
                _ => None,
            });
            rec.entries.iter().all(|e| {
                feedback_for(self.model, &e.action, count, delivered.as_ref()) == e.feedback
            })
        })
    }
}

struct FnvWriter(FnvHasher);

impl Write for FnvWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub per_device: BTreeMap<DeviceId, u64>,
    pub max_energy: u64,
    pub total_rounds: Round,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub verdicts: BTreeMap<DeviceId, Verdict>,
    pub ledger: EnergyLedger,
    pub strict_success: bool,
    pub easy_success: bool,
    pub transcript_hash: u64,
    pub transcript: Transcript,
}

impl RunReport {
    pub fn leaders(&self) -> Vec<DeviceId> {
        self.verdicts
            .iter()
            .filter(|(_, v)| v.is_leader())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn leader(&self) -> Option<DeviceId> {
        match self.leaders().as_slice() {
            [only] => Some(*only),
            _ => None,
        }
    }

    pub fn ranks(&self) -> BTreeMap<DeviceId, Option<u64>> {
        self.verdicts.iter().map(|(&id, v)| (id, v.rank)).collect()
    }
}

/// Exactly one device claims leadership.
pub fn check_strict_success(verdicts: &BTreeMap<DeviceId, Verdict>) -> bool {
    verdicts.values().filter(|v| v.is_leader()).count() == 1
}

pub fn check_easy_success(transcript: &Transcript) -> bool {
    transcript.easy_success()
}

/// Step-wise execution, exposing device state between rounds for
/// instrumentation.
pub struct Execution<'p> {
    protocol: &'p dyn Protocol,
    model: CdModel,
    schedule: Round,
    // Parallel vectors sorted by device ID; the wake queue holds indices.
    ids: Vec<DeviceId>,
    devices: Vec<Box<dyn Device>>,
    energy: Vec<u64>,
    wake: BinaryHeap<Reverse<(Round, usize)>>,
    rounds: Vec<RoundRecord>,
    processed: Round,
}

impl<'p> Execution<'p> {
    pub fn new<I>(protocol: &'p dyn Protocol, devices: I) -> Result<Self>
    where
        I: IntoIterator<Item = DeviceId>,
    {
        let n_space = protocol.id_space();
        let schedule = protocol.schedule_length();
        let mut ids: Vec<DeviceId> = devices.into_iter().collect();
        ids.sort_unstable();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(Error::BadDeviceSet(w[0]));
            }
        }
        if let Some(&id) = ids.iter().find(|&&id| id == 0 || id > n_space) {
            return Err(Error::BadDeviceSet(id));
        }
        let mut exec = Execution {
            protocol,
            model: protocol.model(),
            schedule,
            devices: ids.iter().map(|&id| protocol.spawn(id)).collect(),
            energy: vec![0; ids.len()],
            wake: BinaryHeap::with_capacity(ids.len()),
            ids,
            rounds: Vec::new(),
            processed: 0,
        };
        for i in 0..exec.ids.len() {
            exec.enqueue(i, 0)?;
        }
        Ok(exec)
    }

    fn enqueue(&mut self, i: usize, from: Round) -> Result<()> {
        if let Some(r) = self.devices[i].next_active(from) {
            debug_assert!(r >= from);
            if r >= self.schedule {
                return Err(Error::ScheduleOverrun {
                    device: self.ids[i],
                    round: r,
                    schedule: self.schedule,
                });
            }
            self.wake.push(Reverse((r, i)));
        }
        Ok(())
    }

    pub fn protocol(&self) -> &dyn Protocol {
        self.protocol
    }

    /// All rounds strictly below this one have been executed.
    pub fn processed(&self) -> Round {
        self.processed
    }

    pub fn device(&self, id: DeviceId) -> Option<&dyn Device> {
        self.ids.binary_search(&id).ok().map(|i| self.devices[i].as_ref())
    }

    pub fn devices(&self) -> impl Iterator<Item = (DeviceId, &dyn Device)> {
        self.ids.iter().copied().zip(self.devices.iter().map(|d| d.as_ref()))
    }

    fn next_round(&self) -> Option<Round> {
        self.wake.peek().map(|Reverse((r, _))| *r)
    }

    /// Execute the next round in which some device is awake. Returns that
    /// round, or `None` when the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<Round>> {
        let Some(round) = self.next_round() else {
            self.processed = self.schedule;
            return Ok(None);
        };
        let mut awake = Vec::new();
        while self.next_round() == Some(round) {
            let Reverse((_, i)) = self.wake.pop().expect("peeked");
            awake.push(i);
        }
        awake.sort_unstable();
        let mut acting: Vec<(usize, Action)> = Vec::with_capacity(awake.len());
        for &i in &awake {
            let action = self.devices[i].act(round);
            if !action.is_idle() {
                acting.push((i, action));
            }
        }
        if !acting.is_empty() {
            let count = acting
                .iter()
                .filter(|(_, a)| matches!(a, Action::Transmit(_)))
                .count();
            let delivered = if count == 1 {
                acting.iter().find_map(|(_, a)| match a {
                    Action::Transmit(m) => Some(m.clone()),
                    _ => None,
                })
            } else {
                None
            };
            let mut entries = Vec::with_capacity(acting.len());
            for (i, action) in acting {
                let fb = feedback_for(self.model, &action, count, delivered.as_ref());
                self.devices[i].observe(round, &fb);
                self.energy[i] += 1;
                entries.push(TranscriptEntry {
                    id: self.ids[i],
                    action,
                    feedback: fb,
                });
            }
            self.rounds.push(RoundRecord { round, entries });
        }
        for i in awake {
            self.enqueue(i, round + 1)?;
        }
        self.processed = round + 1;
        Ok(Some(round))
    }

    /// Execute every round below `round`.
    pub fn run_until(&mut self, round: Round) -> Result<()> {
        while self.next_round().is_some_and(|r| r < round) {
            self.step()?;
        }
        self.processed = self.processed.max(round.min(self.schedule));
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunReport> {
        while self.step()?.is_some() {}
        let verdicts: BTreeMap<DeviceId, Verdict> = self
            .ids
            .iter()
            .zip(&self.devices)
            .map(|(&id, d)| (id, d.verdict()))
            .collect();
        let transcript = Transcript {
            model: self.model,
            devices: self.ids.clone(),
            round_count: self.schedule,
            rounds: self.rounds,
        };
        let max_energy = self.energy.iter().copied().max().unwrap_or(0);
        Ok(RunReport {
            strict_success: check_strict_success(&verdicts),
            easy_success: transcript.easy_success(),
            transcript_hash: transcript.hash(),
            ledger: EnergyLedger {
                per_device: self.ids.iter().copied().zip(self.energy).collect(),
                max_energy,
                total_rounds: self.schedule,
            },
            verdicts,
            transcript,
        })
    }
}

/// Run `protocol` on the device set `devices`.
pub fn execute<I>(protocol: &dyn Protocol, devices: I) -> Result<RunReport>
where
    I: IntoIterator<Item = DeviceId>,
{
    Execution::new(protocol, devices)?.finish()
}

/// Run twice and fail with [`Error::NonDeterminism`] if the replays differ.
pub fn execute_replayed<I>(protocol: &dyn Protocol, devices: I) -> Result<RunReport>
where
    I: IntoIterator<Item = DeviceId>,
{
    let ids: Vec<DeviceId> = devices.into_iter().collect();
    let first = execute(protocol, ids.iter().copied())?;
    let second = execute(protocol, ids.iter().rev().copied())?;
    if first.transcript_hash != second.transcript_hash || first.verdicts != second.verdicts {
        return Err(Error::NonDeterminism {
            first: first.transcript_hash,
            second: second.transcript_hash,
        });
    }
    Ok(first)
}
