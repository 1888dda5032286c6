//! Necessary conditions for energy-bounded election, checked against the
//! shipped automata.
//!
//! * canonical action sequences under a fixed adversarial feedback,
//! * pairwise distinctness of those sequences,
//! * how many sequences one `{listen, transmit}` string can match,
//! * potential active slots over the `{collision, silence}` feedback tree,
//! * the counting inequality `N <= sum_{i<=k} C(t, i) 2^i`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{Action, ActionTag, CdModel, DeviceId, Feedback};
use crate::error::{Error, Result};
use crate::runtime::{Device, Protocol, Round};

/// Fixed feedback used to unroll a single device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum FeedbackMode {
    /// Listening hears silence, transmitting yields no feedback.
    ReceiverStyle,
    /// Listening hears silence, transmitting detects a collision.
    StrongStyle,
}

impl FeedbackMode {
    fn feedback(self, action: &Action) -> Feedback {
        match (self, action) {
            (_, Action::Idle) => Feedback::None,
            (_, Action::Listen) => Feedback::Silence,
            (FeedbackMode::ReceiverStyle, Action::Transmit(_)) => Feedback::None,
            (FeedbackMode::StrongStyle, Action::Transmit(_)) => Feedback::Collision,
        }
    }
}

/// Non-idle actions of one ID, sparse over a schedule of `len` rounds.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionSequence {
    pub id: DeviceId,
    pub len: Round,
    pub active: Vec<(Round, ActionTag)>,
}

impl ActionSequence {
    pub fn weight(&self) -> usize {
        self.active.len()
    }

    pub fn dense(&self) -> Vec<ActionTag> {
        let mut out = vec![ActionTag::Idle; self.len as usize];
        for &(r, t) in &self.active {
            out[r as usize] = t;
        }
        out
    }

    fn key(&self) -> &[(Round, ActionTag)] {
        &self.active
    }
}

impl fmt::Display for ActionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.dense() {
            write!(f, "{}", t.letter())?;
        }
        Ok(())
    }
}

fn unroll(dev: &mut dyn Device, schedule: Round, mode: FeedbackMode) -> Vec<(Round, ActionTag)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(r) = dev.next_active(from) {
        if r >= schedule {
            break;
        }
        let action = dev.act(r);
        if !action.is_idle() {
            out.push((r, action.tag()));
            dev.observe(r, &mode.feedback(&action));
        }
        from = r + 1;
    }
    out
}

/// The action sequence of `id` when every listen hears silence and every
/// transmission gets the feedback of `mode`.
pub fn canonical_sequence(protocol: &dyn Protocol, id: DeviceId, mode: FeedbackMode) -> ActionSequence {
    let mut dev = protocol.spawn(id);
    let schedule = protocol.schedule_length();
    ActionSequence {
        id,
        len: schedule,
        active: unroll(dev.as_mut(), schedule, mode),
    }
}

pub fn canonical_sequences(protocol: &dyn Protocol, mode: FeedbackMode) -> Vec<ActionSequence> {
    (1..=protocol.id_space())
        .into_par_iter()
        .map(|id| canonical_sequence(protocol, id, mode))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Uniqueness {
    Ok,
    /// Two IDs with identical sequences; on `V = {j, j'}` the devices act in
    /// lockstep and no slot has exactly one transmitter.
    ViolationPair(DeviceId, DeviceId),
}

/// Pairwise distinctness of the Strong-CD canonical sequences.
pub fn uniqueness_check(protocol: &dyn Protocol) -> Uniqueness {
    let seqs = canonical_sequences(protocol, FeedbackMode::StrongStyle);
    let mut seen: HashMap<&[(Round, ActionTag)], DeviceId> = HashMap::new();
    for s in &seqs {
        if let Some(&first) = seen.get(s.key()) {
            return Uniqueness::ViolationPair(first, s.id);
        }
        seen.insert(s.key(), s.id);
    }
    Uniqueness::Ok
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub max_matched: u64,
    /// Rounds in which some sequence is active.
    pub positions: usize,
    pub candidates: u64,
    pub exhaustive: bool,
    /// `ceil(N / 2^k)`.
    pub threshold: u64,
}

impl MatchResult {
    pub fn holds(&self) -> bool {
        self.max_matched >= self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Exhaustive when at most 20 positions matter, otherwise sampled.
    Auto { trials: u64, seed: u64 },
    Sampled { trials: u64, seed: u64 },
}

/// Largest number of sequences matched by one string `b` over
/// `{listen, transmit}`, where `b` matches `a` iff every non-idle `a_i`
/// equals `b_i`. Only rounds where some sequence is active matter, so the
/// search runs over those.
pub fn matching_count(seqs: &[ActionSequence], k: u32, mode: MatchMode) -> MatchResult {
    let positions: Vec<Round> = seqs
        .iter()
        .flat_map(|s| s.active.iter().map(|&(r, _)| r))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<Round, usize> = positions.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let words = positions.len().div_ceil(64).max(1);
    // (mask, value) bitsets: bit set in value means transmit.
    let encoded: Vec<(Vec<u64>, Vec<u64>)> = seqs
        .iter()
        .map(|s| {
            let mut mask = vec![0u64; words];
            let mut value = vec![0u64; words];
            for &(r, t) in &s.active {
                let i = index[&r];
                mask[i / 64] |= 1 << (i % 64);
                if t == ActionTag::Transmit {
                    value[i / 64] |= 1 << (i % 64);
                }
            }
            (mask, value)
        })
        .collect();
    let count = |b: &[u64]| -> u64 {
        encoded
            .iter()
            .filter(|(m, v)| m.iter().zip(v).zip(b).all(|((m, v), b)| (v ^ b) & m == 0))
            .count() as u64
    };
    let n = seqs.len() as u64;
    let threshold = if k >= 64 { 1.min(n) } else { n.div_ceil(1u64 << k) };
    let (exhaustive, trials, seed) = match mode {
        MatchMode::Auto { trials, seed } => (positions.len() <= 20, trials, seed),
        MatchMode::Sampled { trials, seed } => (false, trials, seed),
    };
    if exhaustive {
        let total = 1u64 << positions.len();
        let max_matched = (0..total)
            .into_par_iter()
            .map(|b| count(&[b]))
            .max()
            .unwrap_or(0);
        return MatchResult {
            max_matched,
            positions: positions.len(),
            candidates: total,
            exhaustive: true,
            threshold,
        };
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let candidates: Vec<Vec<u64>> = (0..trials)
        .map(|_| (0..words).map(|_| rng.gen::<u64>()).collect())
        .collect();
    let max_matched = candidates.par_iter().map(|b| count(b)).max().unwrap_or(0);
    MatchResult {
        max_matched,
        positions: positions.len(),
        candidates: trials,
        exhaustive: false,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PotentialActivity {
    pub id: DeviceId,
    /// Rounds where some `{collision, silence}` history makes the device act.
    pub slots: BTreeSet<Round>,
    /// Distinct states visited in the feedback tree.
    pub states: usize,
}

impl PotentialActivity {
    pub fn count(&self) -> usize {
        self.slots.len()
    }
}

/// Cap on visited states in the feedback-tree walk.
pub const TREE_STATE_LIMIT: usize = 1 << 22;

/// Explore every `{collision, silence}` feedback history of `id`, aborting
/// with `BudgetExceeded` on a branch with more than `k` non-idle slots.
pub fn potential_active_slots(protocol: &dyn Protocol, id: DeviceId, k: u64) -> Result<PotentialActivity> {
    let schedule = protocol.schedule_length();
    let mut slots = BTreeSet::new();
    let mut seen: HashSet<(Round, u64, u64)> = HashSet::new();
    let mut stack: Vec<(Box<dyn Device>, Round, u64)> = vec![(protocol.spawn(id), 0, 0)];
    while let Some((mut dev, from, used)) = stack.pop() {
        let Some(r) = dev.next_active(from) else { continue };
        if r >= schedule {
            continue;
        }
        let action = dev.act(r);
        if action.is_idle() {
            if seen.insert((r + 1, dev.fingerprint(), used)) {
                stack.push((dev, r + 1, used));
            }
            continue;
        }
        slots.insert(r);
        if used + 1 > k {
            return Err(Error::BudgetExceeded { id, budget: k });
        }
        for fb in [Feedback::Collision, Feedback::Silence] {
            let mut child = dev.fork();
            child.observe(r, &fb);
            if seen.insert((r + 1, child.fingerprint(), used + 1)) {
                stack.push((child, r + 1, used + 1));
            }
        }
        if seen.len() > TREE_STATE_LIMIT {
            return Err(Error::InvalidParams(format!(
                "feedback tree of device {id} exceeds {TREE_STATE_LIMIT} states"
            )));
        }
    }
    Ok(PotentialActivity {
        id,
        slots,
        states: seen.len(),
    })
}

/// `sum_{i=1}^{k} C(t, i) 2^i`, the number of sequences of length `t` with
/// between 1 and `k` non-idle entries.
pub fn sequence_capacity(t: u64, k: u64) -> BigUint {
    let mut total = BigUint::from(0u32);
    let mut binom = BigUint::from(1u32);
    let mut pow = BigUint::from(1u32);
    for i in 1..=k.min(t) {
        binom = binom * BigUint::from(t - i + 1) / BigUint::from(i);
        pow *= 2u32;
        total += &binom * &pow;
    }
    total
}

pub fn counting_inequality_holds(n: u64, t: u64, k: u64) -> bool {
    BigUint::from(n) <= sequence_capacity(t, k)
}

/// Wrapper that makes ID `alias.0` run the automaton of `alias.1`, planting
/// a duplicate canonical sequence.
pub struct Aliased<P> {
    pub inner: P,
    pub alias: (DeviceId, DeviceId),
}

impl<P: Protocol> Protocol for Aliased<P> {
    fn name(&self) -> String {
        format!("{}-aliased", self.inner.name())
    }

    fn model(&self) -> CdModel {
        self.inner.model()
    }

    fn id_space(&self) -> u64 {
        self.inner.id_space()
    }

    fn schedule_length(&self) -> Round {
        self.inner.schedule_length()
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        let id = if id == self.alias.0 { self.alias.1 } else { id };
        self.inner.spawn(id)
    }

    fn energy_budget(&self) -> Option<u64> {
        self.inner.energy_budget()
    }
}

/// One line of a check report: `check protocol N k t result witness`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub protocol: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub k: u64,
    pub t: u64,
    pub result: String,
    pub witness: String,
}

/// Run every check against `protocol`, using its declared energy budget as
/// `k` (or the largest canonical weight when it declares none).
pub fn check_protocol(protocol: &dyn Protocol) -> Result<Vec<CheckRow>> {
    let n = protocol.id_space();
    let t = protocol.schedule_length();
    let seqs = canonical_sequences(protocol, FeedbackMode::StrongStyle);
    let weight = seqs.iter().map(|s| s.weight() as u64).max().unwrap_or(0);
    let k = protocol.energy_budget().unwrap_or(weight);
    let name = protocol.name();
    let row = |check: &str, result: String, witness: String| CheckRow {
        check: check.into(),
        protocol: name.clone(),
        n,
        k,
        t,
        result,
        witness,
    };
    let mut rows = Vec::new();
    rows.push(match uniqueness_check(protocol) {
        Uniqueness::Ok => row("uniqueness", "ok".into(), "-".into()),
        Uniqueness::ViolationPair(a, b) => row("uniqueness", "violation".into(), format!("{a};{b}")),
    });
    let m = matching_count(&seqs, weight.min(63) as u32, MatchMode::Auto { trials: 1 << 16, seed: n });
    rows.push(row(
        "matching",
        if m.holds() { "ok" } else { "below-threshold" }.into(),
        format!("{}/{}{}", m.max_matched, m.threshold, if m.exhaustive { "" } else { "~" }),
    ));
    rows.push(row(
        "counting",
        if counting_inequality_holds(n, t, k) { "ok" } else { "violation" }.into(),
        sequence_capacity(t, k).to_string(),
    ));
    let mut worst = 0;
    let mut worst_id = 1;
    for id in 1..=n {
        let pa = potential_active_slots(protocol, id, k)?;
        if pa.count() >= worst {
            worst = pa.count();
            worst_id = id;
        }
    }
    let cap = if k >= 64 { u64::MAX } else { 1u64 << k };
    rows.push(row(
        "potential-active",
        if worst as u64 <= cap { "ok" } else { "violation" }.into(),
        format!("{worst_id}:{worst}"),
    ));
    Ok(rows)
}
