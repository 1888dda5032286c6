//! Sender-CD time/energy trade-off built on good partition families.
//!
//! Each iteration walks the `b` parts of one partition. All members of a
//! part transmit together and a device is marked iff it hears its own
//! message back, so a marked device is alone in its part and can use the
//! part index as a fresh ID in `[b]`. Marked devices then run an inner
//! election on `[b]`, and an announcement slot lets everybody stop once a
//! leader exists.

use std::sync::Arc;

use serde::Serialize;

use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::error::{Error, Result};
use crate::partitions::{family_size, within_lemma_range, PartitionFamily, DEFAULT_C};
use crate::protocols::InnerElection;
use crate::runtime::{execute, Device, Protocol, Round, RunReport, SubDevice, Verdict};
use crate::util::{ceil_log2, ceil_log2_log2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TradeoffParams {
    pub n: u64,
    pub known_upper_n: u64,
    /// `k` after clamping to `2 * ceil(log2 N)`.
    pub k: u32,
    pub epsilon: f64,
    pub b: u64,
    pub epsilon_tilde: f64,
    /// 1 when `b = ceil(N^(1/k))` suffices, 2 when `b` is raised to fit `n`.
    pub case: u8,
    /// Family size for the default constant.
    pub family_size: usize,
    pub t_pred: f64,
    pub e_pred: f64,
}

/// Smallest integer `b` with `b^k >= n`.
fn int_root_ceil(n: u64, k: u32) -> u64 {
    let mut b = (n as f64).powf(1.0 / k as f64).round().max(1.0) as u64;
    let pow_ge = |b: u64| (b as u128).checked_pow(k).is_none_or(|p| p >= n as u128);
    while b > 1 && pow_ge(b - 1) {
        b -= 1;
    }
    while !pow_ge(b) {
        b += 1;
    }
    b
}

/// Parameter selection for the trade-off election.
pub fn choose_params(n_space: u64, n: u64, k: u32, epsilon: f64) -> Result<TradeoffParams> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParams(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if n_space == 0 || n == 0 {
        return Err(Error::InvalidParams("N and n must be positive".into()));
    }
    let min_k = ceil_log2_log2(n_space);
    if k < min_k.max(1) {
        return Err(Error::InvalidParams(format!(
            "k = {k} is below ceil(log log N) = {min_k}"
        )));
    }
    let k = k.min(2 * ceil_log2(n_space)).max(1);
    let root = (n_space as f64).powf(1.0 / k as f64);
    let (b, case) = if n as f64 <= root.powf(1.0 - epsilon) * (1.0 + 1e-12) {
        (int_root_ceil(n_space, k), 1)
    } else {
        let mut b = (n as f64).powf(1.0 / (1.0 - epsilon)).floor().max(1.0) as u64;
        while b > 1 && within_lemma_range(n, b - 1, epsilon) {
            b -= 1;
        }
        while !within_lemma_range(n, b, epsilon) {
            b += 1;
        }
        (b, 2)
    };
    let b = b.max(2);
    let log_b_n = ((n_space as f64).ln() / (b as f64).ln()).max(1.0);
    let c = DEFAULT_C;
    Ok(TradeoffParams {
        n: n_space,
        known_upper_n: n,
        k,
        epsilon,
        b,
        epsilon_tilde: epsilon,
        case,
        family_size: family_size(n_space, b, epsilon, c),
        t_pred: 3.0 * (c / epsilon + 1.0) * b as f64 * log_b_n,
        e_pred: (2.0 * c / epsilon + 7.0) * (log_b_n + (b as f64).log2()),
    })
}

/// The trade-off election over a fixed partition family.
pub struct PartitionTradeoff {
    model: CdModel,
    family: Arc<PartitionFamily>,
    inner: InnerElection,
    inner_len: Round,
    inner_budget: u64,
}

impl PartitionTradeoff {
    pub fn new(model: CdModel, family: Arc<PartitionFamily>, inner: InnerElection) -> Result<Self> {
        if !model.sender_side() {
            return Err(Error::InvalidParams(format!(
                "marking needs sender-side collision detection, not {model}"
            )));
        }
        let core = inner.core(model, family.b);
        Ok(PartitionTradeoff {
            model,
            inner: inner.resolve(model),
            inner_len: core.schedule_length(),
            inner_budget: core.energy_budget().unwrap_or(family.b),
            family,
        })
    }

    pub fn family(&self) -> &PartitionFamily {
        &self.family
    }

    /// Rounds in one iteration: marking, inner election, announcement.
    pub fn iteration_len(&self) -> Round {
        self.family.b + self.inner_len + 1
    }

    pub fn marking_slot(&self, iteration: usize, part: u32) -> Round {
        iteration as Round * self.iteration_len() + part as Round - 1
    }

    pub fn announcement_slot(&self, iteration: usize) -> Round {
        (iteration as Round + 1) * self.iteration_len() - 1
    }
}

impl Protocol for PartitionTradeoff {
    fn name(&self) -> String {
        "partition-tradeoff".into()
    }

    fn model(&self) -> CdModel {
        self.model
    }

    fn id_space(&self) -> u64 {
        self.family.n
    }

    fn schedule_length(&self) -> Round {
        self.family.k() as Round * self.iteration_len()
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        Box::new(TradeoffDevice {
            id,
            parts: self.family.partitions.iter().map(|p| p.part(id)).collect(),
            model: self.model,
            inner_kind: self.inner,
            b: self.family.b,
            inner_len: self.inner_len,
            iteration: 0,
            stage: Stage::Mark,
            inner: None,
            marked_in: Vec::new(),
            done: false,
            leader: false,
        })
    }

    fn energy_budget(&self) -> Option<u64> {
        Some(2 * self.family.k() as u64 + self.inner_budget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Stage {
    Mark,
    Inner,
    Announce,
}

#[derive(Debug, Clone, Hash)]
pub struct TradeoffDevice {
    id: DeviceId,
    parts: Vec<u32>,
    model: CdModel,
    inner_kind: InnerElection,
    b: u64,
    inner_len: Round,
    iteration: usize,
    stage: Stage,
    inner: Option<SubDevice>,
    /// `(iteration, part)` for every iteration in which this device was marked.
    pub marked_in: Vec<(usize, u32)>,
    done: bool,
    leader: bool,
}

impl TradeoffDevice {
    fn base(&self) -> Round {
        self.iteration as Round * (self.b + self.inner_len + 1)
    }
}

impl Device for TradeoffDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        while !self.done && self.iteration < self.parts.len() {
            let base = self.base();
            match self.stage {
                Stage::Mark => return Some(base + self.parts[self.iteration] as Round - 1),
                Stage::Inner => {
                    let off = base + self.b;
                    if let Some(inner) = self.inner.as_mut() {
                        if let Some(r) = inner.0.next_active(from.saturating_sub(off)) {
                            return Some(r + off);
                        }
                    }
                    self.stage = Stage::Announce;
                }
                Stage::Announce => return Some(base + self.b + self.inner_len),
            }
        }
        None
    }

    fn act(&mut self, round: Round) -> Action {
        match self.stage {
            Stage::Mark => Action::Transmit(Message::Int(self.id)),
            Stage::Inner => {
                let off = self.base() + self.b;
                self.inner.as_mut().expect("marked").0.act(round - off)
            }
            Stage::Announce => {
                if self.inner.as_ref().is_some_and(|d| d.0.verdict().is_leader()) {
                    self.leader = true;
                    Action::Transmit(Message::Token)
                } else {
                    Action::Listen
                }
            }
        }
    }

    fn observe(&mut self, round: Round, feedback: &Feedback) {
        match self.stage {
            Stage::Mark => {
                if feedback.message() == Some(&Message::Int(self.id)) {
                    let part = self.parts[self.iteration];
                    self.marked_in.push((self.iteration, part));
                    let dev = self.inner_kind.core(self.model, self.b).spawn(part as u64);
                    self.inner = Some(SubDevice(dev));
                }
                self.stage = Stage::Inner;
            }
            Stage::Inner => {
                let off = self.base() + self.b;
                self.inner.as_mut().expect("marked").0.observe(round - off, feedback);
            }
            Stage::Announce => {
                if self.leader || feedback.message().is_some() {
                    self.done = true;
                } else {
                    self.iteration += 1;
                    self.stage = Stage::Mark;
                    self.inner = None;
                }
            }
        }
    }

    fn verdict(&self) -> Verdict {
        if self.leader {
            Verdict::LEADER
        } else {
            Verdict::NON_LEADER
        }
    }
}

/// Run the trade-off election; `NoLeader` when no iteration marks anybody.
pub fn partition_tradeoff_election<I>(protocol: &PartitionTradeoff, devices: I) -> Result<RunReport>
where
    I: IntoIterator<Item = DeviceId>,
{
    let report = execute(protocol, devices)?;
    if report.leader().is_none() {
        return Err(Error::NoLeader);
    }
    Ok(report)
}

/// Energy bound used in the acceptance grid: `2K + 2 ceil(log2 b) + 3`.
pub fn energy_bound(k: usize, b: u64) -> u64 {
    2 * k as u64 + 2 * ceil_log2(b) as u64 + 3
}

/// Round bound used in the acceptance grid: `K (2b + 2)`.
pub fn round_bound(k: usize, b: u64) -> u64 {
    k as u64 * (2 * b + 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitions::{generate_family, FamilyOptions, Partition};
    use crate::runtime::Execution;
    use proptest::prelude::*;

    fn family(n: u64, b: u64, n_max: u64, seed: u64) -> Arc<PartitionFamily> {
        Arc::new(generate_family(n, b, 0.5, n_max, seed, &FamilyOptions::default()).unwrap())
    }

    #[test]
    fn params_case_split() {
        let p = choose_params(1 << 16, 64, 4, 0.5).unwrap();
        assert_eq!((p.case, p.b), (2, 4096));
        let p = choose_params(1 << 16, 1, 16, 0.5).unwrap();
        assert_eq!((p.case, p.b), (1, 2));
        // n = 2 exceeds (2^(16/16))^0.5, so the rule picks the second case.
        let p = choose_params(1 << 16, 2, 16, 0.5).unwrap();
        assert_eq!((p.case, p.b), (2, 4));
        let p = choose_params(1 << 16, 4, 4, 0.5).unwrap();
        assert_eq!((p.case, p.b), (1, 16));
    }

    #[test]
    fn params_validation() {
        assert!(choose_params(1 << 16, 2, 3, 0.5).is_err());
        assert!(choose_params(1 << 16, 2, 4, 1.5).is_err());
        assert!(choose_params(1 << 16, 2, 4, 0.0).is_err());
        assert_eq!(choose_params(1 << 16, 2, 500, 0.5).unwrap().k, 32);
    }

    #[test]
    fn integer_roots() {
        assert_eq!(int_root_ceil(1 << 16, 4), 16);
        assert_eq!(int_root_ceil((1 << 16) + 1, 4), 17);
        assert_eq!(int_root_ceil(1000, 3), 10);
        assert_eq!(int_root_ceil(1001, 3), 11);
        assert_eq!(int_root_ceil(1, 5), 1);
    }

    #[test]
    fn lone_device_wins_first_iteration() {
        let p = PartitionTradeoff::new(CdModel::SenderCd, family(16, 4, 2, 1), InnerElection::Auto).unwrap();
        let rep = partition_tradeoff_election(&p, [7]).unwrap();
        assert_eq!(rep.leader(), Some(7));
        assert!(rep.ledger.total_rounds <= p.schedule_length());
        // Mark, announce; pairing on [4] costs at most two more.
        assert!(rep.ledger.max_energy <= 4);
    }

    #[test]
    fn pair_from_verified_family() {
        let fam = family(16, 4, 2, 1);
        let p = PartitionTradeoff::new(CdModel::SenderCd, fam.clone(), InnerElection::Auto).unwrap();
        let rep = partition_tradeoff_election(&p, [3, 11]).unwrap();
        assert!(rep.strict_success && rep.easy_success);
        // The first iteration separating 3 and 11 marks both.
        let first = fam
            .partitions
            .iter()
            .position(|q| q.part(3) != q.part(11))
            .unwrap();
        let last_active = rep.transcript.rounds.last().unwrap().round;
        assert_eq!(last_active, p.announcement_slot(first));
    }

    #[test]
    fn single_part_family_never_marks() {
        let fam = Arc::new(PartitionFamily::single_part(8, 3));
        let p = PartitionTradeoff::new(CdModel::SenderCd, fam, InnerElection::Auto).unwrap();
        assert!(matches!(partition_tradeoff_election(&p, [2, 5]), Err(Error::NoLeader)));
    }

    #[test]
    fn needs_sender_side_detection() {
        let fam = Arc::new(PartitionFamily::singletons(4));
        assert!(PartitionTradeoff::new(CdModel::ReceiverCd, fam.clone(), InnerElection::Auto).is_err());
        assert!(PartitionTradeoff::new(CdModel::StrongCd, fam, InnerElection::Auto).is_ok());
    }

    #[test]
    fn exhaustive_small_instances() {
        for n in 1..=10u64 {
            let params = choose_params(n, n, 2 * ceil_log2(n).max(1), 0.5).unwrap();
            let fam = Arc::new(
                generate_family(n, params.b, 0.5, n, 5, &FamilyOptions::default()).unwrap(),
            );
            let p = PartitionTradeoff::new(CdModel::SenderCd, fam.clone(), InnerElection::Auto).unwrap();
            for mask in 1u32..(1 << n) {
                let v: Vec<u64> = (1..=n).filter(|i| mask >> (i - 1) & 1 == 1).collect();
                let rep = execute(&p, v.clone()).unwrap();
                assert!(rep.strict_success, "N={n} V={v:?}");
                assert!(rep.ledger.max_energy <= energy_bound(fam.k(), fam.b));
                assert!(rep.ledger.total_rounds <= round_bound(fam.k(), fam.b));
            }
        }
    }

    /// Marked devices were alone in their part: in the transcript they are
    /// the only transmitter of their marking slot.
    fn check_marking(p: &PartitionTradeoff, v: &[u64]) {
        let mut exec = Execution::new(p, v.iter().copied()).unwrap();
        exec.run_until(p.schedule_length()).unwrap();
        let mut per_iter: std::collections::BTreeMap<usize, Vec<u32>> = Default::default();
        for (id, dev) in exec.devices() {
            let d = dev.as_any().downcast_ref::<TradeoffDevice>().unwrap();
            for &(i, j) in &d.marked_in {
                let fam = p.family();
                let together = v.iter().filter(|&&w| fam.partitions[i].part(w) == j).count();
                assert_eq!(together, 1, "device {id} marked but not alone");
                per_iter.entry(i).or_default().push(j);
            }
        }
        for parts in per_iter.values() {
            let mut s = parts.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), parts.len());
        }
        let rep = exec.finish().unwrap();
        // After the first announcement carrying a message nobody acts again.
        let iter_len = p.iteration_len();
        let ann = rep.transcript.rounds.iter().find(|r| {
            (r.round + 1) % iter_len == 0 && r.transmitters() == 1
        });
        if let Some(a) = ann {
            assert_eq!(rep.transcript.rounds.last().unwrap().round, a.round);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn marking_is_sound(seed in 0u64..1000, picks in proptest::collection::btree_set(1u64..=32, 1..6)) {
            let fam = Arc::new(crate::partitions::draw_family(32, 8, 0.5, 2, seed, 2.0));
            let p = PartitionTradeoff::new(CdModel::SenderCd, fam, InnerElection::Auto).unwrap();
            let v: Vec<u64> = picks.into_iter().collect();
            check_marking(&p, &v);
        }
    }

    #[test]
    fn strong_cd_matches_sender_cd_leader() {
        let fam = family(64, 16, 4, 3);
        let ps = PartitionTradeoff::new(CdModel::SenderCd, fam.clone(), InnerElection::Pairing).unwrap();
        let pt = PartitionTradeoff::new(CdModel::StrongCd, fam, InnerElection::Pairing).unwrap();
        for v in [vec![1, 2, 3], vec![10, 40, 41, 64], vec![5]] {
            let a = execute(&ps, v.clone()).unwrap();
            let b = execute(&pt, v).unwrap();
            assert_eq!(a.leader(), b.leader());
            assert!(a.strict_success);
        }
    }

    #[test]
    fn explicit_partition_walkthrough() {
        // Partition 1 lumps everything together, partition 2 splits by parity.
        let fam = PartitionFamily {
            partitions: vec![
                Partition { b: 2, part_of: vec![1, 1, 1, 1] },
                Partition { b: 2, part_of: vec![1, 2, 1, 2] },
            ],
            ..PartitionFamily::single_part(4, 0)
        };
        let fam = PartitionFamily { b: 2, ..fam };
        let p = PartitionTradeoff::new(CdModel::SenderCd, Arc::new(fam), InnerElection::Pairing).unwrap();
        assert_eq!(p.iteration_len(), 2 + 1 + 1);
        let rep = execute(&p, [1, 2, 3]).unwrap();
        // Iteration 2: 2 is alone in part 2, gets new ID 2 and wins on [2].
        assert_eq!(rep.leader(), Some(2));
        assert_eq!(rep.ledger.total_rounds, 8);
    }
}
