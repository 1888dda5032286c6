//! Group building where each block is first ordered by a census.
//!
//! Iteration `i` on block `B_i` with `m` IDs:
//!
//! ```text
//! census (2m - 1 slots) | head -> v1 | v1 -> head | chain (m - 1 slots) | handoff
//! ```
//!
//! Only the first member `v1` of the block talks to the head; the others
//! learn `r` along the chain `v_j -> v_{j+1}`. A founding `v1` sets
//! `s = i + s_i - 1`, the count that keeps `s(head) = |S| + i - 1` true once
//! the rest of its block has joined through the chain.

use std::collections::VecDeque;

use super::census::{census_rounds, CensusMember};
use super::{rank_verdict, Blocks};
use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::error::Result;
use crate::runtime::{Device, Protocol, Round, Verdict};
use crate::util::ceil_log2;

#[derive(Debug, Clone)]
pub struct ImprovedCore {
    pub model: CdModel,
    pub blocks: Blocks,
}

impl ImprovedCore {
    pub fn new(model: CdModel, space: u64, b: u64) -> Result<Self> {
        Ok(ImprovedCore {
            model,
            blocks: Blocks::new(space, b)?,
        })
    }
}

fn iteration_len(m: u64) -> Round {
    census_rounds(m) + m + 2
}

fn base(g: &Blocks, i: u64) -> Round {
    (i - 1) * iteration_len(g.b)
}

/// Slot in which the head transmits to the first member of block `i`.
fn exchange(g: &Blocks, i: u64) -> Round {
    base(g, i) + census_rounds(g.size(i))
}

/// Slot in which member `j` of block `i` passes `r` to member `j + 1`.
fn chain(g: &Blocks, i: u64, j: u64) -> Round {
    exchange(g, i) + 2 + (j - 1)
}

fn handoff(g: &Blocks, i: u64) -> Round {
    exchange(g, i) + 2 + (g.size(i) - 1)
}

impl Protocol for ImprovedCore {
    fn name(&self) -> String {
        "dense-improved-core".into()
    }

    fn model(&self) -> CdModel {
        self.model
    }

    fn id_space(&self) -> u64 {
        self.blocks.n
    }

    fn schedule_length(&self) -> Round {
        let g = &self.blocks;
        let last = g.count();
        base(g, last) + iteration_len(g.size(last))
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        let g = self.blocks;
        let own = g.of(id);
        Box::new(ImprovedDevice {
            id,
            blocks: g,
            census: Some(CensusMember::new(id, g.lo(own), g.size(own))),
            place: None,
            r: None,
            s: None,
            heard: None,
            agenda: VecDeque::new(),
        })
    }

    fn energy_budget(&self) -> Option<u64> {
        Some(2 * ceil_log2(self.blocks.b) as u64 + 8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Step {
    /// `v1` listens to the head.
    FirstListen,
    /// `v1` replies with the block size.
    FirstSend,
    ChainListen,
    ChainSend,
    HeadSend,
    HeadListen,
    HandoffSend,
    HandoffListen,
}

#[derive(Debug, Clone, Hash)]
pub struct ImprovedDevice {
    id: DeviceId,
    blocks: Blocks,
    census: Option<CensusMember>,
    /// Index in the block and block size, once the census is over.
    place: Option<(u64, u64)>,
    r: Option<u64>,
    s: Option<u64>,
    heard: Option<u64>,
    agenda: VecDeque<(Round, Step)>,
}

impl ImprovedDevice {
    pub fn r(&self) -> Option<u64> {
        self.r
    }

    pub fn s(&self) -> Option<u64> {
        self.s
    }

    pub fn place(&self) -> Option<(u64, u64)> {
        self.place
    }

    fn own(&self) -> u64 {
        self.blocks.of(self.id)
    }

    fn plan_block(&mut self, index: u64, size: u64) {
        let g = self.blocks;
        let i = self.own();
        self.place = Some((index, size));
        if index == 1 {
            let x = exchange(&g, i);
            self.agenda.push_back((x, Step::FirstListen));
            self.agenda.push_back((x + 1, Step::FirstSend));
        } else {
            self.agenda.push_back((chain(&g, i, index - 1), Step::ChainListen));
        }
        if index < size {
            self.agenda.push_back((chain(&g, i, index), Step::ChainSend));
        }
    }

    fn plan_group(&mut self, r: u64) {
        let g = self.blocks;
        let own = self.own();
        self.r = Some(r);
        if r == own {
            self.agenda.push_back((handoff(&g, own), Step::HandoffSend));
            return;
        }
        if r - 1 <= g.count() {
            self.agenda.push_back((handoff(&g, r - 1), Step::HandoffListen));
        }
        if r <= g.count() {
            let x = exchange(&g, r);
            self.agenda.push_back((x, Step::HeadSend));
            self.agenda.push_back((x + 1, Step::HeadListen));
            self.agenda.push_back((handoff(&g, r), Step::HandoffSend));
        }
    }
}

impl Device for ImprovedDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        if let Some(c) = self.census.as_mut() {
            if let Some(r) = c.next_active() {
                let r = r + base(&self.blocks, self.own());
                debug_assert!(r >= from);
                return Some(r);
            }
            let result = c.result;
            self.census = None;
            if let Some(res) = result {
                self.plan_block(res.index, res.size);
            }
        }
        let &(r, _) = self.agenda.front()?;
        debug_assert!(r >= from);
        Some(r)
    }

    fn act(&mut self, _round: Round) -> Action {
        if let Some(c) = self.census.as_mut() {
            return c.act();
        }
        let int = |v: Option<u64>| Action::Transmit(Message::Int(v.unwrap_or(0)));
        match self.agenda.front().expect("scheduled").1 {
            Step::FirstListen | Step::ChainListen | Step::HeadListen | Step::HandoffListen => {
                Action::Listen
            }
            Step::FirstSend => int(self.place.map(|p| p.1)),
            Step::ChainSend => int(self.r),
            Step::HeadSend | Step::HandoffSend => int(self.s),
        }
    }

    fn observe(&mut self, _round: Round, feedback: &Feedback) {
        if let Some(c) = self.census.as_mut() {
            c.observe(feedback);
            return;
        }
        let (_, step) = self.agenda.pop_front().expect("scheduled");
        let heard = feedback.message().and_then(Message::as_int);
        match step {
            Step::FirstListen => self.heard = heard,
            Step::FirstSend => match self.heard {
                Some(su) => self.plan_group(su + 1),
                None => {
                    let own = self.own();
                    let size = self.place.map_or(1, |p| p.1);
                    self.s = Some(own + size - 1);
                    self.plan_group(own);
                }
            },
            Step::ChainListen => {
                if let Some(prev) = heard {
                    self.plan_group(prev + 1);
                }
            }
            Step::HeadListen => {
                if let (Some(s), Some(si)) = (self.s, heard) {
                    self.s = Some(s + si);
                }
            }
            Step::HandoffListen => {
                if heard.is_some() {
                    self.s = heard;
                }
            }
            Step::ChainSend | Step::HeadSend | Step::HandoffSend => {}
        }
    }

    fn verdict(&self) -> Verdict {
        rank_verdict(self.r, self.blocks.count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{dense_improved_election, dense_simple_election, SimpleCore};
    use crate::runtime::{execute, Execution};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn ranks(n: u64, b: u64, v: &[u64]) -> BTreeMap<u64, Option<u64>> {
        execute(&dense_improved_election(CdModel::NoCd, n, b).unwrap(), v.iter().copied())
            .unwrap()
            .ranks()
    }

    #[test]
    fn full_four_by_two() {
        let rep = execute(&dense_improved_election(CdModel::NoCd, 4, 2).unwrap(), [1, 2, 3, 4]).unwrap();
        assert_eq!(rep.leader(), Some(3));
    }

    #[test]
    fn upper_block_only() {
        let r = ranks(8, 4, &[5, 6, 7, 8]);
        assert_eq!(
            r,
            BTreeMap::from([(5, None), (6, Some(1)), (7, Some(2)), (8, Some(3))])
        );
        let p = ImprovedCore::new(CdModel::NoCd, 8, 4).unwrap();
        let mut exec = Execution::new(&p, [5, 6, 7, 8]).unwrap();
        exec.run_until(p.schedule_length()).unwrap();
        let rs: Vec<Option<u64>> = exec
            .devices()
            .map(|(_, d)| d.as_any().downcast_ref::<ImprovedDevice>().unwrap().r())
            .collect();
        assert_eq!(rs, vec![Some(2), Some(3), Some(4), Some(5)]);
    }

    #[test]
    fn schedule_bound() {
        for (n, b) in [(4u64, 2u64), (10, 3), (64, 8), (100, 1), (37, 37)] {
            let p = ImprovedCore::new(CdModel::NoCd, n, b).unwrap();
            assert!(p.schedule_length() <= 3 * n + n.div_ceil(b), "N={n} b={b}");
        }
    }

    /// Snapshot `(r, s)` of every device at each iteration boundary and check
    /// that the group is `{r >= i}` with contiguous `r` and `s(head) = |S| + i - 1`.
    fn check_group_invariant<D: 'static>(
        p: &dyn crate::runtime::Protocol,
        g: Blocks,
        v: &[u64],
        boundary: impl Fn(u64) -> Round,
        state: impl Fn(&D) -> (Option<u64>, Option<u64>),
    ) {
        let mut exec = Execution::new(p, v.iter().copied()).unwrap();
        for i in 1..=g.count() + 1 {
            exec.run_until(boundary(i)).unwrap();
            let mut group: Vec<(u64, Option<u64>)> = exec
                .devices()
                .filter_map(|(_, d)| {
                    let (r, s) = state(d.as_any().downcast_ref::<D>().unwrap());
                    r.filter(|&r| r >= i).map(|r| (r, s))
                })
                .collect();
            group.sort();
            for (k, (r, _)) in group.iter().enumerate() {
                assert_eq!(*r, i + k as u64, "V={v:?} i={i}");
            }
            if let Some(&(_, s)) = group.first() {
                if i <= g.count() {
                    assert_eq!(s, Some(group.len() as u64 + i - 1), "V={v:?} i={i}");
                }
            }
        }
    }

    fn improved_boundary(g: Blocks) -> impl Fn(u64) -> Round {
        move |i| if i > g.count() { base(&g, g.count()) + iteration_len(g.size(g.count())) } else { base(&g, i) }
    }

    fn simple_boundary(g: Blocks) -> impl Fn(u64) -> Round {
        move |i| ((2 * g.b + 1) * (i - 1)).min(2 * g.n + g.count())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn same_ranks_as_simple(n in 1u64..80, b in 1u64..12, bits in any::<u128>()) {
            let v: Vec<u64> = (1..=n).filter(|i| bits >> (i - 1) & 1 == 1).collect();
            let a = execute(&dense_simple_election(CdModel::NoCd, n, b).unwrap(), v.iter().copied()).unwrap();
            let c = execute(&dense_improved_election(CdModel::NoCd, n, b).unwrap(), v.iter().copied()).unwrap();
            prop_assert_eq!(a.ranks(), c.ranks());
            let members = a.ranks().values().filter(|r| r.is_some()).count() as u64;
            prop_assert!(members >= (v.len() as u64).saturating_sub(n.div_ceil(b)));
        }

        #[test]
        fn group_invariant_holds(n in 1u64..48, b in 1u64..9, bits in any::<u64>()) {
            let v: Vec<u64> = (1..=n).filter(|i| bits >> (i - 1) & 1 == 1).collect();
            let g = Blocks::new(n, b).unwrap();
            let p = ImprovedCore::new(CdModel::NoCd, n, b).unwrap();
            check_group_invariant::<ImprovedDevice>(&p, g, &v, improved_boundary(g), |d| (d.r(), d.s()));
            let q = SimpleCore::new(CdModel::NoCd, n, b).unwrap();
            check_group_invariant::<crate::dense::simple::SimpleDevice>(&q, g, &v, simple_boundary(g), |d| (d.r(), d.s()));
        }

        #[test]
        fn energy_budgets_hold(n in 1u64..120, b in 1u64..20, bits in any::<u128>(), model in 0usize..4) {
            let model = CdModel::ALL[model];
            let v: Vec<u64> = (1..=n).filter(|i| bits >> (i - 1) & 1 == 1).collect();
            for p in [dense_simple_election(model, n, b).unwrap(), dense_improved_election(model, n, b).unwrap()] {
                let rep = execute(&p, v.iter().copied()).unwrap();
                prop_assert!(rep.ledger.max_energy <= p.energy_budget().unwrap());
                if v.len() as u64 > n.div_ceil(b) {
                    prop_assert!(rep.strict_success);
                }
            }
        }
    }
}
