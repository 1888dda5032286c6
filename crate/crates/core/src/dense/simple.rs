//! Group building with one slot pair per ID of the block.
//!
//! For each `j` in block `i` the head `u` (the device with `r(u) = i`)
//! transmits `s(u)` while device `j` listens, then `j` transmits a dummy
//! while `u` listens. Device `j` joins with `r = s(u) + 1`, or founds the
//! group with `r = s = i` if it heard nothing; `u` counts each reply. One
//! handoff slot per iteration passes `s` from `r = i` to `r = i + 1`.

use std::collections::VecDeque;

use super::{rank_verdict, Blocks};
use crate::channel::{Action, CdModel, DeviceId, Feedback, Message};
use crate::error::Result;
use crate::runtime::{Device, Protocol, Round, Verdict};

#[derive(Debug, Clone)]
pub struct SimpleCore {
    pub model: CdModel,
    pub blocks: Blocks,
}

impl SimpleCore {
    pub fn new(model: CdModel, space: u64, b: u64) -> Result<Self> {
        Ok(SimpleCore {
            model,
            blocks: Blocks::new(space, b)?,
        })
    }
}

/// Round of the first slot of iteration `i`.
fn base(g: &Blocks, i: u64) -> Round {
    (2 * g.b + 1) * (i - 1)
}

/// First slot of the pair for ID `j`.
fn pair(g: &Blocks, j: u64) -> Round {
    let i = g.of(j);
    base(g, i) + 2 * (j - g.lo(i))
}

fn handoff(g: &Blocks, i: u64) -> Round {
    base(g, i) + 2 * g.size(i)
}

impl Protocol for SimpleCore {
    fn name(&self) -> String {
        "dense-simple-core".into()
    }

    fn model(&self) -> CdModel {
        self.model
    }

    fn id_space(&self) -> u64 {
        self.blocks.n
    }

    fn schedule_length(&self) -> Round {
        2 * self.blocks.n + self.blocks.count()
    }

    fn spawn(&self, id: DeviceId) -> Box<dyn Device> {
        let g = self.blocks;
        let first = pair(&g, id);
        Box::new(SimpleDevice {
            id,
            blocks: g,
            r: None,
            s: None,
            heard: None,
            agenda: VecDeque::from([(first, Step::OwnListen), (first + 1, Step::OwnSend)]),
        })
    }

    fn energy_budget(&self) -> Option<u64> {
        Some(2 * self.blocks.b + 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Step {
    OwnListen,
    OwnSend,
    HeadSend,
    HeadListen,
    HandoffSend,
    HandoffListen,
}

#[derive(Debug, Clone, Hash)]
pub struct SimpleDevice {
    id: DeviceId,
    blocks: Blocks,
    r: Option<u64>,
    s: Option<u64>,
    heard: Option<u64>,
    agenda: VecDeque<(Round, Step)>,
}

impl SimpleDevice {
    pub fn r(&self) -> Option<u64> {
        self.r
    }

    pub fn s(&self) -> Option<u64> {
        self.s
    }

    fn head(&mut self, i: u64, from_j: u64) {
        let g = self.blocks;
        for j in from_j..=g.hi(i) {
            let p = pair(&g, j);
            self.agenda.push_back((p, Step::HeadSend));
            self.agenda.push_back((p + 1, Step::HeadListen));
        }
        self.agenda.push_back((handoff(&g, i), Step::HandoffSend));
    }

    fn settle(&mut self) {
        let g = self.blocks;
        let own = g.of(self.id);
        match self.heard {
            Some(su) => {
                let r = su + 1;
                self.r = Some(r);
                if r - 1 <= g.count() {
                    self.agenda.push_back((handoff(&g, r - 1), Step::HandoffListen));
                }
                if r <= g.count() {
                    self.head(r, g.lo(r));
                }
            }
            None => {
                self.r = Some(own);
                self.s = Some(own);
                self.head(own, self.id + 1);
            }
        }
    }
}

impl Device for SimpleDevice {
    fn next_active(&mut self, from: Round) -> Option<Round> {
        let &(r, _) = self.agenda.front()?;
        debug_assert!(r >= from);
        Some(r)
    }

    fn act(&mut self, _round: Round) -> Action {
        let s = Message::Int(self.s.unwrap_or(0));
        match self.agenda.front().expect("scheduled").1 {
            Step::OwnListen | Step::HeadListen | Step::HandoffListen => Action::Listen,
            Step::OwnSend => Action::Transmit(Message::Token),
            Step::HeadSend | Step::HandoffSend => Action::Transmit(s),
        }
    }

    fn observe(&mut self, _round: Round, feedback: &Feedback) {
        let (_, step) = self.agenda.pop_front().expect("scheduled");
        let heard = feedback.message().and_then(Message::as_int);
        match step {
            Step::OwnListen => self.heard = heard,
            Step::OwnSend => self.settle(),
            Step::HeadListen => {
                if feedback.message().is_some() {
                    self.s = self.s.map(|s| s + 1);
                }
            }
            Step::HandoffListen => {
                if heard.is_some() {
                    self.s = heard;
                }
            }
            Step::HeadSend | Step::HandoffSend => {}
        }
    }

    fn verdict(&self) -> Verdict {
        rank_verdict(self.r, self.blocks.count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::dense_simple_election;
    use crate::runtime::{execute, Execution};
    use std::collections::BTreeMap;

    fn ranks(n: u64, b: u64, v: &[u64]) -> BTreeMap<u64, Option<u64>> {
        execute(&dense_simple_election(CdModel::NoCd, n, b).unwrap(), v.iter().copied())
            .unwrap()
            .ranks()
    }

    #[test]
    fn full_four_by_two() {
        let r = ranks(4, 2, &[1, 2, 3, 4]);
        assert_eq!(
            r,
            BTreeMap::from([(1, None), (2, None), (3, Some(1)), (4, Some(2))])
        );
    }

    #[test]
    fn r_values_trace() {
        let p = SimpleCore::new(CdModel::NoCd, 4, 2).unwrap();
        let mut exec = Execution::new(&p, [1, 2, 3, 4]).unwrap();
        exec.run_until(p.schedule_length()).unwrap();
        let rs: Vec<Option<u64>> = exec
            .devices()
            .map(|(_, d)| d.as_any().downcast_ref::<SimpleDevice>().unwrap().r())
            .collect();
        assert_eq!(rs, vec![Some(1), Some(2), Some(3), Some(4)]);
    }

    #[test]
    fn lone_device_below_threshold() {
        let rep = execute(&dense_simple_election(CdModel::NoCd, 4, 2).unwrap(), [1]).unwrap();
        assert!(rep.leader().is_none());
        assert!(!rep.strict_success);
    }

    #[test]
    fn empty_block_keeps_head_count() {
        // Block 2 = {3, 4} is empty: the head hears silence twice per ID.
        let p = SimpleCore::new(CdModel::NoCd, 6, 2).unwrap();
        let mut exec = Execution::new(&p, [1, 2, 5, 6]).unwrap();
        exec.run_until(p.schedule_length()).unwrap();
        let get = |exec: &Execution, id| {
            let d = exec.device(id).unwrap().as_any().downcast_ref::<SimpleDevice>().unwrap();
            (d.r(), d.s())
        };
        assert_eq!(get(&exec, 2), (Some(2), Some(2)));
        assert_eq!(get(&exec, 5).0, Some(3));
        assert_eq!(get(&exec, 6).0, Some(4));
        let rep = exec.finish().unwrap();
        assert_eq!(rep.leader(), Some(6));
    }

    #[test]
    fn schedule_and_energy() {
        let p = dense_simple_election(CdModel::NoCd, 10, 3).unwrap();
        assert_eq!(p.schedule_length(), 20 + 4 + 1);
        let rep = execute(&p, 1..=10).unwrap();
        assert!(rep.strict_success);
        assert!(rep.ledger.max_energy <= 2 * 3 + 5);
    }
}
