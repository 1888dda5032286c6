//! Leader election for dense instances by incremental group building.
//!
//! The ID space is cut into `ceil(N/b)` blocks of width `b`. Iteration `i`
//! lets the head of the current group (the member with `r = i`) recruit the
//! devices of block `i`, after which the head drops out. Every device that
//! ever joins receives a distinct `r`, and at most one device leaves per
//! iteration, so whenever `n > ceil(N/b)` some device ends with rank 1.

pub mod census;
pub mod improved;
pub mod search;
pub mod simple;

use crate::channel::CdModel;
use crate::error::{Error, Result};
use crate::protocols::Announced;
use crate::runtime::Verdict;

pub use census::{CensusMember, CensusProtocol, CensusResult};
pub use improved::ImprovedCore;
pub use search::{AttemptPlan, AttemptSummary, ExponentialSearch};
pub use simple::SimpleCore;

/// Block geometry shared by both algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Blocks {
    pub n: u64,
    pub b: u64,
}

impl Blocks {
    pub fn new(n: u64, b: u64) -> Result<Self> {
        if n == 0 || b == 0 {
            return Err(Error::InvalidParams(format!("need N >= 1 and b >= 1, got N={n} b={b}")));
        }
        Ok(Blocks { n, b })
    }

    /// Number of iterations, `ceil(N/b)`.
    pub fn count(&self) -> u64 {
        self.n.div_ceil(self.b)
    }

    /// 1-based block holding `id`.
    pub fn of(&self, id: u64) -> u64 {
        id.div_ceil(self.b)
    }

    pub fn lo(&self, i: u64) -> u64 {
        self.b * (i - 1) + 1
    }

    pub fn hi(&self, i: u64) -> u64 {
        (self.b * i).min(self.n)
    }

    pub fn size(&self, i: u64) -> u64 {
        self.hi(i) - self.lo(i) + 1
    }
}

/// Final verdict from `r`: rank `r - ceil(N/b)` when positive.
pub(crate) fn rank_verdict(r: Option<u64>, iterations: u64) -> Verdict {
    match r {
        Some(r) if r > iterations => {
            let rank = r - iterations;
            Verdict {
                role: if rank == 1 {
                    crate::runtime::Role::Leader
                } else {
                    crate::runtime::Role::NonLeader
                },
                rank: Some(rank),
            }
        }
        _ => Verdict::NON_LEADER,
    }
}

/// Smallest power of two `b` with `n > ceil(N/b)`. For `n <= 1` no width
/// works and the smallest power of two covering `N` is returned.
pub fn width_for_known_n(space: u64, n: u64) -> u64 {
    let mut b = 1u64;
    while b < space && n <= space.div_ceil(b) {
        b *= 2;
    }
    b
}

/// Algorithm with per-ID recruiting slots, plus the announcement slot.
pub fn dense_simple_election(model: CdModel, space: u64, b: u64) -> Result<Announced> {
    Ok(Announced::new("dense-simple", SimpleCore::new(model, space, b)?))
}

/// Census-based algorithm, plus the announcement slot.
pub fn dense_improved_election(model: CdModel, space: u64, b: u64) -> Result<Announced> {
    Ok(Announced::new("dense-improved", ImprovedCore::new(model, space, b)?))
}

/// Exponential search over `b` with ID-space halving between attempts.
pub fn exponential_search_election(model: CdModel, space: u64) -> ExponentialSearch {
    ExponentialSearch::new(model, space)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry() {
        let g = Blocks::new(10, 4).unwrap();
        assert_eq!(g.count(), 3);
        assert_eq!((g.lo(3), g.hi(3), g.size(3)), (9, 10, 2));
        assert_eq!(g.of(8), 2);
        assert!(Blocks::new(4, 0).is_err());
    }

    #[test]
    fn known_n_width() {
        assert_eq!(width_for_known_n(16, 16), 2);
        assert_eq!(width_for_known_n(16, 8), 4);
        assert_eq!(width_for_known_n(16, 9), 2);
        assert_eq!(width_for_known_n(16, 2), 16);
        assert_eq!(width_for_known_n(16, 1), 16);
        for n in 2..=64u64 {
            let b = width_for_known_n(64, n);
            assert!(n > 64u64.div_ceil(b));
            assert!(b == 1 || n <= 64u64.div_ceil(b / 2));
        }
    }
}
